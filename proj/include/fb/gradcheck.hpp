#pragma once

#include <cmath>
#include <functional>

#include "fb/ops.hpp"

namespace fb {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central-difference validation of tape gradients in double precision.
// loss_fn must map x to a scalar and be a pure function of x and whatever
// constants it captures. Relative error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& loss_fn, const Tensor<double>& x0,
    double h = 1e-4, double tol = 1e-5) {
  Tensor<double> x(x0.shape(), std::vector<double>(x0.vec()));
  x.set_requires_grad(true);

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn(x);
    tape.backward(loss);
  }
  std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
  if (x.has_grad()) analytic = x.grad();

  GradCheckReport report;
  std::vector<double> probe(x0.vec());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double fp = loss_fn(Tensor<double>(x0.shape(), probe)).item();
    probe[i] = saved - h;
    const double fm = loss_fn(Tensor<double>(x0.shape(), probe)).item();
    probe[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace fb
