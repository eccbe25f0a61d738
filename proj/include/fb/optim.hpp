#pragma once

// AdamW with decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// Decay applies only to matrices (rank >= 2); vectors, gains, and biases
// are exempt. Moment state is kept in double regardless of the parameter
// scalar type. A gradient arriving on a frozen parameter is a contract
// violation, not a silent no-op.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fb/nn.hpp"

namespace fb {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// L2 norm over all trainable gradients, in declaration order.
template <typename S>
double global_grad_norm(const ParamStore<S>& store) {
  double sq = 0.0;
  for (const std::string& name : store.names()) {
    if (!store.trainable(name)) continue;
    const Tensor<S>& t = store.at(name);
    if (!t.has_grad()) continue;
    for (S g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

// Scales every trainable gradient by max_norm / norm when norm exceeds it.
template <typename S>
double clip_global_norm(ParamStore<S>& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (norm <= max_norm || norm == 0.0) return norm;
  const S scale = static_cast<S>(max_norm / norm);
  for (const std::string& name : store.names()) {
    if (!store.trainable(name)) continue;
    Tensor<S>& t = store.at(name);
    if (!t.has_grad()) continue;
    auto& cell = *t.grad_cell();
    for (S& g : cell.values) g *= scale;
  }
  return norm;
}

template <typename S>
class AdamW {
 public:
  AdamW(ParamStore<S>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {}

  // One update over every trainable parameter; lr may differ per step when
  // a schedule drives it. Gradients are left in place for the caller to
  // clear.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const std::string& name : store_->names()) {
      Tensor<S>& th = store_->at(name);
      if (!store_->trainable(name)) {
        if (th.has_grad()) {
          for (S g : th.grad()) {
            if (g != S(0)) {
              throw ContractError("optimizer: frozen parameter " + name + " received a gradient");
            }
          }
        }
        continue;
      }
      const std::size_t n = static_cast<std::size_t>(th.numel());
      std::vector<double>& m = m_[name];
      std::vector<double>& v = v_[name];
      if (m.empty()) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
      }
      static const std::vector<S> kNoGrad;
      const std::vector<S>& grad = th.has_grad() ? th.grad() : kNoGrad;
      const double wd = th.rank() >= 2 ? cfg_.weight_decay : 0.0;
      S* w = th.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        const double w0 = static_cast<double>(w[i]);
        w[i] = static_cast<S>(w0 - lr * m_hat / (std::sqrt(v_hat) + cfg_.eps) - lr * wd * w0);
      }
    }
  }

  void step() { step(cfg_.lr); }

  long steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamStore<S>* store_;
  AdamWConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace fb
