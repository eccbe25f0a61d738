#pragma once

// Parameter registry and the layer functions shared by the vision
// backbones and the frozen language-model block.

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fb/ops.hpp"
#include "fb/rng.hpp"

namespace fb {

// Named parameters in registration order. Names are dot-separated paths;
// the first component is the owning module, which is the grouping used for
// parameter accounting. Trainable parameters carry requires_grad, frozen
// ones do not, so frozen parameters never receive gradients.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& create(const std::string& name, Shape shape, bool trainable) {
    if (index_.count(name)) throw Error("param store: duplicate parameter " + name);
    Entry e;
    e.tensor = Tensor<S>(std::move(shape));
    e.tensor.set_requires_grad(trainable);
    e.trainable = trainable;
    index_.emplace(name, entries_.size());
    order_.push_back(name);
    entries_.push_back(std::move(e));
    return entries_.back().tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) { return entry(name).tensor; }
  const Tensor<S>& at(const std::string& name) const { return entry(name).tensor; }

  bool trainable(const std::string& name) const { return entry(name).trainable; }

  void set_trainable(const std::string& name, bool on) {
    Entry& e = entry(name);
    e.trainable = on;
    e.tensor.set_requires_grad(on);
  }

  const std::vector<std::string>& names() const { return order_; }

  index_t total_params() const {
    index_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  index_t trainable_params() const {
    index_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.tensor.numel();
    }
    return n;
  }

  index_t frozen_params() const { return total_params() - trainable_params(); }

  // Parameter counts grouped by the first path component, in first-seen
  // order.
  std::vector<std::pair<std::string, index_t>> counts_by_module() const {
    std::vector<std::pair<std::string, index_t>> out;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const std::string module = order_[i].substr(0, order_[i].find('.'));
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const auto& p) { return p.first == module; });
      if (it == out.end()) {
        out.emplace_back(module, entries_[i].tensor.numel());
      } else {
        it->second += entries_[i].tensor.numel();
      }
    }
    return out;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

 private:
  struct Entry {
    Tensor<S> tensor;
    bool trainable = true;
  };

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("param store: unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("param store: unknown parameter " + name);
    return entries_[it->second];
  }

  std::vector<std::string> order_;
  std::deque<Entry> entries_;  // deque: references stay valid across create()
  std::unordered_map<std::string, std::size_t> index_;
};

// Fills trainable parameters in registration order from one generator:
// biases zero, rank-1 weights (norm gains) one, everything else
// N(0, 0.02). Parameters under `skip_prefix` keep their existing values;
// the language-model block draws its weights from its own source instead.
template <typename S>
void init_params(ParamStore<S>& store, std::uint64_t seed, const std::string& skip_prefix = "") {
  Rng rng(seed);
  for (const std::string& name : store.names()) {
    if (!skip_prefix.empty() && name.rfind(skip_prefix, 0) == 0) continue;
    Tensor<S>& t = store.at(name);
    const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_bias) {
      std::fill(t.vec().begin(), t.vec().end(), S(0));
    } else if (t.rank() <= 1) {
      std::fill(t.vec().begin(), t.vec().end(), S(1));
    } else {
      for (auto& v : t.vec()) v = static_cast<S>(rng.next_normal(0.0, 0.02));
    }
  }
}

// y = x W (+ b). rowseq selects the row-sequential kernel whose output is
// bitwise independent of token order; the default blocked GEMM is faster.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w,
                 std::type_identity_t<const Tensor<S>*> b = nullptr, bool rowseq = false) {
  Tensor<S> y = rowseq ? matmul_rowseq(x, w) : matmul(x, w);
  if (b) y = add(y, *b);
  return y;
}

template <typename S>
struct AttentionParams {
  const Tensor<S>* wq = nullptr;
  const Tensor<S>* wk = nullptr;
  const Tensor<S>* wv = nullptr;
  const Tensor<S>* wo = nullptr;
  const Tensor<S>* bq = nullptr;  // biases may be null (one flag for all four)
  const Tensor<S>* bk = nullptr;
  const Tensor<S>* bv = nullptr;
  const Tensor<S>* bo = nullptr;
};

// Multi-head self-attention over x [B, T, d]. keep_mask is empty or B*T
// bytes (nonzero = real token); masked keys get exactly zero weight, and a
// mask of all ones is bitwise identical to no mask. No causal masking
// exists anywhere in this codebase.
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, int n_heads, const AttentionParams<S>& p,
                               const std::vector<std::uint8_t>& keep_mask = {},
                               bool canonical = false) {
  if (x.rank() != 3) {
    throw ShapeError("attention: input must be [batch, tokens, d_model], got " +
                     shape_str(x.shape()));
  }
  const index_t B = x.shape()[0], T = x.shape()[1], d = x.shape()[2];
  if (n_heads <= 0 || d % n_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  const index_t hd = d / n_heads;
  const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

  auto split = [&](const Tensor<S>& proj) {
    return permute(reshape(proj, {B, T, n_heads, hd}), {0, 2, 1, 3});
  };
  Tensor<S> q = split(linear(x, *p.wq, p.bq, canonical));
  Tensor<S> k = split(linear(x, *p.wk, p.bk, canonical));
  Tensor<S> v = split(linear(x, *p.wv, p.bv, canonical));
  Tensor<S> o = attention_core(q, k, v, keep_mask, att_scale, canonical);
  Tensor<S> merged = reshape(permute(o, {0, 2, 1, 3}), {B, T, d});
  return linear(merged, *p.wo, p.bo, canonical);
}

// Two-layer MLP with a gelu between: gelu(x W1 + b1) W2 + b2.
template <typename S>
Tensor<S> mlp_gelu(const Tensor<S>& x, const Tensor<S>& w1, const Tensor<S>& b1,
                   const Tensor<S>& w2, const Tensor<S>& b2) {
  return linear(gelu(linear(x, w1, &b1)), w2, &b2);
}

// Gated MLP: (silu(x Wg) * (x Wu)) Wd, no biases.
template <typename S>
Tensor<S> mlp_swiglu(const Tensor<S>& x, const Tensor<S>& wg, const Tensor<S>& wu,
                     const Tensor<S>& wd, bool rowseq = false) {
  Tensor<S> gate = silu(linear(x, wg, nullptr, rowseq));
  Tensor<S> up = linear(x, wu, nullptr, rowseq);
  return linear(mul(gate, up), wd, nullptr, rowseq);
}

}  // namespace fb
