#pragma once

// Frozen LLaMA-style pre-norm transformer block: RMSNorm, bias-free
// attention with padding-only masking, SwiGLU MLP, and no positional
// encoding of any kind. Because nothing in the block depends on token
// position, its forward pass commutes exactly with token permutations;
// every kernel it touches runs in canonical (position-independent) order
// to keep that true at the bit level. Rotary embeddings are not
// implemented at all, so no configuration can reintroduce position.

#include <cstdint>
#include <string>

#include "fb/nn.hpp"

namespace fb {

struct LlmBlockConfig {
  index_t d_llm = 4096;
  int n_heads = 32;
  index_t d_ffn = 11008;
  double eps = 1e-5;
  int depth = 1;  // stack depth; the design unit is a single block
  bool synthetic = true;
  std::uint64_t seed = 0;   // synthetic source
  std::string checkpoint;   // weight file, used when synthetic = false
  bool frozen = true;

  void validate() const {
    if (d_llm <= 0 || n_heads <= 0 || d_llm % n_heads != 0) {
      throw ConfigError("llm block: d_llm " + std::to_string(d_llm) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (d_ffn < 0) throw ConfigError("llm block: negative d_ffn");
    if (depth < 1) throw ConfigError("llm block: depth must be >= 1");
  }
};

// Parameters of one block: attention q/k/v/o (4 d^2, no biases), SwiGLU
// gate/up/down (3 d d_ffn), two rmsnorm gains (2 d).
inline index_t llm_param_count(const LlmBlockConfig& cfg) {
  const index_t d = cfg.d_llm;
  return static_cast<index_t>(cfg.depth) * (4 * d * d + 3 * d * cfg.d_ffn + 2 * d);
}

template <typename S>
void register_llm_params(ParamStore<S>& store, const LlmBlockConfig& cfg) {
  cfg.validate();
  const bool trainable = !cfg.frozen;
  const index_t d = cfg.d_llm, f = cfg.d_ffn;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = "llm_block." + std::to_string(i) + ".";
    store.create(p + "attn_norm.weight", {d}, trainable);
    store.create(p + "attn.q.weight", {d, d}, trainable);
    store.create(p + "attn.k.weight", {d, d}, trainable);
    store.create(p + "attn.v.weight", {d, d}, trainable);
    store.create(p + "attn.o.weight", {d, d}, trainable);
    store.create(p + "mlp_norm.weight", {d}, trainable);
    store.create(p + "mlp.gate.weight", {d, f}, trainable);
    store.create(p + "mlp.up.weight", {d, f}, trainable);
    store.create(p + "mlp.down.weight", {f, d}, trainable);
  }
}

// Deterministic stand-in weights: projections N(0, 0.02/sqrt(2)) drawn in
// registration order from one generator, norm gains one.
template <typename S>
void init_llm_synthetic(ParamStore<S>& store, const LlmBlockConfig& cfg) {
  Rng rng(cfg.seed);
  const double stddev = 0.02 / std::sqrt(2.0);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = "llm_block." + std::to_string(i) + ".";
    for (const char* leaf : {"attn_norm.weight", "attn.q.weight", "attn.k.weight", "attn.v.weight",
                             "attn.o.weight", "mlp_norm.weight", "mlp.gate.weight", "mlp.up.weight",
                             "mlp.down.weight"}) {
      Tensor<S>& t = store.at(p + leaf);
      if (t.rank() <= 1) {
        std::fill(t.vec().begin(), t.vec().end(), S(1));
      } else {
        for (auto& v : t.vec()) v = static_cast<S>(rng.next_normal(0.0, stddev));
      }
    }
  }
}

// x1 = x + attn(rmsnorm(x)); out = x1 + swiglu(rmsnorm(x1)), per block.
// pad_mask: empty or B*T bytes, nonzero = real token.
template <typename S>
Tensor<S> llm_block_forward(const LlmBlockConfig& cfg, const ParamStore<S>& store,
                            const Tensor<S>& tokens,
                            const std::vector<std::uint8_t>& pad_mask = {}) {
  if (tokens.rank() != 3 || tokens.shape()[2] != cfg.d_llm) {
    throw ShapeError("llm block: tokens must be [batch, tokens, " + std::to_string(cfg.d_llm) +
                     "], got " + shape_str(tokens.shape()));
  }
  const S eps = static_cast<S>(cfg.eps);
  Tensor<S> x = tokens;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = "llm_block." + std::to_string(i) + ".";
    AttentionParams<S> ap;
    ap.wq = &store.at(p + "attn.q.weight");
    ap.wk = &store.at(p + "attn.k.weight");
    ap.wv = &store.at(p + "attn.v.weight");
    ap.wo = &store.at(p + "attn.o.weight");
    Tensor<S> h = rmsnorm(x, store.at(p + "attn_norm.weight"), eps);
    Tensor<S> x1 = add(x, multi_head_attention(h, cfg.n_heads, ap, pad_mask, /*canonical=*/true));
    Tensor<S> h2 = rmsnorm(x1, store.at(p + "mlp_norm.weight"), eps);
    x = add(x1, mlp_swiglu(h2, store.at(p + "mlp.gate.weight"), store.at(p + "mlp.up.weight"),
                           store.at(p + "mlp.down.weight"), /*rowseq=*/true));
  }
  return x;
}

}  // namespace fb
