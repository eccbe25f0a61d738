#pragma once

// Model assembly: a vision backbone producing a token sequence, an optional
// booster stage that routes the full sequence (CLS included) through a
// frozen language-model block between two trainable linear adapters, CLS
// pooling, and an MLP classifier head. Variants differ only in how the
// booster output recombines with the backbone tokens.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fb/backbones.hpp"
#include "fb/checkpoint.hpp"
#include "fb/llm_block.hpp"

namespace fb {

enum class BoosterVariant { baseline, r_llm, out_r_llm, hybrid_r_llm, mlp_control };

inline const char* to_string(BoosterVariant v) {
  switch (v) {
    case BoosterVariant::baseline: return "baseline";
    case BoosterVariant::r_llm: return "r-llm";
    case BoosterVariant::out_r_llm: return "out-r-llm";
    case BoosterVariant::hybrid_r_llm: return "hybrid-r-llm";
    case BoosterVariant::mlp_control: return "mlp-control";
  }
  return "?";
}

inline BoosterVariant parse_booster_variant(const std::string& s) {
  if (s == "baseline") return BoosterVariant::baseline;
  if (s == "r-llm") return BoosterVariant::r_llm;
  if (s == "out-r-llm") return BoosterVariant::out_r_llm;
  if (s == "hybrid-r-llm") return BoosterVariant::hybrid_r_llm;
  if (s == "mlp-control") return BoosterVariant::mlp_control;
  throw ConfigError("unknown booster variant \"" + s +
                    "\" (expected baseline, r-llm, out-r-llm, hybrid-r-llm, or mlp-control)");
}

// Adapters exist for every non-baseline variant; the llm block only for the
// variants that route tokens through it.
inline bool variant_uses_adapters(BoosterVariant v) { return v != BoosterVariant::baseline; }
inline bool variant_uses_llm(BoosterVariant v) {
  return v == BoosterVariant::r_llm || v == BoosterVariant::out_r_llm ||
         v == BoosterVariant::hybrid_r_llm;
}

struct ModelSpec {
  BackboneConfig backbone;
  BoosterVariant variant = BoosterVariant::baseline;
  bool unfreeze_llm = false;
  LlmBlockConfig llm;

  // The llm config with the freeze state resolved from the model spec.
  LlmBlockConfig llm_config() const {
    LlmBlockConfig cfg = llm;
    cfg.frozen = !unfreeze_llm;
    return cfg;
  }

  void validate() const {
    backbone.validate();
    if (variant_uses_llm(variant)) llm.validate();
    if (unfreeze_llm && !variant_uses_llm(variant)) {
      throw ConfigError(std::string("unfreeze_llm set but variant ") + to_string(variant) +
                        " has no llm block");
    }
  }
};

// Copies llm tensors from a weight file into already registered params.
// The file's d_llm is read off the first norm gain so dimension mismatches
// name both sizes instead of failing on a raw shape compare.
template <typename S>
void load_llm_from_checkpoint(ParamStore<S>& store, const LlmBlockConfig& cfg,
                              const std::string& path) {
  const CheckpointFile file = read_checkpoint(path);
  const CheckpointEntry* probe = nullptr;
  for (const CheckpointEntry& e : file.entries) {
    if (e.name == "llm_block.0.attn_norm.weight") probe = &e;
  }
  if (!probe) throw IoError("checkpoint: " + path + " has no tensor llm_block.0.attn_norm.weight");
  if (probe->shape.size() != 1 || probe->shape[0] != cfg.d_llm) {
    throw ConfigError("llm checkpoint mismatch: config d_llm=" + std::to_string(cfg.d_llm) +
                      ", " + path + " has d_llm=" +
                      std::to_string(probe->shape.empty() ? 0 : probe->shape[0]));
  }
  for (const std::string& name : store.names()) {
    if (name.rfind("llm_block.", 0) != 0) continue;
    const CheckpointEntry* found = nullptr;
    for (const CheckpointEntry& e : file.entries) {
      if (e.name == name) found = &e;
    }
    if (!found) throw IoError("checkpoint: " + path + " has no tensor " + name);
    if (found->dtype != detail::dtype_name<S>()) {
      throw IoError("checkpoint: tensor " + name + " has dtype " + found->dtype +
                    ", run precision expects " + detail::dtype_name<S>());
    }
    Tensor<S>& t = store.at(name);
    if (found->shape != t.shape()) {
      throw ConfigError("llm checkpoint mismatch: tensor " + name + " expects " +
                        shape_str(t.shape()) + ", " + path + " has " + shape_str(found->shape));
    }
    std::memcpy(t.data(), file.payload.data() + found->offset,
                static_cast<std::size_t>(t.numel()) * sizeof(S));
  }
}

// Registration order fixes the init draw order: backbone and classifier,
// then adapters, then llm block.
template <typename S>
void register_model(ParamStore<S>& store, const ModelSpec& spec) {
  spec.validate();
  register_backbone(store, spec.backbone);
  if (variant_uses_adapters(spec.variant)) {
    const index_t dm = spec.backbone.d_model, dl = spec.llm.d_llm;
    store.create("booster.encode.weight", {dm, dl}, true);
    store.create("booster.encode.bias", {dl}, true);
    store.create("booster.decode.weight", {dl, dm}, true);
    store.create("booster.decode.bias", {dm}, true);
  }
  if (variant_uses_llm(spec.variant)) register_llm_params(store, spec.llm_config());
}

template <typename S>
void init_model(ParamStore<S>& store, const ModelSpec& spec, std::uint64_t seed) {
  init_params(store, seed, "llm_block.");
  if (variant_uses_adapters(spec.variant)) {
    // The adapters form a factored linear pair with no residual bypass, so
    // the flat backbone scale starves their gradients. Use the standard
    // fan-in scale for them instead.
    Rng rng(seed ^ 0xada77653u);
    for (const std::string& name : store.names()) {
      if (name.rfind("booster.", 0) != 0) continue;
      Tensor<S>& t = store.at(name);
      if (t.rank() < 2) continue;
      const double stddev = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
      for (auto& v : t.vec()) v = static_cast<S>(rng.next_normal(0.0, stddev));
    }
  }
  if (!variant_uses_llm(spec.variant)) return;
  const LlmBlockConfig cfg = spec.llm_config();
  if (cfg.synthetic) {
    init_llm_synthetic(store, cfg);
  } else {
    if (cfg.checkpoint.empty()) throw ConfigError("llm block: synthetic=false needs a checkpoint");
    load_llm_from_checkpoint(store, cfg, cfg.checkpoint);
  }
}

template <typename S>
ParamStore<S> build_model(const ModelSpec& spec, std::uint64_t seed) {
  ParamStore<S> store;
  register_model(store, spec);
  init_model(store, spec, seed);
  return store;
}

// Booster stage over the full token sequence. With F_E/F_D the adapters and
// F_L the llm block:
//   baseline      t
//   r-llm         F_D(F_L(F_E(t)) + F_E(t))
//   out-r-llm     F_D(F_L(F_E(t))) + t
//   hybrid-r-llm  F_D(F_L(F_E(t)) + F_E(t)) + t
//   mlp-control   F_D(F_E(t))
template <typename S>
Tensor<S> booster_forward(const ModelSpec& spec, const ParamStore<S>& store,
                          const Tensor<S>& tokens,
                          const std::vector<std::uint8_t>& pad_mask = {}) {
  if (spec.variant == BoosterVariant::baseline) return tokens;
  Tensor<S> enc = linear(tokens, store.at("booster.encode.weight"), &store.at("booster.encode.bias"));
  Tensor<S> inner = enc;
  if (variant_uses_llm(spec.variant)) {
    Tensor<S> l = llm_block_forward(spec.llm_config(), store, enc, pad_mask);
    inner = (spec.variant == BoosterVariant::out_r_llm) ? l : add(l, enc);
  }
  Tensor<S> dec =
      linear(inner, store.at("booster.decode.weight"), &store.at("booster.decode.bias"));
  const bool outer = spec.variant == BoosterVariant::out_r_llm ||
                     spec.variant == BoosterVariant::hybrid_r_llm;
  return outer ? add(dec, tokens) : dec;
}

// Full pipeline: backbone tokens, booster, CLS pooling, classifier logits.
template <typename S>
Tensor<S> full_forward(const ModelSpec& spec, const ParamStore<S>& store, const Tensor<S>& batch,
                       TapMap<S>* taps = nullptr, const std::vector<std::uint8_t>& pad_mask = {}) {
  Tensor<S> tokens = backbone_forward(spec.backbone, store, batch, taps);
  Tensor<S> boosted = booster_forward(spec, store, tokens, pad_mask);
  return classify(store, pool_cls(boosted));
}

}  // namespace fb
