#pragma once

// Vision transformer backbones producing token sequences: a 2D ViT, a 3D
// ViT with joint space attention over tubelets, and a factorised
// spatial-then-temporal encoder for volumes treated as frame stacks. Plus
// CLS pooling and the MLP classifier head.

#include <map>
#include <string>
#include <vector>

#include "fb/nn.hpp"

namespace fb {

enum class BackboneKind { vit2d, vit3d, vivit_factorised };

inline std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::vit2d: return "vit2d";
    case BackboneKind::vit3d: return "vit3d";
    case BackboneKind::vivit_factorised: return "vivit_factorised";
  }
  return "?";
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "vit2d") return BackboneKind::vit2d;
  if (s == "vit3d") return BackboneKind::vit3d;
  if (s == "vivit_factorised") return BackboneKind::vivit_factorised;
  throw ConfigError("backbone: unknown kind \"" + s + "\"");
}

// Shared layer-norm epsilon for the vision blocks (the language block has
// its own configurable rmsnorm epsilon).
inline constexpr double kLayerNormEps = 1e-5;

struct BackboneConfig {
  BackboneKind kind = BackboneKind::vit2d;
  index_t d_model = 64;
  int depth = 4;
  int depth_temporal = 0;        // vivit_factorised only
  int n_heads = 4;
  double ffn_ratio = 4.0;
  std::vector<index_t> patch;    // {P} or {Ph, Pw} for 2D; {P} or {Pd, Ph, Pw} for 3D
  std::vector<index_t> input;    // {C, H, W} for 2D; {C, D, H, W} for 3D
  index_t n_classes = 2;
  std::string pooling = "cls_token";

  bool is_3d() const { return kind != BackboneKind::vit2d; }

  // Patch extents normalised to one entry per spatial axis.
  std::vector<index_t> patch_dims() const {
    if (!is_3d()) {
      if (patch.size() == 1) return {patch[0], patch[0]};
      if (patch.size() == 2) return patch;
      throw ConfigError("backbone: 2D patch needs 1 or 2 extents");
    }
    if (patch.size() == 1) return {patch[0], patch[0], patch[0]};
    if (patch.size() == 3) return patch;
    throw ConfigError("backbone: 3D patch needs 1 or 3 extents");
  }

  index_t ffn_dim() const {
    const auto f = static_cast<index_t>(d_model * ffn_ratio + 0.5);
    if (f <= 0) throw ConfigError("backbone: ffn_ratio yields empty hidden dim");
    return f;
  }

  void validate() const {
    if (d_model <= 0) throw ConfigError("backbone: d_model must be positive");
    if (depth < 1) throw ConfigError("backbone: depth must be >= 1");
    if (kind == BackboneKind::vivit_factorised && depth_temporal < 1) {
      throw ConfigError("backbone: vivit_factorised needs depth_temporal >= 1");
    }
    if (n_heads <= 0 || d_model % n_heads != 0) {
      throw ConfigError("backbone: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (input.size() != (is_3d() ? 4u : 3u)) {
      throw ConfigError("backbone: " + to_string(kind) + " input needs " +
                        std::string(is_3d() ? "4" : "3") + " dims (got " +
                        std::to_string(input.size()) + ")");
    }
    for (index_t e : input) {
      if (e <= 0) throw ConfigError("backbone: non-positive input extent");
    }
    const auto pd = patch_dims();
    for (index_t e : pd) {
      if (e <= 0) throw ConfigError("backbone: non-positive patch extent");
    }
    if (n_classes < 2) throw ConfigError("backbone: n_classes must be >= 2");
    if (pooling != "cls_token") {
      throw ConfigError("backbone: pooling \"" + pooling + "\" is not supported (use cls_token)");
    }
    (void)ffn_dim();
    (void)tokens_per_sample();
  }

  // Patch-count formulas; divisibility is rechecked with exact extents at
  // embed time.
  index_t frames() const {
    const auto pd = patch_dims();
    if (input[1] % pd[0] != 0) {
      throw ConfigError("backbone: D=" + std::to_string(input[1]) + " not divisible by patch " +
                        std::to_string(pd[0]));
    }
    return input[1] / pd[0];
  }

  index_t tokens_per_frame() const {
    const auto pd = patch_dims();
    const index_t H = is_3d() ? input[2] : input[1];
    const index_t W = is_3d() ? input[3] : input[2];
    const index_t Ph = is_3d() ? pd[1] : pd[0];
    const index_t Pw = is_3d() ? pd[2] : pd[1];
    if (H % Ph != 0 || W % Pw != 0) {
      throw ConfigError("backbone: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                        " not divisible by patch " + std::to_string(Ph) + "x" + std::to_string(Pw));
    }
    return (H / Ph) * (W / Pw);
  }

  index_t tokens_per_sample() const {
    switch (kind) {
      case BackboneKind::vit2d: return tokens_per_frame();
      case BackboneKind::vit3d: return frames() * tokens_per_frame();
      case BackboneKind::vivit_factorised: return frames() * tokens_per_frame();
    }
    return 0;
  }

  // Token count of the sequence the backbone hands to the next stage
  // (includes the CLS position).
  index_t output_tokens() const {
    return kind == BackboneKind::vivit_factorised ? frames() + 1 : tokens_per_sample() + 1;
  }
};

// ---------------------------------------------------------------------------
// Patch embeds
// ---------------------------------------------------------------------------

// Non-overlapping P×P patches of [B,C,H,W], flattened and projected to d.
template <typename S>
Tensor<S> patch_embed_2d(const Tensor<S>& images, const Tensor<S>& w, const Tensor<S>& b,
                         index_t Ph, index_t Pw) {
  if (images.rank() != 4) {
    throw ShapeError("patch_embed_2d: expected [B, C, H, W], got " + shape_str(images.shape()));
  }
  const index_t B = images.shape()[0], C = images.shape()[1];
  const index_t H = images.shape()[2], W = images.shape()[3];
  if (Ph <= 0 || Pw <= 0 || H % Ph != 0 || W % Pw != 0) {
    throw ShapeError("patch_embed_2d: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                     " not divisible by P=" + std::to_string(Ph) +
                     (Ph == Pw ? "" : "x" + std::to_string(Pw)));
  }
  const index_t Hp = H / Ph, Wp = W / Pw;
  Tensor<S> x = reshape(images, {B, C, Hp, Ph, Wp, Pw});
  x = permute(x, {0, 2, 4, 1, 3, 5});          // [B, Hp, Wp, C, Ph, Pw]
  x = reshape(x, {B, Hp * Wp, C * Ph * Pw});   // row-major patch order
  return linear(x, w, &b);
}

// Tubelet patchification of [B,C,D,H,W]; token order is depth-major, so a
// factorised encoder can view the result as frames × per-frame patches.
template <typename S>
Tensor<S> patch_embed_3d(const Tensor<S>& volumes, const Tensor<S>& w, const Tensor<S>& b,
                         index_t Pd, index_t Ph, index_t Pw) {
  if (volumes.rank() != 5) {
    throw ShapeError("patch_embed_3d: expected [B, C, D, H, W], got " + shape_str(volumes.shape()));
  }
  const index_t B = volumes.shape()[0], C = volumes.shape()[1];
  const index_t D = volumes.shape()[2], H = volumes.shape()[3], W = volumes.shape()[4];
  if (Pd <= 0 || Ph <= 0 || Pw <= 0 || D % Pd != 0 || H % Ph != 0 || W % Pw != 0) {
    throw ShapeError("patch_embed_3d: D=" + std::to_string(D) + ", H=" + std::to_string(H) +
                     ", W=" + std::to_string(W) + " not divisible by P=(" + std::to_string(Pd) +
                     "," + std::to_string(Ph) + "," + std::to_string(Pw) + ")");
  }
  const index_t Dp = D / Pd, Hp = H / Ph, Wp = W / Pw;
  Tensor<S> x = reshape(volumes, {B, C, Dp, Pd, Hp, Ph, Wp, Pw});
  x = permute(x, {0, 2, 4, 6, 1, 3, 5, 7});              // [B, Dp, Hp, Wp, C, Pd, Ph, Pw]
  x = reshape(x, {B, Dp * Hp * Wp, C * Pd * Ph * Pw});
  return linear(x, w, &b);
}

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

template <typename S>
void register_encoder_blocks(ParamStore<S>& st, const std::string& prefix, index_t d, index_t ffn,
                             int depth) {
  for (int i = 0; i < depth; ++i) {
    const std::string p = prefix + "blocks." + std::to_string(i) + ".";
    st.create(p + "ln1.weight", {d}, true);
    st.create(p + "ln1.bias", {d}, true);
    for (const char* proj : {"q", "k", "v", "o"}) {
      st.create(p + "attn." + std::string(proj) + ".weight", {d, d}, true);
      st.create(p + "attn." + std::string(proj) + ".bias", {d}, true);
    }
    st.create(p + "ln2.weight", {d}, true);
    st.create(p + "ln2.bias", {d}, true);
    st.create(p + "mlp.fc1.weight", {d, ffn}, true);
    st.create(p + "mlp.fc1.bias", {ffn}, true);
    st.create(p + "mlp.fc2.weight", {ffn, d}, true);
    st.create(p + "mlp.fc2.bias", {d}, true);
  }
  st.create(prefix + "final_ln.weight", {d}, true);
  st.create(prefix + "final_ln.bias", {d}, true);
}

template <typename S>
void register_backbone(ParamStore<S>& st, const BackboneConfig& cfg) {
  cfg.validate();
  const index_t d = cfg.d_model, ffn = cfg.ffn_dim();
  const auto pd = cfg.patch_dims();
  const index_t C = cfg.input[0];
  index_t patch_elems = C;
  for (index_t e : pd) patch_elems *= e;
  st.create("backbone.patch.weight", {patch_elems, d}, true);
  st.create("backbone.patch.bias", {d}, true);
  if (cfg.kind == BackboneKind::vivit_factorised) {
    st.create("backbone.spatial.cls", {1, 1, d}, true);
    st.create("backbone.spatial.pos", {1, cfg.tokens_per_frame() + 1, d}, true);
    register_encoder_blocks(st, "backbone.spatial.", d, ffn, cfg.depth);
    st.create("backbone.temporal.cls", {1, 1, d}, true);
    st.create("backbone.temporal.pos", {1, cfg.frames() + 1, d}, true);
    register_encoder_blocks(st, "backbone.temporal.", d, ffn, cfg.depth_temporal);
  } else {
    st.create("backbone.cls", {1, 1, d}, true);
    st.create("backbone.pos", {1, cfg.tokens_per_sample() + 1, d}, true);
    register_encoder_blocks(st, "backbone.", d, ffn, cfg.depth);
  }
  st.create("classifier.fc1.weight", {d, d}, true);
  st.create("classifier.fc1.bias", {d}, true);
  st.create("classifier.fc2.weight", {d, cfg.n_classes}, true);
  st.create("classifier.fc2.bias", {cfg.n_classes}, true);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename S>
using TapMap = std::map<std::string, Tensor<S>>;

template <typename S>
Tensor<S> with_cls_and_pos(const ParamStore<S>& st, const std::string& prefix,
                           const Tensor<S>& tokens) {
  const index_t B = tokens.shape()[0], d = tokens.shape()[2];
  Tensor<S> cls = broadcast_to(st.at(prefix + "cls"), {B, 1, d});
  Tensor<S> x = concat(cls, tokens, 1);
  return add(x, st.at(prefix + "pos"));
}

// Pre-norm blocks followed by a final layer norm. Records each block's
// post-residual output under tap_prefix + "blocks.i" when taps is given.
template <typename S>
Tensor<S> run_encoder(const ParamStore<S>& st, const std::string& prefix, Tensor<S> x, int depth,
                      int n_heads, TapMap<S>* taps = nullptr, const std::string& tap_prefix = "") {
  const S eps = static_cast<S>(kLayerNormEps);
  for (int i = 0; i < depth; ++i) {
    const std::string p = prefix + "blocks." + std::to_string(i) + ".";
    AttentionParams<S> ap;
    ap.wq = &st.at(p + "attn.q.weight");
    ap.wk = &st.at(p + "attn.k.weight");
    ap.wv = &st.at(p + "attn.v.weight");
    ap.wo = &st.at(p + "attn.o.weight");
    ap.bq = &st.at(p + "attn.q.bias");
    ap.bk = &st.at(p + "attn.k.bias");
    ap.bv = &st.at(p + "attn.v.bias");
    ap.bo = &st.at(p + "attn.o.bias");
    Tensor<S> h = layernorm(x, st.at(p + "ln1.weight"), st.at(p + "ln1.bias"), eps);
    x = add(x, multi_head_attention(h, n_heads, ap));
    Tensor<S> h2 = layernorm(x, st.at(p + "ln2.weight"), st.at(p + "ln2.bias"), eps);
    x = add(x, mlp_gelu(h2, st.at(p + "mlp.fc1.weight"), st.at(p + "mlp.fc1.bias"),
                        st.at(p + "mlp.fc2.weight"), st.at(p + "mlp.fc2.bias")));
    if (taps) (*taps)[tap_prefix + "blocks." + std::to_string(i)] = x;
  }
  return layernorm(x, st.at(prefix + "final_ln.weight"), st.at(prefix + "final_ln.bias"), eps);
}

// F_V: batch of images/volumes to a token sequence [B, T+1, d_model] whose
// first row is the CLS token.
template <typename S>
Tensor<S> backbone_forward(const BackboneConfig& cfg, const ParamStore<S>& st,
                           const Tensor<S>& batch, TapMap<S>* taps = nullptr) {
  const auto pd = cfg.patch_dims();
  const Tensor<S>& pw = st.at("backbone.patch.weight");
  const Tensor<S>& pb = st.at("backbone.patch.bias");
  switch (cfg.kind) {
    case BackboneKind::vit2d: {
      Tensor<S> tok = patch_embed_2d(batch, pw, pb, pd[0], pd[1]);
      Tensor<S> x = with_cls_and_pos(st, "backbone.", tok);
      return run_encoder(st, "backbone.", x, cfg.depth, cfg.n_heads, taps);
    }
    case BackboneKind::vit3d: {
      Tensor<S> tok = patch_embed_3d(batch, pw, pb, pd[0], pd[1], pd[2]);
      Tensor<S> x = with_cls_and_pos(st, "backbone.", tok);
      return run_encoder(st, "backbone.", x, cfg.depth, cfg.n_heads, taps);
    }
    case BackboneKind::vivit_factorised: {
      Tensor<S> tok = patch_embed_3d(batch, pw, pb, pd[0], pd[1], pd[2]);
      const index_t B = batch.shape()[0];
      const index_t F = cfg.frames(), Sp = cfg.tokens_per_frame(), d = cfg.d_model;
      Tensor<S> x = reshape(tok, {B * F, Sp, d});
      x = with_cls_and_pos(st, "backbone.spatial.", x);
      x = run_encoder(st, "backbone.spatial.", x, cfg.depth, cfg.n_heads, taps, "spatial.");
      Tensor<S> frame_cls = reshape(slice(x, 1, index_t{0}, index_t{1}), {B, F, d});
      Tensor<S> y = with_cls_and_pos(st, "backbone.temporal.", frame_cls);
      return run_encoder(st, "backbone.temporal.", y, cfg.depth_temporal, cfg.n_heads, taps,
                         "temporal.");
    }
  }
  throw ConfigError("backbone: unknown kind");
}

// CLS pooling: the first token row.
template <typename S>
Tensor<S> pool_cls(const Tensor<S>& features) {
  if (features.rank() != 3) {
    throw ShapeError("pool: expected [B, T, d], got " + shape_str(features.shape()));
  }
  const index_t B = features.shape()[0], d = features.shape()[2];
  return reshape(slice(features, 1, index_t{0}, index_t{1}), {B, d});
}

// F_C: pooled embedding to logits through a d -> d -> K MLP with gelu.
template <typename S>
Tensor<S> classify(const ParamStore<S>& st, const Tensor<S>& pooled) {
  return mlp_gelu(pooled, st.at("classifier.fc1.weight"), st.at("classifier.fc1.bias"),
                  st.at("classifier.fc2.weight"), st.at("classifier.fc2.bias"));
}

}  // namespace fb
