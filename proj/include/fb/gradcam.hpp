#pragma once

// Grad-CAM over encoder token maps: the gradient of one logit with respect
// to a block's output tokens gives per-channel weights (mean over patch
// tokens, CLS excluded); the weighted activation sum, rectified and
// max-normalised, becomes a patch-grid heatmap. 2D backbones only, where
// the token order is a raster scan of the patch grid.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fb/booster.hpp"
#include "fb/netpbm.hpp"

namespace fb {

struct GradCamResult {
  Tensor<float> cam;  // [grid_h, grid_w], max-normalised to [0,1]
  index_t target = 0;
  std::string layer;
};

// image_batch: one sample, [1, 1, H, W] or [1, 3, H, W]. layer names a tap
// ("blocks.0" .. "blocks.depth-1"); empty picks the last block. target < 0
// picks the argmax class.
template <typename S>
GradCamResult grad_cam(const ModelSpec& spec, const ParamStore<S>& store,
                       const Tensor<S>& image_batch, std::string layer = "", int target = -1) {
  if (spec.backbone.kind != BackboneKind::vit2d) {
    throw ConfigError("gradcam: only 2D backbones have a patch-grid heatmap");
  }
  if (image_batch.rank() != 4 || image_batch.shape()[0] != 1) {
    throw ShapeError("gradcam: expected a single sample [1, C, H, W], got " +
                     shape_str(image_batch.shape()));
  }
  if (layer.empty()) layer = "blocks." + std::to_string(spec.backbone.depth - 1);

  Tape<S> tape;
  TapMap<S> taps;
  Tensor<S> logits;
  Tensor<S> target_logit;
  {
    TapeScope<S> scope(tape);
    logits = full_forward(spec, store, image_batch, &taps);
    index_t cls = target;
    if (target < 0) {
      cls = 0;
      const S* p = logits.data();
      for (index_t k = 1; k < logits.shape()[1]; ++k) {
        if (p[k] > p[cls]) cls = k;
      }
    }
    if (cls >= logits.shape()[1]) {
      throw ConfigError("gradcam: target class " + std::to_string(cls) + " out of range, model has " +
                        std::to_string(logits.shape()[1]) + " classes");
    }
    target = static_cast<int>(cls);
    target_logit = slice(logits, 1, cls, index_t{1});
  }
  auto it = taps.find(layer);
  if (it == taps.end()) {
    std::string have;
    for (const auto& [k, v] : taps) have += (have.empty() ? "" : ", ") + k;
    throw ConfigError("gradcam: no layer \"" + layer + "\" (available: " + have + ")");
  }
  tape.backward(target_logit);

  const Tensor<S>& acts = it->second;  // [1, T+1, d]
  const Tensor<S> grads = tape.node_grad(acts.node());
  const index_t T = acts.shape()[1] - 1, d = acts.shape()[2];

  // Channel weights: gradient mean over patch tokens, CLS row skipped.
  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  const S* gp = grads.data();
  for (index_t t = 1; t <= T; ++t) {
    for (index_t c = 0; c < d; ++c) w[static_cast<std::size_t>(c)] += static_cast<double>(gp[t * d + c]);
  }
  for (double& x : w) x /= static_cast<double>(T);

  const auto pd = spec.backbone.patch_dims();
  const index_t gh = spec.backbone.input[spec.backbone.input.size() - 2] / pd[0];
  const index_t gw = spec.backbone.input[spec.backbone.input.size() - 1] / pd[1];
  GradCamResult res;
  res.target = target;
  res.layer = layer;
  res.cam = Tensor<float>({gh, gw});
  float* cam = res.cam.data();
  const S* ap = acts.data();
  float peak = 0.0f;
  for (index_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (index_t c = 0; c < d; ++c) {
      s += w[static_cast<std::size_t>(c)] * static_cast<double>(ap[(t + 1) * d + c]);
    }
    const float v = s > 0.0 ? static_cast<float>(s) : 0.0f;
    cam[t] = v;
    peak = std::max(peak, v);
  }
  if (peak > 0.0f) {
    for (index_t t = 0; t < gh * gw; ++t) cam[t] /= peak;
  }
  return res;
}

inline std::uint8_t quantize_unit(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Heatmap as an 8-bit grayscale image at grid resolution.
inline PnmImage cam_to_pgm(const Tensor<float>& cam) {
  PnmImage img;
  img.channels = 1;
  img.height = cam.shape()[0];
  img.width = cam.shape()[1];
  img.pixels.resize(static_cast<std::size_t>(cam.numel()));
  for (index_t i = 0; i < cam.numel(); ++i) img.pixels[static_cast<std::size_t>(i)] = quantize_unit(cam.data()[i]);
  return img;
}

// Red-ramp overlay: the heatmap is nearest-upscaled onto the image and
// alpha-blended at 0.5 into the red channel. Image dims must be whole
// multiples of the grid.
inline PnmImage overlay_cam(const std::vector<float>& gray, index_t h, index_t w,
                            const Tensor<float>& cam) {
  if (static_cast<index_t>(gray.size()) != h * w) {
    throw ShapeError("overlay: " + std::to_string(gray.size()) + " pixels for " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const index_t gh = cam.shape()[0], gw = cam.shape()[1];
  if (gh <= 0 || gw <= 0 || h % gh != 0 || w % gw != 0) {
    throw ShapeError("overlay: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a whole multiple of grid " + std::to_string(gh) + "x" +
                     std::to_string(gw));
  }
  const index_t sy = h / gh, sx = w / gw;
  PnmImage img;
  img.channels = 3;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<std::size_t>(h * w * 3));
  const float* cp = cam.data();
  for (index_t y = 0; y < h; ++y) {
    for (index_t x = 0; x < w; ++x) {
      const float g = gray[static_cast<std::size_t>(y * w + x)];
      const float heat = cp[(y / sy) * gw + (x / sx)];
      const std::size_t o = static_cast<std::size_t>((y * w + x) * 3);
      img.pixels[o + 0] = quantize_unit(0.5f * g + 0.5f * heat);
      img.pixels[o + 1] = quantize_unit(0.5f * g);
      img.pixels[o + 2] = quantize_unit(0.5f * g);
    }
  }
  return img;
}

}  // namespace fb
