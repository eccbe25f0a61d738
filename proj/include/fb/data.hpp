#pragma once

// Dataset bundles: archive/directory ingestion, synthetic blob data,
// bilinear resizing, fixture writers, and batch assembly.

#include <cstdint>
#include <string>
#include <vector>

#include "fb/tensor.hpp"

namespace fb {

struct DatasetSplit {
  Tensor<float> images;         // [N,H,W], [N,H,W,3] or [N,D,H,W], values in [0,1]
  std::vector<index_t> labels;  // one label per image, in [0, n_classes)

  index_t size() const { return images.rank() > 0 ? images.shape()[0] : 0; }
};

struct DatasetBundle {
  DatasetSplit train, val, test;
  index_t n_classes = 0;
  bool volumetric = false;  // images are [N,D,H,W]
  bool rgb = false;         // 2D images are [N,H,W,3]

  const char* task() const { return n_classes == 2 ? "binary" : "multiclass"; }
  const DatasetSplit& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("dataset: unknown split " + name);
  }
};

// ZIP archive of NPY members {train,val,test}_{images,labels}.
DatasetBundle load_npz(const std::string& path);

// Directory holding the same six arrays as individual .npy files.
DatasetBundle load_array_dir(const std::string& path);

// Gaussian-blob classification data: 28x28 (blobs2d) or 28^3 (blobs3d),
// one blob center per class, balanced 70/10/20 splits, deterministic by
// seed. Easy by construction: a nearest-centroid rule clears 90% accuracy.
DatasetBundle gen_synthetic(const std::string& kind, index_t n_per_class, index_t n_classes,
                            std::uint64_t seed);

// Separable bilinear resize with half-pixel (corner-aligned = false)
// sampling, on [N,H,W] or [N,H,W,C].
Tensor<float> resize_bilinear_2d(const Tensor<float>& images, index_t out_h, index_t out_w);

// Fixture writers: images re-quantised to uint8, so loading the fixture
// reproduces the bundle bitwise.
void write_npz_fixture(const std::string& path, const DatasetBundle& bundle, bool stored);
void write_array_dir_fixture(const std::string& dir, const DatasetBundle& bundle);

// Channel-first batch assembly: [B,1,H,W], [B,3,H,W] or [B,1,D,H,W].
template <typename S>
Tensor<S> make_batch(const DatasetBundle& bundle, const DatasetSplit& split,
                     const std::vector<index_t>& idx) {
  const Shape& is = split.images.shape();
  const float* src = split.images.data();
  const index_t B = static_cast<index_t>(idx.size());
  for (index_t i : idx) {
    if (i < 0 || i >= split.size()) throw Error("batch: sample index out of range");
  }
  if (bundle.volumetric) {
    const index_t D = is[1], H = is[2], W = is[3], plane = D * H * W;
    Tensor<S> out({B, 1, D, H, W});
    S* dst = out.data();
    for (index_t b = 0; b < B; ++b) {
      const float* s = src + idx[static_cast<std::size_t>(b)] * plane;
      for (index_t j = 0; j < plane; ++j) dst[b * plane + j] = static_cast<S>(s[j]);
    }
    return out;
  }
  if (bundle.rgb) {
    const index_t H = is[1], W = is[2], plane = H * W;
    Tensor<S> out({B, 3, H, W});
    S* dst = out.data();
    for (index_t b = 0; b < B; ++b) {
      const float* s = src + idx[static_cast<std::size_t>(b)] * plane * 3;
      for (index_t c = 0; c < 3; ++c) {
        for (index_t j = 0; j < plane; ++j) {
          dst[(b * 3 + c) * plane + j] = static_cast<S>(s[j * 3 + c]);
        }
      }
    }
    return out;
  }
  const index_t H = is[1], W = is[2], plane = H * W;
  Tensor<S> out({B, 1, H, W});
  S* dst = out.data();
  for (index_t b = 0; b < B; ++b) {
    const float* s = src + idx[static_cast<std::size_t>(b)] * plane;
    for (index_t j = 0; j < plane; ++j) dst[b * plane + j] = static_cast<S>(s[j]);
  }
  return out;
}

inline std::vector<index_t> gather_labels(const DatasetSplit& split,
                                          const std::vector<index_t>& idx) {
  std::vector<index_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out[i] = split.labels[static_cast<std::size_t>(idx[i])];
  }
  return out;
}

}  // namespace fb
