#include "fb/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "fb/npy.hpp"
#include "fb/rng.hpp"

namespace fb {

namespace {

const char* kSplitNames[3] = {"train", "val", "test"};

struct RawSplit {
  NpyArray images;
  NpyArray labels;
};

std::vector<index_t> to_shape(const std::vector<std::int64_t>& dims) {
  return std::vector<index_t>(dims.begin(), dims.end());
}

// Validates one split's arrays and converts to the float bundle layout.
DatasetSplit convert_split(const std::string& name, const RawSplit& raw, bool& volumetric,
                           bool& rgb, bool first) {
  const NpyArray& im = raw.images;
  if (im.dtype != "|u1") {
    throw ParseError("dataset: " + name + "_images must be uint8, got " + im.dtype);
  }
  bool vol = false, color = false;
  if (im.shape.size() == 3) {
    vol = false;
  } else if (im.shape.size() == 4 && im.shape[3] == 3) {
    color = true;  // trailing extent 3 reads as RGB, not as a W=3 volume
  } else if (im.shape.size() == 4) {
    vol = true;
  } else {
    throw ParseError("dataset: " + name + "_images must be [N,H,W], [N,H,W,3] or [N,D,H,W]");
  }
  if (first) {
    volumetric = vol;
    rgb = color;
  } else if (vol != volumetric || color != rgb) {
    throw ParseError("dataset: split " + name + " layout differs from train split");
  }

  const NpyArray& lab = raw.labels;
  const bool flat = lab.shape.size() == 1;
  const bool col = lab.shape.size() == 2 && lab.shape[1] == 1;
  if (!flat && !col) {
    throw ParseError("dataset: " + name + "_labels must be [N] or [N,1]");
  }
  const std::int64_t n = lab.shape[0];
  if (n != im.shape[0]) {
    throw ParseError("dataset: " + name + " has " + std::to_string(im.shape[0]) + " images but " +
                     std::to_string(n) + " labels");
  }

  DatasetSplit split;
  std::vector<float> values(im.data.size());
  for (std::size_t i = 0; i < im.data.size(); ++i) {
    values[i] = static_cast<float>(im.data[i]) / 255.0f;
  }
  split.images = Tensor<float>(to_shape(im.shape), std::move(values));
  split.labels.resize(static_cast<std::size_t>(n));
  if (lab.dtype == "|u1") {
    for (std::int64_t i = 0; i < n; ++i) {
      split.labels[static_cast<std::size_t>(i)] = lab.data[static_cast<std::size_t>(i)];
    }
  } else if (lab.dtype == "<i8") {
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t v = 0;
      std::memcpy(&v, lab.data.data() + static_cast<std::size_t>(i) * 8, 8);
      if (v < 0) throw ParseError("dataset: negative label in " + name);
      split.labels[static_cast<std::size_t>(i)] = v;
    }
  } else {
    throw ParseError("dataset: " + name + "_labels must be uint8 or int64, got " + lab.dtype);
  }
  return split;
}

DatasetBundle bundle_from_arrays(const std::map<std::string, NpyArray>& arrays) {
  DatasetBundle bundle;
  DatasetSplit* splits[3] = {&bundle.train, &bundle.val, &bundle.test};
  bool first = true;
  std::vector<std::int64_t> dims;
  for (int s = 0; s < 3; ++s) {
    const std::string img_key = std::string(kSplitNames[s]) + "_images";
    const std::string lab_key = std::string(kSplitNames[s]) + "_labels";
    auto img_it = arrays.find(img_key);
    auto lab_it = arrays.find(lab_key);
    if (img_it == arrays.end()) throw ParseError("dataset: missing member " + img_key);
    if (lab_it == arrays.end()) throw ParseError("dataset: missing member " + lab_key);
    RawSplit raw{img_it->second, lab_it->second};
    *splits[s] = convert_split(kSplitNames[s], raw, bundle.volumetric, bundle.rgb, first);
    const auto& shape = img_it->second.shape;
    std::vector<std::int64_t> tail(shape.begin() + 1, shape.end());
    if (first) {
      dims = tail;
    } else if (tail != dims) {
      throw ParseError("dataset: image dims differ between splits");
    }
    first = false;
  }
  if (bundle.train.size() == 0) throw ParseError("dataset: empty train split");
  if (bundle.test.size() == 0) throw ParseError("dataset: empty test split");
  index_t max_label = 0;
  for (const DatasetSplit* s : splits) {
    for (index_t l : s->labels) max_label = std::max(max_label, l);
  }
  bundle.n_classes = max_label + 1;
  if (bundle.n_classes < 2) throw ParseError("dataset: needs at least two classes");
  return bundle;
}

std::map<std::string, NpyArray> arrays_from_members(std::vector<ZipMember> members) {
  std::map<std::string, NpyArray> arrays;
  for (ZipMember& m : members) {
    std::string key = m.name;
    if (key.size() > 4 && key.compare(key.size() - 4, 4, ".npy") == 0) {
      key = key.substr(0, key.size() - 4);
    }
    arrays[key] = parse_npy(m.data);
  }
  return arrays;
}

}  // namespace

DatasetBundle load_npz(const std::string& path) {
  return bundle_from_arrays(arrays_from_members(zip_extract(read_file_bytes(path))));
}

DatasetBundle load_array_dir(const std::string& path) {
  std::map<std::string, NpyArray> arrays;
  for (int s = 0; s < 3; ++s) {
    for (const char* part : {"images", "labels"}) {
      const std::string key = std::string(kSplitNames[s]) + "_" + part;
      const std::string file = path + "/" + key + ".npy";
      if (!std::filesystem::exists(file)) {
        throw IoError("dataset: missing file " + file);
      }
      arrays[key] = parse_npy(read_file_bytes(file));
    }
  }
  return bundle_from_arrays(arrays);
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

namespace {

constexpr index_t kSide = 28;
constexpr double kBlobSigma = 3.5;
constexpr double kPixelNoise = 0.1;
constexpr double kCenterJitter = 1.0;

void render_blob2d(Rng& rng, double cx, double cy, std::uint8_t* out) {
  const double jx = cx + rng.next_normal(0.0, kCenterJitter);
  const double jy = cy + rng.next_normal(0.0, kCenterJitter);
  for (index_t y = 0; y < kSide; ++y) {
    for (index_t x = 0; x < kSide; ++x) {
      const double dx = static_cast<double>(x) - jx;
      const double dy = static_cast<double>(y) - jy;
      double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kBlobSigma * kBlobSigma));
      v += rng.next_normal(0.0, kPixelNoise);
      v = std::min(1.0, std::max(0.0, v));
      out[y * kSide + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
}

void render_blob3d(Rng& rng, double cx, double cy, double cz, std::uint8_t* out) {
  const double jx = cx + rng.next_normal(0.0, kCenterJitter);
  const double jy = cy + rng.next_normal(0.0, kCenterJitter);
  const double jz = cz + rng.next_normal(0.0, kCenterJitter);
  for (index_t z = 0; z < kSide; ++z) {
    for (index_t y = 0; y < kSide; ++y) {
      for (index_t x = 0; x < kSide; ++x) {
        const double dx = static_cast<double>(x) - jx;
        const double dy = static_cast<double>(y) - jy;
        const double dz = static_cast<double>(z) - jz;
        double v = std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * kBlobSigma * kBlobSigma));
        v += rng.next_normal(0.0, kPixelNoise);
        v = std::min(1.0, std::max(0.0, v));
        out[(z * kSide + y) * kSide + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
}

DatasetSplit split_from_u8(std::vector<std::uint8_t> pixels, std::vector<index_t> labels,
                           const Shape& shape) {
  std::vector<float> values(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    values[i] = static_cast<float>(pixels[i]) / 255.0f;
  }
  DatasetSplit split;
  split.images = Tensor<float>(shape, std::move(values));
  split.labels = std::move(labels);
  return split;
}

}  // namespace

DatasetBundle gen_synthetic(const std::string& kind, index_t n_per_class, index_t n_classes,
                            std::uint64_t seed) {
  const bool volumetric = kind == "blobs3d";
  if (!volumetric && kind != "blobs2d") {
    throw ConfigError("synthetic: unknown kind \"" + kind + "\" (blobs2d or blobs3d)");
  }
  if (n_classes < 2 || n_classes > 8) {
    throw ConfigError("synthetic: n_classes must be in [2, 8], got " + std::to_string(n_classes));
  }
  if (n_per_class < 10) {
    throw ConfigError("synthetic: n_per_class must be >= 10, got " + std::to_string(n_per_class));
  }

  // Class centers: a radius-7 circle for 2D, cube corners for 3D.
  std::vector<std::array<double, 3>> centers(static_cast<std::size_t>(n_classes));
  for (index_t k = 0; k < n_classes; ++k) {
    auto& c = centers[static_cast<std::size_t>(k)];
    if (volumetric) {
      c = {k & 1 ? 20.0 : 8.0, k & 2 ? 20.0 : 8.0, k & 4 ? 20.0 : 8.0};
    } else {
      const double ang = 2.0 * 3.14159265358979323846 * static_cast<double>(k) /
                         static_cast<double>(n_classes);
      c = {14.0 + 7.0 * std::cos(ang), 14.0 + 7.0 * std::sin(ang), 0.0};
    }
  }

  const index_t n_train = (7 * n_per_class) / 10;
  const index_t n_val = n_per_class / 10;
  const index_t n_test = n_per_class - n_train - n_val;
  const index_t voxels = volumetric ? kSide * kSide * kSide : kSide * kSide;

  Rng rng(seed);
  DatasetBundle bundle;
  bundle.volumetric = volumetric;
  bundle.n_classes = n_classes;
  DatasetSplit* splits[3] = {&bundle.train, &bundle.val, &bundle.test};
  const index_t counts[3] = {n_train, n_val, n_test};
  for (int s = 0; s < 3; ++s) {
    const index_t n = counts[s] * n_classes;
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(n * voxels));
    std::vector<index_t> labels(static_cast<std::size_t>(n));
    index_t row = 0;
    for (index_t k = 0; k < n_classes; ++k) {
      const auto& c = centers[static_cast<std::size_t>(k)];
      for (index_t i = 0; i < counts[s]; ++i, ++row) {
        std::uint8_t* out = pixels.data() + row * voxels;
        if (volumetric) {
          render_blob3d(rng, c[0], c[1], c[2], out);
        } else {
          render_blob2d(rng, c[0], c[1], out);
        }
        labels[static_cast<std::size_t>(row)] = k;
      }
    }
    const Shape shape = volumetric ? Shape{n, kSide, kSide, kSide} : Shape{n, kSide, kSide};
    *splits[s] = split_from_u8(std::move(pixels), std::move(labels), shape);
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

Tensor<float> resize_bilinear_2d(const Tensor<float>& images, index_t out_h, index_t out_w) {
  if (images.rank() != 3 && images.rank() != 4) {
    throw ShapeError("resize: expected [N,H,W] or [N,H,W,C], got " + shape_str(images.shape()));
  }
  if (out_h < 1 || out_w < 1) throw ShapeError("resize: target dims must be >= 1");
  const index_t N = images.shape()[0];
  const index_t H = images.shape()[1], W = images.shape()[2];
  const index_t C = images.rank() == 4 ? images.shape()[3] : 1;
  if (H == out_h && W == out_w) {
    return Tensor<float>(images.shape(), std::vector<float>(images.vec()));
  }
  Shape out_shape = images.shape();
  out_shape[1] = out_h;
  out_shape[2] = out_w;
  Tensor<float> out(out_shape);

  // Half-pixel mapping: src = (dst + 0.5) * (in/out) - 0.5, clamped.
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  std::vector<index_t> x0(static_cast<std::size_t>(out_w)), x1(static_cast<std::size_t>(out_w));
  std::vector<float> wx(static_cast<std::size_t>(out_w));
  for (index_t x = 0; x < out_w; ++x) {
    double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
    fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
    const index_t lo = static_cast<index_t>(fx);
    x0[static_cast<std::size_t>(x)] = lo;
    x1[static_cast<std::size_t>(x)] = std::min(lo + 1, W - 1);
    wx[static_cast<std::size_t>(x)] = static_cast<float>(fx - static_cast<double>(lo));
  }
  const float* src = images.data();
  float* dst = out.data();
  for (index_t n = 0; n < N; ++n) {
    const float* plane = src + n * H * W * C;
    float* oplane = dst + n * out_h * out_w * C;
    for (index_t y = 0; y < out_h; ++y) {
      double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
      const index_t y0 = static_cast<index_t>(fy);
      const index_t y1 = std::min(y0 + 1, H - 1);
      const float fwy = static_cast<float>(fy - static_cast<double>(y0));
      for (index_t x = 0; x < out_w; ++x) {
        const index_t lo = x0[static_cast<std::size_t>(x)];
        const index_t hi = x1[static_cast<std::size_t>(x)];
        const float fwx = wx[static_cast<std::size_t>(x)];
        for (index_t c = 0; c < C; ++c) {
          const float v00 = plane[(y0 * W + lo) * C + c];
          const float v01 = plane[(y0 * W + hi) * C + c];
          const float v10 = plane[(y1 * W + lo) * C + c];
          const float v11 = plane[(y1 * W + hi) * C + c];
          const float top = v00 + (v01 - v00) * fwx;
          const float bot = v10 + (v11 - v10) * fwx;
          oplane[(y * out_w + x) * C + c] = top + (bot - top) * fwy;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixture writers
// ---------------------------------------------------------------------------

namespace {

NpyArray images_to_npy(const DatasetSplit& split) {
  NpyArray a;
  a.dtype = "|u1";
  a.shape.assign(split.images.shape().begin(), split.images.shape().end());
  a.data.resize(static_cast<std::size_t>(split.images.numel()));
  const float* src = split.images.data();
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, src[i]));
    a.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return a;
}

NpyArray labels_to_npy(const DatasetSplit& split) {
  NpyArray a;
  a.dtype = "|u1";
  a.shape = {static_cast<std::int64_t>(split.labels.size())};
  a.data.resize(split.labels.size());
  for (std::size_t i = 0; i < split.labels.size(); ++i) {
    if (split.labels[i] < 0 || split.labels[i] > 255) {
      throw IoError("fixture: label out of uint8 range");
    }
    a.data[i] = static_cast<std::uint8_t>(split.labels[i]);
  }
  return a;
}

std::vector<std::pair<std::string, NpyArray>> bundle_to_arrays(const DatasetBundle& bundle) {
  std::vector<std::pair<std::string, NpyArray>> out;
  const DatasetSplit* splits[3] = {&bundle.train, &bundle.val, &bundle.test};
  for (int s = 0; s < 3; ++s) {
    out.emplace_back(std::string(kSplitNames[s]) + "_images", images_to_npy(*splits[s]));
    out.emplace_back(std::string(kSplitNames[s]) + "_labels", labels_to_npy(*splits[s]));
  }
  return out;
}

}  // namespace

void write_npz_fixture(const std::string& path, const DatasetBundle& bundle, bool stored) {
  std::vector<ZipMember> members;
  for (auto& [key, array] : bundle_to_arrays(bundle)) {
    members.push_back({key + ".npy", serialize_npy(array)});
  }
  write_file_bytes(path, zip_archive(members, stored));
}

void write_array_dir_fixture(const std::string& dir, const DatasetBundle& bundle) {
  std::filesystem::create_directories(dir);
  for (auto& [key, array] : bundle_to_arrays(bundle)) {
    write_file_bytes(dir + "/" + key + ".npy", serialize_npy(array));
  }
}

}  // namespace fb
