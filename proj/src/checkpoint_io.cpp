#include "fb/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "fb/errors.hpp"

namespace fb {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[6] = {'R', 'L', 'B', 'K', '1', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderSize = 6 + 4 + 4;  // magic, version, meta_len
constexpr std::uint64_t kMetaCap = std::uint64_t{1} << 30;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t dtype_size(const std::string& dtype, const std::string& name) {
  if (dtype == "float32") return 4;
  if (dtype == "float64") return 8;
  throw IoError("checkpoint: tensor " + name + " has unsupported dtype " + dtype);
}

}  // namespace

CheckpointFile read_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize) throw IoError("checkpoint: file too small for header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint: bad magic, not a checkpoint file");
  }
  const std::uint32_t version = get_u32(bytes.data() + 6);
  if (version != kVersion) {
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint64_t meta_len = get_u32(bytes.data() + 10);
  if (meta_len > kMetaCap || kHeaderSize + meta_len > bytes.size()) {
    throw IoError("checkpoint: metadata length exceeds file size");
  }

  ordered_json meta;
  try {
    meta = ordered_json::parse(bytes.begin() + kHeaderSize, bytes.begin() + kHeaderSize + meta_len);
  } catch (const std::exception& e) {
    throw IoError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
  }
  if (!meta.is_object()) throw IoError("checkpoint: metadata must be a JSON object");

  const std::uint64_t payload_start = detail::align64(kHeaderSize + meta_len);
  if (payload_start > bytes.size()) throw IoError("checkpoint: payload start beyond end of file");
  const std::uint64_t payload_size = bytes.size() - payload_start;

  CheckpointFile file;
  file.payload.assign(bytes.begin() + payload_start, bytes.end());

  struct Span {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;

  for (auto it = meta.begin(); it != meta.end(); ++it) {
    CheckpointEntry e;
    e.name = it.key();
    const ordered_json& j = it.value();
    if (!j.is_object() || !j.contains("dtype") || !j.contains("shape") || !j.contains("offset") ||
        !j.contains("trainable")) {
      throw IoError("checkpoint: tensor " + e.name + " has malformed metadata");
    }
    if (!j["dtype"].is_string() || !j["shape"].is_array() || !j["offset"].is_number_unsigned() ||
        !j["trainable"].is_boolean()) {
      throw IoError("checkpoint: tensor " + e.name + " has malformed metadata");
    }
    e.dtype = j["dtype"].get<std::string>();
    const std::uint64_t esize = dtype_size(e.dtype, e.name);
    std::uint64_t elems = 1;
    for (const ordered_json& d : j["shape"]) {
      if (!d.is_number_unsigned() && !(d.is_number_integer() && d.get<std::int64_t>() >= 0)) {
        throw IoError("checkpoint: tensor " + e.name + " has malformed metadata");
      }
      const std::uint64_t dim = d.get<std::uint64_t>();
      if (dim != 0 && elems > (std::uint64_t{1} << 40) / dim) {
        throw IoError("checkpoint: tensor " + e.name + " shape is implausibly large");
      }
      elems *= dim;
      e.shape.push_back(static_cast<index_t>(dim));
    }
    e.offset = j["offset"].get<std::uint64_t>();
    e.trainable = j["trainable"].get<bool>();

    if (e.offset % 64 != 0) {
      throw IoError("checkpoint: tensor " + e.name + " offset is not 64-byte aligned");
    }
    const std::uint64_t span = elems * esize;
    if (e.offset > payload_size || span > payload_size - e.offset) {
      throw IoError("checkpoint: tensor " + e.name + " extends past end of payload");
    }
    spans.push_back({e.offset, e.offset + span, e.name});
    file.entries.push_back(std::move(e));
  }

  std::vector<Span> sorted = spans;
  std::sort(sorted.begin(), sorted.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].begin < sorted[i - 1].end) {
      throw IoError("checkpoint: tensors " + sorted[i - 1].name + " and " + sorted[i].name +
                    " overlap in payload");
    }
  }
  return file;
}

std::vector<std::uint8_t> write_checkpoint_bytes(const CheckpointFile& file) {
  ordered_json meta = ordered_json::object();
  for (const CheckpointEntry& e : file.entries) {
    ordered_json j;
    j["dtype"] = e.dtype;
    j["shape"] = ordered_json::array();
    for (index_t d : e.shape) j["shape"].push_back(static_cast<std::uint64_t>(d));
    j["offset"] = e.offset;
    j["trainable"] = e.trainable;
    meta[e.name] = std::move(j);
  }
  const std::string meta_str = meta.dump();
  if (meta_str.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw IoError("checkpoint: metadata too large");
  }

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + meta_str.size() + 64 + file.payload.size());
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out.insert(out.end(), meta_str.begin(), meta_str.end());
  out.resize(static_cast<std::size_t>(detail::align64(out.size())), 0);
  out.insert(out.end(), file.payload.begin(), file.payload.end());
  return out;
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw IoError("checkpoint: read error on " + path);
  return read_checkpoint_bytes(bytes);
}

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
  const std::vector<std::uint8_t> bytes = write_checkpoint_bytes(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) throw IoError("checkpoint: write error on " + path);
}

}  // namespace fb
