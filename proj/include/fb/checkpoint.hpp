#pragma once

// Checkpoint container: magic "RLBK1\0", u32 LE format version, a
// length-prefixed ordered-JSON metadata block mapping tensor name to
// {dtype, shape, offset, trainable}, then a payload of little-endian raw
// scalars. Offsets are relative to the payload start; payload start and
// every tensor are 64-byte aligned. Round-trips are bitwise exact,
// including trainable flags and insertion order.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fb/nn.hpp"

namespace fb {

struct CheckpointEntry {
  std::string name;
  std::string dtype;  // "float32" or "float64"
  Shape shape;
  std::uint64_t offset = 0;  // bytes from payload start
  bool trainable = false;
};

struct CheckpointFile {
  std::vector<CheckpointEntry> entries;
  std::vector<std::uint8_t> payload;
};

CheckpointFile read_checkpoint_bytes(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> write_checkpoint_bytes(const CheckpointFile& file);

CheckpointFile read_checkpoint(const std::string& path);
void write_checkpoint(const std::string& path, const CheckpointFile& file);

namespace detail {

template <typename S>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
  return "float32";
}
template <>
inline const char* dtype_name<double>() {
  return "float64";
}

inline std::uint64_t align64(std::uint64_t n) { return (n + 63) & ~std::uint64_t{63}; }

}  // namespace detail

template <typename S>
CheckpointFile checkpoint_from_store(const ParamStore<S>& store) {
  CheckpointFile file;
  std::uint64_t offset = 0;
  for (const std::string& name : store.names()) {
    const Tensor<S>& t = store.at(name);
    CheckpointEntry e;
    e.name = name;
    e.dtype = detail::dtype_name<S>();
    e.shape = t.shape();
    e.offset = offset;
    e.trainable = store.trainable(name);
    const std::uint64_t span = static_cast<std::uint64_t>(t.numel()) * sizeof(S);
    file.payload.resize(static_cast<std::size_t>(offset + span));
    std::memcpy(file.payload.data() + offset, t.data(), static_cast<std::size_t>(span));
    offset = detail::align64(offset + span);
    file.entries.push_back(std::move(e));
  }
  file.payload.resize(static_cast<std::size_t>(offset));
  return file;
}

template <typename S>
ParamStore<S> store_from_checkpoint(const CheckpointFile& file) {
  ParamStore<S> store;
  for (const CheckpointEntry& e : file.entries) {
    if (e.dtype != detail::dtype_name<S>()) {
      throw IoError("checkpoint: tensor " + e.name + " has dtype " + e.dtype +
                    ", run precision expects " + detail::dtype_name<S>());
    }
    Tensor<S>& t = store.create(e.name, e.shape, e.trainable);
    const std::uint64_t span = static_cast<std::uint64_t>(t.numel()) * sizeof(S);
    std::memcpy(t.data(), file.payload.data() + e.offset, static_cast<std::size_t>(span));
  }
  return store;
}

template <typename S>
void save_checkpoint(const ParamStore<S>& store, const std::string& path) {
  write_checkpoint(path, checkpoint_from_store(store));
}

template <typename S>
ParamStore<S> load_checkpoint(const std::string& path) {
  return store_from_checkpoint<S>(read_checkpoint(path));
}

}  // namespace fb
