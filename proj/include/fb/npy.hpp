#pragma once

// Byte-level NPY v1.0 and ZIP (NPZ) support. Readers are total over
// arbitrary byte strings: any input either parses or throws a structured
// ParseError/IoError; no input may crash, read out of bounds, or allocate
// unboundedly ahead of the data that justifies it.
//
// Scope: NPY version 1.0 only, dtypes |u1, <i8, <f4, <f8, C order.
// ZIP: compression methods 0 (stored) and 8 (raw DEFLATE), CRC-32
// verified, central directory authoritative, no ZIP64.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fb/errors.hpp"

namespace fb {

struct NpyArray {
  std::string dtype;  // "|u1", "<i8", "<f4" or "<f8"
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> data;  // raw little-endian payload

  std::int64_t elems() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

std::size_t npy_dtype_size(const std::string& dtype);

NpyArray parse_npy(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> serialize_npy(const NpyArray& array);

struct ZipMember {
  std::string name;
  std::vector<std::uint8_t> data;
};

// Extracts every member of the archive, verifying CRC-32 of each.
std::vector<ZipMember> zip_extract(const std::vector<std::uint8_t>& bytes);

// Deterministic writer: members in the given order, zeroed timestamps,
// method 8 (raw DEFLATE) unless `stored`.
std::vector<std::uint8_t> zip_archive(const std::vector<ZipMember>& members, bool stored);

// zlib-backed primitives (raw DEFLATE streams, no zlib wrapper).
std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len);
std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw);
// Inflates at most `max_out` bytes; the result must be exactly `max_out`
// long unless `exact` is false. Throws ParseError on malformed streams.
std::vector<std::uint8_t> inflate_bytes(const std::uint8_t* data, std::size_t len,
                                        std::uint64_t max_out, bool exact = true);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace fb
