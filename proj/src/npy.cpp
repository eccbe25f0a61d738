#include "fb/npy.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace fb {

namespace {

constexpr std::uint64_t kMemberCap = 1ull << 30;  // refuse members past 1 GiB
constexpr std::size_t kNameCap = 4096;
constexpr std::uint32_t kEntryCap = 65535;

// Bounds-checked little-endian reader; every overrun is a ParseError.
class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string what)
      : data_(data), size_(size), what_(std::move(what)) {}

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return size_; }

  void seek(std::size_t p) {
    if (p > size_) throw ParseError(what_ + ": truncated (seek past end)");
    pos_ = p;
  }

  void skip(std::size_t n) { seek(add(pos_, n)); }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }

  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | data_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }

  const std::uint8_t* bytes(std::size_t n) {
    need(n);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::string str(std::size_t n) {
    const std::uint8_t* p = bytes(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

 private:
  void need(std::size_t n) {
    if (n > size_ - pos_) throw ParseError(what_ + ": truncated");
  }
  std::size_t add(std::size_t a, std::size_t b) {
    if (b > size_ - std::min(a, size_)) throw ParseError(what_ + ": truncated");
    return a + b;
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string what_;
};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

}  // namespace

// ---------------------------------------------------------------------------
// zlib primitives
// ---------------------------------------------------------------------------

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len) {
  std::uint32_t crc = static_cast<std::uint32_t>(::crc32(0L, Z_NULL, 0));
  // Feed in chunks: zlib takes uInt lengths.
  while (len > 0) {
    const std::size_t chunk = std::min<std::size_t>(len, 1u << 30);
    crc = static_cast<std::uint32_t>(::crc32(crc, data, static_cast<uInt>(chunk)));
    data += chunk;
    len -= chunk;
  }
  return crc;
}

std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw) {
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  // windowBits -15: raw DEFLATE, no zlib header, as ZIP requires.
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw IoError("deflate: init failed");
  }
  std::vector<std::uint8_t> out;
  out.resize(deflateBound(&zs, static_cast<uLong>(raw.size())));
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("deflate: stream did not finish");
  out.resize(out.size() - zs.avail_out);
  return out;
}

std::vector<std::uint8_t> inflate_bytes(const std::uint8_t* data, std::size_t len,
                                        std::uint64_t max_out, bool exact) {
  if (max_out > kMemberCap) {
    throw ParseError("inflate: declared size " + std::to_string(max_out) + " exceeds 1 GiB cap");
  }
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  if (inflateInit2(&zs, -15) != Z_OK) throw IoError("inflate: init failed");
  std::vector<std::uint8_t> out;
  std::uint8_t sink[1 << 16];
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(len);
  int rc = Z_OK;
  // Grow with actual output so a lying header cannot force a huge
  // allocation up front.
  while (rc != Z_STREAM_END) {
    zs.next_out = sink;
    zs.avail_out = sizeof(sink);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw ParseError("inflate: malformed DEFLATE stream");
    }
    const std::size_t got = sizeof(sink) - zs.avail_out;
    if (out.size() + got > max_out) {
      inflateEnd(&zs);
      throw ParseError("inflate: output exceeds declared size " + std::to_string(max_out));
    }
    out.insert(out.end(), sink, sink + got);
    if (rc != Z_STREAM_END && zs.avail_in == 0 && got == 0) {
      inflateEnd(&zs);
      throw ParseError("inflate: truncated DEFLATE stream");
    }
  }
  inflateEnd(&zs);
  if (exact && out.size() != max_out) {
    throw ParseError("inflate: expected " + std::to_string(max_out) + " bytes, got " +
                     std::to_string(out.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// NPY v1.0
// ---------------------------------------------------------------------------

std::size_t npy_dtype_size(const std::string& dtype) {
  if (dtype == "|u1") return 1;
  if (dtype == "<i8") return 8;
  if (dtype == "<f4") return 4;
  if (dtype == "<f8") return 8;
  throw ParseError("npy: unsupported dtype " + dtype);
}

namespace {

// Pulls 'key': value out of the header dict literal. The writer side is
// canonical numpy output; the reader tolerates arbitrary spacing.
std::string header_field(const std::string& header, const std::string& key) {
  const std::string quoted = "'" + key + "'";
  const std::size_t k = header.find(quoted);
  if (k == std::string::npos) throw ParseError("npy: header missing " + key);
  std::size_t p = header.find(':', k + quoted.size());
  if (p == std::string::npos) throw ParseError("npy: malformed header");
  ++p;
  while (p < header.size() && header[p] == ' ') ++p;
  if (p >= header.size()) throw ParseError("npy: malformed header");
  if (header[p] == '\'') {
    const std::size_t e = header.find('\'', p + 1);
    if (e == std::string::npos) throw ParseError("npy: malformed header");
    return header.substr(p + 1, e - p - 1);
  }
  if (header[p] == '(') {
    const std::size_t e = header.find(')', p);
    if (e == std::string::npos) throw ParseError("npy: malformed header");
    return header.substr(p, e - p + 1);
  }
  std::size_t e = p;
  while (e < header.size() && header[e] != ',' && header[e] != '}') ++e;
  return header.substr(p, e - p);
}

std::vector<std::int64_t> parse_shape_tuple(const std::string& tup) {
  if (tup.size() < 2 || tup.front() != '(' || tup.back() != ')') {
    throw ParseError("npy: malformed shape tuple");
  }
  std::vector<std::int64_t> shape;
  std::size_t p = 1;
  while (p < tup.size() - 1) {
    while (p < tup.size() - 1 && (tup[p] == ' ' || tup[p] == ',')) ++p;
    if (p >= tup.size() - 1) break;
    std::size_t e = p;
    while (e < tup.size() - 1 && tup[e] >= '0' && tup[e] <= '9') ++e;
    if (e == p) throw ParseError("npy: malformed shape tuple");
    if (e - p > 18) throw ParseError("npy: shape extent too large");
    shape.push_back(std::stoll(tup.substr(p, e - p)));
    p = e;
  }
  return shape;
}

}  // namespace

NpyArray parse_npy(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes.data(), bytes.size(), "npy");
  const std::string magic = r.str(6);
  if (magic != "\x93NUMPY") throw ParseError("npy: bad magic");
  const std::uint8_t major = r.u8(), minor = r.u8();
  if (major != 1 || minor != 0) {
    throw ParseError("npy: unsupported version " + std::to_string(major) + "." +
                     std::to_string(minor));
  }
  const std::uint16_t hlen = r.u16();
  const std::string header = r.str(hlen);
  const std::string dtype = header_field(header, "descr");
  const std::size_t dsize = npy_dtype_size(dtype);
  const std::string order = header_field(header, "fortran_order");
  if (order.rfind("True", 0) == 0) throw ParseError("npy: Fortran order not supported");
  if (order.rfind("False", 0) != 0) throw ParseError("npy: malformed header");
  NpyArray out;
  out.dtype = dtype;
  out.shape = parse_shape_tuple(header_field(header, "shape"));
  std::uint64_t elems = 1;
  for (auto d : out.shape) {
    if (d < 0) throw ParseError("npy: negative shape extent");
    if (d != 0 && elems > kMemberCap / static_cast<std::uint64_t>(d)) {
      throw ParseError("npy: shape product exceeds 1 GiB cap");
    }
    elems *= static_cast<std::uint64_t>(d);
  }
  const std::uint64_t want = elems * dsize;
  if (want > kMemberCap) throw ParseError("npy: payload exceeds 1 GiB cap");
  const std::size_t have = bytes.size() - r.pos();
  if (have != want) {
    throw ParseError("npy: payload size mismatch: header implies " + std::to_string(want) +
                     " bytes, file has " + std::to_string(have));
  }
  const std::uint8_t* p = r.bytes(static_cast<std::size_t>(want));
  out.data.assign(p, p + want);
  return out;
}

std::vector<std::uint8_t> serialize_npy(const NpyArray& array) {
  const std::size_t dsize = npy_dtype_size(array.dtype);
  std::uint64_t elems = 1;
  for (auto d : array.shape) elems *= static_cast<std::uint64_t>(d);
  if (elems * dsize != array.data.size()) {
    throw IoError("npy: data does not match shape");
  }
  std::string dict = "{'descr': '" + array.dtype + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < array.shape.size(); ++i) {
    dict += std::to_string(array.shape[i]);
    if (array.shape.size() == 1 || i + 1 < array.shape.size()) dict += ",";
    if (i + 1 < array.shape.size()) dict += " ";
  }
  dict += "), }";
  // Pad with spaces so the 10-byte preamble plus header is 64-aligned,
  // terminated by newline (numpy's own layout).
  std::size_t total = 10 + dict.size() + 1;
  const std::size_t pad = (64 - (total % 64)) % 64;
  dict.append(pad, ' ');
  dict.push_back('\n');
  std::vector<std::uint8_t> out;
  out.reserve(10 + dict.size() + array.data.size());
  const char* magic = "\x93NUMPY";
  out.insert(out.end(), magic, magic + 6);
  out.push_back(1);
  out.push_back(0);
  put_u16(out, static_cast<std::uint16_t>(dict.size()));
  out.insert(out.end(), dict.begin(), dict.end());
  out.insert(out.end(), array.data.begin(), array.data.end());
  return out;
}

// ---------------------------------------------------------------------------
// ZIP
// ---------------------------------------------------------------------------

namespace {

struct CentralEntry {
  std::string name;
  std::uint16_t method;
  std::uint32_t crc;
  std::uint64_t csize;
  std::uint64_t usize;
  std::uint64_t local_offset;
};

}  // namespace

std::vector<ZipMember> zip_extract(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 22) throw ParseError("zip: too short for an archive");
  // EOCD scan from the tail (comment may follow it).
  const std::size_t scan_from = bytes.size() >= (1u << 16) + 22 ? bytes.size() - ((1u << 16) + 22) : 0;
  std::size_t eocd = std::string::npos;
  for (std::size_t i = bytes.size() - 22;; --i) {
    if (bytes[i] == 0x50 && bytes[i + 1] == 0x4b && bytes[i + 2] == 0x05 && bytes[i + 3] == 0x06) {
      eocd = i;
      break;
    }
    if (i == scan_from) break;
  }
  if (eocd == std::string::npos) throw ParseError("zip: end-of-central-directory not found");
  ByteReader er(bytes.data(), bytes.size(), "zip");
  er.seek(eocd + 4);
  const std::uint16_t disk = er.u16();
  const std::uint16_t cd_disk = er.u16();
  const std::uint16_t n_here = er.u16();
  const std::uint16_t n_total = er.u16();
  const std::uint32_t cd_size = er.u32();
  const std::uint32_t cd_offset = er.u32();
  if (disk != 0 || cd_disk != 0 || n_here != n_total) {
    throw ParseError("zip: multi-disk archives not supported");
  }
  if (n_total > kEntryCap) throw ParseError("zip: too many entries");
  if (cd_offset == 0xffffffffu || cd_size == 0xffffffffu || n_total == 0xffff) {
    throw ParseError("zip: zip64 not supported");
  }
  if (static_cast<std::uint64_t>(cd_offset) + cd_size > bytes.size()) {
    throw ParseError("zip: central directory out of bounds");
  }

  std::vector<CentralEntry> entries;
  ByteReader cr(bytes.data(), bytes.size(), "zip");
  cr.seek(cd_offset);
  for (std::uint16_t i = 0; i < n_total; ++i) {
    if (cr.u32() != 0x02014b50) throw ParseError("zip: bad central directory signature");
    cr.skip(2 + 2);  // version made by, version needed
    CentralEntry e;
    const std::uint16_t flags = cr.u16();
    e.method = cr.u16();
    cr.skip(2 + 2);  // mtime, mdate
    e.crc = cr.u32();
    e.csize = cr.u32();
    e.usize = cr.u32();
    const std::uint16_t name_len = cr.u16();
    const std::uint16_t extra_len = cr.u16();
    const std::uint16_t comment_len = cr.u16();
    cr.skip(2 + 2 + 4);  // disk start, internal attrs, external attrs
    e.local_offset = cr.u32();
    if (name_len > kNameCap) throw ParseError("zip: member name too long");
    e.name = cr.str(name_len);
    cr.skip(static_cast<std::size_t>(extra_len) + comment_len);
    if (flags & 0x0001) throw ParseError("zip: encrypted members not supported");
    if (e.csize == 0xffffffffu || e.usize == 0xffffffffu || e.local_offset == 0xffffffffu) {
      throw ParseError("zip: zip64 not supported");
    }
    if (e.usize > kMemberCap) {
      throw ParseError("zip: member " + e.name + " exceeds 1 GiB cap");
    }
    entries.push_back(std::move(e));
  }

  std::vector<ZipMember> out;
  for (const CentralEntry& e : entries) {
    ByteReader lr(bytes.data(), bytes.size(), "zip");
    lr.seek(e.local_offset);
    if (lr.u32() != 0x04034b50) throw ParseError("zip: bad local header signature");
    lr.skip(2);  // version needed
    lr.skip(2);  // flags (central directory is authoritative for sizes)
    const std::uint16_t method = lr.u16();
    lr.skip(2 + 2 + 4 + 4 + 4);  // time, date, crc, csize, usize (may be zero here)
    const std::uint16_t name_len = lr.u16();
    const std::uint16_t extra_len = lr.u16();
    lr.skip(static_cast<std::size_t>(name_len) + extra_len);
    if (method != e.method) throw ParseError("zip: local/central method mismatch");

    ZipMember m;
    m.name = e.name;
    if (e.method == 0) {
      if (e.csize != e.usize) throw ParseError("zip: stored member with csize != usize");
      const std::uint8_t* p = lr.bytes(static_cast<std::size_t>(e.csize));
      m.data.assign(p, p + e.csize);
    } else if (e.method == 8) {
      const std::uint8_t* p = lr.bytes(static_cast<std::size_t>(e.csize));
      m.data = inflate_bytes(p, static_cast<std::size_t>(e.csize), e.usize);
    } else {
      throw ParseError("zip: unsupported compression method " + std::to_string(e.method) +
                       " for member " + e.name);
    }
    const std::uint32_t crc = crc32_bytes(m.data.data(), m.data.size());
    if (crc != e.crc) {
      throw ParseError("zip: crc mismatch in member " + e.name);
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<std::uint8_t> zip_archive(const std::vector<ZipMember>& members, bool stored) {
  std::vector<std::uint8_t> out;
  std::vector<CentralEntry> entries;
  for (const ZipMember& m : members) {
    CentralEntry e;
    e.name = m.name;
    e.usize = m.data.size();
    e.crc = crc32_bytes(m.data.data(), m.data.size());
    e.local_offset = out.size();
    std::vector<std::uint8_t> payload;
    if (stored) {
      e.method = 0;
      payload = m.data;
    } else {
      e.method = 8;
      payload = deflate_bytes(m.data);
    }
    e.csize = payload.size();
    put_u32(out, 0x04034b50);
    put_u16(out, 20);  // version needed
    put_u16(out, 0);   // flags
    put_u16(out, e.method);
    put_u16(out, 0);  // mtime: fixed for determinism
    put_u16(out, 0);  // mdate
    put_u32(out, e.crc);
    put_u32(out, static_cast<std::uint32_t>(e.csize));
    put_u32(out, static_cast<std::uint32_t>(e.usize));
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    put_u16(out, 0);  // extra
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.insert(out.end(), payload.begin(), payload.end());
    entries.push_back(std::move(e));
  }
  const std::size_t cd_start = out.size();
  for (const CentralEntry& e : entries) {
    put_u32(out, 0x02014b50);
    put_u16(out, 20);  // version made by
    put_u16(out, 20);  // version needed
    put_u16(out, 0);   // flags
    put_u16(out, e.method);
    put_u16(out, 0);  // mtime
    put_u16(out, 0);  // mdate
    put_u32(out, e.crc);
    put_u32(out, static_cast<std::uint32_t>(e.csize));
    put_u32(out, static_cast<std::uint32_t>(e.usize));
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    put_u16(out, 0);  // extra
    put_u16(out, 0);  // comment
    put_u16(out, 0);  // disk
    put_u16(out, 0);  // internal attrs
    put_u32(out, 0);  // external attrs
    put_u32(out, static_cast<std::uint32_t>(e.local_offset));
    out.insert(out.end(), e.name.begin(), e.name.end());
  }
  const std::size_t cd_size = out.size() - cd_start;
  put_u32(out, 0x06054b50);
  put_u16(out, 0);
  put_u16(out, 0);
  put_u16(out, static_cast<std::uint16_t>(entries.size()));
  put_u16(out, static_cast<std::uint16_t>(entries.size()));
  put_u32(out, static_cast<std::uint32_t>(cd_size));
  put_u32(out, static_cast<std::uint32_t>(cd_start));
  put_u16(out, 0);  // comment length
  return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  if (len < 0) throw IoError("cannot stat " + path);
  f.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!f) throw IoError("cannot read " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  if (!bytes.empty()) f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw IoError("cannot write " + path);
}

}  // namespace fb
