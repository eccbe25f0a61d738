#include "fb/netpbm.hpp"

#include <cctype>

#include "fb/errors.hpp"
#include "fb/npy.hpp"

namespace fb {
namespace {

// Header tokens may be separated by whitespace runs and '#' comments.
std::size_t skip_separators(const std::vector<std::uint8_t>& b, std::size_t i) {
  while (i < b.size()) {
    if (std::isspace(b[i])) {
      ++i;
    } else if (b[i] == '#') {
      while (i < b.size() && b[i] != '\n') ++i;
    } else {
      break;
    }
  }
  return i;
}

index_t parse_number(const std::vector<std::uint8_t>& b, std::size_t& i) {
  i = skip_separators(b, i);
  if (i >= b.size() || !std::isdigit(b[i])) throw ParseError("pnm: expected a number in header");
  index_t v = 0;
  while (i < b.size() && std::isdigit(b[i])) {
    v = v * 10 + (b[i] - '0');
    if (v > (index_t{1} << 32)) throw ParseError("pnm: header number too large");
    ++i;
  }
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_pnm(const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("pnm: channels must be 1 or 3");
  const std::size_t need =
      static_cast<std::size_t>(img.height) * static_cast<std::size_t>(img.width) *
      static_cast<std::size_t>(img.channels);
  if (img.pixels.size() != need) {
    throw ShapeError("pnm: " + std::to_string(img.pixels.size()) + " pixel bytes for " +
                     std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                     std::to_string(img.channels));
  }
  std::string head = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                     std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

PnmImage parse_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("pnm: not a binary P5/P6 image");
  }
  PnmImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  std::size_t i = 2;
  img.width = parse_number(bytes, i);
  img.height = parse_number(bytes, i);
  const index_t maxval = parse_number(bytes, i);
  if (maxval != 255) throw ParseError("pnm: maxval " + std::to_string(maxval) + ", only 255 supported");
  if (i >= bytes.size() || !std::isspace(bytes[i])) throw ParseError("pnm: missing raster separator");
  ++i;  // exactly one whitespace byte before the raster
  const std::size_t need = static_cast<std::size_t>(img.width) *
                           static_cast<std::size_t>(img.height) *
                           static_cast<std::size_t>(img.channels);
  if (bytes.size() - i < need) throw ParseError("pnm: truncated raster");
  img.pixels.assign(bytes.begin() + i, bytes.begin() + i + need);
  return img;
}

void write_pnm(const std::string& path, const PnmImage& img) {
  write_file_bytes(path, serialize_pnm(img));
}

PnmImage read_pnm(const std::string& path) { return parse_pnm(read_file_bytes(path)); }

}  // namespace fb
