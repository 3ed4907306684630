#include "mmfm/png.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>

#include <zlib.h>

#include "mmfm/errors.hpp"

namespace mmfm {

namespace {

using Glyph = std::array<std::uint8_t, 7>;

const std::map<char, Glyph>& font() {
  static const std::map<char, Glyph> f = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'-', {0, 0, 0, 0x1F, 0, 0, 0}},                   {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
      {'_', {0, 0, 0, 0, 0, 0, 0x1F}},                   {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},       {'/', {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0}},
      {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},                {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
  };
  return f;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw FormatError("png truncated");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

}  // namespace

Canvas::Canvas(int width, int height, Rgb fill) : w_(width), h_(height) {
  if (width <= 0 || height <= 0) throw DimensionError("canvas dimensions must be positive");
  px_.resize(static_cast<std::size_t>(w_) * h_ * 3);
  for (std::size_t i = 0; i < px_.size(); i += 3) {
    px_[i] = fill.r;
    px_[i + 1] = fill.g;
    px_[i + 2] = fill.b;
  }
}

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
  p[0] = c.r;
  p[1] = c.g;
  p[2] = c.b;
}

Rgb Canvas::get(int x, int y) const {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) throw IndexError("pixel outside the canvas");
  const auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
  return {p[0], p[1], p[2]};
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) set(x, y, c);
}

void Canvas::hline(int x0, int x1, int y, Rgb c) {
  for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

void Canvas::vline(int x, int y0, int y1, Rgb c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) set(x, y, c);
}

void Canvas::dashed_hline(int x0, int x1, int y, Rgb c, int dash) {
  for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x)
    if (((x - x0) / dash) % 2 == 0) set(x, y, c);
}

int Canvas::text(int x, int y, std::string_view s, Rgb c, int scale) {
  const auto& f = font();
  int cx = x;
  for (char ch : s) {
    const auto it = f.find(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    if (it != f.end()) {
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (it->second[static_cast<std::size_t>(row)] & (0x10 >> col))
            fill_rect(cx + col * scale, y + row * scale, cx + (col + 1) * scale, y + (row + 1) * scale, c);
    }
    cx += 6 * scale;
  }
  return cx - x;
}

void Canvas::blit(const Canvas& src, int x, int y) {
  for (int sy = 0; sy < src.h_; ++sy)
    for (int sx = 0; sx < src.w_; ++sx) set(x + sx, y + sy, src.get(sx, sy));
}

std::vector<std::uint8_t> Canvas::encode_png() const {
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h_) * (1 + static_cast<std::size_t>(w_) * 3));
  for (int y = 0; y < h_; ++y) {
    raw.push_back(0);
    const auto* row = &px_[static_cast<std::size_t>(y) * w_ * 3];
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(w_) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw FormatError("zlib compression failed");
  z.resize(zlen);

  std::vector<std::uint8_t> out(kSignature, kSignature + 8);
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w_));
  put_u32(ihdr, static_cast<std::uint32_t>(h_));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor, deflate, filter 0, no interlace
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", z);
  chunk(out, "IEND", {});
  return out;
}

void Canvas::write_png(const std::filesystem::path& path) const {
  const auto bytes = encode_png();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("cannot write " + path.string());
}

Canvas decode_png(const std::vector<std::uint8_t>& b) {
  if (b.size() < 8 || std::memcmp(b.data(), kSignature, 8) != 0) throw FormatError("not a PNG file");
  std::size_t at = 8;
  int w = 0, h = 0;
  std::vector<std::uint8_t> z;
  for (;;) {
    const auto len = get_u32(b, at);
    if (at + 12 + len > b.size()) throw FormatError("png truncated");
    const std::string type(reinterpret_cast<const char*>(&b[at + 4]), 4);
    const auto crc = crc32(0L, &b[at + 4], static_cast<uInt>(len + 4));
    if (crc != get_u32(b, at + 8 + len)) throw FormatError("png chunk " + type + " fails its CRC");
    const auto* data = &b[at + 8];
    if (type == "IHDR") {
      w = static_cast<int>(get_u32(b, at + 8));
      h = static_cast<int>(get_u32(b, at + 12));
      if (data[8] != 8 || data[9] != 2 || data[12] != 0) throw FormatError("only 8-bit RGB non-interlaced PNGs are supported");
    } else if (type == "IDAT") {
      z.insert(z.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    at += 12 + len;
  }
  if (w <= 0 || h <= 0) throw FormatError("png has no header");
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * 3));
  uLongf rlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rlen, z.data(), static_cast<uLong>(z.size())) != Z_OK || rlen != raw.size())
    throw FormatError("png image data is corrupt");
  Canvas c(w, h);
  for (int y = 0; y < h; ++y) {
    const auto* row = &raw[static_cast<std::size_t>(y) * (1 + static_cast<std::size_t>(w) * 3)];
    if (row[0] != 0) throw FormatError("unsupported png row filter");
    for (int x = 0; x < w; ++x) c.set(x, y, {row[1 + 3 * x], row[2 + 3 * x], row[3 + 3 * x]});
  }
  return c;
}

Rgb heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto u8 = [](double v) { return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5); };
  return {u8(t * 3.0), u8(t * 3.0 - 1.0), u8(t * 3.0 - 2.0)};
}

}  // namespace mmfm
