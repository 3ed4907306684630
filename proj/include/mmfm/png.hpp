#pragma once

// Minimal RGB canvas with PNG output (8-bit truecolor, zlib via the system
// library) and a 5×7 bitmap font for plot labels.

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace mmfm {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

class Canvas {
 public:
  Canvas(int width, int height, Rgb fill = {255, 255, 255});
  int width() const { return w_; }
  int height() const { return h_; }
  void set(int x, int y, Rgb c);  // clipped
  Rgb get(int x, int y) const;
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);  // inclusive-exclusive
  void hline(int x0, int x1, int y, Rgb c);
  void vline(int x, int y0, int y1, Rgb c);
  /// Dashed horizontal line.
  void dashed_hline(int x0, int x1, int y, Rgb c, int dash = 4);
  /// Upper-cased text, 6 px advance per glyph, scale ≥ 1; unknown glyphs
  /// render as blanks. Returns the drawn width.
  int text(int x, int y, std::string_view s, Rgb c, int scale = 1);
  static int text_width(std::string_view s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }
  /// Pastes another canvas with its top-left corner at (x, y).
  void blit(const Canvas& src, int x, int y);

  std::vector<std::uint8_t> encode_png() const;
  void write_png(const std::filesystem::path& path) const;
  const std::vector<std::uint8_t>& pixels() const { return px_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

/// Decodes PNGs written by Canvas::encode_png (8-bit RGB, filter 0).
Canvas decode_png(const std::vector<std::uint8_t>& bytes);

/// "hot" ramp: black → red → yellow → white over t ∈ [0, 1].
Rgb heat_color(double t);

}  // namespace mmfm
