#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ssmcyto {

// Interleaved RGB, row-major, values in [0, 1].
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), data(w * h * 3, fill) {}

  double& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
};

// PNG or JPEG, chosen by file signature. Missing file -> IoError; undecodable -> FormatError.
Image read_image(const std::string& path);
// 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
void write_png(const std::string& path, const Image& img);

}  // namespace ssmcyto
