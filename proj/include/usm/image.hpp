#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usm/tensor.hpp"

// Binary PGM (P5) / PPM (P6) output for latent grids.
namespace usm {

struct Image {
  std::int64_t width = 0, height = 0, channels = 1;  // channels is 1 or 3
  std::vector<std::uint8_t> pixels;                  // row-major, interleaved
};

// z[c, h, w] with c in {1, 3, 4}; each channel is min-max scaled to 0..255
// and a constant channel maps to 128. The fourth channel is dropped with a
// warning. Other c throw std::invalid_argument.
Image to_image(const Tensor& z);

// Tiles batch[k, c, h, w] into a grid with cols columns (0 picks
// ceil(sqrt(k))), each tile scaled on its own. Unused tiles are black.
Image montage(const Tensor& batch, std::int64_t cols = 0);

std::vector<std::uint8_t> encode_pnm(const Image& img);
// Atomic write (temporary file, then rename).
void write_image(const std::string& path, const Image& img);
void emit_image(const Tensor& z, const std::string& path);

}  // namespace usm
