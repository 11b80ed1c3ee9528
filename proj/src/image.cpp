#include "usm/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "usm/log.hpp"

namespace usm {

namespace {

std::int64_t kept_channels(std::int64_t c) {
  if (c == 1 || c == 3) return c;
  if (c == 4) return 3;
  throw std::invalid_argument("image: unsupported channel count " + std::to_string(c) + " (need 1, 3 or 4)");
}

// Writes tile z[c, h, w] into img at (x0, y0).
void blit(const double* z, std::int64_t c, std::int64_t h, std::int64_t w, Image& img, std::int64_t x0,
          std::int64_t y0) {
  const std::int64_t out_c = kept_channels(c);
  for (std::int64_t ch = 0; ch < out_c; ++ch) {
    const double* p = z + ch * h * w;
    const auto [lo, hi] = std::minmax_element(p, p + h * w);
    const double range = *hi - *lo;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        std::uint8_t v = 128;
        if (range > 0.0) v = static_cast<std::uint8_t>(std::lround(255.0 * (p[y * w + x] - *lo) / range));
        img.pixels[static_cast<std::size_t>(((y0 + y) * img.width + x0 + x) * out_c + ch)] = v;
      }
  }
}

}  // namespace

Image to_image(const Tensor& z) {
  if (z.rank() != 3) throw std::invalid_argument("to_image: expected [c, h, w], got " + shape_str(z.shape()));
  const std::int64_t c = z.dim(0), h = z.dim(1), w = z.dim(2);
  Image img{w, h, kept_channels(c), {}};
  if (c == 4) log::warn("to_image: dropping the fourth channel");
  img.pixels.assign(static_cast<std::size_t>(w * h * img.channels), 0);
  blit(z.data().data(), c, h, w, img, 0, 0);
  return img;
}

Image montage(const Tensor& batch, std::int64_t cols) {
  if (batch.rank() != 4) throw std::invalid_argument("montage: expected [k, c, h, w], got " + shape_str(batch.shape()));
  const std::int64_t k = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (cols <= 0) cols = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(k))));
  const std::int64_t rows = (k + cols - 1) / cols;
  Image img{cols * w, rows * h, kept_channels(c), {}};
  if (c == 4) log::warn("montage: dropping the fourth channel");
  img.pixels.assign(static_cast<std::size_t>(img.width * img.height * img.channels), 0);
  for (std::int64_t i = 0; i < k; ++i) {
    blit(batch.data().data() + i * c * h * w, c, h, w, img, (i % cols) * w, (i / cols) * h);
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const Image& img) {
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

void write_image(const std::string& path, const Image& img) {
  const auto bytes = encode_pnm(img);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

void emit_image(const Tensor& z, const std::string& path) { write_image(path, to_image(z)); }

}  // namespace usm
