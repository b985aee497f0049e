#pragma once

// Binary PPM (P6, 8-bit) image input/output plus the two scalar metrics the
// tools report: peak signal-to-noise ratio on the [0,1] pixel scale and
// bits per pixel of a serialized stream.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/tensor.hpp"

namespace hsc {

namespace detail_img {

// Reads one whitespace-delimited PPM header token, treating '#'-to-newline
// as a comment. Throws with the offending path on malformed headers.
inline std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (!tok.empty()) return tok;
  throw std::runtime_error("ppm: truncated header in " + path);
}

inline std::int64_t header_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = next_token(in, path);
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(tok, &pos);
    if (pos != tok.size() || v <= 0) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::runtime_error("ppm: bad " + std::string(what) + " '" + tok + "' in " + path);
  }
}

}  // namespace detail_img

// Loads an 8-bit binary PPM into an [h, w, 3] tensor scaled to [0, 1].
template <typename R = float>
TensorT<R> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot open " + path);
  const std::string magic = detail_img::next_token(f, path);
  if (magic != "P6")
    throw std::runtime_error("ppm: " + path + " is not binary PPM (magic '" + magic + "', want P6)");
  const std::int64_t w = detail_img::header_int(f, path, "width");
  const std::int64_t h = detail_img::header_int(f, path, "height");
  const std::int64_t maxval = detail_img::header_int(f, path, "maxval");
  if (maxval != 255)
    throw std::runtime_error("ppm: " + path + " has maxval " + std::to_string(maxval) +
                             "; only 8-bit (255) images are supported");
  // The header's final token is followed by exactly one whitespace byte,
  // already consumed by the tokenizer.
  std::vector<unsigned char> raw(static_cast<std::size_t>(h * w * 3));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size())
    throw std::runtime_error("ppm: " + path + " truncated (expected " + std::to_string(raw.size()) +
                             " pixel bytes, got " + std::to_string(f.gcount()) + ")");
  TensorT<R> img({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.data[i] = static_cast<R>(raw[i] / 255.0);
  return img;
}

// Writes an [h, w, 3] tensor as binary PPM, clamping to [0, 1] and rounding
// to the nearest 8-bit code.
template <typename R>
void write_ppm(const std::string& path, const TensorT<R>& img) {
  if (img.shape.size() != 3 || img.shape[2] != 3)
    throw std::invalid_argument("ppm: image tensor must be [h, w, 3], got " + shape_str(img.shape));
  const std::int64_t h = img.shape[0], w = img.shape[1];
  std::vector<unsigned char> raw(img.data.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    double v = static_cast<double>(img.data[i]);
    if (!(v > 0.0)) v = 0.0;  // also maps NaN to black
    if (v > 1.0) v = 1.0;
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot create " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("ppm: write failed for " + path);
}

// Mean squared error on the [0,1] scale, accumulated in double.
template <typename R>
double mean_squared_error(const TensorT<R>& a, const TensorT<R>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  if (a.data.empty()) throw std::invalid_argument("psnr: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// 10·log10(1 / MSE) in dB; +infinity for identical inputs.
inline double psnr_from_mse(double mse) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

template <typename R>
double psnr_db(const TensorT<R>& a, const TensorT<R>& b) {
  return psnr_from_mse(mean_squared_error(a, b));
}

// CSV-friendly rendering: identical images print the "inf" sentinel rather
// than letting infinities leak into downstream arithmetic unnoticed.
inline std::string psnr_str(double db) {
  if (!std::isfinite(db)) return "inf";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << db;
  return os.str();
}

// Rate of a serialized stream against the true (unpadded) pixel count.
inline double bits_per_pixel(std::size_t stream_bytes, std::int64_t h, std::int64_t w) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("bpp: image extents must be positive");
  return 8.0 * static_cast<double>(stream_bytes) / (static_cast<double>(h) * static_cast<double>(w));
}

}  // namespace hsc
