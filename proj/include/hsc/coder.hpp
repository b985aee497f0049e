#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsc/detmath.hpp"

namespace hsc {

// ---------------------------------------------------------------------------
// quantized CDF tables
//
// A table covers integer symbols -L..L plus one trailing escape slot, with
// 16-bit total frequency. Escaped values are followed by their raw 16-bit
// encoding in the same range-coded stream.

inline constexpr std::uint32_t kCdfBits = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfBits;
inline constexpr double kCoderSigmaMin = 0.04;
inline constexpr double kCoderSigmaMax = 256.0;
inline constexpr int kSigmaLevels = 256;

struct QuantizedCdf {
  std::int32_t half_width = 0;     // L
  std::vector<std::uint32_t> cum;  // 2L+3 entries: cum[0]=0, cum.back()=kCdfTotal

  std::uint32_t slots() const { return static_cast<std::uint32_t>(2 * half_width + 2); }
  std::uint32_t escape_slot() const { return static_cast<std::uint32_t>(2 * half_width + 1); }
  std::uint32_t freq(std::uint32_t slot) const { return cum[slot + 1] - cum[slot]; }
};

namespace detail {

// Largest-remainder quantization of probability masses to integer
// frequencies summing to kCdfTotal, every slot >= 1. Fully deterministic:
// ties broken by slot index.
inline std::vector<std::uint32_t> quantize_masses(std::vector<double> mass) {
  const std::size_t n = mass.size();
  if (n == 0 || n > kCdfTotal) throw std::logic_error("cdf: bad slot count");
  double total = 0.0;
  for (auto& m : mass) {
    if (m < 0.0) m = 0.0;
    total += m;
  }
  if (!(total > 0.0)) {
    mass.assign(n, 1.0);
    total = static_cast<double>(n);
  }
  std::vector<std::uint32_t> freq(n);
  std::vector<std::pair<double, std::size_t>> rem(n);
  std::uint32_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = mass[i] / total * static_cast<double>(kCdfTotal);
    const double fl = std::floor(share);
    freq[i] = static_cast<std::uint32_t>(fl);
    rem[i] = {share - fl, i};
    assigned += freq[i];
  }
  // distribute the deficit to the largest remainders (index-ordered ties)
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::uint32_t deficit = kCdfTotal - assigned;
  for (std::size_t i = 0; deficit > 0 && i < n; ++i, --deficit) ++freq[rem[i].second];
  // enforce the frequency floor, spreading the steals round-robin over the
  // largest slots so no single frequency is distorted by more than a count
  // or two
  std::vector<std::size_t> zeros;
  for (std::size_t i = 0; i < n; ++i)
    if (freq[i] == 0) zeros.push_back(i);
  if (!zeros.empty()) {
    std::vector<std::size_t> donors(n);
    for (std::size_t i = 0; i < n; ++i) donors[i] = i;
    std::sort(donors.begin(), donors.end(), [&](std::size_t a, std::size_t b) {
      if (freq[a] != freq[b]) return freq[a] > freq[b];
      return a < b;
    });
    std::size_t d = 0;
    for (std::size_t z : zeros) {
      std::size_t scanned = 0;
      while (freq[donors[d]] < 2) {
        d = (d + 1) % n;
        if (++scanned > n) throw std::logic_error("cdf: cannot satisfy frequency floor");
      }
      --freq[donors[d]];
      freq[z] = 1;
      d = (d + 1) % n;
    }
  }
  return freq;
}

inline QuantizedCdf cdf_from_masses(std::int32_t half_width, std::vector<double> mass) {
  QuantizedCdf cdf;
  cdf.half_width = half_width;
  const auto freq = quantize_masses(std::move(mass));
  cdf.cum.resize(freq.size() + 1);
  cdf.cum[0] = 0;
  for (std::size_t i = 0; i < freq.size(); ++i) cdf.cum[i + 1] = cdf.cum[i] + freq[i];
  return cdf;
}

}  // namespace detail

// Alphabet half-width adapted to the spread, capped by the 255 design limit.
// +-8 sigma (with a floor of 8) makes escapes vanishingly rare even when the
// coded values are several times wider than the model predicted, while the
// round-robin frequency floor keeps the table body undistorted.
inline std::int32_t alphabet_half_width(double spread) {
  const double w = std::ceil(8.0 * spread);
  if (w < 8.0) return 8;
  if (w > 255.0) return 255;
  return static_cast<std::int32_t>(w);
}

// Table for symbols k = round(y - mu): zero-centered Gaussian of width sigma
// convolved with the unit box, tail mass on the escape slot.
inline QuantizedCdf build_cdf_gaussian(double sigma, std::int32_t half_width) {
  if (!(sigma > 0.0)) throw std::invalid_argument("cdf: sigma must be positive");
  const std::int32_t L = half_width;
  std::vector<double> mass(static_cast<std::size_t>(2 * L + 2));
  double covered = 0.0;
  double lo_cdf = detmath::det_normal_cdf((-L - 0.5) / sigma);
  for (std::int32_t k = -L; k <= L; ++k) {
    const double hi_cdf = detmath::det_normal_cdf((k + 0.5) / sigma);
    const double m = hi_cdf - lo_cdf;
    mass[static_cast<std::size_t>(k + L)] = m;
    covered += m;
    lo_cdf = hi_cdf;
  }
  mass.back() = std::max(0.0, 1.0 - covered);
  return detail::cdf_from_masses(L, std::move(mass));
}

// Table for integer hyper-latent values near `center` = round(loc): symbol k
// stands for the value k + center under a logistic(loc, scale) density.
inline QuantizedCdf build_cdf_logistic(double loc, double scale, std::int32_t center,
                                       std::int32_t half_width) {
  if (!(scale > 0.0)) throw std::invalid_argument("cdf: scale must be positive");
  const std::int32_t L = half_width;
  std::vector<double> mass(static_cast<std::size_t>(2 * L + 2));
  double covered = 0.0;
  double lo_cdf = detmath::det_logistic_cdf((center - L - 0.5 - loc) / scale);
  for (std::int32_t k = -L; k <= L; ++k) {
    const double hi_cdf = detmath::det_logistic_cdf((center + k + 0.5 - loc) / scale);
    const double m = hi_cdf - lo_cdf;
    mass[static_cast<std::size_t>(k + L)] = m;
    covered += m;
    lo_cdf = hi_cdf;
  }
  mass.back() = std::max(0.0, 1.0 - covered);
  return detail::cdf_from_masses(L, std::move(mass));
}

// ---------------------------------------------------------------------------
// sigma quantization
//
// Per-element Gaussian widths are snapped to a fixed ladder of kSigmaLevels
// log-spaced values spanning [kCoderSigmaMin, kCoderSigmaMax]; encoder and
// decoder derive identical tables from the level index. Levels and midpoints
// are built with the deterministic exp/sqrt only.

class SigmaTable {
 public:
  static const SigmaTable& get() {
    static const SigmaTable instance;
    return instance;
  }

  double level(int idx) const { return levels_[static_cast<std::size_t>(idx)]; }
  const QuantizedCdf& table(int idx) const { return tables_[static_cast<std::size_t>(idx)]; }

  // Nearest level in log space (geometric-midpoint comparison).
  int index_for(double sigma) const {
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma table: non-positive sigma");
    const auto it = std::upper_bound(midpoints_.begin(), midpoints_.end(), sigma);
    return static_cast<int>(it - midpoints_.begin());
  }

 private:
  SigmaTable() {
    // log(kCoderSigmaMax / kCoderSigmaMin) = log(6400), fixed constant
    const double log_span = 8.7640532693477632;
    levels_.resize(kSigmaLevels);
    for (int i = 0; i < kSigmaLevels; ++i)
      levels_[static_cast<std::size_t>(i)] =
          kCoderSigmaMin * detmath::det_exp(static_cast<double>(i) * log_span /
                                            static_cast<double>(kSigmaLevels - 1));
    midpoints_.resize(kSigmaLevels - 1);
    for (int i = 0; i + 1 < kSigmaLevels; ++i)
      midpoints_[static_cast<std::size_t>(i)] =
          std::sqrt(levels_[static_cast<std::size_t>(i)] * levels_[static_cast<std::size_t>(i + 1)]);
    tables_.reserve(kSigmaLevels);
    for (int i = 0; i < kSigmaLevels; ++i) {
      const double s = levels_[static_cast<std::size_t>(i)];
      tables_.push_back(build_cdf_gaussian(s, alphabet_half_width(s)));
    }
  }

  std::vector<double> levels_;
  std::vector<double> midpoints_;
  std::vector<QuantizedCdf> tables_;
};

// ---------------------------------------------------------------------------
// range coder (carry-propagating byte-oriented variant)
//
// 32-bit range register, 64-bit low accumulator, renormalization below 2^24.
// The first output byte is always zero (carry headroom); the flush appends
// five bytes so the decoder's look-ahead never starves on a valid stream.

class RangeEncoder {
 public:
  // slot coded under a 16-bit-total CDF table
  void encode_slot(const QuantizedCdf& cdf, std::uint32_t slot) {
    encode(cdf.cum[slot], cdf.cum[slot + 1], kCdfBits);
  }

  // raw byte under an implicit uniform 256-entry table
  void encode_byte(std::uint8_t b) { encode(b, static_cast<std::uint32_t>(b) + 1, 8); }

  // symbol with escape + raw-16-bit fallback for out-of-alphabet values
  void put_symbol(const QuantizedCdf& cdf, std::int32_t value) {
    if (value >= -cdf.half_width && value <= cdf.half_width) {
      encode_slot(cdf, static_cast<std::uint32_t>(value + cdf.half_width));
      return;
    }
    if (value < -32767 || value > 32767)
      throw std::invalid_argument("range encoder: symbol " + std::to_string(value) +
                                  " exceeds the raw fallback range");
    encode_slot(cdf, cdf.escape_slot());
    const std::uint32_t raw = static_cast<std::uint32_t>(value + 32768);
    encode_byte(static_cast<std::uint8_t>(raw >> 8));
    encode_byte(static_cast<std::uint8_t>(raw & 0xFF));
  }

  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(bytes_);
  }

 private:
  void encode(std::uint32_t cum_lo, std::uint32_t cum_hi, std::uint32_t total_bits) {
    const std::uint32_t r = range_ >> total_bits;
    low_ += static_cast<std::uint64_t>(r) * cum_lo;
    range_ = r * (cum_hi - cum_lo);
    while (range_ < (1u << 24)) {
      range_ <<= 8;
      shift_low();
    }
  }

  void shift_low() {
    if (static_cast<std::uint32_t>(low_ >> 32) != 0 ||
        static_cast<std::uint32_t>(low_) < 0xFF000000u) {
      const std::uint8_t carry = static_cast<std::uint8_t>(low_ >> 32);
      do {
        bytes_.push_back(static_cast<std::uint8_t>(cache_ + carry));
        cache_ = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ << 8) & 0xFFFFFFFFull;
  }

  std::vector<std::uint8_t> bytes_;
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
};

class RangeDecoder {
 public:
  RangeDecoder(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {
    // carry-headroom byte, always zero on a valid stream
    if (next_byte() != 0) throw std::runtime_error("range decoder: corrupted stream");
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  std::uint32_t decode_slot(const QuantizedCdf& cdf) {
    const std::uint32_t r = range_ >> kCdfBits;
    const std::uint32_t f = static_cast<std::uint32_t>(code_ / r);
    if (f >= kCdfTotal) throw std::runtime_error("range decoder: corrupted stream");
    const auto it = std::upper_bound(cdf.cum.begin(), cdf.cum.end(), f);
    const std::uint32_t slot = static_cast<std::uint32_t>(it - cdf.cum.begin() - 1);
    update(r, cdf.cum[slot], cdf.cum[slot + 1]);
    return slot;
  }

  std::uint8_t decode_byte() {
    const std::uint32_t r = range_ >> 8;
    const std::uint32_t b = static_cast<std::uint32_t>(code_ / r);
    if (b >= 256) throw std::runtime_error("range decoder: corrupted stream");
    update(r, b, b + 1);
    return static_cast<std::uint8_t>(b);
  }

  std::int32_t get_symbol(const QuantizedCdf& cdf) {
    const std::uint32_t slot = decode_slot(cdf);
    if (slot != cdf.escape_slot()) return static_cast<std::int32_t>(slot) - cdf.half_width;
    const std::uint32_t hi = decode_byte(), lo = decode_byte();
    return static_cast<std::int32_t>((hi << 8) | lo) - 32768;
  }

 private:
  void update(std::uint32_t r, std::uint32_t cum_lo, std::uint32_t cum_hi) {
    code_ -= static_cast<std::uint64_t>(r) * cum_lo;
    range_ = r * (cum_hi - cum_lo);
    while (range_ < (1u << 24)) {
      range_ <<= 8;
      code_ = (code_ << 8) | next_byte();
    }
  }

  std::uint8_t next_byte() {
    if (pos_ >= size_) throw std::runtime_error("range decoder: truncated stream");
    return data_[pos_++];
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::uint64_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

// ---------------------------------------------------------------------------
// bitstream container (all integers little-endian)
//
// header: magic "HSCB" | version u8 | model hash u64 | height u16 | width u16
//         | lambda index u8
// payload: hyper-latent segment, then one segment per latent chunk in
//          schedule order; each segment is u32 byte length + bytes.

inline constexpr std::uint8_t kStreamVersion = 1;

struct StreamHeader {
  std::uint8_t version = kStreamVersion;
  std::uint64_t model_hash = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint8_t lambda_index = 0;
};

inline constexpr std::size_t kHeaderBytes = 18;

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t off = 0;

  void need(std::size_t k, const char* what) const {
    if (off + k > n) throw std::runtime_error(std::string("bitstream: truncated ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[off++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
    off += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[off + static_cast<std::size_t>(i)];
    off += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[off + static_cast<std::size_t>(i)];
    off += 8;
    return v;
  }
};

}  // namespace detail

inline void write_header(std::vector<std::uint8_t>& out, const StreamHeader& h) {
  out.push_back('H');
  out.push_back('S');
  out.push_back('C');
  out.push_back('B');
  out.push_back(h.version);
  detail::put_u64(out, h.model_hash);
  detail::put_u16(out, h.height);
  detail::put_u16(out, h.width);
  out.push_back(h.lambda_index);
}

inline StreamHeader read_header(detail::ByteReader& r) {
  r.need(4, "magic");
  if (std::memcmp(r.p + r.off, "HSCB", 4) != 0)
    throw std::runtime_error("bitstream: bad magic (not a compressed-image stream)");
  r.off += 4;
  StreamHeader h;
  h.version = r.u8("version");
  if (h.version != kStreamVersion)
    throw std::runtime_error("bitstream: unsupported format version " + std::to_string(h.version));
  h.model_hash = r.u64("model hash");
  h.height = r.u16("height");
  h.width = r.u16("width");
  h.lambda_index = r.u8("lambda index");
  return h;
}

inline void write_segment(std::vector<std::uint8_t>& out, const std::vector<std::uint8_t>& seg) {
  if (seg.size() > 0xFFFFFFFFull) throw std::invalid_argument("bitstream: segment too large");
  detail::put_u32(out, static_cast<std::uint32_t>(seg.size()));
  out.insert(out.end(), seg.begin(), seg.end());
}

// Returns a view of the next length-prefixed segment.
inline std::pair<const std::uint8_t*, std::size_t> read_segment(detail::ByteReader& r) {
  const std::uint32_t len = r.u32("segment length");
  r.need(len, "segment payload");
  const std::uint8_t* start = r.p + r.off;
  r.off += len;
  return {start, len};
}

}  // namespace hsc
