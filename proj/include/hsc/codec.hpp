#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsc/model.hpp"

namespace hsc {

// Default cap on input extents; keeps worst-case memory desk-sized and fits
// the u16 header fields with room to spare.
inline constexpr std::int64_t kMaxImageExtent = 4096;

namespace detail {

// Triangle-wave fold of index i into [0, n): reflection without repeating
// the border sample. Handles pads wider than the source.
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

}  // namespace detail

// Reflect-pad an [h, w, c] tensor on the bottom/right to [ph, pw, c].
template <typename R>
TensorT<R> reflect_pad(const TensorT<R>& x, std::int64_t ph, std::int64_t pw) {
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (ph < h || pw < w) throw std::invalid_argument("reflect_pad: target extents shrink the input");
  if (ph == h && pw == w) return x;
  TensorT<R> out({ph, pw, c});
  for (std::int64_t y = 0; y < ph; ++y) {
    const std::int64_t sy = detail::reflect_index(y, h);
    for (std::int64_t xx = 0; xx < pw; ++xx) {
      const std::int64_t sx = detail::reflect_index(xx, w);
      const R* src = &x.data[(sy * w + sx) * c];
      R* dst = &out.data[(y * pw + xx) * c];
      for (std::int64_t k = 0; k < c; ++k) dst[k] = src[k];
    }
  }
  return out;
}

namespace detail {

// -log2 of the floored box mass under a Gaussian, evaluated in double; the
// compressor's rate estimate sums these over every coded symbol.
inline double gaussian_bits(double symbol, double sigma) {
  const double a = (symbol + 0.5) / sigma, b = (symbol - 0.5) / sigma;
  const double p = 0.5 * (std::erf(a / std::sqrt(2.0)) - std::erf(b / std::sqrt(2.0)));
  return -std::log2(std::max(p, 1e-9));
}

inline double logistic_bits(double value, double loc, double scale) {
  auto cdf = [](double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
  };
  const double p = cdf((value + 0.5 - loc) / scale) - cdf((value - 0.5 - loc) / scale);
  return -std::log2(std::max(p, 1e-9));
}

}  // namespace detail

// Stream/model pairing violation: the bitstream names a model identifier the
// loaded weights don't match. Distinguished from generic data errors so
// callers can report it as its own failure class.
struct ModelMismatchError final : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename R>
struct CompressResultT {
  std::vector<std::uint8_t> bytes;  // complete container: header + segments
  double estimated_bits = 0.0;      // information content of the coded symbols
  TensorT<R> yhat;                  // quantized latent as used by the encoder
  TensorT<R> zhat;                  // quantized hyper-latent
};

template <typename R>
struct DecompressResultT {
  TensorT<R> image;  // [h, w, 3] in [0, 1], true extents
  TensorT<R> yhat;   // quantized latent reconstructed by the decoder
  TensorT<R> zhat;   // quantized hyper-latent reconstructed by the decoder
};

using CompressResult = CompressResultT<float>;
using DecompressResult = DecompressResultT<float>;

// ---------------------------------------------------------------------------
// compress

template <typename R>
CompressResultT<R> compress(const ModelT<R>& model, const TensorT<R>& image,
                            std::uint8_t lambda_index = 0,
                            std::int64_t max_extent = kMaxImageExtent) {
  if (image.shape.size() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("compress: expected an [h, w, 3] image tensor");
  const std::int64_t h = image.dim(0), w = image.dim(1);
  if (h < 1 || w < 1) throw std::invalid_argument("compress: empty image");
  if (h > max_extent || w > max_extent)
    throw std::invalid_argument("compress: image exceeds the " + std::to_string(max_extent) +
                                " pixel extent cap");
  if (!image.all_finite()) throw std::invalid_argument("compress: non-finite pixel values");

  const auto [ph, pw] = padded_extents(model.cfg, h, w);
  const TensorT<R> padded = reflect_pad(image, ph, pw);

  // inference forwards: no tape scope, so no graph is retained
  auto y = model.analysis.forward(make_leaf(padded));
  if (!y->value.all_finite()) throw std::runtime_error("compress: non-finite latents");
  auto z = model.entropy.ha.forward(y);
  if (!z->value.all_finite()) throw std::runtime_error("compress: non-finite hyper-latents");

  const std::int64_t yh = y->value.dim(0), yw = y->value.dim(1);
  const std::int64_t zh = z->value.dim(0), zw = z->value.dim(1), zc = z->value.dim(2);

  CompressResultT<R> res;

  // hyper-latent: plain rounding, per-channel logistic tables centered on the
  // learned prior location
  const auto locs = model.entropy.prior.loc_values();
  const auto scales = model.entropy.prior.scale_values();
  std::vector<QuantizedCdf> ztabs(static_cast<std::size_t>(zc));
  std::vector<std::int32_t> zcenter(static_cast<std::size_t>(zc));
  for (std::int64_t c = 0; c < zc; ++c) {
    zcenter[static_cast<std::size_t>(c)] = static_cast<std::int32_t>(std::lround(locs[c]));
    ztabs[static_cast<std::size_t>(c)] = build_cdf_logistic(
        locs[c], scales[c], zcenter[static_cast<std::size_t>(c)], alphabet_half_width(scales[c]));
  }

  res.zhat = TensorT<R>(z->value.shape);
  RangeEncoder zenc;
  for (std::int64_t i = 0; i < zh * zw; ++i) {
    for (std::int64_t c = 0; c < zc; ++c) {
      const std::size_t at = static_cast<std::size_t>(i * zc + c);
      const double v = static_cast<double>(z->value.data[at]);
      const std::int32_t q = static_cast<std::int32_t>(std::lround(v));
      res.zhat.data[at] = static_cast<R>(q);
      zenc.put_symbol(ztabs[static_cast<std::size_t>(c)],
                      q - zcenter[static_cast<std::size_t>(c)]);
      res.estimated_bits += detail::logistic_bits(static_cast<double>(q), locs[c], scales[c]);
    }
  }

  auto hyper = model.entropy.hs.forward(make_leaf(res.zhat));

  const auto& schedule = model.entropy.schedule;
  auto chunks = split(y, 2, schedule);
  const auto& sig = SigmaTable::get();

  std::vector<std::vector<std::uint8_t>> segments;
  segments.push_back(zenc.finish());

  std::vector<VarT<R>> decoded;
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    auto ctx = model.entropy.context(i, decoded, yh, yw);
    auto [mu, sigma] = model.entropy.params(i, ctx, hyper);
    TensorT<R> yhat_i(chunks[i]->value.shape);
    RangeEncoder enc;
    for (std::size_t e = 0; e < yhat_i.data.size(); ++e) {
      const double yv = static_cast<double>(chunks[i]->value.data[e]);
      const double mv = static_cast<double>(mu->value.data[e]);
      const double sv = static_cast<double>(sigma->value.data[e]);
      const std::int32_t k = static_cast<std::int32_t>(std::lround(yv - mv));
      enc.put_symbol(sig.table(sig.index_for(sv)), k);
      yhat_i.data[e] = static_cast<R>(k) + static_cast<R>(mv);
      res.estimated_bits += detail::gaussian_bits(static_cast<double>(k), sv);
    }
    segments.push_back(enc.finish());
    decoded.push_back(make_leaf(std::move(yhat_i)));
  }

  StreamHeader hd;
  hd.model_hash = model.hash();
  hd.height = static_cast<std::uint16_t>(h);
  hd.width = static_cast<std::uint16_t>(w);
  hd.lambda_index = lambda_index;
  write_header(res.bytes, hd);
  for (const auto& seg : segments) write_segment(res.bytes, seg);

  res.yhat = concat(decoded, 2)->value;
  return res;
}

// ---------------------------------------------------------------------------
// decompress

template <typename R>
DecompressResultT<R> decompress(const ModelT<R>& model, const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{bytes.data(), bytes.size()};
  const StreamHeader hd = read_header(r);
  if (hd.model_hash != model.hash())
    throw ModelMismatchError(
        "decompress: stream was produced by a different model (identifier mismatch)");

  const std::int64_t h = hd.height, w = hd.width;
  if (h < 1 || w < 1) throw std::runtime_error("decompress: header carries empty extents");
  const auto [ph, pw] = padded_extents(model.cfg, h, w);
  const std::int64_t stride = model.cfg.transform_stride();
  const std::int64_t yh = ph / stride, yw = pw / stride;
  const std::int64_t zh = yh / 4, zw = yw / 4;
  const std::int64_t zc = model.cfg.hyper_channels;

  // hyper-latent
  const auto locs = model.entropy.prior.loc_values();
  const auto scales = model.entropy.prior.scale_values();
  auto [zseg, zlen] = read_segment(r);
  TensorT<R> zhat({zh, zw, zc});
  {
    std::vector<QuantizedCdf> ztabs(static_cast<std::size_t>(zc));
    std::vector<std::int32_t> zcenter(static_cast<std::size_t>(zc));
    for (std::int64_t c = 0; c < zc; ++c) {
      zcenter[static_cast<std::size_t>(c)] = static_cast<std::int32_t>(std::lround(locs[c]));
      ztabs[static_cast<std::size_t>(c)] = build_cdf_logistic(
          locs[c], scales[c], zcenter[static_cast<std::size_t>(c)], alphabet_half_width(scales[c]));
    }
    RangeDecoder dec(zseg, zlen);
    for (std::int64_t i = 0; i < zh * zw; ++i)
      for (std::int64_t c = 0; c < zc; ++c)
        zhat.data[static_cast<std::size_t>(i * zc + c)] =
            static_cast<R>(dec.get_symbol(ztabs[static_cast<std::size_t>(c)]) +
                           zcenter[static_cast<std::size_t>(c)]);
  }

  auto hyper = model.entropy.hs.forward(make_leaf(zhat));

  const auto& schedule = model.entropy.schedule;
  const auto& sig = SigmaTable::get();
  std::vector<VarT<R>> decoded;
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    auto ctx = model.entropy.context(i, decoded, yh, yw);
    auto [mu, sigma] = model.entropy.params(i, ctx, hyper);
    auto [seg, slen] = read_segment(r);
    RangeDecoder dec(seg, slen);
    TensorT<R> yhat_i({yh, yw, schedule[i]});
    for (std::size_t e = 0; e < yhat_i.data.size(); ++e) {
      const double sv = static_cast<double>(sigma->value.data[e]);
      const std::int32_t k = dec.get_symbol(sig.table(sig.index_for(sv)));
      yhat_i.data[e] = static_cast<R>(k) + static_cast<R>(mu->value.data[e]);
    }
    decoded.push_back(make_leaf(std::move(yhat_i)));
  }
  if (r.off != bytes.size())
    throw std::runtime_error("decompress: trailing bytes after the last chunk segment");

  auto yhat = concat(decoded, 2);
  auto xpad = model.synthesis.forward(yhat);

  DecompressResultT<R> res;
  res.zhat = zhat;
  res.yhat = yhat->value;
  res.image = TensorT<R>({h, w, 3});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        R v = xpad->value.data[static_cast<std::size_t>((y * pw + x) * 3 + c)];
        v = v < R(0) ? R(0) : (v > R(1) ? R(1) : v);
        res.image.data[static_cast<std::size_t>((y * w + x) * 3 + c)] = v;
      }
  return res;
}

// ---------------------------------------------------------------------------
// training-mode forward

template <typename R>
struct TrainForwardT {
  VarT<R> loss;  // bpp + lambda * 255^2 * mse
  VarT<R> bpp;   // estimated bits per pixel (noise-proxy quantization)
  VarT<R> mse;   // mean squared error on the [0,1] signal
  VarT<R> xhat;  // reconstruction (padded extents)
};

// Builds the rate-distortion objective on the active tape. The input must
// already be tape-visible if input gradients are wanted.
template <typename R>
TrainForwardT<R> forward_train(const ModelT<R>& model, const VarT<R>& x, double lambda, Rng& rng) {
  const std::int64_t h = x->value.dim(0), w = x->value.dim(1);
  if (!extents_valid(model.cfg, h, w))
    check_analysis_extents(model.cfg, h, w);  // throws with the padded suggestion

  auto y = model.analysis.forward(x);
  auto eo = model.entropy.train_rate(y, rng);
  auto xhat = model.synthesis.forward(eo.yhat);

  TrainForwardT<R> out;
  out.xhat = xhat;
  out.bpp = scale(eo.bits, 1.0 / static_cast<double>(h * w));
  auto diff = sub(xhat, x);
  out.mse = reduce_mean(mul(diff, diff));
  out.loss = add(out.bpp, scale(out.mse, lambda * 255.0 * 255.0));
  return out;
}

}  // namespace hsc
