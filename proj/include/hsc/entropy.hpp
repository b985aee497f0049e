#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsc/config.hpp"
#include "hsc/conv.hpp"
#include "hsc/ops.hpp"
#include "hsc/registry.hpp"
#include "hsc/rng.hpp"
#include "hsc/transforms.hpp"

namespace hsc {

// Scale floor applied after softplus, and the probability floor applied
// before any logarithm. Both prevent degenerate distributions.
inline constexpr double kSigmaMin = 0.04;
inline constexpr double kProbFloor = 1e-9;

// ---------------------------------------------------------------------------
// quantization proxies

template <typename R>
TensorT<R> uniform_noise(Shape shape, Rng& rng) {
  return TensorT<R>::uniform(std::move(shape), rng, -0.5, 0.5);
}

// Training-time quantization surrogate: x + u, u ~ U(-1/2, 1/2) i.i.d.,
// drawn from the supplied seeded generator. Identity gradient.
template <typename R>
VarT<R> quantize_noise(const VarT<R>& x, Rng& rng) {
  return add_const_tensor(x, uniform_noise<R>(x->value.shape, rng));
}

// Inference quantization: round(y - mu) + mu, rounding half away from zero.
// The coded symbol is the integer round(y - mu); adding mu back keeps the
// dequantized latent centered on the model's prediction.
template <typename R>
TensorT<R> quantize_round(const TensorT<R>& y, const TensorT<R>& mu) {
  check_same_shape(y, mu, "quantize_round");
  TensorT<R> out(y.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double d = static_cast<double>(y.data[i]) - static_cast<double>(mu.data[i]);
    out.data[i] = static_cast<R>(std::round(d) + static_cast<double>(mu.data[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// box-convolved likelihoods (fused ops, double internals)
//
// Probability that a unit-width box centered on x falls under the model
// density: p = F((d+1/2)/s) - F((d-1/2)/s) with d = x - center. Two CDF
// families are provided: standard normal (latent chunks) and logistic
// (hyper-latent prior). The exact mass is returned (clamped at 0 against
// floating-point cancellation in deep tails); the kProbFloor floor is
// applied later, inside rate_bits, so the returned masses still sum to 1.

namespace detail {

inline double std_normal_cdf(double t) { return 0.5 * (1.0 + std::erf(t * 0.7071067811865475244)); }
inline double std_normal_pdf(double t) { return 0.3989422804014326779 * std::exp(-0.5 * t * t); }
inline double logistic_cdf(double t) { return 1.0 / (1.0 + std::exp(-t)); }
inline double logistic_pdf(double t) {
  const double s = logistic_cdf(t);
  return s * (1.0 - s);
}

// Shared forward/backward skeleton over a (cdf, pdf) pair.
template <typename R, typename Cdf, typename Pdf>
VarT<R> box_prob(const VarT<R>& x, const VarT<R>& center, const VarT<R>& spread, Cdf cdf, Pdf pdf,
                 const char* what) {
  check_same_shape(x->value, center->value, what);
  check_same_shape(x->value, spread->value, what);
  const std::size_t n = x->value.data.size();
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(spread->value.data[i]);
    if (!(s > 0.0)) throw std::invalid_argument(std::string(what) + ": spread must be positive");
    const double d = static_cast<double>(x->value.data[i]) - static_cast<double>(center->value.data[i]);
    const double p = cdf((d + 0.5) / s) - cdf((d - 0.5) / s);
    out.data[i] = static_cast<R>(p < 0.0 ? 0.0 : p);
  }
  return make_op<R>(std::move(out), {x, center, spread}, [pdf](NodeT<R>& nd) {
    auto& px = nd.parents[0];
    auto& pc = nd.parents[1];
    auto& ps = nd.parents[2];
    const bool wx = detail::wants(px), wc = detail::wants(pc), ws = detail::wants(ps);
    if (!wx && !wc && !ws) return;
    if (wx) px->ensure_grad();
    if (wc) pc->ensure_grad();
    if (ws) ps->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.data.size(); ++i) {
      const double g = static_cast<double>(nd.grad.data[i]);
      const double s = static_cast<double>(ps->value.data[i]);
      const double d = static_cast<double>(px->value.data[i]) - static_cast<double>(pc->value.data[i]);
      const double a = (d + 0.5) / s, b = (d - 0.5) / s;
      const double fa = pdf(a), fb = pdf(b);
      const double dp_dd = (fa - fb) / s;
      if (wx) px->grad.data[i] += static_cast<R>(g * dp_dd);
      if (wc) pc->grad.data[i] -= static_cast<R>(g * dp_dd);
      if (ws) ps->grad.data[i] += static_cast<R>(g * (b * fb - a * fa) / s);
    }
  });
}

}  // namespace detail

template <typename R>
VarT<R> gaussian_box_prob(const VarT<R>& yhat, const VarT<R>& mu, const VarT<R>& sigma) {
  return detail::box_prob(yhat, mu, sigma, detail::std_normal_cdf, detail::std_normal_pdf,
                          "gaussian_box_prob");
}

template <typename R>
VarT<R> logistic_box_prob(const VarT<R>& zhat, const VarT<R>& loc, const VarT<R>& scale) {
  return detail::box_prob(zhat, loc, scale, detail::logistic_cdf, detail::logistic_pdf,
                          "logistic_box_prob");
}

// Total information content of a probability tensor: sum of -log2 max(p, floor).
// A negative entry is impossible for a probability and rejected outright;
// zeros (deep-tail underflow) are saved by the floor.
template <typename R>
VarT<R> rate_bits(const VarT<R>& p) {
  for (R v : p->value.data)
    if (v < R(0)) throw std::invalid_argument("rate: negative probability");
  return scale(reduce_sum(log_e(clamp_min(p, kProbFloor))), -1.4426950408889634074);  // 1/ln 2
}

// ---------------------------------------------------------------------------
// hyper transforms

template <typename R>
struct HyperAnalysisT {
  Conv2dLayerT<R> c1, c2;

  HyperAnalysisT() = default;
  HyperAnalysisT(ParamRegistryT<R>& reg, const ModelConfig& cfg, Rng& rng)
      : c1(reg, "ha.c1", 3, cfg.latent_channels(), cfg.hyper_channels, 2, 1, rng),
        c2(reg, "ha.c2", 3, cfg.hyper_channels, cfg.hyper_channels, 2, 1, rng) {}

  VarT<R> forward(const VarT<R>& y) const {
    if (y->value.dim(0) % 4 != 0 || y->value.dim(1) % 4 != 0)
      throw std::invalid_argument("hyper analysis: latent extents must be divisible by 4, got " +
                                  shape_str(y->value.shape));
    return c2.forward(gelu(c1.forward(y)));
  }
};

template <typename R>
struct HyperSynthesisT {
  ConvTr2dLayerT<R> u1, u2;

  HyperSynthesisT() = default;
  HyperSynthesisT(ParamRegistryT<R>& reg, const ModelConfig& cfg, Rng& rng)
      : u1(reg, "hs.u1", 3, cfg.hyper_channels, cfg.hyper_channels, 2, rng),
        u2(reg, "hs.u2", 3, cfg.hyper_channels, 2 * cfg.latent_channels(), 2, rng) {}

  VarT<R> forward(const VarT<R>& zhat) const { return u2.forward(gelu(u1.forward(zhat))); }
};

// ---------------------------------------------------------------------------
// learned per-channel logistic prior over the hyper-latent

template <typename R>
struct FactorizedPriorT {
  ParameterT<R>* loc = nullptr;
  ParameterT<R>* raw_scale = nullptr;
  std::int64_t channels = 0;

  FactorizedPriorT() = default;
  FactorizedPriorT(ParamRegistryT<R>& reg, std::int64_t c, Rng&) : channels(c) {
    loc = &reg.create("prior.loc", TensorT<R>::zeros({c}));
    // softplus(0.4774) + 0.04 ~= 1.0: unit scale at initialization.
    raw_scale = &reg.create("prior.scale", TensorT<R>::full({c}, R(0.4774)));
  }

  VarT<R> loc_map(std::int64_t h, std::int64_t w) const {
    return broadcast_channels(use_param(*loc), h, w);
  }
  VarT<R> scale_map(std::int64_t h, std::int64_t w) const {
    return broadcast_channels(affine(softplus(use_param(*raw_scale)), 1.0, kSigmaMin), h, w);
  }

  // Plain values for the coder's table construction.
  std::vector<double> loc_values() const {
    return std::vector<double>(loc->value.data.begin(), loc->value.data.end());
  }
  std::vector<double> scale_values() const {
    std::vector<double> out(loc->value.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = static_cast<double>(raw_scale->value.data[i]);
      const double sp = r > 30.0 ? r : std::log1p(std::exp(r));
      out[i] = sp + kSigmaMin;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// uneven channel-conditional context + per-chunk parameter heads

// Context features for chunk i: a learned constant map for the first chunk,
// otherwise two 3x3 convs (GELU between) over the concatenation of all
// previously decoded chunks.
template <typename R>
struct ChunkContextT {
  ParameterT<R>* constant = nullptr;  // chunk 0 only
  std::optional<Conv2dLayerT<R>> c1, c2;

  ChunkContextT() = default;
  ChunkContextT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t prefix_channels,
                std::int64_t ctx_channels, Rng& rng) {
    if (prefix_channels == 0) {
      constant = &reg.create(nm + ".const", TensorT<R>::zeros({ctx_channels}));
    } else {
      c1.emplace(reg, nm + ".c1", 3, prefix_channels, ctx_channels, 1, 1, rng);
      c2.emplace(reg, nm + ".c2", 3, ctx_channels, ctx_channels, 1, 1, rng);
    }
  }
};

// (mu, sigma) head for one chunk: concat(context, hyper) -> 1x1 conv ->
// GELU -> 1x1 conv -> split; sigma = softplus(raw) + kSigmaMin.
template <typename R>
struct ChunkEpmT {
  Conv2dLayerT<R> f1, f2;
  std::int64_t width = 0;

  ChunkEpmT() = default;
  ChunkEpmT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t in_channels,
            std::int64_t chunk_width, Rng& rng)
      : width(chunk_width) {
    const std::int64_t hidden = (in_channels + 2 * chunk_width) / 2;
    f1 = Conv2dLayerT<R>(reg, nm + ".f1", 1, in_channels, hidden, 1, 1, rng);
    f2 = Conv2dLayerT<R>(reg, nm + ".f2", 1, hidden, 2 * chunk_width, 1, 1, rng);
  }
};

// ---------------------------------------------------------------------------
// the full entropy model

template <typename R>
struct EntropyTrainOutT {
  VarT<R> zhat;  // noise-quantized hyper-latent
  VarT<R> yhat;  // noise-quantized latent, chunks re-concatenated
  VarT<R> bits;  // scalar: total estimated information content in bits
};

template <typename R>
struct EntropyModelT {
  ModelConfig cfg;
  std::vector<std::int64_t> schedule;
  HyperAnalysisT<R> ha;
  HyperSynthesisT<R> hs;
  FactorizedPriorT<R> prior;
  std::vector<ChunkContextT<R>> ctxs;
  std::vector<ChunkEpmT<R>> epms;

  EntropyModelT() = default;
  EntropyModelT(ParamRegistryT<R>& reg, const ModelConfig& cfg_, Rng& rng)
      : cfg(cfg_), schedule(cfg_.chunk_schedule()), ha(reg, cfg_, rng), hs(reg, cfg_, rng),
        prior(reg, cfg_.hyper_channels, rng) {
    std::int64_t prefix = 0;
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      const std::string nm = "k" + std::to_string(i);
      ctxs.emplace_back(reg, "ctx." + nm, prefix, cfg.context_channels, rng);
      epms.emplace_back(reg, "epm." + nm, cfg.context_channels + 2 * cfg.latent_channels(),
                        schedule[i], rng);
      prefix += schedule[i];
    }
  }

  // Context features for chunk i given the previously decoded chunks
  // (exactly chunks 0..i-1, in order, each [h, w, schedule[j]]).
  VarT<R> context(std::size_t i, const std::vector<VarT<R>>& prev, std::int64_t h,
                  std::int64_t w) const {
    if (prev.size() < i) throw std::invalid_argument("context: chunk order violation");
    for (std::size_t j = 0; j < i; ++j)
      if (prev[j]->value.dim(2) != schedule[j] || prev[j]->value.dim(0) != h ||
          prev[j]->value.dim(1) != w)
        throw std::invalid_argument("context: decoded chunk " + std::to_string(j) +
                                    " has wrong shape " + shape_str(prev[j]->value.shape));
    if (i == 0) return broadcast_channels(use_param(*ctxs[0].constant), h, w);
    auto cat = i == 1 ? prev[0] : concat(std::vector<VarT<R>>(prev.begin(), prev.begin() + i), 2);
    return ctxs[i].c2->forward(gelu(ctxs[i].c1->forward(cat)));
  }

  // Per-chunk conditional Gaussian parameters from (context, hyper) features.
  std::pair<VarT<R>, VarT<R>> params(std::size_t i, const VarT<R>& ctx, const VarT<R>& hyper) const {
    if (ctx->value.dim(0) != hyper->value.dim(0) || ctx->value.dim(1) != hyper->value.dim(1))
      throw std::invalid_argument("entropy params: context/hyper spatial shapes differ");
    auto t = concat(std::vector<VarT<R>>{ctx, hyper}, 2);
    auto out = epms[i].f2.forward(gelu(epms[i].f1.forward(t)));
    auto parts = split(out, 2, {schedule[i], schedule[i]});
    return {parts[0], affine(softplus(parts[1]), 1.0, kSigmaMin)};
  }

  // Training-mode rate estimate with noise-proxy quantization for both the
  // latent and the hyper-latent. Noise draw order is fixed: z first, then
  // each chunk in schedule order.
  EntropyTrainOutT<R> train_rate(const VarT<R>& y, Rng& rng) const {
    const std::int64_t h = y->value.dim(0), w = y->value.dim(1);
    auto z = ha.forward(y);
    auto zhat = quantize_noise(z, rng);
    auto chunks = split(y, 2, schedule);
    std::vector<VarT<R>> noisy;
    noisy.reserve(chunks.size());
    for (auto& c : chunks) noisy.push_back(quantize_noise(c, rng));

    const std::int64_t zh = z->value.dim(0), zw = z->value.dim(1);
    auto bits = rate_bits(logistic_box_prob(zhat, prior.loc_map(zh, zw), prior.scale_map(zh, zw)));
    auto hyper = hs.forward(zhat);
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      auto [mu, sigma] = params(i, context(i, noisy, h, w), hyper);
      bits = add(bits, rate_bits(gaussian_box_prob(noisy[i], mu, sigma)));
    }
    return {zhat, concat(noisy, 2), bits};
  }
};

}  // namespace hsc
