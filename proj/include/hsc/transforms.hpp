#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/config.hpp"
#include "hsc/conv.hpp"
#include "hsc/ops.hpp"
#include "hsc/registry.hpp"

namespace hsc {

// ---------------------------------------------------------------------------
// parameterized layer building blocks

// Bias-free linear map over the trailing channel axis.
template <typename R>
struct ProjT {
  ParameterT<R>* w = nullptr;  // [in, out]
  std::int64_t in = 0, out = 0;

  ProjT() = default;
  ProjT(ParamRegistryT<R>& reg, const std::string& name, std::int64_t in_, std::int64_t out_, Rng& rng)
      : w(&reg.create(name, glorot_uniform<R>({in_, out_}, in_, out_, rng))), in(in_), out(out_) {}

  // [N, in] -> [N, out]
  VarT<R> mat(const VarT<R>& x2d) const { return matmul(x2d, use_param(*w)); }

  // [H, W, in] -> [H, W, out]
  VarT<R> forward(const VarT<R>& x) const {
    const std::int64_t h = x->value.dim(0), wd = x->value.dim(1);
    return reshape(mat(reshape(x, {h * wd, in})), {h, wd, out});
  }
};

template <typename R>
struct Conv2dLayerT {
  ParameterT<R>* k = nullptr;
  ParameterT<R>* b = nullptr;
  std::int64_t stride = 1, groups = 1;
  Pad pad = Pad::same;

  Conv2dLayerT() = default;
  Conv2dLayerT(ParamRegistryT<R>& reg, const std::string& name, std::int64_t kh, std::int64_t cin,
               std::int64_t cout, std::int64_t stride_, std::int64_t groups_, Rng& rng)
      : stride(stride_), groups(groups_) {
    const std::int64_t cig = cin / groups_, cog = cout / groups_;
    k = &reg.create(name + ".k", glorot_uniform<R>({kh, kh, cig, cout}, kh * kh * cig, kh * kh * cog, rng));
    b = &reg.create(name + ".b", TensorT<R>::zeros({cout}));
  }

  VarT<R> forward(const VarT<R>& x) const {
    return conv2d(x, use_param(*k), use_param(*b), stride, groups, pad);
  }
};

template <typename R>
struct ConvTr2dLayerT {
  ParameterT<R>* k = nullptr;
  ParameterT<R>* b = nullptr;
  std::int64_t stride = 2;

  ConvTr2dLayerT() = default;
  ConvTr2dLayerT(ParamRegistryT<R>& reg, const std::string& name, std::int64_t kh, std::int64_t csrc,
                 std::int64_t cdst, std::int64_t stride_, Rng& rng)
      : stride(stride_) {
    k = &reg.create(name + ".k", glorot_uniform<R>({kh, kh, cdst, csrc}, kh * kh * csrc, kh * kh * cdst, rng));
    b = &reg.create(name + ".b", TensorT<R>::zeros({cdst}));
  }

  VarT<R> forward(const VarT<R>& x) const {
    return conv_transpose2d(x, use_param(*k), use_param(*b), stride);
  }
};

template <typename R>
struct LayerNormLayerT {
  ParameterT<R>* gain = nullptr;
  ParameterT<R>* bias = nullptr;

  LayerNormLayerT() = default;
  LayerNormLayerT(ParamRegistryT<R>& reg, const std::string& name, std::int64_t c) {
    gain = &reg.create(name + ".gain", TensorT<R>::full({c}, R(1)));
    bias = &reg.create(name + ".bias", TensorT<R>::zeros({c}));
  }

  VarT<R> forward(const VarT<R>& x) const { return layer_norm(x, use_param(*gain), use_param(*bias)); }
};

// ---------------------------------------------------------------------------
// SaSA: parallel window-local (high-frequency) and pooled-global
// (low-frequency) attention paths over a channel split C1 + C2 = C.

template <typename R>
struct SaSADebugT {
  TensorT<R> high_attn;  // [windows*heads, T, T]
  TensorT<R> low_attn;   // [heads, H*W, pooled]
};

inline std::int64_t attention_heads(std::int64_t branch_channels, std::int64_t head_dim) {
  const std::int64_t h = std::max<std::int64_t>(1, branch_channels / head_dim);
  if (branch_channels % h != 0)
    throw std::invalid_argument("attention: branch width " + std::to_string(branch_channels) +
                                " not divisible into " + std::to_string(h) + " heads");
  return h;
}

template <typename R>
struct SaSAT {
  std::int64_t c = 0, c1 = 0, c2 = 0, s = 4;
  std::int64_t heads_h = 1, heads_l = 1;
  ProjT<R> wqh, wkh, wvh, wh;
  ProjT<R> wql, wkl, wvl, wl;

  SaSAT() = default;
  SaSAT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t c_, std::int64_t s_,
        std::int64_t head_dim, bool hf, bool lf, Rng& rng)
      : c(c_), s(s_) {
    if (!hf && !lf) throw std::invalid_argument("attention: both paths disabled");
    // A disabled path routes its channel budget to the enabled one.
    c1 = hf ? (lf ? c / 2 : c) : 0;
    c2 = c - c1;
    if (c1 > 0) {
      heads_h = attention_heads(c1, head_dim);
      wqh = ProjT<R>(reg, nm + ".wqh", c, c1, rng);
      wkh = ProjT<R>(reg, nm + ".wkh", c, c1, rng);
      wvh = ProjT<R>(reg, nm + ".wvh", c, c1, rng);
      wh = ProjT<R>(reg, nm + ".wh", c1, c1, rng);
    }
    if (c2 > 0) {
      heads_l = attention_heads(c2, head_dim);
      wql = ProjT<R>(reg, nm + ".wql", c, c2, rng);
      wkl = ProjT<R>(reg, nm + ".wkl", c, c2, rng);
      wvl = ProjT<R>(reg, nm + ".wvl", c, c2, rng);
      wl = ProjT<R>(reg, nm + ".wl", c2, c2, rng);
    }
  }

  // Window edge for an HxW map: 2s, shrunk to the smaller spatial extent for
  // deep stages. Must divide both extents (the codec pads to guarantee it).
  std::int64_t effective_window(std::int64_t h, std::int64_t w) const {
    const std::int64_t win = std::min<std::int64_t>(2 * s, std::min(h, w));
    if (h % win != 0 || w % win != 0)
      throw std::invalid_argument("attention: window " + std::to_string(win) +
                                  " does not divide feature map [" + std::to_string(h) + "x" +
                                  std::to_string(w) + "]");
    return win;
  }

  VarT<R> forward(const VarT<R>& x, SaSADebugT<R>* dbg = nullptr) const {
    const std::int64_t h = x->value.dim(0), w = x->value.dim(1);
    const std::int64_t win = effective_window(h, w);
    std::vector<VarT<R>> outs;
    if (c1 > 0) outs.push_back(high_path(x, h, w, win, dbg));
    if (c2 > 0) outs.push_back(low_path(x, h, w, win, dbg));
    return outs.size() == 1 ? outs[0] : concat(outs, 2);
  }

 private:
  // [M, T, cb] -> [M*heads, T, hd]
  static VarT<R> to_heads(const VarT<R>& t, std::int64_t m, std::int64_t tok, std::int64_t heads,
                          std::int64_t hd) {
    return reshape(permute(reshape(t, {m, tok, heads, hd}), {0, 2, 1, 3}), {m * heads, tok, hd});
  }
  static VarT<R> from_heads(const VarT<R>& t, std::int64_t m, std::int64_t tok, std::int64_t heads,
                            std::int64_t hd) {
    return reshape(permute(reshape(t, {m, heads, tok, hd}), {0, 2, 1, 3}), {m, tok, heads * hd});
  }

  VarT<R> high_path(const VarT<R>& x, std::int64_t h, std::int64_t w, std::int64_t win,
                    SaSADebugT<R>* dbg) const {
    const std::int64_t m = (h / win) * (w / win), tok = win * win, hd = c1 / heads_h;
    auto q = to_heads(window_partition(wqh.forward(x), win), m, tok, heads_h, hd);
    auto k = to_heads(window_partition(wkh.forward(x), win), m, tok, heads_h, hd);
    auto v = to_heads(window_partition(wvh.forward(x), win), m, tok, heads_h, hd);
    auto attn = softmax(scale(batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd))), 2);
    if (dbg) dbg->high_attn = attn->value;
    auto ctx = from_heads(batched_matmul(attn, v), m, tok, heads_h, hd);
    return wh.forward(window_merge(ctx, h, w, win));
  }

  VarT<R> low_path(const VarT<R>& x, std::int64_t h, std::int64_t w, std::int64_t win,
                   SaSADebugT<R>* dbg) const {
    const std::int64_t hd = c2 / heads_l;
    // Full-resolution queries; keys/values from one pooled token per window.
    auto q = wql.forward(x);                                          // [h,w,c2]
    auto pooled = global_avg_pool(x, PoolRegion::per_window, win);    // [gh,gw,c]
    auto kk = wkl.forward(pooled);
    auto vv = wvl.forward(pooled);
    const std::int64_t nq = h * w, nk = pooled->value.dim(0) * pooled->value.dim(1);
    auto qh = permute(reshape(q, {nq, heads_l, hd}), {1, 0, 2});      // [heads, nq, hd]
    auto kh = permute(reshape(kk, {nk, heads_l, hd}), {1, 0, 2});
    auto vh = permute(reshape(vv, {nk, heads_l, hd}), {1, 0, 2});
    auto attn = softmax(scale(batched_matmul(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(hd))), 2);
    if (dbg) dbg->low_attn = attn->value;
    auto ctx = permute(batched_matmul(attn, vh), {1, 0, 2});          // [nq, heads, hd]
    return wl.forward(reshape(ctx, {h, w, c2}));
  }
};

// ---------------------------------------------------------------------------
// CaSA: whole-map pooled channel gate in (0,1)^C.

template <typename R>
struct CaSAT {
  std::int64_t c = 0, cmid = 0;
  ProjT<R> w1, w2;

  CaSAT() = default;
  CaSAT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t c_, std::int64_t beta, Rng& rng)
      : c(c_), cmid(c_ / beta) {
    if (c % beta != 0) throw std::invalid_argument("channel gate: C not divisible by beta");
    w1 = ProjT<R>(reg, nm + ".w1", c, cmid, rng);
    w2 = ProjT<R>(reg, nm + ".w2", cmid, c, rng);
  }

  VarT<R> gate(const VarT<R>& f) const {
    auto pooled = reshape(global_avg_pool(f, PoolRegion::whole), {1, c});
    return reshape(sigmoid(w2.mat(relu(w1.mat(pooled)))), {c});
  }

  VarT<R> forward(const VarT<R>& f) const { return channel_scale(f, gate(f)); }
};

// ---------------------------------------------------------------------------
// MLGFFN: split-channel local depthwise-conv paths (3x3 / 5x5, self-gated)
// plus a parameter-free pooled global path; variants for the ablation matrix.

template <typename R>
struct MLGFFNT {
  FfnVariant variant = FfnVariant::mlgffn;
  std::int64_t c = 0;
  LayerNormLayerT<R> ln;
  std::optional<Conv2dLayerT<R>> pw3, dw3, pw5, dw5;
  std::optional<Conv2dLayerT<R>> fc1, fc2;

  MLGFFNT() = default;
  MLGFFNT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t c_, FfnVariant v, Rng& rng)
      : variant(v), c(c_), ln(reg, nm + ".ln", c_) {
    if (v == FfnVariant::mlgffn || v == FfnVariant::no_global) {
      if (c % 4 != 0) throw std::invalid_argument("ffn: C must be divisible by 4");
      // Local half splits into two equal groups (quarters of C for the full
      // variant; halves when the global path is ablated away).
      const std::int64_t gw = (v == FfnVariant::mlgffn) ? c / 4 : c / 2;
      pw3.emplace(reg, nm + ".pw3", 1, gw, gw, 1, 1, rng);
      dw3.emplace(reg, nm + ".dw3", 3, gw, gw, 1, gw, rng);
      pw5.emplace(reg, nm + ".pw5", 1, gw, gw, 1, 1, rng);
      dw5.emplace(reg, nm + ".dw5", 5, gw, gw, 1, gw, rng);
    } else if (v == FfnVariant::plain) {
      fc1.emplace(reg, nm + ".fc1", 1, c, 4 * c, 1, 1, rng);
      fc2.emplace(reg, nm + ".fc2", 1, 4 * c, c, 1, 1, rng);
    }
  }

  VarT<R> forward(const VarT<R>& x) const {
    auto xn = ln.forward(x);
    switch (variant) {
      case FfnVariant::mlgffn: {
        auto halves = split(xn, 2, {c / 2, c / 2});
        auto local = local_paths(halves[0]);
        auto global = global_path(halves[1]);
        return add(x, concat(std::vector<VarT<R>>{global, local}, 2));
      }
      case FfnVariant::no_local:
        return add(x, global_path(xn));
      case FfnVariant::no_global:
        return add(x, local_paths(xn));
      case FfnVariant::plain:
        return add(x, fc2->forward(gelu(fc1->forward(xn))));
    }
    throw std::logic_error("unknown ffn variant");
  }

 private:
  // t: [h,w,2g] -> two self-gated depthwise paths, concatenated.
  VarT<R> local_paths(const VarT<R>& t) const {
    const std::int64_t width = t->value.dim(2);
    auto groups = split(t, 2, {width / 2, width / 2});
    auto u3 = dw3->forward(pw3->forward(groups[0]));
    auto u5 = dw5->forward(pw5->forward(groups[1]));
    auto g3 = mul(gelu(u3), u3);
    auto g5 = mul(gelu(u5), u5);
    return concat(std::vector<VarT<R>>{g3, g5}, 2);
  }

  // t: [h,w,g] -> GELU(GAP(t)) broadcast-multiplied with t; parameter-free.
  VarT<R> global_path(const VarT<R>& t) const {
    const std::int64_t h = t->value.dim(0), w = t->value.dim(1), width = t->value.dim(2);
    auto g = gelu(reshape(global_avg_pool(t, PoolRegion::whole), {width}));
    return mul(broadcast_channels(g, h, w), t);
  }
};

// ---------------------------------------------------------------------------
// HSCATB: Y = X + SaSA(LN X); Z = Y + CaSA(LN Y); out = MLGFFN(Z).

template <typename R>
struct HSCATBT {
  LayerNormLayerT<R> ln1;
  SaSAT<R> sasa;
  std::optional<LayerNormLayerT<R>> ln2;
  std::optional<CaSAT<R>> casa;
  MLGFFNT<R> ffn;

  HSCATBT() = default;
  HSCATBT(ParamRegistryT<R>& reg, const std::string& nm, const ModelConfig& cfg, std::int64_t c, Rng& rng)
      : ln1(reg, nm + ".ln1", c),
        sasa(reg, nm + ".sasa", c, cfg.window_base, cfg.head_dim, cfg.hf_enabled, cfg.lf_enabled, rng) {
    if (cfg.casa_enabled) {
      ln2.emplace(reg, nm + ".ln2", c);
      casa.emplace(reg, nm + ".casa", c, cfg.beta, rng);
    }
    ffn = MLGFFNT<R>(reg, nm + ".ffn", c, cfg.ffn, rng);
  }

  VarT<R> forward(const VarT<R>& x) const {
    auto y = add(x, sasa.forward(ln1.forward(x)));
    auto z = casa ? add(y, casa->forward(ln2->forward(y))) : y;
    return ffn.forward(z);
  }
};

// ---------------------------------------------------------------------------
// down/up blocks and the full analysis/synthesis stacks

template <typename R>
struct DownBlockT {
  Conv2dLayerT<R> conv;

  DownBlockT() = default;
  DownBlockT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t cin, std::int64_t cout, Rng& rng)
      : conv(reg, nm, 3, cin, cout, 2, 1, rng) {}

  VarT<R> forward(const VarT<R>& x) const {
    if (x->value.dim(0) % 2 != 0 || x->value.dim(1) % 2 != 0)
      throw std::invalid_argument("downsample: spatial extents must be even, got " +
                                  shape_str(x->value.shape));
    return gelu(conv.forward(x));
  }
};

template <typename R>
struct UpBlockT {
  ConvTr2dLayerT<R> conv;
  bool activate = true;

  UpBlockT() = default;
  UpBlockT(ParamRegistryT<R>& reg, const std::string& nm, std::int64_t cin, std::int64_t cout, bool act,
           Rng& rng)
      : conv(reg, nm, 3, cin, cout, 2, rng), activate(act) {}

  VarT<R> forward(const VarT<R>& x) const {
    auto y = conv.forward(x);
    return activate ? gelu(y) : y;
  }
};

// True when every stage of the analysis transform (and the hyper transform's
// extra 4x shrink) sees valid spatial extents: overall divisibility by the
// total stride plus per-stage attention-window divisibility.
inline bool extents_valid(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
  if (h <= 0 || w <= 0) return false;
  const std::int64_t t = cfg.total_stride();
  if (h % t != 0 || w % t != 0) return false;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const std::int64_t hi = h >> (i + 1), wi = w >> (i + 1);
    const std::int64_t win = std::min<std::int64_t>(2 * cfg.window_base, std::min(hi, wi));
    if (hi % win != 0 || wi % win != 0) return false;
  }
  return true;
}

// Smallest valid extents >= (h, w), searched over multiples of the total
// stride. Used by the codec to size its reflect padding.
inline std::pair<std::int64_t, std::int64_t> padded_extents(const ModelConfig& cfg, std::int64_t h,
                                                            std::int64_t w) {
  const std::int64_t t = cfg.total_stride();
  const std::int64_t h0 = ((h + t - 1) / t) * t;
  const std::int64_t w0 = ((w + t - 1) / t) * t;
  std::pair<std::int64_t, std::int64_t> best{-1, -1};
  for (std::int64_t dh = 0; dh <= 8; ++dh) {
    for (std::int64_t dw = 0; dw <= 8; ++dw) {
      const std::int64_t hp = h0 + dh * t, wp = w0 + dw * t;
      if (!extents_valid(cfg, hp, wp)) continue;
      if (best.first < 0 || hp * wp < best.first * best.second ||
          (hp * wp == best.first * best.second && hp < best.first))
        best = {hp, wp};
    }
  }
  if (best.first < 0)
    throw std::logic_error("padding search failed for " + std::to_string(h) + "x" + std::to_string(w));
  return best;
}

// Throws with the required padded size when (h, w) cannot flow through the
// analysis transform as-is.
inline void check_analysis_extents(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
  if (extents_valid(cfg, h, w)) return;
  const auto [hp, wp] = padded_extents(cfg, h, w);
  throw std::invalid_argument("analysis: input " + std::to_string(h) + "x" + std::to_string(w) +
                              " is not divisible for the transform stack; pad to " + std::to_string(hp) +
                              "x" + std::to_string(wp));
}

template <typename R>
struct AnalysisT {
  ModelConfig cfg;
  std::vector<DownBlockT<R>> downs;
  std::vector<std::vector<HSCATBT<R>>> blocks;

  AnalysisT() = default;
  AnalysisT(ParamRegistryT<R>& reg, const ModelConfig& cfg_, Rng& rng) : cfg(cfg_) {
    std::int64_t prev = 3;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
      const auto& st = cfg.stages[i];
      const std::string nm = "ga.s" + std::to_string(i);
      downs.emplace_back(reg, nm + ".down", prev, st.channels, rng);
      std::vector<HSCATBT<R>> bs;
      for (int b = 0; b < st.num_blocks; ++b)
        bs.emplace_back(reg, nm + ".b" + std::to_string(b), cfg, st.channels, rng);
      blocks.push_back(std::move(bs));
      prev = st.channels;
    }
  }

  VarT<R> forward(VarT<R> x) const {
    check_analysis_extents(cfg, x->value.dim(0), x->value.dim(1));
    for (std::size_t i = 0; i < downs.size(); ++i) {
      x = downs[i].forward(x);
      for (const auto& b : blocks[i]) x = b.forward(x);
    }
    return x;
  }
};

template <typename R>
struct SynthesisT {
  // Stored deepest-first: blocks at stage i width, then upsample toward the
  // previous stage's width (image width 3 at the end, no activation there).
  std::vector<std::vector<HSCATBT<R>>> blocks;
  std::vector<UpBlockT<R>> ups;

  SynthesisT() = default;
  SynthesisT(ParamRegistryT<R>& reg, const ModelConfig& cfg, Rng& rng) {
    for (std::size_t ri = 0; ri < cfg.stages.size(); ++ri) {
      const std::size_t i = cfg.stages.size() - 1 - ri;
      const auto& st = cfg.stages[i];
      const std::string nm = "gs.s" + std::to_string(i);
      std::vector<HSCATBT<R>> bs;
      for (int b = 0; b < st.num_blocks; ++b)
        bs.emplace_back(reg, nm + ".b" + std::to_string(b), cfg, st.channels, rng);
      blocks.push_back(std::move(bs));
      const std::int64_t cout = (i == 0) ? 3 : cfg.stages[i - 1].channels;
      ups.emplace_back(reg, nm + ".up", st.channels, cout, i != 0, rng);
    }
  }

  VarT<R> forward(VarT<R> y) const {
    for (std::size_t i = 0; i < ups.size(); ++i) {
      for (const auto& b : blocks[i]) y = b.forward(y);
      y = ups[i].forward(y);
    }
    return y;
  }
};

}  // namespace hsc
