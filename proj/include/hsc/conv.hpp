#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "hsc/ops.hpp"
#include "hsc/tape.hpp"

namespace hsc {

enum class Pad { same, valid };

namespace detail {

struct ConvGeom {
  std::int64_t oh, ow;        // output extents
  std::int64_t pby, pbx;      // padding before (top / left)
};

// "same": out = ceil(in / stride), total pad = max(0, (out-1)*stride + k - in),
// split with the smaller half before. "valid": no pad, kernel must fit.
inline ConvGeom conv_geometry(std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
                              std::int64_t stride, Pad pad) {
  if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
  ConvGeom g{};
  if (pad == Pad::same) {
    g.oh = (h + stride - 1) / stride;
    g.ow = (w + stride - 1) / stride;
    const std::int64_t pty = std::max<std::int64_t>(0, (g.oh - 1) * stride + kh - h);
    const std::int64_t ptx = std::max<std::int64_t>(0, (g.ow - 1) * stride + kw - w);
    g.pby = pty / 2;
    g.pbx = ptx / 2;
  } else {
    if (kh > h || kw > w)
      throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " larger than input " + std::to_string(h) + "x" + std::to_string(w) +
                                  " with valid padding");
    g.oh = (h - kh) / stride + 1;
    g.ow = (w - kw) / stride + 1;
    g.pby = 0;
    g.pbx = 0;
  }
  return g;
}

}  // namespace detail

// x: [H,W,Cin]; k: [kh,kw,Cin/groups,Cout]; bias: [Cout] or null.
// Output channel co reads input group co / (Cout/groups).
template <typename R>
VarT<R> conv2d(const VarT<R>& x, const VarT<R>& k, const VarT<R>& bias, std::int64_t stride,
               std::int64_t groups = 1, Pad pad = Pad::same) {
  if (x->value.rank() != 3) throw std::invalid_argument("conv2d: expected input [H,W,Cin]");
  if (k->value.rank() != 4) throw std::invalid_argument("conv2d: expected kernel [kh,kw,Cin/groups,Cout]");
  const std::int64_t h = x->value.dim(0), w = x->value.dim(1), cin = x->value.dim(2);
  const std::int64_t kh = k->value.dim(0), kw = k->value.dim(1);
  const std::int64_t cig = k->value.dim(2), cout = k->value.dim(3);
  if (groups <= 0 || cin % groups != 0 || cout % groups != 0)
    throw std::invalid_argument("conv2d: groups must divide both channel counts");
  if (cig != cin / groups)
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(cig * groups) +
                                " input channels, got " + std::to_string(cin));
  if (bias && bias->value.numel() != cout)
    throw std::invalid_argument("conv2d: bias size != output channels");
  const auto geom = detail::conv_geometry(h, w, kh, kw, stride, pad);
  const std::int64_t cog = cout / groups;

  TensorT<R> out({geom.oh, geom.ow, cout});
  for (std::int64_t oy = 0; oy < geom.oh; ++oy) {
    for (std::int64_t ox = 0; ox < geom.ow; ++ox) {
      R* orow = out.data.data() + (oy * geom.ow + ox) * cout;
      if (bias)
        std::copy(bias->value.data.begin(), bias->value.data.end(), orow);
      for (std::int64_t ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = oy * stride + ky - geom.pby;
        if (iy < 0 || iy >= h) continue;
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = ox * stride + kx - geom.pbx;
          if (ix < 0 || ix >= w) continue;
          const R* xrow = x->value.data.data() + (iy * w + ix) * cin;
          const R* ktap = k->value.data.data() + (ky * kw + kx) * cig * cout;
          for (std::int64_t ci = 0; ci < cig; ++ci) {
            const R* krow = ktap + ci * cout;
            for (std::int64_t g = 0; g < groups; ++g) {
              const R xv = xrow[g * cig + ci];
              R* og = orow + g * cog;
              const R* kg = krow + g * cog;
              for (std::int64_t co = 0; co < cog; ++co) og[co] += xv * kg[co];
            }
          }
        }
      }
    }
  }

  std::vector<VarT<R>> parents = bias ? std::vector<VarT<R>>{x, k, bias} : std::vector<VarT<R>>{x, k};
  return make_op<R>(std::move(out), std::move(parents),
                    [h, w, cin, kh, kw, cig, cout, cog, groups, stride, geom, has_bias = bool(bias)](NodeT<R>& nd) {
    auto& px = nd.parents[0];
    auto& pk = nd.parents[1];
    const bool wx = detail::wants(px), wk = detail::wants(pk);
    const bool wb = has_bias && detail::wants(nd.parents[2]);
    if (wx) px->ensure_grad();
    if (wk) pk->ensure_grad();
    if (wb) nd.parents[2]->ensure_grad();
    for (std::int64_t oy = 0; oy < nd.value.dim(0); ++oy) {
      for (std::int64_t ox = 0; ox < nd.value.dim(1); ++ox) {
        const R* drow = nd.grad.data.data() + (oy * nd.value.dim(1) + ox) * cout;
        if (wb) {
          R* bg = nd.parents[2]->grad.data.data();
          for (std::int64_t co = 0; co < cout; ++co) bg[co] += drow[co];
        }
        if (!wx && !wk) continue;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = oy * stride + ky - geom.pby;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ox * stride + kx - geom.pbx;
            if (ix < 0 || ix >= w) continue;
            const R* xrow = px->value.data.data() + (iy * w + ix) * cin;
            const R* ktap = pk->value.data.data() + (ky * kw + kx) * cig * cout;
            R* dxrow = wx ? px->grad.data.data() + (iy * w + ix) * cin : nullptr;
            R* dktap = wk ? pk->grad.data.data() + (ky * kw + kx) * cig * cout : nullptr;
            for (std::int64_t ci = 0; ci < cig; ++ci) {
              for (std::int64_t g = 0; g < groups; ++g) {
                const R* dg = drow + g * cog;
                const R* kg = ktap + ci * cout + g * cog;
                if (wx) {
                  R acc = R(0);
                  for (std::int64_t co = 0; co < cog; ++co) acc += dg[co] * kg[co];
                  dxrow[g * cig + ci] += acc;
                }
                if (wk) {
                  const R xv = xrow[g * cig + ci];
                  R* dkg = dktap + ci * cout + g * cog;
                  for (std::int64_t co = 0; co < cog; ++co) dkg[co] += xv * dg[co];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename R>
VarT<R> conv2d(const VarT<R>& x, const VarT<R>& k, std::int64_t stride, std::int64_t groups = 1,
               Pad pad = Pad::same) {
  return conv2d(x, k, VarT<R>{}, stride, groups, pad);
}

// Exact adjoint (w.r.t. the input) of a same-padded strided conv2d.
// x: [h,w,Cs]; k: [kh,kw,Cd,Cs]; output: [h*stride, w*stride, Cd].
template <typename R>
VarT<R> conv_transpose2d(const VarT<R>& x, const VarT<R>& k, const VarT<R>& bias, std::int64_t stride) {
  if (x->value.rank() != 3) throw std::invalid_argument("conv_transpose2d: expected input [H,W,C]");
  if (k->value.rank() != 4) throw std::invalid_argument("conv_transpose2d: expected kernel [kh,kw,Cdst,Csrc]");
  const std::int64_t h = x->value.dim(0), w = x->value.dim(1), cs = x->value.dim(2);
  const std::int64_t kh = k->value.dim(0), kw = k->value.dim(1);
  const std::int64_t cd = k->value.dim(2);
  if (k->value.dim(3) != cs)
    throw std::invalid_argument("conv_transpose2d: kernel expects " + std::to_string(k->value.dim(3)) +
                                " source channels, got " + std::to_string(cs));
  if (bias && bias->value.numel() != cd)
    throw std::invalid_argument("conv_transpose2d: bias size != output channels");
  if (stride <= 0) throw std::invalid_argument("conv_transpose2d: stride must be positive");
  const std::int64_t oh = h * stride, ow = w * stride;
  // Geometry of the conv2d this operation is adjoint to.
  const auto geom = detail::conv_geometry(oh, ow, kh, kw, stride, Pad::same);

  TensorT<R> out({oh, ow, cd});
  if (bias) {
    for (std::int64_t t = 0; t < oh * ow; ++t)
      std::copy(bias->value.data.begin(), bias->value.data.end(), out.data.begin() + t * cd);
  }
  for (std::int64_t sy = 0; sy < h; ++sy) {
    for (std::int64_t sx = 0; sx < w; ++sx) {
      const R* xrow = x->value.data.data() + (sy * w + sx) * cs;
      for (std::int64_t ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = sy * stride + ky - geom.pby;
        if (iy < 0 || iy >= oh) continue;
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = sx * stride + kx - geom.pbx;
          if (ix < 0 || ix >= ow) continue;
          R* orow = out.data.data() + (iy * ow + ix) * cd;
          const R* ktap = k->value.data.data() + (ky * kw + kx) * cd * cs;
          for (std::int64_t j = 0; j < cd; ++j) {
            const R* krow = ktap + j * cs;
            R acc = R(0);
            for (std::int64_t ci = 0; ci < cs; ++ci) acc += xrow[ci] * krow[ci];
            orow[j] += acc;
          }
        }
      }
    }
  }

  std::vector<VarT<R>> parents = bias ? std::vector<VarT<R>>{x, k, bias} : std::vector<VarT<R>>{x, k};
  return make_op<R>(std::move(out), std::move(parents),
                    [h, w, cs, kh, kw, cd, oh, ow, stride, geom, has_bias = bool(bias)](NodeT<R>& nd) {
    auto& px = nd.parents[0];
    auto& pk = nd.parents[1];
    const bool wx = detail::wants(px), wk = detail::wants(pk);
    const bool wb = has_bias && detail::wants(nd.parents[2]);
    if (wx) px->ensure_grad();
    if (wk) pk->ensure_grad();
    if (wb) {
      auto& bg = nd.parents[2]->ensure_grad().data;
      for (std::int64_t t = 0; t < oh * ow; ++t) {
        const R* drow = nd.grad.data.data() + t * cd;
        for (std::int64_t j = 0; j < cd; ++j) bg[static_cast<std::size_t>(j)] += drow[j];
      }
    }
    if (!wx && !wk) return;
    for (std::int64_t sy = 0; sy < h; ++sy) {
      for (std::int64_t sx = 0; sx < w; ++sx) {
        const R* xrow = px->value.data.data() + (sy * w + sx) * cs;
        R* dxrow = wx ? px->grad.data.data() + (sy * w + sx) * cs : nullptr;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = sy * stride + ky - geom.pby;
          if (iy < 0 || iy >= oh) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = sx * stride + kx - geom.pbx;
            if (ix < 0 || ix >= ow) continue;
            const R* drow = nd.grad.data.data() + (iy * ow + ix) * cd;
            const R* ktap = pk->value.data.data() + (ky * kw + kx) * cd * cs;
            R* dktap = wk ? pk->grad.data.data() + (ky * kw + kx) * cd * cs : nullptr;
            for (std::int64_t j = 0; j < cd; ++j) {
              const R dv = drow[j];
              if (wx) {
                const R* krow = ktap + j * cs;
                for (std::int64_t ci = 0; ci < cs; ++ci) dxrow[ci] += dv * krow[ci];
              }
              if (wk) {
                R* dkrow = dktap + j * cs;
                for (std::int64_t ci = 0; ci < cs; ++ci) dkrow[ci] += dv * xrow[ci];
              }
            }
          }
        }
      }
    }
  });
}

template <typename R>
VarT<R> conv_transpose2d(const VarT<R>& x, const VarT<R>& k, std::int64_t stride) {
  return conv_transpose2d(x, k, VarT<R>{}, stride);
}

}  // namespace hsc
