#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/tape.hpp"

namespace hsc {

namespace detail {

template <typename R>
inline bool wants(const VarT<R>& p) {
  return p && p->needs_grad;
}

// c[m,n] += a[m,k] * b[k,n]
template <typename R>
inline void mm_nn(const R* a, const R* b, R* c, std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const R* arow = a + i * k;
    R* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const R av = arow[p];
      const R* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T  (dot products over the shared trailing axis)
template <typename R>
inline void mm_nt(const R* a, const R* b, R* c, std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const R* arow = a + i * k;
    R* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const R* brow = b + j * k;
      R acc = R(0);
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename R>
inline void mm_tn(const R* a, const R* b, R* c, std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const R* arow = a + i * k;
    const R* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const R av = arow[p];
      R* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void check_axis(int axis, int rank) {
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                std::to_string(rank));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename R>
VarT<R> add(const VarT<R>& a, const VarT<R>& b) {
  check_same_shape(a->value, b->value, "add");
  TensorT<R> out(a->value.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] + b->value.data[i];
  return make_op<R>(std::move(out), {a, b}, [](NodeT<R>& nd) {
    for (int s = 0; s < 2; ++s) {
      auto& p = nd.parents[static_cast<std::size_t>(s)];
      if (!detail::wants(p)) continue;
      auto& g = p->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i];
    }
  });
}

template <typename R>
VarT<R> mul(const VarT<R>& a, const VarT<R>& b) {
  check_same_shape(a->value, b->value, "mul");
  TensorT<R> out(a->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] * b->value.data[i];
  return make_op<R>(std::move(out), {a, b}, [](NodeT<R>& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (detail::wants(pa)) {
      auto& g = pa->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i] * pb->value.data[i];
    }
    if (detail::wants(pb)) {
      auto& g = pb->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i] * pa->value.data[i];
    }
  });
}

// y = mul_c * x + add_c, elementwise with scalar constants.
template <typename R>
VarT<R> affine(const VarT<R>& x, double mul_c, double add_c) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<R>(mul_c * static_cast<double>(x->value.data[i]) + add_c);
  return make_op<R>(std::move(out), {x}, [mul_c](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<R>(mul_c) * nd.grad.data[i];
  });
}

template <typename R>
VarT<R> scale(const VarT<R>& x, double c) {
  return affine(x, c, 0.0);
}

template <typename R>
VarT<R> sub(const VarT<R>& a, const VarT<R>& b) {
  return add(a, scale(b, -1.0));
}

template <typename R>
VarT<R> relu(const VarT<R>& x) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x->value.data[i] > R(0) ? x->value.data[i] : R(0);
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->value.data[i] > R(0)) g[i] += nd.grad.data[i];
  });
}

// Exact Gaussian-CDF form: x * Phi(x).
// y = max(x, lo). Gradient passes only where x > lo.
template <typename R>
VarT<R> clamp_min(const VarT<R>& x, double lo) {
  TensorT<R> out(x->value.shape);
  const R lo_r = static_cast<R>(lo);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = x->value.data[i] > lo_r ? x->value.data[i] : lo_r;
  return make_op<R>(std::move(out), {x}, [lo_r](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->value.data[i] > lo_r) g[i] += nd.grad.data[i];
  });
}

template <typename R>
VarT<R> gelu(const VarT<R>& x) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = static_cast<double>(x->value.data[i]);
    out.data[i] = static_cast<R>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)));
  }
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = static_cast<double>(p->value.data[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
      const double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
      g[i] += nd.grad.data[i] * static_cast<R>(cdf + v * pdf);
    }
  });
}

template <typename R>
VarT<R> sigmoid(const VarT<R>& x) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = static_cast<double>(x->value.data[i]);
    out.data[i] = static_cast<R>(1.0 / (1.0 + std::exp(-v)));
  }
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const R s = nd.value.data[i];
      g[i] += nd.grad.data[i] * s * (R(1) - s);
    }
  });
}

template <typename R>
VarT<R> softplus(const VarT<R>& x) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = static_cast<double>(x->value.data[i]);
    out.data[i] = static_cast<R>(v > 30.0 ? v : std::log1p(std::exp(v)));
  }
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = static_cast<double>(p->value.data[i]);
      g[i] += nd.grad.data[i] * static_cast<R>(1.0 / (1.0 + std::exp(-v)));
    }
  });
}

// Natural log; inputs must be strictly positive (likelihoods are floored
// upstream before they reach here).
template <typename R>
VarT<R> log_e(const VarT<R>& x) {
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (!(x->value.data[i] > R(0)))
      throw std::invalid_argument("log: non-positive input");
    out.data[i] = static_cast<R>(std::log(static_cast<double>(x->value.data[i])));
  }
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i] / p->value.data[i];
  });
}

// Adds a fixed (non-learnable) tensor; gradient passes through unchanged.
// This is how the training-time uniform quantization noise enters the graph.
template <typename R>
VarT<R> add_const_tensor(const VarT<R>& x, const TensorT<R>& c) {
  check_same_shape(x->value, c, "add_const_tensor");
  TensorT<R> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x->value.data[i] + c.data[i];
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i];
  });
}

// ---------------------------------------------------------------------------
// softmax / normalization

template <typename R>
VarT<R> softmax(const VarT<R>& x, int axis) {
  detail::check_axis(axis, x->value.rank());
  const auto& shp = x->value.shape;
  std::int64_t outer = 1, inner = 1;
  const std::int64_t n = shp[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= shp[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x->value.rank(); ++i) inner *= shp[static_cast<std::size_t>(i)];

  TensorT<R> out(shp);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      double mx = -1e300;
      for (std::int64_t j = 0; j < n; ++j)
        mx = std::max(mx, static_cast<double>(x->value.data[static_cast<std::size_t>(base + j * inner)]));
      double den = 0.0;
      for (std::int64_t j = 0; j < n; ++j)
        den += std::exp(static_cast<double>(x->value.data[static_cast<std::size_t>(base + j * inner)]) - mx);
      for (std::int64_t j = 0; j < n; ++j) {
        const double e =
            std::exp(static_cast<double>(x->value.data[static_cast<std::size_t>(base + j * inner)]) - mx);
        out.data[static_cast<std::size_t>(base + j * inner)] = static_cast<R>(e / den);
      }
    }
  }
  return make_op<R>(std::move(out), {x}, [axis, outer, inner, n](NodeT<R>& nd) {
    (void)axis;
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          dot += static_cast<double>(nd.value.data[idx]) * static_cast<double>(nd.grad.data[idx]);
        }
        for (std::int64_t j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          g[idx] += nd.value.data[idx] * (nd.grad.data[idx] - static_cast<R>(dot));
        }
      }
    }
  });
}

// Per-token normalization over the trailing channel axis, then affine.
template <typename R>
VarT<R> layer_norm(const VarT<R>& x, const VarT<R>& gain, const VarT<R>& bias, double eps = 1e-6) {
  if (x->value.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const std::int64_t c = x->value.shape.back();
  if (gain->value.numel() != c || bias->value.numel() != c)
    throw std::invalid_argument("layer_norm: gain/bias must have C elements");
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::int64_t tokens = x->value.numel() / c;

  TensorT<R> out(x->value.shape);
  std::vector<R> mean(static_cast<std::size_t>(tokens)), rstd(static_cast<std::size_t>(tokens));
  for (std::int64_t t = 0; t < tokens; ++t) {
    const R* xp = x->value.data.data() + t * c;
    double s = 0.0, s2 = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double v = static_cast<double>(xp[j]);
      s += v;
      s2 += v * v;
    }
    const double m = s / static_cast<double>(c);
    const double var = std::max(0.0, s2 / static_cast<double>(c) - m * m);
    const double r = 1.0 / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(t)] = static_cast<R>(m);
    rstd[static_cast<std::size_t>(t)] = static_cast<R>(r);
    R* op = out.data.data() + t * c;
    for (std::int64_t j = 0; j < c; ++j)
      op[j] = static_cast<R>((static_cast<double>(xp[j]) - m) * r) * gain->value.data[static_cast<std::size_t>(j)] +
              bias->value.data[static_cast<std::size_t>(j)];
  }
  return make_op<R>(std::move(out), {x, gain, bias},
                    [tokens, c, mean = std::move(mean), rstd = std::move(rstd)](NodeT<R>& nd) {
    auto& px = nd.parents[0];
    auto& pg = nd.parents[1];
    auto& pb = nd.parents[2];
    const bool wx = detail::wants(px), wg = detail::wants(pg), wb = detail::wants(pb);
    if (wx) px->ensure_grad();
    if (wg) pg->ensure_grad();
    if (wb) pb->ensure_grad();
    for (std::int64_t t = 0; t < tokens; ++t) {
      const R* xp = px->value.data.data() + t * c;
      const R* dy = nd.grad.data.data() + t * c;
      const double m = static_cast<double>(mean[static_cast<std::size_t>(t)]);
      const double r = static_cast<double>(rstd[static_cast<std::size_t>(t)]);
      if (wg || wb) {
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (static_cast<double>(xp[j]) - m) * r;
          if (wg) pg->grad.data[static_cast<std::size_t>(j)] += dy[j] * static_cast<R>(xhat);
          if (wb) pb->grad.data[static_cast<std::size_t>(j)] += dy[j];
        }
      }
      if (wx) {
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (static_cast<double>(xp[j]) - m) * r;
          const double dyg = static_cast<double>(dy[j]) * static_cast<double>(pg->value.data[static_cast<std::size_t>(j)]);
          sum_dyg += dyg;
          sum_dyg_xhat += dyg * xhat;
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        R* dx = px->grad.data.data() + t * c;
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (static_cast<double>(xp[j]) - m) * r;
          const double dyg = static_cast<double>(dy[j]) * static_cast<double>(pg->value.data[static_cast<std::size_t>(j)]);
          dx[j] += static_cast<R>(r * (dyg - inv_c * sum_dyg - xhat * inv_c * sum_dyg_xhat));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename R>
VarT<R> reduce_sum(const VarT<R>& x) {
  double acc = 0.0;
  for (R v : x->value.data) acc += static_cast<double>(v);
  return make_op<R>(TensorT<R>::scalar(static_cast<R>(acc)), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    const R d = nd.grad.data[0];
    for (auto& v : g) v += d;
  });
}

template <typename R>
VarT<R> reduce_mean(const VarT<R>& x) {
  const double inv = 1.0 / static_cast<double>(x->value.numel());
  double acc = 0.0;
  for (R v : x->value.data) acc += static_cast<double>(v);
  return make_op<R>(TensorT<R>::scalar(static_cast<R>(acc * inv)), {x}, [inv](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    const R d = nd.grad.data[0] * static_cast<R>(inv);
    for (auto& v : g) v += d;
  });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename R>
VarT<R> reshape(const VarT<R>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x->value.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(x->value.shape) + " -> " +
                                shape_str(new_shape));
  TensorT<R> out(std::move(new_shape), x->value.data);
  return make_op<R>(std::move(out), {x}, [](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad.data[i];
  });
}

template <typename R>
VarT<R> permute(const VarT<R>& x, const std::vector<int>& axes) {
  const int rank = x->value.rank();
  if (static_cast<int>(axes.size()) != rank) throw std::invalid_argument("permute: axes size mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    detail::check_axis(axes[static_cast<std::size_t>(i)], rank);
    if (seen[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])])
      throw std::invalid_argument("permute: repeated axis");
    seen[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = true;
    out_shape[static_cast<std::size_t>(i)] = x->value.shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  }
  // strides of the input
  std::vector<std::int64_t> istr(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i)
    istr[static_cast<std::size_t>(i)] = istr[static_cast<std::size_t>(i + 1)] * x->value.shape[static_cast<std::size_t>(i + 1)];
  std::vector<std::int64_t> map_stride(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) map_stride[static_cast<std::size_t>(i)] = istr[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

  const std::int64_t total = x->value.numel();
  std::vector<std::int64_t> src_index(static_cast<std::size_t>(total));
  {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    for (std::int64_t o = 0; o < total; ++o) {
      std::int64_t src = 0;
      for (int i = 0; i < rank; ++i) src += idx[static_cast<std::size_t>(i)] * map_stride[static_cast<std::size_t>(i)];
      src_index[static_cast<std::size_t>(o)] = src;
      for (int i = rank - 1; i >= 0; --i) {
        if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
        idx[static_cast<std::size_t>(i)] = 0;
      }
    }
  }
  TensorT<R> out(out_shape);
  for (std::int64_t o = 0; o < total; ++o)
    out.data[static_cast<std::size_t>(o)] = x->value.data[static_cast<std::size_t>(src_index[static_cast<std::size_t>(o)])];
  return make_op<R>(std::move(out), {x}, [src_index = std::move(src_index)](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::size_t o = 0; o < src_index.size(); ++o)
      g[static_cast<std::size_t>(src_index[o])] += nd.grad.data[o];
  });
}

template <typename R>
std::vector<VarT<R>> split(const VarT<R>& x, int axis, const std::vector<std::int64_t>& sizes) {
  detail::check_axis(axis, x->value.rank());
  const auto& shp = x->value.shape;
  std::int64_t sum = 0;
  for (auto s : sizes) {
    if (s <= 0) throw std::invalid_argument("split: sizes must be positive");
    sum += s;
  }
  if (sum != shp[static_cast<std::size_t>(axis)])
    throw std::invalid_argument("split: sizes sum " + std::to_string(sum) + " != extent " +
                                std::to_string(shp[static_cast<std::size_t>(axis)]));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shp[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x->value.rank(); ++i) inner *= shp[static_cast<std::size_t>(i)];
  const std::int64_t full = shp[static_cast<std::size_t>(axis)];

  std::vector<VarT<R>> outs;
  std::int64_t off = 0;
  for (auto sz : sizes) {
    Shape oshape = shp;
    oshape[static_cast<std::size_t>(axis)] = sz;
    TensorT<R> out(oshape);
    for (std::int64_t o = 0; o < outer; ++o) {
      const R* src = x->value.data.data() + (o * full + off) * inner;
      R* dst = out.data.data() + o * sz * inner;
      std::copy(src, src + sz * inner, dst);
    }
    const std::int64_t off_c = off;
    outs.push_back(make_op<R>(std::move(out), {x}, [outer, inner, full, off_c, sz](NodeT<R>& nd) {
      auto& p = nd.parents[0];
      if (!detail::wants(p)) return;
      auto& g = p->ensure_grad().data;
      for (std::int64_t o = 0; o < outer; ++o) {
        const R* src = nd.grad.data.data() + o * sz * inner;
        R* dst = g.data() + static_cast<std::size_t>((o * full + off_c) * inner);
        for (std::int64_t i = 0; i < sz * inner; ++i) dst[i] += src[i];
      }
    }));
    off += sz;
  }
  return outs;
}

template <typename R>
VarT<R> concat(const std::vector<VarT<R>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int rank = parts[0]->value.rank();
  detail::check_axis(axis, rank);
  Shape oshape = parts[0]->value.shape;
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p->value.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i == axis) continue;
      if (p->value.shape[static_cast<std::size_t>(i)] != oshape[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: non-axis extents differ");
    }
    total_axis += p->value.shape[static_cast<std::size_t>(axis)];
  }
  oshape[static_cast<std::size_t>(axis)] = total_axis;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= oshape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= oshape[static_cast<std::size_t>(i)];

  TensorT<R> out(oshape);
  std::vector<std::int64_t> offs, szs;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t sz = p->value.shape[static_cast<std::size_t>(axis)];
    offs.push_back(off);
    szs.push_back(sz);
    for (std::int64_t o = 0; o < outer; ++o) {
      const R* src = p->value.data.data() + o * sz * inner;
      R* dst = out.data.data() + (o * total_axis + off) * inner;
      std::copy(src, src + sz * inner, dst);
    }
    off += sz;
  }
  std::vector<VarT<R>> parents(parts.begin(), parts.end());
  return make_op<R>(std::move(out), std::move(parents),
                    [outer, inner, total_axis, offs = std::move(offs), szs = std::move(szs)](NodeT<R>& nd) {
    for (std::size_t pi = 0; pi < nd.parents.size(); ++pi) {
      auto& p = nd.parents[pi];
      if (!detail::wants(p)) continue;
      const std::int64_t sz = szs[pi];
      auto& g = p->ensure_grad().data;
      for (std::int64_t o = 0; o < outer; ++o) {
        const R* src = nd.grad.data.data() + (o * total_axis + offs[pi]) * inner;
        R* dst = g.data() + static_cast<std::size_t>(o * sz * inner);
        for (std::int64_t i = 0; i < sz * inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// windows

// [H,W,C] -> [M, w*w, C]; windows ordered row-major over the window grid,
// tokens row-major inside each window. Bijective with window_merge.
template <typename R>
VarT<R> window_partition(const VarT<R>& x, std::int64_t w) {
  if (x->value.rank() != 3) throw std::invalid_argument("window_partition: expected [H,W,C]");
  const std::int64_t h = x->value.dim(0), ww = x->value.dim(1), c = x->value.dim(2);
  if (w <= 0 || h % w != 0 || ww % w != 0)
    throw std::invalid_argument("window_partition: spatial " + shape_str(x->value.shape) +
                                " not divisible by window " + std::to_string(w));
  const std::int64_t gh = h / w, gw = ww / w, m = gh * gw;
  TensorT<R> out({m, w * w, c});
  for (std::int64_t gy = 0; gy < gh; ++gy)
    for (std::int64_t gx = 0; gx < gw; ++gx)
      for (std::int64_t ty = 0; ty < w; ++ty) {
        const R* src = x->value.data.data() + (((gy * w + ty) * ww) + gx * w) * c;
        R* dst = out.data.data() + (((gy * gw + gx) * w * w) + ty * w) * c;
        std::copy(src, src + w * c, dst);
      }
  return make_op<R>(std::move(out), {x}, [h, ww, c, w](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    const std::int64_t gh = h / w, gw = ww / w;
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx)
        for (std::int64_t ty = 0; ty < w; ++ty) {
          const R* src = nd.grad.data.data() + (((gy * gw + gx) * w * w) + ty * w) * c;
          R* dst = g.data() + static_cast<std::size_t>((((gy * w + ty) * ww) + gx * w) * c);
          for (std::int64_t i = 0; i < w * c; ++i) dst[i] += src[i];
        }
  });
}

template <typename R>
VarT<R> window_merge(const VarT<R>& x, std::int64_t h, std::int64_t ww, std::int64_t w) {
  if (x->value.rank() != 3) throw std::invalid_argument("window_merge: expected [M, w*w, C]");
  const std::int64_t c = x->value.dim(2);
  if (w <= 0 || h % w != 0 || ww % w != 0) throw std::invalid_argument("window_merge: extents not divisible");
  const std::int64_t gh = h / w, gw = ww / w;
  if (x->value.dim(0) != gh * gw || x->value.dim(1) != w * w)
    throw std::invalid_argument("window_merge: window count mismatch");
  TensorT<R> out({h, ww, c});
  for (std::int64_t gy = 0; gy < gh; ++gy)
    for (std::int64_t gx = 0; gx < gw; ++gx)
      for (std::int64_t ty = 0; ty < w; ++ty) {
        const R* src = x->value.data.data() + (((gy * gw + gx) * w * w) + ty * w) * c;
        R* dst = out.data.data() + (((gy * w + ty) * ww) + gx * w) * c;
        std::copy(src, src + w * c, dst);
      }
  return make_op<R>(std::move(out), {x}, [h, ww, c, w](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    const std::int64_t gh = h / w, gw = ww / w;
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx)
        for (std::int64_t ty = 0; ty < w; ++ty) {
          const R* src = nd.grad.data.data() + (((gy * w + ty) * ww) + gx * w) * c;
          R* dst = g.data() + static_cast<std::size_t>((((gy * gw + gx) * w * w) + ty * w) * c);
          for (std::int64_t i = 0; i < w * c; ++i) dst[i] += src[i];
        }
  });
}

// ---------------------------------------------------------------------------
// pooling

enum class PoolRegion { whole, per_window };

template <typename R>
VarT<R> global_avg_pool(const VarT<R>& x, PoolRegion region, std::int64_t w = 0) {
  if (x->value.rank() != 3) throw std::invalid_argument("global_avg_pool: expected [H,W,C]");
  const std::int64_t h = x->value.dim(0), ww = x->value.dim(1), c = x->value.dim(2);
  if (region == PoolRegion::per_window) {
    if (w <= 0 || h % w != 0 || ww % w != 0)
      throw std::invalid_argument("global_avg_pool: spatial " + shape_str(x->value.shape) +
                                  " not divisible by window " + std::to_string(w));
  }
  const std::int64_t oh = region == PoolRegion::whole ? 1 : h / w;
  const std::int64_t ow = region == PoolRegion::whole ? 1 : ww / w;
  const std::int64_t wy = region == PoolRegion::whole ? h : w;
  const std::int64_t wx = region == PoolRegion::whole ? ww : w;
  const double inv = 1.0 / static_cast<double>(wy * wx);

  TensorT<R> out({oh, ow, c});
  std::vector<double> acc(static_cast<std::size_t>(c));
  for (std::int64_t oy = 0; oy < oh; ++oy)
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::int64_t ty = 0; ty < wy; ++ty)
        for (std::int64_t tx = 0; tx < wx; ++tx) {
          const R* src = x->value.data.data() + ((oy * wy + ty) * ww + ox * wx + tx) * c;
          for (std::int64_t j = 0; j < c; ++j) acc[static_cast<std::size_t>(j)] += static_cast<double>(src[j]);
        }
      R* dst = out.data.data() + (oy * ow + ox) * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] = static_cast<R>(acc[static_cast<std::size_t>(j)] * inv);
    }
  return make_op<R>(std::move(out), {x}, [ww, c, oh, ow, wy, wx, inv](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const R* dsrc = nd.grad.data.data() + (oy * ow + ox) * c;
        for (std::int64_t ty = 0; ty < wy; ++ty)
          for (std::int64_t tx = 0; tx < wx; ++tx) {
            R* dst = g.data() + static_cast<std::size_t>(((oy * wy + ty) * ww + ox * wx + tx) * c);
            for (std::int64_t j = 0; j < c; ++j) dst[j] += static_cast<R>(static_cast<double>(dsrc[j]) * inv);
          }
      }
  });
}

// ---------------------------------------------------------------------------
// channel broadcast helpers

// y[..., c] = x[..., c] * s[c]
template <typename R>
VarT<R> channel_scale(const VarT<R>& x, const VarT<R>& s) {
  const std::int64_t c = x->value.shape.back();
  if (s->value.numel() != c) throw std::invalid_argument("channel_scale: gate size != channels");
  TensorT<R> out(x->value.shape);
  const std::int64_t tokens = x->value.numel() / c;
  for (std::int64_t t = 0; t < tokens; ++t) {
    const R* xp = x->value.data.data() + t * c;
    R* op = out.data.data() + t * c;
    for (std::int64_t j = 0; j < c; ++j) op[j] = xp[j] * s->value.data[static_cast<std::size_t>(j)];
  }
  return make_op<R>(std::move(out), {x, s}, [tokens, c](NodeT<R>& nd) {
    auto& px = nd.parents[0];
    auto& ps = nd.parents[1];
    if (detail::wants(px)) {
      auto& g = px->ensure_grad().data;
      for (std::int64_t t = 0; t < tokens; ++t)
        for (std::int64_t j = 0; j < c; ++j)
          g[static_cast<std::size_t>(t * c + j)] +=
              nd.grad.data[static_cast<std::size_t>(t * c + j)] * ps->value.data[static_cast<std::size_t>(j)];
    }
    if (detail::wants(ps)) {
      auto& g = ps->ensure_grad().data;
      for (std::int64_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::int64_t t = 0; t < tokens; ++t)
          acc += static_cast<double>(nd.grad.data[static_cast<std::size_t>(t * c + j)]) *
                 static_cast<double>(px->value.data[static_cast<std::size_t>(t * c + j)]);
        g[static_cast<std::size_t>(j)] += static_cast<R>(acc);
      }
    }
  });
}

// v[C] -> [H,W,C] constant over space.
template <typename R>
VarT<R> broadcast_channels(const VarT<R>& v, std::int64_t h, std::int64_t w) {
  const std::int64_t c = v->value.numel();
  TensorT<R> out({h, w, c});
  for (std::int64_t t = 0; t < h * w; ++t)
    std::copy(v->value.data.begin(), v->value.data.end(), out.data.begin() + t * c);
  return make_op<R>(std::move(out), {v}, [h, w, c](NodeT<R>& nd) {
    auto& p = nd.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->ensure_grad().data;
    for (std::int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < h * w; ++t) acc += static_cast<double>(nd.grad.data[static_cast<std::size_t>(t * c + j)]);
      g[static_cast<std::size_t>(j)] += static_cast<R>(acc);
    }
  });
}

// ---------------------------------------------------------------------------
// matrix products

template <typename R>
VarT<R> matmul(const VarT<R>& a, const VarT<R>& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2)
    throw std::invalid_argument("matmul: expected 2-D operands");
  const std::int64_t m = a->value.dim(0), k = a->value.dim(1);
  if (b->value.dim(0) != k)
    throw std::invalid_argument("matmul: inner extents differ: " + shape_str(a->value.shape) + " x " +
                                shape_str(b->value.shape));
  const std::int64_t n = b->value.dim(1);
  TensorT<R> out({m, n});
  detail::mm_nn(a->value.data.data(), b->value.data.data(), out.data.data(), m, n, k);
  return make_op<R>(std::move(out), {a, b}, [m, n, k](NodeT<R>& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (detail::wants(pa))
      detail::mm_nt(nd.grad.data.data(), pb->value.data.data(), pa->ensure_grad().data.data(), m, k, n);
    if (detail::wants(pb))
      detail::mm_tn(pa->value.data.data(), nd.grad.data.data(), pb->ensure_grad().data.data(), m, n, k);
  });
}

// a:[B,m,k]; b:[B,k,n], or [B,n,k] when trans_b (scores = Q K^T without an
// explicit transpose pass).
template <typename R>
VarT<R> batched_matmul(const VarT<R>& a, const VarT<R>& b, bool trans_b = false) {
  if (a->value.rank() != 3 || b->value.rank() != 3)
    throw std::invalid_argument("batched_matmul: expected 3-D operands");
  const std::int64_t bt = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
  if (b->value.dim(0) != bt) throw std::invalid_argument("batched_matmul: batch extents differ");
  const std::int64_t n = trans_b ? b->value.dim(1) : b->value.dim(2);
  const std::int64_t bk = trans_b ? b->value.dim(2) : b->value.dim(1);
  if (bk != k)
    throw std::invalid_argument("batched_matmul: inner extents differ: " + shape_str(a->value.shape) + " x " +
                                shape_str(b->value.shape));
  TensorT<R> out({bt, m, n});
  for (std::int64_t bi = 0; bi < bt; ++bi) {
    const R* ap = a->value.data.data() + bi * m * k;
    const R* bp = b->value.data.data() + bi * k * n;
    R* cp = out.data.data() + bi * m * n;
    if (trans_b)
      detail::mm_nt(ap, bp, cp, m, n, k);
    else
      detail::mm_nn(ap, bp, cp, m, n, k);
  }
  return make_op<R>(std::move(out), {a, b}, [bt, m, n, k, trans_b](NodeT<R>& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    const bool wa = detail::wants(pa), wb = detail::wants(pb);
    if (wa) pa->ensure_grad();
    if (wb) pb->ensure_grad();
    for (std::int64_t bi = 0; bi < bt; ++bi) {
      const R* ap = pa->value.data.data() + bi * m * k;
      const R* bp = pb->value.data.data() + bi * k * n;
      const R* dc = nd.grad.data.data() + bi * m * n;
      if (!trans_b) {
        if (wa) detail::mm_nt(dc, bp, pa->grad.data.data() + bi * m * k, m, k, n);
        if (wb) detail::mm_tn(ap, dc, pb->grad.data.data() + bi * k * n, m, n, k);
      } else {
        // c = a * b^T with b:[n,k]
        if (wa) detail::mm_nn(dc, bp, pa->grad.data.data() + bi * m * k, m, k, n);
        if (wb) detail::mm_tn(dc, ap, pb->grad.data.data() + bi * k * n, m, k, n);
      }
    }
  });
}

}  // namespace hsc
