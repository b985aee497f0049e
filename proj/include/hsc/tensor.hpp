#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/rng.hpp"

namespace hsc {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Feature maps use H x W x C; the scalar type is a
// template parameter so tests can instantiate the whole stack in double for
// finite-difference reference work. The shipped codec runs TensorT<float>.
template <typename R>
struct TensorT {
  Shape shape;
  std::vector<R> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), R(0)) {}
  TensorT(Shape s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

  static TensorT full(Shape s, R v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT scalar(R v) { return TensorT({1}, {v}); }

  // Uniform values in [lo, hi). Draws in double then narrows, so float and
  // double instantiations seeded alike hold the same underlying samples.
  static TensorT uniform(Shape s, Rng& rng, double lo, double hi) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = static_cast<R>(rng.uniform(lo, hi));
    return t;
  }

  bool all_finite() const {
    for (R v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename R2>
  TensorT<R2> cast() const {
    TensorT<R2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<R2>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

template <typename R>
inline void check_same_shape(const TensorT<R>& a, const TensorT<R>& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

}  // namespace hsc
