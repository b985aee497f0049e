#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

// Deterministic scalar math for entropy-coder table construction.
//
// CDF tables must be bit-identical across platforms and C libraries, so they
// cannot depend on libm's exp/erf (whose last-ulp behavior varies). The
// functions here use only IEEE-754 basic operations (+, -, *, /), sqrt,
// ldexp, and round — all correctly rounded by the standard — evaluated in a
// fixed order, with contraction disabled project-wide. Accuracy is far below
// the 2^-16 table quantum: |exp| error ~1e-15 relative, |erf| ~1.5e-7
// absolute (fixed published rational approximation).

namespace hsc {
namespace detmath {

// exp(x) via range reduction x = k*ln2 + r, |r| <= ln2/2, and a fixed-degree
// Taylor polynomial in r evaluated by Horner's rule.
inline double det_exp(double x) {
  if (x != x) return x;
  if (x > 709.7) return std::numeric_limits<double>::infinity();
  if (x < -745.0) return 0.0;
  const double inv_ln2 = 1.44269504088896338700e+00;
  const double ln2_hi = 6.93147180369123816490e-01;
  const double ln2_lo = 1.90821492927058770002e-10;
  const double k = std::round(x * inv_ln2);
  const double r = (x - k * ln2_hi) - k * ln2_lo;
  // 1 + r + r^2/2! + ... + r^13/13!
  double p = 1.0 / 6227020800.0;  // 1/13!
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  return std::ldexp(p, static_cast<int>(k));
}

// Abramowitz & Stegun 7.1.26 rational approximation, odd-extended.
inline double det_erf(double x) {
  const double ax = x < 0.0 ? -x : x;
  const double t = 1.0 / (1.0 + 0.3275911 * ax);
  double poly = 1.061405429;
  poly = poly * t - 1.453152027;
  poly = poly * t + 1.421413741;
  poly = poly * t - 0.284496736;
  poly = poly * t + 0.254829592;
  const double e = 1.0 - poly * t * det_exp(-ax * ax);
  return x < 0.0 ? -e : e;
}

// Standard normal CDF.
inline double det_normal_cdf(double t) { return 0.5 * (1.0 + det_erf(t * 0.7071067811865475244)); }

// Logistic CDF, branch-symmetric for accuracy at both tails.
inline double det_logistic_cdf(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + det_exp(-t));
  const double e = det_exp(t);
  return e / (1.0 + e);
}

}  // namespace detmath
}  // namespace hsc
