#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hsc/conv.hpp"
#include "hsc/ops.hpp"
#include "hsc/rng.hpp"
#include "oracles.hpp"

using hsc::Rng;
using hsc::Tensor;
using hsc::Var;
using oracle::DTensor;

namespace {

Var leaf(Tensor t) { return hsc::make_leaf<float>(std::move(t)); }

double dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  return acc;
}

}  // namespace

TEST(Conv2d, OneByOneDepthwiseIdentity) {
  Rng rng(1);
  auto x = Tensor::uniform({5, 5, 3}, rng, -1.0, 1.0);
  auto k = Tensor::full({1, 1, 1, 3}, 1.0f);  // groups = 3, one weight per channel
  auto y = hsc::conv2d(leaf(x), leaf(k), 1, 3);
  ASSERT_EQ(y->value.shape, x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_EQ(y->value.data[i], x.data[i]);
}

TEST(Conv2d, DepthwiseBoxFilterPreservesConstantsInterior) {
  const float c = 1.75f;
  auto x = Tensor::full({6, 6, 2}, c);
  auto k = Tensor::full({3, 3, 1, 2}, 1.0f / 9.0f);
  auto y = hsc::conv2d(leaf(x), leaf(k), 1, 2, hsc::Pad::same);
  ASSERT_EQ(y->value.shape, x.shape);
  for (int iy = 1; iy < 5; ++iy)
    for (int ix = 1; ix < 5; ++ix)
      for (int ch = 0; ch < 2; ++ch)
        EXPECT_NEAR(y->value.data[static_cast<std::size_t>((iy * 6 + ix) * 2 + ch)], c, 1e-6);
}

TEST(Conv2d, DepthwiseStride2MatchesOracle) {
  Rng rng(2);
  auto x = Tensor::uniform({8, 8, 4}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 1, 4}, rng, -0.5, 0.5);
  auto y = hsc::conv2d(leaf(x), leaf(k), 2, 4, hsc::Pad::same);
  auto ref = oracle::conv2d(x, k, {}, 2, 4, true);
  ASSERT_EQ(y->value.shape, ref.shape);
  EXPECT_LE(oracle::max_rel_diff(y->value, ref), 1e-6);
}

TEST(Conv2d, GroupedStridedOddSizesMatchOracle) {
  Rng rng(3);
  auto x = Tensor::uniform({7, 5, 4}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 2, 6}, rng, -0.5, 0.5);
  auto b = Tensor::uniform({6}, rng, -0.2, 0.2);
  auto y = hsc::conv2d(leaf(x), leaf(k), leaf(b), 2, 2, hsc::Pad::same);
  auto ref = oracle::conv2d(x, k, b.data, 2, 2, true);
  ASSERT_EQ(y->value.shape, (hsc::Shape{4, 3, 6}));
  EXPECT_LE(oracle::max_rel_diff(y->value, ref), 1e-6);
}

TEST(Conv2d, DenseFiveByFiveMatchesOracle) {
  Rng rng(4);
  auto x = Tensor::uniform({9, 9, 3}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({5, 5, 3, 7}, rng, -0.3, 0.3);
  auto y = hsc::conv2d(leaf(x), leaf(k), 1, 1, hsc::Pad::same);
  auto ref = oracle::conv2d(x, k, {}, 1, 1, true);
  EXPECT_LE(oracle::max_rel_diff(y->value, ref), 1e-6);
}

TEST(Conv2d, ValidPaddingShrinks) {
  Rng rng(5);
  auto x = Tensor::uniform({5, 5, 2}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 2, 2}, rng, -0.5, 0.5);
  auto y = hsc::conv2d(leaf(x), leaf(k), 1, 1, hsc::Pad::valid);
  ASSERT_EQ(y->value.shape, (hsc::Shape{3, 3, 2}));
  auto ref = oracle::conv2d(x, k, {}, 1, 1, false);
  EXPECT_LE(oracle::max_rel_diff(y->value, ref), 1e-6);

  auto kbig = Tensor::uniform({7, 7, 2, 2}, rng, -0.5, 0.5);
  EXPECT_THROW(hsc::conv2d(leaf(x), leaf(kbig), 1, 1, hsc::Pad::valid), std::invalid_argument);
}

TEST(Conv2d, ValidationErrors) {
  Rng rng(6);
  auto x = Tensor::uniform({4, 4, 4}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 2, 6}, rng, -1.0, 1.0);
  EXPECT_THROW(hsc::conv2d(leaf(x), leaf(k), 1, 3), std::invalid_argument);  // 4 % 3 != 0
  auto k2 = Tensor::uniform({3, 3, 3, 6}, rng, -1.0, 1.0);
  EXPECT_THROW(hsc::conv2d(leaf(x), leaf(k2), 1, 2), std::invalid_argument);  // expects 6 in-channels
  auto bias = Tensor::uniform({5}, rng, -1.0, 1.0);
  auto k3 = Tensor::uniform({3, 3, 4, 6}, rng, -1.0, 1.0);
  EXPECT_THROW(hsc::conv2d(leaf(x), leaf(k3), leaf(bias), 1, 1), std::invalid_argument);
}

TEST(ConvTranspose2d, ShapeContractAndZeroKernel) {
  Rng rng(7);
  auto x = Tensor::uniform({4, 4, 3}, rng, -1.0, 1.0);
  auto k = Tensor::zeros({3, 3, 5, 3});
  auto y = hsc::conv_transpose2d(leaf(x), leaf(k), 2);
  ASSERT_EQ(y->value.shape, (hsc::Shape{8, 8, 5}));
  for (float v : y->value.data) EXPECT_EQ(v, 0.0f);
}

TEST(ConvTranspose2d, AdjointInnerProductIdentity) {
  // <conv2d(x), y> == <x, conv_transpose2d(y)> with a shared kernel.
  struct Case {
    std::int64_t h, w, cin, cout, kh, stride;
  };
  const Case cases[] = {{8, 8, 3, 5, 3, 2}, {6, 10, 2, 4, 5, 2}, {7, 7, 3, 3, 3, 1}, {8, 4, 1, 6, 4, 4}};
  std::uint64_t seed = 100;
  for (const auto& cs : cases) {
    Rng rng(seed++);
    auto x = Tensor::uniform({cs.h, cs.w, cs.cin}, rng, -1.0, 1.0);
    auto k = Tensor::uniform({cs.kh, cs.kh, cs.cin, cs.cout}, rng, -0.5, 0.5);
    const std::int64_t oh = (cs.h + cs.stride - 1) / cs.stride;
    const std::int64_t ow = (cs.w + cs.stride - 1) / cs.stride;
    auto y = Tensor::uniform({oh, ow, cs.cout}, rng, -1.0, 1.0);

    auto cx = hsc::conv2d(leaf(x), leaf(k), cs.stride, 1, hsc::Pad::same);
    auto ty = hsc::conv_transpose2d(leaf(y), leaf(k), cs.stride);
    ASSERT_EQ(ty->value.shape, (hsc::Shape{oh * cs.stride, ow * cs.stride, cs.cin}));

    const double lhs = dot(cx->value, y);
    const double rhs = dot(x, ty->value);
    EXPECT_LE(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)), 1e-4)
        << "case h=" << cs.h << " w=" << cs.w << " stride=" << cs.stride;
  }
}

TEST(ConvTranspose2d, ValidationErrors) {
  Rng rng(8);
  auto x = Tensor::uniform({4, 4, 3}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 5, 4}, rng, -1.0, 1.0);  // expects 4 source channels
  EXPECT_THROW(hsc::conv_transpose2d(leaf(x), leaf(k), 2), std::invalid_argument);
  auto k2 = Tensor::uniform({3, 3, 5, 3}, rng, -1.0, 1.0);
  auto bias = Tensor::uniform({4}, rng, -1.0, 1.0);
  EXPECT_THROW(hsc::conv_transpose2d(leaf(x), leaf(k2), leaf(bias), 2), std::invalid_argument);
}

TEST(FiniteDiff, ConvOps) {
  using oracle::DVar;
  auto dt = [](hsc::Shape s, std::uint64_t seed, double lo, double hi) {
    Rng r(seed);
    return DTensor::uniform(std::move(s), r, lo, hi);
  };
  // conv2d with bias, groups 2, stride 2, same padding on odd extents
  EXPECT_LE(oracle::max_rel_grad_error(
                {dt({5, 7, 4}, 71, -1.0, 1.0), dt({3, 3, 2, 4}, 72, -0.5, 0.5), dt({4}, 73, -0.2, 0.2),
                 dt({3, 4, 4}, 74, -1.0, 1.0)},
                [](const std::vector<DVar>& v) {
                  auto y = hsc::conv2d(v[0], v[1], v[2], 2, 2, hsc::Pad::same);
                  return hsc::reduce_sum(hsc::mul(y, v[3]));
                }),
            1e-4);
  // conv2d valid
  EXPECT_LE(oracle::max_rel_grad_error(
                {dt({5, 5, 2}, 75, -1.0, 1.0), dt({3, 3, 2, 3}, 76, -0.5, 0.5), dt({3, 3, 3}, 77, -1.0, 1.0)},
                [](const std::vector<DVar>& v) {
                  auto y = hsc::conv2d(v[0], v[1], 1, 1, hsc::Pad::valid);
                  return hsc::reduce_sum(hsc::mul(y, v[2]));
                }),
            1e-4);
  // conv_transpose2d with bias, stride 2
  EXPECT_LE(oracle::max_rel_grad_error(
                {dt({3, 3, 2}, 78, -1.0, 1.0), dt({3, 3, 4, 2}, 79, -0.5, 0.5), dt({4}, 80, -0.2, 0.2),
                 dt({6, 6, 4}, 81, -1.0, 1.0)},
                [](const std::vector<DVar>& v) {
                  auto y = hsc::conv_transpose2d(v[0], v[1], v[2], 2);
                  return hsc::reduce_sum(hsc::mul(y, v[3]));
                }),
            1e-4);
}

TEST(Determinism, ConvForwardBitIdentical) {
  Rng rng(90);
  auto x = Tensor::uniform({6, 6, 3}, rng, -1.0, 1.0);
  auto k = Tensor::uniform({3, 3, 3, 5}, rng, -0.5, 0.5);
  auto run = [&]() { return hsc::conv2d(leaf(x), leaf(k), 2, 1, hsc::Pad::same)->value; };
  auto a = run();
  for (int i = 0; i < 3; ++i) {
    auto b = run();
    for (std::size_t j = 0; j < a.data.size(); ++j) EXPECT_EQ(a.data[j], b.data[j]);
  }
}
