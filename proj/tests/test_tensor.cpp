#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hsc/ops.hpp"
#include "hsc/rng.hpp"
#include "hsc/tape.hpp"
#include "hsc/tensor.hpp"

using hsc::Rng;
using hsc::Tensor;

TEST(Tensor, ShapeDataAgreement) {
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.rank(), 2);
  EXPECT_EQ(t.dim(1), 3);
  EXPECT_THROW(Tensor({2, 3}, {1.0f, 2.0f}), std::invalid_argument);
  EXPECT_THROW(Tensor({0, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({-1}), std::invalid_argument);
}

TEST(Tensor, FullScalarZeros) {
  auto z = Tensor::zeros({4});
  for (float v : z.data) EXPECT_EQ(v, 0.0f);
  auto f = Tensor::full({2, 2}, 3.5f);
  for (float v : f.data) EXPECT_EQ(v, 3.5f);
  auto s = Tensor::scalar(-1.0f);
  EXPECT_EQ(s.numel(), 1);
  EXPECT_EQ(s.data[0], -1.0f);
}

TEST(Tensor, FiniteDetection) {
  Tensor t({3}, {1.0f, 2.0f, 3.0f});
  EXPECT_TRUE(t.all_finite());
  t.data[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  t.data[1] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, ShapeMismatchMessageNamesBothShapes) {
  Tensor a({2, 3});
  Tensor b({3, 2});
  try {
    hsc::check_same_shape(a, b, "add");
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
}

TEST(Rng, DeterministicAndResumable) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());

  Rng c(7);
  for (int i = 0; i < 10; ++i) c.uniform();
  const std::uint64_t mid = c.state();
  std::vector<double> tail;
  for (int i = 0; i < 10; ++i) tail.push_back(c.uniform());
  Rng d;
  d.set_state(mid);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(d.uniform(), tail[static_cast<std::size_t>(i)]);
}

TEST(Rng, UniformRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = r.uniform(-2.0, 3.0);
    EXPECT_GE(v, -2.0);
    EXPECT_LT(v, 3.0);
  }
  Rng s(2);
  for (int i = 0; i < 1000; ++i) {
    const auto v = s.uniform_int(17);
    EXPECT_GE(v, 0);
    EXPECT_LT(v, 17);
  }
}

// Float and double tensors drawn from the same seed hold the same samples
// (up to the float rounding of identical doubles). This is what lets the
// test suite build double-precision twins of float models.
TEST(Rng, SharedSamplesAcrossPrecisions) {
  Rng r1(99), r2(99);
  auto tf = Tensor::uniform({64}, r1, -1.0, 1.0);
  auto td = hsc::TensorT<double>::uniform({64}, r2, -1.0, 1.0);
  for (std::size_t i = 0; i < tf.data.size(); ++i)
    EXPECT_EQ(tf.data[i], static_cast<float>(td.data[i]));
}

TEST(Parameter, GradShapeMatchesAndZeros) {
  hsc::Parameter p("w", Tensor::full({2, 2}, 1.0f));
  EXPECT_EQ(p.grad.shape, p.value.shape);
  p.grad.data[0] = 5.0f;
  p.zero_grad();
  for (float v : p.grad.data) EXPECT_EQ(v, 0.0f);
}

TEST(Tape, BackwardPopulatesParameterGradients) {
  hsc::Parameter p("w", Tensor({3}, {1.0f, -2.0f, 3.0f}));
  hsc::Tape tape;
  {
    hsc::Tape::Scope scope(tape);
    auto w = hsc::use_param(p);
    auto loss = hsc::reduce_sum(hsc::mul(w, w));
    tape.backward(loss);
  }
  EXPECT_EQ(p.grad.data[0], 2.0f);
  EXPECT_EQ(p.grad.data[1], -4.0f);
  EXPECT_EQ(p.grad.data[2], 6.0f);
}

TEST(Tape, GradientsAccumulateAcrossBackwards) {
  hsc::Parameter p("w", Tensor({1}, {2.0f}));
  for (int pass = 0; pass < 2; ++pass) {
    hsc::Tape tape;
    hsc::Tape::Scope scope(tape);
    auto w = hsc::use_param(p);
    auto loss = hsc::reduce_sum(hsc::mul(w, w));
    tape.backward(loss);
  }
  EXPECT_EQ(p.grad.data[0], 8.0f);  // 4 + 4
  p.zero_grad();
  EXPECT_EQ(p.grad.data[0], 0.0f);
}

TEST(Tape, StaleTapeErrors) {
  hsc::Parameter p("w", Tensor({1}, {1.0f}));
  hsc::Tape tape;
  hsc::Tape::Scope scope(tape);
  EXPECT_THROW(tape.backward(nullptr), std::runtime_error);  // empty tape
  auto w = hsc::use_param(p);
  auto loss = hsc::reduce_sum(w);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::runtime_error);  // second backward
  EXPECT_THROW(hsc::use_param(p), std::runtime_error);    // record after backward
}

TEST(Tape, BackwardRequiresScalarLoss) {
  hsc::Parameter p("w", Tensor({2}, {1.0f, 2.0f}));
  hsc::Tape tape;
  hsc::Tape::Scope scope(tape);
  auto w = hsc::use_param(p);
  auto y = hsc::mul(w, w);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Tape, NoTapeMeansPureForward) {
  hsc::Parameter p("w", Tensor({2}, {1.0f, 2.0f}));
  auto w = hsc::use_param(p);  // no active tape
  auto y = hsc::mul(w, w);
  EXPECT_FALSE(y->needs_grad);
  EXPECT_TRUE(y->parents.empty());
  EXPECT_EQ(y->value.data[1], 4.0f);
}
