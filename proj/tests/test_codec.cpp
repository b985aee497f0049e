// End-to-end codec tests on a miniature model: encoder/decoder latent
// agreement, padding transparency, rate-estimate consistency, stream
// validation, and the training-mode objective.
#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "hsc/codec.hpp"

namespace {

hsc::ModelConfig tiny_config() {
  hsc::ModelConfig cfg;
  cfg.stages = {{8, 1}, {16, 1}};
  cfg.window_base = 4;
  cfg.beta = 4;
  cfg.head_dim = 4;
  cfg.hyper_channels = 8;
  cfg.context_channels = 8;
  cfg.validate();
  return cfg;
}

hsc::TensorT<float> random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  hsc::Rng rng(seed);
  return hsc::TensorT<float>::uniform({h, w, 3}, rng, 0.0, 1.0);
}

}  // namespace

TEST(ReflectPad, FoldsWithoutRepeatingTheBorder) {
  hsc::TensorT<float> x({2, 3, 1}, {0, 1, 2, 10, 11, 12});
  const auto p = hsc::reflect_pad(x, 4, 5);
  ASSERT_EQ(p.shape, (hsc::Shape{4, 5, 1}));
  // row pattern: 0 1 2 1 0; column pattern: r0 r1 r0 r1
  const std::vector<float> want = {0,  1,  2,  1,  0,  10, 11, 12, 11, 10,
                                   0,  1,  2,  1,  0,  10, 11, 12, 11, 10};
  EXPECT_EQ(p.data, want);
  // pads wider than the source fold repeatedly and stay in range
  const auto wide = hsc::reflect_pad(x, 9, 11);
  for (float v : wide.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 12.0f);
  }
  // single-row source: every folded row is that row
  hsc::TensorT<float> one({1, 2, 1}, {5, 6});
  const auto po = hsc::reflect_pad(one, 3, 2);
  EXPECT_EQ(po.data, (std::vector<float>{5, 6, 5, 6, 5, 6}));
  EXPECT_THROW(hsc::reflect_pad(x, 1, 5), std::invalid_argument);
}

TEST(Codec, RoundTripLatentsAreBitExact) {
  hsc::Rng rng(42);
  hsc::Model model(tiny_config(), rng);
  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{32, 32}, {17, 65}, {48, 20}}) {
    const auto img = random_image(h, w, 1000 + static_cast<std::uint64_t>(h));
    const auto comp = hsc::compress(model, img, 2);
    const auto dec = hsc::decompress(model, comp.bytes);

    EXPECT_EQ(dec.zhat.shape, comp.zhat.shape);
    ASSERT_EQ(dec.zhat.data, comp.zhat.data) << h << "x" << w;
    EXPECT_EQ(dec.yhat.shape, comp.yhat.shape);
    ASSERT_EQ(dec.yhat.data, comp.yhat.data) << h << "x" << w;

    // true extents restored, pixels clamped
    ASSERT_EQ(dec.image.shape, (hsc::Shape{h, w, 3}));
    for (float v : dec.image.data) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Codec, CompressionIsDeterministic) {
  hsc::Rng rng(7);
  hsc::Model model(tiny_config(), rng);
  const auto img = random_image(24, 40, 55);
  const auto a = hsc::compress(model, img, 1);
  const auto b = hsc::compress(model, img, 1);
  EXPECT_EQ(a.bytes, b.bytes);
  EXPECT_EQ(a.estimated_bits, b.estimated_bits);
  const auto da = hsc::decompress(model, a.bytes);
  const auto db = hsc::decompress(model, a.bytes);
  EXPECT_EQ(da.image.data, db.image.data);
}

TEST(Codec, HeaderEchoesTrueExtentsAndLambdaIndex) {
  hsc::Rng rng(9);
  hsc::Model model(tiny_config(), rng);
  const auto comp = hsc::compress(model, random_image(19, 33, 3), 4);
  hsc::detail::ByteReader r{comp.bytes.data(), comp.bytes.size()};
  const auto hd = hsc::read_header(r);
  EXPECT_EQ(hd.height, 19);
  EXPECT_EQ(hd.width, 33);
  EXPECT_EQ(hd.lambda_index, 4);
  EXPECT_EQ(hd.model_hash, model.hash());
}

TEST(Codec, ActualSizeTracksEstimate) {
  hsc::Rng rng(11);
  hsc::Model model(tiny_config(), rng);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto comp = hsc::compress(model, random_image(64, 64, seed));
    const double estimated_bytes = comp.estimated_bits / 8.0;
    EXPECT_LE(static_cast<double>(comp.bytes.size()), estimated_bytes * 1.02 + 128.0);
    EXPECT_GT(comp.estimated_bits, 0.0);
  }
}

TEST(Codec, WrongModelIsRejectedBeforeDecoding) {
  hsc::Rng r1(1), r2(2);
  hsc::Model a(tiny_config(), r1);
  hsc::Model b(tiny_config(), r2);
  const auto comp = hsc::compress(a, random_image(16, 16, 5));
  try {
    (void)hsc::decompress(b, comp.bytes);
    FAIL() << "hash mismatch not detected";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("different model"), std::string::npos);
  }
}

TEST(Codec, TruncatedAndTamperedStreamsError) {
  hsc::Rng rng(13);
  hsc::Model model(tiny_config(), rng);
  const auto comp = hsc::compress(model, random_image(32, 32, 5));

  // truncations at several depths: inside the header, inside the segment
  // table, inside a payload
  for (std::size_t keep : {std::size_t{4}, std::size_t{17}, comp.bytes.size() / 2,
                           comp.bytes.size() - 1}) {
    std::vector<std::uint8_t> cut(comp.bytes.begin(),
                                  comp.bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    EXPECT_THROW((void)hsc::decompress(model, cut), std::runtime_error) << "keep=" << keep;
  }
  // trailing garbage
  auto extra = comp.bytes;
  extra.push_back(0x00);
  EXPECT_THROW((void)hsc::decompress(model, extra), std::runtime_error);
  // bad magic
  auto bad = comp.bytes;
  bad[0] = 'Z';
  EXPECT_THROW((void)hsc::decompress(model, bad), std::runtime_error);
}

TEST(Codec, RejectsBadInputs) {
  hsc::Rng rng(3);
  hsc::Model model(tiny_config(), rng);
  EXPECT_THROW((void)hsc::compress(model, hsc::TensorT<float>({4, 4, 1})), std::invalid_argument);
  EXPECT_THROW((void)hsc::compress(model, random_image(5000, 16, 1)), std::invalid_argument);
  auto nf = random_image(16, 16, 1);
  nf.data[7] = std::nanf("");
  EXPECT_THROW((void)hsc::compress(model, nf), std::invalid_argument);
}

TEST(ForwardTrain, LossCombinesRateAndDistortion) {
  hsc::Rng rng(17);
  hsc::Model model(tiny_config(), rng);
  const auto img = random_image(32, 32, 23);

  hsc::Rng noise1(99), noise2(99);
  auto x = hsc::make_leaf(img);
  const auto a = hsc::forward_train(model, x, 0.013, noise1);
  const auto b = hsc::forward_train(model, x, 0.013, noise2);
  // identical noise seed -> identical objective
  EXPECT_EQ(a.loss->value.data[0], b.loss->value.data[0]);

  const double loss = a.loss->value.data[0];
  const double bpp = a.bpp->value.data[0];
  const double mse = a.mse->value.data[0];
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(bpp, 0.0);
  EXPECT_GT(mse, 0.0);
  EXPECT_NEAR(loss, bpp + 0.013 * 255.0 * 255.0 * mse, 1e-3 * loss);

  // lambda = 0: the objective is the rate alone
  hsc::Rng noise3(99);
  const auto c = hsc::forward_train(model, x, 0.0, noise3);
  EXPECT_EQ(c.loss->value.data[0], c.bpp->value.data[0]);

  // reconstruction has the input's padded shape
  EXPECT_EQ(a.xhat->value.shape, (hsc::Shape{32, 32, 3}));
}

TEST(ForwardTrain, BackwardProducesFiniteGrads) {
  hsc::Rng rng(19);
  hsc::Model model(tiny_config(), rng);
  const auto img = random_image(32, 32, 29);

  hsc::Tape tape;
  hsc::Tape::Scope scope(tape);
  hsc::Rng noise(5);
  auto x = hsc::make_leaf(img);
  const auto out = hsc::forward_train(model, x, 0.013, noise);
  tape.backward(out.loss);

  std::size_t nonzero = 0;
  for (const auto* p : model.reg.list()) {
    ASSERT_TRUE(p->grad.all_finite()) << p->name;
    for (float g : p->grad.data)
      if (g != 0.0f) {
        ++nonzero;
        break;
      }
  }
  // every component of the pipeline receives gradient signal
  EXPECT_GT(nonzero, model.reg.list().size() * 3 / 4);
}
