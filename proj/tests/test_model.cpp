// Model aggregation and checkpoint tests: weight/config hashing, byte-exact
// save/load round trips, and validation of malformed checkpoint files.
#include <gtest/gtest.h>

#include <cstdio>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hsc/model.hpp"

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

std::string temp_path(const std::string& stem) {
  return "/tmp/hsc_model_test_" + stem + "_" + std::to_string(::getpid());
}

}  // namespace

TEST(ModelHash, IdentifiesArchitectureAndWeights) {
  hsc::Rng r1(7), r2(7), r3(8);
  hsc::Model a(tiny_config(), r1);
  hsc::Model b(tiny_config(), r2);
  hsc::Model c(tiny_config(), r3);
  EXPECT_EQ(a.hash(), b.hash());  // same seed, same architecture
  EXPECT_NE(a.hash(), c.hash());  // different initial weights

  auto cfg2 = tiny_config();
  cfg2.context_channels = 12;
  hsc::Rng r4(7);
  hsc::Model d(cfg2, r4);
  EXPECT_NE(a.hash(), d.hash());  // different architecture
}

TEST(ModelHash, TransfersWithWeights) {
  hsc::Rng r1(7), r2(99);
  hsc::Model a(tiny_config(), r1);
  hsc::Model b(tiny_config(), r2);
  ASSERT_NE(a.hash(), b.hash());
  hsc::Checkpoint ck;
  hsc::store_params(ck, a.reg);
  hsc::load_params(ck, b.reg);
  EXPECT_EQ(a.hash(), b.hash());
}

TEST(Checkpoint, RoundTripIsByteExact) {
  hsc::Rng rng(31);
  hsc::Model m(tiny_config(), rng);
  hsc::Checkpoint ck;
  ck.set_meta("kind", "model");
  ck.set_meta("step", "1234");
  ck.set_meta("rng_state", std::to_string(rng.state()));
  ck.set_meta("model_config", hsc::model_config_to_string(m.cfg));
  hsc::store_params(ck, m.reg);
  // a double-precision record alongside the float parameters
  hsc::TensorT<double> moment({3, 2}, {0.5, -1.25, 3.0, 0.0, 7.5, -2.0});
  ck.add_tensor("adam.m.example", moment);

  const std::string path = temp_path("roundtrip");
  ck.save(path);
  const auto back = hsc::Checkpoint::load(path);
  std::remove(path.c_str());

  EXPECT_EQ(back.require_meta("kind"), "model");
  EXPECT_EQ(back.require_meta("step"), "1234");
  EXPECT_EQ(back.meta, ck.meta);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].dtype, ck.tensors[i].dtype);
    ASSERT_EQ(back.tensors[i].data, ck.tensors[i].data) << ck.tensors[i].name;
  }
  const auto m2 = back.get_tensor<double>("adam.m.example");
  EXPECT_EQ(m2.shape, moment.shape);
  EXPECT_EQ(m2.data, moment.data);

  // loading into a model built from the stored config reproduces the hash
  const auto cfg = hsc::model_config_from_string(back.require_meta("model_config"));
  hsc::Rng rng2(777);
  hsc::Model fresh(cfg, rng2);
  hsc::load_params(back, fresh.reg);
  EXPECT_EQ(fresh.hash(), m.hash());
}

TEST(Checkpoint, RejectsMalformedFiles) {
  hsc::Rng rng(5);
  hsc::Model m(tiny_config(), rng);
  hsc::Checkpoint ck;
  hsc::store_params(ck, m.reg);
  const std::string path = temp_path("malformed");
  ck.save(path);

  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  auto write_variant = [&](const std::vector<char>& v) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(v.data(), static_cast<std::streamsize>(v.size()));
  };

  // truncated
  write_variant(std::vector<char>(bytes.begin(), bytes.begin() + bytes.size() / 2));
  EXPECT_THROW(hsc::Checkpoint::load(path), std::runtime_error);
  // bad magic
  auto bad = bytes;
  bad[0] = 'X';
  write_variant(bad);
  EXPECT_THROW(hsc::Checkpoint::load(path), std::runtime_error);
  // unsupported version
  bad = bytes;
  bad[4] = 42;
  write_variant(bad);
  EXPECT_THROW(hsc::Checkpoint::load(path), std::runtime_error);
  // trailing garbage
  bad = bytes;
  bad.push_back(0);
  write_variant(bad);
  EXPECT_THROW(hsc::Checkpoint::load(path), std::runtime_error);
  std::remove(path.c_str());

  EXPECT_THROW(hsc::Checkpoint::load("/tmp/hsc_model_test_does_not_exist"), std::runtime_error);
}

TEST(Checkpoint, LoadParamsValidatesNamesAndShapes) {
  hsc::Rng r1(1), r2(2);
  hsc::Model a(tiny_config(), r1);
  hsc::Model b(tiny_config(), r2);

  hsc::Checkpoint ck;
  hsc::store_params(ck, a.reg);

  // missing tensor
  hsc::Checkpoint missing = ck;
  missing.tensors.erase(missing.tensors.begin());
  EXPECT_THROW(hsc::load_params(missing, b.reg), std::runtime_error);

  // wrong shape
  hsc::Checkpoint reshaped = ck;
  reshaped.tensors[0].shape.back() += 1;
  reshaped.tensors[0].data.resize(reshaped.tensors[0].data.size() /
                                      static_cast<std::size_t>(ck.tensors[0].shape.back()) *
                                      static_cast<std::size_t>(reshaped.tensors[0].shape.back()),
                                  0);
  EXPECT_THROW(hsc::load_params(reshaped, b.reg), std::runtime_error);

  // wrong dtype
  hsc::Checkpoint retyped = ck;
  retyped.tensors[0].dtype = 1;
  EXPECT_THROW(hsc::load_params(retyped, b.reg), std::runtime_error);

  // duplicate insertion is rejected at build time
  EXPECT_THROW(hsc::store_params(ck, a.reg), std::logic_error);
}
