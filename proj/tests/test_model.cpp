#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "drl/model.hpp"
#include "test_util.hpp"

using drl::ArchSpec;
using drl::Model;
using drl::Rng;
using drl::Tensor;
using testutil::random_tensor;

namespace {

std::vector<double> all_params(const Model& m) {
  std::vector<double> v;
  for (const auto& [name, t] : m.params()) v.insert(v.end(), t.values().begin(), t.values().end());
  return v;
}

}  // namespace

TEST(Init, DeterministicPerSeed) {
  auto arch = drl::mlp_arch({6}, 3, {8, 8});
  EXPECT_EQ(all_params(drl::init_model(arch, 42)), all_params(drl::init_model(arch, 42)));
  EXPECT_NE(all_params(drl::init_model(arch, 42)), all_params(drl::init_model(arch, 43)));
}

TEST(Init, LinearParamCount) {
  EXPECT_EQ(drl::init_model(drl::linear_arch({2}, 2), 0).param_count(), 6u);
}

TEST(Init, InvalidArchThrows) {
  EXPECT_THROW(drl::init_model(drl::linear_arch({4}, 1), 0), drl::ValueError);
  auto bad = drl::mlp_arch({4}, 3, {8});
  EXPECT_THROW(drl::init_model(bad, 0), drl::ValueError);
  auto conv = drl::small_conv_arch({16}, 3);  // needs CxHxW
  EXPECT_THROW(drl::init_model(conv, 0), drl::ValueError);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  Model m = drl::init_model(drl::linear_arch({3}, 4), 1);
  for (auto& [name, t] : m.params()) std::fill(t.values().begin(), t.values().end(), 0.0);
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  for (double v : m.forward_logits(x).values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, LinearIsExactAffineMap) {
  Model m = drl::init_model(drl::linear_arch({2}, 3), 7);
  const auto& w = m.param("fc.w").values();  // [2 x 3]
  const auto& b = m.param("fc.b").values();
  Tensor x({1, 2}, {0.3, -1.2});
  auto logits = m.forward_logits(x).values();
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(logits[c], x.at(0) * w[0 * 3 + c] + x.at(1) * w[1 * 3 + c] + b[c]);
  }
}

TEST(Forward, BatchEqualsPerExampleLoop) {
  Rng rng(13);
  for (auto arch : {drl::mlp_arch({5}, 4, {6, 6}), drl::small_conv_arch({1, 6, 6}, 3, {4, 4})}) {
    Model m = drl::init_model(arch, 21);
    Tensor batch = random_tensor({2, arch.input_numel()}, rng, 0, 1);
    auto batched = m.forward_logits(batch).values();
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> one(batch.values().begin() + i * arch.input_numel(),
                              batch.values().begin() + (i + 1) * arch.input_numel());
      auto single = m.forward_logits(Tensor({1, arch.input_numel()}, one)).values();
      for (std::size_t c = 0; c < single.size(); ++c) {
        EXPECT_EQ(batched[i * single.size() + c], single[c]);
      }
    }
  }
}

TEST(Forward, SoftmaxUniformAndShiftInvariant) {
  Model m = drl::init_model(drl::linear_arch({3}, 4), 1);
  for (auto& [name, t] : m.params()) std::fill(t.values().begin(), t.values().end(), 0.0);
  Tensor x({1, 3}, {1, 2, 3});
  for (double p : m.forward_softmax(x).values()) EXPECT_DOUBLE_EQ(p, 0.25);

  // shifting all logits by a constant leaves probabilities unchanged
  Rng rng(5);
  Tensor logits = random_tensor({3, 5}, rng, -2, 2);
  Tensor shifted = drl::add(logits, 17.5);
  auto p0 = drl::softmax_rows(logits).values();
  auto p1 = drl::softmax_rows(shifted).values();
  for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_NEAR(p0[i], p1[i], 1e-12);
}

TEST(Forward, SoftmaxMatchesExpNormalizeOracle) {
  Rng rng(31);
  Model m = drl::init_model(drl::mlp_arch({4}, 5, {6, 6}), 3);
  Tensor x = random_tensor({3, 4}, rng, -1, 1);
  auto logits = m.forward_logits(x).values();
  auto probs = m.forward_softmax(x).values();
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits[r * 5 + c]);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(probs[r * 5 + c], std::exp(logits[r * 5 + c]) / z, 1e-12);
  }
}

TEST(Forward, ShapeMismatchThrows) {
  Model m = drl::init_model(drl::linear_arch({3}, 2), 0);
  Tensor bad({2, 4}, std::vector<double>(8, 0.0));
  EXPECT_THROW(m.forward_logits(bad), drl::ShapeError);
}

TEST(Forward, LinearLogitsAffineInInput) {
  Model m = drl::init_model(drl::linear_arch({4}, 3), 11);
  Rng rng(2);
  Tensor x1 = random_tensor({1, 4}, rng);
  Tensor x2 = random_tensor({1, 4}, rng);
  Tensor d = random_tensor({1, 4}, rng);
  auto f = [&](const Tensor& t) { return m.forward_logits(t).values(); };
  auto d1 = f(drl::add(x1, d));
  auto f1 = f(x1);
  auto d2 = f(drl::add(x2, d));
  auto f2 = f(x2);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(d1[c] - f1[c], d2[c] - f2[c], 1e-12);
  }
}

TEST(Forward, FrozenParamsBlockParamGradients) {
  Model m = drl::init_model(drl::mlp_arch({3}, 2, {4, 4}), 9);
  Tensor x({1, 3}, {0.1, 0.2, 0.3}, /*requires_grad=*/true);
  drl::softmax_ce(m.forward_logits(x, /*frozen_params=*/true), {1}).backward();
  bool any = false;
  for (const auto& [name, t] : m.params()) {
    for (double g : t.grad()) any = any || g != 0.0;
  }
  EXPECT_FALSE(any);
  double xg = 0;
  for (double g : x.grad()) xg += std::fabs(g);
  EXPECT_GT(xg, 0.0);
}

TEST(Checkpoint, RoundTripBitExact) {
  const std::string dir = testutil::temp_dir("ckpt");
  Model m = drl::init_model(drl::small_conv_arch({1, 8, 8}, 5, {4, 4}), 77);
  const std::string path = dir + "/model.ckpt";
  drl::save_checkpoint(m, path);
  Model loaded = drl::load_checkpoint(path);

  EXPECT_EQ(loaded.arch(), m.arch());
  EXPECT_EQ(loaded.seed(), m.seed());
  EXPECT_EQ(all_params(loaded), all_params(m));

  Rng rng(3);
  Tensor x = random_tensor({2, 64}, rng, 0, 1);
  EXPECT_EQ(loaded.forward_logits(x).values(), m.forward_logits(x).values());

  // saving the loaded model reproduces the file byte for byte
  const std::string path2 = dir + "/model2.ckpt";
  drl::save_checkpoint(loaded, path2);
  EXPECT_EQ(drl::read_file_bytes(path), drl::read_file_bytes(path2));
}

TEST(Checkpoint, TruncatedFileRejected) {
  const std::string dir = testutil::temp_dir("ckpt_trunc");
  Model m = drl::init_model(drl::linear_arch({4}, 3), 5);
  const std::string path = dir + "/m.ckpt";
  drl::save_checkpoint(m, path);
  auto bytes = drl::read_file_bytes(path);
  bytes.resize(bytes.size() / 2);
  drl::write_file_bytes(path, bytes);
  EXPECT_THROW(drl::load_checkpoint(path), drl::CorruptFileError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  const std::string dir = testutil::temp_dir("ckpt_ver");
  Model m = drl::init_model(drl::linear_arch({4}, 3), 5);
  const std::string path = dir + "/m.ckpt";
  drl::save_checkpoint(m, path);
  auto bytes = drl::read_file_bytes(path);
  bytes[8] = 99;  // version field follows the 8-byte magic
  drl::write_file_bytes(path, bytes);
  try {
    drl::load_checkpoint(path);
    FAIL() << "expected CorruptFileError";
  } catch (const drl::CorruptFileError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, FlippedPayloadByteRejected) {
  const std::string dir = testutil::temp_dir("ckpt_flip");
  Model m = drl::init_model(drl::mlp_arch({4}, 3, {5, 5}), 5);
  const std::string path = dir + "/m.ckpt";
  drl::save_checkpoint(m, path);
  auto bytes = drl::read_file_bytes(path);
  bytes[bytes.size() - 3] ^= 0x40;
  drl::write_file_bytes(path, bytes);
  EXPECT_THROW(drl::load_checkpoint(path), drl::CorruptFileError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(drl::load_checkpoint("/nonexistent/nope.ckpt"), drl::IoError);
}

TEST(Clone, IndependentParameters) {
  Model m = drl::init_model(drl::linear_arch({2}, 2), 1);
  Model c = m.clone();
  c.param("fc.w").values()[0] += 1.0;
  EXPECT_NE(m.param("fc.w").values()[0], c.param("fc.w").values()[0]);
}
