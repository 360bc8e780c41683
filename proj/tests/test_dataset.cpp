#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "drl/dataset.hpp"
#include "drl/synthdata.hpp"
#include "drl/transform.hpp"
#include "test_util.hpp"

using drl::AttackConfig;
using drl::AttackKind;
using drl::AttackPlanItem;
using drl::AugmentedDataset;
using drl::Example;
using drl::ExampleSource;
using drl::Rng;
using drl::Tensor;
using drl::TransformKind;
using drl::TransformSpec;

namespace {

AugmentedDataset tiny_pool(std::size_t n, int classes = 3, std::uint64_t seed = 5) {
  AugmentedDataset ds;
  ds.classes = classes;
  ds.image_shape = {1, 4, 4};
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> img(16);
    for (double& v : img) v = drl::snap_into_interval(rng.uniform(0.1, 0.9), 0, 1);
    Example e;
    e.id = static_cast<std::int64_t>(i);
    e.image = Tensor(ds.image_shape, std::move(img));
    e.label = static_cast<int>(i % classes);
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

drl::Model pool_substitute(std::uint64_t seed) {
  return drl::init_model(drl::linear_arch({1, 4, 4}, 3), seed);
}

}  // namespace

TEST(Transform, SeverityZeroIsIdentity) {
  Rng rng(1);
  Tensor x = testutil::random_tensor({1, 6, 6}, rng, 0, 1);
  for (auto kind : {TransformKind::GaussianNoise, TransformKind::Blur, TransformKind::Contrast,
                    TransformKind::Occlusion, TransformKind::Chain}) {
    TransformSpec spec{kind, 0.0, 7, {}};
    EXPECT_EQ(drl::corrupt_transform(x, spec).values(), x.values());
  }
}

TEST(Transform, DeterministicGivenSeed) {
  Rng rng(2);
  Tensor x = testutil::random_tensor({1, 8, 8}, rng, 0, 1);
  for (auto kind : {TransformKind::GaussianNoise, TransformKind::Blur, TransformKind::Contrast,
                    TransformKind::Occlusion}) {
    TransformSpec spec{kind, 2.5, 99, {}};
    EXPECT_EQ(drl::corrupt_transform(x, spec).values(), drl::corrupt_transform(x, spec).values());
  }
}

TEST(Transform, GaussianNoiseMatchesSeededOracle) {
  Rng rng(3);
  Tensor x = testutil::random_tensor({2, 5, 5}, rng, 0, 1);
  TransformSpec spec{TransformKind::GaussianNoise, 3.0, 1234, {}};
  Tensor got = drl::corrupt_transform(x, spec);

  Rng oracle(1234);
  const double sigma = 0.02 * 3.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double expect = std::min(std::max(x.at(i) + sigma * oracle.normal(), 0.0), 1.0);
    EXPECT_DOUBLE_EQ(got.at(i), expect);
  }
}

TEST(Transform, OutputStaysInRange) {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = testutil::random_tensor({1, 6, 6}, rng, 0, 1);
    for (auto kind : {TransformKind::GaussianNoise, TransformKind::Blur, TransformKind::Contrast,
                      TransformKind::Occlusion}) {
      TransformSpec spec{kind, rng.uniform(0, 5), rep * 31u + 5, {}};
      Tensor y = drl::corrupt_transform(x, spec);
      for (double v : y.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Transform, ChainAppliesMembersInOrder) {
  Rng rng(5);
  Tensor x = testutil::random_tensor({1, 6, 6}, rng, 0, 1);
  TransformSpec noise{TransformKind::GaussianNoise, 2.0, 0, {}};
  TransformSpec contrast{TransformKind::Contrast, 3.0, 0, {}};
  TransformSpec chain{TransformKind::Chain, 1.0, 77, {noise, contrast}};
  Tensor got = drl::corrupt_transform(x, chain);

  Tensor step1 = drl::corrupt_transform(x, noise.reseeded(drl::splitmix64(77 ^ drl::hash_u64(0))));
  Tensor step2 =
      drl::corrupt_transform(step1, contrast.reseeded(drl::splitmix64(77 ^ drl::hash_u64(1))));
  EXPECT_EQ(got.values(), step2.values());
}

TEST(Transform, InvalidSeverityThrows) {
  Tensor x = Tensor::full({1, 4, 4}, 0.5);
  TransformSpec spec{TransformKind::Blur, 7.0, 0, {}};
  EXPECT_THROW(drl::corrupt_transform(x, spec), drl::ValueError);
}

TEST(BuildDataset, CountsFollowSubstituteAttackProduct) {
  AugmentedDataset pool = tiny_pool(6);
  std::vector<drl::Model> subs{pool_substitute(1)};
  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 2;
  cfg.random_start = false;
  std::vector<AttackPlanItem> attacks{{AttackKind::Pgd, cfg}, {AttackKind::Fgsm, cfg}};
  AugmentedDataset ds = drl::build_drl_dataset(pool, subs, attacks, Rng(9));

  EXPECT_EQ(ds.count_source(ExampleSource::Clean), 6u);
  EXPECT_EQ(ds.count_source(ExampleSource::Adversarial), 12u);
  EXPECT_EQ(ds.pairs.size(), 12u);
  EXPECT_EQ(ds.data_amount(), 18u);

  // two substitutes double the adversarial share
  std::vector<drl::Model> two{pool_substitute(1), pool_substitute(2)};
  AugmentedDataset ds2 = drl::build_drl_dataset(pool, two, attacks, Rng(9));
  EXPECT_EQ(ds2.count_source(ExampleSource::Adversarial), 24u);
  EXPECT_EQ(ds2.pairs.size(), 24u);
}

TEST(BuildDataset, BallInvariantHoldsForEveryPair) {
  AugmentedDataset pool = tiny_pool(8);
  AttackConfig cfg;
  cfg.epsilon = 8.0 / 255.0;
  cfg.random_start = true;
  AugmentedDataset ds =
      drl::build_drl_dataset(pool, {pool_substitute(3)}, {{AttackKind::Pgd, cfg}}, Rng(4));
  for (const auto& [cid, aid] : ds.pairs) {
    const Example& c = ds.by_id(cid);
    const Example& a = ds.by_id(aid);
    EXPECT_EQ(c.label, a.label);
    for (std::size_t i = 0; i < c.image.size(); ++i) {
      EXPECT_LE(std::fabs(c.image.at(i) - a.image.at(i)), ds.epsilon + 1e-9);
    }
  }
}

TEST(BuildDataset, DeterministicAcrossRuns) {
  AugmentedDataset pool = tiny_pool(5);
  AttackConfig cfg;
  cfg.random_start = true;
  auto build = [&] {
    return drl::build_drl_dataset(pool, {pool_substitute(3)}, {{AttackKind::Pgd, cfg}}, Rng(21), 2);
  };
  EXPECT_EQ(build().content_hash(), build().content_hash());
}

TEST(BuildDataset, PreconditionsChecked) {
  AugmentedDataset pool = tiny_pool(3);
  AttackConfig cfg;
  EXPECT_THROW(drl::build_drl_dataset(pool, {}, {{AttackKind::Pgd, cfg}}, Rng(0)), drl::ValueError);
  EXPECT_THROW(drl::build_drl_dataset(pool, {pool_substitute(1)}, {}, Rng(0)), drl::ValueError);
  auto wrong = drl::init_model(drl::linear_arch({9}, 3), 0);
  EXPECT_THROW(drl::build_drl_dataset(pool, {wrong}, {{AttackKind::Pgd, cfg}}, Rng(0)),
               drl::ShapeError);
}

TEST(Persistence, RoundTripPreservesEverything) {
  const std::string dir = testutil::temp_dir("ds_rt");
  AugmentedDataset pool = tiny_pool(5);
  AttackConfig cfg;
  cfg.epsilon = 0.04;
  cfg.random_start = true;
  AugmentedDataset ds =
      drl::build_drl_dataset(pool, {pool_substitute(7)}, {{AttackKind::Mim, cfg}}, Rng(2));
  ds.provenance.notes.push_back("unit test fixture");
  drl::save_dataset(ds, dir + "/set");
  AugmentedDataset back = drl::load_dataset(dir + "/set");

  EXPECT_EQ(back.classes, ds.classes);
  EXPECT_EQ(back.image_shape, ds.image_shape);
  EXPECT_EQ(back.epsilon, ds.epsilon);
  EXPECT_EQ(back.pairs, ds.pairs);
  EXPECT_EQ(back.provenance.substitutes, ds.provenance.substitutes);
  EXPECT_EQ(back.provenance.attacks, ds.provenance.attacks);
  EXPECT_EQ(back.provenance.notes, ds.provenance.notes);
  EXPECT_EQ(back.provenance.seed, ds.provenance.seed);
  ASSERT_EQ(back.examples.size(), ds.examples.size());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    EXPECT_EQ(back.examples[i].id, ds.examples[i].id);
    EXPECT_EQ(back.examples[i].image.values(), ds.examples[i].image.values());  // bit-exact
    EXPECT_EQ(back.examples[i].attack_tag, ds.examples[i].attack_tag);
  }
  EXPECT_EQ(back.content_hash(), ds.content_hash());
}

TEST(Persistence, FlippedBlobByteIsRejected) {
  const std::string dir = testutil::temp_dir("ds_flip");
  AugmentedDataset ds = tiny_pool(4);
  drl::save_dataset(ds, dir + "/set");
  auto blob = drl::read_file_bytes(dir + "/set.blob");
  blob[5] ^= 0x10;
  drl::write_file_bytes(dir + "/set.blob", blob);
  EXPECT_THROW(drl::load_dataset(dir + "/set"), drl::CorruptFileError);
}

TEST(Persistence, TruncatedManifestIsRejected) {
  const std::string dir = testutil::temp_dir("ds_trunc");
  AugmentedDataset ds = tiny_pool(4);
  drl::save_dataset(ds, dir + "/set");
  auto manifest = drl::read_file_bytes(dir + "/set.manifest");
  manifest.resize(manifest.size() - 5);  // drops the end marker
  drl::write_file_bytes(dir + "/set.manifest", manifest);
  EXPECT_THROW(drl::load_dataset(dir + "/set"), drl::CorruptFileError);
}

TEST(Persistence, VersionMismatchIsRejected) {
  const std::string dir = testutil::temp_dir("ds_ver");
  AugmentedDataset ds = tiny_pool(3);
  drl::save_dataset(ds, dir + "/set");
  auto manifest = drl::read_file_bytes(dir + "/set.manifest");
  std::string text(manifest.begin(), manifest.end());
  text.replace(text.find("drl-dataset 1"), 13, "drl-dataset 9");
  drl::write_file_bytes(dir + "/set.manifest", {text.begin(), text.end()});
  EXPECT_THROW(drl::load_dataset(dir + "/set"), drl::CorruptFileError);
}

TEST(Persistence, EmptyDatasetRoundTrips) {
  const std::string dir = testutil::temp_dir("ds_empty");
  AugmentedDataset ds;
  ds.classes = 2;
  ds.image_shape = {1, 2, 2};
  drl::save_dataset(ds, dir + "/set");
  AugmentedDataset back = drl::load_dataset(dir + "/set");
  EXPECT_TRUE(back.examples.empty());
  EXPECT_TRUE(back.pairs.empty());
  EXPECT_EQ(back.content_hash(), ds.content_hash());
}

TEST(Persistence, MissingFilesAreIoErrors) {
  EXPECT_THROW(drl::load_dataset("/nonexistent/set"), drl::IoError);
}

TEST(Ingest, BalancedSyntheticComesBackWithoutWarning) {
  const std::string dir = testutil::temp_dir("ingest_ok");
  AugmentedDataset ds = tiny_pool(30, 3);  // 10 per class
  drl::save_dataset(ds, dir + "/syn");
  auto result = drl::ingest_synthetic(dir + "/syn", 3, &ds.image_shape);
  EXPECT_EQ(result.examples.size(), 30u);
  EXPECT_FALSE(result.imbalance_warning);
  for (const auto& e : result.examples) EXPECT_EQ(e.source, ExampleSource::Synthetic);
  EXPECT_EQ(result.class_histogram, (std::vector<std::size_t>{10, 10, 10}));
}

TEST(Ingest, ImbalanceBeyondOneExampleWarns) {
  const std::string dir = testutil::temp_dir("ingest_warn");
  AugmentedDataset ds = tiny_pool(20, 2);
  ds.examples[1].label = 0;  // 11 vs 9
  drl::save_dataset(ds, dir + "/syn");
  auto result = drl::ingest_synthetic(dir + "/syn");
  EXPECT_TRUE(result.imbalance_warning);
  EXPECT_EQ(result.class_histogram, (std::vector<std::size_t>{11, 9}));
}

TEST(Ingest, OutOfRangePixelIsRejected) {
  const std::string dir = testutil::temp_dir("ingest_range");
  AugmentedDataset ds = tiny_pool(4, 2);
  drl::save_dataset(ds, dir + "/syn");

  // rewrite the first image region with a 1.5 pixel and a matching crc so
  // only the range validation can reject it
  auto blob = drl::read_file_bytes(dir + "/syn.blob");
  const float bad = 1.5f;
  std::memcpy(blob.data(), &bad, 4);
  drl::write_file_bytes(dir + "/syn.blob", blob);
  const std::uint32_t crc = drl::crc32_of(blob.data(), 16 * 4);
  auto manifest = drl::read_file_bytes(dir + "/syn.manifest");
  std::string text(manifest.begin(), manifest.end());
  char oldcrc[16], newcrc[16];
  std::snprintf(newcrc, sizeof(newcrc), "%08x", crc);
  const auto pos = text.find("example 0 ");
  ASSERT_NE(pos, std::string::npos);
  const auto line_end = text.find('\n', pos);
  const auto crc_pos = text.rfind(' ', line_end) + 1;
  std::snprintf(oldcrc, sizeof(oldcrc), "%s", text.substr(crc_pos, 8).c_str());
  text.replace(crc_pos, 8, newcrc);
  drl::write_file_bytes(dir + "/syn.manifest", {text.begin(), text.end()});

  EXPECT_THROW(drl::ingest_synthetic(dir + "/syn"), drl::CorruptFileError);
}

TEST(SynthTask, DeterministicBalancedAndInRange) {
  drl::SynthTaskConfig cfg;
  cfg.classes = 5;
  cfg.train_count = 50;
  cfg.test_count = 20;
  cfg.seed = 3;
  auto a = drl::make_synthetic_task(cfg);
  auto b = drl::make_synthetic_task(cfg);
  EXPECT_EQ(a.train.content_hash(), b.train.content_hash());
  EXPECT_EQ(a.test.content_hash(), b.test.content_hash());
  EXPECT_EQ(a.train.examples.size(), 50u);

  std::vector<int> hist(5, 0);
  for (const auto& e : a.train.examples) {
    hist[static_cast<std::size_t>(e.label)]++;
    for (double v : e.image.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_EQ(v, drl::to_storage(v));  // fp32 grid
    }
  }
  for (int c : hist) EXPECT_EQ(c, 10);
  a.train.validate();
}
