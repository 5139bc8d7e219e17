#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "mmq/data_pool.hpp"
#include "mmq/io.hpp"
#include "oracles.hpp"

namespace {

using namespace mmq;
namespace fs = std::filesystem;

// `meta` of the `per_class` samples of each class carry their true label.
DataPool make_pool(std::size_t classes, std::size_t per_class, std::size_t meta, std::size_t side = 4) {
  std::vector<Sample> samples;
  Rng rng(17);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < per_class; ++j) {
      Sample s;
      s.id = "s" + std::to_string(c) + "_" + std::to_string(j);
      s.image = oracle::random_tensor(rng, {1, side, side}, 0, 1);
      s.true_label = static_cast<int>(c);
      if (j < meta) s.meta_label = static_cast<int>(c);
      s.image_ref = "images/" + s.id + ".pgm";
      samples.push_back(std::move(s));
    }
  return DataPool(classes, std::move(samples));
}

void expect_valid_episode(const DataPool& pool, const Episode& e, const EpisodeProtocol& p) {
  ASSERT_EQ(e.tasks.size(), p.tasks);
  for (const auto& t : e.tasks) {
    EXPECT_EQ(std::set<int>(t.classes.begin(), t.classes.end()).size(), p.classes_per_task);
    EXPECT_EQ(t.train.size(), p.classes_per_task * p.update_per_class);
    EXPECT_EQ(t.val.size(), p.classes_per_task * (p.images_per_class - p.update_per_class));
    std::set<std::size_t> all(t.train.begin(), t.train.end());
    for (std::size_t i : t.val) EXPECT_TRUE(all.insert(i).second) << "sample in both halves";
    EXPECT_EQ(all.size(), t.train.size() + t.val.size());
    auto check = [&](const std::vector<std::size_t>& idx, const std::vector<int>& labels) {
      ASSERT_EQ(idx.size(), labels.size());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        ASSERT_TRUE(pool[idx[k]].in_meta()) << "episode drew from U";
        EXPECT_EQ(*pool[idx[k]].meta_label, t.classes[static_cast<std::size_t>(labels[k])]);
      }
    };
    check(t.train, t.train_labels);
    check(t.val, t.val_labels);
  }
}

TEST(DataPool, SplitsAreDisjointAndComplete) {
  auto pool = make_pool(3, 10, 4);
  EXPECT_EQ(pool.meta_size(), 12u);
  EXPECT_EQ(pool.unlabeled_size(), 18u);
  const auto meta = pool.meta_indices();
  std::set<std::size_t> m(meta.begin(), meta.end());
  for (std::size_t i : pool.unlabeled_indices()) EXPECT_FALSE(m.count(i));
}

TEST(DataPool, DuplicateIdRejected) {
  std::vector<Sample> s(2);
  s[0].id = s[1].id = "x";
  s[0].image = s[1].image = Tensor::zeros({1, 2, 2});
  EXPECT_THROW(DataPool(2, s), DataError);
}

TEST(DataPool, LabelOutOfRangeRejected) {
  std::vector<Sample> s(1);
  s[0].id = "x";
  s[0].image = Tensor::zeros({1, 2, 2});
  s[0].true_label = 2;
  EXPECT_THROW(DataPool(2, s), LabelError);
  s[0].true_label = 0;
  s[0].meta_label = -1;
  EXPECT_THROW(DataPool(2, s), LabelError);
}

TEST(DataPool, StripAndAssignKeepTotal) {
  auto pool = make_pool(3, 4, 2);
  const std::size_t total = pool.size();
  pool.strip_label(0);
  pool.assign_label(3, 1);
  EXPECT_EQ(pool.meta_size() + pool.unlabeled_size(), total);
  EXPECT_FALSE(pool[0].in_meta());
  EXPECT_TRUE(pool[3].noisy);
}

TEST(Episode, VqaRadProtocolShape) {
  auto pool = make_pool(9, 12, 6);
  Rng rng(1);
  const auto p = EpisodeProtocol::vqa_rad_like();
  const auto e = sample_episode(pool, p, rng);
  expect_valid_episode(pool, e, p);
  for (const auto& t : e.tasks) {
    EXPECT_EQ(t.train.size() + t.val.size(), 18u);
    EXPECT_EQ(t.train.size(), 9u);
    EXPECT_EQ(t.val.size(), 9u);
  }
}

TEST(Episode, PathVqaProtocolUsesFifteenForValidation) {
  auto pool = make_pool(31, 20, 20, 2);
  Rng rng(2);
  const auto p = EpisodeProtocol::path_vqa_like();
  const auto e = sample_episode(pool, p, rng);
  expect_valid_episode(pool, e, p);
  for (const auto& t : e.tasks) EXPECT_EQ(t.val.size(), 5u * 15u);
}

TEST(Episode, SmallestSplit) {
  auto pool = make_pool(4, 3, 2);
  Rng rng(3);
  const EpisodeProtocol p{2, 2, 2, 1};
  const auto e = sample_episode(pool, p, rng);
  expect_valid_episode(pool, e, p);
  for (const auto& t : e.tasks) {
    EXPECT_EQ(t.train.size(), 2u);
    EXPECT_EQ(t.val.size(), 2u);
  }
}

TEST(Episode, SameSeedSameEpisode) {
  auto pool = make_pool(9, 12, 6);
  Rng a(5), b(5);
  const auto x = sample_episode(pool, EpisodeProtocol::vqa_rad_like(), a);
  const auto y = sample_episode(pool, EpisodeProtocol::vqa_rad_like(), b);
  for (std::size_t t = 0; t < x.tasks.size(); ++t) {
    EXPECT_EQ(x.tasks[t].classes, y.tasks[t].classes);
    EXPECT_EQ(x.tasks[t].train, y.tasks[t].train);
    EXPECT_EQ(x.tasks[t].val, y.tasks[t].val);
  }
}

TEST(Episode, RandomizedEpisodesNeverTouchU) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto pool = make_pool(6, 8, 3 + rng.index(6));
    const EpisodeProtocol p{1 + rng.index(4), 2 + rng.index(3), 3, 1 + rng.index(2)};
    expect_valid_episode(pool, sample_episode(pool, p, rng), p);
  }
}

TEST(Episode, InsufficientClassesNamesTheClass) {
  auto pool = make_pool(3, 8, 6);
  for (std::size_t j = 0; j < 3; ++j) pool.strip_label(*pool.index_of("s1_" + std::to_string(j)));
  Rng rng(7);
  try {
    sample_episode(pool, EpisodeProtocol::vqa_rad_like(), rng);
    FAIL() << "expected CapacityError";
  } catch (const CapacityError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1 has 3"), std::string::npos) << e.what();
  }
}

TEST(Episode, BadProtocolIsConfigError) {
  auto pool = make_pool(3, 8, 6);
  Rng rng(8);
  EXPECT_THROW(sample_episode(pool, {1, 2, 4, 4}, rng), ConfigError);
  EXPECT_THROW(sample_episode(pool, {0, 2, 4, 2}, rng), ConfigError);
}

TEST(Noise, ZeroRateLeavesPoolUnchanged) {
  auto pool = make_pool(5, 10, 5);
  Rng rng(9);
  auto out = inject_noise(pool, 0.0, rng);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_EQ(out[i].meta_label, pool[i].meta_label);
    EXPECT_FALSE(out[i].noisy);
  }
}

TEST(Noise, TwentyPercentOfHundredIsTwenty) {
  auto pool = make_pool(10, 20, 10);
  ASSERT_EQ(pool.meta_size(), 100u);
  Rng rng(10);
  auto out = inject_noise(pool, 0.2, rng);
  std::size_t flagged = 0;
  for (const auto& s : out.samples()) flagged += s.noisy;
  EXPECT_EQ(flagged, 20u);
  EXPECT_EQ(out.mislabeled_in_meta(), 20u);
  EXPECT_EQ(out.meta_size(), 100u);
}

TEST(Noise, FlippedLabelsNeverEqualTruth) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    auto out = inject_noise(make_pool(2 + rng.index(5), 10, 6), 0.5, rng);
    for (const auto& s : out.samples()) {
      if (s.noisy) {
        EXPECT_NE(*s.meta_label, s.true_label);
      } else if (s.meta_label) {
        EXPECT_EQ(*s.meta_label, s.true_label);
      }
    }
  }
}

TEST(Noise, RateOutOfRangeIsConfigError) {
  auto pool = make_pool(3, 4, 2);
  Rng rng(12);
  EXPECT_THROW(inject_noise(pool, 1.0, rng), ConfigError);
  EXPECT_THROW(inject_noise(pool, -0.1, rng), ConfigError);
}

TEST(Holdout, TakesRoundedShareOfEveryClassAndConserves) {
  auto pool = make_pool(4, 30, 20);
  Rng rng(13);
  auto [rest, held] = carve_holdout(pool, 0.1, rng);
  EXPECT_EQ(rest.size() + held.size(), pool.size());
  EXPECT_EQ(held.size(), 8u);
  for (const auto& members : held.meta_by_class()) EXPECT_EQ(members.size(), 2u);
  for (const auto& s : held.samples()) EXPECT_FALSE(rest.index_of(s.id).has_value());
}

class ManifestFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("mmq_manifest_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir / "images");
  }
  void TearDown() override { fs::remove_all(dir); }

  void write_images(const DataPool& pool) {
    for (const auto& s : pool.samples()) io::write_file_atomic(dir / s.image_ref, io::encode_pgm(s.image));
  }
  std::string parse_error_of(const std::string& text) {
    io::write_file_atomic(dir / "m.tsv", text);
    try {
      read_manifest(dir / "m.tsv", dir);
    } catch (const ParseError& e) {
      return std::to_string(e.line());
    }
    return "none";
  }

  fs::path dir;
};

TEST_F(ManifestFiles, RoundTrip) {
  Rng rng(14);
  auto pool = inject_noise(make_pool(3, 5, 3), 0.3, rng);
  write_images(pool);
  io::write_file_atomic(dir / "m.tsv", encode_manifest(pool, "abc123"));
  auto [back, header] = read_manifest(dir / "m.tsv", dir);
  EXPECT_EQ(header.config_hash, "abc123");
  EXPECT_EQ(header.num_classes, 3u);
  ASSERT_EQ(back.size(), pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_EQ(back[i].id, pool[i].id);
    EXPECT_EQ(back[i].meta_label, pool[i].meta_label);
    EXPECT_EQ(back[i].noisy, pool[i].noisy);
    EXPECT_EQ(back[i].true_label, pool[i].true_label);
    for (std::size_t j = 0; j < pool[i].image.numel(); ++j) {
      EXPECT_NEAR(back[i].image.at(j), pool[i].image.at(j), 0.5f / 255.0f + 1e-6f);
    }
  }
  EXPECT_EQ(encode_manifest(back, "abc123"), encode_manifest(pool, "abc123"));
}

TEST_F(ManifestFiles, ParseErrorsCarryLineNumbers) {
  auto pool = make_pool(2, 1, 1);
  write_images(pool);
  const std::string head = "# mmq-pool v1\tnum_classes=2\tconfig_hash=h\n";
  const std::string good = "s0_0\tM\t0\t0\timages/s0_0.pgm\t0\n";
  EXPECT_EQ(parse_error_of("nonsense\n"), "1");
  EXPECT_EQ(parse_error_of(head + good + "s1_0\tX\t-\t0\timages/s1_0.pgm\t1\n"), "3");
  EXPECT_EQ(parse_error_of(head + good + "s1_0\tU\t1\t0\timages/s1_0.pgm\t1\n"), "3");
  EXPECT_EQ(parse_error_of(head + "s0_0\tM\t0\t2\timages/s0_0.pgm\t0\n"), "2");
  EXPECT_EQ(parse_error_of(head + "s0_0\tM\tzero\t0\timages/s0_0.pgm\t0\n"), "2");
  EXPECT_EQ(parse_error_of(head + good + "too\tfew\n"), "3");
  EXPECT_EQ(parse_error_of(head + good), "none");
}

TEST_F(ManifestFiles, MissingImageIsDataError) {
  io::write_file_atomic(dir / "m.tsv", "# mmq-pool v1\tnum_classes=2\tconfig_hash=h\ns\tU\t-\t0\timages/none.pgm\t1\n");
  EXPECT_THROW(read_manifest(dir / "m.tsv", dir), DataError);
}

}  // namespace
