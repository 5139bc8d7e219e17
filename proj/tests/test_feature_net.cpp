#include <gtest/gtest.h>

#include <filesystem>
#include <cstring>
#include <numeric>

#include "mmq/feature_net.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

namespace {

using namespace mmq;

FeatureNetSpec small_spec(std::size_t feature_dim = 5) { return {1, 31, feature_dim}; }

TEST(FeatureNetShape, SpatialTraceFor84) {
  EXPECT_EQ(FeatureNetSpec{}.spatial_trace(), (std::vector<std::size_t>{41, 20, 9, 4}));
  EXPECT_EQ(small_spec().spatial_trace(), (std::vector<std::size_t>{15, 7, 3, 1}));
}

TEST(FeatureNetShape, TooSmallImageCollapses) {
  EXPECT_THROW((FeatureNetSpec{1, 20, 8}.validate()), DimensionError);
}

TEST(FeatureNetShape, EveryConvHas64Filters) {
  for (const auto& s : FeatureNet::param_shapes(FeatureNetSpec{})) {
    if (s.size() == 4) {
      EXPECT_EQ(s[0], 64u);
    }
  }
}

TEST(FeatureNetShape, OutputWidthIsFeatureDim) {
  Rng rng(3);
  for (std::size_t dim : {1u, 32u, 64u}) {
    auto net = FeatureNet::init(small_spec(dim), rng);
    EXPECT_EQ(net.extract(oracle::random_tensor(rng, {1, 31, 31}, 0, 1)).shape(), (Shape{dim}));
  }
}

TEST(FeatureNetShape, WrongSpatialSizeRejected) {
  Rng rng(1);
  auto net = FeatureNet::init(small_spec(), rng);
  EXPECT_THROW(net.extract(Tensor::zeros({1, 30, 31})), DimensionError);
  EXPECT_THROW(net.extract(Tensor::zeros({31, 31})), DimensionError);
  EXPECT_THROW(net.extract(Tensor::zeros({2, 31, 31})), DimensionError);
}

TEST(FeatureNetForward, ZeroImageZeroBiasGivesZeroFeatures) {
  Rng rng(2);
  auto net = FeatureNet::init(small_spec(), rng);
  ParamList p = net.params();
  for (std::size_t i = 1; i < p.size(); i += 2) p[i] = Tensor::zeros(p[i].shape());
  FeatureNet zero_bias(small_spec(), p);
  const Tensor f = zero_bias.extract(Tensor::zeros({1, 31, 31}));
  for (float v : f.data()) EXPECT_EQ(v, 0.0f);
}

TEST(FeatureNetForward, IdenticalImagesGiveBitwiseIdenticalFeatures) {
  Rng rng(4);
  auto net = FeatureNet::init(small_spec(16), rng);
  Tensor image = oracle::random_tensor(rng, {1, 31, 31}, 0, 1);
  Tensor copy(image.shape(), std::vector<float>(image.data().begin(), image.data().end()));
  const Tensor a = net.extract(image), b = net.extract(copy);
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)));
}

TEST(FeatureNetForward, BatchRowsMatchSingleImages) {
  Rng rng(5);
  auto net = FeatureNet::init(small_spec(), rng);
  std::vector<Tensor> images{oracle::random_tensor(rng, {1, 31, 31}), oracle::random_tensor(rng, {1, 31, 31})};
  const Tensor batch = net.forward(stack_images(images));
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor single = net.extract(images[i]);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(batch.at(i * 5 + j), single.at(j), 1e-5f);
  }
}

TEST(FeatureNetForward, SameSeedSameInit) {
  Rng a(9), b(9);
  auto x = FeatureNet::init(small_spec(), a), y = FeatureNet::init(small_spec(), b);
  for (std::size_t i = 0; i < x.params().size(); ++i) {
    EXPECT_TRUE(std::equal(x.params()[i].data().begin(), x.params()[i].data().end(), y.params()[i].data().begin()));
  }
}

TEST(FeatureNetForward, InitWithinFanInBound) {
  Rng rng(6);
  auto net = FeatureNet::init(FeatureNetSpec{}, rng);
  const auto shapes = FeatureNet::param_shapes(FeatureNetSpec{});
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::size_t fan_in = i < 8 ? shapes[i & ~1u][1] * 9 : shapes[8][0];
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (float v : net.params()[i].data()) EXPECT_LE(std::abs(v), bound);
  }
}

TEST(FeatureNetCheckpoint, RoundTripPreservesGeometryAndValues) {
  Rng rng(7);
  auto net = FeatureNet::init(small_spec(12), rng);
  const auto path = std::filesystem::temp_directory_path() / "mmq_test_feature_net.ckpt";
  write_checkpoint(path, net.to_checkpoint({{"round", "3"}}));
  const auto ckpt = read_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(ckpt.meta_value("round"), "3");
  auto back = FeatureNet::from_checkpoint(ckpt);
  EXPECT_EQ(back.spec(), net.spec());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    EXPECT_EQ(back.params()[i].shape(), net.params()[i].shape());
    EXPECT_TRUE(std::equal(back.params()[i].data().begin(), back.params()[i].data().end(),
                           net.params()[i].data().begin()));
  }
}

TEST(FeatureNetCheckpoint, MissingParameterIsDataError) {
  Rng rng(8);
  auto ckpt = FeatureNet::init(small_spec(), rng).to_checkpoint();
  ckpt.params.pop_back();
  EXPECT_THROW(FeatureNet::from_checkpoint(ckpt), DataError);
}

TEST(FeatureNetCheckpoint, WrongShapeIsDimensionError) {
  Rng rng(8);
  auto ckpt = FeatureNet::init(small_spec(), rng).to_checkpoint();
  ckpt.params[0].value = Tensor::zeros({64, 1, 3, 2});
  EXPECT_THROW(FeatureNet::from_checkpoint(ckpt), DimensionError);
}

TEST(Classify, ZeroLogitsUniformAndLabelZero) {
  auto c = classify(ClassifierHead::zeros(4, 5), Tensor::zeros({4}));
  EXPECT_EQ(c.label, 0u);
  for (float p : c.probs) EXPECT_NEAR(p, 0.2f, 1e-7f);
}

TEST(Classify, DominantLogitWins) {
  auto head = ClassifierHead::zeros(2, 3);
  head.bias = Tensor({3}, {0.0f, 0.0f, 5.0f});
  EXPECT_EQ(classify(head, Tensor({2}, {0.3f, -0.2f})).label, 2u);
}

TEST(Classify, TieGoesToLowestIndex) {
  auto head = ClassifierHead::zeros(1, 4);
  head.bias = Tensor({4}, {0.0f, 2.0f, 2.0f, 1.0f});
  EXPECT_EQ(classify(head, Tensor({1}, {1.0f})).label, 1u);
}

TEST(Classify, WidthMismatchRejected) {
  EXPECT_THROW(classify(ClassifierHead::zeros(4, 3), Tensor::zeros({5})), DimensionError);
}

TEST(Classify, MatchesIndependentSoftmax) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto head = ClassifierHead::init(6, 4, rng);
    Tensor f = oracle::random_tensor(rng, {6}, -3, 3);
    std::vector<float> logits(4);
    for (std::size_t k = 0; k < 4; ++k) {
      double z = head.bias.at(k);
      for (std::size_t i = 0; i < 6; ++i) z += static_cast<double>(f.at(i)) * head.weight.at(i * 4 + k);
      logits[k] = static_cast<float>(z);
    }
    const auto expect = oracle::softmax(logits);
    const auto got = classify(head, f);
    EXPECT_NEAR(std::accumulate(got.probs.begin(), got.probs.end(), 0.0), 1.0, 1e-5);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_GE(got.probs[k], 0.0f);
      EXPECT_NEAR(got.probs[k], expect[k], 1e-6);
    }
    EXPECT_EQ(got.label, static_cast<std::size_t>(std::max_element(expect.begin(), expect.end()) - expect.begin()));
  }
}

// Directional derivatives of the composed extractor along random directions,
// with biases that keep every unit clear of its ReLU kink.
class ExtractorGradient : public ::testing::TestWithParam<int> {};

TEST_P(ExtractorGradient, DirectionalDerivativesMatchFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(500 + GetParam()));
  EXPECT_LT(oracle::extractor_directional_error(rng), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Randomized, ExtractorGradient, ::testing::Range(0, 4));

}  // namespace
