#include <gtest/gtest.h>

#include <cmath>

#include "mmq/maml.hpp"
#include "mmq/synthetic.hpp"
#include "oracles.hpp"
#include "toy_learners.hpp"

namespace {

using namespace mmq;
using namespace oracle;

using QTask = MetaTask<Quadratic>;

TEST(InnerAdapt, SquareStepFromOne) {
  Tensor theta = Tensor::scalar(1.0f);
  auto adapted = inner_adapt(QuadraticLearner{}, std::span(&theta, 1), Quadratic{{1.0f}, {0.0f}}, 0.01f);
  EXPECT_NEAR(adapted[0].item(), 0.98f, 1e-7f);
  EXPECT_EQ(theta.item(), 1.0f);
}

TEST(InnerAdapt, ZeroGradientKeepsTheta) {
  Tensor theta = Tensor::scalar(1.0f);
  auto adapted = inner_adapt(QuadraticLearner{}, std::span(&theta, 1), shifted_square(1.0f), 0.5f);
  EXPECT_EQ(adapted[0].item(), 1.0f);
}

TEST(InnerAdapt, EmptyTrainingSetIsContractError) {
  Tensor theta = Tensor::scalar(1.0f);
  EXPECT_THROW(inner_adapt(QuadraticLearner{}, std::span(&theta, 1), Quadratic{}, 0.1f), ContractError);
}

TEST(InnerAdapt, ExactModeNeedsATape) {
  Tensor theta = Tensor::scalar(1.0f);
  EXPECT_THROW(inner_adapt(QuadraticLearner{}, std::span(&theta, 1), shifted_square(0), 0.1f, 1, true),
               ContractError);
}

TEST(MetaUpdate, ExactScalarQuadratic) {
  const Tensor theta = Tensor::scalar(0.0f);
  const std::vector<QTask> tasks{{shifted_square(1.0f), shifted_square(1.0f)}};
  auto step = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.25f, 0.1f,
                          GradientMode::exact);
  EXPECT_NEAR(step.theta[0].item(), 0.05f, 1e-6f);
  EXPECT_NEAR(step.meta_loss, 0.25f - 1.0f, 1e-6f);  // (0.5 - 1)^2 without the constant
  EXPECT_EQ(theta.item(), 0.0f);
}

TEST(MetaUpdate, FirstOrderScalarQuadratic) {
  const Tensor theta = Tensor::scalar(0.0f);
  const std::vector<QTask> tasks{{shifted_square(1.0f), shifted_square(1.0f)}};
  auto step = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.25f, 0.1f,
                          GradientMode::first_order);
  EXPECT_NEAR(step.theta[0].item(), 0.1f, 1e-6f);
}

TEST(MetaUpdate, TaskLossesAreSummed) {
  const Tensor theta = Tensor::scalar(0.0f);
  const std::vector<QTask> one{{shifted_square(1.0f), shifted_square(1.0f)}};
  const std::vector<QTask> two{one[0], one[0]};
  auto a = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(one), 0.25f, 0.1f,
                       GradientMode::exact);
  auto b = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(two), 0.25f, 0.1f,
                       GradientMode::exact);
  EXPECT_NEAR(b.theta[0].item(), 2.0f * a.theta[0].item(), 1e-6f);
}

TEST(MetaUpdate, EmptyEpisodeOrValidationIsContractError) {
  const Tensor theta = Tensor::scalar(0.0f);
  const std::vector<QTask> none;
  const std::vector<QTask> empty_val{{shifted_square(1.0f), Quadratic{}}};
  for (auto mode : {GradientMode::exact, GradientMode::first_order}) {
    EXPECT_THROW(meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(none), 0.1f, 0.1f, mode),
                 ContractError);
    EXPECT_THROW(
        meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(empty_val), 0.1f, 0.1f, mode),
        ContractError);
  }
}

std::vector<QTask> random_quadratic_tasks(Rng& rng, std::size_t dims, bool linear_train) {
  std::vector<QTask> tasks;
  for (std::size_t t = 0; t < 3; ++t) {
    QTask task;
    for (std::size_t j = 0; j < dims; ++j) {
      task.train.a.push_back(linear_train ? 0.0f : rng.uniform(0.1f, 2.0f));
      task.train.b.push_back(rng.uniform(-1, 1));
      task.val.a.push_back(rng.uniform(0.1f, 2.0f));
      task.val.b.push_back(rng.uniform(-1, 1));
    }
    tasks.push_back(task);
  }
  return tasks;
}

TEST(MetaUpdate, ZeroInnerRateIsPlainGradientDescentInBothModes) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto tasks = random_quadratic_tasks(rng, 2, false);
    const Tensor theta = oracle::random_tensor(rng, {2});
    std::vector<double> expect(2);
    for (std::size_t j = 0; j < 2; ++j) {
      double g = 0.0;
      for (const auto& t : tasks) g += 2.0 * t.val.a[j] * theta.at(j) + t.val.b[j];
      expect[j] = theta.at(j) - 0.1 * g;
    }
    for (auto mode : {GradientMode::exact, GradientMode::first_order}) {
      auto step = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.0f, 0.1f, mode);
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(step.theta[0].at(j), expect[j], 1e-6);
    }
  }
}

TEST(MetaUpdate, ModesAgreeWhenInnerLossIsLinear) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto tasks = random_quadratic_tasks(rng, 3, true);
    const Tensor theta = oracle::random_tensor(rng, {3});
    auto exact = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.3f, 0.1f,
                             GradientMode::exact);
    auto first = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.3f, 0.1f,
                             GradientMode::first_order);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(exact.theta[0].at(j), first.theta[0].at(j), 1e-6);
  }
}

TEST(MetaUpdate, ClipBoundsTheOuterStep) {
  const Tensor theta = Tensor::scalar(0.0f);
  const std::vector<QTask> tasks{{shifted_square(1.0f), shifted_square(10.0f)}};
  auto step = meta_update(QuadraticLearner{}, std::span(&theta, 1), std::span<const QTask>(tasks), 0.25f, 0.1f,
                          GradientMode::first_order, 1, 0.5f);
  EXPECT_NEAR(step.theta[0].item(), 0.05f, 1e-6f);
}

TEST(ClipByGlobalNorm, RescalesOnlyAboveTheBound) {
  ParamList g{Tensor({2}, {3.0f, 0.0f}), Tensor({1}, {4.0f})};
  auto clipped = clip_by_global_norm(g, 1.0f);
  EXPECT_NEAR(clipped[0].at(0), 0.6f, 1e-6f);
  EXPECT_NEAR(clipped[1].at(0), 0.8f, 1e-6f);
  auto kept = clip_by_global_norm(g, 10.0f);
  EXPECT_EQ(kept[1].at(0), 4.0f);
  EXPECT_EQ(clip_by_global_norm(g, 0.0f)[0].at(0), 3.0f);
}

class BilevelGradient : public ::testing::TestWithParam<int> {};

TEST_P(BilevelGradient, ExactOuterGradientMatchesFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(100 + GetParam()));
  const std::size_t steps = 1 + static_cast<std::size_t>(GetParam() % 2);
  std::vector<MetaTask<Scalar2>> tasks(2 + rng.index(3));
  for (auto& t : tasks)
    for (Scalar2* b : {&t.train, &t.val})
      for (int j = 0; j < 6; ++j) {
        b->x.push_back(rng.uniform(-2, 2));
        b->y.push_back(static_cast<int>(rng.index(2)));
      }
  const Tensor theta = oracle::random_tensor(rng, {1, 2});
  const double alpha = 0.5;
  auto step = meta_update(Softmax2Learner{}, std::span(&theta, 1), std::span<const MetaTask<Scalar2>>(tasks),
                          static_cast<float>(alpha), 1.0f, GradientMode::exact, steps);
  double numeric[2], worst = 0.0, scale = 0.0;
  for (int k = 0; k < 2; ++k) {
    double hi[2] = {theta.at(0), theta.at(1)}, lo[2] = {theta.at(0), theta.at(1)};
    hi[k] += 1e-3;
    lo[k] -= 1e-3;
    numeric[k] = (bilevel(hi, tasks, alpha, steps) - bilevel(lo, tasks, alpha, steps)) / 2e-3;
    scale = std::max(scale, std::abs(numeric[k]));
  }
  for (int k = 0; k < 2; ++k) {
    const double analytic = static_cast<double>(theta.at(k)) - step.theta[0].at(k);
    worst = std::max(worst, std::abs(analytic - numeric[k]));
  }
  EXPECT_LT(worst / scale, 1e-4) << "numeric (" << numeric[0] << ", " << numeric[1] << ")";
}

INSTANTIATE_TEST_SUITE_P(Randomized, BilevelGradient, ::testing::Range(0, 10));

// Conv learner: with the per-task head starting at zero, one inner step
// leaves the trunk alone and moves the head by -alpha times its gradient.
TEST(ConvInnerAdapt, HeadStepMatchesFiniteDifferenceGradient) {
  Rng rng(3);
  const FeatureNetSpec spec{1, 31, 6};
  const ConvLearner learner(spec);
  const auto net = FeatureNet::init(spec, rng, TrainConfig{}.init_gain);
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (int i = 0; i < 9; ++i) {
    images.push_back(oracle::random_tensor(rng, {1, 31, 31}, 0, 1));
    labels.push_back(i % 3);
  }
  const ImageBatch batch{stack_images(images), labels, 3};
  const float alpha = 0.1f;
  const ParamList adapted = inner_adapt(learner, net.params(), batch, alpha);
  ASSERT_EQ(adapted.size(), FeatureNet::kParamCount + 2);
  for (std::size_t i = 0; i < FeatureNet::kParamCount; ++i) {
    EXPECT_TRUE(std::equal(adapted[i].data().begin(), adapted[i].data().end(), net.params()[i].data().begin()));
  }

  auto f = [&](const ParamList& head) {
    ParamList p = net.params();
    p.insert(p.end(), head.begin(), head.end());
    return learner.loss(p, batch);
  };
  const ParamList zero_head{Tensor::zeros({6, 3}), Tensor::zeros({3})};
  const std::vector<float> one{1.0f};
  const auto numeric = oracle::numeric_grad(f, zero_head, one);
  std::vector<Tensor> implied;
  for (std::size_t i = 0; i < 2; ++i) implied.push_back(scale(adapted[FeatureNet::kParamCount + i], -1.0f / alpha));
  EXPECT_LT(oracle::max_relative_error(implied, numeric), 1e-3);
}

TEST(ConvInnerAdapt, SecondStepMovesTheTrunk) {
  Rng rng(4);
  const FeatureNetSpec spec{1, 31, 4};
  const ConvLearner learner(spec);
  const auto net = FeatureNet::init(spec, rng, 2.0f);
  std::vector<Tensor> images{oracle::random_tensor(rng, {1, 31, 31}, 0, 1), oracle::random_tensor(rng, {1, 31, 31}, 0, 1)};
  const ImageBatch batch{stack_images(images), {0, 1}, 2};
  const ParamList adapted = inner_adapt(learner, net.params(), batch, 0.5f, 2);
  EXPECT_FALSE(std::equal(adapted[8].data().begin(), adapted[8].data().end(), net.params()[8].data().begin()));
}

SyntheticData small_data(std::uint64_t seed, std::size_t per_class = 12) {
  GeneratorSpec g;
  g.image_size = 31;
  g.samples_per_class = per_class;
  g.meta_fraction = 1.0;
  g.downstream_train_per_class = 1;
  g.downstream_test_per_class = 1;
  g.seed = seed;
  return generate(g);
}

TEST(MetaTrain, ZeroIterationsReturnsInitialization) {
  const auto data = small_data(1);
  TrainConfig cfg;
  cfg.iterations = 0;
  const FeatureNetSpec spec{1, 31, 8};
  auto model = meta_train(data.pool, cfg, spec, 42, 3);
  Rng init = Rng::stream(42, "init", 3);
  auto expect = FeatureNet::init(spec, init, cfg.init_gain);
  for (std::size_t i = 0; i < expect.params().size(); ++i) {
    EXPECT_TRUE(std::equal(model.net.params()[i].data().begin(), model.net.params()[i].data().end(),
                           expect.params()[i].data().begin()));
  }
  EXPECT_TRUE(model.log.empty());
  EXPECT_EQ(model.round, 3u);
}

TEST(MetaTrain, SameSeedBitIdentical) {
  const auto data = small_data(2);
  TrainConfig cfg;
  cfg.iterations = 3;
  cfg.inner_lr = 0.5f;
  cfg.meta_lr = 0.1f;
  const FeatureNetSpec spec{1, 31, 8};
  auto a = meta_train(data.pool, cfg, spec, 7), b = meta_train(data.pool, cfg, spec, 7);
  EXPECT_EQ(encode_checkpoint(a.net.to_checkpoint()), encode_checkpoint(b.net.to_checkpoint()));
  EXPECT_EQ(encode_metrics(a, "h"), encode_metrics(b, "h"));
  auto c = meta_train(data.pool, cfg, spec, 7, 1);
  EXPECT_NE(encode_checkpoint(a.net.to_checkpoint()), encode_checkpoint(c.net.to_checkpoint()));
}

TEST(MetaTrain, MetricsRecordOneLinePerIteration) {
  const auto data = small_data(3);
  TrainConfig cfg;
  cfg.iterations = 2;
  auto model = meta_train(data.pool, cfg, {1, 31, 4}, 1);
  const auto rows = io::lines(encode_metrics(model, "abc"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "# mmq-metrics v1\tround=0\tconfig_hash=abc");
  EXPECT_EQ(io::split(rows[2], '\t').size(), 3u);
  EXPECT_EQ(io::split(io::split(rows[2], '\t')[1], ',').size(), cfg.protocol.tasks);
}

TEST(MetaTrain, CapacityErrorPropagates) {
  const auto data = small_data(4, 4);
  TrainConfig cfg;
  cfg.iterations = 1;
  EXPECT_THROW(meta_train(data.pool, cfg, {1, 31, 4}, 1), CapacityError);
}

// 200 iterations on the 9-class synthetic pool; adapted 3-way accuracy on a
// fresh pool must clear chance (1/3) by at least 0.2.
TEST(MetaTrain, LearnsBeyondChance) {
  GeneratorSpec g;
  g.image_size = 32;
  g.samples_per_class = 20;
  g.meta_fraction = 1.0;
  g.downstream_train_per_class = 1;
  g.downstream_test_per_class = 1;
  g.seed = 5;
  const auto train = generate(g);
  g.seed = 6;
  const auto eval = generate(g);
  TrainConfig cfg;
  cfg.inner_lr = 0.5f;
  cfg.meta_lr = 0.1f;
  cfg.grad_clip = 1.0f;
  const FeatureNetSpec spec{1, 32, 64};
  auto model = meta_train(train.pool, cfg, spec, 11);
  Rng rng(12);
  const double acc = adapted_accuracy(model.net, eval.pool, cfg.protocol, cfg.inner_lr, 1, 20, rng);
  Rng rng0(12);
  auto untrained = meta_train(train.pool, TrainConfig{.iterations = 0}, spec, 11);
  const double before = adapted_accuracy(untrained.net, eval.pool, cfg.protocol, cfg.inner_lr, 1, 20, rng0);
  EXPECT_GT(acc, 1.0 / 3.0 + 0.2) << "untrained " << before;

  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    early += model.log[i].meta_loss;
    late += model.log[model.log.size() - 20 + i].meta_loss;
  }
  EXPECT_LT(late, early);
}

}  // namespace
