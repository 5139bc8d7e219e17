#pragma once

#include <concepts>
#include <span>
#include <string>
#include <vector>

#include "mmq/autodiff.hpp"
#include "mmq/data_pool.hpp"
#include "mmq/feature_net.hpp"

namespace mmq {

// A learner turns meta-parameters into per-task parameters and scores them on
// a batch. The MAML routines below are written against this and nothing else,
// so the same code drives both the conv net and small closed-form models.
template <class L>
concept TaskLearner = requires(const L& l, std::span<const Tensor> params,
                               const typename L::Batch& batch) {
  { l.task_params(params, batch) } -> std::convertible_to<ParamList>;
  { l.loss(params, batch) } -> std::convertible_to<Tensor>;
  { l.batch_size(batch) } -> std::convertible_to<std::size_t>;
};

enum class GradientMode { exact, first_order };

inline std::string to_string(GradientMode m) { return m == GradientMode::exact ? "exact" : "first_order"; }

inline GradientMode parse_gradient_mode(const std::string& s) {
  if (s == "exact") return GradientMode::exact;
  if (s == "first_order") return GradientMode::first_order;
  throw ConfigError("gradient_mode must be 'exact' or 'first_order', got '" + s + "'");
}

// theta' = theta - alpha * grad L_train(theta), repeated `steps` times.
// theta itself is never modified. With create_graph the update is recorded on
// the active tape so an outer gradient can flow through it.
template <TaskLearner L>
ParamList inner_adapt(const L& learner, std::span<const Tensor> theta,
                      const typename L::Batch& train, float alpha, std::size_t steps = 1,
                      bool create_graph = false) {
  if (learner.batch_size(train) == 0) throw ContractError("inner_adapt: empty task training set");
  if (create_graph) {
    if (!Tape::active()) throw ContractError("inner_adapt: exact mode needs an active tape");
    ParamList current = learner.task_params(theta, train);
    for (std::size_t s = 0; s < steps; ++s) {
      Tensor loss = learner.loss(current, train);
      auto g = grad(loss, current, /*create_graph=*/true);
      for (std::size_t i = 0; i < current.size(); ++i) current[i] = sub(current[i], scale(g[i], alpha));
    }
    return current;
  }
  ParamList current = learner.task_params(theta, train);
  for (std::size_t s = 0; s < steps; ++s) {
    Tape tape;
    ParamList leaves;
    for (const auto& p : current) leaves.push_back(p.detach(true));
    Tensor loss = learner.loss(leaves, train);
    auto g = grad(loss, leaves);
    current = sgd_step(leaves, g, alpha);
  }
  for (auto& p : current) p = p.detach(false);
  return current;
}

// Rescales the whole gradient list so its joint L2 norm is at most max_norm.
// max_norm <= 0 leaves it untouched.
inline ParamList clip_by_global_norm(ParamList grads, float max_norm) {
  if (max_norm <= 0.0f) return grads;
  double sq = 0.0;
  for (const auto& g : grads)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return grads;
  const auto factor = static_cast<float>(max_norm / norm);
  for (auto& g : grads) g = scale(g.detach(), factor);
  return grads;
}

template <class Batch>
struct MetaTask {
  Batch train;
  Batch val;
};

struct MetaStep {
  ParamList theta;
  std::vector<float> task_losses;  // validation loss of each adapted task
  float meta_loss = 0.0f;          // their sum
};

// One outer update: theta - beta * grad_theta sum_i L_val_i(theta'_i).
// Exact mode differentiates through the inner update; first-order mode treats
// d theta'_i / d theta as the identity.
template <TaskLearner L>
MetaStep meta_update(const L& learner, std::span<const Tensor> theta,
                     std::span<const MetaTask<typename L::Batch>> tasks, float alpha, float beta,
                     GradientMode mode, std::size_t inner_steps = 1, float clip_norm = 0.0f) {
  if (tasks.empty()) throw ContractError("meta_update: episode has no tasks");
  for (const auto& t : tasks) {
    if (learner.batch_size(t.val) == 0) throw ContractError("meta_update: empty validation set");
  }
  MetaStep step;
  if (mode == GradientMode::exact) {
    Tape tape;
    ParamList leaves;
    for (const auto& p : theta) leaves.push_back(p.detach(true));
    Tensor total;
    for (const auto& t : tasks) {
      ParamList adapted = inner_adapt(learner, leaves, t.train, alpha, inner_steps, true);
      Tensor loss = learner.loss(adapted, t.val);
      step.task_losses.push_back(loss.item());
      total = total.defined() ? add(total, loss) : loss;
    }
    step.meta_loss = total.item();
    auto g = grad(total, leaves);
    step.theta = sgd_step(theta, clip_by_global_norm(std::move(g), clip_norm), beta);
  } else {
    std::vector<std::vector<float>> acc;
    for (const auto& p : theta) acc.emplace_back(p.numel(), 0.0f);
    for (const auto& t : tasks) {
      ParamList adapted = inner_adapt(learner, theta, t.train, alpha, inner_steps, false);
      Tape tape;
      ParamList leaves;
      for (const auto& p : adapted) leaves.push_back(p.detach(true));
      Tensor loss = learner.loss(leaves, t.val);
      step.task_losses.push_back(loss.item());
      step.meta_loss += loss.item();
      auto g = grad(loss, leaves);
      for (std::size_t i = 0; i < theta.size(); ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += g[i].data()[j];
    }
    ParamList grads;
    for (std::size_t i = 0; i < theta.size(); ++i) grads.emplace_back(theta[i].shape(), std::move(acc[i]));
    step.theta = sgd_step(theta, clip_by_global_norm(std::move(grads), clip_norm), beta);
  }
  for (auto& p : step.theta) p = p.detach(false);
  return step;
}

// ---------------------------------------------------------------------------
// Conv-net learner: feature trunk plus a classifier head that starts from zero
// for every task, so only the trunk is meta-learned.

struct ImageBatch {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  std::size_t num_classes = 0;
};

inline ImageBatch make_batch(const DataPool& pool, std::span<const std::size_t> indices,
                             std::span<const int> labels, std::size_t num_classes) {
  std::vector<Tensor> images;
  images.reserve(indices.size());
  for (std::size_t i : indices) images.push_back(pool[i].image);
  return {stack_images(images), std::vector<int>(labels.begin(), labels.end()), num_classes};
}

class ConvLearner {
 public:
  using Batch = ImageBatch;

  explicit ConvLearner(FeatureNetSpec spec) : spec_(spec) { spec_.validate(); }

  const FeatureNetSpec& spec() const noexcept { return spec_; }

  std::size_t batch_size(const Batch& b) const { return b.labels.size(); }

  ParamList task_params(std::span<const Tensor> theta, const Batch& b) const {
    if (theta.size() != FeatureNet::kParamCount) {
      throw DimensionError("conv learner expects " + std::to_string(FeatureNet::kParamCount) +
                           " trunk tensors, got " + std::to_string(theta.size()));
    }
    ParamList p(theta.begin(), theta.end());
    p.push_back(Tensor::zeros({spec_.feature_dim, b.num_classes}, true));
    p.push_back(Tensor::zeros({b.num_classes}, true));
    return p;
  }

  Tensor features(std::span<const Tensor> params, const Tensor& images) const {
    return FeatureNet::forward(spec_, params.first(FeatureNet::kParamCount), images);
  }

  Tensor logits(std::span<const Tensor> params, const Tensor& images) const {
    return linear(features(params, images), params[FeatureNet::kParamCount],
                  params[FeatureNet::kParamCount + 1]);
  }

  Tensor loss(std::span<const Tensor> params, const Batch& b) const {
    return softmax_cross_entropy(logits(params, b.images), b.labels).loss;
  }

 private:
  FeatureNetSpec spec_;
};

inline MetaTask<ImageBatch> make_meta_task(const DataPool& pool, const Task& task) {
  const std::size_t k = task.classes.size();
  return {make_batch(pool, task.train, task.train_labels, k),
          make_batch(pool, task.val, task.val_labels, k)};
}

// ---------------------------------------------------------------------------
// Meta-training loop.

struct TrainConfig {
  float inner_lr = 0.01f;   // alpha
  float meta_lr = 0.001f;   // beta
  std::size_t iterations = 200;
  std::size_t inner_steps = 1;
  float init_gain = 2.4494897f;  // sqrt(6); 1 gives the plain 1/sqrt(fan_in) bound
  float grad_clip = 0.0f;  // global-norm clip on the outer gradient; 0 disables
  GradientMode mode = GradientMode::first_order;
  EpisodeProtocol protocol = EpisodeProtocol::vqa_rad_like();

  void validate() const {
    if (!(inner_lr > 0.0f)) throw ConfigError("train.inner_lr must be > 0");
    if (!(meta_lr > 0.0f)) throw ConfigError("train.meta_lr must be > 0");
    if (inner_steps == 0) throw ConfigError("train.inner_steps must be >= 1");
    protocol.validate();
  }
};

struct IterationLog {
  std::size_t iteration = 0;
  std::vector<float> task_losses;
  float meta_loss = 0.0f;
};

struct MetaModel {
  FeatureNet net;
  std::size_t round = 0;
  std::vector<IterationLog> log;
};

// Trains a fresh meta-model on the meta split. Initialization and episodes
// come from the (seed, round) sub-streams, so round r is reproducible on its
// own.
inline MetaModel meta_train(const DataPool& pool, const TrainConfig& config,
                            const FeatureNetSpec& spec, std::uint64_t seed, std::size_t round = 0) {
  config.validate();
  Rng init = Rng::stream(seed, "init", round);
  Rng episodes = Rng::stream(seed, "episodes", round);
  ConvLearner learner(spec);
  MetaModel model{FeatureNet::init(spec, init, config.init_gain), round, {}};
  ParamList theta = model.net.params();
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Episode episode = sample_episode(pool, config.protocol, episodes);
    std::vector<MetaTask<ImageBatch>> tasks;
    for (const auto& t : episode.tasks) tasks.push_back(make_meta_task(pool, t));
    MetaStep step = meta_update(learner, theta, std::span<const MetaTask<ImageBatch>>(tasks),
                                config.inner_lr, config.meta_lr, config.mode, config.inner_steps,
                                config.grad_clip);
    theta = std::move(step.theta);
    model.log.push_back({it, std::move(step.task_losses), step.meta_loss});
  }
  model.net = FeatureNet(spec, std::move(theta));
  return model;
}

// Mean validation accuracy of single-task adaptation over `episodes` fresh
// episodes drawn from the pool.
inline double adapted_accuracy(const FeatureNet& net, const DataPool& pool,
                               const EpisodeProtocol& protocol, float inner_lr,
                               std::size_t inner_steps, std::size_t episodes, Rng& rng) {
  ConvLearner learner(net.spec());
  std::size_t correct = 0, total = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    for (const auto& task : sample_episode(pool, protocol, rng).tasks) {
      auto mt = make_meta_task(pool, task);
      ParamList adapted = inner_adapt(learner, net.params(), mt.train, inner_lr, inner_steps);
      NoGradGuard no_grad;
      Tensor logits = learner.logits(adapted, mt.val.images);
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < mt.val.labels.size(); ++i) {
        const auto row = logits.data().subspan(i * k, k);
        if (static_cast<int>(argmax(row)) == mt.val.labels[i]) ++correct;
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

inline std::string encode_metrics(const MetaModel& model, const std::string& config_hash) {
  std::string out = "# mmq-metrics v1\tround=" + std::to_string(model.round) +
                    "\tconfig_hash=" + config_hash + "\n# iteration\ttask_losses\tmeta_loss\n";
  for (const auto& rec : model.log) {
    out += std::to_string(rec.iteration) + "\t";
    for (std::size_t i = 0; i < rec.task_losses.size(); ++i) {
      if (i) out += ",";
      out += io::format_float(rec.task_losses[i]);
    }
    out += "\t" + io::format_float(rec.meta_loss) + "\n";
  }
  return out;
}

}  // namespace mmq
