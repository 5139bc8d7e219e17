#pragma once

// Answer classifier over [f_v, context], where f_v concatenates the features
// of n meta-model trunks and the context is a one-hot question type.

#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmq/autodiff.hpp"
#include "mmq/feature_net.hpp"
#include "mmq/synthetic.hpp"

namespace mmq {

struct DownstreamConfig {
  std::size_t epochs = 30;
  float lr = 0.05f;
  std::size_t batch_size = 32;
  bool freeze = false;  // true keeps the trunks fixed and trains only the classifier

  void validate() const {
    if (!(lr > 0.0f)) throw ConfigError("downstream.lr must be > 0");
    if (batch_size == 0) throw ConfigError("downstream.batch_size must be >= 1");
  }
};

class DownstreamModel {
 public:
  DownstreamModel(std::vector<FeatureNet> trunks, std::size_t context_dim, std::size_t num_answers)
      : trunks_(std::move(trunks)), context_dim_(context_dim), num_answers_(num_answers) {
    if (trunks_.empty()) throw ContractError("downstream model needs at least one trunk");
    if (context_dim_ == 0 || num_answers_ < 2) throw DimensionError("downstream model needs context and >= 2 answers");
    for (const auto& t : trunks_) {
      if (!(t.spec() == trunks_[0].spec())) throw DimensionError("downstream trunks must share geometry");
    }
    weight_ = Tensor::zeros({input_width(), num_answers_});
    bias_ = Tensor::zeros({num_answers_});
  }

  std::size_t n() const noexcept { return trunks_.size(); }
  std::size_t fused_width() const { return trunks_.size() * trunks_[0].spec().feature_dim; }
  std::size_t input_width() const { return fused_width() + context_dim_; }
  std::size_t context_dim() const noexcept { return context_dim_; }
  std::size_t num_answers() const noexcept { return num_answers_; }
  const std::vector<FeatureNet>& trunks() const noexcept { return trunks_; }
  const Tensor& weight() const noexcept { return weight_; }
  const Tensor& bias() const noexcept { return bias_; }

  std::size_t parameter_count() const {
    std::size_t total = weight_.numel() + bias_.numel();
    for (const auto& t : trunks_) total += t.parameter_count();
    return total;
  }

  // All trainable tensors: every trunk's parameters, then weight and bias.
  ParamList params() const {
    ParamList p;
    for (const auto& t : trunks_) p.insert(p.end(), t.params().begin(), t.params().end());
    p.push_back(weight_);
    p.push_back(bias_);
    return p;
  }

  void set_params(ParamList p) {
    const std::size_t k = FeatureNet::kParamCount;
    if (p.size() != trunks_.size() * k + 2) throw DimensionError("downstream set_params: wrong tensor count");
    for (std::size_t i = 0; i < trunks_.size(); ++i) {
      trunks_[i] = FeatureNet(trunks_[i].spec(), ParamList(p.begin() + static_cast<std::ptrdiff_t>(i * k),
                                                           p.begin() + static_cast<std::ptrdiff_t>((i + 1) * k)));
    }
    weight_ = p[p.size() - 2];
    bias_ = p[p.size() - 1];
  }

  // f_v for a [N,C,H,W] batch using the given trunk parameters.
  Tensor fused_features(std::span<const Tensor> params, const Tensor& images) const {
    const std::size_t k = FeatureNet::kParamCount;
    std::vector<Tensor> blocks;
    for (std::size_t i = 0; i < trunks_.size(); ++i) {
      blocks.push_back(FeatureNet::forward(trunks_[i].spec(), params.subspan(i * k, k), images));
    }
    return blocks.size() == 1 ? blocks[0] : concat_cols(blocks);
  }

  Tensor fused_features(const Tensor& images) const { return fused_features(params(), images); }

  Tensor logits_from_fused(const Tensor& fused, std::span<const int> contexts, const Tensor& weight,
                           const Tensor& bias) const {
    for (int c : contexts) {
      if (c < 0 || static_cast<std::size_t>(c) >= context_dim_) {
        throw DimensionError("context index " + std::to_string(c) + " outside [0, " +
                             std::to_string(context_dim_) + ")");
      }
    }
    Tensor input = concat_cols(std::vector<Tensor>{fused, one_hot(contexts, context_dim_)});
    return linear(input, weight, bias);
  }

  // Answer probabilities for one [C,H,W] image and a context vector of
  // length context_dim.
  std::vector<float> forward(const Tensor& image, std::span<const float> context) const {
    if (context.size() != context_dim_) {
      throw DimensionError("context has length " + std::to_string(context.size()) + ", expected " +
                           std::to_string(context_dim_));
    }
    if (image.rank() != 3) throw DimensionError("downstream forward expects a [C,H,W] image");
    NoGradGuard no_grad;
    Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor fused = fused_features(batch);
    Tensor input = concat_cols(std::vector<Tensor>{fused, Tensor({1, context_dim_}, {context.begin(), context.end()})});
    Tensor logits = linear(input, weight_, bias_);
    return detail::softmax_rows(logits.data(), 1, num_answers_);
  }

  std::vector<float> forward(const Tensor& image, int context) const {
    std::vector<float> ctx(context_dim_, 0.0f);
    if (context < 0 || static_cast<std::size_t>(context) >= context_dim_) {
      throw DimensionError("context index out of range");
    }
    ctx[static_cast<std::size_t>(context)] = 1.0f;
    return forward(image, ctx);
  }

 private:
  std::vector<FeatureNet> trunks_;
  std::size_t context_dim_;
  std::size_t num_answers_;
  Tensor weight_, bias_;
};

struct FinetuneResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<float> epoch_losses;
};

namespace detail {

// Groups examples by shared image so each image is encoded once.
struct ImageIndex {
  std::vector<Tensor> images;
  std::vector<std::size_t> of_example;
};

inline ImageIndex index_images(std::span<const DownstreamExample> set) {
  ImageIndex idx;
  std::map<const TensorImpl*, std::size_t> seen;
  for (const auto& ex : set) {
    auto [it, inserted] = seen.emplace(ex.image.impl(), idx.images.size());
    if (inserted) idx.images.push_back(ex.image);
    idx.of_example.push_back(it->second);
  }
  return idx;
}

inline std::vector<float> fused_rows(const DownstreamModel& model, std::span<const Tensor> images,
                                     std::size_t batch = 64) {
  NoGradGuard no_grad;
  std::vector<float> rows;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t stop = std::min(images.size(), start + batch);
    Tensor f = model.fused_features(stack_images(images.subspan(start, stop - start)));
    rows.insert(rows.end(), f.data().begin(), f.data().end());
  }
  return rows;
}

inline Tensor gather_rows(const std::vector<float>& rows, std::size_t width, std::span<const std::size_t> which) {
  std::vector<float> out;
  out.reserve(which.size() * width);
  for (std::size_t r : which) {
    out.insert(out.end(), rows.begin() + static_cast<std::ptrdiff_t>(r * width),
               rows.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
  }
  return Tensor({which.size(), width}, std::move(out));
}

}  // namespace detail

inline double downstream_accuracy(const DownstreamModel& model, std::span<const DownstreamExample> set) {
  if (set.empty()) throw ContractError("downstream accuracy of an empty set");
  const auto idx = detail::index_images(set);
  const auto rows = detail::fused_rows(model, idx.images);
  NoGradGuard no_grad;
  std::vector<int> contexts;
  for (const auto& ex : set) contexts.push_back(ex.context);
  Tensor fused = detail::gather_rows(rows, model.fused_width(), idx.of_example);
  Tensor logits = model.logits_from_fused(fused, contexts, model.weight(), model.bias());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto row = logits.data().subspan(i * model.num_answers(), model.num_answers());
    if (static_cast<int>(argmax(row)) == set[i].answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

// Mini-batch SGD on mean cross-entropy. The classifier starts at zero; batch
// order comes from `rng`. Frozen trunks are encoded once up front.
inline FinetuneResult finetune(DownstreamModel& model, std::span<const DownstreamExample> train,
                               std::span<const DownstreamExample> test, const DownstreamConfig& config,
                               Rng& rng) {
  config.validate();
  if (train.empty() || test.empty()) throw ContractError("finetune: empty train or test set");
  for (const auto& ex : train) {
    if (ex.answer < 0 || static_cast<std::size_t>(ex.answer) >= model.num_answers()) {
      throw LabelError("downstream example " + ex.id + " has answer outside the answer space");
    }
  }
  FinetuneResult result;
  const auto idx = detail::index_images(train);
  std::vector<float> frozen_rows;
  if (config.freeze) frozen_rows = detail::fused_rows(model, idx.images);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<int> contexts, answers;
      std::vector<std::size_t> image_rows;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = train[order[i]];
        contexts.push_back(ex.context);
        answers.push_back(ex.answer);
        image_rows.push_back(idx.of_example[order[i]]);
      }
      Tape tape;
      ParamList leaves;
      if (config.freeze) {
        leaves = {model.weight().detach(true), model.bias().detach(true)};
        Tensor fused = detail::gather_rows(frozen_rows, model.fused_width(), image_rows);
        Tensor loss = softmax_cross_entropy(model.logits_from_fused(fused, contexts, leaves[0], leaves[1]), answers).loss;
        auto g = grad(loss, leaves);
        ParamList next = sgd_step(leaves, g, config.lr);
        ParamList p = model.params();
        p[p.size() - 2] = next[0].detach();
        p[p.size() - 1] = next[1].detach();
        model.set_params(std::move(p));
        loss_sum += loss.item();
      } else {
        for (const auto& p : model.params()) leaves.push_back(p.detach(true));
        std::vector<Tensor> images;
        for (std::size_t r : image_rows) images.push_back(idx.images[r]);
        Tensor fused = model.fused_features(leaves, stack_images(images));
        Tensor loss = softmax_cross_entropy(
                          model.logits_from_fused(fused, contexts, leaves[leaves.size() - 2], leaves.back()), answers)
                          .loss;
        auto g = grad(loss, leaves);
        ParamList next = sgd_step(leaves, g, config.lr);
        for (auto& p : next) p = p.detach(false);
        model.set_params(std::move(next));
        loss_sum += loss.item();
      }
      ++batches;
    }
    result.epoch_losses.push_back(static_cast<float>(loss_sum / static_cast<double>(batches)));
  }
  result.train_accuracy = downstream_accuracy(model, train);
  result.test_accuracy = downstream_accuracy(model, test);
  return result;
}

struct ResultRow {
  std::string config_hash;
  std::size_t m = 0, n = 0;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0, test_accuracy = 0.0;
  double wall_time = 0.0;
  std::size_t param_count = 0;
};

inline std::string encode_result_row(const ResultRow& r) {
  return r.config_hash + "\t" + std::to_string(r.m) + "\t" + std::to_string(r.n) + "\t" + std::to_string(r.seed) +
         "\t" + io::format_float(r.train_accuracy) + "\t" + io::format_float(r.test_accuracy) + "\t" +
         io::format_float(r.wall_time) + "\t" + std::to_string(r.param_count) + "\n";
}

inline constexpr const char* kResultsHeader =
    "# mmq-results v1\n# config_hash\tm\tn\tseed\ttrain_acc\ttest_acc\twall_time\tparam_count\n";

}  // namespace mmq
