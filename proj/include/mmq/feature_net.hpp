#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mmq/autodiff.hpp"
#include "mmq/checkpoint.hpp"
#include "mmq/ops.hpp"
#include "mmq/rng.hpp"

namespace mmq {

inline constexpr std::size_t kConvLayers = 4;
inline constexpr std::size_t kFilters = 64;
inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kStride = 2;

struct FeatureNetSpec {
  std::size_t channels = 1;
  std::size_t image_size = 84;
  std::size_t feature_dim = 64;

  // Spatial side length after each conv layer; 84 gives 41, 20, 9, 4.
  std::vector<std::size_t> spatial_trace() const {
    std::vector<std::size_t> trace;
    std::size_t s = image_size;
    for (std::size_t i = 0; i < kConvLayers; ++i) {
      if (s < kKernel) {
        throw DimensionError("image size " + std::to_string(image_size) +
                             " collapses below the kernel at conv layer " + std::to_string(i));
      }
      s = (s - kKernel) / kStride + 1;
      trace.push_back(s);
    }
    return trace;
  }

  void validate() const {
    if (channels == 0 || feature_dim == 0) throw ConfigError("feature net needs channels and feature_dim > 0");
    spatial_trace();
  }

  bool operator==(const FeatureNetSpec&) const = default;
};

// Concatenates [C,H,W] images into one [N,C,H,W] batch.
inline Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const Shape& s = images[0].shape();
  if (s.size() != 3) throw DimensionError("stack_images: expected [C,H,W], got " + shape_str(s));
  std::vector<float> data;
  data.reserve(images.size() * images[0].numel());
  for (const auto& im : images) {
    if (im.shape() != s) throw DimensionError("stack_images: mixed image shapes");
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor({images.size(), s[0], s[1], s[2]}, std::move(data));
}

// Four 3x3/stride-2 conv layers with 64 filters and ReLU, spatial mean pool,
// then a linear projection to feature_dim.
class FeatureNet {
 public:
  static constexpr std::size_t kParamCount = 2 * kConvLayers + 2;

  FeatureNet(FeatureNetSpec spec, ParamList params) : spec_(spec), params_(std::move(params)) {
    spec_.validate();
    const auto shapes = param_shapes(spec_);
    if (params_.size() != shapes.size()) {
      throw DimensionError("feature net expects " + std::to_string(shapes.size()) +
                           " parameter tensors, got " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (params_[i].shape() != shapes[i]) {
        throw DimensionError("parameter " + param_names()[i] + " has shape " +
                             shape_str(params_[i].shape()) + ", expected " +
                             shape_str(shapes[i]));
      }
    }
  }

  // Uniform in [-gain/sqrt(fan_in), gain/sqrt(fan_in)] for weights and biases.
  static FeatureNet init(const FeatureNetSpec& spec, Rng& rng, float gain = 1.0f) {
    spec.validate();
    ParamList params;
    const auto shapes = param_shapes(spec);
    for (std::size_t i = 0; i < shapes.size(); i += 2) {
      const Shape& w = shapes[i];
      const std::size_t fan_in = i < 2 * kConvLayers ? w[1] * w[2] * w[3] : w[0];
      const float bound = gain / std::sqrt(static_cast<float>(fan_in));
      for (const Shape& s : {shapes[i], shapes[i + 1]}) {
        std::vector<float> v(numel(s));
        for (float& x : v) x = rng.uniform(-bound, bound);
        params.emplace_back(s, std::move(v));
      }
    }
    return FeatureNet(spec, std::move(params));
  }

  static std::vector<Shape> param_shapes(const FeatureNetSpec& spec) {
    std::vector<Shape> shapes;
    std::size_t in = spec.channels;
    for (std::size_t l = 0; l < kConvLayers; ++l) {
      shapes.push_back({kFilters, in, kKernel, kKernel});
      shapes.push_back({kFilters});
      in = kFilters;
    }
    shapes.push_back({kFilters, spec.feature_dim});
    shapes.push_back({spec.feature_dim});
    return shapes;
  }

  static std::vector<std::string> param_names() {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < kConvLayers; ++l) {
      names.push_back("conv" + std::to_string(l) + ".weight");
      names.push_back("conv" + std::to_string(l) + ".bias");
    }
    names.push_back("proj.weight");
    names.push_back("proj.bias");
    return names;
  }

  // [N,C,H,W] -> [N, feature_dim] using the given parameter tensors (which may
  // be adapted copies recorded on a tape).
  static Tensor forward(const FeatureNetSpec& spec, std::span<const Tensor> params,
                        const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != spec.channels ||
        images.dim(2) != spec.image_size || images.dim(3) != spec.image_size) {
      throw DimensionError("feature net expects [N," + std::to_string(spec.channels) + "," +
                           std::to_string(spec.image_size) + "," +
                           std::to_string(spec.image_size) + "] images, got " +
                           shape_str(images.shape()));
    }
    Tensor h = images;
    for (std::size_t l = 0; l < kConvLayers; ++l) {
      h = relu(add_channel_bias(conv2d(h, params[2 * l], kStride), params[2 * l + 1]));
    }
    return linear(spatial_mean(h), params[2 * kConvLayers], params[2 * kConvLayers + 1]);
  }

  Tensor forward(const Tensor& images) const { return forward(spec_, params_, images); }

  Tensor extract(const Tensor& image) const {
    if (image.rank() != 3) {
      throw DimensionError("extract_features expects a [C,H,W] image, got " +
                           shape_str(image.shape()));
    }
    Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    return reshape(forward(batch), {spec_.feature_dim});
  }

  const FeatureNetSpec& spec() const noexcept { return spec_; }
  const ParamList& params() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  Checkpoint to_checkpoint(std::vector<std::pair<std::string, std::string>> extra = {}) const {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "feature-net"},
                 {"channels", std::to_string(spec_.channels)},
                 {"image_size", std::to_string(spec_.image_size)},
                 {"feature_dim", std::to_string(spec_.feature_dim)}};
    ckpt.meta.insert(ckpt.meta.end(), extra.begin(), extra.end());
    const auto names = param_names();
    for (std::size_t i = 0; i < params_.size(); ++i) ckpt.params.push_back({names[i], params_[i]});
    return ckpt;
  }

  static FeatureNet from_checkpoint(const Checkpoint& ckpt) {
    FeatureNetSpec spec;
    try {
      spec.channels = std::stoul(ckpt.meta_value("channels"));
      spec.image_size = std::stoul(ckpt.meta_value("image_size"));
      spec.feature_dim = std::stoul(ckpt.meta_value("feature_dim"));
    } catch (const std::invalid_argument&) {
      throw DataError("checkpoint has non-numeric feature net geometry");
    }
    const auto names = param_names();
    ParamList params;
    for (const auto& name : names) {
      auto it = std::find_if(ckpt.params.begin(), ckpt.params.end(),
                             [&](const NamedTensor& p) { return p.name == name; });
      if (it == ckpt.params.end()) throw DataError("checkpoint is missing parameter " + name);
      params.push_back(it->value);
    }
    return FeatureNet(spec, std::move(params));
  }

 private:
  FeatureNetSpec spec_;
  ParamList params_;
};

inline Tensor extract_features(const FeatureNet& net, const Tensor& image) {
  return net.extract(image);
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct ClassifierHead {
  Tensor weight;  // [feature_dim, num_classes]
  Tensor bias;    // [num_classes]

  static ClassifierHead zeros(std::size_t feature_dim, std::size_t num_classes) {
    return {Tensor::zeros({feature_dim, num_classes}), Tensor::zeros({num_classes})};
  }

  static ClassifierHead init(std::size_t feature_dim, std::size_t num_classes, Rng& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(feature_dim));
    std::vector<float> w(feature_dim * num_classes), b(num_classes);
    for (float& x : w) x = rng.uniform(-bound, bound);
    for (float& x : b) x = rng.uniform(-bound, bound);
    return {Tensor({feature_dim, num_classes}, std::move(w)), Tensor({num_classes}, std::move(b))};
  }

  std::size_t feature_dim() const { return weight.dim(0); }
  std::size_t num_classes() const { return weight.dim(1); }

  Tensor logits(const Tensor& features) const { return linear(features, weight, bias); }
};

struct Classification {
  std::vector<float> probs;
  std::size_t label = 0;
  float confidence = 0.0f;
};

inline Classification classification_from_logits(std::span<const float> logits) {
  Classification c;
  c.probs = detail::softmax_rows(logits, 1, logits.size());
  c.label = argmax(c.probs);
  c.confidence = c.probs[c.label];
  return c;
}

inline Classification classify(const ClassifierHead& head, const Tensor& feature) {
  if (feature.rank() != 1 || feature.dim(0) != head.feature_dim()) {
    throw DimensionError("classify: feature " + shape_str(feature.shape()) +
                         " does not match head width " + std::to_string(head.feature_dim()));
  }
  NoGradGuard no_grad;
  Tensor logits = head.logits(reshape(feature, {1, feature.dim(0)}));
  return classification_from_logits(logits.data());
}

}  // namespace mmq
