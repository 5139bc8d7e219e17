#pragma once

// Procedural stand-in dataset. Each class is an oriented sinusoidal grating
// with its own (orientation, spatial frequency) pair; phase is drawn uniformly
// per sample, so every class has the same mean image and no linear function of
// raw pixels separates them, while conv + ReLU + pooling (energy detectors)
// does.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <numbers>
#include <string>
#include <vector>

#include "mmq/data_pool.hpp"
#include "mmq/rng.hpp"

namespace mmq {

struct GeneratorSpec {
  std::size_t num_classes = 9;
  std::size_t image_size = 84;
  std::size_t samples_per_class = 40;
  double meta_fraction = 0.5;

  // Jitter; all zero makes every sample of a class identical.
  double orientation_jitter_deg = 5.0;
  double frequency_jitter = 0.08;  // relative
  double phase_jitter = 1.0;       // fraction of a full cycle
  double contrast_jitter = 0.3;
  double pixel_noise = 0.15;

  // Downstream question-answer set.
  std::size_t context_dim = 8;
  std::size_t downstream_train_per_class = 20;
  std::size_t downstream_test_per_class = 40;
  std::size_t questions_per_image = 2;

  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
    if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
    if (samples_per_class == 0) throw ConfigError("data.samples_per_class must be >= 1");
    if (!(meta_fraction > 0.0 && meta_fraction <= 1.0)) {
      throw ConfigError("data.meta_fraction must lie in (0, 1]");
    }
    for (double j : {orientation_jitter_deg, frequency_jitter, phase_jitter, contrast_jitter, pixel_noise}) {
      if (!(j >= 0.0)) throw ConfigError("data jitter parameters must be >= 0");
    }
    if (contrast_jitter >= 1.0) throw ConfigError("data.contrast_jitter must be < 1");
    if (context_dim < 2) throw ConfigError("data.context_dim must be >= 2");
    if (questions_per_image == 0 || questions_per_image > context_dim) {
      throw ConfigError("data.questions_per_image must lie in [1, context_dim]");
    }
  }
};

struct ClassPattern {
  double orientation_rad;
  double cycles_per_image;
};

inline std::size_t frequency_levels(std::size_t num_classes) { return num_classes >= 6 ? 3 : 1; }

inline ClassPattern class_pattern(std::size_t cls, std::size_t num_classes) {
  const std::size_t levels = frequency_levels(num_classes);
  const std::size_t orientations = (num_classes + levels - 1) / levels;
  const std::size_t o = cls % orientations;
  const std::size_t f = cls / orientations;
  return {std::numbers::pi * static_cast<double>(o) / static_cast<double>(orientations),
          3.0 + 2.5 * static_cast<double>(f)};
}

// Pixel values are quantized to multiples of 1/255 so PGM storage is lossless.
inline Tensor render_grating(std::size_t cls, const GeneratorSpec& spec, Rng& rng) {
  const ClassPattern p = class_pattern(cls, spec.num_classes);
  const double theta = p.orientation_rad + spec.orientation_jitter_deg * std::numbers::pi / 180.0 *
                                               (2.0 * rng.uniform_double() - 1.0);
  const double freq = p.cycles_per_image * (1.0 + spec.frequency_jitter * (2.0 * rng.uniform_double() - 1.0));
  const double phase = 2.0 * std::numbers::pi * spec.phase_jitter * rng.uniform_double();
  const double contrast = 1.0 - spec.contrast_jitter * rng.uniform_double();
  const std::size_t n = spec.image_size;
  const double kx = 2.0 * std::numbers::pi * freq * std::cos(theta) / static_cast<double>(n);
  const double ky = 2.0 * std::numbers::pi * freq * std::sin(theta) / static_cast<double>(n);
  std::vector<float> px(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double v = 0.5 + 0.35 * contrast *
                           std::cos(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      if (spec.pixel_noise > 0.0) v += spec.pixel_noise * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      px[y * n + x] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
    }
  return Tensor({1, n, n}, std::move(px));
}

// ---------------------------------------------------------------------------
// Downstream label function. Each context (question type) q owns a disjoint
// block of answers; the answer is the group of the true class under a
// q-specific partition of the classes (2 groups for the first half of the
// question types, 3 for the rest).

inline std::size_t answer_values(std::size_t q, std::size_t context_dim) {
  return q < context_dim / 2 ? 2 : 3;
}

inline std::size_t num_answers(std::size_t context_dim) {
  std::size_t total = 0;
  for (std::size_t q = 0; q < context_dim; ++q) total += answer_values(q, context_dim);
  return total;
}

inline std::size_t answer_for(std::size_t cls, std::size_t q, std::size_t num_classes,
                              std::size_t context_dim) {
  if (cls >= num_classes || q >= context_dim) throw LabelError("answer_for: class or context out of range");
  // q-th multiplier coprime with num_classes gives a permutation of classes.
  std::size_t found = 0, a = 1;
  for (std::size_t cand = 1;; ++cand) {
    if (std::gcd(cand % num_classes, num_classes) == 1) {
      if (found == q % std::max<std::size_t>(1, num_classes - 1)) {
        a = cand;
        break;
      }
      ++found;
    }
  }
  const std::size_t permuted = (a * cls + q) % num_classes;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < q; ++i) offset += answer_values(i, context_dim);
  return offset + permuted * answer_values(q, context_dim) / num_classes;
}

struct DownstreamExample {
  std::string id;
  Tensor image;
  int true_class = 0;
  int context = 0;  // question type, one-hot of width context_dim
  int answer = 0;
  std::string image_ref;
};

struct DownstreamSet {
  std::size_t context_dim = 0;
  std::size_t num_answers = 0;
  std::vector<DownstreamExample> train, test;
};

struct SyntheticData {
  DataPool pool;
  DownstreamSet downstream;
};

inline std::string sample_id(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%06zu", prefix, i);
  return buf;
}

inline SyntheticData generate(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng = Rng::stream(spec.seed, "data");
  std::vector<Sample> samples;
  std::size_t next = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const auto meta_count = static_cast<std::size_t>(
        std::llround(spec.meta_fraction * static_cast<double>(spec.samples_per_class)));
    for (std::size_t j = 0; j < spec.samples_per_class; ++j) {
      Sample s;
      s.id = sample_id('p', next++);
      s.image = render_grating(c, spec, rng);
      s.true_label = static_cast<int>(c);
      if (j < meta_count) s.meta_label = static_cast<int>(c);
      s.image_ref = "images/" + s.id + ".pgm";
      samples.push_back(std::move(s));
    }
  }
  SyntheticData data{DataPool(spec.num_classes, std::move(samples)), {}};

  Rng qa = Rng::stream(spec.seed, "downstream");
  data.downstream.context_dim = spec.context_dim;
  data.downstream.num_answers = num_answers(spec.context_dim);
  std::size_t image_no = 0, qa_no = 0;
  for (auto [target, per_class] : {std::pair{&data.downstream.train, spec.downstream_train_per_class},
                                   std::pair{&data.downstream.test, spec.downstream_test_per_class}}) {
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      for (std::size_t j = 0; j < per_class; ++j) {
        const std::string image_id = sample_id('d', image_no++);
        Tensor image = render_grating(c, spec, qa);
        for (std::size_t q : qa.choose(spec.context_dim, spec.questions_per_image)) {
          DownstreamExample ex;
          ex.id = sample_id('q', qa_no++);
          ex.image = image;
          ex.true_class = static_cast<int>(c);
          ex.context = static_cast<int>(q);
          ex.answer = static_cast<int>(answer_for(c, q, spec.num_classes, spec.context_dim));
          ex.image_ref = "images/" + image_id + ".pgm";
          target->push_back(std::move(ex));
        }
      }
  }
  return data;
}

}  // namespace mmq
