#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmq/refinement.hpp"

namespace mmq {

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: feature widths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegeneracyError("cosine of a zero-norm feature vector");
  return dot / std::sqrt(na * nb);
}

// Sum over the other candidates of (1 - cos(own, other)).
inline double diversity(std::span<const float> own, std::span<const std::vector<float>> others) {
  double d = 0.0;
  for (const auto& o : others) d += 1.0 - cosine(own, o);
  return d;
}

inline double fuse_score(double s_p, std::span<const float> own,
                         std::span<const std::vector<float>> others, double gamma) {
  return gamma * s_p + (1.0 - gamma) * diversity(own, others);
}

struct FuseConfig {
  double gamma = 0.5;
  std::size_t n = 3;
  double holdout_fraction = 0.1;
  std::size_t passes = 1;

  void validate(std::size_t m) const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("quantify.gamma must lie in [0, 1]");
    if (n == 0) throw ConfigError("quantify.n must be >= 1");
    if (n >= m) {
      throw ConfigError("quantify.n must be < m (n=" + std::to_string(n) + ", m=" + std::to_string(m) + ")");
    }
  }
};

struct QuantifyEntry {
  float s_p = 0.0f;  // probability at the ground-truth label
  std::vector<float> feature;
};

struct QuantifyRecord {
  std::string sample_id;
  std::vector<QuantifyEntry> entries;  // one per candidate model
};

struct ModelScore {
  std::size_t index = 0;  // position in the candidate list (round order)
  double sum_sp = 0.0;
  double sum_diversity = 0.0;
  double sum_fuse = 0.0;
  bool selected = false;
};

struct QuantifyResult {
  std::vector<ModelScore> scores;     // candidate order
  std::vector<std::size_t> selected;  // descending accumulated fuse score
};

// Accumulates per-model fuse scores over every record; diversity compares a
// model only with the other candidates' features on the same sample.
inline std::vector<ModelScore> accumulate_scores(std::span<const QuantifyRecord> records,
                                                 std::size_t m, double gamma) {
  std::vector<ModelScore> scores(m);
  for (std::size_t c = 0; c < m; ++c) scores[c].index = c;
  std::vector<std::vector<float>> others;
  for (const auto& rec : records) {
    if (rec.entries.size() != m) {
      throw DimensionError("quantify record " + rec.sample_id + " has " + std::to_string(rec.entries.size()) +
                           " entries, expected " + std::to_string(m));
    }
    for (std::size_t c = 0; c < m; ++c) {
      others.clear();
      for (std::size_t t = 0; t < m; ++t)
        if (t != c) others.push_back(rec.entries[t].feature);
      const double div = diversity(rec.entries[c].feature, others);
      scores[c].sum_sp += rec.entries[c].s_p;
      scores[c].sum_diversity += div;
      scores[c].sum_fuse += gamma * rec.entries[c].s_p + (1.0 - gamma) * div;
    }
  }
  return scores;
}

// Top n by accumulated fuse score; earlier candidates win ties.
inline std::vector<std::size_t> select_top(std::span<const ModelScore> scores, std::size_t n) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a].sum_fuse > scores[b].sum_fuse; });
  order.resize(std::min(n, order.size()));
  return order;
}

inline QuantifyResult quantify(std::span<const QuantifyRecord> records, std::size_t m, const FuseConfig& config) {
  config.validate(m);
  QuantifyResult r;
  r.scores = accumulate_scores(records, m, config.gamma);
  r.selected = select_top(r.scores, config.n);
  for (std::size_t i : r.selected) r.scores[i].selected = true;
  return r;
}

// Scores every candidate on the labelled quantify pool. Each pass covers all
// classes with tasks adapted on `support`; a sample is scored by the task
// whose label space holds its label, with the task-adapted trunk's feature.
inline std::vector<QuantifyRecord> collect_quantify_records(std::span<const FeatureNet> models,
                                                            const DataPool& quantify_pool,
                                                            const DataPool& support,
                                                            const ScoreConfig& config, Rng& rng) {
  if (models.empty()) throw ContractError("quantify: no candidate models");
  const auto tasks = covering_tasks(support, config.protocol, config.passes, rng);
  std::vector<QuantifyRecord> records;
  for (const Task& task : tasks) {
    std::vector<std::size_t> members;
    std::vector<std::size_t> local;
    for (std::size_t i = 0; i < quantify_pool.size(); ++i) {
      const auto& label = quantify_pool[i].meta_label;
      if (!label) continue;
      auto it = std::find(task.classes.begin(), task.classes.end(), *label);
      if (it == task.classes.end()) continue;
      members.push_back(i);
      local.push_back(static_cast<std::size_t>(it - task.classes.begin()));
    }
    if (members.empty()) continue;
    const std::size_t first = records.size();
    for (std::size_t i : members) records.push_back({quantify_pool[i].id, {}});
    for (const auto& net : models) {
      const ParamList adapted = adapt_to_task(net, support, task, config.inner_lr, config.inner_steps);
      const TaskOutputs out = run_task(net.spec(), adapted, quantify_pool, members);
      for (std::size_t j = 0; j < members.size(); ++j) {
        QuantifyEntry e;
        e.s_p = out.probs[j * out.classes + local[j]];
        e.feature.assign(out.features.begin() + static_cast<std::ptrdiff_t>(j * out.feature_dim),
                         out.features.begin() + static_cast<std::ptrdiff_t>((j + 1) * out.feature_dim));
        records[first + j].entries.push_back(std::move(e));
      }
    }
  }
  if (records.empty()) throw CapacityError("quantify pool has no labelled samples in any task's label space");
  return records;
}

inline std::string encode_quantify_report(const QuantifyResult& result, std::span<const std::size_t> rounds,
                                          const std::string& config_hash) {
  std::string out = "# mmq-quantify v1\tconfig_hash=" + config_hash +
                    "\n# round\tsum_sp\tsum_diversity\tsum_fuse\tselected\trank\n";
  for (const auto& s : result.scores) {
    const auto it = std::find(result.selected.begin(), result.selected.end(), s.index);
    const std::string rank = it == result.selected.end() ? "-" : std::to_string(it - result.selected.begin());
    out += std::to_string(rounds[s.index]) + "\t" + io::format_float(s.sum_sp) + "\t" +
           io::format_float(s.sum_diversity) + "\t" + io::format_float(s.sum_fuse) + "\t" +
           (s.selected ? "1" : "0") + "\t" + rank + "\n";
  }
  return out;
}

}  // namespace mmq
