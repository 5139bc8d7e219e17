#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmq/data_pool.hpp"
#include "mmq/maml.hpp"

namespace mmq {

// ---------------------------------------------------------------------------
// Task construction and batched evaluation shared by scoring and quantifying.

// Tasks whose label spaces together cover every eligible class `passes` times:
// each pass shuffles the eligible classes and chunks them into groups of
// classes_per_task (the last group is topped up with classes from earlier in
// the same pass). Update sets are drawn from the meta split of `support`.
inline std::vector<Task> covering_tasks(const DataPool& support, const EpisodeProtocol& protocol,
                                        std::size_t passes, Rng& rng) {
  protocol.validate();
  const auto by_class = support.meta_by_class();
  std::vector<int> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() >= protocol.update_per_class) eligible.push_back(static_cast<int>(c));
  const std::size_t y = protocol.classes_per_task;
  if (eligible.size() < y) {
    throw CapacityError("only " + std::to_string(eligible.size()) + " classes have " +
                        std::to_string(protocol.update_per_class) +
                        " meta samples; a scoring task needs " + std::to_string(y));
  }
  std::vector<Task> tasks;
  for (std::size_t p = 0; p < passes; ++p) {
    std::vector<int> order = eligible;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += y) {
      Task task;
      for (std::size_t j = 0; j < y; ++j) task.classes.push_back(order[(start + j) % order.size()]);
      for (std::size_t local = 0; local < y; ++local) {
        const auto& members = by_class[static_cast<std::size_t>(task.classes[local])];
        for (std::size_t pick : rng.choose(members.size(), protocol.update_per_class)) {
          task.train.push_back(members[pick]);
          task.train_labels.push_back(static_cast<int>(local));
        }
      }
      tasks.push_back(std::move(task));
    }
  }
  return tasks;
}

inline ParamList adapt_to_task(const FeatureNet& net, const DataPool& support, const Task& task,
                               float inner_lr, std::size_t inner_steps) {
  ConvLearner learner(net.spec());
  const ImageBatch train = make_batch(support, task.train, task.train_labels, task.classes.size());
  return inner_adapt(learner, net.params(), train, inner_lr, inner_steps);
}

struct TaskOutputs {
  std::vector<float> probs;     // [N, classes] row-major
  std::vector<float> features;  // [N, feature_dim] row-major
  std::size_t classes = 0;
  std::size_t feature_dim = 0;
};

// Runs adapted task parameters over pool samples in fixed-size batches.
inline TaskOutputs run_task(const FeatureNetSpec& spec, std::span<const Tensor> adapted,
                            const DataPool& pool, std::span<const std::size_t> indices,
                            std::size_t batch = 64) {
  NoGradGuard no_grad;
  ConvLearner learner(spec);
  TaskOutputs out;
  out.classes = adapted.back().dim(0);
  out.feature_dim = spec.feature_dim;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t stop = std::min(indices.size(), start + batch);
    std::vector<Tensor> images;
    for (std::size_t i = start; i < stop; ++i) images.push_back(pool[indices[i]].image);
    Tensor f = learner.features(adapted, stack_images(images));
    Tensor logits = linear(f, adapted[FeatureNet::kParamCount], adapted[FeatureNet::kParamCount + 1]);
    const auto p = detail::softmax_rows(logits.data(), stop - start, out.classes);
    out.probs.insert(out.probs.end(), p.begin(), p.end());
    out.features.insert(out.features.end(), f.data().begin(), f.data().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring.

struct ScoreEntry {
  std::size_t task_id = 0;
  float confidence = 0.0f;  // max class probability
  int predicted_label = 0;  // pool class
  // Probability of the sample's meta label, when that label is in the task's
  // label space; used only by the alternative demotion rule.
  std::optional<float> meta_label_confidence;
};

struct ScoreRecord {
  std::string sample_id;
  std::vector<ScoreEntry> entries;
};

struct ScoreConfig {
  EpisodeProtocol protocol = EpisodeProtocol::vqa_rad_like();
  float inner_lr = 0.01f;
  std::size_t inner_steps = 1;
  std::size_t passes = 1;
};

inline std::vector<ScoreRecord> score_pool(const FeatureNet& net, const DataPool& pool,
                                           const ScoreConfig& config, Rng& rng) {
  if (pool.empty()) throw ContractError("score_pool: empty pool");
  const auto tasks = covering_tasks(pool, config.protocol, config.passes, rng);
  std::vector<std::size_t> all(pool.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<ScoreRecord> records(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) records[i].sample_id = pool[i].id;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Task& task = tasks[t];
    const ParamList adapted = adapt_to_task(net, pool, task, config.inner_lr, config.inner_steps);
    const TaskOutputs out = run_task(net.spec(), adapted, pool, all);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const std::span<const float> p(out.probs.data() + i * out.classes, out.classes);
      const std::size_t best = argmax(p);
      ScoreEntry e{t, p[best], task.classes[best], std::nullopt};
      if (const auto& label = pool[i].meta_label) {
        auto it = std::find(task.classes.begin(), task.classes.end(), *label);
        if (it != task.classes.end()) e.meta_label_confidence = p[static_cast<std::size_t>(it - task.classes.begin())];
      }
      records[i].entries.push_back(e);
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Refinement.

enum class DemotionRule {
  predicted_low,  // some task predicts the meta label, with confidence < tau_low
  label_low,      // some task gives the meta label probability < tau_low
};

inline std::string to_string(DemotionRule r) {
  return r == DemotionRule::predicted_low ? "predicted_low" : "label_low";
}

inline DemotionRule parse_demotion_rule(const std::string& s) {
  if (s == "predicted_low") return DemotionRule::predicted_low;
  if (s == "label_low") return DemotionRule::label_low;
  throw ConfigError("refine.demotion_rule must be 'predicted_low' or 'label_low', got '" + s + "'");
}

struct RefineConfig {
  float tau_low = 0.5f;
  float tau_high = 0.9f;
  DemotionRule rule = DemotionRule::predicted_low;

  void validate() const {
    if (!(tau_low > 0.0f && tau_low <= tau_high && tau_high < 1.0f)) {
      throw ConfigError("refine thresholds must satisfy 0 < tau_low <= tau_high < 1, got tau_low=" +
                        io::format_float(tau_low) + " tau_high=" + io::format_float(tau_high));
    }
  }
};

struct RefineResult {
  DataPool pool;
  std::vector<std::string> demoted;   // ids moved M -> U
  std::vector<std::string> promoted;  // ids moved U -> M
};

inline bool demotes(const ScoreEntry& e, int meta_label, const RefineConfig& config) {
  if (config.rule == DemotionRule::predicted_low) {
    return e.predicted_label == meta_label && e.confidence < config.tau_low;
  }
  return e.meta_label_confidence && *e.meta_label_confidence < config.tau_low;
}

// M_f = M - U' + M', U_f = U - M' + U'. Promoted samples take the label of
// their highest-confidence entry (earliest entry on ties).
inline RefineResult refine(const DataPool& pool, std::span<const ScoreRecord> records,
                           const RefineConfig& config) {
  config.validate();
  std::map<std::string, const ScoreRecord*> by_id;
  for (const auto& r : records) by_id[r.sample_id] = &r;
  RefineResult result{pool, {}, {}};
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Sample& s = pool[i];
    auto it = by_id.find(s.id);
    if (it == by_id.end() || it->second->entries.empty()) {
      throw ContractError("refine: no score entries for sample " + s.id);
    }
    const auto& entries = it->second->entries;
    if (s.meta_label) {
      const bool demote = std::any_of(entries.begin(), entries.end(),
                                      [&](const ScoreEntry& e) { return demotes(e, *s.meta_label, config); });
      if (demote) {
        result.pool.strip_label(i);
        result.demoted.push_back(s.id);
      }
    } else {
      const ScoreEntry* best = &entries[0];
      for (const auto& e : entries)
        if (e.confidence > best->confidence) best = &e;
      if (best->confidence > config.tau_high) {
        result.pool.assign_label(i, best->predicted_label);
        result.promoted.push_back(s.id);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Train / score / refine loop.

struct RoundStats {
  std::size_t round = 0;  // refinement applied after training model `round`
  std::size_t demoted = 0;
  std::size_t promoted = 0;
  std::size_t meta_size = 0;       // after refinement
  std::size_t unlabeled_size = 0;  // after refinement
  std::size_t noisy_in_meta = 0;   // after refinement
  std::size_t noisy_before = 0;    // mislabeled samples in M before refinement
  std::size_t clean_before = 0;
  std::size_t demoted_noisy = 0;
  std::size_t demoted_clean = 0;
};

struct LoopConfig {
  std::size_t models = 5;  // m
  TrainConfig train;
  RefineConfig refine;
  std::size_t score_passes = 1;
};

struct LoopResult {
  std::vector<MetaModel> models;
  DataPool pool;
  std::vector<RoundStats> rounds;
};

inline RoundStats refinement_stats(std::size_t round, const DataPool& before, const RefineResult& r) {
  RoundStats st;
  st.round = round;
  st.demoted = r.demoted.size();
  st.promoted = r.promoted.size();
  st.meta_size = r.pool.meta_size();
  st.unlabeled_size = r.pool.unlabeled_size();
  st.noisy_in_meta = r.pool.mislabeled_in_meta();
  st.noisy_before = before.mislabeled_in_meta();
  st.clean_before = before.meta_size() - st.noisy_before;
  for (const auto& id : r.demoted) {
    const Sample& s = before[*before.index_of(id)];
    (*s.meta_label != s.true_label ? st.demoted_noisy : st.demoted_clean) += 1;
  }
  return st;
}

// Model r is trained from a fresh initialization on the pool left by the
// previous refinement; m models means m - 1 refinements. `on_model` sees each
// model as soon as it is trained.
template <class OnModel = void (*)(const MetaModel&)>
LoopResult refinement_loop(const DataPool& pool, const LoopConfig& config, const FeatureNetSpec& spec,
                           std::uint64_t seed, OnModel on_model = [](const MetaModel&) {}) {
  if (config.models == 0) throw ConfigError("refine.m must be >= 1");
  config.refine.validate();
  LoopResult result{{}, pool, {}};
  for (std::size_t r = 0; r < config.models; ++r) {
    try {
      result.models.push_back(meta_train(result.pool, config.train, spec, seed, r));
    } catch (const CapacityError& e) {
      throw CapacityError("round " + std::to_string(r) + ": " + e.what());
    }
    on_model(result.models.back());
    if (r + 1 == config.models) break;
    Rng rng = Rng::stream(seed, "score", r);
    const ScoreConfig sc{config.train.protocol, config.train.inner_lr, config.train.inner_steps,
                         config.score_passes};
    std::vector<ScoreRecord> records;
    try {
      records = score_pool(result.models.back().net, result.pool, sc, rng);
    } catch (const CapacityError& e) {
      throw CapacityError("round " + std::to_string(r) + ": " + e.what());
    }
    RefineResult refined = refine(result.pool, records, config.refine);
    result.rounds.push_back(refinement_stats(r, result.pool, refined));
    result.pool = std::move(refined.pool);
  }
  return result;
}

inline std::string encode_refine_report(std::span<const RoundStats> rounds, const std::string& config_hash) {
  std::string out = "# mmq-refine v1\tconfig_hash=" + config_hash +
                    "\n# round\tdemoted\tpromoted\tmeta\tunlabeled\tnoisy_in_meta\tdemoted_noisy\tdemoted_clean\n";
  for (const auto& r : rounds) {
    out += std::to_string(r.round) + "\t" + std::to_string(r.demoted) + "\t" + std::to_string(r.promoted) +
           "\t" + std::to_string(r.meta_size) + "\t" + std::to_string(r.unlabeled_size) + "\t" +
           std::to_string(r.noisy_in_meta) + "\t" + std::to_string(r.demoted_noisy) + "\t" +
           std::to_string(r.demoted_clean) + "\n";
  }
  return out;
}

}  // namespace mmq
