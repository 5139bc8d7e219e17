#pragma once

// INI-style pipeline configuration:
//
//   [section]
//   key = value   ; or # comments
//
// Every field has a canonical text form; the config hash is FNV-1a over the
// sorted canonical "section.key=value" lines, so key order in the file does
// not matter. global.out is excluded from the hash.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mmq/downstream.hpp"
#include "mmq/errors.hpp"
#include "mmq/io.hpp"
#include "mmq/quantifier.hpp"
#include "mmq/refinement.hpp"
#include "mmq/synthetic.hpp"

namespace mmq {

struct GridPoint {
  std::size_t m = 0;
  std::size_t n = 0;
  bool operator==(const GridPoint&) const = default;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string out = "out";

  GeneratorSpec data;
  double noise_rate = 0.2;

  std::size_t feature_dim = 64;
  TrainConfig train;

  std::size_t m = 5;
  RefineConfig refine;
  std::size_t score_passes = 1;

  FuseConfig quantify;
  DownstreamConfig downstream;
  std::vector<GridPoint> grid = {{3, 1}, {4, 2}, {5, 3}, {7, 4}};

  FeatureNetSpec net_spec() const { return {1, data.image_size, feature_dim}; }

  GeneratorSpec generator() const {
    GeneratorSpec g = data;
    g.seed = seed;
    return g;
  }

  LoopConfig loop(std::size_t models) const { return {models, train, refine, score_passes}; }

  ScoreConfig quantify_scoring() const { return {train.protocol, train.inner_lr, train.inner_steps, quantify.passes}; }

  void validate() const;
};

namespace detail {

struct Field {
  std::string section, key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
  bool hashed = true;
};

[[noreturn]] inline void bad_value(const std::string& name, const std::string& value, const std::string& want) {
  throw ConfigError(name + ": expected " + want + ", got '" + value + "'");
}

inline std::uint64_t parse_u64(const std::string& name, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    bad_value(name, v, "a non-negative integer");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad_value(name, v, "a non-negative integer");
  }
}

inline double parse_double(const std::string& name, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad_value(name, v, "a number");
  return d;
}

inline bool parse_bool(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(name, v, "true or false");
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<GridPoint> parse_grid(const std::string& name, const std::string& v) {
  std::vector<GridPoint> grid;
  for (const auto& item : io::split(v, ',')) {
    const auto parts = io::split(trim(item), '/');
    if (parts.size() != 2) bad_value(name, v, "a comma-separated list of m/n pairs");
    grid.push_back({parse_u64(name, parts[0]), parse_u64(name, parts[1])});
  }
  return grid;
}

inline std::string format_grid(const std::vector<GridPoint>& grid) {
  std::string s;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(grid[i].m) + "/" + std::to_string(grid[i].n);
  }
  return s;
}

template <class T>
Field size_field(std::string section, std::string key, T PipelineConfig::*outer, std::size_t T::*member) {
  const std::string name = section + "." + key;
  return {section, key, [=](const PipelineConfig& c) { return std::to_string(c.*outer.*member); },
          [=](PipelineConfig& c, const std::string& v) { c.*outer.*member = parse_u64(name, v); }};
}

template <class T, class F>
Field real_field(std::string section, std::string key, T PipelineConfig::*outer, F T::*member) {
  const std::string name = section + "." + key;
  return {section, key, [=](const PipelineConfig& c) { return io::format_float(c.*outer.*member); },
          [=](PipelineConfig& c, const std::string& v) { c.*outer.*member = static_cast<F>(parse_double(name, v)); }};
}

inline const std::vector<Field>& fields() {
  using C = PipelineConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"global", "seed", [](const C& c) { return std::to_string(c.seed); },
                 [](C& c, const std::string& v) { c.seed = parse_u64("global.seed", v); }});
    f.push_back({"global", "out", [](const C& c) { return c.out; },
                 [](C& c, const std::string& v) { c.out = v; }, false});

    f.push_back(size_field("data", "num_classes", &C::data, &GeneratorSpec::num_classes));
    f.push_back(size_field("data", "image_size", &C::data, &GeneratorSpec::image_size));
    f.push_back(size_field("data", "samples_per_class", &C::data, &GeneratorSpec::samples_per_class));
    f.push_back(real_field("data", "meta_fraction", &C::data, &GeneratorSpec::meta_fraction));
    f.push_back(real_field("data", "orientation_jitter_deg", &C::data, &GeneratorSpec::orientation_jitter_deg));
    f.push_back(real_field("data", "frequency_jitter", &C::data, &GeneratorSpec::frequency_jitter));
    f.push_back(real_field("data", "phase_jitter", &C::data, &GeneratorSpec::phase_jitter));
    f.push_back(real_field("data", "contrast_jitter", &C::data, &GeneratorSpec::contrast_jitter));
    f.push_back(real_field("data", "pixel_noise", &C::data, &GeneratorSpec::pixel_noise));
    f.push_back(size_field("data", "context_dim", &C::data, &GeneratorSpec::context_dim));
    f.push_back(size_field("data", "downstream_train_per_class", &C::data, &GeneratorSpec::downstream_train_per_class));
    f.push_back(size_field("data", "downstream_test_per_class", &C::data, &GeneratorSpec::downstream_test_per_class));
    f.push_back(size_field("data", "questions_per_image", &C::data, &GeneratorSpec::questions_per_image));
    f.push_back({"data", "noise_rate", [](const C& c) { return io::format_float(c.noise_rate); },
                 [](C& c, const std::string& v) { c.noise_rate = parse_double("data.noise_rate", v); }});

    f.push_back({"train", "feature_dim", [](const C& c) { return std::to_string(c.feature_dim); },
                 [](C& c, const std::string& v) { c.feature_dim = parse_u64("train.feature_dim", v); }});
    f.push_back(real_field("train", "inner_lr", &C::train, &TrainConfig::inner_lr));
    f.push_back(real_field("train", "meta_lr", &C::train, &TrainConfig::meta_lr));
    f.push_back(size_field("train", "iterations", &C::train, &TrainConfig::iterations));
    f.push_back(size_field("train", "inner_steps", &C::train, &TrainConfig::inner_steps));
    f.push_back(real_field("train", "init_gain", &C::train, &TrainConfig::init_gain));
    f.push_back(real_field("train", "grad_clip", &C::train, &TrainConfig::grad_clip));
    f.push_back({"train", "gradient_mode", [](const C& c) { return to_string(c.train.mode); },
                 [](C& c, const std::string& v) { c.train.mode = parse_gradient_mode(v); }});
    f.push_back({"train", "tasks", [](const C& c) { return std::to_string(c.train.protocol.tasks); },
                 [](C& c, const std::string& v) { c.train.protocol.tasks = parse_u64("train.tasks", v); }});
    f.push_back({"train", "classes_per_task",
                 [](const C& c) { return std::to_string(c.train.protocol.classes_per_task); },
                 [](C& c, const std::string& v) {
                   c.train.protocol.classes_per_task = parse_u64("train.classes_per_task", v);
                 }});
    f.push_back({"train", "images_per_class",
                 [](const C& c) { return std::to_string(c.train.protocol.images_per_class); },
                 [](C& c, const std::string& v) {
                   c.train.protocol.images_per_class = parse_u64("train.images_per_class", v);
                 }});
    f.push_back({"train", "update_per_class",
                 [](const C& c) { return std::to_string(c.train.protocol.update_per_class); },
                 [](C& c, const std::string& v) {
                   c.train.protocol.update_per_class = parse_u64("train.update_per_class", v);
                 }});

    f.push_back({"refine", "m", [](const C& c) { return std::to_string(c.m); },
                 [](C& c, const std::string& v) { c.m = parse_u64("refine.m", v); }});
    f.push_back(real_field("refine", "tau_low", &C::refine, &RefineConfig::tau_low));
    f.push_back(real_field("refine", "tau_high", &C::refine, &RefineConfig::tau_high));
    f.push_back({"refine", "demotion_rule", [](const C& c) { return to_string(c.refine.rule); },
                 [](C& c, const std::string& v) { c.refine.rule = parse_demotion_rule(v); }});
    f.push_back({"refine", "score_passes", [](const C& c) { return std::to_string(c.score_passes); },
                 [](C& c, const std::string& v) { c.score_passes = parse_u64("refine.score_passes", v); }});

    f.push_back(real_field("quantify", "gamma", &C::quantify, &FuseConfig::gamma));
    f.push_back(size_field("quantify", "n", &C::quantify, &FuseConfig::n));
    f.push_back(real_field("quantify", "holdout_fraction", &C::quantify, &FuseConfig::holdout_fraction));
    f.push_back(size_field("quantify", "passes", &C::quantify, &FuseConfig::passes));

    f.push_back(size_field("downstream", "epochs", &C::downstream, &DownstreamConfig::epochs));
    f.push_back(real_field("downstream", "lr", &C::downstream, &DownstreamConfig::lr));
    f.push_back(size_field("downstream", "batch_size", &C::downstream, &DownstreamConfig::batch_size));
    f.push_back({"downstream", "freeze", [](const C& c) { return std::string(c.downstream.freeze ? "true" : "false"); },
                 [](C& c, const std::string& v) { c.downstream.freeze = parse_bool("downstream.freeze", v); }});

    f.push_back({"ablate", "grid", [](const C& c) { return format_grid(c.grid); },
                 [](C& c, const std::string& v) { c.grid = parse_grid("ablate.grid", v); }});
    return f;
  }();
  return table;
}

}  // namespace detail

inline void PipelineConfig::validate() const {
  generator().validate();
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("data.noise_rate must lie in [0, 1)");
  if (feature_dim == 0) throw ConfigError("train.feature_dim must be >= 1");
  try {
    net_spec().validate();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("data.image_size: ") + e.what());
  }
  if (data.image_size < 8) throw ConfigError("data.image_size must be >= 8");
  train.validate();
  if (train.protocol.classes_per_task > data.num_classes) {
    throw ConfigError("train.classes_per_task (" + std::to_string(train.protocol.classes_per_task) +
                      ") exceeds data.num_classes (" + std::to_string(data.num_classes) + ")");
  }
  if (m == 0) throw ConfigError("refine.m must be >= 1");
  if (score_passes == 0) throw ConfigError("refine.score_passes must be >= 1");
  refine.validate();
  if (!(quantify.gamma >= 0.0 && quantify.gamma <= 1.0)) throw ConfigError("quantify.gamma must lie in [0, 1]");
  if (quantify.n == 0) throw ConfigError("quantify.n must be >= 1");
  if (!(quantify.holdout_fraction > 0.0 && quantify.holdout_fraction < 1.0)) {
    throw ConfigError("quantify.holdout_fraction must lie in (0, 1)");
  }
  if (quantify.passes == 0) throw ConfigError("quantify.passes must be >= 1");
  downstream.validate();
  if (grid.empty()) throw ConfigError("ablate.grid must list at least one m/n pair");
  for (const auto& g : grid) {
    if (g.n == 0 || g.m == 0) throw ConfigError("ablate.grid entries need m, n >= 1");
    if (g.n >= g.m && !(g.m == 1 && g.n == 1)) {
      throw ConfigError("ablate.grid entry " + std::to_string(g.m) + "/" + std::to_string(g.n) +
                        " needs n < m (1/1 is the unrefined single-model baseline)");
    }
  }
}

inline void set_field(PipelineConfig& config, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("override '" + dotted + "' must be section.key");
  const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  for (const auto& f : detail::fields()) {
    if (f.section == section && f.key == key) {
      f.set(config, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key " + dotted);
}

// Applies "section.key=value".
inline void apply_override(PipelineConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must be section.key=value");
  set_field(config, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

// Parses config text on top of the defaults. Does not validate.
inline PipelineConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  PipelineConfig config;
  std::string section;
  const auto rows = io::lines(text);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = source + ":" + std::to_string(i + 1) + ": ";
    std::string line = detail::trim(rows[i]);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside any [section]");
    try {
      set_field(config, section + "." + detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, path.string());
}

inline std::string serialize_config(const PipelineConfig& config) {
  std::string out, section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

inline std::string config_hash(const PipelineConfig& config) {
  std::vector<std::string> lines;
  for (const auto& f : detail::fields())
    if (f.hashed) lines.push_back(f.section + "." + f.key + "=" + f.get(config));
  std::sort(lines.begin(), lines.end());
  std::string canonical;
  for (const auto& l : lines) canonical += l + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical)));
  return buf;
}

}  // namespace mmq
