#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmq/io.hpp"
#include "mmq/rng.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

struct Sample {
  std::string id;
  Tensor image;                   // [C,H,W]
  std::optional<int> meta_label;  // present iff the sample is in the meta split
  int true_label = 0;             // evaluation only
  bool noisy = false;             // meta label assigned != true label
  std::string image_ref;

  bool in_meta() const noexcept { return meta_label.has_value(); }
};

// Meta split M (labelled) and unlabeled split U. Membership is carried by the
// presence of a meta label, so the two splits are disjoint by construction.
class DataPool {
 public:
  DataPool() = default;

  DataPool(std::size_t num_classes, std::vector<Sample> samples)
      : num_classes_(num_classes), samples_(std::move(samples)) {
    if (num_classes_ < 2) throw ConfigError("a data pool needs at least 2 classes");
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const Sample& s = samples_[i];
      check_label(s.true_label, s.id);
      if (s.meta_label) check_label(*s.meta_label, s.id);
      if (!index_.emplace(s.id, i).second) throw DataError("duplicate sample id " + s.id);
    }
  }

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const Sample& operator[](std::size_t i) const { return samples_.at(i); }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::size_t> meta_indices() const { return indices(true); }
  std::vector<std::size_t> unlabeled_indices() const { return indices(false); }
  std::size_t meta_size() const { return meta_indices().size(); }
  std::size_t unlabeled_size() const { return unlabeled_indices().size(); }

  // Meta-split sample indices grouped by meta label.
  std::vector<std::vector<std::size_t>> meta_by_class() const {
    std::vector<std::vector<std::size_t>> by(num_classes_);
    for (std::size_t i = 0; i < samples_.size(); ++i)
      if (samples_[i].meta_label) by[static_cast<std::size_t>(*samples_[i].meta_label)].push_back(i);
    return by;
  }

  std::size_t mislabeled_in_meta() const {
    std::size_t n = 0;
    for (const auto& s : samples_)
      if (s.meta_label && *s.meta_label != s.true_label) ++n;
    return n;
  }

  void assign_label(std::size_t i, int label) {
    check_label(label, samples_.at(i).id);
    samples_[i].meta_label = label;
    samples_[i].noisy = label != samples_[i].true_label;
  }

  void strip_label(std::size_t i) { samples_.at(i).meta_label.reset(); }

 private:
  void check_label(int label, const std::string& id) const {
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes_) {
      throw LabelError("sample " + id + " has label " + std::to_string(label) + " outside [0, " +
                       std::to_string(num_classes_) + ")");
    }
  }

  std::vector<std::size_t> indices(bool meta) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples_.size(); ++i)
      if (samples_[i].in_meta() == meta) out.push_back(i);
    return out;
  }

  std::size_t num_classes_ = 0;
  std::vector<Sample> samples_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Episodic sampling.

struct EpisodeProtocol {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 3;
  std::size_t images_per_class = 6;
  std::size_t update_per_class = 3;  // the rest of each class goes to validation

  // x=5 tasks, 3 of 9 classes, 6 images (3 update / 3 validation).
  static EpisodeProtocol vqa_rad_like() { return {5, 3, 6, 3}; }
  // x=4 tasks, 5 of 31 classes, 20 images (5 update / 15 validation).
  static EpisodeProtocol path_vqa_like() { return {4, 5, 20, 5}; }

  void validate() const {
    if (tasks == 0) throw ConfigError("episode protocol: tasks must be >= 1");
    if (classes_per_task < 2) throw ConfigError("episode protocol: classes_per_task must be >= 2");
    if (update_per_class == 0 || update_per_class >= images_per_class) {
      throw ConfigError("episode protocol: update_per_class must be in [1, images_per_class)");
    }
  }
};

struct Task {
  std::vector<int> classes;  // pool class of each task-local label
  std::vector<std::size_t> train, val;
  std::vector<int> train_labels, val_labels;  // task-local
};

struct Episode {
  std::vector<Task> tasks;
};

inline Episode sample_episode(const DataPool& pool, const EpisodeProtocol& protocol, Rng& rng) {
  protocol.validate();
  const auto by_class = pool.meta_by_class();
  std::vector<int> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() >= protocol.images_per_class) eligible.push_back(static_cast<int>(c));
  if (eligible.size() < protocol.classes_per_task) {
    std::size_t deficient = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      if (by_class[c].size() < protocol.images_per_class) {
        deficient = c;
        break;
      }
    }
    throw CapacityError("meta split supports only " + std::to_string(eligible.size()) + " of " +
                        std::to_string(protocol.classes_per_task) +
                        " classes needed per task; class " + std::to_string(deficient) + " has " +
                        std::to_string(by_class[deficient].size()) + " meta samples, needs " +
                        std::to_string(protocol.images_per_class));
  }
  Episode episode;
  for (std::size_t t = 0; t < protocol.tasks; ++t) {
    Task task;
    for (std::size_t pick : rng.choose(eligible.size(), protocol.classes_per_task)) {
      task.classes.push_back(eligible[pick]);
    }
    for (std::size_t local = 0; local < task.classes.size(); ++local) {
      const auto& members = by_class[static_cast<std::size_t>(task.classes[local])];
      const auto chosen = rng.choose(members.size(), protocol.images_per_class);
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        const bool update = j < protocol.update_per_class;
        (update ? task.train : task.val).push_back(members[chosen[j]]);
        (update ? task.train_labels : task.val_labels).push_back(static_cast<int>(local));
      }
    }
    episode.tasks.push_back(std::move(task));
  }
  return episode;
}

// ---------------------------------------------------------------------------
// Label noise and hold-out carving.

inline DataPool inject_noise(const DataPool& pool, double noise_rate, Rng& rng) {
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
    throw ConfigError("noise_rate must lie in [0, 1), got " + io::format_float(noise_rate));
  }
  DataPool out = pool;
  const auto meta = pool.meta_indices();
  const auto count = static_cast<std::size_t>(std::llround(noise_rate * static_cast<double>(meta.size())));
  for (std::size_t pick : rng.choose(meta.size(), count)) {
    const std::size_t i = meta[pick];
    const int truth = pool[i].true_label;
    int flipped = static_cast<int>(rng.index(pool.num_classes() - 1));
    if (flipped >= truth) ++flipped;
    out.assign_label(i, flipped);
  }
  return out;
}

// Moves round(fraction * |class|) meta samples of every class into a separate
// all-labelled pool. Returns {remaining pool, hold-out pool}.
inline std::pair<DataPool, DataPool> carve_holdout(const DataPool& pool, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ConfigError("hold-out fraction must lie in [0, 1), got " + io::format_float(fraction));
  }
  std::set<std::size_t> taken;
  for (const auto& members : pool.meta_by_class()) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    for (std::size_t pick : rng.choose(members.size(), k)) taken.insert(members[pick]);
  }
  std::vector<Sample> rest, held;
  for (std::size_t i = 0; i < pool.size(); ++i) (taken.count(i) ? held : rest).push_back(pool[i]);
  return {DataPool(pool.num_classes(), std::move(rest)), DataPool(pool.num_classes(), std::move(held))};
}

// ---------------------------------------------------------------------------
// Manifest: one tab-separated line per sample,
//   id  split(M|U)  meta_label(-)  noisy(0|1)  image_ref  true_label
// preceded by a '#' header carrying the class count and config hash.

struct ManifestHeader {
  std::size_t num_classes = 0;
  std::string config_hash;
};

inline std::string encode_manifest(const DataPool& pool, const std::string& config_hash) {
  std::string out = "# mmq-pool v1\tnum_classes=" + std::to_string(pool.num_classes()) +
                    "\tconfig_hash=" + config_hash + "\n";
  for (const auto& s : pool.samples()) {
    out += s.id + "\t" + (s.in_meta() ? "M" : "U") + "\t" +
           (s.meta_label ? std::to_string(*s.meta_label) : "-") + "\t" + (s.noisy ? "1" : "0") +
           "\t" + s.image_ref + "\t" + std::to_string(s.true_label) + "\n";
  }
  return out;
}

inline std::map<std::string, std::string> parse_header_fields(const std::string& line,
                                                              const std::string& source) {
  std::map<std::string, std::string> fields;
  auto parts = io::split(line, '\t');
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw ParseError(source, 1, "malformed header field '" + parts[i] + "'");
    fields[parts[i].substr(0, eq)] = parts[i].substr(eq + 1);
  }
  return fields;
}

inline int parse_int(const std::string& text, const std::string& source, std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ParseError(source, line, "expected an integer, got '" + text + "'");
  }
}

// Reads a manifest; images are loaded from `image_root / image_ref`.
inline std::pair<DataPool, ManifestHeader> read_manifest(const std::filesystem::path& path,
                                                         const std::filesystem::path& image_root) {
  const std::string source = path.string();
  const auto text = io::read_file(path);
  const auto rows = io::lines(text);
  if (rows.empty() || rows[0].rfind("# mmq-pool v1", 0) != 0) {
    throw ParseError(source, 1, "missing '# mmq-pool v1' header");
  }
  auto fields = parse_header_fields(rows[0], source);
  ManifestHeader header{static_cast<std::size_t>(parse_int(fields["num_classes"], source, 1)),
                        fields["config_hash"]};
  std::vector<Sample> samples;
  for (std::size_t ln = 1; ln < rows.size(); ++ln) {
    if (rows[ln].empty()) continue;
    auto cols = io::split(rows[ln], '\t');
    if (cols.size() != 6) throw ParseError(source, ln + 1, "expected 6 tab-separated fields");
    Sample s;
    s.id = cols[0];
    if (cols[1] != "M" && cols[1] != "U") throw ParseError(source, ln + 1, "split must be M or U");
    if ((cols[1] == "M") != (cols[2] != "-")) {
      throw ParseError(source, ln + 1, "meta label must be present exactly for M samples");
    }
    if (cols[2] != "-") s.meta_label = parse_int(cols[2], source, ln + 1);
    if (cols[3] != "0" && cols[3] != "1") throw ParseError(source, ln + 1, "noisy flag must be 0 or 1");
    s.noisy = cols[3] == "1";
    s.image_ref = cols[4];
    s.true_label = parse_int(cols[5], source, ln + 1);
    const auto image_path = image_root / s.image_ref;
    s.image = io::decode_pgm(io::read_file(image_path), image_path.string());
    samples.push_back(std::move(s));
  }
  return {DataPool(header.num_classes, std::move(samples)), header};
}

}  // namespace mmq
