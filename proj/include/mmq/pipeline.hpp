#pragma once

// Pipeline stages. Each stage reads the artifacts of earlier stages from the
// output directory, checks that they carry the current config hash, and
// writes its own artifacts atomically.
//
//   config.ini                        resolved configuration
//   data/manifest.tsv                 training pool (M/U, injected noise)
//   data/quantify.tsv                 labelled hold-out pool for quantifying
//   data/downstream.tsv               question/answer examples
//   data/images/*.pgm
//   models/round<r>.ckpt              meta-model trunk of round r
//   models/round<r>.metrics.tsv       per-iteration meta losses
//   refine/report.tsv, refine/pool.tsv
//   quantify/report.tsv
//   downstream/model.ckpt, downstream/results.tsv
//   ablate/results.tsv, ablate/table.txt
//   report.tsv, report.txt

#include <chrono>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmq/checkpoint.hpp"
#include "mmq/config.hpp"
#include "mmq/report.hpp"

namespace mmq {

namespace fs = std::filesystem;

class Layout {
 public:
  explicit Layout(fs::path root) : root_(std::move(root)) {}
  const fs::path& root() const { return root_; }
  fs::path config() const { return root_ / "config.ini"; }
  fs::path data_dir() const { return root_ / "data"; }
  fs::path manifest() const { return data_dir() / "manifest.tsv"; }
  fs::path quantify_pool() const { return data_dir() / "quantify.tsv"; }
  fs::path downstream_set() const { return data_dir() / "downstream.tsv"; }
  fs::path checkpoint(std::size_t round) const {
    return root_ / "models" / ("round" + std::to_string(round) + ".ckpt");
  }
  fs::path metrics(std::size_t round) const {
    return root_ / "models" / ("round" + std::to_string(round) + ".metrics.tsv");
  }
  fs::path refine_report() const { return root_ / "refine" / "report.tsv"; }
  fs::path refined_pool() const { return root_ / "refine" / "pool.tsv"; }
  fs::path quantify_report() const { return root_ / "quantify" / "report.tsv"; }
  fs::path downstream_model() const { return root_ / "downstream" / "model.ckpt"; }
  fs::path results() const { return root_ / "downstream" / "results.tsv"; }
  fs::path ablate_results() const { return root_ / "ablate" / "results.tsv"; }
  fs::path ablate_table() const { return root_ / "ablate" / "table.txt"; }
  fs::path ablate_refine_report() const { return root_ / "ablate" / "refine.tsv"; }
  fs::path report_records() const { return root_ / "report.tsv"; }
  fs::path report_table() const { return root_ / "report.txt"; }

 private:
  fs::path root_;
};

inline void require_hash(const std::string& found, const std::string& expected, const std::string& source) {
  if (found != expected) {
    throw DataError(source + " was produced under config hash '" + found + "', current config hash is " +
                    expected + "; re-run the producing stage");
  }
}

// ---------------------------------------------------------------------------
// Downstream set persistence.

inline std::string encode_downstream_set(const DownstreamSet& set, const std::string& config_hash) {
  std::string out = "# mmq-downstream v1\tcontext_dim=" + std::to_string(set.context_dim) +
                    "\tnum_answers=" + std::to_string(set.num_answers) + "\tconfig_hash=" + config_hash +
                    "\n# id\tsplit\timage_ref\ttrue_class\tcontext\tanswer\n";
  for (const auto* part : {&set.train, &set.test}) {
    const char* split = part == &set.train ? "train" : "test";
    for (const auto& ex : *part) {
      out += ex.id + "\t" + split + "\t" + ex.image_ref + "\t" + std::to_string(ex.true_class) + "\t" +
             std::to_string(ex.context) + "\t" + std::to_string(ex.answer) + "\n";
    }
  }
  return out;
}

inline std::pair<DownstreamSet, std::string> read_downstream_set(const fs::path& path, const fs::path& image_root) {
  const std::string source = path.string();
  const auto rows = io::lines(io::read_file(path));
  if (rows.empty() || rows[0].rfind("# mmq-downstream v1", 0) != 0) {
    throw ParseError(source, 1, "missing '# mmq-downstream v1' header");
  }
  auto fields = parse_header_fields(rows[0], source);
  DownstreamSet set;
  set.context_dim = static_cast<std::size_t>(parse_int(fields["context_dim"], source, 1));
  set.num_answers = static_cast<std::size_t>(parse_int(fields["num_answers"], source, 1));
  std::map<std::string, Tensor> images;
  for (std::size_t ln = 1; ln < rows.size(); ++ln) {
    if (rows[ln].empty() || rows[ln][0] == '#') continue;
    const auto cols = io::split(rows[ln], '\t');
    if (cols.size() != 6) throw ParseError(source, ln + 1, "expected 6 tab-separated fields");
    if (cols[1] != "train" && cols[1] != "test") throw ParseError(source, ln + 1, "split must be train or test");
    DownstreamExample ex;
    ex.id = cols[0];
    ex.image_ref = cols[2];
    ex.true_class = parse_int(cols[3], source, ln + 1);
    ex.context = parse_int(cols[4], source, ln + 1);
    ex.answer = parse_int(cols[5], source, ln + 1);
    if (ex.context < 0 || static_cast<std::size_t>(ex.context) >= set.context_dim) {
      throw ParseError(source, ln + 1, "context outside [0, context_dim)");
    }
    if (ex.answer < 0 || static_cast<std::size_t>(ex.answer) >= set.num_answers) {
      throw ParseError(source, ln + 1, "answer outside [0, num_answers)");
    }
    auto it = images.find(ex.image_ref);
    if (it == images.end()) {
      const auto p = image_root / ex.image_ref;
      it = images.emplace(ex.image_ref, io::decode_pgm(io::read_file(p), p.string())).first;
    }
    ex.image = it->second;
    (cols[1] == "train" ? set.train : set.test).push_back(std::move(ex));
  }
  return {std::move(set), fields["config_hash"]};
}

// ---------------------------------------------------------------------------
// Stage context.

struct StageContext {
  PipelineConfig config;
  std::string hash;
  Layout layout;

  explicit StageContext(PipelineConfig c) : config(std::move(c)), hash(config_hash(config)), layout(config.out) {
    config.validate();
  }
};

inline DataPool load_pool(const StageContext& ctx, const fs::path& path) {
  auto [pool, header] = read_manifest(path, ctx.layout.data_dir());
  require_hash(header.config_hash, ctx.hash, path.string());
  return pool;
}

inline void save_model(const StageContext& ctx, const MetaModel& model) {
  write_checkpoint(ctx.layout.checkpoint(model.round),
                   model.net.to_checkpoint({{"config_hash", ctx.hash}, {"round", std::to_string(model.round)}}));
  io::write_file_atomic(ctx.layout.metrics(model.round), encode_metrics(model, ctx.hash));
}

inline FeatureNet load_model(const StageContext& ctx, std::size_t round) {
  const auto path = ctx.layout.checkpoint(round);
  const Checkpoint ckpt = read_checkpoint(path);
  require_hash(ckpt.meta_value("config_hash"), ctx.hash, path.string());
  FeatureNet net = FeatureNet::from_checkpoint(ckpt);
  if (!(net.spec() == ctx.config.net_spec())) throw DataError(path.string() + " has a different trunk geometry");
  return net;
}

// ---------------------------------------------------------------------------
// Stages.

inline void stage_gen_data(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  SyntheticData data = generate(cfg.generator());
  Rng holdout_rng = Rng::stream(cfg.seed, "holdout");
  auto [rest, held] = carve_holdout(data.pool, cfg.quantify.holdout_fraction, holdout_rng);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  DataPool pool = inject_noise(rest, cfg.noise_rate, noise_rng);

  std::set<std::string> written;
  auto write_image = [&](const std::string& ref, const Tensor& image) {
    if (written.insert(ref).second) io::write_file_atomic(ctx.layout.data_dir() / ref, io::encode_pgm(image));
  };
  for (const auto& s : data.pool.samples()) write_image(s.image_ref, s.image);
  for (const auto* part : {&data.downstream.train, &data.downstream.test})
    for (const auto& ex : *part) write_image(ex.image_ref, ex.image);
  io::write_file_atomic(ctx.layout.manifest(), encode_manifest(pool, ctx.hash));
  io::write_file_atomic(ctx.layout.quantify_pool(), encode_manifest(held, ctx.hash));
  io::write_file_atomic(ctx.layout.downstream_set(), encode_downstream_set(data.downstream, ctx.hash));
  io::write_file_atomic(ctx.layout.config(), serialize_config(cfg));
}

inline MetaModel stage_meta_train(const StageContext& ctx) {
  const DataPool pool = load_pool(ctx, ctx.layout.manifest());
  MetaModel model = meta_train(pool, ctx.config.train, ctx.config.net_spec(), ctx.config.seed, 0);
  save_model(ctx, model);
  return model;
}

inline LoopResult stage_refine_loop(const StageContext& ctx) {
  const DataPool pool = load_pool(ctx, ctx.layout.manifest());
  LoopResult loop = refinement_loop(pool, ctx.config.loop(ctx.config.m), ctx.config.net_spec(), ctx.config.seed,
                                    [&](const MetaModel& m) { save_model(ctx, m); });
  io::write_file_atomic(ctx.layout.refine_report(), encode_refine_report(loop.rounds, ctx.hash));
  io::write_file_atomic(ctx.layout.refined_pool(), encode_manifest(loop.pool, ctx.hash));
  return loop;
}

// Candidate rounds in selection order. m = 1 skips quantifying and uses the
// only model.
inline std::vector<std::size_t> quantify_candidates(std::span<const FeatureNet> models, const DataPool& held,
                                                    const DataPool& support, const PipelineConfig& cfg,
                                                    std::size_t n, QuantifyResult* out = nullptr) {
  Rng rng = Rng::stream(cfg.seed, "quantify");
  const auto records = collect_quantify_records(models, held, support, cfg.quantify_scoring(), rng);
  FuseConfig fc = cfg.quantify;
  fc.n = n;
  QuantifyResult r = quantify(records, models.size(), fc);
  if (out) *out = r;
  return r.selected;
}

inline std::vector<std::size_t> stage_quantify(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  if (cfg.m < 2) throw ConfigError("quantify needs refine.m >= 2 candidate models");
  std::vector<FeatureNet> models;
  for (std::size_t r = 0; r < cfg.m; ++r) models.push_back(load_model(ctx, r));
  const DataPool held = load_pool(ctx, ctx.layout.quantify_pool());
  const DataPool support = load_pool(ctx, ctx.layout.manifest());
  QuantifyResult result;
  auto selected = quantify_candidates(models, held, support, cfg, cfg.quantify.n, &result);
  std::vector<std::size_t> rounds(cfg.m);
  std::iota(rounds.begin(), rounds.end(), std::size_t{0});
  io::write_file_atomic(ctx.layout.quantify_report(), encode_quantify_report(result, rounds, ctx.hash));
  return selected;
}

// Selected rounds from a quantify report, in rank order.
inline std::vector<std::size_t> read_quantify_selection(const fs::path& path, const std::string& expected_hash) {
  const std::string source = path.string();
  const auto rows = io::lines(io::read_file(path));
  if (rows.empty() || rows[0].rfind("# mmq-quantify v1", 0) != 0) {
    throw ParseError(source, 1, "missing '# mmq-quantify v1' header");
  }
  require_hash(parse_header_fields(rows[0], source)["config_hash"], expected_hash, source);
  std::map<int, std::size_t> by_rank;
  for (std::size_t ln = 1; ln < rows.size(); ++ln) {
    if (rows[ln].empty() || rows[ln][0] == '#') continue;
    const auto cols = io::split(rows[ln], '\t');
    if (cols.size() != 6) throw ParseError(source, ln + 1, "expected 6 tab-separated fields");
    if (cols[5] == "-") continue;
    by_rank[parse_int(cols[5], source, ln + 1)] = static_cast<std::size_t>(parse_int(cols[0], source, ln + 1));
  }
  std::vector<std::size_t> selected;
  for (const auto& [rank, round] : by_rank) selected.push_back(round);
  if (selected.empty()) throw DataError(source + " selects no models");
  return selected;
}

struct DownstreamRun {
  FinetuneResult result;
  std::size_t param_count = 0;
  DownstreamModel model;
};

inline DownstreamRun run_downstream(std::vector<FeatureNet> trunks, const DownstreamSet& set,
                                    const PipelineConfig& cfg) {
  DownstreamModel model(std::move(trunks), set.context_dim, set.num_answers);
  Rng rng = Rng::stream(cfg.seed, "finetune");
  FinetuneResult r = finetune(model, set.train, set.test, cfg.downstream, rng);
  return {r, model.parameter_count(), std::move(model)};
}

inline Checkpoint downstream_checkpoint(const DownstreamModel& model, std::span<const std::size_t> rounds,
                                        const std::string& config_hash) {
  Checkpoint ckpt;
  std::string joined;
  for (std::size_t i = 0; i < rounds.size(); ++i) joined += (i ? "," : "") + std::to_string(rounds[i]);
  ckpt.meta = {{"kind", "downstream"}, {"config_hash", config_hash}, {"rounds", joined}};
  const auto names = FeatureNet::param_names();
  for (std::size_t t = 0; t < model.trunks().size(); ++t)
    for (std::size_t i = 0; i < names.size(); ++i)
      ckpt.params.push_back({"trunk" + std::to_string(t) + "." + names[i], model.trunks()[t].params()[i]});
  ckpt.params.push_back({"classifier.weight", model.weight()});
  ckpt.params.push_back({"classifier.bias", model.bias()});
  return ckpt;
}

// Rewrites a results file, replacing any row with the same (hash, m, n, seed).
inline void upsert_result(const fs::path& path, const ResultRow& row) {
  std::vector<std::string> kept;
  if (fs::exists(path)) {
    for (const auto& r : parse_results(io::read_file(path), path.string())) {
      if (r.fields[0] == row.config_hash && r.fields[1] == std::to_string(row.m) &&
          r.fields[2] == std::to_string(row.n) && r.fields[3] == std::to_string(row.seed)) {
        continue;
      }
      kept.push_back(r.line);
    }
  }
  std::string out = kResultsHeader;
  for (const auto& l : kept) out += l + "\n";
  out += encode_result_row(row);
  io::write_file_atomic(path, out);
}

inline ResultRow stage_train_downstream(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> rounds =
      cfg.m == 1 ? std::vector<std::size_t>{0} : read_quantify_selection(ctx.layout.quantify_report(), ctx.hash);
  std::vector<FeatureNet> trunks;
  for (std::size_t r : rounds) trunks.push_back(load_model(ctx, r));
  auto [set, hash] = read_downstream_set(ctx.layout.downstream_set(), ctx.layout.data_dir());
  require_hash(hash, ctx.hash, ctx.layout.downstream_set().string());
  DownstreamRun run = run_downstream(std::move(trunks), set, cfg);
  write_checkpoint(ctx.layout.downstream_model(), downstream_checkpoint(run.model, rounds, ctx.hash));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ResultRow row{ctx.hash, cfg.m, rounds.size(), cfg.seed, run.result.train_accuracy, run.result.test_accuracy,
                wall, run.param_count};
  upsert_result(ctx.layout.results(), row);
  return row;
}

inline Rendered stage_report(const StageContext& ctx, std::span<const fs::path> inputs) {
  Rendered r = report_render(inputs);
  io::write_file_atomic(ctx.layout.report_records(), r.records);
  io::write_file_atomic(ctx.layout.report_table(), r.table);
  return r;
}

// Sweeps the (m, n) grid: one refinement loop up to the largest m, then
// quantify and a downstream run per grid point. The time column is the
// training time of the m meta-models plus the downstream fine-tune.
struct AblateResult {
  std::vector<ResultRow> rows;
  std::vector<RoundStats> rounds;
};

inline AblateResult stage_ablate(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  const DataPool pool = load_pool(ctx, ctx.layout.manifest());
  const DataPool held = load_pool(ctx, ctx.layout.quantify_pool());
  auto [set, hash] = read_downstream_set(ctx.layout.downstream_set(), ctx.layout.data_dir());
  require_hash(hash, ctx.hash, ctx.layout.downstream_set().string());

  std::size_t max_m = 0;
  for (const auto& g : cfg.grid) max_m = std::max(max_m, g.m);
  std::vector<double> cumulative;
  auto last = std::chrono::steady_clock::now();
  double total = 0.0;
  LoopResult loop = refinement_loop(pool, cfg.loop(max_m), cfg.net_spec(), cfg.seed, [&](const MetaModel&) {
    const auto now = std::chrono::steady_clock::now();
    total += std::chrono::duration<double>(now - last).count();
    cumulative.push_back(total);
    last = now;
  });
  std::vector<FeatureNet> models;
  for (const auto& m : loop.models) models.push_back(m.net);

  std::vector<ResultRow> rows;
  std::string out = kResultsHeader;
  for (const auto& g : cfg.grid) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> selected{0};
    if (g.m > 1) {
      selected = quantify_candidates(std::span<const FeatureNet>(models).first(g.m), held, pool, cfg, g.n);
    }
    std::vector<FeatureNet> trunks;
    for (std::size_t i : selected) trunks.push_back(models[i]);
    DownstreamRun run = run_downstream(std::move(trunks), set, cfg);
    const double tune = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ResultRow row{ctx.hash, g.m, g.n, cfg.seed, run.result.train_accuracy, run.result.test_accuracy,
                  cumulative[g.m - 1] + tune, run.param_count};
    out += encode_result_row(row);
    rows.push_back(row);
  }
  io::write_file_atomic(ctx.layout.ablate_results(), out);
  io::write_file_atomic(ctx.layout.ablate_refine_report(), encode_refine_report(loop.rounds, ctx.hash));
  const fs::path inputs[] = {ctx.layout.ablate_results()};
  io::write_file_atomic(ctx.layout.ablate_table(), report_render(inputs).table);
  return {rows, loop.rounds};
}

inline ResultRow stage_full_pipeline(const StageContext& ctx) {
  stage_gen_data(ctx);
  stage_refine_loop(ctx);
  if (ctx.config.m > 1) stage_quantify(ctx);
  ResultRow row = stage_train_downstream(ctx);
  const fs::path inputs[] = {ctx.layout.results()};
  stage_report(ctx, inputs);
  return row;
}

}  // namespace mmq
