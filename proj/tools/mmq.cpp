#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmq/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::vector<std::string> inputs;
};

mmq::PipelineConfig resolve(const Options& o) {
  mmq::PipelineConfig c = o.config.empty() ? mmq::PipelineConfig{} : mmq::load_config(o.config);
  for (const auto& s : o.sets) mmq::apply_override(c, s);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out = o.out;
  return c;
}

void print_row(const mmq::ResultRow& r) {
  std::printf("m=%zu n=%zu seed=%llu train_acc=%s test_acc=%s params=%zu\n", r.m, r.n,
              static_cast<unsigned long long>(r.seed), mmq::io::format_float(r.train_accuracy).c_str(),
              mmq::io::format_float(r.test_accuracy).c_str(), r.param_count);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiple meta-model quantifying: meta-training, data refinement, model selection."};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "pipeline config file (INI)");
    sub->add_option("--seed", opt.seed, "root seed override");
    sub->add_option("--out", opt.out, "output directory override");
    sub->add_option("--set", opt.sets, "override as section.key=value (repeatable)");
    return sub;
  };

  auto* gen = add_common(app.add_subcommand("gen-data", "generate the synthetic pool and downstream set"));
  auto* train = add_common(app.add_subcommand("meta-train", "train the round-0 meta-model"));
  auto* loop = add_common(app.add_subcommand("refine-loop", "train m meta-models with refinement between rounds"));
  auto* quant = add_common(app.add_subcommand("quantify", "rank the m meta-models and select n"));
  auto* down = add_common(app.add_subcommand("train-downstream", "fine-tune the answer classifier on the selected trunks"));
  auto* ablate = add_common(app.add_subcommand("ablate", "sweep the ablate.grid (m, n) pairs"));
  auto* full = add_common(app.add_subcommand("full-pipeline", "run every stage in order"));
  auto* report = add_common(app.add_subcommand("report", "render results files as a table"));
  report->add_option("inputs", opt.inputs, "results files (default: <out>/downstream/results.tsv)");
  auto* show = add_common(app.add_subcommand("show-config", "print the resolved config and its hash"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const mmq::StageContext ctx(resolve(opt));
    if (*show) {
      std::cout << mmq::serialize_config(ctx.config) << "\n# config_hash " << ctx.hash << "\n";
    } else if (*gen) {
      mmq::stage_gen_data(ctx);
      std::printf("wrote %s\n", ctx.layout.data_dir().c_str());
    } else if (*train) {
      const auto model = mmq::stage_meta_train(ctx);
      std::printf("round 0: final meta loss %s\n",
                  model.log.empty() ? "-" : mmq::io::format_float(model.log.back().meta_loss).c_str());
    } else if (*loop) {
      const auto result = mmq::stage_refine_loop(ctx);
      for (const auto& r : result.rounds) {
        std::printf("round %zu: demoted %zu promoted %zu |M|=%zu |U|=%zu noisy_in_M=%zu\n", r.round, r.demoted,
                    r.promoted, r.meta_size, r.unlabeled_size, r.noisy_in_meta);
      }
      std::printf("trained %zu meta-models\n", result.models.size());
    } else if (*quant) {
      std::printf("selected rounds:");
      for (std::size_t r : mmq::stage_quantify(ctx)) std::printf(" %zu", r);
      std::printf("\n");
    } else if (*down) {
      print_row(mmq::stage_train_downstream(ctx));
    } else if (*ablate) {
      mmq::stage_ablate(ctx);
      std::cout << mmq::io::read_file(ctx.layout.ablate_table());
    } else if (*full) {
      mmq::stage_full_pipeline(ctx);
      std::cout << mmq::io::read_file(ctx.layout.report_table());
    } else if (*report) {
      std::vector<mmq::fs::path> inputs(opt.inputs.begin(), opt.inputs.end());
      if (inputs.empty()) inputs.push_back(ctx.layout.results());
      std::cout << mmq::stage_report(ctx, inputs).table;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mmq: %s\n", e.what());
    return mmq::exit_code(e);
  }
  return 0;
}
