#include <gtest/gtest.h>

#include <filesystem>

#include "mmq/config.hpp"
#include "mmq/report.hpp"

namespace {

using namespace mmq;
namespace fs = std::filesystem;

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(PipelineConfig{}.validate()); }

TEST(Config, SerializeParseRoundTrip) {
  PipelineConfig c;
  c.seed = 17;
  c.refine.tau_low = 0.25f;
  c.train.mode = GradientMode::first_order;
  c.refine.rule = DemotionRule::label_low;
  c.downstream.freeze = true;
  c.grid = {{1, 1}, {6, 2}};
  const auto back = parse_config(serialize_config(c));
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.grid, c.grid);
}

TEST(Config, HashIgnoresKeyOrderCommentsAndOutDir) {
  const auto a = parse_config("[refine]\nm = 4\ntau_low = 0.3\n[global]\nseed = 2\n");
  const auto b = parse_config("# reordered\n[global]\nseed=2\nout = elsewhere\n\n[refine]\n; c\ntau_low=0.3\nm=4\n");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_NE(config_hash(a), config_hash(parse_config("[refine]\nm = 5\ntau_low = 0.3\n[global]\nseed = 2\n")));
  EXPECT_NE(config_hash(a), config_hash(PipelineConfig{}));
}

TEST(Config, ErrorsNameFileAndLine) {
  auto fails = [](const std::string& text, const std::string& fragment) {
    try {
      parse_config(text, "run.ini");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  fails("[train]\niterations = ten\n", "run.ini:2: train.iterations");
  fails("[train]\n\nbogus = 1\n", "run.ini:3: unknown config key train.bogus");
  fails("seed = 1\n", "run.ini:1: key outside");
  fails("[global\n", "run.ini:1: unterminated");
  fails("[global]\nseed\n", "run.ini:2: expected key = value");
  fails("[refine]\ntau_low = nan\n", "run.ini:2");
  fails("[downstream]\nfreeze = maybe\n", "true or false");
  fails("[ablate]\ngrid = 3-1\n", "m/n pairs");
  fails("[refine]\ndemotion_rule = sometimes\n", "demotion");
}

TEST(Config, ValidationRejectsInconsistentValues) {
  auto invalid = [](const std::string& assignment) {
    PipelineConfig c;
    apply_override(c, assignment);
    EXPECT_THROW(c.validate(), ConfigError) << assignment;
  };
  invalid("refine.tau_low=0.95");
  invalid("refine.m=0");
  invalid("quantify.gamma=1.5");
  invalid("quantify.holdout_fraction=0");
  invalid("data.noise_rate=1");
  invalid("data.image_size=20");
  invalid("ablate.grid=3/3");
  invalid("downstream.lr=0");
  invalid("train.classes_per_task=12");
  PipelineConfig ok;
  apply_override(ok, "ablate.grid=1/1,5/3");
  EXPECT_NO_THROW(ok.validate());
}

TEST(Config, OverridesApplyAndReject) {
  PipelineConfig c;
  apply_override(c, "train.inner_lr = 0.125");
  apply_override(c, "global.seed=9");
  EXPECT_FLOAT_EQ(c.train.inner_lr, 0.125f);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_THROW(apply_override(c, "train.inner_lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "inner_lr=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "global.seed=-1"), ConfigError);
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/mmq.ini"), ConfigError);
}

// ---------------------------------------------------------------------------
// Report.

class ReportFiles : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / "mmq_test_report";
  void SetUp() override { fs::create_directories(dir); }
  void TearDown() override { fs::remove_all(dir); }
  fs::path write(const std::string& name, const std::string& text) {
    io::write_file_atomic(dir / name, text);
    return dir / name;
  }
};

TEST_F(ReportFiles, RowsSortedByMThenNAndEchoedVerbatim) {
  const std::string rows[] = {"h\t5\t3\t0\t0.9\t0.8125\t12.5\t100", "h\t3\t1\t0\t0.7\t0.6\t1.0\t50",
                              "h\t5\t2\t1\t0.95\t0.75000\t3\t80"};
  const auto a = write("a.tsv", std::string(kResultsHeader) + rows[0] + "\n" + rows[1] + "\n");
  const auto b = write("b.tsv", std::string(kResultsHeader) + rows[2] + "\n");
  const fs::path inputs[] = {a, b};
  const auto r = report_render(inputs);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].line, rows[1]);
  EXPECT_EQ(r.rows[1].line, rows[2]);
  EXPECT_EQ(r.rows[2].line, rows[0]);
  EXPECT_EQ(r.records, std::string(kResultsHeader) + rows[1] + "\n" + rows[2] + "\n" + rows[0] + "\n");
  EXPECT_NE(r.table.find("0.75000"), std::string::npos);
  EXPECT_EQ(r.table.rfind("config h\n", 0), 0u);
}

TEST_F(ReportFiles, MalformedRowNamesItsLine) {
  const auto p = write("bad.tsv", std::string(kResultsHeader) + "h\t3\t1\t0\t0.7\t0.6\t1.0\t50\nh\t3\tx\t0\t0.7\t0.6\t1.0\t50\n");
  const fs::path inputs[] = {p};
  try {
    report_render(inputs);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("bad.tsv:4"), std::string::npos);
  }
  const auto short_row = write("short.tsv", std::string(kResultsHeader) + "h\t3\t1\n");
  const fs::path more[] = {short_row};
  EXPECT_THROW(report_render(more), ParseError);
}

TEST_F(ReportFiles, MissingHeaderEmptyAndMixedHashesAreDataErrors) {
  const auto no_header = write("nh.tsv", "h\t3\t1\t0\t0.7\t0.6\t1.0\t50\n");
  const auto empty = write("e.tsv", kResultsHeader);
  const auto h1 = write("h1.tsv", std::string(kResultsHeader) + "h1\t3\t1\t0\t0.7\t0.6\t1.0\t50\n");
  const auto h2 = write("h2.tsv", std::string(kResultsHeader) + "h2\t3\t1\t0\t0.7\t0.6\t1.0\t50\n");
  for (const auto& inputs : {std::vector<fs::path>{no_header}, std::vector<fs::path>{empty},
                             std::vector<fs::path>{h1, h2}, std::vector<fs::path>{dir / "absent.tsv"}}) {
    EXPECT_THROW(report_render(inputs), DataError);
  }
}

}  // namespace
