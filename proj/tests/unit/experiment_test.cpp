#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "alphanet/experiment.hpp"

using namespace alphanet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("alphanet_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c;
  c.toy_classes = 3;
  c.toy_per_class = 3;
  c.toy_size = 8;
  c.val_fraction = 0;
  c.net.num_classes = 3;
  c.net.input_size = 8;
  c.net.base_width = 4;
  c.train.max_epochs = 1;
  c.train.batch_size = 9;
  c.precision = Precision::double_;
  c.out_dir = out.string();
  return c;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Config, TextRoundTripReproducesEveryKey) {
  ExperimentConfig c;
  c.set_seed(42);
  c.net.version = Version::v3;
  c.net.stage_blocks = {1, 2, 3, 4};
  c.train.lr0 = 0.0123456789012345;
  c.train.loss.slope = -0.25;
  c.normalization = Normalization::log;
  c.eval.scales = {24, 32};
  const auto back = parse_config(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(back.train.lr0, c.train.lr0);
  EXPECT_EQ(back.net.stage_blocks, c.net.stage_blocks);
  EXPECT_EQ(back.seed(), 42u);
  EXPECT_EQ(back.train.seed, 42u);

  const auto j = to_json(c);
  EXPECT_EQ(j.at("version"), "v3");
  EXPECT_EQ(j.size(), lines(to_text(c)).size());
  for (const auto& [k, v] : j.items()) EXPECT_EQ(get_config_value(c, k), v.get<std::string>()) << k;
}

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
  const auto c = parse_config("# comment\n\n  loss = softmax \nmax_epochs=7\n");
  EXPECT_EQ(c.train.loss.kind, LossKind::softmax);
  EXPECT_EQ(c.train.max_epochs, 7u);
  EXPECT_EQ(c.resolved_head(), HeadKind::affine);
  EXPECT_THROW(parse_config("learning_rate = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("lr0\n"), ConfigError);
  EXPECT_THROW(parse_config("lr0 = fast\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/alphanet.cfg"), IoError);
  ExperimentConfig bad;
  bad.val_fraction = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Reference, EmbeddedTableMatchesDataFile) {
  std::ifstream f(std::string(ALPHANET_TEST_DATA) + "/paper_reference.csv");
  ASSERT_TRUE(f);
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "table,row,column,top1");
  std::size_t n = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::istringstream ls(line);
    for (std::string p; std::getline(ls, p, ',');) parts.push_back(p);
    ASSERT_EQ(parts.size(), 4u) << line;
    EXPECT_EQ(reference_top1(std::stoi(parts[0]), parts[1], parts[2]), parts[3]) << line;
    ++n;
  }
  EXPECT_EQ(n, std::size(reference_values));
  EXPECT_EQ(reference_top1(1, "v3", "alpha"), "79.5");
  EXPECT_FALSE(reference_top1(1, "v5", "alpha"));
}

TEST(Results, CsvRowsAndReferenceSelection) {
  ResultRow r{"v1", "alpha", "zscore", "am_softmax_linear", 16, 0, 0.5, 1000, 1.25, "79.0", ""};
  EXPECT_EQ(csv_line(r), "v1,alpha,zscore,am_softmax_linear,16,0,0.500000,1000,1.250,79.0");
  r.top1.reset();
  EXPECT_NE(csv_line(r).find(",failed,"), std::string::npos);
  ExperimentConfig c;
  c.net.version = Version::v2;
  c.reference_table = 3;
  c.normalization = Normalization::alpha;
  EXPECT_EQ(reference_for(c), "71.2");
  c.reference_table = 4;
  EXPECT_EQ(reference_for(c), "79.1");
  EXPECT_EQ(cell_name(ExperimentConfig{}), "v1-alpha-zscore-am_softmax_linear-d16-s0");
}

TEST(Experiment, RunWritesArtifactsAndIsDeterministic) {
  const auto out = scratch("run");
  const auto c = tiny(out);
  const auto a = run_experiment(c);
  const auto dir = out / cell_name(c);
  for (const char* f : {"config.cfg", "history.csv", "model.manifest", "model.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string history = read_text(dir / "history.csv");
  const auto b = run_experiment(c);
  EXPECT_EQ(read_text(dir / "history.csv"), history);
  EXPECT_EQ(a.row.top1, b.row.top1);
  EXPECT_EQ(a.row.param_count, b.row.param_count);
  EXPECT_EQ(a.row.paper_ref_top1, "79.0");

  const auto csv = lines(read_text(out / "results.csv"));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], results_header);
  const auto j = nlohmann::json::parse(read_text(out / "rows" / (cell_name(c) + ".json")));
  EXPECT_EQ(j["row"]["paper_ref_note"], "reference, not reproduced");
  EXPECT_EQ(j["config"]["toy_size"], "8");
  EXPECT_EQ(parse_config(read_text(dir / "config.cfg")).out_dir, c.out_dir);
  fs::remove_all(out);
}

TEST(Sweep, GridHasOneCellPerVersionAndVariant) {
  const auto out = scratch("grid");
  SweepConfig s;
  s.base = tiny(out);
  s.axis = SweepAxis::structure;
  std::size_t seen = 0;
  const auto r = sweep(s, [&](const SweepCell&) { ++seen; });
  EXPECT_EQ(r.cells.size(), 12u);
  EXPECT_EQ(seen, 12u);
  for (const auto* f : r.failed()) ADD_FAILURE() << f->version << "/" << f->variant << ": " << f->row.error;
  const auto pivot = lines(pivot_csv(r));
  ASSERT_EQ(pivot.size(), 5u);
  EXPECT_EQ(pivot[0], "version,layers,plain,residual,alpha,paper_plain,paper_residual,paper_alpha");
  EXPECT_EQ(pivot[3].substr(0, 7), "v3,512,");
  EXPECT_EQ(pivot[3].substr(pivot[3].size() - 15), ",76.3,76.5,79.5");
  EXPECT_EQ(lines(read_text(out / "results.csv")).size(), 13u);
  fs::remove_all(out);
}

TEST(Sweep, EmptyGridAndFailedCells) {
  const auto out = scratch("fail");
  SweepConfig s;
  s.base = tiny(out);
  s.axis = SweepAxis::loss;
  s.versions = {};
  EXPECT_TRUE(sweep(s).cells.empty());
  EXPECT_FALSE(fs::exists(out / "results.csv"));

  s.versions = {"v1"};
  s.variants = {"hinge", "softmax"};
  const auto r = sweep(s);
  ASSERT_EQ(r.cells.size(), 2u);
  ASSERT_EQ(r.failed().size(), 1u);
  EXPECT_EQ(r.failed()[0]->variant, "hinge");
  EXPECT_NE(r.failed()[0]->row.error.find("hinge"), std::string::npos);
  EXPECT_TRUE(r.cells[1].row.top1.has_value());
  const auto csv = lines(read_text(out / "results.csv"));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_NE(csv[1].find(",failed,"), std::string::npos);
  EXPECT_NE(pivot_csv(r).find("failed"), std::string::npos);
  fs::remove_all(out);
}

TEST(Sweep, ArchitecturePivotListsEveryPublishedRow) {
  SweepResult r;
  r.axis = SweepAxis::architecture;
  r.versions = {"v1"};
  r.variants = {"alpha"};
  r.cells.push_back({"v1", "alpha", ResultRow{}});
  r.cells.back().row.top1 = 0.25;
  const auto p = lines(pivot_csv(r));
  EXPECT_EQ(p[0], "architecture,measured_top1,paper_ref_top1");
  EXPECT_EQ(p.size(), 1u + 6u + 1u);
  EXPECT_EQ(p.back(), "Alpha-Net v1,25.00,78.2");
  EXPECT_EQ(p[1], "Xception,,79.0");
  EXPECT_EQ(parse_sweep_axis("table2"), SweepAxis::loss);
  EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
}
