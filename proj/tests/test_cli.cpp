#include <gtest/gtest.h>

#include <sstream>
#include <string>
#include <vector>

#include "maha/cli.hpp"
#include "support.hpp"

using namespace maha;
using maha::testing::read_file;
using maha::testing::scratch_dir;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "maha_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> v;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) v.push_back(cell);
  return v;
}

std::size_t count_prefix(const std::vector<std::string>& rows, const std::string& prefix) {
  std::size_t k = 0;
  for (const auto& r : rows)
    if (r.rfind(prefix, 0) == 0) ++k;
  return k;
}

}  // namespace

TEST(CliParse, SizeLists) {
  EXPECT_EQ(parse_size_list("2,4,6", "x"), (std::vector<std::size_t>{2, 4, 6}));
  EXPECT_EQ(parse_size_list(" 8 ", "x"), (std::vector<std::size_t>{8}));
  EXPECT_TRUE(parse_size_list("", "x").empty());
  EXPECT_EQ(parse_size_list("2,,4", "x"), (std::vector<std::size_t>{2, 4}));
  EXPECT_THROW(parse_size_list("two", "x"), ConfigError);
  EXPECT_THROW(parse_size_list("-3", "x"), ConfigError);
}

TEST(CliParse, NoSubcommandOrUnknownFlagIsConfigError) {
  EXPECT_EQ(run({}).code, exit_config);
  EXPECT_EQ(run({"bench", "--bogus", "1"}).code, exit_config);
  EXPECT_EQ(run({"frobnicate"}).code, exit_config);
}

TEST(CliBench, DefaultTableMatchesClosedForm) {
  const auto dir = scratch_dir("cli_bench");
  const auto r = run({"bench", "--out", dir.string()});
  ASSERT_EQ(r.code, exit_ok) << r.err;
  const auto rows = lines(read_file(dir / "flops.csv"));
  ASSERT_FALSE(rows.empty());
  const auto header = split(rows[0]);
  ASSERT_EQ(header.size(), 7u);
  EXPECT_EQ(rows.size(), 1u + 6u * 2u);
  bool found = false;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = split(rows[i]);
    if (cells[0] == "4096" && cells[1] == "absolute") {
      found = true;
      EXPECT_EQ(cells[3], "16777216");
      EXPECT_EQ(cells[4], "87040");
      EXPECT_GT(std::stod(cells[6]), 81.0);
    }
  }
  EXPECT_TRUE(found);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "timing.csv"));
}

TEST(CliBench, EmptyLengthListIsConfigError) {
  const auto dir = scratch_dir("cli_bench_empty");
  const auto r = run({"bench", "--out", dir.string(), "--lengths", ""});
  EXPECT_EQ(r.code, exit_config);
  EXPECT_FALSE(std::filesystem::exists(dir / "flops.csv"));
}

TEST(CliBench, FullMacsAddsSecondBlock) {
  const auto dir = scratch_dir("cli_bench_macs");
  ASSERT_EQ(run({"bench", "--out", dir.string(), "--metric", "full_macs", "--lengths", "128,256"}).code, exit_ok);
  const auto text = read_file(dir / "flops.csv");
  EXPECT_NE(text.find("score_entries"), std::string::npos);
  EXPECT_NE(text.find("full_macs"), std::string::npos);
  EXPECT_EQ(lines(text).size(), 1u + 2u * 2u * 2u);
}

TEST(CliBench, TimingTableWhenRequested) {
  const auto dir = scratch_dir("cli_bench_timing");
  ASSERT_EQ(run({"bench", "--out", dir.string(), "--lengths", "128,256", "--timing"}).code, exit_ok);
  const auto rows = lines(read_file(dir / "timing.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "n,depth,maha_ms,baseline_ms");
}

TEST(CliBench, InvalidPolicyIsConfigError) {
  const auto dir = scratch_dir("cli_bench_policy");
  EXPECT_EQ(run({"bench", "--out", dir.string(), "--policy", "sideways"}).code, exit_config);
}

TEST(CliConfig, UnknownKeyIsRejected) {
  const auto dir = scratch_dir("cli_config");
  const auto path = dir / "bad.json";
  write_atomic(path, R"({"model": {"n": 32, "colour": "red"}})");
  const auto r = run({"bench", "--config", path.string(), "--out", dir.string()});
  EXPECT_EQ(r.code, exit_config);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
}

TEST(CliConfig, TypeErrorAndMultiHeadAreRejected) {
  const auto dir = scratch_dir("cli_config_types");
  write_atomic(dir / "a.json", R"({"train": {"steps": "many"}})");
  write_atomic(dir / "b.json", R"({"model": {"heads": 4}})");
  write_atomic(dir / "c.json", R"({"model": )");
  for (const char* f : {"a.json", "b.json", "c.json"})
    EXPECT_EQ(run({"bench", "--config", (dir / f).string(), "--out", dir.string()}).code, exit_config) << f;
}

TEST(CliConfig, ResolvedConfigRecordsOverrides) {
  const auto dir = scratch_dir("cli_config_resolved");
  write_atomic(dir / "in.json", R"({"bench": {"lengths": [512]}, "train": {"seed": 5}})");
  ASSERT_EQ(run({"bench", "--config", (dir / "in.json").string(), "--out", dir.string(), "--policy", "absolute"}).code,
            exit_ok);
  const auto j = nlohmann::json::parse(read_file(dir / "config.json"));
  EXPECT_EQ(j["bench"]["lengths"], nlohmann::json::array({512}));
  EXPECT_EQ(j["bench"]["policy"], "absolute");
  EXPECT_EQ(j["train"]["seed"], 5);
  EXPECT_EQ(j["output"]["directory"], dir.string());
  // The written file loads back to the same configuration.
  const auto again = load_config((dir / "config.json").string());
  EXPECT_EQ(config_to_json(again), j);
}

TEST(CliTrain, SingleMethodWritesOneRowPerStep) {
  const auto dir = scratch_dir("cli_train");
  const auto r = run({"train", "--out", dir.string(), "--agg", "co", "--steps", "500"});
  ASSERT_EQ(r.code, exit_ok) << r.err;
  const auto rows = lines(read_file(dir / "loss_curve.csv"));
  ASSERT_EQ(rows.size(), 501u);
  EXPECT_EQ(rows[0], "method,step,loss");
  EXPECT_EQ(count_prefix(rows, "co,"), 500u);
  EXPECT_EQ(rows.back().rfind("co,499,", 0), 0u);
  EXPECT_TRUE(std::filesystem::exists(dir / "weights.csv"));
  EXPECT_NE(r.out.find("ms/step"), std::string::npos);
}

TEST(CliTrain, AllMethodsWriteThreeBlocks) {
  const auto dir = scratch_dir("cli_train_all");
  ASSERT_EQ(run({"train", "--out", dir.string(), "--agg", "all", "--steps", "20"}).code, exit_ok);
  const auto rows = lines(read_file(dir / "loss_curve.csv"));
  EXPECT_EQ(count_prefix(rows, "co,"), 20u);
  EXPECT_EQ(count_prefix(rows, "ne,"), 20u);
  EXPECT_EQ(count_prefix(rows, "mean,"), 20u);
  // weights: 20 steps x 2 layers x 2 scales per method.
  const auto w = lines(read_file(dir / "weights.csv"));
  EXPECT_EQ(count_prefix(w, "ne,"), 20u * 2u * 2u);
  for (std::size_t i = 1; i < w.size(); ++i) {
    const double v = std::stod(split(w[i])[4]);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(CliTrain, UnknownTaskOrMethodIsConfigError) {
  const auto dir = scratch_dir("cli_train_bad");
  EXPECT_EQ(run({"train", "--out", dir.string(), "--task", "sorting"}).code, exit_config);
  EXPECT_EQ(run({"train", "--out", dir.string(), "--agg", "median"}).code, exit_config);
}

TEST(CliTrain, OutputIsDeterministic) {
  const auto a = scratch_dir("cli_det_a");
  const auto b = scratch_dir("cli_det_b");
  for (const auto& d : {a, b})
    ASSERT_EQ(run({"train", "--out", d.string(), "--agg", "all", "--steps", "15", "--seed", "3"}).code, exit_ok);
  EXPECT_EQ(read_file(a / "loss_curve.csv"), read_file(b / "loss_curve.csv"));
  EXPECT_EQ(read_file(a / "weights.csv"), read_file(b / "weights.csv"));
  const auto c = scratch_dir("cli_det_c");
  ASSERT_EQ(run({"train", "--out", c.string(), "--agg", "all", "--steps", "15", "--seed", "4"}).code, exit_ok);
  EXPECT_NE(read_file(a / "loss_curve.csv"), read_file(c / "loss_curve.csv"));
}

TEST(CliAblate, DepthTableHasOneRowPerDepth) {
  const auto dir = scratch_dir("cli_ablate");
  const auto r = run({"ablate", "--out", dir.string(), "--scales", "2,4,6", "--n", "128", "--steps", "5"});
  ASSERT_EQ(r.code, exit_ok) << r.err;
  const auto rows = lines(read_file(dir / "ablation_scales.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "depth,final_loss,metric,wallclock_rel,solver_rel");
  EXPECT_EQ(split(rows[1])[0], "2");
  EXPECT_EQ(split(rows[3])[0], "6");
  EXPECT_EQ(lines(read_file(dir / "ablation_aggregation.csv")).size(), 4u);
}

TEST(CliAblate, InfeasibleDepthIsConfigError) {
  const auto dir = scratch_dir("cli_ablate_bad");
  const auto r = run({"ablate", "--out", dir.string(), "--scales", "2,4,6", "--n", "32", "--steps", "5"});
  EXPECT_EQ(r.code, exit_config);
  EXPECT_NE(r.err.find("infeasible"), std::string::npos);
}

TEST(CliGradcheck, PassesFailsOnFaultAndRejectsLargeN) {
  const auto dir = scratch_dir("cli_gradcheck");
  write_atomic(dir / "tiny.json", R"({"model": {"n": 16, "d": 8, "d_k": 4, "L": 2}})");
  const auto cfg = (dir / "tiny.json").string();
  const auto ok = run({"gradcheck", "--config", cfg, "--out", dir.string()});
  EXPECT_EQ(ok.code, exit_ok) << ok.out << ok.err;
  const auto rows = lines(read_file(dir / "gradcheck.csv"));
  EXPECT_GT(rows.size(), 4u);
  EXPECT_EQ(run({"gradcheck", "--config", cfg, "--out", dir.string(), "--inject-fault"}).code, exit_check_failed);
  EXPECT_EQ(run({"gradcheck", "--config", cfg, "--out", dir.string(), "--n", "128"}).code, exit_config);
}

TEST(CliHeatmap, SelectedLayerWritesOneFilePerScale) {
  const auto dir = scratch_dir("cli_heatmap");
  const auto r = run({"heatmap", "--out", dir.string(), "--layers", "0"});
  ASSERT_EQ(r.code, exit_ok) << r.err;
  for (const char* f : {"scale_1_layer_0.pgm", "scale_2_layer_0.pgm"}) {
    ASSERT_TRUE(std::filesystem::exists(dir / f)) << f;
    const auto img = parse_pgm(read_file(dir / f));
    EXPECT_EQ(img.maxval, 255);
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "scale_1_layer_1.pgm"));
  EXPECT_EQ(parse_pgm(read_file(dir / "scale_1_layer_0.pgm")).width, 16u);
  EXPECT_EQ(parse_pgm(read_file(dir / "scale_2_layer_0.pgm")).width, 8u);
}

TEST(CliHeatmap, CsvRowsSumToOne) {
  const auto dir = scratch_dir("cli_heatmap_csv");
  ASSERT_EQ(run({"heatmap", "--out", dir.string(), "--format", "csv", "--scales", "1"}).code, exit_ok);
  for (const char* f : {"scale_1_layer_0.csv", "scale_1_layer_1.csv"}) {
    const auto rows = lines(read_file(dir / f));
    ASSERT_EQ(rows.size(), 16u);
    for (const auto& row : rows) {
      double s = 0.0;
      for (const auto& cell : split(row)) s += std::stod(cell);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(CliHeatmap, InvalidSelectorsAreConfigErrors) {
  const auto dir = scratch_dir("cli_heatmap_bad");
  EXPECT_EQ(run({"heatmap", "--out", dir.string(), "--scales", "7"}).code, exit_config);
  EXPECT_EQ(run({"heatmap", "--out", dir.string(), "--scales", "0"}).code, exit_config);
  EXPECT_EQ(run({"heatmap", "--out", dir.string(), "--layers", "2"}).code, exit_config);
  EXPECT_EQ(run({"heatmap", "--out", dir.string(), "--format", "png"}).code, exit_config);
}

TEST(CliHeatmap, OutputIsDeterministic) {
  const auto a = scratch_dir("cli_hm_det_a");
  const auto b = scratch_dir("cli_hm_det_b");
  for (const auto& d : {a, b}) ASSERT_EQ(run({"heatmap", "--out", d.string()}).code, exit_ok);
  for (const char* f : {"scale_1_layer_0.pgm", "scale_2_layer_1.pgm"}) EXPECT_EQ(read_file(a / f), read_file(b / f));
}
