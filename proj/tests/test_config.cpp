#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fedkd/commands.hpp"

namespace fedkd {
namespace {

namespace fs = std::filesystem;

// A config small enough to run end to end in well under a second.
const char* kQuickConfig = R"({
  "task": {"kind": "synthetic",
           "synthetic": {"classes": 3, "dim": 4, "train_per_class": 60,
                         "test_per_class": 50, "public_size": 200}},
  "nodes": 3,
  "node_model": {"hidden": [8], "epochs": 3},
  "distill": {"steps": 30, "batch_size": 16},
  "fedavg": {"rounds": 2}
})";

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("fedkd-") + info->test_suite_name() + "-" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

TEST(ParseConfig, MinimalConfigGetsDefaults) {
  const auto cfg = parse_config_text(R"({"task": {"kind": "synthetic"}, "nodes": 5})");
  EXPECT_EQ(cfg.ensemble.scale, 200u);
  EXPECT_EQ(cfg.ensemble.gamma, 1.0);
  EXPECT_EQ(cfg.ensemble.weight_mode, WeightMode::per_class);
  EXPECT_EQ(cfg.distill.loss_mode, LossMode::logit_l2);
  EXPECT_FALSE(cfg.distill.tau.has_value());
  EXPECT_EQ(cfg.nodes, 5u);
}

TEST(ParseConfig, ErrorsNameTheKey) {
  auto message = [](const std::string& text) {
    try {
      parse_config_text(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("<no error>");
  };
  EXPECT_NE(message(R"({"task": {"kind": "synthetic"}, "nodes": 5, "alpha": -1})").find("alpha"),
            std::string::npos);
  EXPECT_NE(message(R"({"task": {"kind": "synthetic"}})").find("nodes"), std::string::npos);
  EXPECT_NE(message(R"({"task": {"kind": "synthetic"}, "nodes": 5, "distill": {"stpes": 3}})")
                .find("distill.stpes"),
            std::string::npos);
  EXPECT_NE(message(R"({"task": {"kind": "synthetic"}, "nodes": "five"})").find("nodes"),
            std::string::npos);
  EXPECT_NE(message(R"({"task": {"kind": "synthetic"}, "nodes": 5, "ensemble": {"S": 1}})").find("S"),
            std::string::npos);
  EXPECT_THROW(parse_config_text("{not json"), ConfigError);
}

TEST(ParseConfig, OffAndInfiniteKeywords) {
  const auto cfg = parse_config_text(
      R"({"task": {"kind": "synthetic"}, "nodes": 2,
          "ensemble": {"S": "off", "gamma": "off"}, "distill": {"tau": "infinite"}})");
  EXPECT_FALSE(cfg.ensemble.scale.has_value());
  EXPECT_FALSE(cfg.ensemble.gamma.has_value());
}

TEST(ParseConfig, RoundTripIsIdentity) {
  auto cfg = parse_config_text(kQuickConfig);
  cfg.ensemble.gamma.reset();
  cfg.distill.tau = 4.0;
  cfg.distill.loss_mode = LossMode::kl;
  cfg.node_models = {cfg.node_model, cfg.node_model, cfg.node_model};
  cfg.node_models[1].hidden = {4, 4};
  const auto again = config_from_json(config_to_json(cfg));
  EXPECT_EQ(again, cfg);
  EXPECT_EQ(config_to_json(again).dump(), config_to_json(cfg).dump());
}

TEST(ParseConfig, DigestIgnoresSeedOnly) {
  auto a = parse_config_text(kQuickConfig);
  auto b = a;
  b.seed = 99;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.alpha = 0.5;
  EXPECT_NE(config_digest(a), config_digest(b));
  EXPECT_EQ(config_digest(a).size(), 16u);
}

TEST(ParseConfig, CsvTaskLoadsThreeFiles) {
  TempDir tmp;
  const std::string rows = "a,b,y\n0,0,0\n1,1,1\n0.1,0,0\n0.9,1,1\n0,0.2,0\n1,0.8,1\n";
  write_file(tmp.path() / "private.csv", rows);
  write_file(tmp.path() / "test.csv", rows);
  write_file(tmp.path() / "public.csv", "a,b\n0.5,0.5\n0.2,0.3\n0.7,0.9\n0.1,0.1\n");
  nlohmann::json doc = nlohmann::json::parse(kQuickConfig);
  doc["task"] = {{"kind", "csv"},
                 {"csv",
                  {{"private", (tmp.path() / "private.csv").string()},
                   {"public", (tmp.path() / "public.csv").string()},
                   {"test", (tmp.path() / "test.csv").string()},
                   {"label_cols", {"y"}},
                   {"feature_cols", {"a", "b"}},
                   {"num_classes", 2}}}};
  doc["nodes"] = 2;
  doc["distill"]["batch_size"] = 2;
  const auto cfg = config_from_json(doc);
  const auto data = make_federated_data(cfg);
  EXPECT_EQ(data.private_pool.size(), 6u);
  EXPECT_FALSE(data.public_set.labeled);
  const auto r = run_fedkd(make_fedkd_run(cfg, make_partition(cfg, data)), data);
  EXPECT_EQ(r.public_queries[0] + r.public_queries[1], 8u);
}

TEST(Commands, RunWritesArtifactsAndRefusesCollisions) {
  TempDir tmp;
  const auto cfg = parse_config_text(kQuickConfig);
  const auto out = cmd_run(cfg, tmp.path(), false);
  for (const char* f : {"config.json", "partition.json", "metrics.json", "ledger.csv", "loss_trace.jsonl",
                        "timing.json"})
    EXPECT_TRUE(fs::exists(out.dir / f)) << f;
  EXPECT_THROW(cmd_run(cfg, tmp.path(), false), ConfigError);
  EXPECT_NO_THROW(cmd_run(cfg, tmp.path(), true));
  EXPECT_EQ(parse_config((out.dir / "config.json").string()), cfg);
}

TEST(Commands, MetricsAreByteIdenticalAcrossRuns) {
  TempDir a;
  const auto cfg = parse_config_text(kQuickConfig);
  const auto ra = cmd_run(cfg, a.path() / "one", false);
  const auto rb = cmd_run(cfg, a.path() / "two", false);
  EXPECT_EQ(read_file(ra.dir / "metrics.json"), read_file(rb.dir / "metrics.json"));
  EXPECT_EQ(read_file(ra.dir / "ledger.csv"), read_file(rb.dir / "ledger.csv"));
}

TEST(Commands, AblateRowCountIsValuesTimesSeeds) {
  TempDir tmp;
  const auto cfg = parse_config_text(kQuickConfig);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= 10; ++s) seeds.push_back(s);
  const auto out = cmd_ablate(cfg, {"gamma", {"off", "2", "1", "0.125"}, seeds}, tmp.path(), false);
  EXPECT_EQ(out.rows.size(), 40u);
  const std::string csv = read_file(out.dir / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 41);
  for (const auto& r : out.rows) EXPECT_TRUE(r.error.empty()) << r.error;
}

TEST(Commands, AblateRecordsFailedCellsAsRows) {
  TempDir tmp;
  const auto cfg = parse_config_text(kQuickConfig);
  // 1000 nodes cannot be carved out of 180 samples.
  const auto out = cmd_ablate(cfg, {"K", {"2", "1000"}, {1, 2}}, tmp.path(), false);
  ASSERT_EQ(out.rows.size(), 4u);
  EXPECT_TRUE(out.rows[0].error.empty());
  EXPECT_FALSE(out.rows[2].error.empty());
  EXPECT_FALSE(out.rows[2].accuracy.has_value());
}

TEST(Commands, AblateRejectsUnknownAxis) {
  TempDir tmp;
  EXPECT_THROW(cmd_ablate(parse_config_text(kQuickConfig), {"depth", {"1"}, {1}}, tmp.path(), false),
               ConfigError);
}

TEST(Commands, ReportHasOneRowPerMethod) {
  TempDir tmp;
  const auto cfg = parse_config_text(kQuickConfig);
  cmd_run(cfg, tmp.path(), false);
  cmd_fedavg(cfg, tmp.path(), false);
  const auto rows = collect_report(tmp.path());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "FedKD");
  EXPECT_EQ(rows[1].method, "FedAvg");
  EXPECT_GT(rows[1].bandwidth_bytes, 0.0);
  const std::string table = render_report(rows);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDKD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

TEST(Cli, ExitCodes) {
  TempDir tmp;
  write_file(tmp.path() / "ok.json", kQuickConfig);
  write_file(tmp.path() / "bad.json", R"({"task": {"kind": "synthetic"}, "nodes": 5, "alpha": -1})");
  const std::string out = " --out " + (tmp.path() / "runs").string();
  EXPECT_EQ(run_cli("run --config " + (tmp.path() / "ok.json").string() + out), 0);
  EXPECT_EQ(run_cli("run --config " + (tmp.path() / "ok.json").string() + out), 2);  // collision
  EXPECT_EQ(run_cli("run --config " + (tmp.path() / "bad.json").string() + out), 2);
  EXPECT_EQ(run_cli("run --config " + (tmp.path() / "missing.json").string() + out), 2);
  EXPECT_EQ(run_cli("bogus"), 2);
  EXPECT_EQ(run_cli("fedavg --config " + (tmp.path() / "ok.json").string() + out), 0);
  EXPECT_EQ(run_cli("ablate --config " + (tmp.path() / "ok.json").string() + out +
                    " --param S --values off,200 --seeds 1-2"),
            0);
  EXPECT_EQ(run_cli("report " + (tmp.path() / "runs").string()), 0);
}

}  // namespace
}  // namespace fedkd
