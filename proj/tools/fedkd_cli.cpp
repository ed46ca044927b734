// fedkd: command-line front end.
//
//   fedkd run     --config cfg.json [--out DIR] [--seed N] [--force]
//   fedkd fedavg  --config cfg.json [--out DIR] [--seed N] [--force]
//   fedkd ablate  --config cfg.json --param gamma --values off,2,1,0.125 --seeds 1-10
//   fedkd report  RUN_DIR
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedkd/commands.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "1,2,5" or "1-10" or a mix of both.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split_list(text)) {
    const auto dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        seeds.push_back(std::stoull(part));
      } else {
        const auto lo = std::stoull(part.substr(0, dash));
        const auto hi = std::stoull(part.substr(dash + 1));
        if (hi < lo) throw fedkd::ConfigError("--seeds: empty range '" + part + "'");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      }
    } catch (const std::logic_error&) {
      throw fedkd::ConfigError("--seeds: cannot parse '" + part + "'");
    }
  }
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot federated knowledge distillation simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "Output root directory (default: config output_dir)");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_flag("--force", force, "Overwrite an existing run directory");
  };

  auto* run = app.add_subcommand("run", "Run FedKD and write metrics");
  add_common(run);
  auto* fedavg = app.add_subcommand("fedavg", "Run the FedAvg baseline");
  add_common(fedavg);

  auto* ablate = app.add_subcommand("ablate", "Sweep one parameter over values x seeds");
  add_common(ablate);
  std::string param;
  std::string values;
  std::string seeds = "0";
  std::size_t jobs = 1;
  ablate->add_option("--param", param, "One of gamma, S, public_size, alpha, K, R")->required();
  ablate->add_option("--values", values, "Comma-separated values ('off' disables gamma/S)")->required();
  ablate->add_option("--seeds", seeds, "Seeds, e.g. 1,2,3 or 1-10");
  ablate->add_option("--jobs", jobs, "Concurrent sweep cells");

  auto* report = app.add_subcommand("report", "Summarize run directories as a table");
  std::string report_dir;
  report->add_option("run_dir", report_dir, "Directory holding metrics.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (report->parsed()) {
      std::cout << fedkd::cmd_report(report_dir);
      return 0;
    }
    auto cfg = fedkd::parse_config(config_path);
    if (seed) cfg.seed = *seed;
    const std::string root = out_dir.empty() ? cfg.output_dir : out_dir;

    if (run->parsed()) {
      const auto out = fedkd::cmd_run(cfg, root, force);
      std::cout << out.dir.string() << '\n' << out.metrics.dump(2) << '\n';
    } else if (fedavg->parsed()) {
      const auto out = fedkd::cmd_fedavg(cfg, root, force);
      std::cout << out.dir.string() << '\n' << out.metrics.dump(2) << '\n';
    } else if (ablate->parsed()) {
      const fedkd::SweepSpec sweep{param, split_list(values), parse_seeds(seeds)};
      const auto out = fedkd::cmd_ablate(cfg, sweep, root, force, jobs);
      std::cout << (out.dir / "ablation.csv").string() << '\n';
      fedkd::write_sweep_csv(std::cout, param, out.rows);
    }
    return 0;
  } catch (const fedkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fedkd::FormatError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fedkd::ValidationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
