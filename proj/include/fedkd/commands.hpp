#pragma once

// Experiment commands behind the CLI: single FedKD / FedAvg runs written to a
// run directory, ablation sweeps, and a plain-text comparison report.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedkd/config.hpp"
#include "fedkd/errors.hpp"
#include "fedkd/protocol.hpp"

namespace fedkd {

namespace fs = std::filesystem;

inline nlohmann::json ledger_json(const BandwidthLedger& ledger) {
  const auto rep = ledger_report(ledger);
  nlohmann::json phases = nlohmann::json::object();
  for (const auto& [name, t] : rep.per_phase) {
    phases[name] = {{"frames", t.frames},
                    {"bytes", t.bytes},
                    {"payload_bytes", t.payload_bytes},
                    {"packed_bytes", t.packed_bytes}};
  }
  return {{"phases", phases},
          {"total_bytes", rep.total_bytes},
          {"payload_bytes", rep.payload_bytes},
          {"packed_bytes", rep.packed_bytes},
          {"total_gb", LedgerReport::gb(rep.total_bytes)},
          {"total_gib", LedgerReport::gib(rep.total_bytes)}};
}

inline std::string metric_name(const ExperimentConfig& cfg) {
  const bool multi = cfg.task_kind == "synthetic" ? cfg.synthetic.generator == "multilabel"
                                                  : cfg.csv.task == Task::multi_label;
  return multi ? "mauc" : "accuracy";
}

inline nlohmann::json fedkd_metrics_json(const ExperimentConfig& cfg, const FedKdResult& r) {
  auto standalone = nlohmann::json::array();
  for (const auto& m : r.standalone) {
    standalone.push_back({{"node_id", m.node_id},
                          {"shard_size", m.shard_size},
                          {"score", m.score ? nlohmann::json(*m.score) : nlohmann::json(nullptr)}});
  }
  return {{"method", "fedkd"},
          {"config_digest", config_digest(cfg)},
          {"seed", cfg.seed},
          {"metric", metric_name(cfg)},
          {"standalone", standalone},
          {"standalone_mean", r.standalone_mean()},
          {"central", r.central_score},
          {"teacher_agreement", r.teacher_agreement},
          {"z_max", r.z_max},
          {"queries", {{"public", r.public_queries}, {"distillation", r.distill_queries}}},
          {"ledger", ledger_json(r.ledger)},
          {"loss_trace", "loss_trace.jsonl"}};
}

inline nlohmann::json fedavg_metrics_json(const ExperimentConfig& cfg, const FedAvgResult& r) {
  return {{"method", "fedavg"},
          {"config_digest", config_digest(cfg)},
          {"seed", cfg.seed},
          {"metric", metric_name(cfg)},
          {"standalone", nlohmann::json::array()},
          {"central", r.score},
          {"round_scores", r.round_scores},
          {"rounds", cfg.fedavg_rounds},
          {"ledger", ledger_json(r.ledger)},
          {"loss_trace", nullptr}};
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

/// Creates `dir`, refusing to reuse an existing one unless `force`.
inline void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !force) {
    throw ConfigError("output directory '" + dir.string() + "' already exists (use --force)");
  }
  fs::create_directories(dir);
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace detail

inline fs::path run_dir_name(const fs::path& out_root, const std::string& method,
                             const ExperimentConfig& cfg) {
  return out_root / (method + "-" + config_digest(cfg) + "-s" + std::to_string(cfg.seed));
}

struct RunOutput {
  fs::path dir;
  nlohmann::json metrics;
};

/// Runs FedKD and writes config.json, partition.json, metrics.json,
/// ledger.csv, loss_trace.jsonl and timing.json into the run directory.
inline RunOutput cmd_run(const ExperimentConfig& cfg, const fs::path& out_root, bool force) {
  cfg.validate();
  const fs::path dir = run_dir_name(out_root, "fedkd", cfg);
  detail::prepare_dir(dir, force);
  const auto started = detail::utc_timestamp();

  const FederatedData data = make_federated_data(cfg);
  const PartitionPlan plan = make_partition(cfg, data);
  const FedKdResult result = run_fedkd(make_fedkd_run(cfg, plan), data);

  RunOutput out{dir, fedkd_metrics_json(cfg, result)};
  detail::write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  detail::write_text(dir / "partition.json", nlohmann::json(plan).dump() + "\n");
  detail::write_text(dir / "metrics.json", out.metrics.dump(2) + "\n");
  std::ostringstream ledger_csv;
  write_ledger_csv(ledger_csv, result.ledger);
  detail::write_text(dir / "ledger.csv", ledger_csv.str());
  std::ostringstream trace;
  write_loss_trace(trace, result.trace);
  detail::write_text(dir / "loss_trace.jsonl", trace.str());
  detail::write_text(dir / "timing.json",
                     nlohmann::json{{"started", started}, {"finished", detail::utc_timestamp()}}.dump(2) + "\n");
  return out;
}

inline RunOutput cmd_fedavg(const ExperimentConfig& cfg, const fs::path& out_root, bool force) {
  cfg.validate();
  const fs::path dir = run_dir_name(out_root, "fedavg", cfg);
  detail::prepare_dir(dir, force);
  const auto started = detail::utc_timestamp();

  const FederatedData data = make_federated_data(cfg);
  const PartitionPlan plan = make_partition(cfg, data);
  const FedAvgResult result = run_fedavg(make_fedavg_run(cfg, plan), data);

  RunOutput out{dir, fedavg_metrics_json(cfg, result)};
  detail::write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  detail::write_text(dir / "partition.json", nlohmann::json(plan).dump() + "\n");
  detail::write_text(dir / "metrics.json", out.metrics.dump(2) + "\n");
  std::ostringstream ledger_csv;
  write_ledger_csv(ledger_csv, result.ledger);
  detail::write_text(dir / "ledger.csv", ledger_csv.str());
  detail::write_text(dir / "timing.json",
                     nlohmann::json{{"started", started}, {"finished", detail::utc_timestamp()}}.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes{"gamma", "S", "public_size", "alpha", "K", "R"};
  return axes;
}

struct SweepSpec {
  std::string param;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
};

struct SweepRow {
  std::string value;
  std::uint64_t seed = 0;
  std::optional<double> accuracy;
  std::optional<std::uint64_t> bandwidth;
  std::string error;
};

namespace detail {

inline double parse_double_value(const std::string& param, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (v.empty() || used != v.size()) throw ConfigError(param + ": cannot parse '" + v + "'");
  return d;
}

inline std::size_t parse_count_value(const std::string& param, const std::string& v) {
  const double d = parse_double_value(param, v);
  if (d < 0 || d != std::floor(d)) throw ConfigError(param + ": '" + v + "' is not a count");
  return static_cast<std::size_t>(d);
}

}  // namespace detail

/// Copy of `cfg` with one sweep axis set. "off" disables gamma or S.
inline ExperimentConfig apply_sweep_value(ExperimentConfig cfg, const std::string& param,
                                          const std::string& value) {
  if (param == "gamma") {
    if (value == "off") {
      cfg.ensemble.gamma.reset();
    } else {
      cfg.ensemble.gamma = detail::parse_double_value(param, value);
    }
  } else if (param == "S") {
    if (value == "off") {
      cfg.ensemble.scale.reset();
    } else {
      cfg.ensemble.scale = static_cast<std::uint32_t>(detail::parse_count_value(param, value));
    }
  } else if (param == "public_size") {
    if (cfg.task_kind != "synthetic") throw ConfigError("public_size sweeps need a synthetic task");
    cfg.synthetic.public_size = detail::parse_count_value(param, value);
  } else if (param == "alpha") {
    cfg.alpha = detail::parse_double_value(param, value);
  } else if (param == "K") {
    cfg.nodes = detail::parse_count_value(param, value);
    cfg.node_models.clear();
  } else if (param == "R") {
    cfg.repeated_queries = detail::parse_count_value(param, value);
  } else {
    throw ConfigError("sweep parameter '" + param + "' is not one of gamma, S, public_size, alpha, K, R");
  }
  cfg.validate();
  return cfg;
}

inline void write_sweep_csv(std::ostream& out, const std::string& param,
                            const std::vector<SweepRow>& rows) {
  out << "value,seed,accuracy,bandwidth,error\n";
  for (const auto& r : rows) {
    out << r.value << ',' << r.seed << ',';
    if (r.accuracy) out << std::setprecision(17) << *r.accuracy;
    out << ',';
    if (r.bandwidth) out << *r.bandwidth;
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << ',' << err << '\n';
  }
  (void)param;
}

struct SweepOutput {
  fs::path dir;
  std::vector<SweepRow> rows;
};

/// Runs the cross product values x seeds. Cell (value, seed) uses `seed` as
/// the run seed so every value sees the same data and local models; failed
/// cells become rows with an error message.
inline SweepOutput cmd_ablate(const ExperimentConfig& cfg, const SweepSpec& sweep,
                              const fs::path& out_root, bool force, std::size_t jobs = 1) {
  cfg.validate();
  const auto& axes = sweep_axes();
  if (std::find(axes.begin(), axes.end(), sweep.param) == axes.end()) {
    throw ConfigError("sweep parameter '" + sweep.param + "' is not one of gamma, S, public_size, alpha, K, R");
  }
  if (sweep.values.empty() || sweep.seeds.empty()) throw ConfigError("sweep: need values and seeds");

  SweepOutput out;
  out.dir = out_root / ("ablate-" + sweep.param + "-" + config_digest(cfg));
  detail::prepare_dir(out.dir, force);
  const std::size_t cells = sweep.values.size() * sweep.seeds.size();
  out.rows.resize(cells);
  detail::parallel_for(cells, jobs, [&](std::size_t i) {
    const auto& value = sweep.values[i / sweep.seeds.size()];
    const auto seed = sweep.seeds[i % sweep.seeds.size()];
    SweepRow& row = out.rows[i];
    row.value = value;
    row.seed = seed;
    try {
      ExperimentConfig c = apply_sweep_value(cfg, sweep.param, value);
      c.seed = seed;
      c.threads = 1;
      const FederatedData data = make_federated_data(c);
      const FedKdResult r = run_fedkd(make_fedkd_run(c, make_partition(c, data)), data);
      row.accuracy = r.central_score;
      row.bandwidth = r.ledger.total();
      const fs::path cell = out.dir / "cells" / (sweep.param + "=" + value + "-s" + std::to_string(seed));
      fs::create_directories(cell);
      detail::write_text(cell / "metrics.json", fedkd_metrics_json(c, r).dump(2) + "\n");
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  std::ostringstream csv;
  write_sweep_csv(csv, sweep.param, out.rows);
  detail::write_text(out.dir / "ablation.csv", csv.str());
  return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string method;
  std::string metric;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double bandwidth_bytes = 0.0;  // mean over runs
};

/// One row per method found among the metrics.json files under `run_dir`.
inline std::vector<ReportRow> collect_report(const fs::path& run_dir) {
  if (!fs::exists(run_dir)) throw ConfigError("report: '" + run_dir.string() + "' does not exist");
  std::vector<fs::path> files;
  if (fs::is_regular_file(run_dir)) {
    files.push_back(run_dir);
  } else {
    for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
      if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<nlohmann::json>> by_method;
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("report: '" + f.string() + "': " + e.what());
    }
    by_method[j.at("method").get<std::string>()].push_back(std::move(j));
  }
  std::vector<ReportRow> rows;
  for (const std::string method : {"fedkd", "fedavg"}) {
    auto it = by_method.find(method);
    if (it == by_method.end()) continue;
    ReportRow row;
    row.method = method == "fedkd" ? "FedKD" : "FedAvg";
    row.metric = it->second.front().at("metric").get<std::string>();
    row.runs = it->second.size();
    double sum = 0.0;
    double bw = 0.0;
    for (const auto& j : it->second) {
      sum += j.at("central").get<double>();
      bw += static_cast<double>(j.at("ledger").at("total_bytes").get<std::uint64_t>());
    }
    row.mean = sum / static_cast<double>(row.runs);
    double var = 0.0;
    for (const auto& j : it->second) {
      const double d = j.at("central").get<double>() - row.mean;
      var += d * d;
    }
    row.stddev = row.runs > 1 ? std::sqrt(var / static_cast<double>(row.runs - 1)) : 0.0;
    row.bandwidth_bytes = bw / static_cast<double>(row.runs);
    rows.push_back(row);
  }
  return rows;
}

inline std::string render_report(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(8) << "method" << std::setw(6) << "runs" << std::setw(28)
      << "score (%)" << std::setw(14) << "bandwidth GB" << "bandwidth GiB\n";
  for (const auto& r : rows) {
    std::ostringstream score;
    score << std::fixed << std::setprecision(2) << 100.0 * r.mean << " +- " << 100.0 * r.stddev
          << ' ' << r.metric;
    out << std::left << std::setw(8) << r.method << std::setw(6) << r.runs << std::setw(28)
        << score.str() << std::setw(14) << std::fixed << std::setprecision(4)
        << r.bandwidth_bytes / 1e9 << std::setprecision(4) << r.bandwidth_bytes / 1073741824.0
        << '\n';
  }
  return out.str();
}

inline std::string cmd_report(const fs::path& run_dir) { return render_report(collect_report(run_dir)); }

}  // namespace fedkd
