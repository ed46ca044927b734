#pragma once

// Experiment configuration: a JSON document with nested sections, strictly
// validated (unknown keys rejected), with defaults filled in.
//
//   {
//     "task": {"kind": "synthetic", "synthetic": {...}} | {"kind": "csv", "csv": {...}},
//     "nodes": 5,                 // required
//     "alpha": 1.0, "seed": 0,
//     "node_model": {"hidden": [32], "epochs": 20, "batch_size": 16,
//                    "lr_start": 0.05, "lr_end": 0.005, "weight_decay": 3e-4},
//     "node_models": [ ... one node_model per node, optional ... ],
//     "central_model": {"hidden": [32]},
//     "ensemble": {"S": 200 | "off", "gamma": 1.0 | "off", "weight_mode": "per_class"},
//     "distill": {"steps": 2000, "batch_size": 64, "lr": 0.01,
//                 "tau": "infinite" | number, "loss_mode": "logit_l2" | "kl"},
//     "mode": {"repeated_queries": 1, "query_noise": 0.0, "labeled_public": false},
//     "fedavg": {"rounds": 30, "local_epochs": 1},
//     "threads": 1,
//     "output_dir": "runs"
//   }

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedkd/datasets.hpp"
#include "fedkd/distill.hpp"
#include "fedkd/errors.hpp"
#include "fedkd/privacy_ensemble.hpp"
#include "fedkd/protocol.hpp"

namespace fedkd {

struct SyntheticTaskConfig {
  std::string generator = "gaussian";  // gaussian | multilabel
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t train_per_class = 500;  // multilabel: total train rows = classes * train_per_class
  std::size_t test_per_class = 1000;
  std::size_t public_size = 5000;
  double separation = 1.0;
  double cov_scale = 1.0;
  double public_shift = 0.5;
  double mask_rate = 0.1;  // multilabel only

  friend bool operator==(const SyntheticTaskConfig&, const SyntheticTaskConfig&) = default;
};

struct CsvTaskConfig {
  std::string private_path;
  std::string public_path;
  std::string test_path;
  std::vector<std::string> label_cols;
  std::vector<std::string> feature_cols;
  Task task = Task::single_label;
  std::size_t num_classes = 0;

  friend bool operator==(const CsvTaskConfig&, const CsvTaskConfig&) = default;
};

struct ExperimentConfig {
  std::string task_kind = "synthetic";
  SyntheticTaskConfig synthetic;
  CsvTaskConfig csv;
  std::size_t nodes = 0;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  TrainSpec node_model;
  std::vector<TrainSpec> node_models;  // empty = node_model everywhere
  TrainSpec central_model;
  EnsembleConfig ensemble;
  DistillConfig distill;
  std::size_t repeated_queries = 1;
  double query_noise = 0.0;
  bool labeled_public = false;
  std::size_t fedavg_rounds = 30;
  std::size_t fedavg_local_epochs = 1;
  std::size_t threads = 1;
  std::string output_dir = "runs";

  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

/// Walks one JSON object, remembering which keys were consumed so the rest
/// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const { return where(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    try {
      check_type<T>(v);
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + ": wrong type");
    } catch (const ConfigError&) {
      throw ConfigError(where(key) + ": wrong type");
    }
  }

  template <typename T>
  void require(const std::string& key, T& out) {
    if (!has(key)) throw ConfigError(where(key) + ": missing required key");
    read(key, out);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }
  }

 private:
  template <typename T>
  static void check_type(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("type");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0)) {
        throw ConfigError("type");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("type");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("type");
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline TrainSpec read_train_spec(const nlohmann::json& j, const std::string& path, TrainSpec spec) {
  ObjectReader r(j, path);
  r.read("hidden", spec.hidden);
  r.read("epochs", spec.epochs);
  r.read("batch_size", spec.batch_size);
  r.read("lr_start", spec.lr_start);
  r.read("lr_end", spec.lr_end);
  r.read("weight_decay", spec.weight_decay);
  r.finish();
  return spec;
}

inline nlohmann::json train_spec_json(const TrainSpec& s) {
  return {{"hidden", s.hidden},         {"epochs", s.epochs}, {"batch_size", s.batch_size},
          {"lr_start", s.lr_start},     {"lr_end", s.lr_end}, {"weight_decay", s.weight_decay}};
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (task_kind != "synthetic" && task_kind != "csv") {
    throw ConfigError("task.kind: expected synthetic or csv, got '" + task_kind + "'");
  }
  if (nodes < 1) throw ConfigError("nodes: must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("alpha: must be positive");
  if (task_kind == "synthetic") {
    const auto& s = synthetic;
    if (s.generator != "gaussian" && s.generator != "multilabel") {
      throw ConfigError("task.synthetic.generator: expected gaussian or multilabel");
    }
    if (s.classes < 2) throw ConfigError("task.synthetic.classes: must be >= 2");
    if (s.dim < 1) throw ConfigError("task.synthetic.dim: must be >= 1");
    if (s.train_per_class < 1) throw ConfigError("task.synthetic.train_per_class: must be >= 1");
    if (s.test_per_class < 1) throw ConfigError("task.synthetic.test_per_class: must be >= 1");
    if (s.public_size < 1) throw ConfigError("task.synthetic.public_size: must be >= 1");
    if (!(s.cov_scale >= 0.0)) throw ConfigError("task.synthetic.cov_scale: must be >= 0");
    if (!(s.mask_rate >= 0.0 && s.mask_rate < 1.0)) {
      throw ConfigError("task.synthetic.mask_rate: must be in [0, 1)");
    }
  } else {
    if (csv.private_path.empty() || csv.public_path.empty() || csv.test_path.empty()) {
      throw ConfigError("task.csv: private, public and test paths are required");
    }
    if (csv.num_classes < 2) throw ConfigError("task.csv.num_classes: must be >= 2");
    if (csv.feature_cols.empty()) throw ConfigError("task.csv.feature_cols: must not be empty");
  }
  if (!node_models.empty() && node_models.size() != nodes) {
    throw ConfigError("node_models: expected " + std::to_string(nodes) + " entries");
  }
  try {
    node_model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("node_model: ") + e.what());
  }
  for (const auto& m : node_models) m.validate();
  central_model.validate();
  ensemble.validate();
  distill.validate();
  if (repeated_queries < 1) throw ConfigError("mode.repeated_queries: must be >= 1");
  if (!(query_noise >= 0.0)) throw ConfigError("mode.query_noise: must be >= 0");
  if (fedavg_rounds < 1) throw ConfigError("fedavg.rounds: must be >= 1");
  if (fedavg_local_epochs < 1) throw ConfigError("fedavg.local_epochs: must be >= 1");
  if (threads < 1) throw ConfigError("threads: must be >= 1");
}

inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  using detail::ObjectReader;
  ExperimentConfig cfg;
  ObjectReader root(doc, "");

  if (!root.has("task")) throw ConfigError("task: missing required key");
  {
    ObjectReader t(root.raw("task"), "task");
    t.require("kind", cfg.task_kind);
    if (t.has("synthetic")) {
      ObjectReader s(t.raw("synthetic"), "task.synthetic");
      auto& sc = cfg.synthetic;
      s.read("generator", sc.generator);
      s.read("classes", sc.classes);
      s.read("dim", sc.dim);
      s.read("train_per_class", sc.train_per_class);
      s.read("test_per_class", sc.test_per_class);
      s.read("public_size", sc.public_size);
      s.read("separation", sc.separation);
      s.read("cov_scale", sc.cov_scale);
      s.read("public_shift", sc.public_shift);
      s.read("mask_rate", sc.mask_rate);
      s.finish();
    }
    if (t.has("csv")) {
      ObjectReader c(t.raw("csv"), "task.csv");
      auto& cc = cfg.csv;
      c.require("private", cc.private_path);
      c.require("public", cc.public_path);
      c.require("test", cc.test_path);
      c.read("label_cols", cc.label_cols);
      c.require("feature_cols", cc.feature_cols);
      std::string task = to_string(cc.task);
      c.read("task", task);
      try {
        cc.task = task_from_string(task);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("task.csv.task: ") + e.what());
      }
      c.require("num_classes", cc.num_classes);
      c.finish();
    } else if (cfg.task_kind == "csv") {
      throw ConfigError("task.csv: missing required section");
    }
    t.finish();
  }

  root.require("nodes", cfg.nodes);
  root.read("alpha", cfg.alpha);
  root.read("seed", cfg.seed);
  root.read("threads", cfg.threads);
  root.read("output_dir", cfg.output_dir);
  if (root.has("node_model")) {
    cfg.node_model = detail::read_train_spec(root.raw("node_model"), "node_model", cfg.node_model);
  }
  cfg.central_model = cfg.node_model;
  if (root.has("node_models")) {
    const auto& arr = root.raw("node_models");
    if (!arr.is_array()) throw ConfigError("node_models: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      cfg.node_models.push_back(
          detail::read_train_spec(arr[i], "node_models[" + std::to_string(i) + "]", cfg.node_model));
    }
  }
  if (root.has("central_model")) {
    cfg.central_model =
        detail::read_train_spec(root.raw("central_model"), "central_model", cfg.central_model);
  }
  if (root.has("ensemble")) {
    ObjectReader e(root.raw("ensemble"), "ensemble");
    if (e.has("S")) {
      const auto& v = e.raw("S");
      if (v.is_string() && v.get<std::string>() == "off") {
        cfg.ensemble.scale.reset();
      } else if (v.is_number_integer() && v.get<std::int64_t>() >= 0) {
        cfg.ensemble.scale = v.get<std::uint32_t>();
      } else {
        throw ConfigError("ensemble.S: expected an integer >= 2 or \"off\"");
      }
    }
    if (e.has("gamma")) {
      const auto& v = e.raw("gamma");
      if (v.is_string() && v.get<std::string>() == "off") {
        cfg.ensemble.gamma.reset();
      } else if (v.is_number()) {
        cfg.ensemble.gamma = v.get<double>();
      } else {
        throw ConfigError("ensemble.gamma: expected a number or \"off\"");
      }
    }
    std::string mode = to_string(cfg.ensemble.weight_mode);
    e.read("weight_mode", mode);
    try {
      cfg.ensemble.weight_mode = weight_mode_from_string(mode);
    } catch (const ConfigError& ex) {
      throw ConfigError(std::string("ensemble.weight_mode: ") + ex.what());
    }
    e.finish();
  }
  if (root.has("distill")) {
    ObjectReader d(root.raw("distill"), "distill");
    d.read("steps", cfg.distill.steps);
    d.read("batch_size", cfg.distill.batch_size);
    d.read("lr", cfg.distill.lr);
    if (d.has("tau")) {
      const auto& v = d.raw("tau");
      if (v.is_string() && v.get<std::string>() == "infinite") {
        cfg.distill.tau.reset();
      } else if (v.is_number()) {
        cfg.distill.tau = v.get<double>();
      } else {
        throw ConfigError("distill.tau: expected a number or \"infinite\"");
      }
    }
    std::string loss = to_string(cfg.distill.loss_mode);
    d.read("loss_mode", loss);
    try {
      cfg.distill.loss_mode = loss_mode_from_string(loss);
    } catch (const ConfigError& ex) {
      throw ConfigError(std::string("distill.loss_mode: ") + ex.what());
    }
    d.finish();
  }
  if (root.has("mode")) {
    ObjectReader m(root.raw("mode"), "mode");
    m.read("repeated_queries", cfg.repeated_queries);
    m.read("query_noise", cfg.query_noise);
    m.read("labeled_public", cfg.labeled_public);
    m.finish();
  }
  if (root.has("fedavg")) {
    ObjectReader f(root.raw("fedavg"), "fedavg");
    f.read("rounds", cfg.fedavg_rounds);
    f.read("local_epochs", cfg.fedavg_local_epochs);
    f.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

/// Full document with every default written out; config_from_json inverts it.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json task{{"kind", cfg.task_kind}};
  if (cfg.task_kind == "synthetic") {
    const auto& s = cfg.synthetic;
    task["synthetic"] = {{"generator", s.generator},     {"classes", s.classes},
                         {"dim", s.dim},                 {"train_per_class", s.train_per_class},
                         {"test_per_class", s.test_per_class}, {"public_size", s.public_size},
                         {"separation", s.separation},   {"cov_scale", s.cov_scale},
                         {"public_shift", s.public_shift}, {"mask_rate", s.mask_rate}};
  } else {
    const auto& c = cfg.csv;
    task["csv"] = {{"private", c.private_path},  {"public", c.public_path},
                   {"test", c.test_path},        {"label_cols", c.label_cols},
                   {"feature_cols", c.feature_cols}, {"task", to_string(c.task)},
                   {"num_classes", c.num_classes}};
  }
  nlohmann::json doc{
      {"task", task},
      {"nodes", cfg.nodes},
      {"alpha", cfg.alpha},
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"output_dir", cfg.output_dir},
      {"node_model", detail::train_spec_json(cfg.node_model)},
      {"central_model", detail::train_spec_json(cfg.central_model)},
      {"ensemble",
       {{"S", cfg.ensemble.scale ? nlohmann::json(*cfg.ensemble.scale) : nlohmann::json("off")},
        {"gamma", cfg.ensemble.gamma ? nlohmann::json(*cfg.ensemble.gamma) : nlohmann::json("off")},
        {"weight_mode", to_string(cfg.ensemble.weight_mode)}}},
      {"distill",
       {{"steps", cfg.distill.steps},
        {"batch_size", cfg.distill.batch_size},
        {"lr", cfg.distill.lr},
        {"tau", cfg.distill.tau ? nlohmann::json(*cfg.distill.tau) : nlohmann::json("infinite")},
        {"loss_mode", to_string(cfg.distill.loss_mode)}}},
      {"mode",
       {{"repeated_queries", cfg.repeated_queries},
        {"query_noise", cfg.query_noise},
        {"labeled_public", cfg.labeled_public}}},
      {"fedavg", {{"rounds", cfg.fedavg_rounds}, {"local_epochs", cfg.fedavg_local_epochs}}},
  };
  if (!cfg.node_models.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& m : cfg.node_models) arr.push_back(detail::train_spec_json(m));
    doc["node_models"] = arr;
  }
  return doc;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return config_from_json(doc);
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

/// 16 hex digits of FNV-1a over the canonical config with the seed zeroed.
inline std::string config_digest(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.seed = 0;
  const std::string text = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

// ---------------------------------------------------------------------------
// Materializing a config
// ---------------------------------------------------------------------------

namespace detail {

inline Dataset take_shuffled(const Dataset& ds, std::size_t count, RandomStream rs) {
  auto order = random_permutation(ds.size(), rs);
  order.resize(std::min(count, order.size()));
  return ds.subset(order);
}

}  // namespace detail

/// Private pool, public set and test set for a config and seed. Synthetic
/// public data is drawn from the same classes under a fixed domain shift.
inline FederatedData make_federated_data(const ExperimentConfig& cfg) {
  FederatedData data;
  if (cfg.task_kind == "csv") {
    const CsvSchema schema{cfg.csv.label_cols, cfg.csv.feature_cols, cfg.csv.task, cfg.csv.num_classes};
    data.private_pool = load_csv(cfg.csv.private_path, schema);
    data.test = load_csv(cfg.csv.test_path, schema);
    // The public set may omit the label columns, in which case it is unlabeled.
    CsvSchema pub = schema;
    const auto header = csv_header(cfg.csv.public_path);
    for (const auto& l : schema.label_cols) {
      if (std::find(header.begin(), header.end(), l) == header.end()) pub.label_cols.clear();
    }
    if (pub.label_cols.empty() && cfg.labeled_public) {
      throw ConfigError("mode.labeled_public: public CSV has no label columns");
    }
    data.public_set = load_csv(cfg.csv.public_path, pub);
    return data;
  }

  const auto& s = cfg.synthetic;
  const std::uint64_t seed = cfg.seed;
  if (s.generator == "gaussian") {
    const Matrix means =
        random_class_means(s.classes, s.dim, s.separation, tagged_stream(seed, StreamTag::data, 1));
    GaussianTaskSpec spec{s.classes, s.dim, s.train_per_class, means, s.cov_scale, {}};
    data.private_pool = gen_gaussian_task(spec, tagged_stream(seed, StreamTag::data, 2));
    spec.per_class_count = s.test_per_class;
    data.test = gen_gaussian_task(spec, tagged_stream(seed, StreamTag::data, 3));
    spec.per_class_count = (s.public_size + s.classes - 1) / s.classes;
    spec.domain_shift = random_shift(s.dim, s.public_shift, tagged_stream(seed, StreamTag::data, 4));
    data.public_set = detail::take_shuffled(gen_gaussian_task(spec, tagged_stream(seed, StreamTag::data, 5)),
                                            s.public_size, tagged_stream(seed, StreamTag::data, 6));
  } else {
    const auto task_rs = tagged_stream(seed, StreamTag::data, 1);
    data.private_pool = gen_multilabel_task(s.classes, s.dim, s.classes * s.train_per_class, s.mask_rate,
                                            task_rs, tagged_stream(seed, StreamTag::data, 2));
    data.test = gen_multilabel_task(s.classes, s.dim, s.classes * s.test_per_class, s.mask_rate, task_rs,
                                    tagged_stream(seed, StreamTag::data, 3));
    const auto shift = random_shift(s.dim, s.public_shift, tagged_stream(seed, StreamTag::data, 4));
    data.public_set = gen_multilabel_task(s.classes, s.dim, s.public_size, s.mask_rate, task_rs,
                                          tagged_stream(seed, StreamTag::data, 5), shift);
  }
  return data;
}

inline PartitionPlan make_partition(const ExperimentConfig& cfg, const FederatedData& data) {
  return dirichlet_partition(data.private_pool, cfg.nodes, cfg.alpha,
                             tagged_stream(cfg.seed, StreamTag::partition));
}

inline std::vector<NodeSpec> make_node_specs(const ExperimentConfig& cfg) {
  std::vector<NodeSpec> nodes;
  for (std::size_t k = 0; k < cfg.nodes; ++k) {
    nodes.push_back({cfg.node_models.empty() ? cfg.node_model : cfg.node_models[k], k});
  }
  return nodes;
}

inline FedKdRun make_fedkd_run(const ExperimentConfig& cfg, PartitionPlan plan) {
  FedKdRun run;
  run.plan = std::move(plan);
  run.nodes = make_node_specs(cfg);
  run.central = cfg.central_model;
  run.ensemble = cfg.ensemble;
  run.distill = cfg.distill;
  run.seed = cfg.seed;
  run.repeated_queries = cfg.repeated_queries;
  run.query_noise = cfg.query_noise;
  run.labeled_public = cfg.labeled_public;
  run.threads = cfg.threads;
  return run;
}

inline FedAvgRun make_fedavg_run(const ExperimentConfig& cfg, PartitionPlan plan) {
  FedAvgRun run;
  run.plan = std::move(plan);
  run.nodes = make_node_specs(cfg);
  run.rounds = cfg.fedavg_rounds;
  run.local_epochs = cfg.fedavg_local_epochs;
  run.seed = cfg.seed;
  run.threads = cfg.threads;
  return run;
}

}  // namespace fedkd
