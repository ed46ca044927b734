#pragma once

// Protocol orchestration: independent local training, one-shot logit
// collection over the public set, the noisy quantized ensemble, offline
// distillation, the FedAvg baseline, and byte-exact bandwidth accounting.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedkd/datasets.hpp"
#include "fedkd/distill.hpp"
#include "fedkd/errors.hpp"
#include "fedkd/numkit.hpp"
#include "fedkd/privacy_ensemble.hpp"

namespace fedkd {

// ---------------------------------------------------------------------------
// Bandwidth ledger
// ---------------------------------------------------------------------------

enum class Phase { logits_up, scalar_max_up, params_up, params_down };

inline constexpr Phase kAllPhases[] = {Phase::logits_up, Phase::scalar_max_up, Phase::params_up,
                                       Phase::params_down};

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::logits_up: return "logits_up";
    case Phase::scalar_max_up: return "scalar_max_up";
    case Phase::params_up: return "params_up";
    case Phase::params_down: return "params_down";
  }
  return "unknown";
}

/// One transmitted frame. `bytes` is the serialized frame, `payload_bytes`
/// the float64 body alone, `packed_bytes` what the same frame costs in the
/// packed-integer wire format.
struct LedgerEntry {
  Phase phase = Phase::logits_up;
  std::uint64_t node_id = 0;
  std::uint64_t bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t packed_bytes = 0;

  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

class BandwidthLedger {
 public:
  void record(Phase phase, std::uint64_t node_id, std::uint64_t bytes, std::uint64_t payload_bytes,
              std::uint64_t packed_bytes) {
    entries_.push_back({phase, node_id, bytes, payload_bytes, packed_bytes});
  }

  const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }

  std::uint64_t total() const noexcept {
    return sum([](const LedgerEntry&) { return true; }, &LedgerEntry::bytes);
  }
  std::uint64_t total(Phase p) const noexcept {
    return sum([p](const LedgerEntry& e) { return e.phase == p; }, &LedgerEntry::bytes);
  }
  std::uint64_t payload_total() const noexcept {
    return sum([](const LedgerEntry&) { return true; }, &LedgerEntry::payload_bytes);
  }
  std::uint64_t payload_total(Phase p) const noexcept {
    return sum([p](const LedgerEntry& e) { return e.phase == p; }, &LedgerEntry::payload_bytes);
  }
  std::uint64_t packed_total() const noexcept {
    return sum([](const LedgerEntry&) { return true; }, &LedgerEntry::packed_bytes);
  }
  std::size_t count(Phase p) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [p](const auto& e) { return e.phase == p; }));
  }

  friend bool operator==(const BandwidthLedger&, const BandwidthLedger&) = default;

 private:
  template <typename Pred>
  std::uint64_t sum(Pred pred, std::uint64_t LedgerEntry::*field) const noexcept {
    std::uint64_t s = 0;
    for (const auto& e : entries_) {
      if (pred(e)) s += e.*field;
    }
    return s;
  }

  std::vector<LedgerEntry> entries_;
};

struct PhaseTotals {
  std::size_t frames = 0;
  std::uint64_t bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t packed_bytes = 0;
};

struct LedgerReport {
  std::map<std::string, PhaseTotals> per_phase;
  std::uint64_t total_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t packed_bytes = 0;

  static double gb(std::uint64_t b) { return static_cast<double>(b) / 1e9; }
  static double gib(std::uint64_t b) { return static_cast<double>(b) / 1073741824.0; }
  static double mb(std::uint64_t b) { return static_cast<double>(b) / 1e6; }

  std::string text() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    for (const auto& [phase, t] : per_phase) {
      out << phase << ": frames=" << t.frames << " bytes=" << t.bytes
          << " payload=" << t.payload_bytes << " packed=" << t.packed_bytes << '\n';
    }
    out << "total: bytes=" << total_bytes << " (" << gb(total_bytes) << " GB, " << gib(total_bytes)
        << " GiB, " << mb(total_bytes) << " MB)\n";
    out << "float64 payload: bytes=" << payload_bytes << " (" << gb(payload_bytes) << " GB, "
        << gib(payload_bytes) << " GiB)\n";
    out << "packed: bytes=" << packed_bytes << " (" << gb(packed_bytes) << " GB, "
        << gib(packed_bytes) << " GiB)\n";
    return out.str();
  }
};

inline LedgerReport ledger_report(const BandwidthLedger& ledger) {
  LedgerReport r;
  for (const auto& e : ledger.entries()) {
    auto& t = r.per_phase[to_string(e.phase)];
    ++t.frames;
    t.bytes += e.bytes;
    t.payload_bytes += e.payload_bytes;
    t.packed_bytes += e.packed_bytes;
  }
  r.total_bytes = ledger.total();
  r.payload_bytes = ledger.payload_total();
  r.packed_bytes = ledger.packed_total();
  return r;
}

inline void write_ledger_csv(std::ostream& out, const BandwidthLedger& ledger) {
  out << "phase,node_id,bytes\n";
  for (const auto& e : ledger.entries()) {
    out << to_string(e.phase) << ',' << e.node_id << ',' << e.bytes << '\n';
  }
}

/// Parameter frame: node_id and parameter count as u64, then float64 values.
inline constexpr std::size_t kParamsHeaderBytes = 16;

inline void record_params(BandwidthLedger& ledger, Phase phase, std::uint64_t node_id,
                          std::uint64_t parameter_count) {
  const std::uint64_t payload = parameter_count * sizeof(double);
  ledger.record(phase, node_id, kParamsHeaderBytes + payload, payload, kParamsHeaderBytes + payload);
}

inline void record_logits(BandwidthLedger& ledger, std::uint64_t node_id, std::size_t rows,
                          std::size_t cols, std::optional<std::uint32_t> scale) {
  const std::uint64_t frame = frame_size(rows, cols, WireFormat::float64);
  const std::uint64_t packed =
      scale ? frame_size(rows, cols, WireFormat::packed, *scale) : frame;
  ledger.record(Phase::logits_up, node_id, frame, frame_payload_size(rows, cols, WireFormat::float64),
                packed);
}

inline void record_scalar_max(BandwidthLedger& ledger, std::uint64_t node_id) {
  ledger.record(Phase::scalar_max_up, node_id, sizeof(double), sizeof(double), sizeof(double));
}

/// The ledger a FedKD run with `nodes` active nodes, a rows x cols public
/// logit matrix and `repeats` queries per sample produces, computed without
/// running anything.
inline BandwidthLedger fedkd_ledger(std::size_t nodes, std::size_t rows, std::size_t cols,
                                    std::optional<std::uint32_t> scale, std::size_t repeats = 1) {
  BandwidthLedger ledger;
  for (std::size_t k = 0; k < nodes; ++k) record_scalar_max(ledger, k);
  for (std::size_t k = 0; k < nodes; ++k) {
    for (std::size_t r = 0; r < repeats; ++r) record_logits(ledger, k, rows, cols, scale);
  }
  return ledger;
}

/// Same for FedAvg with full participation: one download and one upload of
/// P float64 parameters per node per round.
inline BandwidthLedger fedavg_ledger(std::size_t nodes, std::size_t rounds,
                                     std::uint64_t parameter_count) {
  BandwidthLedger ledger;
  for (std::size_t r = 0; r < rounds; ++r) {
    for (std::size_t k = 0; k < nodes; ++k) record_params(ledger, Phase::params_down, k, parameter_count);
    for (std::size_t k = 0; k < nodes; ++k) record_params(ledger, Phase::params_up, k, parameter_count);
  }
  return ledger;
}

// ---------------------------------------------------------------------------
// Run description
// ---------------------------------------------------------------------------

/// Local (supervised) training hyperparameters and model shape.
struct TrainSpec {
  std::vector<std::size_t> hidden{32};
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr_start = 0.05;
  double lr_end = 0.005;
  double weight_decay = 3e-4;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr_start >= 0.0) || !(lr_end >= 0.0)) throw ConfigError("train: learning rates must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    for (auto h : hidden) {
      if (h == 0) throw ConfigError("train: hidden widths must be positive");
    }
  }

  std::vector<std::size_t> layer_dims(std::size_t input, std::size_t classes) const {
    std::vector<std::size_t> dims{input};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(classes);
    return dims;
  }

  friend bool operator==(const TrainSpec&, const TrainSpec&) = default;
};

struct NodeSpec {
  TrainSpec train;
  std::uint64_t stream_id = 0;  // keys this node's random streams

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

/// Private pool (split by the partition plan), public set and test set.
struct FederatedData {
  Dataset private_pool;
  Dataset public_set;
  Dataset test;
};

struct FedKdRun {
  PartitionPlan plan;
  std::vector<NodeSpec> nodes;
  TrainSpec central;  // only the hidden widths are used
  EnsembleConfig ensemble;
  DistillConfig distill;
  std::uint64_t seed = 0;
  std::size_t repeated_queries = 1;
  double query_noise = 0.0;
  bool labeled_public = false;
  std::size_t threads = 1;

  std::size_t num_nodes() const noexcept { return nodes.size(); }

  void validate() const {
    if (nodes.empty()) throw ConfigError("run: no nodes");
    if (plan.num_nodes() != nodes.size()) {
      throw ConfigError("run: partition has " + std::to_string(plan.num_nodes()) +
                        " shards for " + std::to_string(nodes.size()) + " nodes");
    }
    if (repeated_queries < 1) throw ConfigError("run: repeated_queries must be >= 1");
    if (!(query_noise >= 0.0)) throw ConfigError("run: query_noise must be >= 0");
    for (const auto& n : nodes) n.train.validate();
    central.validate();
    ensemble.validate();
    distill.validate();
  }
};

/// Stream tags; a node's stream for a purpose is (seed, combine(tag, node stream id)).
enum class StreamTag : std::uint64_t {
  init = 1,
  local_train = 2,
  query = 3,
  ensemble = 4,
  distill = 5,
  central_init = 6,
  partition = 7,
  data = 8,
};

inline RandomStream tagged_stream(std::uint64_t seed, StreamTag tag, std::uint64_t id = 0) {
  return RandomStream(seed, detail::combine(static_cast<std::uint64_t>(tag), id));
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

namespace detail {

inline LossAndGrad supervised_loss(const Matrix& logits, const Dataset& batch) {
  return batch.task == Task::single_label ? softmax_cross_entropy(logits, batch.labels)
                                          : masked_bce(logits, batch.labels);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots; the first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(threads, n);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// Trains epochs [first_epoch, first_epoch + num_epochs) of a schedule that
/// spans `total_epochs`. Each epoch is a fresh shuffle of the data in
/// mini-batches (the last one may be short); the cosine learning rate is
/// stepped per mini-batch across the whole span.
inline MlpModel train_epochs(MlpModel model, const Dataset& data, const TrainSpec& spec,
                             const RandomStream& rs, std::size_t first_epoch,
                             std::size_t num_epochs, std::size_t total_epochs) {
  spec.validate();
  if (data.size() == 0) throw ConfigError("train: empty training set");
  const std::size_t n = data.size();
  const std::size_t per_epoch = (n + spec.batch_size - 1) / spec.batch_size;
  const CosineSchedule schedule{spec.lr_start, spec.lr_end, per_epoch * total_epochs};
  for (std::size_t e = first_epoch; e < first_epoch + num_epochs; ++e) {
    auto ers = rs.derive(e);
    const auto order = random_permutation(n, ers);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * spec.batch_size;
      const std::size_t hi = std::min(n, lo + spec.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Dataset batch = data.subset(idx);
      const Matrix logits = mlp_forward(model, batch.features);
      const LossAndGrad lg = detail::supervised_loss(logits, batch);
      const auto grads = mlp_backward(model, batch.features, lg.grad);
      const double lr = cosine_lr(schedule, e * per_epoch + b);
      model = sgd_step(std::move(model), grads, lr, spec.weight_decay);
    }
  }
  return model;
}

/// Fresh initialization followed by spec.epochs of training, all keyed by
/// (seed, stream_id).
inline MlpModel train_node_model(const Dataset& data, const TrainSpec& spec, std::uint64_t seed,
                                 std::uint64_t stream_id) {
  auto model = MlpModel::init(spec.layer_dims(data.dim(), data.num_classes),
                              tagged_stream(seed, StreamTag::init, stream_id));
  return train_epochs(std::move(model), data, spec, tagged_stream(seed, StreamTag::local_train, stream_id),
                      0, spec.epochs, spec.epochs);
}

// ---------------------------------------------------------------------------
// FedKD phases
// ---------------------------------------------------------------------------

/// A node's training shard, with the labeled public set appended in
/// labeled-public mode.
inline Dataset node_shard(const FedKdRun& run, const FederatedData& data, std::size_t k) {
  Dataset shard = data.private_pool.subset(run.plan.assignments.at(k));
  if (run.labeled_public) shard = concat(shard, data.public_set);
  return shard;
}

/// Trains every node on its own shard. Nodes with an empty shard are skipped
/// (nullopt) and drop out of every later phase.
inline std::vector<std::optional<MlpModel>> train_locals(const FedKdRun& run, const FederatedData& data) {
  run.validate();
  std::vector<std::optional<MlpModel>> models(run.num_nodes());
  detail::parallel_for(run.num_nodes(), run.threads, [&](std::size_t k) {
    const Dataset shard = node_shard(run, data, k);
    if (shard.size() == 0) return;
    models[k] = train_node_model(shard, run.nodes[k].train, run.seed, run.nodes[k].stream_id);
  });
  return models;
}

/// One node answering public queries. Counts every public row it forwards.
class QueryableNode {
 public:
  QueryableNode(std::uint64_t node_id, const MlpModel& model) : node_id_(node_id), model_(&model) {}

  std::uint64_t node_id() const noexcept { return node_id_; }
  std::size_t queries() const noexcept { return queries_; }

  Matrix answer(const Matrix& inputs) {
    queries_ += inputs.rows();
    return mlp_forward(*model_, inputs);
  }

 private:
  std::uint64_t node_id_;
  const MlpModel* model_;
  std::size_t queries_ = 0;
};

/// What one node uploads: R logit frames and its max-abs scalar.
struct NodeUpload {
  std::uint64_t node_id = 0;
  std::vector<std::vector<std::uint8_t>> frames;
  double max_abs = 0.0;
};

/// Node side of logit collection. With repeats == 1 the node forwards the
/// public set once. With repeats > 1 it forwards `repeats` copies perturbed
/// by Gaussian feature noise of scale `noise`, one frame per pass.
inline NodeUpload node_collect(QueryableNode& node, const Matrix& public_features,
                               std::size_t repeats, double noise, RandomStream rs) {
  NodeUpload up;
  up.node_id = node.node_id();
  Matrix mean;
  for (std::size_t r = 0; r < repeats; ++r) {
    Matrix inputs = public_features;
    if (repeats > 1 && noise > 0.0) {
      auto prs = rs.derive(r);
      for (double& v : inputs.data()) v += noise * prs.gauss();
    }
    const Matrix logits = node.answer(inputs);
    up.frames.push_back(encode_frame(LogitBlock::make(node.node_id(), logits), WireFormat::float64));
    if (r == 0) {
      mean = logits;
    } else {
      for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] += logits.data()[i];
    }
  }
  if (repeats > 1) {
    for (double& v : mean.data()) v /= static_cast<double>(repeats);
  }
  up.max_abs = mean.max_abs();
  return up;
}

/// Server side: records every frame and scalar in the ledger and rebuilds the
/// node's block as the mean of its decoded frames.
inline LogitBlock receive_upload(const NodeUpload& up, BandwidthLedger& ledger,
                                 std::optional<std::uint32_t> scale) {
  if (up.frames.empty()) throw ConfigError("receive_upload: node sent no frames");
  Matrix mean;
  for (std::size_t r = 0; r < up.frames.size(); ++r) {
    const LogitBlock b = decode_frame(up.frames[r], WireFormat::float64);
    const std::uint64_t packed =
        scale ? frame_size(b.logits.rows(), b.logits.cols(), WireFormat::packed, *scale)
              : up.frames[r].size();
    ledger.record(Phase::logits_up, up.node_id, up.frames[r].size(),
                  frame_payload_size(b.logits.rows(), b.logits.cols(), WireFormat::float64), packed);
    if (r == 0) {
      mean = b.logits;
    } else {
      for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] += b.logits.data()[i];
    }
  }
  if (up.frames.size() > 1) {
    for (double& v : mean.data()) v /= static_cast<double>(up.frames.size());
  }
  LogitBlock block;
  block.node_id = up.node_id;
  block.logits = std::move(mean);
  block.local_max_abs = up.max_abs;
  return block;
}

/// Forward passes of every active node over the public set, without ledger
/// bookkeeping. Inactive (nullopt) nodes are skipped.
inline std::vector<LogitBlock> collect_logits(std::span<const std::optional<MlpModel>> models,
                                              const Dataset& public_set, std::size_t repeats,
                                              double noise, std::uint64_t seed,
                                              std::span<const std::uint64_t> stream_ids = {}) {
  if (repeats < 1) throw ConfigError("collect_logits: repeats must be >= 1");
  std::vector<LogitBlock> blocks;
  BandwidthLedger scratch;
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (!models[k]) continue;
    QueryableNode node(k, *models[k]);
    const std::uint64_t sid = stream_ids.empty() ? k : stream_ids[k];
    const auto up = node_collect(node, public_set.features, repeats, noise,
                                 tagged_stream(seed, StreamTag::query, sid));
    blocks.push_back(receive_upload(up, scratch, std::nullopt));
  }
  return blocks;
}

struct NodeMetric {
  std::uint64_t node_id = 0;
  std::size_t shard_size = 0;
  std::optional<double> score;  // nullopt for skipped nodes
};

struct FedKdResult {
  MlpModel central;
  std::vector<std::optional<MlpModel>> locals;
  Matrix teacher_logits;
  std::vector<NodeMetric> standalone;
  double central_score = 0.0;
  double teacher_agreement = 0.0;  // argmax agreement of central vs teacher on the public set
  double z_max = 0.0;
  BandwidthLedger ledger;
  std::vector<LossRecord> trace;
  std::vector<std::size_t> public_queries;   // per node, during logit collection
  std::vector<std::size_t> distill_queries;  // per node, during distillation

  double standalone_mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& m : standalone) {
      if (m.score) {
        s += *m.score;
        ++n;
      }
    }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
  }
};

/// Local training, then the logit ensemble, then distillation. Only the
/// per-node max-abs scalar and the logit frames cross the wire.
inline FedKdResult run_fedkd(const FedKdRun& run, const FederatedData& data) {
  run.validate();
  if (data.public_set.size() == 0) throw ConfigError("run_fedkd: empty public set");
  if (data.public_set.dim() != data.private_pool.dim()) {
    throw DimensionError("run_fedkd: public and private feature dims differ");
  }
  FedKdResult res;
  const std::size_t k_nodes = run.num_nodes();

  // Local training.
  res.locals = train_locals(run, data);
  std::vector<NodeProfile> all_profiles(k_nodes);
  for (std::size_t k = 0; k < k_nodes; ++k) {
    const Dataset shard = node_shard(run, data, k);
    all_profiles[k] = profile_dataset(shard);
    res.standalone.push_back({k, shard.size(), std::nullopt});
  }
  detail::parallel_for(k_nodes, run.threads, [&](std::size_t k) {
    if (res.locals[k]) res.standalone[k].score = evaluate(*res.locals[k], data.test);
  });

  // Logit collection: node tasks run independently, the server consumes the
  // uploads in node order.
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < k_nodes; ++k) {
    if (res.locals[k]) active.push_back(k);
  }
  if (active.empty()) throw ConfigError("run_fedkd: every node has an empty shard");
  std::vector<NodeUpload> uploads(active.size());
  res.public_queries.assign(k_nodes, 0);
  res.distill_queries.assign(k_nodes, 0);
  std::vector<QueryableNode> handles;
  handles.reserve(active.size());
  for (auto k : active) handles.emplace_back(k, *res.locals[k]);
  detail::parallel_for(active.size(), run.threads, [&](std::size_t a) {
    const auto k = active[a];
    uploads[a] = node_collect(handles[a], data.public_set.features, run.repeated_queries,
                              run.query_noise,
                              tagged_stream(run.seed, StreamTag::query, run.nodes[k].stream_id));
  });
  for (std::size_t a = 0; a < active.size(); ++a) {
    res.public_queries[active[a]] = handles[a].queries();
  }

  // Ensemble.
  std::vector<LogitBlock> blocks;
  std::vector<NodeProfile> profiles;
  for (const auto& up : uploads) record_scalar_max(res.ledger, up.node_id);
  for (std::size_t a = 0; a < active.size(); ++a) {
    blocks.push_back(receive_upload(uploads[a], res.ledger, run.ensemble.scale));
    profiles.push_back(all_profiles[active[a]]);
  }
  res.z_max = global_max_abs(blocks);
  const WeightTable weights = make_weights(profiles, run.ensemble.weight_mode);
  res.teacher_logits = ensemble(blocks, weights, run.ensemble,
                                tagged_stream(run.seed, StreamTag::ensemble));

  // Distillation.
  auto central = MlpModel::init(
      run.central.layer_dims(data.public_set.dim(), data.public_set.num_classes),
      tagged_stream(run.seed, StreamTag::central_init));
  DistillConfig dcfg = run.distill;
  dcfg.task = data.public_set.task;
  auto distilled = distill(std::move(central), data.public_set.features, res.teacher_logits, dcfg,
                           tagged_stream(run.seed, StreamTag::distill));
  for (std::size_t a = 0; a < active.size(); ++a) {
    res.distill_queries[active[a]] = handles[a].queries() - res.public_queries[active[a]];
  }
  res.central = std::move(distilled.model);
  res.trace = std::move(distilled.trace);
  res.central_score = evaluate(res.central, data.test);
  res.teacher_agreement =
      argmax_agreement(mlp_forward(res.central, data.public_set.features), res.teacher_logits);
  return res;
}

/// Single model on the union of all shards, trained exactly like node 0.
inline MlpModel train_centralized(const FedKdRun& run, const FederatedData& data) {
  run.validate();
  Dataset all = data.private_pool;
  if (run.labeled_public) all = concat(all, data.public_set);
  return train_node_model(all, run.nodes.front().train, run.seed, run.nodes.front().stream_id);
}

// ---------------------------------------------------------------------------
// FedAvg baseline
// ---------------------------------------------------------------------------

struct FedAvgRun {
  PartitionPlan plan;
  std::vector<NodeSpec> nodes;  // identical hidden widths required
  std::size_t rounds = 30;
  std::size_t local_epochs = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::size_t num_nodes() const noexcept { return nodes.size(); }

  void validate() const {
    if (nodes.empty()) throw ConfigError("fedavg: no nodes");
    if (plan.num_nodes() != nodes.size()) throw ConfigError("fedavg: partition/node count mismatch");
    if (rounds < 1 || local_epochs < 1) throw ConfigError("fedavg: rounds and local_epochs must be >= 1");
    for (const auto& n : nodes) {
      n.train.validate();
      if (n.train.hidden != nodes.front().train.hidden) {
        throw ConfigError("fedavg: parameter averaging needs identical model specs on every node");
      }
    }
  }
};

struct FedAvgResult {
  MlpModel global;
  double score = 0.0;
  std::vector<double> round_scores;
  BandwidthLedger ledger;
};

/// Full-participation FedAvg. Each round broadcasts the global parameters,
/// trains local_epochs on every non-empty shard, and replaces the global
/// model by the shard-size weighted mean of the uploads.
inline FedAvgResult run_fedavg(const FedAvgRun& run, const FederatedData& data) {
  run.validate();
  const std::size_t k_nodes = run.num_nodes();
  std::vector<Dataset> shards;
  std::vector<std::size_t> active;
  std::size_t total = 0;
  for (std::size_t k = 0; k < k_nodes; ++k) {
    shards.push_back(data.private_pool.subset(run.plan.assignments[k]));
    if (shards.back().size() > 0) {
      active.push_back(k);
      total += shards.back().size();
    }
  }
  if (active.empty()) throw ConfigError("fedavg: every node has an empty shard");

  FedAvgResult res;
  const auto& spec0 = run.nodes.front();
  res.global = MlpModel::init(
      spec0.train.layer_dims(data.private_pool.dim(), data.private_pool.num_classes),
      tagged_stream(run.seed, StreamTag::init, spec0.stream_id));
  const std::size_t p = res.global.parameter_count();
  const std::size_t total_epochs = run.rounds * run.local_epochs;

  for (std::size_t r = 0; r < run.rounds; ++r) {
    for (auto k : active) record_params(res.ledger, Phase::params_down, k, p);
    std::vector<MlpModel> updates(active.size());
    detail::parallel_for(active.size(), run.threads, [&](std::size_t a) {
      const auto k = active[a];
      updates[a] = train_epochs(res.global, shards[k], run.nodes[k].train,
                                tagged_stream(run.seed, StreamTag::local_train, run.nodes[k].stream_id),
                                r * run.local_epochs, run.local_epochs, total_epochs);
    });
    for (auto k : active) record_params(res.ledger, Phase::params_up, k, p);

    MlpModel next = MlpModel::zeros(res.global.layer_dims);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const double w = static_cast<double>(shards[active[a]].size()) / static_cast<double>(total);
      for (std::size_t l = 0; l < next.num_layers(); ++l) {
        auto nw = next.weights[l].data();
        auto nb = next.biases[l].data();
        const auto uw = updates[a].weights[l].data();
        const auto ub = updates[a].biases[l].data();
        for (std::size_t i = 0; i < nw.size(); ++i) nw[i] += w * uw[i];
        for (std::size_t i = 0; i < nb.size(); ++i) nb[i] += w * ub[i];
      }
    }
    res.global = std::move(next);
    res.round_scores.push_back(evaluate(res.global, data.test));
  }
  res.score = res.round_scores.back();
  return res;
}

}  // namespace fedkd
