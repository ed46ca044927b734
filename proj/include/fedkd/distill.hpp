#pragma once

// Activations, losses, evaluation metrics and the offline distillation
// trainer that fits a central model to frozen ensemble logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedkd/datasets.hpp"
#include "fedkd/errors.hpp"
#include "fedkd/numkit.hpp"

namespace fedkd {

inline constexpr double kProbFloor = 1e-12;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Softmax of z / tau, max-subtracted.
inline std::vector<double> softmax_tau(std::span<const double> z, double tau) {
  if (!(tau > 0.0)) throw RangeError("softmax_tau: tau must be positive");
  std::vector<double> p(z.size());
  if (z.empty()) return p;
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    p[c] = std::exp((z[c] - m) / tau);
    total += p[c];
  }
  for (auto& v : p) v /= total;
  return p;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline std::vector<double> sigmoid(std::span<const double> z) {
  std::vector<double> p(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) p[c] = sigmoid(z[c]);
  return p;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// KL(p || q) = sum_c p_c log(p_c / q_c), with 0 log 0 = 0 and q clamped.
inline double kl_loss(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_loss: length mismatch");
  double loss = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] <= 0.0) continue;
    loss += p[c] * std::log(std::max(p[c], kProbFloor) / std::max(q[c], kProbFloor));
  }
  return std::max(loss, 0.0);
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

/// (1/B) sum ||student - teacher||^2 with gradient (2/B)(student - teacher).
inline LossAndGrad logit_l2_loss(const Matrix& student, const Matrix& teacher) {
  detail::require_same_shape(student, teacher, "logit_l2_loss");
  const double b = static_cast<double>(student.rows());
  LossAndGrad out{0.0, Matrix(student.rows(), student.cols())};
  if (student.rows() == 0) return out;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const double d = student.data()[i] - teacher.data()[i];
    out.loss += d * d;
    out.grad.data()[i] = 2.0 * d / b;
  }
  out.loss /= b;
  return out;
}

/// Batch mean of tau^2 * KL(act(teacher / tau) || act(student / tau)).
/// Softmax for single-label, per-class Bernoulli sigmoid for multi-label;
/// both give the logit gradient tau * (q - p) / B.
inline LossAndGrad kl_distill_loss(const Matrix& student, const Matrix& teacher, double tau,
                                   Task task = Task::single_label) {
  detail::require_same_shape(student, teacher, "kl_distill_loss");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw RangeError("kl_distill_loss: tau must be finite and positive");
  const double b = static_cast<double>(student.rows());
  LossAndGrad out{0.0, Matrix(student.rows(), student.cols())};
  if (student.rows() == 0) return out;
  for (std::size_t i = 0; i < student.rows(); ++i) {
    auto g = out.grad.row(i);
    if (task == Task::single_label) {
      const auto p = softmax_tau(teacher.row(i), tau);
      const auto q = softmax_tau(student.row(i), tau);
      out.loss += tau * tau * kl_loss(p, q);
      for (std::size_t c = 0; c < p.size(); ++c) g[c] = tau * (q[c] - p[c]) / b;
    } else {
      for (std::size_t c = 0; c < student.cols(); ++c) {
        const double p = sigmoid(teacher(i, c) / tau);
        const double q = sigmoid(student(i, c) / tau);
        const std::vector<double> pp{p, 1.0 - p};
        const std::vector<double> qq{q, 1.0 - q};
        out.loss += tau * tau * kl_loss(pp, qq);
        g[c] = tau * (q - p) / b;
      }
    }
  }
  out.loss /= b;
  return out;
}

/// Logit gradient of tau^2 * KL(softmax_tau(teacher) || softmax_tau(student))
/// for a single row.
inline std::vector<double> kl_logit_grad(std::span<const double> student,
                                         std::span<const double> teacher, double tau) {
  const auto p = softmax_tau(teacher, tau);
  const auto q = softmax_tau(student, tau);
  std::vector<double> g(p.size());
  for (std::size_t c = 0; c < g.size(); ++c) g[c] = tau * (q[c] - p[c]);
  return g;
}

/// Mean softmax cross-entropy against class indices.
inline LossAndGrad softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("softmax_cross_entropy: label count");
  const double b = static_cast<double>(logits.rows());
  LossAndGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto p = softmax_tau(logits.row(i), 1.0);
    const auto y = static_cast<std::size_t>(labels[i]);
    out.loss -= std::log(std::max(p[y], kProbFloor));
    auto g = out.grad.row(i);
    for (std::size_t c = 0; c < p.size(); ++c) g[c] = (p[c] - (c == y ? 1.0 : 0.0)) / b;
  }
  out.loss /= b;
  return out;
}

/// Binary cross-entropy per class on sigmoid outputs; entries labeled -1 are
/// skipped. Normalized by the batch size.
inline LossAndGrad masked_bce(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.size()) throw DimensionError("masked_bce: label count");
  const double b = static_cast<double>(logits.rows());
  LossAndGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const int y = labels[i];
    if (y < 0) continue;
    const double z = logits.data()[i];
    // log(1 + exp(-|z|)) form avoids overflow.
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    out.loss += softplus - (y == 1 ? z : 0.0);
    out.grad.data()[i] = (sigmoid(z) - static_cast<double>(y)) / b;
  }
  out.loss /= b;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c) {
    if (v[c] > v[best]) best = c;
  }
  return best;
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
inline double accuracy_from_logits(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("accuracy: label count");
  if (logits.rows() == 0) throw EvaluationError("accuracy: empty evaluation set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    hits += argmax(logits.row(i)) == static_cast<std::size_t>(labels[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

inline double evaluate_single(const MlpModel& model, const Dataset& test) {
  if (test.task != Task::single_label) throw EvaluationError("evaluate_single: multi-label dataset");
  return accuracy_from_logits(mlp_forward(model, test.features), test.labels);
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half. nullopt without both classes present.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> truth) {
  if (scores.size() != truth.size()) throw DimensionError("auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t pos = 0;
  std::size_t neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (truth[order[t]] == 1) {
        rank_sum_pos += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  const double np = static_cast<double>(pos);
  const double nn = static_cast<double>(neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct MultiLabelScore {
  std::vector<std::optional<double>> per_class_auc;
  double mauc = 0.0;
};

/// Per-class AUC over rows whose entry is 0 or 1 (-1 excluded), and the
/// unweighted mean over classes that have both a positive and a negative.
inline MultiLabelScore evaluate_multi_scores(const Matrix& scores, const Dataset& test) {
  if (test.task != Task::multi_label) throw EvaluationError("evaluate_multi: single-label dataset");
  if (scores.rows() != test.size() || scores.cols() != test.num_classes) {
    throw DimensionError("evaluate_multi: score matrix shape");
  }
  MultiLabelScore out;
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t c = 0; c < test.num_classes; ++c) {
    std::vector<double> s;
    std::vector<int> t;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const int y = test.label(i, c);
      if (y < 0) continue;
      s.push_back(scores(i, c));
      t.push_back(y);
    }
    auto a = auc(s, t);
    out.per_class_auc.push_back(a);
    if (a) {
      total += *a;
      ++valid;
    }
  }
  if (valid == 0) throw EvaluationError("evaluate_multi: no class has both positives and negatives");
  out.mauc = total / static_cast<double>(valid);
  return out;
}

inline MultiLabelScore evaluate_multi(const MlpModel& model, const Dataset& test) {
  const Matrix logits = mlp_forward(model, test.features);
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.size(); ++i) probs.data()[i] = sigmoid(logits.data()[i]);
  return evaluate_multi_scores(probs, test);
}

/// Accuracy for single-label data, mAUC for multi-label data.
inline double evaluate(const MlpModel& model, const Dataset& test) {
  return test.task == Task::single_label ? evaluate_single(model, test)
                                         : evaluate_multi(model, test).mauc;
}

/// Share of rows on which two logit matrices have the same argmax.
inline double argmax_agreement(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "argmax_agreement");
  if (a.rows() == 0) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) same += argmax(a.row(i)) == argmax(b.row(i));
  return static_cast<double>(same) / static_cast<double>(a.rows());
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

enum class LossMode { logit_l2, kl };

inline std::string to_string(LossMode m) { return m == LossMode::logit_l2 ? "logit_l2" : "kl"; }

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "logit_l2") return LossMode::logit_l2;
  if (s == "kl") return LossMode::kl;
  throw ConfigError("unknown loss_mode '" + s + "' (expected logit_l2 or kl)");
}

struct DistillConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double lr = 0.01;
  std::optional<double> tau;  // empty = infinite temperature
  LossMode loss_mode = LossMode::logit_l2;
  Task task = Task::single_label;

  void validate() const {
    if (steps < 1) throw ConfigError("distill: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("distill: lr must be >= 0");
    if (tau && !(*tau > 0.0 && std::isfinite(*tau))) throw ConfigError("distill: tau must be positive");
    if (loss_mode == LossMode::kl && !tau) throw ConfigError("distill: kl loss needs a finite tau");
  }

  friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct DistillResult {
  MlpModel model;
  std::vector<LossRecord> trace;
};

/// Draws consecutive batches from per-epoch shuffles of [0, n); a partial
/// tail is dropped and a new epoch begins.
class EpochBatcher {
 public:
  EpochBatcher(std::size_t n, std::size_t batch, RandomStream rs)
      : n_(n), batch_(batch), rs_(rs) {}

  std::span<const std::size_t> next() {
    if (order_.empty() || pos_ + batch_ > order_.size()) {
      auto ers = rs_.derive(epoch_++);
      order_ = random_permutation(n_, ers);
      pos_ = 0;
    }
    std::span<const std::size_t> out(order_.data() + pos_, batch_);
    pos_ += batch_;
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  RandomStream rs_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::uint64_t epoch_ = 0;
};

/// Fits `central` to frozen teacher logits on the public features with T
/// plain SGD steps. The teacher is never re-queried.
inline DistillResult distill(MlpModel central, const Matrix& public_features,
                             const Matrix& teacher_logits, const DistillConfig& cfg,
                             RandomStream rs) {
  cfg.validate();
  if (teacher_logits.rows() != public_features.rows()) {
    throw DimensionError("distill: teacher has " + std::to_string(teacher_logits.rows()) +
                         " rows, public set has " + std::to_string(public_features.rows()));
  }
  if (teacher_logits.cols() != central.output_dim()) {
    throw DimensionError("distill: teacher width does not match the central model");
  }
  if (public_features.cols() != central.input_dim()) {
    throw DimensionError("distill: public features do not match the central model input");
  }
  if (cfg.batch_size > public_features.rows()) {
    throw ConfigError("distill: batch size " + std::to_string(cfg.batch_size) +
                      " exceeds public set size " + std::to_string(public_features.rows()));
  }

  DistillResult result;
  result.trace.reserve(cfg.steps);
  EpochBatcher batcher(public_features.rows(), cfg.batch_size, rs);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const auto idx = batcher.next();
    const Matrix x = public_features.gather_rows(idx);
    const Matrix target = teacher_logits.gather_rows(idx);
    const Matrix student = mlp_forward(central, x);
    const LossAndGrad lg = cfg.loss_mode == LossMode::logit_l2
                               ? logit_l2_loss(student, target)
                               : kl_distill_loss(student, target, *cfg.tau, cfg.task);
    result.trace.push_back({t + 1, lg.loss, cfg.lr});
    if (cfg.lr == 0.0) continue;
    const auto grads = mlp_backward(central, x, lg.grad);
    central = sgd_step(std::move(central), grads, cfg.lr, 0.0);
  }
  result.model = std::move(central);
  return result;
}

inline DistillResult distill(MlpModel central, const Dataset& public_set,
                             const Matrix& teacher_logits, const DistillConfig& cfg,
                             RandomStream rs) {
  return distill(std::move(central), public_set.features, teacher_logits, cfg, rs);
}

inline void write_loss_trace(std::ostream& out, std::span<const LossRecord> trace) {
  for (const auto& r : trace) {
    out << nlohmann::json{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}}.dump() << '\n';
  }
}

}  // namespace fedkd
