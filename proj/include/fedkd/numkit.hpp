#pragma once

// Minimal deterministic numeric kernel: dense row-major matrices, a ReLU
// multilayer perceptron with hand-written backpropagation, plain SGD with a
// cosine-annealed learning rate, and counter-based random streams.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedkd/errors.hpp"

namespace fedkd {

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  /// Builds a matrix from nested rows; all rows must have equal length.
  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  /// Rows selected by `indices`, in that order.
  Matrix gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto src = row(indices[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(where) + ": shape " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace detail

/// a · b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * brow[j];
    }
  }
  return out;
}

/// aᵀ · b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto arow = a.row(r);
    const auto brow = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = arow[i];
      if (ari == 0.0) continue;
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += ari * brow[j];
    }
  }
  return out;
}

/// a · bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

/// Row-wise concatenation; column counts must match unless one side is empty.
inline Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.rows() == 0) return bottom;
  if (bottom.rows() == 0) return top;
  if (top.cols() != bottom.cols()) {
    throw DimensionError("vstack: " + top.shape_string() + " over " + bottom.shape_string());
  }
  std::vector<double> data(top.values());
  data.insert(data.end(), bottom.values().begin(), bottom.values().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

// ---------------------------------------------------------------------------
// RandomStream
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) noexcept {
  return fmix64(fmix64(a) ^ (b * 0xD6E8FEB86659FD93ULL + 0x632BE59BD9B4E019ULL));
}

}  // namespace detail

/// Counter-based random stream. Sample n of a stream is a pure function of
/// (seed, stream_id, n), so independent streams can be consumed from any
/// thread in any order without changing results.
class RandomStream {
 public:
  using result_type = std::uint64_t;

  RandomStream() = default;
  RandomStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t position() const noexcept { return counter_; }

  /// A fresh stream keyed by this stream's identity plus `tag`; does not
  /// advance this stream.
  RandomStream derive(std::uint64_t tag) const noexcept {
    return RandomStream(seed_, detail::combine(stream_id_, tag));
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t key = detail::combine(seed_, stream_id_);
    return detail::fmix64(key ^ detail::fmix64(counter_++ * 0x9E3779B97F4A7C15ULL));
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes two counters per call.
  double gauss() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n) noexcept {
    // Multiply-shift; the bias is below 2^-64 * n and irrelevant here.
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  // UniformRandomBitGenerator surface.
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }
  result_type operator()() noexcept { return next_u64(); }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

inline double uniform_sample(RandomStream& rs) noexcept { return rs.uniform(); }
inline double gauss_sample(RandomStream& rs) noexcept { return rs.gauss(); }

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> random_permutation(std::size_t n, RandomStream& rs) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rs.below(i)]);
  return p;
}

/// Gamma(shape, 1) by Marsaglia-Tsang, with the shape < 1 boost.
inline double gamma_sample(double shape, RandomStream& rs) {
  if (!(shape > 0.0)) throw RangeError("gamma_sample: shape must be positive");
  if (shape < 1.0) {
    const double u = 1.0 - rs.uniform();
    return gamma_sample(shape + 1.0, rs) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = rs.gauss();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - rs.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// One draw from a symmetric Dirichlet(alpha * 1_k).
inline std::vector<double> dirichlet_sample(std::size_t k, double alpha, RandomStream& rs) {
  std::vector<double> p(k);
  double total = 0.0;
  for (auto& v : p) {
    v = gamma_sample(alpha, rs);
    total += v;
  }
  if (total <= 0.0) {
    // Every gamma underflowed (tiny alpha); put all mass on one coordinate.
    std::fill(p.begin(), p.end(), 0.0);
    p[rs.below(k)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

enum class Activation { relu };

struct MlpGradients {
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;
};

/// Fully connected network: ReLU on hidden layers, raw logits out.
struct MlpModel {
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;  // weights[i]: layer_dims[i] x layer_dims[i+1]
  std::vector<Matrix> biases;   // biases[i]: 1 x layer_dims[i+1]
  Activation activation = Activation::relu;

  std::size_t num_layers() const noexcept { return weights.size(); }
  std::size_t input_dim() const noexcept { return layer_dims.front(); }
  std::size_t output_dim() const noexcept { return layer_dims.back(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
      n += (layer_dims[i] + 1) * layer_dims[i + 1];
    }
    return n;
  }

  /// All parameters flattened layer by layer (weights then bias).
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.insert(out.end(), weights[i].values().begin(), weights[i].values().end());
      out.insert(out.end(), biases[i].values().begin(), biases[i].values().end());
    }
    return out;
  }

  /// Zero-valued model with the given shape.
  static MlpModel zeros(std::vector<std::size_t> dims) {
    if (dims.size() < 2) throw ConfigError("MlpModel: need at least input and output dims");
    for (auto d : dims) {
      if (d == 0) throw ConfigError("MlpModel: layer width must be positive");
    }
    MlpModel m;
    m.layer_dims = std::move(dims);
    for (std::size_t i = 0; i + 1 < m.layer_dims.size(); ++i) {
      m.weights.emplace_back(m.layer_dims[i], m.layer_dims[i + 1]);
      m.biases.emplace_back(1, m.layer_dims[i + 1]);
    }
    return m;
  }

  /// Glorot-uniform weights, zero biases.
  static MlpModel init(std::vector<std::size_t> dims, RandomStream rs) {
    MlpModel m = zeros(std::move(dims));
    for (std::size_t i = 0; i < m.weights.size(); ++i) {
      const double fan_in = static_cast<double>(m.layer_dims[i]);
      const double fan_out = static_cast<double>(m.layer_dims[i + 1]);
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& w : m.weights[i].data()) w = (2.0 * rs.uniform() - 1.0) * limit;
    }
    return m;
  }

  MlpGradients zero_gradients() const {
    MlpGradients g;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      g.weights.emplace_back(weights[i].rows(), weights[i].cols());
      g.biases.emplace_back(1, biases[i].cols());
    }
    return g;
  }

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

namespace detail {

inline void add_bias_relu(Matrix& z, const Matrix& bias, bool relu) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const auto b = bias.row(0);
    for (std::size_t c = 0; c < z.cols(); ++c) {
      const double v = row[c] + b[c];
      row[c] = relu && v < 0.0 ? 0.0 : v;
    }
  }
}

/// Post-activation outputs of every layer; front() is the input batch.
inline std::vector<Matrix> forward_trace(const MlpModel& model, const Matrix& batch) {
  if (batch.cols() != model.input_dim()) {
    throw DimensionError("mlp_forward: batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(model.input_dim()));
  }
  std::vector<Matrix> acts;
  acts.reserve(model.num_layers() + 1);
  acts.push_back(batch);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Matrix z = matmul(acts.back(), model.weights[l]);
    add_bias_relu(z, model.biases[l], l + 1 < model.num_layers());
    acts.push_back(std::move(z));
  }
  return acts;
}

}  // namespace detail

/// Logits (B x C) for a batch (B x input_dim).
inline Matrix mlp_forward(const MlpModel& model, const Matrix& batch) {
  auto acts = detail::forward_trace(model, batch);
  Matrix out = std::move(acts.back());
  if (!out.all_finite()) throw NumericError("mlp_forward: non-finite logits");
  return out;
}

/// Gradients of an upstream loss with respect to every parameter, given the
/// loss gradient with respect to the logits.
inline MlpGradients mlp_backward(const MlpModel& model, const Matrix& batch,
                                 const Matrix& grad_logits) {
  const auto acts = detail::forward_trace(model, batch);
  if (grad_logits.rows() != batch.rows() || grad_logits.cols() != model.output_dim()) {
    throw DimensionError("mlp_backward: grad_logits " + grad_logits.shape_string() +
                         ", expected " + std::to_string(batch.rows()) + "x" +
                         std::to_string(model.output_dim()));
  }
  MlpGradients grads = model.zero_gradients();
  Matrix delta = grad_logits;
  for (std::size_t l = model.num_layers(); l-- > 0;) {
    grads.weights[l] = matmul_tn(acts[l], delta);
    auto gb = grads.biases[l].row(0);
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      const auto dr = delta.row(r);
      for (std::size_t c = 0; c < delta.cols(); ++c) gb[c] += dr[c];
    }
    if (l == 0) break;
    Matrix prev = matmul_nt(delta, model.weights[l]);
    // ReLU mask: the stored activation is zero exactly where the unit was off.
    const Matrix& a = acts[l];
    for (std::size_t i = 0; i < prev.size(); ++i) {
      if (a.data()[i] <= 0.0) prev.data()[i] = 0.0;
    }
    delta = std::move(prev);
  }
  return grads;
}

/// theta <- theta - lr * (grad + weight_decay * theta)
inline MlpModel sgd_step(MlpModel model, const MlpGradients& grads, double lr,
                         double weight_decay) {
  if (lr < 0.0 || weight_decay < 0.0) throw RangeError("sgd_step: lr and weight_decay must be >= 0");
  if (grads.weights.size() != model.weights.size() || grads.biases.size() != model.biases.size()) {
    throw DimensionError("sgd_step: gradient layer count mismatch");
  }
  auto update = [&](Matrix& p, const Matrix& g) {
    detail::require_same_shape(p, g, "sgd_step");
    auto pd = p.data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * (gd[i] + weight_decay * pd[i]);
  };
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    update(model.weights[l], grads.weights[l]);
    update(model.biases[l], grads.biases[l]);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

struct CosineSchedule {
  double lr_start = 0.0;
  double lr_end = 0.0;
  std::size_t total_steps = 0;
};

inline double cosine_lr(const CosineSchedule& s, std::size_t step) {
  if (step > s.total_steps) {
    throw RangeError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                     std::to_string(s.total_steps));
  }
  if (s.total_steps == 0) return s.lr_start;
  if (step == s.total_steps) return s.lr_end;
  const double frac = static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace fedkd
