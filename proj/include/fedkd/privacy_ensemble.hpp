#pragma once

// Privacy-preserving aggregation of node logits: per-class importance
// weights, uniform quantization against a global max-abs scale, Laplace
// perturbation of the weighted sum, and the wire frames that carry logits.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedkd/datasets.hpp"
#include "fedkd/errors.hpp"
#include "fedkd/numkit.hpp"

namespace fedkd {

/// One node's logits over the public set.
struct LogitBlock {
  std::uint64_t node_id = 0;
  Matrix logits;
  double local_max_abs = 0.0;

  static LogitBlock make(std::uint64_t node_id, Matrix logits) {
    if (!logits.all_finite()) throw NumericError("LogitBlock: non-finite logits");
    LogitBlock b;
    b.node_id = node_id;
    b.local_max_abs = logits.max_abs();
    b.logits = std::move(logits);
    return b;
  }

  friend bool operator==(const LogitBlock&, const LogitBlock&) = default;
};

enum class WeightMode { per_class, uniform };

inline std::string to_string(WeightMode m) {
  return m == WeightMode::per_class ? "per_class" : "uniform";
}

inline WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "per_class") return WeightMode::per_class;
  if (s == "uniform") return WeightMode::uniform;
  throw ConfigError("unknown weight_mode '" + s + "' (expected per_class or uniform)");
}

/// Empty optionals mean "off": no quantization, no noise.
struct EnsembleConfig {
  std::optional<std::uint32_t> scale = 200;
  std::optional<double> gamma = 1.0;
  WeightMode weight_mode = WeightMode::per_class;

  void validate() const {
    if (scale && *scale < 2) throw ConfigError("ensemble: quantization scale S must be >= 2");
    if (gamma && !(*gamma > 0.0 && std::isfinite(*gamma))) {
      throw ConfigError("ensemble: gamma must be a positive finite number");
    }
  }

  friend bool operator==(const EnsembleConfig&, const EnsembleConfig&) = default;
};

/// omega(k, c): node k's share of class c.
struct WeightTable {
  Matrix omega;

  std::size_t num_nodes() const noexcept { return omega.rows(); }
  std::size_t num_classes() const noexcept { return omega.cols(); }
};

/// omega[k][c] = N_k^c / sum_j N_j^c; a class nobody holds gets 1/K.
inline WeightTable importance_weights(std::span<const NodeProfile> profiles) {
  if (profiles.empty()) throw ConfigError("importance_weights: no profiles");
  const std::size_t k = profiles.size();
  const std::size_t c = profiles.front().num_classes();
  for (const auto& p : profiles) {
    if (p.num_classes() != c) throw DimensionError("importance_weights: class counts differ");
  }
  WeightTable w{Matrix(k, c)};
  for (std::size_t cls = 0; cls < c; ++cls) {
    std::size_t total = 0;
    for (const auto& p : profiles) total += p.counts[cls];
    for (std::size_t node = 0; node < k; ++node) {
      w.omega(node, cls) = total == 0 ? 1.0 / static_cast<double>(k)
                                      : static_cast<double>(profiles[node].counts[cls]) /
                                            static_cast<double>(total);
    }
  }
  return w;
}

inline WeightTable uniform_weights(std::size_t num_nodes, std::size_t num_classes) {
  if (num_nodes == 0) throw ConfigError("uniform_weights: no nodes");
  return WeightTable{Matrix(num_nodes, num_classes, 1.0 / static_cast<double>(num_nodes))};
}

inline WeightTable make_weights(std::span<const NodeProfile> profiles, WeightMode mode) {
  if (mode == WeightMode::per_class) return importance_weights(profiles);
  if (profiles.empty()) throw ConfigError("make_weights: no profiles");
  return uniform_weights(profiles.size(), profiles.front().num_classes());
}

/// Largest per-node max-abs scalar. The server only ever sees these scalars.
inline double global_max_abs(std::span<const LogitBlock> blocks) {
  bool any = false;
  double m = 0.0;
  for (const auto& b : blocks) {
    if (b.logits.empty()) continue;
    any = true;
    m = std::max(m, b.local_max_abs);
  }
  if (!any) throw ConfigError("global_max_abs: no logits to scan");
  return m;
}

namespace detail {

inline std::int64_t quant_level_min(std::uint32_t s) { return -static_cast<std::int64_t>(s / 2); }
inline std::int64_t quant_level_max(std::uint32_t s) { return static_cast<std::int64_t>((s + 1) / 2); }

/// Grid index k with Q(z) = k * 2 z_max / S: the smallest k whose grid value
/// is >= z, i.e. ceil(S z / (2 z_max)) with rounding slop removed.
inline std::int64_t quant_level(double z, double z_max, std::uint32_t s) {
  const double step = 2.0 * z_max / static_cast<double>(s);
  auto k = static_cast<std::int64_t>(std::ceil(static_cast<double>(s) * z / (2.0 * z_max)));
  if (static_cast<double>(k) * step < z) ++k;
  while (static_cast<double>(k - 1) * step >= z) --k;
  return std::clamp(k, quant_level_min(s), quant_level_max(s));
}

}  // namespace detail

/// Q(z; S) = ceil(S z / (2 z_max)) * 2 z_max / S.
inline double quantize(double z, double z_max, std::uint32_t s) {
  if (s < 2) throw RangeError("quantize: S must be >= 2");
  if (!(z_max > 0.0)) throw RangeError("quantize: z_max must be positive");
  if (!(std::abs(z) <= z_max)) {
    throw RangeError("quantize: |z| = " + std::to_string(std::abs(z)) + " exceeds z_max = " +
                     std::to_string(z_max));
  }
  const double step = 2.0 * z_max / static_cast<double>(s);
  return static_cast<double>(detail::quant_level(z, z_max, s)) * step;
}

/// Inverse-CDF Laplace(0, 1/gamma) for u in (-0.5, 0.5).
inline double laplace_from_uniform(double u, double gamma) {
  const double sign = u < 0.0 ? -1.0 : (u > 0.0 ? 1.0 : 0.0);
  return -(1.0 / gamma) * sign * std::log(1.0 - 2.0 * std::abs(u));
}

inline double laplace_sample(double gamma, RandomStream& rs) {
  if (!(gamma > 0.0)) throw RangeError("laplace_sample: gamma must be positive");
  double u = 0.0;
  do {
    u = rs.uniform() - 0.5;
  } while (u <= -0.5);
  return laplace_from_uniform(u, gamma);
}

/// Aggregated teacher logits. Cell (i, c) is
///   sum_k omega(k, c) * Q(z_i^{ck}) + Lap(1 / gamma)
/// where the Laplace draw for the cell comes from rs.derive(i).derive(c).
inline Matrix ensemble(std::span<const LogitBlock> blocks, const WeightTable& weights,
                       const EnsembleConfig& cfg, const RandomStream& rs) {
  cfg.validate();
  if (blocks.empty()) throw ConfigError("ensemble: no logit blocks");
  const std::size_t rows = blocks.front().logits.rows();
  const std::size_t cols = blocks.front().logits.cols();
  for (const auto& b : blocks) {
    if (b.logits.rows() != rows || b.logits.cols() != cols) {
      throw DimensionError("ensemble: block " + std::to_string(b.node_id) + " has shape " +
                           b.logits.shape_string() + ", expected " + std::to_string(rows) +
                           "x" + std::to_string(cols));
    }
  }
  if (weights.num_nodes() != blocks.size() || weights.num_classes() != cols) {
    throw DimensionError("ensemble: weight table " + weights.omega.shape_string() +
                         " does not match " + std::to_string(blocks.size()) + " blocks of " +
                         std::to_string(cols) + " classes");
  }

  const double z_max = rows * cols == 0 ? 0.0 : global_max_abs(blocks);
  const bool quantizing = cfg.scale.has_value() && z_max > 0.0;

  Matrix out(rows, cols);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const Matrix& z = blocks[k].logits;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = quantizing ? quantize(z(i, c), z_max, *cfg.scale) : z(i, c);
        out(i, c) += weights.omega(k, c) * v;
      }
    }
  }
  if (cfg.gamma) {
    for (std::size_t i = 0; i < rows; ++i) {
      const auto row_rs = rs.derive(i);
      for (std::size_t c = 0; c < cols; ++c) {
        auto cell = row_rs.derive(c);
        out(i, c) += laplace_sample(*cfg.gamma, cell);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire frames
// ---------------------------------------------------------------------------

enum class WireFormat { float64, packed };

inline std::string to_string(WireFormat w) { return w == WireFormat::float64 ? "float64" : "packed"; }

inline WireFormat wire_format_from_string(const std::string& s) {
  if (s == "float64") return WireFormat::float64;
  if (s == "packed") return WireFormat::packed;
  throw ConfigError("unknown wire format '" + s + "' (expected float64 or packed)");
}

/// Header: node_id, rows, cols as u64 and max_abs as f64, little-endian.
inline constexpr std::size_t kFrameHeaderBytes = 32;
/// Packed frames append S as a u64.
inline constexpr std::size_t kPackedHeaderBytes = kFrameHeaderBytes + 8;

inline std::uint32_t packed_bits(std::uint32_t s) {
  std::uint32_t bits = 0;
  while ((std::uint64_t{1} << bits) < static_cast<std::uint64_t>(s) + 1) ++bits;
  return bits;
}

inline std::size_t frame_payload_size(std::size_t rows, std::size_t cols, WireFormat wire,
                                      std::uint32_t s = 0) {
  if (wire == WireFormat::float64) return rows * cols * sizeof(double);
  return (rows * cols * packed_bits(s) + 7) / 8;
}

inline std::size_t frame_size(std::size_t rows, std::size_t cols, WireFormat wire,
                              std::uint32_t s = 0) {
  const std::size_t header = wire == WireFormat::float64 ? kFrameHeaderBytes : kPackedHeaderBytes;
  return header + frame_payload_size(rows, cols, wire, s);
}

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw FormatError("frame: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace detail

/// Serializes a block. Float frames carry the raw logits; packed frames carry
/// the quantization grid index of every entry against `z_max`.
inline std::vector<std::uint8_t> encode_frame(const LogitBlock& block, WireFormat wire,
                                              std::uint32_t s = 0, double z_max = 0.0) {
  const auto rows = block.logits.rows();
  const auto cols = block.logits.cols();
  std::vector<std::uint8_t> out;
  out.reserve(frame_size(rows, cols, wire, s));
  detail::put_u64(out, block.node_id);
  detail::put_u64(out, rows);
  detail::put_u64(out, cols);
  if (wire == WireFormat::float64) {
    detail::put_u64(out, std::bit_cast<std::uint64_t>(block.local_max_abs));
    for (double v : block.logits.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
  }
  if (s < 2) throw ConfigError("encode_frame: packed wire needs S >= 2");
  if (!(z_max > 0.0)) throw ConfigError("encode_frame: packed wire needs a positive z_max");
  detail::put_u64(out, std::bit_cast<std::uint64_t>(z_max));
  detail::put_u64(out, s);
  const std::uint32_t bits = packed_bits(s);
  const std::int64_t offset = -detail::quant_level_min(s);
  std::uint64_t acc = 0;
  std::uint32_t filled = 0;
  for (double v : block.logits.data()) {
    if (!(std::abs(v) <= z_max)) throw RangeError("encode_frame: logit exceeds z_max");
    const auto code = static_cast<std::uint64_t>(detail::quant_level(v, z_max, s) + offset);
    acc |= code << filled;
    filled += bits;
    while (filled >= 8) {
      out.push_back(static_cast<std::uint8_t>(acc & 0xFF));
      acc >>= 8;
      filled -= 8;
    }
  }
  if (filled > 0) out.push_back(static_cast<std::uint8_t>(acc & 0xFF));
  return out;
}

/// Inverse of encode_frame. Packed frames decode to quantized values, and
/// local_max_abs is recomputed from them.
inline LogitBlock decode_frame(std::span<const std::uint8_t> bytes, WireFormat wire) {
  std::size_t pos = 0;
  LogitBlock b;
  b.node_id = detail::get_u64(bytes, pos);
  const auto rows = detail::get_u64(bytes, pos);
  const auto cols = detail::get_u64(bytes, pos);
  const double scale = std::bit_cast<double>(detail::get_u64(bytes, pos));
  if (wire == WireFormat::float64) {
    if (bytes.size() != frame_size(rows, cols, wire)) throw FormatError("frame: size mismatch");
    b.logits = Matrix(rows, cols);
    for (double& v : b.logits.data()) v = std::bit_cast<double>(detail::get_u64(bytes, pos));
    b.local_max_abs = scale;
    return b;
  }
  const auto s = static_cast<std::uint32_t>(detail::get_u64(bytes, pos));
  if (s < 2) throw FormatError("frame: packed S < 2");
  if (bytes.size() != frame_size(rows, cols, wire, s)) throw FormatError("frame: size mismatch");
  const std::uint32_t bits = packed_bits(s);
  const std::int64_t offset = -detail::quant_level_min(s);
  const double step = 2.0 * scale / static_cast<double>(s);
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  b.logits = Matrix(rows, cols);
  std::uint64_t acc = 0;
  std::uint32_t avail = 0;
  for (double& v : b.logits.data()) {
    while (avail < bits) {
      acc |= static_cast<std::uint64_t>(bytes[pos++]) << avail;
      avail += 8;
    }
    const auto code = static_cast<std::int64_t>(acc & mask);
    acc >>= bits;
    avail -= bits;
    v = static_cast<double>(code - offset) * step;
  }
  b.local_max_abs = b.logits.max_abs();
  return b;
}

}  // namespace fedkd
