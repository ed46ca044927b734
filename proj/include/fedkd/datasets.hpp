#pragma once

// Datasets: synthetic Gaussian domains, CSV ingestion, Dirichlet non-IID
// partitioning and per-node class-count profiles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "fedkd/errors.hpp"
#include "fedkd/numkit.hpp"

namespace fedkd {

enum class Task { single_label, multi_label };

inline std::string to_string(Task t) {
  return t == Task::single_label ? "single_label" : "multi_label";
}

inline Task task_from_string(const std::string& s) {
  if (s == "single_label") return Task::single_label;
  if (s == "multi_label") return Task::multi_label;
  throw ConfigError("unknown task '" + s + "' (expected single_label or multi_label)");
}

/// Features plus labels. Single-label data stores one class index per row;
/// multi-label data stores C entries per row in {-1 unknown, 0 negative, 1 positive}.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  Task task = Task::single_label;
  std::size_t num_classes = 0;
  bool labeled = true;  // unlabeled sets (e.g. a public CSV) carry no label storage

  std::size_t size() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }
  std::size_t label_width() const noexcept {
    if (!labeled) return 0;
    return task == Task::single_label ? 1 : num_classes;
  }

  int label(std::size_t row) const noexcept { return labels[row]; }
  int label(std::size_t row, std::size_t cls) const noexcept {
    return labels[row * num_classes + cls];
  }
  std::span<const int> label_row(std::size_t row) const noexcept {
    return {labels.data() + row * label_width(), label_width()};
  }

  void validate() const {
    if (labels.size() != size() * label_width()) {
      throw ValidationError("Dataset: label storage does not match row count");
    }
    for (std::size_t i = 0; i < size(); ++i) {
      for (int v : label_row(i)) {
        const bool ok = task == Task::single_label
                            ? v >= 0 && static_cast<std::size_t>(v) < num_classes
                            : v >= -1 && v <= 1;
        if (!ok) {
          throw ValidationError("Dataset: row " + std::to_string(i) + " has invalid label " +
                                std::to_string(v));
        }
      }
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.task = task;
    out.num_classes = num_classes;
    out.labeled = labeled;
    out.features = features.gather_rows(indices);
    out.labels.reserve(indices.size() * label_width());
    for (auto i : indices) {
      const auto r = label_row(i);
      out.labels.insert(out.labels.end(), r.begin(), r.end());
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Rows of `a` followed by rows of `b`.
inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.task != b.task || a.num_classes != b.num_classes || a.labeled != b.labeled) {
    throw DimensionError("concat: datasets differ in task, class count or labeling");
  }
  if (a.size() > 0 && b.size() > 0 && a.dim() != b.dim()) {
    throw DimensionError("concat: feature dims differ");
  }
  Dataset out;
  out.task = a.task;
  out.num_classes = a.num_classes;
  out.labeled = a.labeled;
  out.features = vstack(a.features, b.features);
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian domains
// ---------------------------------------------------------------------------

struct GaussianTaskSpec {
  std::size_t num_classes = 2;
  std::size_t dim = 1;
  std::size_t per_class_count = 0;
  Matrix class_means;               // num_classes x dim
  double class_cov_scale = 1.0;     // isotropic covariance = scale * I
  std::vector<double> domain_shift;  // empty means zero shift
};

/// Class c is sampled from Normal(class_means[c] + domain_shift, scale * I).
/// Rows are grouped by class.
inline Dataset gen_gaussian_task(const GaussianTaskSpec& spec, RandomStream rs) {
  if (spec.num_classes < 2) throw ConfigError("gen_gaussian_task: need at least 2 classes");
  if (spec.dim < 1) throw ConfigError("gen_gaussian_task: dim must be >= 1");
  if (spec.class_means.rows() != spec.num_classes || spec.class_means.cols() != spec.dim) {
    throw DimensionError("gen_gaussian_task: class_means must be " +
                         std::to_string(spec.num_classes) + "x" + std::to_string(spec.dim));
  }
  if (!spec.domain_shift.empty() && spec.domain_shift.size() != spec.dim) {
    throw DimensionError("gen_gaussian_task: domain_shift length must equal dim");
  }
  if (spec.class_cov_scale < 0.0) throw ConfigError("gen_gaussian_task: negative cov scale");

  const double sd = std::sqrt(spec.class_cov_scale);
  Dataset ds;
  ds.task = Task::single_label;
  ds.num_classes = spec.num_classes;
  ds.features = Matrix(spec.num_classes * spec.per_class_count, spec.dim);
  ds.labels.resize(ds.features.rows());
  std::size_t r = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t n = 0; n < spec.per_class_count; ++n, ++r) {
      auto row = ds.features.row(r);
      for (std::size_t j = 0; j < spec.dim; ++j) {
        const double shift = spec.domain_shift.empty() ? 0.0 : spec.domain_shift[j];
        row[j] = spec.class_means(c, j) + shift + sd * rs.gauss();
      }
      ds.labels[r] = static_cast<int>(c);
    }
  }
  return ds;
}

/// Class means with i.i.d. Normal(0, separation^2) coordinates.
inline Matrix random_class_means(std::size_t num_classes, std::size_t dim, double separation,
                                 RandomStream rs) {
  Matrix m(num_classes, dim);
  for (double& v : m.data()) v = separation * rs.gauss();
  return m;
}

/// Random d-vector of Euclidean length `magnitude`.
inline std::vector<double> random_shift(std::size_t dim, double magnitude, RandomStream rs) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rs.gauss();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x = norm > 0.0 ? x * magnitude / norm : 0.0;
  return v;
}

/// Multi-label synthetic task: class c is positive when w_c . x + b_c > 0 for
/// x ~ Normal(shift, I); each label entry is masked to -1 with probability
/// `mask_rate`. The labeling rule (w, b) comes from `task_rs` so that several
/// splits can share it; features and masks come from `sample_rs`.
inline Dataset gen_multilabel_task(std::size_t num_classes, std::size_t dim, std::size_t count,
                                   double mask_rate, RandomStream task_rs, RandomStream sample_rs,
                                   std::span<const double> domain_shift = {}) {
  if (num_classes < 2 || dim < 1) throw ConfigError("gen_multilabel_task: bad shape");
  if (!domain_shift.empty() && domain_shift.size() != dim) {
    throw DimensionError("gen_multilabel_task: domain_shift length must equal dim");
  }
  Matrix w(num_classes, dim);
  for (double& v : w.data()) v = task_rs.gauss();
  std::vector<double> bias(num_classes);
  for (auto& b : bias) b = -1.5 + 2.0 * task_rs.uniform();

  Dataset ds;
  ds.task = Task::multi_label;
  ds.num_classes = num_classes;
  ds.features = Matrix(count, dim);
  ds.labels.resize(count * num_classes);
  auto& xrs = sample_rs;
  for (std::size_t i = 0; i < count; ++i) {
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < dim; ++j) {
      row[j] = xrs.gauss() + (domain_shift.empty() ? 0.0 : domain_shift[j]);
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      double s = bias[c];
      for (std::size_t j = 0; j < dim; ++j) s += w(c, j) * row[j];
      int y = s > 0.0 ? 1 : 0;
      if (xrs.uniform() < mask_rate) y = -1;
      ds.labels[i * num_classes + c] = y;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvSchema {
  std::vector<std::string> label_cols;
  std::vector<std::string> feature_cols;
  Task task = Task::single_label;
  std::size_t num_classes = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& text, std::size_t row, const std::string& col) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (text.empty() || used != text.size() || !std::isfinite(v)) {
    throw FormatError("csv row " + std::to_string(row) + ", column '" + col +
                      "': cannot parse '" + text + "' as a number");
  }
  return v;
}

}  // namespace detail

/// Column names of a CSV file's header row.
inline std::vector<std::string> csv_header(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: missing header row in '" + path + "'");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  return detail::split_csv_line(line);
}

/// Reads a header-first CSV. An empty label_cols list yields an unlabeled
/// dataset. Row numbers in diagnostics are 1-based file
/// lines, the header being line 1.
inline Dataset load_csv(std::istream& in, const CsvSchema& schema) {
  if (schema.num_classes < 1) throw ConfigError("load_csv: num_classes must be positive");
  const bool labeled = !schema.label_cols.empty();
  if (labeled && schema.task == Task::single_label && schema.label_cols.size() != 1) {
    throw ConfigError("load_csv: single-label schema needs exactly one label column");
  }
  if (labeled && schema.task == Task::multi_label && schema.label_cols.size() != schema.num_classes) {
    throw ConfigError("load_csv: multi-label schema needs one label column per class");
  }
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, std::size_t> col_index;
  for (std::size_t i = 0; i < header.size(); ++i) col_index[header[i]] = i;
  auto lookup = [&](const std::string& name) {
    auto it = col_index.find(name);
    if (it == col_index.end()) throw FormatError("csv: header lacks column '" + name + "'");
    return it->second;
  };
  std::vector<std::size_t> fcols;
  std::vector<std::size_t> lcols;
  for (const auto& n : schema.feature_cols) fcols.push_back(lookup(n));
  for (const auto& n : schema.label_cols) lcols.push_back(lookup(n));

  Dataset ds;
  ds.task = schema.task;
  ds.num_classes = schema.num_classes;
  ds.labeled = labeled;
  std::vector<double> feats;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError("csv row " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields, found " +
                        std::to_string(cells.size()));
    }
    for (auto c : fcols) feats.push_back(detail::parse_number(cells[c], line_no, header[c]));
    for (auto c : lcols) {
      const double v = detail::parse_number(cells[c], line_no, header[c]);
      const bool integral = v == std::floor(v);
      const bool ok = schema.task == Task::single_label
                          ? integral && v >= 0 && v < static_cast<double>(schema.num_classes)
                          : integral && v >= -1 && v <= 1;
      if (!ok) {
        throw ValidationError("csv row " + std::to_string(line_no) + ", column '" + header[c] +
                              "': label " + cells[c] + " out of range");
      }
      ds.labels.push_back(static_cast<int>(v));
    }
    ++rows;
  }
  ds.features = Matrix(rows, fcols.size(), std::move(feats));
  return ds;
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw FormatError("csv: cannot open '" + path + "'");
  return load_csv(in, schema);
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  std::size_t num_nodes() const noexcept { return assignments.size(); }

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

inline void to_json(nlohmann::json& j, const PartitionPlan& p) {
  j = nlohmann::json{{"alpha", p.alpha}, {"seed", p.seed}, {"assignments", p.assignments}};
}

inline void from_json(const nlohmann::json& j, PartitionPlan& p) {
  j.at("alpha").get_to(p.alpha);
  j.at("seed").get_to(p.seed);
  j.at("assignments").get_to(p.assignments);
}

/// Throws unless the plan's index lists are disjoint and cover [0, n).
inline void validate_plan(const PartitionPlan& plan, std::size_t n) {
  std::vector<char> seen(n, 0);
  std::size_t total = 0;
  for (const auto& node : plan.assignments) {
    for (auto i : node) {
      if (i >= n) throw ValidationError("partition: index " + std::to_string(i) + " out of range");
      if (seen[i]) throw ValidationError("partition: index " + std::to_string(i) + " repeated");
      seen[i] = 1;
      ++total;
    }
  }
  if (total != n) throw ValidationError("partition: plan does not cover the dataset");
}

/// Among classes labeled 1, the one with the fewest positives globally (ties
/// to the lower index). nullopt when the sample has no positive label.
inline std::optional<std::size_t> rarest_positive_label(std::span<const int> sample_labels,
                                                        std::span<const std::size_t> global_positive_counts) {
  if (sample_labels.size() != global_positive_counts.size()) {
    throw DimensionError("rarest_positive_label: label and count vectors differ in length");
  }
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < sample_labels.size(); ++c) {
    if (sample_labels[c] != 1) continue;
    if (!best || global_positive_counts[c] < global_positive_counts[*best]) best = c;
  }
  return best;
}

/// Per-row bucket used for splitting. Multi-label rows map to their rarest
/// positive class, or to the extra bucket C when they have no positive.
inline std::vector<std::size_t> partition_buckets(const Dataset& ds) {
  std::vector<std::size_t> bucket(ds.size());
  if (ds.task == Task::single_label) {
    for (std::size_t i = 0; i < ds.size(); ++i) bucket[i] = static_cast<std::size_t>(ds.label(i));
    return bucket;
  }
  std::vector<std::size_t> positives(ds.num_classes, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < ds.num_classes; ++c) positives[c] += ds.label(i, c) == 1;
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bucket[i] = rarest_positive_label(ds.label_row(i), positives).value_or(ds.num_classes);
  }
  return bucket;
}

/// Class-wise Dirichlet split: for every class, proportions over the K nodes
/// are drawn from Dirichlet(alpha) and that class's (shuffled) indices are cut
/// at the cumulative proportions.
inline PartitionPlan dirichlet_partition(const Dataset& ds, std::size_t num_nodes, double alpha,
                                         RandomStream rs) {
  if (num_nodes < 1) throw ConfigError("dirichlet_partition: need at least one node");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be positive");
  if (num_nodes > ds.size()) {
    throw ConfigError("dirichlet_partition: " + std::to_string(num_nodes) + " nodes for " +
                      std::to_string(ds.size()) + " samples");
  }
  PartitionPlan plan;
  plan.alpha = alpha;
  plan.seed = rs.seed();
  plan.assignments.resize(num_nodes);

  const auto bucket = partition_buckets(ds);
  const std::size_t num_buckets = ds.num_classes + (ds.task == Task::multi_label ? 1 : 0);
  std::vector<std::vector<std::size_t>> members(num_buckets);
  for (std::size_t i = 0; i < ds.size(); ++i) members[bucket[i]].push_back(i);

  for (std::size_t b = 0; b < num_buckets; ++b) {
    auto brs = rs.derive(b);
    auto& idx = members[b];
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[brs.below(i)]);
    const auto p = dirichlet_sample(num_nodes, alpha, brs);
    const double n = static_cast<double>(idx.size());
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t k = 0; k < num_nodes; ++k) {
      cum += p[k];
      std::size_t end = k + 1 == num_nodes
                            ? idx.size()
                            : std::min(idx.size(), static_cast<std::size_t>(std::floor(cum * n)));
      end = std::max(end, start);
      plan.assignments[k].insert(plan.assignments[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(start),
                                 idx.begin() + static_cast<std::ptrdiff_t>(end));
      start = end;
    }
  }
  for (auto& a : plan.assignments) std::sort(a.begin(), a.end());
  return plan;
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// Per-class sample counts of one node's training data.
struct NodeProfile {
  std::vector<std::size_t> counts;

  std::size_t num_classes() const noexcept { return counts.size(); }
  friend bool operator==(const NodeProfile&, const NodeProfile&) = default;
};

/// Single-label: count of rows with label c. Multi-label: count of rows whose
/// entry c equals 1.
inline NodeProfile profile_rows(const Dataset& ds, std::span<const std::size_t> rows) {
  NodeProfile p;
  p.counts.assign(ds.num_classes, 0);
  for (auto i : rows) {
    if (ds.task == Task::single_label) {
      ++p.counts[static_cast<std::size_t>(ds.label(i))];
    } else {
      for (std::size_t c = 0; c < ds.num_classes; ++c) p.counts[c] += ds.label(i, c) == 1;
    }
  }
  return p;
}

inline NodeProfile profile_dataset(const Dataset& ds) {
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return profile_rows(ds, all);
}

inline std::vector<NodeProfile> profile(const Dataset& ds, const PartitionPlan& plan) {
  std::vector<NodeProfile> out;
  out.reserve(plan.num_nodes());
  for (const auto& rows : plan.assignments) out.push_back(profile_rows(ds, rows));
  return out;
}

/// Largest class share of a node's shard; 0 for an empty shard.
inline double max_class_share(const NodeProfile& p) {
  std::size_t total = 0;
  std::size_t best = 0;
  for (auto c : p.counts) {
    total += c;
    best = std::max(best, c);
  }
  return total == 0 ? 0.0 : static_cast<double>(best) / static_cast<double>(total);
}

}  // namespace fedkd
