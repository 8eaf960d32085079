#pragma once

// Synthetic prototype datasets with an optional distractor block, and CSV I/O.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dib/errors.hpp"
#include "dib/tensor.hpp"

namespace dib {

struct Dataset {
  Tensor features;                      // [N x d]
  std::vector<int> labels;
  std::vector<int> distractor_labels;   // empty when there is no distractor block
  std::size_t n_classes = 0;
  std::size_t n_distractor_classes = 0;
  std::vector<std::size_t> train, test;
  std::uint64_t seed = 0;
  // Generating prototypes of the base block, [n_classes x base_dim]; empty for loaded files.
  Tensor prototypes;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  bool has_distractor() const { return !distractor_labels.empty(); }

  Tensor features_of(const std::vector<std::size_t>& idx) const { return features.gather_rows(idx); }

  static std::vector<int> pick(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(v[i]);
    return out;
  }
  std::vector<int> labels_of(const std::vector<std::size_t>& idx) const { return pick(labels, idx); }
  std::vector<int> distractors_of(const std::vector<std::size_t>& idx) const { return pick(distractor_labels, idx); }

  void validate() const {
    if (features.rank() != 2 || features.rows() != labels.size()) {
      throw DimensionError("dataset features and labels disagree in length");
    }
    if (has_distractor() && distractor_labels.size() != labels.size()) {
      throw DimensionError("distractor labels length mismatch");
    }
    std::vector<char> seen(size(), 0), in_train(n_classes, 0);
    for (auto i : train) {
      if (i >= size() || seen[i]++) throw ArgumentError("train split has invalid or duplicate index");
      in_train[static_cast<std::size_t>(labels[i])] = 1;
    }
    for (auto i : test) {
      if (i >= size() || seen[i]++) throw ArgumentError("train/test splits overlap");
    }
    for (std::size_t y = 0; y < n_classes; ++y) {
      if (!in_train[y]) throw AssumptionError("class " + std::to_string(y) + " missing from the training split");
    }
  }
};

namespace detail {

inline std::vector<double> unit_vector(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (;;) {
    std::vector<double> v(dim);
    double n2 = 0.0;
    for (double& x : v) {
      x = nd(rng);
      n2 += x * x;
    }
    if (n2 > 1e-12) {
      const double n = std::sqrt(n2);
      for (double& x : v) x /= n;
      return v;
    }
  }
}

}  // namespace detail

/// Index of the nearest prototype (squared Euclidean) to the first
/// prototypes.cols() entries of row; ties go to the lower index.
inline int nearest_prototype(std::span<const double> row, const Tensor& prototypes) {
  int best = 0;
  double best_d = INFINITY;
  for (std::size_t c = 0; c < prototypes.rows(); ++c) {
    double d = 0.0;
    for (std::size_t j = 0; j < prototypes.cols(); ++j) {
      const double diff = row[j] - prototypes(c, j);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

/// Per-class shuffled split: the first round(ratio * n_y) members of each class
/// go to train (at least one), the rest to test. Both lists are sorted.
inline void stratified_split(Dataset& ds, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0) || train_ratio > 1.0) throw ArgumentError("train ratio must lie in (0, 1]");
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  ds.train.clear();
  ds.test.clear();
  for (std::size_t y = 0; y < ds.n_classes; ++y) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (static_cast<std::size_t>(ds.labels[i]) == y) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(members.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, members.size());
    ds.train.insert(ds.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.test.insert(ds.test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.test.begin(), ds.test.end());
}

/// Prototypes on the unit sphere plus Gaussian noise. Noise draws that would
/// move a point closer to another prototype are redrawn, so the label is the
/// nearest-prototype function of the features.
inline Dataset make_prototype_dataset(std::size_t n_per_class, std::size_t n_classes, std::size_t dim,
                                      double noise_std, std::uint64_t seed, double train_ratio = 0.5) {
  if (n_per_class < 2) throw ArgumentError("need at least 2 examples per class");
  if (n_classes < 1 || dim < 1) throw ArgumentError("need at least one class and one dimension");
  if (noise_std < 0.0) throw ArgumentError("noise_std must be non-negative");
  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.n_classes = n_classes;
  ds.seed = seed;
  ds.prototypes = Tensor::matrix(n_classes, dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const auto v = detail::unit_vector(dim, rng);
    std::copy(v.begin(), v.end(), ds.prototypes.row(c).begin());
  }
  const std::size_t N = n_per_class * n_classes;
  ds.features = Tensor::matrix(N, dim);
  ds.labels.resize(N);
  std::normal_distribution<double> nd(0.0, noise_std > 0.0 ? noise_std : 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    const int c = static_cast<int>(i % n_classes);
    ds.labels[i] = c;
    auto row = ds.features.row(i);
    int tries = 0;
    for (;;) {
      for (std::size_t j = 0; j < dim; ++j) {
        row[j] = ds.prototypes(static_cast<std::size_t>(c), j) + (noise_std > 0.0 ? nd(rng) : 0.0);
      }
      if (nearest_prototype(row, ds.prototypes) == c) break;
      if (++tries >= 1000) throw AssumptionError("prototypes too close for noise_std: rejection sampling gave up");
    }
  }
  stratified_split(ds, train_ratio, seed);
  return ds;
}

/// Appends a block = distractor prototype * strength + N(0, noise_std^2), with
/// distractor classes drawn uniformly and independently of the base labels.
inline Dataset make_distractor_dataset(const Dataset& base, std::size_t n_distractor_classes, double strength,
                                       std::uint64_t seed, std::size_t block_dim = 10, double noise_std = 0.3) {
  if (!(strength > 0.0)) throw ArgumentError("distractor strength must be > 0");
  if (n_distractor_classes < 1 || block_dim < 1) throw ArgumentError("distractor needs classes and dimensions");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Tensor protos = Tensor::matrix(n_distractor_classes, block_dim);
  for (std::size_t c = 0; c < n_distractor_classes; ++c) {
    const auto v = detail::unit_vector(block_dim, rng);
    std::copy(v.begin(), v.end(), protos.row(c).begin());
  }
  Dataset ds = base;
  const std::size_t d0 = base.dim(), N = base.size();
  ds.features = Tensor::matrix(N, d0 + block_dim);
  ds.distractor_labels.resize(N);
  ds.n_distractor_classes = n_distractor_classes;
  std::uniform_int_distribution<int> pickc(0, static_cast<int>(n_distractor_classes) - 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    auto src = base.features.row(i);
    auto dst = ds.features.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
    const int c = pickc(rng);
    ds.distractor_labels[i] = c;
    for (std::size_t j = 0; j < block_dim; ++j) {
      dst[d0 + j] = protos(static_cast<std::size_t>(c), j) * strength + noise_std * nd(rng);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV: x0,...,x{d-1},label[,distractor],split
// ---------------------------------------------------------------------------

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline std::string dataset_to_csv(const Dataset& ds) {
  std::string out;
  for (std::size_t j = 0; j < ds.dim(); ++j) out += "x" + std::to_string(j) + ",";
  out += "label,";
  if (ds.has_distractor()) out += "distractor,";
  out += "split\n";
  std::vector<char> is_train(ds.size(), 0);
  for (auto i : ds.train) is_train[i] = 1;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.features.row(i)) {
      detail::append_double(out, v);
      out += ',';
    }
    out += std::to_string(ds.labels[i]) + ",";
    if (ds.has_distractor()) out += std::to_string(ds.distractor_labels[i]) + ",";
    out += is_train[i] ? "train\n" : "test\n";
  }
  return out;
}

inline Dataset dataset_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty dataset file", 1);
  const auto header = detail::split_csv(line);
  std::size_t d = 0;
  while (d < header.size() && header[d] == "x" + std::to_string(d)) ++d;
  std::size_t col = d;
  if (col >= header.size() || header[col] != "label") throw ParseError("missing label column", 1);
  ++col;
  const bool distractor = col < header.size() && header[col] == "distractor";
  if (distractor) ++col;
  if (col >= header.size() || header[col] != "split" || col + 1 != header.size()) {
    throw ParseError("expected trailing split column", 1);
  }
  if (d == 0) throw ParseError("no feature columns", 1);
  Dataset ds;
  std::vector<double> values;
  std::size_t line_no = 1;
  auto parse_int = [&](const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v < 0) throw ParseError("bad class index '" + s + "'", line_no);
    return v;
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()),
                       line_no);
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v = 0.0;
      const auto& s = cells[j];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
        throw ParseError("bad number '" + s + "'", line_no);
      }
      values.push_back(v);
    }
    const std::size_t row = ds.labels.size();
    ds.labels.push_back(parse_int(cells[d]));
    if (distractor) ds.distractor_labels.push_back(parse_int(cells[d + 1]));
    const auto& split = cells.back();
    if (split == "train") ds.train.push_back(row);
    else if (split == "test") ds.test.push_back(row);
    else throw ParseError("split must be train or test, got '" + split + "'", line_no);
  }
  if (ds.labels.empty()) throw ParseError("dataset has no rows", line_no);
  ds.features = Tensor({ds.labels.size(), d}, std::move(values));
  ds.n_classes = static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  if (distractor) {
    ds.n_distractor_classes =
        static_cast<std::size_t>(*std::max_element(ds.distractor_labels.begin(), ds.distractor_labels.end())) + 1;
  }
  ds.validate();
  return ds;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open " + path + " for writing");
  f << dataset_to_csv(ds);
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open dataset " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return dataset_from_csv(ss.str());
}

/// Exact count-based mutual information (nats) between two label vectors.
inline double empirical_label_mi(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty()) throw ArgumentError("label vectors must be non-empty and equal length");
  const int na = *std::max_element(a.begin(), a.end()) + 1, nb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> joint(static_cast<std::size_t>(na * nb), 0.0), pa(static_cast<std::size_t>(na), 0.0),
      pb(static_cast<std::size_t>(nb), 0.0);
  const double w = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i] * nb + b[i])] += w;
    pa[static_cast<std::size_t>(a[i])] += w;
    pb[static_cast<std::size_t>(b[i])] += w;
  }
  double mi = 0.0;
  for (int i = 0; i < na; ++i) {
    for (int j = 0; j < nb; ++j) {
      const double p = joint[static_cast<std::size_t>(i * nb + j)];
      if (p > 0.0) mi += p * std::log(p / (pa[static_cast<std::size_t>(i)] * pb[static_cast<std::size_t>(j)]));
    }
  }
  return mi;
}

}  // namespace dib
