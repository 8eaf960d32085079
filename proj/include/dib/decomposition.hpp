#pragma once

// y-decompositions of a labelled set: each digit column relabels the examples
// of every class with values in [0, |Y|).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dib/errors.hpp"

namespace dib {

enum class LabelingMode { base_expansion, random };

inline const char* labeling_name(LabelingMode m) {
  return m == LabelingMode::base_expansion ? "base_expansion" : "random";
}

inline LabelingMode parse_labeling(const std::string& s) {
  if (s == "base_expansion" || s == "base") return LabelingMode::base_expansion;
  if (s == "random") return LabelingMode::random;
  throw ArgumentError("unknown labeling mode '" + s + "'");
}

struct DecompositionPlan {
  std::size_t n_classes = 0;
  std::vector<int> labels;                 // class of each example
  std::vector<std::size_t> within_class;   // 0..(class size - 1), in dataset order
  std::vector<std::vector<int>> digits;    // [n_examples][D]
  std::size_t D = 0;
  LabelingMode mode = LabelingMode::base_expansion;

  std::size_t size() const { return labels.size(); }

  /// Column d as a label vector.
  std::vector<int> column(std::size_t d) const {
    if (d >= D) throw IndexError("digit column " + std::to_string(d) + " out of range");
    std::vector<int> out(digits.size());
    for (std::size_t i = 0; i < digits.size(); ++i) out[i] = digits[i][d];
    return out;
  }

  /// Example ids with the given class, in dataset order.
  std::vector<std::size_t> class_members(int y) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == y) out.push_back(i);
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::size_t> class_sizes(std::span<const int> labels, std::size_t n_classes) {
  if (n_classes < 1) throw ArgumentError("need at least one class");
  std::vector<std::size_t> sizes(n_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw IndexError("label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
    }
    ++sizes[static_cast<std::size_t>(y)];
  }
  for (std::size_t y = 0; y < n_classes; ++y) {
    if (sizes[y] == 0) throw AssumptionError("class " + std::to_string(y) + " has no examples");
  }
  return sizes;
}

inline std::vector<std::size_t> within_class_indices(std::span<const int> labels, std::size_t n_classes) {
  std::vector<std::size_t> next(n_classes, 0), out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = next[static_cast<std::size_t>(labels[i])]++;
  return out;
}

}  // namespace detail

/// Number of base-b digits needed to write every index below max_size.
inline std::size_t digit_count(std::size_t max_size, std::size_t base) {
  if (base < 2) return 1;
  std::size_t d = 0;
  std::size_t cap = 1;  // base^d
  while (cap < max_size) {
    cap *= base;
    ++d;
  }
  return std::max<std::size_t>(1, d);
}

/// Most-significant-first base-b digits of value, zero padded to D.
inline std::vector<int> base_digits(std::size_t value, std::size_t base, std::size_t D) {
  std::vector<int> out(D, 0);
  for (std::size_t i = D; i-- > 0;) {
    out[i] = static_cast<int>(value % base);
    value /= base;
  }
  if (value != 0) throw ArgumentError("value does not fit in the requested digit count");
  return out;
}

inline DecompositionPlan build_base_expansion(std::span<const int> labels, std::size_t n_classes) {
  const auto sizes = detail::class_sizes(labels, n_classes);
  DecompositionPlan p;
  p.n_classes = n_classes;
  p.mode = LabelingMode::base_expansion;
  p.labels.assign(labels.begin(), labels.end());
  p.within_class = detail::within_class_indices(labels, n_classes);
  const std::size_t max_size = *std::max_element(sizes.begin(), sizes.end());
  // With one class every digit would be 0; keep D = 1 so the plan stays usable.
  p.D = n_classes < 2 ? 1 : digit_count(max_size, n_classes);
  p.digits.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    p.digits.push_back(n_classes < 2 ? std::vector<int>(1, 0) : base_digits(p.within_class[i], n_classes, p.D));
  }
  return p;
}

inline DecompositionPlan sample_random_labelings(std::span<const int> labels, std::size_t n_classes, std::size_t k,
                                                 std::uint64_t seed) {
  if (k < 1) throw ArgumentError("need at least one random labeling");
  detail::class_sizes(labels, n_classes);
  DecompositionPlan p;
  p.n_classes = n_classes;
  p.mode = LabelingMode::random;
  p.labels.assign(labels.begin(), labels.end());
  p.within_class = detail::within_class_indices(labels, n_classes);
  p.D = k;
  p.digits.assign(labels.size(), std::vector<int>(k, 0));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> draw(0, static_cast<int>(n_classes) - 1);
  // Column-major, class by class, so a column depends only on (seed, column, class members).
  for (std::size_t d = 0; d < k; ++d) {
    for (std::size_t y = 0; y < n_classes; ++y) {
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (static_cast<std::size_t>(labels[i]) == y) p.digits[i][d] = draw(rng);
      }
    }
  }
  return p;
}

inline DecompositionPlan make_plan(std::span<const int> labels, std::size_t n_classes, LabelingMode mode,
                                   std::size_t k, std::uint64_t seed) {
  return mode == LabelingMode::base_expansion ? build_base_expansion(labels, n_classes)
                                              : sample_random_labelings(labels, n_classes, k, seed);
}

inline std::size_t decode_index(const DecompositionPlan& plan, std::size_t example_id) {
  if (plan.mode != LabelingMode::base_expansion) throw ArgumentError("decode_index needs a base-expansion plan");
  if (example_id >= plan.size()) throw IndexError("example id out of range");
  std::size_t v = 0;
  for (int d : plan.digits[example_id]) v = v * plan.n_classes + static_cast<std::size_t>(d);
  return v;
}

/// example_id,class,within_class_index,digit_0..digit_{D-1}
inline void write_plan_csv(const DecompositionPlan& plan, std::ostream& os) {
  os << "example_id,class,within_class_index";
  for (std::size_t d = 0; d < plan.D; ++d) os << ",digit_" << d;
  os << '\n';
  for (std::size_t i = 0; i < plan.size(); ++i) {
    os << i << ',' << plan.labels[i] << ',' << plan.within_class[i];
    for (int v : plan.digits[i]) os << ',' << v;
    os << '\n';
  }
}

}  // namespace dib
