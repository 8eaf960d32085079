#pragma once

// Exact computations on finite sample spaces.
//
// Joint tables are Tensors with the target on rows and the representation on
// columns: P(N = n, Z = z) lives at (n, z). Channels P(Z|X) are [|X| x |Z|]
// row-stochastic matrices, and each channel may use its own |Z|.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dib/autodiff.hpp"
#include "dib/errors.hpp"
#include "dib/models.hpp"
#include "dib/tensor.hpp"
#include "json.hpp"

namespace dib::oracle {

using Channel = Tensor;
using Distribution = std::vector<double>;
using Predictor = std::vector<Distribution>;  // one label distribution per z

inline constexpr double kTol = 1e-9;

/// -max(ln q, -clip): the bounded log loss shared with the trainable path.
inline double clamped_nll(double q, double clip = ad::kLogProbClip) {
  if (q <= 0.0) return clip;
  return -std::max(std::log(q), -clip);
}

// ---------------------------------------------------------------------------
// Problem
// ---------------------------------------------------------------------------

struct FiniteProblem {
  std::size_t x_size = 0, y_size = 0, z_size = 0;
  std::vector<int> labels;          // t(x)
  std::vector<double> p_x;
  std::vector<int> preimage_labels;  // label assigned to each z by the predictor behind Z*
  double grid_resolution = 0.05;     // V
  double grid_plus_resolution = 0.05;

  void validate() const {
    if (x_size == 0 || y_size < 2) throw ArgumentError("problem needs |X| >= 1 and |Y| >= 2");
    if (labels.size() != x_size || p_x.size() != x_size) throw DimensionError("labels and p_x must have |X| entries");
    if (z_size < y_size) throw AssumptionError("need at least as many representations as labels");
    double total = 0.0;
    std::vector<double> py(y_size, 0.0);
    for (std::size_t x = 0; x < x_size; ++x) {
      if (labels[x] < 0 || static_cast<std::size_t>(labels[x]) >= y_size) throw IndexError("label out of range");
      if (p_x[x] < 0.0) throw ArgumentError("p_x has a negative entry");
      total += p_x[x];
      py[static_cast<std::size_t>(labels[x])] += p_x[x];
    }
    if (std::abs(total - 1.0) > 1e-12) throw ArgumentError("p_x must sum to 1");
    for (double p : py) {
      if (!(p > 0.0)) throw AssumptionError("every label needs positive mass");
    }
    if (!preimage_labels.empty()) {
      if (preimage_labels.size() != z_size) throw DimensionError("preimage labels need |Z| entries");
      for (int y : preimage_labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= y_size) throw IndexError("preimage label out of range");
      }
    }
  }

  Distribution p_y() const {
    Distribution py(y_size, 0.0);
    for (std::size_t x = 0; x < x_size; ++x) py[static_cast<std::size_t>(labels[x])] += p_x[x];
    return py;
  }

  std::vector<std::size_t> members(int y) const {
    std::vector<std::size_t> out;
    for (std::size_t x = 0; x < x_size; ++x) {
      if (labels[x] == y) out.push_back(x);
    }
    return out;
  }

  /// key = value lines; '#' starts a comment. p_x may be "uniform".
  static FiniteProblem parse(const std::string& text) {
    FiniteProblem p;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    std::string px_text = "uniform";
    auto ints = [&](const std::string& v) {
      std::vector<int> out;
      std::istringstream vs(v);
      std::string tok;
      while (std::getline(vs, tok, ',')) out.push_back(std::stoi(tok));
      return out;
    };
    while (std::getline(is, line)) {
      ++line_no;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      try {
        if (key == "x_size") p.x_size = std::stoul(val);
        else if (key == "y_size") p.y_size = std::stoul(val);
        else if (key == "z_size") p.z_size = std::stoul(val);
        else if (key == "labels") p.labels = ints(val);
        else if (key == "preimage") p.preimage_labels = ints(val);
        else if (key == "p_x") px_text = val;
        else if (key == "grid") p.grid_resolution = std::stod(val);
        else if (key == "grid_plus") p.grid_plus_resolution = std::stod(val);
        else throw ParseError("unknown key '" + key + "'", line_no);
      } catch (const std::logic_error&) {
        throw ParseError("bad value for '" + key + "'", line_no);
      }
    }
    if (px_text == "uniform") {
      p.p_x.assign(p.x_size, p.x_size ? 1.0 / static_cast<double>(p.x_size) : 0.0);
    } else {
      std::istringstream vs(px_text);
      std::string tok;
      while (std::getline(vs, tok, ',')) {
        try {
          p.p_x.push_back(std::stod(tok));
        } catch (const std::logic_error&) {
          throw ParseError("bad p_x entry '" + tok + "'");
        }
      }
    }
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Shannon quantities
// ---------------------------------------------------------------------------

inline double exact_entropy(std::span<const double> p) {
  double h = 0.0, total = 0.0;
  for (double v : p) {
    if (v < 0.0) throw ArgumentError("probability vector has a negative entry");
    total += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("probability vector must sum to 1");
  return h;
}

inline Distribution row_marginal(const Tensor& joint) {
  Distribution out(joint.rows(), 0.0);
  for (std::size_t a = 0; a < joint.rows(); ++a) {
    for (std::size_t b = 0; b < joint.cols(); ++b) out[a] += joint(a, b);
  }
  return out;
}

inline Distribution col_marginal(const Tensor& joint) {
  Distribution out(joint.cols(), 0.0);
  for (std::size_t a = 0; a < joint.rows(); ++a) {
    for (std::size_t b = 0; b < joint.cols(); ++b) out[b] += joint(a, b);
  }
  return out;
}

inline double exact_mutual_information(const Tensor& joint) {
  const auto pa = row_marginal(joint), pb = col_marginal(joint);
  double total = std::accumulate(pa.begin(), pa.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("joint must sum to 1");
  double mi = 0.0;
  for (std::size_t a = 0; a < joint.rows(); ++a) {
    for (std::size_t b = 0; b < joint.cols(); ++b) {
      const double p = joint(a, b);
      if (p > 0.0) mi += p * std::log(p / (pa[a] * pb[b]));
    }
  }
  return mi;
}

/// H(N|Z) for a joint with N on rows.
inline double exact_conditional_entropy(const Tensor& joint) {
  const auto pz = col_marginal(joint);
  double h = 0.0;
  for (std::size_t n = 0; n < joint.rows(); ++n) {
    for (std::size_t z = 0; z < joint.cols(); ++z) {
      const double p = joint(n, z);
      if (p > 0.0) h -= p * std::log(p / pz[z]);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Tabular families
// ---------------------------------------------------------------------------

/// Product family: f[z] is chosen independently for every z from a finite
/// candidate set, or (universal) is any distribution at all.
struct TabularFamily {
  std::size_t n_labels = 2;
  std::vector<Distribution> candidates;
  bool universal = false;
  std::string name;

  static TabularFamily grid(std::size_t n_labels, double resolution) {
    TabularFamily f;
    f.n_labels = n_labels;
    f.candidates = simplex_grid(n_labels, resolution);
    std::ostringstream os;
    os << "grid(" << resolution << ")";
    f.name = os.str();
    return f;
  }

  static TabularFamily vertices(std::size_t n_labels) {
    TabularFamily f;
    f.n_labels = n_labels;
    for (std::size_t k = 0; k < n_labels; ++k) {
      Distribution e(n_labels, 0.0);
      e[k] = 1.0;
      f.candidates.push_back(e);
    }
    f.name = "vertices";
    return f;
  }

  static TabularFamily universal_family(std::size_t n_labels) {
    TabularFamily f;
    f.n_labels = n_labels;
    f.universal = true;
    f.name = "universal";
    return f;
  }

  bool contains(const Distribution& q) const {
    for (const auto& c : candidates) {
      bool same = true;
      for (std::size_t k = 0; k < n_labels && same; ++k) same = std::abs(c[k] - q[k]) <= 1e-15;
      if (same) return true;
    }
    return false;
  }

  void add_candidate(const Distribution& q) {
    if (q.size() != n_labels) throw DimensionError("candidate has wrong number of labels");
    if (!universal && !contains(q)) candidates.push_back(q);
  }

  /// Adds P_Y and the marginal of every labeling of every class, so the
  /// constant-prediction axiom holds for each target the oracle evaluates.
  TabularFamily& add_problem_marginals(const FiniteProblem& p) {
    add_candidate(p.p_y());
    const auto py = p.p_y();
    for (std::size_t y = 0; y < p.y_size; ++y) {
      const auto m = p.members(static_cast<int>(y));
      std::vector<int> lab(m.size(), 0);
      // Odometer over all labelings of the class.
      for (;;) {
        Distribution q(n_labels, 0.0);
        for (std::size_t i = 0; i < m.size(); ++i) q[static_cast<std::size_t>(lab[i])] += p.p_x[m[i]] / py[y];
        add_candidate(q);
        std::size_t i = 0;
        while (i < m.size() && ++lab[i] == static_cast<int>(n_labels)) lab[i++] = 0;
        if (i == m.size()) break;
        if (m.size() > 16) break;  // marginal sets of huge classes are not enumerated
      }
    }
    return *this;
  }

  /// Every candidate is also a candidate of other (other must be finite or universal).
  bool subset_of(const TabularFamily& other) const {
    if (other.universal) return true;
    if (universal) return false;
    return std::all_of(candidates.begin(), candidates.end(), [&](const auto& c) { return other.contains(c); });
  }
};

/// Grid family of the given resolution plus every marginal the problem needs.
inline TabularFamily problem_family(const FiniteProblem& p, double resolution) {
  auto f = TabularFamily::grid(p.y_size, resolution);
  f.add_problem_marginals(p);
  return f;
}

/// Index of the candidate minimizing sum_n w[n] * nll(q[n]) (first on ties) and its value.
inline std::pair<std::size_t, double> best_candidate(const TabularFamily& fam, std::span<const double> w) {
  std::size_t best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < fam.candidates.size(); ++c) {
    double v = 0.0;
    for (std::size_t n = 0; n < w.size(); ++n) {
      if (w[n] != 0.0) v += w[n] * clamped_nll(fam.candidates[c][n]);
    }
    if (v < best_v) {
      best_v = v;
      best = c;
    }
  }
  return {best, best_v};
}

/// inf_{f in V} E[-log f[z](n)] for a joint P(N, Z) with N on rows.
/// Minimizes independently per z, which is exact for product families.
inline double exact_v_entropy(const Tensor& joint, const TabularFamily& fam) {
  if (joint.rows() != fam.n_labels) throw DimensionError("joint rows must match the family's label count");
  double h = 0.0;
  std::vector<double> w(joint.rows());
  for (std::size_t z = 0; z < joint.cols(); ++z) {
    double mass = 0.0;
    for (std::size_t n = 0; n < joint.rows(); ++n) {
      w[n] = joint(n, z);
      mass += w[n];
    }
    if (mass <= 0.0) continue;
    if (fam.universal) {
      for (std::size_t n = 0; n < joint.rows(); ++n) {
        if (w[n] > 0.0) h += w[n] * clamped_nll(w[n] / mass);
      }
    } else {
      if (fam.candidates.empty()) throw ArgumentError("empty tabular family");
      h += best_candidate(fam, w).second;
    }
  }
  return h;
}

/// H(N) - H_V(N|Z).
inline double exact_v_information(const Tensor& joint, const TabularFamily& fam) {
  return exact_entropy(row_marginal(joint)) - exact_v_entropy(joint, fam);
}

// ---------------------------------------------------------------------------
// Channels and joints
// ---------------------------------------------------------------------------

inline void check_channel(const FiniteProblem& p, const Channel& c) {
  if (c.rank() != 2 || c.rows() != p.x_size) throw DimensionError("channel must have |X| rows");
  for (std::size_t x = 0; x < c.rows(); ++x) {
    double s = 0.0;
    for (double v : c.row(x)) {
      if (v < 0.0) throw ArgumentError("channel has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ArgumentError("channel rows must sum to 1");
  }
}

/// P(Y, Z) with Y on rows.
inline Tensor joint_label_z(const FiniteProblem& p, const Channel& c) {
  Tensor j = Tensor::matrix(p.y_size, c.cols());
  for (std::size_t x = 0; x < p.x_size; ++x) {
    for (std::size_t z = 0; z < c.cols(); ++z) j(static_cast<std::size_t>(p.labels[x]), z) += p.p_x[x] * c(x, z);
  }
  return j;
}

/// P(N, Z | Y = y) where N = labeling[i] for the i-th member of class y.
inline Tensor joint_labeling_z(const FiniteProblem& p, const Channel& c, int y, std::span<const int> labeling) {
  const auto m = p.members(y);
  if (labeling.size() != m.size()) throw DimensionError("labeling must cover the class members");
  double py = 0.0;
  for (auto x : m) py += p.p_x[x];
  Tensor j = Tensor::matrix(p.y_size, c.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t z = 0; z < c.cols(); ++z) {
      j(static_cast<std::size_t>(labeling[i]), z) += p.p_x[m[i]] / py * c(m[i], z);
    }
  }
  return j;
}

/// P(X, Z) with X on rows.
inline Tensor joint_x_z(const FiniteProblem& p, const Channel& c) {
  Tensor j = Tensor::matrix(p.x_size, c.cols());
  for (std::size_t x = 0; x < p.x_size; ++x) {
    for (std::size_t z = 0; z < c.cols(); ++z) j(x, z) = p.p_x[x] * c(x, z);
  }
  return j;
}

/// I(X; Z | Y) computed exactly.
inline double exact_conditional_mi_xz_given_y(const FiniteProblem& p, const Channel& c) {
  const auto py = p.p_y();
  double total = 0.0;
  for (std::size_t y = 0; y < p.y_size; ++y) {
    const auto m = p.members(static_cast<int>(y));
    Tensor j = Tensor::matrix(m.size(), c.cols());
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (std::size_t z = 0; z < c.cols(); ++z) j(i, z) = p.p_x[m[i]] / py[y] * c(m[i], z);
    }
    total += py[y] * exact_mutual_information(j);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Averaged V-information with y-decompositions
// ---------------------------------------------------------------------------

struct DecInformation {
  double average = 0.0;         // (1/|Y|) sum_y mean_N I_V(Z_y -> N)
  double max_term = 0.0;        // largest single I_V(Z_y -> N)
  double min_term = 0.0;        // smallest single term (non-negativity check)
  double mean_v_entropy = 0.0;  // (1/|Y|) sum_y mean_N H_V(N | Z_y)
  std::size_t n_labelings = 0;
  bool exhaustive = true;
};

inline constexpr std::size_t kMaxLabelingsPerClass = 1u << 16;

/// Averages over every function X_y -> Y when there are at most
/// kMaxLabelingsPerClass of them, otherwise over the base-|Y| digit labelings
/// of the within-class index (exhaustive = false).
inline DecInformation exact_dec_information(const FiniteProblem& p, const Channel& c, const TabularFamily& fam) {
  check_channel(p, c);
  DecInformation out;
  out.min_term = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < p.y_size; ++y) {
    const auto m = p.members(static_cast<int>(y));
    double count = 1.0;
    for (std::size_t i = 0; i < m.size() && count <= double(kMaxLabelingsPerClass); ++i) count *= double(p.y_size);
    std::vector<std::vector<int>> labelings;
    if (count <= double(kMaxLabelingsPerClass)) {
      std::vector<int> lab(m.size(), 0);
      for (;;) {
        labelings.push_back(lab);
        std::size_t i = 0;
        while (i < m.size() && ++lab[i] == static_cast<int>(p.y_size)) lab[i++] = 0;
        if (i == m.size()) break;
      }
    } else {
      out.exhaustive = false;
      std::size_t D = 1, cap = p.y_size;
      while (cap < m.size()) {
        cap *= p.y_size;
        ++D;
      }
      for (std::size_t d = 0; d < D; ++d) {
        std::vector<int> lab(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) {
          std::size_t v = i;
          for (std::size_t k = d + 1; k < D; ++k) v /= p.y_size;
          lab[i] = static_cast<int>(v % p.y_size);
        }
        labelings.push_back(lab);
      }
    }
    double sum_i = 0.0, sum_h = 0.0;
    for (const auto& lab : labelings) {
      const Tensor j = joint_labeling_z(p, c, static_cast<int>(y), lab);
      const double hv = exact_v_entropy(j, fam);
      const double iv = exact_entropy(row_marginal(j)) - hv;
      sum_i += iv;
      sum_h += hv;
      out.max_term = std::max(out.max_term, iv);
      out.min_term = std::min(out.min_term, iv);
    }
    out.n_labelings += labelings.size();
    out.average += sum_i / double(labelings.size()) / double(p.y_size);
    out.mean_v_entropy += sum_h / double(labelings.size()) / double(p.y_size);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Z* and risks
// ---------------------------------------------------------------------------

/// Uniform mass over the preimage f^{-1}(t(x)) of each example's label.
/// f must put probability 1 on one label at every z.
inline Channel construct_z_star(const FiniteProblem& p, const Predictor& f) {
  if (f.size() < p.y_size) throw AssumptionError("need at least as many representations as labels");
  std::vector<std::vector<std::size_t>> pre(p.y_size);
  for (std::size_t z = 0; z < f.size(); ++z) {
    if (f[z].size() != p.y_size) throw DimensionError("predictor rows must have |Y| entries");
    std::size_t hits = 0;
    for (std::size_t y = 0; y < p.y_size; ++y) {
      if (f[z][y] == 1.0) {
        pre[y].push_back(z);
        ++hits;
      }
    }
    if (hits != 1) throw AssumptionError("Z* needs a deterministic predictor");
  }
  for (std::size_t y = 0; y < p.y_size; ++y) {
    if (pre[y].empty()) throw AssumptionError("label " + std::to_string(y) + " has an empty preimage");
  }
  Channel c = Tensor::matrix(p.x_size, f.size());
  for (std::size_t x = 0; x < p.x_size; ++x) {
    const auto& zs = pre[static_cast<std::size_t>(p.labels[x])];
    for (auto z : zs) c(x, z) = 1.0 / static_cast<double>(zs.size());
  }
  return c;
}

/// Vertex predictor assigning label labels_per_z[z] at z.
inline Predictor deterministic_predictor(std::span<const int> labels_per_z, std::size_t n_labels) {
  Predictor f(labels_per_z.size(), Distribution(n_labels, 0.0));
  for (std::size_t z = 0; z < labels_per_z.size(); ++z) f[z][static_cast<std::size_t>(labels_per_z[z])] = 1.0;
  return f;
}

/// Expected clamped log loss of f over the full distribution.
inline double exact_risk(const FiniteProblem& p, const Channel& c, const Predictor& f) {
  double r = 0.0;
  for (std::size_t x = 0; x < p.x_size; ++x) {
    for (std::size_t z = 0; z < c.cols(); ++z) {
      if (c(x, z) > 0.0) r += p.p_x[x] * c(x, z) * clamped_nll(f[z][static_cast<std::size_t>(p.labels[x])]);
    }
  }
  return r;
}

/// Mean over the train multiset of the channel-expected clamped log loss.
inline double empirical_risk(const FiniteProblem& p, const Channel& c, const Predictor& f,
                             std::span<const std::size_t> train) {
  double r = 0.0;
  for (auto x : train) {
    for (std::size_t z = 0; z < c.cols(); ++z) {
      if (c(x, z) > 0.0) r += c(x, z) * clamped_nll(f[z][static_cast<std::size_t>(p.labels[x])]);
    }
  }
  return r / static_cast<double>(train.size());
}

// ---------------------------------------------------------------------------
// Exhaustive ERM enumeration
// ---------------------------------------------------------------------------

struct ErmSet {
  double min_risk = 0.0;
  std::vector<Predictor> erms;
  std::size_t enumerated = 0;
};

inline constexpr std::size_t kMaxEnumeration = 50'000'000;

/// Walks the whole product family |candidates|^|Z| and keeps every predictor
/// whose empirical risk is within 1e-12 of the minimum.
inline ErmSet enumerate_erms(const FiniteProblem& p, const Channel& c, const TabularFamily& fam,
                             std::span<const std::size_t> train) {
  check_channel(p, c);
  if (fam.universal) throw ArgumentError("cannot enumerate the universal family");
  if (train.empty()) throw ArgumentError("empty train subset");
  std::vector<char> covered(p.y_size, 0);
  for (auto x : train) {
    if (x >= p.x_size) throw IndexError("train index out of range");
    covered[static_cast<std::size_t>(p.labels[x])] = 1;
  }
  if (std::find(covered.begin(), covered.end(), 0) != covered.end()) {
    throw AssumptionError("train subset must contain every label");
  }
  const std::size_t nz = c.cols(), nc = fam.candidates.size();
  double total = 1.0;
  for (std::size_t z = 0; z < nz; ++z) total *= double(nc);
  if (total > double(kMaxEnumeration)) throw ArgumentError("ERM enumeration too large");

  // Per-z, per-candidate contribution to the empirical risk.
  std::vector<std::vector<double>> part(nz, std::vector<double>(nc, 0.0));
  for (std::size_t z = 0; z < nz; ++z) {
    for (std::size_t k = 0; k < nc; ++k) {
      double v = 0.0;
      for (auto x : train) {
        if (c(x, z) > 0.0) v += c(x, z) * clamped_nll(fam.candidates[k][static_cast<std::size_t>(p.labels[x])]);
      }
      part[z][k] = v / static_cast<double>(train.size());
    }
  }
  auto walk = [&](auto&& visit) {
    std::vector<std::size_t> idx(nz, 0);
    for (;;) {
      double r = 0.0;
      for (std::size_t z = 0; z < nz; ++z) r += part[z][idx[z]];
      visit(idx, r);
      std::size_t z = 0;
      while (z < nz && ++idx[z] == nc) idx[z++] = 0;
      if (z == nz) break;
    }
  };
  ErmSet out;
  out.min_risk = std::numeric_limits<double>::infinity();
  walk([&](const std::vector<std::size_t>&, double r) {
    out.min_risk = std::min(out.min_risk, r);
    ++out.enumerated;
  });
  walk([&](const std::vector<std::size_t>& idx, double r) {
    if (r <= out.min_risk + 1e-12) {
      Predictor f(nz);
      for (std::size_t z = 0; z < nz; ++z) f[z] = fam.candidates[idx[z]];
      out.erms.push_back(std::move(f));
    }
  });
  return out;
}

/// Every train set with exactly one example of each class.
inline std::vector<std::vector<std::size_t>> minimal_train_subsets(const FiniteProblem& p) {
  std::vector<std::vector<std::size_t>> per_class;
  for (std::size_t y = 0; y < p.y_size; ++y) per_class.push_back(p.members(static_cast<int>(y)));
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> idx(p.y_size, 0);
  for (;;) {
    std::vector<std::size_t> s;
    for (std::size_t y = 0; y < p.y_size; ++y) s.push_back(per_class[y][idx[y]]);
    out.push_back(std::move(s));
    std::size_t y = 0;
    while (y < p.y_size && ++idx[y] == per_class[y].size()) idx[y++] = 0;
    if (y == p.y_size) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Theorem check: every ERM of a minimal sufficient representation is optimal
// ---------------------------------------------------------------------------

struct Theorem1Report {
  bool negative_control = false;
  bool pass = false;
  std::size_t n_subsets = 0, n_erms = 0;
  double worst_test_risk = 0.0;  // max over subsets and ERMs
  std::vector<double> worst_per_subset;
  std::string family;

  nlohmann::json to_json() const {
    return {{"negative_control", negative_control}, {"pass", pass},          {"subsets", n_subsets},
            {"erms", n_erms},                       {"worst_test_risk", worst_test_risk},
            {"worst_per_subset", worst_per_subset}, {"family", family}};
  }
};

/// Positive case passes when every ERM has test risk <= 1e-9 (the best
/// achievable risk under deterministic labels is 0). A negative control
/// passes when some ERM has test risk > 1e-9.
inline Theorem1Report verify_theorem1(const FiniteProblem& p, const Channel& c, const TabularFamily& fam,
                                      const std::vector<std::vector<std::size_t>>& train_subsets,
                                      bool negative_control = false) {
  Theorem1Report rep;
  rep.negative_control = negative_control;
  rep.family = fam.name;
  for (const auto& s : train_subsets) {
    const auto erms = enumerate_erms(p, c, fam, s);
    double worst = 0.0;
    for (const auto& f : erms.erms) worst = std::max(worst, exact_risk(p, c, f));
    rep.worst_per_subset.push_back(worst);
    rep.worst_test_risk = std::max(rep.worst_test_risk, worst);
    rep.n_erms += erms.erms.size();
    ++rep.n_subsets;
  }
  rep.pass = negative_control ? rep.worst_test_risk > kTol : rep.worst_test_risk <= kTol;
  return rep;
}

// ---------------------------------------------------------------------------
// Proposition check: characterization, monotonicity, recoverability, existence
// ---------------------------------------------------------------------------

struct NamedChannel {
  std::string name;
  Channel channel;
};

struct CandidateVerdict {
  std::string name;
  double hv_y_given_z = 0.0, hvplus_y_given_z = 0.0, hu_y_given_z = 0.0;
  DecInformation dec_v, dec_vplus, dec_u;
  double cond_mi_xz_given_y = 0.0;
  bool v_sufficient = false, vplus_sufficient = false, u_sufficient = false;
  bool v_minimal = false;       // argmin of the averaged term among V-sufficient candidates
  bool vplus_minimal_v_sufficient = false;
  bool u_minimal = false;
  bool shannon_minimal_sufficient = false;
};

struct Prop2Report {
  std::vector<CandidateVerdict> candidates;
  bool characterization = false, monotonicity = false, recoverability = false, existence = false;
  bool non_negativity = false;
  bool exhaustive = true;

  bool pass() const { return characterization && monotonicity && recoverability && existence && non_negativity; }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : candidates) {
      rows.push_back({{"name", c.name},
                      {"H_V(Y|Z)", c.hv_y_given_z},
                      {"H_V+(Y|Z)", c.hvplus_y_given_z},
                      {"H_U(Y|Z)", c.hu_y_given_z},
                      {"I_V(Z->Dec)", c.dec_v.average},
                      {"I_V+(Z->Dec)", c.dec_vplus.average},
                      {"I_U(Z->Dec)", c.dec_u.average},
                      {"I(X;Z|Y)", c.cond_mi_xz_given_y},
                      {"V_sufficient", c.v_sufficient},
                      {"V_minimal", c.v_minimal},
                      {"V+_minimal_V_sufficient", c.vplus_minimal_v_sufficient},
                      {"U_minimal", c.u_minimal},
                      {"minimal_sufficient", c.shannon_minimal_sufficient}});
    }
    return {{"characterization", characterization}, {"monotonicity", monotonicity},
            {"recoverability", recoverability},     {"existence", existence},
            {"non_negativity", non_negativity},     {"exhaustive_dec", exhaustive},
            {"pass", pass()},                       {"candidates", rows}};
  }
};

/// candidates[0] must be Z*. V must be a subset of V+.
inline Prop2Report verify_proposition2(const FiniteProblem& p, const std::vector<NamedChannel>& candidates,
                                       const TabularFamily& v, const TabularFamily& vplus) {
  if (candidates.empty()) throw ArgumentError("need at least Z* among the candidates");
  if (!v.subset_of(vplus)) throw ArgumentError("V must be contained in V+");
  const auto u = TabularFamily::universal_family(p.y_size);
  Prop2Report rep;
  rep.non_negativity = true;
  for (const auto& nc : candidates) {
    CandidateVerdict cv;
    cv.name = nc.name;
    const Tensor jy = joint_label_z(p, nc.channel);
    cv.hv_y_given_z = exact_v_entropy(jy, v);
    cv.hvplus_y_given_z = exact_v_entropy(jy, vplus);
    cv.hu_y_given_z = exact_v_entropy(jy, u);
    cv.dec_v = exact_dec_information(p, nc.channel, v);
    cv.dec_vplus = exact_dec_information(p, nc.channel, vplus);
    cv.dec_u = exact_dec_information(p, nc.channel, u);
    cv.cond_mi_xz_given_y = exact_conditional_mi_xz_given_y(p, nc.channel);
    // The best achievable H_V(Y|Z) over all Z is 0 under deterministic labels.
    cv.v_sufficient = cv.hv_y_given_z <= kTol;
    cv.vplus_sufficient = cv.hvplus_y_given_z <= kTol;
    cv.u_sufficient = cv.hu_y_given_z <= kTol;
    cv.shannon_minimal_sufficient = exact_conditional_entropy(jy) <= kTol && cv.cond_mi_xz_given_y <= kTol;
    rep.exhaustive = rep.exhaustive && cv.dec_v.exhaustive;
    for (const auto* d : {&cv.dec_v, &cv.dec_vplus, &cv.dec_u}) {
      rep.non_negativity = rep.non_negativity && d->min_term >= -1e-12;
    }
    rep.candidates.push_back(cv);
  }
  // Minimality by definition: argmin of the averaged term among sufficient candidates.
  auto argmin_flags = [&](auto suff, auto value) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : rep.candidates) {
      if (suff(c)) best = std::min(best, value(c));
    }
    std::vector<bool> out;
    for (const auto& c : rep.candidates) out.push_back(suff(c) && value(c) <= best + kTol);
    return out;
  };
  const auto vmin = argmin_flags([](const auto& c) { return c.v_sufficient; },
                                 [](const auto& c) { return c.dec_v.average; });
  const auto vplusmin_vsuff = argmin_flags([](const auto& c) { return c.v_sufficient; },
                                           [](const auto& c) { return c.dec_vplus.average; });
  const auto vplusmin = argmin_flags([](const auto& c) { return c.vplus_sufficient; },
                                     [](const auto& c) { return c.dec_vplus.average; });
  const auto umin = argmin_flags([](const auto& c) { return c.u_sufficient; },
                                 [](const auto& c) { return c.dec_u.average; });

  rep.characterization = rep.monotonicity = rep.recoverability = true;
  for (std::size_t i = 0; i < rep.candidates.size(); ++i) {
    auto& c = rep.candidates[i];
    c.v_minimal = vmin[i];
    c.vplus_minimal_v_sufficient = vplusmin_vsuff[i];
    c.u_minimal = umin[i];
    // Minimal iff sufficient and zero averaged term, for every family, with each term zero individually.
    const bool char_v = vmin[i] == (c.v_sufficient && c.dec_v.average <= kTol);
    const bool char_vp = vplusmin[i] == (c.vplus_sufficient && c.dec_vplus.average <= kTol);
    const bool char_u = umin[i] == (c.u_sufficient && c.dec_u.average <= kTol);
    const bool terms = !vmin[i] || c.dec_v.max_term <= kTol;
    rep.characterization = rep.characterization && char_v && char_vp && char_u && terms;
    if (vplusmin_vsuff[i] && !vmin[i]) rep.monotonicity = false;
    if (umin[i] != c.shannon_minimal_sufficient) rep.recoverability = false;
  }
  const auto& zs = rep.candidates.front();
  rep.existence = zs.v_sufficient && zs.dec_v.average <= kTol && vmin[0] && vplusmin[0] && umin[0];
  return rep;
}

// ---------------------------------------------------------------------------
// Estimation bound
// ---------------------------------------------------------------------------

struct PacReport {
  std::vector<double> gaps;
  std::vector<double> sufficiency_gaps;
  double bound = 0.0;
  double minimality_bound = 0.0;  // beta * ln|Y|
  double fraction_below = 0.0;
  double gap_quantile = 0.0;      // empirical (1 - delta) quantile of the gaps
  double exact_l_dib = 0.0;
  std::size_t M = 0, K = 0;
  double beta = 0.0, delta = 0.0, C = 0.0;

  nlohmann::json to_json() const {
    return {{"M", M},         {"K", K},
            {"beta", beta},   {"delta", delta},
            {"C", C},         {"bound", bound},
            {"minimality_bound", minimality_bound},
            {"fraction_below", fraction_below},
            {"gap_quantile", gap_quantile},
            {"exact_L_DIB", exact_l_dib},
            {"draws", gaps.size()}};
  }
};

/// One example of a sampled dataset with its single encoder draw and weight.
struct Sample {
  std::size_t x;
  std::size_t z;
  double weight;
};

/// Empirical DIB without the constant: H^_V(Y|Z) - beta/|Y| sum_y mean_t H^_V(t(X_y)|Z).
/// labelings[y] holds K labelings of the class members. Classes absent from
/// the sample contribute 0. Returns {total, sufficiency term}.
inline std::pair<double, double> empirical_dib(const FiniteProblem& p, std::size_t n_z, const std::vector<Sample>& data,
                                               const TabularFamily& fam, double beta,
                                               const std::vector<std::vector<std::vector<int>>>& labelings) {
  double wsum = 0.0;
  Tensor jy = Tensor::matrix(p.y_size, n_z);
  for (const auto& s : data) {
    jy(static_cast<std::size_t>(p.labels[s.x]), s.z) += s.weight;
    wsum += s.weight;
  }
  for (double& v : jy.data) v /= wsum;
  const double hy = exact_v_entropy(jy, fam);
  double hmin = 0.0;
  for (std::size_t y = 0; y < p.y_size; ++y) {
    const auto m = p.members(static_cast<int>(y));
    std::vector<std::size_t> pos(p.x_size, 0);
    for (std::size_t i = 0; i < m.size(); ++i) pos[m[i]] = i;
    double wy = 0.0;
    for (const auto& s : data) {
      if (static_cast<std::size_t>(p.labels[s.x]) == y) wy += s.weight;
    }
    if (wy <= 0.0) continue;
    double acc = 0.0;
    for (const auto& lab : labelings[y]) {
      Tensor j = Tensor::matrix(p.y_size, n_z);
      for (const auto& s : data) {
        if (static_cast<std::size_t>(p.labels[s.x]) == y) {
          j(static_cast<std::size_t>(lab[pos[s.x]]), s.z) += s.weight / wy;
        }
      }
      acc += exact_v_entropy(j, fam);
    }
    hmin += acc / double(labelings[y].size());
  }
  return {hy - beta / double(p.y_size) * hmin, hy};
}

/// Exact L_DIB without the constant.
inline double exact_dib(const FiniteProblem& p, const Channel& c, const TabularFamily& fam, double beta) {
  const double hy = exact_v_entropy(joint_label_z(p, c), fam);
  return hy - beta * exact_dec_information(p, c, fam).mean_v_entropy;
}

/// Samples n_draws datasets of M examples (one encoder draw each, K uniform
/// labelings per class) and compares the empirical DIB to the exact one.
/// The Rademacher term is bounded by C.
inline PacReport exact_pac_gap(const FiniteProblem& p, const Channel& c, const TabularFamily& fam, std::size_t n_draws,
                               std::size_t M, double beta, std::size_t K, double delta, std::uint64_t seed,
                               double C = ad::kLogProbClip) {
  check_channel(p, c);
  if (M == 0 || K == 0 || n_draws == 0) throw ArgumentError("M, K and the number of draws must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw ArgumentError("delta must lie in (0, 1)");
  PacReport rep;
  rep.M = M;
  rep.K = K;
  rep.beta = beta;
  rep.delta = delta;
  rep.C = C;
  rep.minimality_bound = beta * std::log(double(p.y_size));
  rep.bound = 2.0 * C + rep.minimality_bound + C * std::sqrt(2.0 * std::log(1.0 / delta) / double(M));
  rep.exact_l_dib = exact_dib(p, c, fam, beta);
  const double exact_suff = exact_v_entropy(joint_label_z(p, c), fam);

  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> px(p.p_x.begin(), p.p_x.end());
  std::vector<std::discrete_distribution<std::size_t>> pz;
  for (std::size_t x = 0; x < p.x_size; ++x) pz.emplace_back(c.row(x).begin(), c.row(x).end());
  std::uniform_int_distribution<int> lab_draw(0, static_cast<int>(p.y_size) - 1);
  std::size_t below = 0;
  for (std::size_t d = 0; d < n_draws; ++d) {
    std::vector<Sample> data;
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t x = px(rng);
      data.push_back({x, pz[x](rng), 1.0});
    }
    std::vector<std::vector<std::vector<int>>> labelings(p.y_size);
    for (std::size_t y = 0; y < p.y_size; ++y) {
      const auto m = p.members(static_cast<int>(y));
      for (std::size_t k = 0; k < K; ++k) {
        std::vector<int> lab(m.size());
        for (auto& l : lab) l = lab_draw(rng);
        labelings[y].push_back(std::move(lab));
      }
    }
    const auto [emp, emp_suff] = empirical_dib(p, c.cols(), data, fam, beta, labelings);
    const double gap = std::abs(rep.exact_l_dib - emp);
    rep.gaps.push_back(gap);
    rep.sufficiency_gaps.push_back(std::abs(exact_suff - emp_suff));
    if (gap <= rep.bound) ++below;
  }
  rep.fraction_below = double(below) / double(n_draws);
  auto sorted = rep.gaps;
  std::sort(sorted.begin(), sorted.end());
  const auto qi = static_cast<std::size_t>(std::ceil((1.0 - delta) * double(sorted.size()))) - 1;
  rep.gap_quantile = sorted[std::min(qi, sorted.size() - 1)];
  return rep;
}

// ---------------------------------------------------------------------------
// Standard candidate channels for a problem
// ---------------------------------------------------------------------------

inline Channel identity_channel(const FiniteProblem& p) {
  Channel c = Tensor::matrix(p.x_size, p.x_size);
  for (std::size_t x = 0; x < p.x_size; ++x) c(x, x) = 1.0;
  return c;
}

/// Every x maps to the same distribution over |Z|, independent of x.
inline Channel noise_channel(const FiniteProblem& p) {
  return Tensor({p.x_size, p.z_size}, 1.0 / static_cast<double>(p.z_size));
}

/// Deterministic: each example goes to one z of its label's preimage, cycling
/// through the preimage, so same-label examples become distinguishable.
inline Channel split_channel(const FiniteProblem& p, const Predictor& f) {
  Channel c = Tensor::matrix(p.x_size, f.size());
  for (std::size_t y = 0; y < p.y_size; ++y) {
    std::vector<std::size_t> pre;
    for (std::size_t z = 0; z < f.size(); ++z) {
      if (f[z][y] == 1.0) pre.push_back(z);
    }
    const auto m = p.members(static_cast<int>(y));
    for (std::size_t i = 0; i < m.size(); ++i) c(m[i], pre[(i * pre.size()) / m.size()]) = 1.0;
  }
  return c;
}

/// Stochastic and label-separating, but the mass over the preimage depends on x.
inline Channel tilted_channel(const FiniteProblem& p, const Predictor& f) {
  Channel c = Tensor::matrix(p.x_size, f.size());
  for (std::size_t y = 0; y < p.y_size; ++y) {
    std::vector<std::size_t> pre;
    for (std::size_t z = 0; z < f.size(); ++z) {
      if (f[z][y] == 1.0) pre.push_back(z);
    }
    const auto m = p.members(static_cast<int>(y));
    for (std::size_t i = 0; i < m.size(); ++i) {
      double total = 0.0;
      for (std::size_t k = 0; k < pre.size(); ++k) {
        const double w = 1.0 + static_cast<double>((i + k) % pre.size()) * (1.0 + static_cast<double>(i));
        c(m[i], pre[k]) = w;
        total += w;
      }
      for (auto z : pre) c(m[i], z) /= total;
    }
  }
  return c;
}

inline Predictor problem_predictor(const FiniteProblem& p) {
  if (p.preimage_labels.empty()) throw ArgumentError("problem does not define a preimage predictor");
  return deterministic_predictor(p.preimage_labels, p.y_size);
}

inline std::vector<NamedChannel> standard_candidates(const FiniteProblem& p) {
  const auto f = problem_predictor(p);
  return {{"z_star", construct_z_star(p, f)},
          {"split", split_channel(p, f)},
          {"tilted", tilted_channel(p, f)},
          {"noise", noise_channel(p)},
          {"identity", identity_channel(p)}};
}

}  // namespace dib::oracle
