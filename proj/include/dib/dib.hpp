#pragma once

// Empirical DIB training: sufficiency head, K minimality heads behind
// gradient reversal (or an unrolled inner loop), downstream ERM search and
// the baseline regularizers.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dib/autodiff.hpp"
#include "dib/data.hpp"
#include "dib/decomposition.hpp"
#include "dib/errors.hpp"
#include "dib/models.hpp"
#include "dib/optim.hpp"
#include "dib/tensor.hpp"
#include "json.hpp"

namespace dib {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  auto [p, ec] = std::to_chars(buf, buf + 16, v, 16);
  std::string s(buf, p);
  return std::string(16 - s.size(), '0') + s;
}

/// Shortest round-trip decimal; nan for missing values.
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

/// Entropy (nats) of the empirical distribution of integer labels.
inline double label_entropy(std::span<const int> y) {
  if (y.empty()) return 0.0;
  const int n = *std::max_element(y.begin(), y.end()) + 1;
  std::vector<double> c(static_cast<std::size_t>(n), 0.0);
  for (int v : y) c[static_cast<std::size_t>(v)] += 1.0;
  double h = 0.0;
  for (double k : c) {
    if (k > 0) {
      const double p = k / static_cast<double>(y.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Fitting a fresh classifier on frozen representations
// ---------------------------------------------------------------------------

struct FitBudget {
  int epochs = 200;
  double lr = 1e-3;
  std::size_t batch_size = 256;

  void validate() const {
    if (epochs < 0) throw ArgumentError("budget epochs must be >= 0");
    if (!(lr > 0.0)) throw ArgumentError("budget lr must be > 0");
    if (batch_size == 0) throw ArgumentError("budget batch size must be > 0");
  }
  json to_json() const { return {{"epochs", epochs}, {"lr", lr}, {"batch_size", batch_size}}; }
  static FitBudget from_json(const json& j) {
    FitBudget b;
    b.epochs = j.value("epochs", b.epochs);
    b.lr = j.value("lr", b.lr);
    b.batch_size = j.value("batch_size", b.batch_size);
    return b;
  }
};

/// Draws of Z: samples[s] is an [N x d] tensor, one row per example.
using ZSamples = std::vector<Tensor>;

/// Test-set loss ascended with weight gamma while fitting (worst-ERM search).
struct Adversary {
  const ZSamples* z = nullptr;
  std::span<const int> y;
  double gamma = 0.0;
};

struct Risk {
  double log_loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline void check_samples(const ZSamples& z, std::size_t n) {
  if (z.empty()) throw ArgumentError("need at least one draw of Z");
  for (const auto& s : z) {
    if (s.rank() != 2 || s.rows() != n || s.cols() != z.front().cols()) {
      throw DimensionError("every draw of Z must be [" + std::to_string(n) + " x d]");
    }
  }
}

/// Rows idx of a uniformly chosen draw per row.
inline Tensor pick_rows(const ZSamples& z, std::span<const std::size_t> idx, Rng& rng) {
  const std::size_t d = z.front().cols();
  Tensor out = Tensor::matrix(idx.size(), d);
  std::uniform_int_distribution<std::size_t> draw(0, z.size() - 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::size_t s = z.size() == 1 ? 0 : draw(rng);
    std::copy_n(z[s].row(idx[i]).begin(), d, out.row(i).begin());
  }
  return out;
}

inline ZSamples subset_rows(const ZSamples& z, std::span<const std::size_t> idx) {
  ZSamples out;
  for (const auto& s : z) out.push_back(s.gather_rows(idx));
  return out;
}

}  // namespace detail

/// Adam on the mean clamped log loss of a fresh member of spec. The input
/// width is taken from z; classes must cover every target.
inline Classifier fit_classifier(FamilySpec spec, const ZSamples& z, std::span<const int> y, const FitBudget& budget,
                                 std::uint64_t seed, const Adversary* adv = nullptr) {
  budget.validate();
  detail::check_samples(z, y.size());
  if (y.empty()) throw ArgumentError("cannot fit on an empty set");
  spec.input_dim = z.front().cols();
  spec.kind = FamilyKind::mlp;
  for (int t : y) {
    if (t < 0 || static_cast<std::size_t>(t) >= spec.output_classes) throw IndexError("target outside family classes");
  }
  const bool ascend = adv && adv->gamma > 0.0;
  if (ascend) detail::check_samples(*adv->z, adv->y.size());
  Rng rng(seed);
  Classifier clf = init_classifier(spec, rng());
  AdamConfig ac;
  ac.lr = budget.lr;
  Adam opt(clf.parameters(), ac);
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> adv_order;
  if (ascend) {
    adv_order.resize(adv->y.size());
    std::iota(adv_order.begin(), adv_order.end(), 0);
  }
  for (int epoch = 0; epoch < budget.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    if (ascend) std::shuffle(adv_order.begin(), adv_order.end(), rng);
    const std::size_t n_batches = (order.size() + budget.batch_size - 1) / budget.batch_size;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t lo = b * budget.batch_size, hi = std::min(order.size(), lo + budget.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tensor zb = detail::pick_rows(z, idx, rng);
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(y[i]);
      std::vector<double> w;
      if (ascend) {
        // Matching slice of the (cyclically reused) adversary set; the test
        // part enters with weight -gamma relative to the train mean.
        const std::size_t na = std::min(adv_order.size(), idx.size());
        std::vector<std::size_t> aidx;
        for (std::size_t i = 0; i < na; ++i) aidx.push_back(adv_order[(lo + i) % adv_order.size()]);
        Tensor za = detail::pick_rows(*adv->z, aidx, rng);
        const std::size_t B = idx.size() + na;
        Tensor zc = Tensor::matrix(B, zb.cols());
        std::copy(zb.data.begin(), zb.data.end(), zc.data.begin());
        std::copy(za.data.begin(), za.data.end(), zc.data.begin() + static_cast<std::ptrdiff_t>(zb.data.size()));
        w.assign(idx.size(), double(B) / double(idx.size()));
        for (auto a : aidx) {
          yb.push_back(adv->y[a]);
          w.push_back(-adv->gamma * double(B) / double(na));
        }
        zb = std::move(zc);
      }
      auto logits = clf.logits(ad::constant(std::move(zb)), true, &rng);
      auto loss = ad::softmax_logloss(logits, yb, w);
      opt.zero_grad();
      ad::backward(loss);
      opt.step();
    }
  }
  return clf;
}

/// Mean clamped log loss and accuracy over every draw and example.
inline Risk evaluate(const Classifier& clf, const ZSamples& z, std::span<const int> y) {
  detail::check_samples(z, y.size());
  Risk r;
  for (const auto& s : z) {
    const Tensor logp = ad::log_softmax_rows(clf.logits(ad::constant(s))->value);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const auto t = static_cast<std::size_t>(y[i]);
      r.log_loss -= std::max(logp(i, t), -ad::kLogProbClip);
      const auto row = logp.row(i);
      r.accuracy += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == t ? 1.0 : 0.0;
    }
  }
  const double n = static_cast<double>(z.size() * y.size());
  r.log_loss /= n;
  r.accuracy /= n;
  if (!std::isfinite(r.log_loss)) throw NumericError("non-finite evaluation loss");
  return r;
}

// ---------------------------------------------------------------------------
// Empirical V-entropy
// ---------------------------------------------------------------------------

/// Tabular family on integer symbols in column 0 of every draw: exhaustive
/// per-symbol search over the simplex grid plus the empirical target marginal.
inline double tabular_v_entropy(const FamilySpec& spec, const ZSamples& z, std::span<const int> y) {
  detail::check_samples(z, y.size());
  const std::size_t C = spec.output_classes, A = spec.tabular_alphabet;
  auto cands = simplex_grid(C, spec.grid_resolution);
  std::vector<double> marg(C, 0.0);
  for (int t : y) marg[static_cast<std::size_t>(t)] += 1.0 / double(y.size());
  if (std::none_of(cands.begin(), cands.end(), [&](const auto& c) { return c == marg; })) cands.push_back(marg);
  // counts[a][c]: how often symbol a co-occurs with target c
  std::vector<std::vector<double>> counts(A, std::vector<double>(C, 0.0));
  for (const auto& s : z) {
    if (s.cols() != 1) throw DimensionError("tabular representations are a single symbol column");
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double v = s(i, 0);
      if (v < 0 || v != std::floor(v) || v >= double(A)) throw IndexError("symbol outside the tabular alphabet");
      counts[static_cast<std::size_t>(v)][static_cast<std::size_t>(y[i])] += 1.0;
    }
  }
  double total = 0.0;
  for (std::size_t a = 0; a < A; ++a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : cands) {
      double v = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        if (counts[a][c] > 0) v += counts[a][c] * (q[c] > 0 ? -std::max(std::log(q[c]), -ad::kLogProbClip) : ad::kLogProbClip);
      }
      best = std::min(best, v);
    }
    total += best;
  }
  return total / double(z.size() * y.size());
}

/// Ĥ_V(targets | z): trains a fresh member of spec with the budget and returns
/// its final mean clamped log loss. With include_constant the result is capped
/// at the loss of the best constant predictor, which every family contains.
inline double empirical_v_entropy(const FamilySpec& spec, const ZSamples& z, std::span<const int> targets,
                                  const FitBudget& budget, std::uint64_t seed, bool include_constant = true) {
  detail::check_samples(z, targets.size());
  if (spec.kind == FamilyKind::tabular) return tabular_v_entropy(spec, z, targets);
  const auto clf = fit_classifier(spec, z, targets, budget, seed);
  const double loss = evaluate(clf, z, targets).log_loss;
  if (!std::isfinite(loss)) throw NumericError("empirical V-entropy did not reach a finite loss");
  return include_constant ? std::min(loss, label_entropy(targets)) : loss;
}

inline double empirical_v_entropy(const FamilySpec& spec, const Tensor& z, std::span<const int> targets,
                                  const FitBudget& budget, std::uint64_t seed, bool include_constant = true) {
  return empirical_v_entropy(spec, ZSamples{z}, targets, budget, seed, include_constant);
}

/// Î_V(Z -> Dec(X,Y)) on a fixed set: one fresh head per (class, digit column),
/// each scored as entropy of the within-class digit marginal minus its loss.
struct DecEstimate {
  double mean = 0.0;
  std::vector<double> per_head;  // class-major
};

/// Last k digit columns of a base-expansion plan (the least significant, most
/// balanced ones) or all k random labelings.
inline std::vector<std::size_t> minimality_columns(const DecompositionPlan& plan, std::size_t k) {
  if (plan.D < k) {
    throw ArgumentError("plan has " + std::to_string(plan.D) + " digit columns but " + std::to_string(k) +
                        " heads were requested");
  }
  std::vector<std::size_t> cols;
  for (std::size_t d = plan.D - k; d < plan.D; ++d) cols.push_back(d);
  return cols;
}

inline DecEstimate estimate_dec_information(const ZSamples& z, std::span<const int> labels, std::size_t n_classes,
                                            FamilySpec head, LabelingMode mode, std::size_t k,
                                            const FitBudget& budget, std::uint64_t seed, bool include_constant = true) {
  detail::check_samples(z, labels.size());
  const auto plan = make_plan(labels, n_classes, mode, k, seed);
  const auto cols = minimality_columns(plan, k);
  head.output_classes = n_classes;
  DecEstimate est;
  for (std::size_t y = 0; y < n_classes; ++y) {
    const auto rows = plan.class_members(static_cast<int>(y));
    const auto zy = detail::subset_rows(z, rows);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      std::vector<int> t;
      for (auto r : rows) t.push_back(plan.digits[r][cols[c]]);
      const double h = label_entropy(t);
      const double hv = empirical_v_entropy(head, zy, t, budget, seed + 1000 * y + c + 1, include_constant);
      est.per_head.push_back(h - hv);
    }
  }
  est.mean = std::accumulate(est.per_head.begin(), est.per_head.end(), 0.0) / double(est.per_head.size());
  return est;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Strategy { joint_reversal, unrolled };

inline const char* strategy_name(Strategy s) { return s == Strategy::joint_reversal ? "joint" : "unrolled"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "joint" || s == "joint_reversal") return Strategy::joint_reversal;
  if (s == "unrolled") return Strategy::unrolled;
  throw ArgumentError("unknown strategy '" + s + "' (joint|unrolled)");
}

/// Baselines of the comparison table. stochastic adds nothing (plain
/// stochastic representation); none makes the encoder deterministic.
struct Regularizer {
  enum class Kind { stochastic, none, dropout, weight_decay, vib_kl };
  Kind kind = Kind::stochastic;
  double value = 0.0;

  void validate() const {
    if (kind == Kind::dropout && !(value >= 0.0 && value < 1.0)) throw ArgumentError("dropout p must lie in [0, 1)");
    if (kind == Kind::weight_decay && !(value >= 0.0)) throw ArgumentError("weight decay must be >= 0");
    if (kind == Kind::vib_kl && !(value >= 0.0)) throw ArgumentError("VIB weight must be >= 0");
  }

  std::string to_text() const {
    switch (kind) {
      case Kind::stochastic: return "stochastic";
      case Kind::none: return "none";
      case Kind::dropout: return "dropout:" + fmt_double(value);
      case Kind::weight_decay: return "weight_decay:" + fmt_double(value);
      case Kind::vib_kl: return "vib:" + fmt_double(value);
    }
    return "";
  }

  static Regularizer parse(const std::string& text) {
    Regularizer r;
    const auto colon = text.find(':');
    const std::string k = text.substr(0, colon);
    if (colon != std::string::npos) {
      try {
        r.value = std::stod(text.substr(colon + 1));
      } catch (const std::logic_error&) {
        throw ArgumentError("bad regularizer value in '" + text + "'");
      }
    }
    if (k == "stochastic") r.kind = Kind::stochastic;
    else if (k == "none" || k == "deterministic") r.kind = Kind::none;
    else if (k == "dropout") r.kind = Kind::dropout;
    else if (k == "weight_decay" || k == "wd") r.kind = Kind::weight_decay;
    else if (k == "vib" || k == "vib_kl") r.kind = Kind::vib_kl;
    else throw ArgumentError("unknown regularizer '" + k + "'");
    if (r.kind == Kind::dropout && colon == std::string::npos) r.value = 0.5;
    r.validate();
    return r;
  }

  void apply(EncoderSpec& e) const {
    validate();
    if (kind == Kind::none) e.stochastic = false;
    if (kind == Kind::dropout) e.dropout_rate = value;
    if (kind == Kind::vib_kl && !e.stochastic) throw ArgumentError("VIB needs a stochastic encoder");
  }

  /// Loss augmentation on the encoder side (null when nothing is added).
  ad::Var penalty(const Encoder& enc, const Encoder::Output& out) const {
    if (kind == Kind::weight_decay && value > 0.0) return ad::scale(ad::l2_penalty(enc.parameters()), value);
    if (kind == Kind::vib_kl && value > 0.0) return ad::scale(ad::vib_kl(out.mu, out.sigma_raw), value);
    return nullptr;
  }
};

inline FamilySpec default_head_spec() {
  FamilySpec f;
  f.hidden_widths = {128};
  return f;
}

struct DibConfig {
  double beta = 0.0;
  std::size_t k_heads = 4;
  FamilySpec head_spec = default_head_spec();
  Strategy strategy = Strategy::joint_reversal;
  int n_inner = 5;
  double head_lr_multiplier = 50.0;
  LabelingMode labeling = LabelingMode::base_expansion;
  bool share_heads = true;
  Regularizer baseline;

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ArgumentError("beta must be a finite value >= 0");
    if (k_heads < 1) throw ArgumentError("need at least one minimality head");
    if (strategy == Strategy::unrolled && n_inner < 1) throw ArgumentError("unrolled strategy needs n_inner >= 1");
    if (!(head_lr_multiplier > 0.0)) throw ArgumentError("head lr multiplier must be > 0");
    baseline.validate();
  }

  /// Gradient-reversal scale: beta/K with shared heads, beta/(K|Y|) per class.
  double reversal_scale(std::size_t n_classes) const {
    return share_heads ? beta / double(k_heads) : beta / double(k_heads * n_classes);
  }

  json to_json() const {
    return {{"beta", beta},
            {"k_heads", k_heads},
            {"head_spec", head_spec.to_text()},
            {"strategy", strategy_name(strategy)},
            {"n_inner", n_inner},
            {"head_lr_multiplier", head_lr_multiplier},
            {"labeling", labeling_name(labeling)},
            {"share_heads", share_heads},
            {"baseline", baseline.to_text()}};
  }

  static DibConfig from_json(const json& j) {
    DibConfig c;
    c.beta = j.value("beta", c.beta);
    c.k_heads = j.value("k_heads", c.k_heads);
    if (j.contains("head_spec")) c.head_spec = FamilySpec::from_text(j.at("head_spec").get<std::string>());
    c.strategy = parse_strategy(j.value("strategy", std::string("joint")));
    c.n_inner = j.value("n_inner", c.n_inner);
    c.head_lr_multiplier = j.value("head_lr_multiplier", c.head_lr_multiplier);
    c.labeling = parse_labeling(j.value("labeling", std::string("base_expansion")));
    c.share_heads = j.value("share_heads", c.share_heads);
    c.baseline = Regularizer::parse(j.value("baseline", std::string("stochastic")));
    c.validate();
    return c;
  }
};

struct OptimConfig {
  double lr = 5e-5;
  double decay = std::pow(0.01, 1.0 / 300.0);  // per epoch
  int epochs = 300;
  std::size_t batch_size = 256;
  int eval_every = 1;            // epochs between risk evaluations (0: final only)
  // The checkpoint is the epoch with the lowest mean sufficiency loss.
  bool report_minimality = true;  // fresh-head estimates at the checkpoint
  FitBudget report_budget;

  void validate() const {
    if (!(lr > 0.0)) throw ArgumentError("lr must be > 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw ArgumentError("decay must lie in (0, 1]");
    if (epochs < 1) throw ArgumentError("epochs must be >= 1");
    if (batch_size < 2) throw ArgumentError("batch size must be >= 2");
    if (eval_every < 0) throw ArgumentError("eval_every must be >= 0");
    report_budget.validate();
  }

  json to_json() const {
    return {{"lr", lr},
            {"decay", decay},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"eval_every", eval_every},
            {"report_minimality", report_minimality},
            {"report_budget", report_budget.to_json()}};
  }
};

// ---------------------------------------------------------------------------
// Model and loss
// ---------------------------------------------------------------------------

struct DibModel {
  Encoder encoder;
  Classifier suff_head;
  std::vector<Classifier> min_heads;  // K shared, or K*|Y| indexed k*|Y| + y
  std::size_t n_classes = 2;

  std::vector<ad::Var> encoder_side_params() const {
    auto p = encoder.parameters();
    for (const auto& v : suff_head.parameters()) p.push_back(v);
    return p;
  }
  std::vector<ad::Var> head_params() const {
    std::vector<ad::Var> p;
    for (const auto& h : min_heads) {
      for (const auto& v : h.parameters()) p.push_back(v);
    }
    return p;
  }
};

inline DibModel init_dib_model(const EncoderSpec& es, const DibConfig& cfg, std::size_t n_classes,
                               std::uint64_t seed) {
  es.validate();
  cfg.validate();
  Rng rng(seed);
  DibModel m;
  m.n_classes = n_classes;
  m.encoder = Encoder(es, rng());
  FamilySpec h = cfg.head_spec;
  h.kind = FamilyKind::mlp;
  h.input_dim = es.z_dim;
  h.output_classes = n_classes;
  m.suff_head = init_classifier(h, rng());
  const std::size_t n_heads = cfg.share_heads ? cfg.k_heads : cfg.k_heads * n_classes;
  for (std::size_t i = 0; i < n_heads; ++i) m.min_heads.push_back(init_classifier(h, rng()));
  return m;
}

struct DibBatch {
  Tensor x;
  std::vector<int> y;
  std::vector<std::vector<int>> digits;  // [K][B]
};

struct HeadLoss {
  ad::Var sum;         // sum over heads of their mean loss
  double mean = 0.0;   // average head loss (class-averaged for per-class heads)
};

/// Minimality head losses on z_in, which is either a reversal node over the
/// encoder output or a detached copy of it.
inline HeadLoss minimality_loss(const DibModel& m, const ad::Var& z_in, const DibBatch& b, const DibConfig& cfg,
                                Rng& rng) {
  HeadLoss out;
  const std::size_t K = cfg.k_heads;
  if (b.digits.size() != K) throw DimensionError("batch carries the wrong number of digit columns");
  std::vector<ad::Var> terms;
  if (cfg.share_heads) {
    for (std::size_t k = 0; k < K; ++k) {
      terms.push_back(ad::softmax_logloss(m.min_heads[k].logits(z_in, true, &rng), b.digits[k]));
      out.mean += terms.back()->value.item() / double(K);
    }
  } else {
    std::size_t present = 0;
    for (std::size_t y = 0; y < m.n_classes; ++y) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < b.y.size(); ++i) {
        if (static_cast<std::size_t>(b.y[i]) == y) rows.push_back(i);
      }
      if (rows.empty()) continue;
      ++present;
      auto zy = ad::gather_rows(z_in, rows);
      double class_mean = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        std::vector<int> t;
        for (auto r : rows) t.push_back(b.digits[k][r]);
        terms.push_back(ad::softmax_logloss(m.min_heads[k * m.n_classes + y].logits(zy, true, &rng), t));
        class_mean += terms.back()->value.item() / double(K);
      }
      out.mean += class_mean;
    }
    out.mean /= double(std::max<std::size_t>(present, 1));
  }
  out.sum = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.sum = ad::add(out.sum, terms[i]);
  return out;
}

struct DibLoss {
  ad::Var total;             // what backward() is called on
  Encoder::Output enc;
  double l_suff = 0.0;
  double l_min = 0.0;        // average head loss
  double objective = 0.0;    // L_suff - beta * L_min, without the constant
};

/// Builds the joint graph: sufficiency loss, minimality heads behind a
/// reversal of scale reversal_scale (detached from the encoder at beta = 0),
/// and the baseline penalty.
inline DibLoss dib_loss(const DibModel& m, const DibBatch& b, const DibConfig& cfg, Rng& rng) {
  DibLoss L;
  L.enc = m.encoder.forward(ad::constant(b.x), rng, true);
  auto suff = ad::softmax_logloss(m.suff_head.logits(L.enc.z, true, &rng), b.y);
  L.l_suff = suff->value.item();
  const auto z_in = cfg.beta > 0.0 ? ad::gradient_reversal(L.enc.z, cfg.reversal_scale(m.n_classes))
                                   : ad::constant(L.enc.z->value);
  const auto heads = minimality_loss(m, z_in, b, cfg, rng);
  L.l_min = heads.mean;
  L.objective = L.l_suff - cfg.beta * L.l_min;
  L.total = ad::add(suff, heads.sum);
  if (auto pen = cfg.baseline.penalty(m.encoder, L.enc)) L.total = ad::add(L.total, pen);
  if (!std::isfinite(L.total->value.item())) throw NumericError("non-finite DIB loss");
  return L;
}

struct StepRow {
  double l_suff = 0.0, l_min = 0.0, objective = 0.0;
};

/// One optimization step on a batch. joint_reversal: a single backward pass
/// moves the encoder toward L_suff - beta*L_min and the heads toward their own
/// minimum. unrolled: n_inner head-only steps on the detached batch
/// representation, then one encoder step through the reversal.
inline StepRow dib_train_step(DibModel& m, Adam& enc_opt, Adam& head_opt, const DibBatch& b, const DibConfig& cfg,
                              Rng& rng) {
  if (cfg.strategy == Strategy::joint_reversal) {
    auto L = dib_loss(m, b, cfg, rng);
    enc_opt.zero_grad();
    head_opt.zero_grad();
    ad::backward(L.total);
    enc_opt.step();
    head_opt.step();
    return {L.l_suff, L.l_min, L.objective};
  }
  auto enc = m.encoder.forward(ad::constant(b.x), rng, true);
  const auto detached = ad::constant(enc.z->value);
  for (int i = 0; i < cfg.n_inner; ++i) {
    auto h = minimality_loss(m, detached, b, cfg, rng);
    head_opt.zero_grad();
    ad::backward(h.sum);
    head_opt.step();
  }
  auto suff = ad::softmax_logloss(m.suff_head.logits(enc.z, true, &rng), b.y);
  auto total = suff;
  HeadLoss h;
  if (cfg.beta > 0.0) {
    h = minimality_loss(m, ad::gradient_reversal(enc.z, cfg.reversal_scale(m.n_classes)), b, cfg, rng);
    total = ad::add(total, h.sum);
  } else {
    h = minimality_loss(m, detached, b, cfg, rng);
  }
  if (auto pen = cfg.baseline.penalty(m.encoder, enc)) total = ad::add(total, pen);
  if (!std::isfinite(total->value.item())) throw NumericError("non-finite DIB loss");
  enc_opt.zero_grad();
  head_opt.zero_grad();
  ad::backward(total);
  enc_opt.step();
  const double ls = suff->value.item();
  return {ls, h.mean, ls - cfg.beta * h.mean};
}

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double suff_loss = 0.0;       // Ĥ_V(Y|Z) on training batches
  double min_loss = 0.0;        // mean minimality head loss
  double objective = 0.0;
  double minimality = 0.0;      // Î_V(Z -> Dec) from the adversarial heads
  double train_risk = std::numeric_limits<double>::quiet_NaN();
  double test_risk = std::numeric_limits<double>::quiet_NaN();
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct RunReport {
  json config;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<EpochRow> epochs;
  int best_epoch = 0;
  Risk train, test;                 // suff head at the checkpoint, n_eval_samples draws
  double minimality = std::numeric_limits<double>::quiet_NaN();    // fresh heads
  double sufficiency = std::numeric_limits<double>::quiet_NaN();   // fresh Î_V(Z -> Y)
  std::string checkpoint;

  static constexpr const char* kCsvHeader =
      "epoch,suff_loss,min_loss,objective,minimality,train_risk,test_risk,train_acc,test_acc,lr";

  std::string to_csv() const {
    std::string s = std::string(kCsvHeader) + "\n";
    for (const auto& e : epochs) {
      s += std::to_string(e.epoch);
      for (double v : {e.suff_loss, e.min_loss, e.objective, e.minimality, e.train_risk, e.test_risk, e.train_acc,
                       e.test_acc, e.lr}) {
        s += "," + fmt_double(v);
      }
      s += "\n";
    }
    return s;
  }

  json to_json() const {
    auto col = [&](auto get) {
      json a = json::array();
      for (const auto& e : epochs) {
        const double v = get(e);
        a.push_back(std::isnan(v) ? json(nullptr) : json(v));
      }
      return a;
    };
    auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
    return {{"config", config},
            {"seed", seed},
            {"config_hash", config_hash},
            {"best_epoch", best_epoch},
            {"checkpoint", checkpoint},
            {"final",
             {{"train_risk", train.log_loss},
              {"test_risk", test.log_loss},
              {"train_acc", train.accuracy},
              {"test_acc", test.accuracy},
              {"minimality", num(minimality)},
              {"sufficiency", num(sufficiency)}}},
            {"epochs",
             {{"suff_loss", col([](const EpochRow& e) { return e.suff_loss; })},
              {"min_loss", col([](const EpochRow& e) { return e.min_loss; })},
              {"objective", col([](const EpochRow& e) { return e.objective; })},
              {"minimality", col([](const EpochRow& e) { return e.minimality; })},
              {"train_risk", col([](const EpochRow& e) { return e.train_risk; })},
              {"test_risk", col([](const EpochRow& e) { return e.test_risk; })},
              {"train_acc", col([](const EpochRow& e) { return e.train_acc; })},
              {"test_acc", col([](const EpochRow& e) { return e.test_acc; })},
              {"lr", col([](const EpochRow& e) { return e.lr; })}}}};
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  RunReport report;
  DibModel model;
};

inline json run_config_json(const EncoderSpec& es, const DibConfig& cfg, const OptimConfig& opt) {
  return {{"encoder", es.to_text()}, {"dib", cfg.to_json()}, {"optim", opt.to_json()}};
}

/// Train-set and test-set draws of Z from a frozen encoder (normalization
/// statistics are those of each split).
inline std::pair<ZSamples, ZSamples> encode_splits(const Encoder& enc, const Dataset& ds, std::uint64_t seed) {
  const int n = enc.spec().n_eval_samples;
  return {encode(enc, ds.features_of(ds.train), n, seed), encode(enc, ds.features_of(ds.test), n, seed + 1)};
}

inline TrainResult train_encoder(const Dataset& ds, EncoderSpec es, const DibConfig& cfg, const OptimConfig& opt,
                                 std::uint64_t seed) {
  ds.validate();
  cfg.validate();
  opt.validate();
  es.input_dim = ds.dim();
  cfg.baseline.apply(es);
  const auto ytr = ds.labels_of(ds.train), yte = ds.labels_of(ds.test);
  const std::size_t C = ds.n_classes, K = cfg.k_heads;
  const auto plan = make_plan(ytr, C, cfg.labeling, K, seed ^ 0x9e3779b97f4a7c15ull);
  const auto cols = minimality_columns(plan, K);

  // Entropy of each minimality target, for the adversarial Î estimate.
  double target_entropy = 0.0;
  for (std::size_t y = 0; y < C; ++y) {
    const auto rows = plan.class_members(static_cast<int>(y));
    for (auto c : cols) {
      std::vector<int> t;
      for (auto r : rows) t.push_back(plan.digits[r][c]);
      target_entropy += label_entropy(t) / double(C * K);
    }
  }

  TrainResult res;
  res.model = init_dib_model(es, cfg, C, seed);
  DibModel& m = res.model;
  AdamConfig ac;
  ac.lr = opt.lr;
  Adam enc_opt(m.encoder_side_params(), ac);
  ac.lr = opt.lr * cfg.head_lr_multiplier;
  Adam head_opt(m.head_params(), ac);

  RunReport& rep = res.report;
  rep.config = run_config_json(es, cfg, opt);
  rep.seed = seed;
  rep.config_hash = hex64(fnv1a64(rep.config.dump()));

  Rng rng(seed + 17);
  const Tensor Xtr = ds.features_of(ds.train);
  std::vector<std::size_t> order(ytr.size());
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_enc, best_suff;
  std::vector<std::vector<Tensor>> best_heads;

  auto evaluate_suff = [&](std::uint64_t s) {
    const auto [ztr, zte] = encode_splits(m.encoder, ds, s);
    return std::pair{evaluate(m.suff_head, ztr, ytr), evaluate(m.suff_head, zte, yte)};
  };

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRow row;
    row.epoch = epoch;
    row.lr = enc_opt.lr();
    double seen = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += opt.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + opt.batch_size);
      if (hi - lo < 2) break;  // normalization needs two rows
      DibBatch b;
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      b.x = Xtr.gather_rows(idx);
      b.digits.assign(K, {});
      for (auto i : idx) {
        b.y.push_back(ytr[i]);
        for (std::size_t k = 0; k < K; ++k) b.digits[k].push_back(plan.digits[i][cols[k]]);
      }
      const auto s = dib_train_step(m, enc_opt, head_opt, b, cfg, rng);
      const double w = double(idx.size());
      row.suff_loss += w * s.l_suff;
      row.min_loss += w * s.l_min;
      row.objective += w * s.objective;
      seen += w;
    }
    row.suff_loss /= seen;
    row.min_loss /= seen;
    row.objective /= seen;
    row.minimality = target_entropy - row.min_loss;
    if (opt.eval_every > 0 && (epoch % opt.eval_every == 0 || epoch == opt.epochs)) {
      const auto [tr, te] = evaluate_suff(seed + 1000003ull * std::uint64_t(epoch));
      row.train_risk = tr.log_loss;
      row.test_risk = te.log_loss;
      row.train_acc = tr.accuracy;
      row.test_acc = te.accuracy;
    }
    rep.epochs.push_back(row);
    if (row.suff_loss < best) {
      best = row.suff_loss;
      rep.best_epoch = epoch;
      best_enc = m.encoder.snapshot();
      best_suff = m.suff_head.snapshot();
      best_heads.clear();
      for (const auto& h : m.min_heads) best_heads.push_back(h.snapshot());
    }
    enc_opt.set_lr(enc_opt.lr() * opt.decay);
    head_opt.set_lr(head_opt.lr() * opt.decay);
  }
  m.encoder.restore(best_enc);
  m.suff_head.restore(best_suff);
  for (std::size_t i = 0; i < m.min_heads.size(); ++i) m.min_heads[i].restore(best_heads[i]);

  const auto [ztr, zte] = encode_splits(m.encoder, ds, seed + 7);
  rep.train = evaluate(m.suff_head, ztr, ytr);
  rep.test = evaluate(m.suff_head, zte, yte);
  if (opt.report_minimality) {
    FamilySpec head = cfg.head_spec;
    rep.minimality =
        estimate_dec_information(ztr, ytr, C, head, cfg.labeling, K, opt.report_budget, seed + 29).mean;
    head.output_classes = C;
    rep.sufficiency = label_entropy(ytr) - empirical_v_entropy(head, ztr, ytr, opt.report_budget, seed + 31);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Downstream ERMs on a frozen encoder
// ---------------------------------------------------------------------------

enum class ErmMode { average, worst };

inline const char* erm_mode_name(ErmMode m) { return m == ErmMode::average ? "avg" : "worst"; }

inline ErmMode parse_erm_mode(const std::string& s) {
  if (s == "avg" || s == "average") return ErmMode::average;
  if (s == "worst") return ErmMode::worst;
  throw ArgumentError("unknown ERM mode '" + s + "' (avg|worst)");
}

struct DownstreamResult {
  Classifier classifier;
  ErmMode mode = ErmMode::average;
  double gamma = 0.0;
  Risk train, test;

  double gap() const { return test.log_loss - train.log_loss; }

  json to_json() const {
    return {{"mode", erm_mode_name(mode)},       {"gamma", gamma},
            {"train_risk", train.log_loss},      {"test_risk", test.log_loss},
            {"train_acc", train.accuracy},       {"test_acc", test.accuracy},
            {"gap", gap()}};
  }
};

/// average: minimize the train log loss. worst: minimize train loss while
/// ascending gamma times the test loss (test gradients multiplied by -gamma).
/// Risks use n_eval_samples draws of Z per example.
inline DownstreamResult train_downstream_erm(const Encoder& enc, FamilySpec family, const Dataset& ds, ErmMode mode,
                                             double gamma, const FitBudget& budget, std::uint64_t seed) {
  if (!(gamma >= 0.0)) throw ArgumentError("gamma must be >= 0");
  const auto [ztr, zte] = encode_splits(enc, ds, seed);
  const auto ytr = ds.labels_of(ds.train), yte = ds.labels_of(ds.test);
  family.output_classes = ds.n_classes;
  DownstreamResult r;
  r.mode = mode;
  r.gamma = mode == ErmMode::worst ? gamma : 0.0;
  Adversary adv{&zte, yte, r.gamma};
  r.classifier = fit_classifier(family, ztr, ytr, budget, seed + 3, mode == ErmMode::worst ? &adv : nullptr);
  r.train = evaluate(r.classifier, ztr, ytr);
  r.test = evaluate(r.classifier, zte, yte);
  return r;
}

/// Test accuracy of a fresh classifier predicting other labels (for example
/// the distractor) from a frozen encoder's representation.
inline Risk decodability(const Encoder& enc, FamilySpec family, const Dataset& ds, const std::vector<int>& targets,
                         std::size_t n_target_classes, const FitBudget& budget, std::uint64_t seed) {
  if (targets.size() != ds.size()) throw DimensionError("one target per example required");
  const auto [ztr, zte] = encode_splits(enc, ds, seed);
  std::vector<int> ttr, tte;
  for (auto i : ds.train) ttr.push_back(targets[i]);
  for (auto i : ds.test) tte.push_back(targets[i]);
  family.output_classes = n_target_classes;
  const auto clf = fit_classifier(family, ztr, ttr, budget, seed + 5);
  return evaluate(clf, zte, tte);
}

}  // namespace dib
