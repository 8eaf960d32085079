#pragma once

// Post-hoc generalization probes: Î_V(Z_L -> Dec(X,Y)) on frozen hidden
// representations, Kendall rank correlation against generalization gaps, and
// the random-label complexity of a family.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dib/checkpoint.hpp"
#include "dib/data.hpp"
#include "dib/decomposition.hpp"
#include "dib/dib.hpp"
#include "dib/errors.hpp"
#include "dib/models.hpp"
#include "dib/parallel.hpp"
#include "json.hpp"

namespace dib {

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

struct KendallTau {
  double tau = 0.0;
  bool undefined = false;  // every pair tied in one argument; tau reported as 0
  std::size_t concordant = 0, discordant = 0;
};

/// Tau-b: (nc - nd) / sqrt((n0 - n1)(n0 - n2)), n1/n2 the pairs tied in a/b.
inline KendallTau kendall_tau_b(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("kendall_tau needs sequences of equal length");
  if (a.size() < 2) throw ArgumentError("kendall_tau needs at least two observations");
  KendallTau r;
  std::size_t ties_a = 0, ties_b = 0, n0 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      ++n0;
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0) ++ties_a;
      if (db == 0) ++ties_b;
      if (da == 0 || db == 0) continue;
      if ((da > 0) == (db > 0)) ++r.concordant;
      else ++r.discordant;
    }
  }
  const double denom = std::sqrt(double(n0 - ties_a) * double(n0 - ties_b));
  if (denom == 0.0) {
    r.undefined = true;
    return r;
  }
  r.tau = (double(r.concordant) - double(r.discordant)) / denom;
  return r;
}

inline double kendall_tau(std::span<const double> a, std::span<const double> b) { return kendall_tau_b(a, b).tau; }

/// One-sided sign test: P(Binomial(n, 1/2) >= k).
inline double sign_test_p(std::size_t k, std::size_t n) {
  if (k > n) throw ArgumentError("sign test: more successes than trials");
  double p = 0.0;
  for (std::size_t i = k; i <= n; ++i) {
    p += std::exp(std::lgamma(double(n) + 1) - std::lgamma(double(i) + 1) - std::lgamma(double(n - i) + 1) -
                  double(n) * std::log(2.0));
  }
  return std::min(1.0, p);
}

// ---------------------------------------------------------------------------
// Probes on frozen representations
// ---------------------------------------------------------------------------

inline FamilySpec default_probe_family() {
  FamilySpec f;
  f.hidden_widths = {128};
  return f;
}

struct ProbeConfig {
  FamilySpec family = default_probe_family();
  LabelingMode mode = LabelingMode::base_expansion;
  std::size_t k = 4;
  std::vector<std::uint64_t> seeds{1};
  FitBudget budget{200, 1e-3, 32};

  void validate() const {
    if (k < 1) throw ArgumentError("probe needs k >= 1 heads");
    if (seeds.empty()) throw ArgumentError("probe needs at least one seed");
    budget.validate();
  }

  json to_json() const {
    return {{"family", family.to_text()}, {"mode", labeling_name(mode)}, {"k", k},
            {"seeds", seeds},             {"budget", budget.to_json()}};
  }
};

/// Î_V(Z -> Dec(X,Y)) on training representations: mean over seeds, classes and
/// digit columns of digit entropy minus the loss a fresh head reaches, floored at 0.
inline double v_minimality_probe(const ZSamples& z, std::span<const int> labels, std::size_t n_classes,
                                 const ProbeConfig& cfg) {
  cfg.validate();
  double total = 0.0;
  for (auto s : cfg.seeds) {
    total += estimate_dec_information(z, labels, n_classes, cfg.family, cfg.mode, cfg.k, cfg.budget, s, false).mean;
  }
  return std::max(0.0, total / double(cfg.seeds.size()));
}

inline double v_minimality_probe(const Tensor& z, std::span<const int> labels, std::size_t n_classes,
                                 const ProbeConfig& cfg) {
  return v_minimality_probe(ZSamples{z}, labels, n_classes, cfg);
}

/// Mean train log likelihood (<= 0) the family reaches on balanced labels
/// shuffled uniformly at random; higher means a more complex family. The
/// constant predictor bounds it below, as every family contains it.
inline double random_label_complexity(FamilySpec family, const Tensor& z, std::size_t n_classes,
                                      const std::vector<std::uint64_t>& seeds, const FitBudget& budget) {
  if (seeds.empty()) throw ArgumentError("random_label_complexity needs at least one seed");
  if (n_classes < 2) throw ArgumentError("random_label_complexity needs at least two classes");
  family.output_classes = n_classes;
  double total = 0.0;
  for (auto s : seeds) {
    std::vector<int> y(z.rows());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % n_classes);
    Rng rng(s);
    std::shuffle(y.begin(), y.end(), rng);
    total -= empirical_v_entropy(family, z, y, budget, rng(), true);
  }
  return total / double(seeds.size());
}

// ---------------------------------------------------------------------------
// Model zoo
// ---------------------------------------------------------------------------

/// Hyperparameters of one zoo classifier. The last hidden layer is the probed
/// representation Z_L, so its width plays the role of the z dimension.
struct ZooSpec {
  std::vector<std::size_t> hidden{64, 8};
  double dropout = 0.0;
  double weight_decay = 0.0;
  FitBudget budget{300, 1e-3, 32};

  void validate() const {
    if (hidden.empty()) throw ArgumentError("zoo models need at least one hidden layer");
    if (!(weight_decay >= 0.0)) throw ArgumentError("weight decay must be >= 0");
    budget.validate();
  }

  std::string to_text() const {
    std::string s = "hidden=";
    for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "," : "") + std::to_string(hidden[i]);
    return s + ";dropout=" + fmt_double(dropout) + ";wd=" + fmt_double(weight_decay) +
           ";epochs=" + std::to_string(budget.epochs) + ";lr=" + fmt_double(budget.lr) +
           ";batch=" + std::to_string(budget.batch_size);
  }

  json to_json() const {
    return {{"hidden", hidden}, {"dropout", dropout}, {"weight_decay", weight_decay}, {"budget", budget.to_json()}};
  }
  static ZooSpec from_json(const json& j) {
    ZooSpec z;
    z.hidden = j.value("hidden", z.hidden);
    z.dropout = j.value("dropout", z.dropout);
    z.weight_decay = j.value("weight_decay", z.weight_decay);
    if (j.contains("budget")) z.budget = FitBudget::from_json(j.at("budget"));
    z.validate();
    return z;
  }
};

struct ZooModel {
  std::string id;
  ZooSpec spec;
  std::uint64_t seed = 0;
  Classifier model;
  Risk train, test;

  double gap_ll() const { return test.log_loss - train.log_loss; }
  double gap_acc() const { return train.accuracy - test.accuracy; }
};

/// Activations of hidden layer `layer` (eval mode, after the nonlinearity).
inline Tensor hidden_representation(const Classifier& clf, const Tensor& x, std::size_t layer) {
  const auto& layers = clf.layers();
  if (layer + 1 >= layers.size()) throw ArgumentError("hidden_representation: layer is not a hidden layer");
  clf.check_input(x);
  ad::Var h = ad::constant(x);
  for (std::size_t l = 0; l <= layer; ++l) h = ad::leaky_relu(ad::add_bias(ad::matmul(h, layers[l].weight), layers[l].bias));
  return h->value;
}

inline Tensor last_hidden(const Classifier& clf, const Tensor& x) {
  return hidden_representation(clf, x, clf.layers().size() - 2);
}

inline Risk evaluate_on(const Classifier& clf, const Tensor& x, std::span<const int> y) {
  return evaluate(clf, ZSamples{x}, y);
}

/// Adam on the training split with dropout and L2 weight decay.
inline ZooModel train_zoo_model(const Dataset& ds, const ZooSpec& spec, std::uint64_t seed) {
  spec.validate();
  FamilySpec f;
  f.input_dim = ds.dim();
  f.hidden_widths = spec.hidden;
  f.output_classes = ds.n_classes;
  f.dropout_rate = spec.dropout;
  ZooModel m;
  m.spec = spec;
  m.seed = seed;
  m.id = hex64(fnv1a64(spec.to_text() + ";seed=" + std::to_string(seed))).substr(0, 10);
  Rng rng(seed);
  m.model = init_classifier(f, rng());
  AdamConfig ac;
  ac.lr = spec.budget.lr;
  Adam opt(m.model.parameters(), ac);
  const Tensor X = ds.features_of(ds.train);
  const auto y = ds.labels_of(ds.train);
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < spec.budget.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += spec.budget.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + spec.budget.batch_size);
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(lo), order.begin() + std::ptrdiff_t(hi));
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(y[i]);
      auto loss = ad::softmax_logloss(m.model.logits(ad::constant(X.gather_rows(idx)), true, &rng), yb);
      if (spec.weight_decay > 0.0) loss = ad::add(loss, ad::scale(ad::l2_penalty(m.model.parameters()), spec.weight_decay));
      opt.zero_grad();
      ad::backward(loss);
      opt.step();
    }
  }
  m.train = evaluate_on(m.model, X, y);
  m.test = evaluate_on(m.model, ds.features_of(ds.test), ds.labels_of(ds.test));
  return m;
}

/// n specs drawn from a fixed grid of widths, depths, last-layer widths,
/// dropout rates and weight decays.
inline std::vector<ZooSpec> sample_zoo_specs(std::size_t n, std::uint64_t seed, const FitBudget& budget) {
  const std::vector<std::size_t> widths{32, 64, 128, 256}, zdims{4, 8, 16, 32};
  const std::vector<double> dropouts{0.0, 0.1, 0.3, 0.5}, decays{0.0, 1e-4, 1e-3, 1e-2};
  Rng rng(seed);
  auto pick = [&](const auto& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
  std::vector<ZooSpec> out;
  for (std::size_t i = 0; i < n; ++i) {
    ZooSpec s;
    const std::size_t depth = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
    s.hidden.assign(depth, pick(widths));
    s.hidden.push_back(pick(zdims));
    s.dropout = pick(dropouts);
    s.weight_decay = pick(decays);
    s.budget = budget;
    out.push_back(s);
  }
  return out;
}

inline Checkpoint zoo_checkpoint(const ZooModel& m) {
  Checkpoint ck;
  ck.meta["id"] = m.id;
  ck.meta["seed"] = std::to_string(m.seed);
  ck.meta["zoo_spec"] = m.spec.to_json().dump();
  ck.add_net("model", m.model.spec().to_text(), m.model.parameters());
  return ck;
}

/// Rebuilds a zoo member; its risks are re-evaluated on ds.
inline ZooModel zoo_model_from_checkpoint(const Checkpoint& ck, const Dataset& ds) {
  ZooModel m;
  m.model = load_classifier(ck, "model");
  if (m.model.spec().input_dim != ds.dim() || m.model.spec().output_classes != ds.n_classes) {
    throw DimensionError("zoo checkpoint does not match the dataset dimensions");
  }
  auto it = ck.meta.find("id");
  m.id = it == ck.meta.end() ? "model" : it->second;
  if ((it = ck.meta.find("seed")) != ck.meta.end()) m.seed = std::stoull(it->second);
  if ((it = ck.meta.find("zoo_spec")) != ck.meta.end()) m.spec = ZooSpec::from_json(json::parse(it->second));
  m.train = evaluate_on(m.model, ds.features_of(ds.train), ds.labels_of(ds.train));
  m.test = evaluate_on(m.model, ds.features_of(ds.test), ds.labels_of(ds.test));
  return m;
}

// ---------------------------------------------------------------------------
// Probe sweep
// ---------------------------------------------------------------------------

struct ProbeReport {
  std::string model_id;
  double probe = 0.0;
  double gap_ll = 0.0;
  double gap_acc = 0.0;
  double train_loss = 0.0;
  FamilySpec family;
  std::vector<std::uint64_t> seeds;

  json to_json() const {
    return {{"model_id", model_id}, {"probe", probe},           {"gap_ll", gap_ll},     {"gap_acc", gap_acc},
            {"train_loss", train_loss}, {"family", family.to_text()}, {"seeds", seeds}};
  }
};

struct ProbeSweep {
  std::vector<ProbeReport> reports;
  std::vector<std::string> excluded;  // above the train-loss threshold
  KendallTau tau_ll, tau_acc;
  double threshold = 0.05;

  static constexpr const char* kCsvHeader = "model_id,probe,gap_ll,gap_acc";

  std::string to_csv() const {
    std::string s = std::string(kCsvHeader) + "\n";
    for (const auto& r : reports) {
      s += r.model_id + "," + fmt_double(r.probe) + "," + fmt_double(r.gap_ll) + "," + fmt_double(r.gap_acc) + "\n";
    }
    return s;
  }

  json to_json() const {
    json rows = json::array();
    for (const auto& r : reports) rows.push_back(r.to_json());
    auto tau = [](const KendallTau& t) {
      return json{{"tau", t.tau}, {"tied", t.undefined}, {"concordant", t.concordant}, {"discordant", t.discordant}};
    };
    return {{"n_models", reports.size()}, {"excluded", excluded}, {"threshold", threshold},
            {"tau_logloss", tau(tau_ll)}, {"tau_acc", tau(tau_acc)}, {"models", rows}};
  }
};

/// Probes the last hidden layer of every zoo member whose train loss is at most
/// threshold, then correlates the probe with both generalization gaps.
inline ProbeSweep probe_sweep(const std::vector<ZooModel>& zoo, const Dataset& ds, const ProbeConfig& cfg,
                              double threshold = 0.05, std::size_t workers = 1) {
  cfg.validate();
  ProbeSweep out;
  out.threshold = threshold;
  std::vector<const ZooModel*> kept;
  for (const auto& m : zoo) {
    if (m.train.log_loss <= threshold) kept.push_back(&m);
    else out.excluded.push_back(m.id);
  }
  if (kept.size() < 5) {
    throw InsufficientSampleError("probe_sweep needs at least 5 models with train loss <= " + fmt_double(threshold) +
                                  ", got " + std::to_string(kept.size()));
  }
  const Tensor X = ds.features_of(ds.train);
  const auto y = ds.labels_of(ds.train);
  out.reports.resize(kept.size());
  parallel_for(kept.size(), workers, [&](std::size_t i) {
    const ZooModel& m = *kept[i];
    ProbeReport& r = out.reports[i];
    r.model_id = m.id;
    r.probe = v_minimality_probe(last_hidden(m.model, X), y, ds.n_classes, cfg);
    r.gap_ll = m.gap_ll();
    r.gap_acc = m.gap_acc();
    r.train_loss = m.train.log_loss;
    r.family = cfg.family;
    r.seeds = cfg.seeds;
  });
  std::vector<double> p, gl, ga;
  for (const auto& r : out.reports) {
    p.push_back(r.probe);
    gl.push_back(r.gap_ll);
    ga.push_back(r.gap_acc);
  }
  out.tau_ll = kendall_tau_b(p, gl);
  out.tau_acc = kendall_tau_b(p, ga);
  return out;
}

}  // namespace dib
