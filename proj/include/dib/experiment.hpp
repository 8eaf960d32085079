#pragma once

// Dataset specifications, desk-scale defaults and the beta x seed x family
// sweep driver shared by the command line tool and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dib/data.hpp"
#include "dib/dib.hpp"
#include "dib/errors.hpp"
#include "dib/models.hpp"
#include "dib/parallel.hpp"
#include "json.hpp"

namespace dib {

struct DatasetSpec {
  std::string path;  // CSV file; when set the generator fields are ignored
  std::size_t n_per_class = 200;
  std::size_t n_classes = 2;
  std::size_t dim = 16;
  double noise = 0.3;
  std::size_t distractor_classes = 10;  // 0: no distractor block
  double strength = 1.0;

  void validate() const {
    if (!path.empty()) return;
    if (n_per_class < 2) throw ArgumentError("n_per_class must be >= 2");
    if (n_classes < 2) throw ArgumentError("need at least two classes");
    if (dim == 0) throw ArgumentError("dim must be positive");
    if (!(noise >= 0.0)) throw ArgumentError("noise must be >= 0");
    if (distractor_classes > 0 && !(strength > 0.0)) throw ArgumentError("distractor strength must be > 0");
  }

  Dataset make(std::uint64_t seed) const {
    validate();
    if (!path.empty()) return load_csv(path);
    auto ds = make_prototype_dataset(n_per_class, n_classes, dim, noise, seed);
    if (distractor_classes > 0) ds = make_distractor_dataset(ds, distractor_classes, strength, seed);
    return ds;
  }

  json to_json() const {
    if (!path.empty()) return {{"path", path}};
    return {{"n_per_class", n_per_class}, {"n_classes", n_classes},
            {"dim", dim},                 {"noise", noise},
            {"distractor_classes", distractor_classes}, {"strength", strength}};
  }
};

// ---------------------------------------------------------------------------
// Desk-scale defaults
// ---------------------------------------------------------------------------

inline EncoderSpec desk_encoder_spec(std::size_t input_dim) {
  EncoderSpec es;
  es.input_dim = input_dim;
  es.hidden_widths = {64, 64};
  es.z_dim = 8;
  es.n_eval_samples = 4;
  return es;
}

/// Unrolled inner loop, every base-2 digit of a 100-example class as a head.
inline DibConfig desk_dib_config(double beta) {
  DibConfig c;
  c.beta = beta;
  c.k_heads = 7;
  c.strategy = Strategy::unrolled;
  c.head_lr_multiplier = 10.0;
  return c;
}

inline OptimConfig desk_optim_config() {
  OptimConfig o;
  o.lr = 1e-3;
  o.epochs = 300;
  o.decay = std::pow(0.01, 1.0 / 300.0);
  o.batch_size = 32;
  o.eval_every = 0;
  o.report_budget = {200, 1e-2, 64};
  return o;
}

inline FitBudget desk_downstream_budget() { return {100, 1e-3, 64}; }

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepConfig {
  DatasetSpec data;
  EncoderSpec encoder = desk_encoder_spec(26);
  DibConfig dib = desk_dib_config(0.0);
  OptimConfig optim = desk_optim_config();
  std::vector<double> betas{0.0, 0.1, 1.0, 10.0, 100.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<FamilySpec> families;  // empty: dib.head_spec only
  double gamma = 0.1;
  FitBudget downstream = desk_downstream_budget();

  void validate() const {
    data.validate();
    encoder.validate();
    dib.validate();
    optim.validate();
    downstream.validate();
    if (betas.empty() || seeds.empty()) throw ArgumentError("sweep needs at least one beta and one seed");
    for (double b : betas) {
      if (!(b >= 0.0) || !std::isfinite(b)) throw ArgumentError("sweep betas must be finite and >= 0");
    }
    if (!(gamma >= 0.0)) throw ArgumentError("gamma must be >= 0");
  }

  std::vector<FamilySpec> family_list() const { return families.empty() ? std::vector{dib.head_spec} : families; }

  json to_json() const {
    json fams = json::array();
    for (const auto& f : family_list()) fams.push_back(f.to_text());
    return {{"data", data.to_json()},   {"encoder", encoder.to_text()},  {"dib", dib.to_json()},
            {"optim", optim.to_json()}, {"betas", betas},                {"seeds", seeds},
            {"families", fams},         {"gamma", gamma},                {"downstream", downstream.to_json()}};
  }
};

struct SweepRow {
  std::string family;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  int best_epoch = 0;
  double minimality = 0.0;   // fresh-head estimate at the checkpoint
  double sufficiency = 0.0;
  double train_risk = 0.0, test_risk = 0.0;
  double worst_train = 0.0, worst_test = 0.0;
  double distractor_acc = std::numeric_limits<double>::quiet_NaN();

  double worst_gap() const { return worst_test - worst_train; }

  static constexpr const char* kCsvHeader =
      "family,beta,seed,config_hash,best_epoch,minimality,sufficiency,train_risk,test_risk,worst_train,worst_test,"
      "worst_gap,distractor_acc";

  std::string to_csv() const {
    std::string s = "\"" + family + "\"," + fmt_double(beta) + "," + std::to_string(seed) + "," + config_hash + "," +
                    std::to_string(best_epoch);
    for (double v : {minimality, sufficiency, train_risk, test_risk, worst_train, worst_test, worst_gap(),
                     distractor_acc}) {
      s += "," + fmt_double(v);
    }
    return s;
  }

  json to_json() const {
    return {{"family", family},           {"beta", beta},
            {"seed", seed},               {"config_hash", config_hash},
            {"best_epoch", best_epoch},   {"minimality", minimality},
            {"sufficiency", sufficiency}, {"train_risk", train_risk},
            {"test_risk", test_risk},     {"worst_train", worst_train},
            {"worst_test", worst_test},   {"worst_gap", worst_gap()},
            {"distractor_acc", std::isnan(distractor_acc) ? json(nullptr) : json(distractor_acc)}};
  }
};

/// Means over seeds for one (family, beta) cell.
struct SweepCell {
  std::string family;
  double beta = 0.0;
  std::size_t n = 0;
  double minimality = 0.0, sufficiency = 0.0, worst_test = 0.0, worst_gap = 0.0, distractor_acc = 0.0;
};

struct SweepResult {
  json config;
  std::vector<SweepRow> rows;

  std::vector<SweepCell> cells() const {
    std::vector<SweepCell> out;
    for (const auto& r : rows) {
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const SweepCell& c) { return c.family == r.family && c.beta == r.beta; });
      if (it == out.end()) {
        out.push_back({r.family, r.beta});
        it = out.end() - 1;
      }
      ++it->n;
      it->minimality += r.minimality;
      it->sufficiency += r.sufficiency;
      it->worst_test += r.worst_test;
      it->worst_gap += r.worst_gap();
      it->distractor_acc += r.distractor_acc;
    }
    for (auto& c : out) {
      for (double* v : {&c.minimality, &c.sufficiency, &c.worst_test, &c.worst_gap, &c.distractor_acc}) *v /= double(c.n);
    }
    return out;
  }

  /// Among beta > 0, the cell of `family` with the lowest mean worst-ERM test loss.
  const SweepCell* best_beta(const std::vector<SweepCell>& cs, const std::string& family) const {
    const SweepCell* best = nullptr;
    for (const auto& c : cs) {
      if (c.family == family && c.beta > 0.0 && (!best || c.worst_test < best->worst_test)) best = &c;
    }
    return best;
  }

  std::string to_csv() const {
    std::string s = std::string(SweepRow::kCsvHeader) + "\n";
    for (const auto& r : rows) s += r.to_csv() + "\n";
    return s;
  }

  json to_json() const {
    json rs = json::array(), cs = json::array();
    for (const auto& r : rows) rs.push_back(r.to_json());
    const auto cells_ = cells();
    for (const auto& c : cells_) {
      cs.push_back({{"family", c.family},
                    {"beta", c.beta},
                    {"n", c.n},
                    {"minimality", c.minimality},
                    {"sufficiency", c.sufficiency},
                    {"worst_test", c.worst_test},
                    {"worst_gap", c.worst_gap},
                    {"distractor_acc", std::isnan(c.distractor_acc) ? json(nullptr) : json(c.distractor_acc)}});
    }
    json best = json::object();
    for (const auto& c : cells_) {
      if (const auto* b = best_beta(cells_, c.family)) best[c.family] = b->beta;
    }
    return {{"config", config}, {"rows", rs}, {"cells", cs}, {"best_beta", best}};
  }
};

/// One DIB training run followed by the worst-ERM search and, when the dataset
/// has one, distractor decodability with the same family.
inline SweepRow run_sweep_cell(const SweepConfig& cfg, const FamilySpec& family, double beta, std::uint64_t seed,
                               TrainResult* keep = nullptr) {
  const Dataset ds = cfg.data.make(seed);
  EncoderSpec es = cfg.encoder;
  es.input_dim = ds.dim();
  DibConfig dc = cfg.dib;
  dc.beta = beta;
  dc.head_spec = family;
  dc.baseline.apply(es);
  auto res = train_encoder(ds, es, dc, cfg.optim, seed);
  SweepRow row;
  row.family = family.to_text();
  row.beta = beta;
  row.seed = seed;
  row.config_hash = res.report.config_hash;
  row.best_epoch = res.report.best_epoch;
  row.minimality = res.report.minimality;
  row.sufficiency = res.report.sufficiency;
  row.train_risk = res.report.train.log_loss;
  row.test_risk = res.report.test.log_loss;
  const auto worst = train_downstream_erm(res.model.encoder, family, ds, ErmMode::worst, cfg.gamma, cfg.downstream, seed);
  row.worst_train = worst.train.log_loss;
  row.worst_test = worst.test.log_loss;
  if (ds.has_distractor()) {
    row.distractor_acc =
        decodability(res.model.encoder, family, ds, ds.distractor_labels, ds.n_distractor_classes, cfg.downstream, seed)
            .accuracy;
  }
  if (keep) *keep = std::move(res);
  return row;
}

/// Every (family, beta, seed) combination on a bounded worker pool. Rows are
/// ordered family-major, then beta, then seed, whatever the worker count.
inline SweepResult run_sweep(const SweepConfig& cfg, std::size_t workers) {
  cfg.validate();
  struct Job {
    FamilySpec family;
    double beta;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& f : cfg.family_list()) {
    for (double b : cfg.betas) {
      for (auto s : cfg.seeds) jobs.push_back({f, b, s});
    }
  }
  SweepResult out;
  out.config = cfg.to_json();
  out.rows.resize(jobs.size());
  parallel_for(jobs.size(), workers,
               [&](std::size_t i) { out.rows[i] = run_sweep_cell(cfg, jobs[i].family, jobs[i].beta, jobs[i].seed); });
  return out;
}

}  // namespace dib
