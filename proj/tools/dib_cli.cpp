// dib_cli: every workflow as a subcommand.
//
//   dib_cli [--seed N] [--out DIR] [--workers N] [--config FILE] <command> [options]
//
// Commands: train, downstream, probe, oracle, sweep, data-gen. Each run writes
// into <out>/<config-hash>-s<seed>/. Exit codes: 0 ok, 1 failed oracle verdict,
// 2 invalid configuration or input, 3 numeric failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dib/checkpoint.hpp"
#include "dib/data.hpp"
#include "dib/dib.hpp"
#include "dib/experiment.hpp"
#include "dib/oracle.hpp"
#include "dib/probes.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dib;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitVerdict = 1, kExitConfig = 2, kExitNumeric = 3;

struct Globals {
  std::uint64_t seed = 1;
  std::string out = "runs";
  std::size_t workers = default_workers();
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ArgumentError("cannot write " + p.string());
  f << text;
}

/// Creates <out>/<hash>-s<seed>/ for a resolved configuration.
fs::path run_dir(const Globals& g, const std::string& command, const json& config) {
  const json keyed{{"command", command}, {"config", config}};
  const fs::path dir = fs::path(g.out) / (hex64(fnv1a64(keyed.dump())) + "-s" + std::to_string(g.seed));
  fs::create_directories(dir);
  return dir;
}

void finish(const fs::path& dir, const json& summary, const std::string& name) {
  write_file(dir / name, summary.dump(2) + "\n");
  std::cout << (dir / name).string() << "\n";
}

// ---------------------------------------------------------------------------
// Shared option groups
// ---------------------------------------------------------------------------

struct DataOpts {
  DatasetSpec spec;
  std::uint64_t data_seed = 0;  // 0: use --seed

  void add(CLI::App* app) {
    app->add_option("--data", spec.path, "dataset CSV (x0..,label[,distractor],split)");
    app->add_option("--n-per-class", spec.n_per_class, "generated examples per class")->capture_default_str();
    app->add_option("--classes", spec.n_classes, "generated classes")->capture_default_str();
    app->add_option("--dim", spec.dim, "generated feature dimension")->capture_default_str();
    app->add_option("--noise", spec.noise, "prototype noise std")->capture_default_str();
    app->add_option("--distractor-classes", spec.distractor_classes, "distractor classes (0: none)")
        ->capture_default_str();
    app->add_option("--strength", spec.strength, "distractor strength")->capture_default_str();
    app->add_option("--data-seed", data_seed, "generator seed (default: --seed)");
  }

  std::uint64_t seed(const Globals& g) const { return data_seed ? data_seed : g.seed; }
  Dataset make(const Globals& g) const { return spec.make(seed(g)); }
  json to_json(const Globals& g) const {
    json j = spec.to_json();
    if (spec.path.empty()) j["seed"] = seed(g);
    return j;
  }
};

struct TrainOpts {
  DibConfig dib = desk_dib_config(0.0);
  OptimConfig optim = desk_optim_config();
  std::vector<std::size_t> widths{64, 64};
  std::size_t z_dim = 8;
  std::size_t head_width = 128;
  std::string strategy = "unrolled";
  std::string labeling = "base_expansion";
  std::string baseline = "stochastic";
  bool per_class_heads = false;
  int eval_samples = 4;

  void add(CLI::App* app, bool with_beta) {
    if (with_beta) app->add_option("--beta", dib.beta, "minimality weight")->capture_default_str();
    app->add_option("--k", dib.k_heads, "minimality heads")->capture_default_str();
    app->add_option("--strategy", strategy, "joint | unrolled")->capture_default_str();
    app->add_option("--n-inner", dib.n_inner, "head steps per encoder step (unrolled)")->capture_default_str();
    app->add_option("--head-mult", dib.head_lr_multiplier, "minimality head lr multiplier")->capture_default_str();
    app->add_option("--head-width", head_width, "hidden width of the family V")->capture_default_str();
    app->add_option("--labeling", labeling, "base_expansion | random")->capture_default_str();
    app->add_flag("--per-class-heads", per_class_heads, "separate heads per class");
    app->add_option("--baseline", baseline, "stochastic | none | dropout[:p] | weight_decay:x | vib:x")
        ->capture_default_str();
    app->add_option("--epochs", optim.epochs, "encoder epochs")->capture_default_str();
    app->add_option("--lr", optim.lr, "encoder learning rate")->capture_default_str();
    app->add_option("--batch", optim.batch_size, "batch size")->capture_default_str();
    app->add_option("--eval-every", optim.eval_every, "epochs between risk evaluations (0: final)")
        ->capture_default_str();
    app->add_option("--widths", widths, "encoder hidden widths")->delimiter(',');
    app->add_option("--z-dim", z_dim, "representation dimension")->capture_default_str();
    app->add_option("--eval-samples", eval_samples, "Z draws per example at evaluation")->capture_default_str();
  }

  /// Resolves the string options; decay follows the epoch count.
  void resolve() {
    dib.strategy = parse_strategy(strategy);
    dib.labeling = parse_labeling(labeling);
    dib.share_heads = !per_class_heads;
    dib.baseline = Regularizer::parse(baseline);
    dib.head_spec = default_head_spec();
    dib.head_spec.hidden_widths = {head_width};
    optim.decay = std::pow(0.01, 1.0 / double(optim.epochs > 0 ? optim.epochs : 1));
    dib.validate();
    optim.validate();
  }

  EncoderSpec encoder(std::size_t input_dim) const {
    EncoderSpec es = desk_encoder_spec(input_dim);
    es.hidden_widths = widths;
    es.z_dim = z_dim;
    es.n_eval_samples = eval_samples;
    dib.baseline.apply(es);
    es.validate();
    return es;
  }
};

struct BudgetOpts {
  FitBudget budget;
  explicit BudgetOpts(FitBudget b) : budget(b) {}
  void add(CLI::App* app, const std::string& prefix) {
    app->add_option("--" + prefix + "epochs", budget.epochs, "epochs")->capture_default_str();
    app->add_option("--" + prefix + "lr", budget.lr, "learning rate")->capture_default_str();
    app->add_option("--" + prefix + "batch", budget.batch_size, "batch size")->capture_default_str();
  }
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_data_gen(const Globals& g, const DataOpts& d) {
  const Dataset ds = d.make(g);
  const json cfg{{"data", d.to_json(g)}};
  const auto dir = run_dir(g, "data-gen", cfg);
  const std::string csv = dataset_to_csv(ds);
  write_file(dir / "dataset.csv", csv);
  finish(dir,
         {{"command", "data-gen"},
          {"seed", g.seed},
          {"config", cfg},
          {"n", ds.size()},
          {"dim", ds.dim()},
          {"n_train", ds.train.size()},
          {"n_test", ds.test.size()},
          {"csv_fnv1a64", hex64(fnv1a64(csv))},
          {"distractor_label_mi", ds.has_distractor() ? empirical_label_mi(ds.labels, ds.distractor_labels) : 0.0}},
         "report.json");
}

void cmd_train(const Globals& g, const DataOpts& d, TrainOpts t) {
  t.resolve();
  const Dataset ds = d.make(g);
  const EncoderSpec es = t.encoder(ds.dim());
  const json cfg{{"data", d.to_json(g)}, {"run", run_config_json(es, t.dib, t.optim)}};
  const auto dir = run_dir(g, "train", cfg);
  auto res = train_encoder(ds, es, t.dib, t.optim, g.seed);
  Checkpoint ck;
  ck.meta["config_hash"] = res.report.config_hash;
  ck.meta["seed"] = std::to_string(g.seed);
  ck.meta["best_epoch"] = std::to_string(res.report.best_epoch);
  ck.add_net("encoder", es.to_text(), res.model.encoder.parameters());
  ck.add_net("suff_head", res.model.suff_head.spec().to_text(), res.model.suff_head.parameters());
  save_checkpoint(ck, (dir / "model.ckpt").string());
  res.report.checkpoint = (dir / "model.ckpt").string();
  write_file(dir / "epochs.csv", res.report.to_csv());
  json rep = res.report.to_json();
  rep["command"] = "train";
  rep["data"] = d.to_json(g);
  finish(dir, rep, "report.json");
}

void cmd_downstream(const Globals& g, const DataOpts& d, const std::string& ckpt, const std::string& mode,
                    const std::vector<double>& gammas, std::size_t width, const std::string& family_text,
                    const FitBudget& budget) {
  const Encoder enc = load_encoder(load_checkpoint(ckpt));
  const Dataset ds = d.make(g);
  if (enc.spec().input_dim != ds.dim()) {
    throw DimensionError("checkpoint encoder expects " + std::to_string(enc.spec().input_dim) +
                         " features but the dataset has " + std::to_string(ds.dim()));
  }
  FamilySpec fam = default_head_spec();
  fam.hidden_widths = {width};
  if (!family_text.empty()) {
    fam = FamilySpec::from_text(family_text);
    if (fam.input_dim != enc.spec().z_dim) {
      throw DimensionError("family input_dim " + std::to_string(fam.input_dim) + " does not match the encoder z_dim " +
                           std::to_string(enc.spec().z_dim));
    }
  }
  fam.input_dim = enc.spec().z_dim;
  fam.output_classes = ds.n_classes;
  budget.validate();
  std::vector<std::pair<ErmMode, double>> jobs;
  if (mode == "avg" || mode == "both") jobs.push_back({ErmMode::average, 0.0});
  if (mode == "worst" || mode == "both") {
    for (double gm : gammas) jobs.push_back({ErmMode::worst, gm});
  }
  if (jobs.empty()) throw ArgumentError("mode must be avg, worst or both");
  std::ifstream f(ckpt, std::ios::binary);
  std::ostringstream bytes;
  bytes << f.rdbuf();
  const json cfg{{"checkpoint_fnv1a64", hex64(fnv1a64(bytes.str()))}, {"data", d.to_json(g)}, {"mode", mode},
                 {"gammas", gammas},  {"family", fam.to_text()}, {"budget", budget.to_json()}};
  const auto dir = run_dir(g, "downstream", cfg);
  json rows = json::array();
  std::string csv = "mode,gamma,train_risk,test_risk,train_acc,test_acc,gap\n";
  for (const auto& [m, gm] : jobs) {
    const auto r = train_downstream_erm(enc, fam, ds, m, gm, budget, g.seed);
    rows.push_back(r.to_json());
    csv += std::string(erm_mode_name(m)) + "," + fmt_double(r.gamma) + "," + fmt_double(r.train.log_loss) + "," +
           fmt_double(r.test.log_loss) + "," + fmt_double(r.train.accuracy) + "," + fmt_double(r.test.accuracy) +
           "," + fmt_double(r.gap()) + "\n";
  }
  write_file(dir / "downstream.csv", csv);
  finish(dir, {{"command", "downstream"}, {"seed", g.seed}, {"config", cfg}, {"results", rows}}, "report.json");
}

void cmd_probe(const Globals& g, const DataOpts& d, const std::string& zoo_dir, std::size_t zoo_size,
               const FitBudget& zoo_budget, ProbeConfig pc, std::size_t probe_width, std::size_t n_probe_seeds,
               const std::string& labeling, double threshold) {
  pc.family = default_probe_family();
  pc.family.hidden_widths = {probe_width};
  pc.mode = parse_labeling(labeling);
  pc.seeds.clear();
  for (std::size_t i = 0; i < n_probe_seeds; ++i) pc.seeds.push_back(g.seed + i);
  pc.validate();
  const Dataset ds = d.make(g);
  std::vector<ZooModel> zoo;
  json zoo_cfg;
  if (!zoo_dir.empty()) {
    if (!fs::is_directory(zoo_dir)) throw ArgumentError("zoo directory " + zoo_dir + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(zoo_dir)) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    json ids = json::array();
    for (const auto& f : files) {
      zoo.push_back(zoo_model_from_checkpoint(load_checkpoint(f.string()), ds));
      ids.push_back(zoo.back().id);
    }
    zoo_cfg = {{"dir_models", ids}};
  } else {
    zoo_cfg = {{"size", zoo_size}, {"budget", zoo_budget.to_json()}};
  }
  const json cfg{{"data", d.to_json(g)}, {"zoo", zoo_cfg}, {"probe", pc.to_json()}, {"threshold", threshold}};
  const auto dir = run_dir(g, "probe", cfg);
  if (zoo_dir.empty()) {
    const auto specs = sample_zoo_specs(zoo_size, g.seed, zoo_budget);
    zoo.resize(specs.size());
    parallel_for(specs.size(), g.workers,
                 [&](std::size_t i) { zoo[i] = train_zoo_model(ds, specs[i], g.seed * 1000 + i); });
    fs::create_directories(dir / "zoo");
    for (std::size_t i = 0; i < zoo.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%03zu.ckpt", i);
      save_checkpoint(zoo_checkpoint(zoo[i]), (dir / "zoo" / name).string());
    }
  }
  const auto sweep = probe_sweep(zoo, ds, pc, threshold, g.workers);
  write_file(dir / "probes.csv", sweep.to_csv());
  json rep = sweep.to_json();
  rep["command"] = "probe";
  rep["seed"] = g.seed;
  rep["config"] = cfg;
  finish(dir, rep, "summary.json");
}

int cmd_oracle(const Globals& g, const std::string& problem_path, const std::vector<std::string>& checks,
               std::size_t draws, std::size_t M, double delta, double beta, std::size_t K,
               const std::string& channel_name) {
  std::ifstream f(problem_path);
  if (!f) throw ArgumentError("cannot open problem file " + problem_path);
  std::ostringstream text;
  text << f.rdbuf();
  const auto p = oracle::FiniteProblem::parse(text.str());
  const auto candidates = oracle::standard_candidates(p);
  const auto fam = oracle::problem_family(p, p.grid_resolution);
  const json cfg{{"problem", text.str()}, {"checks", checks}, {"draws", draws}, {"M", M},
                 {"delta", delta},        {"beta", beta},     {"K", K},         {"channel", channel_name}};
  const auto dir = run_dir(g, "oracle", cfg);
  json out{{"command", "oracle"}, {"seed", g.seed}, {"config", cfg}};
  bool pass = true;
  for (const auto& c : checks) {
    if (c == "theorem1") {
      const auto subsets = oracle::minimal_train_subsets(p);
      const auto pos = oracle::verify_theorem1(p, candidates[0].channel, fam, subsets);
      const auto neg = oracle::verify_theorem1(p, oracle::identity_channel(p), fam, subsets, true);
      out["theorem1"] = {{"z_star", pos.to_json()}, {"identity_negative_control", neg.to_json()},
                         {"pass", pos.pass && neg.pass}};
      pass = pass && pos.pass && neg.pass;
    } else if (c == "prop2") {
      const auto rep =
          oracle::verify_proposition2(p, candidates, fam, oracle::problem_family(p, p.grid_plus_resolution));
      out["prop2"] = rep.to_json();
      pass = pass && rep.pass();
    } else if (c == "pac") {
      auto it = std::find_if(candidates.begin(), candidates.end(), [&](const auto& n) { return n.name == channel_name; });
      if (it == candidates.end()) throw ArgumentError("unknown channel " + channel_name);
      const auto rep = oracle::exact_pac_gap(p, it->channel, fam, draws, M, beta, K, delta, g.seed);
      json j = rep.to_json();
      j["channel"] = channel_name;
      j["pass"] = rep.fraction_below >= 1.0 - delta;
      out["pac"] = j;
      pass = pass && j["pass"].get<bool>();
    } else {
      throw ArgumentError("unknown check " + c + " (theorem1|prop2|pac)");
    }
  }
  out["pass"] = pass;
  finish(dir, out, "oracle.json");
  return pass ? kExitOk : kExitVerdict;
}

void cmd_sweep(const Globals& g, const DataOpts& d, TrainOpts t, const std::vector<double>& betas,
               std::size_t n_seeds, const std::vector<std::size_t>& family_widths, double gamma,
               const FitBudget& downstream) {
  t.resolve();
  SweepConfig sc;
  sc.data = d.spec;
  sc.encoder = t.encoder(d.spec.make(g.seed).dim());
  sc.dib = t.dib;
  sc.optim = t.optim;
  sc.betas = betas;
  sc.seeds.clear();
  for (std::size_t i = 0; i < n_seeds; ++i) sc.seeds.push_back(g.seed + i);
  for (auto w : family_widths) {
    FamilySpec f = t.dib.head_spec;
    f.hidden_widths = {w};
    sc.families.push_back(f);
  }
  sc.gamma = gamma;
  sc.downstream = downstream;
  sc.validate();
  const auto dir = run_dir(g, "sweep", sc.to_json());
  const auto res = run_sweep(sc, g.workers);
  write_file(dir / "sweep.csv", res.to_csv());
  json rep = res.to_json();
  rep["command"] = "sweep";
  rep["seed"] = g.seed;
  finish(dir, rep, "summary.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decodable information bottleneck experiments"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI config file; [command] sections hold command options, flags win");
  Globals g;
  app.add_option("--seed", g.seed, "run seed")->capture_default_str();
  app.add_option("--out", g.out, "output root")->capture_default_str();
  app.add_option("--workers", g.workers, "parallel workers")->capture_default_str()->check(CLI::PositiveNumber);

  DataOpts gen_data, train_data, down_data, probe_data, sweep_data;
  probe_data.spec.distractor_classes = 0;

  auto* gen = app.add_subcommand("data-gen", "generate a synthetic dataset");
  gen_data.add(gen);

  auto* train = app.add_subcommand("train", "train an encoder with the DIB objective");
  TrainOpts train_opts;
  train_data.add(train);
  train_opts.add(train, true);

  auto* down = app.add_subcommand("downstream", "average / worst ERM on a frozen encoder");
  std::string ckpt, mode = "worst", family_text;
  std::vector<double> gammas{0.1};
  std::size_t down_width = 128;
  BudgetOpts down_budget(desk_downstream_budget());
  down->add_option("--checkpoint", ckpt, "model.ckpt written by train")->required()->check(CLI::ExistingFile);
  down->add_option("--mode", mode, "avg | worst | both")->capture_default_str();
  down->add_option("--gamma", gammas, "test-loss ascent weights for the worst ERM")->delimiter(',');
  down->add_option("--family-width", down_width, "hidden width of the ERM family")->capture_default_str();
  down->add_option("--family", family_text, "full family spec text (overrides --family-width)");
  down_data.add(down);
  down_budget.add(down, "erm-");

  auto* probe = app.add_subcommand("probe", "generalization probe over a model zoo");
  std::string zoo_dir, probe_labeling = "base_expansion";
  std::size_t zoo_size = 20, probe_width = 128, probe_seeds = 1;
  double threshold = 0.05;
  ProbeConfig pc;
  BudgetOpts zoo_budget(ZooSpec{}.budget), probe_budget(pc.budget);
  probe->add_option("--zoo", zoo_dir, "directory of zoo checkpoints (*.ckpt)");
  probe->add_option("--zoo-size", zoo_size, "models to train when --zoo is not given")->capture_default_str();
  probe->add_option("--k", pc.k, "probe heads per class")->capture_default_str();
  probe->add_option("--probe-width", probe_width, "hidden width of the probe family")->capture_default_str();
  probe->add_option("--probe-seeds", probe_seeds, "probe repetitions")->capture_default_str();
  probe->add_option("--labeling", probe_labeling, "base_expansion | random")->capture_default_str();
  probe->add_option("--threshold", threshold, "maximum train loss of a probed model")->capture_default_str();
  probe_data.add(probe);
  zoo_budget.add(probe, "zoo-");
  probe_budget.add(probe, "probe-");

  auto* orc = app.add_subcommand("oracle", "exact checks on a finite problem");
  std::string problem_path, channel = "z_star";
  std::vector<std::string> checks{"theorem1", "prop2"};
  std::size_t draws = 200, M = 16, K = 3;
  double delta = 0.1, pac_beta = 1.0;
  orc->add_option("--problem", problem_path, "problem file")->required();
  orc->add_option("--check", checks, "theorem1,prop2,pac")->delimiter(',');
  orc->add_option("--draws", draws, "sampled datasets (pac)")->capture_default_str();
  orc->add_option("--M", M, "examples per sampled dataset (pac)")->capture_default_str();
  orc->add_option("--delta", delta, "confidence (pac)")->capture_default_str();
  orc->add_option("--beta", pac_beta, "minimality weight (pac)")->capture_default_str();
  orc->add_option("--K", K, "labelings per class (pac)")->capture_default_str();
  orc->add_option("--channel", channel, "z_star | split | tilted | noise | identity (pac)")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "beta x seed x family grid");
  TrainOpts sweep_opts;
  std::vector<double> betas{0.0, 0.1, 1.0, 10.0, 100.0};
  std::size_t n_seeds = 3;
  std::vector<std::size_t> family_widths;
  double gamma = 0.1;
  BudgetOpts sweep_budget(desk_downstream_budget());
  sweep->add_option("--beta", betas, "betas")->delimiter(',');
  sweep->add_option("--seeds", n_seeds, "seeds per beta (seed, seed+1, ...)")->capture_default_str();
  sweep->add_option("--family-widths", family_widths, "hidden widths of the family V")->delimiter(',');
  sweep->add_option("--gamma", gamma, "worst-ERM ascent weight")->capture_default_str();
  sweep_data.add(sweep);
  sweep_opts.add(sweep, false);
  sweep_budget.add(sweep, "erm-");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) cmd_data_gen(g, gen_data);
    else if (*train) cmd_train(g, train_data, train_opts);
    else if (*down) cmd_downstream(g, down_data, ckpt, mode, gammas, down_width, family_text, down_budget.budget);
    else if (*probe) {
      pc.budget = probe_budget.budget;
      cmd_probe(g, probe_data, zoo_dir, zoo_size, zoo_budget.budget, pc, probe_width, probe_seeds, probe_labeling,
                threshold);
    } else if (*orc) return cmd_oracle(g, problem_path, checks, draws, M, delta, pac_beta, K, channel);
    else if (*sweep) cmd_sweep(g, sweep_data, sweep_opts, betas, n_seeds, family_widths, gamma, sweep_budget.budget);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
