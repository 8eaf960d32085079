#include <gtest/gtest.h>

#include <cmath>

#include "dib/dib.hpp"
#include "dib/oracle.hpp"
#include "gradcheck.hpp"

using namespace dib;

namespace {

FamilySpec small_head(std::size_t width = 16) {
  FamilySpec f;
  f.hidden_widths = {width};
  return f;
}

EncoderSpec small_encoder() {
  EncoderSpec e;
  e.hidden_widths = {16};
  e.z_dim = 4;
  e.n_eval_samples = 3;
  return e;
}

DibConfig small_cfg(double beta) {
  DibConfig c;
  c.beta = beta;
  c.k_heads = 2;
  c.head_spec = small_head(8);
  return c;
}

OptimConfig short_opt(int epochs) {
  OptimConfig o;
  o.epochs = epochs;
  o.lr = 1e-3;
  o.batch_size = 32;
  o.eval_every = 1;
  o.report_budget = {10, 1e-2, 64};
  return o;
}

std::vector<double> encoder_grads(const DibModel& m) {
  std::vector<double> g;
  for (const auto& p : m.encoder.parameters()) g.insert(g.end(), p->grad.data.begin(), p->grad.data.end());
  return g;
}

void zero_all(const DibModel& m) {
  ad::zero_grad(m.encoder_side_params());
  ad::zero_grad(m.head_params());
}

DibBatch make_batch(std::size_t n, std::size_t dim, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DibBatch b;
  b.x = gradcheck::randn({n, dim}, rng);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(int(i % 2));
  b.digits.assign(k, {});
  for (auto& col : b.digits) {
    for (std::size_t i = 0; i < n; ++i) col.push_back(coin(rng) ? 1 : 0);
  }
  return b;
}

}  // namespace

TEST(EmpiricalVEntropy, ConstantTargetsNearZero) {
  std::mt19937_64 rng(1);
  Tensor z = gradcheck::randn({100, 4}, rng);
  std::vector<int> t(100, 1);
  EXPECT_LE(empirical_v_entropy(small_head(), z, t, {50, 1e-2, 64}, 3), 0.01);
  EXPECT_LE(empirical_v_entropy(small_head(), z, t, {50, 1e-2, 64}, 3, false), 0.01);
}

TEST(EmpiricalVEntropy, IndependentTargetsNearLn2) {
  std::mt19937_64 rng(2);
  Tensor z = gradcheck::randn({400, 4}, rng);
  std::vector<int> t;
  for (int i = 0; i < 400; ++i) t.push_back(i % 2);
  const double h = empirical_v_entropy(small_head(), z, t, {30, 1e-3, 64}, 4, false);
  EXPECT_NEAR(h, std::log(2.0), 0.05);
}

TEST(EmpiricalVEntropy, TabularMatchesExactOracle) {
  // Six symbols, three labels; the sample's empirical joint is the oracle's joint.
  const std::vector<std::vector<int>> counts{{3, 1, 0}, {0, 2, 2}, {5, 0, 1}, {1, 1, 1}, {0, 0, 4}, {2, 3, 0}};
  Tensor z = Tensor::matrix(26, 1);
  std::vector<int> t;
  std::size_t row = 0;
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (int k = 0; k < counts[a][c]; ++k) {
        z(row++, 0) = double(a);
        t.push_back(int(c));
      }
    }
  }
  FamilySpec spec;
  spec.kind = FamilyKind::tabular;
  spec.output_classes = 3;
  spec.tabular_alphabet = 6;
  spec.grid_resolution = 0.1;
  Tensor joint = Tensor::matrix(3, 6);
  std::vector<double> marg(3, 0.0);
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t c = 0; c < 3; ++c) {
      joint(c, a) = counts[a][c] / 26.0;
      marg[c] += counts[a][c] / 26.0;
    }
  }
  auto fam = oracle::TabularFamily::grid(3, 0.1);
  fam.add_candidate(marg);
  EXPECT_NEAR(empirical_v_entropy(spec, z, t, {}, 0), oracle::exact_v_entropy(joint, fam), 1e-6);
}

TEST(DibLoss, BetaZeroGivesPureSufficiencyGradient) {
  EncoderSpec es = small_encoder();
  es.input_dim = 5;
  auto cfg = small_cfg(0.0);
  auto m = init_dib_model(es, cfg, 2, 7);
  const auto b = make_batch(12, 5, 2, 3);
  Rng r1(11);
  auto L = dib_loss(m, b, cfg, r1);
  zero_all(m);
  ad::backward(L.total);
  const auto g_dib = encoder_grads(m);

  Rng r2(11);
  auto enc = m.encoder.forward(ad::constant(b.x), r2, true);
  auto suff = ad::softmax_logloss(m.suff_head.logits(enc.z, true, &r2), b.y);
  zero_all(m);
  ad::backward(suff);
  EXPECT_EQ(g_dib, encoder_grads(m));
  EXPECT_DOUBLE_EQ(L.objective, L.l_suff);
}

TEST(DibLoss, ReversedHeadGradientIsScaledAndNegated) {
  for (bool share : {true, false}) {
    EncoderSpec es = small_encoder();
    es.input_dim = 5;
    auto cfg = small_cfg(3.0);
    cfg.share_heads = share;
    auto m = init_dib_model(es, cfg, 2, 9);
    const auto b = make_batch(16, 5, 2, 4);
    const double s = cfg.reversal_scale(2);
    EXPECT_DOUBLE_EQ(s, share ? 1.5 : 0.75);

    Rng r1(5);
    auto L = dib_loss(m, b, cfg, r1);
    zero_all(m);
    ad::backward(L.total);
    const auto g_all = encoder_grads(m);

    Rng r2(5);
    auto enc = m.encoder.forward(ad::constant(b.x), r2, true);
    auto suff = ad::softmax_logloss(m.suff_head.logits(enc.z, true, &r2), b.y);
    zero_all(m);
    ad::backward(suff);
    const auto g_suff = encoder_grads(m);

    Rng r3(5);
    auto enc3 = m.encoder.forward(ad::constant(b.x), r3, true);
    ad::softmax_logloss(m.suff_head.logits(enc3.z, true, &r3), b.y);
    auto heads = minimality_loss(m, enc3.z, b, cfg, r3);
    zero_all(m);
    ad::backward(heads.sum);
    const auto g_head = encoder_grads(m);

    ASSERT_EQ(g_all.size(), g_head.size());
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < g_all.size(); ++i) {
      worst = std::max(worst, std::abs(g_all[i] - (g_suff[i] - s * g_head[i])));
      scale = std::max(scale, std::abs(g_head[i]));
    }
    EXPECT_GT(scale, 0.0);
    EXPECT_LT(worst, 1e-12);
  }
}

TEST(DibLoss, HeadsDescendTheirOwnLoss) {
  // Through the reversal the heads still receive the plain gradient of their loss.
  EncoderSpec es = small_encoder();
  es.input_dim = 5;
  auto cfg = small_cfg(2.0);
  auto m = init_dib_model(es, cfg, 2, 1);
  const auto b = make_batch(16, 5, 2, 2);
  Rng r1(8);
  auto L = dib_loss(m, b, cfg, r1);
  zero_all(m);
  ad::backward(L.total);
  std::vector<double> g1;
  for (const auto& p : m.head_params()) g1.insert(g1.end(), p->grad.data.begin(), p->grad.data.end());
  Rng r2(8);
  auto enc = m.encoder.forward(ad::constant(b.x), r2, true);
  ad::softmax_logloss(m.suff_head.logits(enc.z, true, &r2), b.y);
  auto heads = minimality_loss(m, ad::constant(enc.z->value), b, cfg, r2);
  zero_all(m);
  ad::backward(heads.sum);
  std::vector<double> g2;
  for (const auto& p : m.head_params()) g2.insert(g2.end(), p->grad.data.begin(), p->grad.data.end());
  EXPECT_EQ(g1, g2);
}

TEST(DibConfig, ValidationAndDefaults) {
  DibConfig c;
  EXPECT_EQ(c.k_heads, 4u);
  EXPECT_EQ(c.n_inner, 5);
  EXPECT_EQ(c.head_lr_multiplier, 50.0);
  EXPECT_TRUE(c.share_heads);
  EXPECT_EQ(c.labeling, LabelingMode::base_expansion);
  OptimConfig o;
  EXPECT_EQ(o.lr, 5e-5);
  EXPECT_EQ(o.batch_size, 256u);
  EXPECT_NEAR(std::pow(o.decay, 300), 0.01, 1e-12);
  c.strategy = Strategy::unrolled;
  c.n_inner = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.n_inner = 5;
  c.beta = -1;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.beta = 10;
  const auto back = DibConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Regularizer, ParseApplyAndPenalties) {
  EXPECT_THROW(Regularizer::parse("dropout:1.0"), ArgumentError);
  EXPECT_THROW(Regularizer::parse("weight_decay:-1"), ArgumentError);
  EXPECT_THROW(Regularizer::parse("magic"), ArgumentError);
  EXPECT_EQ(Regularizer::parse("dropout").value, 0.5);
  EncoderSpec e = small_encoder();
  Regularizer::parse("none").apply(e);
  EXPECT_FALSE(e.stochastic);
  EXPECT_THROW(Regularizer::parse("vib:1").apply(e), ArgumentError);
  EncoderSpec d = small_encoder();
  Regularizer::parse("dropout:0.5").apply(d);
  EXPECT_EQ(d.dropout_rate, 0.5);

  // KL at mu = 0, sigma = 1 is 0; at mu = 1, sigma = 1 it is 0.5 per dimension.
  const double raw = ad::kSigmaShift + std::log(std::exp(1.0) - 1.0);
  auto sr = ad::constant(Tensor({2, 3}, raw));
  EXPECT_NEAR(ad::vib_kl(ad::constant(Tensor({2, 3}, 0.0)), sr)->value.item(), 0.0, 1e-12);
  EXPECT_NEAR(ad::vib_kl(ad::constant(Tensor({2, 3}, 1.0)), sr)->value.item(), 1.5, 1e-12);
}

TEST(TrainEncoder, DeterministicPerSeed) {
  const auto ds = make_prototype_dataset(40, 2, 6, 0.3, 1);
  const auto a = train_encoder(ds, small_encoder(), small_cfg(1.0), short_opt(3), 5);
  const auto b = train_encoder(ds, small_encoder(), small_cfg(1.0), short_opt(3), 5);
  const auto c = train_encoder(ds, small_encoder(), small_cfg(1.0), short_opt(3), 6);
  EXPECT_EQ(a.report.to_csv(), b.report.to_csv());
  EXPECT_EQ(a.report.to_json().dump(), b.report.to_json().dump());
  EXPECT_NE(a.report.to_csv(), c.report.to_csv());
  EXPECT_EQ(a.report.epochs.size(), 3u);
  EXPECT_GE(a.report.minimality, -0.05);
  EXPECT_EQ(a.report.config_hash, b.report.config_hash);
  EXPECT_EQ(a.report.config_hash.size(), 16u);
}

TEST(TrainEncoder, CheckpointIsLowestTrainingLossEpoch) {
  const auto ds = make_prototype_dataset(40, 2, 6, 0.3, 2);
  const auto r = train_encoder(ds, small_encoder(), small_cfg(0.5), short_opt(6), 3);
  double best = 1e300;
  int at = 0;
  for (const auto& e : r.report.epochs) {
    if (e.suff_loss < best) {
      best = e.suff_loss;
      at = e.epoch;
    }
  }
  EXPECT_EQ(r.report.best_epoch, at);
  EXPECT_TRUE(std::isfinite(r.report.train.log_loss));
}

TEST(TrainEncoder, BetaZeroIgnoresMinimalityHeads) {
  // Heads are detached at beta = 0, so the encoder trajectory cannot depend on K.
  const auto ds = make_prototype_dataset(40, 2, 6, 0.3, 3);
  auto c1 = small_cfg(0.0);
  c1.k_heads = 1;
  auto c4 = small_cfg(0.0);
  c4.k_heads = 4;
  auto o = short_opt(3);
  o.report_minimality = false;
  const auto a = train_encoder(ds, small_encoder(), c1, o, 4);
  const auto b = train_encoder(ds, small_encoder(), c4, o, 4);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.report.epochs[i].suff_loss, b.report.epochs[i].suff_loss);
    EXPECT_EQ(a.report.epochs[i].train_risk, b.report.epochs[i].train_risk);
  }
}

TEST(TrainEncoder, UnrolledStrategyTrains) {
  const auto ds = make_prototype_dataset(40, 2, 6, 0.3, 4);
  auto cfg = small_cfg(1.0);
  cfg.strategy = Strategy::unrolled;
  auto o = short_opt(4);
  const auto r = train_encoder(ds, small_encoder(), cfg, o, 1);
  EXPECT_LT(r.report.epochs.back().suff_loss, r.report.epochs.front().suff_loss);
  EXPECT_TRUE(std::isfinite(r.report.minimality));
}

TEST(TrainEncoder, PerClassHeadsAndRandomLabelings) {
  const auto ds = make_prototype_dataset(30, 3, 6, 0.3, 5);
  auto cfg = small_cfg(1.0);
  cfg.share_heads = false;
  cfg.labeling = LabelingMode::random;
  const auto r = train_encoder(ds, small_encoder(), cfg, short_opt(2), 1);
  EXPECT_EQ(r.model.min_heads.size(), 6u);
  EXPECT_TRUE(std::isfinite(r.report.epochs.back().min_loss));
}

TEST(TrainEncoder, TooFewDigitsForHeads) {
  const auto ds = make_prototype_dataset(4, 2, 6, 0.3, 5);
  auto cfg = small_cfg(1.0);
  cfg.k_heads = 4;  // two train examples per class give a single binary digit
  EXPECT_THROW(train_encoder(ds, small_encoder(), cfg, short_opt(1), 1), ArgumentError);
}

TEST(TrainEncoder, BaselinesRun) {
  const auto ds = make_prototype_dataset(30, 2, 6, 0.3, 6);
  auto o = short_opt(2);
  o.report_minimality = false;
  for (const char* reg : {"none", "dropout:0.5", "weight_decay:1e-3", "vib:1e-2"}) {
    auto cfg = small_cfg(0.0);
    cfg.baseline = Regularizer::parse(reg);
    const auto r = train_encoder(ds, small_encoder(), cfg, o, 2);
    EXPECT_TRUE(std::isfinite(r.report.train.log_loss)) << reg;
  }
}

TEST(Downstream, GammaZeroWorstEqualsAverage) {
  const auto ds = make_prototype_dataset(30, 2, 6, 0.3, 7);
  const auto enc = train_encoder(ds, small_encoder(), small_cfg(0.0), short_opt(2), 1).model.encoder;
  const FitBudget b{20, 1e-2, 32};
  const auto avg = train_downstream_erm(enc, small_head(), ds, ErmMode::average, 0.0, b, 3);
  const auto worst = train_downstream_erm(enc, small_head(), ds, ErmMode::worst, 0.0, b, 3);
  EXPECT_EQ(avg.train.log_loss, worst.train.log_loss);
  EXPECT_EQ(avg.test.log_loss, worst.test.log_loss);
  const auto ascend = train_downstream_erm(enc, small_head(), ds, ErmMode::worst, 0.5, b, 3);
  EXPECT_GT(ascend.test.log_loss, avg.test.log_loss);
}

TEST(Downstream, DecodabilityOfDistractor) {
  const auto base = make_prototype_dataset(60, 2, 6, 0.3, 8);
  const auto ds = make_distractor_dataset(base, 3, 1.0, 8);
  const auto enc = train_encoder(ds, small_encoder(), small_cfg(0.0), short_opt(1), 1).model.encoder;
  const auto r = decodability(enc, small_head(), ds, ds.distractor_labels, 3, {20, 1e-2, 32}, 2);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  EXPECT_THROW(decodability(enc, small_head(), ds, std::vector<int>(3, 0), 3, {1, 1e-2, 32}, 2), DimensionError);
}

TEST(EstimateDecInformation, DecodableDigitsGiveLn2) {
  // z is the one-hot within-class index: every digit is a deterministic function of z.
  std::vector<int> labels;
  for (int i = 0; i < 32; ++i) labels.push_back(i % 2);
  Tensor z = Tensor::matrix(32, 16);
  for (std::size_t i = 0; i < 32; ++i) z(i, i / 2) = 1.0;
  const auto est = estimate_dec_information({z}, labels, 2, small_head(32), LabelingMode::base_expansion, 4,
                                            {300, 1e-2, 64}, 1);
  EXPECT_NEAR(est.mean, std::log(2.0), 0.05);
  EXPECT_EQ(est.per_head.size(), 8u);
}
