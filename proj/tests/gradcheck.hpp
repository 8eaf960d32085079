#pragma once

// Central finite-difference gradient checks shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dib/autodiff.hpp"

namespace gradcheck {

using dib::Tensor;
using dib::ad::Var;
using Builder = std::function<Var(const std::vector<Var>&)>;

struct Case {
  std::string name;
  // Fresh random inputs for one instance.
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  // Builds the primitive under test from the inputs; may capture fixed data drawn in make_builder.
  std::function<Builder(std::mt19937_64&)> make_builder;
  // Analytic gradient is expected to equal factor * numeric gradient (gradient reversal uses -scale).
  double factor = 1.0;
};

inline Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, sd);
  for (double& v : t.data) v = nd(rng);
  return t;
}

/// Norm-wise relative error ||a - n||_inf / max(||a||_inf, ||n||_inf) of one
/// random instance, with L = sum(r * P(x)) for a random fixed r.
inline double relative_error(const Case& c, std::mt19937_64& rng, double h = 1e-5) {
  const auto xs = c.inputs(rng);
  const Builder build = c.make_builder(rng);

  std::vector<Var> params;
  for (const auto& x : xs) params.push_back(dib::ad::parameter(x));
  const Var out = build(params);
  const Tensor r = randn(out->value.shape, rng);
  auto weighted = [&](const Tensor& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += r.data[i] * v.data[i];
    return s;
  };
  auto loss_at = [&](const std::vector<Tensor>& vals) {
    std::vector<Var> ps;
    for (const auto& v : vals) ps.push_back(dib::ad::constant(v));
    return weighted(build(ps)->value);
  };
  const Var root = dib::ad::sum(dib::ad::mul(out, dib::ad::constant(r)));
  dib::ad::backward(root);

  double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
  std::vector<Tensor> vals = xs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = vals[k].data[i];
      vals[k].data[i] = orig + h;
      const double up = loss_at(vals);
      vals[k].data[i] = orig - h;
      const double down = loss_at(vals);
      vals[k].data[i] = orig;
      const double numeric = c.factor * (up - down) / (2.0 * h);
      const double analytic = params[k]->grad.data[i];
      max_diff = std::max(max_diff, std::abs(analytic - numeric));
      max_a = std::max(max_a, std::abs(analytic));
      max_n = std::max(max_n, std::abs(numeric));
    }
  }
  const double scale = std::max(max_a, max_n);
  return scale < 1e-12 ? max_diff : max_diff / scale;
}

/// Keeps entries away from the leaky_relu kink.
inline Tensor away_from_zero(Tensor t, double margin = 1e-2) {
  for (double& v : t.data) {
    if (std::abs(v) < margin) v = v < 0 ? -margin - std::abs(v) : margin + std::abs(v);
  }
  return t;
}

inline std::vector<Case> primitive_cases() {
  namespace ad = dib::ad;
  using Rng = std::mt19937_64;
  auto none = [](Builder b) { return [b](Rng&) { return b; }; };
  std::vector<Case> cs;

  cs.push_back({"matmul", [](Rng& g) { return std::vector<Tensor>{randn({3, 4}, g), randn({4, 2}, g)}; },
                none([](const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); })});
  cs.push_back({"add_bias", [](Rng& g) { return std::vector<Tensor>{randn({3, 4}, g), randn({4}, g)}; },
                none([](const std::vector<Var>& v) { return ad::add_bias(v[0], v[1]); })});
  cs.push_back({"add", [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g), randn({3, 2}, g)}; },
                none([](const std::vector<Var>& v) { return ad::add(v[0], v[1]); })});
  cs.push_back({"mul", [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g), randn({3, 2}, g)}; },
                none([](const std::vector<Var>& v) { return ad::mul(v[0], v[1]); })});
  cs.push_back({"scale", [](Rng& g) { return std::vector<Tensor>{randn({2, 3}, g)}; },
                none([](const std::vector<Var>& v) { return ad::scale(v[0], -1.7); })});
  cs.push_back({"slice_cols", [](Rng& g) { return std::vector<Tensor>{randn({3, 5}, g)}; },
                none([](const std::vector<Var>& v) { return ad::slice_cols(v[0], 1, 4); })});
  cs.push_back({"gather_rows", [](Rng& g) { return std::vector<Tensor>{randn({4, 3}, g)}; },
                none([](const std::vector<Var>& v) { return ad::gather_rows(v[0], {2, 0, 2, 3}); })});
  cs.push_back({"leaky_relu", [](Rng& g) { return std::vector<Tensor>{away_from_zero(randn({4, 3}, g))}; },
                none([](const std::vector<Var>& v) { return ad::leaky_relu(v[0]); })});
  cs.push_back({"sum", [](Rng& g) { return std::vector<Tensor>{randn({3, 3}, g)}; },
                none([](const std::vector<Var>& v) { return ad::sum(v[0]); })});
  cs.push_back({"mean", [](Rng& g) { return std::vector<Tensor>{randn({3, 3}, g)}; },
                none([](const std::vector<Var>& v) { return ad::mean(v[0]); })});
  cs.push_back({"softmax_logloss", [](Rng& g) { return std::vector<Tensor>{randn({5, 4}, g, 2.0)}; },
                [](Rng& g) -> Builder {
                  std::vector<int> t(5);
                  std::vector<double> w(5);
                  std::uniform_int_distribution<int> pick(0, 3);
                  std::uniform_real_distribution<double> uw(-1.0, 2.0);
                  for (auto& x : t) x = pick(g);
                  for (auto& x : w) x = uw(g);
                  return [t, w](const std::vector<Var>& v) { return ad::softmax_logloss(v[0], t, w); };
                }});
  cs.push_back({"gradient_reversal", [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g)}; },
                none([](const std::vector<Var>& v) { return ad::gradient_reversal(v[0], 0.75); }), -0.75});
  cs.push_back({"batchnorm_noaffine", [](Rng& g) { return std::vector<Tensor>{randn({5, 3}, g)}; },
                none([](const std::vector<Var>& v) { return ad::batchnorm_noaffine(v[0]); })});
  cs.push_back({"gaussian_reparam",
                [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g), randn({3, 2}, g, 2.0)}; },
                [](Rng& g) -> Builder {
                  Tensor noise = randn({3, 2}, g);
                  return [noise](const std::vector<Var>& v) { return ad::gaussian_reparam(v[0], v[1], noise); };
                }});
  cs.push_back({"dropout", [](Rng& g) { return std::vector<Tensor>{randn({4, 3}, g)}; },
                [](Rng& g) -> Builder {
                  Tensor mask = ad::bernoulli_keep_mask({4, 3}, 0.5, g);
                  return [mask](const std::vector<Var>& v) { return ad::dropout(v[0], mask, 0.5); };
                }});
  cs.push_back({"l2_penalty", [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g), randn({2}, g)}; },
                none([](const std::vector<Var>& v) { return ad::l2_penalty({v[0], v[1]}); })});
  cs.push_back({"vib_kl", [](Rng& g) { return std::vector<Tensor>{randn({3, 2}, g), randn({3, 2}, g, 2.0)}; },
                none([](const std::vector<Var>& v) { return ad::vib_kl(v[0], v[1]); })});
  return cs;
}

}  // namespace gradcheck
