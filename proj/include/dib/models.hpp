#pragma once

// Predictive families and the stochastic encoder.
//
// A family V is "every parameter setting of one MLP architecture" (kind mlp)
// or a product of per-symbol predictors drawn from a simplex grid (kind
// tabular, used for exact enumeration on finite spaces).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dib/autodiff.hpp"
#include "dib/errors.hpp"
#include "dib/tensor.hpp"

namespace dib {

enum class FamilyKind { mlp, tabular };

struct FamilySpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_widths;
  std::size_t output_classes = 2;
  double dropout_rate = 0.0;
  FamilyKind kind = FamilyKind::mlp;
  // tabular only: number of input symbols and the simplex grid step.
  std::size_t tabular_alphabet = 0;
  double grid_resolution = 0.05;

  void validate() const {
    if (output_classes == 0) throw ArgumentError("family needs at least one output class");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ArgumentError("dropout rate must lie in [0, 1)");
    if (kind == FamilyKind::tabular) {
      if (tabular_alphabet == 0) throw ArgumentError("tabular family requires a finite input alphabet");
      return;
    }
    if (input_dim == 0) throw ArgumentError("family input_dim must be positive");
    for (auto w : hidden_widths) {
      if (w == 0) throw ArgumentError("hidden widths must be positive");
    }
  }

  /// Weights and biases of the MLP realization.
  std::size_t parameter_count() const {
    std::size_t total = 0, fan_in = input_dim;
    for (auto w : hidden_widths) {
      total += fan_in * w + w;
      fan_in = w;
    }
    return total + fan_in * output_classes + output_classes;
  }

  /// Same depth and every hidden width <= other's: this family is nested in other.
  bool nested_in(const FamilySpec& other) const {
    if (kind != other.kind || input_dim != other.input_dim || output_classes != other.output_classes ||
        hidden_widths.size() != other.hidden_widths.size()) {
      return false;
    }
    for (std::size_t i = 0; i < hidden_widths.size(); ++i) {
      if (hidden_widths[i] > other.hidden_widths[i]) return false;
    }
    return true;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "kind=" << (kind == FamilyKind::mlp ? "mlp" : "tabular") << ";input_dim=" << input_dim
       << ";hidden=";
    for (std::size_t i = 0; i < hidden_widths.size(); ++i) os << (i ? "," : "") << hidden_widths[i];
    os << ";classes=" << output_classes << ";dropout=" << dropout_rate;
    if (kind == FamilyKind::tabular) os << ";alphabet=" << tabular_alphabet << ";grid=" << grid_resolution;
    return os.str();
  }

  static FamilySpec from_text(const std::string& text) {
    FamilySpec s;
    std::istringstream is(text);
    std::string field;
    while (std::getline(is, field, ';')) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw ParseError("family field without '=': " + field);
      const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
      try {
        if (key == "kind") {
          if (val == "mlp") s.kind = FamilyKind::mlp;
          else if (val == "tabular") s.kind = FamilyKind::tabular;
          else throw ParseError("unknown family kind " + val);
        } else if (key == "input_dim") s.input_dim = std::stoul(val);
        else if (key == "hidden") {
          s.hidden_widths.clear();
          std::istringstream ws(val);
          std::string w;
          while (std::getline(ws, w, ',')) {
            if (!w.empty()) s.hidden_widths.push_back(std::stoul(w));
          }
        } else if (key == "classes") s.output_classes = std::stoul(val);
        else if (key == "dropout") s.dropout_rate = std::stod(val);
        else if (key == "alphabet") s.tabular_alphabet = std::stoul(val);
        else if (key == "grid") s.grid_resolution = std::stod(val);
        else throw ParseError("unknown family field " + key);
      } catch (const std::logic_error&) {
        throw ParseError("bad value for family field " + key + ": " + val);
      }
    }
    s.validate();
    return s;
  }

  bool operator==(const FamilySpec&) const = default;
};

/// Copies of base whose hidden layers all have the given width, in order.
/// Earlier entries are the smaller families.
inline std::vector<FamilySpec> family_sweep(const FamilySpec& base, const std::vector<std::size_t>& widths) {
  for (std::size_t i = 1; i < widths.size(); ++i) {
    if (widths[i] <= widths[i - 1]) throw ArgumentError("family_sweep widths must be strictly increasing");
  }
  std::vector<FamilySpec> out;
  const std::size_t depth = std::max<std::size_t>(1, base.hidden_widths.size());
  for (auto w : widths) {
    FamilySpec s = base;
    s.hidden_widths.assign(depth, w);
    s.validate();
    out.push_back(s);
  }
  return out;
}

/// All probability vectors over n classes whose entries are multiples of
/// resolution. Always contains the simplex vertices.
inline std::vector<std::vector<double>> simplex_grid(std::size_t n_classes, double resolution) {
  if (n_classes == 0) throw ArgumentError("simplex_grid needs at least one class");
  const double inv = 1.0 / resolution;
  const long steps = std::lround(inv);
  if (!(resolution > 0.0) || steps < 1 || std::abs(inv - static_cast<double>(steps)) > 1e-9) {
    throw ArgumentError("grid resolution must divide 1 exactly");
  }
  std::vector<std::vector<double>> out;
  std::vector<long> parts(n_classes, 0);
  // Enumerate compositions of `steps` into n_classes non-negative parts.
  auto rec = [&](auto&& self, std::size_t pos, long remaining) -> void {
    if (pos + 1 == n_classes) {
      parts[pos] = remaining;
      std::vector<double> p(n_classes);
      for (std::size_t i = 0; i < n_classes; ++i) p[i] = static_cast<double>(parts[i]) / static_cast<double>(steps);
      out.push_back(std::move(p));
      return;
    }
    for (long k = 0; k <= remaining; ++k) {
      parts[pos] = k;
      self(self, pos + 1, remaining - k);
    }
  };
  rec(rec, 0, steps);
  return out;
}

// ---------------------------------------------------------------------------
// MLP classifier
// ---------------------------------------------------------------------------

struct Layer {
  ad::Var weight;  // [fan_in x fan_out]
  ad::Var bias;    // [fan_out]
};

namespace detail {

inline std::vector<Layer> init_layers(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                      std::size_t outputs, Rng& rng) {
  std::vector<Layer> layers;
  std::size_t fan_in = input_dim;
  auto push = [&](std::size_t fan_out) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor w = Tensor::matrix(fan_in, fan_out);
    for (double& v : w.data) v = nd(rng);
    layers.push_back({ad::parameter(std::move(w)), ad::parameter(Tensor({fan_out}, 0.0))});
    fan_in = fan_out;
  };
  for (auto h : hidden) push(h);
  push(outputs);
  return layers;
}

/// Hidden layers use LeakyReLU and (train-time) dropout; the last layer is linear.
inline ad::Var mlp_forward(const std::vector<Layer>& layers, ad::Var h, double dropout_rate, bool train,
                           Rng* rng) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = ad::add_bias(ad::matmul(h, layers[l].weight), layers[l].bias);
    if (l + 1 < layers.size()) {
      h = ad::leaky_relu(h);
      if (train && dropout_rate > 0.0) {
        if (!rng) throw ArgumentError("train-mode dropout needs a random generator");
        h = ad::dropout(h, dropout_rate, *rng);
      }
    }
  }
  return h;
}

inline std::vector<ad::Var> layer_params(const std::vector<Layer>& layers) {
  std::vector<ad::Var> ps;
  for (const auto& l : layers) {
    ps.push_back(l.weight);
    ps.push_back(l.bias);
  }
  return ps;
}

}  // namespace detail

/// A member f of an MLP family: forward(z) parametrizes f[z] through a softmax.
class Classifier {
 public:
  Classifier() = default;
  Classifier(FamilySpec spec, std::vector<Layer> layers, std::uint64_t seed)
      : spec_(std::move(spec)), layers_(std::move(layers)), seed_(seed) {}

  const FamilySpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Layer>& layers() const { return layers_; }

  ad::Var logits(const ad::Var& z, bool train = false, Rng* rng = nullptr) const {
    check_input(z->value);
    return detail::mlp_forward(layers_, z, spec_.dropout_rate, train, rng);
  }

  std::vector<ad::Var> parameters() const { return detail::layer_params(layers_); }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> s;
    for (const auto& p : parameters()) s.push_back(p->value);
    return s;
  }

  void restore(const std::vector<Tensor>& values) {
    auto ps = parameters();
    if (values.size() != ps.size()) throw DimensionError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!values[i].same_shape(ps[i]->value)) throw DimensionError("restore: parameter shape mismatch");
      ps[i]->value = values[i];
    }
  }

  void check_input(const Tensor& z) const {
    if (z.rank() != 2 || z.cols() != spec_.input_dim) {
      throw DimensionError("classifier expects [B x " + std::to_string(spec_.input_dim) + "] input, got " +
                           shape_str(z.shape));
    }
  }

 private:
  FamilySpec spec_;
  std::vector<Layer> layers_;
  std::uint64_t seed_ = 0;
};

/// Weights ~ N(0, 2/fan_in), biases 0. Identical seeds give identical parameters.
inline Classifier init_classifier(const FamilySpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.kind != FamilyKind::mlp) throw ArgumentError("init_classifier needs an mlp family");
  Rng rng(seed);
  return Classifier(spec, detail::init_layers(spec.input_dim, spec.hidden_widths, spec.output_classes, rng),
                    seed);
}

/// Row-stochastic predictions f[z]. Dropout is applied only in train mode,
/// with masks drawn from dropout_seed.
inline Tensor predict(const Classifier& c, const Tensor& z, bool train_mode = false,
                      std::uint64_t dropout_seed = 0) {
  Rng rng(dropout_seed);
  auto out = c.logits(ad::constant(z), train_mode, &rng);
  return ad::softmax_rows(out->value);
}

// ---------------------------------------------------------------------------
// Encoder P(Z|X)
// ---------------------------------------------------------------------------

struct EncoderSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_widths{64, 64, 64};
  std::size_t z_dim = 16;
  bool stochastic = true;   // Gaussian head; false emits the mean only
  bool normalize = true;    // batchnorm_noaffine on every sample
  double dropout_rate = 0.0;
  int n_eval_samples = 12;

  FamilySpec body() const {
    FamilySpec f;
    f.input_dim = input_dim;
    f.hidden_widths = hidden_widths;
    f.output_classes = stochastic ? 2 * z_dim : z_dim;
    f.dropout_rate = dropout_rate;
    return f;
  }

  void validate() const {
    if (z_dim == 0) throw ArgumentError("z_dim must be positive");
    if (n_eval_samples < 1) throw ArgumentError("n_eval_samples must be >= 1");
    body().validate();
  }

  std::string to_text() const {
    std::ostringstream os;
    os << body().to_text() << ";z_dim=" << z_dim << ";stochastic=" << stochastic << ";normalize=" << normalize
       << ";eval_samples=" << n_eval_samples;
    return os.str();
  }

  static EncoderSpec from_text(const std::string& text) {
    EncoderSpec e;
    std::string fam;
    std::istringstream is(text);
    std::string field;
    while (std::getline(is, field, ';')) {
      const auto eq = field.find('=');
      const std::string key = field.substr(0, eq);
      const std::string val = eq == std::string::npos ? "" : field.substr(eq + 1);
      try {
        if (key == "z_dim") e.z_dim = std::stoul(val);
        else if (key == "stochastic") e.stochastic = val == "1";
        else if (key == "normalize") e.normalize = val == "1";
        else if (key == "eval_samples") e.n_eval_samples = std::stoi(val);
        else fam += (fam.empty() ? "" : ";") + field;
      } catch (const std::logic_error&) {
        throw ParseError("bad value for encoder field " + key + ": " + val);
      }
    }
    const FamilySpec f = FamilySpec::from_text(fam);
    e.input_dim = f.input_dim;
    e.hidden_widths = f.hidden_widths;
    e.dropout_rate = f.dropout_rate;
    const std::size_t expect = e.stochastic ? 2 * e.z_dim : e.z_dim;
    if (f.output_classes != expect) throw ParseError("encoder output width does not match z_dim");
    e.validate();
    return e;
  }
};

class Encoder {
 public:
  struct Output {
    ad::Var mu;
    ad::Var sigma_raw;  // null for deterministic encoders
    ad::Var z;
  };

  Encoder() = default;
  Encoder(EncoderSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    layers_ = detail::init_layers(spec_.input_dim, spec_.hidden_widths, spec_.body().output_classes, rng);
  }

  const EncoderSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }
  std::vector<ad::Var> parameters() const { return detail::layer_params(layers_); }

  /// One z sample per input row, built on the graph so it can be trained.
  Output forward(const ad::Var& x, Rng& rng, bool train) const {
    if (x->value.rank() != 2 || x->value.cols() != spec_.input_dim) {
      throw DimensionError("encoder expects [B x " + std::to_string(spec_.input_dim) + "] input, got " +
                           shape_str(x->value.shape));
    }
    auto head = detail::mlp_forward(layers_, x, spec_.dropout_rate, train, &rng);
    Output out;
    if (spec_.stochastic) {
      out.mu = ad::slice_cols(head, 0, spec_.z_dim);
      out.sigma_raw = ad::slice_cols(head, spec_.z_dim, 2 * spec_.z_dim);
      Tensor noise = out.mu->value.zeros_like();
      std::normal_distribution<double> nd(0.0, 1.0);
      for (double& v : noise.data) v = nd(rng);
      out.z = ad::gaussian_reparam(out.mu, out.sigma_raw, noise);
    } else {
      out.mu = head;
      out.z = head;
    }
    if (spec_.normalize) out.z = ad::batchnorm_noaffine(out.z);
    return out;
  }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> s;
    for (const auto& p : parameters()) s.push_back(p->value);
    return s;
  }

  void restore(const std::vector<Tensor>& values) {
    auto ps = parameters();
    if (values.size() != ps.size()) throw DimensionError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!values[i].same_shape(ps[i]->value)) throw DimensionError("restore: parameter shape mismatch");
      ps[i]->value = values[i];
    }
  }

 private:
  EncoderSpec spec_;
  std::vector<Layer> layers_;
};

/// n_samples draws of Z for every row of x (eval mode: no dropout).
/// Deterministic given seed. Normalization uses the statistics of x's batch.
inline std::vector<Tensor> encode(const Encoder& e, const Tensor& x, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ArgumentError("encode: n_samples must be >= 1");
  Rng rng(seed);
  std::vector<Tensor> out;
  const auto xv = ad::constant(x);
  for (int s = 0; s < n_samples; ++s) out.push_back(e.forward(xv, rng, false).z->value);
  return out;
}

}  // namespace dib
