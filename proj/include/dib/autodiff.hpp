#pragma once

// Minimal reverse-mode differentiation over dense 64-bit tensors.
//
// Every op returns a fresh Node that keeps its parents alive; dropping the
// root frees the whole graph. Parameters are long-lived leaf nodes whose
// gradients accumulate until zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dib/errors.hpp"
#include "dib/tensor.hpp"

namespace dib {

using Rng = std::mt19937_64;

namespace ad {

enum class Op {
  leaf,
  matmul,
  add,
  add_bias,
  mul,
  scale,
  leaky_relu,
  softmax_logloss,
  gradient_reversal,
  batchnorm,
  gaussian_reparam,
  mean,
  sum,
  dropout,
  l2_penalty,
  vib_kl,
  gather_rows,
  slice_cols,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::add_bias: return "add_bias";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::leaky_relu: return "leaky_relu";
    case Op::softmax_logloss: return "softmax_logloss";
    case Op::gradient_reversal: return "gradient_reversal";
    case Op::batchnorm: return "batchnorm_noaffine";
    case Op::gaussian_reparam: return "gaussian_reparam";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::dropout: return "dropout";
    case Op::l2_penalty: return "l2_penalty";
    case Op::vib_kl: return "vib_kl";
    case Op::gather_rows: return "gather_rows";
    case Op::slice_cols: return "slice_cols";
  }
  return "?";
}

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  Op op = Op::leaf;
  std::vector<Var> parents;
  bool requires_grad = false;
  std::function<void(Node&)> backward_fn;
};

/// Lower clamp on log-probabilities, in nats. Keeps every log loss bounded.
inline constexpr double kLogProbClip = 30.0;
inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormEps = 1e-5;
/// Offset applied to the raw scale head: std = softplus(raw - 5).
inline constexpr double kSigmaShift = 5.0;

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->grad = t.zeros_like();
  n->value = std::move(t);
  return n;
}

inline Var parameter(Tensor t) {
  auto n = constant(std::move(t));
  n->requires_grad = true;
  return n;
}

namespace detail {

inline Var make(Tensor value, Op op, std::vector<Var> parents, std::function<void(Node&)> bw) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(op));
  }
  auto n = std::make_shared<Node>();
  n->grad = value.zeros_like();
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p->requires_grad; });
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got shape " + shape_str(t.shape));
  }
}

inline void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

inline double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }
inline double sigmoid(double a) {
  if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  if (B.shape[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(A.shape) + " . " +
                         shape_str(B.shape));
  }
  Tensor C = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return detail::make(std::move(C), Op::matmul, {a, b}, [m, k, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* dC = self.grad.data.data();
    if (na.requires_grad) {
      // dA = dC . B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = nb.value.data.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dC[i * n + j] * brow[j];
          na.grad.data[i * k + p] += acc;
        }
      }
    }
    if (nb.requires_grad) {
      // dB = A^T . dC
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.value.data[i * k + p];
          if (av == 0.0) continue;
          double* gb = nb.grad.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += av * dC[i * n + j];
        }
      }
    }
  });
}

/// x[B x D] + b broadcast over rows; b has D entries.
inline Var add_bias(const Var& x, const Var& b) {
  const Tensor& X = x->value;
  detail::require_matrix(X, "add_bias");
  const std::size_t rows = X.shape[0], cols = X.shape[1];
  if (b->value.size() != cols) {
    throw DimensionError("add_bias: bias has " + std::to_string(b->value.size()) +
                         " entries for " + std::to_string(cols) + " columns");
  }
  Tensor Y = X;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) Y.data[i * cols + j] += b->value.data[j];
  }
  return detail::make(std::move(Y), Op::add_bias, {x, b}, [rows, cols](Node& self) {
    Node& nx = *self.parents[0];
    Node& nb = *self.parents[1];
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        const double g = self.grad.data[i * cols + j];
        if (nx.requires_grad) nx.grad.data[i * cols + j] += g;
        if (nb.requires_grad) nb.grad.data[j] += g;
      }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a->value, b->value, "add");
  Tensor Y = a->value;
  for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] += b->value.data[i];
  return detail::make(std::move(Y), Op::add, {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad.data[i] += self.grad.data[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a->value, b->value, "mul");
  Tensor Y = a->value;
  for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] *= b->value.data[i];
  return detail::make(std::move(Y), Op::mul, {a, b}, [](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad.data[i];
      if (na.requires_grad) na.grad.data[i] += g * nb.value.data[i];
      if (nb.requires_grad) nb.grad.data[i] += g * na.value.data[i];
    }
  });
}

inline Var scale(const Var& x, double c) {
  Tensor Y = x->value;
  for (double& v : Y.data) v *= c;
  return detail::make(std::move(Y), Op::scale, {x}, [c](Node& self) {
    Node& nx = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad.data[i] += c * self.grad.data[i];
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x->value, "slice_cols");
  const std::size_t rows = x->value.shape[0], cols = x->value.shape[1];
  if (begin > end || end > cols) throw DimensionError("slice_cols: range outside matrix");
  const std::size_t w = end - begin;
  Tensor Y = Tensor::matrix(rows, w);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < w; ++j) Y(i, j) = x->value(i, begin + j);
  }
  return detail::make(std::move(Y), Op::slice_cols, {x}, [begin, w, rows](Node& self) {
    Node& nx = *self.parents[0];
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < w; ++j) nx.grad(i, begin + j) += self.grad(i, j);
    }
  });
}

/// Rows of x selected by index (duplicates allowed). Gradients scatter back.
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  detail::require_matrix(x->value, "gather_rows");
  for (std::size_t i : idx) {
    if (i >= x->value.shape[0]) throw IndexError("gather_rows: row index out of range");
  }
  Tensor Y = x->value.gather_rows(idx);
  return detail::make(std::move(Y), Op::gather_rows, {x}, [idx = std::move(idx)](Node& self) {
    Node& nx = *self.parents[0];
    const std::size_t cols = self.value.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < cols; ++j) {
        nx.grad.data[idx[r] * cols + j] += self.grad.data[r * cols + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

/// max(x, slope*x). At exactly 0 the positive-branch derivative (1) is used.
inline Var leaky_relu(const Var& x, double slope = kLeakySlope) {
  Tensor Y = x->value;
  for (double& v : Y.data) v = v >= 0.0 ? v : slope * v;
  return detail::make(std::move(Y), Op::leaky_relu, {x}, [slope](Node& self) {
    Node& nx = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double d = nx.value.data[i] >= 0.0 ? 1.0 : slope;
      nx.grad.data[i] += d * self.grad.data[i];
    }
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return detail::make(Tensor::scalar(s), Op::sum, {x}, [](Node& self) {
    Node& nx = *self.parents[0];
    const double g = self.grad.data[0];
    for (double& v : nx.grad.data) v += g;
  });
}

inline Var mean(const Var& x) {
  const std::size_t n = x->value.size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return detail::make(Tensor::scalar(s / static_cast<double>(n)), Op::mean, {x}, [n](Node& self) {
    Node& nx = *self.parents[0];
    const double g = self.grad.data[0] / static_cast<double>(n);
    for (double& v : nx.grad.data) v += g;
  });
}

/// Row-wise log-softmax of a plain matrix.
inline Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t cols = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) r[j] -= lse;
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out = log_softmax_rows(logits);
  for (double& v : out.data) v = std::exp(v);
  return out;
}

/// Mean over the batch of -max(log softmax(logits)_i[target_i], -clip).
///
/// Optional per-example weights turn this into sum_i w_i * loss_i / B; a
/// negative weight makes the optimizer ascend that example's loss.
inline Var softmax_logloss(const Var& logits, std::span<const int> targets,
                           std::span<const double> weights = {}, double clip = kLogProbClip) {
  const Tensor& L = logits->value;
  detail::require_matrix(L, "softmax_logloss");
  const std::size_t B = L.shape[0], C = L.shape[1];
  if (targets.size() != B) {
    throw DimensionError("softmax_logloss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(B) + " rows");
  }
  if (!weights.empty() && weights.size() != B) {
    throw DimensionError("softmax_logloss: weight count differs from batch size");
  }
  if (B == 0) throw DimensionError("softmax_logloss: empty batch");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= C) {
      throw IndexError("softmax_logloss: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(C) + ")");
    }
  }
  Tensor logp = log_softmax_rows(L);
  std::vector<double> w(B, 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  std::vector<int> tg(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    total += w[i] * -std::max(logp(i, static_cast<std::size_t>(tg[i])), -clip);
  }
  total /= static_cast<double>(B);
  return detail::make(
      Tensor::scalar(total), Op::softmax_logloss, {logits},
      [logp = std::move(logp), tg = std::move(tg), w = std::move(w), B, C, clip](Node& self) {
        Node& nl = *self.parents[0];
        const double g = self.grad.data[0] / static_cast<double>(B);
        for (std::size_t i = 0; i < B; ++i) {
          const auto t = static_cast<std::size_t>(tg[i]);
          // Clamped region is flat.
          if (logp(i, t) < -clip) continue;
          for (std::size_t j = 0; j < C; ++j) {
            const double p = std::exp(logp(i, j));
            nl.grad.data[i * C + j] += g * w[i] * (p - (j == t ? 1.0 : 0.0));
          }
        }
      });
}

/// Identity forward; backward multiplies the incoming gradient by -scale.
inline Var gradient_reversal(const Var& x, double scale_factor) {
  if (!(scale_factor > 0.0)) throw ArgumentError("gradient_reversal: scale must be > 0");
  return detail::make(x->value, Op::gradient_reversal, {x}, [scale_factor](Node& self) {
    Node& nx = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      nx.grad.data[i] -= scale_factor * self.grad.data[i];
    }
  });
}

/// Per-column standardization without learned affine parameters.
///
/// Columns are centred and divided by sqrt(max(var, eps)) using the
/// population variance, so non-degenerate columns come out with std exactly 1
/// and constant columns come out as 0.
inline Var batchnorm_noaffine(const Var& x, double eps = kBatchNormEps) {
  const Tensor& X = x->value;
  detail::require_matrix(X, "batchnorm_noaffine");
  const std::size_t B = X.shape[0], D = X.shape[1];
  if (B < 2) throw ArgumentError("batchnorm_noaffine: batch size must be >= 2");
  std::vector<double> denom(D);
  std::vector<char> guarded(D, 0);
  Tensor Y = X;
  for (std::size_t j = 0; j < D; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < B; ++i) m += X(i, j);
    m /= static_cast<double>(B);
    double v = 0.0;
    for (std::size_t i = 0; i < B; ++i) v += (X(i, j) - m) * (X(i, j) - m);
    v /= static_cast<double>(B);
    guarded[j] = v < eps;
    denom[j] = std::sqrt(std::max(v, eps));
    for (std::size_t i = 0; i < B; ++i) Y(i, j) = (X(i, j) - m) / denom[j];
  }
  return detail::make(std::move(Y), Op::batchnorm, {x},
                      [B, D, denom = std::move(denom), guarded = std::move(guarded)](Node& self) {
                        Node& nx = *self.parents[0];
                        const double nb = static_cast<double>(B);
                        for (std::size_t j = 0; j < D; ++j) {
                          double mg = 0.0, mgy = 0.0;
                          for (std::size_t i = 0; i < B; ++i) {
                            mg += self.grad(i, j);
                            mgy += self.grad(i, j) * self.value(i, j);
                          }
                          mg /= nb;
                          mgy /= nb;
                          if (guarded[j]) mgy = 0.0;
                          for (std::size_t i = 0; i < B; ++i) {
                            nx.grad(i, j) +=
                                (self.grad(i, j) - mg - self.value(i, j) * mgy) / denom[j];
                          }
                        }
                      });
}

/// mu + softplus(sigma_raw - 5) * noise.
inline Var gaussian_reparam(const Var& mu, const Var& sigma_raw, const Tensor& noise) {
  detail::require_same(mu->value, sigma_raw->value, "gaussian_reparam");
  detail::require_same(mu->value, noise, "gaussian_reparam noise");
  Tensor Y = mu->value;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    Y.data[i] += detail::softplus(sigma_raw->value.data[i] - kSigmaShift) * noise.data[i];
  }
  return detail::make(std::move(Y), Op::gaussian_reparam, {mu, sigma_raw}, [noise](Node& self) {
    Node& nm = *self.parents[0];
    Node& ns = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad.data[i];
      if (nm.requires_grad) nm.grad.data[i] += g;
      if (ns.requires_grad) {
        ns.grad.data[i] += g * noise.data[i] * detail::sigmoid(ns.value.data[i] - kSigmaShift);
      }
    }
  });
}

/// Train-time inverted dropout with an explicit keep-mask (entries 0 or 1).
inline Var dropout(const Var& x, const Tensor& keep_mask, double rate) {
  detail::require_same(x->value, keep_mask, "dropout");
  if (rate < 0.0 || rate >= 1.0) throw ArgumentError("dropout rate must lie in [0, 1)");
  const double s = 1.0 / (1.0 - rate);
  Tensor Y = x->value;
  for (std::size_t i = 0; i < Y.size(); ++i) Y.data[i] *= keep_mask.data[i] * s;
  return detail::make(std::move(Y), Op::dropout, {x}, [keep_mask, s](Node& self) {
    Node& nx = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      nx.grad.data[i] += self.grad.data[i] * keep_mask.data[i] * s;
    }
  });
}

inline Tensor bernoulli_keep_mask(const std::vector<std::size_t>& shape, double rate, Rng& rng) {
  Tensor m(shape, 0.0);
  std::bernoulli_distribution keep(1.0 - rate);
  for (double& v : m.data) v = keep(rng) ? 1.0 : 0.0;
  return m;
}

inline Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate == 0.0) return x;
  return dropout(x, bernoulli_keep_mask(x->value.shape, rate, rng), rate);
}

/// Sum of squared entries over all given tensors.
inline Var l2_penalty(const std::vector<Var>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double v : p->value.data) s += v * v;
  }
  return detail::make(Tensor::scalar(s), Op::l2_penalty, params, [](Node& self) {
    const double g = self.grad.data[0];
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad.data[i] += 2.0 * g * p->value.data[i];
    }
  });
}

/// KL(N(mu, s^2) || N(0, 1)) summed over dimensions, averaged over rows,
/// with s = softplus(sigma_raw - 5).
inline Var vib_kl(const Var& mu, const Var& sigma_raw) {
  detail::require_same(mu->value, sigma_raw->value, "vib_kl");
  const std::size_t rows = mu->value.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < mu->value.size(); ++i) {
    const double m = mu->value.data[i];
    const double s = detail::softplus(sigma_raw->value.data[i] - kSigmaShift);
    total += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
  }
  total /= static_cast<double>(rows);
  return detail::make(Tensor::scalar(total), Op::vib_kl, {mu, sigma_raw}, [rows](Node& self) {
    Node& nm = *self.parents[0];
    Node& ns = *self.parents[1];
    const double g = self.grad.data[0] / static_cast<double>(rows);
    for (std::size_t i = 0; i < nm.value.size(); ++i) {
      if (nm.requires_grad) nm.grad.data[i] += g * nm.value.data[i];
      if (ns.requires_grad) {
        const double a = ns.value.data[i] - kSigmaShift;
        const double s = detail::softplus(a);
        ns.grad.data[i] += g * (s - 1.0 / s) * detail::sigmoid(a);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar root. The root's gradient is set to 1.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw DimensionError("backward requires a scalar root");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

inline void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

}  // namespace ad
}  // namespace dib
