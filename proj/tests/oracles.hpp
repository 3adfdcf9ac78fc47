#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. Nothing here calls the library's loss or EM code.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "oodcv/rng.hpp"
#include "oodcv/train.hpp"

namespace oodcv::oracle {

// ------------------------------------------------------------ loss and FD

struct ForwardTrace {
  Eigen::MatrixXd probs;
  std::vector<Eigen::MatrixXd> hidden_pre;
};

inline ForwardTrace naive_forward(const std::vector<Layer>& layers, const Eigen::MatrixXd& x) {
  ForwardTrace t;
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXd z(layers[l].weight.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        double s = layers[l].bias(r);
        for (Eigen::Index k = 0; k < a.rows(); ++k) s += layers[l].weight(r, k) * a(k, j);
        z(r, j) = s;
      }
    if (l + 1 < layers.size()) {
      t.hidden_pre.push_back(z);
      a = z.cwiseMax(0.0);
    } else {
      a = z;
    }
  }
  t.probs.resize(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < a.rows(); ++r) m = std::max(m, a(r, j));
    double s = 0.0;
    for (Eigen::Index r = 0; r < a.rows(); ++r) s += std::exp(a(r, j) - m);
    for (Eigen::Index r = 0; r < a.rows(); ++r) t.probs(r, j) = std::exp(a(r, j) - m) / s;
  }
  return t;
}

/// sum_i ce_i * CE_i + mse_i * MSE_i + prior * KL(uniform || batch mean).
inline double naive_loss(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q,
                         const LossWeights& w) {
  const auto c = p.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.cols(); ++i) {
    double ce = 0.0, mse = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      if (q(k, i) != 0.0) ce -= q(k, i) * std::log(std::max(p(k, i), 1e-12));
      mse += (p(k, i) - q(k, i)) * (p(k, i) - q(k, i));
    }
    loss += w.ce[i] * ce + w.mse[i] * mse / c;
  }
  if (w.prior != 0.0) {
    for (Eigen::Index k = 0; k < c; ++k) {
      const double pbar = std::max(p.row(k).mean(), 1e-12);
      loss += w.prior * (1.0 / c) * std::log((1.0 / c) / pbar);
    }
  }
  return loss;
}

struct GradCase {
  Classifier model;
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd targets;
  LossWeights weights;
};

/// Tiny random architecture, batch, soft targets and mixed loss heads.
inline GradCase random_grad_case(Rng& rng) {
  ClassifierConfig cfg;
  cfg.input_height = cfg.input_width = 8;
  cfg.num_classes = rng.randint(2, 5);
  const int depth = rng.randint(0, 2);
  cfg.hidden.clear();
  for (int d = 0; d < depth; ++d) cfg.hidden.push_back(rng.randint(3, 12));
  GradCase g{Classifier::initialized(cfg, rng.next_u64()), {}, {}, {}};
  // Larger than default init so the softmax is far from uniform.
  for (auto& l : g.model.layers()) {
    l.weight *= 3.0;
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = rng.normal(0.0, 0.3);
  }
  const int n = rng.randint(1, 6);
  g.inputs.resize(cfg.input_dim(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index k = 0; k < g.inputs.rows(); ++k) g.inputs(k, j) = rng.normal();
  g.targets = Eigen::MatrixXd::Zero(cfg.num_classes, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (rng.bernoulli(0.5)) {
      g.targets(rng.randint(0, cfg.num_classes - 1), j) = 1.0;
    } else {
      double s = 0.0;
      for (int k = 0; k < cfg.num_classes; ++k) s += g.targets(k, j) = rng.gamma(1.0);
      g.targets.col(j) /= s;
    }
  }
  for (int i = 0; i < n; ++i) {
    g.weights.ce.push_back(rng.bernoulli(0.7) ? rng.uniform(0.1, 1.0) : 0.0);
    g.weights.mse.push_back(rng.bernoulli(0.5) ? rng.uniform(0.1, 5.0) : 0.0);
  }
  g.weights.prior = rng.bernoulli(0.4) ? rng.uniform(0.1, 1.0) : 0.0;
  return g;
}

struct GradReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;  // a ReLU changed sign within +-h
  std::size_t failed = 0;
  double worst = 0.0;
};

inline bool same_pattern(const std::vector<Eigen::MatrixXd>& a,
                         const std::vector<Eigen::MatrixXd>& b) {
  for (std::size_t l = 0; l < a.size(); ++l)
    if (((a[l].array() > 0.0) != (b[l].array() > 0.0)).any()) return false;
  return true;
}

/// Central differences with step h against `analytic`, coordinate by
/// coordinate. Relative error |a - n| / max(|a|, |n|, floor).
inline GradReport check_gradients(const GradCase& g, const Gradients& analytic,
                                  double h = 1e-4, double tol = 1e-3, double floor = 1e-5) {
  GradReport rep;
  std::vector<Layer> layers = g.model.layers();
  const auto base = naive_forward(layers, g.inputs);
  auto eval = [&](double& theta, double delta, bool& kink) {
    const double keep = theta;
    theta = keep + delta;
    const auto t = naive_forward(layers, g.inputs);
    theta = keep;
    kink = kink || !same_pattern(base.hidden_pre, t.hidden_pre);
    return naive_loss(t.probs, g.targets, g.weights);
  };
  auto visit = [&](double& theta, double a) {
    bool kink = false;
    const double num = (eval(theta, h, kink) - eval(theta, -h, kink)) / (2 * h);
    if (kink) {
      ++rep.skipped;
      return;
    }
    ++rep.checked;
    const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    rep.worst = std::max(rep.worst, rel);
    if (rel > tol) ++rep.failed;
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (Eigen::Index r = 0; r < layers[l].weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layers[l].weight.cols(); ++c)
        visit(layers[l].weight(r, c), analytic.layers[l].weight(r, c));
    for (Eigen::Index r = 0; r < layers[l].bias.size(); ++r)
      visit(layers[l].bias(r), analytic.layers[l].bias(r));
  }
  return rep;
}

// ------------------------------------------------------------------ EM

struct Component {
  double mean, var, weight;
};

inline double log_normal_weighted(double x, const Component& c) {
  if (c.weight <= 0.0) return -std::numeric_limits<double>::infinity();
  const double d = x - c.mean;
  return std::log(c.weight) - 0.5 * std::log(2 * M_PI * c.var) - d * d / (2 * c.var);
}

inline double lse(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct EmSolution {
  Component low, high;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::vector<double> x;  // normalized inputs

  /// Posterior of the low-mean component, no clamping.
  double low_posterior(double v) const {
    const double a = log_normal_weighted(v, low), b = log_normal_weighted(v, high);
    return std::exp(a - lse(a, b));
  }
};

/// Exhaustive-restart EM on min-max normalized losses with the same variance
/// floor: random data-point means, random variances and weights, run to a
/// tight fixed point; keeps the best log-likelihood.
inline EmSolution brute_force_em(const std::vector<double>& losses, int restarts,
                                 std::uint64_t seed, double var_floor = 1e-4) {
  const auto [lo, hi] = std::minmax_element(losses.begin(), losses.end());
  EmSolution best;
  for (double l : losses) best.x.push_back((l - *lo) / (*hi - *lo));
  const auto& x = best.x;
  const std::size_t n = x.size();
  Rng rng(seed);
  for (int r = 0; r < restarts; ++r) {
    std::size_t i = rng.randint(0, n - 1), j = rng.randint(0, n - 1);
    if (i == j) j = (i + 1) % n;
    Component a{x[i], rng.uniform(1e-3, 0.2), rng.uniform(0.2, 0.8)};
    Component b{x[j], rng.uniform(1e-3, 0.2), 1.0 - a.weight};
    double prev = -std::numeric_limits<double>::infinity(), ll = prev;
    std::vector<double> resp(n);
    for (int it = 0; it < 20000; ++it) {
      ll = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double la = log_normal_weighted(x[k], a), lb = log_normal_weighted(x[k], b);
        const double t = lse(la, lb);
        ll += t;
        resp[k] = std::exp(la - t);
      }
      if (std::abs(ll - prev) < 1e-13) break;
      prev = ll;
      double na = 0, sa = 0, sb = 0;
      for (std::size_t k = 0; k < n; ++k) na += resp[k], sa += resp[k] * x[k], sb += (1 - resp[k]) * x[k];
      const double nb = n - na;
      if (na <= 0.0 || nb <= 0.0) break;
      a.mean = sa / na;
      b.mean = sb / nb;
      double va = 0, vb = 0;
      for (std::size_t k = 0; k < n; ++k) {
        va += resp[k] * (x[k] - a.mean) * (x[k] - a.mean);
        vb += (1 - resp[k]) * (x[k] - b.mean) * (x[k] - b.mean);
      }
      a.var = std::max(va / na, var_floor);
      b.var = std::max(vb / nb, var_floor);
      a.weight = na / n;
      b.weight = nb / n;
    }
    if (ll > best.log_likelihood) {
      best.log_likelihood = ll;
      best.low = a.mean <= b.mean ? a : b;
      best.high = a.mean <= b.mean ? b : a;
    }
  }
  return best;
}

/// Two tight clusters: low around U(0.05, 0.3), high around U(0.7, 0.95).
inline std::vector<double> separated_losses(Rng& rng, int max_points = 50) {
  const int n = rng.randint(10, max_points);
  const int n_low = rng.randint(3, n - 3);
  const double m0 = rng.uniform(0.05, 0.3), m1 = rng.uniform(0.7, 0.95);
  const double s0 = rng.uniform(0.005, 0.02), s1 = rng.uniform(0.005, 0.02);
  std::vector<double> out;
  for (int i = 0; i < n; ++i) out.push_back(i < n_low ? rng.normal(m0, s0) : rng.normal(m1, s1));
  return out;
}

}  // namespace oodcv::oracle
