#include "oodcv/ttt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"
#include "oodcv/parallel.hpp"

namespace oodcv {
namespace {

constexpr double kTwoPi = 6.28318530717958647692;
constexpr double kProbFloor = 1e-12;

double log_normal(double x, const GmmComponent& c) {
  const double d = x - c.mean;
  return -0.5 * std::log(kTwoPi * c.variance) - d * d / (2.0 * c.variance);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -INFINITY) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double log_weighted(double x, const GmmComponent& c) {
  return c.weight > 0.0 ? std::log(c.weight) + log_normal(x, c) : -INFINITY;
}

double percentile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

SoftLabel mean_of(std::span<const SoftLabel> a, std::span<const SoftLabel> b) {
  OODCV_REQUIRE(!a.empty() || !b.empty(), "at least one view is required");
  const std::size_t c = a.empty() ? b.front().size() : a.front().size();
  SoftLabel m(c, 0.0);
  for (auto views : {a, b})
    for (const auto& v : views) {
      OODCV_REQUIRE(v.size() == c, "views disagree on the class count");
      for (std::size_t k = 0; k < c; ++k) m[k] += v[k];
    }
  const double n = static_cast<double>(a.size() + b.size());
  for (auto& x : m) x /= n;
  return m;
}

AugPolicy weak_policy() { return AugPolicy{AugPolicy::Kind::Weak, 0, 0, 0}; }

std::vector<Image> weak_views(const Image& img, int views, Rng& rng) {
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) out.push_back(apply_policy(img, weak_policy(), rng));
  return out;
}

std::vector<SoftLabel> probs_of(const Classifier& model, std::span<const Image> imgs) {
  std::vector<SoftLabel> out;
  for (const auto& p : predict_probs(model, imgs))
    out.emplace_back(p.data(), p.data() + p.size());
  return out;
}

}  // namespace

void TTTConfig::validate() const {
  auto check_p = [](double v, const char* field) {
    if (!(v > 0.5 && v < 1.0)) throw ConfigError("must lie in (0.5, 1)", field);
  };
  check_p(p, "ttt.p");
  if (p_b) check_p(*p_b, "ttt.p_b");
  if (refresh_period < 1) throw ConfigError("must be >= 1", "ttt.refresh_period");
  if (!(sharpen_T > 0.0)) throw ConfigError("must be > 0", "ttt.sharpen_T");
  if (!(mix_alpha > 0.0)) throw ConfigError("must be > 0", "ttt.mix_alpha");
  if (lambda_u < 0.0) throw ConfigError("must be >= 0", "ttt.lambda_u");
  if (prior_weight < 0.0) throw ConfigError("must be >= 0", "ttt.prior_weight");
  if (!(lr > 0.0)) throw ConfigError("must be > 0", "ttt.lr");
  if (weight_decay < 0.0) throw ConfigError("must be >= 0", "ttt.weight_decay");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("must lie in [0, 1)", "ttt.momentum");
  if (epochs < 0) throw ConfigError("must be >= 0", "ttt.epochs");
  if (aug_views < 1) throw ConfigError("must be >= 1", "ttt.aug_views");
  if (batch_size < 1) throw ConfigError("must be >= 1", "ttt.batch_size");
  if (strong_op_count < 0) throw ConfigError("must be >= 0", "ttt.strong_op_count");
  if (strong_magnitude < 0 || strong_magnitude > 10)
    throw ConfigError("must lie in [0, 10]", "ttt.strong_magnitude");
  if (!(fallback_fraction > 0.0 && fallback_fraction <= 1.0))
    throw ConfigError("must lie in (0, 1]", "ttt.fallback_fraction");
}

// ---------------------------------------------------------------------- GMM

double GmmFit::clean_prob(double loss) const {
  if (degenerate) return 1.0;
  double x = (loss - loss_min) / (loss_max - loss_min);
  x = std::clamp(x, clean.mean, std::max(clean.mean, noisy.mean));
  const double lc = log_weighted(x, clean);
  const double ln = log_weighted(x, noisy);
  if (lc == -INFINITY) return 0.0;
  return std::exp(lc - log_sum_exp(lc, ln));
}

std::vector<double> GmmFit::clean_probs(std::span<const double> losses) const {
  std::vector<double> out;
  out.reserve(losses.size());
  for (double l : losses) out.push_back(clean_prob(l));
  return out;
}

double gmm_log_likelihood(std::span<const double> x, const GmmComponent& a,
                          const GmmComponent& b) {
  double ll = 0.0;
  for (double v : x) ll += log_sum_exp(log_weighted(v, a), log_weighted(v, b));
  return ll;
}

GmmFit fit_loss_gmm(std::span<const double> losses) {
  OODCV_REQUIRE(losses.size() >= 10, "fit_loss_gmm needs at least 10 losses");
  for (double l : losses) OODCV_REQUIRE(std::isfinite(l), "losses must be finite");

  GmmFit fit;
  const auto [lo, hi] = std::minmax_element(losses.begin(), losses.end());
  fit.loss_min = *lo;
  fit.loss_max = *hi;
  if (!(fit.loss_max > fit.loss_min)) {
    fit.degenerate = true;
    fit.clean = {0.0, kGmmVarianceFloor, 1.0};
    fit.noisy = {0.0, kGmmVarianceFloor, 0.0};
    return fit;
  }

  const std::size_t n = losses.size();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = (losses[i] - fit.loss_min) / (fit.loss_max - fit.loss_min);

  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  double m0 = percentile(sorted, 0.1), m1 = percentile(sorted, 0.9);
  if (!(m1 > m0)) {
    m0 = 0.0;
    m1 = 1.0;
  }
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var = std::max(var / n, kGmmVarianceFloor);

  GmmComponent a{m0, var, 0.5}, b{m1, var, 0.5};
  std::vector<double> resp(n);
  double prev = -INFINITY;
  int it = 0;
  for (; it < kGmmMaxIterations; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double la = log_weighted(x[i], a), lb = log_weighted(x[i], b);
      const double lt = log_sum_exp(la, lb);
      ll += lt;
      resp[i] = std::exp(la - lt);
    }
    if (std::abs(ll - prev) < kGmmTolerance) break;
    prev = ll;

    double na = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      na += resp[i];
      sa += resp[i] * x[i];
      sb += (1.0 - resp[i]) * x[i];
    }
    const double nb = static_cast<double>(n) - na;
    if (na > 0.0) a.mean = sa / na;
    if (nb > 0.0) b.mean = sb / nb;
    double va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      va += resp[i] * (x[i] - a.mean) * (x[i] - a.mean);
      vb += (1.0 - resp[i]) * (x[i] - b.mean) * (x[i] - b.mean);
    }
    a.variance = std::max(na > 0.0 ? va / na : kGmmVarianceFloor, kGmmVarianceFloor);
    b.variance = std::max(nb > 0.0 ? vb / nb : kGmmVarianceFloor, kGmmVarianceFloor);
    a.weight = na / n;
    b.weight = nb / n;
  }
  if (b.mean < a.mean) std::swap(a, b);
  fit.clean = a;
  fit.noisy = b;
  fit.iterations = it;
  fit.log_likelihood = gmm_log_likelihood(x, a, b);
  return fit;
}

// ---------------------------------------------------------------- division

std::size_t Division::labeled_count() const {
  return static_cast<std::size_t>(
      std::count(split.begin(), split.end(), Split::Labeled));
}

Division divide(std::span<const double> losses, double p,
                double fallback_fraction) {
  Division d;
  d.fit = fit_loss_gmm(losses);
  d.clean_prob = d.fit.clean_probs(losses);
  d.split.resize(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i)
    d.split[i] = d.clean_prob[i] >= p ? Split::Labeled : Split::Unlabeled;
  if (d.labeled_count() == 0) {
    d.fallback = true;
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(fallback_fraction * losses.size())));
    std::vector<std::size_t> order(losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
      return losses[i] < losses[j];
    });
    for (std::size_t r = 0; r < std::min(k, order.size()); ++r)
      d.split[order[r]] = Split::Labeled;
  }
  return d;
}

std::vector<double> per_sample_loss(const Classifier& model,
                                    std::span<const Image> images,
                                    std::span<const int> labels) {
  OODCV_REQUIRE(images.size() == labels.size(), "one label per image is required");
  const auto probs = predict_probs(model, images);
  std::vector<double> out(images.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = -std::log(std::max(probs[i](labels[i]), kProbFloor));
  return out;
}

// --------------------------------------------------------------- soft labels

SoftLabel sharpen(std::span<const double> v, double T) {
  OODCV_REQUIRE(T > 0.0, "temperature must be positive");
  OODCV_REQUIRE(!v.empty(), "cannot sharpen an empty vector");
  SoftLabel out(v.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    OODCV_REQUIRE(v[k] >= 0.0, "sharpen expects nonnegative entries");
    out[k] = std::pow(v[k], 1.0 / T);
    sum += out[k];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    // Every entry underflowed (or overflowed); fall back to the argmax.
    const int k = argmax(v);
    std::fill(out.begin(), out.end(), 0.0);
    out[static_cast<std::size_t>(k)] = 1.0;
    return out;
  }
  for (auto& x : out) x /= sum;
  return out;
}

SoftLabel co_refine(std::span<const SoftLabel> view_probs, double w, int y,
                    double T) {
  OODCV_REQUIRE(w >= 0.0 && w <= 1.0, "clean probability must lie in [0, 1]");
  SoftLabel r = mean_of(view_probs, {});
  OODCV_REQUIRE(y >= 0 && y < static_cast<int>(r.size()), "label out of range");
  for (auto& v : r) v *= (1.0 - w);
  r[static_cast<std::size_t>(y)] += w;
  return sharpen(r, T);
}

SoftLabel co_guess(std::span<const SoftLabel> views_a,
                   std::span<const SoftLabel> views_b, double T) {
  return sharpen(mean_of(views_a, views_b), T);
}

std::vector<SoftLabel> weak_view_probs(const Classifier& model,
                                       const Image& img, int views, Rng& rng) {
  return probs_of(model, weak_views(img, views, rng));
}

SoftLabel co_refine(const Classifier& own, const Image& img, int views,
                    double w, int y, double T, Rng& rng) {
  return co_refine(weak_view_probs(own, img, views, rng), w, y, T);
}

SoftLabel co_guess(const Classifier& a, const Classifier& b, const Image& img,
                   int views, double T, Rng& rng) {
  const auto va = weak_view_probs(a, img, views, rng);
  const auto vb = weak_view_probs(b, img, views, rng);
  return co_guess(va, vb, T);
}

// ------------------------------------------------------------------ mixmatch

MixResult mix_and_backward(const Classifier& model, const MixBatch& batch,
                           double lambda_prime,
                           std::span<const std::size_t> partners,
                           double lambda_u, double prior_weight) {
  const std::size_t n = batch.images.size();
  OODCV_REQUIRE(n > 0, "empty batch");
  OODCV_REQUIRE(batch.targets.size() == n && partners.size() == n,
                "batch, targets and partners must have equal length");
  OODCV_REQUIRE(batch.labeled <= n, "labeled count exceeds the batch");
  OODCV_REQUIRE(lambda_prime >= 0.5 && lambda_prime <= 1.0,
                "mixing weight must lie in [0.5, 1]");
  const int c = model.config().num_classes;

  const Matrix x = to_batch(batch.images, model.config());
  Matrix q(c, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    OODCV_REQUIRE(batch.targets[i].size() == static_cast<std::size_t>(c),
                  "target has the wrong class count");
    for (int k = 0; k < c; ++k)
      q(k, static_cast<Eigen::Index>(i)) = batch.targets[i][static_cast<std::size_t>(k)];
  }
  Matrix xm(x.rows(), x.cols()), qm(q.rows(), q.cols());
  for (std::size_t i = 0; i < n; ++i) {
    OODCV_REQUIRE(partners[i] < n, "partner index out of range");
    const auto j = static_cast<Eigen::Index>(partners[i]);
    const auto ii = static_cast<Eigen::Index>(i);
    xm.col(ii) = lambda_prime * x.col(ii) + (1.0 - lambda_prime) * x.col(j);
    qm.col(ii) = lambda_prime * q.col(ii) + (1.0 - lambda_prime) * q.col(j);
  }

  const std::size_t nl = batch.labeled, nu = n - batch.labeled;
  LossWeights w;
  w.ce.assign(n, 0.0);
  w.mse.assign(n, 0.0);
  for (std::size_t i = 0; i < nl; ++i) w.ce[i] = 1.0 / static_cast<double>(nl);
  for (std::size_t i = nl; i < n; ++i) w.mse[i] = lambda_u / static_cast<double>(nu);
  w.prior = prior_weight;

  MixResult r;
  r.lambda_prime = lambda_prime;
  r.grads = backward(model, xm, qm, w);

  const Matrix probs = forward(model, xm).probs;
  const Vector pbar = probs.rowwise().mean();
  for (Eigen::Index k = 0; k < c; ++k)
    r.prior_loss += std::log(1.0 / (c * std::max(pbar(k), kProbFloor))) / c;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    if (i < nl) {
      double ce = 0.0;
      for (int k = 0; k < c; ++k)
        if (qm(k, ii) != 0.0) ce -= qm(k, ii) * std::log(std::max(probs(k, ii), kProbFloor));
      r.ce_loss += ce / static_cast<double>(nl);
    } else {
      r.mse_loss += (probs.col(ii) - qm.col(ii)).squaredNorm() / c /
                    static_cast<double>(nu);
    }
  }
  return r;
}

MixResult mixmatch_step(const Classifier& model, const MixBatch& batch,
                        const TTTConfig& config, double lambda_u, Rng& rng) {
  const std::size_t n = batch.images.size();
  MixBatch strong = batch;
  const AugPolicy policy{AugPolicy::Kind::Strong, config.strong_op_count,
                         config.strong_magnitude, 0};
  const std::uint64_t seed = rng.next_u64();
  parallel_for(n, [&](std::size_t i) {
    Rng local(derive_seed(seed, static_cast<std::uint64_t>(i)));
    strong.images[i] = apply_policy(apply_policy(batch.images[i], policy, local),
                                    weak_policy(), local);
  });
  const double lambda = rng.beta(config.mix_alpha, config.mix_alpha);
  const double lambda_prime = std::max(lambda, 1.0 - lambda);
  const auto partners = rng.permutation(n);
  return mix_and_backward(model, strong, lambda_prime, partners, lambda_u,
                          config.prior_weight);
}

double lambda_u_at(const TTTConfig& config, double t) {
  return config.lambda_u * std::min(1.0, t / config.refresh_period);
}

// ---------------------------------------------------------------------- loop

std::vector<int> assign_noisy_labels(const Classifier& model,
                                     std::span<const Image> images) {
  return predict_labels(model, images);
}

std::vector<int> assign_noisy_labels(std::span<const Classifier> members,
                                     std::span<const Image> images) {
  OODCV_REQUIRE(!members.empty(), "at least one model is required");
  std::vector<Vector> sum = predict_probs(members.front(), images);
  for (std::size_t m = 1; m < members.size(); ++m) {
    const auto p = predict_probs(members[m], images);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += p[i];
  }
  std::vector<int> out;
  out.reserve(sum.size());
  for (auto& s : sum) {
    s /= static_cast<double>(members.size());
    out.push_back(argmax(s));
  }
  return out;
}

TTTState init_ttt(const Classifier& pretrained, std::span<const Image> images,
                  const TTTConfig& config) {
  config.validate();
  TTTState s;
  s.model_a = pretrained;
  s.model_b = pretrained;
  s.optim_a = OptimState::for_model(pretrained, config.momentum, config.weight_decay);
  s.optim_b = s.optim_a;
  s.noisy_labels = assign_noisy_labels(pretrained, images);
  return s;
}

void co_divide(TTTState& state, std::span<const Image> images,
               const TTTConfig& config) {
  const auto loss_a = per_sample_loss(state.model_a, images, state.noisy_labels);
  const auto loss_b = per_sample_loss(state.model_b, images, state.noisy_labels);
  state.division_b = divide(loss_a, config.threshold_b(), config.fallback_fraction);
  state.division_a = divide(loss_b, config.threshold_a(), config.fallback_fraction);
}

std::size_t refresh_labels(TTTState& state, std::span<const Image> images) {
  const std::vector<Classifier> members = {state.model_a, state.model_b};
  auto fresh = assign_noisy_labels(members, images);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < fresh.size(); ++i) changed += fresh[i] != state.noisy_labels[i];
  state.noisy_labels = std::move(fresh);
  return changed;
}

namespace {

struct EpochLosses {
  double ce = 0.0;
  double mse = 0.0;
};

EpochLosses train_epoch(Classifier& model, OptimState& optim,
                        const Classifier& peer, const Division& division,
                        std::span<const int> labels, std::span<const Image> images,
                        const TTTConfig& config, int epoch, Rng& rng) {
  std::vector<std::size_t> labeled, unlabeled;
  for (std::size_t i = 0; i < images.size(); ++i)
    (division.split[i] == Split::Labeled ? labeled : unlabeled).push_back(i);
  {
    const auto pl = rng.permutation(labeled.size());
    const auto pu = rng.permutation(unlabeled.size());
    std::vector<std::size_t> l2, u2;
    for (auto k : pl) l2.push_back(labeled[k]);
    for (auto k : pu) u2.push_back(unlabeled[k]);
    labeled = std::move(l2);
    unlabeled = std::move(u2);
  }

  EpochLosses totals;
  if (labeled.empty()) return totals;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t batches = (labeled.size() + bs - 1) / bs;
  std::size_t u_cursor = 0;
  const int views = config.aug_views;
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<std::size_t> idx(labeled.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                 labeled.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(labeled.size(), (b + 1) * bs)));
    const std::size_t nl = idx.size();
    const std::size_t nu = std::min(nl, unlabeled.size());
    for (std::size_t k = 0; k < nu; ++k) {
      idx.push_back(unlabeled[u_cursor]);
      u_cursor = (u_cursor + 1) % unlabeled.size();
    }

    // Weak views: `views` per sample for the own model, plus `views` for the
    // peer on unlabeled samples. Forwarded in one batch per model.
    const std::uint64_t seed = rng.next_u64();
    std::vector<std::vector<Image>> own_views(idx.size()), peer_views(idx.size());
    parallel_for(idx.size(), [&](std::size_t i) {
      Rng local(derive_seed(seed, static_cast<std::uint64_t>(i)));
      own_views[i] = weak_views(images[idx[i]], views, local);
      if (i >= nl) peer_views[i] = weak_views(images[idx[i]], views, local);
    });
    std::vector<Image> own_flat, peer_flat;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (auto& v : own_views[i]) own_flat.push_back(std::move(v));
      for (auto& v : peer_views[i]) peer_flat.push_back(std::move(v));
    }
    const auto own_probs = probs_of(model, own_flat);
    const auto peer_probs = probs_of(peer, peer_flat);

    MixBatch batch;
    batch.labeled = nl;
    const auto vz = static_cast<std::size_t>(views);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      batch.images.push_back(images[idx[i]]);
      const std::span<const SoftLabel> own(own_probs.data() + i * vz, vz);
      if (i < nl) {
        batch.targets.push_back(co_refine(own, division.clean_prob[idx[i]],
                                          labels[idx[i]], config.sharpen_T));
      } else {
        const std::span<const SoftLabel> other(peer_probs.data() + (i - nl) * vz, vz);
        batch.targets.push_back(co_guess(own, other, config.sharpen_T));
      }
    }

    const double t = epoch + static_cast<double>(b) / static_cast<double>(batches);
    const auto r = mixmatch_step(model, batch, config, lambda_u_at(config, t), rng);
    sgd_step(model, r.grads, optim, config.lr);
    totals.ce += r.ce_loss / static_cast<double>(batches);
    totals.mse += r.mse_loss / static_cast<double>(batches);
  }
  return totals;
}

}  // namespace

TTTResult run_ttt(const Classifier& pretrained, std::span<const Image> images,
                  const TTTConfig& config) {
  config.validate();
  OODCV_REQUIRE(images.size() >= 10, "run_ttt needs at least 10 images");
  TTTState state = init_ttt(pretrained, images, config);
  Rng rng_a(config.seed_a), rng_b(config.seed_b);
  TTTResult result;
  for (int e = 0; e < config.epochs; ++e) {
    TTTEpochLog log;
    log.epoch = e + 1;
    if (config.refresh && e > 0 && e % config.refresh_period == 0) {
      log.refreshed = true;
      log.labels_changed = refresh_labels(state, images);
    }
    co_divide(state, images, config);
    log.noisy_labels = state.noisy_labels;
    log.lambda_u = lambda_u_at(config, e);
    log.labeled_a = state.division_a.labeled_count();
    log.labeled_b = state.division_b.labeled_count();
    log.fallback_a = state.division_a.fallback;
    log.fallback_b = state.division_b.fallback;

    // Each model co-guesses with its peer as it stood at the start of the
    // epoch, so the two updates are independent of each other.
    const Classifier peer_of_a = state.model_b;
    const Classifier peer_of_b = state.model_a;
    const auto la = train_epoch(state.model_a, state.optim_a, peer_of_a,
                                state.division_a, state.noisy_labels, images,
                                config, e, rng_a);
    const auto lb = train_epoch(state.model_b, state.optim_b, peer_of_b,
                                state.division_b, state.noisy_labels, images,
                                config, e, rng_b);
    log.ce_loss_a = la.ce;
    log.mse_loss_a = la.mse;
    log.ce_loss_b = lb.ce;
    log.mse_loss_b = lb.mse;

    const auto pa = predict_labels(state.model_a, images);
    const auto pb = predict_labels(state.model_b, images);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) agree += pa[i] == pb[i];
    log.agreement = static_cast<double>(agree) / static_cast<double>(pa.size());
    state.epoch = e + 1;
    result.history.push_back(std::move(log));
  }
  result.model_a = std::move(state.model_a);
  result.model_b = std::move(state.model_b);
  return result;
}

std::string to_json_line(const TTTEpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["refreshed"] = log.refreshed;
  j["labels_changed"] = log.labels_changed;
  j["lambda_u"] = log.lambda_u;
  j["labeled_a"] = log.labeled_a;
  j["labeled_b"] = log.labeled_b;
  j["unlabeled_a"] = log.noisy_labels.size() - log.labeled_a;
  j["unlabeled_b"] = log.noisy_labels.size() - log.labeled_b;
  j["fallback_a"] = log.fallback_a;
  j["fallback_b"] = log.fallback_b;
  j["ce_loss_a"] = log.ce_loss_a;
  j["ce_loss_b"] = log.ce_loss_b;
  j["mse_loss_a"] = log.mse_loss_a;
  j["mse_loss_b"] = log.mse_loss_b;
  j["agreement"] = log.agreement;
  return j.dump();
}

void write_ttt_log(const std::vector<TTTEpochLog>& history,
                   const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write TTT log '" + path.string() + "'");
  for (const auto& log : history) out << to_json_line(log) << '\n';
  if (!out) throw IoError("write failed for TTT log '" + path.string() + "'");
}

}  // namespace oodcv
