#include "mixedlrmoe/analytics.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedlrmoe/fit.hpp"
#include "mixedlrmoe/rng.hpp"

namespace mixedlrmoe {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

void check_profile(const Eigen::VectorXd& x, const std::vector<int>& factor_ids,
                   const MixedLRMoEModel& model,
                   const VariationalPosterior& post, int num_draws,
                   const char* where) {
  if (x.size() != model.covariate_dim() || !x.allFinite()) {
    throw std::invalid_argument(std::string(where) + ": bad covariate vector");
  }
  if (static_cast<int>(factor_ids.size()) != model.levels() ||
      post.levels() != model.levels()) {
    throw std::invalid_argument(std::string(where) +
                                ": factor ids and posterior must cover every level");
  }
  for (int l = 0; l < model.levels(); ++l) {
    if (factor_ids[l] >= post.mu[l].size() || factor_ids[l] < -1) {
      throw std::invalid_argument(std::string(where) + ": factor id at level " +
                                  std::to_string(l + 1) + " out of range");
    }
  }
  if (num_draws < 1) {
    throw std::invalid_argument(std::string(where) + ": need at least one draw");
  }
}

// Plain Gini computation shared by the point estimate and the bootstrap:
// stable ascending sort by premium, trapezoid area doubling.
double gini_of(const std::vector<double>& premiums,
               const std::vector<double>& losses) {
  const std::size_t n = premiums.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return premiums[a] < premiums[b];
  });
  double total_p = 0.0, total_l = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total_p += premiums[i];
    total_l += losses[i];
  }
  double gini = 0.0;
  double xp = 0.0, yp = 0.0, cp = 0.0, cl = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    cp += premiums[order[k]];
    cl += losses[order[k]];
    const double x = cp / total_p;
    const double y = cl / total_l;
    gini += (x - xp) * (xp + x - yp - y);
    xp = x;
    yp = y;
  }
  return gini;
}

}  // namespace

std::pair<double, double> credible_interval(const VariationalPosterior& post,
                                            int level, int factor,
                                            double coverage) {
  if (level < 0 || level >= post.levels()) {
    throw std::invalid_argument("credible_interval: level out of range");
  }
  if (factor < 0 || factor >= post.mu[level].size()) {
    throw std::invalid_argument("credible_interval: factor out of range");
  }
  if (!(coverage > 0.0 && coverage < 1.0)) {
    throw std::invalid_argument("credible_interval: coverage must lie in (0, 1)");
  }
  const double z = boost::math::quantile(boost::math::normal_distribution<>(),
                                         0.5 * (1.0 + coverage));
  const double mu = post.mu[level](factor);
  const double sd = std::sqrt(post.sigma2[level](factor));
  return {mu - z * sd, mu + z * sd};
}

Eigen::VectorXd posterior_class_probs(const Eigen::VectorXd& x,
                                      const std::vector<int>& factor_ids,
                                      const MixedLRMoEModel& model,
                                      const VariationalPosterior& post,
                                      int num_draws, std::uint64_t seed) {
  model.validate();
  check_profile(x, factor_ids, model, post, num_draws, "posterior_class_probs");
  Rng rng(seed);
  Eigen::VectorXd w_obs(model.levels());
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.classes());
  for (int m = 0; m < num_draws; ++m) {
    for (int l = 0; l < model.levels(); ++l) {
      const int s = factor_ids[l];
      // Unseen factor: new-policyholder path, sample from the prior.
      w_obs(l) = s < 0 ? rng.normal()
                       : post.mu[l](s) +
                             std::sqrt(post.sigma2[l](s)) * rng.normal();
    }
    acc += gating_probs(x, w_obs, model);
  }
  return acc / static_cast<double>(num_draws);
}

double posterior_premium(const Eigen::VectorXd& x,
                         const std::vector<int>& factor_ids,
                         const MixedLRMoEModel& model,
                         const VariationalPosterior& post, int num_draws,
                         std::uint64_t seed, int dim) {
  if (dim < 0 || dim >= model.response_dim()) {
    throw std::invalid_argument("posterior_premium: response dimension out of range");
  }
  const Eigen::VectorXd probs =
      posterior_class_probs(x, factor_ids, model, post, num_draws, seed);
  double premium = 0.0;
  for (int j = 0; j < model.classes(); ++j) {
    premium += probs(j) *
               expert_mean(model.experts[j][static_cast<std::size_t>(dim)]);
  }
  return premium;
}

PolicyholderPosterior policyholder_posterior(const Eigen::VectorXd& x,
                                             const std::vector<int>& factor_ids,
                                             const MixedLRMoEModel& model,
                                             const VariationalPosterior& post,
                                             int num_draws, std::uint64_t seed,
                                             int dim) {
  PolicyholderPosterior out;
  out.factor_ids = factor_ids;
  out.class_probs =
      posterior_class_probs(x, factor_ids, model, post, num_draws, seed);
  out.premium = 0.0;
  for (int j = 0; j < model.classes(); ++j) {
    out.premium += out.class_probs(j) *
                   expert_mean(model.experts[j][static_cast<std::size_t>(dim)]);
  }
  for (int l = 0; l < model.levels(); ++l) {
    const int s = factor_ids[l];
    const double mu = s < 0 ? 0.0 : post.mu[l](s);
    const double var = s < 0 ? 1.0 : post.sigma2[l](s);
    out.effect_mean.push_back(mu);
    out.effect_var.push_back(var);
    const auto ci = [&](double cov) -> std::pair<double, double> {
      const double z = boost::math::quantile(
          boost::math::normal_distribution<>(), 0.5 * (1.0 + cov));
      const double sd = std::sqrt(var);
      return {mu - z * sd, mu + z * sd};
    };
    out.ci90.push_back(ci(0.90));
    out.ci95.push_back(ci(0.95));
    out.ci975.push_back(ci(0.975));
    out.ci99.push_back(ci(0.99));
  }
  return out;
}

LorenzCurve ordered_lorenz(const Eigen::VectorXd& premiums,
                           const Eigen::VectorXd& losses,
                           int bootstrap_resamples, std::uint64_t seed) {
  const Eigen::Index n = premiums.size();
  if (n < 1 || losses.size() != n) {
    throw std::invalid_argument(
        "ordered_lorenz: premiums and losses must be equally sized and nonempty");
  }
  if (!premiums.allFinite() || !losses.allFinite() ||
      (premiums.array() <= 0.0).any() || (losses.array() < 0.0).any()) {
    throw std::invalid_argument(
        "ordered_lorenz: premiums must be positive and losses nonnegative");
  }
  if (!(losses.sum() > 0.0)) {
    throw std::invalid_argument(
        "ordered_lorenz: the curve is undefined when all losses are zero");
  }
  if (bootstrap_resamples < 0) {
    throw std::invalid_argument("ordered_lorenz: negative bootstrap count");
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return premiums(a) < premiums(b);
                   });

  // Totals accumulated in sorted order so the final shares are exactly 1.
  double total_p = 0.0, total_l = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    total_p += premiums(order[static_cast<std::size_t>(k)]);
    total_l += losses(order[static_cast<std::size_t>(k)]);
  }

  LorenzCurve curve;
  curve.premium_share.resize(n + 1);
  curve.loss_share.resize(n + 1);
  curve.premium_share(0) = 0.0;
  curve.loss_share(0) = 0.0;
  double cp = 0.0, cl = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cp += premiums(order[static_cast<std::size_t>(k)]);
    cl += losses(order[static_cast<std::size_t>(k)]);
    curve.premium_share(k + 1) = cp / total_p;
    curve.loss_share(k + 1) = cl / total_l;
  }

  curve.gini = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double x0 = curve.premium_share(k), x1 = curve.premium_share(k + 1);
    const double y0 = curve.loss_share(k), y1 = curve.loss_share(k + 1);
    curve.gini += (x1 - x0) * (x0 + x1 - y0 - y1);
  }

  if (bootstrap_resamples > 0) {
    std::vector<double> ginis;
    ginis.reserve(static_cast<std::size_t>(bootstrap_resamples));
    std::vector<double> bp(static_cast<std::size_t>(n)),
        bl(static_cast<std::size_t>(n));
    for (int b = 0; b < bootstrap_resamples; ++b) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b) + 1));
      double lsum = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index pick =
            static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
        bp[static_cast<std::size_t>(i)] = premiums(pick);
        bl[static_cast<std::size_t>(i)] = losses(pick);
        lsum += losses(pick);
      }
      if (!(lsum > 0.0)) continue;  // degenerate resample carries no curve
      ginis.push_back(gini_of(bp, bl));
    }
    if (ginis.size() >= 2) {
      const double mean =
          std::accumulate(ginis.begin(), ginis.end(), 0.0) /
          static_cast<double>(ginis.size());
      double ss = 0.0;
      for (double v : ginis) ss += (v - mean) * (v - mean);
      curve.gini_se = std::sqrt(ss / static_cast<double>(ginis.size() - 1));
    }
  }
  return curve;
}

VariationalPosterior extend_posterior_with_prior(
    const VariationalPosterior& post, const RandomEffectDesign& train_design,
    const RandomEffectDesign& test_design) {
  post.validate(train_design);
  test_design.validate();
  if (test_design.levels() != train_design.levels()) {
    throw std::invalid_argument(
        "extend_posterior_with_prior: level counts differ");
  }
  VariationalPosterior out = post;
  for (int l = 0; l < train_design.levels(); ++l) {
    const int extra =
        test_design.factor_counts[l] - train_design.factor_counts[l];
    if (extra < 0) {
      throw std::invalid_argument(
          "extend_posterior_with_prior: factor counts may only grow");
    }
    if (extra == 0) continue;
    Eigen::VectorXd mu(test_design.factor_counts[l]);
    Eigen::VectorXd s2(test_design.factor_counts[l]);
    mu << out.mu[l], Eigen::VectorXd::Zero(extra);
    s2 << out.sigma2[l], Eigen::VectorXd::Ones(extra);
    out.mu[l] = std::move(mu);
    out.sigma2[l] = std::move(s2);
  }
  return out;
}

EvalScores evaluate(const MixedLRMoEModel& model,
                    const VariationalPosterior& post, const Dataset& data,
                    int num_draws, std::uint64_t seed) {
  data.validate();
  model.validate();
  post.validate(data.design);
  if (num_draws < 1) {
    throw std::invalid_argument("evaluate: need at least one draw");
  }
  if (data.covariate_dim() != model.covariate_dim() ||
      data.response_dim() != model.response_dim() ||
      data.levels() != model.levels()) {
    throw std::invalid_argument("evaluate: data and model shapes disagree");
  }

  EvalScores scores;
  scores.n_params = effective_param_count(model);
  scores.elbo = elbo_estimate(data, model, post, num_draws, seed);

  const Eigen::MatrixXd log_dens = log_density_matrix(data, model);
  const int levels = data.levels();
  if (levels == 0) {
    const Eigen::MatrixXd log_gate =
        gating_log_probs(data.X, Eigen::MatrixXd(data.n(), 0), model);
    scores.approx_loglik = conditional_loglik_from(log_gate, log_dens);
  } else {
    // Importance-weighted estimate with q as the proposal. Factors that no
    // observation touches integrate to one exactly and are skipped.
    const int m_draws = num_draws;
    const EffectSampleBatch batch = draw_standard_normals(
        data.design, derive_seed(seed, 0x15a11ce), m_draws);

    // Per-draw, per-row conditional log-mixture values.
    Eigen::MatrixXd row_loglik(data.n(), m_draws);
    for (int m = 0; m < m_draws; ++m) {
      const RandomEffectsRealization w_m = batch.realize(post, m);
      const Eigen::MatrixXd gathered = gather_effects(data, w_m);
      const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
      for (Eigen::Index i = 0; i < data.n(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < log_gate.cols(); ++j) {
          mx = std::max(mx, log_gate(i, j) + log_dens(i, j));
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          row_loglik(i, m) = mx;
          continue;
        }
        double acc = 0.0;
        for (Eigen::Index j = 0; j < log_gate.cols(); ++j) {
          acc += std::exp(log_gate(i, j) + log_dens(i, j) - mx);
        }
        row_loglik(i, m) = mx + std::log(acc);
      }
    }

    // log phi(w) - log q(w) per factor per draw, for occupied factors.
    const auto log_ratio = [&](int l, Eigen::Index s, int m) {
      const double v = batch.v[l](s, m);
      const double w = post.mu[l](s) + std::sqrt(post.sigma2[l](s)) * v;
      const double log_prior = -0.5 * w * w - kLogSqrt2Pi;
      const double log_q =
          -0.5 * v * v - 0.5 * std::log(post.sigma2[l](s)) - kLogSqrt2Pi;
      return log_prior - log_q;
    };

    std::vector<std::vector<char>> occupied(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
      occupied[static_cast<std::size_t>(l)].assign(
          static_cast<std::size_t>(data.design.factor_counts[l]), 0);
      for (Eigen::Index i = 0; i < data.n(); ++i) {
        occupied[static_cast<std::size_t>(l)]
                [static_cast<std::size_t>(data.factors(i, l))] = 1;
      }
    }

    const auto logsumexp = [](const Eigen::VectorXd& v) {
      const double mx = v.maxCoeff();
      if (!std::isfinite(mx)) return mx;
      double acc = 0.0;
      for (Eigen::Index k = 0; k < v.size(); ++k) acc += std::exp(v(k) - mx);
      return mx + std::log(acc);
    };

    if (levels == 1) {
      // The likelihood factorizes over factors: one estimator per factor.
      const int s_count = data.design.factor_counts[0];
      Eigen::MatrixXd per_factor =
          Eigen::MatrixXd::Zero(s_count, m_draws);
      for (Eigen::Index i = 0; i < data.n(); ++i) {
        per_factor.row(data.factors(i, 0)) += row_loglik.row(i);
      }
      double total = 0.0;
      for (int s = 0; s < s_count; ++s) {
        if (!occupied[0][static_cast<std::size_t>(s)]) continue;
        Eigen::VectorXd terms(m_draws);
        for (int m = 0; m < m_draws; ++m) {
          terms(m) = per_factor(s, m) + log_ratio(0, s, m);
        }
        total += logsumexp(terms) - std::log(static_cast<double>(m_draws));
      }
      scores.approx_loglik = total;
    } else {
      Eigen::VectorXd terms(m_draws);
      for (int m = 0; m < m_draws; ++m) {
        double t = row_loglik.col(m).sum();
        for (int l = 0; l < levels; ++l) {
          for (int s = 0; s < data.design.factor_counts[l]; ++s) {
            if (occupied[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)]) {
              t += log_ratio(l, s, m);
            }
          }
        }
        terms(m) = t;
      }
      scores.approx_loglik =
          logsumexp(terms) - std::log(static_cast<double>(m_draws));
    }
  }

  scores.aic = 2.0 * scores.n_params - 2.0 * scores.approx_loglik;
  return scores;
}

}  // namespace mixedlrmoe
