#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <utility>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/posterior.hpp"

namespace mixedlrmoe {

// Central Gaussian credible interval mu -+ z_{(1+coverage)/2} sigma for one
// factor's variational posterior. coverage must lie in (0, 1).
std::pair<double, double> credible_interval(const VariationalPosterior& post,
                                            int level, int factor,
                                            double coverage);

// Everything a renewal quote needs for one policyholder profile: the owned
// factors' posterior moments and central credible intervals (90/95/97.5/99),
// the posterior class probabilities and the pure premium. A factor id of -1
// marks a factor unseen in training, handled through the prior.
struct PolicyholderPosterior {
  std::vector<int> factor_ids;            // per level; -1 = unseen
  std::vector<double> effect_mean;        // per level
  std::vector<double> effect_var;
  std::vector<std::pair<double, double>> ci90, ci95, ci975, ci99;  // per level
  Eigen::VectorXd class_probs;
  double premium = 0.0;
};
PolicyholderPosterior policyholder_posterior(const Eigen::VectorXd& x,
                                             const std::vector<int>& factor_ids,
                                             const MixedLRMoEModel& model,
                                             const VariationalPosterior& post,
                                             int num_draws, std::uint64_t seed,
                                             int dim = 0);

// A-posteriori class probabilities for a policyholder profile: gating probs
// averaged over M draws of the profile's effects from the variational
// posterior. factor_ids holds one 0-based factor per level; pass -1 for a
// factor unseen in training, which falls back to the standard-normal prior.
Eigen::VectorXd posterior_class_probs(const Eigen::VectorXd& x,
                                      const std::vector<int>& factor_ids,
                                      const MixedLRMoEModel& model,
                                      const VariationalPosterior& post,
                                      int num_draws, std::uint64_t seed);

// A-posteriori premium: (1/M) sum_m sum_j pi_j(x, w_m) E[y_dim | class j].
double posterior_premium(const Eigen::VectorXd& x,
                         const std::vector<int>& factor_ids,
                         const MixedLRMoEModel& model,
                         const VariationalPosterior& post, int num_draws,
                         std::uint64_t seed, int dim = 0);

// Ordered Lorenz curve: policies sorted by premium ascending (ties keep
// their original order), cumulative premium share on x, cumulative loss
// share on y, with the implicit origin prepended. gini is twice the area
// between the curve and the diagonal, by exact trapezoids:
//   sum_k (x_{k+1} - x_k) (x_k + x_{k+1} - y_k - y_{k+1}).
// gini_se is a nonparametric bootstrap standard error over policy resamples.
struct LorenzCurve {
  Eigen::VectorXd premium_share;  // n + 1 points, first 0, last 1
  Eigen::VectorXd loss_share;
  double gini = 0.0;
  double gini_se = 0.0;
};
LorenzCurve ordered_lorenz(const Eigen::VectorXd& premiums,
                           const Eigen::VectorXd& losses,
                           int bootstrap_resamples = 500,
                           std::uint64_t seed = 0);

// Held-out scores. The posterior must match data.design: when the test data
// introduces factors unseen in training, extend the design and pad the
// posterior with prior entries first (the I/O layer does this for files).
// approx_loglik is an importance-weighted Monte Carlo estimate of the
// marginal log-likelihood with q as the proposal (exact when L = 0, one
// log-sum-exp per factor when L = 1, joint over all effects otherwise);
// aic = 2 k - 2 approx_loglik with k = effective_param_count.
struct EvalScores {
  double elbo = 0.0;
  double approx_loglik = 0.0;
  double aic = 0.0;
  int n_params = 0;
};
EvalScores evaluate(const MixedLRMoEModel& model,
                    const VariationalPosterior& post, const Dataset& data,
                    int num_draws, std::uint64_t seed);

// Pads a posterior fitted under train_design with standard-normal entries
// for the extra factors of test_design (factor counts may only grow).
VariationalPosterior extend_posterior_with_prior(
    const VariationalPosterior& post, const RandomEffectDesign& train_design,
    const RandomEffectDesign& test_design);

}  // namespace mixedlrmoe
