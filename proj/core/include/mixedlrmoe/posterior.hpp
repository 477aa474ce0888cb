#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/model.hpp"

namespace mixedlrmoe {

// Lower bound applied to variational variances; keeps every factor Gaussian
// non-degenerate.
inline constexpr double kVarianceFloor = 1e-12;

// Mean-field Gaussian posterior over the random effects: an independent
// N(mu, sigma2) per factor of every level.
struct VariationalPosterior {
  std::vector<Eigen::VectorXd> mu;      // per level, length S_l
  std::vector<Eigen::VectorXd> sigma2;  // per level, entries >= kVarianceFloor

  static VariationalPosterior prior(const RandomEffectDesign& design);
  int levels() const { return static_cast<int>(mu.size()); }
  void validate(const RandomEffectDesign& design) const;
};

// M joint standard-normal draws (one value per factor per draw), retained so
// that reparameterized gradients and common-random-number comparisons can
// re-realize w = mu + sigma .* v under updated variational parameters.
struct EffectSampleBatch {
  std::vector<Eigen::MatrixXd> v;  // per level: S_l x M
  int num_draws = 0;

  int draws() const { return num_draws; }
  RandomEffectsRealization realize(const VariationalPosterior& post,
                                   int m) const;
};

EffectSampleBatch draw_standard_normals(const RandomEffectDesign& design,
                                        std::uint64_t seed, int num_draws);

// M realizations of all effects under q, with the underlying standard-normal
// draws kept alongside.
struct EffectSamples {
  std::vector<RandomEffectsRealization> w;
  EffectSampleBatch normals;
};
EffectSamples sample_w(const VariationalPosterior& post, std::uint64_t seed,
                       int num_draws);

// KL(q || standard normal prior) = 1/2 sum_{l,s} (sigma2 + mu^2 - 1 - ln sigma2).
// Zero exactly when q equals the prior.
double kl_to_prior(const VariationalPosterior& post);

// Monte Carlo ELBO: (1/M) sum_m log Ltilde(w_m) - KL(q || prior).
double elbo_estimate(const Dataset& data, const MixedLRMoEModel& model,
                     const VariationalPosterior& post, int num_draws,
                     std::uint64_t seed,
                     LikelihoodDiagnostics* diag = nullptr);
// Same estimate from fixed draws and a precomputed log-density matrix; this
// is what the fitting loop uses for common-random-number comparisons.
double elbo_from_batch(const Dataset& data, const MixedLRMoEModel& model,
                       const VariationalPosterior& post,
                       const EffectSampleBatch& batch,
                       const Eigen::MatrixXd& log_dens,
                       LikelihoodDiagnostics* diag = nullptr);

// First and second derivatives w.r.t. the effect values of one level, of the
// z-weighted complete-data gating term sum_i sum_j z_ij log pi_ij(w), at a
// single realization. Each observation touches exactly one factor per level,
// so the Hessian is diagonal; entries are <= 0.
struct WDerivatives {
  Eigen::VectorXd gradient;      // per factor of the level
  Eigen::VectorXd hessian_diag;  // per factor, nonpositive
};
WDerivatives grad_wrt_w(const Dataset& data, const MixedLRMoEModel& model,
                        const RandomEffectsRealization& effects,
                        const Eigen::MatrixXd& responsibilities, int level);

// Monte Carlo objective of the variational subproblem: the z-weighted gating
// term averaged over the draws, minus KL(q || prior). The expert term of the
// complete-data loglik does not depend on q and is dropped. Exposed as the
// acceptance target for the damped-Newton updates and for derivative checks.
double variational_objective(const Dataset& data, const MixedLRMoEModel& model,
                             const Eigen::MatrixXd& responsibilities,
                             const VariationalPosterior& post,
                             const EffectSampleBatch& batch);

// Reparameterized derivatives of the objective above for one level, w.r.t.
// mu and u = ln sigma2, through w = mu + exp(u/2) v. Includes the exact KL
// derivatives. hess_* are the diagonal (per-factor) second derivatives.
struct VariationalLevelDerivs {
  Eigen::VectorXd grad_mu, hess_mu;
  Eigen::VectorXd grad_logvar, hess_logvar;
};
VariationalLevelDerivs variational_level_derivs(
    const Dataset& data, const MixedLRMoEModel& model,
    const Eigen::MatrixXd& responsibilities, const VariationalPosterior& post,
    const EffectSampleBatch& batch, int level);

struct StepControls {
  int max_iters = 20;  // Newton rounds per level
  int max_halvings = 20;
  double ridge = 1e-8;        // curvature floor for the log-variance step
  double improve_tol = 1e-9;  // stop once the objective gain falls below this
};

// CM-step for the variational parameters: per level, damped-Newton coordinate
// ascent alternating mu and ln sigma2 steps, each accepted only if the
// common-random-number objective does not decrease (else halved, up to
// max_halvings; a stalled level keeps its previous values and records a
// warning). Variances never fall below kVarianceFloor.
VariationalPosterior update_variational(
    const Dataset& data, const MixedLRMoEModel& model,
    const VariationalPosterior& post, const Eigen::MatrixXd& responsibilities,
    int num_draws, std::uint64_t seed, const StepControls& controls = {},
    std::vector<std::string>* warnings = nullptr);
VariationalPosterior update_variational_batch(
    const Dataset& data, const MixedLRMoEModel& model,
    const VariationalPosterior& post, const Eigen::MatrixXd& responsibilities,
    const EffectSampleBatch& batch, const StepControls& controls = {},
    std::vector<std::string>* warnings = nullptr);

}  // namespace mixedlrmoe
