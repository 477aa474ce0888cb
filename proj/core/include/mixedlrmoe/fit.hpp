#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/posterior.hpp"

namespace mixedlrmoe {

// Thrown when fitting cannot proceed numerically (e.g. the ELBO is -inf at
// initialization because some observation has zero density under every
// class). Distinct from std::invalid_argument, which covers malformed inputs.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitConfig {
  int num_classes = 1;
  // Family tags per class; each inner vector has either one tag (broadcast
  // over response dimensions) or exactly D tags. A single-row grid is
  // broadcast over classes.
  std::vector<std::vector<ExpertTag>> expert_tags;

  int mc_samples = 5;        // M, Monte Carlo draws per ECM iteration
  int max_ecm_iters = 200;
  double elbo_rel_tol = 1e-6;  // windowed relative-change stop rule
  int elbo_window = 5;
  int irls_max_iters = 20;   // gating Newton sweeps per CM-step
  double irls_grad_tol = 1e-6;
  int vi_max_iters = 20;     // variational Newton rounds per level
  double hessian_ridge = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

struct FitReport {
  // Common-random-number ELBO estimates: elbo_trace[t] uses iteration t's
  // draws with the *updated* parameters, elbo_pre_trace[t] the same draws
  // with the parameters the iteration started from. The difference isolates
  // the per-iteration ascent from draw-to-draw resampling noise.
  std::vector<double> elbo_trace;
  std::vector<double> elbo_pre_trace;
  bool converged = false;
  std::string stop_reason;
  int n_params = 0;  // effective parameter count after pinning
  Eigen::VectorXd responsibility_mass;  // column sums of the final E-step
  std::vector<std::string> warnings;
  std::uint64_t final_elbo_seed = 0;  // draw seed behind elbo_trace.back()
};

struct FitResult {
  MixedLRMoEModel model;
  VariationalPosterior posterior;
  FitReport report;
};

// Clustered method-of-moments start: k-means on log1p(y) (k-means++ seeding,
// up to 10 restarts), per-cluster moment matching for the experts,
// intercept-only gating at the cluster proportions, posterior at the prior.
std::pair<MixedLRMoEModel, VariationalPosterior> cmm_initialize(
    const Dataset& data, const FitConfig& config,
    std::vector<std::string>* warnings = nullptr);

// Monte Carlo E-step: responsibilities averaged over M posterior draws.
// Rows sum to one.
Eigen::MatrixXd e_step(const Dataset& data, const MixedLRMoEModel& model,
                       const VariationalPosterior& post, int num_draws,
                       std::uint64_t seed,
                       std::vector<std::string>* warnings = nullptr);
Eigen::MatrixXd e_step_batch(const Dataset& data, const MixedLRMoEModel& model,
                             const VariationalPosterior& post,
                             const EffectSampleBatch& batch,
                             const Eigen::MatrixXd& log_dens,
                             std::vector<std::string>* warnings = nullptr);

// Monte Carlo Q1: (1/M) sum_m sum_i sum_j z_ij log pi_ij(w_m) — the gating
// part of the expected complete-data loglik, the ascent target of the
// gating Newton steps. Exposed for tests.
double gating_objective(const Dataset& data, const MixedLRMoEModel& model,
                        const Eigen::MatrixXd& responsibilities,
                        const VariationalPosterior& post,
                        const EffectSampleBatch& batch);

// Gradient and Hessian of the Monte Carlo Q1 w.r.t. one class's alpha row
// (wrt_beta = false) or beta row (wrt_beta = true), at fixed draws.
// grad = (1/M) sum_m B^T (z_j - pi_j^m), hess = -(1/M) sum_m B^T diag(pi (1-pi)) B
// with B = X for alpha and B = W_m (the gathered effects of draw m) for beta.
struct GatingDerivs {
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;  // negative semidefinite
};
GatingDerivs gating_derivs(const Dataset& data, const MixedLRMoEModel& model,
                           const Eigen::MatrixXd& responsibilities,
                           const VariationalPosterior& post,
                           const EffectSampleBatch& batch, int clazz,
                           bool wrt_beta);

// CM-step for the gating coefficients: blockwise Newton sweeps over the free
// alpha rows (classes 1..g-1) and free beta rows (classes 2..g-1), each step
// halved until the common-random-number Q1 does not decrease. Pinned rows
// are never touched. Returns the updated rows.
struct GatingUpdate {
  Eigen::MatrixXd alpha;
  Eigen::MatrixXd beta;
};
GatingUpdate cm_step_gating(const Dataset& data, const MixedLRMoEModel& model,
                            const Eigen::MatrixXd& responsibilities,
                            const VariationalPosterior& post,
                            const EffectSampleBatch& batch,
                            const FitConfig& config,
                            std::vector<std::string>* warnings = nullptr);

// CM-step for the experts: responsibility-weighted maximum likelihood per
// class and dimension, keeping the previous parameters whenever they score
// at least as well (protects the ascent property). A class whose
// responsibility mass is negligible is frozen with a warning.
ExpertGrid cm_step_experts(const Dataset& data,
                           const Eigen::MatrixXd& responsibilities,
                           const ExpertGrid& current,
                           std::vector<std::string>* warnings = nullptr);

// Full stochastic variational ECM loop. The warm-start overload begins from
// the given parameters instead of cmm_initialize.
FitResult fit(const Dataset& data, const FitConfig& config);
FitResult fit(const Dataset& data, const FitConfig& config,
              const MixedLRMoEModel& init_model,
              const VariationalPosterior& init_posterior);

// Free parameters after pinning: (g-1) P gating coefficients, max(g-2, 0) L
// effect loadings, plus the expert parameter counts.
int effective_param_count(const MixedLRMoEModel& model);

}  // namespace mixedlrmoe
