#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/experts.hpp"

namespace mixedlrmoe {

// Logit-gated mixture of experts with multilevel Gaussian random effects in
// the gating: class j gets linear score alpha_j . x_i + beta_j . w_i, where
// w_i collects the effect of each level's factor for observation i, and the
// class probabilities are the softmax of the scores. Responses are modeled
// by covariate-free experts, independent across dimensions given the class.
//
// Identifiability of fitted models: the last row of alpha and beta is zero
// (reference class), and the first row of beta is all ones when g >= 2.
// Evaluation works for any parameter values; only `fit` pins rows.
struct MixedLRMoEModel {
  Eigen::MatrixXd alpha;  // g x P
  Eigen::MatrixXd beta;   // g x L
  ExpertGrid experts;     // g x D
  RandomEffectDesign design;

  int classes() const { return static_cast<int>(alpha.rows()); }
  Eigen::Index covariate_dim() const { return alpha.cols(); }
  Eigen::Index response_dim() const {
    return experts.empty() ? 0 : static_cast<Eigen::Index>(experts.front().size());
  }
  int levels() const { return design.levels(); }

  void validate() const;  // shapes, parameter domains, finiteness
  bool satisfies_identifiability(double tol = 0.0) const;
  void enforce_identifiability();  // snaps the pinned rows exactly
};

struct LikelihoodDiagnostics {
  std::vector<Eigen::Index> zero_density_rows;  // rows whose mixture density is 0
  std::vector<std::string> warnings;
};

// pi(x, w) for one observation: softmax of alpha x + beta w, computed in log
// space with max subtraction. Entries are strictly positive and sum to one.
// w_obs holds the observation's effect value per level (length L).
Eigen::VectorXd gating_probs(const Eigen::VectorXd& x,
                             const Eigen::VectorXd& w_obs,
                             const MixedLRMoEModel& model);

// Row-wise log gating probabilities for a whole dataset; gathered_effects is
// the n x L matrix from gather_effects (n x 0 when L = 0).
Eigen::MatrixXd gating_log_probs(const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& gathered_effects,
                                 const MixedLRMoEModel& model);

// log f_j(y_i) = sum_d log f_jd(y_id); n x g. Rows may contain -inf.
Eigen::MatrixXd log_density_matrix(const Dataset& data,
                                   const MixedLRMoEModel& model);

// Conditional log-likelihood given the effects: sum_i log sum_j pi_ij f_ij,
// evaluated by row-wise log-sum-exp. A row with zero mixture density makes
// the result -inf and is recorded in the diagnostics.
double conditional_loglik(const Dataset& data, const MixedLRMoEModel& model,
                          const RandomEffectsRealization& effects,
                          LikelihoodDiagnostics* diag = nullptr);
double conditional_loglik_from(const Eigen::MatrixXd& log_gate,
                               const Eigen::MatrixXd& log_dens,
                               LikelihoodDiagnostics* diag = nullptr);

// z_ij(w): posterior class probabilities given the effects. Rows sum to one;
// a zero-density row falls back to the uniform distribution with a warning.
Eigen::MatrixXd latent_class_responsibilities_given_w(
    const Dataset& data, const MixedLRMoEModel& model,
    const RandomEffectsRealization& effects,
    LikelihoodDiagnostics* diag = nullptr);
Eigen::MatrixXd responsibilities_from(const Eigen::MatrixXd& log_gate,
                                      const Eigen::MatrixXd& log_dens,
                                      LikelihoodDiagnostics* diag = nullptr);

}  // namespace mixedlrmoe
