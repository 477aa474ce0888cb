#include "mixedlrmoe/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace mixedlrmoe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Row-wise log-sum-exp with max subtraction; rows of all -inf give -inf.
double logsumexp_row(const Eigen::MatrixXd& m, Eigen::Index i) {
  const double mx = m.row(i).maxCoeff();
  if (mx == kNegInf) return kNegInf;
  double acc = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) acc += std::exp(m(i, j) - mx);
  return mx + std::log(acc);
}

void check_effects_shape(const RandomEffectDesign& design,
                         const RandomEffectsRealization& effects,
                         const char* where) {
  if (effects.levels() != design.levels()) {
    throw std::invalid_argument(std::string(where) +
                                ": effects level count does not match design");
  }
  for (int l = 0; l < design.levels(); ++l) {
    if (effects.w[l].size() != design.factor_counts[l]) {
      throw std::invalid_argument(std::string(where) + ": effects at level " +
                                  std::to_string(l + 1) +
                                  " do not match the factor count");
    }
    if (!effects.w[l].allFinite()) {
      throw std::invalid_argument(std::string(where) +
                                  ": effects contain non-finite values");
    }
  }
}

void check_compatible(const Dataset& data, const MixedLRMoEModel& model,
                      const char* where) {
  if (data.covariate_dim() != model.covariate_dim()) {
    throw std::invalid_argument(std::string(where) +
                                ": covariate dimension mismatch");
  }
  if (data.response_dim() != model.response_dim()) {
    throw std::invalid_argument(std::string(where) +
                                ": response dimension mismatch");
  }
  if (data.levels() != model.levels()) {
    throw std::invalid_argument(std::string(where) +
                                ": random-effect level count mismatch");
  }
}

}  // namespace

int RandomEffectDesign::total_factors() const {
  int total = 0;
  for (int s : factor_counts) total += s;
  return total;
}

void RandomEffectDesign::validate() const {
  for (std::size_t l = 0; l < factor_counts.size(); ++l) {
    if (factor_counts[l] < 1) {
      throw std::invalid_argument("RandomEffectDesign: level " +
                                  std::to_string(l + 1) +
                                  " must have at least one factor");
    }
  }
}

void Dataset::validate() const {
  design.validate();
  if (X.rows() < 1) {
    throw std::invalid_argument("Dataset: needs at least one observation");
  }
  if (Y.rows() != X.rows() || factors.rows() != X.rows()) {
    throw std::invalid_argument("Dataset: X, Y and factors row counts differ");
  }
  if (X.cols() < 1) {
    throw std::invalid_argument("Dataset: needs at least the intercept column");
  }
  if (Y.cols() < 1) {
    throw std::invalid_argument("Dataset: needs at least one response column");
  }
  if (factors.cols() != design.levels()) {
    throw std::invalid_argument(
        "Dataset: factor columns do not match the design's level count");
  }
  if (!X.allFinite() || !Y.allFinite()) {
    throw std::invalid_argument("Dataset: non-finite covariate or response");
  }
  if ((X.col(0).array() != 1.0).any()) {
    throw std::invalid_argument("Dataset: column 0 must be the all-ones intercept");
  }
  for (int l = 0; l < design.levels(); ++l) {
    const int s_l = design.factor_counts[l];
    for (Eigen::Index i = 0; i < factors.rows(); ++i) {
      const int f = factors(i, l);
      if (f < 0 || f >= s_l) {
        throw std::invalid_argument(
            "Dataset: factor index out of range at row " + std::to_string(i) +
            ", level " + std::to_string(l + 1));
      }
    }
  }
}

Eigen::MatrixXd gather_effects(const Dataset& data,
                               const RandomEffectsRealization& effects) {
  check_effects_shape(data.design, effects, "gather_effects");
  const int L = data.levels();
  Eigen::MatrixXd out(data.n(), L);
  for (int l = 0; l < L; ++l) {
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      out(i, l) = effects.w[l](data.factors(i, l));
    }
  }
  return out;
}

void MixedLRMoEModel::validate() const {
  design.validate();
  const int g = classes();
  if (g < 1) {
    throw std::invalid_argument("MixedLRMoEModel: needs at least one class");
  }
  if (alpha.cols() < 1) {
    throw std::invalid_argument("MixedLRMoEModel: alpha needs the intercept column");
  }
  if (beta.rows() != g) {
    throw std::invalid_argument("MixedLRMoEModel: beta row count must equal g");
  }
  if (beta.cols() != design.levels()) {
    throw std::invalid_argument(
        "MixedLRMoEModel: beta columns must match the design's level count");
  }
  if (!alpha.allFinite() || !beta.allFinite()) {
    throw std::invalid_argument("MixedLRMoEModel: non-finite gating coefficient");
  }
  if (static_cast<int>(experts.size()) != g) {
    throw std::invalid_argument("MixedLRMoEModel: expert grid must have g rows");
  }
  if (experts.front().empty()) {
    throw std::invalid_argument(
        "MixedLRMoEModel: needs at least one response dimension");
  }
  for (int j = 0; j < g; ++j) {
    if (experts[j].size() != experts.front().size()) {
      throw std::invalid_argument(
          "MixedLRMoEModel: ragged expert grid at class " + std::to_string(j + 1));
    }
    for (const ExpertFamily& f : experts[j]) validate_expert(f);
  }
}

bool MixedLRMoEModel::satisfies_identifiability(double tol) const {
  const int g = classes();
  if ((alpha.row(g - 1).array().abs() > tol).any()) return false;
  if (beta.cols() > 0) {
    if ((beta.row(g - 1).array().abs() > tol).any()) return false;
    if (g >= 2 && ((beta.row(0).array() - 1.0).abs() > tol).any()) return false;
  }
  return true;
}

void MixedLRMoEModel::enforce_identifiability() {
  const int g = classes();
  alpha.row(g - 1).setZero();
  if (beta.cols() > 0) {
    beta.row(g - 1).setZero();
    if (g >= 2) beta.row(0).setOnes();
  }
}

Eigen::VectorXd gating_probs(const Eigen::VectorXd& x,
                             const Eigen::VectorXd& w_obs,
                             const MixedLRMoEModel& model) {
  if (x.size() != model.covariate_dim()) {
    throw std::invalid_argument("gating_probs: covariate length mismatch");
  }
  if (w_obs.size() != model.levels()) {
    throw std::invalid_argument("gating_probs: effect length must equal the level count");
  }
  if (!x.allFinite() || !w_obs.allFinite() || !model.alpha.allFinite() ||
      !model.beta.allFinite()) {
    throw std::invalid_argument("gating_probs: non-finite input");
  }
  Eigen::VectorXd score = model.alpha * x;
  if (model.levels() > 0) score += model.beta * w_obs;
  const double mx = score.maxCoeff();
  Eigen::VectorXd p = (score.array() - mx).exp();
  p /= p.sum();
  // Guard against underflow: the softmax of finite scores is positive.
  p = p.cwiseMax(std::numeric_limits<double>::min());
  return p;
}

Eigen::MatrixXd gating_log_probs(const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& gathered_effects,
                                 const MixedLRMoEModel& model) {
  if (X.cols() != model.covariate_dim()) {
    throw std::invalid_argument("gating_log_probs: covariate dimension mismatch");
  }
  if (model.levels() > 0 && (gathered_effects.rows() != X.rows() ||
                             gathered_effects.cols() != model.levels())) {
    throw std::invalid_argument("gating_log_probs: gathered effects shape mismatch");
  }
  Eigen::MatrixXd score = X * model.alpha.transpose();
  if (model.levels() > 0) score += gathered_effects * model.beta.transpose();
  for (Eigen::Index i = 0; i < score.rows(); ++i) {
    const double lse = logsumexp_row(score, i);
    score.row(i).array() -= lse;
  }
  return score;
}

Eigen::MatrixXd log_density_matrix(const Dataset& data,
                                   const MixedLRMoEModel& model) {
  check_compatible(data, model, "log_density_matrix");
  const int g = model.classes();
  const Eigen::Index d_dim = data.response_dim();
  Eigen::MatrixXd logf(data.n(), g);
  for (int j = 0; j < g; ++j) {
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      double acc = 0.0;
      for (Eigen::Index d = 0; d < d_dim; ++d) {
        acc += expert_logpdf(model.experts[j][d], data.Y(i, d));
      }
      logf(i, j) = acc;
    }
  }
  return logf;
}

double conditional_loglik_from(const Eigen::MatrixXd& log_gate,
                               const Eigen::MatrixXd& log_dens,
                               LikelihoodDiagnostics* diag) {
  double total = 0.0;
  bool hit_zero = false;
  for (Eigen::Index i = 0; i < log_gate.rows(); ++i) {
    double mx = kNegInf;
    for (Eigen::Index j = 0; j < log_gate.cols(); ++j) {
      mx = std::max(mx, log_gate(i, j) + log_dens(i, j));
    }
    if (mx == kNegInf) {
      hit_zero = true;
      if (diag) diag->zero_density_rows.push_back(i);
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < log_gate.cols(); ++j) {
      acc += std::exp(log_gate(i, j) + log_dens(i, j) - mx);
    }
    total += mx + std::log(acc);
  }
  return hit_zero ? kNegInf : total;
}

double conditional_loglik(const Dataset& data, const MixedLRMoEModel& model,
                          const RandomEffectsRealization& effects,
                          LikelihoodDiagnostics* diag) {
  data.validate();
  model.validate();
  check_compatible(data, model, "conditional_loglik");
  check_effects_shape(data.design, effects, "conditional_loglik");
  const Eigen::MatrixXd gathered = gather_effects(data, effects);
  const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
  const Eigen::MatrixXd log_dens = log_density_matrix(data, model);
  return conditional_loglik_from(log_gate, log_dens, diag);
}

Eigen::MatrixXd responsibilities_from(const Eigen::MatrixXd& log_gate,
                                      const Eigen::MatrixXd& log_dens,
                                      LikelihoodDiagnostics* diag) {
  const Eigen::Index n = log_gate.rows();
  const Eigen::Index g = log_gate.cols();
  Eigen::MatrixXd z(n, g);
  Eigen::Index degenerate = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = kNegInf;
    for (Eigen::Index j = 0; j < g; ++j) {
      z(i, j) = log_gate(i, j) + log_dens(i, j);
      mx = std::max(mx, z(i, j));
    }
    if (mx == kNegInf) {
      // Zero mixture density: no information about the class.
      z.row(i).setConstant(1.0 / static_cast<double>(g));
      ++degenerate;
      if (diag) diag->zero_density_rows.push_back(i);
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < g; ++j) {
      z(i, j) = std::exp(z(i, j) - mx);
      acc += z(i, j);
    }
    z.row(i) /= acc;
  }
  if (degenerate > 0 && diag) {
    diag->warnings.push_back(
        std::to_string(degenerate) +
        " observation(s) had zero density under every class; their "
        "responsibilities were set to uniform");
  }
  return z;
}

Eigen::MatrixXd latent_class_responsibilities_given_w(
    const Dataset& data, const MixedLRMoEModel& model,
    const RandomEffectsRealization& effects, LikelihoodDiagnostics* diag) {
  data.validate();
  model.validate();
  check_compatible(data, model, "latent_class_responsibilities_given_w");
  check_effects_shape(data.design, effects,
                      "latent_class_responsibilities_given_w");
  const Eigen::MatrixXd gathered = gather_effects(data, effects);
  const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
  const Eigen::MatrixXd log_dens = log_density_matrix(data, model);
  return responsibilities_from(log_gate, log_dens, diag);
}

}  // namespace mixedlrmoe
