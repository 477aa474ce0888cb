#include "mixedlrmoe/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mixedlrmoe/rng.hpp"

namespace mixedlrmoe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Accumulates, for one level and one effect realization, the per-factor
// first/second derivatives of sum_ij z_ij log pi_ij w.r.t. the factor values:
//   G_s = sum_{i in s} (z_i . b - p_i . b)
//   H_s = sum_{i in s} ((p_i . b)^2 - p_i . b^2)
// where b is the level's beta column and p_i the gating probabilities.
void accumulate_level_derivs(const Eigen::MatrixXd& probs,
                             const Eigen::VectorXd& zb,
                             const Eigen::VectorXd& beta_col,
                             const Eigen::MatrixXi& factors, int level,
                             Eigen::VectorXd& grad, Eigen::VectorXd& hess) {
  const Eigen::VectorXd pb = probs * beta_col;
  const Eigen::VectorXd pb2 = probs * beta_col.cwiseProduct(beta_col);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int s = factors(i, level);
    grad(s) += zb(i) - pb(i);
    hess(s) += pb(i) * pb(i) - pb2(i);
  }
}

Eigen::MatrixXd gating_probs_matrix(const Dataset& data,
                                    const MixedLRMoEModel& model,
                                    const RandomEffectsRealization& effects) {
  const Eigen::MatrixXd gathered = gather_effects(data, effects);
  return gating_log_probs(data.X, gathered, model).array().exp();
}

}  // namespace

VariationalPosterior VariationalPosterior::prior(
    const RandomEffectDesign& design) {
  design.validate();
  VariationalPosterior post;
  for (int s_l : design.factor_counts) {
    post.mu.push_back(Eigen::VectorXd::Zero(s_l));
    post.sigma2.push_back(Eigen::VectorXd::Ones(s_l));
  }
  return post;
}

void VariationalPosterior::validate(const RandomEffectDesign& design) const {
  if (levels() != design.levels() ||
      static_cast<int>(sigma2.size()) != design.levels()) {
    throw std::invalid_argument(
        "VariationalPosterior: level count does not match design");
  }
  for (int l = 0; l < design.levels(); ++l) {
    if (mu[l].size() != design.factor_counts[l] ||
        sigma2[l].size() != design.factor_counts[l]) {
      throw std::invalid_argument("VariationalPosterior: level " +
                                  std::to_string(l + 1) +
                                  " size does not match the factor count");
    }
    if (!mu[l].allFinite() || !sigma2[l].allFinite()) {
      throw std::invalid_argument("VariationalPosterior: non-finite parameter");
    }
    if ((sigma2[l].array() < kVarianceFloor).any()) {
      throw std::invalid_argument(
          "VariationalPosterior: variance below the floor at level " +
          std::to_string(l + 1));
    }
  }
}

RandomEffectsRealization EffectSampleBatch::realize(
    const VariationalPosterior& post, int m) const {
  if (m < 0 || m >= num_draws) {
    throw std::invalid_argument("EffectSampleBatch::realize: draw index out of range");
  }
  RandomEffectsRealization out;
  out.w.reserve(v.size());
  for (std::size_t l = 0; l < v.size(); ++l) {
    out.w.push_back(post.mu[l] +
                    post.sigma2[l].cwiseSqrt().cwiseProduct(v[l].col(m)));
  }
  return out;
}

EffectSampleBatch draw_standard_normals(const RandomEffectDesign& design,
                                        std::uint64_t seed, int num_draws) {
  design.validate();
  if (num_draws < 1) {
    throw std::invalid_argument("draw_standard_normals: need at least one draw");
  }
  EffectSampleBatch batch;
  batch.num_draws = num_draws;
  for (int l = 0; l < design.levels(); ++l) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(l)));
    Eigen::MatrixXd v(design.factor_counts[l], num_draws);
    for (Eigen::Index s = 0; s < v.rows(); ++s) {
      for (int m = 0; m < num_draws; ++m) v(s, m) = rng.normal();
    }
    batch.v.push_back(std::move(v));
  }
  return batch;
}

EffectSamples sample_w(const VariationalPosterior& post, std::uint64_t seed,
                       int num_draws) {
  RandomEffectDesign design;
  for (const auto& mu_l : post.mu) {
    design.factor_counts.push_back(static_cast<int>(mu_l.size()));
  }
  post.validate(design);
  EffectSamples out;
  out.normals = draw_standard_normals(design, seed, num_draws);
  out.w.reserve(num_draws);
  for (int m = 0; m < num_draws; ++m) {
    out.w.push_back(out.normals.realize(post, m));
  }
  return out;
}

double kl_to_prior(const VariationalPosterior& post) {
  double kl = 0.0;
  for (int l = 0; l < post.levels(); ++l) {
    kl += 0.5 * (post.sigma2[l].array() + post.mu[l].array().square() - 1.0 -
                 post.sigma2[l].array().log())
                    .sum();
  }
  return kl;
}

double elbo_from_batch(const Dataset& data, const MixedLRMoEModel& model,
                       const VariationalPosterior& post,
                       const EffectSampleBatch& batch,
                       const Eigen::MatrixXd& log_dens,
                       LikelihoodDiagnostics* diag) {
  const int m_draws = batch.draws();
  double acc = 0.0;
  for (int m = 0; m < m_draws; ++m) {
    const RandomEffectsRealization w_m = batch.realize(post, m);
    const Eigen::MatrixXd gathered = gather_effects(data, w_m);
    const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
    acc += conditional_loglik_from(log_gate, log_dens, diag);
  }
  return acc / static_cast<double>(m_draws) - kl_to_prior(post);
}

double elbo_estimate(const Dataset& data, const MixedLRMoEModel& model,
                     const VariationalPosterior& post, int num_draws,
                     std::uint64_t seed, LikelihoodDiagnostics* diag) {
  data.validate();
  model.validate();
  post.validate(data.design);
  const int m_eff = data.levels() == 0 ? 1 : num_draws;
  if (num_draws < 1) {
    throw std::invalid_argument("elbo_estimate: need at least one draw");
  }
  const EffectSampleBatch batch =
      draw_standard_normals(data.design, seed, m_eff);
  const Eigen::MatrixXd log_dens = log_density_matrix(data, model);
  return elbo_from_batch(data, model, post, batch, log_dens, diag);
}

WDerivatives grad_wrt_w(const Dataset& data, const MixedLRMoEModel& model,
                        const RandomEffectsRealization& effects,
                        const Eigen::MatrixXd& responsibilities, int level) {
  data.validate();
  model.validate();
  if (level < 0 || level >= data.levels()) {
    throw std::invalid_argument("grad_wrt_w: level out of range");
  }
  if (responsibilities.rows() != data.n() ||
      responsibilities.cols() != model.classes()) {
    throw std::invalid_argument("grad_wrt_w: responsibility shape mismatch");
  }
  const Eigen::MatrixXd probs = gating_probs_matrix(data, model, effects);
  const Eigen::VectorXd beta_col = model.beta.col(level);
  const Eigen::VectorXd zb = responsibilities * beta_col;
  WDerivatives out;
  out.gradient = Eigen::VectorXd::Zero(data.design.factor_counts[level]);
  out.hessian_diag = Eigen::VectorXd::Zero(data.design.factor_counts[level]);
  accumulate_level_derivs(probs, zb, beta_col, data.factors, level,
                          out.gradient, out.hessian_diag);
  return out;
}

double variational_objective(const Dataset& data, const MixedLRMoEModel& model,
                             const Eigen::MatrixXd& responsibilities,
                             const VariationalPosterior& post,
                             const EffectSampleBatch& batch) {
  const int m_draws = batch.draws();
  double acc = 0.0;
  for (int m = 0; m < m_draws; ++m) {
    const RandomEffectsRealization w_m = batch.realize(post, m);
    const Eigen::MatrixXd gathered = gather_effects(data, w_m);
    const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
    acc += responsibilities.cwiseProduct(log_gate).sum();
  }
  return acc / static_cast<double>(m_draws) - kl_to_prior(post);
}

VariationalLevelDerivs variational_level_derivs(
    const Dataset& data, const MixedLRMoEModel& model,
    const Eigen::MatrixXd& responsibilities, const VariationalPosterior& post,
    const EffectSampleBatch& batch, int level) {
  if (level < 0 || level >= data.levels()) {
    throw std::invalid_argument("variational_level_derivs: level out of range");
  }
  const int s_count = data.design.factor_counts[level];
  const int m_draws = batch.draws();
  const Eigen::VectorXd sigma = post.sigma2[level].cwiseSqrt();
  const Eigen::VectorXd beta_col = model.beta.col(level);
  const Eigen::VectorXd zb = responsibilities * beta_col;

  VariationalLevelDerivs out;
  out.grad_mu = Eigen::VectorXd::Zero(s_count);
  out.hess_mu = Eigen::VectorXd::Zero(s_count);
  out.grad_logvar = Eigen::VectorXd::Zero(s_count);
  out.hess_logvar = Eigen::VectorXd::Zero(s_count);

  Eigen::VectorXd g_m(s_count), h_m(s_count);
  for (int m = 0; m < m_draws; ++m) {
    const RandomEffectsRealization w_m = batch.realize(post, m);
    const Eigen::MatrixXd gathered = gather_effects(data, w_m);
    const Eigen::MatrixXd probs =
        gating_log_probs(data.X, gathered, model).array().exp();
    g_m.setZero();
    h_m.setZero();
    accumulate_level_derivs(probs, zb, beta_col, data.factors, level, g_m, h_m);
    // Reparameterization through w = mu + exp(u/2) v with u = ln sigma2:
    // dw/dmu = 1, dw/du = sigma v / 2, d2w/du2 = sigma v / 4.
    const Eigen::VectorXd a = 0.5 * sigma.cwiseProduct(batch.v[level].col(m));
    out.grad_mu += g_m;
    out.hess_mu += h_m;
    out.grad_logvar += g_m.cwiseProduct(a);
    out.hess_logvar +=
        h_m.cwiseProduct(a.cwiseProduct(a)) + 0.5 * g_m.cwiseProduct(a);
  }
  const double inv_m = 1.0 / static_cast<double>(m_draws);
  out.grad_mu *= inv_m;
  out.hess_mu *= inv_m;
  out.grad_logvar *= inv_m;
  out.hess_logvar *= inv_m;

  // Exact KL derivatives: d/dmu = mu, d2/dmu2 = 1; d/du = (sigma2 - 1)/2,
  // d2/du2 = sigma2/2. Subtracted because the objective carries -KL.
  out.grad_mu -= post.mu[level];
  out.hess_mu.array() -= 1.0;
  out.grad_logvar -= 0.5 * (post.sigma2[level].array() - 1.0).matrix();
  out.hess_logvar -= 0.5 * post.sigma2[level];
  return out;
}

VariationalPosterior update_variational_batch(
    const Dataset& data, const MixedLRMoEModel& model,
    const VariationalPosterior& post, const Eigen::MatrixXd& responsibilities,
    const EffectSampleBatch& batch, const StepControls& controls,
    std::vector<std::string>* warnings) {
  if (data.levels() == 0) return post;
  VariationalPosterior cur = post;

  // Tries mu + t * step (or the log-variance analogue), halving t until the
  // common-random-number objective stops decreasing. Returns the accepted
  // objective value, or the old one if every damping failed.
  const auto try_step = [&](int level, bool is_logvar,
                            const Eigen::VectorXd& step, double obj_old,
                            bool* accepted) -> double {
    double t = 1.0;
    for (int h = 0; h <= controls.max_halvings; ++h, t *= 0.5) {
      VariationalPosterior cand = cur;
      if (is_logvar) {
        const Eigen::VectorXd u_new =
            cur.sigma2[level].array().log().matrix() + t * step;
        cand.sigma2[level] =
            u_new.array().exp().max(kVarianceFloor).matrix();
      } else {
        cand.mu[level] = cur.mu[level] + t * step;
      }
      const double obj_new =
          variational_objective(data, model, responsibilities, cand, batch);
      if (obj_new >= obj_old && std::isfinite(obj_new)) {
        cur = std::move(cand);
        *accepted = true;
        return obj_new;
      }
    }
    *accepted = false;
    return obj_old;
  };

  for (int l = 0; l < data.levels(); ++l) {
    double obj =
        variational_objective(data, model, responsibilities, cur, batch);
    for (int round = 0; round < controls.max_iters; ++round) {
      const double obj_round_start = obj;
      bool any_accepted = false;

      VariationalLevelDerivs d = variational_level_derivs(
          data, model, responsibilities, cur, batch, l);
      // The mu curvature is bounded by the KL term: hess_mu <= -1.
      Eigen::VectorXd step_mu = -d.grad_mu.cwiseQuotient(d.hess_mu);
      bool ok = false;
      obj = try_step(l, false, step_mu, obj, &ok);
      any_accepted |= ok;

      d = variational_level_derivs(data, model, responsibilities, cur, batch,
                                   l);
      // The Monte Carlo term need not be concave in u; floor the curvature
      // and cap the raw step, relying on the halvings for acceptance.
      const Eigen::VectorXd h_u =
          d.hess_logvar.cwiseMin(-controls.ridge);
      Eigen::VectorXd step_u = (-d.grad_logvar.cwiseQuotient(h_u))
                                   .cwiseMax(-10.0)
                                   .cwiseMin(10.0);
      ok = false;
      obj = try_step(l, true, step_u, obj, &ok);
      any_accepted |= ok;

      if (!any_accepted) {
        const double gnorm = std::max(d.grad_mu.cwiseAbs().maxCoeff(),
                                      d.grad_logvar.cwiseAbs().maxCoeff());
        if (gnorm > 1e-6 && warnings) {
          warnings->push_back(
              "variational update stalled at level " + std::to_string(l + 1) +
              " (gradient norm " + std::to_string(gnorm) +
              "); keeping previous values");
        }
        break;
      }
      if (obj - obj_round_start <
          controls.improve_tol * (1.0 + std::abs(obj_round_start))) {
        break;
      }
    }
  }
  return cur;
}

VariationalPosterior update_variational(
    const Dataset& data, const MixedLRMoEModel& model,
    const VariationalPosterior& post, const Eigen::MatrixXd& responsibilities,
    int num_draws, std::uint64_t seed, const StepControls& controls,
    std::vector<std::string>* warnings) {
  data.validate();
  model.validate();
  post.validate(data.design);
  if (responsibilities.rows() != data.n() ||
      responsibilities.cols() != model.classes()) {
    throw std::invalid_argument("update_variational: responsibility shape mismatch");
  }
  if (data.levels() == 0) return post;
  if (num_draws < 1) {
    throw std::invalid_argument("update_variational: need at least one draw");
  }
  const EffectSampleBatch batch =
      draw_standard_normals(data.design, seed, num_draws);
  return update_variational_batch(data, model, post, responsibilities, batch,
                                  controls, warnings);
}

}  // namespace mixedlrmoe
