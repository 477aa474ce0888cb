#include "mixedlrmoe/fit.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixedlrmoe/rng.hpp"

namespace mixedlrmoe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Salt separating the ECM iteration draw streams from other consumers of the
// fit seed (k-means restarts use kKmeansSalt + r).
constexpr std::uint64_t kIterSalt = 1000;
constexpr std::uint64_t kKmeansSalt = 500000;

void push_unique(std::vector<std::string>* sink, const std::string& msg) {
  if (!sink) return;
  if (std::find(sink->begin(), sink->end(), msg) == sink->end()) {
    sink->push_back(msg);
  }
}

// ---------------------------------------------------------------------------
// Expert tag expansion

std::vector<std::vector<ExpertTag>> expand_expert_tags(const FitConfig& config,
                                                       Eigen::Index d_dim) {
  const int g = config.num_classes;
  std::vector<std::vector<ExpertTag>> rows = config.expert_tags;
  if (rows.size() == 1 && g > 1) rows.assign(g, rows.front());
  if (static_cast<int>(rows.size()) != g) {
    throw std::invalid_argument(
        "FitConfig: expert tag rows must number 1 or num_classes");
  }
  for (auto& row : rows) {
    if (row.size() == 1 && d_dim > 1) {
      row.assign(static_cast<std::size_t>(d_dim), row.front());
    }
    if (static_cast<Eigen::Index>(row.size()) != d_dim) {
      throw std::invalid_argument(
          "FitConfig: expert tags per class must number 1 or the response dimension");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// k-means on the log1p-transformed responses (initialization only)

struct KmeansResult {
  Eigen::VectorXi assign;
  double within_ss = std::numeric_limits<double>::infinity();
  bool has_empty = true;
};

KmeansResult run_kmeans(const Eigen::MatrixXd& t_mat, int g,
                        std::uint64_t seed) {
  const Eigen::Index n = t_mat.rows();
  Rng rng(seed);
  Eigen::MatrixXd centers(g, t_mat.cols());

  // k-means++ seeding: next center sampled proportional to squared distance.
  centers.row(0) = t_mat.row(static_cast<Eigen::Index>(rng.below(n)));
  Eigen::VectorXd d2 =
      (t_mat.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < g; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u <= 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(n));
    }
    centers.row(c) = t_mat.row(pick);
    d2 = d2.cwiseMin(
        (t_mat.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  KmeansResult res;
  res.assign = Eigen::VectorXi::Constant(n, -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (t_mat.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < g; ++c) {
        const double d = (t_mat.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (res.assign(i) != best) {
        res.assign(i) = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < g; ++c) {
      Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(t_mat.cols());
      Eigen::Index count = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (res.assign(i) == c) {
          sum += t_mat.row(i);
          ++count;
        }
      }
      if (count > 0) centers.row(c) = sum / static_cast<double>(count);
    }
  }

  res.within_ss = 0.0;
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(g);
  for (Eigen::Index i = 0; i < n; ++i) {
    res.within_ss += (t_mat.row(i) - centers.row(res.assign(i))).squaredNorm();
    ++counts(res.assign(i));
  }
  res.has_empty = (counts.array() == 0).any();

  // Relabel clusters by ascending mean so class indices come out in a stable,
  // seed-independent order.
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(g, t_mat.cols());
  for (Eigen::Index i = 0; i < n; ++i) means.row(res.assign(i)) += t_mat.row(i);
  std::vector<double> key(static_cast<std::size_t>(g),
                          std::numeric_limits<double>::infinity());
  for (int c = 0; c < g; ++c) {
    if (counts(c) > 0) {
      key[static_cast<std::size_t>(c)] =
          means.row(c).sum() / static_cast<double>(counts(c));
    }
  }
  std::vector<int> order(static_cast<std::size_t>(g));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&key](int a, int b) {
                     return key[static_cast<std::size_t>(a)] <
                            key[static_cast<std::size_t>(b)];
                   });
  std::vector<int> rank(static_cast<std::size_t>(g));
  for (int c = 0; c < g; ++c) {
    rank[static_cast<std::size_t>(order[static_cast<std::size_t>(c)])] = c;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    res.assign(i) = rank[static_cast<std::size_t>(res.assign(i))];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Weighted maximum likelihood per expert family

double weighted_loglik(const ExpertFamily& family,
                       const Eigen::Ref<const Eigen::VectorXd>& y,
                       const Eigen::Ref<const Eigen::VectorXd>& z) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (z(i) <= 0.0) continue;  // skip to avoid 0 * (-inf)
    acc += z(i) * expert_logpdf(family, y(i));
  }
  return acc;
}

struct WeightedStats {
  double mass = 0.0;       // total weight
  double zero_mass = 0.0;  // weight on y == 0
  double pos_mass = 0.0;   // weight on y > 0
  double mean_y = 0.0;     // weighted mean of positive y
  double mean_log = 0.0;   // weighted mean of log y over positives
  double var_log = 0.0;    // weighted population variance of log y
};

WeightedStats weighted_stats(const Eigen::Ref<const Eigen::VectorXd>& y,
                             const Eigen::Ref<const Eigen::VectorXd>& z) {
  WeightedStats s;
  double sum_y = 0.0, sum_log = 0.0, sum_log2 = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double zi = z(i);
    if (zi <= 0.0) continue;
    s.mass += zi;
    if (y(i) == 0.0) {
      s.zero_mass += zi;
    } else if (y(i) > 0.0) {
      s.pos_mass += zi;
      const double ly = std::log(y(i));
      sum_y += zi * y(i);
      sum_log += zi * ly;
      sum_log2 += zi * ly * ly;
    }
  }
  if (s.pos_mass > 0.0) {
    s.mean_y = sum_y / s.pos_mass;
    s.mean_log = sum_log / s.pos_mass;
    s.var_log = std::max(0.0, sum_log2 / s.pos_mass - s.mean_log * s.mean_log);
  }
  return s;
}

// Newton solve of ln k - digamma(k) = s for the gamma shape.
double gamma_shape_from_gap(double s) {
  if (s <= 1e-10) return 1e6;  // near-degenerate spread: cap the shape
  double k = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);
  k = std::clamp(k, 1e-8, 1e8);
  for (int iter = 0; iter < 100; ++iter) {
    const double f = std::log(k) - boost::math::digamma(k) - s;
    const double fp = 1.0 / k - boost::math::trigamma(k);
    const double step = f / fp;
    k = std::clamp(k - step, 1e-8, 1e8);
    if (std::abs(f) < 1e-13) break;
  }
  return std::min(k, 1e6);
}

ExpertFamily weighted_mle(const ExpertFamily& current,
                          const Eigen::Ref<const Eigen::VectorXd>& y,
                          const Eigen::Ref<const Eigen::VectorXd>& z, int clazz,
                          int dim) {
  const WeightedStats s = weighted_stats(y, z);
  const std::string where = "class " + std::to_string(clazz + 1) +
                            ", dimension " + std::to_string(dim + 1);
  switch (expert_tag(current)) {
    case ExpertTag::gamma: {
      if (s.pos_mass <= 0.0) {
        throw std::invalid_argument(
            "cm_step_experts: " + where +
            " uses a gamma family but carries no positive responses; use a "
            "zero-inflated family");
      }
      const double gap = std::log(s.mean_y) - s.mean_log;  // >= 0 by Jensen
      const double shape = gamma_shape_from_gap(gap);
      return GammaExpert(shape, s.mean_y / shape);
    }
    case ExpertTag::lognormal: {
      if (s.pos_mass <= 0.0) {
        throw std::invalid_argument(
            "cm_step_experts: " + where +
            " uses a lognormal family but carries no positive responses; use "
            "a zero-inflated family");
      }
      return LogNormalExpert(s.mean_log, std::sqrt(std::max(s.var_log, 1e-12)));
    }
    case ExpertTag::zi_lognormal: {
      const auto& cur = std::get<ZiLogNormalExpert>(current);
      if (s.mass <= 0.0) return cur;
      const double delta = std::clamp(s.zero_mass / s.mass, 0.0, 1.0);
      if (s.pos_mass <= 0.0) {
        // All weight sits on the atom; the continuous part is unidentified.
        return ZiLogNormalExpert(delta, cur.meanlog, cur.sdlog);
      }
      return ZiLogNormalExpert(delta, s.mean_log,
                               std::sqrt(std::max(s.var_log, 1e-12)));
    }
  }
  throw std::logic_error("weighted_mle: unreachable");
}

// Method-of-moments start for one cluster (population moments).
ExpertFamily moment_match(ExpertTag tag, const std::vector<double>& yv,
                          int clazz, int dim) {
  const std::string where = "class " + std::to_string(clazz + 1) +
                            ", dimension " + std::to_string(dim + 1);
  std::vector<double> pos;
  double zero_count = 0.0;
  for (double v : yv) {
    if (v > 0.0) {
      pos.push_back(v);
    } else {
      zero_count += 1.0;
    }
  }
  const auto log_moments = [&]() -> std::pair<double, double> {
    double m = 0.0;
    for (double v : pos) m += std::log(v);
    m /= static_cast<double>(pos.size());
    double var = 0.0;
    for (double v : pos) {
      const double d = std::log(v) - m;
      var += d * d;
    }
    var /= static_cast<double>(pos.size());
    return {m, std::sqrt(std::max(var, 1e-12))};
  };
  switch (tag) {
    case ExpertTag::gamma: {
      if (pos.empty()) {
        throw std::invalid_argument(
            "cmm_initialize: " + where +
            " uses a gamma family but its initial cluster has no positive "
            "responses; use a zero-inflated family");
      }
      double mean = std::accumulate(pos.begin(), pos.end(), 0.0) /
                    static_cast<double>(pos.size());
      double var = 0.0;
      for (double v : pos) var += (v - mean) * (v - mean);
      var /= static_cast<double>(pos.size());
      const double shape = std::clamp(mean * mean / std::max(var, 1e-12), 1e-3, 1e6);
      return GammaExpert(shape, mean / shape);
    }
    case ExpertTag::lognormal: {
      if (pos.empty()) {
        throw std::invalid_argument(
            "cmm_initialize: " + where +
            " uses a lognormal family but its initial cluster has no positive "
            "responses; use a zero-inflated family");
      }
      const auto [m, sd] = log_moments();
      return LogNormalExpert(m, sd);
    }
    case ExpertTag::zi_lognormal: {
      const double total = static_cast<double>(yv.size());
      const double delta =
          total > 0.0 ? std::clamp(zero_count / total, 0.0, 1.0) : 0.0;
      if (pos.empty()) return ZiLogNormalExpert(delta, 0.0, 1.0);
      const auto [m, sd] = log_moments();
      return ZiLogNormalExpert(delta, m, sd);
    }
  }
  throw std::logic_error("moment_match: unreachable");
}

// ---------------------------------------------------------------------------
// Gating CM-step internals

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd p = scores;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

struct GatingWork {
  std::vector<Eigen::MatrixXd> w;    // gathered effects per draw (empty if L=0)
  std::vector<Eigen::MatrixXd> eta;  // scores per draw, n x g
};

GatingWork build_gating_work(const Dataset& data, const MixedLRMoEModel& model,
                             const VariationalPosterior& post,
                             const EffectSampleBatch& batch) {
  GatingWork work;
  const int m_draws = batch.draws();
  work.eta.reserve(m_draws);
  const Eigen::MatrixXd base = data.X * model.alpha.transpose();
  for (int m = 0; m < m_draws; ++m) {
    if (data.levels() > 0) {
      work.w.push_back(gather_effects(data, batch.realize(post, m)));
      work.eta.push_back(base + work.w.back() * model.beta.transpose());
    } else {
      work.eta.push_back(base);
    }
  }
  return work;
}

double q1_from_eta(const Eigen::MatrixXd& z,
                   const std::vector<Eigen::MatrixXd>& eta) {
  double acc = 0.0;
  for (const Eigen::MatrixXd& e : eta) {
    for (Eigen::Index i = 0; i < e.rows(); ++i) {
      const double mx = e.row(i).maxCoeff();
      double lse = 0.0;
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        lse += std::exp(e(i, j) - mx);
      }
      acc += z.row(i).dot(e.row(i)) - (mx + std::log(lse));
    }
  }
  return acc / static_cast<double>(eta.size());
}

// Q1 with column `clazz` of every draw's scores shifted by delta[m].
double q1_with_column_delta(const Eigen::MatrixXd& z,
                            const std::vector<Eigen::MatrixXd>& eta, int clazz,
                            const std::vector<Eigen::VectorXd>& delta) {
  double acc = 0.0;
  for (std::size_t m = 0; m < eta.size(); ++m) {
    const Eigen::MatrixXd& e = eta[m];
    const Eigen::VectorXd& d = delta[m];
    for (Eigen::Index i = 0; i < e.rows(); ++i) {
      double mx = kNegInf;
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        const double v = e(i, j) + (j == clazz ? d(i) : 0.0);
        mx = std::max(mx, v);
      }
      double lse = 0.0;
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        const double v = e(i, j) + (j == clazz ? d(i) : 0.0);
        lse += std::exp(v - mx);
      }
      acc += z.row(i).dot(e.row(i)) + z(i, clazz) * d(i) - (mx + std::log(lse));
    }
  }
  return acc / static_cast<double>(eta.size());
}

// Gradient/Hessian of Q1 for one class block; b_of_m yields the design
// matrix of draw m (X for alpha, the gathered effects for beta).
GatingDerivs block_derivs(const Eigen::MatrixXd& z,
                          const std::vector<Eigen::MatrixXd>& eta, int clazz,
                          const std::function<const Eigen::MatrixXd&(int)>& b_of_m) {
  const Eigen::Index dim = b_of_m(0).cols();
  GatingDerivs out;
  out.gradient = Eigen::VectorXd::Zero(dim);
  out.hessian = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t m = 0; m < eta.size(); ++m) {
    const Eigen::MatrixXd& e = eta[m];
    const Eigen::MatrixXd& b = b_of_m(static_cast<int>(m));
    Eigen::VectorXd pi_j(e.rows());
    for (Eigen::Index i = 0; i < e.rows(); ++i) {
      const double mx = e.row(i).maxCoeff();
      double lse = 0.0;
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        lse += std::exp(e(i, j) - mx);
      }
      pi_j(i) = std::exp(e(i, clazz) - mx) / lse;
    }
    out.gradient += b.transpose() * (z.col(clazz) - pi_j);
    const Eigen::VectorXd wgt = pi_j.array() * (1.0 - pi_j.array());
    out.hessian -=
        (b.array().colwise() * wgt.array()).matrix().transpose() * b;
  }
  const double inv_m = 1.0 / static_cast<double>(eta.size());
  out.gradient *= inv_m;
  out.hessian *= inv_m;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

void FitConfig::validate() const {
  if (num_classes < 1) {
    throw std::invalid_argument("FitConfig: num_classes must be at least 1");
  }
  if (expert_tags.empty() || expert_tags.front().empty()) {
    throw std::invalid_argument("FitConfig: expert_tags must not be empty");
  }
  for (const auto& row : expert_tags) {
    if (row.empty()) {
      throw std::invalid_argument("FitConfig: empty expert tag row");
    }
    if (row.size() != expert_tags.front().size()) {
      throw std::invalid_argument("FitConfig: ragged expert tag rows");
    }
  }
  if (expert_tags.size() != 1 &&
      expert_tags.size() != static_cast<std::size_t>(num_classes)) {
    throw std::invalid_argument(
        "FitConfig: expert_tags must have one row (shared by all classes) or "
        "one row per class");
  }
  if (mc_samples < 1) {
    throw std::invalid_argument("FitConfig: mc_samples must be at least 1");
  }
  if (max_ecm_iters < 1) {
    throw std::invalid_argument("FitConfig: max_ecm_iters must be at least 1");
  }
  if (!(elbo_rel_tol >= 0.0)) {
    throw std::invalid_argument("FitConfig: elbo_rel_tol must be nonnegative");
  }
  if (elbo_window < 1) {
    throw std::invalid_argument("FitConfig: elbo_window must be at least 1");
  }
  if (irls_max_iters < 1 || vi_max_iters < 1) {
    throw std::invalid_argument("FitConfig: iteration caps must be at least 1");
  }
  if (!(irls_grad_tol > 0.0)) {
    throw std::invalid_argument("FitConfig: irls_grad_tol must be positive");
  }
  if (!(hessian_ridge > 0.0)) {
    throw std::invalid_argument("FitConfig: hessian_ridge must be positive");
  }
}

std::pair<MixedLRMoEModel, VariationalPosterior> cmm_initialize(
    const Dataset& data, const FitConfig& config,
    std::vector<std::string>* warnings) {
  data.validate();
  config.validate();
  const int g = config.num_classes;
  if (data.n() < g) {
    throw std::invalid_argument(
        "cmm_initialize: need at least as many observations as classes");
  }
  const auto tags = expand_expert_tags(config, data.response_dim());

  // Cluster on log1p(y): tames the heavy tails the expert families expect.
  const Eigen::MatrixXd t_mat = data.Y.cwiseMax(0.0).array().log1p();

  KmeansResult best;
  bool have_clean = false;
  KmeansResult last;
  for (int r = 0; r < 10; ++r) {
    KmeansResult res =
        run_kmeans(t_mat, g, derive_seed(config.seed, kKmeansSalt + r));
    last = res;
    if (!res.has_empty && (!have_clean || res.within_ss < best.within_ss)) {
      best = std::move(res);
      have_clean = true;
    }
    if (g == 1) break;  // nothing to restart for
  }
  if (!have_clean) best = std::move(last);

  Eigen::VectorXd counts = Eigen::VectorXd::Zero(g);
  for (Eigen::Index i = 0; i < data.n(); ++i) counts(best.assign(i)) += 1.0;

  // Per-cluster moment matching; an empty cluster copies the largest one.
  int largest = 0;
  counts.maxCoeff(&largest);
  ExpertGrid experts(g);
  for (int j = 0; j < g; ++j) {
    const int source = counts(j) > 0.0 ? j : largest;
    if (source != j) {
      push_unique(warnings,
                  "cmm_initialize: cluster " + std::to_string(j + 1) +
                      " was empty; starting it as a copy of cluster " +
                      std::to_string(source + 1));
    }
    for (Eigen::Index d = 0; d < data.response_dim(); ++d) {
      std::vector<double> yv;
      for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (best.assign(i) == source) yv.push_back(data.Y(i, d));
      }
      experts[j].push_back(
          moment_match(tags[j][static_cast<std::size_t>(d)], yv, j,
                       static_cast<int>(d)));
    }
  }

  // Intercept-only gating at the (smoothed, if needed) cluster proportions.
  Eigen::VectorXd props(g);
  const bool smooth = (counts.array() == 0.0).any();
  for (int j = 0; j < g; ++j) {
    props(j) = smooth ? (counts(j) + 0.5) /
                            (static_cast<double>(data.n()) + 0.5 * g)
                      : counts(j) / static_cast<double>(data.n());
  }

  MixedLRMoEModel model;
  model.design = data.design;
  model.alpha = Eigen::MatrixXd::Zero(g, data.covariate_dim());
  for (int j = 0; j < g; ++j) {
    model.alpha(j, 0) = std::log(props(j) / props(g - 1));
  }
  model.beta = Eigen::MatrixXd::Zero(g, data.levels());
  model.experts = std::move(experts);
  model.enforce_identifiability();
  model.validate();
  return {std::move(model), VariationalPosterior::prior(data.design)};
}

Eigen::MatrixXd e_step_batch(const Dataset& data, const MixedLRMoEModel& model,
                             const VariationalPosterior& post,
                             const EffectSampleBatch& batch,
                             const Eigen::MatrixXd& log_dens,
                             std::vector<std::string>* warnings) {
  const int m_draws = batch.draws();
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(data.n(), model.classes());
  LikelihoodDiagnostics diag;
  for (int m = 0; m < m_draws; ++m) {
    const RandomEffectsRealization w_m = batch.realize(post, m);
    const Eigen::MatrixXd gathered = gather_effects(data, w_m);
    const Eigen::MatrixXd log_gate = gating_log_probs(data.X, gathered, model);
    z += responsibilities_from(log_gate, log_dens, &diag);
  }
  z /= static_cast<double>(m_draws);
  for (const std::string& w : diag.warnings) push_unique(warnings, w);
  return z;
}

Eigen::MatrixXd e_step(const Dataset& data, const MixedLRMoEModel& model,
                       const VariationalPosterior& post, int num_draws,
                       std::uint64_t seed, std::vector<std::string>* warnings) {
  data.validate();
  model.validate();
  post.validate(data.design);
  if (num_draws < 1) {
    throw std::invalid_argument("e_step: need at least one draw");
  }
  const int m_eff = data.levels() == 0 ? 1 : num_draws;
  const EffectSampleBatch batch =
      draw_standard_normals(data.design, seed, m_eff);
  return e_step_batch(data, model, post, batch, log_density_matrix(data, model),
                      warnings);
}

double gating_objective(const Dataset& data, const MixedLRMoEModel& model,
                        const Eigen::MatrixXd& responsibilities,
                        const VariationalPosterior& post,
                        const EffectSampleBatch& batch) {
  const GatingWork work = build_gating_work(data, model, post, batch);
  return q1_from_eta(responsibilities, work.eta);
}

GatingDerivs gating_derivs(const Dataset& data, const MixedLRMoEModel& model,
                           const Eigen::MatrixXd& responsibilities,
                           const VariationalPosterior& post,
                           const EffectSampleBatch& batch, int clazz,
                           bool wrt_beta) {
  if (clazz < 0 || clazz >= model.classes()) {
    throw std::invalid_argument("gating_derivs: class out of range");
  }
  if (wrt_beta && data.levels() == 0) {
    throw std::invalid_argument("gating_derivs: no beta block without levels");
  }
  const GatingWork work = build_gating_work(data, model, post, batch);
  if (wrt_beta) {
    return block_derivs(responsibilities, work.eta, clazz,
                        [&](int m) -> const Eigen::MatrixXd& { return work.w[m]; });
  }
  return block_derivs(responsibilities, work.eta, clazz,
                      [&](int m) -> const Eigen::MatrixXd& { return data.X; });
}

GatingUpdate cm_step_gating(const Dataset& data, const MixedLRMoEModel& model,
                            const Eigen::MatrixXd& responsibilities,
                            const VariationalPosterior& post,
                            const EffectSampleBatch& batch,
                            const FitConfig& config,
                            std::vector<std::string>* warnings) {
  const int g = model.classes();
  GatingUpdate upd{model.alpha, model.beta};
  if (g == 1) return upd;  // gating is degenerate

  GatingWork work = build_gating_work(data, model, post, batch);
  const int m_draws = batch.draws();
  double q1 = q1_from_eta(responsibilities, work.eta);

  // One Newton step with halving for one class block; mutates the scores and
  // the coefficient row on acceptance. Returns the block's gradient norm.
  const auto newton_block = [&](int j, bool is_beta) -> double {
    const GatingDerivs d =
        is_beta ? block_derivs(responsibilities, work.eta, j,
                               [&](int m) -> const Eigen::MatrixXd& {
                                 return work.w[m];
                               })
                : block_derivs(responsibilities, work.eta, j,
                               [&](int m) -> const Eigen::MatrixXd& {
                                 return data.X;
                               });
    const double gnorm = d.gradient.cwiseAbs().maxCoeff();
    if (gnorm <= config.irls_grad_tol) return gnorm;

    // Ascent direction (-H + ridge)^{-1} grad; H is negative semidefinite.
    Eigen::MatrixXd neg_h = -d.hessian;
    neg_h.diagonal().array() += config.hessian_ridge;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(neg_h);
    Eigen::VectorXd dir;
    if (ldlt.info() == Eigen::Success) dir = ldlt.solve(d.gradient);
    if (ldlt.info() != Eigen::Success || !dir.allFinite()) {
      push_unique(warnings, std::string("cm_step_gating: singular Hessian for ") +
                                (is_beta ? "beta" : "alpha") + " block of class " +
                                std::to_string(j + 1) + "; step skipped");
      return gnorm;
    }

    std::vector<Eigen::VectorXd> delta(static_cast<std::size_t>(m_draws));
    for (int m = 0; m < m_draws; ++m) {
      delta[static_cast<std::size_t>(m)] =
          is_beta ? Eigen::VectorXd(work.w[m] * dir)
                  : Eigen::VectorXd(data.X * dir);
    }
    double t = 1.0;
    for (int h = 0; h <= 20; ++h, t *= 0.5) {
      std::vector<Eigen::VectorXd> scaled = delta;
      if (t != 1.0) {
        for (auto& v : scaled) v *= t;
      }
      const double q1_new =
          q1_with_column_delta(responsibilities, work.eta, j, scaled);
      if (std::isfinite(q1_new) && q1_new >= q1) {
        for (int m = 0; m < m_draws; ++m) {
          work.eta[static_cast<std::size_t>(m)].col(j) +=
              scaled[static_cast<std::size_t>(m)];
        }
        if (is_beta) {
          upd.beta.row(j) += t * dir.transpose();
        } else {
          upd.alpha.row(j) += t * dir.transpose();
        }
        q1 = q1_new;
        break;
      }
    }
    return gnorm;
  };

  for (int sweep = 0; sweep < config.irls_max_iters; ++sweep) {
    double max_grad = 0.0;
    for (int j = 0; j < g - 1; ++j) {
      max_grad = std::max(max_grad, newton_block(j, false));
    }
    if (data.levels() > 0) {
      for (int j = 1; j < g - 1; ++j) {
        max_grad = std::max(max_grad, newton_block(j, true));
      }
    }
    if (max_grad <= config.irls_grad_tol) break;
  }
  return upd;
}

ExpertGrid cm_step_experts(const Dataset& data,
                           const Eigen::MatrixXd& responsibilities,
                           const ExpertGrid& current,
                           std::vector<std::string>* warnings) {
  const int g = static_cast<int>(current.size());
  if (responsibilities.rows() != data.n() || responsibilities.cols() != g) {
    throw std::invalid_argument("cm_step_experts: responsibility shape mismatch");
  }
  ExpertGrid next = current;
  for (int j = 0; j < g; ++j) {
    const Eigen::VectorXd zcol = responsibilities.col(j);
    if (zcol.sum() < 1e-10 * static_cast<double>(data.n())) {
      push_unique(warnings, "cm_step_experts: class " + std::to_string(j + 1) +
                                " has negligible responsibility mass; its "
                                "experts were left unchanged");
      continue;
    }
    for (Eigen::Index d = 0; d < data.response_dim(); ++d) {
      const ExpertFamily cand = weighted_mle(current[j][static_cast<std::size_t>(d)],
                                             data.Y.col(d), zcol, j,
                                             static_cast<int>(d));
      // Keep the previous parameters whenever they score at least as well;
      // this preserves the ascent property of the surrogate objective.
      const double ll_new = weighted_loglik(cand, data.Y.col(d), zcol);
      const double ll_old =
          weighted_loglik(current[j][static_cast<std::size_t>(d)],
                          data.Y.col(d), zcol);
      if (ll_new >= ll_old) {
        next[j][static_cast<std::size_t>(d)] = cand;
      }
    }
  }
  return next;
}

namespace {

FitResult fit_impl(const Dataset& data, const FitConfig& config,
                   MixedLRMoEModel model, VariationalPosterior post,
                   std::vector<std::string> warnings) {
  FitResult result;
  FitReport& report = result.report;
  report.warnings = std::move(warnings);

  const int m_eff = data.levels() == 0 ? 1 : config.mc_samples;
  StepControls vi_controls;
  vi_controls.max_iters = config.vi_max_iters;
  vi_controls.ridge = config.hessian_ridge;

  Eigen::MatrixXd log_dens = log_density_matrix(data, model);
  Eigen::MatrixXd z;
  std::uint64_t batch_seed = 0;

  for (int t = 0; t < config.max_ecm_iters; ++t) {
    batch_seed = derive_seed(config.seed, kIterSalt + static_cast<std::uint64_t>(t));
    const EffectSampleBatch batch =
        draw_standard_normals(data.design, batch_seed, m_eff);

    LikelihoodDiagnostics pre_diag;
    const double elbo_pre =
        elbo_from_batch(data, model, post, batch, log_dens, &pre_diag);
    if (t == 0 && elbo_pre == kNegInf) {
      std::ostringstream msg;
      msg << "fit: the ELBO is -inf at initialization; "
          << pre_diag.zero_density_rows.size()
          << " observation(s) have zero density under every class (rows";
      const std::size_t show = std::min<std::size_t>(
          pre_diag.zero_density_rows.size(), 10);
      for (std::size_t k = 0; k < show; ++k) {
        msg << ' ' << pre_diag.zero_density_rows[k];
      }
      if (pre_diag.zero_density_rows.size() > show) msg << " ...";
      msg << "); check the expert families against the responses";
      throw NumericalError(msg.str());
    }
    if (std::isnan(elbo_pre)) {
      throw NumericalError("fit: the ELBO became NaN at iteration " +
                           std::to_string(t + 1));
    }
    if (elbo_pre == kNegInf) {
      push_unique(&report.warnings,
                  "fit: the ELBO estimate hit -inf after iteration " +
                      std::to_string(t) + "; continuing");
    }

    z = e_step_batch(data, model, post, batch, log_dens, &report.warnings);

    const GatingUpdate gate = cm_step_gating(data, model, z, post, batch,
                                             config, &report.warnings);
    model.alpha = gate.alpha;
    model.beta = gate.beta;

    model.experts = cm_step_experts(data, z, model.experts, &report.warnings);
    log_dens = log_density_matrix(data, model);

    post = update_variational_batch(data, model, post, z, batch, vi_controls,
                                    &report.warnings);

    const double elbo_post =
        elbo_from_batch(data, model, post, batch, log_dens, nullptr);
    if (std::isnan(elbo_post)) {
      throw NumericalError("fit: the ELBO became NaN at iteration " +
                           std::to_string(t + 1));
    }
    report.elbo_pre_trace.push_back(elbo_pre);
    report.elbo_trace.push_back(elbo_post);

    const int w = config.elbo_window;
    if (t >= w) {
      const double ref = report.elbo_trace[static_cast<std::size_t>(t - w)];
      if (std::isfinite(ref) &&
          std::abs(elbo_post - ref) <=
              config.elbo_rel_tol * (1.0 + std::abs(ref))) {
        report.converged = true;
        report.stop_reason = "elbo_converged";
        break;
      }
    }
  }
  if (!report.converged) report.stop_reason = "max_iterations";

  model.enforce_identifiability();
  model.validate();
  report.n_params = effective_param_count(model);
  report.responsibility_mass = z.colwise().sum();
  report.final_elbo_seed = batch_seed;

  result.model = std::move(model);
  result.posterior = std::move(post);
  return result;
}

}  // namespace

FitResult fit(const Dataset& data, const FitConfig& config) {
  data.validate();
  config.validate();
  std::vector<std::string> warnings;
  auto [model, post] = cmm_initialize(data, config, &warnings);
  return fit_impl(data, config, std::move(model), std::move(post),
                  std::move(warnings));
}

FitResult fit(const Dataset& data, const FitConfig& config,
              const MixedLRMoEModel& init_model,
              const VariationalPosterior& init_posterior) {
  data.validate();
  config.validate();
  init_model.validate();
  if (init_model.classes() != config.num_classes) {
    throw std::invalid_argument("fit: warm start class count disagrees with config");
  }
  if (init_model.covariate_dim() != data.covariate_dim() ||
      init_model.response_dim() != data.response_dim() ||
      init_model.design != data.design) {
    throw std::invalid_argument("fit: warm start model does not match the data");
  }
  init_posterior.validate(data.design);
  MixedLRMoEModel model = init_model;
  model.enforce_identifiability();
  return fit_impl(data, config, std::move(model), init_posterior, {});
}

int effective_param_count(const MixedLRMoEModel& model) {
  const int g = model.classes();
  int count = (g - 1) * static_cast<int>(model.covariate_dim()) +
              std::max(g - 2, 0) * model.levels();
  for (const auto& row : model.experts) {
    for (const ExpertFamily& f : row) count += expert_param_count(f);
  }
  return count;
}

}  // namespace mixedlrmoe
