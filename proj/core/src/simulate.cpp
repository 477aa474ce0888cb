#include "mixedlrmoe/simulate.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mixedlrmoe/rng.hpp"

namespace mixedlrmoe {

namespace {

// Stream tags: level draws for the true effects, then one independent stream
// per row. The row offset keeps the two families disjoint.
constexpr std::uint64_t kTruthSalt = 17;
constexpr std::uint64_t kRowSalt = 1ull << 32;

double draw_response(const ExpertFamily& family, Rng& rng) {
  return std::visit(
      [&rng](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, GammaExpert>) {
          return rng.gamma(f.shape, f.scale);
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          return std::exp(f.meanlog + f.sdlog * rng.normal());
        } else {
          if (rng.uniform() < f.zero_prob) return 0.0;
          return std::exp(f.meanlog + f.sdlog * rng.normal());
        }
      },
      family);
}

}  // namespace

void SimSpec::validate() const {
  if (n < 1) {
    throw std::invalid_argument("SimSpec: n must be at least 1");
  }
  model.validate();
  if (model.covariate_dim() != static_cast<Eigen::Index>(covariates.size()) + 1) {
    throw std::invalid_argument(
        "SimSpec: covariate specs must number alpha's columns minus the intercept");
  }
  for (std::size_t p = 0; p < covariates.size(); ++p) {
    const CovariateSpec& c = covariates[p];
    const std::string where = "SimSpec: covariate " + std::to_string(p + 1);
    switch (c.kind) {
      case CovariateSpec::Kind::bernoulli:
        if (!(c.a >= 0.0 && c.a <= 1.0)) {
          throw std::invalid_argument(where + ": bernoulli p must lie in [0, 1]");
        }
        break;
      case CovariateSpec::Kind::normal:
        if (!std::isfinite(c.a) || !(c.b > 0.0) || !std::isfinite(c.b)) {
          throw std::invalid_argument(where + ": normal needs finite mean and sd > 0");
        }
        break;
      case CovariateSpec::Kind::uniform:
        if (!(c.a < c.b) || !std::isfinite(c.a) || !std::isfinite(c.b)) {
          throw std::invalid_argument(where + ": uniform needs finite lo < hi");
        }
        break;
    }
  }
}

SimulationOutput simulate(const SimSpec& spec) {
  spec.validate();
  const MixedLRMoEModel& model = spec.model;
  const int n = spec.n;
  const int levels = model.levels();
  const Eigen::Index p_dim = model.covariate_dim();
  const Eigen::Index d_dim = model.response_dim();
  const int g = model.classes();

  SimulationOutput out;
  out.data.design = model.design;

  // True effects: one standard-normal value per factor, one stream per level.
  for (int l = 0; l < levels; ++l) {
    Rng rng(derive_seed(spec.seed, kTruthSalt + static_cast<std::uint64_t>(l)));
    Eigen::VectorXd w(model.design.factor_counts[l]);
    for (Eigen::Index s = 0; s < w.size(); ++s) w(s) = rng.normal();
    out.effects.w.push_back(std::move(w));
  }

  out.data.X.resize(n, p_dim);
  out.data.Y.resize(n, d_dim);
  out.data.factors.resize(n, levels);
  out.labels.resize(n);

  Eigen::VectorXd x_row(p_dim);
  Eigen::VectorXd w_obs(levels);
  for (int i = 0; i < n; ++i) {
    // Independent stream per row; draw order within a row is fixed:
    // factor assignments, covariates, class, responses.
    Rng rng(derive_seed(spec.seed, kRowSalt + static_cast<std::uint64_t>(i)));

    for (int l = 0; l < levels; ++l) {
      const int s_l = model.design.factor_counts[l];
      const int f = spec.assignment == SimSpec::Assignment::balanced
                        ? i % s_l
                        : static_cast<int>(rng.below(s_l));
      out.data.factors(i, l) = f;
      w_obs(l) = out.effects.w[l](f);
    }

    x_row(0) = 1.0;
    for (std::size_t p = 0; p < spec.covariates.size(); ++p) {
      const CovariateSpec& c = spec.covariates[p];
      double v = 0.0;
      switch (c.kind) {
        case CovariateSpec::Kind::bernoulli:
          v = rng.uniform() < c.a ? 1.0 : 0.0;
          break;
        case CovariateSpec::Kind::normal:
          v = c.a + c.b * rng.normal();
          break;
        case CovariateSpec::Kind::uniform:
          v = c.a + (c.b - c.a) * rng.uniform();
          break;
      }
      x_row(static_cast<Eigen::Index>(p) + 1) = v;
    }
    out.data.X.row(i) = x_row;

    const Eigen::VectorXd pi = gating_probs(x_row, w_obs, model);
    const double u = rng.uniform();
    int label = g - 1;
    double cum = 0.0;
    for (int j = 0; j < g; ++j) {
      cum += pi(j);
      if (u < cum) {
        label = j;
        break;
      }
    }
    out.labels(i) = label;

    for (Eigen::Index d = 0; d < d_dim; ++d) {
      out.data.Y(i, d) =
          draw_response(model.experts[label][static_cast<std::size_t>(d)], rng);
    }
  }

  for (std::size_t p = 0; p < spec.covariates.size(); ++p) {
    out.covariate_names.push_back(spec.covariates[p].name.empty()
                                      ? "x" + std::to_string(p + 1)
                                      : spec.covariates[p].name);
  }
  out.data.validate();
  return out;
}

}  // namespace mixedlrmoe
