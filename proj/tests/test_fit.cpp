#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "builders.hpp"
#include "mixedlrmoe/fit.hpp"
#include "mixedlrmoe/simulate.hpp"
#include "oracles.hpp"

using namespace mixedlrmoe;

namespace {

// Two crisply separated log-scale clusters, intercept-only covariates.
Dataset two_cluster_data(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset data;
  data.X = Eigen::MatrixXd::Ones(n, 1);
  data.Y.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double center = (i < n / 2) ? -2.0 : 2.0;
    data.Y(i, 0) = std::exp(center + 0.3 * rng.normal());
  }
  data.factors.resize(n, 0);
  return data;
}

SimulationOutput simulated_two_class(Eigen::Index n, std::uint64_t seed) {
  SimSpec spec;
  spec.n = static_cast<int>(n);
  spec.covariates = {CovariateSpec{CovariateSpec::Kind::bernoulli, 0.5, 1.0,
                                   "x1"}};
  spec.model.alpha.resize(2, 2);
  spec.model.alpha << 0.8, -0.7, 0.0, 0.0;
  spec.model.beta.resize(2, 0);
  spec.model.experts = {{ExpertFamily(LogNormalExpert(-0.5, 0.5))},
                        {ExpertFamily(GammaExpert(2.0, 2.0))}};
  spec.seed = seed;
  return simulate(spec);
}

}  // namespace

TEST_CASE("the clustered start separates crisp clusters in ascending order") {
  const Dataset data = two_cluster_data(400, 7);
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}};
  config.seed = 3;

  std::vector<std::string> warnings;
  const auto [model, post] = cmm_initialize(data, config, &warnings);
  model.validate();
  CHECK(model.satisfies_identifiability());
  CHECK(post.levels() == 0);
  REQUIRE(model.classes() == 2);
  const auto& low = std::get<LogNormalExpert>(model.experts[0][0]);
  const auto& high = std::get<LogNormalExpert>(model.experts[1][0]);
  CHECK(low.meanlog == doctest::Approx(-2.0).epsilon(0.2));
  CHECK(high.meanlog == doctest::Approx(2.0).epsilon(0.2));
  CHECK(std::abs(model.alpha(0, 0)) < 0.3);  // halves, so log-odds near zero
  CHECK(warnings.empty());
}

TEST_CASE("the clustered start leaves the posterior at the prior") {
  const Dataset data = testbuild::random_dataset(120, 2, 1, {5}, 17);
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}};
  const auto [model, post] = cmm_initialize(data, config);
  REQUIRE(post.levels() == 1);
  CHECK(post.mu[0].isZero(0.0));
  CHECK((post.sigma2[0].array() == 1.0).all());
  CHECK(model.beta(0, 0) == 1.0);
}

TEST_CASE("e-step rows sum to one and reduce to Bayes when there are no effects") {
  const Dataset data = testbuild::random_dataset(50, 2, 1, {}, 27);
  const MixedLRMoEModel model = testbuild::random_model(3, 2, 1, {}, 28);
  const VariationalPosterior post = VariationalPosterior::prior(data.design);
  const Eigen::MatrixXd z = e_step(data, model, post, 6, 5);
  const Eigen::MatrixXd direct =
      latent_class_responsibilities_given_w(data, model,
                                            RandomEffectsRealization{});
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    CHECK(z.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK((z - direct).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gating derivatives match finite differences of the gating objective") {
  const std::vector<int> counts = {4};
  const Dataset data = testbuild::random_dataset(60, 2, 1, counts, 37);
  MixedLRMoEModel model = testbuild::random_model(3, 2, 1, counts, 38);
  VariationalPosterior post;
  post.mu.push_back((Eigen::VectorXd(4) << 0.4, -0.1, 0.8, -0.6).finished());
  post.sigma2.push_back((Eigen::VectorXd(4) << 0.6, 1.2, 0.9, 0.4).finished());
  const Eigen::MatrixXd z = e_step(data, model, post, 10, 39);
  const EffectSampleBatch batch = draw_standard_normals(data.design, 40, 7);

  for (int clazz : {0, 1}) {
    const GatingDerivs da =
        gating_derivs(data, model, z, post, batch, clazz, /*wrt_beta=*/false);
    const auto f_alpha = [&](const Eigen::VectorXd& row) {
      MixedLRMoEModel m = model;
      m.alpha.row(clazz) = row.transpose();
      return gating_objective(data, m, z, post, batch);
    };
    const Eigen::VectorXd fd_a = oracles::fd_gradient(
        f_alpha, model.alpha.row(clazz).transpose(), 1e-6);
    const Eigen::MatrixXd fh_a = oracles::fd_hessian(
        f_alpha, model.alpha.row(clazz).transpose(), 1e-4);
    for (Eigen::Index k = 0; k < da.gradient.size(); ++k) {
      CHECK(da.gradient(k) == doctest::Approx(fd_a(k)).epsilon(1e-5));
      for (Eigen::Index k2 = 0; k2 < da.gradient.size(); ++k2) {
        CHECK(da.hessian(k, k2) ==
              doctest::Approx(fh_a(k, k2)).epsilon(5e-4));
      }
    }

    const GatingDerivs db =
        gating_derivs(data, model, z, post, batch, clazz, /*wrt_beta=*/true);
    const auto f_beta = [&](const Eigen::VectorXd& row) {
      MixedLRMoEModel m = model;
      m.beta.row(clazz) = row.transpose();
      return gating_objective(data, m, z, post, batch);
    };
    const Eigen::VectorXd fd_b =
        oracles::fd_gradient(f_beta, model.beta.row(clazz).transpose(), 1e-6);
    for (Eigen::Index k = 0; k < db.gradient.size(); ++k) {
      CHECK(db.gradient(k) == doctest::Approx(fd_b(k)).epsilon(1e-5));
    }
  }
}

TEST_CASE("the gating update raises its objective and respects the pins") {
  const std::vector<int> counts = {3};
  const Dataset data = testbuild::random_dataset(80, 2, 1, counts, 47);
  const MixedLRMoEModel model = testbuild::random_model(3, 2, 1, counts, 48);
  const VariationalPosterior post = VariationalPosterior::prior(data.design);
  const Eigen::MatrixXd z = e_step(data, model, post, 8, 49);
  const EffectSampleBatch batch = draw_standard_normals(data.design, 50, 8);
  FitConfig config;
  config.num_classes = 3;
  config.expert_tags = {{ExpertTag::lognormal}};

  const GatingUpdate update =
      cm_step_gating(data, model, z, post, batch, config);
  MixedLRMoEModel after = model;
  after.alpha = update.alpha;
  after.beta = update.beta;
  CHECK(gating_objective(data, after, z, post, batch) >=
        gating_objective(data, model, z, post, batch) - 1e-12);
  CHECK(update.alpha.row(2).isZero(0.0));
  CHECK(update.beta.row(2).isZero(0.0));
  CHECK(update.beta(0, 0) == 1.0);  // the pinned loading is never touched
}

TEST_CASE("expert updates reproduce closed-form weighted maximum likelihood") {
  const Eigen::Index n = 200;
  Rng rng(57);
  Dataset data;
  data.X = Eigen::MatrixXd::Ones(n, 1);
  data.Y.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    data.Y(i, 0) = (i % 7 == 0) ? 0.0 : std::exp(0.4 + 0.8 * rng.normal());
  }
  data.factors.resize(n, 0);
  Eigen::MatrixXd z(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = rng.uniform();
    z(i, 0) = u;
    z(i, 1) = 1.0 - u;
  }

  ExpertGrid current = {{ExpertFamily(ZiLogNormalExpert(0.5, 0.0, 1.0))},
                        {ExpertFamily(ZiLogNormalExpert(0.5, 0.0, 1.0))}};
  const ExpertGrid updated = cm_step_experts(data, z, current);

  for (int j = 0; j < 2; ++j) {
    double wsum = 0.0, wzero = 0.0, wlog = 0.0, wpos = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      wsum += z(i, j);
      if (data.Y(i, 0) == 0.0) {
        wzero += z(i, j);
      } else {
        wpos += z(i, j);
        wlog += z(i, j) * std::log(data.Y(i, 0));
      }
    }
    const double meanlog = wlog / wpos;
    double wvar = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (data.Y(i, 0) > 0.0) {
        const double d = std::log(data.Y(i, 0)) - meanlog;
        wvar += z(i, j) * d * d;
      }
    }
    const auto& e = std::get<ZiLogNormalExpert>(
        updated[static_cast<std::size_t>(j)][0]);
    CHECK(e.zero_prob == doctest::Approx(wzero / wsum).epsilon(1e-12));
    CHECK(e.meanlog == doctest::Approx(meanlog).epsilon(1e-12));
    CHECK(e.sdlog == doctest::Approx(std::sqrt(wvar / wpos)).epsilon(1e-12));
  }
}

TEST_CASE("the gamma expert update matches a search-based maximizer") {
  const Eigen::Index n = 300;
  Rng rng(67);
  Dataset data;
  data.X = Eigen::MatrixXd::Ones(n, 1);
  data.Y.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) data.Y(i, 0) = rng.gamma(2.5, 1.2);
  data.factors.resize(n, 0);
  Eigen::MatrixXd z(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) z(i, 0) = 0.25 + 0.5 * rng.uniform();

  const ExpertGrid updated = cm_step_experts(
      data, z, {{ExpertFamily(GammaExpert(1.0, 1.0))}});
  const auto& e = std::get<GammaExpert>(updated[0][0]);
  const auto [k_ref, theta_ref] =
      oracles::gamma_mle_search(data.Y.col(0), z.col(0));
  CHECK(e.shape == doctest::Approx(k_ref).epsilon(1e-6));
  CHECK(e.scale == doctest::Approx(theta_ref).epsilon(1e-6));
}

TEST_CASE("expert updates never lower the weighted log-likelihood") {
  const Dataset data = testbuild::random_dataset(150, 1, 2, {}, 77);
  Rng rng(78);
  Eigen::MatrixXd z(150, 2);
  for (Eigen::Index i = 0; i < 150; ++i) {
    const double u = rng.uniform();
    z(i, 0) = u;
    z(i, 1) = 1.0 - u;
  }
  const ExpertGrid current = {
      {ExpertFamily(GammaExpert(3.0, 0.4)), ExpertFamily(LogNormalExpert(1.0, 1.0))},
      {ExpertFamily(LogNormalExpert(-1.0, 0.4)), ExpertFamily(GammaExpert(1.0, 1.0))}};
  const ExpertGrid updated = cm_step_experts(data, z, current);

  const auto score = [&](const ExpertGrid& grid) {
    double acc = 0.0;
    for (int j = 0; j < 2; ++j) {
      for (Eigen::Index d = 0; d < 2; ++d) {
        for (Eigen::Index i = 0; i < 150; ++i) {
          acc += z(i, j) *
                 expert_logpdf(grid[static_cast<std::size_t>(j)]
                                   [static_cast<std::size_t>(d)],
                               data.Y(i, d));
        }
      }
    }
    return acc;
  };
  CHECK(score(updated) >= score(current) - 1e-10);
}

TEST_CASE("a class with no responsibility mass is frozen with a warning") {
  const Dataset data = testbuild::random_dataset(50, 1, 1, {}, 87);
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(50, 2);
  z.col(0).setOnes();
  const ExpertGrid current = {{ExpertFamily(LogNormalExpert(0.0, 1.0))},
                              {ExpertFamily(LogNormalExpert(2.0, 0.5))}};
  std::vector<std::string> warnings;
  const ExpertGrid updated = cm_step_experts(data, z, current, &warnings);
  const auto& frozen = std::get<LogNormalExpert>(updated[1][0]);
  CHECK(frozen.meanlog == 2.0);
  CHECK(frozen.sdlog == 0.5);
  CHECK(!warnings.empty());
}

TEST_CASE("without random effects the fitted trace is the exact log-likelihood and never falls") {
  const SimulationOutput sim = simulated_two_class(800, 97);
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma}};
  config.max_ecm_iters = 40;
  config.elbo_rel_tol = 0.0;  // run the full budget
  config.seed = 5;

  const FitResult result = fit(sim.data, config);
  REQUIRE(!result.report.elbo_trace.empty());
  for (std::size_t t = 1; t < result.report.elbo_trace.size(); ++t) {
    CHECK(result.report.elbo_trace[t] >=
          result.report.elbo_trace[t - 1] -
              1e-9 * (1.0 + std::abs(result.report.elbo_trace[t - 1])));
  }
  const double exact =
      conditional_loglik(sim.data, result.model, RandomEffectsRealization{});
  CHECK(result.report.elbo_trace.back() ==
        doctest::Approx(exact).epsilon(1e-10));
}

TEST_CASE("a warm start at the truth stays near the truth") {
  const SimulationOutput sim = simulated_two_class(3000, 107);
  const MixedLRMoEModel truth = [&] {
    MixedLRMoEModel m;
    m.alpha.resize(2, 2);
    m.alpha << 0.8, -0.7, 0.0, 0.0;
    m.beta.resize(2, 0);
    m.experts = {{ExpertFamily(LogNormalExpert(-0.5, 0.5))},
                 {ExpertFamily(GammaExpert(2.0, 2.0))}};
    return m;
  }();

  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma}};
  config.max_ecm_iters = 10;
  config.seed = 9;
  const FitResult result =
      fit(sim.data, config, truth, VariationalPosterior::prior(truth.design));

  const double at_truth =
      conditional_loglik(sim.data, truth, RandomEffectsRealization{});
  CHECK(result.report.elbo_trace.back() >= at_truth - 1e-9);
  CHECK(std::abs(result.model.alpha(0, 0) - 0.8) < 0.3);
  CHECK(std::abs(result.model.alpha(0, 1) + 0.7) < 0.4);
  const auto& ln = std::get<LogNormalExpert>(result.model.experts[0][0]);
  const auto& ga = std::get<GammaExpert>(result.model.experts[1][0]);
  CHECK(std::abs(ln.meanlog + 0.5) < 0.15);
  CHECK(std::abs(ga.shape - 2.0) / 2.0 < 0.25);
  CHECK(std::abs(ga.scale - 2.0) / 2.0 < 0.25);
}

TEST_CASE("warm starts validate their shapes") {
  const SimulationOutput sim = simulated_two_class(200, 117);
  FitConfig config;
  config.num_classes = 3;  // disagrees with the 2-class warm start below
  config.expert_tags = {{ExpertTag::lognormal}};
  const MixedLRMoEModel wrong = testbuild::random_model(2, 2, 1, {}, 118);
  CHECK_THROWS_AS(fit(sim.data, config, wrong,
                      VariationalPosterior::prior(wrong.design)),
                  std::invalid_argument);
}

TEST_CASE("impossible observations surface as a numerical error naming rows") {
  Dataset data = two_cluster_data(60, 127);
  data.Y(5, 0) = 0.0;  // no gamma class can explain an exact zero
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::gamma}};
  config.seed = 2;
  try {
    fit(data, config);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row") != std::string::npos);
  }
}

TEST_CASE("fitting is deterministic in the seed") {
  const SimulationOutput sim = simulated_two_class(500, 137);
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma}};
  config.max_ecm_iters = 8;
  config.seed = 21;
  const FitResult a = fit(sim.data, config);
  const FitResult b = fit(sim.data, config);
  CHECK(a.report.elbo_trace == b.report.elbo_trace);
  CHECK((a.model.alpha - b.model.alpha).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stop reasons distinguish convergence from the iteration cap") {
  const SimulationOutput sim = simulated_two_class(600, 147);
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma}};
  config.seed = 31;

  FitConfig capped = config;
  capped.max_ecm_iters = 3;
  const FitResult short_run = fit(sim.data, capped);
  CHECK_FALSE(short_run.report.converged);
  CHECK(short_run.report.stop_reason == "max_iterations");

  FitConfig loose = config;
  loose.max_ecm_iters = 200;
  loose.elbo_rel_tol = 1e-6;
  const FitResult full_run = fit(sim.data, loose);
  CHECK(full_run.report.converged);
  CHECK(full_run.report.stop_reason == "elbo_converged");
  CHECK(full_run.report.n_params == effective_param_count(full_run.model));
  CHECK(full_run.report.responsibility_mass.size() == 2);
  CHECK(full_run.report.responsibility_mass.sum() ==
        doctest::Approx(600.0).epsilon(1e-9));
}

TEST_CASE("a duplicated reference class with shifted intercepts is an exact embedding") {
  const Dataset data = testbuild::random_dataset(40, 2, 1, {}, 157);
  const MixedLRMoEModel m2 = testbuild::random_model(2, 2, 1, {}, 158);

  MixedLRMoEModel m3;
  m3.alpha.resize(3, 2);
  m3.alpha.row(0) = m2.alpha.row(0);
  m3.alpha(0, 0) += std::log(2.0);
  m3.alpha.row(1).setZero();
  m3.alpha(1, 0) = 0.0;
  m3.alpha.row(2).setZero();
  m3.beta.resize(3, 0);
  m3.experts = {m2.experts[0], m2.experts[1], m2.experts[1]};

  const double ll2 = conditional_loglik(data, m2, RandomEffectsRealization{});
  const double ll3 = conditional_loglik(data, m3, RandomEffectsRealization{});
  CHECK(ll3 == doctest::Approx(ll2).epsilon(1e-12));
}

TEST_CASE("effective parameter counts") {
  MixedLRMoEModel m = testbuild::random_model(3, 2, 1, {6}, 167);
  m.experts = {{ExpertFamily(ZiLogNormalExpert())},
               {ExpertFamily(ZiLogNormalExpert())},
               {ExpertFamily(ZiLogNormalExpert())}};
  CHECK(effective_param_count(m) == 14);  // 2*2 + 1*1 + 3*3

  MixedLRMoEModel two = testbuild::random_model(2, 3, 2, {2, 2}, 168);
  two.experts = {{ExpertFamily(LogNormalExpert()), ExpertFamily(GammaExpert())},
                 {ExpertFamily(GammaExpert()), ExpertFamily(LogNormalExpert())}};
  // (2-1)*3 gating + 0 free loadings + four two-parameter experts
  CHECK(effective_param_count(two) == 3 + 0 + 8);

  const MixedLRMoEModel one = testbuild::random_model(1, 2, 1, {3}, 169);
  CHECK(effective_param_count(one) == 0 + 0 + 2);
}

TEST_CASE("fit configuration validation") {
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}};
  CHECK_NOTHROW(config.validate());

  FitConfig bad = config;
  bad.num_classes = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.expert_tags.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.mc_samples = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.elbo_window = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.elbo_rel_tol = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma},
                     {ExpertTag::gamma}};  // three rows for two classes
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
