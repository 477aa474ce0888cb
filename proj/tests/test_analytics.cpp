#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "builders.hpp"
#include "mixedlrmoe/analytics.hpp"
#include "mixedlrmoe/fit.hpp"
#include "oracles.hpp"

using namespace mixedlrmoe;

namespace {

VariationalPosterior simple_posterior() {
  VariationalPosterior post;
  post.mu.push_back((Eigen::VectorXd(3) << 0.5, -1.0, 0.0).finished());
  post.sigma2.push_back((Eigen::VectorXd(3) << 4.0, 0.25, 1.0).finished());
  return post;
}

}  // namespace

TEST_CASE("credible intervals use the exact normal quantile") {
  const VariationalPosterior post = simple_posterior();
  const auto [lo, hi] = credible_interval(post, 0, 0, 0.95);
  const double z975 = 1.959963984540054;
  CHECK(lo == doctest::Approx(0.5 - 2.0 * z975).epsilon(1e-12));
  CHECK(hi == doctest::Approx(0.5 + 2.0 * z975).epsilon(1e-12));

  const double z_ref = oracles::normal_quantile_bisect(0.975);
  CHECK(z975 == doctest::Approx(z_ref).epsilon(1e-10));

  const auto [lo2, hi2] = credible_interval(post, 0, 1, 0.90);
  CHECK(hi2 - lo2 < hi - lo);  // narrower variance and lower coverage
  const auto [lo3, hi3] = credible_interval(post, 0, 1, 0.99);
  CHECK(hi3 - lo3 > hi2 - lo2);

  CHECK_THROWS_AS(credible_interval(post, 0, 0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(credible_interval(post, 0, 0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(credible_interval(post, 1, 0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(credible_interval(post, 0, 7, 0.5), std::invalid_argument);
}

TEST_CASE("posterior class probabilities reduce to the gating weights without effects") {
  const MixedLRMoEModel model = testbuild::random_model(3, 2, 1, {}, 11);
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  const Eigen::VectorXd x = (Eigen::VectorXd(2) << 1.0, 0.7).finished();
  const Eigen::VectorXd probs =
      posterior_class_probs(x, {}, model, post, 50, 3);
  const Eigen::VectorXd direct =
      gating_probs(x, Eigen::VectorXd::Zero(0), model);
  CHECK((probs - direct).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a concentrated posterior pins the effect at its mean") {
  const MixedLRMoEModel model = testbuild::random_model(2, 2, 1, {4}, 21);
  VariationalPosterior post;
  post.mu.push_back((Eigen::VectorXd(4) << 0.9, -0.3, 0.1, 0.5).finished());
  post.sigma2.push_back(Eigen::VectorXd::Constant(4, 1e-12));
  const Eigen::VectorXd x = (Eigen::VectorXd(2) << 1.0, -0.4).finished();
  const Eigen::VectorXd probs =
      posterior_class_probs(x, {2}, model, post, 400, 7);
  const Eigen::VectorXd at_mean =
      gating_probs(x, post.mu[0].segment(2, 1), model);
  CHECK((probs - at_mean).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("an unknown factor id falls back to the prior") {
  const MixedLRMoEModel model = testbuild::random_model(2, 2, 1, {4}, 31);
  VariationalPosterior post = simple_posterior();
  post.mu[0].conservativeResize(4);
  post.sigma2[0].conservativeResize(4);
  post.mu[0](3) = 2.0;
  post.sigma2[0](3) = 0.5;

  VariationalPosterior with_prior = post;
  with_prior.mu[0](1) = 0.0;
  with_prior.sigma2[0](1) = 1.0;

  const Eigen::VectorXd x = (Eigen::VectorXd(2) << 1.0, 0.2).finished();
  const Eigen::VectorXd unknown =
      posterior_class_probs(x, {-1}, model, post, 300, 13);
  const Eigen::VectorXd known =
      posterior_class_probs(x, {1}, model, with_prior, 300, 13);
  CHECK((unknown - known).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("the premium is the probability-weighted expert mean") {
  const MixedLRMoEModel model = testbuild::random_model(3, 2, 1, {}, 41);
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  const Eigen::VectorXd x = (Eigen::VectorXd(2) << 1.0, -0.9).finished();
  const Eigen::VectorXd probs =
      posterior_class_probs(x, {}, model, post, 10, 5);
  double expected = 0.0;
  for (int j = 0; j < 3; ++j) {
    expected += probs(j) *
                expert_mean(model.experts[static_cast<std::size_t>(j)][0]);
  }
  const double premium = posterior_premium(x, {}, model, post, 10, 5);
  CHECK(premium == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("policyholder summaries are internally consistent") {
  const MixedLRMoEModel model = testbuild::random_model(2, 3, 1, {5, 3}, 51);
  VariationalPosterior post;
  post.mu.push_back((Eigen::VectorXd(5) << 0.2, -0.5, 1.0, 0.0, 0.3).finished());
  post.sigma2.push_back(
      (Eigen::VectorXd(5) << 0.5, 1.5, 0.7, 2.0, 1.0).finished());
  post.mu.push_back((Eigen::VectorXd(3) << -0.2, 0.4, 0.0).finished());
  post.sigma2.push_back((Eigen::VectorXd(3) << 1.0, 0.6, 0.9).finished());

  const Eigen::VectorXd x = (Eigen::VectorXd(3) << 1.0, 0.5, -1.2).finished();
  const PolicyholderPosterior summary =
      policyholder_posterior(x, {2, 1}, model, post, 200, 9);

  CHECK(summary.factor_ids == std::vector<int>{2, 1});
  CHECK(summary.effect_mean[0] == post.mu[0](2));
  CHECK(summary.effect_var[0] == post.sigma2[0](2));
  CHECK(summary.effect_mean[1] == post.mu[1](1));
  CHECK(summary.class_probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(summary.class_probs.minCoeff() >= 0.0);
  CHECK(summary.premium > 0.0);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(summary.ci90[l].first > summary.ci95[l].first);
    CHECK(summary.ci95[l].first > summary.ci975[l].first);
    CHECK(summary.ci975[l].first > summary.ci99[l].first);
    CHECK(summary.ci90[l].second < summary.ci95[l].second);
    CHECK(summary.ci95[l].second < summary.ci975[l].second);
    CHECK(summary.ci975[l].second < summary.ci99[l].second);
  }
}

TEST_CASE("the ordered concentration curve on a point mass portfolio") {
  const Eigen::VectorXd premiums = Eigen::VectorXd::Ones(5);
  Eigen::VectorXd losses = Eigen::VectorXd::Zero(5);
  losses(4) = 5.0;
  const LorenzCurve curve = ordered_lorenz(premiums, losses, 50, 3);
  REQUIRE(curve.premium_share.size() == 6);
  CHECK(curve.premium_share(0) == 0.0);
  CHECK(curve.premium_share(5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(curve.loss_share(5) == doctest::Approx(1.0).epsilon(1e-12));
  // All mass arrives in the final fifth of the book: area 2*(1/2 - 1/10).
  CHECK(curve.gini == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(curve.gini_se > 0.0);
}

TEST_CASE("the concentration index matches the trapezoid formula") {
  Rng rng(61);
  const Eigen::Index n = 40;
  Eigen::VectorXd premiums(n), losses(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    premiums(i) = 0.5 + rng.uniform();
    losses(i) = (rng.uniform() < 0.3) ? 0.0 : rng.gamma(2.0, 1.0);
  }
  const LorenzCurve curve = ordered_lorenz(premiums, losses, 10, 5);
  double area = 0.0;
  for (Eigen::Index k = 0; k + 1 < curve.premium_share.size(); ++k) {
    area += (curve.premium_share(k + 1) - curve.premium_share(k)) *
            (curve.loss_share(k) + curve.loss_share(k + 1));
  }
  CHECK(curve.gini == doctest::Approx(1.0 - area).epsilon(1e-12));
}

TEST_CASE("orderings with known concentration direction") {
  const Eigen::Index n = 100;
  Eigen::VectorXd premiums(n), losses(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    premiums(i) = static_cast<double>(i + 1);
    losses(i) = static_cast<double>((i + 1) * (i + 1));
  }
  // Losses grow faster than premiums along the premium ordering, so the
  // cumulative loss share lags the premium share: roughly y = x^{3/2}, whose
  // concentration index is 1 - 2 * (2/5) = 1/5.
  const LorenzCurve aligned = ordered_lorenz(premiums, losses, 10, 7);
  CHECK(aligned.gini == doctest::Approx(0.2).epsilon(0.05));

  const LorenzCurve reversed =
      ordered_lorenz(premiums, losses.reverse().eval(), 10, 7);
  CHECK(reversed.gini < -0.1);  // big losses now sit at small premiums

  // Proportional losses trace the diagonal exactly.
  const LorenzCurve flat = ordered_lorenz(premiums, premiums, 10, 7);
  CHECK(std::abs(flat.gini) < 1e-12);
}

TEST_CASE("concentration curve input validation") {
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(4);
  CHECK_THROWS_AS(ordered_lorenz(ones, Eigen::VectorXd::Zero(4), 10, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(ordered_lorenz(ones, Eigen::VectorXd::Ones(3), 10, 1),
                  std::invalid_argument);
  Eigen::VectorXd bad = ones;
  bad(2) = -1.0;
  CHECK_THROWS_AS(ordered_lorenz(bad, ones, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS(ordered_lorenz(ones, ones, -1, 1), std::invalid_argument);
}

TEST_CASE("bootstrap uncertainty is deterministic in the seed") {
  Rng rng(71);
  Eigen::VectorXd premiums(60), losses(60);
  for (Eigen::Index i = 0; i < 60; ++i) {
    premiums(i) = 0.2 + rng.uniform();
    losses(i) = rng.gamma(1.5, 2.0);
  }
  const LorenzCurve a = ordered_lorenz(premiums, losses, 200, 11);
  const LorenzCurve b = ordered_lorenz(premiums, losses, 200, 11);
  const LorenzCurve c = ordered_lorenz(premiums, losses, 200, 12);
  CHECK(a.gini_se == b.gini_se);
  CHECK(a.gini == b.gini);
  CHECK(a.gini_se != c.gini_se);
  CHECK(a.gini_se > 0.0);
}

TEST_CASE("evaluation without effects reports the exact log-likelihood") {
  const Dataset data = testbuild::random_dataset(80, 2, 1, {}, 81);
  const MixedLRMoEModel model = testbuild::random_model(2, 2, 1, {}, 82);
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  const EvalScores scores = evaluate(model, post, data, 20, 5);
  const double exact =
      conditional_loglik(data, model, RandomEffectsRealization{});
  CHECK(scores.approx_loglik == doctest::Approx(exact).epsilon(1e-10));
  CHECK(scores.elbo == doctest::Approx(exact).epsilon(1e-10));
  CHECK(scores.n_params == effective_param_count(model));
  CHECK(scores.aic ==
        doctest::Approx(2.0 * scores.n_params - 2.0 * scores.approx_loglik)
            .epsilon(1e-12));
}

TEST_CASE("the sampled marginal log-likelihood approaches quadrature") {
  const std::vector<int> counts = {4};
  const Dataset data = testbuild::random_dataset(60, 2, 1, counts, 91);
  const MixedLRMoEModel model = testbuild::random_model(2, 2, 1, counts, 92);
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  const EvalScores scores = evaluate(model, post, data, 5000, 7);
  const double reference = oracles::marginal_loglik_one_level(data, model, 60);
  CHECK(std::abs(scores.approx_loglik - reference) < 0.05);
}

TEST_CASE("posterior extension pads new factors with the prior") {
  VariationalPosterior post = simple_posterior();
  RandomEffectDesign train;
  train.factor_counts = {3};
  RandomEffectDesign test;
  test.factor_counts = {5};
  const VariationalPosterior wide =
      extend_posterior_with_prior(post, train, test);
  REQUIRE(wide.mu[0].size() == 5);
  CHECK((wide.mu[0].head(3) - post.mu[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((wide.sigma2[0].head(3) - post.sigma2[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(wide.mu[0].tail(2).isZero(0.0));
  CHECK((wide.sigma2[0].tail(2).array() == 1.0).all());

  RandomEffectDesign shrunk;
  shrunk.factor_counts = {2};
  CHECK_THROWS_AS(extend_posterior_with_prior(post, train, shrunk),
                  std::invalid_argument);
  RandomEffectDesign extra_level;
  extra_level.factor_counts = {3, 4};
  CHECK_THROWS_AS(extend_posterior_with_prior(post, train, extra_level),
                  std::invalid_argument);
}
