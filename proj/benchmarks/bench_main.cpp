#include <benchmark/benchmark.h>

#include "mixedlrmoe/fit.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/posterior.hpp"
#include "mixedlrmoe/simulate.hpp"

namespace {

using namespace mixedlrmoe;

MixedLRMoEModel bench_model() {
  MixedLRMoEModel model;
  model.alpha.resize(2, 2);
  model.alpha << 0.5, -0.6, 0.0, 0.0;
  model.beta.resize(2, 1);
  model.beta << 1.0, 0.4;
  model.experts = {{ExpertFamily(LogNormalExpert(0.2, 0.6))},
                   {ExpertFamily(GammaExpert(2.0, 1.5))}};
  model.design.factor_counts = {50};
  return model;
}

const SimulationOutput& bench_data() {
  static const SimulationOutput sim = [] {
    SimSpec spec;
    spec.n = 2000;
    spec.covariates = {CovariateSpec{CovariateSpec::Kind::bernoulli, 0.5, 1.0,
                                     "x1"}};
    spec.model = bench_model();
    spec.seed = 42;
    return simulate(spec);
  }();
  return sim;
}

void BM_conditional_loglik(benchmark::State& state) {
  const SimulationOutput& sim = bench_data();
  const MixedLRMoEModel model = bench_model();
  for (auto _ : state) {
    benchmark::DoNotOptimize(conditional_loglik(sim.data, model, sim.effects));
  }
}
BENCHMARK(BM_conditional_loglik);

void BM_elbo_estimate(benchmark::State& state) {
  const SimulationOutput& sim = bench_data();
  const MixedLRMoEModel model = bench_model();
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        elbo_estimate(sim.data, model, post, static_cast<int>(state.range(0)),
                      7));
  }
}
BENCHMARK(BM_elbo_estimate)->Arg(5)->Arg(20);

void BM_e_step(benchmark::State& state) {
  const SimulationOutput& sim = bench_data();
  const MixedLRMoEModel model = bench_model();
  const VariationalPosterior post = VariationalPosterior::prior(model.design);
  for (auto _ : state) {
    benchmark::DoNotOptimize(e_step(sim.data, model, post, 5, 7, nullptr));
  }
}
BENCHMARK(BM_e_step);

void BM_variational_update(benchmark::State& state) {
  const SimulationOutput& sim = bench_data();
  const MixedLRMoEModel model = bench_model();
  VariationalPosterior post = VariationalPosterior::prior(model.design);
  const Eigen::MatrixXd z = e_step(sim.data, model, post, 5, 7, nullptr);
  for (auto _ : state) {
    VariationalPosterior fresh = VariationalPosterior::prior(model.design);
    update_variational(sim.data, model, fresh, z, 5, 7);
    benchmark::DoNotOptimize(fresh);
  }
}
BENCHMARK(BM_variational_update);

void BM_fit_two_iterations(benchmark::State& state) {
  const SimulationOutput& sim = bench_data();
  FitConfig config;
  config.num_classes = 2;
  config.expert_tags = {{ExpertTag::lognormal}, {ExpertTag::gamma}};
  config.mc_samples = 5;
  config.max_ecm_iters = 2;
  config.seed = 3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(fit(sim.data, config));
  }
}
BENCHMARK(BM_fit_two_iterations);

void BM_simulate(benchmark::State& state) {
  SimSpec spec;
  spec.n = 2000;
  spec.covariates = {CovariateSpec{CovariateSpec::Kind::bernoulli, 0.5, 1.0,
                                   "x1"}};
  spec.model = bench_model();
  spec.seed = 42;
  for (auto _ : state) {
    benchmark::DoNotOptimize(simulate(spec));
  }
}
BENCHMARK(BM_simulate);

}  // namespace

BENCHMARK_MAIN();
