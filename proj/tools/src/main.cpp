#include <CLI11.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mixedlrmoe/analytics.hpp"
#include "mixedlrmoe/fit.hpp"
#include "mixedlrmoe/io.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/posterior.hpp"
#include "mixedlrmoe/rng.hpp"
#include "mixedlrmoe/simulate.hpp"

namespace {

using namespace mixedlrmoe;

std::string fmt(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << content;
  if (!out.good()) throw std::runtime_error("failed writing '" + path + "'");
}

int cmd_simulate(const std::string& spec_path, const std::string& out_path) {
  const SimSpec spec = read_sim_spec(spec_path);
  const SimulationOutput sim = simulate(spec);

  TabularDataset tab;
  tab.data = sim.data;
  tab.covariate_names = sim.covariate_names;
  tab.factor_ids.resize(static_cast<std::size_t>(sim.data.levels()));
  for (int l = 0; l < sim.data.levels(); ++l) {
    for (int s = 0; s < sim.data.design.factor_counts[l]; ++s) {
      tab.factor_ids[static_cast<std::size_t>(l)].push_back(
          std::to_string(s + 1));
    }
  }
  write_dataset_csv(out_path, tab);
  const std::string truth_path = out_path + ".truth.json";
  write_truth_sidecar(truth_path, spec, sim);

  std::cout << "simulated rows=" << sim.data.n()
            << " covariates=" << sim.data.covariate_dim() - 1
            << " levels=" << sim.data.levels() << " -> " << out_path << "\n";
  std::cout << "truth -> " << truth_path << "\n";
  return 0;
}

int cmd_fit(const std::string& data_path, const std::string& config_path,
            const std::string& out_path) {
  const FitConfig config = read_fit_config(config_path);
  const TabularDataset tab = read_dataset_csv(data_path);
  const FitResult result = fit(tab.data, config);

  ModelArchive archive;
  archive.model = result.model;
  archive.posterior = result.posterior;
  archive.covariate_names = tab.covariate_names;
  archive.factor_ids = tab.factor_ids;
  archive.report = result.report;
  archive.fit_seed = config.seed;
  archive.mc_samples = config.mc_samples;
  save_archive(out_path, archive);

  std::cout << "fit: rows=" << tab.data.n()
            << " covariates=" << tab.data.covariate_dim() - 1
            << " classes=" << result.model.classes()
            << " levels=" << result.model.levels()
            << " params=" << result.report.n_params << "\n";
  const auto& trace = result.report.elbo_trace;
  std::cout << "iterations=" << trace.size() << "\n";
  if (!trace.empty()) {
    std::cout << "elbo_first=" << fmt(result.report.elbo_pre_trace.front())
              << " elbo_final=" << fmt(trace.back()) << "\n";
  }
  std::cout << "status: "
            << (result.report.converged ? "converged"
                                        : "stopped (" +
                                              result.report.stop_reason + ")")
            << "\n";
  for (const std::string& w : result.report.warnings) {
    std::cout << "warning: " << w << "\n";
  }
  std::cout << "archive -> " << out_path << "\n";
  return result.report.converged ? 0 : 3;
}

int cmd_predict(const std::string& archive_path, const std::string& data_path,
                const std::string& out_path, int mc_samples,
                std::uint64_t seed) {
  const ModelArchive archive = load_archive(archive_path);
  Eigen::Index unseen_rows = 0;
  const TabularDataset tab = read_dataset_csv(
      data_path, archive.covariate_names, archive.factor_ids, &unseen_rows);

  MixedLRMoEModel model = archive.model;
  model.design = tab.data.design;
  const VariationalPosterior post = extend_posterior_with_prior(
      archive.posterior, archive.model.design, tab.data.design);

  const int g = model.classes();
  const int levels = model.levels();
  std::ostringstream os;
  os << "premium";
  for (int j = 0; j < g; ++j) os << ",class" << (j + 1) << "_prob";
  for (int l = 0; l < levels; ++l) {
    const std::string p = "f" + std::to_string(l + 1);
    os << ',' << p << "_id," << p << "_mean," << p << "_var," << p << "_lo90,"
       << p << "_hi90," << p << "_lo95," << p << "_hi95," << p << "_lo975,"
       << p << "_hi975," << p << "_lo99," << p << "_hi99";
  }
  os << '\n';

  std::vector<int> ids(static_cast<std::size_t>(levels));
  for (Eigen::Index i = 0; i < tab.data.n(); ++i) {
    const Eigen::VectorXd x = tab.data.X.row(i).transpose();
    for (int l = 0; l < levels; ++l) {
      ids[static_cast<std::size_t>(l)] = tab.data.factors(i, l);
    }
    const PolicyholderPosterior pp =
        policyholder_posterior(x, ids, model, post, mc_samples, seed);
    os << fmt(pp.premium);
    for (int j = 0; j < g; ++j) os << ',' << fmt(pp.class_probs(j));
    for (int l = 0; l < levels; ++l) {
      const std::size_t ul = static_cast<std::size_t>(l);
      os << ',' << tab.factor_ids[ul][static_cast<std::size_t>(ids[ul])] << ','
         << fmt(pp.effect_mean[ul]) << ',' << fmt(pp.effect_var[ul]) << ','
         << fmt(pp.ci90[ul].first) << ',' << fmt(pp.ci90[ul].second) << ','
         << fmt(pp.ci95[ul].first) << ',' << fmt(pp.ci95[ul].second) << ','
         << fmt(pp.ci975[ul].first) << ',' << fmt(pp.ci975[ul].second) << ','
         << fmt(pp.ci99[ul].first) << ',' << fmt(pp.ci99[ul].second);
    }
    os << '\n';
  }
  write_file(out_path, os.str());

  std::cout << "predicted rows=" << tab.data.n()
            << " unseen_factor_rows=" << unseen_rows << " -> " << out_path
            << "\n";
  return 0;
}

int cmd_evaluate(const std::string& archive_path, const std::string& data_path,
                 int mc_samples, bool mc_set, std::uint64_t seed, bool seed_set,
                 const std::string& lorenz_path, int bootstrap) {
  const ModelArchive archive = load_archive(archive_path);
  Eigen::Index unseen_rows = 0;
  const TabularDataset tab = read_dataset_csv(
      data_path, archive.covariate_names, archive.factor_ids, &unseen_rows);
  if (!mc_set) mc_samples = archive.mc_samples;
  if (!seed_set) seed = archive.report.final_elbo_seed;

  MixedLRMoEModel model = archive.model;
  model.design = tab.data.design;
  const VariationalPosterior post = extend_posterior_with_prior(
      archive.posterior, archive.model.design, tab.data.design);

  const EvalScores scores = evaluate(model, post, tab.data, mc_samples, seed);
  std::cout << "rows=" << tab.data.n()
            << " unseen_factor_rows=" << unseen_rows << "\n";
  std::cout << "elbo=" << fmt(scores.elbo) << "\n";
  std::cout << "approx_loglik=" << fmt(scores.approx_loglik) << "\n";
  std::cout << "aic=" << fmt(scores.aic) << " params=" << scores.n_params
            << "\n";

  if (!lorenz_path.empty()) {
    const int levels = model.levels();
    Eigen::VectorXd premiums(tab.data.n());
    std::vector<int> ids(static_cast<std::size_t>(levels));
    for (Eigen::Index i = 0; i < tab.data.n(); ++i) {
      const Eigen::VectorXd x = tab.data.X.row(i).transpose();
      for (int l = 0; l < levels; ++l) {
        ids[static_cast<std::size_t>(l)] = tab.data.factors(i, l);
      }
      premiums(i) = posterior_premium(x, ids, model, post, mc_samples, seed);
    }
    const Eigen::VectorXd losses = tab.data.Y.col(0);
    const LorenzCurve curve =
        ordered_lorenz(premiums, losses, bootstrap, derive_seed(seed, 0xB007));
    std::ostringstream os;
    os << "premium_share,loss_share\n";
    for (Eigen::Index k = 0; k < curve.premium_share.size(); ++k) {
      os << fmt(curve.premium_share(k)) << ',' << fmt(curve.loss_share(k))
         << '\n';
    }
    write_file(lorenz_path, os.str());
    std::cout << "gini=" << fmt(curve.gini) << " gini_se=" << fmt(curve.gini_se)
              << " curve -> " << lorenz_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"logit-weighted mixture regression with per-group random effects"};
  app.require_subcommand(1);

  std::string spec_path, data_path, config_path, archive_path;
  std::string out_path, lorenz_path;
  int predict_mc = 200;
  std::uint64_t predict_seed = 0;
  int eval_mc = 0;
  std::uint64_t eval_seed = 0;
  int bootstrap = 500;

  CLI::App* sim = app.add_subcommand(
      "simulate", "draw a synthetic dataset from a model description");
  sim->add_option("--spec", spec_path, "simulation description (json)")
      ->required();
  sim->add_option("--out", out_path, "output dataset (csv)")->required();

  CLI::App* fitc = app.add_subcommand(
      "fit", "fit a model by stochastic variational ecm");
  fitc->add_option("--data", data_path, "training dataset (csv)")->required();
  fitc->add_option("--config", config_path, "fit configuration (json)")
      ->required();
  fitc->add_option("--out", out_path, "output model archive (json)")
      ->required();

  CLI::App* pred = app.add_subcommand(
      "predict", "per-row posterior summaries, class probabilities, premiums");
  pred->add_option("--archive", archive_path, "fitted model archive (json)")
      ->required();
  pred->add_option("--data", data_path, "dataset to score (csv)")->required();
  pred->add_option("--out", out_path, "output predictions (csv)")->required();
  pred->add_option("--mc-samples", predict_mc,
                   "posterior draws per row (default 200)");
  pred->add_option("--seed", predict_seed, "rng seed (default 0)");

  CLI::App* eval = app.add_subcommand(
      "evaluate", "holdout scores for a fitted archive");
  eval->add_option("--archive", archive_path, "fitted model archive (json)")
      ->required();
  eval->add_option("--data", data_path, "dataset to score (csv)")->required();
  CLI::Option* eval_mc_opt = eval->add_option(
      "--mc-samples", eval_mc, "monte carlo draws (default: archive setting)");
  CLI::Option* eval_seed_opt = eval->add_option(
      "--seed", eval_seed, "rng seed (default: archive setting)");
  eval->add_option("--lorenz", lorenz_path,
                   "also write the ordered concentration curve to this path");
  eval->add_option("--bootstrap", bootstrap,
                   "bootstrap resamples for the gini standard error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(spec_path, out_path);
    if (fitc->parsed()) return cmd_fit(data_path, config_path, out_path);
    if (pred->parsed()) {
      return cmd_predict(archive_path, data_path, out_path, predict_mc,
                         predict_seed);
    }
    if (eval->parsed()) {
      return cmd_evaluate(archive_path, data_path, eval_mc,
                          eval_mc_opt->count() > 0, eval_seed,
                          eval_seed_opt->count() > 0, lorenz_path, bootstrap);
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
