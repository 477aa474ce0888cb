#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/fit.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/posterior.hpp"
#include "mixedlrmoe/simulate.hpp"

namespace mixedlrmoe {

// Malformed files (CSV or JSON): unreadable, wrong schema, bad values. The
// message carries the path and, for CSV, the offending line numbers.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A dataset next to the naming needed for files: covariate column names
// (intercept excluded) and, per level, the factor id dictionary mapping
// 0-based indices back to the file's ids.
struct TabularDataset {
  Dataset data;
  std::vector<std::string> covariate_names;
  std::vector<std::vector<std::string>> factor_ids;
};

// CSV contract: one header row; a required `y` response column; factor
// columns named f1..fL (any L >= 0, numbered contiguously from 1); every
// other column is a numeric covariate. An intercept column is prepended
// automatically. Factor ids are arbitrary strings, indexed in order of first
// appearance.
TabularDataset read_dataset_csv(const std::string& path);

// Re-encodes a file against training-time dictionaries: covariates are
// matched by name (all training covariates must be present; extras are
// ignored), factor ids unseen in training are appended as new indices so the
// returned design's factor counts may exceed the training counts. The number
// of rows touching at least one unseen id is reported through unseen_rows.
TabularDataset read_dataset_csv(
    const std::string& path, const std::vector<std::string>& covariate_names,
    const std::vector<std::vector<std::string>>& train_factor_ids,
    Eigen::Index* unseen_rows = nullptr);

void write_dataset_csv(const std::string& path, const TabularDataset& tabular);

// Fitted-model archive: JSON with everything needed to resume analysis —
// parameters, variational posterior, dictionaries, fit report and seed
// provenance. Numbers round-trip exactly (shortest-representation doubles).
struct ModelArchive {
  int schema_version = 1;
  MixedLRMoEModel model;
  VariationalPosterior posterior;
  std::vector<std::string> covariate_names;
  std::vector<std::vector<std::string>> factor_ids;
  FitReport report;
  std::uint64_t fit_seed = 0;
  int mc_samples = 0;
};

void save_archive(const std::string& path, const ModelArchive& archive);
ModelArchive load_archive(const std::string& path);

// JSON configs for the command-line driver.
FitConfig read_fit_config(const std::string& path);
SimSpec read_sim_spec(const std::string& path);

// Ground-truth sidecar written by the simulate command: true effects, true
// class labels, the generating model and seed.
void write_truth_sidecar(const std::string& path, const SimSpec& spec,
                         const SimulationOutput& out);

}  // namespace mixedlrmoe
