#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/model.hpp"

namespace mixedlrmoe {

// Covariate generators for simulated portfolios. The intercept column is
// implicit and always prepended; the spec below describes columns 1..P-1.
struct CovariateSpec {
  enum class Kind { bernoulli, normal, uniform };
  Kind kind = Kind::bernoulli;
  // bernoulli: a = success probability; normal: a = mean, b = sd;
  // uniform: a = lower, b = upper.
  double a = 0.5;
  double b = 1.0;
  std::string name;  // defaults to x1, x2, ... when empty
};

struct SimSpec {
  int n = 0;
  std::vector<CovariateSpec> covariates;  // P - 1 entries
  MixedLRMoEModel model;                  // ground truth; carries the design
  enum class Assignment { uniform, balanced } assignment = Assignment::uniform;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

struct SimulationOutput {
  Dataset data;
  RandomEffectsRealization effects;  // the true w draws
  Eigen::VectorXi labels;            // true class per row, 0-based
  std::vector<std::string> covariate_names;  // excludes the intercept
};

// Draws the true effects from the standard-normal prior, assigns factors
// (uniformly at random by default; round-robin under `balanced`), generates
// covariates, samples each row's class from the gating probabilities and its
// responses from that class's experts. Each row consumes an independent
// derived RNG stream, so output is reproducible and order-independent.
SimulationOutput simulate(const SimSpec& spec);

}  // namespace mixedlrmoe
