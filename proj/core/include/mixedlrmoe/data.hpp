#pragma once

#include <Eigen/Core>
#include <vector>

namespace mixedlrmoe {

// Grouping structure of the random effects: L crossed levels with S_l factors
// each. Factor indices are 0-based throughout the core; the I/O layer maps
// user-facing string ids onto this range. L = 0 means no random effects.
struct RandomEffectDesign {
  std::vector<int> factor_counts;  // S_l for l = 0..L-1, each >= 1

  int levels() const { return static_cast<int>(factor_counts.size()); }
  int total_factors() const;
  bool operator==(const RandomEffectDesign&) const = default;

  void validate() const;  // throws std::invalid_argument
};

// Observations: covariate rows (column 0 is the intercept, all ones),
// response rows, and one factor index per level.
struct Dataset {
  Eigen::MatrixXd X;        // n x P
  Eigen::MatrixXd Y;        // n x D
  Eigen::MatrixXi factors;  // n x L, 0-based; n x 0 when L = 0
  RandomEffectDesign design;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index covariate_dim() const { return X.cols(); }
  Eigen::Index response_dim() const { return Y.cols(); }
  int levels() const { return design.levels(); }

  void validate() const;  // throws std::invalid_argument
};

// One realization of every random effect: w[l](s) is the value for factor s
// of level l.
struct RandomEffectsRealization {
  std::vector<Eigen::VectorXd> w;

  int levels() const { return static_cast<int>(w.size()); }
};

// Per-observation effect values: row i holds the w entries at the factors
// observation i is mapped to. Returns n x L (n x 0 when L = 0).
Eigen::MatrixXd gather_effects(const Dataset& data,
                               const RandomEffectsRealization& effects);

}  // namespace mixedlrmoe
