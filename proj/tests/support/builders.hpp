#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "mixedlrmoe/data.hpp"
#include "mixedlrmoe/experts.hpp"
#include "mixedlrmoe/model.hpp"
#include "mixedlrmoe/rng.hpp"

// Small random-but-reproducible fixtures shared across the test binaries.
namespace testbuild {

inline mixedlrmoe::Dataset random_dataset(Eigen::Index n, Eigen::Index p,
                                          Eigen::Index d,
                                          const std::vector<int>& factor_counts,
                                          std::uint64_t seed) {
  using namespace mixedlrmoe;
  Rng rng(seed);
  Dataset data;
  data.X.resize(n, p);
  data.X.col(0).setOnes();
  for (Eigen::Index c = 1; c < p; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) data.X(i, c) = 2.0 * rng.uniform() - 1.0;
  }
  data.Y.resize(n, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      data.Y(i, c) = std::exp(0.4 * rng.normal());
    }
  }
  const int levels = static_cast<int>(factor_counts.size());
  data.factors.resize(n, levels);
  for (int l = 0; l < levels; ++l) {
    for (Eigen::Index i = 0; i < n; ++i) {
      data.factors(i, l) = static_cast<int>(
          rng.below(static_cast<std::uint64_t>(factor_counts[l])));
    }
  }
  data.design.factor_counts = factor_counts;
  return data;
}

inline mixedlrmoe::MixedLRMoEModel random_model(
    int g, Eigen::Index p, Eigen::Index d,
    const std::vector<int>& factor_counts, std::uint64_t seed,
    bool pinned = true) {
  using namespace mixedlrmoe;
  Rng rng(seed);
  MixedLRMoEModel model;
  model.alpha.resize(g, p);
  for (Eigen::Index r = 0; r < model.alpha.rows(); ++r) {
    for (Eigen::Index c = 0; c < p; ++c) {
      model.alpha(r, c) = 0.8 * (2.0 * rng.uniform() - 1.0);
    }
  }
  const int levels = static_cast<int>(factor_counts.size());
  model.beta.resize(g, levels);
  for (Eigen::Index r = 0; r < model.beta.rows(); ++r) {
    for (int l = 0; l < levels; ++l) {
      model.beta(r, l) = 0.8 * (2.0 * rng.uniform() - 1.0);
    }
  }
  model.experts.clear();
  for (int j = 0; j < g; ++j) {
    std::vector<ExpertFamily> row;
    for (Eigen::Index c = 0; c < d; ++c) {
      switch ((j + static_cast<int>(c)) % 3) {
        case 0:
          row.emplace_back(LogNormalExpert(0.2 * j - 0.3, 0.5 + 0.1 * j));
          break;
        case 1:
          row.emplace_back(GammaExpert(1.5 + 0.5 * j, 1.0 + 0.3 * j));
          break;
        default:
          row.emplace_back(ZiLogNormalExpert(0.2 + 0.05 * j, 0.1 * j, 0.6));
          break;
      }
    }
    model.experts.push_back(std::move(row));
  }
  model.design.factor_counts = factor_counts;
  if (pinned) model.enforce_identifiability();
  return model;
}

inline mixedlrmoe::RandomEffectsRealization random_effects(
    const std::vector<int>& factor_counts, std::uint64_t seed) {
  using namespace mixedlrmoe;
  Rng rng(seed);
  RandomEffectsRealization effects;
  for (int count : factor_counts) {
    Eigen::VectorXd w(count);
    for (int s = 0; s < count; ++s) w(s) = rng.normal();
    effects.w.push_back(std::move(w));
  }
  return effects;
}

}  // namespace testbuild
