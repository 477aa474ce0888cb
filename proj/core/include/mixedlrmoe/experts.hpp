#pragma once

#include <string>
#include <variant>
#include <vector>

namespace mixedlrmoe {

// Expert response distributions. All are covariate-free and supported on
// [0, inf). Parameters are validated on construction; the fitting code works
// on unconstrained transforms and converts back through these constructors.

struct GammaExpert {
  double shape = 1.0;  // k > 0
  double scale = 1.0;  // theta > 0

  GammaExpert() = default;
  GammaExpert(double shape, double scale);
};

struct LogNormalExpert {
  double meanlog = 0.0;
  double sdlog = 1.0;  // > 0

  LogNormalExpert() = default;
  LogNormalExpert(double meanlog, double sdlog);
};

// Atom at zero with probability zero_prob, lognormal on y > 0. Densities are
// taken w.r.t. Lebesgue measure plus a point mass at zero, so
// logpdf(0) = log(zero_prob).
struct ZiLogNormalExpert {
  double zero_prob = 0.0;  // in [0, 1]
  double meanlog = 0.0;
  double sdlog = 1.0;  // > 0

  ZiLogNormalExpert() = default;
  ZiLogNormalExpert(double zero_prob, double meanlog, double sdlog);
};

using ExpertFamily =
    std::variant<GammaExpert, LogNormalExpert, ZiLogNormalExpert>;

// g x D grid: experts[j][d] is the density of dimension d under class j.
using ExpertGrid = std::vector<std::vector<ExpertFamily>>;

enum class ExpertTag { gamma, lognormal, zi_lognormal };

double expert_logpdf(const ExpertFamily& family, double y);  // -inf off support
double expert_mean(const ExpertFamily& family);
double expert_cdf(const ExpertFamily& family, double y);
int expert_param_count(const ExpertFamily& family);
ExpertTag expert_tag(const ExpertFamily& family);
std::string expert_family_name(const ExpertFamily& family);
ExpertTag expert_tag_from_name(const std::string& name);  // throws on unknown
void validate_expert(const ExpertFamily& family);  // throws std::invalid_argument

}  // namespace mixedlrmoe
