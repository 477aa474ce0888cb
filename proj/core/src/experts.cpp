#include "mixedlrmoe/experts.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace mixedlrmoe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// log(2*pi)/2, the lognormal/normal normalizing constant.
constexpr double kLogSqrt2Pi = 0.91893853320467274178;

double standard_normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double lognormal_logpdf(double y, double meanlog, double sdlog) {
  if (!(y > 0.0)) return kNegInf;
  const double z = (std::log(y) - meanlog) / sdlog;
  return -std::log(y) - std::log(sdlog) - kLogSqrt2Pi - 0.5 * z * z;
}

}  // namespace

GammaExpert::GammaExpert(double shape_in, double scale_in)
    : shape(shape_in), scale(scale_in) {
  if (!(shape > 0.0) || !std::isfinite(shape)) {
    throw std::invalid_argument("GammaExpert: shape must be positive and finite");
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw std::invalid_argument("GammaExpert: scale must be positive and finite");
  }
}

LogNormalExpert::LogNormalExpert(double meanlog_in, double sdlog_in)
    : meanlog(meanlog_in), sdlog(sdlog_in) {
  if (!std::isfinite(meanlog)) {
    throw std::invalid_argument("LogNormalExpert: meanlog must be finite");
  }
  if (!(sdlog > 0.0) || !std::isfinite(sdlog)) {
    throw std::invalid_argument("LogNormalExpert: sdlog must be positive and finite");
  }
}

ZiLogNormalExpert::ZiLogNormalExpert(double zero_prob_in, double meanlog_in,
                                     double sdlog_in)
    : zero_prob(zero_prob_in), meanlog(meanlog_in), sdlog(sdlog_in) {
  if (!(zero_prob >= 0.0 && zero_prob <= 1.0)) {
    throw std::invalid_argument("ZiLogNormalExpert: zero_prob must lie in [0, 1]");
  }
  if (!std::isfinite(meanlog)) {
    throw std::invalid_argument("ZiLogNormalExpert: meanlog must be finite");
  }
  if (!(sdlog > 0.0) || !std::isfinite(sdlog)) {
    throw std::invalid_argument("ZiLogNormalExpert: sdlog must be positive and finite");
  }
}

double expert_logpdf(const ExpertFamily& family, double y) {
  return std::visit(
      [y](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, GammaExpert>) {
          if (!(y > 0.0)) return kNegInf;
          return (f.shape - 1.0) * std::log(y) - y / f.scale -
                 boost::math::lgamma(f.shape) - f.shape * std::log(f.scale);
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          return lognormal_logpdf(y, f.meanlog, f.sdlog);
        } else {
          if (y < 0.0) return kNegInf;
          if (y == 0.0) return std::log(f.zero_prob);
          return std::log1p(-f.zero_prob) +
                 lognormal_logpdf(y, f.meanlog, f.sdlog);
        }
      },
      family);
}

double expert_mean(const ExpertFamily& family) {
  return std::visit(
      [](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, GammaExpert>) {
          return f.shape * f.scale;
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          return std::exp(f.meanlog + 0.5 * f.sdlog * f.sdlog);
        } else {
          return (1.0 - f.zero_prob) *
                 std::exp(f.meanlog + 0.5 * f.sdlog * f.sdlog);
        }
      },
      family);
}

double expert_cdf(const ExpertFamily& family, double y) {
  return std::visit(
      [y](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, GammaExpert>) {
          if (y <= 0.0) return 0.0;
          return boost::math::gamma_p(f.shape, y / f.scale);
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          if (y <= 0.0) return 0.0;
          return standard_normal_cdf((std::log(y) - f.meanlog) / f.sdlog);
        } else {
          if (y < 0.0) return 0.0;
          if (y == 0.0) return f.zero_prob;
          return f.zero_prob +
                 (1.0 - f.zero_prob) *
                     standard_normal_cdf((std::log(y) - f.meanlog) / f.sdlog);
        }
      },
      family);
}

int expert_param_count(const ExpertFamily& family) {
  return std::holds_alternative<ZiLogNormalExpert>(family) ? 3 : 2;
}

ExpertTag expert_tag(const ExpertFamily& family) {
  if (std::holds_alternative<GammaExpert>(family)) return ExpertTag::gamma;
  if (std::holds_alternative<LogNormalExpert>(family)) return ExpertTag::lognormal;
  return ExpertTag::zi_lognormal;
}

std::string expert_family_name(const ExpertFamily& family) {
  switch (expert_tag(family)) {
    case ExpertTag::gamma: return "gamma";
    case ExpertTag::lognormal: return "lognormal";
    case ExpertTag::zi_lognormal: return "zi_lognormal";
  }
  throw std::logic_error("expert_family_name: unreachable");
}

ExpertTag expert_tag_from_name(const std::string& name) {
  if (name == "gamma") return ExpertTag::gamma;
  if (name == "lognormal") return ExpertTag::lognormal;
  if (name == "zi_lognormal") return ExpertTag::zi_lognormal;
  throw std::invalid_argument("unknown expert family '" + name +
                              "' (expected gamma, lognormal or zi_lognormal)");
}

void validate_expert(const ExpertFamily& family) {
  std::visit(
      [](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        // Re-run the constructor checks; deserialized or aggregate-built
        // values take this path.
        if constexpr (std::is_same_v<T, GammaExpert>) {
          GammaExpert(f.shape, f.scale);
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          LogNormalExpert(f.meanlog, f.sdlog);
        } else {
          ZiLogNormalExpert(f.zero_prob, f.meanlog, f.sdlog);
        }
      },
      family);
}

}  // namespace mixedlrmoe
