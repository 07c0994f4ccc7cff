#pragma once

// Semiparametric model family: links, residuals, and the robust psi_j
// estimating functions with their theta-derivatives. Pure evaluations only.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rose/dataset.hpp"
#include "rose/error.hpp"

namespace rose {

enum class LinkKind { identity, log, sqrt };

// Strictly increasing link g with g(E[Y|X,Z]) = X*theta + f(Z).
class Link {
 public:
  // Linear predictors at or below this are outside the sqrt link's domain.
  static constexpr double kSqrtFloor = 1e-10;

  constexpr Link() = default;
  constexpr explicit Link(LinkKind kind) : kind_(kind) {}

  static Link from_name(std::string_view name) {
    if (name == "identity") return Link(LinkKind::identity);
    if (name == "log") return Link(LinkKind::log);
    if (name == "sqrt") return Link(LinkKind::sqrt);
    throw ConfigError("unknown link '" + std::string(name) +
                      "' (expected identity, log or sqrt)");
  }

  constexpr LinkKind kind() const { return kind_; }

  std::string_view name() const {
    switch (kind_) {
      case LinkKind::identity: return "identity";
      case LinkKind::log: return "log";
      case LinkKind::sqrt: return "sqrt";
    }
    return "?";
  }

  bool admissible(double eta) const {
    return kind_ != LinkKind::sqrt || eta > kSqrtFloor;
  }

  double operator()(double mu) const {
    switch (kind_) {
      case LinkKind::identity: return mu;
      case LinkKind::log: return std::log(mu);
      case LinkKind::sqrt: return std::sqrt(mu);
    }
    return mu;
  }

  double inverse(double eta) const {
    switch (kind_) {
      case LinkKind::identity: return eta;
      case LinkKind::log: return std::exp(eta);
      case LinkKind::sqrt:
        if (!(eta > kSqrtFloor)) {
          throw DomainError("sqrt link: linear predictor " + std::to_string(eta) +
                            " is not positive");
        }
        return eta * eta;
    }
    return eta;
  }

  // g'(mu)
  double derivative(double mu) const {
    switch (kind_) {
      case LinkKind::identity: return 1.0;
      case LinkKind::log: return 1.0 / mu;
      case LinkKind::sqrt: return 0.5 / std::sqrt(mu);
    }
    return 1.0;
  }

  // g''(mu); only needed for the literal gradient of psi.
  double second_derivative(double mu) const {
    switch (kind_) {
      case LinkKind::identity: return 0.0;
      case LinkKind::log: return -1.0 / (mu * mu);
      case LinkKind::sqrt: return -0.25 / (mu * std::sqrt(mu));
    }
    return 0.0;
  }

 private:
  LinkKind kind_ = LinkKind::identity;
};

inline double link_inverse(const Link& link, double u) { return link.inverse(u); }

// A moment function M_j of the covariate X.
struct Moment {
  enum class Kind { identity, zero_indicator, custom };

  Kind kind = Kind::identity;
  std::string name = "identity";
  std::function<double(double)> custom;

  static Moment identity() { return {}; }
  static Moment zero_indicator() { return {Kind::zero_indicator, "zero_indicator", {}}; }
  static Moment from_function(std::string name, std::function<double(double)> fn) {
    return {Kind::custom, std::move(name), std::move(fn)};
  }
  static Moment from_name(std::string_view name) {
    if (name == "identity" || name == "x") return identity();
    if (name == "zero_indicator" || name == "zero") return zero_indicator();
    throw ConfigError("unknown moment '" + std::string(name) +
                      "' (expected identity or zero_indicator)");
  }

  bool is_indicator() const { return kind == Kind::zero_indicator; }

  double operator()(double x) const {
    switch (kind) {
      case Kind::identity: return x;
      case Kind::zero_indicator: return x == 0.0 ? 1.0 : 0.0;
      case Kind::custom: return custom(x);
    }
    return x;
  }
};

struct ModelSpec {
  Link link;
  std::vector<Moment> moments{Moment::identity()};
  double theta_lo = -1e8;
  double theta_hi = 1e8;

  std::size_t J() const { return moments.size(); }

  void validate() const {
    if (moments.empty()) throw ConfigError("model needs at least one moment function");
    if (!(theta_lo < theta_hi)) throw ConfigError("theta space must be a nonempty interval");
  }
};

// Nuisance values at one Z. The linear predictor is
//   theta * (x - x_center) + f,
// where x_center is 0 for the plain GPLM and E[X|Z] under the reparameterised
// pipeline (then f holds E[g(E[Y|X,Z]) | Z]).
struct NuisanceValues {
  double f = 0.0;
  std::vector<double> m;
  double x_center = 0.0;
  std::optional<double> v;
  std::optional<double> h;
};

// Which theta-derivative of psi to use.
enum class DerivativeForm {
  score_ratio,  // -(M_j - m_j) * (dmu/dtheta) / (dmu/dgamma)
  literal       // the exact gradient of psi_j in theta
};

inline double linear_predictor(double x, double theta, double f, double x_center = 0.0) {
  return theta * (x - x_center) + f;
}

// eps = (dmu/dgamma)^{-1} (Y - mu) = g'(mu) (Y - mu) for the GPLM.
inline double epsilon(const Observation& obs, double theta, double f_z, const Link& link,
                      double x_center = 0.0,
                      std::size_t index = std::numeric_limits<std::size_t>::max()) {
  double mu = link.inverse(linear_predictor(obs.x, theta, f_z, x_center));
  double e = link.derivative(mu) * (obs.y - mu);
  if (!std::isfinite(e)) {
    if (index != std::numeric_limits<std::size_t>::max()) {
      throw NumericError("non-finite residual", index);
    }
    throw NumericError("non-finite residual");
  }
  return e;
}

namespace detail {
inline void check_moment_count(const NuisanceValues& nuis, const ModelSpec& spec) {
  if (nuis.m.size() != spec.J()) {
    throw ConfigError("nuisance vector has " + std::to_string(nuis.m.size()) +
                      " moment values, model has J=" + std::to_string(spec.J()));
  }
}
}  // namespace detail

inline std::vector<double> psi(const Observation& obs, double theta, const NuisanceValues& nuis,
                               const ModelSpec& spec) {
  detail::check_moment_count(nuis, spec);
  double e = epsilon(obs, theta, nuis.f, spec.link, nuis.x_center);
  std::vector<double> out(spec.J());
  for (std::size_t j = 0; j < spec.J(); ++j) out[j] = (spec.moments[j](obs.x) - nuis.m[j]) * e;
  return out;
}

inline std::vector<double> dpsi_dtheta(const Observation& obs, double theta,
                                       const NuisanceValues& nuis, const ModelSpec& spec,
                                       DerivativeForm form = DerivativeForm::score_ratio) {
  detail::check_moment_count(nuis, spec);
  double xc = obs.x - nuis.x_center;
  double factor;
  if (form == DerivativeForm::score_ratio) {
    // For every GPLM link (dmu/dtheta)/(dmu/dgamma) = x - x_center.
    factor = -xc;
  } else {
    // d eps/d theta = [g''(mu)(y - mu) - g'(mu)] * dmu/dtheta,
    // dmu/dtheta = xc / g'(mu).
    const Link& g = spec.link;
    double mu = g.inverse(linear_predictor(obs.x, theta, nuis.f, nuis.x_center));
    double g1 = g.derivative(mu);
    factor = (g.second_derivative(mu) * (obs.y - mu) - g1) * xc / g1;
  }
  std::vector<double> out(spec.J());
  for (std::size_t j = 0; j < spec.J(); ++j) {
    out[j] = (spec.moments[j](obs.x) - nuis.m[j]) * factor;
  }
  return out;
}

}  // namespace rose
