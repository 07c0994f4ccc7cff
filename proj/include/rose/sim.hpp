#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rose/dataset.hpp"
#include "rose/error.hpp"
#include "rose/estimator.hpp"
#include "rose/parallel.hpp"
#include "rose/rng.hpp"
#include "rose/schemes.hpp"

namespace rose {

enum class DgpKind { sim1a, sim1a_fig2a, sim1b, sim2, sim3 };

inline constexpr std::array<std::string_view, 5> kDgpNames{"sim1a", "sim1a_fig2a", "sim1b", "sim2",
                                                           "sim3"};

inline std::string_view dgp_name(DgpKind k) { return kDgpNames[static_cast<std::size_t>(k)]; }

inline DgpKind parse_dgp(std::string_view name) {
  for (std::size_t i = 0; i < kDgpNames.size(); ++i) {
    if (kDgpNames[i] == name) return static_cast<DgpKind>(i);
  }
  std::string valid;
  for (auto v : kDgpNames) valid += (valid.empty() ? "" : ", ") + std::string(v);
  throw ConfigError("unknown dgp '" + std::string(name) + "' (valid: " + valid + ")");
}

struct Dgp {
  DgpKind kind = DgpKind::sim2;
  std::size_t n = 1000;
  double theta0 = 1.0;
};

inline double expit(double t) {
  if (t > 40.0) return 1.0;
  if (t < -40.0) return std::exp(t);
  return 1.0 / (1.0 + std::exp(-t));
}

// Gamma draw with the given mean and variance; a (numerically) zero
// variance is a point mass at the mean.
inline double draw_gamma(Engine& eng, double mean, double var) {
  if (var < 1e-12) return mean;
  if (!(mean > 0.0)) throw DomainError("gamma draw needs a positive mean");
  std::gamma_distribution<double> g(mean * mean / var, var / mean);
  return g(eng);
}

namespace detail {

// Lower Cholesky factor of (0.9^|j-k|) on 10 coordinates.
inline const Eigen::MatrixXd& ar1_factor() {
  static const Eigen::MatrixXd L = [] {
    Eigen::MatrixXd s(10, 10);
    for (int j = 0; j < 10; ++j) {
      for (int k = 0; k < 10; ++k) s(j, k) = std::pow(0.9, std::abs(j - k));
    }
    return Eigen::MatrixXd(Eigen::LLT<Eigen::MatrixXd>(s).matrixL());
  }();
  return L;
}

inline double sum_expit(std::span<const double> z, std::size_t k) {
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += expit(z[j]);
  return s;
}

inline double sim1_p(std::span<const double> z) { return std::max(expit(3.0 * z[0]), 0.01); }

inline double sim2_sd(std::span<const double> z) {
  return 1.0 + 2.0 * expit(z[0] + z[1]) + 2.0 * expit(z[1] + z[2]);
}

inline double sim3_zero_prob(std::span<const double> z) { return 0.1 + 0.8 * expit(z[0]); }

}  // namespace detail

inline std::size_t dgp_dim(DgpKind k) {
  return k == DgpKind::sim2 || k == DgpKind::sim3 ? 3 : 10;
}

// Draws n rows. `latent`, when given, receives the Bernoulli B of the
// Simulation-1 designs (1 elsewhere).
inline Dataset sample(const Dgp& dgp, std::uint64_t seed, std::vector<int>* latent = nullptr) {
  if (dgp.n == 0) throw ConfigError("dgp needs n >= 1");
  Engine eng = make_engine(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> unif;
  const std::size_t d = dgp_dim(dgp.kind);
  const double th = dgp.theta0;
  Dataset out;
  out.z = Matrix(dgp.n, d);
  out.x.resize(dgp.n);
  out.y.resize(dgp.n);
  if (latent) latent->assign(dgp.n, 1);

  Eigen::VectorXd e(10);
  for (std::size_t i = 0; i < dgp.n; ++i) {
    auto z = out.z.row(i);
    double x = 0.0, y = 0.0;
    switch (dgp.kind) {
      case DgpKind::sim1a:
      case DgpKind::sim1a_fig2a:
      case DgpKind::sim1b: {
        for (int j = 0; j < 10; ++j) e(j) = nd(eng);
        Eigen::VectorXd zz = detail::ar1_factor() * e;
        for (int j = 0; j < 10; ++j) z[j] = zz(j);
        double p = detail::sim1_p(z);
        int b = unif(eng) < p ? 1 : 0;
        if (latent) (*latent)[i] = b;
        double base = detail::sum_expit(z, 5);
        if (dgp.kind == DgpKind::sim1b) {
          x = draw_gamma(eng, base, b / p);
          double eta = th * x + base;
          double mu = eta * eta;
          y = draw_gamma(eng, mu, 0.01 * mu * mu * b / std::sqrt(p));
        } else {
          double extra = dgp.kind == DgpKind::sim1a_fig2a ? 0.01 : 0.0;
          x = base + std::sqrt((b + extra) / p) * nd(eng);
          y = th * x + base + std::sqrt((b + extra) / std::sqrt(p)) * nd(eng);
        }
        break;
      }
      case DgpKind::sim2: {
        for (std::size_t j = 0; j < 3; ++j) z[j] = 2.0 * nd(eng);
        x = 2.0 * nd(eng);
        y = th * x + detail::sim2_sd(z) * nd(eng);
        break;
      }
      case DgpKind::sim3: {
        for (std::size_t j = 0; j < 3; ++j) z[j] = nd(eng);
        double base = detail::sum_expit(z, 3);
        x = unif(eng) < detail::sim3_zero_prob(z) ? 0.0 : draw_gamma(eng, base, 0.1);
        double var = x == 0.0 ? 0.9 : (x <= 1.5 ? 0.4 : 0.1);
        y = draw_gamma(eng, th * x + base, var);
        break;
      }
    }
    out.x[i] = x;
    out.y[i] = y;
  }
  return out;
}

// Model the estimators are run under for each design.
inline ModelSpec dgp_model(DgpKind k) {
  ModelSpec spec;
  if (k == DgpKind::sim1b) spec.link = Link(LinkKind::sqrt);
  if (k == DgpKind::sim3) spec.moments = {Moment::identity(), Moment::zero_indicator()};
  return spec;
}

// True nuisances in the plain form (x_center = 0): f is the Z part of the
// linear predictor, m_j = E[M_j(X) | Z].
inline FittedNuisances dgp_oracle_nuisances(DgpKind k) {
  switch (k) {
    case DgpKind::sim1a:
    case DgpKind::sim1a_fig2a:
    case DgpKind::sim1b: {
      ZFunction base = [](std::span<const double> z) { return detail::sum_expit(z, 5); };
      return FittedNuisances::oracle(base, {base});
    }
    case DgpKind::sim2:
      return FittedNuisances::zero(1);
    case DgpKind::sim3: {
      ZFunction base = [](std::span<const double> z) { return detail::sum_expit(z, 3); };
      ZFunction zero_p = [](std::span<const double> z) { return detail::sim3_zero_prob(z); };
      ZFunction mean_x = [](std::span<const double> z) {
        return (1.0 - detail::sim3_zero_prob(z)) * detail::sum_expit(z, 3);
      };
      return FittedNuisances::oracle(base, {mean_x, zero_p});
    }
  }
  return FittedNuisances::zero(1);
}

// Optimal single-moment weight E[dpsi|Z] / E[psi^2|Z] up to a positive
// constant, where it has a closed form.
inline std::optional<ZFunction> dgp_oracle_weight(DgpKind k) {
  switch (k) {
    case DgpKind::sim1a:
      return ZFunction([](std::span<const double> z) { return std::sqrt(detail::sim1_p(z)); });
    case DgpKind::sim1a_fig2a:
      return ZFunction([](std::span<const double> z) {
        // Var(X|Z) = (p + 0.01) / p, E[psi^2|Z] = (1.01^2 p + 1e-4 (1 - p)) / p^1.5
        double p = detail::sim1_p(z);
        return (p + 0.01) * std::sqrt(p) / (1.0201 * p + 1e-4 * (1.0 - p));
      });
    case DgpKind::sim2:
      return ZFunction([](std::span<const double> z) {
        double s = detail::sim2_sd(z);
        return 1.0 / (s * s);
      });
    default:
      return std::nullopt;
  }
}

// Desk-scale settings per design: nuisance forests follow the tuned values
// reported for the full-size runs, with fewer trees, except where the
// per-tree sample would shrink too far at desk sizes (re-tuned by OOB error).
struct SimPreset {
  FitConfig cfg;
  std::vector<Scheme> schemes;
  bool trimmed = false;
};

inline ForestParams preset_forest(double fraction, std::size_t min_node, std::size_t trees) {
  ForestParams p;
  p.n_trees = trees;
  p.sample_fraction = fraction;
  p.min_node_size = min_node;
  return p;
}

inline SimPreset dgp_preset(DgpKind k, std::size_t n_trees = 100) {
  SimPreset out;
  FitConfig& cfg = out.cfg;
  cfg.k_folds = 2;
  scheme::Rose rose;
  rose.n_trees = n_trees;
  auto& ov = cfg.nuisance.overrides;
  switch (k) {
    case DgpKind::sim1a:
    case DgpKind::sim1a_fig2a:
      // x_z and y_z re-tuned by OOB error at 2000 training rows; the
      // full-size choice (0.05, 20) leaves ~100 rows per tree here.
      cfg.nuisance.forest = preset_forest(0.1, 10, n_trees);
      ov["v_xz"] = preset_forest(1.0, 100, n_trees);
      ov["h_num_z"] = ov["h_den_z"] = preset_forest(1.0, 20, n_trees);
      rose.tree.max_depth = 2;
      // Held-out sandwich loss: flat over {10, 50, 200} with fitted
      // nuisances, clearly lowest at 200 with oracle ones.
      rose.tree.min_node_size = 200;
      out.schemes = {scheme::Unweighted{}, rose, scheme::LocallyEfficient{}, scheme::Efficient{}};
      break;
    case DgpKind::sim1b:
      cfg.nuisance.forest = preset_forest(0.1, 10, n_trees);  // OOB-tuned, as for sim1a
      ov["y_xz"] = preset_forest(1.0, 10, n_trees);
      ov["g_z"] = preset_forest(0.1, 10, n_trees);
      ov["v_xz"] = preset_forest(1.0, 100, n_trees);
      ov["h_num_z"] = ov["h_den_z"] = preset_forest(0.5, 20, n_trees);
      rose.tree.max_depth = 3;
      rose.tree.min_node_size = 200;  // held-out sandwich loss over {10, 50, 200}
      out.schemes = {scheme::Unweighted{}, rose, scheme::LocallyEfficient{}, scheme::Efficient{}};
      out.trimmed = true;
      break;
    case DgpKind::sim2: {
      cfg.oracle_nuisances = dgp_oracle_nuisances(k);
      for (std::size_t depth = 1; depth <= 15; ++depth) rose.depth_grid.push_back(depth);
      scheme::Oracle ora{*dgp_oracle_weight(k), std::nullopt};
      out.schemes = {scheme::Unweighted{}, rose, scheme::LocallyEfficient{}, ora};
      break;
    }
    case DgpKind::sim3: {
      cfg.nuisance.forest = preset_forest(0.5, 50, n_trees);
      ov["m2_z"] = preset_forest(0.5, 200, n_trees);
      rose.tree.max_depth = 5;
      // Chosen over {10, 50, 200} by held-out sandwich loss for J = 1 and 2.
      rose.tree.min_node_size = 200;
      scheme::Rose rose2 = rose;
      rose2.J = 2;
      out.schemes = {scheme::Unweighted{}, rose, rose2, scheme::Efficient{}};
      break;
    }
  }
  return out;
}

// ---- Monte Carlo ----

struct SchemeSummary {
  std::string scheme;
  std::size_t n_ok = 0;
  std::size_t n_failed = 0;
  std::size_t n_trimmed = 0;  // per tail
  double mean_theta = 0.0;
  double squared_bias = 0.0;
  double variance = 0.0;
  double mse = 0.0;
  std::optional<double> mse_ratio_to_unweighted;
  double coverage = 0.0;
  double median_v_hat = 0.0;
  // Per replication, in replication order; NaN marks a failure.
  std::vector<double> theta_hat;
  std::vector<double> v_hat;
  std::vector<int> covered;
};

struct SimReport {
  std::string dgp;
  std::size_t n = 0;
  std::size_t reps = 0;
  double theta0 = 1.0;
  std::uint64_t seed = 0;
  bool trimmed = false;
  double alpha = 0.05;
  std::vector<SchemeSummary> schemes;

  const SchemeSummary& at(std::string_view name) const {
    for (const auto& s : schemes) {
      if (s.scheme == name) return s;
    }
    throw ConfigError("no scheme named '" + std::string(name) + "' in report");
  }
};

struct MonteCarloOptions {
  bool parallel = true;
  bool trimmed = false;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline void summarise(SchemeSummary& s, double theta0, bool trimmed) {
  std::vector<double> ok;
  std::vector<double> vh;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < s.theta_hat.size(); ++r) {
    if (std::isnan(s.theta_hat[r])) continue;
    ok.push_back(s.theta_hat[r]);
    vh.push_back(s.v_hat[r]);
    hits += static_cast<std::size_t>(s.covered[r]);
  }
  s.n_ok = ok.size();
  s.n_failed = s.theta_hat.size() - ok.size();
  if (ok.empty()) {
    double nan = std::numeric_limits<double>::quiet_NaN();
    s.mean_theta = s.squared_bias = s.variance = s.mse = s.coverage = s.median_v_hat = nan;
    return;
  }
  s.coverage = static_cast<double>(hits) / static_cast<double>(ok.size());
  s.median_v_hat = median(vh);
  std::sort(ok.begin(), ok.end());
  s.n_trimmed = trimmed ? ok.size() / 100 : 0;
  std::span<const double> kept(ok.data() + s.n_trimmed, ok.size() - 2 * s.n_trimmed);
  double mean = 0.0;
  for (double t : kept) mean += t;
  mean /= static_cast<double>(kept.size());
  double var = 0.0;
  for (double t : kept) var += (t - mean) * (t - mean);
  var /= static_cast<double>(kept.size());
  s.mean_theta = mean;
  s.squared_bias = (mean - theta0) * (mean - theta0);
  s.variance = var;
  s.mse = s.squared_bias + s.variance;
}

}  // namespace detail

// Replication r draws its data from derive_seed(seed, {r}) and its folds and
// forests from further derived streams, so reports do not depend on the
// thread count. A replication whose fit throws, does not converge or returns
// a non-finite value is counted as failed for the affected schemes.
inline SimReport run_monte_carlo(const Dgp& dgp, const std::vector<Scheme>& schemes,
                                 std::size_t reps, const FitConfig& cfg, std::uint64_t seed,
                                 MonteCarloOptions opt = {}) {
  if (reps < 2) throw ConfigError("Monte Carlo needs reps >= 2");
  if (schemes.empty()) throw ConfigError("no schemes to simulate");
  cfg.validate();
  const ModelSpec spec = dgp_model(dgp.kind);
  for (const auto& s : schemes) check_scheme(s, spec);
  const std::size_t S = schemes.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  SimReport rep;
  rep.dgp = std::string(dgp_name(dgp.kind));
  rep.n = dgp.n;
  rep.reps = reps;
  rep.theta0 = dgp.theta0;
  rep.seed = seed;
  rep.trimmed = opt.trimmed;
  rep.alpha = cfg.alpha;
  rep.schemes.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    auto& sum = rep.schemes[s];
    sum.scheme = scheme_name(schemes[s]);
    sum.theta_hat.assign(reps, nan);
    sum.v_hat.assign(reps, nan);
    sum.covered.assign(reps, 0);
  }

  auto one = [&](std::size_t r) {
    Dataset data = sample(dgp, derive_seed(seed, {r}));
    FitConfig c = cfg;
    c.fold_seed = derive_seed(seed, {r, 1});
    c.seed = derive_seed(seed, {r, 2});
    c.folds.reset();
    auto record = [&](std::size_t s, const ThetaReport& tr) {
      if (!tr.converged || !std::isfinite(tr.theta_hat) || !std::isfinite(tr.v_hat)) return;
      auto& sum = rep.schemes[s];
      sum.theta_hat[r] = tr.theta_hat;
      sum.v_hat[r] = tr.v_hat;
      sum.covered[r] = tr.ci_lo <= dgp.theta0 && dgp.theta0 <= tr.ci_hi;
    };
    try {
      auto out = fit_schemes(data, spec, c, schemes);
      for (std::size_t s = 0; s < S; ++s) record(s, out[s]);
    } catch (const Error&) {
      // Isolate the failing scheme(s); seeds depend only on the fold and the
      // scheme name, so single fits reproduce the joint run.
      for (std::size_t s = 0; s < S; ++s) {
        try {
          record(s, fit_schemes(data, spec, c, {schemes[s]}).front());
        } catch (const Error&) {
        }
      }
    }
  };
  if (opt.parallel) {
    parallel_for(reps, one);
  } else {
    for (std::size_t r = 0; r < reps; ++r) one(r);
  }

  for (auto& s : rep.schemes) detail::summarise(s, dgp.theta0, opt.trimmed);
  for (const auto& base : rep.schemes) {
    if (base.scheme != "unweighted") continue;
    for (auto& s : rep.schemes) {
      if (base.mse > 0.0) s.mse_ratio_to_unweighted = s.mse / base.mse;
    }
  }
  return rep;
}

// (MSE(unw) - MSE(est)) / (MSE(unw) - MSE(oracle)).
inline double relative_accuracy(double mse_unw, double mse_hat, double mse_oracle) {
  double den = mse_unw - mse_oracle;
  if (!(den > 0.0)) {
    throw NumericError("relative accuracy undefined: MSE(unweighted) must exceed MSE(oracle)");
  }
  return (mse_unw - mse_hat) / den;
}

}  // namespace rose
