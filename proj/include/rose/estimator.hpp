#pragma once

// Cross-fitted (DML2) weighted estimation of theta: folds, per-fold pilots
// and weights, Fisher scoring on the pooled estimating equation, sandwich
// variance and Wald interval.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rose/dataset.hpp"
#include "rose/error.hpp"
#include "rose/model.hpp"
#include "rose/rng.hpp"
#include "rose/schemes.hpp"

namespace rose {

// Standard normal quantile: Acklam's rational approximation followed by one
// Halley step against erfc, good to ~1e-15 relative.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal quantile needs p in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double lo = 0.02425;
  double x;
  if (p < lo) {
    double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - lo) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    double q = std::sqrt(-2 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

struct FitConfig {
  std::size_t k_folds = 10;
  double alpha = 0.05;
  Scheme scheme = scheme::Rose{};
  std::size_t max_fisher_iters = 100;
  double fisher_tol = 1e-10;  // on |mean psi|
  std::uint64_t fold_seed = 0;
  std::uint64_t seed = 0;  // forests
  NuisanceConfig nuisance;
  // When set, replaces fitted nuisances for every scheme.
  std::optional<FittedNuisances> oracle_nuisances;
  DerivativeForm derivative = DerivativeForm::score_ratio;
  // Explicit partition (test-fold index lists); overrides k_folds/fold_seed.
  std::optional<std::vector<std::vector<std::size_t>>> folds;

  void validate() const {
    if (k_folds < 2) throw ConfigError("k_folds must be at least 2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (max_fisher_iters == 0) throw ConfigError("max_fisher_iters must be positive");
    if (!(fisher_tol > 0.0)) throw ConfigError("fisher_tol must be positive");
  }
};

struct FoldReport {
  double theta = 0.0;  // root over the training rows
  double theta_pilot = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::optional<std::size_t> rose_depth;
  std::map<std::string, double> nuisance_oob;
};

struct ThetaReport {
  std::string scheme;
  std::size_t n = 0;
  double theta_hat = 0.0;
  double v_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double alpha = 0.05;
  double mean_psi = 0.0;  // pooled residual at theta_hat
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<FoldReport> per_fold;
  std::vector<std::string> warnings;

  double std_error() const { return std::sqrt(v_hat / static_cast<double>(n)); }
};

struct PsiSums {
  double psi = 0.0;
  double dpsi = 0.0;
  double abs_dpsi = 0.0;  // scale for the singularity test
};

struct RootResult {
  double theta = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

struct SolverOptions {
  double tol = 1e-10;
  std::size_t max_iters = 100;
  double theta_lo = -1e8;
  double theta_hi = 1e8;
};

// Fisher scoring theta <- theta - (sum dpsi)^-1 (sum psi), halving the step
// whenever it leaves the link's domain (DomainError from `sums`) or makes
// |sum psi| grow.
inline RootResult solve_theta(const std::function<PsiSums(double)>& sums, double theta0,
                              std::size_t n, const SolverOptions& opt) {
  const double nn = static_cast<double>(std::max<std::size_t>(n, 1));
  double theta = std::clamp(theta0, opt.theta_lo, opt.theta_hi);
  PsiSums s = sums(theta);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    if (std::abs(s.psi) / nn <= opt.tol) return {theta, it, true};
    if (!(std::abs(s.dpsi) > 1e-12 * s.abs_dpsi) || s.dpsi == 0.0) {
      throw NumericError("singular information: sum of dpsi/dtheta is numerically zero");
    }
    const double step = s.psi / s.dpsi;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h < 60 && !accepted; ++h, t *= 0.5) {
      double cand = std::clamp(theta - t * step, opt.theta_lo, opt.theta_hi);
      PsiSums sc;
      try {
        sc = sums(cand);
      } catch (const DomainError&) {
        continue;
      }
      if (std::isfinite(sc.psi) && std::abs(sc.psi) <= std::abs(s.psi)) {
        theta = cand;
        s = sc;
        accepted = true;
      }
    }
    if (!accepted) return {theta, it + 1, false};
  }
  return {theta, opt.max_iters, std::abs(s.psi) / nn <= opt.tol};
}

// Rows of a pooled estimating equation psi_i(theta) = c_i eps_i(theta).
struct EquationRows {
  std::vector<double> y, x, c, f, xc;

  void resize(std::size_t n) {
    y.assign(n, 0.0);
    x.assign(n, 0.0);
    c.assign(n, 0.0);
    f.assign(n, 0.0);
    xc.assign(n, 0.0);
  }
  std::size_t size() const { return y.size(); }
};

inline PsiSums equation_sums(const EquationRows& r, double theta, const Link& link,
                             DerivativeForm form, double* sum_psi_sq = nullptr) {
  PsiSums s;
  double sq = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    double eta = linear_predictor(r.x[i], theta, r.f[i], r.xc[i]);
    double mu = link.inverse(eta);
    double g1 = link.derivative(mu);
    double e = g1 * (r.y[i] - mu);
    if (!std::isfinite(e)) throw NumericError("non-finite residual", i);
    double dx = r.x[i] - r.xc[i];
    double de = form == DerivativeForm::score_ratio
                    ? -dx
                    : (link.second_derivative(mu) * (r.y[i] - mu) - g1) * dx / g1;
    double p = r.c[i] * e;
    double d = r.c[i] * de;
    s.psi += p;
    s.dpsi += d;
    s.abs_dpsi += std::abs(d);
    sq += p * p;
  }
  if (sum_psi_sq) *sum_psi_sq = sq;
  return s;
}

// Starting value: `preferred` clipped into Theta and, for the sqrt link,
// projected into the interval keeping every linear predictor positive, with
// margin 1e-3.
inline double starting_theta(const EquationRows& r, const Link& link, double preferred,
                             double theta_lo, double theta_hi) {
  double theta = std::clamp(preferred, theta_lo, theta_hi);
  if (link.kind() != LinkKind::sqrt) return theta;
  double lo = theta_lo, hi = theta_hi;
  for (std::size_t i = 0; i < r.size(); ++i) {
    double d = r.x[i] - r.xc[i];
    if (d > 0) {
      lo = std::max(lo, (Link::kSqrtFloor - r.f[i]) / d);
    } else if (d < 0) {
      hi = std::min(hi, (Link::kSqrtFloor - r.f[i]) / d);
    } else if (!(r.f[i] > Link::kSqrtFloor)) {
      throw DomainError("sqrt link: no theta keeps the linear predictor of observation " +
                        std::to_string(i) + " positive");
    }
  }
  if (!(lo < hi)) throw DomainError("sqrt link: no theta keeps every linear predictor positive");
  constexpr double margin = 1e-3;
  if (hi - lo <= 2 * margin) return 0.5 * (lo + hi);
  return std::clamp(theta, lo + margin, hi - margin);
}

inline RootResult solve_rows(const EquationRows& rows, const ModelSpec& spec, const FitConfig& cfg,
                             double preferred) {
  double theta0 = starting_theta(rows, spec.link, preferred, spec.theta_lo, spec.theta_hi);
  SolverOptions opt{cfg.fisher_tol, cfg.max_fisher_iters, spec.theta_lo, spec.theta_hi};
  return solve_theta(
      [&](double th) { return equation_sums(rows, th, spec.link, cfg.derivative); }, theta0,
      rows.size(), opt);
}

// K near-equal folds of a seeded shuffle; the first n mod K folds get one
// extra row. Each fold's indices are sorted.
inline std::vector<std::vector<std::size_t>> make_folds(std::size_t n, std::size_t k,
                                                        std::uint64_t seed) {
  if (k == 0 || n < k) throw ConfigError("cannot split " + std::to_string(n) + " rows into " +
                                         std::to_string(k) + " folds");
  std::vector<std::size_t> perm = detail::all_rows(n);
  Engine eng = make_engine(derive_seed(seed, {hash_name("folds")}));
  shuffle(eng, std::span<std::size_t>(perm));
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(perm.begin() + pos, perm.begin() + pos + size);
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

// Validates a user partition of [0, n) and sorts each fold.
inline std::vector<std::vector<std::size_t>> checked_folds(std::vector<std::vector<std::size_t>> folds,
                                                           std::size_t n) {
  if (folds.size() < 2) throw ConfigError("a partition needs at least 2 folds");
  std::vector<bool> seen(n, false);
  std::size_t total = 0;
  for (auto& f : folds) {
    if (f.empty()) throw ConfigError("folds must be nonempty");
    std::sort(f.begin(), f.end());
    for (std::size_t i : f) {
      if (i >= n || seen[i]) throw ConfigError("folds must partition the row indices");
      seen[i] = true;
    }
    total += f.size();
  }
  if (total != n) throw ConfigError("folds must partition the row indices");
  return folds;
}

namespace detail {

inline std::vector<std::size_t> complement(std::size_t n, const std::vector<std::size_t>& sorted) {
  std::vector<std::size_t> out;
  out.reserve(n - sorted.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (k < sorted.size() && sorted[k] == i) {
      ++k;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

inline void fill_rows(EquationRows& rows, std::size_t at, const Observation& o,
                      const NuisanceValues& nv, double c) {
  rows.y[at] = o.y;
  rows.x[at] = o.x;
  rows.c[at] = c;
  rows.f[at] = nv.f;
  rows.xc[at] = nv.x_center;
}

inline bool needs_fitted_nuisances(const Scheme& s, const FitConfig& cfg) {
  if (cfg.oracle_nuisances) return false;
  auto* o = std::get_if<scheme::Oracle>(&s);
  return !(o && o->nuisances);
}

inline const FittedNuisances* scheme_oracle(const Scheme& s, const FitConfig& cfg) {
  if (auto* o = std::get_if<scheme::Oracle>(&s); o && o->nuisances) return &*o->nuisances;
  if (cfg.oracle_nuisances) return &*cfg.oracle_nuisances;
  return nullptr;
}

}  // namespace detail

// Smallest n for which every training fold can support the nuisance forests.
inline std::size_t minimum_rows(const FitConfig& cfg, bool fitted) {
  // Oracle nuisances make the folds irrelevant beyond being nonempty.
  if (!fitted) return cfg.k_folds;
  std::size_t base = 2 * cfg.k_folds;
  std::size_t need_train = 2 * cfg.nuisance.forest.min_node_size;
  for (const auto& [name, p] : cfg.nuisance.overrides) {
    need_train = std::max(need_train, 2 * p.min_node_size);
  }
  // Training folds hold at least n - ceil(n / K) rows.
  std::size_t n = base;
  while (n - (n + cfg.k_folds - 1) / cfg.k_folds < need_train) ++n;
  return n;
}

// Runs several schemes on the same folds, sharing nuisance fits and pilots
// between schemes that use the same nuisance source.
inline std::vector<ThetaReport> fit_schemes(const Dataset& data, const ModelSpec& spec,
                                            const FitConfig& cfg,
                                            const std::vector<Scheme>& schemes) {
  data.validate();
  spec.validate();
  cfg.validate();
  if (schemes.empty()) throw ConfigError("no schemes to fit");
  bool any_fitted = false;
  for (const auto& s : schemes) {
    check_scheme(s, spec);
    any_fitted = any_fitted || detail::needs_fitted_nuisances(s, cfg);
  }
  const std::size_t n = data.size();
  const std::size_t n_min = minimum_rows(cfg, any_fitted);
  if (n < n_min) {
    throw ConfigError("n = " + std::to_string(n) + " is too small for " +
                      std::to_string(cfg.k_folds) + "-fold cross-fitting; need n >= " +
                      std::to_string(n_min));
  }

  const auto folds = cfg.folds ? checked_folds(*cfg.folds, n) : make_folds(n, cfg.k_folds, cfg.fold_seed);
  const std::size_t S = schemes.size();
  std::vector<ThetaReport> reports(S);
  std::vector<EquationRows> pooled(S);
  for (std::size_t s = 0; s < S; ++s) {
    reports[s].scheme = scheme_name(schemes[s]);
    reports[s].n = n;
    reports[s].alpha = cfg.alpha;
    pooled[s].resize(n);
  }

  // Folds are visited in order of their smallest index, and seeded by it, so
  // relabelling the same partition changes nothing.
  std::vector<std::size_t> order(folds.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return folds[a].front() < folds[b].front(); });

  for (std::size_t k : order) {
    const auto& test_idx = folds[k];
    const auto train_idx = detail::complement(n, test_idx);
    const Dataset train = data.subset(train_idx);
    const Dataset test = data.subset(test_idx);
    const std::uint64_t fold_key = derive_seed(cfg.seed, {test_idx.front()});

    struct Source {
      const FittedNuisances* nuis = nullptr;
      std::vector<NuisanceValues> train_values, test_values;
      double pilot = 0.0;
    };
    std::optional<FittedNuisances> fitted;
    std::map<const FittedNuisances*, Source> sources;
    auto source_for = [&](const Scheme& s) -> Source& {
      const FittedNuisances* nf = detail::scheme_oracle(s, cfg);
      if (!nf) {
        if (!fitted) fitted = fit_nuisances(train, spec, cfg.nuisance, fold_key);
        nf = &*fitted;
      }
      auto it = sources.find(nf);
      if (it != sources.end()) return it->second;
      Source src;
      src.nuis = nf;
      src.train_values = nf->at_rows(train);
      src.test_values = nf->at_rows(test);
      for (const auto& nv : src.train_values) {
        if (nv.m.size() != spec.J()) {
          throw ConfigError("nuisances provide " + std::to_string(nv.m.size()) +
                            " moment function(s), the model has J = " + std::to_string(spec.J()));
        }
      }
      // Unweighted pilot on the training rows.
      EquationRows rows;
      rows.resize(train.size());
      auto c0 = first_moment_coefficient(spec);
      for (std::size_t i = 0; i < train.size(); ++i) {
        detail::fill_rows(rows, i, train[i], src.train_values[i], c0(train[i], src.train_values[i]));
      }
      src.pilot = solve_rows(rows, spec, cfg, 0.0).theta;
      return sources.emplace(nf, std::move(src)).first->second;
    };

    for (std::size_t s = 0; s < S; ++s) {
      Source& src = source_for(schemes[s]);
      SchemeContext ctx{train, spec, src.train_values, *src.nuis, src.pilot,
                        derive_seed(fold_key, {hash_name(reports[s].scheme)}), cfg.nuisance,
                        cfg.derivative};
      FittedScheme fs = fit_scheme(schemes[s], ctx);

      EquationRows rows;
      rows.resize(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) {
        detail::fill_rows(rows, i, train[i], src.train_values[i],
                          fs.coefficient(train[i], src.train_values[i]));
      }
      RootResult rr = solve_rows(rows, spec, cfg, src.pilot);

      for (std::size_t t = 0; t < test.size(); ++t) {
        detail::fill_rows(pooled[s], test_idx[t], test[t], src.test_values[t],
                          fs.coefficient(test[t], src.test_values[t]));
      }
      FoldReport fr;
      fr.theta = rr.theta;
      fr.theta_pilot = src.pilot;
      fr.converged = rr.converged;
      fr.iterations = rr.iterations;
      fr.n_train = train.size();
      fr.n_test = test.size();
      fr.rose_depth = fs.rose_depth;
      if (src.nuis == (fitted ? &*fitted : nullptr)) fr.nuisance_oob = fitted->oob_errors;
      reports[s].per_fold.push_back(std::move(fr));
      for (auto& w : fs.warnings) {
        reports[s].warnings.push_back("fold " + std::to_string(test_idx.front()) + ": " + w);
      }
    }
  }

  const double z = normal_quantile(1.0 - cfg.alpha / 2.0);
  for (std::size_t s = 0; s < S; ++s) {
    ThetaReport& rep = reports[s];
    double warm = 0.0;
    for (const auto& fr : rep.per_fold) warm += fr.theta;
    warm /= static_cast<double>(rep.per_fold.size());
    RootResult rr = solve_rows(pooled[s], spec, cfg, warm);
    double sq = 0.0;
    PsiSums sums = equation_sums(pooled[s], rr.theta, spec.link, cfg.derivative, &sq);
    if (!(std::abs(sums.dpsi) > 0.0)) throw NumericError("singular information at theta_hat");
    rep.theta_hat = rr.theta;
    rep.iterations = rr.iterations;
    rep.converged = rr.converged;
    rep.mean_psi = sums.psi / static_cast<double>(n);
    rep.v_hat = static_cast<double>(n) * sq / (sums.dpsi * sums.dpsi);
    double half = std::sqrt(rep.v_hat / static_cast<double>(n)) * z;
    rep.ci_lo = rep.theta_hat - half;
    rep.ci_hi = rep.theta_hat + half;
    if (!rr.converged) rep.warnings.push_back("Fisher scoring did not converge");
  }
  return reports;
}

inline ThetaReport fit(const Dataset& data, const ModelSpec& spec, const FitConfig& cfg) {
  return fit_schemes(data, spec, cfg, {cfg.scheme}).front();
}

// Chooses the ROSE max_depth by held-out sandwich loss: nuisances, pilot and
// forests on one half of the rows, loss on the other half.
inline DepthSearch tune_rose_depth(const Dataset& data, const ModelSpec& spec, const FitConfig& cfg,
                                   std::vector<std::size_t> depth_grid = {1, 2, 3, 5, 10, 20}) {
  data.validate();
  spec.validate();
  if (depth_grid.empty()) throw ConfigError("depth grid is empty");
  scheme::Rose r;
  if (auto* given = std::get_if<scheme::Rose>(&cfg.scheme)) r = *given;
  check_scheme(r, spec);
  const std::size_t n = data.size();
  if (n < 4) throw ConfigError("depth tuning needs n >= 4");

  std::vector<std::size_t> perm = detail::all_rows(n);
  Engine eng = make_engine(derive_seed(cfg.fold_seed, {hash_name("tune")}));
  shuffle(eng, std::span<std::size_t>(perm));
  std::vector<std::size_t> fit_rows(perm.begin(), perm.begin() + n / 2);
  std::vector<std::size_t> eval_rows(perm.begin() + n / 2, perm.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  std::sort(eval_rows.begin(), eval_rows.end());
  const Dataset train = data.subset(fit_rows);

  std::optional<FittedNuisances> fitted;
  const FittedNuisances* nf = detail::scheme_oracle(cfg.scheme, cfg);
  if (!nf) {
    fitted = fit_nuisances(train, spec, cfg.nuisance, cfg.seed);
    nf = &*fitted;
  }
  std::vector<NuisanceValues> all = nf->at_rows(data);
  std::vector<NuisanceValues> train_values;
  EquationRows rows;
  rows.resize(fit_rows.size());
  auto c0 = first_moment_coefficient(spec);
  for (std::size_t t = 0; t < fit_rows.size(); ++t) {
    std::size_t i = fit_rows[t];
    train_values.push_back(all[i]);
    detail::fill_rows(rows, t, data[i], all[i], c0(data[i], all[i]));
  }
  double pilot = solve_rows(rows, spec, cfg, 0.0).theta;

  SchemeContext ctx{data, spec, all, *nf, pilot, cfg.seed, cfg.nuisance, cfg.derivative};
  RoseInputs in = rose_inputs(ctx, r.J);
  return search_rose_depth(in, r, depth_grid, fit_rows, eval_rows, cfg.seed);
}

}  // namespace rose
