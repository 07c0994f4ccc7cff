#pragma once

// Competing estimators: how nuisances and per-observation weights are
// produced for the unweighted, ROSE, locally efficient, semiparametric
// efficient and oracle schemes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rose/cart_forest.hpp"
#include "rose/dataset.hpp"
#include "rose/error.hpp"
#include "rose/model.hpp"
#include "rose/rng.hpp"
#include "rose/rose_forest.hpp"

namespace rose {

using ZFunction = std::function<double(std::span<const double>)>;
using XZFunction = std::function<double(double, std::span<const double>)>;

// Evaluable nuisance functions. f and x_center define the linear predictor
// theta * (x - x_center(z)) + f(z); m holds one function per moment.
struct FittedNuisances {
  ZFunction f;
  ZFunction x_center;
  std::vector<ZFunction> m;
  XZFunction v;  // efficient scheme only
  ZFunction h;   // efficient scheme only
  std::map<std::string, double> oob_errors;  // per fitted regression

  NuisanceValues at(const Observation& obs) const {
    NuisanceValues nv;
    nv.f = f(obs.z);
    nv.x_center = x_center ? x_center(obs.z) : 0.0;
    nv.m.resize(m.size());
    for (std::size_t j = 0; j < m.size(); ++j) nv.m[j] = m[j](obs.z);
    if (v) nv.v = v(obs.x, obs.z);
    if (h) nv.h = h(obs.z);
    return nv;
  }

  std::vector<NuisanceValues> at_rows(const Dataset& d) const {
    std::vector<NuisanceValues> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      out[i] = at(d[i]);
      bool ok = std::isfinite(out[i].f) && std::isfinite(out[i].x_center);
      for (double mj : out[i].m) ok = ok && std::isfinite(mj);
      if (!ok) throw NumericError("non-finite nuisance evaluation", i);
    }
    return out;
  }

  // Plain GPLM oracle: x_center = 0.
  static FittedNuisances oracle(ZFunction f, std::vector<ZFunction> m) {
    FittedNuisances n;
    n.f = std::move(f);
    n.x_center = [](std::span<const double>) { return 0.0; };
    n.m = std::move(m);
    return n;
  }

  static FittedNuisances zero(std::size_t J) {
    auto zero_fn = [](std::span<const double>) { return 0.0; };
    return oracle(zero_fn, std::vector<ZFunction>(J, zero_fn));
  }
};

// Forest settings for the nuisance regressions. Named overrides take
// precedence over `forest`; names are y_xz, g_z, y_z, x_z, m<j>_z, v_xz,
// h_num_z, h_den_z and r_z.
struct NuisanceConfig {
  ForestParams forest;
  std::map<std::string, ForestParams> overrides;
  bool tune = false;  // pick each regression's params by OOB error over `grid`
  std::vector<ForestParams> grid;

  static std::vector<ForestParams> default_grid(const ForestParams& base) {
    std::vector<ForestParams> g;
    for (double frac : {0.1, 0.5, 1.0}) {
      for (std::size_t mns : {10u, 50u, 200u}) {
        ForestParams p = base;
        p.sample_fraction = frac;
        p.min_node_size = mns;
        g.push_back(p);
      }
    }
    return g;
  }

  ForestParams params_for(const std::string& name, std::uint64_t seed) const {
    auto it = overrides.find(name);
    ForestParams p = it != overrides.end() ? it->second : forest;
    p.seed = derive_seed(seed, {hash_name(name)});
    return p;
  }
};

namespace detail {

// Runs `fn`, prefixing any library error with the nuisance's name while
// keeping its type.
template <class F>
auto with_nuisance_name(const std::string& name, F&& fn) {
  const std::string prefix = "nuisance " + name + ": ";
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const DomainError& e) {
    throw DomainError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  }
}

inline std::shared_ptr<const RegressionForest> fit_named(const std::string& name, const Matrix& z,
                                                         std::span<const double> targets,
                                                         const NuisanceConfig& cfg,
                                                         std::uint64_t seed,
                                                         std::span<const double> weights = {}) {
  return with_nuisance_name(name, [&] {
    ForestParams p = cfg.params_for(name, seed);
    if (cfg.tune) {
      std::vector<ForestParams> grid = cfg.grid.empty() ? NuisanceConfig::default_grid(p) : cfg.grid;
      // Keep grid points that can split at this sample size.
      std::vector<ForestParams> usable;
      for (auto q : grid) {
        q.seed = p.seed;
        if (q.min_node_size * 2 <= z.rows()) usable.push_back(q);
      }
      if (!usable.empty()) p = tune_by_oob(z, targets, usable, weights);
    }
    return std::make_shared<const RegressionForest>(fit_regression(z, targets, weights, p));
  });
}

inline std::shared_ptr<const RegressionForest> fit_named_probability(
    const std::string& name, const Matrix& z, const std::vector<bool>& labels,
    const NuisanceConfig& cfg, std::uint64_t seed) {
  return with_nuisance_name(name, [&] {
    ForestParams p = cfg.params_for(name, seed);
    if (cfg.tune) {
      std::vector<double> y(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? 1.0 : 0.0;
      std::vector<ForestParams> grid = cfg.grid.empty() ? NuisanceConfig::default_grid(p) : cfg.grid;
      std::vector<ForestParams> usable;
      for (auto q : grid) {
        q.seed = p.seed;
        if (q.min_node_size * 2 <= z.rows()) usable.push_back(q);
      }
      if (!usable.empty()) p = tune_by_oob(z, y, usable);
    }
    return std::make_shared<const RegressionForest>(fit_probability(z, labels, p));
  });
}

inline ZFunction as_zfunction(std::shared_ptr<const RegressionForest> f) {
  return [f](std::span<const double> z) { return f->predict(z); };
}

// OOB prediction where available, otherwise the full-forest prediction.
inline std::vector<double> in_sample_predictions(const RegressionForest& f, const Matrix& z) {
  std::vector<double> out = f.oob_predictions();
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (std::isnan(out[i])) out[i] = f.predict(z.row(i));
  }
  return out;
}

}  // namespace detail

// Nuisance regressions on a training set. Identity link: f = E[Y|Z] with
// x_center = E[X|Z] (the partially linear centred form). Other links: the
// reparameterisation E[g(E[Y|X,Z]) | Z], again centred at E[X|Z].
// m_j regresses M_j(X) on Z, using a probability forest for indicators.
inline FittedNuisances fit_nuisances(const Dataset& train, const ModelSpec& spec,
                                     const NuisanceConfig& cfg, std::uint64_t seed) {
  spec.validate();
  if (train.size() == 0) throw ConfigError("cannot fit nuisances on an empty training set");
  const Matrix& z = train.z;
  FittedNuisances out;

  auto x_fit = detail::fit_named("x_z", z, train.x, cfg, seed);
  out.x_center = detail::as_zfunction(x_fit);
  out.oob_errors["x_z"] = x_fit->oob_error();

  if (spec.link.kind() == LinkKind::identity) {
    auto y_fit = detail::fit_named("y_z", z, train.y, cfg, seed);
    out.oob_errors["y_z"] = y_fit->oob_error();
    out.f = detail::as_zfunction(y_fit);
  } else {
    Matrix xz = z.prepend_column(train.x);
    auto mu_fit = detail::fit_named("y_xz", xz, train.y, cfg, seed);
    out.oob_errors["y_xz"] = mu_fit->oob_error();
    std::vector<double> mu = detail::in_sample_predictions(*mu_fit, xz);
    double scale = 0.0;
    for (double y : train.y) scale += std::abs(y);
    double floor = 1e-6 * scale / static_cast<double>(train.size()) + 1e-12;
    std::vector<double> g_target(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) g_target[i] = spec.link(std::max(mu[i], floor));
    auto g_fit = detail::fit_named("g_z", z, g_target, cfg, seed);
    out.oob_errors["g_z"] = g_fit->oob_error();
    out.f = detail::as_zfunction(g_fit);
  }

  for (std::size_t j = 0; j < spec.J(); ++j) {
    const Moment& mom = spec.moments[j];
    std::string name = "m" + std::to_string(j + 1) + "_z";
    if (mom.kind == Moment::Kind::identity) {
      out.m.push_back(out.x_center);
    } else if (mom.is_indicator()) {
      std::vector<bool> labels(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) labels[i] = mom(train.x[i]) != 0.0;
      auto fit = detail::fit_named_probability(name, z, labels, cfg, seed);
      out.oob_errors[name] = fit->oob_error();
      out.m.push_back(detail::as_zfunction(fit));
    } else {
      std::vector<double> t(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) t[i] = mom(train.x[i]);
      auto fit = detail::fit_named(name, z, t, cfg, seed);
      out.oob_errors[name] = fit->oob_error();
      out.m.push_back(detail::as_zfunction(fit));
    }
  }
  return out;
}

// Training-set quantities every weight scheme starts from.
struct SchemeContext {
  const Dataset& train;
  const ModelSpec& spec;
  std::span<const NuisanceValues> nuis;  // at the training rows
  const FittedNuisances& nuisances;
  double theta_pilot;
  std::uint64_t seed;
  const NuisanceConfig& forests;
  DerivativeForm form = DerivativeForm::score_ratio;
};

inline constexpr double kVarianceFloor = 1e-6;

// w^(loceff)(z) = 1 / E[psi_1^2 / dpsi_1 | Z = z]. Rows with a vanishing
// derivative carry no information about the ratio and are dropped.
inline ZFunction locally_efficient_weights(const SchemeContext& ctx, const ForestParams* params = nullptr) {
  const std::size_t n = ctx.train.size();
  std::vector<double> r(n, 0.0), wts(n, 0.0);
  double dscale = 0.0;
  std::vector<double> p1(n), d1(n);
  for (std::size_t i = 0; i < n; ++i) {
    p1[i] = psi(ctx.train[i], ctx.theta_pilot, ctx.nuis[i], ctx.spec)[0];
    d1[i] = dpsi_dtheta(ctx.train[i], ctx.theta_pilot, ctx.nuis[i], ctx.spec, ctx.form)[0];
    dscale += std::abs(d1[i]);
  }
  const double eps = 1e-12 * dscale / static_cast<double>(std::max<std::size_t>(n, 1)) + 1e-300;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(d1[i]) > eps) {
      r[i] = p1[i] * p1[i] / d1[i];
      wts[i] = 1.0;
    }
  }
  NuisanceConfig cfg = ctx.forests;
  if (params) cfg.overrides["r_z"] = *params;
  auto fit = detail::fit_named("r_z", ctx.train.z, r, cfg, ctx.seed, wts);
  double rscale = 0.0;
  for (std::size_t i = 0; i < n; ++i) rscale += std::abs(r[i]);
  const double den = 1e-12 * rscale / static_cast<double>(std::max<std::size_t>(n, 1)) + 1e-300;
  return [fit, den](std::span<const double> z) {
    double p = fit->predict(z);
    if (std::abs(p) < den) return (p < 0 ? -1.0 : 1.0) / den;
    return 1.0 / p;
  };
}

// Adds v(x, z) = E[eps^2 | X, Z] (floored at 1e-6) and
// h(z) = E[v^-1 X | Z] / E[v^-1 | Z] to the training nuisances.
inline FittedNuisances efficient_nuisances(const SchemeContext& ctx, const ForestParams* params = nullptr) {
  const std::size_t n = ctx.train.size();
  NuisanceConfig cfg = ctx.forests;
  if (params) {
    for (const char* name : {"v_xz", "h_num_z", "h_den_z"}) cfg.overrides[name] = *params;
  }
  std::vector<double> e2(n);
  for (std::size_t i = 0; i < n; ++i) {
    double e = epsilon(ctx.train[i], ctx.theta_pilot, ctx.nuis[i].f, ctx.spec.link,
                       ctx.nuis[i].x_center, i);
    e2[i] = e * e;
  }
  Matrix xz = ctx.train.z.prepend_column(ctx.train.x);
  auto v_fit = detail::fit_named("v_xz", xz, e2, cfg, ctx.seed);
  std::vector<double> v_in = detail::in_sample_predictions(*v_fit, xz);
  std::vector<double> inv(n), inv_x(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv[i] = 1.0 / std::max(v_in[i], kVarianceFloor);
    inv_x[i] = inv[i] * ctx.train.x[i];
  }
  auto num = detail::fit_named("h_num_z", ctx.train.z, inv_x, cfg, ctx.seed);
  auto den = detail::fit_named("h_den_z", ctx.train.z, inv, cfg, ctx.seed);

  FittedNuisances out = ctx.nuisances;
  out.v = [v_fit](double x, std::span<const double> z) {
    std::vector<double> row(z.size() + 1);
    row[0] = x;
    std::copy(z.begin(), z.end(), row.begin() + 1);
    return std::max(v_fit->predict(row), kVarianceFloor);
  };
  out.h = [num, den](std::span<const double> z) { return num->predict(z) / den->predict(z); };
  return out;
}

// ---- scheme descriptions ----

namespace scheme {

struct Unweighted {};

struct Rose {
  std::size_t J = 1;
  RoseTreeParams tree;
  std::size_t n_trees = 500;
  double c_split = 0.5;
  // Nonempty: the depth is chosen per fold by held-out sandwich loss.
  std::vector<std::size_t> depth_grid;
  std::optional<double> clip;
  bool disjoint_split_eval = false;
};

struct LocallyEfficient {
  std::optional<ForestParams> forest;
};

struct Efficient {
  std::optional<ForestParams> forest;
};

struct Oracle {
  ZFunction weight;  // weight on the first moment
  std::optional<FittedNuisances> nuisances;
};

}  // namespace scheme

using Scheme = std::variant<scheme::Unweighted, scheme::Rose, scheme::LocallyEfficient,
                            scheme::Efficient, scheme::Oracle>;

inline std::string scheme_name(const Scheme& s) {
  struct {
    std::string operator()(const scheme::Unweighted&) const { return "unweighted"; }
    std::string operator()(const scheme::Rose& r) const {
      return r.J == 1 ? "rose" : "rose_j" + std::to_string(r.J);
    }
    std::string operator()(const scheme::LocallyEfficient&) const { return "locally_efficient"; }
    std::string operator()(const scheme::Efficient&) const { return "efficient"; }
    std::string operator()(const scheme::Oracle&) const { return "oracle"; }
  } v;
  return std::visit(v, s);
}

inline void check_scheme(const Scheme& s, const ModelSpec& spec) {
  if (auto* r = std::get_if<scheme::Rose>(&s)) {
    if (r->J == 0 || r->J > spec.J()) {
      throw ConfigError("ROSE scheme J = " + std::to_string(r->J) + " but the model has " +
                        std::to_string(spec.J()) + " moment(s)");
    }
    if (r->n_trees == 0) throw ConfigError("ROSE scheme needs n_trees >= 1");
    if (!(r->c_split > 0)) throw ConfigError("ROSE scheme needs c_split > 0");
    if (r->clip && !(*r->clip > 0)) throw ConfigError("ROSE weight clip must be positive");
  }
  if (auto* o = std::get_if<scheme::Oracle>(&s)) {
    if (!o->weight) throw ConfigError("oracle scheme needs a weight function");
    if (o->nuisances && o->nuisances->m.size() != spec.J()) {
      throw ConfigError("oracle nuisances do not match the model's moment count");
    }
  }
}

// Per-observation coefficient C with psi(theta) = C * eps(theta) and
// dpsi/dtheta = C * d eps/d theta (score-ratio form: -C (x - x_center)).
using Coefficient = std::function<double(const Observation&, const NuisanceValues&)>;

struct FittedScheme {
  Coefficient coefficient;
  std::optional<std::size_t> rose_depth;
  std::vector<std::string> warnings;
};

inline Coefficient first_moment_coefficient(const ModelSpec& spec, ZFunction w = nullptr) {
  Moment m0 = spec.moments[0];
  return [m0, w](const Observation& o, const NuisanceValues& nv) {
    double c = m0(o.x) - nv.m[0];
    return w ? w(o.z) * c : c;
  };
}

// psi_j and dpsi_j at the pilot over the training rows, for moments j < J.
inline RoseInputs rose_inputs(const SchemeContext& ctx, std::size_t J) {
  const std::size_t n = ctx.train.size();
  std::vector<std::vector<double>> p(J, std::vector<double>(n)), d(J, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    auto pi = psi(ctx.train[i], ctx.theta_pilot, ctx.nuis[i], ctx.spec);
    auto di = dpsi_dtheta(ctx.train[i], ctx.theta_pilot, ctx.nuis[i], ctx.spec, ctx.form);
    for (std::size_t j = 0; j < J; ++j) {
      p[j][i] = pi[j];
      d[j][i] = di[j];
    }
  }
  return RoseInputs(ctx.train.z, std::move(p), std::move(d));
}

inline RoseForestWeights fit_rose_weights(const RoseInputs& in, const scheme::Rose& r,
                                          const RoseTreeParams& tree, std::uint64_t seed,
                                          std::span<const std::size_t> rows = {}) {
  RoseForestWeights w = in.J() == 1
                            ? fit_rose_forest(in, tree, r.n_trees, r.c_split, seed, rows)
                            : fit_rose_forest_multi(in, tree, r.n_trees, r.c_split, seed, rows,
                                                    r.disjoint_split_eval);
  return clip_weights(w, r.clip);
}

// Held-out sandwich loss of forest weights fit on `fit_rows` and evaluated on
// `eval_rows`.
inline double heldout_sandwich_loss(const RoseInputs& in, const RoseForestWeights& w,
                                    std::span<const std::size_t> eval_rows) {
  double num = 0.0, den = 0.0;
  for (std::size_t i : eval_rows) {
    auto wi = w.evaluate(in.z().row(i));
    double s = 0.0;
    for (std::size_t j = 0; j < in.J(); ++j) {
      s += wi[j] * in.psi(j)[i];
      den += wi[j] * in.dpsi(j)[i];
    }
    num += s * s;
  }
  return num / (den * den);
}

struct DepthSearch {
  std::size_t depth = 0;
  std::vector<double> losses;  // aligned with the grid
};

// Argmin of held-out sandwich loss over the grid; ties go to the smaller depth.
inline DepthSearch search_rose_depth(const RoseInputs& in, const scheme::Rose& r,
                                     std::span<const std::size_t> grid,
                                     std::span<const std::size_t> fit_rows,
                                     std::span<const std::size_t> eval_rows, std::uint64_t seed) {
  if (grid.empty()) throw ConfigError("depth grid is empty");
  DepthSearch out;
  std::size_t best = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    RoseTreeParams tp = r.tree;
    tp.max_depth = grid[g];
    double loss = std::numeric_limits<double>::quiet_NaN();
    try {
      auto w = fit_rose_weights(in, r, tp, seed, fit_rows);
      loss = heldout_sandwich_loss(in, w, eval_rows);
    } catch (const NumericError&) {
    }
    out.losses.push_back(loss);
    bool better = !std::isnan(loss) &&
                  (std::isnan(out.losses[best]) || loss < out.losses[best] ||
                   (loss == out.losses[best] && grid[g] < grid[best]));
    if (g == 0 || better) best = g;
  }
  out.depth = grid[best];
  return out;
}

inline FittedScheme fit_scheme(const Scheme& s, const SchemeContext& ctx) {
  FittedScheme out;
  const ModelSpec& spec = ctx.spec;
  if (std::holds_alternative<scheme::Unweighted>(s)) {
    out.coefficient = first_moment_coefficient(spec);
  } else if (auto* o = std::get_if<scheme::Oracle>(&s)) {
    out.coefficient = first_moment_coefficient(spec, o->weight);
  } else if (auto* le = std::get_if<scheme::LocallyEfficient>(&s)) {
    out.coefficient =
        first_moment_coefficient(spec, locally_efficient_weights(ctx, le->forest ? &*le->forest : nullptr));
  } else if (auto* ef = std::get_if<scheme::Efficient>(&s)) {
    auto eff = std::make_shared<FittedNuisances>(
        efficient_nuisances(ctx, ef->forest ? &*ef->forest : nullptr));
    out.coefficient = [eff](const Observation& o, const NuisanceValues&) {
      return (o.x - eff->h(o.z)) / eff->v(o.x, o.z);
    };
  } else {
    const auto& r = std::get<scheme::Rose>(s);
    RoseInputs in = rose_inputs(ctx, r.J);
    RoseTreeParams tree = r.tree;
    if (!r.depth_grid.empty()) {
      // Inner split of the training rows: the same nuisances and pilot,
      // forests fit on one half and scored on the other.
      Engine eng = make_engine(derive_seed(ctx.seed, {hash_name("rose_depth")}));
      std::vector<std::size_t> rows = detail::all_rows(in.size());
      shuffle(eng, std::span<std::size_t>(rows));
      std::size_t half = rows.size() / 2;
      std::span<const std::size_t> a(rows.data(), half), b(rows.data() + half, rows.size() - half);
      tree.max_depth = search_rose_depth(in, r, r.depth_grid, a, b, ctx.seed).depth;
    }
    auto w = std::make_shared<RoseForestWeights>(fit_rose_weights(in, r, tree, ctx.seed));
    out.rose_depth = tree.max_depth;
    out.warnings = w->warnings();
    std::vector<Moment> moments(spec.moments.begin(), spec.moments.begin() + r.J);
    out.coefficient = [w, moments](const Observation& o, const NuisanceValues& nv) {
      double c = 0.0;
      for (std::size_t j = 0; j < moments.size(); ++j) {
        c += w->evaluate(o.z, j) * (moments[j](o.x) - nv.m[j]);
      }
      return c;
    };
  }
  return out;
}

}  // namespace rose
