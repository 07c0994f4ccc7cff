#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rose/estimator.hpp"
#include "rose/io.hpp"
#include "rose/parallel.hpp"
#include "rose/sim.hpp"
#include "toml_subset.hpp"

namespace rose::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

// Settings for every command. Optional fields fall back to command-specific
// defaults (simulation presets for `simulate`).
struct RunConfig {
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;

  CsvColumns columns;

  std::string link = "identity";
  std::vector<std::string> moments{"identity"};

  std::optional<std::size_t> k_folds;
  double alpha = 0.05;
  std::size_t max_fisher_iters = 100;
  double fisher_tol = 1e-10;
  std::string nuisances = "forest";  // or "zero"

  std::string scheme = "rose";
  std::size_t rose_j = 1;
  std::optional<std::size_t> rose_trees;
  std::optional<std::size_t> rose_depth;
  std::size_t rose_min_node = 10;
  std::size_t rose_mtry = 0;
  double c_split = 0.5;
  double alpha_regularity = 0.01;
  bool honest = false;
  bool disjoint_split_eval = false;
  std::vector<std::size_t> depth_grid;
  std::optional<double> clip;
  double oracle_weight = 1.0;

  std::optional<std::size_t> forest_trees;
  std::optional<std::size_t> forest_min_node;
  std::optional<double> forest_fraction;
  std::size_t forest_mtry = 0;
  bool forest_tune = false;

  std::string dgp = "sim2";
  std::size_t n = 1000;
  std::size_t reps = 100;
  std::vector<std::string> sim_schemes;
  std::optional<bool> trimmed;
  bool replications = false;

  std::string json_out;
  std::string csv_out;
  std::string data_path;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t c = s.find(',', start);
    out.push_back(s.substr(start, c == std::string::npos ? std::string::npos : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

inline std::vector<std::size_t> parse_grid(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError("malformed depth grid '" + s + "' (expected e.g. 1,2,5)");
    }
    out.push_back(v);
  }
  return out;
}

inline void apply_toml(RunConfig& rc, const toml::Document& doc) {
  doc.check_schema({
      {"", {"seed", "threads"}},
      {"data", {"y", "x", "z"}},
      {"model", {"link", "moments"}},
      {"fit", {"k_folds", "alpha", "max_fisher_iters", "fisher_tol", "nuisances"}},
      {"scheme",
       {"name", "j", "n_trees", "max_depth", "min_node_size", "mtry", "c_split", "alpha_regularity",
        "honest", "disjoint_split_eval", "depth_grid", "clip", "oracle_weight"}},
      {"forest", {"n_trees", "min_node_size", "sample_fraction", "mtry", "tune"}},
      {"simulate", {"dgp", "n", "reps", "schemes", "trimmed", "replications"}},
      {"output", {"json", "csv"}},
  });
  using toml::get;
  std::uint64_t seed = 0;
  if (get(doc, "", "seed", seed)) rc.seed = seed;
  get(doc, "", "threads", rc.threads);
  get(doc, "data", "y", rc.columns.y);
  get(doc, "data", "x", rc.columns.x);
  get(doc, "data", "z", rc.columns.z);
  get(doc, "model", "link", rc.link);
  get(doc, "model", "moments", rc.moments);
  std::size_t k = 0;
  if (get(doc, "fit", "k_folds", k)) rc.k_folds = k;
  get(doc, "fit", "alpha", rc.alpha);
  get(doc, "fit", "max_fisher_iters", rc.max_fisher_iters);
  get(doc, "fit", "fisher_tol", rc.fisher_tol);
  get(doc, "fit", "nuisances", rc.nuisances);
  get(doc, "scheme", "name", rc.scheme);
  get(doc, "scheme", "j", rc.rose_j);
  std::size_t u = 0;
  if (get(doc, "scheme", "n_trees", u)) rc.rose_trees = u;
  if (get(doc, "scheme", "max_depth", u)) rc.rose_depth = u;
  get(doc, "scheme", "min_node_size", rc.rose_min_node);
  get(doc, "scheme", "mtry", rc.rose_mtry);
  get(doc, "scheme", "c_split", rc.c_split);
  get(doc, "scheme", "alpha_regularity", rc.alpha_regularity);
  get(doc, "scheme", "honest", rc.honest);
  get(doc, "scheme", "disjoint_split_eval", rc.disjoint_split_eval);
  get(doc, "scheme", "depth_grid", rc.depth_grid);
  double clip = 0;
  if (get(doc, "scheme", "clip", clip)) rc.clip = clip;
  get(doc, "scheme", "oracle_weight", rc.oracle_weight);
  if (get(doc, "forest", "n_trees", u)) rc.forest_trees = u;
  if (get(doc, "forest", "min_node_size", u)) rc.forest_min_node = u;
  double frac = 0;
  if (get(doc, "forest", "sample_fraction", frac)) rc.forest_fraction = frac;
  get(doc, "forest", "mtry", rc.forest_mtry);
  get(doc, "forest", "tune", rc.forest_tune);
  get(doc, "simulate", "dgp", rc.dgp);
  get(doc, "simulate", "n", rc.n);
  get(doc, "simulate", "reps", rc.reps);
  get(doc, "simulate", "schemes", rc.sim_schemes);
  bool tr = false;
  if (get(doc, "simulate", "trimmed", tr)) rc.trimmed = tr;
  get(doc, "simulate", "replications", rc.replications);
  get(doc, "output", "json", rc.json_out);
  get(doc, "output", "csv", rc.csv_out);
}

inline ModelSpec build_spec(const RunConfig& rc) {
  ModelSpec spec;
  spec.link = Link::from_name(rc.link);
  spec.moments.clear();
  for (const auto& m : rc.moments) spec.moments.push_back(Moment::from_name(m));
  return spec;
}

inline ForestParams apply_forest(ForestParams p, const RunConfig& rc) {
  if (rc.forest_trees) p.n_trees = *rc.forest_trees;
  if (rc.forest_min_node) p.min_node_size = *rc.forest_min_node;
  if (rc.forest_fraction) p.sample_fraction = *rc.forest_fraction;
  if (rc.forest_mtry) p.mtry = rc.forest_mtry;
  return p;
}

inline scheme::Rose build_rose(const RunConfig& rc, scheme::Rose r = {}) {
  r.J = rc.rose_j;
  if (rc.rose_trees) r.n_trees = *rc.rose_trees;
  if (rc.rose_depth) r.tree.max_depth = *rc.rose_depth;
  r.tree.min_node_size = rc.rose_min_node;
  r.tree.mtry = rc.rose_mtry;
  r.tree.alpha_regularity = rc.alpha_regularity;
  r.tree.honest = rc.honest;
  r.c_split = rc.c_split;
  if (!rc.depth_grid.empty()) r.depth_grid = rc.depth_grid;
  if (rc.clip) r.clip = rc.clip;
  r.disjoint_split_eval = rc.disjoint_split_eval;
  return r;
}

inline Scheme build_scheme(const RunConfig& rc) {
  const std::string& s = rc.scheme;
  if (s == "unweighted") return scheme::Unweighted{};
  if (s == "rose") return build_rose(rc);
  if (s == "locally_efficient") return scheme::LocallyEfficient{};
  if (s == "efficient") return scheme::Efficient{};
  if (s == "oracle") {
    double c = rc.oracle_weight;
    return scheme::Oracle{[c](std::span<const double>) { return c; }, std::nullopt};
  }
  throw ConfigError("unknown scheme '" + s +
                    "' (valid: unweighted, rose, locally_efficient, efficient, oracle)");
}

inline FitConfig build_fit_config(const RunConfig& rc, const ModelSpec& spec, std::uint64_t seed) {
  FitConfig cfg;
  cfg.k_folds = rc.k_folds.value_or(10);
  cfg.alpha = rc.alpha;
  cfg.max_fisher_iters = rc.max_fisher_iters;
  cfg.fisher_tol = rc.fisher_tol;
  cfg.fold_seed = seed;
  cfg.seed = derive_seed(seed, {1});
  cfg.scheme = build_scheme(rc);
  cfg.nuisance.forest = apply_forest(ForestParams{}, rc);
  cfg.nuisance.tune = rc.forest_tune;
  if (rc.forest_tune) cfg.nuisance.grid = NuisanceConfig::default_grid(cfg.nuisance.forest);
  if (rc.nuisances == "zero") {
    cfg.oracle_nuisances = FittedNuisances::zero(spec.J());
  } else if (rc.nuisances != "forest") {
    throw ConfigError("unknown nuisances '" + rc.nuisances + "' (valid: forest, zero)");
  }
  return cfg;
}

inline void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

inline Json moments_json(const ModelSpec& spec) {
  Json m = Json::array();
  for (const auto& mo : spec.moments) m.push_back(mo.name);
  return m;
}

inline int cmd_fit(const RunConfig& rc, std::uint64_t seed, std::ostream& out) {
  Dataset data = to_dataset(read_csv(rc.data_path), rc.columns);
  ModelSpec spec = build_spec(rc);
  FitConfig cfg = build_fit_config(rc, spec, seed);
  ThetaReport rep = fit(data, spec, cfg);
  Json j;
  j["command"] = "fit";
  j["seed"] = seed;
  j["d"] = data.dim();
  j["link"] = std::string(spec.link.name());
  j["moments"] = moments_json(spec);
  j["k_folds"] = cfg.k_folds;
  j["nuisances"] = rc.nuisances;
  Json body = to_json(rep);
  for (auto& [k, v] : body.items()) j[k] = v;
  write_output(rc.json_out, dump(j), out);
  return rep.converged ? kOk : kNumeric;
}

inline Scheme sim_scheme(const std::string& name, DgpKind kind, const SimPreset& pre,
                         const RunConfig& rc) {
  auto preset_rose = [&](std::size_t J) {
    for (const auto& s : pre.schemes) {
      if (auto* r = std::get_if<scheme::Rose>(&s); r && r->J == J) return *r;
    }
    scheme::Rose r = std::get<scheme::Rose>(pre.schemes[1]);
    r.J = J;
    return r;
  };
  auto tweak = [&](scheme::Rose r) {
    if (rc.rose_trees) r.n_trees = *rc.rose_trees;
    if (rc.rose_depth) {
      r.tree.max_depth = *rc.rose_depth;
      r.depth_grid.clear();
    }
    if (!rc.depth_grid.empty()) r.depth_grid = rc.depth_grid;
    return r;
  };
  if (name == "unweighted") return scheme::Unweighted{};
  if (name == "rose") return tweak(preset_rose(1));
  if (name.rfind("rose_j", 0) == 0) {
    std::size_t J = parse_grid(name.substr(6)).at(0);
    return tweak(preset_rose(J));
  }
  if (name == "locally_efficient") return scheme::LocallyEfficient{};
  if (name == "efficient") return scheme::Efficient{};
  if (name == "oracle") {
    auto w = dgp_oracle_weight(kind);
    if (!w) {
      throw ConfigError("no closed-form oracle weight for dgp " + std::string(dgp_name(kind)));
    }
    std::optional<FittedNuisances> nu;
    if (!pre.cfg.oracle_nuisances) nu = dgp_oracle_nuisances(kind);
    return scheme::Oracle{*w, nu};
  }
  throw ConfigError("unknown scheme '" + name +
                    "' (valid: unweighted, rose, rose_j2, locally_efficient, efficient, oracle)");
}

inline int cmd_simulate(const RunConfig& rc, std::uint64_t seed, std::ostream& out) {
  DgpKind kind = parse_dgp(rc.dgp);
  if (rc.reps < 2) throw ConfigError("simulate needs reps >= 2");
  SimPreset pre = dgp_preset(kind, rc.forest_trees.value_or(100));
  FitConfig cfg = pre.cfg;
  if (rc.k_folds) cfg.k_folds = *rc.k_folds;
  cfg.alpha = rc.alpha;
  cfg.max_fisher_iters = rc.max_fisher_iters;
  cfg.fisher_tol = rc.fisher_tol;
  if (rc.forest_min_node || rc.forest_fraction || rc.forest_mtry) {
    cfg.nuisance.forest = apply_forest(cfg.nuisance.forest, rc);
    cfg.nuisance.overrides.clear();
  }
  std::vector<Scheme> schemes;
  if (rc.sim_schemes.empty()) {
    for (const auto& s : pre.schemes) schemes.push_back(s);
  } else {
    for (const auto& name : rc.sim_schemes) schemes.push_back(sim_scheme(name, kind, pre, rc));
  }
  MonteCarloOptions opt;
  opt.trimmed = rc.trimmed.value_or(pre.trimmed);
  SimReport rep = run_monte_carlo({kind, rc.n}, schemes, rc.reps, cfg, seed, opt);
  Json j;
  j["command"] = "simulate";
  j["k_folds"] = cfg.k_folds;
  Json body = to_json(rep, rc.replications);
  for (auto& [k, v] : body.items()) j[k] = v;
  write_output(rc.json_out, dump(j), out);
  if (!rc.csv_out.empty()) write_output(rc.csv_out, sim_report_csv(rep), out);
  return kOk;
}

inline int cmd_tune(const RunConfig& rc, std::uint64_t seed, std::vector<std::size_t> grid,
                    std::ostream& out) {
  Dataset data;
  std::string source;
  if (!rc.data_path.empty()) {
    data = to_dataset(read_csv(rc.data_path), rc.columns);
    source = rc.data_path;
  } else {
    DgpKind kind = parse_dgp(rc.dgp);
    data = sample({kind, rc.n}, derive_seed(seed, {hash_name("tune_data")}));
    source = std::string(dgp_name(kind));
  }
  RunConfig r = rc;
  r.scheme = "rose";
  ModelSpec spec = build_spec(r);
  FitConfig cfg = build_fit_config(r, spec, seed);
  DepthSearch ds = tune_rose_depth(data, spec, cfg, grid);
  Json j;
  j["command"] = "tune";
  j["source"] = source;
  j["seed"] = seed;
  j["n"] = data.size();
  j["grid"] = grid;
  Json losses = Json::array();
  for (double l : ds.losses) losses.push_back(std::isfinite(l) ? Json(l) : Json(nullptr));
  j["losses"] = losses;
  j["depth"] = ds.depth;
  write_output(rc.json_out, dump(j), out);
  return kOk;
}

// Parses argv and runs one command. Config precedence: flags > TOML > defaults.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ROSE random forests and cross-fitted semiparametric estimation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "rose 0.1.0");

  RunConfig flags;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string moments, grid_text, sim_schemes, z_cols;
  std::optional<std::size_t> k_folds, rose_trees, rose_depth, forest_trees, j_opt;
  std::optional<double> alpha, oracle_weight;
  std::optional<std::string> scheme, link, nuisances, y_col, x_col, dgp;
  std::optional<std::size_t> n, reps;
  bool trimmed = false, untrimmed = false, replications = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "TOML config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed for every random stream (random if omitted)");
    sub->add_option("--threads", threads, "worker threads (0: all cores)");
    sub->add_option("--out", flags.json_out, "JSON output path (default: stdout)");
    sub->add_option("--k-folds", k_folds, "cross-fitting folds (default 10; simulate: 2)");
    sub->add_option("--alpha", alpha, "1 - confidence level (default 0.05)");
  };
  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--link", link, "identity | log | sqrt (default identity)");
    sub->add_option("--moments", moments, "comma list of identity, zero_indicator");
    sub->add_option("--nuisances", nuisances, "forest | zero (default forest)");
    sub->add_option("--y", y_col, "response column (default y)");
    sub->add_option("--x", x_col, "covariate column (default x)");
    sub->add_option("--z", z_cols, "comma list of confounder columns (default: the rest)");
    sub->add_option("--j", j_opt, "ROSE moments used (default 1)");
    sub->add_option("--trees", rose_trees, "ROSE trees (default 500)");
    sub->add_option("--forest-trees", forest_trees, "trees per nuisance forest (default 500)");
  };

  CLI::App* fit_cmd = app.add_subcommand("fit", "estimate theta on a CSV file");
  common(fit_cmd);
  model_opts(fit_cmd);
  fit_cmd->add_option("data", flags.data_path, "CSV with header y,x,z1..zd")->required();
  fit_cmd->add_option("--scheme", scheme,
                      "unweighted | rose | locally_efficient | efficient | oracle (default rose)");
  fit_cmd->add_option("--depth", rose_depth, "ROSE max depth (default 5)");
  fit_cmd->add_option("--depth-grid", grid_text, "ROSE depth grid chosen per fold, e.g. 1,2,5");
  fit_cmd->add_option("--oracle-weight", oracle_weight, "constant weight for the oracle scheme");

  CLI::App* sim_cmd = app.add_subcommand("simulate", "Monte Carlo on a built-in design");
  common(sim_cmd);
  sim_cmd->add_option("--dgp", dgp, "sim1a | sim1a_fig2a | sim1b | sim2 | sim3");
  sim_cmd->add_option("--n", n, "rows per replication (default 1000)");
  sim_cmd->add_option("--reps", reps, "replications, at least 2 (default 100)");
  sim_cmd->add_option("--schemes", sim_schemes, "comma list (default: the design's preset)");
  sim_cmd->add_option("--trees", rose_trees, "ROSE trees (default 100)");
  sim_cmd->add_option("--forest-trees", forest_trees, "trees per nuisance forest (default 100)");
  sim_cmd->add_option("--depth", rose_depth, "fixed ROSE depth instead of the preset");
  sim_cmd->add_option("--csv", flags.csv_out, "tidy CSV output path");
  sim_cmd->add_flag("--trimmed", trimmed, "1% two-sided trimming of theta-hat");
  sim_cmd->add_flag("--untrimmed", untrimmed, "no trimming");
  sim_cmd->add_flag("--replications", replications, "include per-replication estimates");

  CLI::App* tune_cmd = app.add_subcommand("tune", "choose the ROSE depth by held-out sandwich loss");
  common(tune_cmd);
  model_opts(tune_cmd);
  tune_cmd->add_option("data", flags.data_path, "CSV file (or use --dgp)");
  tune_cmd->add_option("--dgp", dgp, "built-in design to sample instead of a file");
  tune_cmd->add_option("--n", n, "rows sampled from --dgp (default 1000)");
  tune_cmd->add_option("--grid", grid_text, "depth grid, e.g. 1,2,3,5")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    RunConfig rc;
    if (!config_path.empty()) apply_toml(rc, toml::Document::parse(read_file(config_path)));
    // Flags override the file.
    if (!flags.data_path.empty()) rc.data_path = flags.data_path;
    if (!flags.json_out.empty()) rc.json_out = flags.json_out;
    if (!flags.csv_out.empty()) rc.csv_out = flags.csv_out;
    if (seed) rc.seed = seed;
    if (threads) rc.threads = *threads;
    if (k_folds) rc.k_folds = k_folds;
    if (alpha) rc.alpha = *alpha;
    if (link) rc.link = *link;
    if (!moments.empty()) rc.moments = split_list(moments);
    if (nuisances) rc.nuisances = *nuisances;
    if (y_col) rc.columns.y = *y_col;
    if (x_col) rc.columns.x = *x_col;
    if (!z_cols.empty()) rc.columns.z = split_list(z_cols);
    if (j_opt) rc.rose_j = *j_opt;
    if (rose_trees) rc.rose_trees = rose_trees;
    if (rose_depth) rc.rose_depth = rose_depth;
    if (forest_trees) rc.forest_trees = forest_trees;
    if (scheme) rc.scheme = *scheme;
    if (oracle_weight) rc.oracle_weight = *oracle_weight;
    if (dgp) rc.dgp = *dgp;
    if (n) rc.n = *n;
    if (reps) rc.reps = *reps;
    if (!sim_schemes.empty()) rc.sim_schemes = split_list(sim_schemes);
    if (trimmed && untrimmed) throw ConfigError("--trimmed and --untrimmed exclude each other");
    if (trimmed) rc.trimmed = true;
    if (untrimmed) rc.trimmed = false;
    if (replications) rc.replications = true;
    std::vector<std::size_t> grid;
    if (!grid_text.empty()) grid = parse_grid(grid_text);
    if (fit_cmd->parsed() && !grid.empty()) rc.depth_grid = grid;

    std::uint64_t s;
    if (rc.seed) {
      s = *rc.seed;
    } else {
      s = std::random_device{}();
      s = (s << 32) ^ std::random_device{}();
      err << "seed: " << s << "\n";
    }
    set_max_threads(rc.threads);
    if (fit_cmd->parsed()) return cmd_fit(rc, s, out);
    if (sim_cmd->parsed()) return cmd_simulate(rc, s, out);
    if (rc.data_path.empty() && !dgp && config_path.empty()) {
      throw ConfigError("tune needs a CSV file or --dgp");
    }
    return cmd_tune(rc, s, grid, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  }
}

}  // namespace rose::cli
