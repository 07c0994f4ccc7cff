#pragma once

// CART regression / probability forests used for every nuisance regression.
// Exact CART: split candidates are midpoints between consecutive distinct
// feature values; splits maximise the reduction in weighted residual sum of
// squares.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rose/dataset.hpp"
#include "rose/error.hpp"
#include "rose/parallel.hpp"
#include "rose/rng.hpp"

namespace rose {

enum class Sampling {
  automatic,  // with replacement iff sample_fraction == 1
  with_replacement,
  without_replacement
};

struct ForestParams {
  std::size_t n_trees = 500;
  std::size_t mtry = 0;  // 0: ceil(sqrt(d))
  std::size_t min_node_size = 10;
  std::optional<std::size_t> max_depth;
  double sample_fraction = 1.0;
  Sampling sampling = Sampling::automatic;
  bool honest = false;
  std::uint64_t seed = 0;

  std::size_t resolved_mtry(std::size_t d) const {
    std::size_t m = mtry == 0 ? static_cast<std::size_t>(std::ceil(std::sqrt(double(d)))) : mtry;
    return std::max<std::size_t>(1, m);
  }

  bool with_replacement() const {
    if (sampling == Sampling::automatic) return sample_fraction >= 1.0;
    return sampling == Sampling::with_replacement;
  }

  void validate(std::size_t d) const {
    if (n_trees == 0) throw ConfigError("forest needs n_trees >= 1");
    if (min_node_size == 0) throw ConfigError("min_node_size must be positive");
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
      throw ConfigError("sample_fraction must lie in (0, 1]");
    }
    if (resolved_mtry(d) > d) {
      throw ConfigError("mtry = " + std::to_string(resolved_mtry(d)) + " exceeds d = " +
                        std::to_string(d));
    }
  }
};

// Axis-aligned binary tree stored as a flat node array; node 0 is the root.
struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

class RegressionTree {
 public:
  RegressionTree() = default;
  explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  int leaf_index(std::span<const double> z) const {
    int k = 0;
    while (nodes_[k].feature >= 0) {
      const TreeNode& n = nodes_[k];
      k = z[n.feature] <= n.threshold ? n.left : n.right;
    }
    return k;
  }

  double predict(std::span<const double> z) const { return nodes_[leaf_index(z)].value; }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return n.feature < 0; }));
  }

 private:
  std::vector<TreeNode> nodes_;
};

class RegressionForest {
 public:
  RegressionForest() = default;

  double predict(std::span<const double> z) const {
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(z);
    return clamp(s / static_cast<double>(trees_.size()));
  }

  std::vector<double> predict(const Matrix& z) const {
    std::vector<double> out(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) out[i] = predict(z.row(i));
    return out;
  }

  const std::vector<RegressionTree>& trees() const { return trees_; }
  std::size_t dim() const { return dim_; }

  // Mean squared out-of-bag error; NaN when no row was ever out of bag.
  double oob_error() const { return oob_error_; }
  // Per-training-row OOB prediction; NaN where the row was in every bag.
  const std::vector<double>& oob_predictions() const { return oob_predictions_; }

 private:
  double clamp(double v) const {
    if (clamp_) v = std::clamp(v, clamp_->first, clamp_->second);
    return v;
  }

  std::vector<RegressionTree> trees_;
  std::size_t dim_ = 0;
  double oob_error_ = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> oob_predictions_;
  std::optional<std::pair<double, double>> clamp_;

  friend RegressionForest fit_regression(const Matrix&, std::span<const double>,
                                         std::span<const double>, const ForestParams&);
  friend RegressionForest fit_probability(const Matrix&, const std::vector<bool>&,
                                          const ForestParams&);
};

namespace detail {

struct SortEntry {
  double value;
  double w;
  double wy;
};

// Grows one CART tree on rows[0..n_split) and sets leaf values from
// rows[value_begin..rows.size()).
inline RegressionTree grow_cart_tree(const Matrix& z, std::span<const double> y,
                                     std::span<const double> w, std::vector<std::size_t> rows,
                                     std::size_t n_split, std::size_t value_begin,
                                     const ForestParams& params, Engine& eng) {
  const std::size_t d = z.cols();
  const std::size_t mtry = params.resolved_mtry(d);
  const std::size_t min_node = params.min_node_size;
  const std::size_t max_depth =
      params.max_depth ? *params.max_depth : std::numeric_limits<std::size_t>::max();

  std::vector<TreeNode> nodes;
  nodes.reserve(2 * n_split / std::max<std::size_t>(1, min_node) + 1);
  struct Work {
    int node;
    std::size_t begin, end, depth;
  };
  std::vector<Work> stack;
  nodes.push_back({});
  stack.push_back({0, 0, n_split, 0});
  std::vector<SortEntry> buf;
  std::vector<std::size_t> features(d);

  while (!stack.empty()) {
    Work wk = stack.back();
    stack.pop_back();
    std::size_t count = wk.end - wk.begin;
    double sw = 0.0, swy = 0.0, swyy = 0.0;
    for (std::size_t k = wk.begin; k < wk.end; ++k) {
      std::size_t i = rows[k];
      sw += w[i];
      swy += w[i] * y[i];
      swyy += w[i] * y[i] * y[i];
    }
    nodes[wk.node].value = sw > 0 ? swy / sw : 0.0;
    if (wk.depth >= max_depth || count < 2 * min_node || sw <= 0) continue;

    for (std::size_t j = 0; j < d; ++j) features[j] = j;
    for (std::size_t j = 0; j < mtry; ++j) {
      std::size_t k = j + uniform_index(eng, d - j);
      std::swap(features[j], features[k]);
    }
    std::vector<std::size_t> tried(features.begin(), features.begin() + mtry);
    std::sort(tried.begin(), tried.end());

    const double parent_score = swy * swy / sw;
    double best_gain = 1e-12 * swyy + 1e-300;
    int best_feature = -1;
    double best_threshold = 0.0;
    buf.resize(count);
    for (std::size_t f : tried) {
      for (std::size_t k = 0; k < count; ++k) {
        std::size_t i = rows[wk.begin + k];
        buf[k] = {z(i, f), w[i], w[i] * y[i]};
      }
      std::sort(buf.begin(), buf.end(),
                [](const SortEntry& a, const SortEntry& b) { return a.value < b.value; });
      double lw = 0.0, lwy = 0.0;
      for (std::size_t k = 0; k + 1 < count; ++k) {
        lw += buf[k].w;
        lwy += buf[k].wy;
        std::size_t n_left = k + 1;
        if (n_left < min_node) continue;
        if (count - n_left < min_node) break;
        if (!(buf[k].value < buf[k + 1].value)) continue;
        double rw = sw - lw, rwy = swy - lwy;
        if (lw <= 0 || rw <= 0) continue;
        double gain = lwy * lwy / lw + rwy * rwy / rw - parent_score;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (buf[k].value + buf[k + 1].value);
        }
      }
    }
    if (best_feature < 0) continue;

    auto mid = std::partition(rows.begin() + wk.begin, rows.begin() + wk.end,
                              [&](std::size_t i) { return z(i, best_feature) <= best_threshold; });
    std::size_t split = static_cast<std::size_t>(mid - rows.begin());
    int left = static_cast<int>(nodes.size());
    nodes.push_back({});
    nodes.push_back({});
    nodes[wk.node].feature = best_feature;
    nodes[wk.node].threshold = best_threshold;
    nodes[wk.node].left = left;
    nodes[wk.node].right = left + 1;
    stack.push_back({left + 1, split, wk.end, wk.depth + 1});
    stack.push_back({left, wk.begin, split, wk.depth + 1});
  }

  if (value_begin < rows.size()) {
    // Honest leaf values: every node gets the mean of its evaluation rows;
    // nodes without any inherit the parent's value.
    std::vector<double> ew(nodes.size(), 0.0), ewy(nodes.size(), 0.0);
    for (std::size_t k = value_begin; k < rows.size(); ++k) {
      std::size_t i = rows[k];
      int node = 0;
      for (;;) {
        ew[node] += w[i];
        ewy[node] += w[i] * y[i];
        const TreeNode& n = nodes[node];
        if (n.feature < 0) break;
        node = z(i, n.feature) <= n.threshold ? n.left : n.right;
      }
    }
    // Parents precede children in the node array.
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (ew[k] > 0) nodes[k].value = ewy[k] / ew[k];
      if (nodes[k].feature >= 0) {
        nodes[nodes[k].left].value = nodes[k].value;
        nodes[nodes[k].right].value = nodes[k].value;
      }
    }
  }
  return RegressionTree(std::move(nodes));
}

}  // namespace detail

inline RegressionForest fit_regression(const Matrix& zmat, std::span<const double> targets,
                                       std::span<const double> weights,
                                       const ForestParams& params) {
  const std::size_t n = zmat.rows();
  const std::size_t d = zmat.cols();
  if (targets.size() != n) throw ConfigError("targets and design matrix differ in length");
  if (!weights.empty() && weights.size() != n) {
    throw ConfigError("weights and design matrix differ in length");
  }
  if (n == 0) throw ConfigError("cannot fit a forest on zero rows");
  params.validate(d);
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = std::isfinite(targets[i]);
    for (double v : zmat.row(i)) ok = ok && std::isfinite(v);
    if (!weights.empty()) ok = ok && std::isfinite(weights[i]) && weights[i] >= 0;
    if (!ok) throw NumericError("non-finite forest input", i);
  }

  std::vector<double> unit;
  if (weights.empty()) {
    unit.assign(n, 1.0);
    weights = unit;
  }
  std::vector<std::size_t> active;
  active.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] > 0) active.push_back(i);
  }
  if (active.empty()) throw ConfigError("all forest weights are zero");

  const std::size_t m = active.size();
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(params.sample_fraction * m)));
  const bool replace = params.with_replacement();

  RegressionForest forest;
  forest.dim_ = d;
  forest.trees_.resize(params.n_trees);
  std::vector<std::vector<bool>> in_bag(params.n_trees);

  parallel_for(params.n_trees, [&](std::size_t b) {
    Engine eng = make_engine(derive_seed(params.seed, {b}));
    std::vector<std::size_t> pick = replace ? sample_with_replacement(eng, m, k)
                                            : sample_without_replacement(eng, m, k);
    std::vector<std::size_t> rows(pick.size());
    for (std::size_t t = 0; t < pick.size(); ++t) rows[t] = active[pick[t]];
    std::vector<bool> bag(n, false);
    for (std::size_t r : rows) bag[r] = true;
    std::size_t n_split = rows.size();
    std::size_t value_begin = rows.size();
    if (params.honest && rows.size() >= 2) {
      n_split = rows.size() / 2;
      value_begin = n_split;
    }
    forest.trees_[b] =
        detail::grow_cart_tree(zmat, targets, weights, std::move(rows), n_split, value_begin,
                               params, eng);
    in_bag[b] = std::move(bag);
  });

  forest.oob_predictions_.assign(n, std::numeric_limits<double>::quiet_NaN());
  double sq = 0.0, wsum = 0.0;
  for (std::size_t i : active) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t b = 0; b < params.n_trees; ++b) {
      if (!in_bag[b][i]) {
        s += forest.trees_[b].predict(zmat.row(i));
        ++c;
      }
    }
    if (c > 0) {
      double p = s / static_cast<double>(c);
      forest.oob_predictions_[i] = p;
      sq += weights[i] * (p - targets[i]) * (p - targets[i]);
      wsum += weights[i];
    }
  }
  if (wsum > 0) forest.oob_error_ = sq / wsum;
  return forest;
}

inline RegressionForest fit_regression(const Matrix& zmat, std::span<const double> targets,
                                       const ForestParams& params) {
  return fit_regression(zmat, targets, {}, params);
}

inline constexpr double kProbabilityClamp = 1e-6;

// Regression on 0/1 labels with predictions clamped to [1e-6, 1 - 1e-6].
inline RegressionForest fit_probability(const Matrix& zmat, const std::vector<bool>& labels,
                                        const ForestParams& params) {
  std::vector<double> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? 1.0 : 0.0;
  RegressionForest forest = fit_regression(zmat, y, {}, params);
  forest.clamp_ = std::make_pair(kProbabilityClamp, 1.0 - kProbabilityClamp);
  for (double& p : forest.oob_predictions_) {
    if (!std::isnan(p)) p = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  }
  return forest;
}

// Grid element with the smallest out-of-bag error; earliest wins ties and
// grid elements without an OOB estimate never win against one that has it.
inline ForestParams tune_by_oob(const Matrix& zmat, std::span<const double> targets,
                                std::span<const ForestParams> grid,
                                std::span<const double> weights = {}) {
  if (grid.empty()) throw ConfigError("tuning grid is empty");
  std::size_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double err = fit_regression(zmat, targets, weights, grid[g]).oob_error();
    if (!std::isnan(err) && err < best_err) {
      best_err = err;
      best = g;
    }
  }
  return grid[best];
}

}  // namespace rose
