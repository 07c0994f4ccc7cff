#pragma once

// ROSE decision trees and forests: trees split on the increase in the
// reciprocal of the empirical sandwich variance, leaves carry the closed-form
// minimiser (sum dpsi) / (sum psi^2), and forests aggregate as a ratio of
// summed leaf means. The J > 1 variant solves a block system per tree.

#include <Eigen/Dense>

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

// Per-observation psi_j and dpsi_j at the pilot (theta_init, eta_hat), with
// the confounders they are split on. Arrays are indexed [j][i].
class RoseInputs {
 public:
  RoseInputs(Matrix z, std::vector<std::vector<double>> psi,
             std::vector<std::vector<double>> dpsi)
      : z_(std::move(z)), psi_(std::move(psi)), dpsi_(std::move(dpsi)) {
    psi_sq_.resize(psi_.size());
    for (std::size_t j = 0; j < psi_.size(); ++j) {
      psi_sq_[j].resize(psi_[j].size());
      for (std::size_t i = 0; i < psi_[j].size(); ++i) psi_sq_[j][i] = psi_[j][i] * psi_[j][i];
    }
    check();
  }

  // J = 1 inputs given directly as squares.
  static RoseInputs from_squares(Matrix z, std::vector<double> psi_sq, std::vector<double> dpsi) {
    std::vector<double> root(psi_sq.size());
    for (std::size_t i = 0; i < psi_sq.size(); ++i) {
      if (!(psi_sq[i] >= 0)) throw ConfigError("psi^2 entries must be non-negative");
      root[i] = std::sqrt(psi_sq[i]);
    }
    RoseInputs in(std::move(z), {std::move(root)}, {std::move(dpsi)});
    in.psi_sq_[0] = std::move(psi_sq);
    return in;
  }

  std::size_t size() const { return z_.rows(); }
  std::size_t J() const { return psi_.size(); }
  std::size_t dim() const { return z_.cols(); }
  const Matrix& z() const { return z_; }
  std::span<const double> psi(std::size_t j) const { return psi_[j]; }
  std::span<const double> psi_sq(std::size_t j) const { return psi_sq_[j]; }
  std::span<const double> dpsi(std::size_t j) const { return dpsi_[j]; }

  // Scale-aware denominator guard: 1e-12 x mean psi_j^2 over `idx`.
  double den_floor(std::size_t j, std::span<const std::size_t> idx) const {
    if (idx.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i : idx) s += psi_sq_[j][i];
    return 1e-12 * s / static_cast<double>(idx.size());
  }

 private:
  void check() const {
    if (psi_.empty()) throw ConfigError("ROSE inputs need J >= 1");
    if (dpsi_.size() != psi_.size()) throw ConfigError("psi and dpsi differ in J");
    for (std::size_t j = 0; j < psi_.size(); ++j) {
      if (psi_[j].size() != z_.rows() || dpsi_[j].size() != z_.rows()) {
        throw ConfigError("ROSE inputs are not row-aligned");
      }
      for (std::size_t i = 0; i < z_.rows(); ++i) {
        if (!std::isfinite(psi_[j][i]) || !std::isfinite(dpsi_[j][i])) {
          throw NumericError("non-finite psi or dpsi in ROSE inputs", i);
        }
      }
    }
  }

  Matrix z_;
  std::vector<std::vector<double>> psi_;
  std::vector<std::vector<double>> psi_sq_;
  std::vector<std::vector<double>> dpsi_;
};

struct RoseTreeParams {
  std::size_t max_depth = 5;
  std::size_t min_node_size = 10;
  std::size_t mtry = 0;  // 0: all d features
  bool honest = false;
  double alpha_regularity = 0.01;  // minimum child fraction of its parent

  void validate(std::size_t d) const {
    if (min_node_size == 0) throw ConfigError("ROSE min_node_size must be positive");
    if (!(alpha_regularity >= 0.0 && alpha_regularity <= 0.5)) {
      throw ConfigError("alpha_regularity must lie in [0, 0.5]");
    }
    if (mtry > d) throw ConfigError("ROSE mtry exceeds the number of features");
  }
};

// (sum psi^2, sum dpsi) over an index set.
struct AggregatePair {
  double psi_sq = 0.0;
  double dpsi = 0.0;
};

// Closed-form leaf weight (sum psi^2)^{-1} (sum dpsi); nullopt marks a
// degenerate leaf whose caller substitutes the parent's weight.
inline std::optional<double> leaf_weight(double psi_sq_sum, double dpsi_sum,
                                         double den_floor = 0.0) {
  if (!(psi_sq_sum > den_floor)) return std::nullopt;
  return dpsi_sum / psi_sq_sum;
}

inline constexpr double kDisallowedSplit = -std::numeric_limits<double>::infinity();

inline double split_gain(const AggregatePair& parent, const AggregatePair& left,
                         const AggregatePair& right, double den_floor = 0.0) {
  if (!(left.psi_sq > den_floor) || !(right.psi_sq > den_floor) ||
      !(parent.psi_sq > den_floor)) {
    return kDisallowedSplit;
  }
  return left.dpsi * left.dpsi / left.psi_sq + right.dpsi * right.dpsi / right.psi_sq -
         parent.dpsi * parent.dpsi / parent.psi_sq;
}

struct RoseNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int parent = -1;
  // Aggregates over the evaluation rows reaching this node (inherited from
  // the parent when none do).
  double sum_psi_sq = 0.0;
  double sum_dpsi = 0.0;
  double count = 0.0;
  // Leaf weight: per-leaf ratio for J = 1, solved block weight for J > 1.
  double weight = 0.0;

  double tau_psi_sq() const { return count > 0 ? sum_psi_sq / count : 0.0; }
  double tau_dpsi() const { return count > 0 ? sum_dpsi / count : 0.0; }
};

class RoseTree {
 public:
  RoseTree() = default;
  explicit RoseTree(std::vector<RoseNode> nodes) : nodes_(std::move(nodes)) {}

  int leaf_index(std::span<const double> z) const {
    int k = 0;
    while (nodes_[k].feature >= 0) {
      const RoseNode& n = nodes_[k];
      k = z[n.feature] <= n.threshold ? n.left : n.right;
    }
    return k;
  }
  const RoseNode& leaf(std::span<const double> z) const { return nodes_[leaf_index(z)]; }

  const std::vector<RoseNode>& nodes() const { return nodes_; }
  std::vector<RoseNode>& nodes() { return nodes_; }

  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const RoseNode& n) { return n.feature < 0; }));
  }
  std::size_t depth() const {
    std::size_t best = 0;
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      std::size_t dpt = 0;
      for (int p = nodes_[k].parent; p >= 0; p = nodes_[p].parent) ++dpt;
      best = std::max(best, dpt);
    }
    return best;
  }

 private:
  std::vector<RoseNode> nodes_;
};

// Counts aggregate updates performed while scanning split candidates.
struct RoseTreeStats {
  std::size_t aggregate_updates = 0;
  std::size_t nodes_scanned = 0;
};

namespace detail {

struct RoseSortEntry {
  double value;
  double psi_sq;
  double dpsi;
};

inline void assign_j1_weights(std::vector<RoseNode>& nodes, double den_floor, double fallback) {
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    RoseNode& n = nodes[k];
    double inherited = n.parent >= 0 ? nodes[n.parent].weight : fallback;
    n.weight = leaf_weight(n.sum_psi_sq, n.sum_dpsi, den_floor).value_or(inherited);
  }
}

}  // namespace detail

// Grows one ROSE tree for moment j: structure from split_idx, leaf aggregates
// from eval_idx. Leaf weights are the J = 1 ratios.
inline RoseTree fit_rose_tree(const RoseInputs& in, std::size_t j,
                              std::span<const std::size_t> split_idx,
                              std::span<const std::size_t> eval_idx,
                              const RoseTreeParams& params, std::uint64_t seed,
                              std::optional<double> den_floor = std::nullopt,
                              RoseTreeStats* stats = nullptr) {
  const std::size_t d = in.dim();
  params.validate(d);
  if (split_idx.empty() || eval_idx.empty()) {
    throw ConfigError("ROSE tree needs nonempty split and evaluation sets");
  }
  if (j >= in.J()) throw ConfigError("moment index out of range");
  const double floor = den_floor ? *den_floor : in.den_floor(j, split_idx);
  const std::size_t mtry = params.mtry == 0 ? d : params.mtry;
  const Matrix& z = in.z();
  auto psq = in.psi_sq(j);
  auto dps = in.dpsi(j);
  Engine eng = make_engine(seed);

  std::vector<std::size_t> rows(split_idx.begin(), split_idx.end());
  std::vector<RoseNode> nodes;
  nodes.push_back({});
  struct Work {
    int node;
    std::size_t begin, end, depth;
  };
  std::vector<Work> stack{{0, 0, rows.size(), 0}};
  std::vector<detail::RoseSortEntry> buf;
  std::vector<std::size_t> features(d);

  while (!stack.empty()) {
    Work wk = stack.back();
    stack.pop_back();
    const std::size_t count = wk.end - wk.begin;
    if (wk.depth >= params.max_depth) continue;
    const std::size_t min_child = std::max<std::size_t>(
        params.min_node_size,
        static_cast<std::size_t>(std::ceil(params.alpha_regularity * static_cast<double>(count))));
    if (count < 2 * min_child) continue;

    AggregatePair parent;
    for (std::size_t k = wk.begin; k < wk.end; ++k) {
      parent.psi_sq += psq[rows[k]];
      parent.dpsi += dps[rows[k]];
    }
    if (!(parent.psi_sq > floor)) continue;
    const double parent_score = parent.dpsi * parent.dpsi / parent.psi_sq;

    for (std::size_t f = 0; f < d; ++f) features[f] = f;
    for (std::size_t f = 0; f < mtry; ++f) {
      std::size_t k = f + uniform_index(eng, d - f);
      std::swap(features[f], features[k]);
    }
    std::vector<std::size_t> tried(features.begin(), features.begin() + mtry);
    std::sort(tried.begin(), tried.end());

    double best_gain = 1e-10 * parent_score;
    bool found = false;
    int best_feature = -1;
    double best_threshold = 0.0;
    buf.resize(count);
    if (stats) ++stats->nodes_scanned;
    for (std::size_t f : tried) {
      for (std::size_t k = 0; k < count; ++k) {
        std::size_t i = rows[wk.begin + k];
        buf[k] = {z(i, f), psq[i], dps[i]};
      }
      std::sort(buf.begin(), buf.end(), [](const detail::RoseSortEntry& a,
                                           const detail::RoseSortEntry& b) {
        return a.value < b.value;
      });
      AggregatePair left;
      for (std::size_t k = 0; k + 1 < count; ++k) {
        left.psi_sq += buf[k].psi_sq;
        left.dpsi += buf[k].dpsi;
        if (stats) ++stats->aggregate_updates;
        std::size_t n_left = k + 1;
        if (n_left < min_child) continue;
        if (count - n_left < min_child) break;
        if (!(buf[k].value < buf[k + 1].value)) continue;
        AggregatePair right{parent.psi_sq - left.psi_sq, parent.dpsi - left.dpsi};
        double gain = split_gain(parent, left, right, floor);
        if (gain > best_gain) {
          best_gain = gain;
          found = true;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (buf[k].value + buf[k + 1].value);
        }
      }
    }
    if (!found || !(best_gain > 0.0)) continue;

    auto mid = std::partition(rows.begin() + wk.begin, rows.begin() + wk.end,
                              [&](std::size_t i) { return z(i, best_feature) <= best_threshold; });
    std::size_t split = static_cast<std::size_t>(mid - rows.begin());
    int left_id = static_cast<int>(nodes.size());
    RoseNode child;
    child.parent = wk.node;
    nodes.push_back(child);
    nodes.push_back(child);
    nodes[wk.node].feature = best_feature;
    nodes[wk.node].threshold = best_threshold;
    nodes[wk.node].left = left_id;
    nodes[wk.node].right = left_id + 1;
    stack.push_back({left_id + 1, split, wk.end, wk.depth + 1});
    stack.push_back({left_id, wk.begin, split, wk.depth + 1});
  }

  // Evaluation aggregates along each row's root-to-leaf path.
  for (std::size_t i : eval_idx) {
    int node = 0;
    for (;;) {
      RoseNode& n = nodes[node];
      n.sum_psi_sq += psq[i];
      n.sum_dpsi += dps[i];
      n.count += 1.0;
      if (n.feature < 0) break;
      node = z(i, n.feature) <= n.threshold ? n.left : n.right;
    }
  }
  for (auto& n : nodes) {
    if (n.count == 0.0 && n.parent >= 0) {
      // Parents precede children, so the parent is already resolved.
      const RoseNode& p = nodes[n.parent];
      n.sum_psi_sq = p.sum_psi_sq;
      n.sum_dpsi = p.sum_dpsi;
      n.count = p.count;
    }
  }
  double eval_floor = den_floor ? *den_floor : in.den_floor(j, eval_idx);
  detail::assign_j1_weights(nodes, eval_floor, 0.0);
  return RoseTree(std::move(nodes));
}

enum class RoseEvalMode { ratio_of_sums, mean_of_solutions };

// Evaluable forest weight function z -> (w_1, ..., w_J).
class RoseForestWeights {
 public:
  std::size_t J() const { return J_; }
  std::size_t n_trees() const { return trees_.size(); }
  RoseEvalMode mode() const { return mode_; }
  std::optional<double> clip_bound() const { return clip_; }

  // trees()[b][j] is tree T_jb.
  const std::vector<std::vector<RoseTree>>& trees() const { return trees_; }
  const std::vector<bool>& skipped() const { return skipped_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  double fallback_weight(std::size_t j = 0) const { return fallback_[j]; }

  RoseForestWeights with_mode(RoseEvalMode mode) const {
    if (mode == RoseEvalMode::ratio_of_sums && J_ != 1) {
      throw ConfigError("ratio-of-sums evaluation is only defined for J = 1");
    }
    RoseForestWeights out = *this;
    out.mode_ = mode;
    return out;
  }

  double evaluate(std::span<const double> z, std::size_t j) const {
    double w = raw(z, j);
    if (clip_) w = std::clamp(w, -*clip_, *clip_);
    return w;
  }

  std::vector<double> evaluate(std::span<const double> z) const {
    std::vector<double> out(J_);
    for (std::size_t j = 0; j < J_; ++j) out[j] = evaluate(z, j);
    return out;
  }

  std::vector<double> evaluate_rows(const Matrix& z, std::size_t j = 0) const {
    std::vector<double> out(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) out[i] = evaluate(z.row(i), j);
    return out;
  }

 private:
  double raw(std::span<const double> z, std::size_t j) const {
    if (mode_ == RoseEvalMode::ratio_of_sums) {
      double t1 = 0.0, t2 = 0.0;
      for (const auto& per_b : trees_) {
        const RoseNode& leaf = per_b[0].leaf(z);
        t1 += leaf.tau_psi_sq();
        t2 += leaf.tau_dpsi();
      }
      if (!(t1 > tau_floor_ * static_cast<double>(trees_.size()))) return fallback_[0];
      return t2 / t1;
    }
    double s = 0.0;
    std::size_t used = 0;
    for (std::size_t b = 0; b < trees_.size(); ++b) {
      if (skipped_[b]) continue;
      s += trees_[b][j].leaf(z).weight;
      ++used;
    }
    return used > 0 ? s / static_cast<double>(used) : fallback_[j];
  }

  std::size_t J_ = 1;
  RoseEvalMode mode_ = RoseEvalMode::ratio_of_sums;
  std::optional<double> clip_;
  std::vector<std::vector<RoseTree>> trees_;
  std::vector<bool> skipped_;
  std::vector<double> fallback_;
  double tau_floor_ = 0.0;
  std::vector<std::string> warnings_;

  friend RoseForestWeights fit_rose_forest(const RoseInputs&, const RoseTreeParams&, std::size_t,
                                           double, std::uint64_t,
                                           std::span<const std::size_t>);
  friend RoseForestWeights fit_rose_forest_multi(const RoseInputs&, const RoseTreeParams&,
                                                 std::size_t, double, std::uint64_t,
                                                 std::span<const std::size_t>, bool);
  friend RoseForestWeights clip_weights(const RoseForestWeights&, std::optional<double>);
};

namespace detail {

struct TreeSample {
  std::vector<std::size_t> split;
  std::vector<std::size_t> eval;
};

// Per-tree subsample of `pool` of size ~ c_split |pool|; without replacement
// when c_split < 1, bootstrap otherwise. Honest/disjoint mode halves it.
inline TreeSample draw_tree_sample(std::span<const std::size_t> pool, double c_split,
                                   bool disjoint, Engine& eng) {
  const std::size_t n = pool.size();
  std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(c_split * static_cast<double>(n))));
  std::vector<std::size_t> pick = c_split < 1.0 ? sample_without_replacement(eng, n, k)
                                                : sample_with_replacement(eng, n, k);
  TreeSample s;
  s.split.reserve(pick.size());
  for (std::size_t p : pick) s.split.push_back(pool[p]);
  if (disjoint && s.split.size() >= 2) {
    std::size_t half = s.split.size() / 2;
    s.eval.assign(s.split.begin() + static_cast<std::ptrdiff_t>(half), s.split.end());
    s.split.resize(half);
  } else {
    s.eval = s.split;
  }
  return s;
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline std::uint64_t tree_seed(std::uint64_t seed, std::size_t b, std::size_t j) {
  return derive_seed(seed, {b, j, 0x7265ULL});
}

}  // namespace detail

// ROSE random forest for J = 1 (moment 0 of `in`).
inline RoseForestWeights fit_rose_forest(const RoseInputs& in, const RoseTreeParams& params,
                                         std::size_t n_trees, double c_split, std::uint64_t seed,
                                         std::span<const std::size_t> index_set = {}) {
  if (n_trees == 0) throw ConfigError("ROSE forest needs B >= 1 trees");
  if (!(c_split > 0.0)) throw ConfigError("c_split must be positive");
  std::vector<std::size_t> pool_storage;
  if (index_set.empty()) {
    pool_storage = detail::all_rows(in.size());
    index_set = pool_storage;
  }
  const double floor = in.den_floor(0, index_set);

  RoseForestWeights out;
  out.J_ = 1;
  out.mode_ = RoseEvalMode::ratio_of_sums;
  out.trees_.assign(n_trees, std::vector<RoseTree>(1));
  out.skipped_.assign(n_trees, false);
  out.tau_floor_ = index_set.empty() ? 0.0 : floor;

  AggregatePair total;
  for (std::size_t i : index_set) {
    total.psi_sq += in.psi_sq(0)[i];
    total.dpsi += in.dpsi(0)[i];
  }
  out.fallback_ = {leaf_weight(total.psi_sq, total.dpsi, 0.0).value_or(0.0)};

  parallel_for(n_trees, [&](std::size_t b) {
    Engine eng = make_engine(derive_seed(seed, {b}));
    auto sample = detail::draw_tree_sample(index_set, c_split, params.honest, eng);
    out.trees_[b][0] = fit_rose_tree(in, 0, sample.split, sample.eval, params,
                                     detail::tree_seed(seed, b, 0), floor);
  });
  return out;
}

// ROSE random forest plus (J >= 1): per tree b, one ROSE tree per moment on a
// shared subsample, then the joint leaf weights solve F_b w_b = a_b.
// Final weights average the per-tree solutions.
inline RoseForestWeights fit_rose_forest_multi(const RoseInputs& in, const RoseTreeParams& params,
                                               std::size_t n_trees, double c_split,
                                               std::uint64_t seed,
                                               std::span<const std::size_t> index_set = {},
                                               bool disjoint_split_eval = false) {
  if (n_trees == 0) throw ConfigError("ROSE forest needs B >= 1 trees");
  if (!(c_split > 0.0)) throw ConfigError("c_split must be positive");
  std::vector<std::size_t> pool_storage;
  if (index_set.empty()) {
    pool_storage = detail::all_rows(in.size());
    index_set = pool_storage;
  }
  const std::size_t J = in.J();
  std::vector<double> floors(J);
  for (std::size_t j = 0; j < J; ++j) floors[j] = in.den_floor(j, index_set);

  RoseForestWeights out;
  out.J_ = J;
  out.mode_ = RoseEvalMode::mean_of_solutions;
  out.trees_.assign(n_trees, std::vector<RoseTree>(J));
  out.skipped_.assign(n_trees, false);
  out.fallback_.assign(J, 0.0);
  {
    AggregatePair total;
    for (std::size_t i : index_set) {
      total.psi_sq += in.psi_sq(0)[i];
      total.dpsi += in.dpsi(0)[i];
    }
    out.fallback_[0] = leaf_weight(total.psi_sq, total.dpsi, 0.0).value_or(0.0);
  }
  std::vector<std::string> tree_warnings(n_trees);
  const bool disjoint = disjoint_split_eval || params.honest;

  parallel_for(n_trees, [&](std::size_t b) {
    Engine eng = make_engine(derive_seed(seed, {b}));
    auto sample = detail::draw_tree_sample(index_set, c_split, disjoint, eng);
    auto& trees = out.trees_[b];
    // Leaf numbering: offset[j] + position of the leaf within tree j.
    std::vector<std::vector<int>> leaf_pos(J);
    std::vector<std::size_t> offset(J + 1, 0);
    for (std::size_t j = 0; j < J; ++j) {
      trees[j] = fit_rose_tree(in, j, sample.split, sample.eval, params,
                               detail::tree_seed(seed, b, j), floors[j]);
      const auto& nodes = trees[j].nodes();
      leaf_pos[j].assign(nodes.size(), -1);
      int c = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k].feature < 0) leaf_pos[j][k] = c++;
      }
      offset[j + 1] = offset[j] + static_cast<std::size_t>(c);
    }
    const std::size_t dim = offset[J];
    Eigen::MatrixXd F = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd a = Eigen::VectorXd::Zero(dim);
    std::vector<std::size_t> pos(J);
    for (std::size_t i : sample.eval) {
      auto zi = in.z().row(i);
      for (std::size_t j = 0; j < J; ++j) {
        pos[j] = offset[j] + static_cast<std::size_t>(leaf_pos[j][trees[j].leaf_index(zi)]);
      }
      for (std::size_t j = 0; j < J; ++j) {
        a(pos[j]) += in.dpsi(j)[i];
        for (std::size_t jj = 0; jj < J; ++jj) F(pos[j], pos[jj]) += in.psi(j)[i] * in.psi(jj)[i];
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(F);
    auto singular = [&](const Eigen::LDLT<Eigen::MatrixXd>& s) {
      if (s.info() != Eigen::Success) return true;
      Eigen::VectorXd D = s.vectorD().cwiseAbs();
      return !(D.minCoeff() > 1e-13 * D.maxCoeff());
    };
    if (singular(ldlt)) {
      double lambda = 1e-8 * F.trace() / static_cast<double>(dim);
      tree_warnings[b] = "tree " + std::to_string(b) + ": singular block system, ridge " +
                         std::to_string(lambda) + " added";
      if (lambda > 0) ldlt.compute(F + lambda * Eigen::MatrixXd::Identity(dim, dim));
      if (!(lambda > 0) || singular(ldlt)) {
        out.skipped_[b] = true;
        tree_warnings[b] = "tree " + std::to_string(b) + ": singular block system, tree skipped";
        return;
      }
    }
    Eigen::VectorXd w = ldlt.solve(a);
    for (std::size_t j = 0; j < J; ++j) {
      auto& nodes = trees[j].nodes();
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k].feature < 0) {
          nodes[k].weight = w(static_cast<Eigen::Index>(offset[j] + leaf_pos[j][k]));
        }
      }
    }
  });
  for (auto& w : tree_warnings) {
    if (!w.empty()) out.warnings_.push_back(std::move(w));
  }
  return out;
}

inline RoseForestWeights clip_weights(const RoseForestWeights& w, std::optional<double> bound) {
  if (bound && !(*bound > 0.0)) throw ConfigError("weight clip bound must be positive");
  RoseForestWeights out = w;
  out.clip_ = bound;
  return out;
}

// Empirical sandwich loss (sum_i (sum_j w_ij psi_ij)^2) / (sum_ij w_ij dpsi_ij)^2
// with arrays indexed [j][i].
inline double empirical_sandwich_loss(const std::vector<std::vector<double>>& w,
                                      const std::vector<std::vector<double>>& psi,
                                      const std::vector<std::vector<double>>& dpsi) {
  const std::size_t J = psi.size();
  const std::size_t n = J ? psi[0].size() : 0;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      s += w[j][i] * psi[j][i];
      den += w[j][i] * dpsi[j][i];
    }
    num += s * s;
  }
  return num / (den * den);
}

inline double empirical_sandwich_loss(std::span<const double> w, std::span<const double> psi,
                                      std::span<const double> dpsi) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < psi.size(); ++i) {
    num += w[i] * w[i] * psi[i] * psi[i];
    den += w[i] * dpsi[i];
  }
  return num / (den * den);
}

}  // namespace rose
