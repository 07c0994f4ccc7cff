#include "rose/estimator.hpp"
#include "rose/schemes.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace rose {
namespace {

double expit(double v) { return 1.0 / (1.0 + std::exp(-v)); }

ForestParams small_forest() {
  ForestParams p;
  p.n_trees = 60;
  p.min_node_size = 20;
  p.sample_fraction = 0.5;
  return p;
}

// Y = theta X + sin(Z0) + sd(Z) N, X = Z0 + N.
Dataset plm(std::mt19937_64& eng, std::size_t n, double theta, bool hetero, std::size_t d = 2) {
  std::normal_distribution<double> nd;
  Dataset data;
  data.z = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) data.z(i, k) = nd(eng);
    double x = data.z(i, 0) + nd(eng);
    double sd = hetero ? 0.3 + 2.0 * expit(2 * data.z(i, 1)) : 1.0;
    data.x.push_back(x);
    data.y.push_back(theta * x + std::sin(data.z(i, 0)) + sd * nd(eng));
  }
  return data;
}

TEST(FitNuisances, ZeroOracleEvaluatesToZero) {
  auto n = FittedNuisances::zero(2);
  std::vector<double> z{1.0, 2.0};
  auto v = n.at({3.0, 1.0, z});
  EXPECT_EQ(v.f, 0.0);
  EXPECT_EQ(v.x_center, 0.0);
  EXPECT_EQ(v.m[0], 0.0);
  EXPECT_EQ(v.m[1], 0.0);
}

TEST(FitNuisances, IdentityLinkRecoversSlope) {
  std::mt19937_64 eng(1);
  std::normal_distribution<double> nd;
  Dataset data;
  data.z = Matrix(2000, 2);
  for (std::size_t i = 0; i < 2000; ++i) {
    data.z(i, 0) = nd(eng);
    data.z(i, 1) = nd(eng);
    double x = nd(eng);
    data.x.push_back(x);
    data.y.push_back(x);
  }
  FitConfig cfg;
  cfg.k_folds = 2;
  cfg.scheme = scheme::Unweighted{};
  cfg.nuisance.forest = small_forest();
  auto rep = fit(data, ModelSpec{}, cfg);
  EXPECT_LT(std::abs(rep.theta_hat - 1.0), 0.05);
}

TEST(FitNuisances, ZeroIndicatorProbability) {
  std::mt19937_64 eng(2);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u;
  const std::size_t n = 10000;
  Dataset data;
  data.z = Matrix(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 3; ++k) data.z(i, k) = nd(eng);
    bool zero = u(eng) < 0.1 + 0.8 * expit(data.z(i, 0));
    data.x.push_back(zero ? 0.0 : 1.0 + u(eng));
    data.y.push_back(1.0);
  }
  ModelSpec spec;
  spec.moments = {Moment::identity(), Moment::zero_indicator()};
  NuisanceConfig cfg;
  cfg.forest = small_forest();
  cfg.tune = true;  // OOB selection over the default grid
  auto nuis = fit_nuisances(data, spec, cfg, 3);
  double sq = 0.0;
  std::mt19937_64 eng2(4);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> z{nd(eng2), nd(eng2), nd(eng2)};
    double err = nuis.m[1](z) - (0.1 + 0.8 * expit(z[0]));
    sq += err * err;
  }
  EXPECT_LT(std::sqrt(sq / 2000), 0.05);
}

TEST(FitNuisances, ErrorsNameTheNuisance) {
  Dataset data;
  data.z = Matrix(4, 1);
  data.x = {1, 2, 3, 4};
  data.y = {1, 2, 3, 4};
  NuisanceConfig cfg;
  cfg.forest.mtry = 5;
  try {
    fit_nuisances(data, ModelSpec{}, cfg, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nuisance x_z"), std::string::npos);
  }
}

// Context over a dataset with the zero oracle.
struct Ctx {
  Dataset data;
  ModelSpec spec;
  FittedNuisances nuis = FittedNuisances::zero(1);
  std::vector<NuisanceValues> values;
  NuisanceConfig forests;

  SchemeContext make(double pilot) {
    values = nuis.at_rows(data);
    return SchemeContext{data, spec, values, nuis, pilot, 5, forests, DerivativeForm::score_ratio};
  }
};

TEST(LocallyEfficient, ConstantRatioGivesReciprocal) {
  std::mt19937_64 eng(5);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);
  Ctx c;
  c.data.z = Matrix(200, 2);
  for (std::size_t i = 0; i < 200; ++i) {
    c.data.z(i, 0) = nd(eng);
    c.data.z(i, 1) = nd(eng);
    double x = nd(eng);
    c.data.x.push_back(x);
    c.data.y.push_back(0.5 * x + (coin(eng) ? 2.0 : -2.0));  // eps^2 = 4
  }
  c.forests.forest = small_forest();
  auto w = locally_efficient_weights(c.make(0.5));
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(w(c.data.z.row(i)), -0.25, 1e-12);
}

TEST(LocallyEfficient, HomoscedasticWeightsNearlyConstant) {
  std::mt19937_64 eng(6);
  Ctx c;
  c.data = plm(eng, 5000, 1.0, false);
  // Exact nuisances for this DGP in the centred form: E[Y|Z] and E[X|Z].
  c.nuis.f = [](std::span<const double> z) { return z[0] + std::sin(z[0]); };
  c.nuis.x_center = [](std::span<const double> z) { return z[0]; };
  c.nuis.m = {c.nuis.x_center};
  c.forests.forest = small_forest();
  c.forests.forest.min_node_size = 100;
  auto w = locally_efficient_weights(c.make(1.0));
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < 5000; ++i) {
    double v = w(c.data.z.row(i));
    s += v;
    s2 += v * v;
  }
  double mean = s / 5000, sd = std::sqrt(s2 / 5000 - mean * mean);
  EXPECT_LT(sd / std::abs(mean), 0.2);
}

TEST(Efficient, NuisancesArePositiveAndFinite) {
  std::mt19937_64 eng(7);
  Ctx c;
  c.data = plm(eng, 600, 1.0, true);
  c.forests.forest = small_forest();
  auto eff = efficient_nuisances(c.make(1.0));
  for (std::size_t i = 0; i < 600; ++i) {
    auto o = c.data[i];
    EXPECT_GE(eff.v(o.x, o.z), kVarianceFloor);
    EXPECT_TRUE(std::isfinite(eff.h(o.z)));
  }
}

TEST(Schemes, NamesAndValidation) {
  EXPECT_EQ(scheme_name(scheme::Unweighted{}), "unweighted");
  scheme::Rose r2;
  r2.J = 2;
  EXPECT_EQ(scheme_name(r2), "rose_j2");
  EXPECT_THROW(check_scheme(r2, ModelSpec{}), ConfigError);
  EXPECT_THROW(check_scheme(scheme::Oracle{}, ModelSpec{}), ConfigError);
}

// Property: oracle weight 1 and the unweighted scheme give bit-identical
// estimates; an oracle weight c reproduces it up to root tolerance.
TEST(SchemesProperty, OracleConstantMatchesUnweighted) {
  std::mt19937_64 eng(8);
  for (int rep = 0; rep < 5; ++rep) {
    Dataset data = plm(eng, 300, 0.7, true);
    FitConfig cfg;
    cfg.k_folds = 3;
    cfg.fold_seed = rep;
    cfg.nuisance.forest = small_forest();
    scheme::Oracle one{[](std::span<const double>) { return 1.0; }, std::nullopt};
    scheme::Oracle three{[](std::span<const double>) { return 3.0; }, std::nullopt};
    auto reps = fit_schemes(data, ModelSpec{}, cfg, {scheme::Unweighted{}, one, three});
    EXPECT_EQ(reps[0].theta_hat, reps[1].theta_hat);
    EXPECT_EQ(reps[0].v_hat, reps[1].v_hat);
    EXPECT_NEAR(reps[2].theta_hat, reps[0].theta_hat, 1e-9);
    EXPECT_NEAR(reps[2].v_hat, reps[0].v_hat, 1e-9 * reps[0].v_hat);
  }
}

TEST(SchemesProperty, EveryKindYieldsAnEstimate) {
  std::mt19937_64 eng(9);
  Dataset data = plm(eng, 400, 1.0, true);
  FitConfig cfg;
  cfg.k_folds = 2;
  cfg.nuisance.forest = small_forest();
  scheme::Rose rose;
  rose.n_trees = 30;
  rose.tree.max_depth = 2;
  scheme::Rose tuned = rose;
  tuned.depth_grid = {0, 1, 2};
  std::vector<Scheme> all{scheme::Unweighted{},
                          rose,
                          tuned,
                          scheme::LocallyEfficient{},
                          scheme::Efficient{},
                          scheme::Oracle{[](std::span<const double>) { return 1.0; }, std::nullopt}};
  auto reps = fit_schemes(data, ModelSpec{}, cfg, all);
  ASSERT_EQ(reps.size(), all.size());
  for (const auto& r : reps) {
    EXPECT_TRUE(r.converged) << r.scheme;
    EXPECT_TRUE(std::isfinite(r.theta_hat)) << r.scheme;
    EXPECT_GT(r.v_hat, 0.0) << r.scheme;
    EXPECT_LT(std::abs(r.theta_hat - 1.0), 0.5) << r.scheme;
  }
  ASSERT_TRUE(reps[2].per_fold[0].rose_depth.has_value());
  EXPECT_LE(*reps[2].per_fold[0].rose_depth, 2u);
}

// Homoscedastic PLM with X independent of Z: the efficient and unweighted
// estimators agree up to Monte-Carlo noise.
TEST(Efficient, AgreesWithUnweightedUnderHomoscedasticity) {
  std::mt19937_64 eng(10);
  std::normal_distribution<double> nd;
  const int reps = 20;
  double sum = 0, sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    Dataset data;
    data.z = Matrix(1000, 2);
    for (std::size_t i = 0; i < 1000; ++i) {
      data.z(i, 0) = nd(eng);
      data.z(i, 1) = nd(eng);
      double x = 1.0 + nd(eng);
      data.x.push_back(x);
      data.y.push_back(x + std::sin(data.z(i, 0)) + nd(eng));
    }
    FitConfig cfg;
    cfg.k_folds = 2;
    cfg.fold_seed = r;
    cfg.seed = r;
    cfg.nuisance.forest = small_forest();
    cfg.nuisance.forest.min_node_size = 50;
    auto out = fit_schemes(data, ModelSpec{}, cfg, {scheme::Unweighted{}, scheme::Efficient{}});
    double diff = out[1].theta_hat - out[0].theta_hat;
    sum += diff;
    sum2 += diff * diff;
  }
  double mean = sum / reps;
  double se = std::sqrt((sum2 / reps - mean * mean) / reps);
  EXPECT_LT(std::abs(mean), 2 * se + 1e-3);
}

}  // namespace
}  // namespace rose
