#include "rose/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace rose {
namespace {

const std::vector<double> kNoZ{0.0};

Observation obs(double y, double x) { return {y, x, kNoZ}; }

NuisanceValues nuis(double f, std::vector<double> m, double xc = 0.0) {
  NuisanceValues n;
  n.f = f;
  n.m = std::move(m);
  n.x_center = xc;
  return n;
}

TEST(Link, InverseExamples) {
  EXPECT_DOUBLE_EQ(link_inverse(Link(LinkKind::identity), 0.5), 0.5);
  EXPECT_DOUBLE_EQ(link_inverse(Link(LinkKind::log), 0.0), 1.0);
  EXPECT_DOUBLE_EQ(link_inverse(Link(LinkKind::sqrt), 2.0), 4.0);
}

TEST(Link, SqrtDomainGuard) {
  Link g(LinkKind::sqrt);
  EXPECT_THROW(g.inverse(0.0), DomainError);
  EXPECT_THROW(g.inverse(-1.0), DomainError);
  EXPECT_THROW(g.inverse(1e-10), DomainError);
  EXPECT_NO_THROW(g.inverse(2e-10));
  try {
    g.inverse(-1.0);
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("sqrt"), std::string::npos);
  }
}

TEST(Link, RoundTripAndMonotone) {
  std::mt19937_64 eng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (auto kind : {LinkKind::identity, LinkKind::log, LinkKind::sqrt}) {
    Link g(kind);
    for (int t = 0; t < 1000; ++t) {
      double eta = u(eng);
      if (kind == LinkKind::sqrt) eta = std::abs(eta) + 1e-3;
      EXPECT_NEAR(g(g.inverse(eta)), eta, 1e-12 * std::max(1.0, std::abs(eta)));
      double eta2 = eta + 0.1;
      EXPECT_LT(g.inverse(eta), g.inverse(eta2));
    }
  }
}

TEST(Link, FromName) {
  EXPECT_EQ(Link::from_name("log").kind(), LinkKind::log);
  EXPECT_THROW(Link::from_name("logit"), ConfigError);
}

TEST(Epsilon, Examples) {
  EXPECT_DOUBLE_EQ(epsilon(obs(2, 1), 1.0, 0.5, Link(LinkKind::identity)), 0.5);
  // mu = 1, (y - mu)/mu = 1
  EXPECT_DOUBLE_EQ(epsilon(obs(2, 0), 1.0, 0.0, Link(LinkKind::log)), 1.0);
  // mu = (1 + 1)^2 = 4, (8 - 4)/(2*2) = 1
  EXPECT_DOUBLE_EQ(epsilon(obs(8, 1), 1.0, 1.0, Link(LinkKind::sqrt)), 1.0);
}

TEST(Epsilon, NonFiniteCarriesIndex) {
  try {
    epsilon(obs(1e308, 800), 1.0, 0.0, Link(LinkKind::log), 0.0, 17);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_TRUE(e.has_index());
    EXPECT_EQ(e.index(), 17u);
  }
}

TEST(Epsilon, IdentityReducesExactly) {
  std::mt19937_64 eng(5);
  std::normal_distribution<double> n(0, 3);
  for (int t = 0; t < 500; ++t) {
    double y = n(eng), x = n(eng), th = n(eng), f = n(eng);
    EXPECT_EQ(epsilon(obs(y, x), th, f, Link()), y - (th * x + f));
  }
}

TEST(Psi, Examples) {
  ModelSpec spec;
  auto p = psi(obs(3, 2), 1.0, nuis(0, {1}), spec);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_DOUBLE_EQ(p[0], 1.0);

  ModelSpec spec2;
  spec2.moments = {Moment::identity(), Moment::zero_indicator()};
  auto p2 = psi(obs(1, 0), 1.0, nuis(0, {0.0, 0.5}), spec2);
  EXPECT_DOUBLE_EQ(p2[1], 0.5);
}

TEST(Psi, CenteredMomentVanishes) {
  ModelSpec spec;
  spec.moments = {Moment::identity(), Moment::zero_indicator()};
  for (auto kind : {LinkKind::identity, LinkKind::log, LinkKind::sqrt}) {
    spec.link = Link(kind);
    double x = 0.7;
    auto p = psi(obs(2.0, x), 0.3, nuis(1.0, {x, 0.0}), spec);
    EXPECT_EQ(p[0], 0.0);
    EXPECT_EQ(p[1], 0.0);
    auto d = dpsi_dtheta(obs(2.0, x), 0.3, nuis(1.0, {x, 0.0}), spec);
    EXPECT_EQ(d[0], 0.0);
    EXPECT_EQ(d[1], 0.0);
  }
}

TEST(Psi, MomentCountMismatch) {
  ModelSpec spec;
  EXPECT_THROW(psi(obs(1, 1), 0.0, nuis(0, {0, 0}), spec), ConfigError);
}

TEST(DpsiDtheta, Examples) {
  ModelSpec spec;
  EXPECT_DOUBLE_EQ(dpsi_dtheta(obs(0, 2), 1.0, nuis(0, {0}), spec)[0], -4.0);
  spec.link = Link(LinkKind::log);
  EXPECT_DOUBLE_EQ(dpsi_dtheta(obs(0, 3), 1.0, nuis(0, {1}), spec)[0], -6.0);
}

struct Point {
  double y, x, theta, f, xc;
  std::vector<double> m;
};

Point random_point(std::mt19937_64& eng, LinkKind kind) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Point p{};
  p.x = 2.0 * u(eng);
  p.xc = 0.5 * u(eng);
  p.theta = u(eng);
  p.m = {u(eng), 0.5 + 0.4 * u(eng)};
  if (kind == LinkKind::sqrt) {
    // keep the linear predictor well inside the domain
    p.f = 3.0 + std::abs(p.theta * (p.x - p.xc)) + u(eng);
    p.y = 10.0 + 3.0 * u(eng);
  } else {
    p.f = u(eng);
    p.y = kind == LinkKind::log ? 1.5 + u(eng) : 2.0 * u(eng);
  }
  if (u(eng) > 0.6) p.x = 0.0;
  return p;
}

// Property: the literal gradient agrees with a central finite difference,
// and the score-ratio form does not depend on theta.
TEST(DpsiDthetaProperty, FiniteDifferenceAndThetaFree) {
  std::mt19937_64 eng(11);
  ModelSpec spec;
  spec.moments = {Moment::identity(), Moment::zero_indicator()};
  for (auto kind : {LinkKind::identity, LinkKind::log, LinkKind::sqrt}) {
    spec.link = Link(kind);
    for (int t = 0; t < 300; ++t) {
      Point p = random_point(eng, kind);
      NuisanceValues nv = nuis(p.f, p.m, p.xc);
      Observation o = obs(p.y, p.x);
      const double h = 1e-6;
      auto up = psi(o, p.theta + h, nv, spec);
      auto dn = psi(o, p.theta - h, nv, spec);
      auto lit = dpsi_dtheta(o, p.theta, nv, spec, DerivativeForm::literal);
      for (std::size_t j = 0; j < spec.J(); ++j) {
        double fd = (up[j] - dn[j]) / (2 * h);
        double scale = std::max(std::abs(lit[j]), 1e-3);
        EXPECT_NEAR(fd, lit[j], 1e-5 * scale) << "link " << spec.link.name();
      }
      auto a = dpsi_dtheta(o, p.theta, nv, spec);
      auto b = dpsi_dtheta(o, p.theta + 0.37, nv, spec);
      for (std::size_t j = 0; j < spec.J(); ++j) EXPECT_EQ(a[j], b[j]);
    }
  }
}

// Property: psi_j is linear in the centred moment M_j(x) - m_j.
TEST(PsiProperty, LinearInCentredMoment) {
  std::mt19937_64 eng(13);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  ModelSpec spec;
  for (auto kind : {LinkKind::identity, LinkKind::log, LinkKind::sqrt}) {
    spec.link = Link(kind);
    for (int t = 0; t < 200; ++t) {
      Point p = random_point(eng, kind);
      double c = u(eng);
      // shift m so that x - m' = c (x - m)
      double m_scaled = p.x - c * (p.x - p.m[0]);
      auto base = psi(obs(p.y, p.x), p.theta, nuis(p.f, {p.m[0]}, p.xc), spec);
      auto scaled = psi(obs(p.y, p.x), p.theta, nuis(p.f, {m_scaled}, p.xc), spec);
      EXPECT_NEAR(scaled[0], c * base[0], 1e-12 * std::max(1.0, std::abs(base[0])));
    }
  }
}

}  // namespace
}  // namespace rose
