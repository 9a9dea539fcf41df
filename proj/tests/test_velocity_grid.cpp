#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "kbl/velocity_grid.hpp"
#include "support.hpp"

using namespace kbl;

namespace {

GridSpec spec(int n, QuadRule rule = QuadRule::GaussHermite, double v_max = 6.0)
{
  GridSpec s;
  s.n_per_axis = n;
  s.rule = rule;
  s.v_max = v_max;
  return s;
}

std::vector<double> sample(const VelocityGrid& g, double (*f)(const Vec3&))
{
  std::vector<double> s(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) s[i] = f(g.rel(i));
  return s;
}

double mu_rel(const Vec3& c) { return maxwellian(c, {0.0, 0.0, 0.0}); }

}  // namespace

TEST_CASE("uniform 4^3 grid pairs every node with its v3 mirror")
{
  const VelocityGrid g(spec(4, QuadRule::Uniform, 2.0));
  REQUIRE(g.size() == 64);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const std::size_t r = g.reflect(i);
    CHECK(g.rel(r)[0] == g.rel(i)[0]);
    CHECK(g.rel(r)[1] == g.rel(i)[1]);
    CHECK(g.rel(r)[2] == -g.rel(i)[2]);
    CHECK(g.reflect(r) == i);
    CHECK(g.weight(r) == g.weight(i));
    CHECK(g.rel(i)[2] != 0.0);
  }
}

TEST_CASE("Maxwellian normalization and second moment")
{
  for (int n : {8, 16}) {
    const VelocityGrid g(spec(n));
    CHECK(quad(g, sample(g, mu_rel)) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const VelocityGrid g(spec(24));
  const auto s = sample(g, [](const Vec3& c) { return c[2] * c[2] * mu_rel(c); });
  CHECK(std::abs(quad(g, s) - 1.0) < 1e-8);
  const VelocityGrid u(spec(40, QuadRule::Uniform, 6.0));
  CHECK(quad(u, sample(u, mu_rel)) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("quad of zero, mu and the odd moment v3 mu")
{
  const VelocityGrid g(spec(12));
  CHECK(quad(g, std::vector<double>(g.size(), 0.0)) == 0.0);
  CHECK(quad(g, sample(g, mu_rel)) == doctest::Approx(1.0));
  CHECK(std::abs(quad(g, sample(g, [](const Vec3& c) { return c[2] * mu_rel(c); }))) < 1e-17);
  CHECK_THROWS_AS(quad(g, std::vector<double>(3, 1.0)), std::invalid_argument);
}

TEST_CASE("property: quad of any v3-odd sample vanishes to rounding")
{
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int n : {4, 6, 10}) {
    for (QuadRule rule : {QuadRule::GaussHermite, QuadRule::Uniform}) {
      const VelocityGrid g(spec(n, rule));
      for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> s(g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
          if (g.rel(i)[2] > 0.0) {
            s[i] = nd(rng) * std::pow(10.0, 3.0 * nd(rng));
            s[g.reflect(i)] = -s[i];
          }
        double scale = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) scale += g.weight(i) * std::abs(s[i]);
        CHECK(std::abs(quad(g, s)) <= 1e-15 * scale);
      }
    }
  }
}

TEST_CASE("quadrature error of a non-polynomial Gaussian integrand decreases under refinement")
{
  // int cos(c3) mu dc = exp(-1/2)
  const double exact = std::exp(-0.5);
  double prev = 1.0;
  for (int n : {4, 6, 8, 10}) {
    const VelocityGrid g(spec(n));
    const double err = std::abs(quad(g, sample(g, [](const Vec3& c) { return std::cos(c[2]) * mu_rel(c); })) - exact);
    CHECK(err < prev);
    prev = err;
  }
  CHECK(prev < 1e-7);
  // midpoint rule: second order in h for the smooth truncated Gaussian
  const double e1 = std::abs(quad(VelocityGrid(spec(8, QuadRule::Uniform)), sample(VelocityGrid(spec(8, QuadRule::Uniform)), mu_rel)) - 1.0);
  const double e2 = std::abs(quad(VelocityGrid(spec(16, QuadRule::Uniform)), sample(VelocityGrid(spec(16, QuadRule::Uniform)), mu_rel)) - 1.0);
  CHECK(e2 < e1 / 3.5);
}

TEST_CASE("drift shifts the tangential velocities only")
{
  GridSpec s = spec(6);
  s.drift = {0.3, -0.2, 0.0};
  const VelocityGrid g(s);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g.vel(i)[0] == doctest::Approx(g.rel(i)[0] + 0.3));
    CHECK(g.vel(i)[1] == doctest::Approx(g.rel(i)[1] - 0.2));
    CHECK(g.vel(i)[2] == g.rel(i)[2]);
  }
  CHECK(maxwellian(g.vel(0), s.drift) == doctest::Approx(mu_rel(g.rel(0))));
  CHECK(g.hash() != VelocityGrid(spec(6)).hash());
}

TEST_CASE("grid hash is a digest of nodes and weights")
{
  CHECK(VelocityGrid(spec(8)).hash() == VelocityGrid(spec(8)).hash());
  std::set<std::uint64_t> seen;
  for (int n : {4, 6, 8}) {
    seen.insert(VelocityGrid(spec(n)).hash());
    seen.insert(VelocityGrid(spec(n, QuadRule::Uniform)).hash());
  }
  CHECK(seen.size() == 6);
}

TEST_CASE("grid spec validation")
{
  CHECK_THROWS_AS(VelocityGrid(spec(5)), std::invalid_argument);
  CHECK_THROWS_AS(VelocityGrid(spec(2)), std::invalid_argument);
  CHECK_THROWS_AS(VelocityGrid(spec(8, QuadRule::Uniform, -1.0)), std::invalid_argument);
  GridSpec s = spec(8);
  s.drift = {0.0, 0.0, 0.1};
  CHECK_THROWS_AS(VelocityGrid{s}, std::invalid_argument);
  CHECK(parse_quad_rule(to_string(QuadRule::Uniform)) == QuadRule::Uniform);
  CHECK_THROWS_AS(parse_quad_rule("simpson"), std::invalid_argument);
}

TEST_CASE("tail mass is reported and small at the defaults")
{
  const VelocityGrid g(spec(16, QuadRule::Uniform, 6.0));
  CHECK(std::abs(g.tail_mass()) < 1e-7);
}

TEST_CASE("parity classes partition the grid and reproduce it")
{
  const VelocityGrid g(spec(6));
  const ParitySectors ps(g);
  CHECK(ps.sector_size() * 4 == g.size());
  std::mt19937_64 rng(3);
  const auto f = test::random_rough(g, rng);
  std::vector<double> back(g.size(), 0.0), part(ps.sector_size());
  for (int s = 0; s < 4; ++s) {
    ps.restrict_to(s, f, part);
    ps.add_from(s, part, back);
  }
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(back[i] == doctest::Approx(f[i]).epsilon(1e-14));
}
