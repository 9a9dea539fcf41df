#include <doctest.h>

#include <cmath>
#include <random>

#include "kbl/diagnostics.hpp"
#include "support.hpp"

using namespace kbl;

namespace {

KineticField constant_field(const OperatorSet& op, const SlabGrid& slab, const std::vector<double>& v)
{
  const auto N = static_cast<Eigen::Index>(v.size());
  KineticField f = KineticField::zero(slab, N);
  const Eigen::Map<const Eigen::VectorXd> col(v.data(), N);
  for (int m = 0; m < slab.cells(); ++m) {
    f.mean.col(m) = col;
    f.center.col(m) = col;
  }
  for (int m = 0; m <= slab.cells(); ++m) f.edge.col(m) = col;
  (void)op;
  return f;
}

std::vector<double> geometric(double a0, double q, int n)
{
  std::vector<double> a;
  for (int i = 0; i < n; ++i) a.push_back(a0 * std::pow(q, i));
  return a;
}

}  // namespace

TEST_CASE("moment identities at the reference resolution")
{
  GridSpec s;
  s.n_per_axis = 24;
  const auto r = moment_identity_suite(VelocityGrid(s));
  REQUIRE(r.size() == 6);
  const double targets[] = {10.0, 0.0, 1.0, 1.0, 1.0, 0.0};
  for (std::size_t k = 0; k < r.size(); ++k) {
    CHECK(r[k].target == targets[k]);
    CHECK(r[k].tag == Provenance::Paper);
    CHECK_MESSAGE(r[k].pass, r[k].name << " computed " << r[k].computed);
    CHECK(std::abs(r[k].computed - targets[k]) < 1e-10);
  }
}

TEST_CASE("moment identities under grid refinement")
{
  // Gauss-Hermite integrates the degree-6 polynomial moments exactly from n = 4 on
  for (int n : {4, 6, 8, 12}) {
    GridSpec s;
    s.n_per_axis = n;
    for (const auto& id : moment_identity_suite(VelocityGrid(s))) CHECK(std::abs(id.computed - id.target) < 1e-11);
  }
  // the midpoint rule converges until the Gaussian tail beyond v_max dominates
  auto err = [](int n) {
    GridSpec s;
    s.n_per_axis = n;
    s.rule = QuadRule::Uniform;
    s.v_max = 7.0;
    double e = 0.0;
    for (const auto& id : moment_identity_suite(VelocityGrid(s))) e = std::max(e, std::abs(id.computed - id.target));
    return e;
  };
  const double e8 = err(8), e12 = err(12), e16 = err(16), e48 = err(48);
  CHECK(e12 < e8 / 50.0);
  CHECK(e16 < e12 / 50.0);
  CHECK(e48 < 1e-6);
}

TEST_CASE("identity report pass flag")
{
  CHECK(IdentityReport::make("x", 1.0, 1.0, Provenance::Trivial, 0.0).pass);
  CHECK_FALSE(IdentityReport::make("x", 1.1, 1.0, Provenance::Trivial, 0.05).pass);
  CHECK_FALSE(IdentityReport::make("x", std::nan(""), 1.0, Provenance::Trivial, 1.0).pass);
  std::vector<IdentityReport> v{IdentityReport::make("a", 0, 0, Provenance::Paper, 0),
                                IdentityReport::make("b", 1, 0, Provenance::Derived, 0)};
  CHECK_FALSE(all_pass(v));
  CHECK(all_pass(v, true));
}

TEST_CASE("weighted norms")
{
  const OperatorSet& op = test::shared_operator(8);
  const auto& g = op.grid();
  const SlabGrid slab = SlabGrid::make(4.0, 0.25, 0);
  const std::size_t N = g.size();

  const auto z = weighted_norms(op, constant_field(op, slab, std::vector<double>(N, 0.0)), WeightSpec{}, 0.0);
  CHECK(z.sup == 0.0);
  CHECK(z.l2 == 0.0);
  for (double p : z.nu_profile) CHECK(p == 0.0);

  std::vector<double> s(N);
  double expect = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    s[i] = test::sqrt_mu(g.rel(i));
    expect = std::max(expect, std::pow(1.0 + test::norm2(g.vel(i)), 1.5) * s[i]);
  }
  const auto a = weighted_norms(op, constant_field(op, slab, s), WeightSpec{}, 0.0);
  CHECK(a.sup == doctest::Approx(expect).epsilon(1e-14));
  // |f|_{L^2_{x,v}}^2 = d quad(mu) = 4
  CHECK(a.l2 == doctest::Approx(2.0).epsilon(1e-10));
  for (double p : a.nu_profile) CHECK(p == doctest::Approx(op.nu_norm(s)).epsilon(1e-14));

  std::vector<double> s2(s);
  for (double& v : s2) v *= 2.0;
  const auto b = weighted_norms(op, constant_field(op, slab, s2), WeightSpec{}, 0.0);
  CHECK(b.sup == doctest::Approx(2.0 * a.sup).epsilon(1e-14));
  CHECK(b.l2 == doctest::Approx(2.0 * a.l2).epsilon(1e-14));
  for (std::size_t k = 0; k < b.nu_profile.size(); ++k) CHECK(b.nu_profile[k] == doctest::Approx(2.0 * a.nu_profile[k]));

  // e^{sigma x} with sigma = 0.5 on [0, 4]: sup at x = d, L2 = sqrt((e^{4} - 1) / 1)
  const auto e = weighted_norms(op, constant_field(op, slab, s), WeightSpec{}, 0.5);
  CHECK(e.sup == doctest::Approx(expect * std::exp(2.0)).epsilon(1e-14));
  CHECK(e.l2 == doctest::Approx(std::sqrt(std::expm1(4.0))).epsilon(1e-9));

  CHECK_THROWS_AS(weighted_norms(op, constant_field(op, slab, s), WeightSpec{}, 200.0), std::invalid_argument);
}

TEST_CASE("sequence monitor: examples")
{
  SequenceMonitor m;
  m.k = 0;
  m.D = 0.0;
  m.a = geometric(1.0, 0.125, 12);
  auto v = sequence_bound(m);
  CHECK(v.cls == SequenceClass::Contractive);
  CHECK(v.clause == 1);
  for (std::size_t j = 0; j < v.envelope.size(); ++j) CHECK(v.window_max[j] == doctest::Approx(v.envelope[j]).epsilon(1e-14));

  m.D = 1.0;
  m.a.assign(16, 8.0 / 7.0);
  v = sequence_bound(m);
  CHECK(v.cls == SequenceClass::Contractive);
  for (double e : v.envelope) CHECK(e >= 8.0 / 7.0);
  CHECK(v.envelope.back() == doctest::Approx(8.0 / 7.0).epsilon(1e-9));
}

TEST_CASE("sequence monitor: failures and degenerate input")
{
  SequenceMonitor m;
  m.k = 0;
  m.a = geometric(1.0, 0.5, 10);
  CHECK(sequence_bound(m).cls == SequenceClass::HypothesisFails);
  CHECK(sequence_bound(m).hypothesis_failure == 0);

  m.a = {1.0};
  CHECK(sequence_bound(m).cls == SequenceClass::TooShort);
  m.k = 2;
  m.a = {1, 1, 1, 1, 1};
  CHECK(sequence_bound(m).cls == SequenceClass::TooShort);

  m.k = 0;
  m.a = {1.0, -0.1, 0.0};
  CHECK(sequence_bound(m).cls == SequenceClass::Invalid);
  m.a = {1.0, 0.1};
  m.D = -1.0;
  CHECK(sequence_bound(m).cls == SequenceClass::Invalid);
}

TEST_CASE("sequence monitor: windows longer than one")
{
  // a sequence that only contracts over windows of three terms
  std::vector<double> a{1.0, 1.0, 1.0};
  for (int i = 0; i < 12; ++i) a.push_back(a[a.size() - 3] / 8.0);
  SequenceMonitor m;
  m.a = a;
  m.k = 0;
  CHECK(sequence_bound(m).cls != SequenceClass::Contractive);
  m.k = 2;
  const auto v = sequence_bound(m);
  CHECK(v.cls == SequenceClass::Contractive);
  const auto h = classify_history(a, 0.0, 4);
  CHECK(h.cls == SequenceClass::Contractive);
  CHECK(h.k == 2);
}

TEST_CASE("sequence monitor: geometric drift clause")
{
  // a_{i+1} = a_i / 8 + C eta^{i+1} with eta^{k+1} >= 1/4
  SequenceMonitor m;
  m.k = 0;
  m.C = 1.0;
  m.eta = 0.5;
  m.a = {1.0};
  for (int i = 0; i < 20; ++i) m.a.push_back(m.a.back() / 8.0 + m.C * std::pow(m.eta, i + 1));
  const auto v = sequence_bound(m);
  CHECK(v.clause == 2);
  CHECK(v.cls == SequenceClass::Contractive);

  m.eta = 0.1;  // eta^{k+1} < 1/4 is outside the lemma
  CHECK(sequence_bound(m).cls == SequenceClass::Invalid);
}

TEST_CASE("property: random sequences satisfying the recursion stay under the envelope")
{
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    SequenceMonitor m;
    m.k = static_cast<int>(U(rng) * 4);
    m.D = U(rng) < 0.3 ? 0.0 : U(rng);
    const int n = 2 * m.k + 2 + static_cast<int>(U(rng) * 30);
    for (int i = 0; i <= m.k; ++i) m.a.push_back(10.0 * U(rng));
    while (static_cast<int>(m.a.size()) < n) {
      const int i = static_cast<int>(m.a.size()) - 1 - m.k;
      const double A = *std::max_element(m.a.begin() + i, m.a.begin() + i + m.k + 1);
      m.a.push_back(U(rng) * (A / 8.0 + m.D));
    }
    const auto v = sequence_bound(m);
    CHECK(v.cls == SequenceClass::Contractive);
    CHECK(v.envelope_failure == -1);
  }
}

TEST_CASE("conservation identities of the zero field vanish")
{
  const OperatorSet& op = test::shared_operator(8);
  const SlabGrid slab = SlabGrid::make(4.0, 0.25, 0);
  const KineticField z = constant_field(op, slab, std::vector<double>(op.grid().size(), 0.0));
  for (SolveStage st : {SolveStage::Penalized, SolveStage::Unpenalized, SolveStage::Shifted}) {
    const auto r = conservation_suite(op, z, st);
    CHECK_FALSE(r.empty());
    for (const auto& id : r) {
      CHECK(id.computed == 0.0);
      CHECK(id.pass);
    }
  }
}

TEST_CASE("conservation identities detect a nonzero normal flux")
{
  const OperatorSet& op = test::shared_operator(8);
  const auto& g = op.grid();
  const SlabGrid slab = SlabGrid::make(4.0, 0.25, 0);
  std::vector<double> v(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) v[i] = g.rel(i)[2] * test::sqrt_mu(g.rel(i));
  const auto r = conservation_suite(op, constant_field(op, slab, v), SolveStage::Unpenalized);
  CHECK_FALSE(all_pass(r));
}
