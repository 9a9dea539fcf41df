#include "kbl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace kbl {

std::vector<IdentityReport> moment_identity_suite(const VelocityGrid& grid, double rel_tol)
{
  const Vec3 u = grid.spec().drift;
  const std::size_t N = grid.size();
  std::vector<double> s(N);
  std::vector<IdentityReport> out;
  auto check = [&](const std::string& name, double target, auto&& integrand) {
    for (std::size_t i = 0; i < N; ++i) {
      const Vec3& c = grid.rel(i);
      const double r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
      s[i] = integrand(c, r2) * maxwellian(grid.vel(i), u);
    }
    out.push_back(
        IdentityReport::make(name, quad(grid, s), target, Provenance::Paper, rel_tol * std::max(1.0, std::abs(target))));
  };
  check("(|c|^2-3) c3^2 (|c|^2-5) mu", 10.0,
        [](const Vec3& c, double r2) { return (r2 - 3.0) * c[2] * c[2] * (r2 - 5.0); });
  check("c3^2 (|c|^2-5) mu", 0.0, [](const Vec3& c, double r2) { return c[2] * c[2] * (r2 - 5.0); });
  check("c1^2 c3^2 mu", 1.0, [](const Vec3& c, double) { return c[0] * c[0] * c[2] * c[2]; });
  check("c2^2 c3^2 mu", 1.0, [](const Vec3& c, double) { return c[1] * c[1] * c[2] * c[2]; });
  check("(c3^4 - c3^2 (|c|^2-1)/2) mu", 1.0,
        [](const Vec3& c, double r2) { return c[2] * c[2] * c[2] * c[2] - 0.5 * c[2] * c[2] * (r2 - 1.0); });
  check("(|c|^2-3) c3^2 (|c|^2-10) mu", 0.0,
        [](const Vec3& c, double r2) { return (r2 - 3.0) * c[2] * c[2] * (r2 - 10.0); });
  return out;
}

namespace {

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n)
{
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = U(rng);
  return v;
}

double max_abs(std::span<const double> v)
{
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// p(c) sqrt(mu) with p a random cubic polynomial
std::vector<double> random_smooth(const VelocityGrid& grid, std::mt19937_64& rng)
{
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<std::array<int, 3>> powers;
  for (int a = 0; a <= 3; ++a)
    for (int b = 0; a + b <= 3; ++b)
      for (int c = 0; a + b + c <= 3; ++c) powers.push_back({a, b, c});
  std::vector<double> coef(powers.size());
  for (auto& x : coef) x = U(rng);
  std::vector<double> f(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    double p = 0.0;
    for (std::size_t k = 0; k < powers.size(); ++k)
      p += coef[k] * std::pow(c[0], powers[k][0]) * std::pow(c[1], powers[k][1]) * std::pow(c[2], powers[k][2]);
    f[i] = p * std::sqrt(maxwellian(c, {0, 0, 0}));
  }
  return f;
}

IdentityReport deficit(std::string name, double deficit_value, double tol, Provenance tag)
{
  return IdentityReport::make(std::move(name), std::max(0.0, deficit_value), 0.0, tag, tol);
}

}  // namespace

double gamma_conservation_defect(const CollisionGamma& gamma, int count, std::uint64_t seed)
{
  const OperatorSet& op = gamma.op();
  const auto& grid = op.grid();
  const Eigen::Index N = static_cast<Eigen::Index>(grid.size());
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd F(N, count);
  for (int k = 0; k < count; ++k) {
    const auto f = random_smooth(grid, rng);
    F.col(k) = Eigen::Map<const Eigen::VectorXd>(f.data(), N);
  }
  const Eigen::MatrixXd R = gamma.batch_raw(F, F);
  double worst = 0.0;
  for (int k = 0; k < count; ++k) {
    const std::span<const double> r(R.col(k).data(), static_cast<std::size_t>(N));
    const auto p = op.project_P(r);
    const double nrm = op.nu_norm(r);
    if (nrm > 0.0) worst = std::max(worst, std::sqrt(op.inner(p, p)) / nrm);
  }
  return worst;
}

std::vector<IdentityReport> operator_identity_suite(const OperatorSet& op, const CollisionGamma* gamma,
                                                    std::uint64_t seed)
{
  const auto& grid = op.grid();
  const std::size_t N = grid.size();
  std::mt19937_64 rng(seed);
  std::vector<IdentityReport> out;

  std::vector<double> sq(N);
  for (std::size_t i = 0; i < N; ++i) sq[i] = std::sqrt(maxwellian(grid.vel(i), grid.spec().drift));
  {
    const auto p = op.project_P(sq);
    double e = 0.0;
    for (std::size_t i = 0; i < N; ++i) e = std::max(e, std::abs(p[i] - sq[i]));
    out.push_back(IdentityReport::make("P sqrt(mu) = sqrt(mu)", e / max_abs(sq), 0.0, Provenance::Trivial, 1e-10));
    const auto l = op.apply_L(sq);
    std::vector<double> nsq(N);
    for (std::size_t i = 0; i < N; ++i) nsq[i] = op.nu()[i] * sq[i];
    out.push_back(IdentityReport::make("L sqrt(mu) = 0", max_abs(l) / max_abs(nsq), 0.0, Provenance::Trivial, 1e-10));
  }
  {
    double e = 0.0;
    for (int t = 0; t < 5; ++t) {
      const auto f = random_vector(rng, N);
      const auto p = op.project_P(f);
      const auto pp = op.project_P(p);
      double d = 0.0;
      for (std::size_t i = 0; i < N; ++i) d = std::max(d, std::abs(pp[i] - p[i]));
      e = std::max(e, d / std::max(max_abs(f), 1e-300));
    }
    out.push_back(IdentityReport::make("P idempotent", e, 0.0, Provenance::Trivial, 1e-10));
  }
  {
    const auto ev = op.lowest_eigenvalues(6);
    int zero = 0;
    for (int k = 0; k < 5; ++k)
      if (std::abs(ev[k]) < 1e-8) ++zero;
    if (std::abs(ev[5]) < 1e-8) ++zero;
    out.push_back(IdentityReport::make("null space dimension", zero, 5.0, Provenance::Paper, 0.0));
    out.push_back(deficit("sixth eigenvalue of L >= c0 deficit", op.c0() - ev[5], 0.0, Provenance::Paper));
    out.push_back(deficit("c0 > 0 deficit", 1e-12 - op.c0(), 0.0, Provenance::Paper));
  }
  {
    double e = 0.0;
    for (int t = 0; t < 5; ++t) {
      const auto f = random_vector(rng, N), g = random_vector(rng, N);
      const auto lf = op.apply_L(f), lg = op.apply_L(g);
      const double scale = std::sqrt(op.inner(lf, lf) * op.inner(g, g)) + std::sqrt(op.inner(f, f) * op.inner(lg, lg));
      e = std::max(e, std::abs(op.inner(lf, g) - op.inner(f, lg)) / scale);
    }
    out.push_back(IdentityReport::make("L self-adjoint", e, 0.0, Provenance::Derived, 1e-10));
  }
  {
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 20; ++t) {
      const auto f = random_vector(rng, N);
      const auto lf = op.apply_L(f);
      worst = std::min(worst, op.inner(lf, f) / op.inner(f, f));
    }
    out.push_back(deficit("<Lf, f> >= 0 deficit", -worst, 1e-8, Provenance::Paper));
  }
  out.push_back(deficit("nu0 > 0 deficit", -op.nu0(), 0.0, Provenance::Paper));
  out.push_back(deficit("nu1 >= nu0 deficit", op.nu0() - op.nu1(), 0.0, Provenance::Paper));
  out.push_back(deficit("kappa1 > 0 deficit", 1e-12 - op.kappa1(), 0.0, Provenance::Paper));
  out.push_back(deficit("kappa2 > 0 deficit", 1e-12 - op.kappa2(), 0.0, Provenance::Paper));
  if (gamma) {
    const std::vector<double> z(N, 0.0);
    out.push_back(IdentityReport::make("Gamma(0, 0) = 0", max_abs((*gamma)(z, z)), 0.0, Provenance::Trivial, 0.0));
    out.push_back(IdentityReport::make("|P Gamma(f, f)| / |Gamma(f, f)|_nu", gamma_conservation_defect(*gamma, 10, seed),
                                       0.0, Provenance::Paper, 1e-5));
  }
  return out;
}

WeightedNorms weighted_norms(const OperatorSet& op, const KineticField& f, const WeightSpec& weight, double sigma)
{
  const double d = f.slab.d();
  if (!std::isfinite(std::exp(2.0 * sigma * d)))
    throw std::invalid_argument("weighted_norms: e^{sigma x} overflows on the slab");
  const auto w = node_weights(op.grid(), weight);
  const std::size_t N = op.grid().size();
  WeightedNorms r;
  r.sup = weighted_sup(f, w, sigma);
  r.x = f.sample_x();
  const Eigen::MatrixXd s = f.samples();
  for (Eigen::Index k = 0; k < s.cols(); ++k) r.nu_profile.push_back(op.nu_norm(std::span<const double>(s.col(k).data(), N)));
  // 5-point Gauss-Legendre per cell of e^{2 sigma x} |f(x, .)|^2
  std::vector<double> gx, gw;
  gauss_legendre(5, gx, gw);
  double acc = 0.0;
  Eigen::VectorXd col(static_cast<Eigen::Index>(N));
  for (int c = 0; c < f.slab.cells(); ++c) {
    const double h = f.slab.width(c), xc = f.slab.x_nodes()[c];
    for (int q = 0; q < 5; ++q) {
      const double t = 0.5 * h * gx[q];
      col = f.mean.col(c) + t * f.slope.col(c);
      const std::span<const double> sp(col.data(), N);
      acc += 0.5 * h * gw[q] * std::exp(2.0 * sigma * (xc + t)) * op.inner(sp, sp);
    }
  }
  r.l2 = std::sqrt(acc);
  return r;
}

const char* to_string(SequenceClass c)
{
  switch (c) {
    case SequenceClass::Contractive: return "contractive";
    case SequenceClass::HypothesisFails: return "hypothesis_fails";
    case SequenceClass::EnvelopeViolated: return "envelope_violated";
    case SequenceClass::TooShort: return "too_short";
    case SequenceClass::Invalid: return "invalid";
  }
  return "?";
}

SequenceVerdict sequence_bound(const SequenceMonitor& m)
{
  // rounding slack for comparisons that hold with equality in exact arithmetic
  constexpr double kSlack = 1e-12;
  SequenceVerdict v;
  v.k = m.k;
  v.clause = m.C > 0.0 ? 2 : 1;
  const int n = static_cast<int>(m.a.size());
  const int k = m.k;
  if (k < 0 || m.D < 0.0 || m.C < 0.0) {
    v.cls = SequenceClass::Invalid;
    return v;
  }
  for (double x : m.a)
    if (!(x >= 0.0) || !std::isfinite(x)) {
      v.cls = SequenceClass::Invalid;
      return v;
    }
  if (v.clause == 2 && !(m.eta >= 0.0 && m.eta < 1.0 && std::pow(m.eta, k + 1) >= 0.25)) {
    v.cls = SequenceClass::Invalid;
    return v;
  }
  if (n < 2 * k + 2) {
    v.cls = SequenceClass::TooShort;
    return v;
  }
  auto A = [&](int i) { return *std::max_element(m.a.begin() + i, m.a.begin() + i + k + 1); };
  auto drift = [&](int i) { return v.clause == 1 ? m.D : m.C * std::pow(m.eta, i + k + 1); };

  for (int i = 0; i + 1 + k < n; ++i) {
    const double bound = A(i) / 8.0 + drift(i);
    if (m.a[i + 1 + k] > bound * (1.0 + kSlack)) {
      v.hypothesis_failure = i;
      break;
    }
  }
  double m0 = 0.0;
  for (int i = 0; i <= k; ++i) m0 = std::max(m0, A(i));
  for (int i = k + 1; i + k < n; ++i) {
    const double geo = std::pow(0.125, i / (k + 1)) * m0;
    const double tail = v.clause == 1 ? (8.0 + k) / 7.0 * m.D : 2.0 * m.C * (8.0 + k) / 7.0 * std::pow(m.eta, i + k);
    const double env = geo + tail;
    v.envelope.push_back(env);
    v.window_max.push_back(A(i));
    if (v.envelope_failure < 0 && A(i) > env * (1.0 + kSlack)) v.envelope_failure = i;
  }
  if (v.hypothesis_failure >= 0)
    v.cls = SequenceClass::HypothesisFails;
  else if (v.envelope_failure >= 0)
    v.cls = SequenceClass::EnvelopeViolated;
  else
    v.cls = SequenceClass::Contractive;
  return v;
}

SequenceVerdict classify_history(const std::vector<double>& a, double D, int k_max)
{
  SequenceVerdict first;
  for (int k = 0; k <= k_max; ++k) {
    SequenceMonitor m;
    m.k = k;
    m.a = a;
    m.D = D;
    const SequenceVerdict v = sequence_bound(m);
    if (v.cls == SequenceClass::Contractive) return v;
    if (k == 0) first = v;
  }
  return first;
}

const char* to_string(SolveStage s)
{
  switch (s) {
    case SolveStage::Penalized: return "penalized";
    case SolveStage::Unpenalized: return "unpenalized";
    case SolveStage::Shifted: return "shifted";
  }
  return "?";
}

std::vector<IdentityReport> conservation_suite(const OperatorSet& op, const KineticField& f, SolveStage stage,
                                               const ConservationTolerance& tol)
{
  const auto& grid = op.grid();
  const std::size_t N = grid.size();
  std::vector<IdentityReport> out;
  const std::string tag = to_string(stage);
  if (stage == SolveStage::Penalized) {
    std::array<double, 4> I{};
    for (int c = 0; c < f.slab.cells(); ++c) {
      const auto abc = macro_coefficients(op, f.mean.col(c).data());
      const double h = f.slab.width(c);
      I[0] += h * abc[0];
      I[1] += h * abc[1];
      I[2] += h * abc[2];
      I[3] += h * abc[4];
    }
    const char* names[4] = {"int_0^d a", "int_0^d b1", "int_0^d b2", "int_0^d c"};
    for (int k = 0; k < 4; ++k)
      out.push_back(IdentityReport::make(tag + ": " + names[k], I[k], 0.0, Provenance::Paper, tol.integral));
    return out;
  }

  std::vector<double> x;
  Eigen::MatrixXd vals;
  f.point_values(x, vals);
  const auto psi = raw_invariants(grid);
  auto flux_range = [&](const std::vector<double>& t, double& lo, double& hi, double& top) {
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    top = 0.0;
    // conservation holds at the cell edges, which are the even-indexed points
    for (Eigen::Index k = 0; k < vals.cols(); k += 2) {
      const double v = op.inner(t, std::span<const double>(vals.col(k).data(), N));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      top = std::max(top, std::abs(v));
    }
  };
  if (stage == SolveStage::Unpenalized) {
    std::vector<double> t(N);
    for (std::size_t i = 0; i < N; ++i) t[i] = grid.rel(i)[2] * psi[0][i];
    double lo, hi, top;
    flux_range(t, lo, hi, top);
    out.push_back(IdentityReport::make(tag + ": variation of the v3 sqrt(mu) flux", hi - lo, 0.0, Provenance::Paper, tol.flux));
    out.push_back(IdentityReport::make(tag + ": max |v3 sqrt(mu) flux|", top, 0.0, Provenance::Paper, tol.flux));
    double b3 = 0.0;
    for (Eigen::Index k = 0; k < vals.cols(); ++k) b3 = std::max(b3, std::abs(macro_coefficients(op, vals.col(k).data())[3]));
    out.push_back(IdentityReport::make(tag + ": max |b3|", b3, 0.0, Provenance::Paper, tol.b3));
    return out;
  }

  const Eigen::VectorXd td = f.trace_right();
  const auto r = shift_conditions(op, std::span<const double>(td.data(), N));
  const char* names[4] = {"v3 sqrt(mu)", "L^-1 A31", "L^-1 A32", "L^-1 B3"};
  for (int k = 0; k < 4; ++k)
    out.push_back(IdentityReport::make(tag + ": far-end condition against " + std::string(names[k]), r[k], 0.0,
                                       Provenance::Paper, tol.shift));
  std::array<std::vector<double>, 3> tests;
  for (auto& t : tests) t.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const Vec3& c = grid.rel(i);
    const double r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    tests[0][i] = c[2] * c[0] * psi[0][i];
    tests[1][i] = c[2] * c[1] * psi[0][i];
    tests[2][i] = c[2] * (r2 - 5.0) * psi[0][i];
  }
  const char* fnames[3] = {"v3 c1 sqrt(mu)", "v3 c2 sqrt(mu)", "v3 (|c|^2-5) sqrt(mu)"};
  for (int k = 0; k < 3; ++k) {
    double lo, hi, top;
    flux_range(tests[k], lo, hi, top);
    out.push_back(IdentityReport::make(tag + ": max |" + std::string(fnames[k]) + " flux|", top, 0.0, Provenance::Paper, tol.shift));
  }
  return out;
}

std::vector<IdentityReport> conservation_suite(const OperatorSet& op, const LinearSolution& sol,
                                               const ConservationTolerance& tol)
{
  std::vector<IdentityReport> out;
  for (auto [f, st] : {std::pair{&sol.penalized, SolveStage::Penalized}, std::pair{&sol.lifted, SolveStage::Unpenalized},
                       std::pair{&sol.field, SolveStage::Shifted}}) {
    if (f->nv() == 0) continue;
    auto r = conservation_suite(op, *f, st, tol);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

bool all_pass(const std::vector<IdentityReport>& r, bool paper_only)
{
  return std::all_of(r.begin(), r.end(),
                     [&](const IdentityReport& x) { return x.pass || (paper_only && x.tag != Provenance::Paper); });
}

}  // namespace kbl
