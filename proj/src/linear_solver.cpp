#include "kbl/linear_solver.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "kbl/gmres.hpp"
#include "kbl/parallel.hpp"
#include "kbl/summation.hpp"

namespace kbl {

double cutoff_chi(double x)
{
  if (x <= 1.0) return 1.0;
  if (x >= 2.0) return 0.0;
  const double t = x - 1.0;
  return 1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

double cutoff_dchi(double x)
{
  if (x <= 1.0 || x >= 2.0) return 0.0;
  const double t = x - 1.0;
  return -30.0 * t * t * (1.0 - t) * (1.0 - t);
}

ContinuationMode parse_continuation(const std::string& s)
{
  if (s == "first") return ContinuationMode::First;
  if (s == "all") return ContinuationMode::All;
  if (s == "none") return ContinuationMode::None;
  throw std::invalid_argument("continuation must be one of first, all, none (got '" + s + "')");
}

std::string to_string(ContinuationMode m)
{
  switch (m) {
    case ContinuationMode::First: return "first";
    case ContinuationMode::All: return "all";
    case ContinuationMode::None: return "none";
  }
  return "?";
}

void SolveConfig::validate() const
{
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (!(sigma0 > 0.0)) fail("solver.sigma0 must be positive");
  if (lambda_steps < 1) fail("solver.lambda_steps must be >= 1");
  if (n_levels < 1) fail("solver.n_levels must be >= 1");
  if (n_max < 4) fail("solver.n_max must be >= 4");
  if (eps_schedule.empty()) fail("solver.eps_schedule must not be empty");
  for (std::size_t k = 0; k < eps_schedule.size(); ++k) {
    if (!(eps_schedule[k] > 0.0)) fail("solver.eps_schedule entries must be positive");
    if (k > 0 && !(eps_schedule[k] < eps_schedule[k - 1])) fail("solver.eps_schedule must decrease strictly");
  }
  if (d_schedule.empty()) fail("solver.d_schedule must not be empty");
  for (std::size_t k = 0; k < d_schedule.size(); ++k) {
    if (!(d_schedule[k] >= 1.0)) fail("solver.d_schedule entries must be >= 1");
    if (k > 0 && !(d_schedule[k] > d_schedule[k - 1])) fail("solver.d_schedule must increase strictly");
  }
  if (!(tol > 0.0 && tol < 1.0)) fail("solver.tol must lie in (0, 1)");
  if (!(cauchy_tol > 0.0)) fail("solver.cauchy_tol must be positive");
  if (!(compat_tol > 0.0)) fail("solver.compat_tol must be positive");
  if (!(dx_max > 0.0)) fail("solver.dx_max must be positive");
  if (gmres_restart < 2 || gmres_max_iter < 1) fail("solver.gmres_restart must be >= 2 and gmres_max_iter >= 1");
  if (!(coarse_dx > 0.0)) fail("solver.coarse_dx must be positive");
}

std::vector<double> node_weights(const VelocityGrid& grid, const WeightSpec& w)
{
  std::vector<double> out(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = w(grid.vel(i), grid.spec().drift);
  return out;
}

CompatibilityResult check_compatibility(const OperatorSet& op, std::span<const double> f_b, double tol)
{
  const auto& grid = op.grid();
  if (f_b.size() != grid.size()) throw std::invalid_argument("f_b size does not match the velocity grid");
  CompatibilityResult r;
  std::array<std::vector<double>, 4> t;
  for (auto& v : t) v.resize(grid.size());
  double fmax = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    const double base = c[2] * std::sqrt(maxwellian(c, {0, 0, 0})) * f_b[i];
    t[0][i] = base;
    t[1][i] = c[0] * base;
    t[2][i] = c[1] * base;
    t[3][i] = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) * base;
    fmax = std::max(fmax, std::abs(f_b[i]));
  }
  r.tolerance = tol * std::max(fmax, std::numeric_limits<double>::min());
  for (int k = 0; k < 4; ++k) {
    r.moments[k] = quad(grid, t[k]);
    if (!(std::abs(r.moments[k]) <= r.tolerance)) r.pass = false;
  }
  return r;
}

namespace {

// Cell means and L2 slopes of a scalar function of x.
void project_scalar(const SlabGrid& slab, double (*fn)(double), std::vector<double>& mean, std::vector<double>& slope)
{
  const auto q = project_source(slab, 1, [&](double x, Eigen::VectorXd& col) { col[0] = fn(x); });
  mean.assign(q.mean.data(), q.mean.data() + slab.cells());
  slope.assign(q.slope.data(), q.slope.data() + slab.cells());
}

std::array<std::vector<double>, 4> conserved_tests(const VelocityGrid& grid)
{
  auto psi = raw_invariants(grid);
  return {psi[0], psi[1], psi[2], psi[4]};
}

}  // namespace

LiftResult lift_boundary(const OperatorSet& op, const LinearProblem& problem, const SlabGrid& slab, double tol)
{
  const auto& grid = op.grid();
  const Eigen::Index N = static_cast<Eigen::Index>(grid.size());
  if (problem.f_b.size() != grid.size()) throw std::invalid_argument("f_b size does not match the velocity grid");
  LiftResult r;
  if (problem.source) {
    std::vector<double> buf(grid.size());
    r.g = project_source(slab, N, [&](double x, Eigen::VectorXd& col) {
      problem.source(x, buf);
      col = Eigen::Map<const Eigen::VectorXd>(buf.data(), N);
    });
  } else {
    r.g.mean.setZero(N, slab.cells());
    r.g.slope.setZero(N, slab.cells());
  }

  const Eigen::Map<const Eigen::VectorXd> fb(problem.f_b.data(), N);
  if (fb.cwiseAbs().maxCoeff() > 0.0) {
    const auto Lfb_v = op.apply_L(problem.f_b);
    const Eigen::Map<const Eigen::VectorXd> Lfb(Lfb_v.data(), N);
    Eigen::VectorXd v3fb(N);
    for (Eigen::Index i = 0; i < N; ++i) v3fb[i] = grid.rel(i)[2] * fb[i];
    std::vector<double> chi_m, chi_s, dchi_m, dchi_s;
    project_scalar(slab, cutoff_chi, chi_m, chi_s);
    project_scalar(slab, cutoff_dchi, dchi_m, dchi_s);
    for (int m = 0; m < slab.cells(); ++m) {
      r.g.mean.col(m) += dchi_m[m] * v3fb + chi_m[m] * Lfb;
      r.g.slope.col(m) += dchi_s[m] * v3fb + chi_s[m] * Lfb;
    }
  }

  const auto tests = conserved_tests(grid);
  double scale = fb.cwiseAbs().maxCoeff();
  scale = std::max(scale, r.g.mean.cwiseAbs().maxCoeff());
  std::vector<double> col(grid.size());
  for (int m = 0; m < slab.cells(); ++m)
    for (const Eigen::MatrixXd* src : {&r.g.mean, &r.g.slope}) {
      Eigen::Map<Eigen::VectorXd>(col.data(), N) = src->col(m) * (src == &r.g.slope ? slab.width(m) : 1.0);
      for (int k = 0; k < 4; ++k)
        r.moment_residual[k] = std::max(r.moment_residual[k], std::abs(op.inner(col, tests[k])));
    }
  for (double v : r.moment_residual)
    if (!(v <= tol * std::max(scale, std::numeric_limits<double>::min()))) r.pass = false;
  return r;
}

DecayFit fit_decay(const KineticField& f, const std::vector<double>& w, double x_lo, double x_hi, double floor_rel)
{
  DecayFit fit;
  std::vector<double> xs;
  Eigen::MatrixXd vals;
  f.point_values(xs, vals);
  double global = 0.0;
  for (Eigen::Index k = 0; k < vals.cols(); ++k)
    for (Eigen::Index i = 0; i < vals.rows(); ++i) global = std::max(global, w[i] * std::abs(vals(i, k)));
  if (global == 0.0) {
    fit.trivial = true;
    return fit;
  }
  std::vector<double> px, py;
  const auto& xc = f.slab.x_nodes();
  for (int m = 0; m < f.slab.cells(); ++m) {
    if (xc[m] < x_lo || xc[m] > x_hi) continue;
    double s = 0.0;
    for (Eigen::Index i = 0; i < f.center.rows(); ++i) s = std::max(s, w[i] * std::abs(f.center(i, m)));
    if (s > floor_rel * global && s > 0.0) {
      px.push_back(xc[m]);
      py.push_back(std::log(s));
    }
  }
  fit.points = static_cast<int>(px.size());
  if (fit.points < 2) return fit;
  double mx = 0, my = 0;
  for (int k = 0; k < fit.points; ++k) {
    mx += px[k];
    my += py[k];
  }
  mx /= fit.points;
  my /= fit.points;
  double sxx = 0, sxy = 0;
  for (int k = 0; k < fit.points; ++k) {
    sxx += (px[k] - mx) * (px[k] - mx);
    sxy += (px[k] - mx) * (py[k] - my);
  }
  const double slope = sxy / sxx;
  fit.sigma = -slope;
  fit.amplitude = std::exp(my - slope * mx);
  fit.ok = fit.points >= 3 && fit.sigma > 0.0;
  return fit;
}

std::array<std::vector<double>, 4> shift_test_functions(const OperatorSet& op)
{
  const auto& grid = op.grid();
  std::vector<double> v3sm(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    v3sm[i] = c[2] * std::sqrt(maxwellian(c, {0, 0, 0}));
  }
  return {v3sm, op.solve_L_inv(op.A31()), op.solve_L_inv(op.A32()), op.solve_L_inv(op.B3())};
}

std::array<double, 4> shift_conditions(const OperatorSet& op, std::span<const double> trace_d)
{
  const auto& grid = op.grid();
  const auto T = shift_test_functions(op);
  std::vector<double> v3f(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) v3f[i] = grid.rel(i)[2] * trace_d[i];
  std::array<double, 4> r{};
  for (int k = 0; k < 4; ++k) r[k] = op.inner(v3f, T[k]);
  return r;
}

std::array<double, 4> solve_shift_system(double kappa1, double kappa2, const std::array<double, 4>& rhs)
{
  if (!(kappa1 > 0.0) || !(kappa2 > 0.0) || !std::isfinite(kappa1) || !std::isfinite(kappa2))
    throw std::invalid_argument("shift system needs kappa1, kappa2 > 0");
  std::array<double, 4> phi{};
  phi[3] = rhs[3] / kappa2;
  phi[2] = rhs[2] / kappa1;
  phi[1] = rhs[1] / kappa1;
  phi[0] = rhs[0] - 2.0 * phi[3];
  return phi;
}

std::array<double, 4> shift_phi_from_conditions(double kappa1, double kappa2, const std::array<double, 4>& r)
{
  return solve_shift_system(kappa1, kappa2, {-r[0], -r[1], -r[2], -r[3]});
}

ShiftResult compute_shift_phi(const OperatorSet& op, std::span<const double> trace_d)
{
  constexpr double kMinKappa = 1e-8;
  if (!(op.kappa1() > kMinKappa) || !(op.kappa2() > kMinKappa))
    throw SolverError(fmt::format("shift system singular: kappa1 = {:.3e}, kappa2 = {:.3e}", op.kappa1(), op.kappa2()));
  const auto& grid = op.grid();
  const auto T = shift_test_functions(op);
  const auto psi = raw_invariants(grid);
  const std::array<const std::vector<double>*, 4> basis{&psi[0], &psi[1], &psi[2], &psi[4]};
  ShiftResult sr;
  std::vector<double> tmp(grid.size());
  for (int l = 0; l < 4; ++l) {
    for (std::size_t i = 0; i < grid.size(); ++i) tmp[i] = grid.rel(i)[2] * (*basis[l])[i];
    for (int k = 0; k < 4; ++k) sr.matrix(k, l) = op.inner(tmp, T[k]);
  }
  for (std::size_t i = 0; i < grid.size(); ++i) tmp[i] = grid.rel(i)[2] * trace_d[i];
  Eigen::Vector4d rhs;
  for (int k = 0; k < 4; ++k) {
    rhs[k] = -op.inner(tmp, T[k]);
    sr.rhs[k] = rhs[k];
  }
  const Eigen::Vector4d phi = sr.matrix.triangularView<Eigen::Upper>().solve(rhs);
  for (int k = 0; k < 4; ++k) sr.phi[k] = phi[k];
  return sr;
}

void apply_shift(const OperatorSet& op, const std::array<double, 4>& phi, KineticField& f)
{
  const auto psi = raw_invariants(op.grid());
  const Eigen::Index N = f.nv();
  Eigen::VectorXd add(N);
  for (Eigen::Index i = 0; i < N; ++i) add[i] = phi[0] * psi[0][i] + phi[1] * psi[1][i] + phi[2] * psi[2][i] + phi[3] * psi[4][i];
  f.mean.colwise() += add;
  f.edge.colwise() += add;
  f.center.colwise() += add;
}

namespace {

KineticField add_chi(const KineticField& in, std::span<const double> f_b, double sign)
{
  KineticField f = in;
  const Eigen::Index N = f.nv();
  const Eigen::Map<const Eigen::VectorXd> fb(f_b.data(), N);
  if (fb.cwiseAbs().maxCoeff() == 0.0) return f;
  std::vector<double> cm, cs;
  project_scalar(f.slab, cutoff_chi, cm, cs);
  const auto& e = f.slab.edges();
  const auto& xc = f.slab.x_nodes();
  for (int m = 0; m < f.slab.cells(); ++m) {
    f.mean.col(m) += sign * cm[m] * fb;
    f.slope.col(m) += sign * cs[m] * fb;
    f.center.col(m) += sign * cutoff_chi(xc[m]) * fb;
  }
  for (std::size_t k = 0; k < e.size(); ++k) f.edge.col(static_cast<Eigen::Index>(k)) += sign * cutoff_chi(e[k]) * fb;
  return f;
}

}  // namespace

KineticField unlift(const KineticField& lifted, std::span<const double> f_b) { return add_chi(lifted, f_b, -1.0); }
KineticField lift(const KineticField& physical, std::span<const double> f_b) { return add_chi(physical, f_b, 1.0); }

double spectral_bound(const OperatorSet& op)
{
  constexpr Eigen::Index kMaxDense = 2500;
  double best = 0.0;
  for (int s = 0; s < 4; ++s) {
    const auto& B = op.block(s);
    if (B.Q.cols() > 0 || B.size() > kMaxDense) continue;
    const Eigen::MatrixXd L = B.L();
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(B.size(), B.size());
    const auto& S = op.sectors();
    for (Eigen::Index j = 0; j < B.size(); ++j) V(j, j) = op.grid().rel(S.base_index(j))[2];
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(V, L, Eigen::EigenvaluesOnly);
    const double theta = es.eigenvalues().maxCoeff();
    if (theta > 0.0) {
      const double g = 1.0 / theta;
      best = best == 0.0 ? g : std::min(best, g);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

SlabSolver::SlabSolver(const OperatorSet& op, SlabGrid slab, const WeightSpec& weight, const SolveConfig& cfg)
    : op_(op), slab_(std::move(slab)), weight_(weight), cfg_(cfg)
{
  const auto& grid = op_.grid();
  const auto& S = op_.sectors();
  const std::size_t m = S.sector_size();
  w_full_ = node_weights(grid, weight_);
  const auto psi = raw_invariants(grid);
  // first-order flux shapes L^-1 (I - P)(v3 psi) of the hydrodynamic modes
  std::vector<double> stress(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    stress[i] = (c[2] * c[2] - (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) / 3.0) * psi[0][i];
  }
  const std::array<std::vector<std::vector<double>>, 4> shapes{
      std::vector<std::vector<double>>{psi[0], psi[3], psi[4], op_.solve_L_inv(stress), op_.solve_L_inv(op_.B3())},
      std::vector<std::vector<double>>{psi[1], op_.solve_L_inv(op_.A31())},
      std::vector<std::vector<double>>{psi[2], op_.solve_L_inv(op_.A32())},
      std::vector<std::vector<double>>{}};
  for (int s = 0; s < 4; ++s) {
    auto& sc = sec_[s];
    const auto& B = op_.block(s);
    sc.s = s;
    sc.v3.resize(m);
    sc.refl.resize(m);
    sc.wsup.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      sc.v3[j] = grid.rel(S.base_index(j))[2];
      sc.refl[j] = S.reflect(j);
      double wm = 0.0;
      for (int r = 0; r < 4; ++r) wm = std::max(wm, w_full_[S.image(j, r)]);
      sc.wsup[j] = wm / B.scale[j];
    }
    // v3-even invariants carried by this class: 1 and |c|^2-3 (class 0), c1 (class 1), c2 (class 2)
    std::vector<int> ids;
    if (s == 0) ids = {0, 4};
    if (s == 1) ids = {1};
    if (s == 2) ids = {2};
    Eigen::MatrixXd E(m, static_cast<Eigen::Index>(ids.size()));
    std::vector<double> part(m);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      S.restrict_to(s, psi[ids[k]], part);
      for (std::size_t j = 0; j < m; ++j) E(j, k) = part[j] * B.scale[j];
    }
    if (E.cols() > 0) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(E);
      sc.even_inv = qr.householderQ() * Eigen::MatrixXd::Identity(m, E.cols());
    }
    sc.coarse_v.resize(m, static_cast<Eigen::Index>(shapes[s].size()));
    for (std::size_t k = 0; k < shapes[s].size(); ++k) {
      S.restrict_to(s, shapes[s][k], part);
      for (std::size_t j = 0; j < m; ++j) sc.coarse_v(j, k) = part[j] * B.scale[j];
      sc.coarse_v.col(k).normalize();
    }
  }
}

namespace {

Eigen::MatrixXd restrict_matrix(const OperatorSet& op, int s, const Eigen::MatrixXd& full)
{
  const auto& S = op.sectors();
  const auto& B = op.block(s);
  const Eigen::Index m = static_cast<Eigen::Index>(S.sector_size());
  Eigen::MatrixXd out(m, full.cols());
  for (Eigen::Index c = 0; c < full.cols(); ++c)
    for (Eigen::Index j = 0; j < m; ++j) {
      double v = 0.0;
      for (int r = 0; r < 4; ++r) v += ParitySectors::sign(s, r) * full(S.image(j, r), c);
      out(j, c) = 0.25 * v * B.scale[j];
    }
  return out;
}

void add_matrix(const OperatorSet& op, int s, const Eigen::MatrixXd& part, Eigen::MatrixXd& full)
{
  const auto& S = op.sectors();
  const auto& B = op.block(s);
  const Eigen::Index m = static_cast<Eigen::Index>(S.sector_size());
  for (Eigen::Index c = 0; c < part.cols(); ++c)
    for (Eigen::Index j = 0; j < m; ++j) {
      const double v = part(j, c) / B.scale[j];
      for (int r = 0; r < 4; ++r) full(S.image(j, r), c) += ParitySectors::sign(s, r) * v;
    }
}

bool active(const SectorData& g) { return g.on; }

SectorState* find(SlabState& st, int s)
{
  for (auto& p : st)
    if (p.sector == s) return &p;
  return nullptr;
}
const SectorState* find(const SlabState& st, int s)
{
  for (const auto& p : st)
    if (p.sector == s) return &p;
  return nullptr;
}

}  // namespace

SectorSources SlabSolver::split(const CellSource& src_full, std::span<const double> f_b) const
{
  const auto& grid = op_.grid();
  const Eigen::Index N = static_cast<Eigen::Index>(grid.size());
  if (f_b.size() != grid.size()) throw std::invalid_argument("f_b size does not match the velocity grid");
  const Eigen::Map<const Eigen::VectorXd> fb(f_b.data(), N);
  std::vector<double> cm, cs;
  project_scalar(slab_, cutoff_chi, cm, cs);
  CellSource chi_full;
  chi_full.mean = fb * Eigen::Map<const Eigen::RowVectorXd>(cm.data(), slab_.cells());
  chi_full.slope = fb * Eigen::Map<const Eigen::RowVectorXd>(cs.data(), slab_.cells());
  Eigen::MatrixXd wall_full = Eigen::MatrixXd::Zero(N, 1);
  for (Eigen::Index i = 0; i < N; ++i)
    if (grid.rel(i)[2] > 0.0) wall_full(i, 0) = fb[static_cast<Eigen::Index>(grid.reflect(i))];
  SectorSources out;
  for (int s = 0; s < 4; ++s) {
    SectorData d;
    d.src = {restrict_matrix(op_, s, src_full.mean), restrict_matrix(op_, s, src_full.slope)};
    d.chi_fb = {restrict_matrix(op_, s, chi_full.mean), restrict_matrix(op_, s, chi_full.slope)};
    d.wall = restrict_matrix(op_, s, wall_full).col(0);
    const double mx = std::max({d.src.mean.cwiseAbs().maxCoeff(), d.src.slope.cwiseAbs().maxCoeff(),
                                d.wall.cwiseAbs().maxCoeff()});
    d.on = mx > 0.0;
    if (d.on) out[s] = std::move(d);
  }
  return out;
}

CellSource SlabSolver::merge_source(const SectorSources& g) const
{
  const Eigen::Index N = static_cast<Eigen::Index>(op_.grid().size());
  CellSource q;
  q.mean.setZero(N, slab_.cells());
  q.slope.setZero(N, slab_.cells());
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    add_matrix(op_, s, g[s].src.mean, q.mean);
    add_matrix(op_, s, g[s].src.slope, q.slope);
  }
  return q;
}

CellSource SlabSolver::merge_chi(const SectorSources& g) const
{
  const Eigen::Index N = static_cast<Eigen::Index>(op_.grid().size());
  CellSource q;
  q.mean.setZero(N, slab_.cells());
  q.slope.setZero(N, slab_.cells());
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    add_matrix(op_, s, g[s].chi_fb.mean, q.mean);
    add_matrix(op_, s, g[s].chi_fb.slope, q.slope);
  }
  return q;
}

CellSource SlabSolver::effective(const SectorData& g, double eps)
{
  CellSource q = g.src;
  if (eps != 0.0 && g.chi_fb.mean.rows() > 0) {
    q.mean -= eps * g.chi_fb.mean;
    q.slope -= eps * g.chi_fb.slope;
  }
  return q;
}

KineticField SlabSolver::to_field(const SlabState& st) const
{
  KineticField f = KineticField::zero(slab_, static_cast<Eigen::Index>(op_.grid().size()));
  for (const auto& p : st) {
    add_matrix(op_, p.sector, p.u.mean, f.mean);
    add_matrix(op_, p.sector, p.u.slope, f.slope);
    add_matrix(op_, p.sector, p.u.edge, f.edge);
    add_matrix(op_, p.sector, p.u.center, f.center);
  }
  return f;
}

SlabState SlabSolver::from_field(const KineticField& f, const SectorSources& pattern) const
{
  SlabState st;
  for (int s = 0; s < 4; ++s) {
    if (!active(pattern[s])) continue;
    SectorState p;
    p.sector = s;
    p.u.mean = restrict_matrix(op_, s, f.mean);
    p.u.slope = restrict_matrix(op_, s, f.slope);
    p.u.edge = restrict_matrix(op_, s, f.edge);
    p.u.center = restrict_matrix(op_, s, f.center);
    st.push_back(std::move(p));
  }
  return st;
}

SlabState SlabSolver::zero_state(const SectorSources& g) const
{
  SlabState st;
  const Eigen::Index m = static_cast<Eigen::Index>(op_.sectors().sector_size());
  const int M = slab_.cells();
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    SectorState p;
    p.sector = s;
    p.u.mean.setZero(m, M);
    p.u.slope.setZero(m, M);
    p.u.edge.setZero(m, M + 1);
    p.u.center.setZero(m, M);
    st.push_back(std::move(p));
  }
  return st;
}

void SlabSolver::axpby(double a, const SlabState& x, double b, SlabState& y)
{
  for (auto& p : y) {
    const SectorState* q = find(x, p.sector);
    if (!q) throw std::invalid_argument("axpby: parity pattern mismatch");
    p.u.mean = a * q->u.mean + b * p.u.mean;
    p.u.slope = a * q->u.slope + b * p.u.slope;
    p.u.edge = a * q->u.edge + b * p.u.edge;
    p.u.center = a * q->u.center + b * p.u.center;
  }
}

void SlabSolver::sweep_sector(int s, double eps, double eta, const CellSource& q, SweepResult& out, bool points,
                              const Eigen::VectorXd* bsrc) const
{
  const auto& B = op_.block(s);
  const auto& sc = sec_[s];
  SweepVelocities vel{std::span<const double>(B.nu.data(), static_cast<std::size_t>(B.nu.size())), sc.v3, sc.refl};
  sweep(slab_, vel, eps, eta, q, bsrc, out, points);
}

CellSource SlabSolver::apply_K(int s, const Eigen::MatrixXd& mean, const Eigen::MatrixXd& slope, double lambda,
                               const CellSource* g) const
{
  const auto& K = op_.block(s).K;
  CellSource q;
  q.mean.noalias() = lambda * (K * mean);
  q.slope.noalias() = lambda * (K * slope);
  if (g) {
    q.mean += g->mean;
    q.slope += g->slope;
  }
  return q;
}

double SlabSolver::cell_sup(int s, const Eigen::MatrixXd& mean, const Eigen::MatrixXd& slope) const
{
  const auto& w = sec_[s].wsup;
  double r = 0.0;
  for (Eigen::Index m = 0; m < mean.cols(); ++m) {
    const double h = 0.5 * slab_.width(static_cast<int>(m));
    for (Eigen::Index j = 0; j < mean.rows(); ++j)
      r = std::max(r, w[j] * (std::abs(mean(j, m)) + h * std::abs(slope(j, m))));
  }
  return r;
}

double SlabSolver::point_sup(int s, const SweepResult& u) const
{
  const auto& w = sec_[s].wsup;
  double r = 0.0;
  for (const Eigen::MatrixXd* mat : {&u.edge, &u.center})
    for (Eigen::Index c = 0; c < mat->cols(); ++c)
      for (Eigen::Index j = 0; j < mat->rows(); ++j) r = std::max(r, w[j] * std::abs((*mat)(j, c)));
  return r;
}

Eigen::MatrixXd SlabSolver::coarse_basis(int s, const Eigen::VectorXd& dm, const Eigen::VectorXd& ds) const
{
  const auto& V = sec_[s].coarse_v;
  const int M = slab_.cells();
  const Eigen::Index m = V.rows();
  if (V.cols() == 0) return {};
  // hat nodes on fine edges, spacing about coarse_dx
  const auto& e = slab_.edges();
  std::vector<int> nodes{0};
  for (int k = 1; k <= M; ++k)
    if (k == M || e[k] - e[nodes.back()] >= cfg_.coarse_dx - 1e-12) nodes.push_back(k);
  const int nc = static_cast<int>(nodes.size());
  const Eigen::Index len = m * M;
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(2 * len, static_cast<Eigen::Index>(nc) * V.cols());
  for (int k = 0; k + 1 < nc; ++k) {
    const double xl = e[nodes[k]], xr = e[nodes[k + 1]], H = xr - xl;
    for (int c = nodes[k]; c < nodes[k + 1]; ++c) {
      const double xc = 0.5 * (e[c] + e[c + 1]);
      const double phi_r = (xc - xl) / H, phi_l = 1.0 - phi_r;
      for (Eigen::Index v = 0; v < V.cols(); ++v) {
        auto zl = Z.col(k * V.cols() + v), zr = Z.col((k + 1) * V.cols() + v);
        zl.segment(c * m, m) = dm[c] * phi_l * V.col(v);
        zr.segment(c * m, m) = dm[c] * phi_r * V.col(v);
        zl.segment(len + c * m, m) = -ds[c] / H * V.col(v);
        zr.segment(len + c * m, m) = ds[c] / H * V.col(v);
      }
    }
  }
  for (Eigen::Index j = 0; j < Z.cols(); ++j) Z.col(j).normalize();
  return Z;
}

namespace {

struct SectorSolve {
  int iterations = 0;
  double residual = 0.0;  // absolute, cell sup
  double reference = 0.0;
};

}  // namespace

StageRecord SlabSolver::solve(const SectorSources& g, double eps, double eta, double lambda, SlabState& state,
                              double rel_tol) const
{
  StageRecord rec;
  rec.d = slab_.d();
  rec.eps = eps;
  rec.eta = eta;
  const int M = slab_.cells();
  const Eigen::Index m = static_cast<Eigen::Index>(op_.sectors().sector_size());
  if (state.empty() || state.size() != static_cast<std::size_t>(std::count_if(g.begin(), g.end(), active)))
    state = zero_state(g);

  // L2 scaling of mean and slope coefficients per cell
  Eigen::VectorXd dm(M), ds(M);
  for (int c = 0; c < M; ++c) {
    const double h = slab_.width(c);
    dm[c] = std::sqrt(h);
    ds[c] = std::sqrt(h * h * h / 12.0);
  }
  const Eigen::Index len = m * M;
  auto pack = [&](const Eigen::MatrixXd& mean, const Eigen::MatrixXd& slope, Eigen::VectorXd& z) {
    z.resize(2 * len);
    Eigen::Map<Eigen::MatrixXd>(z.data(), m, M) = mean * dm.asDiagonal();
    Eigen::Map<Eigen::MatrixXd>(z.data() + len, m, M) = slope * ds.asDiagonal();
  };
  auto unpack = [&](const Eigen::VectorXd& z, Eigen::MatrixXd& mean, Eigen::MatrixXd& slope) {
    mean = Eigen::Map<const Eigen::MatrixXd>(z.data(), m, M) * dm.cwiseInverse().asDiagonal();
    slope = Eigen::Map<const Eigen::MatrixXd>(z.data() + len, m, M) * ds.cwiseInverse().asDiagonal();
  };

  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    SectorState* st = find(state, s);
    if (!st) throw std::invalid_argument("solve: state lacks an active parity class");
    const CellSource eff = effective(g[s], eps);
    const Eigen::VectorXd bs = eta * g[s].wall;
    SweepResult tmp;
    sweep_sector(s, eps, eta, eff, tmp, lambda == 0.0, &bs);
    if (lambda == 0.0) {
      st->u = std::move(tmp);
      continue;
    }
    const double ref = cell_sup(s, tmp.mean, tmp.slope);
    Eigen::VectorXd b, x;
    pack(tmp.mean, tmp.slope, b);
    pack(st->u.mean, st->u.slope, x);
    Eigen::MatrixXd um, us;
    auto A = [&](const Eigen::VectorXd& z, Eigen::VectorXd& y) {
      unpack(z, um, us);
      const CellSource q = apply_K(s, um, us, lambda, nullptr);
      SweepResult sr;
      sweep_sector(s, eps, eta, q, sr, false);
      Eigen::VectorXd t;
      pack(sr.mean, sr.slope, t);
      y = z - t;
    };
    const Augmentation aug = make_augmentation(A, coarse_basis(s, dm, ds));
    rec.iterations += static_cast<int>(aug.C.cols());
    double gm_tol = rel_tol;
    double res = 0.0;
    std::vector<double> history;
    for (int attempt = 0;; ++attempt) {
      const GmresStats gs = gmres_augmented(A, aug, b, x, cfg_.gmres_restart, cfg_.gmres_max_iter, gm_tol);
      rec.iterations += gs.iterations;
      history.push_back(gs.rel_residual);
      Eigen::VectorXd r;
      A(x, r);
      r = b - r;
      unpack(r, um, us);
      res = cell_sup(s, um, us);
      if (res <= rel_tol * ref || ref == 0.0) break;
      if (!gs.converged || attempt >= 4 || gm_tol < 1e-15) {
        std::string h;
        for (double v : history) h += fmt::format(" {:.3e}", v);
        throw SolverError(fmt::format(
            "fixed-point solve did not reach tolerance (d = {}, eps = {:.3e}, eta = {:.6f}, lambda = {:.4f}, class {}): "
            "weighted residual {:.3e} vs {:.3e}; GMRES relative residuals{}",
            slab_.d(), eps, eta, lambda, s, res, rel_tol * ref, h));
      }
      gm_tol *= 0.1;
    }
    rec.residual = std::max(rec.residual, res);
    unpack(x, um, us);
    const CellSource q = apply_K(s, um, us, lambda, &eff);
    sweep_sector(s, eps, eta, q, st->u, true, &bs);
  }
  return rec;
}

StageRecord SlabSolver::solve_continuation(const SectorSources& g, double eps, double eta, SlabState& state,
                                           std::vector<ContinuationStep>& log) const
{
  constexpr int kMaxFixedPoint = 80;
  constexpr double kMinStep = 1.0 / 4096.0;
  StageRecord rec;
  rec.kind = "continuation";
  rec.d = slab_.d();
  rec.eps = eps;
  rec.eta = eta;
  state = zero_state(g);
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    SectorSources gs;
    gs[s] = g[s];
    SlabState f;
    solve(gs, eps, eta, 0.0, f, cfg_.tol);  // lambda = 0: one transport solve
    double lambda = 0.0, dl = 1.0 / cfg_.lambda_steps;
    int halvings = 0;
    while (lambda < 1.0 - 1e-15) {
      dl = std::min(dl, 1.0 - lambda);
      ContinuationStep step;
      step.sector = s;
      step.lambda = lambda;
      step.dlambda = dl;
      step.halvings = halvings;
      SlabState fi = f;
      const double ref = std::max(point_sup(s, f[0].u), std::numeric_limits<double>::min());
      bool ok = false;
      for (int it = 0; it < kMaxFixedPoint; ++it) {
        // f_{i+1} solves (eps + v3 dx + nu - lambda K) f_{i+1} = dl K f_i + g
        SectorSources qi;
        const CellSource eff = effective(g[s], eps);
        qi[s].on = true;
        qi[s].src = apply_K(s, fi[0].u.mean, fi[0].u.slope, dl, &eff);
        qi[s].wall = g[s].wall;
        SlabState next = fi;
        const StageRecord r = solve(qi, eps, eta, lambda, next, 0.01 * cfg_.tol);
        rec.iterations += r.iterations;
        SweepResult diff;
        diff.edge = next[0].u.edge - fi[0].u.edge;
        diff.center = next[0].u.center - fi[0].u.center;
        const double a = point_sup(s, diff);
        step.diffs.push_back(a);
        fi = std::move(next);
        const std::size_t k = step.diffs.size();
        if (k >= 2 && step.diffs[k - 2] > 100.0 * cfg_.tol * ref) {
          const double ratio = a / step.diffs[k - 2];
          step.ratios.push_back(ratio);
          step.max_ratio = std::max(step.max_ratio, ratio);
          if (ratio > 0.5) break;
        }
        if (a <= cfg_.tol * ref) {
          ok = true;
          break;
        }
      }
      log.push_back(step);
      if (!ok) {
        dl *= 0.5;
        ++halvings;
        if (dl < kMinStep) {
          std::string h;
          for (double v : step.ratios) h += fmt::format(" {:.3f}", v);
          throw SolverError(fmt::format("lambda-continuation stalled at lambda = {:.4f} (class {}); last ratios{}",
                                        lambda, s, h));
        }
        continue;
      }
      log.back().halvings = halvings;
      log.back().accepted = true;
      f = std::move(fi);
      lambda += dl;
    }
    SectorState* st = find(state, s);
    st->u = std::move(f[0].u);
  }
  rec.residual = residual(g, eps, eta, state);
  return rec;
}

double SlabSolver::boundary_iteration_ratio(const SectorSources& g, double eps, double eta, int iters) const
{
  const int M = slab_.cells();
  double worst = 0.0;
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    const auto& sc = sec_[s];
    const Eigen::Index m = static_cast<Eigen::Index>(sc.v3.size());
    const CellSource eff = effective(g[s], eps);
    Eigen::VectorXd b = eta * g[s].wall;
    SweepResult h, next;
    sweep_sector(s, eps, 0.0, eff, h, true, &b);
    const double ref = std::max(point_sup(s, h), std::numeric_limits<double>::min());
    double prev = -1.0;
    for (int it = 0; it < iters; ++it) {
      for (Eigen::Index j = 0; j < m; ++j) {
        const Eigen::Index r = static_cast<Eigen::Index>(sc.refl[j]);
        b[j] = eta * ((sc.v3[j] > 0.0 ? h.edge(r, 0) : h.edge(r, M)) + g[s].wall[j]);
      }
      sweep_sector(s, eps, 0.0, eff, next, true, &b);
      SweepResult diff;
      diff.edge = next.edge - h.edge;
      diff.center = next.center - h.center;
      const double a = point_sup(s, diff);
      if (prev > 1e-14 * ref) worst = std::max(worst, a / prev);
      prev = a;
      h = std::move(next);
    }
  }
  return worst;
}

double SlabSolver::distance(const SlabState& a, const SlabState& b) const
{
  SlabState d = a;
  axpby(-1.0, b, 1.0, d);
  return norm(d);
}

double SlabSolver::norm(const SlabState& a) const { return weighted_sup(to_field(a), w_full_); }

double SlabSolver::source_norm(const SectorSources& g) const
{
  double r = 0.0;
  for (int s = 0; s < 4; ++s)
    if (active(g[s])) r += cell_sup(s, g[s].src.mean, g[s].src.slope) + g[s].wall.cwiseAbs().cwiseProduct(sec_[s].wsup).maxCoeff();
  return r;
}

double SlabSolver::residual(const SectorSources& g, double eps, double eta, const SlabState& st) const
{
  double total = 0.0;
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    const SectorState* p = find(st, s);
    if (!p) throw std::invalid_argument("residual: state lacks an active parity class");
    const CellSource eff = effective(g[s], eps);
    const Eigen::VectorXd bs = eta * g[s].wall;
    const CellSource q = apply_K(s, p->u.mean, p->u.slope, 1.0, &eff);
    SweepResult sr;
    sweep_sector(s, eps, eta, q, sr, true, &bs);
    sr.edge -= p->u.edge;
    sr.center -= p->u.center;
    total += point_sup(s, sr);
  }
  return total;
}

SlabSolver::Energy SlabSolver::energy_balance(const SectorSources& g, double eps, double eta,
                                              const SlabState& st) const
{
  Energy e;
  const int M = slab_.cells();
  double Kterm = 0.0, gterm = 0.0, nuterm = 0.0;
  for (int s = 0; s < 4; ++s) {
    if (!active(g[s])) continue;
    const SectorState* p = find(st, s);
    const auto& B = op_.block(s);
    const auto& sc = sec_[s];
    const CellSource eff = effective(g[s], eps);
    const CellSource q = apply_K(s, p->u.mean, p->u.slope, 1.0, &eff);
    const Eigen::Index m = static_cast<Eigen::Index>(sc.v3.size());
    // exact per-velocity solution of the cell problems fed by the stored inflow traces
    Eigen::MatrixXd hm(m, M), hs(m, M);
    std::vector<double> sq(m, 0.0), bnd(m, 0.0);
    parallel_for(static_cast<std::size_t>(m), [&](std::size_t jj) {
      const Eigen::Index j = static_cast<Eigen::Index>(jj);
      const double v3 = sc.v3[j], speed = std::abs(v3), ne = B.nu[j] + eps;
      double h = v3 > 0.0 ? p->u.edge(j, 0) : p->u.edge(j, M);
      const double h_in = h;
      double acc = 0.0;
      for (int k = 0; k < M; ++k) {
        const int c = v3 > 0.0 ? k : M - 1 - k;
        const double len = slab_.width(c);
        const double qs = q.slope(j, c);
        const double alpha = v3 > 0.0 ? q.mean(j, c) - 0.5 * qs * len : q.mean(j, c) + 0.5 * qs * len;
        const CellSolve cs = solve_cell(h, alpha, v3 > 0.0 ? qs : -qs, ne, speed, len, true);
        hm(j, c) = cs.mean;
        hs(j, c) = v3 > 0.0 ? cs.moment : -cs.moment;
        acc += cs.sq_integral;
        h = cs.exit;
      }
      sq[jj] = acc;
      // 1/2 v3 (h(d)^2 - h(0)^2) for this velocity
      bnd[jj] = 0.5 * speed * (h * h - h_in * h_in);
    });
    double pen = 0.0, nu = 0.0, bd = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      pen += eps * sq[j];
      nu += B.nu[j] * sq[j];
      bd += bnd[j];
    }
    const Eigen::MatrixXd Khm = B.K * hm, Khs = B.K * hs;
    for (int c = 0; c < M; ++c) {
      const double len = slab_.width(c), f2 = len * len / 12.0;
      Kterm += len * (hm.col(c).dot(Khm.col(c)) + f2 * hs.col(c).dot(Khs.col(c)));
      gterm += len * (hm.col(c).dot(eff.mean.col(c)) + f2 * hs.col(c).dot(eff.slope.col(c)));
    }
    e.penalty += pen;
    e.boundary += bd;
    nuterm += nu;
  }
  e.dissipation = nuterm - Kterm;
  e.lhs = e.penalty + e.boundary + e.dissipation;
  e.rhs = gterm;
  const double scale = std::max({std::abs(e.penalty), std::abs(e.boundary), std::abs(e.dissipation), std::abs(e.rhs),
                                 std::numeric_limits<double>::min()});
  e.mismatch = (e.lhs == 0.0 && e.rhs == 0.0) ? 0.0 : std::abs(e.lhs - e.rhs) / scale;
  return e;
}

std::array<double, 4> SlabSolver::zero_mean_integrals(const SectorSources& g, const SlabState& st) const
{
  KineticField f = to_field(st);
  const CellSource chi = merge_chi(g);
  f.mean += chi.mean;
  std::array<double, 4> r{};
  for (int c = 0; c < slab_.cells(); ++c) {
    const auto abc = macro_coefficients(op_, f.mean.col(c).data());
    const double len = slab_.width(c);
    r[0] += len * abc[0];
    r[1] += len * abc[1];
    r[2] += len * abc[2];
    r[3] += len * abc[4];
  }
  return r;
}

void SlabSolver::enforce_zero_means(const SectorSources& g, SlabState& st) const
{
  for (auto& p : st) {
    const auto& E = sec_[p.sector].even_inv;
    if (E.cols() == 0) continue;
    const auto& chi = g[p.sector].chi_fb.mean;
    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(E.cols());
    for (int c = 0; c < slab_.cells(); ++c)
      alpha += slab_.width(c) * (E.transpose() * (p.u.mean.col(c) + chi.col(c)));
    alpha /= slab_.d();
    const Eigen::VectorXd shift = E * alpha;
    p.u.mean.colwise() -= shift;
    p.u.edge.colwise() -= shift;
    p.u.center.colwise() -= shift;
  }
}

// ---------------------------------------------------------------------------

namespace {

bool strictly_decreasing_above(const std::vector<double>& v, double floor)
{
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k - 1] > floor && !(v[k] < v[k - 1])) return false;
  return true;
}

std::string history(const std::vector<double>& v)
{
  std::string s;
  for (double x : v) s += fmt::format(" {:.3e}", x);
  return s;
}

}  // namespace

SlabState limit_eps_n(const SlabSolver& solver, const SectorSources& g, const SolveConfig& cfg, bool continuation,
                      SlabReport& rep, SolveReport& report, SlabState* penalized)
{
  SlabState state = solver.zero_state(g);
  if (state.empty()) {
    rep.n0 = 4;
    return state;
  }
  const double floor = 1e-12 * std::max(solver.source_norm(g), std::numeric_limits<double>::min());

  // smallest damping level whose boundary iteration contracts by 1/2
  rep.n0 = 0;
  for (int n = 4; n <= cfg.n_max; n *= 2) {
    const double ratio = solver.boundary_iteration_ratio(g, cfg.eps_schedule.front(), 1.0 - 1.0 / n);
    if (ratio <= 0.5) {
      rep.n0 = n;
      rep.boundary_ratio = ratio;
      break;
    }
  }
  if (rep.n0 == 0) throw SolverError("damped boundary iteration does not contract for any n <= n_max");
  rep.n_values.clear();
  for (int k = 0, n = rep.n0; k < cfg.n_levels; ++k, n *= 2) rep.n_values.push_back(n);

  bool first = true;
  SlabState f_eps, f_half;
  for (double eps : cfg.eps_schedule) {
    std::vector<double> nd;
    SlabState prev;
    for (int n : rep.n_values) {
      const double eta = 1.0 - 1.0 / n;
      StageRecord r = (first && continuation) ? solver.solve_continuation(g, eps, eta, state, report.continuation)
                                              : solver.solve(g, eps, eta, 1.0, state, cfg.tol);
      if (!(first && continuation)) r.kind = "damped";
      r.n = n;
      report.stages.push_back(r);
      first = false;
      if (!prev.empty()) nd.push_back(solver.distance(state, prev));
      prev = state;
    }
    StageRecord r = solver.solve(g, eps, 1.0, 1.0, state, cfg.tol);
    r.kind = "specular";
    report.stages.push_back(r);
    nd.push_back(solver.distance(state, prev));
    f_eps = state;
    f_half = state;
    r = solver.solve(g, 0.5 * eps, 1.0, 1.0, f_half, cfg.tol);
    r.kind = "half_eps";
    report.stages.push_back(r);
    rep.n_diffs.push_back(nd);
    rep.eps_values.push_back(eps);
    rep.eps_diffs.push_back(solver.distance(f_eps, f_half));
  }
  rep.penalized_means = solver.zero_mean_integrals(g, f_half);
  if (penalized) *penalized = f_half;
  rep.energy_mismatch = solver.energy_balance(g, 0.5 * cfg.eps_schedule.back(), 1.0, f_half).mismatch;

  if (!strictly_decreasing_above(rep.eps_diffs, floor))
    throw SolverError(fmt::format("eps-sequence is not Cauchy at d = {}: |f_eps - f_eps/2| ={}", solver.slab().d(),
                                  history(rep.eps_diffs)));
  for (std::size_t k = 0; k < rep.n_diffs.size(); ++k) {
    std::vector<double> consecutive(rep.n_diffs[k].begin(), rep.n_diffs[k].end() - 1);
    if (!strictly_decreasing_above(consecutive, floor))
      throw SolverError(fmt::format("n-sequence is not Cauchy at d = {}, eps = {:.1e}: |f_n - f_2n| ={}",
                                    solver.slab().d(), rep.eps_values[k], history(consecutive)));
  }

  // first-order extrapolation from the (eps, eps/2) pair, then the eps = 0 solve
  SlabState f0 = f_half;
  SlabSolver::axpby(-1.0, f_eps, 2.0, f0);
  StageRecord r = solver.solve(g, 0.0, 1.0, 1.0, f0, cfg.tol);
  r.kind = "polish";
  report.stages.push_back(r);
  solver.enforce_zero_means(g, f0);
  rep.polish_residual = solver.residual(g, 0.0, 1.0, f0);
  return f0;
}

LinearSolution extend_domain(const OperatorSet& op, const LinearProblem& problem, const SolveConfig& cfg)
{
  cfg.validate();
  problem.weight.validate();
  LinearSolution sol;
  auto& report = sol.report;
  report.compatibility = check_compatibility(op, problem.f_b, cfg.compat_tol);
  if (!report.compatibility.pass) {
    const auto& m = report.compatibility.moments;
    throw SolverError(fmt::format("boundary data fails the compatibility check: moments ({:.3e}, {:.3e}, {:.3e}, {:.3e}), "
                                  "tolerance {:.3e}",
                                  m[0], m[1], m[2], m[3], report.compatibility.tolerance));
  }
  const auto wv = node_weights(op.grid(), problem.weight);
  report.spectral_bound = spectral_bound(op);
  const auto& grid = op.grid();
  const Eigen::Index N = static_cast<Eigen::Index>(grid.size());

  std::vector<double> vflux(grid.size());
  {
    const auto psi = raw_invariants(grid);
    for (std::size_t i = 0; i < grid.size(); ++i) vflux[i] = grid.rel(i)[2] * psi[0][i];
  }

  KineticField prev;
  bool have_prev = false;
  for (std::size_t k = 0; k < cfg.d_schedule.size(); ++k) {
    const double d = cfg.d_schedule[k];
    const SlabGrid slab = SlabGrid::make(d, cfg.dx_max);
    const LiftResult lr = lift_boundary(op, problem, slab, cfg.compat_tol);
    if (!lr.pass) {
      const auto& m = lr.moment_residual;
      throw SolverError(fmt::format("lifted source violates the conservation moments at d = {}: ({:.3e}, {:.3e}, "
                                    "{:.3e}, {:.3e})",
                                    d, m[0], m[1], m[2], m[3]));
    }
    SlabSolver solver(op, slab, problem.weight, cfg);
    CellSource src;
    if (problem.source) {
      std::vector<double> buf(grid.size());
      src = project_source(slab, N, [&](double x, Eigen::VectorXd& col) {
        problem.source(x, buf);
        col = Eigen::Map<const Eigen::VectorXd>(buf.data(), N);
      });
    } else {
      src.mean.setZero(N, slab.cells());
      src.slope.setZero(N, slab.cells());
    }
    const SectorSources g = solver.split(src, problem.f_b);
    SlabReport rep;
    rep.d = d;
    const bool cont = cfg.continuation == ContinuationMode::All || (cfg.continuation == ContinuationMode::First && k == 0);
    SlabState pen;
    const SlabState f = limit_eps_n(solver, g, cfg, cont, rep, report, &pen);
    KineticField phys = f.empty() ? KineticField::zero(slab, N) : solver.to_field(f);
    sol.penalized = lift(pen.empty() ? KineticField::zero(slab, N) : solver.to_field(pen), problem.f_b);
    KineticField lifted = lift(phys, problem.f_b);

    // flux and b3 on the unpenalized lifted solution
    double fmin = std::numeric_limits<double>::infinity(), fmax = -fmin;
    for (Eigen::Index c = 0; c < lifted.edge.cols(); ++c) {
      const double fl = op.inner(vflux, std::span<const double>(lifted.edge.col(c).data(), grid.size()));
      fmin = std::min(fmin, fl);
      fmax = std::max(fmax, fl);
    }
    rep.flux_variation = fmax - fmin;
    const MacroProfile mp = extract_macro(op, lifted);
    for (const auto& a : mp.abc) rep.max_b3 = std::max(rep.max_b3, std::abs(a[3]));

    KineticField unshifted = phys;
    const Eigen::VectorXd td = phys.trace_right();
    const ShiftResult sr = compute_shift_phi(op, std::span<const double>(td.data(), grid.size()));
    rep.phi = sr.phi;
    rep.shift_matrix = sr.matrix;
    apply_shift(op, sr.phi, phys);
    const Eigen::VectorXd td2 = phys.trace_right();
    rep.shift_residual = shift_conditions(op, std::span<const double>(td2.data(), grid.size()));

    const DecayFit fit = fit_decay(phys, wv, d / 8.0, d / 2.0);
    rep.sigma_fit = fit.sigma;
    rep.fit_amplitude = fit.amplitude;
    rep.fit_ok = fit.ok;

    if (have_prev) {
      // common points of the nested slabs on [0, d_prev/2]
      std::vector<double> xa, xb;
      Eigen::MatrixXd va, vb;
      prev.point_values(xa, va);
      phys.point_values(xb, vb);
      const double half = 0.5 * prev.slab.d();
      double disc = 0.0;
      std::size_t jb = 0;
      for (std::size_t ia = 0; ia < xa.size() && xa[ia] <= half + 1e-12; ++ia) {
        while (jb < xb.size() && xb[jb] < xa[ia] - 1e-12) ++jb;
        if (jb == xb.size() || std::abs(xb[jb] - xa[ia]) > 1e-12)
          throw std::logic_error("slab grids are not nested across the d schedule");
        for (Eigen::Index i = 0; i < N; ++i)
          disc = std::max(disc, wv[i] * std::abs(vb(i, jb) - va(i, ia)));
      }
      rep.discrepancy = disc;
    }
    report.slabs.push_back(rep);

    prev = phys;
    have_prev = true;
    sol.field = std::move(phys);
    sol.lifted = std::move(lifted);
    sol.unshifted = std::move(unshifted);
    sol.phi = sr.phi;
    sol.fit = fit;
  }

  // flags for the cross-slab properties
  const auto& sl = report.slabs;
  for (std::size_t k = 2; k < sl.size(); ++k)
    if (!(sl[k].discrepancy < sl[k - 1].discrepancy)) report.flags.push_back("discrepancy_not_decreasing");
  if (!sol.fit.trivial) {
    if (!sol.fit.ok) report.flags.push_back("sigma_fit_nonpositive");
    for (std::size_t k = 1; k < sl.size(); ++k)
      if (!(std::abs(sl[k].sigma_fit - sl[k - 1].sigma_fit) <= 0.1 * std::abs(sl[k - 1].sigma_fit)))
        report.flags.push_back(fmt::format("sigma_fit_unstable_d{}", sl[k].d));
  }
  sol.macro = extract_macro(op, sol.field);
  return sol;
}

}  // namespace kbl
