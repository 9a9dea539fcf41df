#include "kbl/field.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kbl/summation.hpp"

namespace kbl {

KineticField KineticField::zero(const SlabGrid& slab, Eigen::Index nv)
{
  KineticField f;
  f.slab = slab;
  const int M = slab.cells();
  f.mean.setZero(nv, M);
  f.slope.setZero(nv, M);
  f.center.setZero(nv, M);
  f.edge.setZero(nv, M + 1);
  return f;
}

std::vector<double> KineticField::sample_x() const
{
  std::vector<double> x;
  x.push_back(0.0);
  for (double c : slab.x_nodes()) x.push_back(c);
  x.push_back(slab.d());
  return x;
}

Eigen::MatrixXd KineticField::samples() const
{
  const int M = slab.cells();
  Eigen::MatrixXd s(nv(), M + 2);
  s.col(0) = edge.col(0);
  s.middleCols(1, M) = center;
  s.col(M + 1) = edge.col(M);
  return s;
}

void KineticField::point_values(std::vector<double>& x, Eigen::MatrixXd& vals) const
{
  const int M = slab.cells();
  x.clear();
  vals.resize(nv(), 2 * M + 1);
  for (int m = 0; m < M; ++m) {
    x.push_back(slab.edges()[m]);
    vals.col(2 * m) = edge.col(m);
    x.push_back(slab.x_nodes()[m]);
    vals.col(2 * m + 1) = center.col(m);
  }
  x.push_back(slab.d());
  vals.col(2 * M) = edge.col(M);
}

KineticField& KineticField::operator+=(const KineticField& o)
{
  mean += o.mean;
  slope += o.slope;
  edge += o.edge;
  center += o.center;
  return *this;
}

KineticField& KineticField::operator*=(double s)
{
  mean *= s;
  slope *= s;
  edge *= s;
  center *= s;
  return *this;
}

std::array<std::vector<double>, 5> raw_invariants(const VelocityGrid& grid)
{
  std::array<std::vector<double>, 5> psi;
  for (auto& p : psi) p.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    const double sm = std::sqrt(maxwellian(c, {0, 0, 0}));
    psi[0][i] = sm;
    psi[1][i] = c[0] * sm;
    psi[2][i] = c[1] * sm;
    psi[3][i] = c[2] * sm;
    psi[4][i] = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - 3.0) * sm;
  }
  return psi;
}

namespace {

struct MacroSolver {
  std::array<std::vector<double>, 5> psi;
  Eigen::Matrix<double, 5, 5> gram_inv;
};

const MacroSolver& macro_solver(const OperatorSet& op)
{
  // one cached solver per grid (keyed by hash)
  thread_local std::uint64_t key = 0;
  thread_local MacroSolver ms;
  if (key != op.grid().hash() || ms.psi[0].size() != op.grid().size()) {
    ms.psi = raw_invariants(op.grid());
    Eigen::Matrix<double, 5, 5> G;
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b) G(a, b) = op.inner(ms.psi[a], ms.psi[b]);
    ms.gram_inv = G.inverse();
    key = op.grid().hash();
  }
  return ms;
}

}  // namespace

std::array<double, 5> macro_coefficients(const OperatorSet& op, const double* f)
{
  const auto& ms = macro_solver(op);
  const std::size_t N = op.grid().size();
  const std::span<const double> fs(f, N);
  Eigen::Matrix<double, 5, 1> mom;
  for (int a = 0; a < 5; ++a) mom[a] = op.inner(fs, ms.psi[a]);
  const Eigen::Matrix<double, 5, 1> c = ms.gram_inv * mom;
  return {c[0], c[1], c[2], c[3], c[4]};
}

MacroProfile extract_macro(const OperatorSet& op, const KineticField& field)
{
  MacroProfile mp;
  mp.x = field.sample_x();
  const Eigen::MatrixXd s = field.samples();
  for (Eigen::Index k = 0; k < s.cols(); ++k) mp.abc.push_back(macro_coefficients(op, s.col(k).data()));
  return mp;
}

double weighted_sup(const KineticField& f, const std::vector<double>& w, double sigma)
{
  std::vector<double> x;
  Eigen::MatrixXd v;
  f.point_values(x, v);
  double s = 0.0;
  for (Eigen::Index k = 0; k < v.cols(); ++k) {
    const double ex = std::exp(sigma * x[k]);
    for (Eigen::Index i = 0; i < v.rows(); ++i) s = std::max(s, ex * w[i] * std::abs(v(i, k)));
  }
  return s;
}

}  // namespace kbl
