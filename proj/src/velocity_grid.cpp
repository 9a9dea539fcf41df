#include "kbl/velocity_grid.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "kbl/summation.hpp"

namespace kbl {

std::string to_string(QuadRule r)
{
  return r == QuadRule::GaussHermite ? "gauss_hermite" : "uniform";
}

QuadRule parse_quad_rule(const std::string& s)
{
  if (s == "gauss_hermite") return QuadRule::GaussHermite;
  if (s == "uniform" || s == "trapezoid") return QuadRule::Uniform;
  throw std::invalid_argument("unknown quadrature rule '" + s + "'");
}

void GridSpec::validate() const
{
  if (!(v_max > 0.0)) throw std::invalid_argument("grid.v_max must be positive");
  if (n_per_axis < 4) throw std::invalid_argument("grid.n_per_axis must be at least 4");
  if (n_per_axis % 2 != 0)
    throw std::invalid_argument("grid.n_per_axis must be even (an odd count puts nodes on v3 = 0)");
  if (drift[2] != 0.0) throw std::invalid_argument("grid.drift third component must be exactly 0");
}

namespace {

// Nodes of a symmetric Jacobi matrix with zero diagonal, polished by Newton on
// the orthonormal recurrence, and Christoffel weights 1 / sum_k q_k(x)^2.
// `beta(k)` is the k-th off-diagonal entry; `damp(x)` multiplies q_0 so the
// recurrence carries the square root of the weight function.
template <class Beta, class Damp>
void symmetric_gauss(int n, Beta beta, Damp damp, std::vector<double>& x, std::vector<double>& lam)
{
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n - 1; ++k) J(k, k + 1) = J(k + 1, k) = beta(k + 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(J, Eigen::EigenvaluesOnly);
  x.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + n);

  auto eval = [&](double t, double& p, double& dp) {
    // orthonormal recurrence p_{k+1} = (t p_k - b_k p_{k-1}) / b_{k+1}
    double pm = 0.0, pk = 1.0, dpm = 0.0, dpk = 0.0;
    for (int k = 0; k < n; ++k) {
      const double bk = k == 0 ? 0.0 : beta(k);
      const double bn = beta(k + 1);
      const double pn = (t * pk - bk * pm) / bn;
      const double dpn = (pk + t * dpk - bk * dpm) / bn;
      pm = pk;
      pk = pn;
      dpm = dpk;
      dpk = dpn;
    }
    p = pk;
    dp = dpk;
  };
  for (double& t : x) {
    for (int it = 0; it < 3; ++it) {
      double p, dp;
      eval(t, p, dp);
      if (dp == 0.0) break;
      t -= p / dp;
    }
  }
  // symmetrize exactly
  for (int i = 0; i < n / 2; ++i) {
    const double s = 0.5 * (x[n - 1 - i] - x[i]);
    x[i] = -s;
    x[n - 1 - i] = s;
  }
  if (n % 2 == 1) x[n / 2] = 0.0;

  lam.resize(n);
  for (int i = 0; i < n; ++i) {
    const double t = x[i];
    double qm = 0.0, qk = damp(t), s = qk * qk;
    for (int k = 0; k < n - 1; ++k) {
      const double bk = k == 0 ? 0.0 : beta(k);
      const double qn = (t * qk - bk * qm) / beta(k + 1);
      qm = qk;
      qk = qn;
      s += qk * qk;
    }
    lam[i] = 1.0 / s;
  }
  for (int i = 0; i < n / 2; ++i) lam[i] = lam[n - 1 - i] = 0.5 * (lam[i] + lam[n - 1 - i]);
}

}  // namespace

void gauss_hermite_prob(int n, std::vector<double>& x, std::vector<double>& w)
{
  std::vector<double> lam;
  symmetric_gauss(
      n, [](int k) { return std::sqrt(static_cast<double>(k)); }, [](double) { return 1.0; }, x, lam);
  w.resize(n);
  const double s2pi = std::sqrt(2.0 * std::numbers::pi);
  for (int i = 0; i < n; ++i) w[i] = s2pi * lam[i];
}

void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w)
{
  std::vector<double> lam;
  symmetric_gauss(
      n,
      [](int k) {
        const double kk = k;
        return kk / std::sqrt(4.0 * kk * kk - 1.0);
      },
      [](double) { return 1.0; }, x, lam);
  w.resize(n);
  for (int i = 0; i < n; ++i) w[i] = 2.0 * lam[i];
}

namespace {

// Gauss-Hermite nodes with weights for plain integration against functions
// that carry their own Gaussian factor: w_i = sqrt(2 pi) / sum_k (q_k e^{-x^2/4})^2.
void gauss_hermite_plain(int n, std::vector<double>& x, std::vector<double>& w)
{
  std::vector<double> lam;
  symmetric_gauss(
      n, [](int k) { return std::sqrt(static_cast<double>(k)); },
      [](double t) { return std::exp(-0.25 * t * t); }, x, lam);
  w.resize(n);
  const double s2pi = std::sqrt(2.0 * std::numbers::pi);
  for (int i = 0; i < n; ++i) w[i] = s2pi * lam[i];
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h)
{
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

VelocityGrid::VelocityGrid(const GridSpec& spec) : spec_(spec), n_(spec.n_per_axis)
{
  spec_.validate();
  if (spec_.rule == QuadRule::GaussHermite) {
    gauss_hermite_plain(n_, axis_t_, axis_w_);
  } else {
    const double h = 2.0 * spec_.v_max / n_;
    axis_t_.resize(n_);
    axis_w_.assign(n_, h);
    for (int k = 0; k < n_ / 2; ++k) {
      const double t = spec_.v_max - (k + 0.5) * h;
      axis_t_[n_ - 1 - k] = t;
      axis_t_[k] = -t;
    }
  }

  const std::size_t N = static_cast<std::size_t>(n_) * n_ * n_;
  rel_.resize(N);
  vel_.resize(N);
  w_.resize(N);
  reflect_.resize(N);
  for (int a = 0; a < n_; ++a)
    for (int b = 0; b < n_; ++b)
      for (int c = 0; c < n_; ++c) {
        const std::size_t i = index(a, b, c);
        rel_[i] = {axis_t_[a], axis_t_[b], axis_t_[c]};
        vel_[i] = {spec_.drift[0] + axis_t_[a], spec_.drift[1] + axis_t_[b], axis_t_[c]};
        w_[i] = axis_w_[a] * axis_w_[b] * axis_w_[c];
        reflect_[i] = index(a, b, n_ - 1 - c);
      }

  std::uint64_t h = fnv1a(&n_, sizeof n_);
  const int rule = spec_.rule == QuadRule::GaussHermite ? 1 : 2;
  h = fnv1a(&rule, sizeof rule, h);
  for (std::size_t i = 0; i < N; ++i) {
    h = fnv1a(vel_[i].data(), sizeof(double) * 3, h);
    h = fnv1a(&w_[i], sizeof(double), h);
  }
  hash_ = h;
}

double VelocityGrid::tail_mass() const
{
  std::vector<double> m(size());
  for (std::size_t i = 0; i < size(); ++i) m[i] = maxwellian(vel_[i], spec_.drift);
  return 1.0 - quad(*this, m);
}

VelocityGrid build_grid(const GridSpec& spec) { return VelocityGrid(spec); }

double quad(const VelocityGrid& grid, std::span<const double> samples)
{
  if (samples.size() != grid.size())
    throw std::invalid_argument("quad: sample count does not match the grid");
  const auto w = grid.weights();
  return pairwise_sum_of(samples.size(), [&](std::size_t i) { return w[i] * samples[i]; });
}

double maxwellian(const Vec3& v, const Vec3& drift)
{
  const double d0 = v[0] - drift[0], d1 = v[1] - drift[1], d2 = v[2] - drift[2];
  return std::pow(2.0 * std::numbers::pi, -1.5) * std::exp(-0.5 * (d0 * d0 + d1 * d1 + d2 * d2));
}

ParitySectors::ParitySectors(const VelocityGrid& grid)
{
  const int n = grid.n_axis();
  const int h = n / 2;
  for (int a = h; a < n; ++a)
    for (int b = h; b < n; ++b)
      for (int c = 0; c < n; ++c) base_.push_back(grid.index(a, b, c));
  img_.resize(base_.size() * 4);
  reflect_.resize(base_.size());
  std::size_t j = 0;
  for (int a = h; a < n; ++a)
    for (int b = h; b < n; ++b)
      for (int c = 0; c < n; ++c, ++j) {
        for (int r = 0; r < 4; ++r) {
          const int aa = (r & 1) ? n - 1 - a : a;
          const int bb = (r & 2) ? n - 1 - b : b;
          img_[j * 4 + r] = grid.index(aa, bb, c);
        }
        reflect_[j] = j - c + (n - 1 - c);
      }
}

void ParitySectors::restrict_to(int sector, std::span<const double> full, std::span<double> out) const
{
  for (std::size_t j = 0; j < base_.size(); ++j) {
    double s = 0.0;
    for (int r = 0; r < 4; ++r) s += sign(sector, r) * full[img_[j * 4 + r]];
    out[j] = 0.25 * s;
  }
}

void ParitySectors::add_from(int sector, std::span<const double> part, std::span<double> full) const
{
  for (std::size_t j = 0; j < base_.size(); ++j)
    for (int r = 0; r < 4; ++r) full[img_[j * 4 + r]] += sign(sector, r) * part[j];
}

}  // namespace kbl
