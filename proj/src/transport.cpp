#include "kbl/transport.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kbl/parallel.hpp"

namespace kbl {

SlabGrid::SlabGrid(std::vector<double> edges) : edges_(std::move(edges))
{
  if (edges_.size() < 2 || edges_.front() != 0.0) throw std::invalid_argument("slab edges must start at 0");
  for (std::size_t k = 1; k < edges_.size(); ++k)
    if (!(edges_[k] > edges_[k - 1])) throw std::invalid_argument("slab edges must increase strictly");
  if (edges_.back() < 1.0) throw std::invalid_argument("slab length d must be >= 1");
  centers_.resize(edges_.size() - 1);
  for (std::size_t k = 0; k + 1 < edges_.size(); ++k) centers_[k] = 0.5 * (edges_[k] + edges_[k + 1]);
}

SlabGrid SlabGrid::make(double d, double dx_max, int geo_levels, double ratio, std::vector<double> breaks)
{
  if (!(d >= 1.0)) throw std::invalid_argument("slab length d must be >= 1");
  if (!(dx_max > 0.0)) throw std::invalid_argument("dx_max must be positive");
  const int cells = static_cast<int>(std::ceil(d / dx_max - 1e-9));
  const double h = d / cells;
  std::vector<double> e;
  e.push_back(0.0);
  for (int k = geo_levels; k >= 1; --k) e.push_back(h * std::pow(ratio, k));
  for (int k = 1; k <= cells; ++k) e.push_back(k == cells ? d : h * k);
  for (double b : breaks) {
    if (b <= 0.0 || b >= d) continue;
    const bool present = std::any_of(e.begin(), e.end(), [&](double x) { return std::abs(x - b) < 1e-12 * d; });
    if (!present) e.push_back(b);
  }
  std::sort(e.begin(), e.end());
  // snap break points that coincide with uniform edges to the exact value
  for (double& x : e)
    for (double b : breaks)
      if (std::abs(x - b) < 1e-12 * d) x = b;
  return SlabGrid(std::move(e));
}

ExitPoint backward_exit(double x, double v3, double d)
{
  if (v3 == 0.0) throw std::invalid_argument("backward_exit: grazing velocity v3 = 0");
  if (x < 0.0 || x > d) throw std::invalid_argument("backward_exit: x outside [0, d]");
  if (v3 > 0.0) return {x / v3, 0.0};
  return {(d - x) / (-v3), d};
}

BackCycle build_cycle(double x, double v3, double d, int k_max)
{
  if (k_max < 1) throw std::invalid_argument("build_cycle: k_max must be >= 1");
  const ExitPoint ex = backward_exit(x, v3, d);
  BackCycle cyc;
  cyc.period = d / std::abs(v3);
  double t = ex.t_b, xb = ex.x_b, s = v3;
  for (int k = 1; k <= k_max; ++k) {
    cyc.steps.push_back({t, xb, s});
    t += cyc.period;
    xb = d - xb;
    s = -s;
  }
  return cyc;
}

namespace {

double phi1(double z)
{
  if (z < 1e-8) return 1.0 - 0.5 * z;
  return -std::expm1(-z) / z;
}

// int_0^1 (s - 1/2) e^{-z s} ds
double phi2(double z)
{
  if (z < 0.5) {
    double term = 1.0, s = 0.0;
    for (int k = 1; k < 30; ++k) {
      term *= -z / k;
      s += term * k / (2.0 * (k + 1) * (k + 2));
    }
    return s;
  }
  const double e = std::exp(-z);
  return (1.0 - e * (1.0 + z)) / (z * z) - 0.5 * phi1(z);
}

}  // namespace

CellSolve solve_cell(double h_in, double alpha, double beta, double nu_eps, double speed, double len, bool want_sq)
{
  const double kappa = nu_eps / speed;
  const double z = kappa * len;
  const double B = beta / nu_eps;
  const double A = alpha / nu_eps - beta * speed / (nu_eps * nu_eps);
  const double c = h_in - A;
  CellSolve r{};
  const double p1 = phi1(z), p2 = phi2(z);
  r.exit = c * std::exp(-z) + A + B * len;
  r.mid = c * std::exp(-0.5 * z) + A + 0.5 * B * len;
  r.mean = A + 0.5 * B * len + c * p1;
  r.moment = 12.0 * c * p2 / len + B;
  if (want_sq) {
    const double ie = len * p1;
    const double ite = len * len * (p2 + 0.5 * p1);
    r.sq_integral = c * c * len * phi1(2.0 * z) + 2.0 * c * (A * ie + B * ite) + A * A * len + A * B * len * len +
                    B * B * len * len * len / 3.0;
  }
  return r;
}

void sweep(const SlabGrid& slab, const SweepVelocities& vel, double eps, double eta, const CellSource& q,
           const Eigen::VectorXd* boundary_src, SweepResult& out, bool point_values, double cycle_tol)
{
  const Eigen::Index nv = static_cast<Eigen::Index>(vel.nu.size());
  const int M = slab.cells();
  if (q.mean.rows() != nv || q.mean.cols() != M || q.slope.rows() != nv || q.slope.cols() != M)
    throw std::invalid_argument("sweep: source shape mismatch");
  if (!q.mean.allFinite() || !q.slope.allFinite()) throw std::invalid_argument("sweep: non-finite source");
  if (eps < 0.0 || !(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("sweep: need eps >= 0, eta in [0, 1]");
  out.mean.resize(nv, M);
  out.slope.resize(nv, M);
  if (point_values) {
    out.edge.resize(nv, M + 1);
    out.center.resize(nv, M);
  }

  std::vector<Eigen::Index> pos;
  for (Eigen::Index j = 0; j < nv; ++j)
    if (vel.v3[j] > 0.0) pos.push_back(j);
  std::vector<int> bounces(pos.size(), 0);

  parallel_for(pos.size(), [&](std::size_t k) {
    const Eigen::Index p = pos[k];
    const Eigen::Index r = static_cast<Eigen::Index>(vel.reflect[p]);
    const double speed = vel.v3[p];
    const double ne = vel.nu[p] + eps;

    auto run_forward = [&](double h, bool store) {
      for (int m = 0; m < M; ++m) {
        const double len = slab.width(m);
        const double qs = q.slope(p, m);
        const CellSolve cs = solve_cell(h, q.mean(p, m) - 0.5 * qs * len, qs, ne, speed, len, false);
        if (store) {
          out.mean(p, m) = cs.mean;
          out.slope(p, m) = cs.moment;
          if (point_values) {
            out.edge(p, m) = h;
            out.center(p, m) = cs.mid;
          }
        }
        h = cs.exit;
      }
      if (store && point_values) out.edge(p, M) = h;
      return h;
    };
    auto run_backward = [&](double h, bool store) {
      for (int m = M - 1; m >= 0; --m) {
        const double len = slab.width(m);
        const double qs = q.slope(r, m);
        const CellSolve cs = solve_cell(h, q.mean(r, m) + 0.5 * qs * len, -qs, ne, speed, len, false);
        if (store) {
          out.mean(r, m) = cs.mean;
          out.slope(r, m) = -cs.moment;
          if (point_values) {
            out.edge(r, m + 1) = h;
            out.center(r, m) = cs.mid;
          }
        }
        h = cs.exit;
      }
      if (store && point_values) out.edge(r, 0) = h;
      return h;
    };

    const double Pp = run_forward(0.0, false);
    const double Pm = run_backward(0.0, false);
    const double T = std::exp(-ne * slab.d() / speed);
    const double b0 = boundary_src ? (*boundary_src)[p] : 0.0;
    const double bd = boundary_src ? (*boundary_src)[r] : 0.0;

    // one round trip along the back cycle multiplies the carried value by (eta T)^2
    const double rho = eta * eta * T * T;
    const double s0 = eta * eta * T * Pp + eta * T * bd + eta * Pm + b0;
    double alpha_p = 0.0, weight = 1.0;
    int n = 0;
    while (true) {
      alpha_p += weight * s0;
      weight *= rho;
      n += 2;
      if (weight < cycle_tol || n > 100000000) break;
    }
    bounces[k] = n;
    const double alpha_m = eta * (T * alpha_p + Pp) + bd;
    run_forward(alpha_p, true);
    run_backward(alpha_m, true);
  });
  out.max_bounces = bounces.empty() ? 0 : *std::max_element(bounces.begin(), bounces.end());
}

}  // namespace kbl
