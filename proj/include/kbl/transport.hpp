#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace kbl {

// Cell partition of [0, d]. Field values live at the cell centres (the
// interior x nodes); the endpoint traces are kept as separate edge values.
class SlabGrid {
 public:
  SlabGrid() = default;
  explicit SlabGrid(std::vector<double> edges);

  // Uniform cells of width <= dx_max, geometric refinement of the first cell
  // (ratio, levels), and extra break points (inserted when inside (0, d)).
  static SlabGrid make(double d, double dx_max = 1.0 / 16.0, int geo_levels = 8, double ratio = 0.7,
                       std::vector<double> breaks = {1.0, 2.0});

  double d() const { return edges_.back(); }
  int cells() const { return static_cast<int>(edges_.size()) - 1; }
  const std::vector<double>& edges() const { return edges_; }
  const std::vector<double>& x_nodes() const { return centers_; }
  double width(int m) const { return edges_[m + 1] - edges_[m]; }

 private:
  std::vector<double> edges_, centers_;
};

struct ExitPoint {
  double t_b;
  double x_b;
};

// Backward exit time and position for a particle at x moving with v3.
ExitPoint backward_exit(double x, double v3, double d);

struct CycleStep {
  double t;   // time of the k-th boundary hit, measured backward from 0
  double x;   // boundary position
  double v3;  // signed normal speed on the segment leading back from this point
};

struct BackCycle {
  std::vector<CycleStep> steps;
  double period = 0.0;  // d / |v3|
};

// Back-time cycle with specular reflection: t_1 = t_b, t_{k+1} = t_k + d/|v3|,
// x_k alternating between the walls, v3 flipping sign at each hit.
BackCycle build_cycle(double x, double v3, double d, int k_max);

// Closed-form solution of |v3| h' + nu_eps h = alpha + beta t on a cell of
// length `len` (t measured along the direction of travel from the entry edge).
struct CellSolve {
  double exit, mid, mean, moment;  // moment = (12/len^3) int (t - len/2) h dt
  double sq_integral;              // int h^2 dt
};
CellSolve solve_cell(double h_in, double alpha, double beta, double nu_eps, double speed, double len, bool want_sq);

// Cell-wise linear source: rows are velocities, columns are cells.
struct CellSource {
  Eigen::MatrixXd mean, slope;
};

struct SweepResult {
  Eigen::MatrixXd mean, slope;  // L2 projection of h onto linears per cell
  Eigen::MatrixXd edge;         // point values at the cell edges (incl. traces)
  Eigen::MatrixXd center;       // point values at the cell centres
  int max_bounces = 0;
};

// Velocity description for a sweep: rate, normal speed and reflection partner.
struct SweepVelocities {
  std::span<const double> nu;
  std::span<const double> v3;
  std::span<const std::size_t> reflect;
};

// Exact characteristic solution of (eps + v3 d/dx + nu) h = q on the slab with
// h(0, v) = eta h(0, Rv) + b(v) for v3 > 0 and h(d, v) = eta h(d, Rv) + b(v)
// for v3 < 0. Bounces along the back-time cycle are summed until the
// accumulated damping drops below `cycle_tol`.
void sweep(const SlabGrid& slab, const SweepVelocities& vel, double eps, double eta, const CellSource& q,
           const Eigen::VectorXd* boundary_src, SweepResult& out, bool point_values = true,
           double cycle_tol = 1e-14);

// Projects a function of (x, velocity) onto cell-wise linears with a
// 5-point Gauss-Legendre rule per cell; `fn(x, out_column)` fills one column.
template <class Fn>
CellSource project_source(const SlabGrid& slab, Eigen::Index rows, Fn&& fn);

}  // namespace kbl

#include "kbl/transport_impl.hpp"
