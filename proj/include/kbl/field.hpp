#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

#include "kbl/collision_operator.hpp"
#include "kbl/transport.hpp"

namespace kbl {

// f(x, v) on a slab. Rows index velocities (full grid), columns index cells
// (mean, slope, center) or cell edges (edge; columns 0 and M are the wall traces).
struct KineticField {
  SlabGrid slab;
  Eigen::MatrixXd mean, slope, edge, center;

  static KineticField zero(const SlabGrid& slab, Eigen::Index nv);
  Eigen::Index nv() const { return mean.rows(); }
  Eigen::VectorXd trace_left() const { return edge.col(0); }
  Eigen::VectorXd trace_right() const { return edge.col(edge.cols() - 1); }

  // Point positions used for profiles and snapshots: 0, the cell centres, d.
  std::vector<double> sample_x() const;
  // Values at sample_x() (velocity rows).
  Eigen::MatrixXd samples() const;
  // all point values (edges and centres) with positions, sorted by x
  void point_values(std::vector<double>& x, Eigen::MatrixXd& vals) const;

  KineticField& operator+=(const KineticField& o);
  KineticField& operator*=(double s);
};

// Hydrodynamic coefficients of P f = [a + b.(v-u) + c(|v-u|^2-3)] sqrt(mu).
struct MacroProfile {
  std::vector<double> x;
  std::vector<std::array<double, 5>> abc;  // a, b1, b2, b3, c
};

// Coefficients (a, b1, b2, b3, c) of P f for one velocity vector.
std::array<double, 5> macro_coefficients(const OperatorSet& op, const double* f);

MacroProfile extract_macro(const OperatorSet& op, const KineticField& field);

// Raw invariants sqrt(mu) * (1, c1, c2, c3, |c|^2 - 3) on the grid.
std::array<std::vector<double>, 5> raw_invariants(const VelocityGrid& grid);

// sup over velocities and all stored points of w |f|, optionally with e^{sigma x}
double weighted_sup(const KineticField& f, const std::vector<double>& w, double sigma = 0.0);

}  // namespace kbl
