#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kbl/kernel.hpp"
#include "kbl/velocity_grid.hpp"

namespace kbl {

// One parity class of the linearized operator, in scaled coordinates
// y_j = sqrt(4 w_j) f_j on the base nodes, where the quadrature inner
// product of the full space becomes the Euclidean one.
struct SectorBlock {
  int sector = 0;
  Eigen::VectorXd nu;     // collision frequency on base nodes
  Eigen::VectorXd scale;  // sqrt(4 w_j)
  Eigen::MatrixXd K;      // symmetric compact part
  Eigen::MatrixXd Q;      // orthonormal collision invariants of this class (may have 0 columns)
  Eigen::LLT<Eigen::MatrixXd> Lreg;  // factor of L + Q Q^T

  Eigen::Index size() const { return nu.size(); }
  Eigen::MatrixXd L() const;
};

struct AssemblyStats {
  double raw_symmetry_defect = 0.0;  // max |K - K^T| before symmetrization
  double raw_null_defect = 0.0;      // max |L_raw psi| over normalized invariants, before projection
  double kernel_bound_constant = 0.0;  // measured constant of the Grad kernel bound
  double row_sum_bound = 0.0;          // max_i (1+|v_i|) sum_j |k(v_i,v_j)| w_j
};

class OperatorSet {
 public:
  // Assembles nu, K, P and the constrained inverse on the given grid.
  static OperatorSet assemble(const VelocityGrid& grid);

  const VelocityGrid& grid() const { return *grid_; }
  std::shared_ptr<const VelocityGrid> grid_ptr() const { return grid_; }
  const ParitySectors& sectors() const { return *sectors_; }
  const SectorBlock& block(int s) const { return blocks_[s]; }

  const std::vector<double>& nu() const { return nu_; }
  // orthonormal (under quad) invariants: sqrt(mu), c1 sqrt(mu), c2 sqrt(mu), c3 sqrt(mu), (|c|^2-3) sqrt(mu) orthogonalized
  const std::array<std::vector<double>, 5>& P_basis() const { return basis_; }

  double nu0() const { return nu0_; }
  double nu1() const { return nu1_; }
  double kappa1() const { return kappa1_; }
  double kappa2() const { return kappa2_; }
  double c0() const { return c0_; }
  const AssemblyStats& stats() const { return stats_; }

  std::vector<double> apply_K(std::span<const double> f) const;
  std::vector<double> apply_L(std::span<const double> f) const;
  std::vector<double> project_P(std::span<const double> f) const;
  // returns u with L u = h, P u = 0; throws if |P h| exceeds rel_tol |h|
  std::vector<double> solve_L_inv(std::span<const double> h, double rel_tol = 1e-8) const;

  // quad inner product and norms
  double inner(std::span<const double> f, std::span<const double> g) const;
  double nu_norm(std::span<const double> f) const;

  // Smallest generalized eigenvalue of L against nu on N-perp.
  double estimate_coercivity() const;
  // Smallest `count` eigenvalues of L (quad inner product), over all classes, ascending.
  std::vector<double> lowest_eigenvalues(int count) const;

  // discretized tensors used by the shift system
  std::vector<double> A31() const;  // c3 c1 sqrt(mu)
  std::vector<double> A32() const;  // c3 c2 sqrt(mu)
  std::vector<double> B3() const;   // c3 (|c|^2 - 5) sqrt(mu)

  // cache support
  void save(const std::string& path, std::uint64_t key_extra) const;
  static OperatorSet load(const std::string& path, const VelocityGrid& grid, std::uint64_t key_extra);

 private:
  OperatorSet() = default;
  void finalize();

  std::shared_ptr<const VelocityGrid> grid_;
  std::shared_ptr<const ParitySectors> sectors_;
  std::array<SectorBlock, 4> blocks_;
  std::vector<double> nu_;
  std::array<std::vector<double>, 5> basis_;
  double nu0_ = 0, nu1_ = 0, kappa1_ = 0, kappa2_ = 0, c0_ = 0;
  AssemblyStats stats_;
};

// Smallest eigenvalue of a symmetric operator given by its action, via
// Lanczos with full reorthogonalization.
double lanczos_smallest(const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>& apply,
                        Eigen::Index dim, int steps);

}  // namespace kbl
