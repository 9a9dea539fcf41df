#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "kbl/collision_operator.hpp"

namespace kbl {

// Bilinear collision term Gamma(f, g)(v) = int int |(v-u).w| sqrt(mu(u)) [f(u') g(v') - f(u) g(v)] dw du
// by direct quadrature in weak form: every pair of grid nodes (v, u) and every
// w of a product rule on the sphere (uniform azimuth x Gauss-Legendre in
// cos theta) is one collision event. Its loss sits on the node v and its gain
// on v' is spread over the 3x3x3 block of nodes around v' with tensor-product
// quadratic Lagrange weights. Those weights reproduce 1, v and |v|^2 exactly,
// so quad(sqrt(mu) psi Gamma(f, f)) vanishes to rounding for every collision
// invariant psi. Events whose v' or u' leave the grid box are dropped whole.
// operator() and batch() additionally project onto N-perp, which then only
// removes rounding.
class CollisionGamma {
 public:
  CollisionGamma(const OperatorSet& op, int n_azimuth = 16, int n_polar = 8);

  std::vector<double> operator()(std::span<const double> f, std::span<const double> g) const;
  std::vector<double> raw(std::span<const double> f, std::span<const double> g) const;

  // Stores Gamma as N matrices of size N x N (N^3 doubles). Returns false and
  // leaves the evaluator matrix-free if that exceeds `max_bytes`.
  bool build_tensor(std::size_t max_bytes);
  bool has_tensor() const { return !tensor_.empty(); }

  // Column-wise Gamma(F_k, G_k) for N x M matrices, projected.
  Eigen::MatrixXd batch(const Eigen::MatrixXd& F, const Eigen::MatrixXd& G) const;
  // same without the projection onto N-perp
  Eigen::MatrixXd batch_raw(const Eigen::MatrixXd& F, const Eigen::MatrixXd& G) const;
  // Column-wise Gamma(F,F), Gamma(S,S) and Gamma(F,S)+Gamma(S,F) in one pass.
  void batch_pair(const Eigen::MatrixXd& F, const Eigen::MatrixXd& S, Eigen::MatrixXd& FF, Eigen::MatrixXd& SS,
                  Eigen::MatrixXd& FS) const;

  const OperatorSet& op() const { return *op_; }

 private:
  struct Stencil {
    int idx[27];
    double w[27];
    bool inside;
  };
  Stencil locate(const Vec3& c) const;
  void project(Eigen::MatrixXd& X) const;
  template <class Visit>
  void for_each_collision(std::size_t a, Visit&& visit) const;

  const OperatorSet* op_;
  std::vector<Vec3> omega_;
  std::vector<double> omega_w_;
  std::vector<double> sqmu_;
  std::vector<double> inv_;  // 1 / (w_i sqrt(mu_i))
  std::vector<Eigen::MatrixXd> tensor_;
};

}  // namespace kbl
