#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kbl {

using Vec3 = std::array<double, 3>;

enum class QuadRule { GaussHermite, Uniform };

std::string to_string(QuadRule r);
QuadRule parse_quad_rule(const std::string& s);

struct GridSpec {
  double v_max = 6.0;
  int n_per_axis = 16;
  QuadRule rule = QuadRule::GaussHermite;
  Vec3 drift{0.0, 0.0, 0.0};

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Tensor-product velocity grid centred on the drift in the two tangential
// directions. Node i has axis indices (a, b, c) with i = (a*n + b)*n + c.
// Axis nodes are symmetric about zero, so reflection in any axis is an exact
// index permutation.
class VelocityGrid {
 public:
  explicit VelocityGrid(const GridSpec& spec);

  const GridSpec& spec() const { return spec_; }
  int n_axis() const { return n_; }
  std::size_t size() const { return w_.size(); }

  // velocity relative to the drift (exact +-t values)
  const Vec3& rel(std::size_t i) const { return rel_[i]; }
  // absolute velocity v = drift + rel
  const Vec3& vel(std::size_t i) const { return vel_[i]; }
  double weight(std::size_t i) const { return w_[i]; }
  std::span<const double> weights() const { return w_; }
  std::size_t reflect(std::size_t i) const { return reflect_[i]; }

  const std::vector<double>& axis_nodes() const { return axis_t_; }
  const std::vector<double>& axis_weights() const { return axis_w_; }

  std::size_t index(int a, int b, int c) const
  {
    return (static_cast<std::size_t>(a) * n_ + b) * n_ + c;
  }
  std::array<int, 3> axes(std::size_t i) const
  {
    const int c = static_cast<int>(i % n_);
    const int b = static_cast<int>((i / n_) % n_);
    const int a = static_cast<int>(i / (static_cast<std::size_t>(n_) * n_));
    return {a, b, c};
  }

  // 64-bit digest of nodes and weights
  std::uint64_t hash() const { return hash_; }

  // 1 - quad(mu): Maxwellian mass not captured by the rule
  double tail_mass() const;

 private:
  GridSpec spec_;
  int n_;
  std::vector<double> axis_t_, axis_w_;
  std::vector<Vec3> rel_, vel_;
  std::vector<double> w_;
  std::vector<std::size_t> reflect_;
  std::uint64_t hash_ = 0;
};

VelocityGrid build_grid(const GridSpec& spec);

// sum_i w_i s_i in fixed pairwise order
double quad(const VelocityGrid& grid, std::span<const double> samples);

double maxwellian(const Vec3& v, const Vec3& drift);

// Gauss-Hermite rule for the weight exp(-x^2/2) on the real line
// (Golub-Welsch). Returns nodes ascending and weights summing to sqrt(2 pi).
void gauss_hermite_prob(int n, std::vector<double>& x, std::vector<double>& w);

// Gauss-Legendre rule on [-1, 1].
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w);

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ULL);

// Decomposition of velocity space into the four parity classes under
// v1-u1 -> -(v1-u1) and v2-u2 -> -(v2-u2). Every operator in the solver
// commutes with both reflections, so each class can be treated on its own.
class ParitySectors {
 public:
  explicit ParitySectors(const VelocityGrid& grid);

  std::size_t sector_size() const { return base_.size(); }
  // full index of base node j after applying reflection r (bit0: axis 1, bit1: axis 2)
  std::size_t image(std::size_t j, int r) const { return img_[j * 4 + r]; }
  static double sign(int sector, int r)
  {
    double s = 1.0;
    if ((sector & 1) && (r & 1)) s = -s;
    if ((sector & 2) && (r & 2)) s = -s;
    return s;
  }
  // component of f in the sector, as values on the base nodes
  void restrict_to(int sector, std::span<const double> full, std::span<double> out) const;
  // adds the sector function to a full vector
  void add_from(int sector, std::span<const double> part, std::span<double> full) const;
  // reflection-partner index inside the sector (v3 -> -v3)
  std::size_t reflect(std::size_t j) const { return reflect_[j]; }
  std::size_t base_index(std::size_t j) const { return base_[j]; }

 private:
  std::vector<std::size_t> base_, img_, reflect_;
};

}  // namespace kbl
