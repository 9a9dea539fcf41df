#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <vector>

#include "kbl/collision_operator.hpp"
#include "kbl/velocity_grid.hpp"

namespace kbl::test {

// Assembled once per test binary and grid size.
inline const OperatorSet& shared_operator(int n)
{
  static std::map<int, std::unique_ptr<OperatorSet>> cache;
  auto& slot = cache[n];
  if (!slot) {
    GridSpec s;
    s.n_per_axis = n;
    slot = std::make_unique<OperatorSet>(OperatorSet::assemble(VelocityGrid(s)));
  }
  return *slot;
}

inline double norm2(const Vec3& c) { return c[0] * c[0] + c[1] * c[1] + c[2] * c[2]; }

inline double sqrt_mu(const Vec3& c) { return std::pow(2.0 * M_PI, -0.75) * std::exp(-0.25 * norm2(c)); }

// Random cubic polynomial in c times sqrt(mu): smooth, decaying, all parity classes.
inline std::vector<double> random_smooth(const VelocityGrid& grid, std::mt19937_64& rng)
{
  std::normal_distribution<double> g;
  double a[20];
  for (double& x : a) x = g(rng);
  std::vector<double> f(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Vec3& c = grid.rel(i);
    const double x = c[0], y = c[1], z = c[2];
    const double p = a[0] + a[1] * x + a[2] * y + a[3] * z + a[4] * x * x + a[5] * y * y + a[6] * z * z +
                     a[7] * x * y + a[8] * x * z + a[9] * y * z + a[10] * x * x * x + a[11] * y * y * y +
                     a[12] * z * z * z + a[13] * x * y * z + a[14] * x * x * y + a[15] * x * x * z +
                     a[16] * y * y * x + a[17] * y * y * z + a[18] * z * z * x + a[19] * z * z * y;
    f[i] = p * sqrt_mu(c);
  }
  return f;
}

// Independent normal values per node scaled by sqrt(mu)^(1/2): rough but bounded.
inline std::vector<double> random_rough(const VelocityGrid& grid, std::mt19937_64& rng)
{
  std::normal_distribution<double> g;
  std::vector<double> f(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) f[i] = g(rng) * std::exp(-0.125 * norm2(grid.rel(i)));
  return f;
}

}  // namespace kbl::test
