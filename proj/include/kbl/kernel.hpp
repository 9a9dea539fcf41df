#pragma once

#include "kbl/velocity_grid.hpp"

namespace kbl {

// Bumped whenever the discrete operator assembly changes; part of the cache key.
inline constexpr int kKernelVersion = 3;

struct WeightSpec {
  double beta = 3.0;
  double varsigma = 0.0;

  void validate() const;
  // (1+|v|^2)^{beta/2} exp(varsigma |v-u|^2)
  double operator()(const Vec3& v, const Vec3& drift) const;
};

// Hard-sphere collision frequency as a function of r = |v - u|:
// 2 pi E|v - u - Z| with Z standard normal.
double collision_frequency(double r);

// Integral kernels of the compact part, in velocities relative to the drift.
// Gain part (two equal terms, reduced over the collision sphere):
//   4/sqrt(2 pi) / |c-e| * exp(-|c-e|^2/8 - (|e|^2-|c|^2)^2 / (8|c-e|^2))
double kernel_gain(const Vec3& c, const Vec3& e);
// Loss part: |c-e| exp(-(|c|^2+|e|^2)/4) / sqrt(2 pi)
double kernel_loss(const Vec3& c, const Vec3& e);
// k = gain - loss, so that L f = nu f - int k(., e) f(e) de
inline double kernel_k(const Vec3& c, const Vec3& e) { return kernel_gain(c, e) - kernel_loss(c, e); }

}  // namespace kbl
