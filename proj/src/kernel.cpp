#include "kbl/kernel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace kbl {

void WeightSpec::validate() const
{
  if (!(beta >= 3.0)) throw std::invalid_argument("weight.beta must be >= 3");
  if (!(varsigma >= 0.0 && varsigma < 0.25))
    throw std::invalid_argument("weight.varsigma must lie in [0, 1/4)");
}

double WeightSpec::operator()(const Vec3& v, const Vec3& drift) const
{
  const double v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
  double w = std::pow(1.0 + v2, 0.5 * beta);
  if (varsigma != 0.0) {
    const double d0 = v[0] - drift[0], d1 = v[1] - drift[1], d2 = v[2] - drift[2];
    w *= std::exp(varsigma * (d0 * d0 + d1 * d1 + d2 * d2));
  }
  return w;
}

double collision_frequency(double r)
{
  constexpr double pi = std::numbers::pi;
  const double a = std::sqrt(2.0 / pi);
  if (r < 1e-4) {
    // series of sqrt(2/pi) e^{-r^2/2} + (r + 1/r) erf(r/sqrt 2)
    return 2.0 * pi * a * (2.0 + r * r / 3.0);
  }
  return 2.0 * pi * (a * std::exp(-0.5 * r * r) + (r + 1.0 / r) * std::erf(r / std::numbers::sqrt2));
}

double kernel_gain(const Vec3& c, const Vec3& e)
{
  const double d0 = c[0] - e[0], d1 = c[1] - e[1], d2 = c[2] - e[2];
  const double r2 = d0 * d0 + d1 * d1 + d2 * d2;
  const double c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
  const double e2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
  const double q = e2 - c2;
  return 4.0 / std::sqrt(2.0 * std::numbers::pi) / std::sqrt(r2) *
         std::exp(-0.125 * r2 - q * q / (8.0 * r2));
}

double kernel_loss(const Vec3& c, const Vec3& e)
{
  const double d0 = c[0] - e[0], d1 = c[1] - e[1], d2 = c[2] - e[2];
  const double r = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
  const double c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
  const double e2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
  return r * std::exp(-0.25 * (c2 + e2)) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace kbl
