#pragma once

#include <cstddef>
#include <span>

namespace kbl {

// Fixed-order pairwise summation. The split points depend only on the length,
// so the result is reproducible for a given input order.
inline double pairwise_sum(std::span<const double> x)
{
  const std::size_t n = x.size();
  if (n <= 16) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(x.first(h)) + pairwise_sum(x.subspan(h));
}

template <class F>
double pairwise_sum_of(std::size_t n, F&& term)
{
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += term(i);
    return s;
  }
  // explicit stack of blocks keeps the recursion order identical to pairwise_sum
  struct Rec {
    static double go(std::size_t lo, std::size_t hi, F& t)
    {
      const std::size_t len = hi - lo;
      if (len <= 16) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += t(i);
        return s;
      }
      const std::size_t mid = lo + len / 2;
      return go(lo, mid, t) + go(mid, hi, t);
    }
  };
  return Rec::go(0, n, term);
}

}  // namespace kbl
