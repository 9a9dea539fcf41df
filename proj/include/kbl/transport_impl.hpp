#pragma once

namespace kbl {

namespace detail {
// 5-point Gauss-Legendre on [-1/2, 1/2]
inline constexpr double kGl5x[5] = {-0.45308992296933199640, -0.26923465505284154552, 0.0,
                                    0.26923465505284154552, 0.45308992296933199640};
inline constexpr double kGl5w[5] = {0.11846344252809454376, 0.23931433524968323402, 0.28444444444444444444,
                                    0.23931433524968323402, 0.11846344252809454376};
}  // namespace detail

template <class Fn>
CellSource project_source(const SlabGrid& slab, Eigen::Index rows, Fn&& fn)
{
  const int M = slab.cells();
  CellSource q;
  q.mean.setZero(rows, M);
  q.slope.setZero(rows, M);
  Eigen::VectorXd col(rows);
  for (int m = 0; m < M; ++m) {
    const double h = slab.width(m), c = slab.x_nodes()[m];
    for (int k = 0; k < 5; ++k) {
      fn(c + detail::kGl5x[k] * h, col);
      q.mean.col(m) += detail::kGl5w[k] * col;
      q.slope.col(m) += (12.0 / h) * detail::kGl5w[k] * detail::kGl5x[k] * col;
    }
  }
  return q;
}

}  // namespace kbl
