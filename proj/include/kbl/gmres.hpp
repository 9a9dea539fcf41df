#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace kbl {

struct GmresStats {
  int iterations = 0;
  double rel_residual = 0.0;
  bool converged = false;
  std::vector<double> history;  // relative residual after each inner step
};

// Restarted GMRES for A x = b with modified Gram-Schmidt (applied twice).
// `apply(x, y)` computes y = A x. x holds the initial guess on entry.
template <class Apply>
GmresStats gmres(Apply&& apply, const Eigen::VectorXd& b, Eigen::VectorXd& x, int restart, int max_iter,
                 double rel_tol)
{
  GmresStats st;
  const Eigen::Index n = b.size();
  const double bnorm = b.norm();
  if (x.size() != n) x.setZero(n);
  if (bnorm == 0.0) {
    x.setZero();
    st.converged = true;
    return st;
  }
  Eigen::MatrixXd V(n, restart + 1);
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(restart + 1, restart);
  Eigen::VectorXd cs(restart), sn(restart), gvec(restart + 1), w(n), r(n);

  while (st.iterations < max_iter) {
    apply(x, r);
    r = b - r;
    double beta = r.norm();
    st.rel_residual = beta / bnorm;
    if (st.rel_residual <= rel_tol) {
      st.converged = true;
      return st;
    }
    V.col(0) = r / beta;
    gvec.setZero();
    gvec[0] = beta;
    int k = 0;
    for (; k < restart && st.iterations < max_iter; ++k) {
      apply(V.col(k), w);
      for (int pass = 0; pass < 2; ++pass)
        for (int j = 0; j <= k; ++j) {
          const double h = V.col(j).dot(w);
          H(j, k) += h;
          w -= h * V.col(j);
        }
      H(k + 1, k) = w.norm();
      if (H(k + 1, k) > 0.0) V.col(k + 1) = w / H(k + 1, k);
      for (int j = 0; j < k; ++j) {
        const double t = cs[j] * H(j, k) + sn[j] * H(j + 1, k);
        H(j + 1, k) = -sn[j] * H(j, k) + cs[j] * H(j + 1, k);
        H(j, k) = t;
      }
      const double den = std::hypot(H(k, k), H(k + 1, k));
      cs[k] = den == 0.0 ? 1.0 : H(k, k) / den;
      sn[k] = den == 0.0 ? 0.0 : H(k + 1, k) / den;
      H(k, k) = den;
      H(k + 1, k) = 0.0;
      gvec[k + 1] = -sn[k] * gvec[k];
      gvec[k] = cs[k] * gvec[k];
      ++st.iterations;
      st.rel_residual = std::abs(gvec[k + 1]) / bnorm;
      st.history.push_back(st.rel_residual);
      if (st.rel_residual <= rel_tol || den == 0.0) {
        ++k;
        break;
      }
    }
    // back substitution on the leading k x k triangle
    Eigen::VectorXd y = H.topLeftCorner(k, k).triangularView<Eigen::Upper>().solve(gvec.head(k));
    x += V.leftCols(k) * y;
    H.setZero();
  }
  apply(x, r);
  st.rel_residual = (b - r).norm() / bnorm;
  st.converged = st.rel_residual <= rel_tol;
  return st;
}

}  // namespace kbl

namespace kbl {

// Fixed augmentation space for GMRES: A U = C with C orthonormal.
struct Augmentation {
  Eigen::MatrixXd C, U;
};

// Builds C, U from a (not necessarily independent) basis Z; columns whose
// images are numerically dependent are dropped.
template <class Apply>
Augmentation make_augmentation(Apply&& apply, const Eigen::MatrixXd& Z, double rank_tol = 1e-10)
{
  Augmentation aug;
  const Eigen::Index n = Z.rows(), k = Z.cols();
  if (k == 0) return aug;
  Eigen::MatrixXd AZ(n, k);
  Eigen::VectorXd y(n);
  for (Eigen::Index j = 0; j < k; ++j) {
    apply(Z.col(j), y);
    AZ.col(j) = y;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(AZ);
  qr.setThreshold(rank_tol);
  const Eigen::Index r = qr.rank();
  if (r == 0) return aug;
  aug.C = qr.householderQ() * Eigen::MatrixXd::Identity(n, r);
  const Eigen::MatrixXd Zp = (Z * qr.colsPermutation()).leftCols(r);
  const Eigen::MatrixXd R = qr.matrixR().topLeftCorner(r, r).template triangularView<Eigen::Upper>();
  aug.U = R.transpose().template triangularView<Eigen::Lower>().solve(Zp.transpose()).transpose();
  return aug;
}

// GMRES whose minimization space is span(U) plus the Krylov space of
// (I - C C^T) A. Reduces to plain restarted GMRES when the space is empty.
template <class Apply>
GmresStats gmres_augmented(Apply&& apply, const Augmentation& aug, const Eigen::VectorXd& b, Eigen::VectorXd& x,
                           int restart, int max_iter, double rel_tol)
{
  if (aug.C.cols() == 0) return gmres(apply, b, x, restart, max_iter, rel_tol);
  const Eigen::Index n = b.size();
  const double bnorm = b.norm();
  GmresStats st;
  if (x.size() != n) x.setZero(n);
  if (bnorm == 0.0) {
    x.setZero();
    st.converged = true;
    return st;
  }
  Eigen::VectorXd r(n);
  apply(x, r);
  r = b - r;
  Eigen::VectorXd c = aug.C.transpose() * r;
  x += aug.U * c;
  r -= aug.C * c;
  const double rnorm = r.norm();
  if (rnorm <= rel_tol * bnorm) {
    st.rel_residual = rnorm / bnorm;
    st.converged = true;
    return st;
  }
  auto projected = [&](const auto& v, Eigen::VectorXd& y) {
    apply(v, y);
    y -= aug.C * (aug.C.transpose() * y);
  };
  Eigen::VectorXd xt = Eigen::VectorXd::Zero(n);
  st = gmres(projected, r, xt, restart, max_iter, rel_tol * bnorm / rnorm);
  Eigen::VectorXd axt(n);
  apply(xt, axt);
  x += xt - aug.U * (aug.C.transpose() * axt);
  apply(x, r);
  st.rel_residual = (b - r).norm() / bnorm;
  st.converged = st.rel_residual <= rel_tol;
  return st;
}

}  // namespace kbl
