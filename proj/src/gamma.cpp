#include "kbl/gamma.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "kbl/parallel.hpp"

namespace kbl {

CollisionGamma::CollisionGamma(const OperatorSet& op, int n_azimuth, int n_polar) : op_(&op)
{
  if (n_azimuth < 2 || n_azimuth % 2 || n_polar < 2 || n_polar % 2)
    throw std::invalid_argument("angular rule sizes must be even and >= 2");
  std::vector<double> x, w;
  gauss_legendre(n_polar, x, w);
  // the integrand is even in w, so only the upper hemisphere is visited with doubled weight
  for (int p = 0; p < n_polar; ++p) {
    if (x[p] <= 0.0) continue;
    const double st = std::sqrt(1.0 - x[p] * x[p]);
    for (int a = 0; a < n_azimuth; ++a) {
      const double phi = 2.0 * std::numbers::pi * a / n_azimuth;
      omega_.push_back({st * std::cos(phi), st * std::sin(phi), x[p]});
      omega_w_.push_back(2.0 * w[p] * 2.0 * std::numbers::pi / n_azimuth);
    }
  }
  const auto& G = op.grid();
  sqmu_.resize(G.size());
  inv_.resize(G.size());
  for (std::size_t j = 0; j < G.size(); ++j) {
    sqmu_[j] = std::sqrt(maxwellian(G.rel(j), {0, 0, 0}));
    inv_[j] = 1.0 / (G.weight(j) * sqmu_[j]);
  }
}

CollisionGamma::Stencil CollisionGamma::locate(const Vec3& c) const
{
  const auto& t = op_->grid().axis_nodes();
  const int n = static_cast<int>(t.size());
  Stencil s{};
  int k[3];
  double L[3][3];
  for (int d = 0; d < 3; ++d) {
    if (c[d] < t.front() || c[d] > t.back()) {
      s.inside = false;
      return s;
    }
    int kk = static_cast<int>(std::upper_bound(t.begin(), t.end(), c[d]) - t.begin()) - 1;
    kk = std::clamp(kk, 0, n - 2);
    const int mid = std::clamp(c[d] - t[kk] < t[kk + 1] - c[d] ? kk : kk + 1, 1, n - 2);
    k[d] = mid - 1;
    for (int m = 0; m < 3; ++m) {
      double l = 1.0;
      for (int q = 0; q < 3; ++q)
        if (q != m) l *= (c[d] - t[k[d] + q]) / (t[k[d] + m] - t[k[d] + q]);
      L[d][m] = l;
    }
  }
  s.inside = true;
  const auto& G = op_->grid();
  int m = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int cc = 0; cc < 3; ++cc, ++m) {
        s.idx[m] = static_cast<int>(G.index(k[0] + a, k[1] + b, k[2] + cc));
        s.w[m] = L[0][a] * L[1][b] * L[2][cc];
      }
  return s;
}

template <class Visit>
void CollisionGamma::for_each_collision(std::size_t a, Visit&& visit) const
{
  const auto& G = op_->grid();
  const Vec3& v = G.rel(a);
  for (std::size_t b = 0; b < G.size(); ++b) {
    const Vec3& u = G.rel(b);
    const Vec3 g{v[0] - u[0], v[1] - u[1], v[2] - u[2]};
    const double base = G.weight(a) * sqmu_[a] * G.weight(b) * sqmu_[b];
    for (std::size_t q = 0; q < omega_.size(); ++q) {
      const Vec3& om = omega_[q];
      const double gw = g[0] * om[0] + g[1] * om[1] + g[2] * om[2];
      if (gw == 0.0) continue;
      const Stencil sv = locate({v[0] - gw * om[0], v[1] - gw * om[1], v[2] - gw * om[2]});
      if (!sv.inside || !locate({u[0] + gw * om[0], u[1] + gw * om[1], u[2] + gw * om[2]}).inside) continue;
      visit(b, base * omega_w_[q] * std::abs(gw), sv);
    }
  }
}

std::vector<double> CollisionGamma::raw(std::span<const double> f, std::span<const double> g) const
{
  const std::size_t N = op_->grid().size();
  if (f.size() != N || g.size() != N) throw std::invalid_argument("Gamma: vector length mismatch");
  const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), N);
  std::vector<std::vector<double>> part(chunks, std::vector<double>(N, 0.0));
  parallel_for(chunks, [&](std::size_t k) {
    auto& out = part[k];
    for (std::size_t a = N * k / chunks; a < N * (k + 1) / chunks; ++a) {
      if (g[a] == 0.0) continue;
      for_each_collision(a, [&](std::size_t b, double coef, const Stencil& sv) {
        const double c = coef * f[b] * g[a];
        for (int m = 0; m < 27; ++m) out[sv.idx[m]] += c * sv.w[m];
        out[a] -= c;
      });
    }
  });
  std::vector<double> out(N, 0.0);
  for (const auto& p : part)
    for (std::size_t i = 0; i < N; ++i) out[i] += p[i];
  for (std::size_t i = 0; i < N; ++i) out[i] *= inv_[i];
  return out;
}

std::vector<double> CollisionGamma::operator()(std::span<const double> f, std::span<const double> g) const
{
  auto r = raw(f, g);
  const auto p = op_->project_P(r);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= p[i];
  return r;
}

bool CollisionGamma::build_tensor(std::size_t max_bytes)
{
  const std::size_t N = op_->grid().size();
  if (N * N * N * sizeof(double) > max_bytes) return false;
  const auto n = static_cast<Eigen::Index>(N);
  tensor_.assign(N, Eigen::MatrixXd::Zero(n, n));
  // event (a, b) only touches column a of every slice
  parallel_for(N, [&](std::size_t a) {
    const auto ca = static_cast<Eigen::Index>(a);
    for_each_collision(a, [&](std::size_t b, double coef, const Stencil& sv) {
      const auto rb = static_cast<Eigen::Index>(b);
      for (int m = 0; m < 27; ++m) tensor_[sv.idx[m]](rb, ca) += coef * sv.w[m] * inv_[sv.idx[m]];
      tensor_[a](rb, ca) -= coef * inv_[a];
    });
  });
  return true;
}

void CollisionGamma::project(Eigen::MatrixXd& X) const
{
  const auto& G = op_->grid();
  const auto w = G.weights();
  for (const auto& e : op_->P_basis()) {
    Eigen::VectorXd we(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) we[i] = w[i] * e[i];
    const Eigen::RowVectorXd coef = we.transpose() * X;
    const Eigen::Map<const Eigen::VectorXd> ev(e.data(), X.rows());
    X -= ev * coef;
  }
}

Eigen::MatrixXd CollisionGamma::batch(const Eigen::MatrixXd& F, const Eigen::MatrixXd& Gm) const
{
  Eigen::MatrixXd out = batch_raw(F, Gm);
  project(out);
  return out;
}

Eigen::MatrixXd CollisionGamma::batch_raw(const Eigen::MatrixXd& F, const Eigen::MatrixXd& Gm) const
{
  const std::size_t N = op_->grid().size();
  Eigen::MatrixXd out(F.rows(), F.cols());
  if (has_tensor()) {
    parallel_for(N, [&](std::size_t i) {
      const Eigen::MatrixXd T = tensor_[i].transpose() * F;
      out.row(static_cast<Eigen::Index>(i)) = T.cwiseProduct(Gm).colwise().sum();
    });
  } else {
    for (Eigen::Index k = 0; k < F.cols(); ++k) {
      const auto r = raw(std::span<const double>(F.col(k).data(), N), std::span<const double>(Gm.col(k).data(), N));
      out.col(k) = Eigen::Map<const Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(N));
    }
  }
  return out;
}

void CollisionGamma::batch_pair(const Eigen::MatrixXd& F, const Eigen::MatrixXd& S, Eigen::MatrixXd& FF,
                                Eigen::MatrixXd& SS, Eigen::MatrixXd& FS) const
{
  if (!has_tensor()) {
    FF = batch(F, F);
    SS = batch(S, S);
    FS = batch(F, S) + batch(S, F);
    return;
  }
  const std::size_t N = op_->grid().size();
  FF.resize(F.rows(), F.cols());
  SS.resize(F.rows(), F.cols());
  FS.resize(F.rows(), F.cols());
  parallel_for(N, [&](std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    // Gamma_i(a, b) = a^T T_i b
    const Eigen::MatrixXd TF = tensor_[i] * F;
    const Eigen::MatrixXd TS = tensor_[i] * S;
    FF.row(ii) = F.cwiseProduct(TF).colwise().sum();
    SS.row(ii) = S.cwiseProduct(TS).colwise().sum();
    FS.row(ii) = S.cwiseProduct(TF).colwise().sum() + F.cwiseProduct(TS).colwise().sum();
  });
  project(FF);
  project(SS);
  project(FS);
}

}  // namespace kbl
