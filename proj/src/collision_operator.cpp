#include "kbl/collision_operator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "kbl/parallel.hpp"
#include "kbl/summation.hpp"

namespace kbl {

namespace {

double norm3(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }
double sqmu_rel(const Vec3& c)
{
  return std::pow(2.0 * std::numbers::pi, -0.75) * std::exp(-0.25 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]));
}

// Modified Gram-Schmidt, applied twice; drops nothing (inputs are independent).
Eigen::MatrixXd orthonormalize(Eigen::MatrixXd A)
{
  for (int pass = 0; pass < 2; ++pass)
    for (Eigen::Index k = 0; k < A.cols(); ++k) {
      for (Eigen::Index j = 0; j < k; ++j) A.col(k) -= A.col(j).dot(A.col(k)) * A.col(j);
      A.col(k) /= A.col(k).norm();
    }
  return A;
}

// Mean of k(c, .) over the 8 points (+-h1/4, +-h2/4, +-h3/4) around c.
double cell_average_kernel(const Vec3& c, const Vec3& h)
{
  double s = 0.0;
  for (int m = 0; m < 8; ++m) {
    const Vec3 e{c[0] + ((m & 1) ? 0.25 : -0.25) * h[0], c[1] + ((m & 2) ? 0.25 : -0.25) * h[1],
                 c[2] + ((m & 4) ? 0.25 : -0.25) * h[2]};
    s += kernel_k(c, e);
  }
  return s / 8.0;
}

}  // namespace

Eigen::MatrixXd SectorBlock::L() const
{
  Eigen::MatrixXd l = -K;
  l.diagonal() += nu;
  return l;
}

OperatorSet OperatorSet::assemble(const VelocityGrid& grid)
{
  OperatorSet op;
  op.grid_ = std::make_shared<const VelocityGrid>(grid);
  op.sectors_ = std::make_shared<const ParitySectors>(grid);
  const auto& G = *op.grid_;
  const auto& S = *op.sectors_;
  const std::size_t N = G.size();
  const std::size_t m = S.sector_size();

  op.nu_.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    op.nu_[i] = collision_frequency(norm3(G.rel(i)));
    if (!(op.nu_[i] > 0.0) || !std::isfinite(op.nu_[i]))
      throw std::runtime_error("collision frequency is not positive at node " + std::to_string(i));
  }
  op.nu0_ = 1e300;
  op.nu1_ = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double r = op.nu_[i] / (1.0 + norm3(G.vel(i)));
    op.nu0_ = std::min(op.nu0_, r);
    op.nu1_ = std::max(op.nu1_, r);
  }

  for (int s = 0; s < 4; ++s) {
    auto& B = op.blocks_[s];
    B.sector = s;
    B.nu.resize(m);
    B.scale.resize(m);
    B.K.setZero(m, m);
    for (std::size_t j = 0; j < m; ++j) {
      B.nu[j] = op.nu_[S.base_index(j)];
      B.scale[j] = std::sqrt(4.0 * G.weight(S.base_index(j)));
    }
  }

  const auto& aw = G.axis_weights();
  std::vector<double> bound_ratio(m, 0.0), row_sum(m, 0.0);
  parallel_for(m, [&](std::size_t i) {
    const std::size_t I = S.base_index(i);
    const Vec3& c = G.rel(I);
    const auto ax = G.axes(I);
    const Vec3 h{aw[ax[0]], aw[ax[1]], aw[ax[2]]};
    const double c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    const double swi = std::sqrt(G.weight(I));
    double br = 0.0, rs = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double acc[4] = {0, 0, 0, 0};
      for (int r = 0; r < 4; ++r) {
        const std::size_t l = S.image(j, r);
        double val;
        if (l == I) {
          val = cell_average_kernel(c, h);
        } else {
          const Vec3& e = G.rel(l);
          val = kernel_k(c, e);
          const double d0 = c[0] - e[0], d1 = c[1] - e[1], d2 = c[2] - e[2];
          const double rr2 = d0 * d0 + d1 * d1 + d2 * d2, rr = std::sqrt(rr2);
          const double q = e[0] * e[0] + e[1] * e[1] + e[2] * e[2] - c2;
          const double shape = (rr + 1.0 / rr) * std::exp(-0.125 * rr2 - q * q / (8.0 * rr2));
          if (shape > 0.0) br = std::max(br, std::abs(val) / shape);
        }
        rs += std::abs(val) * G.weight(l);
        for (int s = 0; s < 4; ++s) acc[s] += ParitySectors::sign(s, r) * val;
      }
      const double f = swi * std::sqrt(G.weight(S.base_index(j)));
      for (int s = 0; s < 4; ++s) op.blocks_[s].K(i, j) = f * acc[s];
    }
    bound_ratio[i] = br;
    row_sum[i] = rs * (1.0 + norm3(G.vel(I)));
  });
  for (std::size_t i = 0; i < m; ++i) {
    op.stats_.kernel_bound_constant = std::max(op.stats_.kernel_bound_constant, bound_ratio[i]);
    op.stats_.row_sum_bound = std::max(op.stats_.row_sum_bound, row_sum[i]);
  }

  for (int s = 0; s < 4; ++s) {
    auto& B = op.blocks_[s];
    op.stats_.raw_symmetry_defect =
        std::max(op.stats_.raw_symmetry_defect, (B.K - B.K.transpose()).cwiseAbs().maxCoeff());
    B.K = 0.5 * (B.K + B.K.transpose()).eval();
    if (!B.K.allFinite()) throw std::runtime_error("non-finite entry in the assembled kernel matrix");

    std::vector<Eigen::VectorXd> cols;
    auto invariant = [&](auto fn) {
      Eigen::VectorXd y(m);
      for (std::size_t j = 0; j < m; ++j) {
        const Vec3& c = G.rel(S.base_index(j));
        y[j] = B.scale[j] * fn(c) * sqmu_rel(c);
      }
      cols.push_back(y);
    };
    if (s == 0) {
      invariant([](const Vec3&) { return 1.0; });
      invariant([](const Vec3& c) { return c[2]; });
      invariant([](const Vec3& c) { return c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - 3.0; });
    } else if (s == 1) {
      invariant([](const Vec3& c) { return c[0]; });
    } else if (s == 2) {
      invariant([](const Vec3& c) { return c[1]; });
    }
    Eigen::MatrixXd A(m, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) A.col(k) = cols[k];
    B.Q = orthonormalize(A);
  }
  op.finalize();
  return op;
}

void OperatorSet::finalize()
{
  const auto& G = *grid_;
  const auto& S = *sectors_;
  const std::size_t m = S.sector_size();
  for (int s = 0; s < 4; ++s) {
    auto& B = blocks_[s];
    Eigen::MatrixXd L = B.L();
    if (B.Q.cols() > 0) {
      stats_.raw_null_defect = std::max(stats_.raw_null_defect, (L * B.Q).cwiseAbs().maxCoeff());
      // conservative projection: L <- (I - QQ^T) L (I - QQ^T)
      const Eigen::MatrixXd LQ = L * B.Q;
      L -= LQ * B.Q.transpose();
      const Eigen::MatrixXd QtL = B.Q.transpose() * L;
      L -= B.Q * QtL;
      L = 0.5 * (L + L.transpose()).eval();
      B.K = -L;
      B.K.diagonal() += B.nu;
    }
    Eigen::MatrixXd R = L;
    if (B.Q.cols() > 0) R += B.Q * B.Q.transpose();
    B.Lreg.compute(R);
    if (B.Lreg.info() != Eigen::Success)
      throw std::runtime_error("linearized operator is not positive semidefinite on this grid (refine it)");
  }

  // full orthonormal basis in the order sqrt(mu), c1, c2, c3, energy
  const std::size_t N = G.size();
  auto extend = [&](int s, Eigen::Index col) {
    std::vector<double> part(m), full(N, 0.0);
    for (std::size_t j = 0; j < m; ++j) part[j] = blocks_[s].Q(j, col) / blocks_[s].scale[j];
    S.add_from(s, part, full);
    return full;
  };
  basis_[0] = extend(0, 0);
  basis_[1] = extend(1, 0);
  basis_[2] = extend(2, 0);
  basis_[3] = extend(0, 1);
  basis_[4] = extend(0, 2);

  const auto a31 = A31();
  const auto b3 = B3();
  kappa1_ = inner(a31, solve_L_inv(a31));
  kappa2_ = inner(b3, solve_L_inv(b3));
  c0_ = estimate_coercivity();
  if (!(c0_ > 0.0)) throw std::runtime_error("coercivity estimate is not positive; refine the velocity grid");
}

std::vector<double> OperatorSet::apply_K(std::span<const double> f) const
{
  const auto& S = *sectors_;
  const std::size_t m = S.sector_size();
  std::vector<double> out(f.size(), 0.0), part(m);
  for (int s = 0; s < 4; ++s) {
    const auto& B = blocks_[s];
    S.restrict_to(s, f, part);
    Eigen::Map<Eigen::VectorXd> p(part.data(), m);
    Eigen::VectorXd y = B.K * p.cwiseProduct(B.scale);
    p = y.cwiseQuotient(B.scale);
    S.add_from(s, part, out);
  }
  return out;
}

std::vector<double> OperatorSet::apply_L(std::span<const double> f) const
{
  auto k = apply_K(f);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = nu_[i] * f[i] - k[i];
  return k;
}

double OperatorSet::inner(std::span<const double> f, std::span<const double> g) const
{
  const auto w = grid_->weights();
  return pairwise_sum_of(f.size(), [&](std::size_t i) { return w[i] * f[i] * g[i]; });
}

double OperatorSet::nu_norm(std::span<const double> f) const
{
  const auto w = grid_->weights();
  return std::sqrt(pairwise_sum_of(f.size(), [&](std::size_t i) { return w[i] * nu_[i] * f[i] * f[i]; }));
}

std::vector<double> OperatorSet::project_P(std::span<const double> f) const
{
  std::vector<double> out(f.size(), 0.0);
  for (const auto& e : basis_) {
    const double a = inner(f, e);
    for (std::size_t i = 0; i < f.size(); ++i) out[i] += a * e[i];
  }
  return out;
}

std::vector<double> OperatorSet::solve_L_inv(std::span<const double> h, double rel_tol) const
{
  const auto ph = project_P(h);
  const double nh = std::sqrt(inner(h, h));
  const double nph = std::sqrt(inner(ph, ph));
  if (nph > rel_tol * std::max(nh, 1e-300) && nph > 1e-300)
    throw std::invalid_argument("solve_L_inv: input has a null-space component of size " + std::to_string(nph));
  const auto& S = *sectors_;
  const std::size_t m = S.sector_size();
  std::vector<double> out(h.size(), 0.0), part(m);
  for (int s = 0; s < 4; ++s) {
    const auto& B = blocks_[s];
    S.restrict_to(s, h, part);
    Eigen::Map<Eigen::VectorXd> p(part.data(), m);
    if (B.Q.cols() > 0) {
      Eigen::VectorXd y = p.cwiseProduct(B.scale);
      y -= B.Q * (B.Q.transpose() * y);
      p = B.Lreg.solve(y).cwiseQuotient(B.scale);
    } else {
      p = B.Lreg.solve(p.cwiseProduct(B.scale)).cwiseQuotient(B.scale);
    }
    S.add_from(s, part, out);
  }
  return out;
}

double lanczos_smallest(const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>& apply,
                        Eigen::Index dim, int steps)
{
  steps = static_cast<int>(std::min<Eigen::Index>(steps, dim));
  Eigen::MatrixXd V(dim, steps);
  std::vector<double> alpha, beta;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] += 0.5 * std::sin(1.7 * static_cast<double>(i) + 0.3);
  v.normalize();
  Eigen::VectorXd w(dim);
  for (int k = 0; k < steps; ++k) {
    V.col(k) = v;
    apply(v, w);
    const double a = v.dot(w);
    alpha.push_back(a);
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j <= k; ++j) w -= V.col(j).dot(w) * V.col(j);
    const double b = w.norm();
    if (b < 1e-12 || k + 1 == steps) break;
    beta.push_back(b);
    v = w / b;
  }
  const Eigen::Index t = static_cast<Eigen::Index>(alpha.size());
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(t, t);
  for (Eigen::Index k = 0; k < t; ++k) {
    T(k, k) = alpha[k];
    if (k + 1 < t) T(k, k + 1) = T(k + 1, k) = beta[k];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T, Eigen::EigenvaluesOnly);
  return es.eigenvalues()[0];
}

double OperatorSet::estimate_coercivity() const
{
  double c0 = 1e300;
  for (int s = 0; s < 4; ++s) {
    const auto& B = blocks_[s];
    const Eigen::Index m = B.size();
    const Eigen::VectorXd dm = B.nu.cwiseSqrt().cwiseInverse();
    Eigen::MatrixXd Qp;
    if (B.Q.cols() > 0) Qp = orthonormalize(dm.asDiagonal() * B.Q);
    constexpr double kShift = 10.0;
    if (m <= 2100) {
      Eigen::MatrixXd A = dm.asDiagonal() * B.L() * dm.asDiagonal();
      if (Qp.cols() > 0) {
        const Eigen::MatrixXd AQ = A * Qp;
        A -= AQ * Qp.transpose();
        const Eigen::MatrixXd QtA = Qp.transpose() * A;
        A -= Qp * QtA;
        A += kShift * Qp * Qp.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A, Eigen::EigenvaluesOnly);
      c0 = std::min(c0, es.eigenvalues()[0]);
    } else {
      const Eigen::MatrixXd L = B.L();
      auto apply = [&](const Eigen::VectorXd& x, Eigen::VectorXd& y) {
        Eigen::VectorXd z = x;
        if (Qp.cols() > 0) z -= Qp * (Qp.transpose() * z);
        Eigen::VectorXd t = L * dm.cwiseProduct(z);
        y = dm.cwiseProduct(t);
        if (Qp.cols() > 0) {
          y -= Qp * (Qp.transpose() * y);
          y += kShift * Qp * (Qp.transpose() * x);
        }
      };
      c0 = std::min(c0, lanczos_smallest(apply, m, 300));
    }
  }
  return c0;
}

std::vector<double> OperatorSet::lowest_eigenvalues(int count) const
{
  std::vector<double> all;
  for (int s = 0; s < 4; ++s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(blocks_[s].L(), Eigen::EigenvaluesOnly);
    for (Eigen::Index k = 0; k < es.eigenvalues().size() && k < count; ++k) all.push_back(es.eigenvalues()[k]);
  }
  std::sort(all.begin(), all.end());
  if (static_cast<int>(all.size()) > count) all.resize(count);
  return all;
}

namespace {
template <class F>
std::vector<double> tabulate(const VelocityGrid& G, F fn)
{
  std::vector<double> out(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) out[i] = fn(G.rel(i)) * sqmu_rel(G.rel(i));
  return out;
}
}  // namespace

std::vector<double> OperatorSet::A31() const
{
  return tabulate(*grid_, [](const Vec3& c) { return c[2] * c[0]; });
}
std::vector<double> OperatorSet::A32() const
{
  return tabulate(*grid_, [](const Vec3& c) { return c[2] * c[1]; });
}
std::vector<double> OperatorSet::B3() const
{
  return tabulate(*grid_, [](const Vec3& c) { return c[2] * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - 5.0); });
}

namespace {
constexpr char kOpMagic[8] = {'K', 'B', 'L', 'O', 'P', 'S', '0', '1'};

struct OpHeader {
  char magic[8];
  std::uint64_t grid_hash;
  std::uint64_t key_extra;
  std::int64_t kernel_version;
  std::int64_t sector_size;
  double nu0, nu1, c0, kappa1, kappa2;
  double stats[4];
};

void write_matrix(std::ofstream& os, const Eigen::MatrixXd& A)
{
  const std::int64_t r = A.rows(), c = A.cols();
  os.write(reinterpret_cast<const char*>(&r), sizeof r);
  os.write(reinterpret_cast<const char*>(&c), sizeof c);
  os.write(reinterpret_cast<const char*>(A.data()), static_cast<std::streamsize>(sizeof(double) * A.size()));
}

Eigen::MatrixXd read_matrix(std::ifstream& is)
{
  std::int64_t r = 0, c = 0;
  is.read(reinterpret_cast<char*>(&r), sizeof r);
  is.read(reinterpret_cast<char*>(&c), sizeof c);
  if (!is || r < 0 || c < 0 || r > (1 << 20) || c > (1 << 20)) throw std::runtime_error("corrupt operator cache");
  Eigen::MatrixXd A(r, c);
  is.read(reinterpret_cast<char*>(A.data()), static_cast<std::streamsize>(sizeof(double) * A.size()));
  return A;
}
}  // namespace

void OperatorSet::save(const std::string& path, std::uint64_t key_extra) const
{
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write operator cache " + path);
  OpHeader h{};
  std::memcpy(h.magic, kOpMagic, 8);
  h.grid_hash = grid_->hash();
  h.key_extra = key_extra;
  h.kernel_version = kKernelVersion;
  h.sector_size = static_cast<std::int64_t>(sectors_->sector_size());
  h.nu0 = nu0_;
  h.nu1 = nu1_;
  h.c0 = c0_;
  h.kappa1 = kappa1_;
  h.kappa2 = kappa2_;
  h.stats[0] = stats_.raw_symmetry_defect;
  h.stats[1] = stats_.raw_null_defect;
  h.stats[2] = stats_.kernel_bound_constant;
  h.stats[3] = stats_.row_sum_bound;
  os.write(reinterpret_cast<const char*>(&h), sizeof h);
  for (const auto& B : blocks_) {
    write_matrix(os, B.K);
    write_matrix(os, B.Q);
  }
}

OperatorSet OperatorSet::load(const std::string& path, const VelocityGrid& grid, std::uint64_t key_extra)
{
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open operator cache " + path);
  OpHeader h{};
  is.read(reinterpret_cast<char*>(&h), sizeof h);
  if (!is || std::memcmp(h.magic, kOpMagic, 8) != 0) throw std::runtime_error("not an operator cache: " + path);
  if (h.grid_hash != grid.hash() || h.key_extra != key_extra || h.kernel_version != kKernelVersion)
    throw std::runtime_error("operator cache key mismatch: " + path);
  OperatorSet op;
  op.grid_ = std::make_shared<const VelocityGrid>(grid);
  op.sectors_ = std::make_shared<const ParitySectors>(grid);
  const auto& S = *op.sectors_;
  const std::size_t m = S.sector_size();
  if (static_cast<std::size_t>(h.sector_size) != m) throw std::runtime_error("operator cache size mismatch");
  op.nu_.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) op.nu_[i] = collision_frequency(norm3(grid.rel(i)));
  for (int s = 0; s < 4; ++s) {
    auto& B = op.blocks_[s];
    B.sector = s;
    B.nu.resize(m);
    B.scale.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      B.nu[j] = op.nu_[S.base_index(j)];
      B.scale[j] = std::sqrt(4.0 * grid.weight(S.base_index(j)));
    }
    B.K = read_matrix(is);
    B.Q = read_matrix(is);
    if (B.K.rows() != static_cast<Eigen::Index>(m)) throw std::runtime_error("corrupt operator cache");
    Eigen::MatrixXd R = B.L();
    if (B.Q.cols() > 0) R += B.Q * B.Q.transpose();
    B.Lreg.compute(R);
  }
  op.nu0_ = h.nu0;
  op.nu1_ = h.nu1;
  op.stats_ = {h.stats[0], h.stats[1], h.stats[2], h.stats[3]};
  // rebuild the full basis and constants exactly as assembly does
  const std::size_t N = grid.size();
  auto extend = [&](int s, Eigen::Index col) {
    std::vector<double> part(m), full(N, 0.0);
    for (std::size_t j = 0; j < m; ++j) part[j] = op.blocks_[s].Q(j, col) / op.blocks_[s].scale[j];
    S.add_from(s, part, full);
    return full;
  };
  op.basis_[0] = extend(0, 0);
  op.basis_[1] = extend(1, 0);
  op.basis_[2] = extend(2, 0);
  op.basis_[3] = extend(0, 1);
  op.basis_[4] = extend(0, 2);
  op.kappa1_ = h.kappa1;
  op.kappa2_ = h.kappa2;
  op.c0_ = h.c0;
  return op;
}

}  // namespace kbl
