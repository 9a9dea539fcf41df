#include "kbl/nonlinear_solver.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace kbl {

void NonlinearConfig::validate() const
{
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (!(tol > 0.0)) fail("nonlinear.tol must be positive");
  if (max_iter < 1) fail("nonlinear.max_iter must be >= 1");
  if (!(delta_threshold > 0.0)) fail("nonlinear.delta_threshold must be positive");
  if (!(skip_rel >= 0.0 && skip_rel < 1e-4)) fail("nonlinear.skip_rel must lie in [0, 1e-4)");
  if (!(source_orthogonality_tol > 0.0)) fail("nonlinear.source_orthogonality_tol must be positive");
}

Smallness check_smallness(const OperatorSet& op, const NonlinearProblem& problem, double sigma0, double d,
                          double threshold)
{
  const auto& grid = op.grid();
  if (!problem.f_b.empty() && problem.f_b.size() != grid.size())
    throw std::invalid_argument("f_b size does not match the velocity grid");
  const auto w = node_weights(grid, problem.weight);
  Smallness s;
  s.threshold = threshold;
  for (std::size_t i = 0; i < problem.f_b.size(); ++i) s.boundary = std::max(s.boundary, w[i] * std::abs(problem.f_b[i]));
  if (problem.source) {
    const SlabGrid slab = SlabGrid::make(d);
    std::vector<double> xs(slab.edges());
    xs.insert(xs.end(), slab.x_nodes().begin(), slab.x_nodes().end());
    std::vector<double> buf(grid.size());
    for (double x : xs) {
      problem.source(x, buf);
      const double e = std::exp(sigma0 * x);
      for (std::size_t i = 0; i < grid.size(); ++i) s.source = std::max(s.source, e * w[i] * std::abs(buf[i]) / op.nu()[i]);
    }
  }
  s.delta = s.boundary + s.source;
  s.below = s.delta <= threshold;
  return s;
}

CellSource gamma_cells(const CollisionGamma& gamma, const KineticField& f, double skip_rel)
{
  const Eigen::Index N = f.nv();
  const int M = f.slab.cells();
  CellSource out;
  out.mean.setZero(N, M);
  out.slope.setZero(N, M);
  std::vector<double> mag(M);
  double top = 0.0;
  for (int c = 0; c < M; ++c) {
    const double h = f.slab.width(c);
    mag[c] = f.mean.col(c).cwiseAbs().maxCoeff() + 0.5 * h * f.slope.col(c).cwiseAbs().maxCoeff();
    top = std::max(top, mag[c]);
  }
  if (top == 0.0) return out;
  std::vector<int> cells;
  for (int c = 0; c < M; ++c)
    if (mag[c] > skip_rel * top) cells.push_back(c);
  const Eigen::Index k = static_cast<Eigen::Index>(cells.size());
  Eigen::MatrixXd F(N, k), S(N, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    F.col(j) = f.mean.col(cells[j]);
    S.col(j) = f.slope.col(cells[j]);
  }
  Eigen::MatrixXd FF, SS, FS;
  gamma.batch_pair(F, S, FF, SS, FS);
  for (Eigen::Index j = 0; j < k; ++j) {
    const int c = cells[j];
    const double h = f.slab.width(c);
    out.mean.col(c) = FF.col(j) + (h * h / 12.0) * SS.col(j);
    out.slope.col(c) = FS.col(j);
  }
  return out;
}

namespace {

// every parity class switched on, with zero data where the original had none
SectorSources all_classes(const OperatorSet& op, const SlabGrid& slab, SectorSources g)
{
  const Eigen::Index m = static_cast<Eigen::Index>(op.sectors().sector_size());
  const int M = slab.cells();
  for (auto& d : g) {
    if (d.on) continue;
    d.on = true;
    d.src.mean.setZero(m, M);
    d.src.slope.setZero(m, M);
    d.chi_fb = d.src;
    d.wall.setZero(m);
  }
  return g;
}

double source_defect(const OperatorSet& op, const CellSource& s)
{
  const Eigen::Index N = s.mean.rows();
  double worst = 0.0;
  for (Eigen::Index c = 0; c < s.mean.cols(); ++c) {
    const std::span<const double> col(s.mean.col(c).data(), static_cast<std::size_t>(N));
    const double nrm = std::sqrt(op.inner(col, col));
    if (nrm == 0.0) continue;
    const auto p = op.project_P(col);
    worst = std::max(worst, std::sqrt(op.inner(p, p)) / nrm);
  }
  return worst;
}

double boundary_defect(const OperatorSet& op, const KineticField& f, std::span<const double> f_b)
{
  const auto& grid = op.grid();
  double r = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.rel(i)[2] <= 0.0) continue;
    const std::size_t j = grid.reflect(i);
    const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
    r = std::max(r, std::abs(f.edge(ii, 0) - f.edge(jj, 0) - f_b[j]));
  }
  return r;
}

}  // namespace

NonlinearSolution picard_solve(const OperatorSet& op, const CollisionGamma& gamma, const NonlinearProblem& problem,
                               const SolveConfig& cfg, const NonlinearConfig& ncfg)
{
  cfg.validate();
  ncfg.validate();
  const auto& grid = op.grid();
  const Eigen::Index N = static_cast<Eigen::Index>(grid.size());
  NonlinearSolution out;
  auto& rep = out.report;
  rep.sigma = ncfg.sigma < 0.0 ? 0.5 * cfg.sigma0 : ncfg.sigma;
  if (!(rep.sigma < cfg.sigma0)) throw std::invalid_argument("nonlinear.sigma must be below solver.sigma0");
  const double d = cfg.d_schedule.back();
  rep.smallness = check_smallness(op, problem, cfg.sigma0, d, ncfg.delta_threshold);
  const auto w = node_weights(grid, problem.weight);

  // first iterate: the full linear chain with source S
  LinearProblem lp;
  lp.source = problem.source;
  lp.source_decay = problem.source_decay;
  lp.f_b = problem.f_b;
  lp.weight = problem.weight;
  out.solution = extend_domain(op, lp, cfg);
  LinearSolution& sol = out.solution;

  const SlabGrid& slab = sol.field.slab;
  CellSource s_cells;
  if (problem.source) {
    std::vector<double> buf(grid.size());
    s_cells = project_source(slab, N, [&](double x, Eigen::VectorXd& col) {
      problem.source(x, buf);
      col = Eigen::Map<const Eigen::VectorXd>(buf.data(), N);
    });
  } else {
    s_cells.mean.setZero(N, slab.cells());
    s_cells.slope.setZero(N, slab.cells());
  }
  rep.source_defect = source_defect(op, s_cells);
  if (rep.source_defect > ncfg.source_orthogonality_tol)
    throw SolverError(fmt::format("source has a collision-invariant component: |P S| / |S| = {:.3e}", rep.source_defect));

  SlabSolver solver(op, slab, problem.weight, cfg);
  KineticField prev = KineticField::zero(slab, N);
  KineticField cur = sol.field;
  KineticField unshifted = sol.unshifted;
  rep.norms.push_back(0.0);
  for (int j = 0;; ++j) {
    KineticField diff = cur;
    KineticField neg = prev;
    neg *= -1.0;
    diff += neg;
    const double dj = weighted_sup(diff, w, rep.sigma);
    rep.diffs.push_back(dj);
    rep.norms.push_back(weighted_sup(cur, w, rep.sigma));
    if (j > 0) {
      const double ratio = rep.diffs[j - 1] > 0.0 ? dj / rep.diffs[j - 1] : 0.0;
      rep.ratios.push_back(ratio);
      rep.max_ratio = std::max(rep.max_ratio, ratio);
      rep.terminal_ratio = ratio;
      if (ratio >= 1.0) {
        std::string h;
        for (double r : rep.ratios) h += fmt::format(" {:.3e}", r);
        throw ContractionError(fmt::format("Picard iteration does not contract (delta = {:.3e}): ratios{}",
                                           rep.smallness.delta, h));
      }
    }
    rep.iterations = j + 1;
    if (dj < ncfg.tol) {
      rep.converged = true;
      break;
    }
    if (rep.iterations >= ncfg.max_iter) break;

    // next iterate on the largest slab, warm-started from the current one
    CellSource src = gamma_cells(gamma, cur, ncfg.skip_rel);
    src.mean += s_cells.mean;
    src.slope += s_cells.slope;
    const SectorSources g = solver.split(src, problem.f_b);
    SlabState st = solver.from_field(unshifted, g);
    const StageRecord r = solver.solve(g, 0.0, 1.0, 1.0, st, cfg.tol);
    rep.gmres_iterations.push_back(r.iterations);
    solver.enforce_zero_means(g, st);
    KineticField next = st.empty() ? KineticField::zero(slab, N) : solver.to_field(st);
    unshifted = next;
    const Eigen::VectorXd td = next.trace_right();
    const ShiftResult sr = compute_shift_phi(op, std::span<const double>(td.data(), grid.size()));
    apply_shift(op, sr.phi, next);
    sol.phi = sr.phi;
    prev = std::move(cur);
    cur = std::move(next);
  }

  for (double nrm : rep.norms)
    if (rep.smallness.delta > 0.0)
      rep.c1_estimate = std::max(rep.c1_estimate, nrm * (cfg.sigma0 - rep.sigma) / (2.0 * rep.smallness.delta));

  // independent residual of the nonlinear equation at the final iterate
  {
    CellSource src = gamma_cells(gamma, cur, 0.0);
    src.mean += s_cells.mean;
    src.slope += s_cells.slope;
    const SectorSources g = all_classes(op, slab, solver.split(src, problem.f_b));
    const SlabState st = solver.from_field(cur, g);
    rep.residual = solver.residual(g, 0.0, 1.0, st);
  }
  rep.boundary_defect = problem.f_b.empty() ? 0.0 : boundary_defect(op, cur, problem.f_b);

  sol.unshifted = unshifted;
  sol.lifted = lift(unshifted, problem.f_b);
  sol.field = std::move(cur);
  sol.fit = fit_decay(sol.field, w, d / 8.0, d / 2.0);
  sol.macro = extract_macro(op, sol.field);
  return out;
}

}  // namespace kbl
