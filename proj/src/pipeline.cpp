#include "kbl/pipeline.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <cstdlib>
#include <filesystem>
#include <memory>

#include "kbl/artifacts.hpp"
#include "kbl/diagnostics.hpp"
#include "kbl/gamma.hpp"
#include "kbl/parallel.hpp"

namespace kbl {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kResidualTol = 1e-7;
constexpr double kBoundaryTol = 1e-6;

std::string path_in(const RunConfig& cfg, const char* name) { return (fs::path(cfg.outputs.dir) / name).string(); }

json grid_json(const VelocityGrid& grid)
{
  const auto& s = grid.spec();
  return {{"v_max", s.v_max},
          {"n_per_axis", s.n_per_axis},
          {"rule", to_string(s.rule)},
          {"drift", s.drift},
          {"nodes", grid.size()},
          {"hash", fmt::format("{:016x}", grid.hash())}};
}

json operator_json(const OperatorSet& op)
{
  return {{"nu0", op.nu0()},     {"nu1", op.nu1()},         {"c0", op.c0()},
          {"kappa1", op.kappa1()}, {"kappa2", op.kappa2()}, {"kernel_version", kKernelVersion}};
}

void print_identities(std::ostream& out, const std::vector<IdentityReport>& ids)
{
  for (const auto& r : ids)
    fmt::print(out, "  [{}] {:<7} {:<60} computed {:.6e} target {:.6e} tol {:.1e}\n", r.pass ? "PASS" : "FAIL",
               to_string(r.tag), r.name, r.computed, r.target, r.tolerance);
}

struct Setup {
  std::unique_ptr<VelocityGrid> grid;
  std::unique_ptr<OperatorSet> op;
};

Setup setup(const RunConfig& cfg, std::ostream& out)
{
  set_num_threads(cfg.threads);
  Setup s;
  s.grid = std::make_unique<VelocityGrid>(cfg.grid);
  CacheOutcome co;
  s.op = std::make_unique<OperatorSet>(load_or_assemble(*s.grid, cfg.weight, cfg.outputs.cache, co));
  if (co.path.empty())
    fmt::print(out, "operator assembled ({} nodes, no cache)\n", s.grid->size());
  else
    fmt::print(out, "operator {} {} ({} nodes)\n", co.hit ? "loaded from" : "cached to", co.path, s.grid->size());
  return s;
}

std::size_t gamma_bytes(const VelocityGrid& grid)
{
  const std::size_t N = grid.size();
  return N * N * N * sizeof(double);
}

std::size_t gamma_budget(const GammaSpec& g) { return static_cast<std::size_t>(g.max_gib * 1073741824.0); }

// max over incoming nodes of |f(0,v) - f(0,Rv) - f_b(Rv)|
double boundary_relation(const VelocityGrid& grid, const Eigen::VectorXd& wall, const std::vector<double>& f_b)
{
  double m = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.rel(i)[2] <= 0.0) continue;
    const std::size_t r = grid.reflect(i);
    m = std::max(m, std::abs(wall[static_cast<Eigen::Index>(i)] - wall[static_cast<Eigen::Index>(r)] - f_b[r]));
  }
  return m;
}

void write_field_artifacts(const RunConfig& cfg, const OperatorSet& op, const LinearSolution& sol)
{
  fs::create_directories(cfg.outputs.dir);
  if (cfg.outputs.csv) write_profiles_csv(path_in(cfg, "profiles.csv"), profile_rows(op, sol.field, cfg.weight));
  if (cfg.outputs.snapshot) {
    write_snapshot(path_in(cfg, "field.bin"), op.grid().hash(), sol.field);
    write_snapshot(path_in(cfg, "lifted.bin"), op.grid().hash(), sol.lifted);
  }
}

json solution_json(const RunConfig& cfg, const OperatorSet& op, const LinearSolution& sol)
{
  const double sigma = 0.5 * cfg.solver.sigma0;
  const auto nrm = weighted_norms(op, sol.field, cfg.weight, sigma);
  return {{"d", sol.field.slab.d()},
          {"cells", sol.field.slab.cells()},
          {"phi", sol.phi},
          {"decay_fit",
           {{"sigma", sol.fit.sigma}, {"amplitude", sol.fit.amplitude}, {"points", sol.fit.points},
            {"trivial", sol.fit.trivial}, {"ok", sol.fit.ok}}},
          {"norms", {{"sigma", sigma}, {"sup", nrm.sup}, {"l2", nrm.l2}}}};
}

void finish_report(const RunConfig& cfg, json& rep, const std::vector<IdentityReport>& ids, bool ok)
{
  rep["identities"] = to_json(ids);
  rep["pass"] = ok;
  if (cfg.outputs.json) {
    fs::create_directories(cfg.outputs.dir);
    write_json(path_in(cfg, "report.json"), rep);
  }
}

json base_report(const std::string& command, const RunConfig& cfg, const OperatorSet& op)
{
  return {{"command", command},
          {"config", cfg.path},
          {"grid", grid_json(op.grid())},
          {"weight", {{"beta", cfg.weight.beta}, {"varsigma", cfg.weight.varsigma}}},
          {"operator", operator_json(op)},
          {"boundary", {{"family", cfg.boundary.family}, {"amplitude", cfg.boundary.amplitude}}},
          {"source", {{"family", cfg.source.family}, {"amplitude", cfg.source.amplitude}, {"decay", cfg.source.decay}}}};
}

bool compatible(const OperatorSet& op, const std::vector<double>& f_b, const RunConfig& cfg, std::ostream& err)
{
  const auto c = check_compatibility(op, f_b, cfg.solver.compat_tol);
  if (c.pass) return true;
  fmt::print(err,
             "boundary data is incompatible: v3 sqrt(mu) f_b moments against 1, c1, c2, |c|^2 = "
             "{:.6e} {:.6e} {:.6e} {:.6e} (tolerance {:.3e})\n",
             c.moments[0], c.moments[1], c.moments[2], c.moments[3], c.tolerance);
  return false;
}

int cmd_operator(const RunConfig& cfg, std::ostream& out, std::ostream& err)
{
  Setup s = setup(cfg, out);
  auto ids = moment_identity_suite(*s.grid);
  std::unique_ptr<CollisionGamma> gamma;
  const std::size_t need = gamma_bytes(*s.grid);
  if (need <= gamma_budget(cfg.gamma)) {
    gamma = std::make_unique<CollisionGamma>(*s.op, cfg.gamma.n_azimuth, cfg.gamma.n_polar);
    gamma->build_tensor(gamma_budget(cfg.gamma));
  } else {
    fmt::print(err, "note: Gamma checks skipped, the tensor needs {:.2f} GiB (gamma.max_gib = {})\n",
               need / 1073741824.0, cfg.gamma.max_gib);
  }
  const auto op_ids = operator_identity_suite(*s.op, gamma.get());
  ids.insert(ids.end(), op_ids.begin(), op_ids.end());
  print_identities(out, ids);
  const bool ok = all_pass(ids);
  json rep = base_report("operator", cfg, *s.op);
  rep["gamma_checked"] = gamma != nullptr;
  finish_report(cfg, rep, ids, ok);
  fmt::print(out, "operator: {}\n", ok ? "all identities pass" : "identity failures");
  return ok ? kExitOk : kExitFailed;
}

int cmd_linear(const RunConfig& cfg, std::ostream& out, std::ostream& err)
{
  Setup s = setup(cfg, out);
  LinearProblem problem;
  problem.f_b = build_boundary(*s.op, cfg.boundary, cfg.weight);
  problem.source = build_source(*s.op, cfg.source, cfg.weight);
  problem.source_decay = cfg.source.family == "zero" ? 0.0 : cfg.source.decay;
  problem.weight = cfg.weight;
  if (!compatible(*s.op, problem.f_b, cfg, err)) return kExitFailed;

  LinearSolution sol;
  try {
    sol = extend_domain(*s.op, problem, cfg.solver);
  } catch (const SolverError& e) {
    fmt::print(err, "linear solve failed: {}\n", e.what());
    return kExitFailed;
  }
  auto ids = conservation_suite(*s.op, sol);
  ids.push_back(IdentityReport::make("boundary relation f(0,v) - f(0,Rv) - f_b(Rv)",
                                     boundary_relation(*s.grid, sol.field.trace_left(), problem.f_b), 0.0,
                                     Provenance::Paper, kBoundaryTol));
  write_field_artifacts(cfg, *s.op, sol);
  print_identities(out, ids);
  for (const auto& f : sol.report.flags) fmt::print(err, "flag: {}\n", f);
  for (const auto& sl : sol.report.slabs)
    fmt::print(out, "  d = {:g}: n0 {} sigma_fit {:.4f} discrepancy {:.3e} max|b3| {:.3e}\n", sl.d, sl.n0,
               sl.sigma_fit, sl.discrepancy, sl.max_b3);
  const bool ok = all_pass(ids) && sol.report.flags.empty();
  json rep = base_report("linear", cfg, *s.op);
  rep["linear"] = to_json(sol.report);
  rep["solution"] = solution_json(cfg, *s.op, sol);
  finish_report(cfg, rep, ids, ok);
  fmt::print(out, "linear: {}\n", ok ? "all checks pass" : "check failures");
  return ok ? kExitOk : kExitFailed;
}

int cmd_nonlinear(const RunConfig& cfg, std::ostream& out, std::ostream& err)
{
  const VelocityGrid probe(cfg.grid);
  const std::size_t need = gamma_bytes(probe);
  if (need > gamma_budget(cfg.gamma))
    throw ConfigError(fmt::format("the Gamma tensor needs {:.2f} GiB but gamma.max_gib = {}; lower grid.n_per_axis "
                                  "or raise gamma.max_gib",
                                  need / 1073741824.0, cfg.gamma.max_gib));
  Setup s = setup(cfg, out);
  NonlinearProblem problem;
  problem.f_b = build_boundary(*s.op, cfg.boundary, cfg.weight);
  problem.source = build_source(*s.op, cfg.source, cfg.weight);
  problem.source_decay = cfg.source.family == "zero" ? 0.0 : cfg.source.decay;
  problem.weight = cfg.weight;
  if (!compatible(*s.op, problem.f_b, cfg, err)) return kExitFailed;

  CollisionGamma gamma(*s.op, cfg.gamma.n_azimuth, cfg.gamma.n_polar);
  gamma.build_tensor(gamma_budget(cfg.gamma));
  NonlinearSolution res;
  try {
    res = picard_solve(*s.op, gamma, problem, cfg.solver, cfg.nonlinear);
  } catch (const ContractionError& e) {
    fmt::print(err, "Picard iteration does not contract: {}\n", e.what());
    return kExitFailed;
  } catch (const SolverError& e) {
    fmt::print(err, "nonlinear solve failed: {}\n", e.what());
    return kExitFailed;
  }
  const auto& nr = res.report;
  if (!nr.smallness.below)
    fmt::print(err, "warning: smallness parameter {:.3e} exceeds the advisory threshold {:.3e}\n", nr.smallness.delta,
               nr.smallness.threshold);
  auto ids = conservation_suite(*s.op, res.solution);
  ids.push_back(IdentityReport::make("nonlinear residual", nr.residual, 0.0, Provenance::Derived, kResidualTol));
  ids.push_back(IdentityReport::make("boundary relation f(0,v) - f(0,Rv) - f_b(Rv)", nr.boundary_defect, 0.0,
                                     Provenance::Paper, kBoundaryTol));
  ids.push_back(IdentityReport::make("Picard ratio deficit max(0, max ratio - 1)", std::max(0.0, nr.max_ratio - 1.0),
                                     0.0, Provenance::Paper, 0.0));
  write_field_artifacts(cfg, *s.op, res.solution);
  print_identities(out, ids);
  for (std::size_t j = 0; j < nr.diffs.size(); ++j)
    fmt::print(out, "  iterate {}: diff {:.3e} norm {:.3e}{}\n", j + 1, nr.diffs[j],
               j + 1 < nr.norms.size() ? nr.norms[j + 1] : 0.0,
               j > 0 ? fmt::format(" ratio {:.3e}", nr.ratios[j - 1]) : "");
  const auto verdict = classify_history(nr.diffs, 0.0);
  const bool ok = all_pass(ids) && nr.converged;
  if (!nr.converged) fmt::print(err, "Picard iteration stopped after {} iterates without converging\n", nr.iterations);
  json rep = base_report("nonlinear", cfg, *s.op);
  rep["nonlinear"] = to_json(nr);
  rep["nonlinear"]["history_class"] = to_json(verdict);
  rep["linear"] = to_json(res.solution.report);
  rep["solution"] = solution_json(cfg, *s.op, res.solution);
  finish_report(cfg, rep, ids, ok);
  fmt::print(out, "nonlinear: {} (delta {:.3e}, terminal ratio {:.3e})\n", ok ? "converged, all checks pass" : "failed",
             nr.smallness.delta, nr.terminal_ratio);
  return ok ? kExitOk : kExitFailed;
}

// Field-level checks recomputed from the stored snapshots.
std::vector<IdentityReport> snapshot_checks(const OperatorSet& op, const Snapshot& field, const Snapshot& lifted,
                                            const std::vector<double>& f_b)
{
  const auto& grid = op.grid();
  const std::size_t N = grid.size();
  const auto psi = raw_invariants(grid);
  std::vector<double> t(N);
  for (std::size_t i = 0; i < N; ++i) t[i] = grid.rel(i)[2] * psi[0][i];
  double lo = 1e300, hi = -1e300, top = 0.0, b3 = 0.0;
  for (Eigen::Index k = 0; k < lifted.values.cols(); ++k) {
    const std::span<const double> col(lifted.values.col(k).data(), N);
    // flux conservation holds at the wall and the far end exactly; interior samples are cell centres
    if (k == 0 || k + 1 == lifted.values.cols()) {
      const double v = op.inner(t, col);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      top = std::max(top, std::abs(v));
    }
    b3 = std::max(b3, std::abs(macro_coefficients(op, col.data())[3]));
  }
  const ConservationTolerance tol;
  std::vector<IdentityReport> ids;
  ids.push_back(IdentityReport::make("stored: wall-to-far-end v3 sqrt(mu) flux variation", hi - lo, 0.0,
                                     Provenance::Paper, tol.flux));
  ids.push_back(IdentityReport::make("stored: max |v3 sqrt(mu) flux|", top, 0.0, Provenance::Paper, tol.flux));
  ids.push_back(IdentityReport::make("stored: max |b3|", b3, 0.0, Provenance::Paper, tol.b3));
  const Eigen::Index last = field.values.cols() - 1;
  const auto r = shift_conditions(op, std::span<const double>(field.values.col(last).data(), N));
  const char* names[4] = {"v3 sqrt(mu)", "L^-1 A31", "L^-1 A32", "L^-1 B3"};
  for (int k = 0; k < 4; ++k)
    ids.push_back(IdentityReport::make(std::string("stored: far-end condition against ") + names[k], r[k], 0.0,
                                       Provenance::Paper, tol.shift));
  ids.push_back(IdentityReport::make("stored: boundary relation f(0,v) - f(0,Rv) - f_b(Rv)",
                                     boundary_relation(grid, field.values.col(0), f_b), 0.0, Provenance::Paper,
                                     kBoundaryTol));
  return ids;
}

int cmd_verify(const RunConfig& cfg, std::ostream& out, std::ostream& err)
{
  const json rep = read_json(path_in(cfg, "report.json"));
  const std::string command = rep.at("command").get<std::string>();
  Setup s = setup(cfg, out);
  const std::string hash = fmt::format("{:016x}", s.grid->hash());
  if (rep.at("grid").at("hash").get<std::string>() != hash) {
    fmt::print(err, "stored artifacts were produced on a different velocity grid ({} vs {})\n",
               rep.at("grid").at("hash").get<std::string>(), hash);
    return kExitFailed;
  }
  std::vector<IdentityReport> ids;
  for (const auto& r : rep.at("identities"))
    if (!r.at("pass").get<bool>())
      ids.push_back(IdentityReport::make("recorded: " + r.at("name").get<std::string>(),
                                         r.at("computed").is_number() ? r.at("computed").get<double>() : NAN,
                                         r.at("target").get<double>(), Provenance::Derived,
                                         r.at("tolerance").get<double>()));
  if (command == "operator") {
    const auto m = moment_identity_suite(*s.grid);
    ids.insert(ids.end(), m.begin(), m.end());
  } else {
    const Snapshot field = read_snapshot(path_in(cfg, "field.bin"));
    const Snapshot lifted = read_snapshot(path_in(cfg, "lifted.bin"));
    if (field.grid_hash != s.grid->hash() || lifted.grid_hash != s.grid->hash() ||
        field.values.rows() != static_cast<Eigen::Index>(s.grid->size())) {
      fmt::print(err, "snapshots do not match the configured velocity grid\n");
      return kExitFailed;
    }
    const auto f_b = build_boundary(*s.op, cfg.boundary, cfg.weight);
    const auto chk = snapshot_checks(*s.op, field, lifted, f_b);
    ids.insert(ids.end(), chk.begin(), chk.end());
    const auto stored = read_profiles_csv(path_in(cfg, "profiles.csv"));
    const auto again = profile_rows(*s.op, field.x, field.values, cfg.weight);
    double mism = stored.size() == again.size() ? 0.0 : 1.0;
    for (std::size_t k = 0; k < std::min(stored.size(), again.size()); ++k) {
      const auto& a = stored[k];
      const auto& b = again[k];
      for (auto [u, v] : {std::pair{a.x, b.x}, {a.a, b.a}, {a.b1, b.b1}, {a.b2, b.b2}, {a.b3, b.b3}, {a.c, b.c},
                          {a.sup_wf, b.sup_wf}, {a.ip_nu_norm, b.ip_nu_norm}})
        mism = std::max(mism, std::abs(u - v));
    }
    ids.push_back(IdentityReport::make("stored: profiles CSV reproduced from the field snapshot", mism, 0.0,
                                       Provenance::Trivial, 0.0));
  }
  print_identities(out, ids);
  const bool ok = all_pass(ids);
  if (cfg.outputs.json) write_json(path_in(cfg, "verify.json"), {{"command", command}, {"identities", to_json(ids)}, {"pass", ok}});
  fmt::print(out, "verify ({}): {}\n", command, ok ? "all checks pass" : "check failures");
  return ok ? kExitOk : kExitFailed;
}

}  // namespace

void apply_overrides(RunConfig& cfg, const RunOverrides& flags)
{
  if (const char* e = std::getenv("KBL_OUT_DIR"); e && *e) cfg.outputs.dir = e;
  if (const char* e = std::getenv("KBL_CACHE_DIR"); e && *e) cfg.outputs.cache = e;
  if (flags.out_dir) cfg.outputs.dir = *flags.out_dir;
  if (flags.cache_dir) cfg.outputs.cache = *flags.cache_dir;
  if (flags.threads) {
    if (*flags.threads < 1) throw ConfigError("--threads must be >= 1");
    cfg.threads = *flags.threads;
  }
  if (cfg.outputs.dir.empty()) throw ConfigError("output directory must not be empty");
}

int run_command(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err)
{
  if (command == "operator") return cmd_operator(cfg, out, err);
  if (command == "linear") return cmd_linear(cfg, out, err);
  if (command == "nonlinear") return cmd_nonlinear(cfg, out, err);
  if (command == "verify") return cmd_verify(cfg, out, err);
  throw ConfigError("unknown subcommand '" + command + "' (expected operator, linear, nonlinear or verify)");
}

}  // namespace kbl
