#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbl/collision_operator.hpp"
#include "kbl/field.hpp"
#include "kbl/kernel.hpp"
#include "kbl/report.hpp"
#include "kbl/transport.hpp"

namespace kbl {

// Raised when a schedule stops contracting or a limit sequence is not Cauchy.
// The message carries the measured history.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Wall cutoff: 1 on [0, 1], 0 on [2, inf), quintic smoothstep in between.
double cutoff_chi(double x);
double cutoff_dchi(double x);

struct LinearProblem {
  // S(x, .) on the full velocity grid; empty means zero
  std::function<void(double x, std::span<double> out)> source;
  double source_decay = 0.0;  // declared decay rate of the source
  std::vector<double> f_b;    // per node, zero where v3 >= 0
  WeightSpec weight;
};

enum class ContinuationMode { First, All, None };
ContinuationMode parse_continuation(const std::string& s);
std::string to_string(ContinuationMode m);

struct SolveConfig {
  double sigma0 = 0.3;
  int lambda_steps = 4;
  ContinuationMode continuation = ContinuationMode::First;
  int n_levels = 3;  // damping levels n0, 2 n0, ... before the undamped solve
  int n_max = 64;
  std::vector<double> eps_schedule{1e-1, 1e-2, 1e-3, 1e-4};
  std::vector<double> d_schedule{4.0, 8.0, 16.0};
  double tol = 1e-10;         // fixed-point tolerance, weighted sup, relative to the data
  double cauchy_tol = 1e-6;   // acceptance of limits and the final discrepancy
  double compat_tol = 1e-10;  // compatibility and lift moment tolerance, relative to |f_b|
  double dx_max = 1.0 / 16.0;
  int gmres_restart = 60;
  int gmres_max_iter = 4000;
  double coarse_dx = 1.0;  // spacing of the hat functions spanning the GMRES augmentation space

  void validate() const;
};

struct CompatibilityResult {
  std::array<double, 4> moments{};  // v3 sqrt(mu) f_b against 1, c1, c2, |c|^2
  double tolerance = 0.0;
  bool pass = true;
};
CompatibilityResult check_compatibility(const OperatorSet& op, std::span<const double> f_b, double tol);

struct LiftResult {
  CellSource g;                        // full velocity rows
  std::array<double, 4> moment_residual{};  // max over cells of the four conserved moments of g
  bool pass = true;
};
// g = S + v3 chi'(x) f_b + chi(x) L f_b projected onto cell-wise linears.
LiftResult lift_boundary(const OperatorSet& op, const LinearProblem& problem, const SlabGrid& slab, double tol);

struct StageRecord {
  std::string kind;  // "continuation", "damped", "specular", "half_eps", "polish"
  double d = 0, eps = 0, eta = 0;
  int n = 0;  // 0 for the undamped problem
  int iterations = 0;
  double residual = 0.0;  // weighted sup of the fixed-point residual
};

struct ContinuationStep {
  int sector = 0;
  double lambda = 0.0, dlambda = 0.0;
  int halvings = 0;
  bool accepted = false;       // false: the step was retried with half the increment
  std::vector<double> diffs;   // successive fixed-point differences
  std::vector<double> ratios;  // diffs[i+2] / diffs[i] above the noise floor
  double max_ratio = 0.0;
};

struct SlabReport {
  double d = 0;
  int n0 = 0;
  double boundary_ratio = 0.0;  // measured damped boundary-iteration contraction at n0
  std::vector<int> n_values;
  std::vector<std::vector<double>> n_diffs;  // per eps: |f_n - f_2n|, then |f_nmax - f_inf|
  std::vector<double> eps_values, eps_diffs;  // |f_eps - f_eps/2|
  std::array<double, 4> penalized_means{};   // int a, b1, b2, c of the last penalized solve
  double energy_mismatch = 0.0;
  double polish_residual = 0.0;
  double max_b3 = 0.0, flux_variation = 0.0;
  std::array<double, 4> phi{};
  Eigen::Matrix4d shift_matrix = Eigen::Matrix4d::Zero();
  std::array<double, 4> shift_residual{};
  double sigma_fit = 0.0, fit_amplitude = 0.0;
  bool fit_ok = false;
  double discrepancy = -1.0;  // against the previous slab, -1 for the first
};

struct SolveReport {
  std::vector<StageRecord> stages;
  std::vector<ContinuationStep> continuation;
  std::vector<SlabReport> slabs;
  CompatibilityResult compatibility;
  double spectral_bound = 0.0;  // smallest positive decay rate of the null-free classes, 0 if none
  std::vector<std::string> flags;
};

struct DecayFit {
  double sigma = 0.0, amplitude = 0.0;
  int points = 0;
  bool trivial = false;  // field identically zero
  bool ok = false;       // sigma > 0 with at least 3 points above the noise floor
};
// Least-squares slope of log sup_v w|f(x, .)| over cell centres in [x_lo, x_hi].
DecayFit fit_decay(const KineticField& f, const std::vector<double>& w, double x_lo, double x_hi,
                   double floor_rel = 1e-11);

struct LinearSolution {
  KineticField field;  // shifted physical unknown on the largest slab
  KineticField unshifted;  // physical unknown before the shift
  KineticField lifted;  // unshifted lifted unknown f + chi f_b (specular) on the largest slab
  KineticField penalized;  // lifted unknown of the last penalized solve on the largest slab
  MacroProfile macro;
  std::array<double, 4> phi{};
  DecayFit fit;
  SolveReport report;
};

// Test functions v3 sqrt(mu), L^-1 A31, L^-1 A32, L^-1 B3 of the far-end conditions.
std::array<std::vector<double>, 4> shift_test_functions(const OperatorSet& op);
// quad(v3 f t_k) for the four test functions
std::array<double, 4> shift_conditions(const OperatorSet& op, std::span<const double> trace_d);

struct ShiftResult {
  std::array<double, 4> phi{};
  Eigen::Matrix4d matrix = Eigen::Matrix4d::Zero();
  std::array<double, 4> rhs{};
};
ShiftResult compute_shift_phi(const OperatorSet& op, std::span<const double> trace_d);
// back substitution with the structured matrix (1,0,0,2),(0,k1,0,0),(0,0,k1,0),(0,0,0,k2)
std::array<double, 4> solve_shift_system(double kappa1, double kappa2, const std::array<double, 4>& rhs);
// phi from the far-end condition values r of the unshifted field: A phi = -r
std::array<double, 4> shift_phi_from_conditions(double kappa1, double kappa2, const std::array<double, 4>& r);
void apply_shift(const OperatorSet& op, const std::array<double, 4>& phi, KineticField& f);

// Per-node weight w(v) on the full grid.
std::vector<double> node_weights(const VelocityGrid& grid, const WeightSpec& w);

// Solver state for one parity class, in scaled coordinates.
struct SectorState {
  int sector = 0;
  SweepResult u;
};
using SlabState = std::vector<SectorState>;

// Data of one parity class in scaled coordinates. The truncated problems are
// posed for the physical unknown: volume source src - eps chi f_b and wall
// data f_b(Rv) entering at x = 0 (multiplied by the damping factor).
struct SectorData {
  bool on = false;
  CellSource src;
  CellSource chi_fb;    // cell projection of chi(x) f_b
  Eigen::VectorXd wall;  // f_b(R v) on v3 > 0 nodes, zero elsewhere
};
using SectorSources = std::array<SectorData, 4>;

// Truncated-slab engine: damped/penalized solves, continuation and limits.
class SlabSolver {
 public:
  SlabSolver(const OperatorSet& op, SlabGrid slab, const WeightSpec& weight, const SolveConfig& cfg);

  const SlabGrid& slab() const { return slab_; }
  const OperatorSet& op() const { return op_; }

  // volume source (full rows) and boundary data split into parity classes
  SectorSources split(const CellSource& src_full, std::span<const double> f_b) const;
  CellSource merge_source(const SectorSources& g) const;
  KineticField to_field(const SlabState& s) const;
  SlabState from_field(const KineticField& f, const SectorSources& pattern) const;
  SlabState zero_state(const SectorSources& g) const;

  // Solves (eps + v3 dx + nu - lambda K) f = g with f = eta f(R) at both walls,
  // by GMRES on the sweep-preconditioned system, warm-started from `state`.
  StageRecord solve(const SectorSources& g, double eps, double eta, double lambda, SlabState& state,
                    double rel_tol) const;
  // Same problem reached through lambda-continuation from lambda = 0.
  StageRecord solve_continuation(const SectorSources& g, double eps, double eta, SlabState& state,
                                 std::vector<ContinuationStep>& log) const;

  // Contraction ratio of the damped boundary iteration at lambda = 0 (max over `iters`).
  double boundary_iteration_ratio(const SectorSources& g, double eps, double eta, int iters = 5) const;

  // weighted sup of the point-value difference
  double distance(const SlabState& a, const SlabState& b) const;
  double norm(const SlabState& a) const;
  double source_norm(const SectorSources& g) const;
  // weighted sup of f - sweep(K f + g) at the points, for the given problem
  double residual(const SectorSources& g, double eps, double eta, const SlabState& s) const;

  struct Energy {
    double lhs = 0, rhs = 0, mismatch = 0;
    double penalty = 0, boundary = 0, dissipation = 0;
  };
  Energy energy_balance(const SectorSources& g, double eps, double eta, const SlabState& s) const;

  // int_0^d of the coefficients a, b1, b2, c of the lifted unknown f + chi f_b
  std::array<double, 4> zero_mean_integrals(const SectorSources& g, const SlabState& s) const;
  // removes constant v3-even collision invariants so those integrals vanish
  void enforce_zero_means(const SectorSources& g, SlabState& s) const;

  static void axpby(double a, const SlabState& x, double b, SlabState& y);

 private:
  struct Sector {
    int s = 0;
    std::vector<double> v3;
    std::vector<std::size_t> refl;
    Eigen::VectorXd wsup;  // max over images of w / scale
    Eigen::MatrixXd even_inv;  // orthonormal v3-even invariants (columns)
    Eigen::MatrixXd coarse_v;  // velocity shapes of the augmentation space
  };
  Eigen::MatrixXd coarse_basis(int s, const Eigen::VectorXd& dm, const Eigen::VectorXd& ds) const;
  void sweep_sector(int s, double eps, double eta, const CellSource& q, SweepResult& out, bool points,
                    const Eigen::VectorXd* bsrc = nullptr) const;
  static CellSource effective(const SectorData& g, double eps);
  CellSource merge_chi(const SectorSources& g) const;
  CellSource apply_K(int s, const Eigen::MatrixXd& mean, const Eigen::MatrixXd& slope, double lambda,
                     const CellSource* g) const;
  double cell_sup(int s, const Eigen::MatrixXd& mean, const Eigen::MatrixXd& slope) const;
  double point_sup(int s, const SweepResult& u) const;

  const OperatorSet& op_;
  SlabGrid slab_;
  WeightSpec weight_;
  SolveConfig cfg_;
  std::array<Sector, 4> sec_;
  std::vector<double> w_full_;
};

// eps -> 0 and n -> inf on one slab, then the eps = 0 polish and zero-mean selection.
// The last penalized state is copied to `penalized` when given.
SlabState limit_eps_n(const SlabSolver& solver, const SectorSources& g, const SolveConfig& cfg, bool continuation,
                      SlabReport& rep, SolveReport& report, SlabState* penalized = nullptr);

// Full chain over the d schedule.
LinearSolution extend_domain(const OperatorSet& op, const LinearProblem& problem, const SolveConfig& cfg);

// Smallest positive gamma with L phi = gamma v3 phi over the classes without invariants.
double spectral_bound(const OperatorSet& op);

// Physical unknown f - chi f_b from the lifted one, and back.
KineticField unlift(const KineticField& lifted, std::span<const double> f_b);
KineticField lift(const KineticField& physical, std::span<const double> f_b);

}  // namespace kbl
