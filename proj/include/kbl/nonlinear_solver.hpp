#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kbl/gamma.hpp"
#include "kbl/linear_solver.hpp"

namespace kbl {

// Raised when the Picard map fails to contract; the message carries the ratios.
class ContractionError : public SolverError {
 public:
  using SolverError::SolverError;
};

struct NonlinearProblem {
  std::function<void(double x, std::span<double> out)> source;  // S(x, .), empty means zero
  double source_decay = 0.0;
  std::vector<double> f_b;
  WeightSpec weight;
};

struct NonlinearConfig {
  double tol = 1e-8;  // stop when the weighted sup difference of successive iterates drops below
  int max_iter = 50;
  double sigma = -1.0;          // exponent of e^{sigma x} in the difference norm; negative means sigma0 / 2
  double delta_threshold = 0.5;  // advisory bound on the smallness parameter
  double skip_rel = 1e-8;        // cells where the iterate is below this fraction of its sup contribute no Gamma
  double source_orthogonality_tol = 1e-8;

  void validate() const;
};

struct Smallness {
  double delta = 0.0;
  double boundary = 0.0;  // |w f_b|_inf
  double source = 0.0;    // |nu^-1 w e^{sigma0 x} S|_inf over the sampled slab
  double threshold = 0.0;
  bool below = true;
};
Smallness check_smallness(const OperatorSet& op, const NonlinearProblem& problem, double sigma0, double d,
                          double threshold);

struct NonlinearReport {
  Smallness smallness;
  double sigma = 0.0;  // exponent used in the iterate norms
  std::vector<double> diffs;   // |e^{sigma x} w (f^{j+1} - f^j)|
  std::vector<double> ratios;  // diffs[j] / diffs[j-1]
  std::vector<double> norms;   // |e^{sigma x} w f^j|
  std::vector<int> gmres_iterations;
  double max_ratio = 0.0, terminal_ratio = 0.0;
  double c1_estimate = 0.0;    // max_j norms_j (sigma0 - sigma) / (2 delta)
  double source_defect = 0.0;  // max relative |P S| over the sampled slab
  double residual = 0.0;       // weighted sup of f - mild solution with source K f + Gamma(f, f) + S
  double boundary_defect = 0.0;  // max |f(0,v) - f(0,Rv) - f_b(Rv)| on v3 > 0
  int iterations = 0;
  bool converged = false;
};

struct NonlinearSolution {
  LinearSolution solution;  // last iterate with its linear report
  NonlinearReport report;
};

// Cell-wise projection of Gamma(f, f) onto linears: mean Gamma(m, m) + Gamma(s, s) h^2/12,
// slope Gamma(m, s) + Gamma(s, m).
CellSource gamma_cells(const CollisionGamma& gamma, const KineticField& f, double skip_rel);

// Picard iteration f^{j+1} = linear solution with source Gamma(f^j, f^j) + S, from f^0 = 0.
NonlinearSolution picard_solve(const OperatorSet& op, const CollisionGamma& gamma, const NonlinearProblem& problem,
                               const SolveConfig& cfg, const NonlinearConfig& ncfg);

}  // namespace kbl
