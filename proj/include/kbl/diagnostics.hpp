#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kbl/collision_operator.hpp"
#include "kbl/field.hpp"
#include "kbl/gamma.hpp"
#include "kbl/linear_solver.hpp"
#include "kbl/report.hpp"

namespace kbl {

// Gaussian moment identities used by the macroscopic estimates, evaluated by quad.
std::vector<IdentityReport> moment_identity_suite(const VelocityGrid& grid, double rel_tol = 1e-6);

// Structural checks of an assembled operator: projector, null space, symmetry,
// coercivity, the shift constants and (when gamma is given) conservation of Gamma.
std::vector<IdentityReport> operator_identity_suite(const OperatorSet& op, const CollisionGamma* gamma,
                                                    std::uint64_t seed = 7);

// Relative conservation defect |P Gamma_raw(f, f)| / |Gamma_raw(f, f)|_nu of the
// unprojected quadrature, maximized over `count` random smooth f.
double gamma_conservation_defect(const CollisionGamma& gamma, int count, std::uint64_t seed);

struct WeightedNorms {
  double sup = 0.0;                // sup_{x,v} e^{sigma x} w |f|
  std::vector<double> x;           // sample positions of the profile
  std::vector<double> nu_profile;  // |f(x, .)|_nu
  double l2 = 0.0;                 // |e^{sigma x} f|_{L^2_{x,v}}
};
// Throws std::invalid_argument if e^{sigma d} overflows.
WeightedNorms weighted_norms(const OperatorSet& op, const KineticField& f, const WeightSpec& weight, double sigma);

// History of a nonnegative sequence tested against the window recursion
// a_{i+1+k} <= A_i^k / 8 + D (clause 1) or a_{i+1+k} <= A_i^k / 8 + C eta^{i+k+1}
// (clause 2), where A_i^k = max(a_i, ..., a_{i+k}).
struct SequenceMonitor {
  int k = 0;
  std::vector<double> a;
  double D = 0.0;
  double eta = 0.0;  // clause 2 when C > 0
  double C = 0.0;
};

enum class SequenceClass { Contractive, HypothesisFails, EnvelopeViolated, TooShort, Invalid };
const char* to_string(SequenceClass c);

struct SequenceVerdict {
  SequenceClass cls = SequenceClass::TooShort;
  int clause = 1;
  int k = 0;
  int hypothesis_failure = -1;  // first i violating the recursion
  int envelope_failure = -1;    // first i with A_i^k above the envelope
  std::vector<double> envelope;  // bound for i = k+1, k+2, ... where A_i^k is defined
  std::vector<double> window_max;
};
SequenceVerdict sequence_bound(const SequenceMonitor& m);

// Smallest k <= k_max for which the clause-1 recursion holds with drift D, and its verdict.
SequenceVerdict classify_history(const std::vector<double>& a, double D, int k_max = 4);

enum class SolveStage { Penalized, Unpenalized, Shifted };
const char* to_string(SolveStage s);

struct ConservationTolerance {
  double integral = 1e-6;  // penalized zero-mean integrals
  double flux = 1e-8;      // v3 sqrt(mu) flux, constancy and value
  double b3 = 1e-6;
  double shift = 1e-6;     // far-end orthogonality and shifted fluxes
};

// Stage-appropriate conservation identities of a field on [0, d]:
// penalized  -> int_0^d a, b1, b2, c vanish;
// unpenalized -> v3 sqrt(mu) flux constant and zero, b3 = 0;
// shifted    -> far-end orthogonality and the shifted flux identities.
std::vector<IdentityReport> conservation_suite(const OperatorSet& op, const KineticField& f, SolveStage stage,
                                               const ConservationTolerance& tol = {});

// All stages of a finished linear solve.
std::vector<IdentityReport> conservation_suite(const OperatorSet& op, const LinearSolution& sol,
                                               const ConservationTolerance& tol = {});

bool all_pass(const std::vector<IdentityReport>& r, bool paper_only = false);

}  // namespace kbl
