#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbl/kernel.hpp"
#include "kbl/linear_solver.hpp"
#include "kbl/nonlinear_solver.hpp"
#include "kbl/velocity_grid.hpp"

namespace kbl {

// Invalid run configuration; `where` names the field and line when known.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Boundary data families, written in c = v - u:
//   zero
//   v1v2_gauss  c1 c2 exp(-|c|^2) on c3 < 0
//   v1_gauss    c1 exp(-|c|^2) on c3 < 0 (fails the compatibility check)
//   even_gauss  (1 + c3/2 + c1^2/5) exp(-|c|^2) on c3 < 0, made compatible by
//               subtracting a combination of exp(-|c|^2) and |c|^2 exp(-|c|^2)
//   tabulated   one value per velocity node read from `file`
// Analytic families are scaled so that sup |w f_b| = amplitude.
struct BoundarySpec {
  std::string family = "zero";
  double amplitude = 0.05;
  std::string file;
};

// Source families S(x, c) = e^{-decay x} g(c):
//   zero
//   v1v2_decay  g = c1 c2 sqrt(mu)
//   tabulated   g read from `file`, one value per node
// Scaled so that sup |nu^-1 w S(0, .)| = amplitude (analytic families only).
struct SourceSpec {
  std::string family = "zero";
  double amplitude = 0.0;
  double decay = 1.0;
  std::string file;
};

struct OutputSpec {
  std::string dir = "kbl_out";
  std::string cache;  // empty: no operator cache
  bool csv = true;
  bool snapshot = true;
  bool json = true;
};

struct GammaSpec {
  int n_azimuth = 16;
  int n_polar = 8;
  double max_gib = 2.0;  // memory allowed for the tabulated Gamma
};

struct RunConfig {
  GridSpec grid;
  WeightSpec weight;
  SolveConfig solver;
  NonlinearConfig nonlinear;
  GammaSpec gamma;
  BoundarySpec boundary;
  SourceSpec source;
  OutputSpec outputs;
  int threads = 1;
  std::string path;  // file the config was read from
};

// Parses YAML sections grid, weight, solver, nonlinear, gamma, boundary,
// source, outputs and the scalar `threads`. Unknown keys, type errors and
// violated invariants raise ConfigError with the field and line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<string>");
RunConfig load_config(const std::string& path);

std::vector<double> build_boundary(const OperatorSet& op, const BoundarySpec& b, const WeightSpec& w);
std::function<void(double, std::span<double>)> build_source(const OperatorSet& op, const SourceSpec& s,
                                                            const WeightSpec& w);

// Reads whitespace-separated numbers ('#' starts a comment); the count must equal `expected`.
std::vector<double> read_table(const std::string& path, std::size_t expected);

}  // namespace kbl
