#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "kbl/collision_operator.hpp"
#include "kbl/diagnostics.hpp"
#include "kbl/field.hpp"
#include "kbl/kernel.hpp"
#include "kbl/linear_solver.hpp"
#include "kbl/nonlinear_solver.hpp"
#include "kbl/report.hpp"

namespace kbl {

// Column order of the profiles CSV.
inline constexpr const char* kProfileColumns = "x,a,b1,b2,b3,c,sup_wf,ip_nu_norm";

struct ProfileRow {
  double x = 0, a = 0, b1 = 0, b2 = 0, b3 = 0, c = 0, sup_wf = 0, ip_nu_norm = 0;
};

// One row per sample point (wall, cell centres, far end): macroscopic
// coefficients, sup_v w|f| and the nu-norm |f(x, .)|_nu.
std::vector<ProfileRow> profile_rows(const OperatorSet& op, const KineticField& f, const WeightSpec& weight);
std::vector<ProfileRow> profile_rows(const OperatorSet& op, const std::vector<double>& xs, const Eigen::MatrixXd& samples,
                                     const WeightSpec& weight);
void write_profiles_csv(const std::string& path, const std::vector<ProfileRow>& rows);
std::vector<ProfileRow> read_profiles_csv(const std::string& path);

// Flat binary snapshot: 64-byte header (magic "KBLSNAP", version, grid hash,
// x-count, v-count, zero padding), then x positions, then values x-major
// (all velocities of the first point, then the next point, ...).
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct Snapshot {
  std::uint64_t grid_hash = 0;
  std::vector<double> x;
  Eigen::MatrixXd values;  // velocity rows, one column per x
};
void write_snapshot(const std::string& path, std::uint64_t grid_hash, const KineticField& f);
Snapshot read_snapshot(const std::string& path);

// Cache key component derived from the weight parameters.
std::uint64_t weight_key(const WeightSpec& w);
// <dir>/operator_<grid hash>_k<kernel version>_<weight key>.bin
std::string operator_cache_path(const std::string& dir, const VelocityGrid& grid, const WeightSpec& w);

struct CacheOutcome {
  std::string path;  // empty without a cache directory
  bool hit = false;
  bool written = false;
};
// Loads the operator from `dir` when a matching file exists, otherwise assembles
// it and (with a non-empty dir) stores it.
OperatorSet load_or_assemble(const VelocityGrid& grid, const WeightSpec& w, const std::string& dir,
                             CacheOutcome& outcome);

nlohmann::json to_json(const IdentityReport& r);
nlohmann::json to_json(const std::vector<IdentityReport>& r);
nlohmann::json to_json(const SolveReport& r);
nlohmann::json to_json(const NonlinearReport& r);
nlohmann::json to_json(const SequenceVerdict& v);

void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

}  // namespace kbl
