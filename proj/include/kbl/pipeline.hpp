#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "kbl/config.hpp"

namespace kbl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;  // failed identity, solver flag, incompatible data, non-contraction
inline constexpr int kExitConfig = 2;

struct RunOverrides {
  std::optional<std::string> out_dir;
  std::optional<std::string> cache_dir;
  std::optional<int> threads;
};

// Command-line values win over KBL_OUT_DIR / KBL_CACHE_DIR, which win over the config.
void apply_overrides(RunConfig& cfg, const RunOverrides& flags);

// Subcommands: operator, linear, nonlinear, verify. Artifacts go to cfg.outputs.dir:
// profiles.csv, field.bin, lifted.bin and report.json (verify writes verify.json).
// Returns the process exit status; ConfigError propagates to the caller.
int run_command(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace kbl
