#pragma once

#include <cmath>
#include <string>

namespace kbl {

enum class Provenance { Paper, Derived, Trivial };

inline const char* to_string(Provenance p)
{
  switch (p) {
    case Provenance::Paper: return "PAPER";
    case Provenance::Derived: return "DERIVED";
    case Provenance::Trivial: return "TRIVIAL";
  }
  return "?";
}

// One checked identity: pass iff |computed - target| <= tolerance.
struct IdentityReport {
  std::string name;
  double computed = 0.0;
  double target = 0.0;
  Provenance tag = Provenance::Derived;
  double tolerance = 0.0;
  bool pass = false;

  static IdentityReport make(std::string name, double computed, double target, Provenance tag, double tolerance)
  {
    IdentityReport r{std::move(name), computed, target, tag, tolerance, false};
    r.pass = std::isfinite(computed) && std::abs(computed - target) <= tolerance;
    return r;
  }
};

}  // namespace kbl
