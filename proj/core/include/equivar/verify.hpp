#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "equivar/config.hpp"
#include "equivar/group.hpp"

namespace equivar {

/// Thresholds selected by the precision profile.
struct Tolerances {
  double equivariance;
  double invariance;
  static Tolerances for_precision(Precision p) {
    return p == Precision::f64 ? Tolerances{1e-6, 1e-8} : Tolerances{1e-4, 1e-4};
  }
};

struct VerifyOptions {
  Precision precision = Precision::f64;
  std::vector<GroupKind> groups{GroupKind::rot4, GroupKind::rot4_flip};
  /// Negative control: corrupt one Cayley entry of every group before the
  /// axiom suite.
  bool corrupt_cayley = false;
  std::uint64_t seed = 2024;
  /// Suites to run; empty runs all of them.
  std::vector<std::string> suites;
};

/// One assertion. `comparison` is "<=", ">" or "==".
struct CheckResult {
  std::string suite;
  std::string id;
  std::string property;  // manifest entry covered by this check
  double value = 0.0;
  std::string comparison;
  double threshold = 0.0;
  bool passed = false;
  double seconds = 0.0;
};

struct VerificationReport {
  Precision precision = Precision::f64;
  std::vector<CheckResult> checks;
  bool passed() const;
  std::vector<std::string> failed_ids() const;
};

struct PropertyEntry {
  std::string id;
  std::string statement;
};

/// The library's invariants and properties; run_verification asserts that
/// each entry is covered by at least one executed check.
const std::vector<PropertyEntry>& property_manifest();

/// Suite names in execution order.
const std::vector<std::string>& suite_names();

VerificationReport run_verification(const VerifyOptions& options);

/// One line per check, then a summary with the failing identifiers.
void print_verification(std::ostream& os, const VerificationReport& report);
/// Header `suite,id,property,value,comparison,threshold,passed,seconds`.
void write_verification_csv(std::ostream& os, const VerificationReport& report);

}  // namespace equivar
