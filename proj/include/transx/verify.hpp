#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace transx {

struct PropertyResult {
  std::size_t instances = 0;
  double worst_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct Property {
  std::string name;    // "<module>.<property>"
  std::string module;  // tensor, rng, autodiff, rope, ssd, attention, blocks, lm, cli
  std::string summary;
  std::function<PropertyResult()> run;
};

/// Every executable property, in report order.
const std::vector<Property>& property_registry();

/// Names of the invariants the suite must cover, one per stated invariant.
const std::vector<std::string>& required_properties();

/// Names present on one side only (required but unregistered, or registered
/// but not required). Empty when coverage is 1:1.
std::vector<std::string> registry_coverage_gaps();

struct VerifyOptions {
  /// A module name selects that module; anything else is a regex searched
  /// in property names.
  std::optional<std::string> filter;
  /// Enables the rotation sign-flip mutation for the duration of the run.
  bool inject_rotation_fault = false;
};

struct VerifyOutcome {
  std::string name;
  std::string module;
  PropertyResult result;
  double seconds = 0.0;
};

struct VerifyReport {
  std::vector<VerifyOutcome> outcomes;
  bool all_passed() const;
};

/// Throws ConfigError on an invalid regex or a filter that matches nothing.
VerifyReport run_verify(const VerifyOptions& options, const std::function<void(const VerifyOutcome&)>& on_outcome = {});

}  // namespace transx
