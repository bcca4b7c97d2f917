#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ccseg {

struct CheckOutcome {
  bool pass = false;
  std::string measured;
};

/// One acceptance property with its tolerance baked in.
struct AcceptanceCheck {
  int criterion = 0;
  std::string name;
  /// Slow checks train networks and are skipped by a quick verify run.
  bool slow = false;
  std::function<CheckOutcome()> run;
};

struct CheckReport {
  int criterion = 0;
  std::string name;
  bool pass = false;
  std::string measured;
  double seconds = 0.0;
};

std::vector<AcceptanceCheck> acceptance_checks();

/// Runs the selected checks, printing one line per check as it finishes.
/// An exception inside a check counts as a failure with the message as value.
std::vector<CheckReport> run_checks(const std::vector<AcceptanceCheck>& checks, std::ostream& out);

}  // namespace ccseg
