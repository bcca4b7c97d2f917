// Runs every acceptance criterion, slow training checks included, and prints
// one PASS/FAIL line per criterion. Exit status is non-zero if any fails.

#include <iostream>

#include "ccseg/verify.hpp"

int main() {
  const auto reports = ccseg::run_checks(ccseg::acceptance_checks(), std::cout);
  int failed = 0;
  for (const auto& r : reports) failed += !r.pass;
  std::cout << (reports.size() - static_cast<std::size_t>(failed)) << "/" << reports.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
