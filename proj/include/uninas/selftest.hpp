#pragma once

#include <string>
#include <vector>

namespace uninas {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Gradient checks, analytic-vs-counted cost equality, and encoding/config
// round trips. inject_fault corrupts one expected value to prove the harness
// reports failures (used by the test suite only).
std::vector<SelfTestResult> run_selftests(bool inject_fault = false);

}  // namespace uninas
