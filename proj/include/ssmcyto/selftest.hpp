#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ssmcyto/gradcheck.hpp"

namespace ssmcyto {

// Invariant suites shared by `ssmcyto selftest` and the acceptance runner.
// Each reports its worst measured error so callers can apply their own bound.
struct SuiteResult {
  std::string name;
  bool passed = false;
  std::size_t cases = 0;
  double worst = 0.0;
  std::string detail;
  double seconds = 0.0;
};

struct ScanSuiteOptions {
  std::size_t instances = 200;
  std::size_t max_len = 256, max_dim = 16, max_state = 16;
  std::uint64_t seed = 1;
  double tol = 1e-9;
};

// Sequential vs Blelloch scan on random instances with nonzero h0; worst is
// the largest max|a - b| / max|b| over outputs and final states.
SuiteResult scan_equivalence_suite(const ScanSuiteOptions& opt = {});

struct GradItem {
  std::string name;
  bool composite = false;
  GradCheckReport report;
};

// Every differentiable op (primitives) plus the S6 layer, patch merging and
// the six block variants (composites), checked element by element.
std::vector<GradItem> gradient_items(std::uint64_t seed = 2, bool include_blocks = true);
SuiteResult gradient_suite(const std::vector<GradItem>& items, double primitive_tol = 1e-4,
                           double composite_tol = 1e-3);

// Every traversal kind and direction on grids up to max_side², plus
// cross_merge against a scatter-add oracle. worst counts mismatches.
SuiteResult traversal_suite(std::size_t max_side = 8);

// Random confusion matrices against a per-sample counting oracle and the
// weighted-recall identity.
SuiteResult metric_identity_suite(std::size_t matrices = 1000, std::uint64_t seed = 3, double tol = 1e-12);

// Runs every suite, one line each; true when all pass.
bool run_selftest(std::ostream& out);

}  // namespace ssmcyto
