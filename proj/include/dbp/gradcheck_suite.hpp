#pragma once

// Registry of finite-difference checks, one per differentiable operation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dbp/gradcheck.hpp"

namespace dbp {

struct GradcheckCase {
  std::string op;
  // Builds inputs at a generic point drawn from seed and checks them.
  std::function<GradCheckResult(std::uint64_t seed, const GradCheckOptions& opts)> run;
};

std::vector<GradcheckCase> default_gradcheck_cases();

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::string worst;
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 0.0;
  std::vector<GradcheckEntry> entries;
  bool all_passed() const;
  std::vector<std::string> failures() const;
};

GradcheckReport run_gradcheck(const std::vector<GradcheckCase>& cases, std::uint64_t seed,
                              const GradCheckOptions& opts = {});

}  // namespace dbp
