#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fedrec {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  std::vector<std::string> case_lines;  // one JSON record per case
};

// Property/oracle checks with pinned tolerances. Each is deterministic in the
// seed and independent of the analytic gradient path it examines.
CheckResult check_normalization_suite(std::uint64_t seed);     // 1000 random pairs
CheckResult check_alpha_gradient_identity(std::uint64_t seed); // 20 configs, d=16 r=4 K=3
CheckResult check_downweight_proposition(std::uint64_t seed);  // 50 randomized cases
CheckResult check_representation_lemma(std::uint64_t seed);
CheckResult check_capacity_proposition();
CheckResult check_first_order_expansion(std::uint64_t seed);

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed);

}  // namespace fedrec
