#pragma once

#include <map>
#include <string>
#include <vector>

#include "fedrec/types.hpp"

namespace fedrec {

struct MetricRecord {
  ClientId client = -1;
  int round = -1;
  std::string split;  // "val" or "test"
  std::map<std::string, double> values;  // "H@5", "N@10", ...
  int user_count = 0;
};

struct ScoredUser {
  Vector scores;          // one score per candidate, candidate i has id id_offset + i
  ItemId ground_truth = 0;
  ItemId id_offset = 0;
};

// 1-based rank of the ground truth; ties broken by ascending item id.
int rank_of_ground_truth(const ScoredUser& user);

MetricRecord rank_and_score(const std::vector<ScoredUser>& users, const std::vector<int>& k_list);

struct AlphaTrajectory {
  std::vector<int> rounds;
  std::vector<Matrix> alpha;  // K x K per round, row i = client i's weights
  int convergence_round = -1;  // -1 means "none"
};

// Convergence round: first round after which max entrywise |delta alpha| stays
// below 0.01 for 3 consecutive rounds.
AlphaTrajectory alpha_trajectory(const std::vector<Matrix>& alpha_per_round,
                                 const std::vector<int>& rounds);

}  // namespace fedrec
