#include "fedrec/metrics.hpp"

#include <cmath>

#include "fedrec/errors.hpp"

namespace fedrec {

int rank_of_ground_truth(const ScoredUser& user) {
  const Eigen::Index gt = user.ground_truth - user.id_offset;
  if (gt < 0 || gt >= user.scores.size())
    throw EvalError("rank_and_score: ground truth absent from candidate set");
  const double gt_score = user.scores(gt);
  int rank = 1;
  for (Eigen::Index i = 0; i < user.scores.size(); ++i) {
    if (i == gt) continue;
    if (user.scores(i) > gt_score || (user.scores(i) == gt_score && i < gt)) ++rank;
  }
  return rank;
}

MetricRecord rank_and_score(const std::vector<ScoredUser>& users, const std::vector<int>& k_list) {
  MetricRecord rec;
  rec.user_count = static_cast<int>(users.size());
  for (int k : k_list) {
    rec.values["H@" + std::to_string(k)] = 0.0;
    rec.values["N@" + std::to_string(k)] = 0.0;
  }
  if (users.empty()) return rec;
  for (const auto& user : users) {
    const int rank = rank_of_ground_truth(user);
    for (int k : k_list) {
      if (rank <= k) {
        rec.values["H@" + std::to_string(k)] += 1.0;
        rec.values["N@" + std::to_string(k)] += 1.0 / std::log2(rank + 1.0);
      }
    }
  }
  for (auto& [name, v] : rec.values) v /= static_cast<double>(users.size());
  return rec;
}

AlphaTrajectory alpha_trajectory(const std::vector<Matrix>& alpha_per_round,
                                 const std::vector<int>& rounds) {
  if (alpha_per_round.empty() || alpha_per_round.size() != rounds.size())
    throw ContractViolation("alpha_trajectory: need >= 1 round with alpha snapshots");
  AlphaTrajectory traj;
  traj.rounds = rounds;
  traj.alpha = alpha_per_round;
  constexpr double kTol = 0.01;
  constexpr std::size_t kStable = 3;  // consecutive below-threshold deltas required
  const std::size_t n = alpha_per_round.size();
  for (std::size_t t = 0; t + kStable < n; ++t) {
    bool stable = true;
    for (std::size_t s = 0; s < kStable; ++s) {
      if ((alpha_per_round[t + s + 1] - alpha_per_round[t + s]).cwiseAbs().maxCoeff() >= kTol) {
        stable = false;
        break;
      }
    }
    if (stable) {
      traj.convergence_round = rounds[t];
      break;
    }
  }
  return traj;
}

}  // namespace fedrec
