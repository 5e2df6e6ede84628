#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedrec/client.hpp"
#include "fedrec/datagen.hpp"
#include "fedrec/metrics.hpp"
#include "fedrec/server.hpp"

namespace fedrec {

// Flat-key experiment configuration; serialized as JSON with full defaulting.
struct ExperimentConfig {
  std::string run_id = "run";
  std::string method = "fedecider";

  // world (ignored when csv_path is set)
  std::string csv_path;
  int num_domains = 3;
  int vocab_per_domain = 100;
  int users_per_domain = 200;
  int num_clusters = 8;
  int pool_sequences = 300;
  double sim_high = 0.8;  // similarity of the (0,1) domain pair
  double sim_low = 0.1;   // all other off-diagonal entries

  // backbone
  int embed_dim = 32;
  int max_seq_len = 20;
  int num_blocks = 2;

  // training
  int rank = 8;
  int rounds = 20;
  int local_epochs = 5;
  int pre_epochs = 5;
  int pretrain_epochs = 3;
  int batch_size = 64;
  double lr_adapter = 1e-3;
  double lr_alpha = 1e-3;
  double lr_pretrain = 0.05;
  double alpha_init = 2.0;
  double fedprox_mu = 0.01;
  double ldp_epsilon = 0.0;  // 0 disables the LDP perturbation
  int e_post = 5;            // pfedavg post-hoc adaptation epochs

  std::uint64_t seed = 7;
  std::string output_dir = "out";

  void validate() const;  // throws ConfigError listing every problem at once
};

ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);

struct RunArchive {
  ExperimentConfig config;
  std::vector<RoundLog> logs;
  std::vector<std::vector<MetricRecord>> test_per_round;  // [round][client]
  std::vector<MetricRecord> final_test;                   // after finalize_models
  AlphaTrajectory alpha;
  CommSummary comm;
  int best_val_round = -1;

  double mean_final_test(const std::string& metric) const;
};

// Pretraining on the pooled sample, pre-communication local phase, the round
// loop, finalize, final test evaluation. Deterministic in config.seed.
RunArchive run_experiment(const ExperimentConfig& config);

// metrics.csv, alpha.csv, comm.csv, rounds.jsonl, config.json under out_dir.
void emit_results(const RunArchive& archive, const std::string& out_dir);

}  // namespace fedrec
