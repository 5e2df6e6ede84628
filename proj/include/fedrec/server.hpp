#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "fedrec/client.hpp"

namespace fedrec {

struct RoundLog {
  int round = -1;
  struct PerClient {
    std::size_t upload_params = 0, upload_bytes = 0;
    std::size_t download_params = 0, download_bytes = 0;
  };
  std::vector<PerClient> comm;
  Matrix alpha;  // K x K snapshot, row i = client i's weights
  std::vector<MetricRecord> val_metrics;
  std::vector<double> mean_train_loss;  // per client, last epoch of the round
  std::vector<ClientId> skipped;
  double wall_time_sec = 0.0;
};

// Orchestrator state between rounds. The server holds no training state; it
// only normalizes, aggregates, and redistributes.
struct ServerState {
  Method strategy = Method::fedecider;
  AdapterSet initial_adapters;  // shared client init (ffa_lora keeps its A factors)
  std::map<LayerId, std::vector<DirectionalComponent>> last_broadcast;
  AdapterSet last_global;  // baselines' installed set
};

// One communication round after all clients finished local training:
// fedecider-family collects raw adapters, normalizes per layer (raw variants
// skip normalization), and broadcasts the full ordered component list;
// baselines aggregate and install. Skipped (zero-update) clients keep their
// stale component from the previous round.
RoundLog run_round(std::vector<ClientState>& clients, const BackboneParams& backbone,
                   ServerState& server, int round_idx);

// Baseline aggregation over this round's uploads; returns the adapter set to
// install on every client. Throws ProtocolError on mixed ranks.
AdapterSet aggregate(Method strategy, const std::vector<Upload>& uploads,
                     const AdapterSet& initial_adapters);

// fedecider-family: no-op (the last build_update is the final model);
// pfedavg: E_post extra local epochs per client.
std::vector<DeltaMap> finalize_models(std::vector<ClientState>& clients,
                                      const BackboneParams& backbone, int e_post);

struct CommSummary {
  std::size_t total_upload_params = 0, total_download_params = 0;
  std::size_t total_upload_bytes = 0, total_download_bytes = 0;
  std::vector<std::size_t> per_round_upload_params, per_round_download_params;
  std::vector<std::size_t> per_round_upload_bytes, per_round_download_bytes;
};

CommSummary comm_accounting(const std::vector<RoundLog>& logs);

}  // namespace fedrec
