#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedrec/backbone.hpp"
#include "fedrec/datagen.hpp"
#include "fedrec/lowrank.hpp"
#include "fedrec/metrics.hpp"

namespace fedrec {

enum class Method {
  fedecider,
  wo_decomp,
  wo_per,
  wo_sep,
  local_only,
  fedavg,
  pfedavg,
  fedprox,
  ffa_lora,
};

Method parse_method(const std::string& name);
std::string method_name(Method m);

// fedecider and its ablations broadcast per-client components and keep alpha
// state; the baselines install a single aggregated adapter set instead.
bool is_fedecider_family(Method m);
// wo_decomp and wo_sep work on raw factors, the rest of the family on
// normalized directions.
bool uses_normalized_broadcast(Method m);

struct PersonalWeights {
  Vector alpha;  // length K, index = source client id
  bool trainable = true;
};

struct OptimizerSettings {
  double lr_adapter = 1e-3;
  double lr_alpha = 1e-3;
  int batch_size = 64;
  double fedprox_mu = 0.01;
};

enum class Phase { pre_communication, federated };

struct ClientState {
  ClientId id = 0;
  int num_clients = 0;
  const InteractionDataset* data = nullptr;
  AdapterSet adapters;  // own trainable factors
  // per layer, ordered by source client id; immutable between broadcasts
  std::map<LayerId, std::vector<DirectionalComponent>> received;
  PersonalWeights weights;
  Method mode = Method::fedecider;
  OptimizerSettings opt;
  Phase phase = Phase::pre_communication;
  AdapterSet fedprox_anchor;    // last installed global factors
  AdapterSet initial_adapters;  // shared init, kept for the ffa_lora A-freeze
  std::uint64_t seed = 0;
  int epochs_done = 0;
  bool finalized = false;
  double ldp_epsilon = 0.0;  // > 0 enables client-side normalization + noise on upload
};

struct TrainableGrads {
  double mean_loss = 0.0;
  AdapterSet adapter_grads;  // same keys/shapes as the client's own adapters
  Vector alpha_grads;        // empty when alpha is not trainable in this mode/phase
};

struct Upload {
  AdapterSet adapters;
  std::size_t param_count = 0;
  std::size_t byte_count = 0;
};

// a_mat uniform in [-1/sqrt(r), 1/sqrt(r)], b_mat zero: initial delta is zero.
AdapterSet init_adapters(const BackboneParams& backbone, int rank, std::uint64_t seed);

ClientState make_client(ClientId id, int num_clients, const InteractionDataset* data, Method mode,
                        const OptimizerSettings& opt, const AdapterSet& initial_adapters,
                        double alpha_init, std::uint64_t seed);

// Mode-dependent effective deltas per adapted layer.
DeltaMap build_update(const ClientState& state);

// Exact gradients of the mean batch loss w.r.t. the client's own adapter
// factors and (where trainable) each alpha_j. Never touches the backbone or
// other clients' direction entries.
TrainableGrads grad_trainables(const ClientState& state, const BackboneParams& backbone,
                               const std::vector<Example>& batch);

// Plain SGD over shuffled train batches; returns mean loss per epoch.
std::vector<double> local_train(ClientState& state, const BackboneParams& backbone, int epochs);

Upload make_upload(const ClientState& state);

// Clip each entry to [-0.1, 0.1] then add seeded Laplace noise of scale 2c/eps.
AdapterSet apply_ldp_noise(const AdapterSet& adapters, double epsilon, std::uint64_t seed);

MetricRecord evaluate_client(const ClientState& state, const BackboneParams& backbone,
                             const std::string& split, const std::vector<int>& k_list, int round);

// Server-side install hooks.
void install_broadcast(ClientState& state,
                       const std::map<LayerId, std::vector<DirectionalComponent>>& components);
void install_adapters(ClientState& state, const AdapterSet& adapters, bool as_prox_anchor);

}  // namespace fedrec
