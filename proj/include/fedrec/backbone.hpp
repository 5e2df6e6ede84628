#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedrec/lowrank.hpp"
#include "fedrec/types.hpp"

namespace fedrec {

struct BackboneConfig {
  int embed_dim = 32;
  int vocab_size = 0;   // total item count across domains + 1 padding id
  int max_seq_len = 20;
  int num_blocks = 2;
  std::uint64_t seed = 0;
};

// Half-open global-id range of the domain whose items are ranked.
struct DomainSlice {
  ItemId begin = 0;
  ItemId end = 0;
  ItemId size() const { return end - begin; }
};

struct Example {
  std::vector<ItemId> context;
  ItemId target = 0;
  DomainSlice slice;
};

struct AttentionWeights {
  Matrix wq, wk, wv, wo;  // each d x d
};

// Tiny frozen sequential-recommendation model: token + positional embeddings,
// num_blocks single-head causal attention blocks with a residual connection
// around each, last-position readout through output_projection. Adapters
// inject additive deltas into the four attention projections of every block.
struct BackboneParams {
  BackboneConfig config;
  Matrix token_embedding;       // vocab_size x d
  Matrix positional_embedding;  // max_seq_len x d
  std::vector<AttentionWeights> blocks;
  Matrix output_projection;  // vocab_size x d
  bool frozen = false;

  std::uint64_t checksum() const;
  std::vector<LayerId> adapter_layer_ids() const;
  const Matrix& layer_weight(const LayerId& id) const;
};

// map layer_id -> additive d x d delta; absent layers get zero delta
using DeltaMap = std::map<LayerId, Matrix>;

// map layer_id -> trainable AdapterPair
using AdapterSet = std::map<LayerId, AdapterPair>;

struct ForwardResult {
  double loss = 0.0;
  Vector domain_logits;  // logits restricted to the example's domain slice
};

struct BatchGrads {
  double mean_loss = 0.0;
  DeltaMap delta_grads;  // d loss / d delta per adapted layer
  // full-parameter grads, populated only when requested (pretraining)
  Matrix token_embedding;
  Matrix positional_embedding;
  std::vector<AttentionWeights> blocks;
  Matrix output_projection;
};

BackboneParams init_backbone(const BackboneConfig& config);

// Full-parameter SGD on the next-item NLL over the pooled sample; returns the
// params with frozen = true. Throws ContractViolation on frozen input or an
// empty pool.
BackboneParams pretrain_backbone(BackboneParams params, const std::vector<Example>& pooled_data,
                                 int epochs, double lr, int batch_size, std::uint64_t seed);

ForwardResult forward_loss(const BackboneParams& params, const DeltaMap& deltas,
                           const Example& example);

// Mean loss over the batch plus analytic reverse-mode gradients. Delta grads
// are always produced; full-parameter grads only when with_param_grads is set.
BatchGrads grad_batch(const BackboneParams& params, const DeltaMap& deltas,
                      const std::vector<Example>& batch, bool with_param_grads = false);

}  // namespace fedrec
