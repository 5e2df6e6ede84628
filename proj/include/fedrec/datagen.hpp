#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedrec/backbone.hpp"
#include "fedrec/types.hpp"

namespace fedrec {

// Synthetic multi-domain world with controllable ground-truth inter-domain
// similarity. Each domain owns a disjoint contiguous global id range; id 0 is
// the shared padding token.
struct DomainWorld {
  int num_domains = 3;
  int vocab_per_domain = 100;
  int users_per_domain = 200;
  Matrix similarity;  // K x K, symmetric, unit diagonal, entries in [0, 1]
  int num_clusters = 8;
  int pool_sequences = 300;
  int min_seq_len = 5;
  int max_seq_len = 20;
  std::uint64_t seed = 0;

  void validate() const;
  DomainSlice slice_of(int domain) const;
  int total_vocab() const { return 1 + num_domains * vocab_per_domain; }

  static Matrix default_similarity();  // S12 = 0.8, S13 = S23 = 0.1
};

struct InteractionDataset {
  int domain_id = 0;
  DomainSlice slice;
  std::vector<std::vector<ItemId>> sequences;  // one per retained user, time order
  std::vector<Example> train, val, test;
  int excluded_users = 0;  // sequences shorter than 3
};

struct GeneratedWorld {
  DomainWorld world;
  std::vector<InteractionDataset> domains;
  std::vector<Example> pooled;   // held-out pretraining examples, no client owns them
  Matrix measured_similarity;    // mean cross-domain prototype cosines
};

GeneratedWorld generate_world(const DomainWorld& world);

// Leave-one-out: last item is the test target, second-to-last the validation
// target, the rest the training prefix. Users shorter than 3 are excluded.
void split_leave_one_out(InteractionDataset& dataset, int max_context_len);

std::vector<InteractionDataset> ingest_csv(const std::string& path, int max_context_len);
void export_csv(const std::vector<InteractionDataset>& domains, const std::string& path);

}  // namespace fedrec
