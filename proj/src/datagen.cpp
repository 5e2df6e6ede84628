#include "fedrec/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fedrec/errors.hpp"
#include "fedrec/rng.hpp"

namespace fedrec {

namespace {

constexpr int kPrototypeDim = 512;
constexpr double kTransitionSharpness = 3.0;

int cluster_of_item(int local_item, int vocab, int num_clusters) {
  return static_cast<int>(static_cast<long long>(local_item) * num_clusters / vocab);
}

std::vector<std::vector<ItemId>> items_by_cluster(const DomainWorld& w, int domain) {
  std::vector<std::vector<ItemId>> buckets(w.num_clusters);
  const ItemId offset = w.slice_of(domain).begin;
  for (int v = 0; v < w.vocab_per_domain; ++v)
    buckets[cluster_of_item(v, w.vocab_per_domain, w.num_clusters)].push_back(offset + v);
  return buckets;
}

std::vector<ItemId> draw_sequence(const DomainWorld& w, const Matrix& transitions,
                                  const std::vector<std::vector<ItemId>>& buckets, Rng& rng) {
  const int len = rng.uniform_int(w.min_seq_len, w.max_seq_len);
  std::vector<ItemId> seq;
  seq.reserve(len);
  int cluster = static_cast<int>(rng.uniform_index(w.num_clusters));
  for (int t = 0; t < len; ++t) {
    const auto& bucket = buckets[cluster];
    seq.push_back(bucket[rng.uniform_index(bucket.size())]);
    double u = rng.uniform();
    double acc = 0.0;
    for (int c = 0; c < w.num_clusters; ++c) {
      acc += transitions(cluster, c);
      if (u < acc) {
        cluster = c;
        break;
      }
    }
  }
  return seq;
}

void build_examples(InteractionDataset& ds, int max_context_len) {
  ds.train.clear();
  ds.val.clear();
  ds.test.clear();
  auto clamp_context = [max_context_len](std::vector<ItemId> ctx) {
    if (static_cast<int>(ctx.size()) > max_context_len)
      ctx.erase(ctx.begin(), ctx.end() - max_context_len);
    return ctx;
  };
  for (const auto& seq : ds.sequences) {
    const std::size_t n = seq.size();
    // next-item pairs inside the training prefix seq[0 .. n-3]
    for (std::size_t t = 1; t + 2 < n; ++t)
      ds.train.push_back({clamp_context({seq.begin(), seq.begin() + t}), seq[t], ds.slice});
    ds.val.push_back({clamp_context({seq.begin(), seq.end() - 2}), seq[n - 2], ds.slice});
    ds.test.push_back({clamp_context({seq.begin(), seq.end() - 1}), seq[n - 1], ds.slice});
  }
}

}  // namespace

void DomainWorld::validate() const {
  if (num_domains < 2) throw ConfigError("world: num_domains must be >= 2");
  if (num_clusters < 2 || vocab_per_domain < num_clusters)
    throw ConfigError("world: require vocab >= num_clusters >= 2");
  if (users_per_domain < 10) throw ConfigError("world: users_per_domain must be >= 10");
  if (min_seq_len < 3 || max_seq_len < min_seq_len)
    throw ConfigError("world: require 3 <= min_seq_len <= max_seq_len");
  if (similarity.rows() != num_domains || similarity.cols() != num_domains)
    throw ConfigError("world: similarity must be K x K");
  for (int i = 0; i < num_domains; ++i) {
    if (std::abs(similarity(i, i) - 1.0) > 1e-12)
      throw ConfigError("world: similarity diagonal must be 1");
    for (int j = 0; j < num_domains; ++j) {
      if (std::abs(similarity(i, j) - similarity(j, i)) > 1e-12)
        throw ConfigError("world: similarity must be symmetric");
      if (similarity(i, j) < 0.0 || similarity(i, j) > 1.0)
        throw ConfigError("world: similarity entries must lie in [0, 1]");
    }
  }
}

DomainSlice DomainWorld::slice_of(int domain) const {
  const ItemId begin = 1 + static_cast<ItemId>(domain) * vocab_per_domain;
  return {begin, begin + vocab_per_domain};
}

Matrix DomainWorld::default_similarity() {
  Matrix s = Matrix::Identity(3, 3);
  s(0, 1) = s(1, 0) = 0.8;
  s(0, 2) = s(2, 0) = 0.1;
  s(1, 2) = s(2, 1) = 0.1;
  return s;
}

GeneratedWorld generate_world(const DomainWorld& world) {
  world.validate();
  const int K = world.num_domains;

  Eigen::LLT<Matrix> llt(world.similarity);
  if (llt.info() != Eigen::Success)
    throw ConfigError("generate_world: similarity matrix is not positive semidefinite");
  const Matrix chol = llt.matrixL();

  // Correlated Gaussian prototypes: per cluster and coordinate, one shared
  // standard-normal draw per domain pushed through the Cholesky factor, so
  // cross-domain cosines concentrate at the similarity entries.
  Rng proto_rng(world.seed, "world_prototypes");
  // prototypes[domain] is num_clusters x kPrototypeDim
  std::vector<Matrix> prototypes(K, Matrix(world.num_clusters, kPrototypeDim));
  Vector z(K);
  for (int c = 0; c < world.num_clusters; ++c)
    for (int t = 0; t < kPrototypeDim; ++t) {
      for (int k = 0; k < K; ++k) z(k) = proto_rng.gaussian();
      Vector g = chol * z;
      for (int k = 0; k < K; ++k) prototypes[k](c, t) = g(k);
    }

  Matrix measured = Matrix::Identity(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = i + 1; j < K; ++j) {
      double acc = 0.0;
      for (int c = 0; c < world.num_clusters; ++c) {
        const auto pi = prototypes[i].row(c);
        const auto pj = prototypes[j].row(c);
        acc += pi.dot(pj) / (pi.norm() * pj.norm());
      }
      measured(i, j) = measured(j, i) = acc / world.num_clusters;
    }

  // Cluster transition matrices follow each domain's own prototype geometry,
  // so similar domains walk over clusters with similar statistics.
  std::vector<Matrix> transitions(K, Matrix(world.num_clusters, world.num_clusters));
  for (int k = 0; k < K; ++k) {
    for (int c = 0; c < world.num_clusters; ++c) {
      double denom = 0.0;
      for (int c2 = 0; c2 < world.num_clusters; ++c2) {
        const auto pc = prototypes[k].row(c);
        const auto pc2 = prototypes[k].row(c2);
        const double cos = pc.dot(pc2) / (pc.norm() * pc2.norm());
        transitions[k](c, c2) = std::exp(kTransitionSharpness * cos);
        denom += transitions[k](c, c2);
      }
      transitions[k].row(c) /= denom;
    }
  }

  GeneratedWorld out;
  out.world = world;
  out.measured_similarity = measured;
  for (int k = 0; k < K; ++k) {
    InteractionDataset ds;
    ds.domain_id = k;
    ds.slice = world.slice_of(k);
    Rng rng(world.seed, "world_domain_" + std::to_string(k));
    const auto buckets = items_by_cluster(world, k);
    for (int u = 0; u < world.users_per_domain; ++u)
      ds.sequences.push_back(draw_sequence(world, transitions[k], buckets, rng));
    split_leave_one_out(ds, world.max_seq_len);
    out.domains.push_back(std::move(ds));
  }

  // Pooled pretraining sample: extra sequences round-robin across domains,
  // never assigned to any client.
  Rng pool_rng(world.seed, "world_pool");
  std::vector<std::vector<std::vector<ItemId>>> buckets_all;
  for (int k = 0; k < K; ++k) buckets_all.push_back(items_by_cluster(world, k));
  for (int p = 0; p < world.pool_sequences; ++p) {
    const int k = p % K;
    auto seq = draw_sequence(world, transitions[k], buckets_all[k], pool_rng);
    for (std::size_t t = 1; t < seq.size(); ++t)
      out.pooled.push_back(
          {std::vector<ItemId>(seq.begin(), seq.begin() + t), seq[t], world.slice_of(k)});
  }
  return out;
}

void split_leave_one_out(InteractionDataset& dataset, int max_context_len) {
  std::vector<std::vector<ItemId>> retained;
  dataset.excluded_users = 0;
  for (auto& seq : dataset.sequences) {
    if (seq.size() < 3)
      ++dataset.excluded_users;
    else
      retained.push_back(std::move(seq));
  }
  dataset.sequences = std::move(retained);
  build_examples(dataset, max_context_len);
}

std::vector<InteractionDataset> ingest_csv(const std::string& path, int max_context_len) {
  std::ifstream in(path);
  if (!in) throw ParseError("ingest_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("ingest_csv: empty file " + path);
  if (line != "user_id,item_id,timestamp,domain")
    throw ParseError("ingest_csv: bad header: " + line);

  struct Row {
    long long user, item, ts, domain;
    std::size_t order;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Row r{};
    char c1, c2, c3;
    std::istringstream ss(line);
    if (!(ss >> r.user >> c1 >> r.item >> c2 >> r.ts >> c3 >> r.domain) || c1 != ',' ||
        c2 != ',' || c3 != ',')
      throw ParseError("ingest_csv: malformed row at line " + std::to_string(line_no));
    r.order = rows.size();
    rows.push_back(r);
  }

  std::map<long long, long long> user_domain;
  for (const auto& r : rows) {
    auto [it, inserted] = user_domain.emplace(r.user, r.domain);
    if (!inserted && it->second != r.domain)
      throw DataError("ingest_csv: user " + std::to_string(r.user) + " appears in two domains");
  }

  // dense per-domain item spaces, ordered by ascending raw id; domains ordered
  // by ascending raw domain key
  std::map<long long, std::map<long long, ItemId>> item_map;  // domain -> raw -> local
  for (const auto& r : rows) item_map[r.domain][r.item] = 0;
  std::map<long long, int> domain_index;
  std::vector<ItemId> domain_offsets;
  ItemId offset = 1;
  for (auto& [dom, items] : item_map) {
    domain_index[dom] = static_cast<int>(domain_offsets.size());
    domain_offsets.push_back(offset);
    ItemId local = 0;
    for (auto& [raw, mapped] : items) mapped = offset + local++;
    offset += static_cast<ItemId>(items.size());
  }

  std::map<long long, std::vector<Row>> by_user;
  for (const auto& r : rows) by_user[r.user].push_back(r);

  std::vector<InteractionDataset> domains(item_map.size());
  for (auto& [dom, items] : item_map) {
    const int k = domain_index[dom];
    domains[k].domain_id = k;
    domains[k].slice = {domain_offsets[k],
                        domain_offsets[k] + static_cast<ItemId>(items.size())};
  }
  for (auto& [user, urows] : by_user) {
    std::stable_sort(urows.begin(), urows.end(),
                     [](const Row& a, const Row& b) { return a.ts < b.ts; });
    std::vector<ItemId> seq;
    for (const auto& r : urows) seq.push_back(item_map[r.domain][r.item]);
    domains[domain_index[user_domain[user]]].sequences.push_back(std::move(seq));
  }
  for (auto& ds : domains) split_leave_one_out(ds, max_context_len);
  return domains;
}

void export_csv(const std::vector<InteractionDataset>& domains, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("export_csv: cannot open " + path + " for writing");
  out << "user_id,item_id,timestamp,domain\n";
  long long user = 0;
  for (const auto& ds : domains)
    for (const auto& seq : ds.sequences) {
      long long ts = 0;
      for (ItemId item : seq)
        out << user << ',' << item << ',' << ts++ << ',' << ds.domain_id << '\n';
      ++user;
    }
}

}  // namespace fedrec
