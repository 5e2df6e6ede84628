#include "fedrec/server.hpp"

#include <algorithm>
#include <chrono>

#include "fedrec/errors.hpp"

namespace fedrec {

namespace {

DirectionalComponent zero_component(const AdapterPair& shape_like, ClientId source, int round) {
  DirectionalComponent dir;
  dir.source_client = source;
  dir.round = round;
  dir.layer_id = shape_like.layer_id;
  dir.a_tilde = Matrix::Zero(shape_like.a_mat.rows(), shape_like.a_mat.cols());
  dir.b_tilde = Matrix::Zero(shape_like.b_mat.rows(), shape_like.b_mat.cols());
  dir.source_magnitude = 0.0;
  return dir;
}

DirectionalComponent raw_component(const AdapterPair& ap, ClientId source, int round) {
  DirectionalComponent dir;
  dir.source_client = source;
  dir.round = round;
  dir.layer_id = ap.layer_id;
  dir.a_tilde = ap.a_mat;
  dir.b_tilde = ap.b_mat;
  dir.source_magnitude = frob_norm(ap.b_mat * ap.a_mat);
  return dir;
}

}  // namespace

AdapterSet aggregate(Method strategy, const std::vector<Upload>& uploads,
                     const AdapterSet& initial_adapters) {
  if (uploads.empty()) throw ProtocolError("aggregate: no uploads");
  AdapterSet out = uploads[0].adapters;
  for (std::size_t j = 1; j < uploads.size(); ++j) {
    if (uploads[j].adapters.size() != out.size())
      throw ProtocolError("aggregate: uploads cover different layer sets");
    for (auto& [id, acc] : out) {
      auto it = uploads[j].adapters.find(id);
      if (it == uploads[j].adapters.end())
        throw ProtocolError("aggregate: upload missing layer " + id);
      if (it->second.rank != acc.rank)
        throw ProtocolError("aggregate: mixed ranks for layer " + id);
      acc.a_mat += it->second.a_mat;
      acc.b_mat += it->second.b_mat;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(uploads.size());
  for (auto& [id, acc] : out) {
    acc.a_mat *= inv_n;
    acc.b_mat *= inv_n;
    if (strategy == Method::ffa_lora) acc.a_mat = initial_adapters.at(id).a_mat;
  }
  return out;
}

RoundLog run_round(std::vector<ClientState>& clients, const BackboneParams& backbone,
                   ServerState& server, int round_idx) {
  const auto t0 = std::chrono::steady_clock::now();
  const int K = static_cast<int>(clients.size());
  RoundLog log;
  log.round = round_idx;
  log.comm.resize(K);

  if (server.strategy != Method::local_only) {
    std::vector<Upload> uploads;
    uploads.reserve(K);
    for (int j = 0; j < K; ++j) {
      if (static_cast<int>(clients[j].id) != j)
        throw ProtocolError("run_round: clients must be ordered by id");
      uploads.push_back(make_upload(clients[j]));
      log.comm[j].upload_params = uploads[j].param_count;
      log.comm[j].upload_bytes = uploads[j].byte_count;
    }

    if (is_fedecider_family(server.strategy)) {
      const bool normalize = uses_normalized_broadcast(server.strategy);
      std::map<LayerId, std::vector<DirectionalComponent>> broadcast;
      std::vector<bool> client_skipped(K, false);
      for (const auto& [id, shape_like] : uploads[0].adapters) {
        auto& comps = broadcast[id];
        comps.reserve(K);
        for (int j = 0; j < K; ++j) {
          const AdapterPair& ap = uploads[j].adapters.at(id);
          const double norm = frob_norm(ap.b_mat * ap.a_mat);
          if (norm <= kZeroUpdateThreshold) {
            client_skipped[j] = true;
            const auto prev = server.last_broadcast.find(id);
            comps.push_back(prev != server.last_broadcast.end()
                                ? prev->second[j]
                                : zero_component(ap, j, round_idx));
            continue;
          }
          comps.push_back(normalize ? normalize_direction(ap, j, round_idx)
                                    : raw_component(ap, j, round_idx));
        }
      }
      for (int j = 0; j < K; ++j)
        if (client_skipped[j]) log.skipped.push_back(j);
      server.last_broadcast = broadcast;
      for (int j = 0; j < K; ++j) {
        install_broadcast(clients[j], broadcast);
        log.comm[j].download_params = 0;
        log.comm[j].download_bytes = 0;
        for (int src = 0; src < K; ++src) {
          log.comm[j].download_params += uploads[src].param_count;
          log.comm[j].download_bytes += uploads[src].byte_count;
        }
      }
    } else {
      const AdapterSet global = aggregate(server.strategy, uploads, server.initial_adapters);
      server.last_global = global;
      const Upload measured = [&] {
        ClientState tmp;
        tmp.adapters = global;
        return make_upload(tmp);
      }();
      for (int j = 0; j < K; ++j) {
        install_adapters(clients[j], global, server.strategy == Method::fedprox);
        log.comm[j].download_params = measured.param_count;
        log.comm[j].download_bytes = measured.byte_count;
      }
    }
  }

  log.alpha = Matrix::Zero(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) log.alpha(i, j) = clients[i].weights.alpha(j);
  for (int i = 0; i < K; ++i)
    log.val_metrics.push_back(evaluate_client(clients[i], backbone, "val", {5, 10}, round_idx));

  log.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

std::vector<DeltaMap> finalize_models(std::vector<ClientState>& clients,
                                      const BackboneParams& backbone, int e_post) {
  std::vector<DeltaMap> finals;
  for (auto& client : clients) {
    if (client.mode == Method::pfedavg && e_post > 0 && !client.finalized)
      local_train(client, backbone, e_post);
    client.finalized = true;
    finals.push_back(build_update(client));
  }
  return finals;
}

CommSummary comm_accounting(const std::vector<RoundLog>& logs) {
  if (logs.empty()) throw ContractViolation("comm_accounting: need >= 1 round");
  CommSummary s;
  for (const auto& log : logs) {
    std::size_t up_p = 0, down_p = 0, up_b = 0, down_b = 0;
    for (const auto& c : log.comm) {
      up_p += c.upload_params;
      down_p += c.download_params;
      up_b += c.upload_bytes;
      down_b += c.download_bytes;
    }
    s.per_round_upload_params.push_back(up_p);
    s.per_round_download_params.push_back(down_p);
    s.per_round_upload_bytes.push_back(up_b);
    s.per_round_download_bytes.push_back(down_b);
    s.total_upload_params += up_p;
    s.total_download_params += down_p;
    s.total_upload_bytes += up_b;
    s.total_download_bytes += down_b;
  }
  return s;
}

}  // namespace fedrec
