#include "fedrec/client.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedrec/errors.hpp"
#include "fedrec/rng.hpp"

namespace fedrec {

namespace {

constexpr double kLdpClip = 0.1;

bool trains_raw_own_only(const ClientState& s) {
  return s.phase == Phase::pre_communication || !is_fedecider_family(s.mode);
}

bool alpha_is_trainable(const ClientState& s) {
  return s.weights.trainable && s.phase == Phase::federated &&
         (s.mode == Method::fedecider || s.mode == Method::wo_decomp || s.mode == Method::wo_sep);
}

double client_weight(const ClientState& s, int j) {
  return s.mode == Method::wo_per ? 1.0 / static_cast<double>(s.num_clients) : s.weights.alpha(j);
}

const std::vector<DirectionalComponent>& components_for(const ClientState& s, const LayerId& id) {
  auto it = s.received.find(id);
  if (it == s.received.end() || static_cast<int>(it->second.size()) != s.num_clients)
    throw ProtocolError("client " + std::to_string(s.id) + ": missing broadcast components for " +
                        id);
  return it->second;
}

}  // namespace

Method parse_method(const std::string& name) {
  if (name == "fedecider") return Method::fedecider;
  if (name == "wo_decomp") return Method::wo_decomp;
  if (name == "wo_per") return Method::wo_per;
  if (name == "wo_sep") return Method::wo_sep;
  if (name == "local_only") return Method::local_only;
  if (name == "fedavg") return Method::fedavg;
  if (name == "pfedavg") return Method::pfedavg;
  if (name == "fedprox") return Method::fedprox;
  if (name == "ffa_lora") return Method::ffa_lora;
  throw ConfigError("unknown method: " + name);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::fedecider: return "fedecider";
    case Method::wo_decomp: return "wo_decomp";
    case Method::wo_per: return "wo_per";
    case Method::wo_sep: return "wo_sep";
    case Method::local_only: return "local_only";
    case Method::fedavg: return "fedavg";
    case Method::pfedavg: return "pfedavg";
    case Method::fedprox: return "fedprox";
    case Method::ffa_lora: return "ffa_lora";
  }
  return "?";
}

bool is_fedecider_family(Method m) {
  return m == Method::fedecider || m == Method::wo_decomp || m == Method::wo_per ||
         m == Method::wo_sep;
}

bool uses_normalized_broadcast(Method m) {
  return m == Method::fedecider || m == Method::wo_per;
}

AdapterSet init_adapters(const BackboneParams& backbone, int rank, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("init_adapters: rank must be >= 1");
  AdapterSet set;
  Rng rng(seed, "adapter_init");
  const double bound = 1.0 / std::sqrt(static_cast<double>(rank));
  for (const auto& id : backbone.adapter_layer_ids()) {
    const Matrix& w = backbone.layer_weight(id);
    AdapterPair ap;
    ap.layer_id = id;
    ap.rank = rank;
    ap.a_mat.resize(rank, w.cols());
    for (Eigen::Index i = 0; i < ap.a_mat.rows(); ++i)
      for (Eigen::Index j = 0; j < ap.a_mat.cols(); ++j) ap.a_mat(i, j) = rng.uniform(-bound, bound);
    ap.b_mat = Matrix::Zero(w.rows(), rank);
    ap.validate();
    set.emplace(id, std::move(ap));
  }
  return set;
}

ClientState make_client(ClientId id, int num_clients, const InteractionDataset* data, Method mode,
                        const OptimizerSettings& opt, const AdapterSet& initial_adapters,
                        double alpha_init, std::uint64_t seed) {
  ClientState s;
  s.id = id;
  s.num_clients = num_clients;
  s.data = data;
  s.mode = mode;
  s.opt = opt;
  s.adapters = initial_adapters;
  s.initial_adapters = initial_adapters;
  s.weights.alpha = Vector::Constant(num_clients, alpha_init);
  s.weights.trainable = mode != Method::wo_per;
  if (mode == Method::wo_per)
    s.weights.alpha = Vector::Constant(num_clients, 1.0 / static_cast<double>(num_clients));
  s.seed = seed;
  return s;
}

DeltaMap build_update(const ClientState& state) {
  DeltaMap deltas;
  for (const auto& [id, ap] : state.adapters) {
    if (trains_raw_own_only(state)) {
      deltas[id] = ap.b_mat * ap.a_mat;
      continue;
    }
    const auto& comps = components_for(state, id);
    if (state.mode == Method::wo_sep) {
      Matrix b_sum = Matrix::Zero(ap.b_mat.rows(), ap.b_mat.cols());
      Matrix a_sum = Matrix::Zero(ap.a_mat.rows(), ap.a_mat.cols());
      for (int j = 0; j < state.num_clients; ++j) {
        const double w = client_weight(state, j);
        b_sum += w * (j == state.id ? ap.b_mat : comps[j].b_tilde);
        a_sum += w * (j == state.id ? ap.a_mat : comps[j].a_tilde);
      }
      deltas[id] = b_sum * a_sum;
    } else {
      Matrix sum = Matrix::Zero(ap.b_mat.rows(), ap.a_mat.cols());
      for (int j = 0; j < state.num_clients; ++j) {
        const double w = client_weight(state, j);
        sum += w * (j == state.id ? Matrix(ap.b_mat * ap.a_mat) : comps[j].compose());
      }
      deltas[id] = std::move(sum);
    }
  }
  return deltas;
}

TrainableGrads grad_trainables(const ClientState& state, const BackboneParams& backbone,
                               const std::vector<Example>& batch) {
  if (!backbone.frozen) throw ContractViolation("grad_trainables: backbone must be frozen");
  const DeltaMap deltas = build_update(state);
  const BatchGrads g = grad_batch(backbone, deltas, batch);

  TrainableGrads out;
  out.mean_loss = g.mean_loss;
  const bool alpha_grads = alpha_is_trainable(state);
  if (alpha_grads) out.alpha_grads = Vector::Zero(state.num_clients);

  for (const auto& [id, ap] : state.adapters) {
    const Matrix& dd = g.delta_grads.at(id);
    AdapterPair grad;
    grad.layer_id = id;
    grad.rank = ap.rank;

    if (trains_raw_own_only(state)) {
      grad.b_mat = dd * ap.a_mat.transpose();
      grad.a_mat = ap.b_mat.transpose() * dd;
      if (state.mode == Method::fedprox && !state.fedprox_anchor.empty()) {
        const AdapterPair& anchor = state.fedprox_anchor.at(id);
        const double mu = state.opt.fedprox_mu;
        grad.a_mat += mu * (ap.a_mat - anchor.a_mat);
        grad.b_mat += mu * (ap.b_mat - anchor.b_mat);
        out.mean_loss += 0.5 * mu *
                         ((ap.a_mat - anchor.a_mat).squaredNorm() +
                          (ap.b_mat - anchor.b_mat).squaredNorm());
      }
      if (state.mode == Method::ffa_lora) grad.a_mat.setZero();
    } else if (state.mode == Method::wo_sep) {
      const auto& comps = components_for(state, id);
      Matrix b_sum = Matrix::Zero(ap.b_mat.rows(), ap.b_mat.cols());
      Matrix a_sum = Matrix::Zero(ap.a_mat.rows(), ap.a_mat.cols());
      for (int j = 0; j < state.num_clients; ++j) {
        const double w = client_weight(state, j);
        b_sum += w * (j == state.id ? ap.b_mat : comps[j].b_tilde);
        a_sum += w * (j == state.id ? ap.a_mat : comps[j].a_tilde);
      }
      const Matrix db_sum = dd * a_sum.transpose();
      const Matrix da_sum = b_sum.transpose() * dd;
      const double w_i = client_weight(state, state.id);
      grad.b_mat = w_i * db_sum;
      grad.a_mat = w_i * da_sum;
      if (alpha_grads) {
        for (int j = 0; j < state.num_clients; ++j) {
          const Matrix& bj = j == state.id ? ap.b_mat : comps[j].b_tilde;
          const Matrix& aj = j == state.id ? ap.a_mat : comps[j].a_tilde;
          out.alpha_grads(j) += frob_inner(db_sum, bj) + frob_inner(da_sum, aj);
        }
      }
    } else {  // fedecider / wo_decomp / wo_per
      const auto& comps = components_for(state, id);
      const double w_i = client_weight(state, state.id);
      grad.b_mat = w_i * dd * ap.a_mat.transpose();
      grad.a_mat = w_i * ap.b_mat.transpose() * dd;
      if (alpha_grads) {
        for (int j = 0; j < state.num_clients; ++j) {
          const Matrix dir =
              j == state.id ? Matrix(ap.b_mat * ap.a_mat) : comps[j].compose();
          out.alpha_grads(j) += frob_inner(dd, dir);
        }
      }
    }
    out.adapter_grads.emplace(id, std::move(grad));
  }
  return out;
}

std::vector<double> local_train(ClientState& state, const BackboneParams& backbone, int epochs) {
  if (!state.data) throw ContractViolation("local_train: client has no dataset");
  const auto& train = state.data->train;
  std::vector<double> epoch_losses;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int e = 0; e < epochs; ++e) {
    Rng rng(state.seed, "client_" + std::to_string(state.id) + "_epoch_" +
                            std::to_string(state.epochs_done));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t examples = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(state.opt.batch_size)) {
      std::vector<Example> batch;
      for (std::size_t i = start;
           i < std::min(order.size(), start + static_cast<std::size_t>(state.opt.batch_size)); ++i)
        batch.push_back(train[order[i]]);
      TrainableGrads g;
      try {
        g = grad_trainables(state, backbone, batch);
      } catch (const NumericError& err) {
        throw NumericError("client " + std::to_string(state.id) + " epoch " +
                           std::to_string(state.epochs_done) + " batch at " +
                           std::to_string(start) + ": " + err.what());
      }
      for (auto& [id, ap] : state.adapters) {
        const AdapterPair& grad = g.adapter_grads.at(id);
        ap.a_mat -= state.opt.lr_adapter * grad.a_mat;
        ap.b_mat -= state.opt.lr_adapter * grad.b_mat;
      }
      if (g.alpha_grads.size() > 0)
        state.weights.alpha -= state.opt.lr_alpha * g.alpha_grads;
      loss_sum += g.mean_loss * static_cast<double>(batch.size());
      examples += batch.size();
    }
    epoch_losses.push_back(examples ? loss_sum / static_cast<double>(examples) : 0.0);
    ++state.epochs_done;
  }
  return epoch_losses;
}

Upload make_upload(const ClientState& state) {
  Upload up;
  up.adapters = state.adapters;
  if (state.ldp_epsilon > 0.0) {
    // normalization happens locally so the server never sees raw factors
    for (auto& [id, ap] : up.adapters) {
      const double norm = frob_norm(ap.b_mat * ap.a_mat);
      if (norm > kZeroUpdateThreshold) {
        const double s = 1.0 / std::sqrt(norm);
        ap.a_mat *= s;
        ap.b_mat *= s;
      }
    }
    up.adapters = apply_ldp_noise(
        up.adapters, state.ldp_epsilon,
        derive_seed(state.seed, "ldp_client_" + std::to_string(state.id) + "_epoch_" +
                                    std::to_string(state.epochs_done)));
  }
  up.byte_count = 4;  // layer count
  for (const auto& [id, ap] : state.adapters) {
    const std::size_t params =
        static_cast<std::size_t>(ap.a_mat.size()) + static_cast<std::size_t>(ap.b_mat.size());
    up.param_count += params;
    up.byte_count += 4 + id.size() + 12 + 8 * params;
  }
  return up;
}

AdapterSet apply_ldp_noise(const AdapterSet& adapters, double epsilon, std::uint64_t seed) {
  if (epsilon <= 0.0) throw ConfigError("apply_ldp_noise: epsilon must be > 0");
  Rng rng(seed, "ldp_noise");
  const double scale = 2.0 * kLdpClip / epsilon;
  AdapterSet out = adapters;
  for (auto& [id, ap] : out) {
    for (Matrix* m : {&ap.a_mat, &ap.b_mat})
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        double v = std::clamp((*m)(i), -kLdpClip, kLdpClip);
        (*m)(i) = v + rng.laplace(scale);
      }
  }
  return out;
}

MetricRecord evaluate_client(const ClientState& state, const BackboneParams& backbone,
                             const std::string& split, const std::vector<int>& k_list, int round) {
  if (!state.data) throw ContractViolation("evaluate_client: client has no dataset");
  const auto& examples = split == "val" ? state.data->val : state.data->test;
  const DeltaMap deltas = build_update(state);
  std::vector<ScoredUser> users;
  users.reserve(examples.size());
  for (const Example& ex : examples) {
    ForwardResult res = forward_loss(backbone, deltas, ex);
    users.push_back({std::move(res.domain_logits), ex.target, ex.slice.begin});
  }
  MetricRecord rec = rank_and_score(users, k_list);
  rec.client = state.id;
  rec.round = round;
  rec.split = split;
  return rec;
}

void install_broadcast(ClientState& state,
                       const std::map<LayerId, std::vector<DirectionalComponent>>& components) {
  state.received = components;
  for (auto& [id, ap] : state.adapters) {
    const auto& comps = components_for(state, id);
    const DirectionalComponent& own = comps[state.id];
    // a skipped client's slot may hold a stale or zero component; keep the
    // current trainable factors in that case instead of clobbering them
    if (frob_norm(own.b_tilde * own.a_tilde) <= kZeroUpdateThreshold) continue;
    ap.a_mat = own.a_tilde;
    ap.b_mat = own.b_tilde;
    if (uses_normalized_broadcast(state.mode)) {
      // the joint rescaling preserves any norm imbalance between the factors
      // (B starts near zero, so early rounds are extreme); rebalance them
      // without changing the product so SGD steps stay well conditioned
      const double na = frob_norm(ap.a_mat), nb = frob_norm(ap.b_mat);
      if (na > 0.0 && nb > 0.0) {
        const double gamma = std::sqrt(na / nb);
        ap.a_mat /= gamma;
        ap.b_mat *= gamma;
      }
    }
  }
  state.phase = Phase::federated;
}

void install_adapters(ClientState& state, const AdapterSet& adapters, bool as_prox_anchor) {
  state.adapters = adapters;
  if (as_prox_anchor) state.fedprox_anchor = adapters;
  state.phase = Phase::federated;
}

}  // namespace fedrec
