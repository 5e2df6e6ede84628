#include "fedrec/backbone.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "fedrec/errors.hpp"
#include "fedrec/rng.hpp"

namespace fedrec {

namespace {

void hash_matrix(std::uint64_t& h, const Matrix& m) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
}

void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

const Matrix* find_delta(const DeltaMap& deltas, const LayerId& id) {
  auto it = deltas.find(id);
  return it == deltas.end() ? nullptr : &it->second;
}

Matrix effective(const Matrix& frozen, const Matrix* delta) {
  if (!delta) return frozen;
  if (delta->rows() != frozen.rows() || delta->cols() != frozen.cols())
    throw DimensionError("delta shape does not match target weight");
  return frozen + *delta;
}

struct BlockCache {
  Matrix x;       // block input, T x d
  Matrix q, k, v; // T x d
  Matrix probs;   // T x T attention probabilities (causal)
  Matrix z;       // T x d attended values
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  Matrix x_out;        // final representation, T x d
  Vector probs_slice;  // softmax over the domain slice
};

// Forward pass for one example; fills the cache when given.
double forward_example(const BackboneParams& p, const DeltaMap& deltas, const Example& ex,
                       ForwardCache* cache, Vector* logits_out) {
  const int d = p.config.embed_dim;
  const int t_len = static_cast<int>(ex.context.size());
  if (t_len < 1 || t_len > p.config.max_seq_len)
    throw InputError("sequence length " + std::to_string(t_len) + " outside [1, " +
                     std::to_string(p.config.max_seq_len) + "]");
  for (ItemId id : ex.context)
    if (id < 0 || id >= p.config.vocab_size) throw InputError("unknown item id in context");
  if (ex.target < ex.slice.begin || ex.target >= ex.slice.end ||
      ex.slice.end > p.config.vocab_size)
    throw InputError("target outside candidate domain slice");

  Matrix x(t_len, d);
  for (int t = 0; t < t_len; ++t)
    x.row(t) = p.token_embedding.row(ex.context[t]) + p.positional_embedding.row(t);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  if (cache) cache->blocks.resize(p.blocks.size());

  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    const Matrix wq = effective(p.blocks[b].wq, find_delta(deltas, prefix + "wq"));
    const Matrix wk = effective(p.blocks[b].wk, find_delta(deltas, prefix + "wk"));
    const Matrix wv = effective(p.blocks[b].wv, find_delta(deltas, prefix + "wv"));
    const Matrix wo = effective(p.blocks[b].wo, find_delta(deltas, prefix + "wo"));

    Matrix q = x * wq.transpose();
    Matrix k = x * wk.transpose();
    Matrix v = x * wv.transpose();

    Matrix probs = Matrix::Zero(t_len, t_len);
    for (int t = 0; t < t_len; ++t) {
      double row_max = -std::numeric_limits<double>::infinity();
      for (int u = 0; u <= t; ++u)
        row_max = std::max(row_max, scale * q.row(t).dot(k.row(u)));
      double denom = 0.0;
      for (int u = 0; u <= t; ++u) {
        probs(t, u) = std::exp(scale * q.row(t).dot(k.row(u)) - row_max);
        denom += probs(t, u);
      }
      probs.row(t).head(t + 1) /= denom;
    }
    Matrix z = probs * v;
    Matrix out = z * wo.transpose();

    if (cache) {
      auto& bc = cache->blocks[b];
      bc.x = x;
      bc.q = std::move(q);
      bc.k = std::move(k);
      bc.v = std::move(v);
      bc.probs = std::move(probs);
      bc.z = std::move(z);
    }
    x += out;
  }

  const Vector h = x.row(t_len - 1).transpose();
  const Eigen::Index lo = ex.slice.begin;
  const Eigen::Index n_dom = ex.slice.size();
  Vector logits = p.output_projection.middleRows(lo, n_dom) * h;

  const double lmax = logits.maxCoeff();
  Vector probs_slice = (logits.array() - lmax).exp();
  const double denom = probs_slice.sum();
  probs_slice /= denom;

  const double loss = -(logits(ex.target - lo) - lmax - std::log(denom));
  if (!std::isfinite(loss)) throw NumericError("non-finite loss in forward pass");

  if (cache) {
    cache->x_out = std::move(x);
    cache->probs_slice = std::move(probs_slice);
  }
  if (logits_out) *logits_out = std::move(logits);
  return loss;
}

}  // namespace

std::uint64_t BackboneParams::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  hash_matrix(h, token_embedding);
  hash_matrix(h, positional_embedding);
  for (const auto& blk : blocks) {
    hash_matrix(h, blk.wq);
    hash_matrix(h, blk.wk);
    hash_matrix(h, blk.wv);
    hash_matrix(h, blk.wo);
  }
  hash_matrix(h, output_projection);
  return h;
}

std::vector<LayerId> BackboneParams::adapter_layer_ids() const {
  std::vector<LayerId> ids;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (const char* w : {"wq", "wk", "wv", "wo"})
      ids.push_back("block" + std::to_string(b) + "." + w);
  return ids;
}

const Matrix& BackboneParams::layer_weight(const LayerId& id) const {
  const auto dot = id.find('.');
  const std::size_t b = std::stoul(id.substr(5, dot - 5));
  const std::string w = id.substr(dot + 1);
  const auto& blk = blocks.at(b);
  if (w == "wq") return blk.wq;
  if (w == "wk") return blk.wk;
  if (w == "wv") return blk.wv;
  if (w == "wo") return blk.wo;
  throw InputError("unknown layer id " + id);
}

BackboneParams init_backbone(const BackboneConfig& config) {
  if (config.embed_dim < 2 || config.vocab_size < 2 || config.max_seq_len < 2 ||
      config.num_blocks < 1)
    throw ConfigError("init_backbone: require d >= 2, vocab >= 2, T_max >= 2, blocks >= 1");
  BackboneParams p;
  p.config = config;
  Rng rng(config.seed, "backbone_init");
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));

  p.token_embedding.resize(config.vocab_size, config.embed_dim);
  fill_uniform(p.token_embedding, rng, bound);
  p.positional_embedding.resize(config.max_seq_len, config.embed_dim);
  fill_uniform(p.positional_embedding, rng, bound);
  p.blocks.resize(config.num_blocks);
  for (auto& blk : p.blocks) {
    for (Matrix* m : {&blk.wq, &blk.wk, &blk.wv, &blk.wo}) {
      m->resize(config.embed_dim, config.embed_dim);
      fill_uniform(*m, rng, bound);
    }
  }
  p.output_projection.resize(config.vocab_size, config.embed_dim);
  fill_uniform(p.output_projection, rng, bound);
  p.frozen = false;
  return p;
}

ForwardResult forward_loss(const BackboneParams& params, const DeltaMap& deltas,
                           const Example& example) {
  ForwardResult res;
  res.loss = forward_example(params, deltas, example, nullptr, &res.domain_logits);
  return res;
}

BatchGrads grad_batch(const BackboneParams& params, const DeltaMap& deltas,
                      const std::vector<Example>& batch, bool with_param_grads) {
  if (batch.empty()) throw ContractViolation("grad_batch: empty batch");
  const int d = params.config.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  BatchGrads g;
  for (const auto& id : params.adapter_layer_ids()) g.delta_grads[id] = Matrix::Zero(d, d);
  if (with_param_grads) {
    g.token_embedding = Matrix::Zero(params.token_embedding.rows(), d);
    g.positional_embedding = Matrix::Zero(params.positional_embedding.rows(), d);
    g.blocks.resize(params.blocks.size());
    for (auto& blk : g.blocks)
      blk.wq = blk.wk = blk.wv = blk.wo = Matrix::Zero(d, d);
    g.output_projection = Matrix::Zero(params.output_projection.rows(), d);
  }

  for (const Example& ex : batch) {
    ForwardCache cache;
    g.mean_loss += inv_n * forward_example(params, deltas, ex, &cache, nullptr);

    const int t_len = static_cast<int>(ex.context.size());
    const Eigen::Index lo = ex.slice.begin;
    const Eigen::Index n_dom = ex.slice.size();

    // d loss / d logits over the slice: softmax minus one-hot
    Vector dlogits = cache.probs_slice;
    dlogits(ex.target - lo) -= 1.0;
    dlogits *= inv_n;

    const Vector h = cache.x_out.row(t_len - 1).transpose();
    Vector dh = params.output_projection.middleRows(lo, n_dom).transpose() * dlogits;
    if (with_param_grads)
      g.output_projection.middleRows(lo, n_dom) += dlogits * h.transpose();

    Matrix dx = Matrix::Zero(t_len, d);
    dx.row(t_len - 1) = dh.transpose();

    for (int b = static_cast<int>(params.blocks.size()) - 1; b >= 0; --b) {
      const auto& bc = cache.blocks[b];
      const std::string prefix = "block" + std::to_string(b) + ".";
      const Matrix wq = effective(params.blocks[b].wq, find_delta(deltas, prefix + "wq"));
      const Matrix wk = effective(params.blocks[b].wk, find_delta(deltas, prefix + "wk"));
      const Matrix wv = effective(params.blocks[b].wv, find_delta(deltas, prefix + "wv"));
      const Matrix wo = effective(params.blocks[b].wo, find_delta(deltas, prefix + "wo"));

      const Matrix& dout = dx;  // residual: dx flows to both the input and the attention output
      Matrix dz = dout * wo;
      Matrix dwo = dout.transpose() * bc.z;

      Matrix dprobs = dz * bc.v.transpose();
      Matrix dv = bc.probs.transpose() * dz;

      // softmax backward, row-wise over the causal support
      Matrix dscores(t_len, t_len);
      for (int t = 0; t < t_len; ++t) {
        const auto pr = bc.probs.row(t).head(t + 1);
        const auto dpr = dprobs.row(t).head(t + 1);
        const double dot = pr.dot(dpr);
        dscores.row(t).setZero();
        dscores.row(t).head(t + 1) = pr.cwiseProduct(dpr - Eigen::RowVectorXd::Constant(t + 1, dot));
      }

      Matrix dq = scale * (dscores * bc.k);
      Matrix dk = scale * (dscores.transpose() * bc.q);

      Matrix dwq = dq.transpose() * bc.x;
      Matrix dwk = dk.transpose() * bc.x;
      Matrix dwv = dv.transpose() * bc.x;

      g.delta_grads[prefix + "wq"] += dwq;
      g.delta_grads[prefix + "wk"] += dwk;
      g.delta_grads[prefix + "wv"] += dwv;
      g.delta_grads[prefix + "wo"] += dwo;
      if (with_param_grads) {
        g.blocks[b].wq += dwq;
        g.blocks[b].wk += dwk;
        g.blocks[b].wv += dwv;
        g.blocks[b].wo += dwo;
      }

      Matrix dx_prev = dx + dq * wq + dk * wk + dv * wv;
      dx = std::move(dx_prev);
    }

    if (with_param_grads) {
      for (int t = 0; t < t_len; ++t) {
        g.token_embedding.row(ex.context[t]) += dx.row(t);
        g.positional_embedding.row(t) += dx.row(t);
      }
    }
  }
  return g;
}

BackboneParams pretrain_backbone(BackboneParams params, const std::vector<Example>& pooled_data,
                                 int epochs, double lr, int batch_size, std::uint64_t seed) {
  if (params.frozen) throw ContractViolation("pretrain_backbone: params already frozen");
  if (pooled_data.empty()) throw ContractViolation("pretrain_backbone: empty pooled sample");
  if (batch_size < 1) throw ConfigError("pretrain_backbone: batch_size must be >= 1");

  Rng rng(seed, "pretrain_batch");
  std::vector<std::size_t> order(pooled_data.size());
  std::iota(order.begin(), order.end(), 0);
  const DeltaMap no_deltas;

  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<Example> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i)
        batch.push_back(pooled_data[order[i]]);
      BatchGrads g = grad_batch(params, no_deltas, batch, /*with_param_grads=*/true);
      params.token_embedding -= lr * g.token_embedding;
      params.positional_embedding -= lr * g.positional_embedding;
      for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        params.blocks[b].wq -= lr * g.blocks[b].wq;
        params.blocks[b].wk -= lr * g.blocks[b].wk;
        params.blocks[b].wv -= lr * g.blocks[b].wv;
        params.blocks[b].wo -= lr * g.blocks[b].wo;
      }
      params.output_projection -= lr * g.output_projection;
    }
  }
  params.frozen = true;
  return params;
}

}  // namespace fedrec
