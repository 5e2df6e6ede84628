#include "fedrec/verify.hpp"

#include <cmath>
#include <json.hpp>
#include <sstream>

#include "fedrec/backbone.hpp"
#include "fedrec/client.hpp"
#include "fedrec/errors.hpp"
#include "fedrec/lowrank.hpp"
#include "fedrec/oracle.hpp"
#include "fedrec/rng.hpp"

namespace fedrec {

namespace {

using nlohmann::json;

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.gaussian();
  return m;
}

AdapterPair random_pair(Rng& rng, const LayerId& id, int rank, int d, double scale = 1.0) {
  AdapterPair ap;
  ap.layer_id = id;
  ap.rank = rank;
  ap.a_mat = random_matrix(rng, rank, d, scale);
  ap.b_mat = random_matrix(rng, d, rank, scale);
  return ap;
}

struct MiniSetup {
  BackboneParams backbone;
  std::vector<Example> batch;
  ClientState client;
};

// Small frozen backbone (d=16, one block) with a fedecider client holding
// K=3 rank-4 directions, used by the gradient-identity and expansion checks.
MiniSetup make_mini_setup(std::uint64_t seed) {
  constexpr int kDim = 16, kRank = 4, kClients = 3, kVocabPerDomain = 10;
  MiniSetup s;
  BackboneConfig bc;
  bc.embed_dim = kDim;
  bc.vocab_size = 1 + kClients * kVocabPerDomain;
  bc.max_seq_len = 8;
  bc.num_blocks = 1;
  bc.seed = seed;
  s.backbone = init_backbone(bc);
  s.backbone.frozen = true;

  Rng rng(seed, "mini_setup");
  for (int n = 0; n < 8; ++n) {
    const int k = static_cast<int>(rng.uniform_index(kClients));
    DomainSlice slice{1 + k * kVocabPerDomain, 1 + (k + 1) * kVocabPerDomain};
    Example ex;
    const int len = rng.uniform_int(3, 6);
    for (int t = 0; t < len; ++t)
      ex.context.push_back(1 + static_cast<ItemId>(rng.uniform_index(bc.vocab_size - 1)));
    ex.target = slice.begin + static_cast<ItemId>(rng.uniform_index(kVocabPerDomain));
    ex.slice = slice;
    s.batch.push_back(std::move(ex));
  }

  OptimizerSettings opt;
  s.client = make_client(0, kClients, nullptr, Method::fedecider, opt,
                         init_adapters(s.backbone, kRank, seed), 2.0, seed);
  std::map<LayerId, std::vector<DirectionalComponent>> received;
  for (const auto& id : s.backbone.adapter_layer_ids()) {
    std::vector<DirectionalComponent> comps;
    for (int j = 0; j < kClients; ++j)
      comps.push_back(normalize_direction(random_pair(rng, id, kRank, kDim, 0.3), j, 0));
    received.emplace(id, std::move(comps));
  }
  install_broadcast(s.client, received);
  for (Eigen::Index j = 0; j < kClients; ++j)
    s.client.weights.alpha(j) = rng.uniform(0.5, 2.0);
  return s;
}

double batch_loss(const BackboneParams& backbone, const DeltaMap& deltas,
                  const std::vector<Example>& batch) {
  double sum = 0.0;
  for (const auto& ex : batch) sum += forward_loss(backbone, deltas, ex).loss;
  return sum / static_cast<double>(batch.size());
}

}  // namespace

CheckResult check_normalization_suite(std::uint64_t seed) {
  CheckResult res;
  res.name = "normalization_suite";
  Rng rng(seed, "normalization_suite");
  const int dims[] = {8, 16, 32};
  const int ranks[] = {1, 4, 8};
  double worst_norm_dev = 0.0, worst_cos_dev = 0.0;
  bool ok = true;
  for (int n = 0; n < 1000; ++n) {
    const int d = dims[n % 3];
    const int r = ranks[(n / 3) % 3];
    AdapterPair ap = random_pair(rng, "w", r, d);
    DirectionalComponent dir = normalize_direction(ap, 0, 0);
    const Matrix raw = compose(ap);
    const Matrix tilde = dir.compose();
    const double norm_dev = std::abs(frob_norm(tilde) - 1.0);
    const double cos =
        frob_inner(raw, tilde) / (frob_norm(raw) * frob_norm(tilde));
    const double cos_dev = std::abs(cos - 1.0);
    worst_norm_dev = std::max(worst_norm_dev, norm_dev);
    worst_cos_dev = std::max(worst_cos_dev, cos_dev);
    if (norm_dev > 1e-6 || cos_dev > 1e-9) ok = false;
  }
  bool zero_raises = false;
  try {
    AdapterPair zero;
    zero.layer_id = "w";
    zero.rank = 2;
    zero.a_mat = Matrix::Zero(2, 8);
    zero.b_mat = Matrix::Zero(8, 2);
    normalize_direction(zero, 0, 0);
  } catch (const ZeroUpdateError&) {
    zero_raises = true;
  }
  res.passed = ok && zero_raises;
  std::ostringstream d;
  d << "1000 pairs, worst |norm-1| = " << worst_norm_dev << ", worst |cos-1| = " << worst_cos_dev
    << ", zero pair raises = " << (zero_raises ? "yes" : "no");
  res.detail = d.str();
  res.case_lines.push_back(json{{"check", res.name},
                                {"worst_norm_dev", worst_norm_dev},
                                {"worst_cos_dev", worst_cos_dev},
                                {"zero_raises", zero_raises},
                                {"status", res.passed ? "pass" : "fail"}}
                               .dump());
  return res;
}

CheckResult check_alpha_gradient_identity(std::uint64_t seed) {
  CheckResult res;
  res.name = "alpha_gradient_identity";
  double worst_rel = 0.0;
  bool ok = true;
  for (int cfg = 0; cfg < 20; ++cfg) {
    MiniSetup s = make_mini_setup(derive_seed(seed, "alpha_grad_cfg_" + std::to_string(cfg)));
    const TrainableGrads analytic = grad_trainables(s.client, s.backbone, s.batch);
    auto loss_of_alpha = [&](const Vector& alpha) {
      ClientState probe = s.client;
      probe.weights.alpha = alpha;
      return batch_loss(s.backbone, build_update(probe), s.batch);
    };
    for (int j = 0; j < 3; ++j) {
      const double fd = finite_diff_alpha_grad(loss_of_alpha, s.client.weights.alpha, j, 1e-5);
      const double rel =
          std::abs(analytic.alpha_grads(j) - fd) / std::max(std::abs(fd), 1e-3);
      worst_rel = std::max(worst_rel, rel);
      if (rel > 1e-4) ok = false;
      res.case_lines.push_back(json{{"check", res.name},
                                    {"config", cfg},
                                    {"j", j},
                                    {"analytic", analytic.alpha_grads(j)},
                                    {"finite_diff", fd},
                                    {"rel_error", rel},
                                    {"status", rel <= 1e-4 ? "pass" : "fail"}}
                                   .dump());
    }
  }
  res.passed = ok;
  std::ostringstream d;
  d << "20 configs (d=16, r=4, K=3), worst relative error = " << worst_rel;
  res.detail = d.str();
  return res;
}

CheckResult check_downweight_proposition(std::uint64_t seed) {
  CheckResult res;
  res.name = "downweight_proposition";
  Rng rng(seed, "downweight_cases");
  int skipped = 0, agreed = 0, checked = 0;
  for (int n = 0; n < 50; ++n) {
    const int d = 6;
    const Matrix target = random_matrix(rng, d, d);
    const Matrix w0 = random_matrix(rng, d, d, 0.5);
    std::vector<Matrix> directions;
    for (int j = 0; j < 3; ++j) {
      Matrix dir = random_matrix(rng, d, d);
      directions.push_back(dir / frob_norm(dir));
    }
    Vector alpha(3);
    for (int j = 0; j < 3; ++j) alpha(j) = rng.uniform(-1.0, 1.0);
    auto grad = [&](const Matrix& w) { return Matrix(w - target); };
    const int j = n % 3;
    SignCheckRecord rec = descent_sign_check(grad, w0, directions, alpha, 0.01, j);
    if (rec.skipped) {
      ++skipped;
    } else {
      ++checked;
      if (rec.consistent) ++agreed;
    }
    res.case_lines.push_back(json{{"check", res.name},
                                  {"case", n},
                                  {"inner_at_iterate", rec.inner_at_iterate},
                                  {"inner_at_base", rec.inner_at_base},
                                  {"status", rec.skipped ? "skip"
                                             : rec.consistent ? "pass"
                                                              : "fail"}}
                                 .dump());
  }
  res.passed = checked > 0 && agreed == checked;
  std::ostringstream d;
  d << agreed << "/" << checked << " non-skipped cases sign-consistent, skip rate = "
    << static_cast<double>(skipped) / 50.0;
  res.detail = d.str();
  return res;
}

CheckResult check_representation_lemma(std::uint64_t seed) {
  CheckResult res;
  res.name = "representation_lemma";
  Rng rng(seed, "representation_cases");
  double worst_coeff = 0.0, worst_resid = 0.0;
  bool ok = true;
  for (int n = 0; n < 20; ++n) {
    std::vector<Matrix> directions;
    for (int j = 0; j < 3; ++j) directions.push_back(random_matrix(rng, 8, 8));
    Vector truth(3);
    for (int j = 0; j < 3; ++j) truth(j) = rng.uniform(-2.0, 2.0);
    Matrix combo = Matrix::Zero(8, 8);
    for (int j = 0; j < 3; ++j) combo += truth(j) * directions[j];
    SpanFit fit = span_coordinates(directions, combo);
    const double coeff_err = (fit.coefficients - truth).cwiseAbs().maxCoeff();
    worst_coeff = std::max(worst_coeff, coeff_err);
    worst_resid = std::max(worst_resid, fit.residual_norm);
    if (coeff_err > 1e-8 || fit.residual_norm > 1e-10 || fit.degenerate) ok = false;
    res.case_lines.push_back(json{{"check", res.name},
                                  {"case", n},
                                  {"coeff_error", coeff_err},
                                  {"residual", fit.residual_norm},
                                  {"status", ok ? "pass" : "fail"}}
                                 .dump());
  }
  res.passed = ok;
  std::ostringstream d;
  d << "20 generate-then-recover cases (N=3, d=8), worst coefficient error = " << worst_coeff
    << ", worst residual = " << worst_resid;
  res.detail = d.str();
  return res;
}

CheckResult check_capacity_proposition() {
  CheckResult res;
  res.name = "capacity_proposition";
  Matrix d1 = Matrix::Zero(8, 8), d2 = Matrix::Zero(8, 8);
  d1(0, 0) = 1.0;
  d2(1, 1) = 1.0;
  const std::vector<Matrix> directions = {d1, d2};
  const std::vector<Matrix> targets = {d1, d2};

  SharedFit shared = shared_direction_residual(directions, targets);
  const double resid_sq = shared.residual_norm * shared.residual_norm;
  const double span1 = span_coordinates(directions, d1).residual_norm;
  const double span2 = span_coordinates(directions, d2).residual_norm;

  res.passed = std::abs(resid_sq - 1.0) <= 1e-3 && span1 < 1e-8 && span2 < 1e-8;
  std::ostringstream d;
  d << "shared-fit residual^2 = " << resid_sq << ", per-target span residuals = " << span1 << ", "
    << span2;
  res.detail = d.str();
  res.case_lines.push_back(json{{"check", res.name},
                                {"shared_residual_sq", resid_sq},
                                {"span_residuals", {span1, span2}},
                                {"status", res.passed ? "pass" : "fail"}}
                               .dump());
  return res;
}

CheckResult check_first_order_expansion(std::uint64_t seed) {
  CheckResult res;
  res.name = "first_order_expansion";
  bool ok = true;

  // quadratic surrogate: residual(t) = t^2/2 ||dW||_F^2 exactly, slope 2
  Rng rng(seed, "first_order_quadratic");
  const Matrix target = random_matrix(rng, 8, 8);
  const Matrix w0 = random_matrix(rng, 8, 8);
  const Matrix delta = random_matrix(rng, 8, 8);
  auto quad = [&](const Matrix& w) { return 0.5 * (w - target).squaredNorm(); };
  FirstOrderResult q =
      first_order_residual(quad, w0, delta, {1e-1, 1e-2, 1e-3}, frob_inner(w0 - target, delta));
  if (std::abs(q.slope - 2.0) > 1e-6) ok = false;
  res.case_lines.push_back(json{{"check", res.name},
                                {"case", "quadratic"},
                                {"slope", q.slope},
                                {"status", std::abs(q.slope - 2.0) <= 1e-6 ? "pass" : "fail"}}
                               .dump());

  // backbone NLL at 10 seeded points, slope in [1.8, 2.2]
  double worst_low = 2.0, worst_high = 2.0;
  for (int n = 0; n < 10; ++n) {
    MiniSetup s = make_mini_setup(derive_seed(seed, "first_order_pt_" + std::to_string(n)));
    Rng prng(seed, "first_order_delta_" + std::to_string(n));
    const int d = s.backbone.config.embed_dim;
    Matrix base = random_matrix(prng, d, d, 0.05);
    Matrix dw = random_matrix(prng, d, d);
    dw /= frob_norm(dw);
    auto f = [&](const Matrix& w) {
      DeltaMap deltas;
      deltas["block0.wq"] = w;
      return batch_loss(s.backbone, deltas, s.batch);
    };
    FirstOrderResult r = first_order_residual(f, base, dw);
    worst_low = std::min(worst_low, r.slope);
    worst_high = std::max(worst_high, r.slope);
    const bool in_range = r.slope >= 1.8 && r.slope <= 2.2;
    if (!in_range) ok = false;
    res.case_lines.push_back(json{{"check", res.name},
                                  {"case", n},
                                  {"slope", r.slope},
                                  {"points_used", r.points_used},
                                  {"status", in_range ? "pass" : "fail"}}
                                 .dump());
  }
  res.passed = ok;
  std::ostringstream d;
  d << "quadratic slope = " << q.slope << ", backbone NLL slopes in [" << worst_low << ", "
    << worst_high << "]";
  res.detail = d.str();
  return res;
}

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed) {
  return {check_normalization_suite(seed),  check_alpha_gradient_identity(seed),
          check_downweight_proposition(seed), check_representation_lemma(seed),
          check_capacity_proposition(),       check_first_order_expansion(seed)};
}

}  // namespace fedrec
