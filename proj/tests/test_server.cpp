#include <doctest.h>

#include <numeric>

#include "fedrec/errors.hpp"
#include "fedrec/rng.hpp"
#include "fedrec/server.hpp"

using namespace fedrec;

namespace {

struct Fixture {
  GeneratedWorld world;
  BackboneParams backbone;
  std::vector<ClientState> clients;
  ServerState server;

  explicit Fixture(Method mode, int embed_dim = 8, int num_blocks = 1, int rank = 4) {
    DomainWorld w;
    w.num_domains = 3;
    w.vocab_per_domain = 30;
    w.users_per_domain = 20;
    w.num_clusters = 4;
    w.pool_sequences = 10;
    w.max_seq_len = 10;
    w.similarity = DomainWorld::default_similarity();
    w.seed = 7;
    world = generate_world(w);

    BackboneConfig bc;
    bc.embed_dim = embed_dim;
    bc.vocab_size = 91;
    bc.max_seq_len = 10;
    bc.num_blocks = num_blocks;
    bc.seed = 7;
    backbone = init_backbone(bc);
    backbone.frozen = true;

    OptimizerSettings opt;
    opt.batch_size = 16;
    const AdapterSet init = init_adapters(backbone, rank, 7);
    for (int i = 0; i < 3; ++i)
      clients.push_back(make_client(i, 3, &world.domains[i], mode, opt, init, 2.0, 7));
    server.strategy = mode;
    server.initial_adapters = init;
  }

  void train_all(int epochs = 1) {
    for (auto& c : clients) local_train(c, backbone, epochs);
  }
};

Upload rank1_upload(double b0, double b1, double a0, double a1) {
  AdapterPair ap;
  ap.layer_id = "w";
  ap.rank = 1;
  ap.b_mat = Matrix(2, 1);
  ap.b_mat << b0, b1;
  ap.a_mat = Matrix(1, 2);
  ap.a_mat << a0, a1;
  Upload u;
  u.adapters["w"] = ap;
  u.param_count = 4;
  u.byte_count = 4 + 4 + 1 + 12 + 32;
  return u;
}

}  // namespace

TEST_CASE("run_round: per-client comm counts at the reference sizes") {
  // d = 32, two blocks (8 adapted layers), r = 8: upload is 8 * 2 * 8 * 32 =
  // 4096 params; the personalized download carries all K = 3 components.
  Fixture f(Method::fedecider, 32, 2, 8);
  f.train_all();
  RoundLog log = run_round(f.clients, f.backbone, f.server, 1);
  REQUIRE(log.comm.size() == 3);
  for (const auto& pc : log.comm) {
    CHECK(pc.upload_params == 4096);
    CHECK(pc.download_params == 12288);
    CHECK(pc.download_bytes == 3 * pc.upload_bytes);
  }
}

TEST_CASE("run_round: baseline download is the single aggregated set") {
  Fixture f(Method::fedavg, 32, 2, 8);
  f.train_all();
  RoundLog log = run_round(f.clients, f.backbone, f.server, 1);
  for (const auto& pc : log.comm) {
    CHECK(pc.upload_params == 4096);
    CHECK(pc.download_params == 4096);
  }
}

TEST_CASE("run_round: broadcast components are unit norm and ordered by source") {
  Fixture f(Method::fedecider);
  f.train_all();
  run_round(f.clients, f.backbone, f.server, 1);
  for (const auto& c : f.clients) {
    REQUIRE(c.received.size() == c.adapters.size());
    for (const auto& [id, comps] : c.received) {
      REQUIRE(comps.size() == 3);
      for (int j = 0; j < 3; ++j) {
        CHECK(comps[j].source_client == j);
        CHECK(frob_norm(comps[j].compose()) == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("run_round: every client receives the same component list") {
  Fixture f(Method::fedecider);
  f.train_all();
  run_round(f.clients, f.backbone, f.server, 1);
  for (const auto& [id, comps] : f.clients[0].received)
    for (int j = 0; j < 3; ++j) {
      CHECK(comps[j].a_tilde == f.clients[1].received.at(id)[j].a_tilde);
      CHECK(comps[j].b_tilde == f.clients[2].received.at(id)[j].b_tilde);
    }
}

TEST_CASE("run_round: raw variants skip normalization") {
  Fixture f(Method::wo_decomp);
  f.train_all();
  // capture the uploads the round will see
  std::vector<Upload> uploads;
  for (const auto& c : f.clients) uploads.push_back(make_upload(c));
  run_round(f.clients, f.backbone, f.server, 1);
  for (const auto& [id, comps] : f.clients[0].received)
    for (int j = 0; j < 3; ++j) {
      CHECK(comps[j].a_tilde == uploads[j].adapters.at(id).a_mat);
      CHECK(comps[j].b_tilde == uploads[j].adapters.at(id).b_mat);
    }
}

TEST_CASE("run_round: all-zero uploads are skipped with a zero-component fallback") {
  Fixture f(Method::fedecider);
  // no training: b_mat is still zero everywhere
  RoundLog log = run_round(f.clients, f.backbone, f.server, 1);
  CHECK(log.skipped == std::vector<ClientId>{0, 1, 2});
  for (const auto& [id, comps] : f.clients[0].received)
    for (const auto& comp : comps) CHECK(comp.compose().isZero(0.0));

  // after training the next round has no skips and replaces the stale entries
  f.train_all();
  RoundLog log2 = run_round(f.clients, f.backbone, f.server, 2);
  CHECK(log2.skipped.empty());
  for (const auto& [id, comps] : f.clients[0].received)
    for (const auto& comp : comps) CHECK(comp.compose().isZero(0.0) == false);
}

TEST_CASE("run_round: one stale client keeps its previous direction") {
  Fixture f(Method::fedecider);
  f.train_all();
  run_round(f.clients, f.backbone, f.server, 1);
  const auto before = f.clients[0].received;
  // zero out client 2's trainable factors so its next upload is skipped
  for (auto& [id, ap] : f.clients[2].adapters) ap.b_mat.setZero();
  local_train(f.clients[0], f.backbone, 1);
  local_train(f.clients[1], f.backbone, 1);
  RoundLog log = run_round(f.clients, f.backbone, f.server, 2);
  CHECK(log.skipped == std::vector<ClientId>{2});
  for (const auto& [id, comps] : f.clients[0].received) {
    CHECK(comps[2].a_tilde == before.at(id)[2].a_tilde);
    CHECK(comps[2].b_tilde == before.at(id)[2].b_tilde);
    CHECK(comps[0].a_tilde != before.at(id)[0].a_tilde);
  }
}

TEST_CASE("run_round rejects out-of-order client lists") {
  Fixture f(Method::fedecider);
  f.train_all();
  std::swap(f.clients[0], f.clients[2]);
  CHECK_THROWS_AS(run_round(f.clients, f.backbone, f.server, 1), ProtocolError);
}

TEST_CASE("aggregate: factor averaging is not product averaging") {
  // B1 A1 = e11 and B2 A2 = e22 average to 0.5 I as products, but averaging
  // the factors first gives the rank-1 matrix 0.25 * ones
  std::vector<Upload> uploads{rank1_upload(1, 0, 1, 0), rank1_upload(0, 1, 0, 1)};
  AdapterSet init = uploads[0].adapters;
  AdapterSet mean = aggregate(Method::fedavg, uploads, init);
  Matrix expected_b(2, 1), expected_a(1, 2);
  expected_b << 0.5, 0.5;
  expected_a << 0.5, 0.5;
  CHECK(mean.at("w").b_mat.isApprox(expected_b));
  CHECK(mean.at("w").a_mat.isApprox(expected_a));
  CHECK(compose(mean.at("w")).isApprox(Matrix::Constant(2, 2, 0.25)));
  CHECK(!compose(mean.at("w")).isApprox(0.5 * Matrix::Identity(2, 2)));
}

TEST_CASE("aggregate: mean of identical uploads is the upload") {
  std::vector<Upload> uploads{rank1_upload(1, 2, 3, 4), rank1_upload(1, 2, 3, 4)};
  AdapterSet mean = aggregate(Method::fedavg, uploads, uploads[0].adapters);
  CHECK(mean.at("w").b_mat == uploads[0].adapters.at("w").b_mat);
  CHECK(mean.at("w").a_mat == uploads[0].adapters.at("w").a_mat);
}

TEST_CASE("aggregate: ffa_lora restores the shared initial A") {
  std::vector<Upload> uploads{rank1_upload(1, 0, 9, 9), rank1_upload(0, 1, 8, 8)};
  AdapterSet init = rank1_upload(0, 0, 0.25, -0.25).adapters;
  AdapterSet agg = aggregate(Method::ffa_lora, uploads, init);
  CHECK(agg.at("w").a_mat == init.at("w").a_mat);
  Matrix expected_b(2, 1);
  expected_b << 0.5, 0.5;
  CHECK(agg.at("w").b_mat.isApprox(expected_b));
}

TEST_CASE("aggregate rejects mixed ranks") {
  Upload u1 = rank1_upload(1, 0, 1, 0);
  Upload u2;
  AdapterPair ap;
  ap.layer_id = "w";
  ap.rank = 2;
  ap.b_mat = Matrix::Ones(2, 2);
  ap.a_mat = Matrix::Ones(2, 2);
  u2.adapters["w"] = ap;
  CHECK_THROWS_AS(aggregate(Method::fedavg, {u1, u2}, u1.adapters), ProtocolError);
}

TEST_CASE("finalize_models: no-op for fedecider, idempotent for pfedavg") {
  Fixture fed(Method::fedecider);
  fed.train_all();
  run_round(fed.clients, fed.backbone, fed.server, 1);
  const AdapterSet adapters_before = fed.clients[0].adapters;
  std::vector<DeltaMap> deltas = finalize_models(fed.clients, fed.backbone, 5);
  REQUIRE(deltas.size() == 3);
  for (const auto& [id, ap] : fed.clients[0].adapters) {
    CHECK(ap.a_mat == adapters_before.at(id).a_mat);
    CHECK(ap.b_mat == adapters_before.at(id).b_mat);
  }
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const DeltaMap direct = build_update(fed.clients[i]);
    for (const auto& [id, m] : deltas[i]) CHECK(m == direct.at(id));
  }

  Fixture pf(Method::pfedavg);
  pf.train_all();
  run_round(pf.clients, pf.backbone, pf.server, 1);
  const AdapterSet pf_before = pf.clients[0].adapters;
  std::vector<DeltaMap> first = finalize_models(pf.clients, pf.backbone, 2);
  bool changed = false;
  for (const auto& [id, ap] : pf.clients[0].adapters)
    if (ap.b_mat != pf_before.at(id).b_mat) changed = true;
  CHECK(changed);  // post-hoc adaptation trained the installed model
  const AdapterSet after_first = pf.clients[0].adapters;
  std::vector<DeltaMap> second = finalize_models(pf.clients, pf.backbone, 2);
  for (const auto& [id, ap] : pf.clients[0].adapters)
    CHECK(ap.b_mat == after_first.at(id).b_mat);
  for (const auto& [id, m] : first[0]) CHECK(m == second[0].at(id));
}

TEST_CASE("comm_accounting: totals equal the sums of the per-round entries") {
  Fixture f(Method::fedecider);
  f.train_all();
  std::vector<RoundLog> logs;
  logs.push_back(run_round(f.clients, f.backbone, f.server, 1));
  f.train_all();
  logs.push_back(run_round(f.clients, f.backbone, f.server, 2));
  CommSummary s = comm_accounting(logs);
  REQUIRE(s.per_round_upload_params.size() == 2);
  std::size_t up = 0, down = 0, up_b = 0, down_b = 0;
  for (std::size_t t = 0; t < logs.size(); ++t) {
    std::size_t round_up = 0, round_down = 0;
    for (const auto& pc : logs[t].comm) {
      round_up += pc.upload_params;
      round_down += pc.download_params;
      up_b += pc.upload_bytes;
      down_b += pc.download_bytes;
    }
    CHECK(s.per_round_upload_params[t] == round_up);
    CHECK(s.per_round_download_params[t] == round_down);
    up += round_up;
    down += round_down;
  }
  CHECK(s.total_upload_params == up);
  CHECK(s.total_download_params == down);
  CHECK(s.total_upload_bytes == up_b);
  CHECK(s.total_download_bytes == down_b);
}

TEST_CASE("round log records alpha, losses, and validation metrics") {
  Fixture f(Method::fedecider);
  f.train_all();
  RoundLog log = run_round(f.clients, f.backbone, f.server, 1);
  CHECK(log.round == 1);
  REQUIRE(log.alpha.rows() == 3);
  REQUIRE(log.alpha.cols() == 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(log.alpha(i, j) == f.clients[i].weights.alpha(j));
  REQUIRE(log.val_metrics.size() == 3);
  for (const auto& rec : log.val_metrics) {
    CHECK(rec.split == "val");
    CHECK(rec.values.count("H@5") == 1);
  }
}
