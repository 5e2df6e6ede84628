#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedrec/errors.hpp"
#include "fedrec/experiment.hpp"

using namespace fedrec;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const std::string& method, std::uint64_t seed = 7) {
  ExperimentConfig c;
  c.run_id = "tiny_" + method;
  c.method = method;
  c.num_domains = 3;
  c.vocab_per_domain = 30;
  c.users_per_domain = 15;
  c.num_clusters = 4;
  c.pool_sequences = 10;
  c.embed_dim = 8;
  c.max_seq_len = 10;
  c.num_blocks = 1;
  c.rank = 4;
  c.rounds = 3;
  c.local_epochs = 1;
  c.pre_epochs = 1;
  c.pretrain_epochs = 1;
  c.batch_size = 16;
  c.e_post = 1;
  c.seed = seed;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int count_lines(const std::string& s) {
  int n = 0;
  for (char ch : s)
    if (ch == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("config json round trip is lossless") {
  TempDir dir("fedrec_cfg_rt");
  ExperimentConfig c = tiny_config("fedprox", 99);
  c.sim_high = 0.65;
  c.lr_alpha = 0.002;
  c.ldp_epsilon = 1.5;
  c.output_dir = "elsewhere";
  const std::string path = (dir.path / "config.json").string();
  save_config(c, path);
  ExperimentConfig back = load_config(path);
  CHECK(back.run_id == c.run_id);
  CHECK(back.method == c.method);
  CHECK(back.users_per_domain == c.users_per_domain);
  CHECK(back.sim_high == c.sim_high);
  CHECK(back.lr_alpha == c.lr_alpha);
  CHECK(back.ldp_epsilon == c.ldp_epsilon);
  CHECK(back.seed == c.seed);
  CHECK(back.output_dir == c.output_dir);
  CHECK(back.e_post == c.e_post);
}

TEST_CASE("load_config: defaults fill missing keys, unknown keys rejected") {
  TempDir dir("fedrec_cfg_load");
  {
    std::ofstream out(dir.path / "minimal.json");
    out << "{\"run_id\": \"m\", \"method\": \"fedavg\"}\n";
  }
  ExperimentConfig c = load_config((dir.path / "minimal.json").string());
  CHECK(c.run_id == "m");
  CHECK(c.method == "fedavg");
  CHECK(c.rounds == 20);
  CHECK(c.alpha_init == 2.0);

  {
    std::ofstream out(dir.path / "typo.json");
    out << "{\"run_id\": \"m\", \"metod\": \"fedavg\"}\n";
  }
  CHECK_THROWS_AS(load_config((dir.path / "typo.json").string()), ConfigError);

  {
    std::ofstream out(dir.path / "broken.json");
    out << "{not json";
  }
  CHECK_THROWS_AS(load_config((dir.path / "broken.json").string()), ParseError);
}

TEST_CASE("validate reports every problem at once") {
  ExperimentConfig c = tiny_config("fedecider");
  c.rank = 0;
  c.rounds = -1;
  c.method = "nonsense";
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("rank") != std::string::npos);
    CHECK(msg.find("rounds") != std::string::npos);
    CHECK(msg.find("method") != std::string::npos);
  }
}

TEST_CASE("run_experiment: shapes of the archive") {
  RunArchive a = run_experiment(tiny_config("fedecider"));
  CHECK(a.logs.size() == 3);
  CHECK(a.test_per_round.size() == 3);
  for (const auto& per_client : a.test_per_round) CHECK(per_client.size() == 3);
  CHECK(a.final_test.size() == 3);
  REQUIRE(a.alpha.alpha.size() == 3);
  for (const Matrix& m : a.alpha.alpha) {
    CHECK(m.rows() == 3);
    CHECK(m.cols() == 3);
  }
  CHECK(a.best_val_round >= 1);
  CHECK(a.best_val_round <= 3);
  const double h5 = a.mean_final_test("H@5");
  CHECK(h5 >= 0.0);
  CHECK(h5 <= 1.0);
}

TEST_CASE("run_experiment: local_only moves no bytes") {
  RunArchive a = run_experiment(tiny_config("local_only"));
  CHECK(a.comm.total_upload_params == 0);
  CHECK(a.comm.total_download_params == 0);
  CHECK(a.comm.total_upload_bytes == 0);
  CHECK(a.comm.total_download_bytes == 0);
}

TEST_CASE("two runs of the same config emit byte-identical tables") {
  TempDir d1("fedrec_det_1"), d2("fedrec_det_2");
  emit_results(run_experiment(tiny_config("fedecider")), d1.path.string());
  emit_results(run_experiment(tiny_config("fedecider")), d2.path.string());
  for (const char* name : {"metrics.csv", "alpha.csv", "comm.csv"})
    CHECK(slurp(d1.path / name) == slurp(d2.path / name));
}

TEST_CASE("emit_results: file inventory and alpha.csv shape") {
  TempDir dir("fedrec_emit");
  RunArchive a = run_experiment(tiny_config("fedecider"));
  emit_results(a, dir.path.string());
  for (const char* name :
       {"metrics.csv", "alpha.csv", "comm.csv", "rounds.jsonl", "config.json", "summary.json"})
    CHECK(fs::exists(dir.path / name));

  const std::string alpha = slurp(dir.path / "alpha.csv");
  CHECK(count_lines(alpha) == 1 + 3 * 3 * 3);  // header + rounds * K * K
  CHECK(alpha.rfind("run_id,round,i,j,alpha", 0) == 0);

  const std::string metrics = slurp(dir.path / "metrics.csv");
  CHECK(metrics.rfind("run_id,method,client,round,split,metric,value", 0) == 0);

  // re-emission into the same directory is idempotent
  const std::string before = slurp(dir.path / "metrics.csv");
  emit_results(a, dir.path.string());
  CHECK(slurp(dir.path / "metrics.csv") == before);
}

TEST_CASE("different seeds produce different trajectories") {
  RunArchive a = run_experiment(tiny_config("fedecider", 7));
  RunArchive b = run_experiment(tiny_config("fedecider", 8));
  CHECK(a.alpha.alpha.back() != b.alpha.alpha.back());
}
