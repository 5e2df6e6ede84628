#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "fedrec/datagen.hpp"
#include "fedrec/experiment.hpp"
#include "fedrec/verify.hpp"

namespace {

std::filesystem::path output_root() {
  const char* env = std::getenv("FEDREC_OUT");
  return env ? env : ".";
}

int cmd_run(const std::string& config_path) {
  fedrec::ExperimentConfig config = fedrec::load_config(config_path);
  fedrec::RunArchive archive = fedrec::run_experiment(config);
  const std::filesystem::path base(config.output_dir);
  // absolute output_dir wins; relative is resolved under FEDREC_OUT (or cwd)
  const std::string out_dir =
      ((base.is_absolute() ? base : output_root() / base) / config.run_id).string();
  fedrec::emit_results(archive, out_dir);
  std::cout << "run " << config.run_id << " (" << config.method << ") finished\n"
            << "  best validation round: " << archive.best_val_round << "\n"
            << "  alpha convergence round: " << archive.alpha.convergence_round << "\n"
            << "  mean final test H@5:  " << archive.mean_final_test("H@5") << "\n"
            << "  mean final test N@10: " << archive.mean_final_test("N@10") << "\n"
            << "  results: " << out_dir << "\n";
  return 0;
}

int cmd_verify(std::uint64_t seed, bool json_cases) {
  const auto results = fedrec::run_oracle_suite(seed);
  bool all_passed = true;
  for (const auto& res : results) {
    if (json_cases)
      for (const auto& line : res.case_lines) std::cout << line << "\n";
    std::cout << (res.passed ? "[PASS] " : "[FAIL] ") << res.name << ": " << res.detail << "\n";
    all_passed = all_passed && res.passed;
  }
  return all_passed ? 0 : 1;
}

int cmd_gen_data(const std::string& out_path, int domains, int vocab, int users, int clusters,
                 double sim_high, double sim_low, std::uint64_t seed) {
  fedrec::DomainWorld world;
  world.num_domains = domains;
  world.vocab_per_domain = vocab;
  world.users_per_domain = users;
  world.num_clusters = clusters;
  world.similarity = fedrec::Matrix::Identity(domains, domains);
  for (int i = 0; i < domains; ++i)
    for (int j = i + 1; j < domains; ++j)
      world.similarity(i, j) = world.similarity(j, i) = (i == 0 && j == 1) ? sim_high : sim_low;
  world.seed = seed;
  fedrec::GeneratedWorld gen = fedrec::generate_world(world);
  fedrec::export_csv(gen.domains, out_path);
  std::size_t users_total = 0;
  for (const auto& ds : gen.domains) users_total += ds.sequences.size();
  std::cout << "wrote " << out_path << ": " << domains << " domains, " << users_total
            << " users\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& archives) {
  using nlohmann::json;
  std::cout << "run_dir                          H@5      H@10     N@5      N@10     best_round\n";
  for (const auto& dir : archives) {
    std::ifstream in(dir + "/summary.json");
    if (!in) {
      std::cerr << dir << ": no summary.json\n";
      return 1;
    }
    json j;
    in >> j;
    std::printf("%-32s %-8.4f %-8.4f %-8.4f %-8.4f %d\n", dir.c_str(),
                j["mean_final_test_H@5"].get<double>(), j["mean_final_test_H@10"].get<double>(),
                j["mean_final_test_N@5"].get<double>(), j["mean_final_test_N@10"].get<double>(),
                j["best_val_round"].get<int>());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated low-rank adapter recommendation simulator"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run one experiment from a config file");
  run->add_option("config", config_path, "JSON config path")->required();

  std::uint64_t seed = 7;
  bool json_cases = false;
  auto* verify = app.add_subcommand("verify", "run the numeric oracle suite");
  verify->add_option("--seed", seed, "oracle suite seed");
  verify->add_flag("--cases", json_cases, "emit per-case JSON lines");

  std::string out_path = "world.csv";
  int domains = 3, vocab = 100, users = 200, clusters = 8;
  double sim_high = 0.8, sim_low = 0.1;
  std::uint64_t gen_seed = 7;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic world as CSV");
  gen->add_option("output", out_path, "output CSV path")->required();
  gen->add_option("--domains", domains);
  gen->add_option("--vocab", vocab);
  gen->add_option("--users", users);
  gen->add_option("--clusters", clusters);
  gen->add_option("--sim-high", sim_high);
  gen->add_option("--sim-low", sim_low);
  gen->add_option("--seed", gen_seed);

  std::vector<std::string> archives;
  auto* report = app.add_subcommand("report", "summarize one or more result archives");
  report->add_option("archives", archives, "archive directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path);
    if (verify->parsed()) return cmd_verify(seed, json_cases);
    if (gen->parsed())
      return cmd_gen_data(out_path, domains, vocab, users, clusters, sim_high, sim_low, gen_seed);
    if (report->parsed()) return cmd_report(archives);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
