#include "fedrec/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

#include "fedrec/errors.hpp"
#include "fedrec/rng.hpp"

namespace fedrec {

namespace {

using nlohmann::json;

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Matrix build_similarity(const ExperimentConfig& c) {
  Matrix s = Matrix::Identity(c.num_domains, c.num_domains);
  for (int i = 0; i < c.num_domains; ++i)
    for (int j = i + 1; j < c.num_domains; ++j)
      s(i, j) = s(j, i) = (i == 0 && j == 1) ? c.sim_high : c.sim_low;
  return s;
}

std::vector<MetricRecord> evaluate_all(const std::vector<ClientState>& clients,
                                       const BackboneParams& backbone, const std::string& split,
                                       int round) {
  std::vector<MetricRecord> out;
  for (const auto& c : clients)
    out.push_back(evaluate_client(c, backbone, split, {5, 10}, round));
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  try {
    parse_method(method);
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  auto positive = [&](double v, const char* name) {
    if (v <= 0) problems.push_back(std::string(name) + " must be positive");
  };
  if (csv_path.empty()) {
    positive(num_domains, "num_domains");
    positive(vocab_per_domain, "vocab_per_domain");
    positive(users_per_domain, "users_per_domain");
    positive(num_clusters, "num_clusters");
    positive(pool_sequences, "pool_sequences");
    if (sim_high < 0 || sim_high > 1) problems.push_back("sim_high must lie in [0, 1]");
    if (sim_low < 0 || sim_low > 1) problems.push_back("sim_low must lie in [0, 1]");
  }
  positive(embed_dim, "embed_dim");
  positive(max_seq_len, "max_seq_len");
  positive(num_blocks, "num_blocks");
  positive(rank, "rank");
  positive(rounds, "rounds");
  positive(local_epochs, "local_epochs");
  positive(batch_size, "batch_size");
  positive(lr_adapter, "lr_adapter");
  positive(lr_alpha, "lr_alpha");
  positive(lr_pretrain, "lr_pretrain");
  positive(fedprox_mu, "fedprox_mu");
  if (pre_epochs < 0) problems.push_back("pre_epochs must be >= 0");
  if (pretrain_epochs < 0) problems.push_back("pretrain_epochs must be >= 0");
  if (e_post < 0) problems.push_back("e_post must be >= 0");
  if (ldp_epsilon < 0) problems.push_back("ldp_epsilon must be >= 0 (0 disables)");
  if (run_id.empty()) problems.push_back("run_id must be nonempty");
  if (!problems.empty()) {
    std::string all = "invalid config:";
    for (const auto& p : problems) all += "\n  - " + p;
    throw ConfigError(all);
  }
}

namespace {

void to_json_obj(json& j, const ExperimentConfig& c) {
  j = json{{"run_id", c.run_id},
           {"method", c.method},
           {"csv_path", c.csv_path},
           {"num_domains", c.num_domains},
           {"vocab_per_domain", c.vocab_per_domain},
           {"users_per_domain", c.users_per_domain},
           {"num_clusters", c.num_clusters},
           {"pool_sequences", c.pool_sequences},
           {"sim_high", c.sim_high},
           {"sim_low", c.sim_low},
           {"embed_dim", c.embed_dim},
           {"max_seq_len", c.max_seq_len},
           {"num_blocks", c.num_blocks},
           {"rank", c.rank},
           {"rounds", c.rounds},
           {"local_epochs", c.local_epochs},
           {"pre_epochs", c.pre_epochs},
           {"pretrain_epochs", c.pretrain_epochs},
           {"batch_size", c.batch_size},
           {"lr_adapter", c.lr_adapter},
           {"lr_alpha", c.lr_alpha},
           {"lr_pretrain", c.lr_pretrain},
           {"alpha_init", c.alpha_init},
           {"fedprox_mu", c.fedprox_mu},
           {"ldp_epsilon", c.ldp_epsilon},
           {"e_post", c.e_post},
           {"seed", c.seed},
           {"output_dir", c.output_dir}};
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  ExperimentConfig c;
  json known;
  to_json_obj(known, c);
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) unknown.push_back(key);
  if (!unknown.empty()) {
    std::string msg = "config " + path + ": unknown keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("run_id", c.run_id);
  get("method", c.method);
  get("csv_path", c.csv_path);
  get("num_domains", c.num_domains);
  get("vocab_per_domain", c.vocab_per_domain);
  get("users_per_domain", c.users_per_domain);
  get("num_clusters", c.num_clusters);
  get("pool_sequences", c.pool_sequences);
  get("sim_high", c.sim_high);
  get("sim_low", c.sim_low);
  get("embed_dim", c.embed_dim);
  get("max_seq_len", c.max_seq_len);
  get("num_blocks", c.num_blocks);
  get("rank", c.rank);
  get("rounds", c.rounds);
  get("local_epochs", c.local_epochs);
  get("pre_epochs", c.pre_epochs);
  get("pretrain_epochs", c.pretrain_epochs);
  get("batch_size", c.batch_size);
  get("lr_adapter", c.lr_adapter);
  get("lr_alpha", c.lr_alpha);
  get("lr_pretrain", c.lr_pretrain);
  get("alpha_init", c.alpha_init);
  get("fedprox_mu", c.fedprox_mu);
  get("ldp_epsilon", c.ldp_epsilon);
  get("e_post", c.e_post);
  get("seed", c.seed);
  get("output_dir", c.output_dir);
  c.validate();
  return c;
}

void save_config(const ExperimentConfig& config, const std::string& path) {
  json j;
  to_json_obj(j, config);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path);
  out << j.dump(2) << '\n';
}

double RunArchive::mean_final_test(const std::string& metric) const {
  if (final_test.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& rec : final_test) sum += rec.values.at(metric);
  return sum / static_cast<double>(final_test.size());
}

RunArchive run_experiment(const ExperimentConfig& config) {
  config.validate();
  const Method method = parse_method(config.method);

  RunArchive archive;
  archive.config = config;

  // data
  std::vector<InteractionDataset> domains;
  std::vector<Example> pooled;
  if (config.csv_path.empty()) {
    DomainWorld world;
    world.num_domains = config.num_domains;
    world.vocab_per_domain = config.vocab_per_domain;
    world.users_per_domain = config.users_per_domain;
    world.num_clusters = config.num_clusters;
    world.pool_sequences = config.pool_sequences;
    world.max_seq_len = config.max_seq_len;
    world.similarity = build_similarity(config);
    world.seed = config.seed;
    GeneratedWorld gen = generate_world(world);
    domains = std::move(gen.domains);
    pooled = std::move(gen.pooled);
  } else {
    domains = ingest_csv(config.csv_path, config.max_seq_len);
    // no held-out pool in the ingestion path; pretrain on the union of train splits
    for (const auto& ds : domains)
      pooled.insert(pooled.end(), ds.train.begin(), ds.train.end());
  }
  const int K = static_cast<int>(domains.size());

  // backbone
  BackboneConfig bc;
  bc.embed_dim = config.embed_dim;
  bc.max_seq_len = config.max_seq_len;
  bc.num_blocks = config.num_blocks;
  ItemId vocab = 1;
  for (const auto& ds : domains) vocab = std::max(vocab, ds.slice.end);
  bc.vocab_size = static_cast<int>(vocab);
  bc.seed = config.seed;
  BackboneParams backbone = init_backbone(bc);
  backbone = pretrain_backbone(std::move(backbone), pooled, config.pretrain_epochs,
                               config.lr_pretrain, config.batch_size, config.seed);

  // clients share one adapter initialization
  OptimizerSettings opt;
  opt.lr_adapter = config.lr_adapter;
  opt.lr_alpha = config.lr_alpha;
  opt.batch_size = config.batch_size;
  opt.fedprox_mu = config.fedprox_mu;
  const AdapterSet init = init_adapters(backbone, config.rank, config.seed);
  std::vector<ClientState> clients;
  for (int i = 0; i < K; ++i) {
    clients.push_back(
        make_client(i, K, &domains[i], method, opt, init, config.alpha_init, config.seed));
    clients.back().ldp_epsilon = config.ldp_epsilon;
  }

  ServerState server;
  server.strategy = method;
  server.initial_adapters = init;

  // pre-communication phase: every client trains its raw adapters alone
  std::vector<double> last_losses(K, 0.0);
  for (int i = 0; i < K; ++i) {
    auto losses = local_train(clients[i], backbone, config.pre_epochs);
    if (!losses.empty()) last_losses[i] = losses.back();
  }

  for (int r = 1; r <= config.rounds; ++r) {
    if (r > 1)
      for (int i = 0; i < K; ++i) {
        auto losses = local_train(clients[i], backbone, config.local_epochs);
        if (!losses.empty()) last_losses[i] = losses.back();
      }
    RoundLog log = run_round(clients, backbone, server, r);
    log.mean_train_loss = last_losses;
    archive.test_per_round.push_back(evaluate_all(clients, backbone, "test", r));
    archive.logs.push_back(std::move(log));
  }

  finalize_models(clients, backbone, config.e_post);
  archive.final_test = evaluate_all(clients, backbone, "test", config.rounds);

  std::vector<Matrix> alphas;
  std::vector<int> rounds;
  for (const auto& log : archive.logs) {
    alphas.push_back(log.alpha);
    rounds.push_back(log.round);
  }
  archive.alpha = alpha_trajectory(alphas, rounds);
  archive.comm = comm_accounting(archive.logs);

  double best = -1.0;
  for (std::size_t t = 0; t < archive.logs.size(); ++t) {
    double mean_val = 0.0;
    for (const auto& rec : archive.logs[t].val_metrics) mean_val += rec.values.at("H@5");
    mean_val /= static_cast<double>(archive.logs[t].val_metrics.size());
    if (mean_val > best) {
      best = mean_val;
      archive.best_val_round = archive.logs[t].round;
    }
  }
  return archive;
}

void emit_results(const RunArchive& archive, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const auto& cfg = archive.config;

  {
    std::ofstream out(out_dir + "/metrics.csv");
    if (!out) throw ParseError("emit_results: cannot write to " + out_dir);
    out << "run_id,method,client,round,split,metric,value\n";
    auto row = [&](const MetricRecord& rec, const std::string& split) {
      for (const auto& [name, v] : rec.values)
        out << cfg.run_id << ',' << cfg.method << ',' << rec.client << ',' << rec.round << ','
            << split << ',' << name << ',' << fmt_double(v) << '\n';
    };
    for (const auto& log : archive.logs)
      for (const auto& rec : log.val_metrics) row(rec, "val");
    for (const auto& per_client : archive.test_per_round)
      for (const auto& rec : per_client) row(rec, "test");
    for (const auto& rec : archive.final_test) row(rec, "test_final");
    if (archive.best_val_round >= 1)
      for (const auto& rec : archive.test_per_round[archive.best_val_round - 1])
        row(rec, "test_best_val");
  }

  {
    std::ofstream out(out_dir + "/alpha.csv");
    out << "run_id,round,i,j,alpha\n";
    for (std::size_t t = 0; t < archive.alpha.rounds.size(); ++t) {
      const Matrix& a = archive.alpha.alpha[t];
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
          out << cfg.run_id << ',' << archive.alpha.rounds[t] << ',' << i << ',' << j << ','
              << fmt_double(a(i, j)) << '\n';
    }
  }

  {
    std::ofstream out(out_dir + "/comm.csv");
    out << "run_id,round,client,upload_params,download_params,upload_bytes,download_bytes\n";
    for (const auto& log : archive.logs)
      for (std::size_t i = 0; i < log.comm.size(); ++i)
        out << cfg.run_id << ',' << log.round << ',' << i << ',' << log.comm[i].upload_params
            << ',' << log.comm[i].download_params << ',' << log.comm[i].upload_bytes << ','
            << log.comm[i].download_bytes << '\n';
  }

  {
    std::ofstream out(out_dir + "/rounds.jsonl");
    for (const auto& log : archive.logs) {
      json j;
      j["round"] = log.round;
      j["skipped"] = log.skipped;
      j["wall_time_sec"] = log.wall_time_sec;
      j["mean_train_loss"] = log.mean_train_loss;
      json comm = json::array();
      for (const auto& c : log.comm)
        comm.push_back({{"upload_params", c.upload_params},
                        {"download_params", c.download_params},
                        {"upload_bytes", c.upload_bytes},
                        {"download_bytes", c.download_bytes}});
      j["comm"] = comm;
      json alpha = json::array();
      for (Eigen::Index i = 0; i < log.alpha.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index jj = 0; jj < log.alpha.cols(); ++jj) row.push_back(log.alpha(i, jj));
        alpha.push_back(row);
      }
      j["alpha"] = alpha;
      json vals = json::array();
      for (const auto& rec : log.val_metrics)
        vals.push_back({{"client", rec.client},
                        {"users", rec.user_count},
                        {"H@5", rec.values.at("H@5")},
                        {"H@10", rec.values.at("H@10")},
                        {"N@5", rec.values.at("N@5")},
                        {"N@10", rec.values.at("N@10")}});
      j["val"] = vals;
      out << j.dump() << '\n';
    }
  }

  save_config(cfg, out_dir + "/config.json");

  {
    json j;
    j["best_val_round"] = archive.best_val_round;
    j["alpha_convergence_round"] = archive.alpha.convergence_round;
    j["total_upload_params"] = archive.comm.total_upload_params;
    j["total_download_params"] = archive.comm.total_download_params;
    for (const char* m : {"H@5", "H@10", "N@5", "N@10"})
      j[std::string("mean_final_test_") + m] = archive.mean_final_test(m);
    std::ofstream out(out_dir + "/summary.json");
    out << j.dump(2) << '\n';
  }
}

}  // namespace fedrec
