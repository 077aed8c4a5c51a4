// fedmoe: partition -> fedavg -> personalize -> report, plus selftest.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/sha.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "criteria.hpp"
#include "experiment_config.hpp"
#include "fedmoe/fedmoe.hpp"

namespace fs = std::filesystem;
using namespace fedmoe;
using cli::ExperimentConfig;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Inputs {
  LabeledDataset train;
  LabeledDataset test;
  ModelSpec spec;
};

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  std::ostringstream os;
  for (unsigned char b : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

std::uint64_t data_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {stream::synthetic}); }
std::uint64_t partition_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {stream::partition}); }
std::uint64_t init_seed(const ExperimentConfig& c) { return derive_seed(c.seed, {stream::init}); }

/// Tracks written files and keeps manifest.json in sync with them.
class Run {
 public:
  explicit Run(const ExperimentConfig& cfg) : cfg_(cfg) {
    const fs::path path = cfg.out / "manifest.json";
    if (fs::exists(path)) {
      try {
        manifest_ = json::parse(detail::read_text(path));
      } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
      }
    }
  }

  fs::path path(const std::string& rel) const { return cfg_.out / rel; }

  void write(const std::string& rel, std::string_view bytes) {
    detail::write_text(path(rel), bytes);
    manifest_["files"][rel] = sha256_hex(bytes);
    spdlog::info("wrote {}", path(rel).string());
  }

  void record(const std::string& step, json info) { manifest_["steps"][step] = std::move(info); }

  void finish() {
    manifest_["tool"] = "fedmoe";
    manifest_["version"] = kVersion;
    manifest_["config"] = cli::to_json(cfg_);
    manifest_["seeds"] = {{"run", cfg_.seed},
                          {"data", data_seed(cfg_)},
                          {"partition", partition_seed(cfg_)},
                          {"init", init_seed(cfg_)},
                          {"fedavg", cfg_.seed},
                          {"personalize", cfg_.seed}};
    detail::write_text(path("manifest.json"), manifest_.dump(2) + "\n");
    detail::write_text(path("config.resolved.ini"), cli::to_ini(cfg_));
  }

 private:
  const ExperimentConfig& cfg_;
  json manifest_ = json::object();
};

Inputs load_inputs(const ExperimentConfig& c) {
  Inputs in;
  if (c.data.source == cli::DataSource::synthetic) {
    SyntheticSpec s = c.data.synthetic;
    s.seed = data_seed(c);
    in.train = make_synthetic(s, 0);
    s.per_class = c.data.test_per_class;
    in.test = make_synthetic(s, 1);
  } else {
    in.train = load_idx(c.data.train_images, c.data.train_labels, c.data.idx_classes);
    in.test = load_idx(c.data.test_images, c.data.test_labels, c.data.idx_classes);
    if (c.data.pad) {
      in.train = pad_to_32(in.train);
      in.test = pad_to_32(in.test);
    }
  }
  in.spec = c.model_spec(in.train.channels(), in.train.side());
  in.spec.validate("model");
  if (in.test.side() != in.train.side() || in.test.channels() != in.train.channels()) {
    throw InputError("test images are " + shape_str(in.test.features.shape()) + " but training images are " +
                     shape_str(in.train.features.shape()));
  }
  spdlog::debug("data: {} train / {} test examples, {} classes", in.train.size(), in.test.size(), in.train.classes);
  return in;
}

void ensure_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = dir / ".fedmoe_write_probe";
  std::ofstream out(probe);
  if (ec || !out) throw ConfigError("run.out: directory " + dir.string() + " is not writable");
  out.close();
  fs::remove(probe, ec);
}

ClientPartition load_partition(const Run& run, const Inputs& in) {
  const fs::path path = run.path("partition.json");
  if (!fs::exists(path)) {
    throw UsageError(path.string() + " not found; run `fedmoe partition` with the same --config and --out first");
  }
  try {
    return partition_from_json(json::parse(detail::read_text(path)), in.train.size());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ------------------------------------------------------------ subcommands ---

void cmd_partition(const ExperimentConfig& c) {
  const Inputs in = load_inputs(c);
  Run run(c);
  PartitionSpec ps = c.partition;
  ps.seed = partition_seed(c);
  const ClientPartition part = dirichlet_partition(in.train, ps);
  run.write("partition.json", partition_to_json(part, ps, in.train.size()).dump() + "\n");
  run.write("partition_histogram.csv", partition_histogram_csv(part, in.train));
  run.record("partition", {{"clients", part.client_count()}, {"dataset_size", in.train.size()}});
  run.finish();
  spdlog::info("partitioned {} examples over {} clients", in.train.size(), part.client_count());
}

void cmd_fedavg(const ExperimentConfig& c) {
  const Inputs in = load_inputs(c);
  Run run(c);
  const ClientPartition part = load_partition(run, in);
  FedConfig fed = c.fedavg;
  fed.seed = c.seed;
  fed.workers = c.workers;
  fed.validate(part.client_count(), "fedavg");

  std::ostringstream rounds;
  rounds << "round,sampled_clients,global_acc\n";
  const auto eval = [&](const ModelParams& p) {
    return global_test([&](const Tensor& x) { return forward(in.spec, p, x); }, in.test);
  };
  const auto sink = [&](const RoundRecord& r) {
    if (!r.global_accuracy) {
      spdlog::debug("round {}: {} clients", r.round, r.sampled.size());
      return;
    }
    std::string sampled;
    for (std::size_t i = 0; i < r.sampled.size(); ++i) sampled += (i ? ";" : "") + std::to_string(r.sampled[i]);
    rounds << r.round << ',' << sampled << ',' << format_double(*r.global_accuracy) << '\n';
    spdlog::info("round {}/{}: global accuracy {:.4f}", r.round, fed.rounds, *r.global_accuracy);
  };
  const GlobalCheckpoint ck = train_federated(in.spec, build_model(in.spec, init_seed(c)), in.train, part, fed, eval, sink);

  run.write("global.ckpt",
            encode_checkpoint(model_checkpoint(in.spec, ck.params, {{"round", ck.round}, {"accuracy", ck.accuracy}})));
  run.write("fedavg_rounds.csv", rounds.str());
  run.write("fedavg_clients.csv", metrics_csv(fedavg_records(in.spec, ck.params, in.train, part, in.test, c.run_id, c.seed)));
  run.record("fedavg", {{"best_round", ck.round}, {"global_acc", ck.accuracy}});
  run.finish();
  spdlog::info("best global model: round {} accuracy {:.4f}", ck.round, ck.accuracy);
}

void cmd_personalize(const ExperimentConfig& c) {
  const Inputs in = load_inputs(c);
  Run run(c);
  const ClientPartition part = load_partition(run, in);
  const fs::path ckpt_path = run.path("global.ckpt");
  if (!fs::exists(ckpt_path)) {
    throw UsageError(ckpt_path.string() + " not found; run `fedmoe fedavg` with the same --config and --out first");
  }
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelSpec trained = model_spec_from_json(ckpt.manifest.at("spec"));
  if (!(trained == in.spec)) {
    throw UsageError("algorithm/model mismatch: " + ckpt_path.string() + " holds a " + to_json(trained).dump() +
                     " model but the config describes " + to_json(in.spec).dump());
  }
  const ModelParams global{ckpt.tensors};
  check_params(in.spec, global);

  const std::string alg = to_string(c.personalize.algorithm);
  spdlog::info("personalizing {} clients with {}", part.client_count(), alg);
  PersonalizationRun result =
      personalize_all(in.spec, global, in.train, part, in.test, c.personalize, c.run_id, c.seed, c.workers);
  const std::string stamp = utc_now();
  for (auto& r : result.records) r.timestamp = stamp;
  for (const auto& pc : result.clients) {
    run.write("clients/" + alg + "/client_" + std::to_string(pc.client_id) + ".ckpt",
              encode_checkpoint(client_checkpoint(in.spec, pc)));
  }
  run.write("personalize_" + alg + ".csv", metrics_csv(result.records));
  run.write("personalize_" + alg + ".jsonl", metrics_jsonl(result.records));
  const Summary s = summarize(result.records);
  run.record("personalize_" + alg, {{"mean_local", s.algorithms.at(0).mean_local},
                                    {"mean_global", s.algorithms.at(0).mean_global}});
  run.finish();
  spdlog::info("{}: mean local {:.4f} mean global {:.4f}", alg, s.algorithms.at(0).mean_local,
               s.algorithms.at(0).mean_global);
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

void cmd_report(const ExperimentConfig& c, std::vector<std::string> files) {
  Run run(c);
  if (files.empty()) {
    for (const std::string name : {"fedavg_clients.csv", "personalize_local.csv", "personalize_pfl_ft.csv",
                                   "personalize_pfl_fb.csv", "personalize_pfl_mf.csv", "personalize_pfl_mfe.csv"}) {
      if (fs::exists(run.path(name))) files.push_back(run.path(name).string());
    }
    if (files.empty()) throw UsageError("no metrics files in " + c.out.string() + "; pass them as arguments");
  }
  std::vector<MetricsRecord> records;
  for (const auto& f : files) {
    const auto part = parse_metrics_csv(detail::read_text(f), f);
    records.insert(records.end(), part.begin(), part.end());
  }
  const Summary s = summarize(records);

  std::ostringstream table;
  table << "algorithm,clients,mean_local,mean_global,weighted_local,weighted_global,mean_g\n";
  for (const auto& a : s.algorithms) {
    table << a.algorithm << ',' << a.clients << ',' << format_double(a.mean_local) << ',' << format_double(a.mean_global)
          << ',' << optional_cell(a.weighted_local) << ',' << optional_cell(a.weighted_global) << ','
          << optional_cell(a.mean_g) << '\n';
  }
  std::ostringstream deltas;
  deltas << "client_id,algorithm,local_delta,global_delta\n";
  for (const auto& d : s.deltas) {
    deltas << d.client_id << ',' << d.algorithm << ',' << format_double(d.local_delta) << ','
           << format_double(d.global_delta) << '\n';
  }
  run.write("report.csv", table.str());
  run.write("deltas.csv", deltas.str());
  run.finish();

  std::cout << std::left << std::setw(10) << "algorithm" << std::right << std::setw(9) << "clients" << std::setw(11)
            << "local %" << std::setw(11) << "global %" << std::setw(9) << "mean g" << '\n';
  for (const auto& a : s.algorithms) {
    std::cout << std::left << std::setw(10) << a.algorithm << std::right << std::setw(9) << a.clients << std::fixed
              << std::setprecision(2) << std::setw(11) << 100.0 * a.mean_local << std::setw(11) << 100.0 * a.mean_global
              << std::setw(9);
    if (a.mean_g) {
      std::cout << std::setprecision(3) << *a.mean_g;
    } else {
      std::cout << "-";
    }
    std::cout << '\n';
  }
}

int cmd_selftest(bool full) {
  std::vector<criteria::Criterion> list;
  for (auto& c : criteria::all()) {
    if (full || !c.slow) list.push_back(std::move(c));
  }
  const int failures = criteria::run_and_report(list, std::cout);
  if (!full) std::cout << "(criteria 7 and 8 run with --full)\n";
  return failures ? 1 : 0;
}

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("fedmoe");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  const char* env = std::getenv("FEDMOE_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ConfigError("FEDMOE_LOG: expected error, info or debug, got '" + level + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator: FedAvg, Dirichlet partitions and personalization with gated experts"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> out;
  std::optional<std::string> algorithm;
  app.add_option("--config", config_path, "INI experiment config (defaults apply to missing keys)");
  app.add_option("--seed", seed, "global seed, overrides [run] seed");
  app.add_option("--workers", workers, "worker threads, overrides [run] workers");
  app.add_option("--out", out, "output directory, overrides [run] out");
  app.add_option("--algorithm", algorithm, "personalization algorithm, overrides [personalize] algorithm")
      ->check(CLI::IsMember({"local", "pfl_ft", "pfl_fb", "pfl_mf", "pfl_mfe"}));

  auto* partition = app.add_subcommand("partition", "Dirichlet-partition the training set across clients");
  auto* fedavg = app.add_subcommand("fedavg", "train the global model with FedAvg");
  auto* personalize = app.add_subcommand("personalize", "personalize every client from the global model");
  auto* report = app.add_subcommand("report", "aggregate metrics CSVs into report.csv and deltas.csv");
  std::vector<std::string> report_files;
  report->add_option("files", report_files, "metrics CSVs (default: every metrics file in --out)");
  auto* selftest = app.add_subcommand("selftest", "run the property and acceptance suites");
  bool full = false;
  selftest->add_flag("--full", full, "include the slower trend criteria");

  CLI11_PARSE(app, argc, argv);

  try {
    configure_logging();
    if (selftest->parsed()) return cmd_selftest(full);

    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : cli::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (workers) cfg.workers = *workers;
    if (out) cfg.out = *out;
    if (algorithm) cfg.personalize.algorithm = parse_algorithm(*algorithm);
    cli::validate(cfg);
    ensure_writable(cfg.out);

    if (partition->parsed()) cmd_partition(cfg);
    if (fedavg->parsed()) cmd_fedavg(cfg);
    if (personalize->parsed()) cmd_personalize(cfg);
    if (report->parsed()) cmd_report(cfg, report_files);
    return 0;
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return 2;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
