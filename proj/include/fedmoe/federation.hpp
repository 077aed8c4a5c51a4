#pragma once

// FedAvg: per round, sample clients, train each from the current global model,
// average the results, evaluate and keep the best global checkpoint.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/parallel.hpp"
#include "fedmoe/random.hpp"
#include "fedmoe/sgd.hpp"
#include "fedmoe/train.hpp"

namespace fedmoe {

enum class Weighting { samples, uniform };

inline std::string to_string(Weighting w) { return w == Weighting::samples ? "samples" : "uniform"; }

inline Weighting parse_weighting(const std::string& s) {
  if (s == "samples") return Weighting::samples;
  if (s == "uniform") return Weighting::uniform;
  throw ConfigError("fedavg.weighting: expected samples | uniform, got '" + s + "'");
}

struct FedConfig {
  std::size_t rounds = 1000;
  double participation = 0.1;
  std::size_t local_epochs = 5;
  std::size_t local_batch = 10;
  SgdConfig client_sgd{.learning_rate = 0.01, .momentum = 0.5};
  Weighting weighting = Weighting::samples;
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate(std::size_t clients, const std::string& path = "fedavg") const {
    if (!(participation > 0.0 && participation <= 1.0)) {
      throw ConfigError(path + ".participation must be in (0,1]");
    }
    if (clients_per_round(clients) < 1) throw ConfigError(path + ".participation selects no clients");
    if (local_batch < 1) throw ConfigError(path + ".batch must be >= 1");
    if (eval_every < 1) throw ConfigError(path + ".eval_every must be >= 1");
    client_sgd.validate(path);
  }

  std::size_t clients_per_round(std::size_t clients) const {
    const auto m = static_cast<std::size_t>(std::ceil(participation * static_cast<double>(clients) - 1e-9));
    return std::clamp<std::size_t>(m, 1, clients);
  }
};

struct ClientUpdate {
  std::size_t client = 0;
  ModelParams params;
  std::size_t samples = 0;
};

struct GlobalCheckpoint {
  std::size_t round = 0;
  ModelParams params;
  double accuracy = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  std::optional<double> global_accuracy;  // set on evaluated rounds
};

/// Seed of the shuffle stream a client uses in a given round.
inline std::uint64_t client_seed(std::uint64_t seed, std::size_t round, std::size_t client) {
  return derive_seed(seed, {stream::local_update, round, client});
}

/// e epochs of minibatch SGD from `global` on the client's examples.
inline ClientUpdate local_update(const ModelSpec& spec, const ModelParams& global,
                                 const LabeledDataset& ds, std::span<const std::size_t> client_indices,
                                 const FedConfig& cfg, std::uint64_t seed, std::size_t client = 0) {
  if (client_indices.empty()) throw InputError("local_update: client " + std::to_string(client) + " has no data");
  return ClientUpdate{client,
                      train_model(spec, global, ds, client_indices, cfg.client_sgd, cfg.local_epochs,
                                  cfg.local_batch, seed),
                      client_indices.size()};
}

/// Weighted parameter average. Updates are reduced in ascending client order
/// regardless of input order, so the result is bit-stable.
inline ModelParams aggregate(std::span<const ClientUpdate> updates, Weighting weighting = Weighting::samples) {
  if (updates.empty()) throw InputError("aggregate: no updates");
  std::vector<const ClientUpdate*> sorted;
  for (const auto& u : updates) sorted.push_back(&u);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ClientUpdate* a, const ClientUpdate* b) { return a->client < b->client; });

  double total = 0.0;
  for (const auto* u : sorted) total += static_cast<double>(u->samples);
  auto weight = [&](const ClientUpdate* u) {
    return weighting == Weighting::uniform ? 1.0 / static_cast<double>(sorted.size())
                                           : static_cast<double>(u->samples) / total;
  };
  if (weighting == Weighting::samples && !(total > 0.0)) {
    throw InputError("aggregate: sample-weighted average with zero total samples");
  }

  const ModelParams& first = sorted.front()->params;
  for (const auto* u : sorted) {
    if (u->params.tensors.size() != first.tensors.size()) {
      throw DimensionError("aggregate: client " + std::to_string(u->client) + " sent " +
                           std::to_string(u->params.tensors.size()) + " tensors, expected " +
                           std::to_string(first.tensors.size()));
    }
    for (std::size_t t = 0; t < first.tensors.size(); ++t) {
      require_same_shape(u->params.tensors[t].value, first.tensors[t].value, "aggregate");
    }
  }

  ModelParams out = first;
  const double w0 = weight(sorted.front());
  for (auto& t : out.tensors) {
    for (double& v : t.value.data()) v *= w0;
  }
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    const double w = weight(sorted[k]);
    for (std::size_t t = 0; t < out.tensors.size(); ++t) {
      Tensor& acc = out.tensors[t].value;
      const Tensor& src = sorted[k]->params.tensors[t].value;
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += w * src[i];
    }
  }
  return out;
}

/// Distinct clients for a round, ascending.
inline std::vector<std::size_t> sample_clients(std::size_t clients, std::size_t count,
                                               std::uint64_t seed, std::size_t round) {
  std::vector<std::size_t> ids = all_indices(clients);
  Rng rng(derive_seed(seed, {stream::sampling, round}));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

using EvalHook = std::function<double(const ModelParams&)>;
using RoundSink = std::function<void(const RoundRecord&)>;

/// Runs cfg.rounds FedAvg rounds from `initial`. Returns the best evaluated
/// checkpoint (first maximum wins); with zero rounds, the initial model.
inline GlobalCheckpoint train_federated(const ModelSpec& spec, const ModelParams& initial,
                                        const LabeledDataset& ds, const ClientPartition& partition,
                                        const FedConfig& cfg, const EvalHook& eval,
                                        const RoundSink& sink = {}) {
  cfg.validate(partition.client_count());
  check_params(spec, initial);
  for (std::size_t c = 0; c < partition.client_count(); ++c) {
    if (partition.clients[c].empty()) throw InputError("partition: client " + std::to_string(c) + " is empty");
  }
  if (cfg.rounds == 0) return GlobalCheckpoint{0, initial, eval(initial)};

  const std::size_t per_round = cfg.clients_per_round(partition.client_count());
  ModelParams global = initial;
  std::optional<GlobalCheckpoint> best;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    RoundRecord rec{round, sample_clients(partition.client_count(), per_round, cfg.seed, round), {}};
    std::vector<ClientUpdate> updates(rec.sampled.size());
    parallel_for(rec.sampled.size(), cfg.workers, [&](std::size_t i) {
      const std::size_t c = rec.sampled[i];
      updates[i] = local_update(spec, global, ds, partition.clients[c], cfg, client_seed(cfg.seed, round, c), c);
    });
    global = aggregate(updates, cfg.weighting);

    if (round % cfg.eval_every == 0 || round == cfg.rounds) {
      const double acc = eval(global);
      rec.global_accuracy = acc;
      if (!best || acc > best->accuracy) best = GlobalCheckpoint{round, global, acc};
    }
    if (sink) sink(rec);
  }
  return *best;
}

}  // namespace fedmoe
