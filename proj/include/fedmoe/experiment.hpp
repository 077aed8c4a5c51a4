#pragma once

// Glue for running a personalization algorithm over every client of a
// partition and scoring each client with the local and global tests.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/evaluation.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/parallel.hpp"
#include "fedmoe/personalization.hpp"
#include "fedmoe/train.hpp"

namespace fedmoe {

/// Test-set quantities shared by every client: the examples, and their
/// features under the (frozen) global extractor.
struct TestContext {
  const LabeledDataset* test = nullptr;
  Tensor features;  // [n x feature_dim]
  Tensor flat;      // [n x C*S*S]
};

inline TestContext make_test_context(const ModelSpec& spec, const SplitModel& global, const LabeledDataset& test) {
  TestContext ctx;
  ctx.test = &test;
  const auto idx = all_indices(test.size());
  ctx.features = features_of(spec, global.extractor, test, idx);
  ctx.flat = test.features.reshaped({test.size(), test.example_numel()});
  return ctx;
}

/// Per-class accuracy of a logits function that sees (features, raw) chunks.
template <class LogitsFn>
PerClassAccuracy per_class_accuracy_chunked(const TestContext& ctx, LogitsFn&& logits_of, std::size_t chunk = 512) {
  const LabeledDataset& test = *ctx.test;
  std::vector<int> pred;
  pred.reserve(test.size());
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    const std::size_t len = std::min(chunk, test.size() - start);
    std::vector<std::size_t> rows(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    const Tensor logits = logits_of(detail::take_rows(ctx.features, rows), detail::take_rows(ctx.flat, rows), rows);
    for (std::size_t r = 0; r < len; ++r) pred.push_back(static_cast<int>(argmax_row(logits, r)));
  }
  return per_class_accuracy(pred, test);
}

inline MetricsRecord client_record(const std::string& run_id, const std::string& algorithm, std::size_t client,
                                   const PerClassAccuracy& pc, const ClassRatios& ratios, std::uint64_t seed,
                                   std::size_t n_train) {
  MetricsRecord r;
  r.run_id = run_id;
  r.algorithm = algorithm;
  r.client_id = static_cast<long>(client);
  r.local_acc = local_test(pc, ratios);
  r.global_acc = pc.overall();
  r.seed = seed;
  r.n_train = n_train;
  return r;
}

/// The global model scored per client (algorithm "fedavg").
inline std::vector<MetricsRecord> fedavg_records(const ModelSpec& spec, const ModelParams& global,
                                                 const LabeledDataset& train, const ClientPartition& part,
                                                 const LabeledDataset& test, const std::string& run_id,
                                                 std::uint64_t seed) {
  const PerClassAccuracy pc =
      per_class_accuracy([&](const Tensor& x) { return forward(spec, global, x); }, test);
  std::vector<MetricsRecord> out;
  for (std::size_t c = 0; c < part.client_count(); ++c) {
    out.push_back(client_record(run_id, "fedavg", c, pc, class_ratios(train, part.clients[c]), seed,
                                part.clients[c].size()));
  }
  return out;
}

struct PersonalizationRun {
  std::vector<PersonalizedClient> clients;
  std::vector<MetricsRecord> records;
};

/// Personalizes and scores every client. Results are stored per client id,
/// so they do not depend on `workers`.
inline PersonalizationRun personalize_all(const ModelSpec& spec, const ModelParams& global_params,
                                          const LabeledDataset& train, const ClientPartition& part,
                                          const LabeledDataset& test, const PersonalizationConfig& cfg,
                                          const std::string& run_id, std::uint64_t seed, std::size_t workers = 1) {
  cfg.validate();
  auto global = std::make_shared<const SplitModel>(split_model(spec, global_params));
  const TestContext ctx = make_test_context(spec, *global, test);
  PersonalizationRun run;
  run.clients.resize(part.client_count());
  run.records.resize(part.client_count());
  parallel_for(part.client_count(), workers, [&](std::size_t c) {
    PersonalizedClient pc = personalize_client(spec, global, train, part.clients[c], cfg, c, seed);
    const auto acc = per_class_accuracy_chunked(ctx, [&](const Tensor& a, const Tensor& flat, auto&& rows) {
      if (pc.algorithm == Algorithm::local || pc.algorithm == Algorithm::pfl_ft) {
        return forward(spec, pc.personalized, detail::take_rows(test.features, rows));
      }
      return personalized_logits(spec, pc, a, flat);
    });
    MetricsRecord rec = client_record(run_id, to_string(cfg.algorithm), c, acc, class_ratios(train, part.clients[c]),
                                      seed, part.clients[c].size());
    rec.mean_g = pc.mean_g;
    run.records[c] = std::move(rec);
    run.clients[c] = std::move(pc);
  });
  return run;
}

}  // namespace fedmoe
