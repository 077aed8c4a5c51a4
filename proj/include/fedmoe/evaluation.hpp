#pragma once

// Global test (plain accuracy) and local test (per-class accuracy on the
// global test set reweighted by a client's training class ratios), plus the
// metrics record type and its aggregation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/layers.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe {

/// Maps a batch x[B x ...] to logits [B x K].
using Predictor = std::function<Tensor(const Tensor&)>;

struct ClassRatios {
  std::vector<double> values;
};

inline ClassRatios class_ratios(std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw EvaluationError("class_ratios: empty label set");
  ClassRatios r{std::vector<double>(classes, 0.0)};
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("class_ratios: label " + std::to_string(y) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    r.values[static_cast<std::size_t>(y)] += 1.0;
  }
  for (double& v : r.values) v /= static_cast<double>(labels.size());
  return r;
}

/// Ratios of the labels at `indices` within `ds`.
inline ClassRatios class_ratios(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) labels[i] = ds.labels[indices[i]];
  return class_ratios(labels, ds.classes);
}

/// Argmax labels of `predict` over the whole dataset, evaluated in chunks.
inline std::vector<int> predict_labels(const Predictor& predict, const LabeledDataset& ds,
                                       std::size_t chunk = 256) {
  std::vector<int> out;
  out.reserve(ds.size());
  const std::vector<std::size_t> idx = all_indices(ds.size());
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t len = std::min(chunk, ds.size() - start);
    const Batch b = gather(ds, std::span<const std::size_t>(idx).subspan(start, len));
    const Tensor logits = predict(b.x);
    if (logits.rank() != 2 || logits.dim(0) != len) {
      throw DimensionError("predictor returned " + shape_str(logits.shape()) + " for a batch of " +
                           std::to_string(len));
    }
    for (std::size_t r = 0; r < len; ++r) out.push_back(static_cast<int>(argmax_row(logits, r)));
  }
  return out;
}

/// Per-class accuracy on a test set; classes absent from the set have count 0.
struct PerClassAccuracy {
  std::vector<double> accuracy;
  std::vector<std::size_t> count;
  std::size_t correct = 0;
  std::size_t total = 0;

  double overall() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline PerClassAccuracy per_class_accuracy(std::span<const int> predictions, const LabeledDataset& test) {
  if (predictions.size() != test.size()) {
    throw DimensionError("per_class_accuracy: " + std::to_string(predictions.size()) +
                         " predictions for " + std::to_string(test.size()) + " examples");
  }
  PerClassAccuracy r{std::vector<double>(test.classes, 0.0), std::vector<std::size_t>(test.classes, 0), 0,
                     test.size()};
  std::vector<std::size_t> hits(test.classes, 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto c = static_cast<std::size_t>(test.labels[i]);
    ++r.count[c];
    if (predictions[i] == test.labels[i]) {
      ++hits[c];
      ++r.correct;
    }
  }
  for (std::size_t c = 0; c < test.classes; ++c) {
    if (r.count[c]) r.accuracy[c] = static_cast<double>(hits[c]) / static_cast<double>(r.count[c]);
  }
  return r;
}

inline PerClassAccuracy per_class_accuracy(const Predictor& predict, const LabeledDataset& test) {
  const std::vector<int> pred = predict_labels(predict, test);
  return per_class_accuracy(pred, test);
}

/// Fraction of argmax-correct predictions.
inline double global_test(const Predictor& predict, const LabeledDataset& test) {
  return per_class_accuracy(predict, test).overall();
}

/// sum_c ratios[c] * accuracy[c]. Every class with positive ratio must occur
/// in the test set.
inline double local_test(const PerClassAccuracy& pc, const ClassRatios& ratios) {
  if (ratios.values.size() != pc.accuracy.size()) {
    throw DimensionError("local_test: " + std::to_string(ratios.values.size()) + " ratios for " +
                         std::to_string(pc.accuracy.size()) + " classes");
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < ratios.values.size(); ++c) {
    if (ratios.values[c] <= 0.0) continue;
    if (pc.count[c] == 0) {
      throw EvaluationError("local_test: class " + std::to_string(c) +
                            " has positive training ratio but no test examples");
    }
    acc += ratios.values[c] * pc.accuracy[c];
  }
  return acc;
}

inline double local_test(const Predictor& predict, const LabeledDataset& test, const ClassRatios& ratios) {
  return local_test(per_class_accuracy(predict, test), ratios);
}

// -------------------------------------------------------------- records ---

struct MetricsRecord {
  std::string run_id;
  std::string algorithm;
  long client_id = -1;  // -1 marks an aggregate row
  double local_acc = 0.0;
  double global_acc = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> n_train;
  std::optional<double> mean_g;
  std::string timestamp;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct AlgorithmSummary {
  std::string algorithm;
  std::size_t clients = 0;
  double mean_local = 0.0;
  double mean_global = 0.0;
  // Data-size-weighted means; present only when every record has n_train.
  std::optional<double> weighted_local;
  std::optional<double> weighted_global;
  std::optional<double> mean_g;
};

struct ClientDelta {
  long client_id = 0;
  std::string algorithm;
  double local_delta = 0.0;
  double global_delta = 0.0;
};

struct Summary {
  std::vector<AlgorithmSummary> algorithms;
  std::vector<ClientDelta> deltas;  // empty when the baseline is absent
};

/// Per-algorithm means over per-client records (first-appearance order) and
/// per-client (algorithm - baseline) accuracy deltas.
inline Summary summarize(std::span<const MetricsRecord> records, const std::string& baseline = "fedavg") {
  Summary s;
  std::map<std::string, std::size_t> slot;
  struct Acc {
    double local = 0, global = 0, wl = 0, wg = 0, n = 0, g = 0;
    std::size_t g_count = 0;
    bool all_sized = true;
  };
  std::vector<Acc> acc;
  for (const auto& r : records) {
    if (r.client_id < 0) continue;
    auto [it, fresh] = slot.try_emplace(r.algorithm, s.algorithms.size());
    if (fresh) {
      AlgorithmSummary fresh_row;
      fresh_row.algorithm = r.algorithm;
      s.algorithms.push_back(std::move(fresh_row));
      acc.emplace_back();
    }
    Acc& a = acc[it->second];
    ++s.algorithms[it->second].clients;
    a.local += r.local_acc;
    a.global += r.global_acc;
    if (r.n_train) {
      const auto n = static_cast<double>(*r.n_train);
      a.wl += n * r.local_acc;
      a.wg += n * r.global_acc;
      a.n += n;
    } else {
      a.all_sized = false;
    }
    if (r.mean_g) {
      a.g += *r.mean_g;
      ++a.g_count;
    }
  }
  for (std::size_t i = 0; i < s.algorithms.size(); ++i) {
    auto& out = s.algorithms[i];
    const Acc& a = acc[i];
    const auto n = static_cast<double>(out.clients);
    out.mean_local = a.local / n;
    out.mean_global = a.global / n;
    if (a.all_sized && a.n > 0) {
      out.weighted_local = a.wl / a.n;
      out.weighted_global = a.wg / a.n;
    }
    if (a.g_count) out.mean_g = a.g / static_cast<double>(a.g_count);
  }

  std::map<long, const MetricsRecord*> base;
  for (const auto& r : records) {
    if (r.algorithm == baseline && r.client_id >= 0) base[r.client_id] = &r;
  }
  if (!base.empty()) {
    for (const auto& r : records) {
      if (r.client_id < 0) continue;
      auto it = base.find(r.client_id);
      if (it == base.end()) continue;
      s.deltas.push_back(ClientDelta{r.client_id, r.algorithm, r.local_acc - it->second->local_acc,
                                     r.global_acc - it->second->global_acc});
    }
  }
  return s;
}

}  // namespace fedmoe
