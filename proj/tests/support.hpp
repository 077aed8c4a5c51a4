#pragma once

#include <cstddef>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/fedmoe.hpp"

namespace fedmoe::fixtures {

/// Small, well separated synthetic set for fast tests.
inline SyntheticSpec small_synthetic(std::uint64_t seed, std::size_t per_class = 30, std::size_t classes = 4,
                                     std::size_t side = 8) {
  SyntheticSpec s;
  s.classes = classes;
  s.per_class = per_class;
  s.side = side;
  s.blob_sigma = 1.5;
  s.noise = 0.1;
  s.seed = seed;
  return s;
}

inline ModelSpec small_mlp(std::size_t side = 8, std::size_t classes = 4, std::vector<std::size_t> hidden = {12}) {
  return ModelSpec{Architecture::mlp, 1, side, classes, std::move(hidden)};
}

/// Dataset whose features are irrelevant; only the labels matter.
inline LabeledDataset labels_only(std::vector<int> labels, std::size_t classes) {
  LabeledDataset ds;
  ds.classes = classes;
  ds.features = Tensor({labels.size(), 1, 1, 1});
  ds.labels = std::move(labels);
  return ds;
}

inline LabeledDataset balanced_labels(std::size_t classes, std::size_t per_class) {
  std::vector<int> y;
  for (std::size_t i = 0; i < classes * per_class; ++i) y.push_back(static_cast<int>(i % classes));
  return labels_only(std::move(y), classes);
}

/// Label distribution of the examples at `idx`.
inline std::vector<double> label_distribution(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  std::vector<double> p(ds.classes, 0.0);
  for (std::size_t i : idx) p[static_cast<std::size_t>(ds.labels[i])] += 1.0;
  for (double& v : p) v /= static_cast<double>(idx.size());
  return p;
}

/// Mean over clients of KL(client label distribution || global label distribution).
inline double mean_kl_to_global(const LabeledDataset& ds, const ClientPartition& part) {
  const std::vector<double> q = label_distribution(ds, all_indices(ds.size()));
  double total = 0.0;
  for (const auto& c : part.clients) {
    const std::vector<double> p = label_distribution(ds, c);
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (p[k] > 0.0) total += p[k] * std::log(p[k] / q[k]);
    }
  }
  return total / static_cast<double>(part.client_count());
}

/// Mean over clients of the Shannon entropy of the client's label distribution.
inline double mean_label_entropy(const LabeledDataset& ds, const ClientPartition& part) {
  double total = 0.0;
  for (const auto& c : part.clients) {
    for (double p : label_distribution(ds, c)) {
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return total / static_cast<double>(part.client_count());
}

/// Disjoint cover, nonempty clients, per-class conservation. Returns an
/// empty string when all hold, else the first violation.
inline std::string partition_violation(const LabeledDataset& ds, const ClientPartition& part) {
  std::vector<int> seen(ds.size(), 0);
  std::vector<std::size_t> per_class(ds.classes, 0);
  for (std::size_t c = 0; c < part.client_count(); ++c) {
    if (part.clients[c].empty()) return "client " + std::to_string(c) + " is empty";
    for (std::size_t i : part.clients[c]) {
      if (i >= ds.size()) return "index out of range";
      if (seen[i]++) return "index " + std::to_string(i) + " assigned twice";
      ++per_class[static_cast<std::size_t>(ds.labels[i])];
    }
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!seen[i]) return "index " + std::to_string(i) + " unassigned";
  }
  if (per_class != ds.class_counts()) return "class totals not conserved";
  return {};
}

inline bool same_bits(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) return false;
  }
  return true;
}

}  // namespace fedmoe::fixtures
