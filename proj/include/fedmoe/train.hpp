#pragma once

// Minibatch SGD loops shared by federated clients, the Local baseline and the
// personalization algorithms.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/sgd.hpp"
#include "fedmoe/tape.hpp"

namespace fedmoe {

namespace detail {

/// Applies sgd_step to the tensors of `params` in place.
inline void step_params(ModelParams& params, std::span<const Tensor> grads, OptimizerState& state,
                        const SgdConfig& cfg) {
  std::vector<Tensor> values;
  values.reserve(params.tensors.size());
  for (auto& t : params.tensors) values.push_back(std::move(t.value));
  try {
    sgd_step(values, grads, state, cfg);
  } catch (...) {
    for (std::size_t i = 0; i < values.size(); ++i) params.tensors[i].value = std::move(values[i]);
    throw;
  }
  for (std::size_t i = 0; i < values.size(); ++i) params.tensors[i].value = std::move(values[i]);
}

/// Visits consecutive batches of a fresh shuffle of [0, n); the last batch may
/// be short.
template <class Fn>
void for_each_batch(std::size_t n, std::size_t batch, Rng& rng, Fn&& fn) {
  std::vector<std::size_t> order = all_indices(n);
  std::shuffle(order.begin(), order.end(), rng);
  batch = std::max<std::size_t>(1, batch);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    fn(std::span<const std::size_t>(order).subspan(start, len));
  }
}

inline Tensor take_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t width = m.numel() / m.dim(0);
  Shape shape = m.shape();
  shape[0] = rows.size();
  std::vector<double> data(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                data.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline std::vector<int> take(std::span<const int> v, std::span<const std::size_t> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = v[rows[i]];
  return out;
}

}  // namespace detail

/// One pass of minibatch SGD over `indices` updating every model tensor.
/// Returns the example-weighted mean of the pre-step batch losses.
inline double model_epoch(const ModelSpec& spec, ModelParams& params, const LabeledDataset& ds,
                          std::span<const std::size_t> indices, const SgdConfig& cfg,
                          std::size_t batch, Rng& rng, OptimizerState& state) {
  double total = 0.0;
  detail::for_each_batch(indices.size(), batch, rng, [&](std::span<const std::size_t> pos) {
    std::vector<std::size_t> picked(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) picked[i] = indices[pos[i]];
    Batch b = gather(ds, picked);
    Tape tape;
    const std::vector<Var> vars = record_params(tape, params, true);
    const Var loss = tape.cross_entropy(forward(tape, spec, vars, tape.constant(std::move(b.x))), b.y);
    total += tape.value(loss)[0] * static_cast<double>(pos.size());
    const std::vector<Tensor> grads = tape.gradient(loss, vars);
    detail::step_params(params, grads, state, cfg);
  });
  return total / static_cast<double>(indices.size());
}

/// `epochs` passes of model_epoch from a fresh optimizer state. The shuffle
/// stream is seeded once from `seed`.
inline ModelParams train_model(const ModelSpec& spec, ModelParams params, const LabeledDataset& ds,
                               std::span<const std::size_t> indices, const SgdConfig& cfg,
                               std::size_t epochs, std::size_t batch, std::uint64_t seed,
                               std::vector<double>* epoch_losses = nullptr) {
  Rng rng(seed);
  OptimizerState state;
  for (std::size_t e = 0; e < epochs; ++e) {
    state.epoch = e;
    const double loss = model_epoch(spec, params, ds, indices, cfg, batch, rng, state);
    if (epoch_losses) epoch_losses->push_back(loss);
  }
  return params;
}

/// One pass of minibatch SGD over rows of a precomputed feature matrix,
/// updating only the classifier.
inline double classifier_epoch(ModelParams& classifier, const Tensor& features,
                               std::span<const int> labels, const SgdConfig& cfg, std::size_t batch,
                               Rng& rng, OptimizerState& state) {
  double total = 0.0;
  detail::for_each_batch(labels.size(), batch, rng, [&](std::span<const std::size_t> pos) {
    Tape tape;
    const std::vector<Var> vars = record_params(tape, classifier, true);
    const std::vector<int> y = detail::take(labels, pos);
    const Var a = tape.constant(detail::take_rows(features, pos));
    const Var loss = tape.cross_entropy(classify(tape, vars, a), y);
    total += tape.value(loss)[0] * static_cast<double>(pos.size());
    const std::vector<Tensor> grads = tape.gradient(loss, vars);
    detail::step_params(classifier, grads, state, cfg);
  });
  return total / static_cast<double>(labels.size());
}

/// Extractor features for every example in `indices`, computed in chunks.
inline Tensor features_of(const ModelSpec& spec, const ModelParams& extractor,
                          const LabeledDataset& ds, std::span<const std::size_t> indices,
                          std::size_t chunk = 256) {
  const std::size_t dim = spec.feature_dim();
  std::vector<double> data(indices.size() * dim);
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const std::size_t len = std::min(chunk, indices.size() - start);
    const Batch b = gather(ds, indices.subspan(start, len));
    const Tensor a = extract_features(spec, extractor, b.x);
    std::copy(a.data().begin(), a.data().end(), data.begin() + static_cast<std::ptrdiff_t>(start * dim));
  }
  return Tensor({indices.size(), dim}, std::move(data));
}

/// Mean cross entropy of the full model over `indices`.
inline double dataset_loss(const ModelSpec& spec, const ModelParams& params, const LabeledDataset& ds,
                           std::span<const std::size_t> indices, std::size_t chunk = 256) {
  double total = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const std::size_t len = std::min(chunk, indices.size() - start);
    const Batch b = gather(ds, indices.subspan(start, len));
    total += cross_entropy_loss(forward(spec, params, b.x), b.y) * static_cast<double>(len);
  }
  return total / static_cast<double>(indices.size());
}

}  // namespace fedmoe
