#pragma once

// Per-client personalization of a trained global model.
//
//   local    train from scratch on the client's data only
//   pfl_ft   fine-tune every parameter of the global model
//   pfl_fb   freeze the extractor, fine-tune a private copy of the classifier
//   pfl_mf   pfl_fb + a linear gate on the raw input mixing global and
//            personalized classifier logits
//   pfl_mfe  as pfl_mf, but the gate reads the extractor features

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/data.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/random.hpp"
#include "fedmoe/sgd.hpp"
#include "fedmoe/tape.hpp"
#include "fedmoe/train.hpp"

namespace fedmoe {

enum class Algorithm { local, pfl_ft, pfl_fb, pfl_mf, pfl_mfe };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::local:
      return "local";
    case Algorithm::pfl_ft:
      return "pfl_ft";
    case Algorithm::pfl_fb:
      return "pfl_fb";
    case Algorithm::pfl_mf:
      return "pfl_mf";
    case Algorithm::pfl_mfe:
      return "pfl_mfe";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  for (Algorithm a : {Algorithm::local, Algorithm::pfl_ft, Algorithm::pfl_fb, Algorithm::pfl_mf,
                      Algorithm::pfl_mfe}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("algorithm: expected local | pfl_ft | pfl_fb | pfl_mf | pfl_mfe, got '" + s + "'");
}

inline bool uses_gate(Algorithm a) { return a == Algorithm::pfl_mf || a == Algorithm::pfl_mfe; }

/// From-scratch training of the Local baseline.
struct LocalConfig {
  std::size_t epochs = 300;
  std::size_t batch = 64;
  SgdConfig sgd{.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 0.0005,
                .lr_decay_factor = 0.1, .lr_decay_every = 100};

  void validate(const std::string& path = "local") const {
    if (batch < 1) throw ConfigError(path + ".batch must be >= 1");
    sgd.validate(path);
  }
};

struct PersonalizationConfig {
  Algorithm algorithm = Algorithm::pfl_mf;
  std::size_t epochs = 200;  // E
  std::size_t batch = 64;
  double split_ratio = 0.8;
  SgdConfig adapt{.learning_rate = 0.001, .momentum = 0.9, .weight_decay = 0.0005};  // alpha
  SgdConfig gate{.learning_rate = 0.001, .momentum = 0.9};                           // beta
  LocalConfig local;

  void validate(const std::string& path = "personalize") const {
    if (algorithm != Algorithm::local && epochs < 1) throw ConfigError(path + ".epochs must be >= 1");
    if (batch < 1) throw ConfigError(path + ".batch must be >= 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError(path + ".split_ratio must be in (0,1)");
    adapt.validate(path + ".adapt");
    gate.validate(path + ".gate");
    local.validate("local");
  }
};

struct PersonalizedClient {
  std::size_t client_id = 0;
  Algorithm algorithm = Algorithm::pfl_fb;
  // Full model for local / pfl_ft; classifier only for pfl_fb / pfl_mf / pfl_mfe.
  ModelParams personalized;
  std::optional<GatingParams> gate;
  std::optional<double> mean_g;  // mean gate value over the gate subset
  std::shared_ptr<const SplitModel> global;  // frozen global extractor + classifier
};

// ------------------------------------------------------------- baselines ---

inline ModelParams train_local_baseline(const ModelSpec& spec, const LabeledDataset& ds,
                                        std::span<const std::size_t> indices, const LocalConfig& cfg,
                                        std::uint64_t seed) {
  if (indices.empty()) throw InputError("train_local_baseline: client has no data");
  cfg.validate();
  return train_model(spec, build_model(spec, seed), ds, indices, cfg.sgd, cfg.epochs, cfg.batch,
                     derive_seed(seed, {stream::personalize, 0}));
}

/// Fine-tunes the whole model starting from the global parameters.
inline ModelParams pfl_ft(const ModelSpec& spec, const ModelParams& global, const LabeledDataset& ds,
                          std::span<const std::size_t> indices, const PersonalizationConfig& cfg,
                          std::uint64_t seed) {
  check_params(spec, global);
  if (indices.empty()) throw InputError("pfl_ft: client has no data");
  return train_model(spec, global, ds, indices, cfg.adapt, cfg.epochs, cfg.batch,
                     derive_seed(seed, {stream::personalize, 1}));
}

namespace detail {
inline SgdConfig without_decay(SgdConfig cfg) {
  cfg.lr_decay_every = 0;
  return cfg;
}
}  // namespace detail

/// Fine-tunes a copy of the global classifier on frozen extractor features.
inline ModelParams pfl_fb(const ModelSpec& spec, const ModelParams& extractor,
                          const ModelParams& classifier, const LabeledDataset& ds,
                          std::span<const std::size_t> indices, const PersonalizationConfig& cfg,
                          std::uint64_t seed) {
  if (indices.empty()) throw InputError("pfl_fb: client has no data");
  const Tensor feats = features_of(spec, extractor, ds, indices);
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) labels[i] = ds.labels[indices[i]];
  ModelParams personal = classifier;
  Rng rng(derive_seed(seed, {stream::personalize, 2}));
  OptimizerState state;
  const SgdConfig sgd = detail::without_decay(cfg.adapt);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    state.epoch = e;
    classifier_epoch(personal, feats, labels, sgd, cfg.batch, rng, state);
  }
  return personal;
}

// ------------------------------------------------------------------ gate ---

/// Everything a gate pass needs about its examples, computed once: the
/// gate input, the (frozen) global expert logits and the labels.
struct GateData {
  Tensor gate_input;     // [n x D] raw pixels or features
  Tensor features;       // [n x feature_dim]
  Tensor global_logits;  // [n x K]
  std::vector<int> labels;
};

inline GateData prepare_gate_data(const ModelSpec& spec, const ModelParams& extractor,
                                  const ModelParams& global_classifier, const LabeledDataset& ds,
                                  std::span<const std::size_t> indices, GateInput mode) {
  if (indices.empty()) throw InputError("gate data is empty");
  GateData g;
  g.features = features_of(spec, extractor, ds, indices);
  g.global_logits = classify(spec, global_classifier, g.features);
  if (mode == GateInput::feature) {
    g.gate_input = g.features;
  } else {
    const Batch b = gather(ds, indices);
    g.gate_input = b.x.reshaped({indices.size(), b.x.numel() / indices.size()});
  }
  g.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) g.labels[i] = ds.labels[indices[i]];
  return g;
}

namespace detail {

inline Tensor gate_bias_tensor(const GatingParams& gate) { return Tensor::scalar(gate.bias); }

/// Records the gate loss L(softmax(g*global + (1-g)*local), y) for one batch.
/// Returns {loss, w, b}.
struct GateGraph {
  Var loss, w, b, g;
};

inline GateGraph record_gate_loss(Tape& tape, const GatingParams& gate, const Tensor& input,
                                  const Tensor& global_logits, const Tensor& local_logits,
                                  std::span<const int> labels) {
  GateGraph gg;
  gg.w = tape.parameter(gate.weights);
  gg.b = tape.parameter(gate_bias_tensor(gate));
  gg.g = gate_forward(tape, gg.w, gg.b, tape.constant(input));
  const Var mixed = tape.mix(gg.g, tape.constant(global_logits), tape.constant(local_logits));
  gg.loss = tape.cross_entropy(mixed, labels);
  return gg;
}

}  // namespace detail

/// dL/dw and dL/db of the mixed-output loss over a batch, from the recorded graph.
inline std::pair<Tensor, double> gate_gradient(const GatingParams& gate, const Tensor& input,
                                               const Tensor& global_logits, const Tensor& local_logits,
                                               std::span<const int> labels) {
  Tape tape;
  const auto gg = detail::record_gate_loss(tape, gate, input, global_logits, local_logits, labels);
  auto grads = tape.gradient(gg.loss, {gg.w, gg.b});
  return {std::move(grads[0]), grads[1][0]};
}

/// Mixed-output loss of the gate over a batch (no gradient).
inline double gate_loss(const GatingParams& gate, const Tensor& input, const Tensor& global_logits,
                        const Tensor& local_logits, std::span<const int> labels) {
  const Tensor g = gate_forward(gate, input);
  return cross_entropy_loss(mix_outputs(g, global_logits, local_logits), labels);
}

/// One minibatch pass over the gate data updating only the gate.
inline double gate_epoch(GatingParams& gate, const GateData& data, const Tensor& local_logits,
                         const SgdConfig& cfg, std::size_t batch, Rng& rng, OptimizerState& state) {
  double total = 0.0;
  detail::for_each_batch(data.labels.size(), batch, rng, [&](std::span<const std::size_t> pos) {
    const std::vector<int> y = detail::take(data.labels, pos);
    Tape tape;
    const auto gg = detail::record_gate_loss(tape, gate, detail::take_rows(data.gate_input, pos),
                                             detail::take_rows(data.global_logits, pos),
                                             detail::take_rows(local_logits, pos), y);
    total += tape.value(gg.loss)[0] * static_cast<double>(pos.size());
    const auto grads = tape.gradient(gg.loss, {gg.w, gg.b});
    std::vector<Tensor> params{std::move(gate.weights), detail::gate_bias_tensor(gate)};
    sgd_step(params, grads, state, cfg);
    gate.weights = std::move(params[0]);
    gate.bias = params[1][0];
  });
  return total / static_cast<double>(data.labels.size());
}

inline double mean_gate(const GatingParams& gate, const Tensor& input) {
  const Tensor g = gate_forward(gate, input);
  double s = 0.0;
  for (double v : g.data()) s += v;
  return s / static_cast<double>(g.numel());
}

/// Trains a zero-initialized gate for cfg.epochs passes with both experts held
/// fixed. `local_classifier` is the personalized classifier.
inline GatingParams train_gate(const ModelSpec& spec, const ModelParams& extractor,
                               const ModelParams& global_classifier,
                               const ModelParams& local_classifier, const LabeledDataset& ds,
                               std::span<const std::size_t> gate_indices,
                               const PersonalizationConfig& cfg, GateInput mode, std::uint64_t seed,
                               std::vector<double>* epoch_losses = nullptr) {
  const GateData data = prepare_gate_data(spec, extractor, global_classifier, ds, gate_indices, mode);
  const Tensor local_logits = classify(spec, local_classifier, data.features);
  GatingParams gate = make_gate(spec, mode);
  Rng rng(derive_seed(seed, {stream::personalize, 3}));
  OptimizerState state;
  const SgdConfig sgd = detail::without_decay(cfg.gate);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    state.epoch = e;
    const double loss = gate_epoch(gate, data, local_logits, sgd, cfg.batch, rng, state);
    if (epoch_losses) epoch_losses->push_back(loss);
  }
  return gate;
}

// ------------------------------------------------------------ MoE driver ---

/// Per-epoch adaptation pass over D_per (classifier only), then a gating
/// pass over D_gate (gate only, both experts at their current values).
inline PersonalizedClient run_pfl_moe(const ModelSpec& spec, std::shared_ptr<const SplitModel> global,
                                      const LabeledDataset& ds, const ClientSplit& split,
                                      const PersonalizationConfig& cfg, GateInput mode,
                                      std::size_t client_id, std::uint64_t seed) {
  if (split.per_indices.empty() || split.gate_indices.empty()) {
    throw DegenerateClientError("client " + std::to_string(client_id) + ": empty adaptation or gate subset");
  }
  const Tensor per_feats = features_of(spec, global->extractor, ds, split.per_indices);
  std::vector<int> per_labels(split.per_indices.size());
  for (std::size_t i = 0; i < per_labels.size(); ++i) per_labels[i] = ds.labels[split.per_indices[i]];
  const GateData gate_data =
      prepare_gate_data(spec, global->extractor, global->classifier, ds, split.gate_indices, mode);

  PersonalizedClient out;
  out.client_id = client_id;
  out.algorithm = mode == GateInput::raw ? Algorithm::pfl_mf : Algorithm::pfl_mfe;
  out.personalized = global->classifier;
  GatingParams gate = make_gate(spec, mode);

  Rng adapt_rng(derive_seed(seed, {stream::personalize, 2}));
  Rng gate_rng(derive_seed(seed, {stream::personalize, 3}));
  OptimizerState adapt_state, gate_state;
  const SgdConfig adapt_sgd = detail::without_decay(cfg.adapt);
  const SgdConfig gate_sgd = detail::without_decay(cfg.gate);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    adapt_state.epoch = gate_state.epoch = e;
    classifier_epoch(out.personalized, per_feats, per_labels, adapt_sgd, cfg.batch, adapt_rng, adapt_state);
    const Tensor local_logits = classify(spec, out.personalized, gate_data.features);
    gate_epoch(gate, gate_data, local_logits, gate_sgd, cfg.batch, gate_rng, gate_state);
  }
  out.mean_g = mean_gate(gate, gate_data.gate_input);
  out.gate = std::move(gate);
  out.global = std::move(global);
  return out;
}

inline PersonalizedClient run_pfl_mf(const ModelSpec& spec, std::shared_ptr<const SplitModel> global,
                                     const LabeledDataset& ds, const ClientSplit& split,
                                     const PersonalizationConfig& cfg, std::size_t client_id,
                                     std::uint64_t seed) {
  return run_pfl_moe(spec, std::move(global), ds, split, cfg, GateInput::raw, client_id, seed);
}

inline PersonalizedClient run_pfl_mfe(const ModelSpec& spec, std::shared_ptr<const SplitModel> global,
                                      const LabeledDataset& ds, const ClientSplit& split,
                                      const PersonalizationConfig& cfg, std::size_t client_id,
                                      std::uint64_t seed) {
  return run_pfl_moe(spec, std::move(global), ds, split, cfg, GateInput::feature, client_id, seed);
}

/// Seed used for everything client `client_id` does during personalization.
inline std::uint64_t personalization_seed(std::uint64_t seed, std::size_t client_id) {
  return derive_seed(seed, {stream::personalize, 100, client_id});
}

/// Runs cfg.algorithm for one client. pfl_mf / pfl_mfe adapt on the D_per
/// subset and train the gate on D_gate; the other algorithms use every
/// example of the client.
inline PersonalizedClient personalize_client(const ModelSpec& spec, std::shared_ptr<const SplitModel> global,
                                             const LabeledDataset& ds,
                                             std::span<const std::size_t> indices,
                                             const PersonalizationConfig& cfg, std::size_t client_id,
                                             std::uint64_t base_seed) {
  const std::uint64_t seed = personalization_seed(base_seed, client_id);
  PersonalizedClient out;
  out.client_id = client_id;
  out.algorithm = cfg.algorithm;
  switch (cfg.algorithm) {
    case Algorithm::local:
      out.personalized = train_local_baseline(spec, ds, indices, cfg.local, seed);
      break;
    case Algorithm::pfl_ft:
      out.personalized = pfl_ft(spec, merge_model(global->extractor, global->classifier), ds, indices, cfg, seed);
      break;
    case Algorithm::pfl_fb:
      out.personalized = pfl_fb(spec, global->extractor, global->classifier, ds, indices, cfg, seed);
      break;
    case Algorithm::pfl_mf:
    case Algorithm::pfl_mfe: {
      const ClientSplit split = split_per_gate(indices, cfg.split_ratio, seed);
      return run_pfl_moe(spec, std::move(global), ds, split, cfg,
                         cfg.algorithm == Algorithm::pfl_mf ? GateInput::raw : GateInput::feature,
                         client_id, seed);
    }
  }
  out.global = std::move(global);
  return out;
}

// ------------------------------------------------------------- inference ---

/// MoE logits from precomputed features a[B x F] and raw input x[B x ...]:
/// g * M_C(theta_C; a) + (1 - g) * M_C(theta_Ci; a).
inline Tensor moe_predict_features(const ModelSpec& spec, const PersonalizedClient& client,
                                   const Tensor& features, const Tensor& x) {
  if (!client.gate) throw UsageError("moe_predict: client " + std::to_string(client.client_id) + " has no gate");
  if (!client.global) throw UsageError("moe_predict: client has no global model attached");
  const Tensor& gate_in = client.gate->mode == GateInput::feature ? features : x;
  const Tensor g = gate_forward(*client.gate, gate_in);
  return mix_outputs(g, classify(spec, client.global->classifier, features),
                     classify(spec, client.personalized, features));
}

inline Tensor moe_predict(const ModelSpec& spec, const PersonalizedClient& client, const Tensor& x) {
  if (!client.gate) throw UsageError("moe_predict: client " + std::to_string(client.client_id) + " has no gate");
  if (!client.global) throw UsageError("moe_predict: client has no global model attached");
  return moe_predict_features(spec, client, extract_features(spec, client.global->extractor, x), x);
}

/// Logits of the client's personalized predictor, whatever its algorithm.
/// `features` are the global extractor's output for x.
inline Tensor personalized_logits(const ModelSpec& spec, const PersonalizedClient& client,
                                  const Tensor& features, const Tensor& x) {
  switch (client.algorithm) {
    case Algorithm::local:
    case Algorithm::pfl_ft:
      return forward(spec, client.personalized, x);
    case Algorithm::pfl_fb:
      return classify(spec, client.personalized, features);
    case Algorithm::pfl_mf:
    case Algorithm::pfl_mfe:
      return moe_predict_features(spec, client, features, x);
  }
  throw UsageError("unknown algorithm");
}

}  // namespace fedmoe
