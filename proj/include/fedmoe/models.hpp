#pragma once

// Model zoo (LeNet-5 and a small MLP) expressed as an extractor/classifier
// pair, plus the single-output linear gate used to mix two experts.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmoe/layers.hpp"
#include "fedmoe/random.hpp"
#include "fedmoe/tape.hpp"
#include "fedmoe/tensor.hpp"

namespace fedmoe {

enum class Architecture { lenet5, mlp };

inline std::string to_string(Architecture a) {
  return a == Architecture::lenet5 ? "lenet5" : "mlp";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "lenet5") return Architecture::lenet5;
  if (s == "mlp") return Architecture::mlp;
  throw ConfigError("model.arch: unsupported architecture '" + s + "' (expected lenet5 | mlp)");
}

struct ModelSpec {
  Architecture arch = Architecture::lenet5;
  std::size_t channels = 1;
  std::size_t side = 32;
  std::size_t classes = 10;
  std::vector<std::size_t> hidden;  // mlp only

  std::size_t input_dim() const { return channels * side * side; }

  void validate(const std::string& path = "model") const {
    if (channels == 0) throw ConfigError(path + ".channels must be >= 1");
    if (classes < 2) throw ConfigError(path + ".classes must be >= 2");
    if (arch == Architecture::lenet5) {
      if (side < 16 || (side - 4) % 2 != 0 || ((side - 4) / 2 - 4) % 2 != 0) {
        throw ConfigError(path + ".side " + std::to_string(side) +
                          " is incompatible with lenet5 (32 expected)");
      }
    } else {
      if (hidden.empty()) throw ConfigError(path + ".hidden must list at least one layer for mlp");
      for (std::size_t h : hidden) {
        if (h == 0) throw ConfigError(path + ".hidden sizes must be positive");
      }
    }
  }

  /// Width of the extractor output `a`.
  std::size_t feature_dim() const {
    if (arch == Architecture::lenet5) {
      const std::size_t s = ((side - 4) / 2 - 4) / 2;
      return 16 * s * s;
    }
    return hidden.back();
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered parameter list. Extractor tensors come first, classifier last.
struct ModelParams {
  std::vector<NamedTensor> tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.numel();
    return n;
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct SplitModel {
  ModelParams extractor;
  ModelParams classifier;
  std::size_t feature_dim = 0;
};

namespace detail {

struct LayerShape {
  std::string name;
  Shape weight;
  std::size_t fan_in;
  bool extractor;
};

inline std::vector<LayerShape> layer_shapes(const ModelSpec& spec) {
  std::vector<LayerShape> out;
  if (spec.arch == Architecture::lenet5) {
    const std::size_t c = spec.channels, k = spec.classes, feat = spec.feature_dim();
    out.push_back({"conv1", {6, c, 5, 5}, c * 25, true});
    out.push_back({"conv2", {16, 6, 5, 5}, 6 * 25, true});
    out.push_back({"fc1", {feat, 120}, feat, false});
    out.push_back({"fc2", {120, 84}, 120, false});
    out.push_back({"fc3", {84, k}, 84, false});
  } else {
    std::size_t in = spec.input_dim();
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      out.push_back({"hidden" + std::to_string(i + 1), {in, spec.hidden[i]}, in, true});
      in = spec.hidden[i];
    }
    out.push_back({"out", {in, spec.classes}, in, false});
  }
  return out;
}

inline std::size_t bias_size(const LayerShape& l) {
  return l.weight.size() == 4 ? l.weight[0] : l.weight[1];
}

inline std::size_t extractor_tensor_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : layer_shapes(spec)) n += l.extractor ? 2 : 0;
  return n;
}

}  // namespace detail

/// Analytic parameter count (weights + biases).
inline std::size_t parameter_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : detail::layer_shapes(spec)) n += shape_numel(l.weight) + detail::bias_size(l);
  return n;
}

/// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {stream::init}));
  ModelParams params;
  for (const auto& l : detail::layer_shapes(spec)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(l.weight);
    for (double& v : w.data()) v = dist(rng);
    params.tensors.push_back({l.name + ".weight", std::move(w)});
    params.tensors.push_back({l.name + ".bias", Tensor(Shape{detail::bias_size(l)})});
  }
  return params;
}

/// Checks that `params` has exactly the tensor names and shapes `spec` implies.
inline void check_params(const ModelSpec& spec, const ModelParams& params) {
  std::vector<std::pair<std::string, Shape>> want;
  for (const auto& l : detail::layer_shapes(spec)) {
    want.emplace_back(l.name + ".weight", l.weight);
    want.emplace_back(l.name + ".bias", Shape{detail::bias_size(l)});
  }
  if (want.size() != params.tensors.size()) {
    throw DimensionError("model has " + std::to_string(params.tensors.size()) +
                         " tensors, " + to_string(spec.arch) + " expects " +
                         std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.name != want[i].first || t.value.shape() != want[i].second) {
      throw DimensionError("model tensor " + std::to_string(i) + " is " + t.name +
                           shape_str(t.value.shape()) + ", expected " + want[i].first +
                           shape_str(want[i].second));
    }
  }
}

inline SplitModel split_model(const ModelSpec& spec, const ModelParams& params) {
  check_params(spec, params);
  const std::size_t cut = detail::extractor_tensor_count(spec);
  SplitModel s;
  s.extractor.tensors.assign(params.tensors.begin(), params.tensors.begin() + static_cast<std::ptrdiff_t>(cut));
  s.classifier.tensors.assign(params.tensors.begin() + static_cast<std::ptrdiff_t>(cut), params.tensors.end());
  s.feature_dim = spec.feature_dim();
  return s;
}

inline ModelParams merge_model(const ModelParams& extractor, const ModelParams& classifier) {
  ModelParams m = extractor;
  m.tensors.insert(m.tensors.end(), classifier.tensors.begin(), classifier.tensors.end());
  return m;
}

// ------------------------------------------------------------- inference ---

namespace detail {
inline void check_input(const ModelSpec& spec, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != spec.channels || x.dim(2) != spec.side ||
      x.dim(3) != spec.side) {
    throw DimensionError("model input " + shape_str(x.shape()) + " does not match [Bx" +
                         std::to_string(spec.channels) + "x" + std::to_string(spec.side) + "x" +
                         std::to_string(spec.side) + "]");
  }
}

inline Tensor flatten_batch(const Tensor& x) { return x.reshaped({x.dim(0), x.numel() / x.dim(0)}); }
}  // namespace detail

/// Extractor output `a` for a batch x[B x C x S x S]; shape [B x feature_dim].
inline Tensor extract_features(const ModelSpec& spec, std::span<const NamedTensor> extractor,
                               const Tensor& x) {
  detail::check_input(spec, x);
  if (extractor.size() != detail::extractor_tensor_count(spec)) {
    throw DimensionError("extractor has " + std::to_string(extractor.size()) + " tensors");
  }
  if (spec.arch == Architecture::lenet5) {
    Tensor h = conv2d_forward(x, extractor[0].value, extractor[1].value);
    h = max_pool2x2_forward(relu_forward(h));
    h = conv2d_forward(h, extractor[2].value, extractor[3].value);
    h = max_pool2x2_forward(relu_forward(h));
    return detail::flatten_batch(h);
  }
  Tensor h = detail::flatten_batch(x);
  for (std::size_t i = 0; i < extractor.size(); i += 2) {
    h = relu_forward(dense_forward(h, extractor[i].value, extractor[i + 1].value));
  }
  return h;
}

inline Tensor extract_features(const ModelSpec& spec, const ModelParams& extractor, const Tensor& x) {
  return extract_features(spec, std::span<const NamedTensor>(extractor.tensors), x);
}

/// Classifier logits for features a[B x feature_dim].
inline Tensor classify(const ModelSpec& spec, std::span<const NamedTensor> classifier,
                       const Tensor& a) {
  if (a.rank() != 2 || a.dim(1) != spec.feature_dim()) {
    throw DimensionError("classifier input " + shape_str(a.shape()) + ", expected [Bx" +
                         std::to_string(spec.feature_dim()) + "]");
  }
  Tensor h = a;
  for (std::size_t i = 0; i < classifier.size(); i += 2) {
    h = dense_forward(h, classifier[i].value, classifier[i + 1].value);
    if (i + 2 < classifier.size()) h = relu_forward(h);
  }
  return h;
}

inline Tensor classify(const ModelSpec& spec, const ModelParams& classifier, const Tensor& a) {
  return classify(spec, std::span<const NamedTensor>(classifier.tensors), a);
}

/// Raw logits of the full model: classify(extract_features(x)).
inline Tensor forward(const ModelSpec& spec, const ModelParams& params, const Tensor& x) {
  check_params(spec, params);
  const std::size_t cut = detail::extractor_tensor_count(spec);
  std::span<const NamedTensor> all(params.tensors);
  return classify(spec, all.subspan(cut), extract_features(spec, all.first(cut), x));
}

// ------------------------------------------------------------- recording ---

/// Records the extractor on `tape`; `vars` holds one Var per extractor tensor.
inline Var extract_features(Tape& tape, const ModelSpec& spec, std::span<const Var> vars, Var x) {
  detail::check_input(spec, tape.value(x));
  if (spec.arch == Architecture::lenet5) {
    Var h = tape.max_pool2x2(tape.relu(tape.conv2d(x, vars[0], vars[1])));
    h = tape.max_pool2x2(tape.relu(tape.conv2d(h, vars[2], vars[3])));
    return tape.flatten(h);
  }
  Var h = tape.flatten(x);
  for (std::size_t i = 0; i < vars.size(); i += 2) h = tape.relu(tape.dense(h, vars[i], vars[i + 1]));
  return h;
}

inline Var classify(Tape& tape, std::span<const Var> vars, Var a) {
  Var h = a;
  for (std::size_t i = 0; i < vars.size(); i += 2) {
    h = tape.dense(h, vars[i], vars[i + 1]);
    if (i + 2 < vars.size()) h = tape.relu(h);
  }
  return h;
}

/// Registers every tensor of `params` on the tape, as trainable parameters or
/// as constants.
inline std::vector<Var> record_params(Tape& tape, const ModelParams& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) {
    vars.push_back(trainable ? tape.parameter(t.value) : tape.constant(t.value));
  }
  return vars;
}

inline Var forward(Tape& tape, const ModelSpec& spec, std::span<const Var> vars, Var x) {
  const std::size_t cut = detail::extractor_tensor_count(spec);
  return classify(tape, vars.subspan(cut), extract_features(tape, spec, vars.first(cut), x));
}

// ----------------------------------------------------------------- gating ---

enum class GateInput { raw, feature };

inline std::string to_string(GateInput m) { return m == GateInput::raw ? "raw" : "feature"; }

struct GatingParams {
  Tensor weights;  // [input_dim x 1]
  double bias = 0.0;
  GateInput mode = GateInput::raw;

  std::size_t input_dim() const { return weights.dim(0); }
  friend bool operator==(const GatingParams&, const GatingParams&) = default;
};

/// Gate input width for a given model and mode.
inline std::size_t gate_input_dim(const ModelSpec& spec, GateInput mode) {
  return mode == GateInput::raw ? spec.input_dim() : spec.feature_dim();
}

inline GatingParams make_gate(const ModelSpec& spec, GateInput mode) {
  return GatingParams{Tensor({gate_input_dim(spec, mode), 1}), 0.0, mode};
}

/// g = sigmoid(v w + b) per row of v[B x D]; shape [B x 1].
inline Tensor gate_forward(const GatingParams& gate, const Tensor& v) {
  const Tensor flat = v.rank() == 1 ? v.reshaped({1, v.numel()})
                                    : v.reshaped({v.dim(0), v.numel() / v.dim(0)});
  if (flat.dim(1) != gate.input_dim()) {
    throw DimensionError("gate expects input width " + std::to_string(gate.input_dim()) + ", got " +
                         shape_str(v.shape()));
  }
  return sigmoid_forward(dense_forward(flat, gate.weights, Tensor::scalar(gate.bias)));
}

/// Single-example convenience: scalar g in (0,1).
inline double gate_value(const GatingParams& gate, const Tensor& v) {
  if (v.rank() != 1) throw DimensionError("gate_value expects a single vector, got " + shape_str(v.shape()));
  return gate_forward(gate, v)[0];
}

/// y~ = g * global + (1 - g) * local, elementwise on logits.
inline Tensor mix_outputs(double g, const Tensor& global_out, const Tensor& local_out) {
  require_same_shape(global_out, local_out, "mix_outputs");
  Tensor y(global_out.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = g * global_out[i] + (1.0 - g) * local_out[i];
  return y;
}

/// Row-wise mixing with per-row gate values g[B x 1].
inline Tensor mix_outputs(const Tensor& g, const Tensor& global_out, const Tensor& local_out) {
  require_same_shape(global_out, local_out, "mix_outputs");
  if (global_out.rank() != 2 || g.numel() != global_out.dim(0)) {
    throw DimensionError("mix_outputs: gate " + shape_str(g.shape()) + " for outputs " +
                         shape_str(global_out.shape()));
  }
  const std::size_t k = global_out.dim(1);
  Tensor y(global_out.shape());
  for (std::size_t b = 0; b < global_out.dim(0); ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = b * k + j;
      y[i] = g[b] * global_out[i] + (1.0 - g[b]) * local_out[i];
    }
  }
  return y;
}

/// Records g = sigmoid(v w + b) on the tape; w and b are Vars of shape [D x 1] and [1].
inline Var gate_forward(Tape& tape, Var w, Var b, Var v) {
  const Tensor& vv = tape.value(v);
  if (vv.rank() != 2 || vv.dim(1) != tape.value(w).dim(0)) {
    throw DimensionError("gate expects input width " + std::to_string(tape.value(w).dim(0)) +
                         ", got " + shape_str(vv.shape()));
  }
  return tape.sigmoid(tape.dense(v, w, b));
}

}  // namespace fedmoe
