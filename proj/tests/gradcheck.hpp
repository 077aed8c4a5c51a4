#pragma once

// Finite-difference checks of the tape's analytic gradients. Each case builds a
// scalar loss from a list of parameter tensors; the check rebuilds the graph
// with one coordinate perturbed at a time.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedmoe/fedmoe.hpp"
#include "oracles.hpp"

namespace fedmoe::gradcheck {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct Case {
  std::string name;
  Builder build;
  std::vector<Tensor> params;
};

/// Largest relative error over every coordinate of every parameter.
inline double worst_error(const Case& c, double step = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : c.params) vars.push_back(tape.parameter(p));
  const auto grads = tape.gradient(c.build(tape, vars), vars);
  double worst = 0.0;
  for (std::size_t k = 0; k < c.params.size(); ++k) {
    auto loss_at = [&](const Tensor& pk) {
      Tape t;
      std::vector<Var> v;
      for (std::size_t j = 0; j < c.params.size(); ++j) v.push_back(t.parameter(j == k ? pk : c.params[j]));
      return t.value(c.build(t, v))[0];
    };
    worst = std::max(worst, oracle::max_relative_error(grads[k], oracle::finite_difference(loss_at, c.params[k], step)));
  }
  return worst;
}

/// Values bounded away from zero, so relu kinks sit far from the FD stencil.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = oracle::random_tensor(std::move(shape), rng);
  for (double& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

/// Distinct values, so every pooling window has a unique maximum.
inline Tensor distinct(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.1 * static_cast<double>(i);
  std::shuffle(t.storage().begin(), t.storage().end(), rng);
  return t;
}

/// sum(out * r) for a fixed random r: a scalar with a nontrivial upstream gradient.
inline Var project(Tape& t, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return t.sum(t.mul(out, t.constant(oracle::random_tensor(t.value(out).shape(), rng))));
}

/// One case per recorded op, plus composite paths used by training.
inline std::vector<Case> standard_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto rnd = [&](Shape s) { return oracle::random_tensor(std::move(s), rng); };
  std::vector<Case> cases;

  cases.push_back({"dense",
                   [](Tape& t, const std::vector<Var>& v) { return project(t, t.dense(v[0], v[1], v[2]), 11); },
                   {rnd({3, 4}), rnd({4, 5}), rnd({5})}});
  cases.push_back({"conv2d",
                   [](Tape& t, const std::vector<Var>& v) { return project(t, t.conv2d(v[0], v[1], v[2]), 12); },
                   {rnd({2, 2, 6, 6}), rnd({3, 2, 3, 3}), rnd({3})}});
  cases.push_back({"relu", [](Tape& t, const std::vector<Var>& v) { return project(t, t.relu(v[0]), 13); },
                   {away_from_zero({3, 5}, rng)}});
  cases.push_back({"sigmoid", [](Tape& t, const std::vector<Var>& v) { return project(t, t.sigmoid(v[0]), 14); },
                   {rnd({3, 5})}});
  cases.push_back({"max_pool2x2",
                   [](Tape& t, const std::vector<Var>& v) { return project(t, t.max_pool2x2(v[0]), 15); },
                   {distinct({2, 2, 4, 4}, rng)}});
  cases.push_back({"flatten", [](Tape& t, const std::vector<Var>& v) { return project(t, t.flatten(v[0]), 16); },
                   {rnd({2, 3, 2, 2})}});
  cases.push_back({"mul", [](Tape& t, const std::vector<Var>& v) { return project(t, t.mul(v[0], v[1]), 17); },
                   {rnd({4, 3}), rnd({4, 3})}});

  const std::vector<int> labels4{0, 5, 2, 5};
  cases.push_back({"cross_entropy",
                   [labels4](Tape& t, const std::vector<Var>& v) { return t.cross_entropy(v[0], labels4); },
                   {rnd({4, 6})}});

  // Two-sample dense layer into the loss, input held constant.
  const Tensor x2 = rnd({2, 5});
  const std::vector<int> labels2{1, 2};
  cases.push_back({"dense+cross_entropy",
                   [x2, labels2](Tape& t, const std::vector<Var>& v) {
                     return t.cross_entropy(t.dense(t.constant(x2), v[0], v[1]), labels2);
                   },
                   {rnd({5, 3}), rnd({3})}});

  // Mixing: gradients reach the gate values and both expert outputs.
  const std::vector<int> labels3{0, 3, 1};
  cases.push_back({"mix",
                   [labels3](Tape& t, const std::vector<Var>& v) {
                     return t.cross_entropy(t.mix(t.sigmoid(v[0]), v[1], v[2]), labels3);
                   },
                   {rnd({3, 1}), rnd({3, 4}), rnd({3, 4})}});

  // Gate weights through g = sigmoid(v w + b) and the mixed loss, in both
  // input modes (a wide raw-pixel input and a narrow feature input).
  for (std::size_t width : {std::size_t{16}, std::size_t{5}}) {
    const Tensor input = oracle::random_tensor({3, width}, rng, 0.0, 1.0);
    const Tensor hi = rnd({3, 4}), lo = rnd({3, 4});
    cases.push_back({"gate(width=" + std::to_string(width) + ")",
                     [input, hi, lo, labels3](Tape& t, const std::vector<Var>& v) {
                       const Var g = gate_forward(t, v[0], v[1], t.constant(input));
                       return t.cross_entropy(t.mix(g, t.constant(hi), t.constant(lo)), labels3);
                     },
                     {rnd({width, 1}), rnd({1})}});
  }

  // Whole models, every tensor at once.
  {
    const ModelSpec spec{Architecture::lenet5, 1, 16, 3, {}};
    const ModelParams p = build_model(spec, seed);
    Tensor x = oracle::random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    const std::vector<int> y{0, 2};
    Case c{"lenet5(side=16)",
           [spec, x, y](Tape& t, const std::vector<Var>& v) {
             return t.cross_entropy(forward(t, spec, v, t.constant(x)), y);
           },
           {}};
    for (const auto& nt : p.tensors) c.params.push_back(nt.value);
    cases.push_back(std::move(c));
  }
  {
    const ModelSpec spec{Architecture::mlp, 1, 4, 3, {6, 5}};
    const ModelParams p = build_model(spec, seed);
    Tensor x = oracle::random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0);
    const std::vector<int> y{1, 0, 2};
    Case c{"mlp",
           [spec, x, y](Tape& t, const std::vector<Var>& v) {
             return t.cross_entropy(forward(t, spec, v, t.constant(x)), y);
           },
           {}};
    for (const auto& nt : p.tensors) c.params.push_back(nt.value);
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace fedmoe::gradcheck
