#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedmoe/fedmoe.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace fedmoe;

TEST(Models, LeNetParameterCounts) {
  const ModelSpec gray{Architecture::lenet5, 1, 32, 10, {}};
  const ModelSpec rgb{Architecture::lenet5, 3, 32, 10, {}};
  EXPECT_EQ(parameter_count(gray), 61706u);
  EXPECT_EQ(build_model(gray, 0).parameter_count(), 61706u);
  EXPECT_EQ(parameter_count(rgb), 62006u);
  EXPECT_EQ(build_model(rgb, 0).parameter_count(), 62006u);
  EXPECT_EQ(gray.feature_dim(), 400u);
}

TEST(Models, MlpParameterCount) {
  const ModelSpec spec{Architecture::mlp, 1, 32, 10, {64}};
  EXPECT_EQ(build_model(spec, 0).parameter_count(), 64u * 1024 + 64 + 10 * 64 + 10);
}

TEST(Models, UnsupportedArchitecture) {
  EXPECT_THROW(parse_architecture("vgg16"), ConfigError);
  EXPECT_EQ(parse_architecture("lenet5"), Architecture::lenet5);
  EXPECT_THROW((ModelSpec{Architecture::mlp, 1, 32, 10, {}}.validate()), ConfigError);
}

TEST(Models, InitBoundsAndDeterminism) {
  const ModelSpec spec{Architecture::lenet5, 1, 32, 10, {}};
  const ModelParams a = build_model(spec, 42), b = build_model(spec, 42), c = build_model(spec, 43);
  EXPECT_TRUE(fixtures::same_bits(a, b));
  EXPECT_FALSE(fixtures::same_bits(a, c));
  const double bound = 1.0 / std::sqrt(25.0);
  for (double v : a.tensors[0].value.data()) EXPECT_LE(std::abs(v), bound);
  for (double v : a.tensors[1].value.data()) EXPECT_EQ(v, 0.0);
}

TEST(Models, SplitMergeRoundTrip) {
  for (const ModelSpec& spec : {ModelSpec{Architecture::lenet5, 1, 32, 10, {}}, fixtures::small_mlp(8, 4, {6, 5})}) {
    const ModelParams p = build_model(spec, 1);
    const SplitModel s = split_model(spec, p);
    EXPECT_TRUE(fixtures::same_bits(merge_model(s.extractor, s.classifier), p));
    const SplitModel again = split_model(spec, merge_model(s.extractor, s.classifier));
    EXPECT_TRUE(fixtures::same_bits(again.extractor, s.extractor));
    EXPECT_TRUE(fixtures::same_bits(again.classifier, s.classifier));
  }
}

TEST(Models, ForwardIsClassifyOfExtract) {
  std::mt19937_64 rng(2);
  for (const ModelSpec& spec : {ModelSpec{Architecture::lenet5, 3, 32, 10, {}}, fixtures::small_mlp()}) {
    const ModelParams p = build_model(spec, 3);
    const SplitModel s = split_model(spec, p);
    const Tensor x = oracle::random_tensor({3, spec.channels, spec.side, spec.side}, rng, 0, 1);
    EXPECT_EQ(forward(spec, p, x), classify(spec, s.classifier, extract_features(spec, s.extractor, x)));
  }
}

TEST(Models, ZeroWeightsGiveBiases) {
  const ModelSpec spec = fixtures::small_mlp();
  ModelParams p = build_model(spec, 0);
  for (auto& t : p.tensors) t.value = Tensor(t.value.shape());
  p.tensors.back().value = Tensor::vector({1, -2, 3, 0.5});
  const Tensor y = forward(spec, p, Tensor({2, 1, 8, 8}, 0.7));
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(y.at(r, 0), 1.0);
    EXPECT_EQ(y.at(r, 1), -2.0);
    EXPECT_EQ(y.at(r, 2), 3.0);
    EXPECT_EQ(y.at(r, 3), 0.5);
  }
}

TEST(Models, LeNetMatchesLayerOracle) {
  std::mt19937_64 rng(4);
  const ModelSpec spec{Architecture::lenet5, 1, 32, 10, {}};
  const ModelParams p = build_model(spec, 5);
  const Tensor x = oracle::random_tensor({2, 1, 32, 32}, rng, 0, 1);
  auto t = [&](std::size_t i) -> const Tensor& { return p.tensors[i].value; };
  Tensor h = oracle::maxpool(oracle::relu(oracle::conv2d(x, t(0), t(1))));
  h = oracle::maxpool(oracle::relu(oracle::conv2d(h, t(2), t(3))));
  const Tensor a = h.reshaped({2, 400});
  EXPECT_EQ(a.dim(1), 400u);
  EXPECT_LT(oracle::max_abs_diff(extract_features(spec, split_model(spec, p).extractor, x), a), 1e-12);
  Tensor z = oracle::relu(oracle::matmul_bias(a, t(4), t(5)));
  z = oracle::relu(oracle::matmul_bias(z, t(6), t(7)));
  z = oracle::matmul_bias(z, t(8), t(9));
  EXPECT_LT(oracle::max_abs_diff(forward(spec, p, x), z), 1e-12);
}

TEST(Models, ZeroInputZeroBiasGivesZeroFeatures) {
  const ModelSpec spec{Architecture::lenet5, 1, 32, 10, {}};
  const SplitModel s = split_model(spec, build_model(spec, 6));
  const Tensor a = extract_features(spec, s.extractor, Tensor({1, 1, 32, 32}));
  for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(Models, InputShapeMismatch) {
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams p = build_model(spec, 0);
  EXPECT_THROW(forward(spec, p, Tensor({1, 1, 9, 9})), DimensionError);
  EXPECT_THROW(classify(spec, split_model(spec, p).classifier, Tensor({1, 5})), DimensionError);
  EXPECT_THROW(forward(ModelSpec{Architecture::mlp, 1, 8, 4, {13}}, p, Tensor({1, 1, 8, 8})), DimensionError);
}

TEST(Gate, DimensionsPerMode) {
  const ModelSpec gray{Architecture::lenet5, 1, 32, 10, {}};
  const ModelSpec rgb{Architecture::lenet5, 3, 32, 10, {}};
  EXPECT_EQ(make_gate(gray, GateInput::raw).input_dim(), 1024u);
  EXPECT_EQ(make_gate(rgb, GateInput::raw).input_dim(), 3072u);
  EXPECT_EQ(make_gate(gray, GateInput::feature).input_dim(), 400u);
  EXPECT_THROW(gate_forward(make_gate(gray, GateInput::feature), Tensor({1, 1024})), DimensionError);
}

TEST(Gate, ZeroGateIsHalf) {
  const GatingParams g = make_gate(fixtures::small_mlp(), GateInput::raw);
  EXPECT_EQ(gate_value(g, Tensor({64}, 0.3)), 0.5);
}

TEST(Gate, Saturation) {
  GatingParams g = make_gate(fixtures::small_mlp(), GateInput::raw);
  g.bias = 50.0;
  // 1 - sigmoid(50) is about 2e-22, below double resolution at 1.
  EXPECT_LE(1.0 - gate_value(g, Tensor({64}, 0.3)), 1e-20);
}

TEST(Gate, MatchesDotProductOracle) {
  std::mt19937_64 rng(7);
  GatingParams g{oracle::random_tensor({10, 1}, rng), 0.3, GateInput::feature};
  const Tensor v = oracle::random_tensor({4, 10}, rng);
  const Tensor out = gate_forward(g, v);
  for (std::size_t r = 0; r < 4; ++r) {
    double dot = 0.3;
    for (std::size_t i = 0; i < 10; ++i) dot += v[r * 10 + i] * g.weights[i];
    EXPECT_NEAR(out[r], oracle::sigmoid(dot), 1e-15);
  }
}

TEST(Mix, Boundaries) {
  const Tensor hi = Tensor::matrix({{2, 0}}), lo = Tensor::matrix({{0, 2}});
  EXPECT_EQ(mix_outputs(1.0, hi, lo), hi);
  EXPECT_EQ(mix_outputs(0.0, hi, lo), lo);
  EXPECT_EQ(mix_outputs(0.5, hi, lo), Tensor::matrix({{1, 1}}));
  EXPECT_THROW(mix_outputs(0.5, hi, Tensor::matrix({{1, 2, 3}})), DimensionError);
}

TEST(Mix, ConvexCombination) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor hi = oracle::random_tensor({3, 5}, rng, -5, 5), lo = oracle::random_tensor({3, 5}, rng, -5, 5);
    const Tensor g = oracle::random_tensor({3, 1}, rng, 0, 1);
    const Tensor y = mix_outputs(g, hi, lo);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      EXPECT_GE(y[i], std::min(hi[i], lo[i]) - 1e-14);
      EXPECT_LE(y[i], std::max(hi[i], lo[i]) + 1e-14);
    }
  }
}
