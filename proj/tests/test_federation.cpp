#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "fedmoe/fedmoe.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace fedmoe;

namespace {

ModelParams constant_params(double v) {
  ModelParams p;
  p.tensors.push_back({"w", Tensor({2, 2}, v)});
  p.tensors.push_back({"b", Tensor({2}, -v)});
  return p;
}

double accuracy_of(const ModelSpec& spec, const ModelParams& p, const LabeledDataset& test) {
  return global_test([&](const Tensor& x) { return forward(spec, p, x); }, test);
}

}  // namespace

TEST(LocalUpdate, ZeroEpochsReturnsInput) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(1));
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams g = build_model(spec, 1);
  FedConfig cfg;
  cfg.local_epochs = 0;
  const ClientUpdate u = local_update(spec, g, ds, all_indices(20), cfg, 5);
  EXPECT_TRUE(fixtures::same_bits(u.params, g));
  EXPECT_EQ(u.samples, 20u);
}

TEST(LocalUpdate, OneFullBatchIsOneSgdStep) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(2));
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams g = build_model(spec, 2);
  const std::vector<std::size_t> idx{0, 5, 9, 14, 33, 60};
  FedConfig cfg;
  cfg.local_epochs = 1;
  cfg.local_batch = idx.size();
  const ClientUpdate u = local_update(spec, g, ds, idx, cfg, 11);

  // Hand oracle: the gradient of the mean loss over the whole client set,
  // then p - lr * grad (momentum buffer starts at zero).
  const Batch b = gather(ds, idx);
  Tape t;
  const auto vars = record_params(t, g, true);
  const auto grads = t.gradient(t.cross_entropy(forward(t, spec, vars, t.constant(b.x)), b.y), vars);
  for (std::size_t k = 0; k < g.tensors.size(); ++k) {
    for (std::size_t i = 0; i < g.tensors[k].value.numel(); ++i) {
      EXPECT_NEAR(u.params.tensors[k].value[i], g.tensors[k].value[i] - 0.01 * grads[k][i], 1e-15);
    }
  }
}

TEST(LocalUpdate, LossNonIncreasingOnSeparableData) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(3));
  const ModelSpec spec = fixtures::small_mlp();
  const auto idx = all_indices(ds.size());
  ModelParams p = build_model(spec, 3);
  FedConfig cfg;
  std::vector<double> losses{dataset_loss(spec, p, ds, idx)};
  for (int e = 0; e < 5; ++e) {
    cfg.local_epochs = 1;
    p = local_update(spec, p, ds, idx, cfg, 100 + static_cast<std::uint64_t>(e)).params;
    losses.push_back(dataset_loss(spec, p, ds, idx));
  }
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1]);
}

TEST(Aggregate, SingleUpdateUnchanged) {
  const ModelParams p = build_model(fixtures::small_mlp(), 4);
  const std::vector<ClientUpdate> u{{3, p, 17}};
  EXPECT_TRUE(fixtures::same_bits(aggregate(u), p));
  EXPECT_TRUE(fixtures::same_bits(aggregate(u, Weighting::uniform), p));
}

TEST(Aggregate, SymmetricPairCancels) {
  const std::vector<ClientUpdate> u{{0, constant_params(0.37), 5}, {1, constant_params(-0.37), 5}};
  const ModelParams avg = aggregate(u);
  for (const auto& t : avg.tensors)
    for (double v : t.value.data()) EXPECT_EQ(v, 0.0);
}

TEST(Aggregate, WeightingModes) {
  const std::vector<ClientUpdate> u{{0, constant_params(0.0), 1}, {1, constant_params(4.0), 3}};
  EXPECT_EQ(aggregate(u).tensors[0].value[0], 3.0);
  EXPECT_EQ(aggregate(u).tensors[1].value[0], -3.0);
  EXPECT_EQ(aggregate(u, Weighting::uniform).tensors[0].value[0], 2.0);
}

TEST(Aggregate, PermutationInvariantBitwise) {
  std::mt19937_64 rng(5);
  const ModelSpec spec = fixtures::small_mlp();
  std::vector<ClientUpdate> u;
  for (std::size_t c = 0; c < 6; ++c) u.push_back({c * 3, build_model(spec, c), 1 + rng() % 40});
  const ModelParams ref = aggregate(u);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(u.begin(), u.end(), rng);
    EXPECT_TRUE(fixtures::same_bits(aggregate(u), ref));
  }
}

TEST(Aggregate, ShapeMismatchAndEmpty) {
  ModelParams bad = constant_params(1.0);
  bad.tensors[0].value = Tensor({3});
  const std::vector<ClientUpdate> u{{0, constant_params(1.0), 1}, {1, bad, 1}};
  EXPECT_THROW(aggregate(u), DimensionError);
  EXPECT_THROW(aggregate(std::vector<ClientUpdate>{}), InputError);
}

TEST(Sampling, DistinctSortedDeterministic) {
  for (std::size_t round = 1; round < 20; ++round) {
    const auto s = sample_clients(30, 7, 9, round);
    EXPECT_EQ(s.size(), 7u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    EXPECT_EQ(s, sample_clients(30, 7, 9, round));
  }
  EXPECT_NE(sample_clients(30, 7, 9, 1), sample_clients(30, 7, 9, 2));
}

TEST(FedConfig, ValidationAndClientsPerRound) {
  FedConfig cfg;
  EXPECT_EQ(cfg.clients_per_round(100), 10u);
  EXPECT_EQ(cfg.clients_per_round(5), 1u);
  cfg.participation = 0.0;
  EXPECT_THROW(cfg.validate(10), ConfigError);
  cfg.participation = 1.5;
  EXPECT_THROW(cfg.validate(10), ConfigError);
}

TEST(TrainFederated, ZeroRoundsReturnsInitial) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(6));
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams init = build_model(spec, 6);
  FedConfig cfg;
  cfg.rounds = 0;
  const auto part = dirichlet_partition(ds, PartitionSpec{4, 0.5, 6});
  const GlobalCheckpoint ck = train_federated(spec, init, ds, part, cfg,
                                              [&](const ModelParams& p) { return accuracy_of(spec, p, ds); });
  EXPECT_EQ(ck.round, 0u);
  EXPECT_TRUE(fixtures::same_bits(ck.params, init));
}

TEST(TrainFederated, SingleClientEqualsCentralizedSgd) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(7));
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams init = build_model(spec, 7);
  FedConfig cfg;
  cfg.rounds = 1;
  cfg.participation = 1.0;
  cfg.local_epochs = 3;
  cfg.seed = 77;
  const ClientPartition part{{all_indices(ds.size())}};
  const GlobalCheckpoint ck = train_federated(spec, init, ds, part, cfg, [](const ModelParams&) { return 0.0; });
  const ModelParams central = train_model(spec, init, ds, all_indices(ds.size()), cfg.client_sgd, cfg.local_epochs,
                                          cfg.local_batch, client_seed(cfg.seed, 1, 0));
  EXPECT_TRUE(fixtures::same_bits(ck.params, central));
}

TEST(TrainFederated, IdenticalClientsRoundEqualsOneUpdate) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(8));
  const ModelSpec spec = fixtures::small_mlp();
  const ModelParams init = build_model(spec, 8);
  // Every client sees the same examples; local updates then differ only by
  // shuffle seed, so use one full batch per epoch to make them identical.
  const auto idx = all_indices(40);
  const ClientPartition part{{idx, idx, idx}};
  FedConfig cfg;
  cfg.rounds = 1;
  cfg.participation = 1.0;
  cfg.local_epochs = 2;
  cfg.local_batch = idx.size();
  const GlobalCheckpoint ck = train_federated(spec, init, ds, part, cfg, [](const ModelParams&) { return 0.0; });
  const ModelParams one = local_update(spec, init, ds, idx, cfg, 1).params;
  for (std::size_t k = 0; k < one.tensors.size(); ++k)
    for (std::size_t i = 0; i < one.tensors[k].value.numel(); ++i)
      EXPECT_NEAR(ck.params.tensors[k].value[i], one.tensors[k].value[i], 1e-14);
}

TEST(TrainFederated, BestCheckpointIsRecordMaximum) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(9));
  const ModelSpec spec = fixtures::small_mlp();
  const auto part = dirichlet_partition(ds, PartitionSpec{6, 0.5, 9});
  FedConfig cfg;
  cfg.rounds = 8;
  cfg.participation = 0.5;
  std::vector<RoundRecord> rounds;
  const GlobalCheckpoint ck = train_federated(
      spec, build_model(spec, 9), ds, part, cfg, [&](const ModelParams& p) { return accuracy_of(spec, p, ds); },
      [&](const RoundRecord& r) { rounds.push_back(r); });
  ASSERT_EQ(rounds.size(), 8u);
  double best = -1.0;
  std::size_t best_round = 0;
  for (const auto& r : rounds) {
    ASSERT_TRUE(r.global_accuracy.has_value());
    EXPECT_EQ(r.sampled.size(), 3u);
    if (*r.global_accuracy > best) {
      best = *r.global_accuracy;
      best_round = r.round;
    }
  }
  EXPECT_EQ(ck.accuracy, best);
  EXPECT_EQ(ck.round, best_round);
  EXPECT_EQ(accuracy_of(spec, ck.params, ds), best);
}

TEST(TrainFederated, EvalEveryAlwaysIncludesLastRound) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(10));
  const ModelSpec spec = fixtures::small_mlp();
  const auto part = dirichlet_partition(ds, PartitionSpec{4, 0.5, 10});
  FedConfig cfg;
  cfg.rounds = 5;
  cfg.eval_every = 2;
  cfg.participation = 0.5;
  std::vector<std::size_t> evaluated;
  train_federated(spec, build_model(spec, 1), ds, part, cfg, [](const ModelParams&) { return 0.5; },
                  [&](const RoundRecord& r) {
                    if (r.global_accuracy) evaluated.push_back(r.round);
                  });
  EXPECT_EQ(evaluated, (std::vector<std::size_t>{2, 4, 5}));
}

TEST(TrainFederated, WorkerCountDoesNotChangeBits) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(11));
  const ModelSpec spec = fixtures::small_mlp();
  const auto part = dirichlet_partition(ds, PartitionSpec{8, 0.5, 11});
  FedConfig cfg;
  cfg.rounds = 4;
  cfg.participation = 0.5;
  cfg.seed = 3;
  const auto run = [&](std::size_t workers) {
    cfg.workers = workers;
    return train_federated(spec, build_model(spec, 11), ds, part, cfg,
                           [&](const ModelParams& p) { return accuracy_of(spec, p, ds); });
  };
  const GlobalCheckpoint a = run(1), b = run(3);
  EXPECT_TRUE(fixtures::same_bits(a.params, b.params));
  EXPECT_EQ(a.round, b.round);
}

TEST(TrainFederated, TwentyClientsReachNinetyPercent) {
  SyntheticSpec s = fixtures::small_synthetic(12, 100, 10, 16);
  const LabeledDataset train = make_synthetic(s, 0), test = make_synthetic(s, 1);
  const ModelSpec spec = fixtures::small_mlp(16, 10, {32});
  const auto part = dirichlet_partition(train, PartitionSpec{20, 0.5, 12});
  FedConfig cfg;
  cfg.rounds = 30;
  cfg.participation = 0.2;
  const GlobalCheckpoint ck = train_federated(spec, build_model(spec, 12), train, part, cfg,
                                              [&](const ModelParams& p) { return accuracy_of(spec, p, test); });
  EXPECT_GE(ck.accuracy, 0.9);
}

TEST(TrainFederated, RejectsEmptyClients) {
  const LabeledDataset ds = make_synthetic(fixtures::small_synthetic(13));
  const ModelSpec spec = fixtures::small_mlp();
  const ClientPartition part{{all_indices(5), {}}};
  FedConfig cfg;
  cfg.rounds = 1;
  EXPECT_THROW(train_federated(spec, build_model(spec, 0), ds, part, cfg, [](const ModelParams&) { return 0.0; }),
               InputError);
}
