#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "octofuse/training.hpp"
#include "support.hpp"

using namespace octofuse;
using octofuse::testing::dice_oracle;
using octofuse::testing::tiny_model;

namespace {

std::vector<MultiModalVolume> volumes(std::size_t count, double noise, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.volumes = count;
  spec.depth = 4;
  spec.height = 32;
  spec.width = 32;
  spec.noise_sigma = noise;
  spec.polarity = {+1, -1};
  spec.lesions = {1, 2, 3.0, 6.0};
  return generate_synthetic(spec);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 5;
  return c;
}

double epoch_mean(const std::vector<LossRecord>& curve, std::size_t epoch) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& r : curve) {
    if (r.epoch == epoch) {
      total += r.loss;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

TEST(Schedule, PaperPresetValues) {
  const TrainConfig c = TrainConfig::paper_schedule();
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 0.7);
  EXPECT_DOUBLE_EQ(lr_at(c, 34), 0.7);
  EXPECT_DOUBLE_EQ(lr_at(c, 35), 0.07);
  EXPECT_DOUBLE_EQ(lr_at(c, 70), 0.007);
}

TEST(Schedule, ConstantAndPowersOfTwo) {
  TrainConfig c;
  c.lr0 = 0.3;
  c.epochs = 50;
  c.decay_every = c.epochs + 1;
  for (std::size_t e = 0; e < c.epochs; ++e) EXPECT_EQ(lr_at(c, e), 0.3);
  c.lr0 = 1.0;
  c.decay_factor = 2.0;
  c.decay_every = 1;
  EXPECT_EQ(lr_at(c, 3), 0.125);
}

TEST(Schedule, NonIncreasingAndValidated) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> factor(1.0, 20.0);
  std::uniform_int_distribution<std::size_t> every(1, 40);
  for (int trial = 0; trial < 50; ++trial) {
    TrainConfig c;
    c.decay_factor = factor(rng);
    c.decay_every = every(rng);
    for (std::size_t e = 0; e + 1 < 200; ++e) EXPECT_LE(lr_at(c, e + 1), lr_at(c, e));
  }
  TrainConfig bad;
  bad.decay_every = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(lr_at(bad, 0), ConfigError);
}

TEST(Sgd, PlainStepWithoutMomentum) {
  std::vector<Real> p{1.0, -2.0}, g{0.5, 0.25}, v{0, 0};
  sgd_update(p, g, v, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -2.025);
}

TEST(Sgd, ZeroGradientCoastsOnVelocity) {
  std::vector<Real> p{1.0}, g{0.0}, v{2.0};
  sgd_update(p, g, v, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(v[0], 1.8);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.18);
  std::vector<Real> short_v{0.0, 0.0};
  EXPECT_THROW(sgd_update(p, g, short_v, 0.1, 0.9), ContractError);
}

TEST(Sgd, QuadraticBowlDecaysGeometrically) {
  // f(p) = p^2 / 2, so each plain step multiplies p by (1 - lr).
  Tensor p = Tensor::from_data({1}, {1.0}, true);
  std::vector<Tensor> params{p};
  SgdState state;
  double previous = 1.0;
  int steps = 0;
  while (std::abs(p[0]) >= 1e-6 && steps < 200) {
    p.zero_grad();
    scale(mul(p, p), 0.5).backward();
    sgd_step(params, 0.1, 0.0, state);
    ++steps;
    EXPECT_LT(std::abs(p[0]), previous);
    EXPECT_NEAR(p[0], std::pow(0.9, steps), 1e-12);
    previous = std::abs(p[0]);
  }
  EXPECT_LT(std::abs(p[0]), 1e-6);
}

TEST(Dice, ExampleMatchesOracle) {
  const std::vector<int> a{1, 1, 1, 1, 0, 0, 0, 0}, b{0, 1, 1, 1, 1, 1, 1, 0};
  EXPECT_NEAR(dice(a, b), 0.6, 1e-15);
  EXPECT_NEAR(dice(a, b), dice_oracle(a, b), 1e-15);
}

TEST(Dice, PropertiesAgainstOracle) {
  std::mt19937_64 rng(2);
  std::bernoulli_distribution bit(0.3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> a(64), b(64);
    for (auto& x : a) x = bit(rng);
    for (auto& x : b) x = bit(rng);
    EXPECT_NEAR(dice(a, b), dice_oracle(a, b), 1e-15);
    EXPECT_EQ(dice(a, b), dice(b, a));
    EXPECT_EQ(dice(a, a), 1.0);
    std::vector<int> inv(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) inv[i] = 1 - a[i];
    if (std::count(a.begin(), a.end(), 1) > 0) EXPECT_EQ(dice(a, inv), 0.0);
  }
  // Fixed |A| + |B| = 8: moving overlap out of B lowers the score.
  std::vector<int> a(12, 0), b(12, 0);
  for (int i = 0; i < 4; ++i) a[i] = 1;
  double last = 2.0;
  for (int shift = 0; shift <= 4; ++shift) {
    std::fill(b.begin(), b.end(), 0);
    for (int i = 0; i < 4; ++i) b[i + shift] = 1;
    EXPECT_LT(dice(a, b), last);
    last = dice(a, b);
  }
  const std::vector<int> empty(10, 0);
  EXPECT_EQ(dice(empty, empty), 1.0);
  EXPECT_EQ(class_dice(std::vector<int>{0, 2, 2}, std::vector<int>{2, 2, 1}, 2), 0.5);
}

TEST(Training, DeterministicForFixedSeed) {
  auto train = volumes(3, 0.05, 11);
  auto val = volumes(1, 0.05, 12);
  const ModelSpec spec = tiny_model(2, FusionStrategy::octopus());
  const TrainConfig c = quick(2);
  TrainResult a = train_model(spec, train, val, c), b = train_model(spec, train, val, c);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
  EXPECT_EQ(a.best_val_dice, b.best_val_dice);
  for (const auto& name : a.model.params().names()) {
    auto x = a.model.params().at(name).data(), y = b.model.params().at(name).data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << name;
  }
}

TEST(Training, DeepSupervisionChangesFirstLoss) {
  auto train = volumes(2, 0.05, 15);
  TrainConfig c = quick(1);
  c.max_steps = 1;
  const double plain = train_model(tiny_model(2, FusionStrategy::octopus()), train, {}, c).curve.at(0).loss;
  const double deep = train_model(tiny_model(2, FusionStrategy::octopus(true)), train, {}, c).curve.at(0).loss;
  EXPECT_NE(plain, deep);
}

TEST(Training, ZeroRateLeavesWeightsAndMatchesUntrainedDice) {
  auto train = volumes(2, 0.05, 21);
  auto val = volumes(2, 0.05, 22);
  const ModelSpec spec = tiny_model(2, FusionStrategy::octopus());
  TrainConfig c = quick(1);
  c.lr0 = 0;
  TrainResult r = train_model(spec, train, val, c);
  FusionModel initial(spec, init_seed_for(c.seed));
  bool stats_moved = false;
  for (const auto& name : initial.params().names()) {
    auto x = initial.params().at(name).data(), y = r.model.params().at(name).data();
    const bool same = std::equal(x.begin(), x.end(), y.begin());
    if (initial.params().trainable(name)) {
      EXPECT_TRUE(same) << name;
    } else {
      stats_moved = stats_moved || !same;
    }
  }
  EXPECT_TRUE(stats_moved);
  // Untrained weights scored with the running statistics gathered in the epoch.
  ParameterSet probe = initial.params().clone();
  for (const auto& name : probe.names()) {
    if (!probe.trainable(name)) {
      auto src = r.model.params().at(name).data();
      std::copy(src.begin(), src.end(), probe.at(name).mutable_data().begin());
    }
  }
  FusionModel untrained(spec, std::move(probe));
  EXPECT_EQ(mean_dice(evaluate_volumes(untrained, val)), r.best_val_dice);
}

TEST(Training, LossHalvesWithinThirtyEpochs) {
  auto train = volumes(8, 0.0, 31);
  TrainResult r = train_model(tiny_model(2, FusionStrategy::octopus()), train, {}, quick(31));
  const double first = epoch_mean(r.curve, 0), last = epoch_mean(r.curve, 30);
  EXPECT_LT(last, 0.5 * first) << "epoch 0 " << first << ", epoch 30 " << last;
}

TEST(Training, DivergenceReportsStep) {
  auto train = volumes(2, 0.05, 41);
  TrainConfig c = quick(3);
  c.lr0 = 1e200;
  c.momentum = 0;
  try {
    train_model(tiny_model(2, FusionStrategy::octopus()), train, {}, c);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.step(), 1);
    EXPECT_NE(std::string(e.what()).find("at step " + std::to_string(e.step())), std::string::npos);
  }
}

TEST(Training, MaxStepsCapAndLossCsv) {
  auto train = volumes(2, 0.05, 51);
  TrainConfig c = quick(5);
  c.max_steps = 3;
  TrainResult r = train_model(tiny_model(2, FusionStrategy::early()), train, {}, c);
  EXPECT_EQ(r.steps, 3u);
  ASSERT_EQ(r.curve.size(), 3u);
  const std::string path = ::testing::TempDir() + "loss.csv";
  write_loss_csv(path, r.curve);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,step,loss,lr");
  std::size_t rows = 0;
  while (std::getline(in, row)) ++rows;
  EXPECT_EQ(rows, 3u);
  std::remove(path.c_str());
}

TEST(Training, ModalityMismatchRejected) {
  auto train = volumes(1, 0.0, 61);
  EXPECT_THROW(train_model(tiny_model(3, FusionStrategy::octopus()), train, {}, quick(1)), ConfigError);
  EXPECT_THROW(train_model(tiny_model(2, FusionStrategy::octopus()), {}, {}, quick(1)), ConfigError);
}
