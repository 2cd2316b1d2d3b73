#include <gtest/gtest.h>

#include <random>

#include "octofuse/nn_blocks.hpp"
#include "support.hpp"

using namespace octofuse;
using octofuse::testing::random_tensor;

namespace {

StageFeatures run_encoder(const EncoderSpec& spec, ParameterSet& ps, const Tensor& x, Mode mode = Mode::kEval) {
  Context ctx{ps, mode};
  return encoder_forward(spec, ctx, "encoder", x);
}

// Expected stage extents from the /2 rule and the spec's channel list.
void expect_stage_shapes(const StageFeatures& f, const EncoderSpec& spec, std::size_t n, std::size_t h,
                         std::size_t w) {
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t div = std::size_t{2} << s;
    EXPECT_EQ(f[s].shape(), (Shape{n, spec.stage_channels[s], h / div, w / div})) << "stage " << s + 1;
  }
  EXPECT_EQ(f.bottom().handle(), f[3].handle());
}

}  // namespace

TEST(DenseBlock, ChannelArithmetic) {
  ParameterSet ps = ParameterSet::for_init(1);
  Context ctx{ps, Mode::kTrain};
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 4, 6, 6}, rng);
  EXPECT_EQ(dense_block(ctx, "a", x, 2, 3).extent(1), 10u);
  EXPECT_EQ(dense_block(ctx, "b", x, 2, 1).extent(1), 6u);
  EXPECT_THROW(dense_block(ctx, "c", x, 2, 0), ConfigError);
}

TEST(DenseBlock, LayersSeeAllEarlierOutputs) {
  ParameterSet ps = ParameterSet::for_init(2);
  Context ctx{ps, Mode::kTrain};
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor y = dense_block(ctx, "blk", x, 2, 3);
  EXPECT_EQ(ps.at("blk.layer0.conv.weight").shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(ps.at("blk.layer1.conv.weight").shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(ps.at("blk.layer2.conv.weight").shape(), (Shape{2, 7, 3, 3}));
  // The block output begins with the untouched input.
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(EncoderSpec, FullScaleDenseNet161) {
  auto ch = EncoderSpec::densenet_stage_channels(96, 48, {6, 12, 36, 24}, 0.5);
  EXPECT_EQ(ch, (std::array<std::size_t, 4>{384, 768, 2112, 2208}));
  EncoderSpec spec;
  spec.stem_channels = 96;
  spec.growth_rate = 48;
  spec.layers_per_block = {6, 12, 36, 24};
  spec.transition_compaction = 0.5;
  spec.stage_channels = ch;
  EXPECT_NO_THROW(spec.validate());
  EXPECT_EQ(spec.stage_channels[3], 2208u);
}

TEST(EncoderSpec, ConsistencyCheck) {
  EncoderSpec spec = EncoderSpec::desk_densenet();
  EXPECT_NO_THROW(spec.validate());
  spec.stage_channels[2] = 33;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_EQ(EncoderSpec::from_json(EncoderSpec::desk_densenet().to_json()), EncoderSpec::desk_densenet());
}

TEST(Encoder, DeskDenseNetShapes) {
  EncoderSpec spec = EncoderSpec::desk_densenet();
  EXPECT_EQ(spec.stage_channels, (std::array<std::size_t, 4>{16, 24, 32, 40}));
  ParameterSet ps = init_params(spec, 3);
  std::mt19937_64 rng(3);
  StageFeatures f = run_encoder(spec, ps, random_tensor({1, 3, 64, 64}, rng));
  EXPECT_EQ(f[0].shape(), (Shape{1, 16, 32, 32}));
  EXPECT_EQ(f[1].shape(), (Shape{1, 24, 16, 16}));
  EXPECT_EQ(f[2].shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(f[3].shape(), (Shape{1, 40, 4, 4}));
}

TEST(Encoder, RandomSpecsFollowClosedForm) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> small(1, 3), stem(2, 6), fam(0, 2), size(1, 3);
  for (int trial = 0; trial < 12; ++trial) {
    EncoderSpec spec;
    spec.family = static_cast<Family>(fam(rng));
    spec.stem_channels = stem(rng);
    spec.growth_rate = small(rng);
    for (auto& l : spec.layers_per_block) l = small(rng);
    if (spec.family == Family::kDenseNet) {
      spec.transition_compaction = trial % 2 ? 0.5 : 1.0;
      spec.stage_channels = EncoderSpec::densenet_stage_channels(spec.stem_channels, spec.growth_rate,
                                                                 spec.layers_per_block, spec.transition_compaction);
    } else {
      for (auto& c : spec.stage_channels) c = stem(rng);
    }
    const std::size_t h = 16 * size(rng), w = 16 * size(rng);
    ParameterSet ps = init_params(spec, 10 + trial);
    expect_stage_shapes(run_encoder(spec, ps, random_tensor({2, 3, h, w}, rng)), spec, 2, h, w);
  }
}

TEST(Encoder, PaperInputSize) {
  EncoderSpec spec;
  spec.family = Family::kVgg;
  spec.stem_channels = 2;
  spec.stage_channels = {2, 2, 2, 2};
  spec.layers_per_block = {1, 1, 1, 1};
  ParameterSet ps = init_params(spec, 5);
  NoGradGuard guard;
  StageFeatures f = run_encoder(spec, ps, Tensor::zeros({1, 3, 256, 256}));
  EXPECT_EQ(f[3].shape(), (Shape{1, 2, 16, 16}));
}

TEST(Encoder, VggZeroWeightsGiveZeroFeatures) {
  EncoderSpec spec = EncoderSpec::desk(Family::kVgg);
  ParameterSet ps = init_params(spec, 6);
  for (const auto& name : ps.names()) {
    if (name.ends_with(".weight") || name.ends_with(".bias")) {
      for (auto& v : ps.at(name).mutable_data()) v = 0;
    }
  }
  std::mt19937_64 rng(6);
  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    StageFeatures f = run_encoder(spec, ps, random_tensor({2, 3, 32, 32}, rng), mode);
    for (std::size_t s = 0; s < 4; ++s) {
      for (Real v : f[s].data()) EXPECT_EQ(v, 0);
    }
  }
}

TEST(Encoder, Errors) {
  EncoderSpec spec = EncoderSpec::desk_densenet();
  ParameterSet ps = init_params(spec, 7);
  EXPECT_THROW(run_encoder(spec, ps, Tensor::zeros({1, 3, 24, 32})), ConfigError);
  EXPECT_THROW(run_encoder(spec, ps, Tensor::zeros({1, 2, 32, 32})), DimensionError);
}

TEST(Encoder, GradientReachesStem) {
  for (Family family : {Family::kVgg, Family::kResNet, Family::kDenseNet}) {
    EncoderSpec spec = EncoderSpec::desk(family);
    ParameterSet ps = init_params(spec, 8);
    std::mt19937_64 rng(8);
    StageFeatures f = run_encoder(spec, ps, random_tensor({2, 3, 32, 32}, rng), Mode::kTrain);
    octofuse::testing::probe(f.bottom()).backward();
    double norm = 0;
    for (Real g : ps.at("encoder.stem.conv.weight").grad()) norm += g * g;
    EXPECT_GT(norm, 0) << family_name(family);
  }
}

TEST(InitParams, Deterministic) {
  EncoderSpec spec = EncoderSpec::desk_densenet();
  ParameterSet a = init_params(spec, 11), b = init_params(spec, 11), c = init_params(spec, 12);
  ASSERT_EQ(a.names(), b.names());
  bool differs = false;
  for (const auto& name : a.names()) {
    auto x = a.at(name).data(), y = b.at(name).data(), z = c.at(name).data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << name;
    differs = differs || !std::equal(x.begin(), x.end(), z.begin());
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.parameter_count(), init_params(spec, 99).parameter_count());
}

TEST(InitParams, HeNormalStatistics) {
  ParameterSet ps = ParameterSet::for_init(13);
  Tensor& w = ps.fetch("w", {64, 32, 3, 3}, Init::kHeNormal);
  double mu = 0, sq = 0;
  for (Real v : w.data()) mu += v;
  mu /= static_cast<double>(w.numel());
  for (Real v : w.data()) sq += (v - mu) * (v - mu);
  const double sd = std::sqrt(sq / static_cast<double>(w.numel() - 1));
  const double expected = std::sqrt(2.0 / 288.0);
  EXPECT_LT(std::abs(sd - expected) / expected, 0.10);
}

TEST(InitParams, BiasesAndNormInit) {
  ParameterSet ps = init_params(EncoderSpec::desk_densenet(), 14);
  for (const auto& name : ps.names()) {
    const auto v = ps.at(name).data();
    if (name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean")) {
      for (Real x : v) EXPECT_EQ(x, 0) << name;
    }
    if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
      for (Real x : v) EXPECT_EQ(x, 1) << name;
    }
    if (name.find("running") != std::string::npos) EXPECT_FALSE(ps.trainable(name));
  }
}

TEST(ParameterSet, CloneIsDeep) {
  ParameterSet ps = init_params(EncoderSpec::desk_densenet(), 15);
  ParameterSet copy = ps.clone();
  const std::string name = "encoder.stem.conv.weight";
  const Real before = copy.at(name)[0];
  ps.at(name).mutable_data()[0] += 1;
  EXPECT_EQ(copy.at(name)[0], before);
  EXPECT_THROW(copy.fetch("missing", {1}, Init::kZeros), ConfigError);
}
