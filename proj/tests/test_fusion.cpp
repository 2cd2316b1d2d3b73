#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "octofuse/fusion.hpp"
#include "support.hpp"

using namespace octofuse;
using octofuse::testing::max_abs_diff;
using octofuse::testing::random_tensor;
using octofuse::testing::tiny_model;

namespace {

ModelSpec desk_model(std::size_t m, FusionStrategy strategy) {
  ModelSpec spec;
  spec.modalities = m;
  spec.strategy = strategy;
  return spec;
}

std::vector<Tensor> random_inputs(std::size_t m, std::size_t n, std::size_t hw, std::mt19937_64& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(random_tensor({n, 3, hw, hw}, rng, 0, 1));
  return out;
}

void set_identity(Tensor& w) {
  const std::size_t c = w.extent(0);
  auto d = w.mutable_data();
  std::fill(d.begin(), d.end(), Real{0});
  for (std::size_t i = 0; i < c; ++i) d[i * w.extent(1) + i] = 1;
}

std::vector<Real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(HyperFuse, IdentityForSingleModality) {
  ParameterSet ps = ParameterSet::for_init(1);
  Context ctx{ps, Mode::kEval};
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 5, 4, 4}, rng);
  hyper_fuse(ctx, 1, {x}, 1);
  set_identity(ps.at("fusion.stage1.weight"));
  Tensor y = hyper_fuse(ctx, 1, {x}, 1);
  EXPECT_EQ(values(y), values(x));
}

TEST(HyperFuse, HalfIdentityBlocksAverage) {
  ParameterSet ps;
  const std::size_t c = 3;
  std::vector<Real> w(c * 2 * c, 0);
  for (std::size_t i = 0; i < c; ++i) {
    w[i * 2 * c + i] = 0.5;
    w[i * 2 * c + c + i] = 0.5;
  }
  ps.insert("fusion.stage2.weight", Tensor::from_data({c, 2 * c, 1, 1}, w));
  ps.insert("fusion.stage2.bias", Tensor::zeros({c}));
  Context ctx{ps, Mode::kEval};
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({2, c, 4, 4}, rng), b = random_tensor({2, c, 4, 4}, rng);
  Tensor y = hyper_fuse(ctx, 2, {a, b}, 2);
  ASSERT_EQ(y.shape(), a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], (a[i] + b[i]) / 2, 1e-15);
}

TEST(HyperFuse, ModalityCountMismatch) {
  ParameterSet ps = ParameterSet::for_init(3);
  Context ctx{ps, Mode::kEval};
  Tensor x = Tensor::zeros({1, 2, 2, 2});
  EXPECT_THROW(hyper_fuse(ctx, 1, {x, x}, 3), ConfigError);
}

TEST(HyperFuse, FullScaleWidths) {
  ParameterSet ps = ParameterSet::for_init(4);
  Context ctx{ps, Mode::kEval};
  NoGradGuard guard;
  std::vector<Tensor> feats(4, Tensor::zeros({1, 2208, 1, 1}));
  Tensor y = hyper_fuse(ctx, 4, feats, 4);
  EXPECT_EQ(ps.at("fusion.stage4.weight").shape(), (Shape{2208, 8832, 1, 1}));
  EXPECT_EQ(y.shape(), (Shape{1, 2208, 1, 1}));
}

TEST(Octopus, OutputShapes) {
  FusionModel model(desk_model(3, FusionStrategy::octopus(true)), 5);
  std::mt19937_64 rng(5);
  ModelOutput out = model.forward(random_inputs(3, 2, 32, rng), Mode::kTrain);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(out.deep_logits.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_THROW(model.forward(random_inputs(2, 2, 32, rng), Mode::kEval), ConfigError);
  FusionModel plain(desk_model(3, FusionStrategy::octopus(false)), 5);
  EXPECT_FALSE(plain.forward(random_inputs(3, 1, 16, rng), Mode::kEval).deep_logits.defined());
  EXPECT_FALSE(plain.params().contains("deep_head.weight"));
}

TEST(Octopus, EightEncodersForEnhancedIsles) {
  FusionModel model(tiny_model(5 + 3, FusionStrategy::octopus(true)), 6);
  for (std::size_t m = 0; m < 8; ++m) EXPECT_TRUE(model.params().contains("encoder" + std::to_string(m) + ".stem.conv.weight"));
  EXPECT_FALSE(model.params().contains("encoder8.stem.conv.weight"));
}

TEST(Octopus, ReducesToPlainNetworkForOneModality) {
  ModelSpec spec = desk_model(1, FusionStrategy::octopus(false));
  FusionModel octo(spec, 7);
  for (int s = 1; s <= 4; ++s) set_identity(octo.params().at("fusion.stage" + std::to_string(s) + ".weight"));
  ParameterSet plain;
  plain.import_prefixed(octo.params(), "encoder0.", "encoder.");
  plain.import_prefixed(octo.params(), "decoder.", "decoder.");
  plain.import_prefixed(octo.params(), "head.", "head.");
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 4; ++trial) {
    auto inputs = random_inputs(1, 2, 32, rng);
    Tensor a = octo.forward(inputs, Mode::kEval).logits;
    Context ctx{plain, Mode::kEval};
    Tensor b = plain_forward(spec, ctx, inputs[0]);
    EXPECT_LE(max_abs_diff(a.data(), b.data()), 1e-10);
  }
}

TEST(Octopus, PermutationCovariance) {
  ModelSpec spec = tiny_model(3, FusionStrategy::octopus(false));
  FusionModel model(spec, 8);
  const std::vector<std::size_t> perm{2, 0, 1};
  // Permuted model: encoder k of the new order is encoder perm[k] of the old one,
  // and fusion input blocks are permuted the same way.
  ParameterSet permuted;
  for (std::size_t k = 0; k < 3; ++k) {
    permuted.import_prefixed(model.params(), "encoder" + std::to_string(perm[k]) + ".", "encoder" + std::to_string(k) + ".");
  }
  permuted.import_prefixed(model.params(), "decoder.", "decoder.");
  permuted.import_prefixed(model.params(), "head.", "head.");
  for (int s = 1; s <= 4; ++s) {
    const std::string base = "fusion.stage" + std::to_string(s);
    const Tensor& w = model.params().at(base + ".weight");
    const std::size_t cout = w.extent(0), c = w.extent(1) / 3;
    std::vector<Real> pw(w.numel());
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t i = 0; i < c; ++i) pw[o * 3 * c + k * c + i] = w[o * 3 * c + perm[k] * c + i];
      }
    }
    permuted.insert(base + ".weight", Tensor::from_data(w.shape(), pw));
    permuted.insert(base + ".bias", model.params().at(base + ".bias").detach());
  }
  FusionModel other(spec, std::move(permuted));
  std::mt19937_64 rng(8);
  auto inputs = random_inputs(3, 2, 16, rng);
  std::vector<Tensor> reordered{inputs[perm[0]], inputs[perm[1]], inputs[perm[2]]};
  Tensor a = model.forward(inputs, Mode::kEval).logits;
  Tensor b = other.forward(reordered, Mode::kEval).logits;
  EXPECT_LE(max_abs_diff(a.data(), b.data()), 1e-12);
}

TEST(AntiExplosion, DecoderCountIndependentOfModalities) {
  const ModelSpec base = desk_model(1, FusionStrategy::octopus(false));
  std::size_t decoder = 0;
  for (std::size_t m : {1, 2, 4, 8}) {
    FusionModel model(desk_model(m, FusionStrategy::octopus(false)), 9);
    if (m == 1) decoder = model.decoder_parameter_count();
    EXPECT_EQ(model.decoder_parameter_count(), decoder) << "M=" << m;
    std::size_t fusion = 0;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t c = base.encoder.stage_channels[s];
      fusion += m * c * c + c;
      EXPECT_EQ(model.params().at("fusion.stage" + std::to_string(s + 1) + ".weight").shape(), (Shape{c, m * c, 1, 1}));
    }
    EXPECT_EQ(model.fusion_parameter_count(), fusion);
  }
}

TEST(EarlyFusion, StemWidthAndCounts) {
  FusionModel early(desk_model(2, FusionStrategy::early()), 10);
  EXPECT_EQ(early.params().at("encoder.stem.conv.weight").shape()[1], 6u);
  for (std::size_t m : {2, 3, 4}) {
    FusionModel e(desk_model(m, FusionStrategy::early()), 10);
    FusionModel o(desk_model(m, FusionStrategy::octopus(false)), 10);
    EXPECT_LT(e.params().parameter_count(), o.params().parameter_count());
  }
}

TEST(EarlyFusion, OneModalityIsTheSingleModel) {
  FusionModel early(desk_model(1, FusionStrategy::early()), 11);
  FusionModel single(desk_model(1, FusionStrategy::single(0)), 11);
  ASSERT_EQ(early.params().names(), single.params().names());
  std::mt19937_64 rng(11);
  auto inputs = random_inputs(1, 2, 16, rng);
  EXPECT_EQ(values(early.forward(inputs, Mode::kEval).logits), values(single.forward(inputs, Mode::kEval).logits));
}

TEST(LateFusion, OneBranchIsTheSingleModel) {
  ModelSpec spec = desk_model(1, FusionStrategy::late());
  FusionModel late(spec, 12);
  ParameterSet single;
  for (const char* part : {"encoder.", "decoder.", "head."}) {
    single.import_prefixed(late.params(), std::string("branch0.") + part, part);
  }
  std::mt19937_64 rng(12);
  auto inputs = random_inputs(1, 2, 16, rng);
  Context ctx{single, Mode::kEval};
  EXPECT_EQ(values(late.forward(inputs, Mode::kEval).logits), values(plain_forward(spec, ctx, inputs[0])));
}

TEST(LateFusion, ZeroBranchGivesHalfSumWithBias) {
  ModelSpec spec = desk_model(2, FusionStrategy::late());
  FusionModel late(spec, 13);
  for (const auto& name : late.params().names()) {
    if (name.rfind("branch1.", 0) == 0 && late.params().trainable(name)) {
      for (auto& v : late.params().at(name).mutable_data()) v = 0;
    }
  }
  const Real bias = 0.75;
  for (auto& v : late.params().at("branch1.head.bias").mutable_data()) v = bias;
  ParameterSet a;
  for (const char* part : {"encoder.", "decoder.", "head."}) a.import_prefixed(late.params(), std::string("branch0.") + part, part);
  std::mt19937_64 rng(13);
  auto inputs = random_inputs(2, 2, 16, rng);
  Context ctx{a, Mode::kEval};
  Tensor branch_a = plain_forward(spec, ctx, inputs[0]);
  Tensor fused = late.forward(inputs, Mode::kEval).logits;
  for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_DOUBLE_EQ(fused[i], (branch_a[i] + bias) / 2);
}

TEST(LateFusion, CountsScaleLinearly) {
  const std::size_t one = FusionModel(desk_model(1, FusionStrategy::late()), 14).params().parameter_count();
  for (std::size_t m : {2, 3, 4}) {
    FusionModel model(desk_model(m, FusionStrategy::late()), 14);
    EXPECT_EQ(model.params().parameter_count(), m * one);
    for (std::size_t b = 0; b < m; ++b) {
      EXPECT_EQ(model.params().parameter_count("branch" + std::to_string(b) + "."), one);
    }
  }
}

TEST(Loss, UniformLogitsGiveLogK) {
  for (std::size_t k : {2, 3, 5}) {
    Tensor z = Tensor::zeros({2, k, 4, 4});
    std::vector<int> labels(32);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % k);
    LossTerms t = segmentation_loss({z, {}}, labels, 0.3);
    EXPECT_NEAR(t.main.item(), std::log(static_cast<double>(k)), 1e-15);
  }
}

TEST(Loss, ZeroDeepWeightIsMainExactly) {
  std::mt19937_64 rng(15);
  Tensor z = random_tensor({2, 2, 16, 16}, rng);
  Tensor d = random_tensor({2, 2, 1, 1}, rng);
  std::vector<int> labels(512);
  for (auto& l : labels) l = static_cast<int>(rng() % 2);
  LossTerms t = segmentation_loss({z, d}, labels, 0.0);
  EXPECT_EQ(t.total.item(), t.main.item());
  LossTerms u = segmentation_loss({z, d}, labels, 0.3);
  EXPECT_EQ(u.total.item(), u.main.item() + u.deep.item() * Real(0.3));
  std::vector<int> bad(labels);
  bad[3] = 2;
  EXPECT_THROW(segmentation_loss({z, d}, bad, 0.3), DataError);
}

TEST(Loss, MajorityDownsampling) {
  std::vector<int> ones(256, 1);
  EXPECT_EQ(downsample_labels_majority(ones, 1, 16, 16, 16, 2), (std::vector<int>{1}));
  std::vector<int> tie(4);
  tie = {2, 1, 1, 2};
  EXPECT_EQ(downsample_labels_majority(tie, 1, 2, 2, 2, 3), (std::vector<int>{1}));
  std::vector<int> mixed{0, 2, 2, 1, 0, 2, 0, 1, 1};
  EXPECT_EQ(downsample_labels_majority(std::span<const int>(mixed).first(4), 1, 2, 2, 2, 3), (std::vector<int>{2}));
}

TEST(Loss, SoftDiceIsBounded) {
  std::mt19937_64 rng(16);
  Tensor z = random_tensor({2, 3, 4, 4}, rng);
  std::vector<int> labels(32);
  for (auto& l : labels) l = static_cast<int>(rng() % 3);
  const double v = segmentation_loss({z, {}}, labels, 0, LossKind::kSoftDice).total.item();
  EXPECT_GT(v, 0);
  EXPECT_LT(v, 1);
}

TEST(DeepSupervision, ChangesLossByWeightedDeepTerm) {
  const Real w = 0.3;
  FusionModel ds(tiny_model(2, FusionStrategy::octopus(true)), 17);
  FusionModel no_ds(tiny_model(2, FusionStrategy::octopus(false)), ds.params().clone());
  std::mt19937_64 rng(17);
  auto inputs = random_inputs(2, 2, 16, rng);
  std::vector<int> labels(2 * 256);
  for (auto& l : labels) l = static_cast<int>(rng() % 2);
  LossTerms with = segmentation_loss(ds.forward(inputs, Mode::kEval), labels, w);
  LossTerms without = segmentation_loss(no_ds.forward(inputs, Mode::kEval), labels, w);
  EXPECT_EQ(with.main.item(), without.main.item());
  EXPECT_EQ(with.total.item(), without.total.item() + w * with.deep.item());
  EXPECT_NE(with.total.item(), without.total.item());
}

TEST(DeepSupervision, ReachesEveryEncoderWithDecoderFrozen) {
  FusionModel model(tiny_model(3, FusionStrategy::octopus(true)), 18);
  for (const auto& name : model.params().names()) {
    if (name.rfind("decoder.", 0) == 0 || name.rfind("head.", 0) == 0) model.params().at(name).set_requires_grad(false);
  }
  std::mt19937_64 rng(18);
  auto inputs = random_inputs(3, 2, 16, rng);
  std::vector<int> labels(2 * 256);
  for (auto& l : labels) l = static_cast<int>(rng() % 2);
  LossTerms t = segmentation_loss(model.forward(inputs, Mode::kTrain), labels, 0.3);
  t.deep.backward();
  for (std::size_t m = 0; m < 3; ++m) {
    double norm = 0;
    for (Real g : model.params().at("encoder" + std::to_string(m) + ".stem.conv.weight").grad()) norm += g * g;
    EXPECT_GT(norm, 0) << "encoder " << m;
  }
  EXPECT_TRUE(model.params().at("head.weight").grad().empty());
}

TEST(EndToEnd, EveryParameterReceivesGradient) {
  FusionModel model(tiny_model(2, FusionStrategy::octopus(true)), 19);
  std::mt19937_64 rng(19);
  auto inputs = random_inputs(2, 2, 16, rng);
  std::vector<int> labels(2 * 256);
  for (auto& l : labels) l = static_cast<int>(rng() % 2);
  segmentation_loss(model.forward(inputs, Mode::kTrain), labels, 0.3).total.backward();
  for (const auto& name : model.params().names()) {
    if (!model.params().trainable(name)) continue;
    double norm = 0;
    for (Real g : model.params().at(name).grad()) norm += g * g;
    EXPECT_GT(norm, 0) << name;
  }
}

TEST(EndToEnd, FullForwardMatchesFiniteDifferences) {
  for (auto strategy : {FusionStrategy::octopus(true), FusionStrategy::early(), FusionStrategy::late()}) {
    FusionModel model(tiny_model(2, strategy), 23);
    std::mt19937_64 rng(23);
    std::vector<Tensor> inputs{random_tensor({2, 3, 16, 16}, rng, 0, 1, true),
                               random_tensor({2, 3, 16, 16}, rng, 0, 1, true)};
    std::vector<int> labels(2 * 256);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    std::vector<Tensor> leaves = inputs;
    for (const auto& t : model.params().trainable_tensors()) leaves.push_back(t);
    auto eval = octofuse::testing::check_gradients(
        [&] { return segmentation_loss(model.forward(inputs, Mode::kEval), labels, 0.3).total; }, leaves, 150, rng);
    EXPECT_GE(eval.coordinates, 100u);
    EXPECT_LT(eval.max_rel_error, 1e-4) << strategy.name();
    // Batch statistics shift every activation together; a 1e-5 step can straddle relu kinks.
    auto train = octofuse::testing::check_gradients(
        [&] { return segmentation_loss(model.forward(inputs, Mode::kTrain), labels, 0.3).total; }, leaves, 150, rng,
        1e-7);
    EXPECT_LT(train.max_rel_error, 1e-4) << strategy.name();
  }
}

TEST(Determinism, ForwardIsBitIdentical) {
  std::mt19937_64 r1(20), r2(20);
  FusionModel a(desk_model(2, FusionStrategy::octopus(true)), 20), b(desk_model(2, FusionStrategy::octopus(true)), 20);
  EXPECT_EQ(values(a.forward(random_inputs(2, 2, 16, r1), Mode::kTrain).logits),
            values(b.forward(random_inputs(2, 2, 16, r2), Mode::kTrain).logits));
}

TEST(ModelSpecJson, RoundTrip) {
  for (auto s : {FusionStrategy::single(1), FusionStrategy::early(), FusionStrategy::late(), FusionStrategy::octopus(true)}) {
    ModelSpec spec = desk_model(3, s);
    ModelSpec back = ModelSpec::from_json(spec.to_json());
    EXPECT_EQ(back.strategy, spec.strategy);
    EXPECT_EQ(back.encoder, spec.encoder);
    EXPECT_EQ(back.modalities, spec.modalities);
    EXPECT_EQ(FusionStrategy::parse(s.name()), s);
  }
}

TEST(FusionModelCheckpoint, RoundTrip) {
  FusionModel model(tiny_model(2, FusionStrategy::octopus(true)), 21);
  FusionModel back = FusionModel::from_checkpoint(decode_checkpoint(encode_checkpoint(model.to_checkpoint())));
  std::mt19937_64 rng(21);
  auto inputs = random_inputs(2, 1, 16, rng);
  EXPECT_EQ(values(model.forward(inputs, Mode::kEval).logits), values(back.forward(inputs, Mode::kEval).logits));
  for (const auto& name : model.params().names()) EXPECT_EQ(model.params().trainable(name), back.params().trainable(name));
}

TEST(SingleModality, UsesOnlySelectedInput) {
  FusionModel model(desk_model(3, FusionStrategy::single(1)), 22);
  std::mt19937_64 rng(22);
  auto inputs = random_inputs(3, 1, 16, rng);
  Tensor a = model.forward(inputs, Mode::kEval).logits;
  inputs[0] = random_tensor(inputs[0].shape(), rng);
  inputs[2] = random_tensor(inputs[2].shape(), rng);
  EXPECT_EQ(values(a), values(model.forward(inputs, Mode::kEval).logits));
  EXPECT_THROW(FusionModel(desk_model(3, FusionStrategy::single(3)), 1), ConfigError);
}
