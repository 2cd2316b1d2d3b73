#pragma once

// Multi-modal segmentation networks built from the nn_blocks encoders.
//
//   Single   one encoder-decoder on one modality
//   Early    modalities stacked as input channels of one encoder-decoder
//   Late     one encoder-decoder per modality, logits averaged
//   Octopus  one encoder per modality; at each of the four taps the M feature
//            maps are concatenated and reduced back to C_s channels by a 1x1
//            convolution ("hyper-fusion"), then a single decoder consumes the
//            fused taps. Optional deep supervision head on the fused bottom.
//
// All decoders share one shape: starting from the bottom tap, upsample 2x,
// concatenate the skip at that resolution, refine with 3x3 conv + BN + ReLU;
// a last upsample + refine reaches full resolution, then a 1x1 head emits K
// logits. The decoder therefore never sees more than C_s skip channels,
// whatever M is.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "octofuse/nn_blocks.hpp"
#include "octofuse/tensor.hpp"

namespace octofuse {

enum class FusionKind { kSingle, kEarly, kLate, kOctopus };

struct FusionStrategy {
  FusionKind kind = FusionKind::kOctopus;
  std::size_t modality = 0;  // kSingle only
  bool deep_supervision = false;  // kOctopus only

  static FusionStrategy single(std::size_t m) { return {FusionKind::kSingle, m, false}; }
  static FusionStrategy early() { return {FusionKind::kEarly, 0, false}; }
  static FusionStrategy late() { return {FusionKind::kLate, 0, false}; }
  static FusionStrategy octopus(bool deep_supervision = false) { return {FusionKind::kOctopus, 0, deep_supervision}; }

  /// Short machine name: single:2, early, late, octopus, octopus+ds.
  std::string name() const {
    switch (kind) {
      case FusionKind::kSingle:
        return "single:" + std::to_string(modality);
      case FusionKind::kEarly:
        return "early";
      case FusionKind::kLate:
        return "late";
      case FusionKind::kOctopus:
        return deep_supervision ? "octopus+ds" : "octopus";
    }
    return "?";
  }

  /// Row label used in rendered tables.
  std::string label() const {
    switch (kind) {
      case FusionKind::kSingle:
        return "Single modality (m" + std::to_string(modality) + ")";
      case FusionKind::kEarly:
        return "Early-fusion";
      case FusionKind::kLate:
        return "Late-fusion";
      case FusionKind::kOctopus:
        return deep_supervision ? "Octopus-fusion + deep supervision" : "Octopus-fusion";
    }
    return "?";
  }

  static FusionStrategy parse(const std::string& s) {
    if (s == "early") return early();
    if (s == "late") return late();
    if (s == "octopus") return octopus(false);
    if (s == "octopus+ds") return octopus(true);
    if (s.rfind("single:", 0) == 0) {
      try {
        return single(static_cast<std::size_t>(std::stoul(s.substr(7))));
      } catch (const std::exception&) {
      }
    }
    throw ConfigError("unknown fusion strategy \"" + s + "\" (expected single:<m>, early, late, octopus, octopus+ds)");
  }

  bool operator==(const FusionStrategy&) const = default;
};

struct ModelSpec {
  /// Per-modality encoder (in_channels is the slab depth, 3 for 2.5-D input).
  EncoderSpec encoder;
  std::size_t modalities = 2;
  FusionStrategy strategy;
  /// K logits per pixel; K == 1 means a single sigmoid channel.
  std::size_t num_classes = 2;
  /// Decoder refinement widths at H/8, H/4, H/2 and H.
  std::array<std::size_t, 4> decoder_channels{24, 16, 8, 8};

  void validate() const {
    encoder.validate();
    if (modalities == 0) throw ConfigError("a model needs at least one modality");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    for (auto w : decoder_channels) {
      if (w == 0) throw ConfigError("decoder widths must be positive");
    }
    if (strategy.kind == FusionKind::kSingle && strategy.modality >= modalities) {
      throw ConfigError("single-modality index " + std::to_string(strategy.modality) + " but only " +
                        std::to_string(modalities) + " modalities");
    }
    if (strategy.deep_supervision && strategy.kind != FusionKind::kOctopus) {
      throw ConfigError("deep supervision is only defined for the octopus strategy");
    }
  }

  nlohmann::json to_json() const {
    return {{"encoder", encoder.to_json()},
            {"modalities", modalities},
            {"strategy", strategy.name()},
            {"num_classes", num_classes},
            {"decoder_channels", decoder_channels}};
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.encoder = EncoderSpec::from_json(j.at("encoder"));
    s.modalities = j.at("modalities").get<std::size_t>();
    s.strategy = FusionStrategy::parse(j.at("strategy").get<std::string>());
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.decoder_channels = j.at("decoder_channels").get<std::array<std::size_t, 4>>();
    s.validate();
    return s;
  }
};

struct ModelOutput {
  Tensor logits;       // N x K x H x W
  Tensor deep_logits;  // N x K x H/16 x W/16, undefined without deep supervision
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Concatenates M same-shaped taps of stage `stage` (1..4) and reduces them to
/// C_s channels with a 1x1 convolution. No nonlinearity follows.
inline Tensor hyper_fuse(Context& ctx, std::size_t stage, const std::vector<Tensor>& per_modality,
                         std::size_t expected_modalities) {
  if (stage < 1 || stage > 4) throw ConfigError("hyper_fuse stage must be 1..4");
  if (per_modality.size() != expected_modalities) {
    throw ConfigError("hyper-fusion stage " + std::to_string(stage) + " configured for " +
                      std::to_string(expected_modalities) + " modalities, got " + std::to_string(per_modality.size()));
  }
  const Shape& first = per_modality.front().shape();
  for (const auto& t : per_modality) {
    if (t.shape() != first) {
      throw DimensionError("hyper_fuse: modality features differ in shape: " + shape_str(t.shape()) + " vs " +
                           shape_str(first));
    }
  }
  const std::size_t channels = first.at(1);
  Tensor joined = per_modality.size() == 1 ? per_modality[0] : concat_channels(per_modality);
  return conv_layer(ctx, "fusion.stage" + std::to_string(stage), joined, channels, 1);
}

/// U-shaped decoder over four skip taps (finest first). Returns K logits at
/// twice the resolution of taps[0].
inline Tensor decoder_forward(Context& ctx, const std::string& prefix, const std::array<Tensor, 4>& taps,
                              const std::array<std::size_t, 4>& widths, std::size_t num_classes,
                              const std::string& head = "head") {
  Tensor h = taps[3];
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t level = 2 - i;
    Tensor up = upsample_nearest2x(h);
    h = conv_bn_relu(ctx, prefix + ".level" + std::to_string(level + 1), concat_channels({up, taps[level]}),
                     widths[i], 3);
  }
  h = conv_bn_relu(ctx, prefix + ".level0", upsample_nearest2x(h), widths[3], 3);
  return conv_layer(ctx, head, h, num_classes, 1);
}

/// One encoder + decoder + head, the single-modality network.
inline Tensor plain_forward(const ModelSpec& spec, Context& ctx, const Tensor& input,
                            const std::string& prefix = "") {
  StageFeatures f = encoder_forward(spec.encoder, ctx, prefix + "encoder", input);
  return decoder_forward(ctx, prefix + "decoder", f.taps, spec.decoder_channels, spec.num_classes, prefix + "head");
}

namespace detail {

inline void check_inputs(const ModelSpec& spec, const std::vector<Tensor>& inputs) {
  if (inputs.size() != spec.modalities) {
    throw ConfigError("model configured for " + std::to_string(spec.modalities) + " modalities, got " +
                      std::to_string(inputs.size()) + " inputs");
  }
  for (const auto& t : inputs) {
    if (t.shape() != inputs[0].shape()) {
      throw DimensionError("modality inputs differ in shape: " + shape_str(t.shape()) + " vs " +
                           shape_str(inputs[0].shape()));
    }
  }
}

}  // namespace detail

inline ModelOutput octopus_forward(const ModelSpec& spec, Context& ctx, const std::vector<Tensor>& inputs) {
  detail::check_inputs(spec, inputs);
  std::array<std::vector<Tensor>, 4> per_stage;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    StageFeatures f = encoder_forward(spec.encoder, ctx, "encoder" + std::to_string(m), inputs[m]);
    for (std::size_t s = 0; s < 4; ++s) per_stage[s].push_back(f.taps[s]);
  }
  std::array<Tensor, 4> fused;
  for (std::size_t s = 0; s < 4; ++s) fused[s] = hyper_fuse(ctx, s + 1, per_stage[s], spec.modalities);
  ModelOutput out;
  out.logits = decoder_forward(ctx, "decoder", fused, spec.decoder_channels, spec.num_classes);
  if (spec.strategy.deep_supervision) out.deep_logits = conv_layer(ctx, "deep_head", fused[3], spec.num_classes, 1);
  return out;
}

inline Tensor early_forward(const ModelSpec& spec, Context& ctx, const std::vector<Tensor>& inputs) {
  detail::check_inputs(spec, inputs);
  ModelSpec stacked = spec;
  stacked.encoder.in_channels = spec.encoder.in_channels * spec.modalities;
  Tensor x = inputs.size() == 1 ? inputs[0] : concat_channels(inputs);
  return plain_forward(stacked, ctx, x);
}

inline Tensor late_forward(const ModelSpec& spec, Context& ctx, const std::vector<Tensor>& inputs) {
  detail::check_inputs(spec, inputs);
  Tensor total;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    Tensor branch = plain_forward(spec, ctx, inputs[m], "branch" + std::to_string(m) + ".");
    total = m == 0 ? branch : add(total, branch);
  }
  return inputs.size() == 1 ? total : scale(total, Real{1} / static_cast<Real>(inputs.size()));
}

/// Dispatches on spec.strategy. Single-modality models take all M inputs and
/// use only the selected one.
inline ModelOutput model_forward(const ModelSpec& spec, Context& ctx, const std::vector<Tensor>& inputs) {
  switch (spec.strategy.kind) {
    case FusionKind::kSingle:
      detail::check_inputs(spec, inputs);
      return {plain_forward(spec, ctx, inputs[spec.strategy.modality]), {}};
    case FusionKind::kEarly:
      return {early_forward(spec, ctx, inputs), {}};
    case FusionKind::kLate:
      return {late_forward(spec, ctx, inputs), {}};
    case FusionKind::kOctopus:
      return octopus_forward(spec, ctx, inputs);
  }
  throw ContractError("unknown fusion kind");
}

/// A model spec together with its parameters.
class FusionModel {
 public:
  FusionModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    params_ = ParameterSet::for_init(seed);
    {
      NoGradGuard no_grad;
      Context ctx{params_, Mode::kEval};
      std::vector<Tensor> dummy(spec_.modalities, Tensor::zeros({1, spec_.encoder.in_channels, 16, 16}));
      model_forward(spec_, ctx, dummy);
    }
    params_.finish_init();
  }

  FusionModel(ModelSpec spec, ParameterSet params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
  }

  ModelOutput forward(const std::vector<Tensor>& inputs, Mode mode) {
    Context ctx{params_, mode};
    return model_forward(spec_, ctx, inputs);
  }

  const ModelSpec& spec() const { return spec_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  std::size_t decoder_parameter_count() const {
    return params_.parameter_count("decoder.") + params_.parameter_count("head.");
  }
  std::size_t fusion_parameter_count() const { return params_.parameter_count("fusion."); }

  Checkpoint to_checkpoint(nlohmann::json meta = nlohmann::json::object()) const {
    meta["model"] = spec_.to_json();
    return params_.to_checkpoint(std::move(meta));
  }

  static FusionModel from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("model")) throw FormatError("checkpoint has no model spec in its manifest", 0);
    return FusionModel(ModelSpec::from_json(ckpt.meta.at("model")), ParameterSet::from_checkpoint(ckpt));
  }

 private:
  ModelSpec spec_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Losses and predictions
// ---------------------------------------------------------------------------

enum class LossKind { kCrossEntropy, kSoftDice };

/// Label map N x H x W reduced by `factor` in each spatial axis by majority
/// vote per factor x factor cell; ties go to the lowest class index.
inline std::vector<int> downsample_labels_majority(std::span<const int> labels, std::size_t n, std::size_t h,
                                                   std::size_t w, std::size_t factor, std::size_t classes) {
  if (factor == 0 || h % factor != 0 || w % factor != 0) {
    throw DimensionError("label map " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                         std::to_string(factor));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  std::vector<int> out(n * oh * ow);
  std::vector<std::size_t> counts(classes);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < factor; ++i) {
          for (std::size_t j = 0; j < factor; ++j) {
            const int label = labels[(b * h + y * factor + i) * w + x * factor + j];
            if (label < 0 || static_cast<std::size_t>(label) >= classes) {
              throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
            }
            ++counts[static_cast<std::size_t>(label)];
          }
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
          if (counts[c] > counts[best]) best = c;
        }
        out[(b * oh + y) * ow + x] = static_cast<int>(best);
      }
    }
  }
  return out;
}

/// 1 - mean over foreground classes of the soft Dice between softmax
/// probabilities and one-hot labels.
inline Tensor soft_dice_loss(const Tensor& logits, std::span<const int> labels, Real smooth = Real{1}) {
  const std::size_t n = logits.extent(0), k = logits.extent(1), plane = logits.extent(2) * logits.extent(3);
  if (k < 2) throw ConfigError("soft Dice loss needs at least two classes");
  detail::check_labels(logits, labels, static_cast<int>(k), "soft_dice_loss");
  Tensor probs = softmax_channels(logits);
  Tensor total;
  for (std::size_t c = 1; c < k; ++c) {
    std::vector<Real> onehot(n * plane);
    for (std::size_t i = 0; i < onehot.size(); ++i) onehot[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
    Tensor target = Tensor::from_data({n, 1, logits.extent(2), logits.extent(3)}, onehot);
    Tensor p = slice_channels(probs, c, 1);
    Tensor inter = scale(sum(mul(p, target)), Real{2});
    Real target_sum = 0;
    for (Real v : onehot) target_sum += v;
    Tensor denom = add_scalar(sum(p), target_sum + smooth);
    Tensor dice = div(add_scalar(inter, smooth), denom);
    total = c == 1 ? dice : add(total, dice);
  }
  return add_scalar(scale(total, Real{-1} / static_cast<Real>(k - 1)), Real{1});
}

struct LossTerms {
  Tensor total;
  Tensor main;
  Tensor deep;  // undefined when no deep logits were supplied
};

inline Tensor pixel_loss(const Tensor& logits, std::span<const int> labels, LossKind kind) {
  if (logits.extent(1) == 1) {
    if (kind != LossKind::kCrossEntropy) throw ConfigError("soft Dice loss is not defined for a sigmoid head");
    return sigmoid_cross_entropy(logits, labels);
  }
  return kind == LossKind::kSoftDice ? soft_dice_loss(logits, labels) : softmax_cross_entropy(logits, labels);
}

/// total = main + deep_weight * deep. The deep term compares deep logits with
/// labels reduced to the deep grid by majority vote.
inline LossTerms segmentation_loss(const ModelOutput& out, std::span<const int> labels, Real deep_weight,
                                   LossKind kind = LossKind::kCrossEntropy) {
  const Tensor& logits = out.logits;
  const std::size_t k = logits.extent(1);
  const std::size_t classes = k == 1 ? 2 : k;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
  }
  LossTerms terms;
  terms.main = pixel_loss(logits, labels, kind);
  terms.total = terms.main;
  if (out.deep_logits.defined()) {
    const std::size_t factor = logits.extent(2) / out.deep_logits.extent(2);
    auto coarse = downsample_labels_majority(labels, logits.extent(0), logits.extent(2), logits.extent(3), factor,
                                             classes);
    terms.deep = pixel_loss(out.deep_logits, coarse, LossKind::kCrossEntropy);
    if (deep_weight != 0) terms.total = add(terms.main, scale(terms.deep, deep_weight));
  }
  return terms;
}

/// Hard labels N x H x W: argmax over K, or logit > 0 for a sigmoid head.
inline std::vector<int> predict_labels(const Tensor& logits) {
  const std::size_t n = logits.extent(0), k = logits.extent(1), plane = logits.extent(2) * logits.extent(3);
  const auto z = logits.data();
  std::vector<int> out(n * plane);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = b * k * plane + p;
      if (k == 1) {
        out[b * plane + p] = z[base] > 0 ? 1 : 0;
        continue;
      }
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (z[base + c * plane] > z[base + best * plane]) best = c;
      }
      out[b * plane + p] = static_cast<int>(best);
    }
  }
  return out;
}

}  // namespace octofuse
