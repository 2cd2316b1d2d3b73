#pragma once

// Encoder backbones exposing four staged feature maps (the skip taps).
//
// Every family runs a full-resolution stem followed by four stages; stage s
// halves the spatial extent exactly once and outputs stage_channels[s]
// channels, so tap s is N x C_s x H/2^s x W/2^s.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "octofuse/checkpoint.hpp"
#include "octofuse/tensor.hpp"

namespace octofuse {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

enum class Init { kHeNormal, kZeros, kOnes };

/// Named tensors in creation order. Trainable entries get gradients; buffers
/// (batch-norm running statistics) do not.
///
/// A set created with `for_init(seed)` materializes missing entries on first
/// request, drawing He-normal weights from one seeded stream in request order.
/// After `finish_init()` a missing name is a configuration error.
class ParameterSet {
 public:
  ParameterSet() = default;

  static ParameterSet for_init(std::uint64_t seed) {
    ParameterSet ps;
    ps.rng_.emplace(seed);
    return ps;
  }

  bool initializing() const { return rng_.has_value(); }
  void finish_init() { rng_.reset(); }

  Tensor& fetch(const std::string& name, const Shape& shape, Init init, bool trainable = true) {
    auto it = entries_.find(name);
    if (it != entries_.end()) {
      if (it->second.value.shape() != shape) {
        throw DimensionError("parameter " + name + " has shape " + shape_str(it->second.value.shape()) +
                             ", layer expects " + shape_str(shape));
      }
      return it->second.value;
    }
    if (!rng_) throw ConfigError("parameter set has no entry named " + name);
    return insert(name, make(shape, init), trainable);
  }

  Tensor& insert(const std::string& name, Tensor value, bool trainable = true) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter " + name);
    value.set_requires_grad(trainable);
    order_.push_back(name);
    return entries_.emplace(name, Entry{std::move(value), trainable}).first->second.value;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& at(const std::string& name) { return entry(name).value; }
  const Tensor& at(const std::string& name) const { return entries_.at(name).value; }
  bool trainable(const std::string& name) const { return entries_.at(name).trainable; }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  std::vector<Tensor> trainable_tensors() const {
    std::vector<Tensor> out;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      if (e.trainable) out.push_back(e.value);
    }
    return out;
  }

  /// Number of trainable scalars whose name starts with `prefix`.
  std::size_t parameter_count(const std::string& prefix = "") const {
    std::size_t total = 0;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      if (e.trainable && name.rfind(prefix, 0) == 0) total += e.value.numel();
    }
    return total;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) {
      if (e.trainable) e.value.zero_grad();
    }
  }

  /// Deep copy of all values; the copy shares no storage with this set.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      out.insert(name, e.value.detach(), e.trainable);
    }
    return out;
  }

  /// Copies `prefix_from*` entries of `other` in under `prefix_to*` names.
  void import_prefixed(const ParameterSet& other, const std::string& prefix_from, const std::string& prefix_to) {
    for (const auto& name : other.names()) {
      if (name.rfind(prefix_from, 0) != 0) continue;
      insert(prefix_to + name.substr(prefix_from.size()), other.at(name).detach(), other.trainable(name));
    }
  }

  Checkpoint to_checkpoint(nlohmann::json meta = nlohmann::json::object()) const {
    Checkpoint ckpt;
    nlohmann::json buffers = nlohmann::json::array();
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      ckpt.tensors.push_back({name, e.value});
      if (!e.trainable) buffers.push_back(name);
    }
    meta["buffers"] = buffers;
    ckpt.meta = std::move(meta);
    return ckpt;
  }

  static ParameterSet from_checkpoint(const Checkpoint& ckpt) {
    std::map<std::string, bool> buffers;
    for (const auto& b : ckpt.meta.value("buffers", nlohmann::json::array())) buffers[b.get<std::string>()] = true;
    ParameterSet ps;
    for (const auto& [name, value] : ckpt.tensors) ps.insert(name, value.detach(), !buffers.count(name));
    return ps;
  }

 private:
  struct Entry {
    Tensor value;
    bool trainable;
  };

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("parameter set has no entry named " + name);
    return it->second;
  }

  Tensor make(const Shape& shape, Init init) {
    switch (init) {
      case Init::kZeros:
        return Tensor::zeros(shape);
      case Init::kOnes:
        return Tensor::full(shape, Real{1});
      case Init::kHeNormal: {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        std::vector<Real> values(shape_numel(shape));
        for (auto& v : values) v = static_cast<Real>(normal(*rng_));
        return Tensor::from_data(shape, std::move(values));
      }
    }
    throw ContractError("unknown initializer");
  }

  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
  std::optional<std::mt19937_64> rng_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Parameters plus train/eval switch threaded through every forward pass.
struct Context {
  ParameterSet& params;
  Mode mode = Mode::kTrain;
};

inline Tensor conv_layer(Context& ctx, const std::string& name, const Tensor& x, std::size_t out_channels,
                         std::size_t kernel, std::size_t stride = 1) {
  const std::size_t in_channels = x.extent(1);
  Tensor& w = ctx.params.fetch(name + ".weight", {out_channels, in_channels, kernel, kernel}, Init::kHeNormal);
  Tensor& b = ctx.params.fetch(name + ".bias", {out_channels}, Init::kZeros);
  return conv2d(x, w, b, stride, kernel / 2);
}

inline Tensor batchnorm_layer(Context& ctx, const std::string& name, const Tensor& x) {
  const std::size_t c = x.extent(1);
  Tensor& gamma = ctx.params.fetch(name + ".gamma", {c}, Init::kOnes);
  Tensor& beta = ctx.params.fetch(name + ".beta", {c}, Init::kZeros);
  Tensor& mean = ctx.params.fetch(name + ".running_mean", {c}, Init::kZeros, false);
  Tensor& var = ctx.params.fetch(name + ".running_var", {c}, Init::kOnes, false);
  return batchnorm(x, gamma, beta, mean, var, ctx.mode);
}

inline Tensor conv_bn_relu(Context& ctx, const std::string& name, const Tensor& x, std::size_t out_channels,
                           std::size_t kernel = 3, std::size_t stride = 1) {
  Tensor y = conv_layer(ctx, name + ".conv", x, out_channels, kernel, stride);
  return relu(batchnorm_layer(ctx, name + ".bn", y));
}

/// Dense block: layer i sees the concatenation of the input and all earlier
/// layer outputs (BN -> ReLU -> 3x3 conv to `growth_rate` channels).
inline Tensor dense_block(Context& ctx, const std::string& name, const Tensor& x, std::size_t growth_rate,
                          std::size_t layers) {
  if (growth_rate == 0 || layers == 0) throw ConfigError("dense_block needs growth_rate >= 1 and layers >= 1");
  std::vector<Tensor> features{x};
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string layer = name + ".layer" + std::to_string(i);
    Tensor joined = features.size() == 1 ? features[0] : concat_channels(features);
    Tensor h = relu(batchnorm_layer(ctx, layer + ".bn", joined));
    features.push_back(conv_layer(ctx, layer + ".conv", h, growth_rate, 3));
  }
  return concat_channels(features);
}

// ---------------------------------------------------------------------------
// Encoder spec
// ---------------------------------------------------------------------------

enum class Family { kVgg, kResNet, kDenseNet };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::kVgg:
      return "vgg";
    case Family::kResNet:
      return "resnet";
    case Family::kDenseNet:
      return "densenet";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "vgg") return Family::kVgg;
  if (s == "resnet") return Family::kResNet;
  if (s == "densenet") return Family::kDenseNet;
  throw ConfigError("unknown backbone family \"" + s + "\" (expected vgg, resnet or densenet)");
}

struct EncoderSpec {
  Family family = Family::kDenseNet;
  std::size_t in_channels = 3;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 4> stage_channels{16, 24, 32, 40};
  std::size_t growth_rate = 4;
  std::array<std::size_t, 4> layers_per_block{2, 2, 2, 2};
  /// DenseNet transition width factor (1x1 conv C -> round(theta * C)); 0.5 is
  /// the classic DenseNet setting, 1.0 keeps the width.
  double transition_compaction = 1.0;

  /// Channels entering dense block s (0-based): the stem for s = 0, otherwise
  /// the compacted output of stage s - 1.
  std::size_t block_input_channels(std::size_t s) const {
    if (s == 0) return stem_channels;
    return static_cast<std::size_t>(std::lround(transition_compaction * static_cast<double>(stage_channels[s - 1])));
  }

  void validate() const {
    if (in_channels == 0 || stem_channels == 0) throw ConfigError("encoder channel counts must be positive");
    for (std::size_t s = 0; s < 4; ++s) {
      if (stage_channels[s] == 0) throw ConfigError("stage_channels must be positive");
      if (family != Family::kVgg && layers_per_block[s] == 0) throw ConfigError("layers_per_block must be positive");
    }
    if (family == Family::kVgg) {
      for (std::size_t s = 0; s < 4; ++s) {
        if (layers_per_block[s] == 0) throw ConfigError("layers_per_block must be positive");
      }
    }
    if (family == Family::kDenseNet) {
      if (growth_rate == 0) throw ConfigError("densenet growth_rate must be positive");
      if (!(transition_compaction > 0.0 && transition_compaction <= 1.0)) {
        throw ConfigError("transition_compaction must lie in (0, 1]");
      }
      for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t expect = block_input_channels(s) + growth_rate * layers_per_block[s];
        if (block_input_channels(s) == 0 || stage_channels[s] != expect) {
          throw ConfigError("densenet stage " + std::to_string(s + 1) + " declares " +
                            std::to_string(stage_channels[s]) + " channels but the block produces " +
                            std::to_string(expect));
        }
      }
    }
  }

  /// Stage widths implied by the dense-block arithmetic.
  static std::array<std::size_t, 4> densenet_stage_channels(std::size_t stem, std::size_t growth,
                                                            std::array<std::size_t, 4> layers, double compaction) {
    std::array<std::size_t, 4> out{};
    std::size_t entering = stem;
    for (std::size_t s = 0; s < 4; ++s) {
      out[s] = entering + growth * layers[s];
      entering = static_cast<std::size_t>(std::lround(compaction * static_cast<double>(out[s])));
    }
    return out;
  }

  static EncoderSpec desk_densenet() { return {}; }

  static EncoderSpec desk(Family family) {
    EncoderSpec spec;
    spec.family = family;
    if (family != Family::kDenseNet) spec.layers_per_block = {1, 1, 1, 1};
    return spec;
  }

  nlohmann::json to_json() const {
    return {{"family", family_name(family)},
            {"in_channels", in_channels},
            {"stem_channels", stem_channels},
            {"stage_channels", stage_channels},
            {"growth_rate", growth_rate},
            {"layers_per_block", layers_per_block},
            {"transition_compaction", transition_compaction}};
  }

  static EncoderSpec from_json(const nlohmann::json& j) {
    EncoderSpec s;
    s.family = parse_family(j.at("family").get<std::string>());
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.stem_channels = j.at("stem_channels").get<std::size_t>();
    s.stage_channels = j.at("stage_channels").get<std::array<std::size_t, 4>>();
    s.growth_rate = j.at("growth_rate").get<std::size_t>();
    s.layers_per_block = j.at("layers_per_block").get<std::array<std::size_t, 4>>();
    s.transition_compaction = j.at("transition_compaction").get<double>();
    s.validate();
    return s;
  }

  bool operator==(const EncoderSpec&) const = default;
};

struct StageFeatures {
  std::array<Tensor, 4> taps;
  const Tensor& operator[](std::size_t s) const { return taps.at(s); }
  const Tensor& bottom() const { return taps[3]; }
};

// ---------------------------------------------------------------------------
// Encoder forward
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor residual_block(Context& ctx, const std::string& name, const Tensor& x, std::size_t out_channels,
                             std::size_t stride) {
  Tensor h = conv_bn_relu(ctx, name + ".a", x, out_channels, 3, stride);
  h = batchnorm_layer(ctx, name + ".b.bn", conv_layer(ctx, name + ".b.conv", h, out_channels, 3));
  Tensor shortcut = x;
  if (stride != 1 || x.extent(1) != out_channels) {
    shortcut = batchnorm_layer(ctx, name + ".proj.bn", conv_layer(ctx, name + ".proj.conv", x, out_channels, 1, stride));
  }
  return relu(add(h, shortcut));
}

}  // namespace detail

/// Runs one encoder; parameter names are prefixed with `prefix` + ".".
inline StageFeatures encoder_forward(const EncoderSpec& spec, Context& ctx, const std::string& prefix,
                                     const Tensor& x) {
  spec.validate();
  if (x.rank() != 4) throw DimensionError("encoder input must be N x C x H x W, got " + shape_str(x.shape()));
  if (x.extent(1) != spec.in_channels) {
    throw DimensionError("encoder expects " + std::to_string(spec.in_channels) + " input channels, got " +
                         std::to_string(x.extent(1)));
  }
  if (x.extent(2) % 16 != 0 || x.extent(3) % 16 != 0) {
    throw ConfigError("encoder input extents must be divisible by 16, got " + shape_str(x.shape()));
  }
  const std::string p = prefix + ".";
  StageFeatures out;
  Tensor h = conv_bn_relu(ctx, p + "stem", x, spec.stem_channels, 3);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = p + "stage" + std::to_string(s + 1);
    switch (spec.family) {
      case Family::kDenseNet: {
        if (s > 0) {
          Tensor t = relu(batchnorm_layer(ctx, stage + ".transition.bn", h));
          h = conv_layer(ctx, stage + ".transition.conv", t, spec.block_input_channels(s), 1);
        }
        h = dense_block(ctx, stage + ".block", avgpool2x(h), spec.growth_rate, spec.layers_per_block[s]);
        break;
      }
      case Family::kVgg: {
        h = maxpool2x(h);
        for (std::size_t l = 0; l < spec.layers_per_block[s]; ++l) {
          h = conv_bn_relu(ctx, stage + ".conv" + std::to_string(l), h, spec.stage_channels[s], 3);
        }
        break;
      }
      case Family::kResNet: {
        for (std::size_t l = 0; l < spec.layers_per_block[s]; ++l) {
          h = detail::residual_block(ctx, stage + ".block" + std::to_string(l), h, spec.stage_channels[s],
                                     l == 0 ? 2 : 1);
        }
        break;
      }
    }
    out.taps[s] = h;
  }
  return out;
}

/// Fresh He-initialized parameters for one encoder under `prefix`.
inline ParameterSet init_params(const EncoderSpec& spec, std::uint64_t seed, const std::string& prefix = "encoder") {
  spec.validate();
  ParameterSet ps = ParameterSet::for_init(seed);
  {
    NoGradGuard no_grad;
    Context ctx{ps, Mode::kEval};
    encoder_forward(spec, ctx, prefix, Tensor::zeros({1, spec.in_channels, 16, 16}));
  }
  ps.finish_init();
  return ps;
}

}  // namespace octofuse
