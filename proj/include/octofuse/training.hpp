#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "octofuse/data.hpp"
#include "octofuse/fusion.hpp"

namespace octofuse {

struct TrainConfig {
  double lr0 = 0.05;
  double decay_factor = 10.0;
  std::size_t decay_every = 20;
  double momentum = 0.9;
  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  double deep_weight = 0.3;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kCrossEntropy;
  /// Upper bound on optimizer steps per training run; 0 means no cap.
  std::size_t max_steps = 0;
  /// Validate (and possibly keep a new best checkpoint) every this many epochs.
  std::size_t eval_every = 1;

  /// Initial rate 0.7, divided by 10 every 35 epochs.
  static TrainConfig paper_schedule() {
    TrainConfig c;
    c.lr0 = 0.7;
    c.decay_factor = 10.0;
    c.decay_every = 35;
    return c;
  }

  void validate() const {
    if (!(lr0 >= 0)) throw ConfigError("lr0 must be non-negative");
    if (!(decay_factor > 0)) throw ConfigError("decay_factor must be positive");
    if (decay_every == 0) throw ConfigError("decay_every must be positive (use epochs + 1 for a constant rate)");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (!(deep_weight >= 0)) throw ConfigError("deep_weight must be non-negative");
  }
};

/// Step decay: lr0 / decay_factor^floor(epoch / decay_every).
inline double lr_at(const TrainConfig& config, std::size_t epoch) {
  if (config.decay_every == 0) throw ConfigError("decay_every must be positive");
  const auto drops = static_cast<double>(epoch / config.decay_every);
  return config.lr0 / std::pow(config.decay_factor, drops);
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// v <- momentum * v + g;  p <- p - lr * v
inline void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity, double lr,
                       double momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ContractError("sgd_update: parameter, gradient and velocity sizes differ (" + std::to_string(param.size()) +
                        ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  const auto mom = static_cast<Real>(momentum);
  const auto rate = static_cast<Real>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mom * velocity[i] + grad[i];
    param[i] -= rate * velocity[i];
  }
}

/// Momentum buffers, one per parameter tensor, created on first use.
struct SgdState {
  std::vector<std::vector<Real>> velocity;
};

inline void sgd_step(std::vector<Tensor>& params, double lr, double momentum, SgdState& state) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.numel(), Real{0});
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd_step: velocity state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    sgd_update(params[i].mutable_data(), params[i].grad(), state.velocity[i], lr, momentum);
  }
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// 2|A n B| / (|A| + |B|) over binary masks; two empty masks score 1.
inline double dice(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("dice: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if ((pred[i] != 0 && pred[i] != 1) || (truth[i] != 0 && truth[i] != 1)) {
      throw DataError("dice: masks must be binary");
    }
    a += static_cast<std::size_t>(pred[i]);
    b += static_cast<std::size_t>(truth[i]);
    both += static_cast<std::size_t>(pred[i] & truth[i]);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Dice of class `cls` between two label maps.
inline double class_dice(std::span<const int> pred, std::span<const int> truth, int cls) {
  std::vector<int> a(pred.size()), b(truth.size());
  for (std::size_t i = 0; i < pred.size(); ++i) a[i] = pred[i] == cls ? 1 : 0;
  for (std::size_t i = 0; i < truth.size(); ++i) b[i] = truth[i] == cls ? 1 : 0;
  return dice(a, b);
}

/// Foreground classes scored for a K-logit head: 1..K-1, or {1} for sigmoid.
inline std::vector<int> scored_classes(std::size_t num_classes) {
  std::vector<int> out;
  if (num_classes <= 2) return {1};
  for (std::size_t c = 1; c < num_classes; ++c) out.push_back(static_cast<int>(c));
  return out;
}

/// Stacks slice predictions per volume and scores volumetric Dice per class.
/// Result is [volume][class] following scored_classes order.
inline std::vector<std::vector<double>> evaluate_volumes(FusionModel& model,
                                                         const std::vector<MultiModalVolume>& volumes,
                                                         std::size_t batch_size = 8) {
  NoGradGuard no_grad;
  const auto classes = scored_classes(model.spec().num_classes);
  std::vector<std::vector<double>> out;
  for (std::size_t v = 0; v < volumes.size(); ++v) {
    const auto samples = volume_samples(volumes[v], v);
    std::vector<int> predicted;
    predicted.reserve(volumes[v].voxels());
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
      std::vector<const SliceSample*> chunk;
      for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) chunk.push_back(&samples[i]);
      Batch batch = stack_samples(chunk);
      auto labels = predict_labels(model.forward(batch.inputs, Mode::kEval).logits);
      predicted.insert(predicted.end(), labels.begin(), labels.end());
    }
    std::vector<double> scores;
    for (int c : classes) scores.push_back(class_dice(predicted, volumes[v].labels, c));
    out.push_back(std::move(scores));
  }
  return out;
}

/// Mean over volumes, then over classes.
inline double mean_dice(const std::vector<std::vector<double>>& per_volume) {
  if (per_volume.empty()) return 0.0;
  const std::size_t k = per_volume[0].size();
  double total = 0;
  for (std::size_t c = 0; c < k; ++c) {
    double acc = 0;
    for (const auto& v : per_volume) acc += v[c];
    total += acc / static_cast<double>(per_volume.size());
  }
  return total / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRecord {
  std::size_t epoch;
  std::size_t step;
  double loss;
  double lr;
};

struct TrainResult {
  FusionModel model;  // best-validation parameters (last epoch when no validation set)
  std::vector<LossRecord> curve;
  std::vector<double> val_dice_per_epoch;  // one entry per validation pass
  std::vector<double> best_val_class_dice;  // mean over val volumes, per scored class
  double best_val_dice = 0.0;
  std::size_t steps = 0;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path);
  out << "epoch,step,loss,lr\n";
  char line[128];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof(line), "%zu,%zu,%.17g,%.17g\n", r.epoch, r.step, r.loss, r.lr);
    out << line;
  }
}

/// Seed used for a model's parameter initialization inside train_model.
inline std::uint64_t init_seed_for(std::uint64_t train_seed) { return detail::splitmix64(train_seed ^ 0x1D1Dull); }

/// Trains `spec` on all slices of `train_set`, validating on `val_set`.
/// Deterministic for a fixed config in single-threaded execution.
inline TrainResult train_model(const ModelSpec& spec, const std::vector<MultiModalVolume>& train_set,
                               const std::vector<MultiModalVolume>& val_set, const TrainConfig& config,
                               std::optional<FusionModel> initial = std::nullopt) {
  config.validate();
  spec.validate();
  for (const auto& v : train_set) {
    if (v.num_modalities() != spec.modalities) {
      throw ConfigError("training volume has " + std::to_string(v.num_modalities()) + " modalities, model expects " +
                        std::to_string(spec.modalities));
    }
  }
  for (const auto& v : val_set) {
    if (v.num_modalities() != spec.modalities) throw ConfigError("validation volume modality count mismatch");
  }
  if (train_set.empty()) throw ConfigError("empty training set");

  FusionModel model = initial ? std::move(*initial) : FusionModel(spec, init_seed_for(config.seed));
  std::vector<SliceSample> samples;
  for (std::size_t v = 0; v < train_set.size(); ++v) {
    auto s = volume_samples(train_set[v], v);
    std::move(s.begin(), s.end(), std::back_inserter(samples));
  }
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(detail::splitmix64(config.seed ^ 0x5EEDull));

  std::vector<Tensor> params = model.params().trainable_tensors();
  SgdState sgd;
  TrainResult result{FusionModel(model.spec(), model.params().clone()), {}, {}, {}, -1.0, 0};
  bool have_best = false;
  std::size_t step = 0;
  bool capped = false;

  for (std::size_t epoch = 0; epoch < config.epochs && !capped; ++epoch) {
    const double lr = lr_at(config, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps != 0 && step >= config.max_steps) {
        capped = true;
        break;
      }
      std::vector<const SliceSample*> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        chunk.push_back(&samples[order[i]]);
      }
      Batch batch = stack_samples(chunk);
      model.params().zero_grad();
      double loss_value = 0;
      try {
        ModelOutput out = model.forward(batch.inputs, Mode::kTrain);
        LossTerms terms = segmentation_loss(out, batch.labels, static_cast<Real>(config.deep_weight), config.loss);
        loss_value = terms.total.item();
        terms.total.backward();
        for (const auto& p : params) detail::check_finite(p.grad(), "backward");
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), static_cast<long>(step));
      }
      sgd_step(params, lr, config.momentum, sgd);
      result.curve.push_back({epoch, step, loss_value, lr});
      ++step;
    }
    const bool last = epoch + 1 == config.epochs || capped;
    if (!val_set.empty() && ((epoch + 1) % config.eval_every == 0 || last)) {
      std::vector<std::vector<double>> per_volume;
      try {
        per_volume = evaluate_volumes(model, val_set, config.batch_size);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("validation diverged: ") + e.what(), static_cast<long>(step));
      }
      const double score = mean_dice(per_volume);
      result.val_dice_per_epoch.push_back(score);
      if (!have_best || score > result.best_val_dice) {
        have_best = true;
        result.best_val_dice = score;
        result.model = FusionModel(model.spec(), model.params().clone());
        result.best_val_class_dice.assign(per_volume[0].size(), 0.0);
        for (std::size_t c = 0; c < per_volume[0].size(); ++c) {
          for (const auto& v : per_volume) result.best_val_class_dice[c] += v[c] / static_cast<double>(per_volume.size());
        }
      }
    }
  }
  if (val_set.empty()) {
    result.model = FusionModel(model.spec(), model.params().clone());
    result.best_val_dice = 0.0;
  }
  result.steps = step;
  return result;
}

}  // namespace octofuse
