#pragma once

// Shared helpers for the unit suites and the acceptance binary: random
// tensors, a central finite-difference checker and brute-force oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "octofuse/fusion.hpp"
#include "octofuse/tensor.hpp"

namespace octofuse::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

/// Values with |x| >= margin, so kinks (relu at 0) are not straddled by h.
inline Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin = 0.05,
                             bool requires_grad = true) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(sign(rng) ? u(rng) : -u(rng));
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
};

/// |a - n| / max(|a|, |n|), with the denominator floored at 1e-3 so that
/// coordinates whose true gradient is ~0 are judged on absolute error.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

/// Compares backward() of `loss()` against central differences (step h) at
/// `samples` coordinates drawn uniformly over all entries of `leaves`
/// (every coordinate when there are fewer entries than that).
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> leaves,
                                 std::size_t samples, std::mt19937_64& rng, double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  loss().backward();
  std::vector<std::vector<Real>> analytic;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    analytic.emplace_back(leaves[l].grad().begin(), leaves[l].grad().end());
    for (std::size_t i = 0; i < leaves[l].numel(); ++i) coords.emplace_back(l, i);
  }
  if (coords.size() > samples) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (auto [l, i] : coords) {
    auto data = leaves[l].mutable_data();
    const Real saved = data[i];
    data[i] = saved + h;
    const double up = loss().item();
    data[i] = saved - h;
    const double down = loss().item();
    data[i] = saved;
    const double numeric = (up - down) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[l][i], numeric));
    ++out.coordinates;
  }
  return out;
}

/// Weighted sum with fixed random weights: a scalar whose gradient exercises
/// every output element differently.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

/// Direct convolution written from the definition, independent of the library.
inline std::vector<double> conv_oracle(const Tensor& input, const Tensor& weight, const Tensor& bias,
                                       std::size_t stride, std::size_t pad) {
  const long n = static_cast<long>(input.extent(0)), cin = static_cast<long>(input.extent(1)),
             h = static_cast<long>(input.extent(2)), w = static_cast<long>(input.extent(3));
  const long cout = static_cast<long>(weight.extent(0)), kh = static_cast<long>(weight.extent(2)),
             kw = static_cast<long>(weight.extent(3));
  const long s = static_cast<long>(stride), p = static_cast<long>(pad);
  const long oh = (h + 2 * p - kh) / s + 1, ow = (w + 2 * p - kw) / s + 1;
  std::vector<double> out(static_cast<std::size_t>(n * cout * oh * ow));
  auto in_at = [&](long b, long c, long y, long x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return input[static_cast<std::size_t>(((b * cin + c) * h + y) * w + x)];
  };
  for (long b = 0; b < n; ++b)
    for (long o = 0; o < cout; ++o)
      for (long y = 0; y < oh; ++y)
        for (long x = 0; x < ow; ++x) {
          double acc = bias[static_cast<std::size_t>(o)];
          for (long c = 0; c < cin; ++c)
            for (long i = 0; i < kh; ++i)
              for (long j = 0; j < kw; ++j) {
                acc += in_at(b, c, y * s - p + i, x * s - p + j) *
                       weight[static_cast<std::size_t>(((o * cin + c) * kh + i) * kw + j)];
              }
          out[static_cast<std::size_t>(((b * cout + o) * oh + y) * ow + x)] = acc;
        }
  return out;
}

/// 2|A n B| / (|A| + |B|) from explicit index sets.
inline double dice_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::set<std::size_t> sa, sb, both;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) sa.insert(i);
    if (b[i]) sb.insert(i);
  }
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.begin()));
  if (sa.empty() && sb.empty()) return 1.0;
  return 2.0 * static_cast<double>(both.size()) / static_cast<double>(sa.size() + sb.size());
}

inline double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i] - b[i])));
  return m;
}

/// Small densenet spec used by gradient checks: stem 4, growth 2, one layer per block.
inline ModelSpec tiny_model(std::size_t modalities, FusionStrategy strategy) {
  ModelSpec spec;
  spec.encoder.stem_channels = 4;
  spec.encoder.growth_rate = 2;
  spec.encoder.layers_per_block = {1, 1, 1, 1};
  spec.encoder.stage_channels = EncoderSpec::densenet_stage_channels(4, 2, {1, 1, 1, 1}, 1.0);
  spec.decoder_channels = {6, 4, 4, 4};
  spec.modalities = modalities;
  spec.strategy = strategy;
  spec.num_classes = 2;
  return spec;
}

}  // namespace octofuse::testing
