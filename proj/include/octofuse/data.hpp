#pragma once

// Multi-modal volumes: synthetic generation, 2.5-D slab extraction,
// histogram equalization and the "OMMV" on-disk format.
//
// OMMV layout (little-endian):
//   "OMMV" | u32 version (1) | u64 manifest length | JSON manifest |
//   M modality buffers (D*H*W f64 each, W fastest) | label buffer (D*H*W u8)
//
// Manifest keys: M, D, H, W, K, polarity, seed, dtype ("f64"),
// label_dtype ("u8"), voxel_size, lesions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octofuse/checkpoint.hpp"
#include "octofuse/tensor.hpp"

namespace octofuse {

/// Axis-aligned ellipsoid in voxel coordinates.
struct Lesion {
  double cz = 0, cy = 0, cx = 0;
  double rz = 1, ry = 1, rx = 1;

  bool contains(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c <= 1.0;
  }

  bool operator==(const Lesion&) const = default;
};

struct MultiModalVolume {
  std::size_t depth = 0, height = 0, width = 0;
  std::size_t num_classes = 2;
  /// M buffers of depth*height*width values in [0,1], W fastest.
  std::vector<std::vector<double>> modalities;
  std::vector<int> labels;
  /// +1: lesion brighter than background in that modality, -1: darker.
  std::vector<int> polarity;
  std::uint64_t seed = 0;
  double voxel_size = 1.0;
  std::vector<Lesion> lesions;

  std::size_t num_modalities() const { return modalities.size(); }
  std::size_t voxels() const { return depth * height * width; }
  std::size_t plane() const { return height * width; }

  void validate() const {
    if (depth == 0 || height == 0 || width == 0) throw ConfigError("volume extents must be positive (D >= 1)");
    if (modalities.empty()) throw ConfigError("volume has no modalities");
    if (polarity.size() != modalities.size()) throw ConfigError("one polarity sign per modality required");
    for (const auto& m : modalities) {
      if (m.size() != voxels()) throw DimensionError("modality buffer does not match D x H x W");
    }
    if (labels.size() != voxels()) throw DimensionError("label buffer does not match D x H x W");
    for (int label : labels) {
      if (label < 0 || static_cast<std::size_t>(label) >= std::max<std::size_t>(num_classes, 2)) {
        throw DataError("label " + std::to_string(label) + " outside [0, K)");
      }
    }
  }

  bool operator==(const MultiModalVolume&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct LesionSpec {
  std::size_t min_count = 1, max_count = 3;
  double min_radius = 2.0, max_radius = 6.0;
};

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t volumes = 8;
  std::size_t depth = 4, height = 32, width = 32;
  LesionSpec lesions;
  double noise_sigma = 0.0;
  std::vector<int> polarity{+1, -1};
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Smooth field: a few random low-frequency cosines, rescaled to [lo, hi].
inline std::vector<double> smooth_field(std::mt19937_64& rng, std::size_t d, std::size_t h, std::size_t w, double lo,
                                        double hi) {
  std::uniform_real_distribution<double> freq(0.3, 1.5), phase(0.0, 2.0 * std::numbers::pi), amp(0.5, 1.0);
  struct Wave {
    double fz, fy, fx, ph, a;
  };
  std::vector<Wave> waves(4);
  for (auto& wv : waves) wv = {freq(rng) * 0.5, freq(rng), freq(rng), phase(rng), amp(rng)};
  std::vector<double> field(d * h * w);
  for (std::size_t z = 0; z < d; ++z) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double v = 0;
        for (const auto& wv : waves) {
          v += wv.a * std::cos(2.0 * std::numbers::pi *
                                   (wv.fz * static_cast<double>(z) / 8.0 + wv.fy * static_cast<double>(y) / static_cast<double>(h) +
                                    wv.fx * static_cast<double>(x) / static_cast<double>(w)) +
                               wv.ph);
        }
        field[(z * h + y) * w + x] = v;
      }
    }
  }
  const auto [mn, mx] = std::minmax_element(field.begin(), field.end());
  const double low = *mn, span = *mx - *mn;
  for (auto& v : field) v = span > 0 ? lo + (hi - lo) * (v - low) / span : (lo + hi) / 2;
  return field;
}

}  // namespace detail

/// RNG seed of volume `index` in a dataset generated from `seed`.
inline std::uint64_t volume_stream_seed(std::uint64_t seed, std::size_t index) {
  return detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(index) + 1));
}

/// One synthetic volume from its own RNG stream.
///
/// Background per modality is an independent smooth field in [0.3, 0.6]; each
/// lesion adds polarity[m] * delta (delta in [0.15, 0.3], drawn per lesion and
/// modality) inside its ellipsoid; Gaussian noise is added last and values are
/// clamped to [0, 1]. A background draw whose noise-free lesion/background
/// contrast has the wrong sign is redrawn, so the polarity holds per volume.
inline MultiModalVolume generate_volume(const SyntheticSpec& spec, std::size_t index) {
  const std::size_t d = spec.depth, h = spec.height, w = spec.width;
  const std::size_t m_count = spec.polarity.size();
  std::mt19937_64 rng(volume_stream_seed(spec.seed, index));

  MultiModalVolume vol;
  vol.depth = d;
  vol.height = h;
  vol.width = w;
  vol.num_classes = 2;
  vol.polarity = spec.polarity;
  vol.seed = volume_stream_seed(spec.seed, index);

  std::uniform_int_distribution<std::size_t> count_dist(spec.lesions.min_count, spec.lesions.max_count);
  std::uniform_real_distribution<double> radius(spec.lesions.min_radius, spec.lesions.max_radius);
  std::uniform_real_distribution<double> uz(0.0, static_cast<double>(d - 1)), uy(0.0, static_cast<double>(h - 1)),
      ux(0.0, static_cast<double>(w - 1));
  std::uniform_real_distribution<double> delta(0.15, 0.3);

  const std::size_t count = count_dist(rng);
  for (std::size_t l = 0; l < count; ++l) {
    Lesion les;
    les.cz = uz(rng);
    les.cy = uy(rng);
    les.cx = ux(rng);
    les.rz = radius(rng);
    les.ry = radius(rng);
    les.rx = radius(rng);
    vol.lesions.push_back(les);
  }
  // Owner lesion per voxel (first containing ellipsoid), -1 for background.
  std::vector<int> owner(d * h * w, -1);
  for (std::size_t z = 0; z < d; ++z) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t l = 0; l < vol.lesions.size(); ++l) {
          if (vol.lesions[l].contains(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x))) {
            owner[(z * h + y) * w + x] = static_cast<int>(l);
            break;
          }
        }
      }
    }
  }
  vol.labels.resize(owner.size());
  for (std::size_t i = 0; i < owner.size(); ++i) vol.labels[i] = owner[i] >= 0 ? 1 : 0;
  const auto inside = static_cast<std::size_t>(std::count(vol.labels.begin(), vol.labels.end(), 1));

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t m = 0; m < m_count; ++m) {
    std::vector<double> deltas(count);
    for (auto& dv : deltas) dv = delta(rng);
    std::vector<double> clean;
    for (int attempt = 0;; ++attempt) {
      clean = detail::smooth_field(rng, d, h, w, 0.3, 0.6);
      for (std::size_t i = 0; i < clean.size(); ++i) {
        if (owner[i] >= 0) clean[i] += spec.polarity[m] * deltas[static_cast<std::size_t>(owner[i])];
      }
      if (inside == 0 || inside == clean.size()) break;
      double in_sum = 0, out_sum = 0;
      for (std::size_t i = 0; i < clean.size(); ++i) (owner[i] >= 0 ? in_sum : out_sum) += clean[i];
      const double contrast = in_sum / static_cast<double>(inside) - out_sum / static_cast<double>(clean.size() - inside);
      if (contrast * spec.polarity[m] > 0) break;
      if (attempt > 1000) throw ConfigError("could not draw a background matching the requested polarity");
    }
    if (spec.noise_sigma > 0) {
      for (auto& v : clean) v = std::clamp(v + spec.noise_sigma * noise(rng), 0.0, 1.0);
    } else {
      for (auto& v : clean) v = std::clamp(v, 0.0, 1.0);
    }
    vol.modalities.push_back(std::move(clean));
  }
  return vol;
}

inline void validate(const SyntheticSpec& spec) {
  if (spec.depth == 0 || spec.height == 0 || spec.width == 0) throw ConfigError("volume extents must be positive");
  if (spec.height % 16 != 0 || spec.width % 16 != 0) {
    throw ConfigError("H and W must be divisible by 16, got " + std::to_string(spec.height) + "x" +
                      std::to_string(spec.width));
  }
  if (spec.polarity.empty()) throw ConfigError("at least one modality required");
  for (int p : spec.polarity) {
    if (p != 1 && p != -1) throw ConfigError("polarity entries must be +1 or -1");
  }
  if (spec.lesions.min_count > spec.lesions.max_count || spec.lesions.min_radius <= 0 ||
      spec.lesions.min_radius > spec.lesions.max_radius) {
    throw ConfigError("invalid lesion count/radius ranges");
  }
  if (spec.noise_sigma < 0) throw ConfigError("noise_sigma must be non-negative");
}

inline std::vector<MultiModalVolume> generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  std::vector<MultiModalVolume> out;
  out.reserve(spec.volumes);
  for (std::size_t i = 0; i < spec.volumes; ++i) out.push_back(generate_volume(spec, i));
  return out;
}

// ---------------------------------------------------------------------------
// Slabs and enhancement
// ---------------------------------------------------------------------------

/// Slice indices of the 2.5-D slab centred on z; boundary slices duplicate.
inline std::array<std::size_t, 3> slab_indices(std::size_t depth, std::size_t z) {
  if (z >= depth) {
    throw IndexError("slice " + std::to_string(z) + " outside volume of depth " + std::to_string(depth));
  }
  return {z == 0 ? 0 : z - 1, z, std::min(z + 1, depth - 1)};
}

/// 3 x H x W stack of slices z-1, z, z+1 of modality m.
inline Tensor extract_25d(const MultiModalVolume& vol, std::size_t m, std::size_t z) {
  if (m >= vol.num_modalities()) throw IndexError("modality " + std::to_string(m) + " out of range");
  const auto idx = slab_indices(vol.depth, z);
  const std::size_t plane = vol.plane();
  std::vector<Real> out(3 * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    const double* src = vol.modalities[m].data() + idx[c] * plane;
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = static_cast<Real>(src[i]);
  }
  return Tensor::from_data({3, vol.height, vol.width}, std::move(out));
}

/// Histogram equalization of one slice: quantize to `bins` levels and map each
/// level to the inclusive CDF over the slice. Output is in [0, 1] and
/// non-decreasing in the input.
inline std::vector<double> hist_equalize(std::span<const double> slice, std::size_t bins = 256) {
  if (bins == 0) throw ConfigError("hist_equalize needs at least one bin");
  std::vector<std::size_t> level(slice.size());
  std::vector<std::size_t> hist(bins, 0);
  for (std::size_t i = 0; i < slice.size(); ++i) {
    const double v = slice[i];
    if (std::isnan(v)) throw DataError("hist_equalize: NaN at pixel " + std::to_string(i));
    if (v < 0.0 || v > 1.0) throw DataError("hist_equalize: value outside [0,1] at pixel " + std::to_string(i));
    level[i] = std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)));
    ++hist[level[i]];
  }
  std::vector<double> cdf(bins);
  std::size_t running = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    running += hist[b];
    cdf[b] = static_cast<double>(running) / static_cast<double>(slice.size());
  }
  std::vector<double> out(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) out[i] = cdf[level[i]];
  return out;
}

/// Copy of modality `m` with every slice equalized independently.
inline std::vector<double> equalize_volume(const MultiModalVolume& vol, std::size_t m, std::size_t bins = 256) {
  std::vector<double> out(vol.voxels());
  for (std::size_t z = 0; z < vol.depth; ++z) {
    std::span<const double> slice(vol.modalities.at(m).data() + z * vol.plane(), vol.plane());
    auto eq = hist_equalize(slice, bins);
    std::copy(eq.begin(), eq.end(), out.begin() + static_cast<long>(z * vol.plane()));
  }
  return out;
}

/// Appends a per-slice equalized copy of each listed modality as an extra
/// modality (the copy keeps the source's polarity).
inline MultiModalVolume with_enhanced(const MultiModalVolume& vol, const std::vector<std::size_t>& enhance,
                                      std::size_t bins = 256) {
  MultiModalVolume out = vol;
  for (std::size_t m : enhance) {
    if (m >= vol.num_modalities()) throw ConfigError("cannot enhance modality " + std::to_string(m));
    out.modalities.push_back(equalize_volume(vol, m, bins));
    out.polarity.push_back(vol.polarity[m]);
  }
  return out;
}

struct SliceSample {
  std::vector<Tensor> slabs;  // one 3 x H x W tensor per modality
  std::vector<int> labels;    // H x W
  std::size_t volume_id = 0;
  std::size_t slice = 0;
};

inline std::vector<SliceSample> volume_samples(const MultiModalVolume& vol, std::size_t volume_id) {
  std::vector<SliceSample> out;
  for (std::size_t z = 0; z < vol.depth; ++z) {
    SliceSample s;
    for (std::size_t m = 0; m < vol.num_modalities(); ++m) s.slabs.push_back(extract_25d(vol, m, z));
    s.labels.assign(vol.labels.begin() + static_cast<long>(z * vol.plane()),
                    vol.labels.begin() + static_cast<long>((z + 1) * vol.plane()));
    s.volume_id = volume_id;
    s.slice = z;
    out.push_back(std::move(s));
  }
  return out;
}

struct Batch {
  std::vector<Tensor> inputs;  // per modality, N x 3 x H x W
  std::vector<int> labels;     // N x H x W
};

inline Batch stack_samples(std::span<const SliceSample* const> samples) {
  if (samples.empty()) throw ContractError("cannot stack an empty batch");
  const std::size_t m_count = samples[0]->slabs.size();
  const Shape& slab = samples[0]->slabs[0].shape();
  Batch batch;
  for (std::size_t m = 0; m < m_count; ++m) {
    std::vector<Real> values;
    values.reserve(samples.size() * samples[0]->slabs[m].numel());
    for (const auto* s : samples) {
      const auto d = s->slabs.at(m).data();
      values.insert(values.end(), d.begin(), d.end());
    }
    batch.inputs.push_back(Tensor::from_data({samples.size(), slab[0], slab[1], slab[2]}, std::move(values)));
  }
  for (const auto* s : samples) batch.labels.insert(batch.labels.end(), s->labels.begin(), s->labels.end());
  return batch;
}

// ---------------------------------------------------------------------------
// OMMV files
// ---------------------------------------------------------------------------

inline std::string encode_volume(const MultiModalVolume& vol) {
  vol.validate();
  nlohmann::json lesions = nlohmann::json::array();
  for (const auto& l : vol.lesions) lesions.push_back({l.cz, l.cy, l.cx, l.rz, l.ry, l.rx});
  nlohmann::json manifest = {{"M", vol.num_modalities()}, {"D", vol.depth},        {"H", vol.height},
                             {"W", vol.width},            {"K", vol.num_classes},  {"polarity", vol.polarity},
                             {"seed", vol.seed},          {"dtype", "f64"},        {"label_dtype", "u8"},
                             {"voxel_size", vol.voxel_size}, {"lesions", lesions}};
  const std::string text = manifest.dump();
  std::string out = "OMMV";
  io::put_u32(out, 1);
  io::put_u64(out, text.size());
  out += text;
  for (const auto& m : vol.modalities) io::put_values(out, std::span<const double>(m));
  for (int label : vol.labels) out.push_back(static_cast<char>(static_cast<std::uint8_t>(label)));
  return out;
}

inline MultiModalVolume decode_volume(std::string_view bytes) {
  io::Reader r(bytes);
  const nlohmann::json manifest = io::parse_manifest(r, "OMMV");
  const std::size_t payload_at = r.pos();
  MultiModalVolume vol;
  std::size_t m_count = 0;
  try {
    m_count = manifest.at("M").get<std::size_t>();
    vol.depth = manifest.at("D").get<std::size_t>();
    vol.height = manifest.at("H").get<std::size_t>();
    vol.width = manifest.at("W").get<std::size_t>();
    vol.num_classes = manifest.at("K").get<std::size_t>();
    vol.polarity = manifest.at("polarity").get<std::vector<int>>();
    vol.seed = manifest.at("seed").get<std::uint64_t>();
    vol.voxel_size = manifest.value("voxel_size", 1.0);
    if (manifest.at("dtype").get<std::string>() != "f64") throw FormatError("unsupported dtype", payload_at);
    if (manifest.at("label_dtype").get<std::string>() != "u8") throw FormatError("unsupported label dtype", payload_at);
    for (const auto& l : manifest.value("lesions", nlohmann::json::array())) {
      auto v = l.get<std::vector<double>>();
      if (v.size() != 6) throw FormatError("lesion entries need 6 numbers", payload_at);
      vol.lesions.push_back({v[0], v[1], v[2], v[3], v[4], v[5]});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed volume manifest: ") + e.what(), payload_at);
  }
  if (vol.depth * vol.height * vol.width == 0) {
    throw FormatError("volume extents must be positive (D*H*W = 0)", payload_at);
  }
  if (m_count == 0 || vol.polarity.size() != m_count) {
    throw FormatError("manifest lists " + std::to_string(vol.polarity.size()) + " polarity signs for M = " +
                          std::to_string(m_count),
                      payload_at);
  }
  const std::size_t n = vol.voxels();
  const std::size_t expected = payload_at + m_count * n * 8 + n;
  if (bytes.size() != expected) {
    throw FormatError((bytes.size() < expected ? "truncated volume file: expected " : "trailing bytes in volume file: expected ") +
                          std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()),
                      std::min(bytes.size(), expected));
  }
  for (std::size_t m = 0; m < m_count; ++m) {
    auto raw = r.take(n * 8, "modality buffer");
    std::vector<double> values(n);
    std::memcpy(values.data(), raw.data(), raw.size());
    vol.modalities.push_back(std::move(values));
  }
  auto raw = r.take(n, "label buffer");
  vol.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) vol.labels[i] = static_cast<std::uint8_t>(raw[i]);
  try {
    vol.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("inconsistent volume: ") + e.what(), payload_at);
  }
  return vol;
}

inline void write_volume(const std::string& path, const MultiModalVolume& vol) {
  io::write_file(path, encode_volume(vol));
}

inline MultiModalVolume read_volume(const std::string& path) { return decode_volume(io::read_file(path)); }

/// Writes vol_000.ommv, vol_001.ommv, ... into `dir` (created if missing).
inline void write_dataset(const std::string& dir, const std::vector<MultiModalVolume>& vols) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < vols.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "vol_%03zu.ommv", i);
    write_volume((std::filesystem::path(dir) / name).string(), vols[i]);
  }
}

/// All *.ommv files of `dir` in lexicographic order.
inline std::vector<MultiModalVolume> read_dataset(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".ommv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .ommv volumes in " + dir);
  std::vector<MultiModalVolume> out;
  for (const auto& f : files) out.push_back(read_volume(f.string()));
  return out;
}

}  // namespace octofuse
