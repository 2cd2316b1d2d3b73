#pragma once

// Experiment driver: k-fold cross validation with repeats over a grid of
// (backbone family, fusion strategy) cells, raw-result persistence and
// table rendering.
//
// Config files are INI text:
//
//   [dataset]     path | seed volumes dims noise polarity lesion_count lesion_radius; enhance
//   [model]       stem_channels stage_channels growth_rate layers_per_block
//                 transition_compaction decoder_channels num_classes class_names
//   [train]       lr0 decay_factor decay_every momentum epochs batch_size
//                 deep_weight seed loss max_steps eval_every preset
//   [experiment]  families strategies folds repeats seed output threads
//
// See README.md for every key and its default.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <boost/algorithm/string/trim.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "octofuse/data.hpp"
#include "octofuse/fusion.hpp"
#include "octofuse/training.hpp"

namespace octofuse {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::string path;  // empty: generate from `synthetic`
  SyntheticSpec synthetic;
  std::vector<std::size_t> enhance;  // modalities to append as equalized copies
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelSpec model;  // encoder/decoder shape; family, strategy and M are set per cell
  std::vector<std::string> class_names;
  TrainConfig train;
  std::vector<Family> families{Family::kDenseNet};
  std::vector<FusionStrategy> strategies;
  std::size_t folds = 5;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::size_t threads = 1;

  void validate(std::size_t modalities) const {
    if (folds < 2) throw ConfigError("folds must be at least 2");
    if (repeats < 1) throw ConfigError("repeats must be at least 1");
    if (families.empty()) throw ConfigError("at least one backbone family required");
    for (const auto& s : strategies) {
      if (s.kind == FusionKind::kSingle && s.modality >= modalities) {
        throw ConfigError("strategy " + s.name() + " invalid for a dataset with " + std::to_string(modalities) +
                          " modalities");
      }
    }
    train.validate();
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::vector<T> parse_numbers(const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    std::istringstream in(item);
    T v{};
    if (!(in >> v) || !in.eof()) throw ConfigError("cannot parse number \"" + item + "\"");
    out.push_back(v);
  }
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> parse_array(const std::string& text, const std::string& key) {
  auto v = parse_numbers<std::size_t>(text);
  if (v.size() != N) throw ConfigError(key + " needs " + std::to_string(N) + " comma-separated values");
  std::array<std::size_t, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace detail

/// "+,-,+" -> {1,-1,1}
inline std::vector<int> parse_polarity(const std::string& text) {
  std::vector<int> out;
  for (const auto& item : detail::split_list(text)) {
    if (item == "+" || item == "+1" || item == "1") {
      out.push_back(1);
    } else if (item == "-" || item == "-1") {
      out.push_back(-1);
    } else {
      throw ConfigError("polarity entries must be + or -, got \"" + item + "\"");
    }
  }
  if (out.empty()) throw ConfigError("empty polarity list");
  return out;
}

/// Typed lookup with a fallback; unlike ptree::get, a malformed value is an error.
template <typename T>
T get_number(const boost::property_tree::ptree& pt, const std::string& key, T fallback) {
  const auto text = pt.get_optional<std::string>(key);
  if (!text) return fallback;
  const std::string value = boost::algorithm::trim_copy(*text);
  try {
    if (std::is_unsigned_v<T> && value.starts_with('-')) throw boost::bad_lexical_cast();
    return boost::lexical_cast<T>(value);
  } catch (const boost::bad_lexical_cast&) {
    throw ConfigError("config: " + key + " has invalid value \"" + *text + "\"");
  }
}

inline ExperimentConfig parse_experiment_config(const boost::property_tree::ptree& pt) {
  ExperimentConfig c;
  auto get = [&](const std::string& key, const std::string& fallback) { return pt.get<std::string>(key, fallback); };

  c.dataset.path = get("dataset.path", "");
  auto& syn = c.dataset.synthetic;
  syn.seed = get_number<std::uint64_t>(pt, "dataset.seed", 0);
  syn.volumes = get_number<std::size_t>(pt, "dataset.volumes", 20);
  const auto dims = detail::parse_array<3>(get("dataset.dims", "4,32,32"), "dataset.dims");
  syn.depth = dims[0];
  syn.height = dims[1];
  syn.width = dims[2];
  syn.noise_sigma = get_number<double>(pt, "dataset.noise", 0.05);
  syn.polarity = parse_polarity(get("dataset.polarity", "+,+,-,-"));
  const auto counts = detail::parse_array<2>(get("dataset.lesion_count", "1,3"), "dataset.lesion_count");
  syn.lesions.min_count = counts[0];
  syn.lesions.max_count = counts[1];
  const auto radius = detail::parse_numbers<double>(get("dataset.lesion_radius", "3,7"));
  if (radius.size() != 2) throw ConfigError("dataset.lesion_radius needs two values");
  syn.lesions.min_radius = radius[0];
  syn.lesions.max_radius = radius[1];
  c.dataset.enhance = detail::parse_numbers<std::size_t>(get("dataset.enhance", ""));

  auto& enc = c.model.encoder;
  enc.stem_channels = get_number<std::size_t>(pt, "model.stem_channels", enc.stem_channels);
  enc.stage_channels = detail::parse_array<4>(get("model.stage_channels", "16,24,32,40"), "model.stage_channels");
  enc.growth_rate = get_number<std::size_t>(pt, "model.growth_rate", enc.growth_rate);
  enc.layers_per_block = detail::parse_array<4>(get("model.layers_per_block", "2,2,2,2"), "model.layers_per_block");
  enc.transition_compaction = get_number<double>(pt, "model.transition_compaction", 1.0);
  c.model.decoder_channels = detail::parse_array<4>(get("model.decoder_channels", "24,16,8,8"), "model.decoder_channels");
  c.model.num_classes = get_number<std::size_t>(pt, "model.num_classes", 2);
  c.class_names = detail::split_list(get("model.class_names", ""));

  auto& t = c.train;
  if (get("train.preset", "") == "paper-schedule") {
    t = TrainConfig::paper_schedule();
  } else if (!get("train.preset", "").empty()) {
    throw ConfigError("unknown train.preset \"" + get("train.preset", "") + "\"");
  }
  t.lr0 = get_number<double>(pt, "train.lr0", t.lr0);
  t.decay_factor = get_number<double>(pt, "train.decay_factor", t.decay_factor);
  t.decay_every = get_number<std::size_t>(pt, "train.decay_every", t.decay_every);
  t.momentum = get_number<double>(pt, "train.momentum", t.momentum);
  t.epochs = get_number<std::size_t>(pt, "train.epochs", t.epochs);
  t.batch_size = get_number<std::size_t>(pt, "train.batch_size", t.batch_size);
  t.deep_weight = get_number<double>(pt, "train.deep_weight", t.deep_weight);
  t.seed = get_number<std::uint64_t>(pt, "train.seed", t.seed);
  t.max_steps = get_number<std::size_t>(pt, "train.max_steps", t.max_steps);
  t.eval_every = get_number<std::size_t>(pt, "train.eval_every", t.eval_every);
  const std::string loss = get("train.loss", "ce");
  if (loss == "ce") {
    t.loss = LossKind::kCrossEntropy;
  } else if (loss == "soft_dice") {
    t.loss = LossKind::kSoftDice;
  } else {
    throw ConfigError("train.loss must be ce or soft_dice");
  }
  const std::string precision = get("train.precision", native_dtype());
  if (precision != native_dtype()) {
    throw ConfigError("config asks for " + precision + " but this build computes in " + native_dtype());
  }

  c.families.clear();
  for (const auto& f : detail::split_list(get("experiment.families", "densenet"))) c.families.push_back(parse_family(f));
  for (const auto& s : detail::split_list(get("experiment.strategies", "early,late,octopus,octopus+ds"))) {
    c.strategies.push_back(FusionStrategy::parse(s));
  }
  c.folds = get_number<std::size_t>(pt, "experiment.folds", 5);
  c.repeats = get_number<std::size_t>(pt, "experiment.repeats", 3);
  c.seed = get_number<std::uint64_t>(pt, "experiment.seed", 0);
  c.output_dir = get("experiment.output", "");
  c.threads = get_number<std::size_t>(pt, "experiment.threads", 1);
  if (const char* env = std::getenv("OCTOFUSE_THREADS")) {
    try {
      c.threads = std::stoul(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("OCTOFUSE_THREADS must be a positive integer, got \"") + env + "\"");
    }
  }
  if (c.threads == 0) c.threads = 1;
  return c;
}

inline ExperimentConfig parse_experiment_config_text(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const boost::property_tree::ptree_bad_data& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  try {
    return parse_experiment_config(pt);
  } catch (const boost::property_tree::ptree_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config_text(io::read_file(path));
}

/// Dataset named by the config: read from disk or generated, then enhanced.
inline std::vector<MultiModalVolume> load_dataset(const DatasetConfig& cfg) {
  auto vols = cfg.path.empty() ? generate_synthetic(cfg.synthetic) : read_dataset(cfg.path);
  if (cfg.enhance.empty()) return vols;
  for (auto& v : vols) v = with_enhanced(v, cfg.enhance);
  return vols;
}

// ---------------------------------------------------------------------------
// Folds and seeds
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::size_t fold = 0;
  std::size_t repeat = 0;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> training;
};

/// Shuffles `ids` with `seed` and deals them into k near-equal folds (sizes
/// differ by at most one). Entry i holds fold i as validation.
inline std::vector<FoldSplit> kfold_split(const std::vector<std::size_t>& ids, std::size_t k, std::uint64_t seed,
                                          std::size_t repeat = 0) {
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (ids.size() < k) {
    throw ConfigError("cannot split " + std::to_string(ids.size()) + " volumes into " + std::to_string(k) + " folds");
  }
  std::vector<std::size_t> shuffled = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  const std::size_t base = shuffled.size() / k, extra = shuffled.size() % k;
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    folds[f].assign(shuffled.begin() + static_cast<long>(at), shuffled.begin() + static_cast<long>(at + size));
    at += size;
  }
  std::vector<FoldSplit> out;
  for (std::size_t f = 0; f < k; ++f) {
    FoldSplit s;
    s.fold = f;
    s.repeat = repeat;
    s.validation = folds[f];
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) s.training.insert(s.training.end(), folds[g].begin(), folds[g].end());
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Split seed of repeat r; shared by every cell so strategies see identical folds.
inline std::uint64_t split_seed(std::uint64_t base, std::size_t repeat) {
  return detail::splitmix64(detail::splitmix64(base ^ 0x5B1Full) + repeat);
}

/// Training seed of one (cell, fold, repeat) job.
inline std::uint64_t job_seed(std::uint64_t base, const std::string& cell, std::size_t fold, std::size_t repeat) {
  std::uint64_t h = detail::splitmix64(base);
  h = detail::splitmix64(h ^ fnv1a(cell));
  h = detail::splitmix64(h ^ (static_cast<std::uint64_t>(fold) << 32 | static_cast<std::uint64_t>(repeat)));
  return h;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct Cell {
  Family family = Family::kDenseNet;
  FusionStrategy strategy;
  std::string id() const { return family_name(family) + "/" + strategy.name(); }

  static Cell parse(const std::string& id) {
    const auto slash = id.find('/');
    if (slash == std::string::npos) throw ConfigError("cell id \"" + id + "\" is not family/strategy");
    return {parse_family(id.substr(0, slash)), FusionStrategy::parse(id.substr(slash + 1))};
  }
};

struct RawEntry {
  std::string cell;
  std::size_t fold = 0;
  std::size_t repeat = 0;
  int cls = 1;
  double dice = 0;
};

struct CellStatus {
  Cell cell;
  bool failed = false;
  std::string error;
};

struct ExperimentReport {
  std::vector<CellStatus> cells;  // config order
  std::vector<RawEntry> raw;      // cell order, then repeat, fold, class
  std::vector<int> classes{1};
  std::vector<std::string> class_names;
  nlohmann::json meta = nlohmann::json::object();

  bool any_failed() const {
    return std::any_of(cells.begin(), cells.end(), [](const CellStatus& c) { return c.failed; });
  }

  const CellStatus* find(const std::string& id) const {
    for (const auto& c : cells) {
      if (c.cell.id() == id) return &c;
    }
    return nullptr;
  }

  /// Mean over repeats of the mean over folds, for one class.
  std::optional<double> class_mean(const std::string& cell, int cls) const {
    std::map<std::size_t, std::pair<double, std::size_t>> per_repeat;
    for (const auto& e : raw) {
      if (e.cell != cell || e.cls != cls) continue;
      auto& [total, n] = per_repeat[e.repeat];
      total += e.dice;
      ++n;
    }
    if (per_repeat.empty()) return std::nullopt;
    double acc = 0;
    for (const auto& [r, tn] : per_repeat) acc += tn.first / static_cast<double>(tn.second);
    return acc / static_cast<double>(per_repeat.size());
  }

  /// Mean over scored classes of class_mean ("Ave. Dice").
  std::optional<double> cell_mean(const std::string& cell) const {
    double acc = 0;
    for (int c : classes) {
      auto m = class_mean(cell, c);
      if (!m) return std::nullopt;
      acc += *m;
    }
    return acc / static_cast<double>(classes.size());
  }

  /// Per-repeat mean over folds and classes.
  std::vector<double> repeat_means(const std::string& cell) const {
    std::map<std::size_t, std::pair<double, std::size_t>> per_repeat;
    for (const auto& e : raw) {
      if (e.cell != cell) continue;
      auto& [total, n] = per_repeat[e.repeat];
      total += e.dice;
      ++n;
    }
    std::vector<double> out;
    for (const auto& [r, tn] : per_repeat) out.push_back(tn.first / static_cast<double>(tn.second));
    return out;
  }

  std::string class_name(int cls) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == cls && i < class_names.size()) return class_names[i];
    }
    return "Class " + std::to_string(cls);
  }
};

inline std::string raw_csv(const ExperimentReport& report) {
  std::string out = "cell,fold,repeat,class,dice\n";
  char line[256];
  for (const auto& e : report.raw) {
    std::snprintf(line, sizeof(line), "%s,%zu,%zu,%d,%.17g\n", e.cell.c_str(), e.fold, e.repeat, e.cls, e.dice);
    out += line;
  }
  return out;
}

/// Rebuilds a report (cells in first-appearance order) from a raw CSV.
inline ExperimentReport report_from_raw_csv(const std::string& text) {
  ExperimentReport report;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "cell,fold,repeat,class,dice") {
    throw FormatError("raw results must start with the header cell,fold,repeat,class,dice", 0);
  }
  std::set<int> classes;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto parts = detail::split_list(line);
    if (parts.size() != 5) throw FormatError("raw results row needs 5 fields: " + line, offset);
    RawEntry e;
    try {
      e.cell = parts[0];
      e.fold = std::stoul(parts[1]);
      e.repeat = std::stoul(parts[2]);
      e.cls = std::stoi(parts[3]);
      e.dice = std::stod(parts[4]);
    } catch (const std::exception&) {
      throw FormatError("malformed raw results row: " + line, offset);
    }
    if (!report.find(e.cell)) report.cells.push_back({Cell::parse(e.cell), false, ""});
    classes.insert(e.cls);
    report.raw.push_back(std::move(e));
    offset += line.size() + 1;
  }
  if (!classes.empty()) report.classes.assign(classes.begin(), classes.end());
  return report;
}

enum class ReportFormat { kMarkdown, kCsv };
enum class TableStyle { kByBackbone, kByClass };

namespace detail {

inline std::string percent(std::optional<double> v) {
  if (!v) return "—";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v * 100.0);
  return buf;
}

inline std::string markdown_row(const std::vector<std::string>& cells) {
  std::string out = "|";
  for (const auto& c : cells) out += " " + c + " |";
  return out + "\n";
}

}  // namespace detail

/// Markdown or CSV table of cell means in percent (two decimals).
///
/// kByBackbone: rows = strategies, columns = backbone families.
/// kByClass:    rows = strategies (per family when several), columns = scored
///              classes followed by "Ave. Dice".
/// Failed or missing cells render as "—".
inline std::string render_report(const ExperimentReport& report, ReportFormat format,
                                 TableStyle style = TableStyle::kByBackbone) {
  std::vector<Family> families;
  std::vector<FusionStrategy> strategies;
  for (const auto& c : report.cells) {
    if (std::find(families.begin(), families.end(), c.cell.family) == families.end()) families.push_back(c.cell.family);
    if (std::find(strategies.begin(), strategies.end(), c.cell.strategy) == strategies.end()) {
      strategies.push_back(c.cell.strategy);
    }
  }
  auto value = [&](const std::string& id, std::optional<int> cls) -> std::optional<double> {
    const CellStatus* status = report.find(id);
    if (!status || status->failed) return std::nullopt;
    return cls ? report.class_mean(id, *cls) : report.cell_mean(id);
  };

  std::vector<std::string> header{"Strategy"};
  std::vector<std::vector<std::string>> rows;
  if (style == TableStyle::kByBackbone) {
    for (Family f : families) header.push_back(family_name(f));
    for (const auto& s : strategies) {
      std::vector<std::string> row{s.label()};
      for (Family f : families) row.push_back(detail::percent(value(Cell{f, s}.id(), std::nullopt)));
      rows.push_back(std::move(row));
    }
  } else {
    for (int c : report.classes) header.push_back(report.class_name(c));
    header.push_back("Ave. Dice");
    for (Family f : families) {
      for (const auto& s : strategies) {
        const std::string id = Cell{f, s}.id();
        if (!report.find(id)) continue;
        std::vector<std::string> row{families.size() > 1 ? s.label() + " (" + family_name(f) + ")" : s.label()};
        for (int c : report.classes) row.push_back(detail::percent(value(id, c)));
        row.push_back(detail::percent(value(id, std::nullopt)));
        rows.push_back(std::move(row));
      }
    }
  }

  std::string out;
  if (format == ReportFormat::kCsv) {
    auto join = [](const std::vector<std::string>& cells) {
      std::string line;
      for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
      return line + "\n";
    };
    out += join(header);
    for (const auto& r : rows) out += join(r);
    return out;
  }
  out += detail::markdown_row(header);
  out += "|" + std::string();
  for (std::size_t i = 0; i < header.size(); ++i) out += i == 0 ? " --- |" : " ---: |";
  out += "\n";
  for (const auto& r : rows) out += detail::markdown_row(r);
  return out;
}

/// Cells of a markdown table (header and separator rows skipped).
inline std::vector<std::vector<std::string>> parse_markdown_table(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] != '|') continue;
    ++index;
    if (index <= 2) continue;
    std::vector<std::string> cells = detail::split_list(line.substr(1, line.size() - 2), '|');
    rows.push_back(std::move(cells));
  }
  return rows;
}

/// Canonical JSON of everything that influences results; hashed into report metadata.
inline nlohmann::json config_fingerprint(const ExperimentConfig& c) {
  const auto& syn = c.dataset.synthetic;
  nlohmann::json j;
  j["dataset"] = {{"path", c.dataset.path},
                  {"seed", syn.seed},
                  {"volumes", syn.volumes},
                  {"dims", {syn.depth, syn.height, syn.width}},
                  {"noise", syn.noise_sigma},
                  {"polarity", syn.polarity},
                  {"lesion_count", {syn.lesions.min_count, syn.lesions.max_count}},
                  {"lesion_radius", {syn.lesions.min_radius, syn.lesions.max_radius}},
                  {"enhance", c.dataset.enhance}};
  j["model"] = c.model.to_json();
  const auto& t = c.train;
  j["train"] = {{"lr0", t.lr0},           {"decay_factor", t.decay_factor}, {"decay_every", t.decay_every},
                {"momentum", t.momentum}, {"epochs", t.epochs},             {"batch_size", t.batch_size},
                {"deep_weight", t.deep_weight}, {"seed", t.seed},           {"loss", static_cast<int>(t.loss)},
                {"max_steps", t.max_steps},     {"eval_every", t.eval_every}, {"dtype", native_dtype()}};
  j["experiment"] = {{"folds", c.folds}, {"repeats", c.repeats}, {"seed", c.seed}};
  return j;
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

/// Model spec of one cell for a dataset with `modalities` inputs.
inline ModelSpec cell_model_spec(const ExperimentConfig& config, const Cell& cell, std::size_t modalities) {
  ModelSpec spec = config.model;
  spec.encoder.family = cell.family;
  spec.modalities = modalities;
  spec.strategy = cell.strategy;
  spec.validate();
  return spec;
}

struct JobResult {
  std::vector<double> class_dice;
  bool failed = false;
  std::string error;
};

/// Trains one cell on the training part of `split` and scores volumetric Dice
/// (mean over validation volumes, per class).
inline JobResult run_job(const ExperimentConfig& config, const Cell& cell, const FoldSplit& split,
                         const std::vector<MultiModalVolume>& volumes) {
  JobResult out;
  try {
    std::vector<MultiModalVolume> train, val;
    for (auto id : split.training) train.push_back(volumes.at(id));
    for (auto id : split.validation) val.push_back(volumes.at(id));
    TrainConfig tc = config.train;
    tc.seed = job_seed(config.seed, cell.id(), split.fold, split.repeat);
    auto result = train_model(cell_model_spec(config, cell, volumes.at(0).num_modalities()), train, val, tc);
    out.class_dice = result.best_val_class_dice;
  } catch (const TrainingError& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

namespace detail {

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

/// Every cell x fold x repeat, aggregated. Raw entries are written to
/// <output_dir>/raw.csv (when set) before any aggregation happens.
inline ExperimentReport run_experiment(const ExperimentConfig& config, const std::vector<Cell>& cells,
                                       const std::vector<MultiModalVolume>& volumes) {
  if (volumes.empty()) throw ConfigError("empty dataset");
  const std::size_t modalities = volumes[0].num_modalities();
  config.validate(modalities);
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::size_t> ids(volumes.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<std::vector<FoldSplit>> splits;
  for (std::size_t r = 0; r < config.repeats; ++r) splits.push_back(kfold_split(ids, config.folds, split_seed(config.seed, r), r));

  struct Job {
    std::size_t cell, repeat, fold;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    cell_model_spec(config, cells[c], modalities);
    for (std::size_t r = 0; r < config.repeats; ++r) {
      for (std::size_t f = 0; f < config.folds; ++f) jobs.push_back({c, r, f});
    }
  }
  std::vector<JobResult> results(jobs.size());
  detail::parallel_for(jobs.size(), config.threads, [&](std::size_t i) {
    const Job& j = jobs[i];
    results[i] = run_job(config, cells[j.cell], splits[j.repeat][j.fold], volumes);
  });

  ExperimentReport report;
  report.classes = scored_classes(config.model.num_classes);
  report.class_names = config.class_names;
  for (const auto& cell : cells) report.cells.push_back({cell, false, ""});
  nlohmann::json seeds = nlohmann::json::object();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& j = jobs[i];
    CellStatus& status = report.cells[j.cell];
    const std::string id = cells[j.cell].id();
    seeds[id + "#" + std::to_string(j.repeat) + "." + std::to_string(j.fold)] =
        job_seed(config.seed, id, j.fold, j.repeat);
    if (results[i].failed) {
      if (!status.failed) status.error = results[i].error;
      status.failed = true;
      continue;
    }
    for (std::size_t k = 0; k < report.classes.size(); ++k) {
      report.raw.push_back({id, j.fold, j.repeat, report.classes[k], results[i].class_dice.at(k)});
    }
  }
  if (!config.output_dir.empty()) {
    std::filesystem::create_directories(config.output_dir);
    io::write_file((std::filesystem::path(config.output_dir) / "raw.csv").string(), raw_csv(report));
  }
  report.meta["seeds"] = seeds;
  report.meta["base_seed"] = config.seed;
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_fingerprint(config).dump())));
  report.meta["config_hash"] = hash;
  report.meta["wall_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

inline std::vector<Cell> config_cells(const ExperimentConfig& config) {
  std::vector<Cell> cells;
  for (Family f : config.families) {
    for (const auto& s : config.strategies) cells.push_back({f, s});
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Fusion comparison
// ---------------------------------------------------------------------------

struct ComparisonRow {
  Family family;
  FusionStrategy strategy;
  std::optional<double> mean_dice;
  std::vector<double> repeat_means;
};

struct ComparisonSummary {
  ExperimentReport report;
  std::vector<ComparisonRow> rows;  // per family: single, early, late, octopus, octopus+ds
  std::map<Family, std::size_t> best_single_modality;
  std::map<Family, std::vector<double>> selection_dice;  // fold 0 / repeat 0 val Dice per modality

  /// mean(a) - mean(b); nullopt when either is missing.
  std::optional<double> delta(std::size_t a, std::size_t b) const {
    if (!rows.at(a).mean_dice || !rows.at(b).mean_dice) return std::nullopt;
    return *rows[a].mean_dice - *rows[b].mean_dice;
  }
};

/// Runs Single(best modality), Early, Late, Octopus and Octopus + deep
/// supervision for every configured family under the same splits. The best
/// single modality is the one with the highest validation Dice on fold 0 of
/// repeat 0.
inline ComparisonSummary compare_fusion(const ExperimentConfig& config, const std::vector<MultiModalVolume>& volumes) {
  if (volumes.empty()) throw ConfigError("empty dataset");
  const std::size_t modalities = volumes[0].num_modalities();
  if (modalities < 2) throw ConfigError("fusion comparison needs at least two modalities");
  config.validate(modalities);

  ComparisonSummary summary;
  std::vector<std::size_t> ids(volumes.size());
  std::iota(ids.begin(), ids.end(), 0);
  const FoldSplit first = kfold_split(ids, config.folds, split_seed(config.seed, 0), 0).front();

  std::vector<Cell> cells;
  for (Family f : config.families) {
    std::vector<JobResult> trial(modalities);
    detail::parallel_for(modalities, config.threads, [&](std::size_t m) {
      trial[m] = run_job(config, Cell{f, FusionStrategy::single(m)}, first, volumes);
    });
    std::size_t best = 0;
    double best_score = -1;
    std::vector<double> scores;
    for (std::size_t m = 0; m < modalities; ++m) {
      double score = -1;
      if (!trial[m].failed) {
        score = 0;
        for (double d : trial[m].class_dice) score += d / static_cast<double>(trial[m].class_dice.size());
      }
      scores.push_back(score);
      if (score > best_score) {
        best_score = score;
        best = m;
      }
    }
    summary.best_single_modality[f] = best;
    summary.selection_dice[f] = scores;
    for (const auto& s : {FusionStrategy::single(best), FusionStrategy::early(), FusionStrategy::late(),
                          FusionStrategy::octopus(false), FusionStrategy::octopus(true)}) {
      cells.push_back({f, s});
    }
  }
  summary.report = run_experiment(config, cells, volumes);
  for (const auto& cell : cells) {
    const CellStatus* status = summary.report.find(cell.id());
    ComparisonRow row{cell.family, cell.strategy, std::nullopt, summary.report.repeat_means(cell.id())};
    if (status && !status->failed) row.mean_dice = summary.report.cell_mean(cell.id());
    summary.rows.push_back(std::move(row));
  }
  return summary;
}

inline std::string render_comparison(const ComparisonSummary& summary) {
  std::string out = render_report(summary.report, ReportFormat::kMarkdown, TableStyle::kByBackbone);
  out += "\nPairwise deltas (row - column, Dice points):\n\n";
  std::vector<std::string> header{"Strategy"};
  for (const auto& r : summary.rows) header.push_back(r.strategy.name() + " (" + family_name(r.family) + ")");
  out += detail::markdown_row(header);
  out += "| --- |";
  for (std::size_t i = 0; i < summary.rows.size(); ++i) out += " ---: |";
  out += "\n";
  for (std::size_t a = 0; a < summary.rows.size(); ++a) {
    std::vector<std::string> row{summary.rows[a].strategy.name() + " (" + family_name(summary.rows[a].family) + ")"};
    for (std::size_t b = 0; b < summary.rows.size(); ++b) row.push_back(detail::percent(summary.delta(a, b)));
    out += detail::markdown_row(row);
  }
  return out;
}

}  // namespace octofuse
