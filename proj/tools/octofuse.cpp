// octofuse: dataset generation, training, evaluation and fusion comparison.
//
//   octofuse generate-data --config desk.ini --out data/desk
//   octofuse train   --config desk.ini --strategy octopus --out runs/octopus
//   octofuse eval    --checkpoint runs/octopus/model.ckpt --data data/desk
//   octofuse compare --config desk.ini
//   octofuse experiment --config desk.ini
//   octofuse report  --raw results/desk/raw.csv --style class
//
// Exit codes: 0 success, 1 error, 2 when any experiment cell failed.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>

#include "octofuse/harness.hpp"

namespace fs = std::filesystem;
using namespace octofuse;

namespace {

constexpr int kFailedCell = 2;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file(path.string(), text);
}

void print_dice(const std::string& label, double value) { std::printf("%s %.4f\n", label.c_str(), value); }

/// Writes raw.csv (already done by the harness), report.md and meta.json.
void persist_report(const ExperimentReport& report, const std::string& dir, const std::string& markdown) {
  if (dir.empty()) return;
  write_text(fs::path(dir) / "report.md", markdown);
  write_text(fs::path(dir) / "meta.json", report.meta.dump(2) + "\n");
}

void print_failures(const ExperimentReport& report) {
  for (const auto& c : report.cells) {
    if (c.failed) std::cerr << "cell " << c.cell.id() << " failed: " << c.error << "\n";
  }
}

int generate_data(const std::string& config_path, std::string out) {
  const ExperimentConfig config = load_experiment_config(config_path);
  if (out.empty()) out = config.dataset.path;
  if (out.empty()) throw ConfigError("no output directory: pass --out or set dataset.path");
  const auto volumes = generate_synthetic(config.dataset.synthetic);
  write_dataset(out, volumes);
  std::printf("wrote %zu volumes (%zu modalities, %zux%zux%zu) to %s\n", volumes.size(),
              volumes[0].num_modalities(), volumes[0].depth, volumes[0].height, volumes[0].width, out.c_str());
  return 0;
}

int train(const std::string& config_path, const std::string& strategy, const std::string& family,
          std::size_t fold, const std::string& out) {
  const ExperimentConfig config = load_experiment_config(config_path);
  const auto volumes = load_dataset(config.dataset);
  const Cell cell{parse_family(family), FusionStrategy::parse(strategy)};
  const ModelSpec spec = cell_model_spec(config, cell, volumes.at(0).num_modalities());

  std::vector<std::size_t> ids(volumes.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto splits = kfold_split(ids, config.folds, split_seed(config.seed, 0), 0);
  if (fold >= splits.size()) throw ConfigError("fold " + std::to_string(fold) + " out of range");
  std::vector<MultiModalVolume> train_set, val_set;
  for (auto id : splits[fold].training) train_set.push_back(volumes[id]);
  for (auto id : splits[fold].validation) val_set.push_back(volumes[id]);

  TrainConfig tc = config.train;
  tc.seed = job_seed(config.seed, cell.id(), fold, 0);
  std::printf("training %s on %zu volumes, validating on %zu\n", cell.id().c_str(), train_set.size(), val_set.size());
  const TrainResult result = train_model(spec, train_set, val_set, tc);

  fs::create_directories(out);
  write_checkpoint((fs::path(out) / "model.ckpt").string(),
                   result.model.to_checkpoint({{"cell", cell.id()}, {"fold", fold}, {"train_seed", tc.seed}}));
  write_loss_csv((fs::path(out) / "loss.csv").string(), result.curve);
  std::printf("%zu steps, final loss %.4f\n", result.steps, result.curve.empty() ? 0.0 : result.curve.back().loss);
  print_dice("best validation dice", result.best_val_dice);
  std::printf("wrote %s/model.ckpt and %s/loss.csv\n", out.c_str(), out.c_str());
  return 0;
}

int eval(const std::string& checkpoint, const std::string& data, std::size_t batch_size) {
  FusionModel model = FusionModel::from_checkpoint(read_checkpoint(checkpoint));
  const auto volumes = read_dataset(data);
  const auto per_volume = evaluate_volumes(model, volumes, batch_size);
  const auto classes = scored_classes(model.spec().num_classes);
  for (std::size_t v = 0; v < per_volume.size(); ++v) {
    std::printf("volume %zu:", v);
    for (std::size_t k = 0; k < classes.size(); ++k) std::printf(" class %d %.4f", classes[k], per_volume[v][k]);
    std::printf("\n");
  }
  print_dice("mean dice", mean_dice(per_volume));
  return 0;
}

int compare(const std::string& config_path, const std::string& out) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (!out.empty()) config.output_dir = out;
  const auto volumes = load_dataset(config.dataset);
  const ComparisonSummary summary = compare_fusion(config, volumes);
  const std::string text = render_comparison(summary);
  std::cout << text;
  for (const auto& [family, m] : summary.best_single_modality) {
    std::printf("\nbest single modality (%s): m%zu\n", family_name(family).c_str(), m);
  }
  persist_report(summary.report, config.output_dir, text);
  print_failures(summary.report);
  return summary.report.any_failed() ? kFailedCell : 0;
}

int experiment(const std::string& config_path, const std::string& out, TableStyle style) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (!out.empty()) config.output_dir = out;
  if (config.strategies.empty()) throw ConfigError("experiment.strategies is empty");
  const auto volumes = load_dataset(config.dataset);
  const ExperimentReport report = run_experiment(config, config_cells(config), volumes);
  const std::string text = render_report(report, ReportFormat::kMarkdown, style);
  std::cout << text;
  persist_report(report, config.output_dir, text);
  print_failures(report);
  return report.any_failed() ? kFailedCell : 0;
}

int report(const std::string& raw, const std::string& format, TableStyle style, const std::string& class_names) {
  ExperimentReport r = report_from_raw_csv(io::read_file(raw));
  r.class_names = detail::split_list(class_names);
  std::cout << render_report(r, format == "csv" ? ReportFormat::kCsv : ReportFormat::kMarkdown, style);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal fusion segmentation: data, training and experiments"};
  app.require_subcommand(1);

  std::string config, out, strategy = "octopus", family = "densenet", checkpoint, data, raw, format = "markdown",
                           style_name = "backbone", class_names;
  std::size_t fold = 0, batch_size = 8;
  const std::map<std::string, TableStyle> styles{{"backbone", TableStyle::kByBackbone},
                                                 {"class", TableStyle::kByClass}};

  auto* gen = app.add_subcommand("generate-data", "Generate the synthetic dataset named by a config");
  gen->add_option("-c,--config", config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", out, "Output directory (defaults to dataset.path)");

  auto* tr = app.add_subcommand("train", "Train one model on one fold and save a checkpoint");
  tr->add_option("-c,--config", config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  tr->add_option("-s,--strategy", strategy, "single:<m>, early, late, octopus or octopus+ds")->capture_default_str();
  tr->add_option("-f,--family", family, "vgg, resnet or densenet")->capture_default_str();
  tr->add_option("--fold", fold, "Validation fold of repeat 0")->capture_default_str();
  tr->add_option("-o,--out", out, "Output directory for model.ckpt and loss.csv")->required();

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset directory");
  ev->add_option("-k,--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("-d,--data", data, "Directory of .ommv volumes")->required()->check(CLI::ExistingDirectory);
  ev->add_option("-b,--batch-size", batch_size, "Slices per forward pass")->capture_default_str();

  auto* cmp = app.add_subcommand("compare", "Single (best modality), early, late and octopus fusion side by side");
  cmp->add_option("-c,--config", config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  cmp->add_option("-o,--out", out, "Results directory (overrides experiment.output)");

  auto* exp = app.add_subcommand("experiment", "Cross-validate the cells listed in the config");
  exp->add_option("-c,--config", config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  exp->add_option("-o,--out", out, "Results directory (overrides experiment.output)");
  exp->add_option("--style", style_name, "Table layout: backbone or class")->capture_default_str()->check(CLI::IsMember({"backbone", "class"}));

  auto* rep = app.add_subcommand("report", "Render a table from a raw results CSV");
  rep->add_option("-r,--raw", raw, "raw.csv written by compare or experiment")->required()->check(CLI::ExistingFile);
  rep->add_option("--format", format, "markdown or csv")->capture_default_str()->check(CLI::IsMember({"markdown", "csv"}));
  rep->add_option("--style", style_name, "Table layout: backbone or class")->capture_default_str()->check(CLI::IsMember({"backbone", "class"}));
  rep->add_option("--class-names", class_names, "Comma-separated names for the scored classes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return generate_data(config, out);
    if (tr->parsed()) return train(config, strategy, family, fold, out);
    if (ev->parsed()) return eval(checkpoint, data, batch_size);
    if (cmp->parsed()) return compare(config, out);
    if (exp->parsed()) return experiment(config, out, styles.at(style_name));
    if (rep->parsed()) return report(raw, format, styles.at(style_name), class_names);
  } catch (const std::exception& e) {
    std::cerr << "octofuse: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
