#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnft/arch.hpp"
#include "bnft/checkpoint.hpp"
#include "bnft/config.hpp"
#include "bnft/data.hpp"
#include "bnft/errors.hpp"
#include "bnft/metrics.hpp"
#include "bnft/model.hpp"
#include "bnft/ops.hpp"
#include "bnft/optim.hpp"
#include "bnft/strategies.hpp"

namespace bnft {

namespace fs = std::filesystem;

struct TrainOptions {
  std::size_t batch_size = 32;
  std::size_t max_epochs_per_phase = 40;
  bool augment_enabled = true;
  AugmentConfig augment;
  AdamConfig adam;
  ScheduleConfig schedule;
};

inline TrainOptions train_options(const ExperimentConfig& c) {
  return {c.batch_size, c.max_epochs_per_phase, c.augment_enabled, c.augment, c.adam, c.schedule};
}

struct EpochRecord {
  std::size_t phase = 0;        // 1-based
  std::size_t epoch = 0;        // 1-based, counted across phases
  std::size_t phase_epoch = 0;  // 1-based within the phase
  double lr = 0.0;              // learning rate used during the epoch
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t trainable_params = 0;
  bool snapshot = false;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<std::size_t> phase_epochs;
  std::vector<std::size_t> phase_trainable;
  double best_val_loss = 0.0;
  BestCheckpointTracker<float>::Tag best_tag;
};

template <class T>
Tensor<T> loss_on(Model<T>& model, const Batch<T>& batch, Rng* dropout_rng) {
  const auto logits = model.logits(batch.images, dropout_rng);
  return model.label_kind() == LabelKind::Categorical ? softmax_cross_entropy(logits, batch.labels)
                                                      : sigmoid_bce(logits, batch.labels);
}

// Mean loss over the dataset in evaluation configuration.
template <class T>
double dataset_loss(Model<T>& model, const Dataset& data, std::size_t batch_size = 64) {
  if (data.size() == 0) throw DataError("cannot compute a loss on an empty dataset");
  InferenceScope<T> scope(model);
  double total = 0.0;
  for (std::size_t pos = 0; pos < data.size(); pos += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - pos));
    std::iota(idx.begin(), idx.end(), pos);
    const auto loss = loss_on(model, make_batch<T>(data, idx), nullptr);
    total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

// Runs the phases in order. Each phase starts with fresh Adam moments and a
// fresh schedule; the best-validation snapshot is tracked across all phases
// and restored once at the end. Every random draw comes from streams derived
// from `seed`.
template <class T>
TrainResult train_phases(Model<T>& model, const std::vector<Phase>& phases, const Dataset& train, const Dataset& val,
                         const TrainOptions& opt, std::uint64_t seed,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (phases.empty()) throw ConfigError("a strategy needs at least one phase");
  if (train.size() == 0 || val.size() == 0) throw DataError("training and validation sets must be non-empty");
  const Rng root(seed);
  const BatchIterator batches(train.size(), opt.batch_size, root.derive(fnv1a("shuffle")).seed());
  Rng augment_rng = root.derive(fnv1a("augment"));
  Rng dropout_rng = root.derive(fnv1a("dropout"));
  BestCheckpointTracker<T> tracker;
  TrainResult result;
  std::size_t global_epoch = 0;

  for (std::size_t pi = 0; pi < phases.size(); ++pi) {
    const Phase& phase = phases[pi];
    if (!(phase.initial_lr > 0.0)) throw ConfigError("phase learning rate must be positive");
    if (phase.stop_rule.value == 0) throw ConfigError("phase stop rule needs a positive value");
    apply_phase(model, phase);
    const auto params = model.parameters();
    std::vector<Parameter<T>*> trainable;
    for (auto* p : params)
      if (p->trainable()) trainable.push_back(p);
    const std::size_t n_trainable = count_scalars(trainable);
    AdamState<T> adam;
    PlateauSchedule schedule(phase.initial_lr, opt.schedule.decay_factor, opt.schedule.plateau_patience,
                             opt.schedule.min_delta);
    const std::size_t patience = phase.stop_rule.kind == StopRule::Kind::Plateau
                                     ? opt.schedule.early_stop_patience.value_or(phase.stop_rule.value)
                                     : phase.stop_rule.value;
    EarlyStopper stopper(patience, opt.schedule.min_delta);
    const std::size_t limit = phase.stop_rule.kind == StopRule::Kind::Epochs
                                  ? std::min(phase.stop_rule.value, opt.max_epochs_per_phase)
                                  : opt.max_epochs_per_phase;

    std::size_t phase_epoch = 0;
    while (phase_epoch < limit) {
      ++phase_epoch;
      const double lr = schedule.lr();
      double train_total = 0.0;
      model.head_dropout().set_active(true);
      for (const auto& idx : batches.epoch(global_epoch)) {
        const auto batch =
            make_batch<T>(train, idx, opt.augment_enabled ? &opt.augment : nullptr, &augment_rng);
        for (auto* p : trainable) p->tensor().zero_grad();
        const auto loss = loss_on(model, batch, &dropout_rng);
        train_total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("training loss is not finite");
        if (loss.requires_grad()) loss.backward();
        adam_step(adam, trainable, lr, opt.adam);
      }
      model.head_dropout().set_active(false);
      ++global_epoch;
      const double val_loss = dataset_loss(model, val);
      const auto end = epoch_end(schedule, stopper, tracker, model, val_loss, {pi + 1, global_epoch});
      EpochRecord rec{pi + 1, global_epoch, phase_epoch, lr, train_total / static_cast<double>(train.size()),
                      val_loss, n_trainable, end.snapshotted};
      result.epochs.push_back(rec);
      if (on_epoch) on_epoch(rec);
      if (phase.stop_rule.kind == StopRule::Kind::Plateau && end.stop) break;
    }
    for (auto* p : params) p->tensor().zero_grad();
    result.phase_epochs.push_back(phase_epoch);
    result.phase_trainable.push_back(n_trainable);
  }
  tracker.restore(model);
  result.best_val_loss = tracker.best_loss();
  result.best_tag = {tracker.tag().phase, tracker.tag().epoch};
  return result;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_epochs_csv(std::ostream& out, const std::vector<EpochRecord>& rows) {
  out << "phase,epoch,phase_epoch,lr,train_loss,val_loss,trainable_params,best\n";
  for (const auto& r : rows) {
    out << r.phase << ',' << r.epoch << ',' << r.phase_epoch << ',' << format_real(r.lr) << ','
        << format_real(r.train_loss) << ',' << format_real(r.val_loss) << ',' << r.trainable_params << ','
        << (r.snapshot ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Architecture lookup and pseudo-pretraining

inline ArchSpec resolve_architecture(const std::string& name, const Shape& input_shape) {
  if (name == "MiniNet" || name == "MiniNet-Residual") {
    if (input_shape.size() != 3 || input_shape[0] != input_shape[1]) {
      throw SpecError("MiniNet needs square inputs, got " + to_string(input_shape));
    }
    MiniNetOptions o;
    o.image_size = input_shape[0];
    o.input_channels = input_shape[2];
    o.residual = name == "MiniNet-Residual";
    return mininet_spec(o);
  }
  if (!fs::exists(name)) throw SpecError("unknown architecture '" + name + "' (not MiniNet and not a spec file)");
  std::ifstream in(name);
  ArchSpec spec;
  try {
    spec = arch_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("architecture file '" + name + "': " + e.what());
  }
  if (spec.input_shape != input_shape) {
    throw SpecError("architecture '" + spec.name + "' expects input " + to_string(spec.input_shape) +
                    " but the dataset provides " + to_string(input_shape));
  }
  return spec;
}

struct PretrainOptions {
  TrainOptions train;
  double lr = 1e-3;
  double min_accuracy = 0.8;  // validation accuracy floor
  BuildOptions build;
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Fraction of samples whose arg-max output matches the arg-max label.
template <class T>
double accuracy(Model<T>& model, const Dataset& data) {
  const auto probs = predict(model, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& y = data.labels[i];
    const auto truth = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    hits += argmax(probs[i]) == truth;
  }
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

// Trains backbone + temporary head on a source task with every parameter
// trainable and batch norm in training mode, restores the best epoch, checks
// the accuracy floor, and returns a backbone-only checkpoint.
inline Checkpoint pseudo_pretrain(const ArchSpec& spec, const Dataset& train, const Dataset& val, std::uint64_t seed,
                                  const PretrainOptions& opt = {},
                                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  auto model = build_model<float>(spec, train.label_names.size(), train.label_kind, seed, opt.build);
  const Phase phase{ParamSelector::All, true, BnMode::Training, opt.lr, StopRule::plateau(6)};
  const auto result = train_phases(model, {phase}, train, val, opt.train, seed, on_epoch);
  const double acc = accuracy(model, val);
  if (acc < opt.min_accuracy) {
    throw TrainingError("pseudo-pretraining reached validation accuracy " + format_number(acc, 4) +
                        ", below the floor " + format_number(opt.min_accuracy, 4) + " within " +
                        std::to_string(result.epochs.size()) + " epochs");
  }
  CheckpointMeta meta;
  meta.seed = seed;
  meta.phase = result.best_tag.phase;
  meta.epoch = result.best_tag.epoch;
  meta.best_val_loss = result.best_val_loss;
  meta.extra = {{"kind", "pretrained-backbone"}, {"val_accuracy", acc}};
  auto ckpt = make_checkpoint(model, meta);
  std::erase_if(ckpt.arrays, [](const auto& a) { return a.name.rfind(kBackbonePrefix, 0) != 0; });
  return ckpt;
}

// ---------------------------------------------------------------------------
// Experiment runner

struct SplitData {
  DatasetManifest manifest;
  Dataset train, val, test;
};

inline SplitData prepare_data(const DatasetSource& source, const SplitConfig& split_cfg, const fs::path& synthetic_dir) {
  SplitData d;
  d.manifest = source.synthetic ? make_synthetic(*source.synthetic, synthetic_dir) : load_manifest(source.manifest);
  const auto parts = split(d.manifest, split_cfg.fractions, split_cfg.seed, split_cfg.group_aware);
  d.train = load_dataset(d.manifest, parts.at(0));
  d.val = load_dataset(d.manifest, parts.at(1));
  d.test = load_dataset(d.manifest, parts.at(2));
  return d;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  TrainResult train;
  EvalReport report;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string result_csv_header() { return "dataset,strategy,architecture,seed,metric,value\n"; }

// Trains and evaluates one seed; writes seed_<s>/{epochs.csv,result.csv,best.ckpt}.
inline SeedOutcome run_seed(const ExperimentConfig& cfg, const ArchSpec& spec, const SplitData& data,
                            std::uint64_t seed, const fs::path& run_dir) {
  const Strategy strategy = make_strategy(cfg.strategy);
  BuildOptions build;
  build.batchnorm = cfg.batchnorm;
  build.head_dropout = cfg.head_dropout;
  auto model = build_model<float>(spec, data.manifest.num_labels(), data.manifest.label_kind, seed, build);
  if (strategy.init == InitKind::Pretrained) apply_checkpoint(model, load_checkpoint(cfg.pretrained), true);

  const fs::path dir = run_dir / ("seed_" + std::to_string(seed));
  fs::create_directories(dir);
  SeedOutcome out;
  out.seed = seed;
  out.train = train_phases(model, strategy.phases, data.train, data.val, train_options(cfg), seed);
  out.report = evaluate(model, data.test);

  std::ostringstream epochs;
  write_epochs_csv(epochs, out.train.epochs);
  write_text(dir / "epochs.csv", epochs.str());
  std::ostringstream result;
  write_report_csv(result, out.report);
  result << "macro,," << format_number(out.report.macro_auc()) << ",,\n";
  write_text(dir / "result.csv", result.str());
  CheckpointMeta meta;
  meta.seed = seed;
  meta.phase = out.train.best_tag.phase;
  meta.epoch = out.train.best_tag.epoch;
  meta.best_val_loss = out.train.best_val_loss;
  meta.extra = {{"strategy", cfg.strategy}};
  save_checkpoint(dir / "best.ckpt", make_checkpoint(model, meta));
  return out;
}

// Runs every seed of the configuration. The run directory holds
// config.copy, status, result.csv and one seed_<s>/ directory per seed.
inline fs::path run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const fs::path run_dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(run_dir);
  write_text(run_dir / "status", "running\n");
  write_text(run_dir / "config.copy", to_json(cfg).dump(2) + "\n");
  try {
    const auto data = prepare_data(cfg.dataset, cfg.split, run_dir / "data");
    const auto spec = resolve_architecture(cfg.architecture, data.manifest.shape);
    std::string rows = result_csv_header();
    for (auto seed : cfg.seeds) {
      const auto outcome = run_seed(cfg, spec, data, seed, run_dir);
      rows += cfg.dataset.display_name() + ',' + cfg.strategy + ',' + spec.name + ',' + std::to_string(seed) +
              ",macro_auc," + format_number(outcome.report.macro_auc()) + '\n';
      if (log) {
        *log << "seed " << seed << ": " << outcome.train.epochs.size() << " epochs, best val loss "
             << format_number(outcome.train.best_val_loss, 5) << ", test macro AUC "
             << format_number(outcome.report.macro_auc(), 4) << '\n';
        for (const auto& w : outcome.report.warnings) *log << "warning: " << w << '\n';
      }
    }
    write_text(run_dir / "result.csv", rows);
    write_text(run_dir / "status", "ok\n");
  } catch (const std::exception& e) {
    write_text(run_dir / "status", std::string("failed: ") + e.what() + "\n");
    throw;
  }
  return run_dir;
}

// ---------------------------------------------------------------------------
// Summaries

struct ResultRow {
  std::string dataset, strategy, architecture, metric;
  std::uint64_t seed = 0;
  double value = 0.0;
};

inline std::vector<ResultRow> read_results(const fs::path& run_dir) {
  const fs::path status = run_dir / "status";
  if (!fs::exists(status) || read_text(status).rfind("ok", 0) != 0) {
    throw Error("run '" + run_dir.string() + "' has not completed successfully");
  }
  std::istringstream in(read_text(run_dir / "result.csv"));
  std::string line;
  std::getline(in, line);
  if (line + "\n" != result_csv_header()) throw DataError("'" + run_dir.string() + "/result.csv' has an unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 6) throw DataError("malformed result row '" + line + "'");
    rows.push_back({f[0], f[1], f[2], f[4], std::stoull(f[3]), std::stod(f[5])});
  }
  return rows;
}

// Rows are datasets, columns strategy/architecture ordered by strategy name,
// cells "mean (std)" of the per-seed values in percent.
inline std::string summarize(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw Error("summarize needs at least one run directory");
  std::vector<ResultRow> rows;
  for (const auto& d : run_dirs) {
    auto r = read_results(d);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw DataError("no result rows found");
  for (const auto& r : rows) {
    if (r.metric != rows.front().metric) {
      throw DataError("cannot mix metrics '" + rows.front().metric + "' and '" + r.metric + "' in one grid");
    }
  }
  using Column = std::pair<std::string, std::string>;
  std::map<std::string, std::map<Column, std::vector<double>>> cells;
  std::set<Column> columns;
  for (const auto& r : rows) {
    cells[r.dataset][{r.strategy, r.architecture}].push_back(r.value);
    columns.insert({r.strategy, r.architecture});
  }
  std::ostringstream out;
  out << "dataset";
  for (const auto& c : columns) out << ',' << c.first << '/' << c.second;
  out << '\n';
  for (const auto& [dataset, by_col] : cells) {
    out << dataset;
    for (const auto& c : columns) {
      out << ',';
      if (auto it = by_col.find(c); it != by_col.end()) out << format_cell(mean_std(it->second));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace bnft
