#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnft/data.hpp"
#include "bnft/errors.hpp"
#include "bnft/layers.hpp"
#include "bnft/optim.hpp"
#include "bnft/strategies.hpp"
#include "bnft/synthetic.hpp"

namespace bnft {

inline constexpr const char* kOutputRootEnv = "BNFT_OUTPUT_ROOT";

struct ScheduleConfig {
  double decay_factor = 5.0;
  std::size_t plateau_patience = 1;
  double min_delta = 1e-4;
  // Overrides the patience of every Plateau(n) stop rule when set.
  std::optional<std::size_t> early_stop_patience;
};

struct DatasetSource {
  std::filesystem::path manifest;       // used when synthetic is empty
  std::optional<SyntheticSpec> synthetic;

  std::string display_name() const {
    if (synthetic) return synthetic->task;
    const auto p = std::filesystem::is_directory(manifest) ? manifest : manifest.parent_path();
    return p.filename().string();
  }
};

struct SplitConfig {
  std::vector<double> fractions = {0.7, 0.15, 0.15};
  std::uint64_t seed = 0;
  bool group_aware = false;
};

struct ExperimentConfig {
  DatasetSource dataset;
  SplitConfig split;
  std::string architecture = "MiniNet";  // MiniNet, MiniNet-Residual, or a spec JSON path
  std::string strategy = "FC";
  std::filesystem::path pretrained;     // backbone checkpoint; unused by Random-init strategies
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t batch_size = 32;
  std::size_t max_epochs_per_phase = 40;
  BatchNormOptions batchnorm;
  AdamConfig adam;
  ScheduleConfig schedule;
  bool augment_enabled = true;
  AugmentConfig augment;
  double head_dropout = 0.5;
  std::filesystem::path output_dir = "runs/experiment";

  void validate() const {
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs_per_phase == 0) throw ConfigError("max_epochs_per_phase must be positive");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("head_dropout must lie in [0, 1)");
    if (!(batchnorm.momentum > 0.0 && batchnorm.momentum < 1.0)) throw ConfigError("batchnorm.momentum must lie in (0, 1)");
    if (!(batchnorm.epsilon >= 0.0)) throw ConfigError("batchnorm.epsilon must be non-negative");
    if (!(schedule.decay_factor > 1.0)) throw ConfigError("schedule.decay_factor must exceed 1");
    if (schedule.plateau_patience == 0) throw ConfigError("schedule.plateau_patience must be positive");
    if (schedule.early_stop_patience && *schedule.early_stop_patience == 0) {
      throw ConfigError("schedule.early_stop_patience must be positive");
    }
    if (split.fractions.size() != 3) throw ConfigError("split.fractions must list train, validation and test");
    augment.validate();
    const auto s = make_strategy(strategy);
    if (s.init == InitKind::Pretrained && pretrained.empty()) {
      throw ConfigError("strategy '" + strategy + "' starts from pretrained weights; set 'pretrained'");
    }
    if (!dataset.synthetic && dataset.manifest.empty()) throw ConfigError("dataset needs 'manifest' or 'synthetic'");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

}  // namespace detail

inline std::string to_string(BnDenominator d) {
  return d == BnDenominator::StdPlusEpsilon ? "std+eps" : "sqrt(var+eps)";
}

inline BnDenominator parse_denominator(const std::string& s) {
  if (s == "std+eps") return BnDenominator::StdPlusEpsilon;
  if (s == "sqrt(var+eps)") return BnDenominator::SqrtVarPlusEpsilon;
  throw ConfigError("unknown batch-norm denominator '" + s + "' (use std+eps or sqrt(var+eps))");
}

// Relative paths are resolved against `base` (the config file's directory).
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  using detail::check_keys;
  using detail::read;
  check_keys(j,
             {"dataset", "split", "architecture", "strategy", "pretrained", "seeds", "batch_size",
              "max_epochs_per_phase", "batchnorm", "adam", "schedule", "augment", "head_dropout", "output_dir"},
             "config");
  ExperimentConfig c;
  if (!j.contains("dataset")) throw ConfigError("config needs a 'dataset' section");
  {
    const auto& d = j.at("dataset");
    check_keys(d, {"manifest", "synthetic", "samples", "image_size", "seed"}, "dataset");
    if (d.contains("synthetic") == d.contains("manifest")) {
      throw ConfigError("dataset needs exactly one of 'manifest' or 'synthetic'");
    }
    if (d.contains("manifest")) {
      if (d.contains("samples") || d.contains("image_size") || d.contains("seed")) {
        throw ConfigError("dataset.samples/image_size/seed only apply to synthetic datasets");
      }
      c.dataset.manifest = detail::resolve(base, d.at("manifest").get<std::string>());
    } else {
      SyntheticSpec s;
      read(d, "synthetic", s.task, "dataset");
      read(d, "samples", s.samples, "dataset");
      read(d, "image_size", s.image_size, "dataset");
      read(d, "seed", s.seed, "dataset");
      bool known = false;
      for (const auto& n : synthetic_task_names()) known = known || n == s.task;
      if (!known) throw ConfigError("unknown synthetic task '" + s.task + "'");
      c.dataset.synthetic = s;
    }
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    check_keys(s, {"fractions", "seed", "group_aware"}, "split");
    read(s, "fractions", c.split.fractions, "split");
    read(s, "seed", c.split.seed, "split");
    read(s, "group_aware", c.split.group_aware, "split");
  }
  read(j, "architecture", c.architecture, "config");
  if (c.architecture.ends_with(".json")) c.architecture = detail::resolve(base, c.architecture).string();
  read(j, "strategy", c.strategy, "config");
  if (j.contains("pretrained")) c.pretrained = detail::resolve(base, j.at("pretrained").get<std::string>());
  read(j, "seeds", c.seeds, "config");
  read(j, "batch_size", c.batch_size, "config");
  read(j, "max_epochs_per_phase", c.max_epochs_per_phase, "config");
  if (j.contains("batchnorm")) {
    const auto& b = j.at("batchnorm");
    check_keys(b, {"momentum", "epsilon", "denominator"}, "batchnorm");
    read(b, "momentum", c.batchnorm.momentum, "batchnorm");
    read(b, "epsilon", c.batchnorm.epsilon, "batchnorm");
    if (b.contains("denominator")) c.batchnorm.denominator = parse_denominator(b.at("denominator").get<std::string>());
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    check_keys(a, {"beta1", "beta2", "epsilon"}, "adam");
    read(a, "beta1", c.adam.beta1, "adam");
    read(a, "beta2", c.adam.beta2, "adam");
    read(a, "epsilon", c.adam.epsilon, "adam");
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, {"decay_factor", "plateau_patience", "min_delta", "early_stop_patience"}, "schedule");
    read(s, "decay_factor", c.schedule.decay_factor, "schedule");
    read(s, "plateau_patience", c.schedule.plateau_patience, "schedule");
    read(s, "min_delta", c.schedule.min_delta, "schedule");
    if (s.contains("early_stop_patience")) {
      std::size_t p = 0;
      read(s, "early_stop_patience", p, "schedule");
      c.schedule.early_stop_patience = p;
    }
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    check_keys(a, {"enabled", "max_translate_frac", "max_zoom_frac", "hflip", "vflip"}, "augment");
    read(a, "enabled", c.augment_enabled, "augment");
    read(a, "max_translate_frac", c.augment.max_translate_frac, "augment");
    read(a, "max_zoom_frac", c.augment.max_zoom_frac, "augment");
    read(a, "hflip", c.augment.hflip, "augment");
    read(a, "vflip", c.augment.vflip, "augment");
  }
  read(j, "head_dropout", c.head_dropout, "config");
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  if (c.dataset.synthetic) {
    const auto& s = *c.dataset.synthetic;
    j["dataset"] = {{"synthetic", s.task}, {"samples", s.samples}, {"image_size", s.image_size}, {"seed", s.seed}};
  } else {
    j["dataset"] = {{"manifest", c.dataset.manifest.string()}};
  }
  j["split"] = {{"fractions", c.split.fractions}, {"seed", c.split.seed}, {"group_aware", c.split.group_aware}};
  j["architecture"] = c.architecture;
  j["strategy"] = c.strategy;
  if (!c.pretrained.empty()) j["pretrained"] = c.pretrained.string();
  j["seeds"] = c.seeds;
  j["batch_size"] = c.batch_size;
  j["max_epochs_per_phase"] = c.max_epochs_per_phase;
  j["batchnorm"] = {{"momentum", c.batchnorm.momentum},
                    {"epsilon", c.batchnorm.epsilon},
                    {"denominator", to_string(c.batchnorm.denominator)}};
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  j["schedule"] = {{"decay_factor", c.schedule.decay_factor},
                   {"plateau_patience", c.schedule.plateau_patience},
                   {"min_delta", c.schedule.min_delta}};
  if (c.schedule.early_stop_patience) j["schedule"]["early_stop_patience"] = *c.schedule.early_stop_patience;
  j["augment"] = {{"enabled", c.augment_enabled},
                  {"max_translate_frac", c.augment.max_translate_frac},
                  {"max_zoom_frac", c.augment.max_zoom_frac},
                  {"hflip", c.augment.hflip},
                  {"vflip", c.augment.vflip}};
  j["head_dropout"] = c.head_dropout;
  j["output_dir"] = c.output_dir.string();
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// Relative output directories live under $BNFT_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output_dir(const std::filesystem::path& dir) {
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / dir;
  return dir;
}

}  // namespace bnft
