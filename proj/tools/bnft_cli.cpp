#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bnft/bnft.hpp"

namespace {

using namespace bnft;

std::string with_commas(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

struct RunFlags {
  std::string config;
  std::string manifest, synthetic;
  std::size_t samples = 0, image_size = 0;
  std::string strategy, arch, pretrained, output;
  std::vector<std::uint64_t> seeds;
  std::size_t batch_size = 0, max_epochs = 0, early_stop = 0;
  std::optional<double> momentum, bn_epsilon, min_delta;
  std::string denominator;
  bool no_augment = false;
};

ExperimentConfig config_from_flags(const RunFlags& f) {
  ExperimentConfig c;
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config '" + f.config + "'");
    j = nlohmann::json::parse(in, nullptr, true, true);
  }
  if (!f.manifest.empty()) j["dataset"] = {{"manifest", std::filesystem::absolute(f.manifest).string()}};
  if (!f.synthetic.empty()) {
    j["dataset"] = {{"synthetic", f.synthetic}};
    if (f.samples) j["dataset"]["samples"] = f.samples;
    if (f.image_size) j["dataset"]["image_size"] = f.image_size;
  }
  if (!f.strategy.empty()) j["strategy"] = f.strategy;
  if (!f.arch.empty()) j["architecture"] = f.arch;
  if (!f.pretrained.empty()) j["pretrained"] = std::filesystem::absolute(f.pretrained).string();
  if (!f.output.empty()) j["output_dir"] = f.output;
  if (!f.seeds.empty()) j["seeds"] = f.seeds;
  if (f.batch_size) j["batch_size"] = f.batch_size;
  if (f.max_epochs) j["max_epochs_per_phase"] = f.max_epochs;
  if (f.early_stop) j["schedule"]["early_stop_patience"] = f.early_stop;
  if (f.min_delta) j["schedule"]["min_delta"] = *f.min_delta;
  if (f.momentum) j["batchnorm"]["momentum"] = *f.momentum;
  if (f.bn_epsilon) j["batchnorm"]["epsilon"] = *f.bn_epsilon;
  if (!f.denominator.empty()) j["batchnorm"]["denominator"] = f.denominator;
  if (f.no_augment) j["augment"]["enabled"] = false;
  const auto base = f.config.empty() ? std::filesystem::path() : std::filesystem::path(f.config).parent_path();
  return config_from_json(j, base);
}

int count_params(const std::string& arch, const std::string& selector, const std::string& catalog_file,
                 std::size_t outputs, std::size_t image_size) {
  if (!catalog_file.empty()) {
    const auto entry = load_catalog(catalog_file);
    std::cout << entry.architecture << ": " << with_commas(count_bn_trainable(entry))
              << " trainable batch-norm parameters (" << entry.layers.size() << " layers, "
              << with_commas(count_bn_channels(entry)) << " channels)\n";
    return 0;
  }
  for (const auto& entry : catalog::builtin()) {
    if (entry.architecture == arch) {
      if (!selector.empty() && selector != "bn-affine") {
        throw SpecError("catalog architectures only support --selector bn-affine");
      }
      std::cout << entry.architecture << ": " << with_commas(count_bn_trainable(entry))
                << " trainable batch-norm parameters (" << entry.layers.size() << " layers, "
                << with_commas(count_bn_channels(entry)) << " channels)\n";
      return 0;
    }
  }
  if (arch != "MiniNet" && arch != "MiniNet-Residual" && !std::filesystem::exists(arch)) {
    throw SpecError("unknown architecture '" + arch + "'");
  }
  const Shape input = {image_size, image_size, 3};
  auto model = build_model<float>(resolve_architecture(arch, input), outputs, LabelKind::Categorical, 0);
  if (!selector.empty()) {
    const auto sel = parse_selector(selector);
    std::cout << model.spec().name << " " << to_string(sel) << ": "
              << with_commas(count_scalars(enumerate_params(model, sel))) << "\n";
    return 0;
  }
  std::size_t buffers = 0;
  for (const auto& b : model.buffers()) buffers += b.tensor->size();
  std::printf("%-18s %10s\n", "selector", "params");
  for (auto sel : {ParamSelector::All, ParamSelector::HeadOnly, ParamSelector::BNAffineOnly,
                   ParamSelector::HeadPlusBNAffine}) {
    std::printf("%-18s %10s\n", to_string(sel).c_str(), with_commas(count_scalars(enumerate_params(model, sel))).c_str());
  }
  std::printf("%-18s %10s\n", "non-trainable", with_commas(buffers).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch-norm fine-tuning experiments"};
  app.require_subcommand(1);

  RunFlags rf;
  auto* run = app.add_subcommand("run", "Train and evaluate every seed of an experiment");
  run->add_option("--config", rf.config, "Experiment config (JSON)");
  run->add_option("--manifest", rf.manifest, "Dataset manifest or class-folder directory");
  run->add_option("--synthetic", rf.synthetic, "Synthetic task instead of a manifest");
  run->add_option("--samples", rf.samples, "Synthetic sample count");
  run->add_option("--image-size", rf.image_size, "Synthetic image size");
  run->add_option("--strategy", rf.strategy, "Strategy name");
  run->add_option("--arch", rf.arch, "Architecture (MiniNet, MiniNet-Residual or a spec file)");
  run->add_option("--pretrained", rf.pretrained, "Pretrained backbone checkpoint");
  run->add_option("--seeds", rf.seeds, "Seeds");
  run->add_option("--batch-size", rf.batch_size, "Batch size");
  run->add_option("--max-epochs", rf.max_epochs, "Epoch cap per phase");
  run->add_option("--early-stop-patience", rf.early_stop, "Override Plateau(n) patience");
  run->add_option("--min-delta", rf.min_delta, "Improvement threshold");
  run->add_option("--momentum", rf.momentum, "Batch-norm moving-average momentum");
  run->add_option("--bn-epsilon", rf.bn_epsilon, "Batch-norm epsilon");
  run->add_option("--bn-denominator", rf.denominator, "std+eps or sqrt(var+eps)");
  run->add_flag("--no-augment", rf.no_augment, "Disable training augmentation");
  run->add_option("--output", rf.output, "Run directory");

  std::vector<std::string> run_dirs;
  std::string summary_out;
  auto* summarize_cmd = app.add_subcommand("summarize", "Grid of mean (std) AUC over completed runs");
  summarize_cmd->add_option("runs", run_dirs, "Run directories")->required();
  summarize_cmd->add_option("--out", summary_out, "Write the CSV here as well");

  std::string arch, selector, catalog_file;
  std::size_t outputs = 2, count_image_size = 16;
  auto* count = app.add_subcommand("count-params", "Parameter accounting for catalogs and runnable specs");
  count->add_option("architecture", arch, "DenseNet121, ResNet50V2, InceptionV3, EfficientNetB3, MiniNet, ...");
  count->add_option("--selector", selector, "all, head, bn-affine, head+bn-affine");
  count->add_option("--catalog", catalog_file, "Count a catalog file instead of a named architecture");
  count->add_option("--outputs", outputs, "Head width for runnable specs");
  count->add_option("--image-size", count_image_size, "Input size for runnable specs");

  SyntheticSpec syn;
  std::string syn_out;
  auto* make = app.add_subcommand("make-synthetic", "Write a synthetic dataset and its manifest");
  make->add_option("--task", syn.task, "textures-2class, shapes-4class or textures-shifted")->required();
  make->add_option("--samples", syn.samples, "Number of images");
  make->add_option("--image-size", syn.image_size, "Image height and width");
  make->add_option("--seed", syn.seed, "Generator seed");
  make->add_option("--out", syn_out, "Output directory")->required();

  std::string source, source_task = "textures-shifted", pre_arch = "MiniNet", pre_out;
  std::size_t source_samples = 1200, source_size = 16;
  std::uint64_t pre_seed = 0;
  PretrainOptions pre;
  double val_fraction = 0.2;
  auto* pretrain = app.add_subcommand("pretrain", "Pseudo-pretrain a backbone on a source task");
  pretrain->add_option("--source", source, "Source manifest (default: a synthetic task)");
  pretrain->add_option("--synthetic", source_task, "Synthetic source task");
  pretrain->add_option("--samples", source_samples, "Synthetic source sample count");
  pretrain->add_option("--image-size", source_size, "Synthetic source image size");
  pretrain->add_option("--arch", pre_arch, "Architecture");
  pretrain->add_option("--seed", pre_seed, "Seed");
  pretrain->add_option("--max-epochs", pre.train.max_epochs_per_phase, "Epoch budget");
  pretrain->add_option("--batch-size", pre.train.batch_size, "Batch size");
  pretrain->add_option("--min-accuracy", pre.min_accuracy, "Validation accuracy floor");
  pretrain->add_option("--val-fraction", val_fraction, "Validation share of the source data");
  pretrain->add_option("--out", pre_out, "Checkpoint path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = config_from_flags(rf);
      const auto dir = run_experiment(cfg, &std::cout);
      std::cout << "run directory: " << dir.string() << "\n";
    } else if (*summarize_cmd) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto grid = summarize(dirs);
      std::cout << grid;
      if (!summary_out.empty()) write_text(summary_out, grid);
    } else if (*count) {
      if (arch.empty() && catalog_file.empty()) throw SpecError("count-params needs an architecture or --catalog");
      return count_params(arch, selector, catalog_file, outputs, count_image_size);
    } else if (*make) {
      const auto dir = resolve_output_dir(syn_out);
      const auto m = make_synthetic(syn, dir);
      std::cout << "wrote " << m.entries.size() << " images and " << (dir / "manifest.csv").string() << "\n";
    } else if (*pretrain) {
      DatasetSource src;
      if (!source.empty()) {
        src.manifest = source;
      } else {
        src.synthetic = SyntheticSpec{source_task, source_samples, source_size, pre_seed};
      }
      const auto out = resolve_output_dir(pre_out);
      if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
      const auto data = prepare_data(src, {{1.0 - val_fraction, val_fraction, 0.0}, pre_seed, false},
                                     out.parent_path() / (out.stem().string() + "_source"));
      const auto spec = resolve_architecture(pre_arch, data.manifest.shape);
      const auto ckpt = pseudo_pretrain(spec, data.train, data.val, pre_seed, pre, [](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << " lr " << format_real(r.lr) << " train " << format_real(r.train_loss)
                  << " val " << format_real(r.val_loss) << "\n";
      });
      save_checkpoint(out, ckpt);
      std::cout << "val accuracy " << ckpt.meta.extra.at("val_accuracy").get<double>() << ", wrote " << out.string()
                << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
