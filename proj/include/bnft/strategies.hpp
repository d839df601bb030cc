#pragma once

#include <string>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/model.hpp"

namespace bnft {

struct StopRule {
  enum class Kind { Epochs, Plateau };
  Kind kind = Kind::Plateau;
  std::size_t value = 6;  // epoch count or patience

  static StopRule epochs(std::size_t n) { return {Kind::Epochs, n}; }
  static StopRule plateau(std::size_t patience) { return {Kind::Plateau, patience}; }
  bool operator==(const StopRule&) const = default;
};

inline std::string to_string(const StopRule& r) {
  return (r.kind == StopRule::Kind::Epochs ? "Epochs(" : "Plateau(") + std::to_string(r.value) + ")";
}

struct Phase {
  ParamSelector selector = ParamSelector::HeadOnly;
  bool bn_trainable = false;
  BnMode bn_mode = BnMode::Inference;
  double initial_lr = 1e-3;
  StopRule stop_rule = StopRule::plateau(6);

  bool operator==(const Phase&) const = default;
};

enum class InitKind { Pretrained, Random };

struct Strategy {
  std::string name;
  InitKind init = InitKind::Pretrained;
  std::vector<Phase> phases;
};

inline const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names = {"FC",           "FC-then-full",  "FC-then-BN",
                                                 "FC-BMA",       "RND-FC-BN",     "FC-BN",
                                                 "FC-then-BN-lr", "RND-FC-BN-BMA", "FC-then-BN-BMA",
                                                 "FC-then-full-BMA"};
  return names;
}

inline Strategy make_strategy(const std::string& name) {
  constexpr double kLr = 1e-3;
  constexpr double kFineLr = 1e-5;
  const auto plateau = StopRule::plateau(6);
  const Phase head{ParamSelector::HeadOnly, false, BnMode::Inference, kLr, plateau};
  const Phase head_one_epoch{ParamSelector::HeadOnly, false, BnMode::Inference, kLr, StopRule::epochs(1)};
  const Phase head_bn{ParamSelector::HeadPlusBNAffine, true, BnMode::Inference, kLr, plateau};

  // "-BMA" runs every phase with batch norm in training mode.
  auto bma = [](Strategy s, std::string n) {
    s.name = std::move(n);
    for (auto& p : s.phases) p.bn_mode = BnMode::Training;
    return s;
  };

  if (name == "FC") return {name, InitKind::Pretrained, {head}};
  if (name == "FC-then-full") {
    return {name, InitKind::Pretrained, {head, {ParamSelector::All, true, BnMode::Inference, kFineLr, plateau}}};
  }
  if (name == "FC-then-BN") return {name, InitKind::Pretrained, {head_one_epoch, head_bn}};
  if (name == "FC-BMA") return bma(make_strategy("FC"), name);
  if (name == "RND-FC-BN") return {name, InitKind::Random, {head_bn}};
  if (name == "FC-BN") return {name, InitKind::Pretrained, {head_bn}};
  if (name == "FC-then-BN-lr") {
    return {name, InitKind::Pretrained, {head, {ParamSelector::HeadPlusBNAffine, true, BnMode::Inference, kFineLr, plateau}}};
  }
  if (name == "RND-FC-BN-BMA") return bma(make_strategy("RND-FC-BN"), name);
  if (name == "FC-then-BN-BMA") return bma(make_strategy("FC-then-BN"), name);
  if (name == "FC-then-full-BMA") return bma(make_strategy("FC-then-full"), name);
  throw ConfigError("unknown strategy '" + name + "'");
}

// Sets the batch-norm switches and every parameter's trainable flag for the
// phase. Values are not modified. Optimiser and schedule state are owned by
// the training loop, which starts them fresh for every phase.
template <class T>
void apply_phase(Model<T>& model, const Phase& phase) {
  set_bn_mode(model, phase.bn_mode);
  set_bn_trainable(model, phase.bn_trainable);
  for (auto* p : model.parameters()) {
    const bool selected = selector_includes(phase.selector, p->name(), p->is_bn_affine());
    p->set_trainable(selected && (!p->is_bn_affine() || phase.bn_trainable));
  }
}

// Number of scalars the optimiser may mutate in the current configuration.
template <class T>
std::size_t trainable_param_count(Model<T>& model) {
  std::size_t n = 0;
  for (auto* p : model.parameters())
    if (p->trainable()) n += p->size();
  return n;
}

template <class T>
std::size_t trainable_param_count(Model<T>& model, const Phase& phase) {
  apply_phase(model, phase);
  return trainable_param_count(model);
}

}  // namespace bnft
