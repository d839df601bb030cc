#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/layers.hpp"
#include "bnft/model.hpp"

namespace bnft {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

// Moment buffers keyed by parameter name; created lazily on first update.
template <class T>
struct AdamState {
  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };
  std::unordered_map<std::string, Moments> moments;
  std::size_t step = 0;

  void reset() {
    moments.clear();
    step = 0;
  }
};

// One bias-corrected Adam update over the trainable parameters that hold a
// gradient. Frozen parameters are never touched; a parameter without a
// gradient (not on the loss path) is treated as g = 0.
template <class T>
void adam_step(AdamState<T>& state, const std::vector<Parameter<T>*>& params, double lr, const AdamConfig& cfg = {}) {
  for (auto* p : params) {
    if (!p->trainable() || !p->tensor().has_grad()) continue;
    for (T g : p->tensor().grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + p->name() + "'");
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (auto* p : params) {
    if (!p->trainable()) continue;
    auto& mom = state.moments[p->name()];
    const std::size_t n = p->size();
    if (mom.m.empty()) {
      mom.m.assign(n, T(0));
      mom.v.assign(n, T(0));
    }
    auto grad = p->tensor().grad();
    const bool has_grad = !grad.empty();
    auto theta = p->tensor().mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const T g = has_grad ? grad[i] : T(0);
      mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
      mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
      const double m_hat = static_cast<double>(mom.m[i]) / c1;
      const double v_hat = static_cast<double>(mom.v[i]) / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
  }
}

// Divides the learning rate by `factor` after `patience` epochs without an
// improvement larger than min_delta.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, double factor = 5.0, std::size_t patience = 1, double min_delta = 1e-4)
      : lr_(initial_lr), factor_(factor), patience_(patience), min_delta_(min_delta) {
    if (!(initial_lr > 0.0)) throw ConfigError("initial learning rate must be positive");
    if (!(factor > 1.0)) throw ConfigError("decay factor must exceed 1");
    if (patience == 0) throw ConfigError("plateau patience must be at least 1");
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t stale_epochs() const { return stale_; }

  // Returns true if the learning rate was decayed.
  bool observe(double val_loss) {
    if (best_ - val_loss > min_delta_) {
      best_ = val_loss;
      stale_ = 0;
      return false;
    }
    if (++stale_ >= patience_) {
      lr_ /= factor_;
      stale_ = 0;
      return true;
    }
    return false;
  }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience = 6, double min_delta = 1e-4) : patience_(patience), min_delta_(min_delta) {
    if (patience == 0) throw ConfigError("early-stopping patience must be at least 1");
  }

  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return stale_; }

  // Returns true when training should stop.
  bool observe(double val_loss) {
    if (best_ - val_loss > min_delta_) {
      best_ = val_loss;
      stale_ = 0;
      return false;
    }
    ++stale_;
    return stale_ >= patience_;
  }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

// Keeps a full copy of the weights (parameters and moving statistics) from the
// epoch with the lowest validation loss seen so far.
template <class T>
class BestCheckpointTracker {
 public:
  struct Tag {
    std::size_t phase = 0;
    std::size_t epoch = 0;
  };

  double best_loss() const { return best_; }
  bool has_snapshot() const { return snapshot_.has_value(); }
  const StateDict<T>& snapshot() const { return *snapshot_; }
  const Tag& tag() const { return tag_; }

  // Snapshots when val_loss is strictly below every earlier observation.
  bool observe(double val_loss, Model<T>& model, Tag tag = {}) {
    if (!(val_loss < best_)) return false;
    best_ = val_loss;
    snapshot_ = model.state_dict();
    tag_ = tag;
    return true;
  }

  void restore(Model<T>& model) const {
    if (!snapshot_) throw StateError("no checkpoint has been recorded");
    model.load_state_dict(*snapshot_);
  }

 private:
  double best_ = std::numeric_limits<double>::infinity();
  std::optional<StateDict<T>> snapshot_;
  Tag tag_;
};

struct EpochEndResult {
  double new_lr = 0.0;
  bool decayed = false;
  bool stop = false;
  bool snapshotted = false;
};

template <class T>
EpochEndResult epoch_end(PlateauSchedule& schedule, EarlyStopper& stopper, BestCheckpointTracker<T>& tracker,
                         Model<T>& model, double val_loss, typename BestCheckpointTracker<T>::Tag tag = {}) {
  if (!std::isfinite(val_loss)) throw NumericError("validation loss is not finite");
  EpochEndResult r;
  r.snapshotted = tracker.observe(val_loss, model, tag);
  r.decayed = schedule.observe(val_loss);
  r.stop = stopper.observe(val_loss);
  r.new_lr = schedule.lr();
  return r;
}

}  // namespace bnft
