#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace bnft;

namespace {

Parameter<double> scalar_param(double v, const std::string& name = "theta") {
  return Parameter<double>(name, Tensor<double>({1}, {v}), ParamRole::Weight);
}

void set_grad(Parameter<double>& p, double g) {
  p.tensor().zero_grad();
  mul(p.tensor(), Tensor<double>({1}, {g})).backward();
}

// Reference schedule written from the rule text: improvement means the loss
// beats the best so far by more than min_delta; decay after `patience` stale
// epochs and restart the count; stop after `stop_patience` stale epochs; the
// checkpoint follows the strictly lowest loss.
struct ReferenceRun {
  std::vector<double> lrs;  // lr in effect during each epoch
  std::size_t stop_epoch = 0;  // 1-based, 0 if never stopped
  std::size_t best_epoch = 0;
};

ReferenceRun reference(const std::vector<double>& losses, double lr0, std::size_t stop_patience) {
  ReferenceRun r;
  double lr = lr0, best = std::numeric_limits<double>::infinity(), best_strict = best;
  std::size_t stale_lr = 0, stale_stop = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    r.lrs.push_back(lr);
    const double l = losses[e];
    if (l < best_strict) {
      best_strict = l;
      r.best_epoch = e + 1;
    }
    if (best - l > 1e-4) {
      best = l;
      stale_lr = stale_stop = 0;
    } else {
      if (++stale_lr >= 1) {
        lr /= 5.0;
        stale_lr = 0;
      }
      if (++stale_stop >= stop_patience) {
        r.stop_epoch = e + 1;
        return r;
      }
    }
  }
  return r;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {0.3, -7.0, 1e-3}) {
    auto p = scalar_param(1.0);
    set_grad(p, g);
    AdamState<double> st;
    adam_step(st, {&p}, 1e-3);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    EXPECT_NEAR(p.tensor()[0], 1.0 - 1e-3 * g / (std::abs(g) + 1e-7), 1e-15);
    EXPECT_NEAR(std::abs(p.tensor()[0] - 1.0), 1e-3, 1e-6);
  }
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  auto p = scalar_param(2.5);
  set_grad(p, 0.0);
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(st, {&p}, 1e-2);
  EXPECT_EQ(p.tensor()[0], 2.5);
}

TEST(Adam, QuadraticMatchesScalarRecurrence) {
  auto p = scalar_param(1.5);
  AdamState<double> st;
  double theta = 1.5, m = 0.0, v = 0.0;
  const double lr = 0.05;
  for (int t = 1; t <= 10; ++t) {
    p.tensor().zero_grad();
    sum(square(p.tensor())).backward();
    adam_step(st, {&p}, lr);
    const double g = 2.0 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    theta -= lr * mh / (std::sqrt(vh) + 1e-7);
    ASSERT_NEAR(p.tensor()[0], theta, 1e-9) << "step " << t;
  }
  EXPECT_LT(std::abs(theta), 1.5);
}

TEST(Adam, FrozenParametersAreSkipped) {
  auto a = scalar_param(1.0, "a"), b = scalar_param(1.0, "b");
  set_grad(a, 1.0);
  set_grad(b, 1.0);
  b.set_trainable(false);
  AdamState<double> st;
  adam_step(st, {&a, &b}, 0.1);
  EXPECT_NE(a.tensor()[0], 1.0);
  EXPECT_EQ(b.tensor()[0], 1.0);
  EXPECT_EQ(st.moments.count("b"), 0u);
}

TEST(Adam, ResetClearsMoments) {
  auto p = scalar_param(1.0);
  AdamState<double> st;
  set_grad(p, 1.0);
  adam_step(st, {&p}, 0.1);
  st.reset();
  EXPECT_EQ(st.step, 0u);
  EXPECT_TRUE(st.moments.empty());
  const double before = p.tensor()[0];
  set_grad(p, -4.0);
  adam_step(st, {&p}, 0.1);
  EXPECT_NEAR(p.tensor()[0] - before, 0.1, 1e-6);  // behaves like a first step again
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  auto p = scalar_param(1.0, "backbone/block2_conv1/kernel");
  set_grad(p, std::numeric_limits<double>::quiet_NaN());
  AdamState<double> st;
  try {
    adam_step(st, {&p}, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone/block2_conv1/kernel"), std::string::npos);
  }
  EXPECT_EQ(p.tensor()[0], 1.0);
}

TEST(Schedule, DecaysAfterOneFlatEpoch) {
  PlateauSchedule s(1e-3);
  std::vector<double> lrs;
  for (double loss : {1.0, 0.9, 0.9, 0.9, 0.85, 0.85}) {
    s.observe(loss);
    lrs.push_back(s.lr());
  }
  const std::vector<double> expect = {1e-3, 1e-3, 2e-4, 4e-5, 4e-5, 8e-6};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(lrs[i], expect[i], 1e-18) << i;
}

TEST(Schedule, ImprovementsBelowMinDeltaCountAsFlat) {
  PlateauSchedule s(1.0);
  s.observe(1.0);
  EXPECT_TRUE(s.observe(1.0 - 5e-5));
  EXPECT_DOUBLE_EQ(s.lr(), 0.2);
  EXPECT_FALSE(s.observe(0.5));
}

TEST(Schedule, StrictlyImprovingLossesNeverDecay) {
  PlateauSchedule s(1e-3);
  EarlyStopper stop(6);
  for (int e = 0; e < 50; ++e) {
    EXPECT_FALSE(s.observe(10.0 - 0.01 * e));
    EXPECT_FALSE(stop.observe(10.0 - 0.01 * e));
  }
  EXPECT_DOUBLE_EQ(s.lr(), 1e-3);
}

TEST(Schedule, StopsOnSeventhEpochAfterSixFlatOnes) {
  EarlyStopper stop(6);
  EXPECT_FALSE(stop.observe(1.0));
  for (int e = 2; e <= 6; ++e) EXPECT_FALSE(stop.observe(1.0)) << e;
  EXPECT_TRUE(stop.observe(1.0));
}

TEST(Schedule, InvalidConfigurationsThrow) {
  EXPECT_THROW(PlateauSchedule(0.0), ConfigError);
  EXPECT_THROW(PlateauSchedule(1e-3, 1.0), ConfigError);
  EXPECT_THROW(PlateauSchedule(1e-3, 5.0, 0), ConfigError);
  EXPECT_THROW(EarlyStopper(0), ConfigError);
}

// Random loss traces through schedule + stopper + tracker against the
// reference simulator.
TEST(Schedule, RandomTracesMatchReference) {
  Rng rng(42);
  auto model = build_model<float>(mininet_spec({8, 3, 4, 1, false}), 2, LabelKind::Categorical, 0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> losses;
    double level = 1.0;
    for (int e = 0; e < 40; ++e) {
      const double u = rng.uniform();
      if (u < 0.4) level -= rng.uniform(0.0, 0.1);
      else if (u < 0.6) level -= rng.uniform(0.0, 2e-4);  // around min_delta
      else if (u < 0.8) level += rng.uniform(0.0, 0.05);
      losses.push_back(level);
    }
    const std::size_t patience = 1 + rng.below(8);
    const auto ref = reference(losses, 1e-3, patience);

    PlateauSchedule s(1e-3);
    EarlyStopper stop(patience);
    BestCheckpointTracker<float> tracker;
    std::size_t stopped = 0;
    for (std::size_t e = 0; e < losses.size(); ++e) {
      ASSERT_NEAR(s.lr(), ref.lrs[e], 1e-18) << "trial " << trial << " epoch " << e;
      const auto r = epoch_end(s, stop, tracker, model, losses[e], {1, e + 1});
      if (r.stop) {
        stopped = e + 1;
        break;
      }
    }
    ASSERT_EQ(stopped, ref.stop_epoch) << "trial " << trial;
    ASSERT_EQ(tracker.tag().epoch, ref.best_epoch) << "trial " << trial;
  }
}

TEST(Tracker, StrictImprovementOnlyAndRestore) {
  auto model = build_model<float>(mininet_spec({8, 3, 4, 1, false}), 2, LabelKind::Categorical, 0);
  BestCheckpointTracker<float> t;
  EXPECT_THROW(t.restore(model), StateError);
  EXPECT_TRUE(t.observe(0.5, model, {1, 1}));
  const auto first = model.state_dict();
  model.parameters()[0]->tensor().mutable_data()[0] += 1.0f;
  EXPECT_FALSE(t.observe(0.5, model, {1, 2}));  // equal is not better
  EXPECT_TRUE(t.observe(0.5 - 1e-9, model, {2, 3}));  // below min_delta still counts
  EXPECT_EQ(t.tag().phase, 2u);
  const auto second = model.state_dict();
  model.parameters()[0]->tensor().mutable_data()[0] += 1.0f;
  t.restore(model);
  EXPECT_TRUE(model.state_dict() == second);
  EXPECT_TRUE(model.state_dict() != first);
}

TEST(Tracker, NonFiniteValidationLossThrows) {
  auto model = build_model<float>(mininet_spec({8, 3, 4, 1, false}), 2, LabelKind::Categorical, 0);
  PlateauSchedule s(1e-3);
  EarlyStopper stop;
  BestCheckpointTracker<float> t;
  EXPECT_THROW(epoch_end(s, stop, t, model, std::numeric_limits<double>::infinity()), NumericError);
}

// The model left behind by training reproduces the best validation loss and
// that loss is the minimum of the per-epoch log.
TEST(Tracker, RestoredModelReproducesBestValidationLoss) {
  const auto train = oracle::texture_dataset(target_texture_style(), 64, 0);
  const auto val = oracle::texture_dataset(target_texture_style(), 32, 0, 1000);
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  TrainOptions o;
  o.batch_size = 16;
  o.max_epochs_per_phase = 4;
  const auto r = train_phases(model, make_strategy("FC-then-BN").phases, train, val, o, 0);
  double min_loss = std::numeric_limits<double>::infinity();
  std::size_t snapshots = 0;
  for (const auto& e : r.epochs) {
    min_loss = std::min(min_loss, e.val_loss);
    snapshots += e.snapshot;
  }
  EXPECT_GE(snapshots, 1u);
  EXPECT_EQ(r.best_val_loss, min_loss);
  EXPECT_EQ(dataset_loss(model, val), r.best_val_loss);
}

TEST(Trainer, EpochCapAndPhaseLearningRates) {
  const auto train = oracle::texture_dataset(target_texture_style(), 32, 1);
  const auto val = oracle::texture_dataset(target_texture_style(), 16, 1, 1000);
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  TrainOptions o;
  o.batch_size = 16;
  o.max_epochs_per_phase = 3;
  const auto r = train_phases(model, make_strategy("FC-then-full").phases, train, val, o, 0);
  ASSERT_EQ(r.phase_epochs.size(), 2u);
  EXPECT_LE(r.phase_epochs[0], 3u);
  EXPECT_LE(r.phase_epochs[1], 3u);
  // Each phase starts at its own rate; the schedule restarts.
  for (const auto& e : r.epochs)
    if (e.phase_epoch == 1) EXPECT_DOUBLE_EQ(e.lr, e.phase == 1 ? 1e-3 : 1e-5);
  for (std::size_t i = 0; i < r.epochs.size(); ++i) EXPECT_EQ(r.epochs[i].epoch, i + 1);
}
