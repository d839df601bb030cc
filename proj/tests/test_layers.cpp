#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"

using namespace bnft;
using bnft::oracle::random_tensor;

namespace {

BatchNormLayer<double> make_bn(std::size_t c, double eps = 1e-3, double momentum = 0.99) {
  BatchNormOptions o;
  o.epsilon = eps;
  o.momentum = momentum;
  return BatchNormLayer<double>("bn", c, o);
}

// Rescales each channel of x to exact mean 0 and population std 1.
Tensor<double> standardise(const Tensor<double>& x) {
  const std::size_t c = x.shape().back();
  auto [mean, var] = oracle::moments_oracle(x.vec(), c);
  std::vector<double> out(x.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % c]) / std::sqrt(var[i % c]);
  return Tensor<double>(x.shape(), out);
}

template <class T>
std::vector<std::vector<T>> snapshot(const std::vector<Parameter<T>*>& ps) {
  std::vector<std::vector<T>> out;
  for (auto* p : ps) out.push_back(p->tensor().vec());
  return out;
}

}  // namespace

TEST(BatchNorm, TrainingFixedPointDividesByOnePlusEps) {
  Rng rng(1);
  auto bn = make_bn(3);
  bn.set_mode(BnMode::Training);
  const auto x = standardise(random_tensor<double>({16, 3}, rng));
  const auto y = bn.apply(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] / (1.0 + 1e-3), 1e-12);
  auto [mean, var] = oracle::moments_oracle(y.vec(), 3);
  for (double m : mean) EXPECT_LT(std::abs(m), 1e-6);
}

TEST(BatchNorm, InferenceSubstitution) {
  auto bn = make_bn(1, 0.0);
  bn.moving_mean().mutable_data()[0] = 1.0;
  bn.moving_var().mutable_data()[0] = 1.0;
  bn.gamma()->tensor().mutable_data()[0] = 2.0;
  bn.beta()->tensor().mutable_data()[0] = 3.0;
  bn.set_mode(BnMode::Inference);
  EXPECT_DOUBLE_EQ(bn.apply(Tensor<double>({1, 1}, {2.0})).item(), 5.0);
}

TEST(BatchNorm, TrainingOutputMomentsMatchOracle) {
  Rng rng(2);
  auto bn = make_bn(4);
  for (std::size_t c = 0; c < 4; ++c) {
    bn.gamma()->tensor().mutable_data()[c] = rng.uniform(0.5, 2.0);
    bn.beta()->tensor().mutable_data()[c] = rng.uniform(-1.0, 1.0);
  }
  bn.set_mode(BnMode::Training);
  // Roughly unit variance, the regime where the output std is close to 1/(1+eps).
  const auto x = random_tensor<double>({16, 4, 4, 4}, rng, -std::sqrt(3.0), std::sqrt(3.0));
  const auto y = bn.apply(x);
  const auto [xm, xv] = oracle::moments_oracle(x.vec(), 4);
  std::vector<double> z(y.vec());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = (z[i] - bn.beta()->tensor()[i % 4]) / bn.gamma()->tensor()[i % 4];
  }
  auto [mean, var] = oracle::moments_oracle(z, 4);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(mean[c], 0.0, 1e-5);
    EXPECT_NEAR(std::sqrt(var[c]), 1.0 / (1.0 + 1e-3), 1e-4);
    const double sigma = std::sqrt(xv[c]);
    EXPECT_NEAR(std::sqrt(var[c]), sigma / (sigma + 1e-3), 1e-9);
  }
}

TEST(BatchNorm, CompatibilityDenominator) {
  BatchNormOptions o;
  o.epsilon = 0.5;
  o.denominator = BnDenominator::SqrtVarPlusEpsilon;
  BatchNormLayer<double> bn("bn", 1, o);
  bn.moving_var().mutable_data()[0] = 4.0;
  EXPECT_NEAR(bn.apply(Tensor<double>({1, 1}, {3.0})).item(), 3.0 / std::sqrt(4.5), 1e-12);
}

TEST(BatchNorm, MissingAffineActsAsIdentity) {
  BatchNormOptions o;
  o.epsilon = 0.0;
  o.scale = false;
  o.center = false;
  BatchNormLayer<double> bn("bn", 2, o);
  EXPECT_EQ(bn.gamma(), nullptr);
  EXPECT_EQ(bn.beta(), nullptr);
  EXPECT_TRUE(bn.parameters().empty());
  const Tensor<double> x({1, 2}, {0.25, -4.0});
  EXPECT_EQ(bn.apply(x).vec(), x.vec());
}

TEST(BatchNorm, Errors) {
  auto bn = make_bn(3);
  EXPECT_THROW(bn.apply(Tensor<double>::zeros({4, 2})), ShapeError);
  bn.set_mode(BnMode::Training);
  EXPECT_THROW(bn.apply(Tensor<double>::zeros({1, 3})), ShapeError);
  bn.set_mode(BnMode::Inference);
  const std::vector<double> m(3, 0.0);
  EXPECT_THROW(bn.update_moving_stats(m, m), StateError);
}

TEST(MovingStats, OneStep) {
  auto bn = make_bn(1);
  bn.set_mode(BnMode::Training);
  const std::vector<double> mean = {1.0}, var = {1.0};
  bn.update_moving_stats(mean, var);
  EXPECT_NEAR(bn.moving_mean()[0], 0.01, 1e-15);
}

TEST(MovingStats, GeometricSeries) {
  auto bn = make_bn(1);
  bn.set_mode(BnMode::Training);
  const double m = 2.5;
  for (int k = 1; k <= 50; ++k) {
    bn.update_moving_stats(std::vector<double>{m}, std::vector<double>{1.0});
    EXPECT_NEAR(bn.moving_mean()[0], m * (1.0 - std::pow(0.99, k)), 1e-12);
  }
}

TEST(MovingStats, RandomBatchesFollowScalarRecurrence) {
  Rng rng(3);
  auto bn = make_bn(3, 1e-3, 0.9);
  bn.set_mode(BnMode::Training);
  std::vector<double> em(3, 0.0), ev(3, 1.0);
  for (int step = 0; step < 200; ++step) {
    const auto x = random_tensor<double>({8, 2, 2, 3}, rng, -1 + 0.01 * step, 2);
    bn.apply(x);
    auto [mean, var] = oracle::moments_oracle(x.vec(), 3);
    for (std::size_t c = 0; c < 3; ++c) {
      em[c] = 0.9 * em[c] + 0.1 * mean[c];
      ev[c] = 0.9 * ev[c] + 0.1 * var[c];
      ASSERT_NEAR(bn.moving_mean()[c], em[c], 1e-7);
      ASSERT_NEAR(bn.moving_var()[c], ev[c], 1e-7);
      ASSERT_GE(bn.moving_var()[c], 0.0);
    }
  }
}

TEST(MovingStats, NoGradientFlowsIntoStatistics) {
  Rng rng(4);
  auto bn = make_bn(2);
  bn.set_mode(BnMode::Training);
  auto x = random_tensor<double>({5, 2}, rng, -1, 1, true);
  sum(square(bn.apply(x))).backward();
  EXPECT_FALSE(bn.moving_mean().requires_grad());
  EXPECT_FALSE(bn.moving_mean().has_grad());
  EXPECT_FALSE(bn.moving_var().has_grad());
}

TEST(BatchNormGrad, TrainingModeMatchesFiniteDifferences) {
  Rng rng(5);
  auto bn = make_bn(3, 1e-3, 0.5);
  bn.set_mode(BnMode::Training);
  auto x = random_tensor<double>({4, 2, 2, 3}, rng, -2, 2);
  auto& g = bn.gamma()->tensor();
  auto& b = bn.beta()->tensor();
  for (std::size_t c = 0; c < 3; ++c) {
    g.mutable_data()[c] = rng.uniform(0.5, 1.5);
    b.mutable_data()[c] = rng.uniform(-0.5, 0.5);
  }
  const auto w = random_tensor<double>({4, 2, 2, 3}, rng);
  const auto r = grad_check<double>([&] { return sum(mul(bn.apply(x), w)); }, {x, g, b});
  EXPECT_LT(r.max_rel_error, 1e-6) << "param " << r.worst_param << " index " << r.worst_index;
}

TEST(BatchNormGrad, InferenceModeMatchesFiniteDifferences) {
  Rng rng(6);
  auto bn = make_bn(2);
  bn.moving_mean().mutable_data()[0] = 0.3;
  bn.moving_var().mutable_data()[1] = 2.0;
  auto x = random_tensor<double>({3, 2}, rng);
  const auto r = grad_check<double>([&] { return sum(square(bn.apply(x))); },
                                    {x, bn.gamma()->tensor(), bn.beta()->tensor()});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(BatchNorm, TrainingTwiceIsIdempotentUpToEpsilon) {
  Rng rng(7);
  auto bn = make_bn(3);
  bn.set_mode(BnMode::Training);
  const auto x = standardise(random_tensor<double>({32, 3}, rng));
  const auto y1 = bn.apply(x);
  const auto y2 = bn.apply(y1);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_LE(std::abs(y2[i] - y1[i]), 2e-3 * std::max(1.0, std::abs(x[i])));
}

TEST(ModeMutation, InferenceForwardsMutateNothing) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  Rng rng(8);
  set_bn_mode(model, BnMode::Inference);
  const auto before = model.state_dict();
  for (int i = 0; i < 100; ++i) model.forward(random_tensor<float>({2, 16, 16, 3}, rng, 0, 1));
  EXPECT_TRUE(model.state_dict() == before);
}

TEST(ModeMutation, FrozenAffineSurvivesOptimiserStep) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  Rng rng(9);
  apply_phase(model, Phase{ParamSelector::HeadPlusBNAffine, false, BnMode::Inference, 1e-3, StopRule::plateau(6)});
  const auto bn_params = enumerate_params(model, ParamSelector::BNAffineOnly);
  const auto before = snapshot(bn_params);
  const auto head_before = snapshot(enumerate_params(model, ParamSelector::HeadOnly));
  const Tensor<float> y({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  softmax_cross_entropy(model.logits(random_tensor<float>({4, 16, 16, 3}, rng, 0, 1)), y).backward();
  AdamState<float> st;
  adam_step(st, model.parameters(), 1e-2);
  EXPECT_EQ(snapshot(bn_params), before);
  EXPECT_NE(snapshot(enumerate_params(model, ParamSelector::HeadOnly)), head_before);
}

TEST(ModeMutation, BmaUpdatesStatisticsButNotAffine) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  Rng rng(10);
  apply_phase(model, make_strategy("FC-BMA").phases[0]);
  const auto affine = snapshot(enumerate_params(model, ParamSelector::BNAffineOnly));
  std::vector<std::vector<float>> stats;
  for (auto& b : model.buffers()) stats.push_back(b.tensor->vec());
  const Tensor<float> y({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  softmax_cross_entropy(model.logits(random_tensor<float>({4, 16, 16, 3}, rng, 0, 1)), y).backward();
  AdamState<float> st;
  adam_step(st, model.parameters(), 1e-2);
  EXPECT_EQ(snapshot(enumerate_params(model, ParamSelector::BNAffineOnly)), affine);
  std::size_t changed = 0;
  const auto bufs = model.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) changed += bufs[i].tensor->vec() != stats[i];
  EXPECT_EQ(changed, bufs.size());
}

// All four (mode, trainable) combinations, checked field by field.
TEST(ModeMutation, FullMatrix) {
  Rng rng(11);
  for (BnMode mode : {BnMode::Training, BnMode::Inference}) {
    for (bool trainable : {true, false}) {
      auto bn = make_bn(2);
      bn.set_mode(mode);
      bn.set_trainable(trainable);
      auto x = random_tensor<double>({6, 2}, rng, -1, 3);
      const auto g0 = bn.gamma()->tensor().vec(), b0 = bn.beta()->tensor().vec();
      const auto m0 = bn.moving_mean().vec(), v0 = bn.moving_var().vec();
      auto loss = sum(square(bn.apply(x)));
      // Forward alone never touches gamma/beta.
      EXPECT_EQ(bn.gamma()->tensor().vec(), g0);
      EXPECT_EQ(bn.beta()->tensor().vec(), b0);
      EXPECT_EQ(bn.moving_mean().vec() != m0, mode == BnMode::Training);
      EXPECT_EQ(bn.moving_var().vec() != v0, mode == BnMode::Training);
      if (loss.requires_grad()) loss.backward();
      AdamState<double> st;
      adam_step(st, bn.parameters(), 1e-2);
      EXPECT_EQ(bn.gamma()->tensor().vec() != g0, trainable);
      EXPECT_EQ(bn.beta()->tensor().vec() != b0, trainable);
    }
  }
}

TEST(Dropout, InactiveIsIdentity) {
  DropoutLayer<double> d(0.5);
  Rng rng(12);
  const auto x = random_tensor<double>({3, 4}, rng);
  ForwardContext ctx{&rng};
  const std::vector<Tensor<double>> in = {x};
  EXPECT_EQ(d.forward(in, ctx).vec(), x.vec());
}

TEST(Dropout, ActiveScalesSurvivorsAndPreservesMean) {
  DropoutLayer<double> d(0.5);
  d.set_active(true);
  Rng rng(13);
  const auto x = Tensor<double>::full({20000}, 1.0);
  ForwardContext ctx{&rng};
  const std::vector<Tensor<double>> in = {x};
  const auto y = d.forward(in, ctx);
  double total = 0.0;
  for (double v : y.vec()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    total += v;
  }
  EXPECT_NEAR(total / 20000.0, 1.0, 0.02);
}

TEST(Dropout, ActiveWithoutRngFails) {
  DropoutLayer<double> d(0.5);
  d.set_active(true);
  ForwardContext ctx;
  const std::vector<Tensor<double>> in = {Tensor<double>::zeros({2})};
  EXPECT_THROW(d.forward(in, ctx), StateError);
}

TEST(Activations, SoftmaxRowsSumToOneAndSigmoidInRange) {
  Rng rng(14);
  const auto logits = random_tensor<float>({7, 5}, rng, -20, 20);
  const auto p = softmax(logits);
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += p[i * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const auto s = sigmoid(random_tensor<float>({50}, rng, -10, 10));
  for (float v : s.vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Activations, GlobalPoolShape) {
  Rng rng(15);
  EXPECT_EQ(global_avg_pool(random_tensor<float>({3, 4, 5, 6}, rng)).shape(), (Shape{3, 6}));
}

TEST(LayerGrad, DenseSoftmaxCrossEntropyStack) {
  Rng rng(16);
  DenseLayer<double> dense("d", 5, 3, rng);
  auto x = random_tensor<double>({4, 5}, rng);
  const Tensor<double> y({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0});
  ForwardContext ctx;
  auto params = dense.parameters();
  const auto r = grad_check<double>(
      [&] {
        const std::vector<Tensor<double>> in = {x};
        return softmax_cross_entropy(dense.forward(in, ctx), y);
      },
      {x, params[0]->tensor(), params[1]->tensor()});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(LayerGrad, ConvLayer) {
  Rng rng(17);
  Conv2DLayer<double> conv("c", 3, 2, 3, 1, Padding::Same, rng);
  auto x = random_tensor<double>({2, 4, 4, 2}, rng);
  auto params = conv.parameters();
  params[1]->tensor().mutable_data()[0] = 0.1;
  ForwardContext ctx;
  const auto r = grad_check<double>(
      [&] {
        const std::vector<Tensor<double>> in = {x};
        return sum(square(conv.forward(in, ctx)));
      },
      {x, params[0]->tensor(), params[1]->tensor()});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(EnumerateParams, HeadArithmetic) {
  const auto spec = mininet_spec({16, 3, 16, 3, false});
  auto model = build_model<float>(spec, 10, LabelKind::Categorical, 0);
  EXPECT_EQ(model.feature_width(), 64u);
  EXPECT_EQ(count_scalars(enumerate_params(model, ParamSelector::HeadOnly)), 650u);
}

TEST(EnumerateParams, HeadPlusAffineIsHeadPlusTwiceChannels) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  std::size_t channels = 0;
  for (auto* bn : model.batchnorm_layers()) channels += bn->channels();
  EXPECT_EQ(count_scalars(enumerate_params(model, ParamSelector::HeadPlusBNAffine)),
            count_scalars(enumerate_params(model, ParamSelector::HeadOnly)) + 2 * channels);
}

TEST(EnumerateParams, SelectorsNestAndAreNameOrdered) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  auto names = [&](ParamSelector s) {
    std::vector<std::string> out;
    for (auto* p : enumerate_params(model, s)) out.push_back(p->name());
    return out;
  };
  const auto all = names(ParamSelector::All), hb = names(ParamSelector::HeadPlusBNAffine),
             head = names(ParamSelector::HeadOnly);
  EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
  EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), all.size());
  EXPECT_TRUE(std::includes(all.begin(), all.end(), hb.begin(), hb.end()));
  EXPECT_TRUE(std::includes(hb.begin(), hb.end(), head.begin(), head.end()));
  EXPECT_THROW(parse_selector("backbone"), SpecError);
}

TEST(Switches, ModeAndTrainableAreIndependent) {
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  for (BnMode mode : {BnMode::Training, BnMode::Inference}) {
    for (bool flag : {true, false}) {
      set_bn_mode(model, mode);
      set_bn_trainable(model, flag);
      for (auto* bn : model.batchnorm_layers()) {
        EXPECT_EQ(bn->mode(), mode);
        EXPECT_EQ(bn->trainable(), flag);
        EXPECT_EQ(bn->gamma()->trainable(), flag);
      }
    }
  }
}

// A small graph with every backbone layer kind, checked end to end. Tape
// gradients of a whole network can be tiny or exactly zero (dead relu
// channels), so this uses a mixed absolute/relative bound.
TEST(ModelGrad, BranchingNetworkMatchesFiniteDifferences) {
  ArchSpec s;
  s.name = "tiny";
  s.input_shape = {5, 5, 2};
  auto layer = [](std::string n, LayerKind k, std::vector<std::string> in = {}, std::size_t filters = 0) {
    LayerDesc d;
    d.name = std::move(n);
    d.kind = k;
    d.inputs = std::move(in);
    d.filters = filters;
    return d;
  };
  s.layers = {layer("c1", LayerKind::Conv, {}, 3),        layer("r1", LayerKind::Relu),
              layer("b1", LayerKind::BatchNorm),          layer("c2", LayerKind::Conv, {}, 3),
              layer("sum", LayerKind::Add, {"b1", "c2"}), layer("c3", LayerKind::Conv, {"b1"}, 2),
              layer("cat", LayerKind::Concat, {"sum", "c3"}), layer("b2", LayerKind::BatchNorm),
              layer("pool", LayerKind::AvgPool),          layer("gap", LayerKind::GlobalAvgPool)};
  Rng rng(18);
  for (BnMode mode : {BnMode::Training, BnMode::Inference}) {
    auto model = build_model<double>(s, 3, LabelKind::Categorical, 5);
    set_bn_mode(model, mode);
    auto x = random_tensor<double>({3, 5, 5, 2}, rng, -1, 1, true);
    const Tensor<double> y({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto f = [&] { return softmax_cross_entropy(model.logits(x), y); };
    std::vector<Tensor<double>> ps = {x};
    for (auto* p : model.parameters()) ps.push_back(p->tensor());
    for (auto& p : ps) p.zero_grad();
    f().backward();
    for (auto& p : ps) {
      ASSERT_TRUE(p.has_grad());
      const std::vector<double> analytic(p.grad().begin(), p.grad().end());
      auto data = p.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + 1e-6;
        const double up = f().item();
        data[i] = saved - 1e-6;
        const double down = f().item();
        data[i] = saved;
        const double numeric = (up - down) / 2e-6;
        EXPECT_LE(std::abs(analytic[i] - numeric), 1e-8 + 1e-5 * std::abs(numeric));
      }
    }
  }
}
