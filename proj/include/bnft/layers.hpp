#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/ops.hpp"
#include "bnft/rng.hpp"
#include "bnft/tensor.hpp"

namespace bnft {

enum class ParamRole { Weight, Bias, BnScale, BnOffset };

// A named tensor with a trainable flag. The flag is mirrored into the
// tensor's requires_grad so frozen subgraphs are skipped on backward.
template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> value, ParamRole role, bool trainable = true)
      : name_(std::move(name)), tensor_(std::move(value)), role_(role) {
    set_trainable(trainable);
  }

  const std::string& name() const { return name_; }
  ParamRole role() const { return role_; }
  bool is_bn_affine() const { return role_ == ParamRole::BnScale || role_ == ParamRole::BnOffset; }

  Tensor<T>& tensor() { return tensor_; }
  const Tensor<T>& tensor() const { return tensor_; }
  std::size_t size() const { return tensor_.size(); }

  bool trainable() const { return trainable_; }
  void set_trainable(bool flag) {
    trainable_ = flag;
    tensor_.set_requires_grad(flag);
  }

 private:
  std::string name_;
  Tensor<T> tensor_;
  ParamRole role_;
  bool trainable_ = true;
};

// Non-trainable named state, e.g. batch-norm moving statistics.
template <class T>
struct Buffer {
  std::string name;
  Tensor<T>* tensor;
};

struct ForwardContext {
  Rng* rng = nullptr;  // required when a dropout layer is active
};

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext& ctx) = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  virtual std::vector<Buffer<T>> buffers() { return {}; }
};

// Glorot/Xavier uniform: U(-l, l), l = sqrt(6 / (fan_in + fan_out)).
template <class T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>(std::move(shape), std::move(values));
}

namespace detail {
template <class T>
const Tensor<T>& single_input(std::span<const Tensor<T>> inputs, const std::string& who) {
  if (inputs.size() != 1) throw SpecError(who + " expects exactly one input");
  return inputs[0];
}
}  // namespace detail

template <class T>
class DenseLayer final : public Layer<T> {
 public:
  DenseLayer(const std::string& name, std::size_t in, std::size_t units, Rng& rng)
      : kernel_(name + "/kernel", glorot_uniform<T>({in, units}, in, units, rng), ParamRole::Weight),
        bias_(name + "/bias", Tensor<T>::zeros({units}), ParamRole::Bias) {}

  std::string kind() const override { return "dense"; }

  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    const auto& x = detail::single_input(inputs, "dense");
    return matmul(x, kernel_.tensor()) + bias_.tensor();
  }

  std::vector<Parameter<T>*> parameters() override { return {&kernel_, &bias_}; }

 private:
  Parameter<T> kernel_;
  Parameter<T> bias_;
};

template <class T>
class Conv2DLayer final : public Layer<T> {
 public:
  Conv2DLayer(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, int stride, Padding padding,
              Rng& rng)
      : kernel_(name + "/kernel", glorot_uniform<T>({k, k, cin, cout}, k * k * cin, k * k * cout, rng),
                ParamRole::Weight),
        bias_(name + "/bias", Tensor<T>::zeros({cout}), ParamRole::Bias),
        stride_(stride),
        padding_(padding) {}

  std::string kind() const override { return "conv"; }

  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    const auto& x = detail::single_input(inputs, "conv");
    return conv2d(x, kernel_.tensor(), stride_, padding_) + bias_.tensor();
  }

  std::vector<Parameter<T>*> parameters() override { return {&kernel_, &bias_}; }

 private:
  Parameter<T> kernel_;
  Parameter<T> bias_;
  int stride_;
  Padding padding_;
};

enum class BnMode { Training, Inference };

// How the normaliser is formed from the variance.
enum class BnDenominator {
  StdPlusEpsilon,      // (sqrt(var) + eps), the literal form
  SqrtVarPlusEpsilon,  // sqrt(var + eps), common framework form
};

struct BatchNormOptions {
  double momentum = 0.99;
  double epsilon = 1e-3;
  BnDenominator denominator = BnDenominator::StdPlusEpsilon;
  bool scale = true;
  bool center = true;
};

// Per-channel normalisation over every axis except the last.
//
// Two independent switches:
//  * mode: Training normalises with the current batch moments and folds them
//    into the moving averages; Inference uses the stored averages and never
//    mutates anything.
//  * trainable: whether gamma/beta may be updated by the optimiser.
template <class T>
class BatchNormLayer final : public Layer<T> {
 public:
  BatchNormLayer(const std::string& name, std::size_t channels, BatchNormOptions options = {})
      : name_(name),
        channels_(channels),
        options_(options),
        moving_mean_(Tensor<T>::zeros({channels})),
        moving_var_(Tensor<T>::full({channels}, T(1))) {
    if (channels == 0) throw SpecError("batch norm '" + name + "' needs at least one channel");
    if (!(options.momentum > 0.0 && options.momentum < 1.0)) {
      throw SpecError("batch norm momentum must be in (0,1), got " + std::to_string(options.momentum));
    }
    if (!(options.epsilon >= 0.0)) throw SpecError("batch norm epsilon must be non-negative");
    if (options.scale) gamma_.emplace(name + "/gamma", Tensor<T>::full({channels}, T(1)), ParamRole::BnScale);
    if (options.center) beta_.emplace(name + "/beta", Tensor<T>::zeros({channels}), ParamRole::BnOffset);
  }

  std::string kind() const override { return "batchnorm"; }
  const std::string& name() const { return name_; }
  std::size_t channels() const { return channels_; }
  const BatchNormOptions& options() const { return options_; }

  BnMode mode() const { return mode_; }
  void set_mode(BnMode mode) { mode_ = mode; }

  bool trainable() const { return trainable_; }
  // Like a framework's layer.trainable: applies to gamma and beta.
  void set_trainable(bool flag) {
    trainable_ = flag;
    if (gamma_) gamma_->set_trainable(flag);
    if (beta_) beta_->set_trainable(flag);
  }

  Parameter<T>* gamma() { return gamma_ ? &*gamma_ : nullptr; }
  Parameter<T>* beta() { return beta_ ? &*beta_ : nullptr; }
  const Tensor<T>& moving_mean() const { return moving_mean_; }
  const Tensor<T>& moving_var() const { return moving_var_; }
  Tensor<T>& moving_mean() { return moving_mean_; }
  Tensor<T>& moving_var() { return moving_var_; }

  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    return apply(detail::single_input(inputs, "batchnorm"));
  }

  Tensor<T> apply(const Tensor<T>& x) {
    if (x.rank() < 2 || x.shape().back() != channels_) {
      throw ShapeError("batch norm '" + name_ + "' expects " + std::to_string(channels_) + " channels, got shape " +
                       to_string(x.shape()));
    }
    Tensor<T> mu, var;
    if (mode_ == BnMode::Training) {
      const std::size_t count = x.size() / channels_;
      if (count < 2) {
        throw ShapeError("batch norm '" + name_ + "' in training mode needs at least 2 values per channel");
      }
      std::vector<std::size_t> axes(x.rank() - 1);
      std::iota(axes.begin(), axes.end(), 0);
      auto moments = reduce_moments(x, axes);
      update_moving_stats(moments.mean.data(), moments.variance.data());
      mu = moments.mean;
      var = moments.variance;
    } else {
      mu = moving_mean_.detach();
      var = moving_var_.detach();
    }
    const T eps = static_cast<T>(options_.epsilon);
    Tensor<T> denom = options_.denominator == BnDenominator::StdPlusEpsilon ? add_scalar(sqrt(var), eps)
                                                                            : sqrt(add_scalar(var, eps));
    Tensor<T> y = (x - mu) / denom;
    if (gamma_) y = y * gamma_->tensor();
    if (beta_) y = y + beta_->tensor();
    return y;
  }

  // moving <- momentum * moving + (1 - momentum) * batch. Values only; no
  // gradient flows into the moving statistics.
  void update_moving_stats(std::span<const T> batch_mean, std::span<const T> batch_var) {
    if (mode_ != BnMode::Training) {
      throw StateError("batch norm '" + name_ + "': moving statistics can only be updated in training mode");
    }
    if (batch_mean.size() != channels_ || batch_var.size() != channels_) {
      throw ShapeError("batch norm '" + name_ + "': statistics length mismatch");
    }
    const T m = static_cast<T>(options_.momentum);
    auto mm = moving_mean_.mutable_data();
    auto mv = moving_var_.mutable_data();
    for (std::size_t c = 0; c < channels_; ++c) {
      mm[c] = m * mm[c] + (T(1) - m) * batch_mean[c];
      mv[c] = std::max(T(0), m * mv[c] + (T(1) - m) * batch_var[c]);
    }
  }

  std::vector<Parameter<T>*> parameters() override {
    std::vector<Parameter<T>*> out;
    if (gamma_) out.push_back(&*gamma_);
    if (beta_) out.push_back(&*beta_);
    return out;
  }

  std::vector<Buffer<T>> buffers() override {
    return {{name_ + "/moving_mean", &moving_mean_}, {name_ + "/moving_var", &moving_var_}};
  }

 private:
  std::string name_;
  std::size_t channels_;
  BatchNormOptions options_;
  std::optional<Parameter<T>> gamma_;
  std::optional<Parameter<T>> beta_;
  Tensor<T> moving_mean_;
  Tensor<T> moving_var_;
  BnMode mode_ = BnMode::Inference;
  bool trainable_ = true;
};

template <class T>
class DropoutLayer final : public Layer<T> {
 public:
  explicit DropoutLayer(double p) : p_(p) {
    if (p < 0.0 || p >= 1.0) throw SpecError("dropout rate must be in [0,1)");
  }
  std::string kind() const override { return "dropout"; }
  double rate() const { return p_; }
  bool active() const { return active_; }
  void set_active(bool flag) { active_ = flag; }

  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext& ctx) override {
    const auto& x = detail::single_input(inputs, "dropout");
    if (!active_ || p_ == 0.0) return x;
    if (!ctx.rng) throw StateError("active dropout needs a random stream");
    return dropout(x, p_, *ctx.rng);
  }

 private:
  double p_;
  bool active_ = false;
};

enum class ActivationKind { Relu, Softmax, Sigmoid };

template <class T>
class ActivationLayer final : public Layer<T> {
 public:
  explicit ActivationLayer(ActivationKind kind) : kind_(kind) {}
  std::string kind() const override {
    switch (kind_) {
      case ActivationKind::Relu: return "relu";
      case ActivationKind::Softmax: return "softmax";
      case ActivationKind::Sigmoid: return "sigmoid";
    }
    return "?";
  }
  ActivationKind activation() const { return kind_; }

  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    const auto& x = detail::single_input(inputs, "activation");
    switch (kind_) {
      case ActivationKind::Relu: return relu(x);
      case ActivationKind::Softmax: return softmax(x);
      case ActivationKind::Sigmoid: return sigmoid(x);
    }
    throw Error("unknown activation");
  }

 private:
  ActivationKind kind_;
};

template <class T>
class GlobalAvgPoolLayer final : public Layer<T> {
 public:
  std::string kind() const override { return "gap"; }
  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    return global_avg_pool(detail::single_input(inputs, "gap"));
  }
};

template <class T>
class AvgPoolLayer final : public Layer<T> {
 public:
  explicit AvgPoolLayer(std::size_t pool) : pool_(pool) {}
  std::string kind() const override { return "avgpool"; }
  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    return avg_pool2d(detail::single_input(inputs, "avgpool"), pool_);
  }

 private:
  std::size_t pool_;
};

template <class T>
class AddLayer final : public Layer<T> {
 public:
  std::string kind() const override { return "add"; }
  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    if (inputs.size() < 2) throw SpecError("add needs at least two inputs");
    Tensor<T> acc = inputs[0];
    for (std::size_t i = 1; i < inputs.size(); ++i) {
      if (inputs[i].shape() != acc.shape()) {
        throw ShapeError("add: shape mismatch " + to_string(acc.shape()) + " vs " + to_string(inputs[i].shape()));
      }
      acc = acc + inputs[i];
    }
    return acc;
  }
};

template <class T>
class ConcatLayer final : public Layer<T> {
 public:
  std::string kind() const override { return "concat"; }
  Tensor<T> forward(std::span<const Tensor<T>> inputs, ForwardContext&) override {
    return concat_last(std::vector<Tensor<T>>(inputs.begin(), inputs.end()));
  }
};

}  // namespace bnft
