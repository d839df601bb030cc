#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "bnft/arch.hpp"
#include "bnft/errors.hpp"
#include "bnft/layers.hpp"

namespace bnft {

enum class LabelKind { Categorical, Multilabel };

inline std::string to_string(LabelKind k) { return k == LabelKind::Categorical ? "categorical" : "multilabel"; }

inline LabelKind parse_label_kind(const std::string& s) {
  if (s == "categorical") return LabelKind::Categorical;
  if (s == "multilabel") return LabelKind::Multilabel;
  throw SpecError("unknown label kind '" + s + "'");
}

enum class ParamSelector { All, HeadOnly, HeadPlusBNAffine, BNAffineOnly };

inline std::string to_string(ParamSelector s) {
  switch (s) {
    case ParamSelector::All: return "all";
    case ParamSelector::HeadOnly: return "head";
    case ParamSelector::HeadPlusBNAffine: return "head+bn-affine";
    case ParamSelector::BNAffineOnly: return "bn-affine";
  }
  return "?";
}

inline ParamSelector parse_selector(const std::string& s) {
  if (s == "all" || s == "All") return ParamSelector::All;
  if (s == "head" || s == "HeadOnly") return ParamSelector::HeadOnly;
  if (s == "head+bn-affine" || s == "HeadPlusBNAffine") return ParamSelector::HeadPlusBNAffine;
  if (s == "bn-affine" || s == "BNAffineOnly") return ParamSelector::BNAffineOnly;
  throw SpecError("unknown parameter selector '" + s + "'");
}

template <class T>
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<T> values;

  bool operator==(const NamedArray&) const = default;
};

// Name-ordered snapshot of every parameter and buffer.
template <class T>
using StateDict = std::vector<NamedArray<T>>;

inline constexpr const char* kBackbonePrefix = "backbone/";
inline constexpr const char* kHeadPrefix = "head/";

struct BuildOptions {
  BatchNormOptions batchnorm;  // scale/center are taken from each descriptor
  double head_dropout = 0.5;
};

template <class T>
class Model;

template <class T>
Model<T> build_model(const ArchSpec& spec, std::size_t num_outputs, LabelKind label_kind, std::uint64_t seed,
                     const BuildOptions& options = {});

// Backbone graph plus the classification head: [gap] -> dropout -> dense ->
// softmax|sigmoid.
template <class T>
class Model {
 public:
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ArchSpec& spec() const { return spec_; }
  LabelKind label_kind() const { return label_kind_; }
  std::size_t num_outputs() const { return num_outputs_; }
  std::size_t feature_width() const { return feature_width_; }

  // Pre-activation outputs of the head.
  Tensor<T> logits(const Tensor<T>& x, Rng* rng = nullptr) {
    ForwardContext ctx{rng};
    return run(x, ctx, logits_index_);
  }

  Tensor<T> forward(const Tensor<T>& x, Rng* rng = nullptr) {
    ForwardContext ctx{rng};
    return run(x, ctx, nodes_.size() - 1);
  }

  // Every parameter in name order.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& n : nodes_)
      for (auto* p : n.layer->parameters()) out.push_back(p);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->name() < b->name(); });
    return out;
  }

  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    for (auto& n : nodes_)
      for (auto& b : n.layer->buffers()) out.push_back(b);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
  }

  const std::vector<BatchNormLayer<T>*>& batchnorm_layers() const { return bns_; }
  DropoutLayer<T>& head_dropout() { return *dropout_; }

  StateDict<T> state_dict() {
    StateDict<T> out;
    for (auto* p : parameters()) out.push_back({p->name(), p->tensor().shape(), p->tensor().vec()});
    for (auto& b : buffers()) out.push_back({b.name, b.tensor->shape(), b.tensor->vec()});
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
  }

  // Copies matching arrays in. With backbone_only, arrays outside the backbone
  // are ignored and every backbone array must be present.
  void load_state_dict(const StateDict<T>& state, bool backbone_only = false) {
    std::unordered_map<std::string, const NamedArray<T>*> by_name;
    for (const auto& a : state) by_name[a.name] = &a;
    auto assign = [&](const std::string& name, Tensor<T>& target) {
      if (backbone_only && name.rfind(kBackbonePrefix, 0) != 0) return;
      auto it = by_name.find(name);
      if (it == by_name.end()) throw CheckpointError("state is missing array '" + name + "'");
      if (it->second->shape != target.shape()) {
        throw CheckpointError("array '" + name + "' has shape " + to_string(it->second->shape) + ", expected " +
                              to_string(target.shape()));
      }
      std::copy(it->second->values.begin(), it->second->values.end(), target.mutable_data().begin());
    };
    for (auto* p : parameters()) assign(p->name(), p->tensor());
    for (auto& b : buffers()) assign(b.name, *b.tensor);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
  }

  friend Model<T> build_model<T>(const ArchSpec&, std::size_t, LabelKind, std::uint64_t, const BuildOptions&);

 private:
  struct GraphNode {
    std::string name;
    std::unique_ptr<Layer<T>> layer;
    std::vector<std::size_t> inputs;  // indices into values; 0 is the network input
  };

  Model() = default;

  Tensor<T> run(const Tensor<T>& x, ForwardContext& ctx, std::size_t last) {
    if (x.rank() != 4 || x.dim(1) != spec_.input_shape[0] || x.dim(2) != spec_.input_shape[1] ||
        x.dim(3) != spec_.input_shape[2]) {
      throw ShapeError("model '" + spec_.name + "' expects input (N," + std::to_string(spec_.input_shape[0]) + "," +
                       std::to_string(spec_.input_shape[1]) + "," + std::to_string(spec_.input_shape[2]) +
                       "), got " + to_string(x.shape()));
    }
    std::vector<Tensor<T>> values(nodes_.size() + 1);
    values[0] = x;
    std::vector<Tensor<T>> args;
    for (std::size_t i = 0; i <= last; ++i) {
      args.clear();
      for (auto k : nodes_[i].inputs) args.push_back(values[k]);
      values[i + 1] = nodes_[i].layer->forward(args, ctx);
      // Release intermediates nobody reads any more.
      for (auto k : release_after_[i]) values[k] = Tensor<T>();
    }
    return values[last + 1];
  }

  ArchSpec spec_;
  LabelKind label_kind_ = LabelKind::Categorical;
  std::size_t num_outputs_ = 0;
  std::size_t feature_width_ = 0;
  std::vector<GraphNode> nodes_;
  std::vector<std::vector<std::size_t>> release_after_;
  std::vector<BatchNormLayer<T>*> bns_;
  DropoutLayer<T>* dropout_ = nullptr;
  std::size_t logits_index_ = 0;
};

// Builds backbone + head. Every layer draws its initial weights from a stream
// derived from (seed, layer name), so initialisation is independent of layer
// order and the head initialises identically for pretrained and random runs.
template <class T>
Model<T> build_model(const ArchSpec& spec, std::size_t num_outputs, LabelKind label_kind, std::uint64_t seed,
                     const BuildOptions& options) {
  if (num_outputs < 1) throw SpecError("num_outputs must be at least 1");
  if (spec.input_shape.size() != 3 || numel(spec.input_shape) == 0) {
    throw SpecError("input_shape must be (H, W, C) with positive extents");
  }
  if (spec.layers.empty()) throw SpecError("architecture '" + spec.name + "' has no layers");
  Model<T> model;
  model.spec_ = spec;
  model.label_kind_ = label_kind;
  model.num_outputs_ = num_outputs;
  const Rng root(seed);

  // Shape inference over (H, W, C) or (F).
  std::vector<Shape> shapes = {spec.input_shape};
  std::map<std::string, std::size_t> index = {{kInputName, 0}};
  std::set<std::string> all_names;
  for (const auto& d : spec.layers) {
    if (d.name.empty() || d.name == kInputName) throw SpecError("invalid layer name '" + d.name + "'");
    if (!all_names.insert(d.name).second) throw SpecError("duplicate layer name '" + d.name + "'");
  }
  std::vector<std::size_t> consumers(spec.layers.size() + 1, 0);

  auto add_node = [&](const std::string& full_name, std::unique_ptr<Layer<T>> layer, std::vector<std::size_t> inputs,
                      Shape out_shape) {
    for (auto k : inputs) {
      if (k >= consumers.size()) consumers.resize(k + 1, 0);
      ++consumers[k];
    }
    model.nodes_.push_back({full_name, std::move(layer), std::move(inputs)});
    shapes.push_back(std::move(out_shape));
  };

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& d = spec.layers[li];
    std::vector<std::size_t> inputs;
    if (d.inputs.empty()) {
      inputs.push_back(li);  // previous value
    } else {
      for (const auto& in : d.inputs) {
        auto it = index.find(in);
        if (it == index.end()) {
          if (all_names.count(in)) {
            throw SpecError("layer '" + d.name + "' consumes '" + in + "' which is not defined before it (cycle)");
          }
          throw SpecError("layer '" + d.name + "' has dangling input edge '" + in + "'");
        }
        inputs.push_back(it->second);
      }
    }
    const Shape& in_shape = shapes[inputs[0]];
    const bool spatial = in_shape.size() == 3;
    const std::string full = std::string(kBackbonePrefix) + d.name;
    Rng rng = root.derive(fnv1a(full));
    auto need_spatial = [&](const char* what) {
      if (!spatial) throw SpecError("layer '" + d.name + "' (" + what + ") needs a spatial input");
    };
    if (d.kind != LayerKind::Add && d.kind != LayerKind::Concat && inputs.size() != 1) {
      throw SpecError("layer '" + d.name + "' takes exactly one input");
    }
    switch (d.kind) {
      case LayerKind::Conv: {
        need_spatial("conv");
        if (d.filters == 0 || d.kernel == 0) throw SpecError("layer '" + d.name + "': filters/kernel must be positive");
        if (d.stride <= 0) throw SpecError("layer '" + d.name + "': stride must be positive");
        const auto gy = conv_geometry(in_shape[0], d.kernel, static_cast<std::size_t>(d.stride), d.padding);
        const auto gx = conv_geometry(in_shape[1], d.kernel, static_cast<std::size_t>(d.stride), d.padding);
        add_node(full,
                 std::make_unique<Conv2DLayer<T>>(full, d.kernel, in_shape[2], d.filters, d.stride, d.padding, rng),
                 inputs, {gy.out, gx.out, d.filters});
        break;
      }
      case LayerKind::BatchNorm: {
        auto bn_opt = options.batchnorm;
        bn_opt.scale = d.scale;
        bn_opt.center = d.center;
        auto layer = std::make_unique<BatchNormLayer<T>>(full, in_shape.back(), bn_opt);
        model.bns_.push_back(layer.get());
        add_node(full, std::move(layer), inputs, in_shape);
        break;
      }
      case LayerKind::Relu:
        add_node(full, std::make_unique<ActivationLayer<T>>(ActivationKind::Relu), inputs, in_shape);
        break;
      case LayerKind::Softmax:
      case LayerKind::Sigmoid:
        throw SpecError("layer '" + d.name + "': output activations belong to the head, not the backbone");
      case LayerKind::AvgPool: {
        need_spatial("avgpool");
        if (d.pool == 0 || in_shape[0] < d.pool || in_shape[1] < d.pool) {
          throw SpecError("layer '" + d.name + "': pool window does not fit input " + to_string(in_shape));
        }
        add_node(full, std::make_unique<AvgPoolLayer<T>>(d.pool), inputs,
                 {in_shape[0] / d.pool, in_shape[1] / d.pool, in_shape[2]});
        break;
      }
      case LayerKind::Add: {
        if (inputs.size() < 2) throw SpecError("layer '" + d.name + "': add needs at least two inputs");
        for (auto k : inputs) {
          if (shapes[k] != in_shape) {
            throw SpecError("layer '" + d.name + "': channel/shape mismatch at merge " + to_string(in_shape) +
                            " vs " + to_string(shapes[k]));
          }
        }
        add_node(full, std::make_unique<AddLayer<T>>(), inputs, in_shape);
        break;
      }
      case LayerKind::Concat: {
        if (inputs.size() < 2) throw SpecError("layer '" + d.name + "': concat needs at least two inputs");
        Shape out = in_shape;
        out.back() = 0;
        for (auto k : inputs) {
          const Shape& s = shapes[k];
          if (s.size() != in_shape.size() || !std::equal(s.begin(), s.end() - 1, in_shape.begin())) {
            throw SpecError("layer '" + d.name + "': spatial mismatch at concat");
          }
          out.back() += s.back();
        }
        add_node(full, std::make_unique<ConcatLayer<T>>(), inputs, out);
        break;
      }
      case LayerKind::GlobalAvgPool:
        need_spatial("gap");
        add_node(full, std::make_unique<GlobalAvgPoolLayer<T>>(), inputs, {in_shape[2]});
        break;
      case LayerKind::Dropout:
        add_node(full, std::make_unique<DropoutLayer<T>>(d.rate), inputs, in_shape);
        break;
      case LayerKind::Dense: {
        if (spatial) throw SpecError("layer '" + d.name + "': dense needs a flat input");
        if (d.units == 0) throw SpecError("layer '" + d.name + "': units must be positive");
        add_node(full, std::make_unique<DenseLayer<T>>(full, in_shape[0], d.units, rng), inputs, {d.units});
        break;
      }
    }
    index[d.name] = li + 1;
  }

  // Single output: every backbone value except the last must be consumed.
  for (std::size_t k = 1; k < spec.layers.size(); ++k) {
    if (consumers[k] == 0) {
      throw SpecError("layer '" + spec.layers[k - 1].name + "' output is never consumed; the graph must have a single output");
    }
  }

  // Head.
  std::size_t cur = model.nodes_.size();
  if (shapes[cur].size() == 3) {
    add_node(std::string(kHeadPrefix) + "gap", std::make_unique<GlobalAvgPoolLayer<T>>(), {cur}, {shapes[cur][2]});
    cur = model.nodes_.size();
  }
  model.feature_width_ = shapes[cur][0];
  {
    auto drop = std::make_unique<DropoutLayer<T>>(options.head_dropout);
    model.dropout_ = drop.get();
    add_node(std::string(kHeadPrefix) + "dropout", std::move(drop), {cur}, shapes[cur]);
    cur = model.nodes_.size();
  }
  {
    const std::string name = std::string(kHeadPrefix) + "dense";
    Rng rng = root.derive(fnv1a(name));
    add_node(name, std::make_unique<DenseLayer<T>>(name, model.feature_width_, num_outputs, rng), {cur},
             {num_outputs});
    cur = model.nodes_.size();
  }
  model.logits_index_ = cur - 1;
  add_node(std::string(kHeadPrefix) + (label_kind == LabelKind::Categorical ? "softmax" : "sigmoid"),
           std::make_unique<ActivationLayer<T>>(label_kind == LabelKind::Categorical ? ActivationKind::Softmax
                                                                                     : ActivationKind::Sigmoid),
           {cur}, {num_outputs});

  // Value k (k >= 1 is node k-1's output; 0 is the input) can be dropped after
  // its last consumer runs.
  model.release_after_.assign(model.nodes_.size(), {});
  std::vector<std::size_t> last_use(model.nodes_.size() + 1, 0);
  for (std::size_t i = 0; i < model.nodes_.size(); ++i)
    for (auto k : model.nodes_[i].inputs) last_use[k] = i;
  for (std::size_t k = 0; k < last_use.size(); ++k) {
    if (k == model.logits_index_ + 1) continue;
    if (k <= model.nodes_.size() && k > 0 && last_use[k] > 0) model.release_after_[last_use[k]].push_back(k);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Mode and selector switches

template <class T>
void set_bn_mode(Model<T>& model, BnMode mode) {
  for (auto* bn : model.batchnorm_layers()) bn->set_mode(mode);
}

template <class T>
void set_bn_trainable(Model<T>& model, bool flag) {
  for (auto* bn : model.batchnorm_layers()) bn->set_trainable(flag);
}

inline bool selector_includes(ParamSelector selector, const std::string& name, bool is_bn_affine) {
  const bool head = name.rfind(kHeadPrefix, 0) == 0;
  switch (selector) {
    case ParamSelector::All: return true;
    case ParamSelector::HeadOnly: return head;
    case ParamSelector::HeadPlusBNAffine: return head || is_bn_affine;
    case ParamSelector::BNAffineOnly: return is_bn_affine;
  }
  throw SpecError("unknown selector");
}

// Name-ordered parameters picked by the selector.
template <class T>
std::vector<Parameter<T>*> enumerate_params(Model<T>& model, ParamSelector selector) {
  std::vector<Parameter<T>*> out;
  for (auto* p : model.parameters())
    if (selector_includes(selector, p->name(), p->is_bn_affine())) out.push_back(p);
  return out;
}

template <class T>
std::size_t count_scalars(const std::vector<Parameter<T>*>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

// Evaluation-time configuration (Inference batch norm, dropout off) for the
// lifetime of the guard; restores the previous settings afterwards.
template <class T>
class InferenceScope {
 public:
  explicit InferenceScope(Model<T>& model) : model_(model), dropout_active_(model.head_dropout().active()) {
    for (auto* bn : model.batchnorm_layers()) modes_.push_back(bn->mode());
    set_bn_mode(model, BnMode::Inference);
    model.head_dropout().set_active(false);
  }
  ~InferenceScope() {
    const auto& bns = model_.batchnorm_layers();
    for (std::size_t i = 0; i < bns.size(); ++i) bns[i]->set_mode(modes_[i]);
    model_.head_dropout().set_active(dropout_active_);
  }
  InferenceScope(const InferenceScope&) = delete;
  InferenceScope& operator=(const InferenceScope&) = delete;

 private:
  Model<T>& model_;
  std::vector<BnMode> modes_;
  bool dropout_active_;
};

}  // namespace bnft
