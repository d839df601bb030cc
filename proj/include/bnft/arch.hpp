#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnft/errors.hpp"
#include "bnft/ops.hpp"

namespace bnft {

enum class LayerKind { Conv, BatchNorm, Relu, AvgPool, Add, Concat, GlobalAvgPool, Dropout, Dense, Softmax, Sigmoid };

inline const std::map<LayerKind, std::string>& layer_kind_names() {
  static const std::map<LayerKind, std::string> names = {
      {LayerKind::Conv, "conv"},       {LayerKind::BatchNorm, "batchnorm"}, {LayerKind::Relu, "relu"},
      {LayerKind::AvgPool, "avgpool"}, {LayerKind::Add, "add"},             {LayerKind::Concat, "concat"},
      {LayerKind::GlobalAvgPool, "gap"}, {LayerKind::Dropout, "dropout"},   {LayerKind::Dense, "dense"},
      {LayerKind::Softmax, "softmax"}, {LayerKind::Sigmoid, "sigmoid"}};
  return names;
}

inline std::string to_string(LayerKind kind) { return layer_kind_names().at(kind); }

inline LayerKind parse_layer_kind(const std::string& s) {
  for (const auto& [k, name] : layer_kind_names())
    if (name == s) return k;
  throw SpecError("unknown layer type '" + s + "'");
}

// One backbone layer. `inputs` empty means "the previous layer" (or the
// network input for the first layer). Only the fields relevant to `kind` are
// serialised.
struct LayerDesc {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  std::vector<std::string> inputs;
  std::size_t filters = 0;
  std::size_t kernel = 3;
  int stride = 1;
  Padding padding = Padding::Same;
  bool scale = true;
  bool center = true;
  std::size_t pool = 2;
  std::size_t units = 0;
  double rate = 0.5;

  bool operator==(const LayerDesc&) const = default;
};

// A backbone: everything up to, but not including, the classification head.
struct ArchSpec {
  std::string name;
  Shape input_shape;  // H, W, C
  std::vector<LayerDesc> layers;

  bool operator==(const ArchSpec&) const = default;
};

inline constexpr const char* kInputName = "input";

inline nlohmann::json to_json(const LayerDesc& d) {
  nlohmann::json j;
  j["name"] = d.name;
  j["type"] = to_string(d.kind);
  if (!d.inputs.empty()) j["inputs"] = d.inputs;
  switch (d.kind) {
    case LayerKind::Conv:
      j["filters"] = d.filters;
      j["kernel"] = d.kernel;
      j["stride"] = d.stride;
      j["padding"] = d.padding == Padding::Same ? "same" : "valid";
      break;
    case LayerKind::BatchNorm:
      j["scale"] = d.scale;
      j["center"] = d.center;
      break;
    case LayerKind::AvgPool:
      j["pool"] = d.pool;
      break;
    case LayerKind::Dense:
      j["units"] = d.units;
      break;
    case LayerKind::Dropout:
      j["rate"] = d.rate;
      break;
    default:
      break;
  }
  return j;
}

inline LayerDesc layer_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SpecError("layer descriptor must be an object");
  LayerDesc d;
  d.name = j.at("name").get<std::string>();
  d.kind = parse_layer_kind(j.at("type").get<std::string>());
  std::set<std::string> allowed = {"name", "type", "inputs"};
  switch (d.kind) {
    case LayerKind::Conv: allowed.insert({"filters", "kernel", "stride", "padding"}); break;
    case LayerKind::BatchNorm: allowed.insert({"scale", "center"}); break;
    case LayerKind::AvgPool: allowed.insert("pool"); break;
    case LayerKind::Dense: allowed.insert("units"); break;
    case LayerKind::Dropout: allowed.insert("rate"); break;
    default: break;
  }
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw SpecError("layer '" + d.name + "': unknown key '" + key + "'");
  }
  if (j.contains("inputs")) d.inputs = j["inputs"].get<std::vector<std::string>>();
  if (d.kind == LayerKind::Conv) {
    d.filters = j.at("filters").get<std::size_t>();
    d.kernel = j.value("kernel", std::size_t{3});
    d.stride = j.value("stride", 1);
    const auto pad = j.value("padding", std::string("same"));
    if (pad != "same" && pad != "valid") throw SpecError("layer '" + d.name + "': padding must be same|valid");
    d.padding = pad == "same" ? Padding::Same : Padding::Valid;
  }
  if (d.kind == LayerKind::BatchNorm) {
    d.scale = j.value("scale", true);
    d.center = j.value("center", true);
  }
  if (d.kind == LayerKind::AvgPool) d.pool = j.value("pool", std::size_t{2});
  if (d.kind == LayerKind::Dense) d.units = j.at("units").get<std::size_t>();
  if (d.kind == LayerKind::Dropout) d.rate = j.value("rate", 0.5);
  return d;
}

inline nlohmann::json to_json(const ArchSpec& spec) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["name"] = spec.name;
  j["input_shape"] = spec.input_shape;
  j["layers"] = nlohmann::json::array();
  for (const auto& d : spec.layers) j["layers"].push_back(to_json(d));
  return j;
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "format_version" && key != "name" && key != "input_shape" && key != "layers") {
      throw SpecError("architecture spec: unknown key '" + key + "'");
    }
  }
  if (j.value("format_version", 1) != 1) throw SpecError("architecture spec: unsupported format_version");
  ArchSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& l : j.at("layers")) spec.layers.push_back(layer_from_json(l));
  return spec;
}

// FNV-1a over the canonical serialisation. Identifies a backbone in checkpoints.
inline std::uint64_t spec_hash(const ArchSpec& spec) {
  const std::string text = to_json(spec).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct MiniNetOptions {
  std::size_t image_size = 16;
  std::size_t input_channels = 3;
  std::size_t base_channels = 16;
  std::size_t blocks = 3;
  bool residual = false;
};

// stem conv3x3(C0) -> relu -> k x [conv3x3, bn, relu, conv3x3, bn, (+skip), relu,
// avgpool2x2], channels C0, 2*C0, 4*C0, ... The residual variant adds the
// first relu output of a block to its second bn output.
inline ArchSpec mininet_spec(const MiniNetOptions& opt = {}) {
  ArchSpec spec;
  spec.name = opt.residual ? "MiniNet-Residual" : "MiniNet";
  spec.input_shape = {opt.image_size, opt.image_size, opt.input_channels};
  auto conv = [](std::string name, std::size_t filters) {
    LayerDesc d;
    d.name = std::move(name);
    d.kind = LayerKind::Conv;
    d.filters = filters;
    d.kernel = 3;
    return d;
  };
  auto simple = [](std::string name, LayerKind kind) {
    LayerDesc d;
    d.name = std::move(name);
    d.kind = kind;
    return d;
  };
  spec.layers.push_back(conv("stem_conv", opt.base_channels));
  spec.layers.push_back(simple("stem_relu", LayerKind::Relu));
  std::size_t channels = opt.base_channels;
  for (std::size_t b = 1; b <= opt.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + "_";
    spec.layers.push_back(conv(p + "conv1", channels));
    spec.layers.push_back(simple(p + "bn1", LayerKind::BatchNorm));
    spec.layers.push_back(simple(p + "relu1", LayerKind::Relu));
    spec.layers.push_back(conv(p + "conv2", channels));
    spec.layers.push_back(simple(p + "bn2", LayerKind::BatchNorm));
    if (opt.residual) {
      auto add = simple(p + "add", LayerKind::Add);
      add.inputs = {p + "relu1", p + "bn2"};
      spec.layers.push_back(add);
    }
    spec.layers.push_back(simple(p + "relu2", LayerKind::Relu));
    spec.layers.push_back(simple(p + "pool", LayerKind::AvgPool));
    channels *= 2;
  }
  return spec;
}

}  // namespace bnft
