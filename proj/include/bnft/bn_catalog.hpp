#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnft/errors.hpp"

namespace bnft {

// Batch-norm layer inventory of a full-size architecture. Used for parameter
// accounting only; these networks are never instantiated.
struct BnCatalogLayer {
  std::string name;
  std::size_t channels = 0;
  bool scale = true;
  bool center = true;

  bool operator==(const BnCatalogLayer&) const = default;
};

struct BnCatalogEntry {
  std::string architecture;
  std::string derivation;  // free-text provenance of the layer list
  std::vector<BnCatalogLayer> layers;

  bool operator==(const BnCatalogEntry&) const = default;
};

// Sum over layers of channels * (scale + center).
inline std::uint64_t count_bn_trainable(const BnCatalogEntry& entry) {
  std::uint64_t total = 0;
  for (const auto& l : entry.layers) total += l.channels * (static_cast<unsigned>(l.scale) + static_cast<unsigned>(l.center));
  return total;
}

inline std::uint64_t count_bn_channels(const BnCatalogEntry& entry) {
  std::uint64_t total = 0;
  for (const auto& l : entry.layers) total += l.channels;
  return total;
}

namespace catalog {

// DenseNet-121: growth 32, blocks (6, 12, 24, 16), bottleneck width 4*growth,
// transition compression 0.5. Every BN has scale and center.
inline BnCatalogEntry densenet121() {
  BnCatalogEntry e{"DenseNet121",
                   "stem BN(64); per dense layer BN(in) + BN(128); transition BN(in) then halve; final BN",
                   {}};
  const std::size_t growth = 32;
  const std::size_t blocks[] = {6, 12, 24, 16};
  std::size_t channels = 64;
  e.layers.push_back({"conv1/bn", channels, true, true});
  for (std::size_t b = 0; b < 4; ++b) {
    const std::string blk = "conv" + std::to_string(b + 2) + "_block";
    for (std::size_t i = 0; i < blocks[b]; ++i) {
      const std::string p = blk + std::to_string(i + 1);
      e.layers.push_back({p + "_0_bn", channels, true, true});
      e.layers.push_back({p + "_1_bn", 4 * growth, true, true});
      channels += growth;
    }
    if (b < 3) {
      e.layers.push_back({"pool" + std::to_string(b + 2) + "_bn", channels, true, true});
      channels /= 2;
    }
  }
  e.layers.push_back({"bn", channels, true, true});
  return e;
}

// ResNet-50 v2 (pre-activation): stacks of (filters, blocks) = (64,3),
// (128,4), (256,6), (512,3); each block has a preact BN on its input plus
// BNs after its 1x1 and 3x3 convs; a final post BN on 2048 channels.
inline BnCatalogEntry resnet50v2() {
  BnCatalogEntry e{"ResNet50V2", "per block BN(in) preact + 2 x BN(filters); post BN(2048); no stem BN", {}};
  const std::size_t filters[] = {64, 128, 256, 512};
  const std::size_t blocks[] = {3, 4, 6, 3};
  std::size_t in = 64;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      const std::string p = "conv" + std::to_string(s + 2) + "_block" + std::to_string(b + 1);
      e.layers.push_back({p + "_preact_bn", in, true, true});
      e.layers.push_back({p + "_1_bn", filters[s], true, true});
      e.layers.push_back({p + "_2_bn", filters[s], true, true});
      in = 4 * filters[s];
    }
  }
  e.layers.push_back({"post_bn", in, true, true});
  return e;
}

// Inception v3: one BN per conv, offset only (no scale), in module order.
inline BnCatalogEntry inceptionv3() {
  BnCatalogEntry e{"InceptionV3", "one center-only BN per conv2d_bn, stem through mixed10", {}};
  std::size_t n = 0;
  auto bn = [&](std::size_t c) { e.layers.push_back({"batch_normalization_" + std::to_string(++n), c, false, true}); };
  for (std::size_t c : {32, 32, 64, 80, 192}) bn(c);  // stem
  // mixed0..2: 1x1(64); 5x5 (48, 64); 3x3dbl (64, 96, 96); pool proj (32|64|64)
  for (std::size_t pool : {32, 64, 64}) {
    for (std::size_t c : {64, 48, 64, 64, 96, 96}) bn(c);
    bn(pool);
  }
  // mixed3: 3x3(384); 3x3dbl (64, 96, 96)
  for (std::size_t c : {384, 64, 96, 96}) bn(c);
  // mixed4..7: 1x1(192); 7x7 (w, w, 192); 7x7dbl (w x4, 192); pool proj 192
  for (std::size_t w : {128, 160, 160, 192}) {
    bn(192);
    for (std::size_t c : {w, w, std::size_t{192}}) bn(c);
    for (std::size_t c : {w, w, w, w, std::size_t{192}}) bn(c);
    bn(192);
  }
  // mixed8: 3x3 (192, 320); 7x7x3 (192 x4)
  for (std::size_t c : {192, 320, 192, 192, 192, 192}) bn(c);
  // mixed9..10: 1x1(320); 3x3 (384, 384, 384); 3x3dbl (448, 384, 384, 384); pool proj 192
  for (int m = 0; m < 2; ++m) {
    for (std::size_t c : {320, 384, 384, 384, 448, 384, 384, 384, 192}) bn(c);
  }
  return e;
}

// EfficientNet filter rounding with width coefficient and divisor 8.
inline std::size_t round_filters(std::size_t filters, double width, std::size_t divisor = 8) {
  const double f = static_cast<double>(filters) * width;
  std::size_t rounded = std::max(divisor, static_cast<std::size_t>(f + divisor / 2.0) / divisor * divisor);
  if (static_cast<double>(rounded) < 0.9 * f) rounded += divisor;
  return rounded;
}

inline std::size_t round_repeats(std::size_t repeats, double depth) {
  return static_cast<std::size_t>(std::ceil(depth * static_cast<double>(repeats)));
}

// EfficientNet-B3 (width 1.2, depth 1.4) from the B0 block table. MBConv
// blocks carry BN after expansion (when expand != 1), after the depthwise
// conv, and after the projection; plus stem and top BNs.
inline BnCatalogEntry efficientnetb3() {
  BnCatalogEntry e{"EfficientNetB3", "B0 block table scaled by width 1.2 / depth 1.4; stem, MBConv, top BNs", {}};
  struct Block {
    std::size_t repeats, in, out, expand;
  };
  const Block table[] = {{1, 32, 16, 1},   {2, 16, 24, 6},   {2, 24, 40, 6},  {3, 40, 80, 6},
                         {3, 80, 112, 6},  {4, 112, 192, 6}, {1, 192, 320, 6}};
  const double width = 1.2, depth = 1.4;
  e.layers.push_back({"stem_bn", round_filters(32, width), true, true});
  for (std::size_t b = 0; b < 7; ++b) {
    std::size_t in = round_filters(table[b].in, width);
    const std::size_t out = round_filters(table[b].out, width);
    const std::size_t reps = round_repeats(table[b].repeats, depth);
    for (std::size_t r = 0; r < reps; ++r) {
      const std::string p = "block" + std::to_string(b + 1) + static_cast<char>('a' + r);
      const std::size_t expanded = in * table[b].expand;
      if (table[b].expand != 1) e.layers.push_back({p + "_expand_bn", expanded, true, true});
      e.layers.push_back({p + "_bn", expanded, true, true});
      e.layers.push_back({p + "_project_bn", out, true, true});
      in = out;
    }
  }
  e.layers.push_back({"top_bn", round_filters(1280, width), true, true});
  return e;
}

inline std::vector<BnCatalogEntry> builtin() { return {densenet121(), resnet50v2(), inceptionv3(), efficientnetb3()}; }

}  // namespace catalog

inline nlohmann::json to_json(const BnCatalogEntry& e) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["architecture"] = e.architecture;
  j["derivation"] = e.derivation;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : e.layers) {
    j["layers"].push_back({{"name", l.name}, {"channels", l.channels}, {"scale", l.scale}, {"center", l.center}});
  }
  return j;
}

inline BnCatalogEntry catalog_from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1) throw SpecError("catalog: unsupported or missing format_version");
  BnCatalogEntry e;
  e.architecture = j.at("architecture").get<std::string>();
  e.derivation = j.value("derivation", std::string());
  for (const auto& l : j.at("layers")) {
    BnCatalogLayer layer{l.at("name").get<std::string>(), l.at("channels").get<std::size_t>(),
                         l.at("scale").get<bool>(), l.at("center").get<bool>()};
    if (layer.channels == 0) throw SpecError("catalog " + e.architecture + ": layer '" + layer.name + "' has zero channels");
    e.layers.push_back(std::move(layer));
  }
  return e;
}

inline BnCatalogEntry load_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open catalog file '" + path + "'");
  try {
    return catalog_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& ex) {
    throw SpecError("catalog file '" + path + "': " + ex.what());
  }
}

}  // namespace bnft
