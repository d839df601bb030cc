#pragma once

// Byte layout (all integers little-endian):
//   "BNFTCKPT"                     8 bytes magic
//   u32  format version (1)
//   u64  metadata length, then that many bytes of JSON metadata
//   u64  array count, then per array:
//        u32 name length, name bytes, u32 rank, rank x u64 extents,
//        numel x f32 (IEEE-754 binary32, little-endian)

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnft/arch.hpp"
#include "bnft/errors.hpp"
#include "bnft/model.hpp"

namespace bnft {

inline constexpr char kCheckpointMagic[8] = {'B', 'N', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string architecture;
  std::uint64_t spec_hash = 0;
  std::uint64_t seed = 0;
  std::size_t phase = 0;
  std::size_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  CheckpointMeta meta;
  StateDict<float> arrays;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline nlohmann::json to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["architecture"] = m.architecture;
  j["spec_hash"] = detail::hex64(m.spec_hash);
  j["seed"] = m.seed;
  j["phase"] = m.phase;
  j["epoch"] = m.epoch;
  // JSON has no infinity; null stands for "no validation loss yet".
  if (std::isfinite(m.best_val_loss)) {
    j["best_val_loss"] = m.best_val_loss;
  } else {
    j["best_val_loss"] = nullptr;
  }
  j["extra"] = m.extra;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.architecture = j.at("architecture").get<std::string>();
  m.spec_hash = std::stoull(j.at("spec_hash").get<std::string>(), nullptr, 16);
  m.seed = j.at("seed").get<std::uint64_t>();
  m.phase = j.at("phase").get<std::size_t>();
  m.epoch = j.at("epoch").get<std::size_t>();
  const auto& loss = j.at("best_val_loss");
  m.best_val_loss = loss.is_null() ? std::numeric_limits<double>::infinity() : loss.get<double>();
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = to_json(ckpt.meta).dump();
  detail::put_u64(out, meta.size());
  out += meta;
  detail::put_u64(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (a.values.size() != numel(a.shape)) throw CheckpointError("array '" + a.name + "' length does not match its shape");
    detail::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put_u64(out, d);
    for (float v : a.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  if (in.take(8) != std::string(kCheckpointMagic, 8)) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = in.uint(4);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  try {
    ckpt.meta = meta_from_json(nlohmann::json::parse(in.take(in.uint(8))));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = in.uint(8);
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedArray<float> a;
    a.name = in.take(in.uint(4));
    const auto rank = in.uint(4);
    for (std::uint64_t r = 0; r < rank; ++r) a.shape.push_back(in.uint(8));
    const std::size_t n = numel(a.shape);
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    ckpt.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after the last array");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(std::move(bytes));
  } catch (const CheckpointError& e) {
    throw CheckpointError("'" + path.string() + "': " + e.what());
  }
}

template <class T>
StateDict<float> to_float_state(const StateDict<T>& state) {
  StateDict<float> out;
  for (const auto& a : state) out.push_back({a.name, a.shape, std::vector<float>(a.values.begin(), a.values.end())});
  return out;
}

template <class T>
Checkpoint make_checkpoint(Model<T>& model, CheckpointMeta meta) {
  meta.architecture = model.spec().name;
  meta.spec_hash = spec_hash(model.spec());
  return {std::move(meta), to_float_state(model.state_dict())};
}

template <class T>
Checkpoint make_checkpoint(const Model<T>& model, const StateDict<T>& state, CheckpointMeta meta) {
  meta.architecture = model.spec().name;
  meta.spec_hash = spec_hash(model.spec());
  return {std::move(meta), to_float_state(state)};
}

// Loads weights after checking that the checkpoint was produced for the same
// backbone spec. backbone_only skips head arrays (pretrained checkpoints carry
// none or a head of a different width).
template <class T>
void apply_checkpoint(Model<T>& model, const Checkpoint& ckpt, bool backbone_only = false) {
  const auto expected = spec_hash(model.spec());
  if (ckpt.meta.spec_hash != expected) {
    throw CheckpointError("checkpoint spec hash " + detail::hex64(ckpt.meta.spec_hash) + " (" + ckpt.meta.architecture +
                          ") does not match model spec hash " + detail::hex64(expected) + " (" + model.spec().name + ")");
  }
  StateDict<T> state;
  for (const auto& a : ckpt.arrays) state.push_back({a.name, a.shape, std::vector<T>(a.values.begin(), a.values.end())});
  model.load_state_dict(state, backbone_only);
}

}  // namespace bnft
