#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/model.hpp"
#include "bnft/rng.hpp"
#include "bnft/tensor.hpp"

namespace bnft {

namespace fs = std::filesystem;

// HWC image with values scaled to [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  Shape shape() const { return {height, width, channels}; }
  bool operator==(const Image&) const = default;
};

// ---------------------------------------------------------------------------
// Binary PPM (P6), 8-bit RGB.

namespace detail {
inline std::string next_ppm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}
}  // namespace detail

inline Shape read_ppm_shape(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  if (detail::next_ppm_token(in) != "P6") throw DataError("'" + path.string() + "' is not a binary PPM");
  const auto w = std::stoul(detail::next_ppm_token(in));
  const auto h = std::stoul(detail::next_ppm_token(in));
  return {h, w, 3};
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  if (detail::next_ppm_token(in) != "P6") throw DataError("'" + path.string() + "' is not a binary PPM");
  Image img;
  try {
    img.width = std::stoul(detail::next_ppm_token(in));
    img.height = std::stoul(detail::next_ppm_token(in));
    if (std::stoul(detail::next_ppm_token(in)) != 255) throw DataError("'" + path.string() + "' is not 8-bit");
  } catch (const std::logic_error&) {
    throw DataError("'" + path.string() + "' has a malformed PPM header");
  }
  const std::size_t n = img.width * img.height * 3;
  std::vector<unsigned char> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw DataError("'" + path.string() + "' is truncated");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(const fs::path& path, const Image& img) {
  if (img.channels != 3) throw DataError("PPM output needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image '" + path.string() + "'");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_byte(img.pixels[i]);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ---------------------------------------------------------------------------
// Manifest
//
//   <label_kind>,<H>x<W>x<C>,<label 1>,...,<label K>
//   <relative image path>,<y1>,...,<yK>[,<group>]

struct ManifestEntry {
  std::string path;  // relative to the manifest root
  std::vector<float> labels;
  std::string group;  // empty when the manifest has no groups
};

struct DatasetManifest {
  fs::path root;
  LabelKind label_kind = LabelKind::Categorical;
  Shape shape;  // H, W, C
  std::vector<std::string> label_names;
  std::vector<ManifestEntry> entries;

  bool has_groups() const { return !entries.empty() && !entries.front().group.empty(); }
  std::size_t num_labels() const { return label_names.size(); }

  Image load_image(std::size_t index) const {
    const auto& e = entries.at(index);
    Image img = read_ppm(root / e.path);
    if (img.shape() != shape) {
      throw DataError("entry " + std::to_string(index) + " ('" + e.path + "') decodes to " + to_string(img.shape()) +
                      " but the manifest declares " + to_string(shape));
    }
    return img;
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline Shape parse_shape(const std::string& s) {
  Shape shape;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      shape.push_back(std::stoul(part));
    } catch (const std::logic_error&) {
      throw DataError("bad shape '" + s + "'");
    }
  }
  if (shape.size() != 3 || numel(shape) == 0) throw DataError("shape must be HxWxC, got '" + s + "'");
  return shape;
}

inline void validate_labels(const DatasetManifest& m, const ManifestEntry& e, std::size_t index) {
  if (e.labels.size() != m.num_labels()) {
    throw DataError("entry " + std::to_string(index) + ": expected " + std::to_string(m.num_labels()) +
                    " labels, got " + std::to_string(e.labels.size()));
  }
  std::size_t ones = 0;
  for (float v : e.labels) {
    if (v != 0.0f && v != 1.0f) throw DataError("entry " + std::to_string(index) + ": labels must be 0 or 1");
    ones += v == 1.0f;
  }
  if (m.label_kind == LabelKind::Categorical && ones != 1) {
    throw DataError("entry " + std::to_string(index) + ": categorical labels must be one-hot");
  }
}

}  // namespace detail

inline std::string format_shape(const Shape& s) {
  return std::to_string(s.at(0)) + "x" + std::to_string(s.at(1)) + "x" + std::to_string(s.at(2));
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  out << to_string(m.label_kind) << ',' << format_shape(m.shape);
  for (const auto& n : m.label_names) out << ',' << n;
  out << '\n';
  for (const auto& e : m.entries) {
    out << e.path;
    for (float v : e.labels) out << ',' << (v == 1.0f ? 1 : 0);
    if (!e.group.empty()) out << ',' << e.group;
    out << '\n';
  }
}

// Class-per-subdirectory layout: <root>/<class>/<image>.ppm, classes sorted.
inline DatasetManifest load_folder_layout(const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  m.label_kind = LabelKind::Categorical;
  std::vector<fs::path> class_dirs;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) class_dirs.push_back(d.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw DataError("folder layout '" + root.string() + "' needs at least two class directories");
  for (const auto& d : class_dirs) m.label_names.push_back(d.filename().string());
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(class_dirs[c]))
      if (f.is_regular_file() && f.path().extension() == ".ppm") files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ManifestEntry e;
      e.path = fs::relative(f, root).generic_string();
      e.labels.assign(class_dirs.size(), 0.0f);
      e.labels[c] = 1.0f;
      m.entries.push_back(std::move(e));
    }
  }
  if (m.entries.empty()) throw DataError("folder layout '" + root.string() + "' contains no .ppm images");
  m.shape = read_ppm_shape(root / m.entries.front().path);
  return m;
}

// Parses and validates labels eagerly; images are only checked for existence
// here and decoded on demand.
inline DatasetManifest load_manifest(const fs::path& path) {
  if (fs::is_directory(path)) return load_folder_layout(path);
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest '" + path.string() + "' is empty");
  const auto header = detail::split_csv(line);
  if (header.size() < 3) throw DataError("manifest header needs label_kind, shape and at least one label name");
  try {
    m.label_kind = parse_label_kind(header[0]);
  } catch (const SpecError& e) {
    throw DataError(std::string("manifest header: ") + e.what());
  }
  m.shape = detail::parse_shape(header[1]);
  m.label_names.assign(header.begin() + 2, header.end());
  const std::size_t k = m.label_names.size();
  std::size_t grouped = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv(line);
    const std::size_t index = m.entries.size();
    if (fields.size() != k + 1 && fields.size() != k + 2) {
      throw DataError("entry " + std::to_string(index) + ": expected " + std::to_string(k) + " labels, got " +
                      std::to_string(fields.size() >= 1 ? fields.size() - 1 : 0) + " fields after the path");
    }
    ManifestEntry e;
    e.path = fields[0];
    for (std::size_t j = 0; j < k; ++j) {
      try {
        e.labels.push_back(std::stof(fields[j + 1]));
      } catch (const std::logic_error&) {
        throw DataError("entry " + std::to_string(index) + ": label '" + fields[j + 1] + "' is not a number");
      }
    }
    if (fields.size() == k + 2) {
      e.group = fields[k + 1];
      if (e.group.empty()) throw DataError("entry " + std::to_string(index) + ": empty group tag");
      ++grouped;
    }
    detail::validate_labels(m, e, index);
    if (!fs::exists(m.root / e.path)) {
      throw DataError("entry " + std::to_string(index) + ": missing image '" + (m.root / e.path).string() + "'");
    }
    m.entries.push_back(std::move(e));
  }
  if (grouped != 0 && grouped != m.entries.size()) {
    throw DataError("manifest '" + path.string() + "': group tags must be given for every entry or for none");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Splits

namespace detail {
// Largest-remainder apportionment of n items over fractions.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = static_cast<double>(n) * fractions[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    used += counts[i];
    rema.emplace_back(-(exact - static_cast<double>(counts[i])), i);
  }
  std::stable_sort(rema.begin(), rema.end());
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[rema[k % rema.size()].second];
  return counts;
}
}  // namespace detail

// Deterministic seeded partition of entry indices. Each split keeps its
// indices in ascending order.
inline std::vector<std::vector<std::size_t>> split(const DatasetManifest& m, const std::vector<double>& fractions,
                                                   std::uint64_t seed, bool group_aware) {
  if (fractions.empty()) throw DataError("split needs at least one fraction");
  double total = 0;
  for (double f : fractions) {
    if (f < 0) throw DataError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DataError("split fractions must sum to 1");
  const std::size_t n = m.entries.size();
  const auto targets = detail::apportion(n, fractions);
  std::vector<std::vector<std::size_t>> out(fractions.size());
  Rng rng(seed);

  if (!group_aware || !m.has_groups()) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::size_t pos = 0;
    for (std::size_t s = 0; s < targets.size(); ++s) {
      out[s].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + targets[s]));
      pos += targets[s];
    }
  } else {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[m.entries[i].group].push_back(i);
    std::vector<std::string> names;
    for (const auto& [g, _] : groups) names.push_back(g);
    rng.shuffle(names.begin(), names.end());
    const std::size_t largest_target = *std::max_element(targets.begin(), targets.end());
    std::vector<std::ptrdiff_t> deficit(targets.begin(), targets.end());
    for (const auto& g : names) {
      const auto& members = groups[g];
      if (members.size() > largest_target) {
        throw DataError("group '" + g + "' has " + std::to_string(members.size()) +
                        " entries, more than any target split (" + std::to_string(largest_target) + ")");
      }
      const auto s = static_cast<std::size_t>(std::max_element(deficit.begin(), deficit.end()) - deficit.begin());
      out[s].insert(out[s].end(), members.begin(), members.end());
      deficit[s] -= static_cast<std::ptrdiff_t>(members.size());
    }
  }
  for (auto& part : out) std::sort(part.begin(), part.end());
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double max_translate_frac = 0.10;
  double max_zoom_frac = 0.10;
  bool hflip = true;
  bool vflip = true;

  void validate() const {
    if (max_translate_frac < 0 || max_translate_frac > 0.5 || max_zoom_frac < 0 || max_zoom_frac > 0.5) {
      throw ConfigError("augmentation fractions must lie in [0, 0.5]");
    }
  }
};

struct AugmentParams {
  double shift_y = 0.0;  // pixels
  double shift_x = 0.0;
  double zoom = 1.0;  // > 1 magnifies
  bool hflip = false;
  bool vflip = false;
};

// Draws all five values every call so the stream advances identically
// regardless of which features are enabled.
inline AugmentParams sample_augment_params(const AugmentConfig& cfg, std::size_t height, std::size_t width, Rng& rng) {
  AugmentParams p;
  const double ty = rng.uniform(-1.0, 1.0), tx = rng.uniform(-1.0, 1.0), z = rng.uniform(-1.0, 1.0);
  const bool h = rng.bernoulli(0.5), v = rng.bernoulli(0.5);
  p.shift_y = ty * cfg.max_translate_frac * static_cast<double>(height);
  p.shift_x = tx * cfg.max_translate_frac * static_cast<double>(width);
  p.zoom = 1.0 + z * cfg.max_zoom_frac;
  p.hflip = cfg.hflip && h;
  p.vflip = cfg.vflip && v;
  return p;
}

// Half-sample symmetric reflection into [0, n).
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Zoom about the centre, then translate, then flip. Bilinear sampling with
// reflected borders; output shape equals input shape.
inline Image apply_augment(const Image& img, const AugmentParams& p) {
  Image out = img;
  const auto H = static_cast<std::ptrdiff_t>(img.height), W = static_cast<std::ptrdiff_t>(img.width);
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  const std::size_t C = img.channels;
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const std::ptrdiff_t ox = p.hflip ? W - 1 - x : x;
      const std::ptrdiff_t oy = p.vflip ? H - 1 - y : y;
      const double sy = cy + (static_cast<double>(y) - cy) / p.zoom - p.shift_y;
      const double sx = cx + (static_cast<double>(x) - cx) / p.zoom - p.shift_x;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      const auto y0 = reflect_index(static_cast<std::ptrdiff_t>(fy), H);
      const auto y1 = reflect_index(static_cast<std::ptrdiff_t>(fy) + 1, H);
      const auto x0 = reflect_index(static_cast<std::ptrdiff_t>(fx), W);
      const auto x1 = reflect_index(static_cast<std::ptrdiff_t>(fx) + 1, W);
      for (std::size_t c = 0; c < C; ++c) {
        const double v00 = img.at(static_cast<std::size_t>(y0), static_cast<std::size_t>(x0), c);
        const double v01 = img.at(static_cast<std::size_t>(y0), static_cast<std::size_t>(x1), c);
        const double v10 = img.at(static_cast<std::size_t>(y1), static_cast<std::size_t>(x0), c);
        const double v11 = img.at(static_cast<std::size_t>(y1), static_cast<std::size_t>(x1), c);
        double v;
        if (wy == 0.0 && wx == 0.0) {
          v = v00;
        } else {
          v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        }
        out.at(static_cast<std::size_t>(oy), static_cast<std::size_t>(ox), c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(img, sample_augment_params(cfg, img.height, img.width, rng));
}

// ---------------------------------------------------------------------------
// Batching

// Seeded per-epoch shuffles. Every epoch visits each sample once, minus the
// truncated tail when drop_last is set.
class BatchIterator {
 public:
  BatchIterator(std::size_t num_samples, std::size_t batch_size, std::uint64_t seed, bool drop_last = false)
      : n_(num_samples), batch_(batch_size), seed_(seed), drop_last_(drop_last) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
  }

  std::vector<std::vector<std::size_t>> epoch(std::size_t epoch_index) const {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), 0);
    Rng(seed_).derive(epoch_index).shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t pos = 0; pos < n_; pos += batch_) {
      const std::size_t end = std::min(n_, pos + batch_);
      if (drop_last_ && end - pos < batch_) break;
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
  }

  std::size_t batch_size() const { return batch_; }

 private:
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
  bool drop_last_;
};

// Decoded images and labels held in memory.
struct Dataset {
  Shape shape;  // H, W, C
  LabelKind label_kind = LabelKind::Categorical;
  std::vector<std::string> label_names;
  std::vector<Image> images;
  std::vector<std::vector<float>> labels;
  std::vector<std::string> groups;

  std::size_t size() const { return images.size(); }
};

inline Dataset load_dataset(const DatasetManifest& m, const std::vector<std::size_t>& indices) {
  Dataset d;
  d.shape = m.shape;
  d.label_kind = m.label_kind;
  d.label_names = m.label_names;
  for (auto i : indices) {
    d.images.push_back(m.load_image(i));
    d.labels.push_back(m.entries[i].labels);
    d.groups.push_back(m.entries[i].group);
  }
  return d;
}

template <class T>
struct Batch {
  Tensor<T> images;  // (N, H, W, C)
  Tensor<T> labels;  // (N, K)
};

// Stacks the selected samples; when `augment_cfg` is given each image draws
// from `rng` in index order.
template <class T>
Batch<T> make_batch(const Dataset& d, const std::vector<std::size_t>& indices,
                    const AugmentConfig* augment_cfg = nullptr, Rng* rng = nullptr) {
  if (indices.empty()) throw DataError("empty batch");
  const std::size_t per = numel(d.shape);
  const std::size_t k = d.label_names.size();
  std::vector<T> x(indices.size() * per);
  std::vector<T> y(indices.size() * k);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Image* img = &d.images.at(indices[b]);
    Image aug;
    if (augment_cfg) {
      aug = augment(*img, *augment_cfg, *rng);
      img = &aug;
    }
    std::copy(img->pixels.begin(), img->pixels.end(), x.begin() + static_cast<std::ptrdiff_t>(b * per));
    std::copy(d.labels[indices[b]].begin(), d.labels[indices[b]].end(), y.begin() + static_cast<std::ptrdiff_t>(b * k));
  }
  return {Tensor<T>({indices.size(), d.shape[0], d.shape[1], d.shape[2]}, std::move(x)),
          Tensor<T>({indices.size(), k}, std::move(y))};
}

}  // namespace bnft
