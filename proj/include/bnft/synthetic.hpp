#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "bnft/data.hpp"
#include "bnft/errors.hpp"
#include "bnft/rng.hpp"

namespace bnft {

struct SyntheticSpec {
  std::string task = "textures-2class";
  std::size_t samples = 600;
  std::size_t image_size = 16;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& synthetic_task_names() {
  static const std::vector<std::string> names = {"textures-2class", "shapes-4class", "textures-shifted"};
  return names;
}

// Appearance of an oriented-noise texture family. Orientation carries the
// class; brightness, colour, contrast and clutter are drawn independently of
// the class.
struct TextureStyle {
  double contrast_lo;
  double contrast_hi;
  double brightness_lo;
  double brightness_hi;
  double color[3];         // per-channel gain on the texture, may be negative
  double color_jitter;     // per-image random change of each channel gain
  double clutter;          // amplitude of isotropic blob noise
  double clutter_color[3];
  double pixel_noise;      // white noise std added last
  double angle_jitter;     // radians, uniform around the class orientation
  int streak;              // half-length of the smoothing line, in pixels
};

// Target textures are red-green opponent streaks over grey blob clutter.
// The source draws the same two classes in grey with faint red-green clutter,
// so a backbone trained there is only partly sensitive to the target's cue.
inline TextureStyle target_texture_style() {
  return {0.20, 0.30, 0.45, 0.55, {1.0, -1.0, 0.0}, 0.15, 0.08, {1.0, 1.0, 1.0}, 0.03, 0.45, 3};
}

inline TextureStyle source_texture_style() {
  return {0.20, 0.30, 0.45, 0.55, {1.0, 1.0, 1.0}, 0.10, 0.03, {1.0, -1.0, 0.0}, 0.03, 0.45, 3};
}

namespace detail {

inline double wrap_sample(const std::vector<double>& grid, std::size_t n, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  auto at = [&](long yy, long xx) {
    const long m = static_cast<long>(n);
    yy = ((yy % m) + m) % m;
    xx = ((xx % m) + m) % m;
    return grid[static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx)];
  };
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) + wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
}

}  // namespace detail

// Class 0 streaks run horizontally, class 1 vertically.
inline Image make_texture(std::size_t size, int cls, const TextureStyle& style, Rng& rng) {
  std::vector<double> noise(size * size);
  for (auto& v : noise) v = rng.normal();
  const double angle = (cls == 0 ? 0.0 : std::numbers::pi / 2) + rng.uniform(-style.angle_jitter, style.angle_jitter);
  const double dy = std::sin(angle), dx = std::cos(angle);
  std::vector<double> tex(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int t = -style.streak; t <= style.streak; ++t) {
        acc += detail::wrap_sample(noise, size, static_cast<double>(y) + t * dy, static_cast<double>(x) + t * dx);
      }
      tex[y * size + x] = acc;
    }
  }
  auto standardise = [](std::vector<double>& v) {
    double mean = 0.0, sq = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) sq += (x - mean) * (x - mean);
    const double sd = std::sqrt(sq / static_cast<double>(v.size())) + 1e-12;
    for (double& x : v) x = (x - mean) / sd;
  };
  standardise(tex);

  // Isotropic clutter: white noise under a 3x3 box blur on the torus.
  std::vector<double> white(size * size), blob(size * size, 0.0);
  for (auto& v : white) v = rng.normal();
  const long n = static_cast<long>(size);
  for (long y = 0; y < n; ++y) {
    for (long x = 0; x < n; ++x) {
      double acc = 0.0;
      for (long a = -1; a <= 1; ++a) {
        for (long b = -1; b <= 1; ++b) acc += white[static_cast<std::size_t>(((y + a + n) % n) * n + (x + b + n) % n)];
      }
      blob[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
  standardise(blob);

  const double contrast = rng.uniform(style.contrast_lo, style.contrast_hi);
  const double brightness = rng.uniform(style.brightness_lo, style.brightness_hi);
  double gain[3];
  for (int c = 0; c < 3; ++c) gain[c] = style.color[c] * (1.0 + rng.uniform(-style.color_jitter, style.color_jitter));

  Image img{size, size, 3, std::vector<float>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double t = tex[y * size + x], u = blob[y * size + x];
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = brightness + contrast * gain[c] * t + style.clutter * style.clutter_color[c] * u +
                         style.pixel_noise * rng.normal();
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

// Filled circle, square, triangle or cross at a random position, size and
// colour on a noisy background of random colour.
inline Image make_shape(std::size_t size, int cls, Rng& rng) {
  const double s = static_cast<double>(size);
  const double radius = rng.uniform(0.22, 0.34) * s;
  const double cy = rng.uniform(radius, s - radius), cx = rng.uniform(radius, s - radius);
  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.2, 0.8);
  for (int c = 0; c < 3; ++c) fg[c] = std::clamp(bg[c] + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.15, 0.35), 0.0, 1.0);
  Image img{size, size, 3, std::vector<float>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double py = (static_cast<double>(y) + 0.5 - cy) / radius;
      const double px = (static_cast<double>(x) + 0.5 - cx) / radius;
      bool inside = false;
      switch (cls) {
        case 0: inside = px * px + py * py <= 1.0; break;
        case 1: inside = std::abs(px) <= 0.8 && std::abs(py) <= 0.8; break;
        case 2: inside = py <= 0.8 && py >= -1.0 + 1.8 * std::abs(px); break;
        default: inside = (std::abs(px) <= 0.3 && std::abs(py) <= 1.0) || (std::abs(py) <= 0.3 && std::abs(px) <= 1.0);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (inside ? fg[c] : bg[c]) + 0.05 * rng.normal();
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

// Writes images/<index>.ppm and manifest.csv under out_dir. Sample i has
// class i mod K and draws from its own stream, so the output is a pure
// function of its arguments.
inline DatasetManifest make_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.samples == 0) throw DataError("synthetic dataset needs at least one sample");
  if (spec.image_size < 4) throw DataError("synthetic images must be at least 4x4");
  DatasetManifest m;
  m.root = out_dir;
  m.label_kind = LabelKind::Categorical;
  m.shape = {spec.image_size, spec.image_size, 3};
  bool textures = true;
  TextureStyle style{};
  if (spec.task == "textures-2class") {
    style = target_texture_style();
    m.label_names = {"horizontal", "vertical"};
  } else if (spec.task == "textures-shifted") {
    style = source_texture_style();
    m.label_names = {"horizontal", "vertical"};
  } else if (spec.task == "shapes-4class") {
    textures = false;
    m.label_names = {"circle", "square", "triangle", "cross"};
  } else {
    throw DataError("unknown synthetic task '" + spec.task + "'");
  }
  fs::create_directories(out_dir / "images");
  const std::size_t k = m.label_names.size();
  const Rng root(spec.seed);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const int cls = static_cast<int>(i % k);
    Rng rng = root.derive(i);
    const Image img = textures ? make_texture(spec.image_size, cls, style, rng) : make_shape(spec.image_size, cls, rng);
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.ppm", i);
    write_ppm(out_dir / name, img);
    ManifestEntry e{name, std::vector<float>(k, 0.0f), ""};
    e.labels[static_cast<std::size_t>(cls)] = 1.0f;
    m.entries.push_back(std::move(e));
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace bnft
