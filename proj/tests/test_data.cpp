#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_util.hpp"

using namespace bnft;
namespace fs = std::filesystem;

namespace {

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image img{h, w, 3, std::vector<float>(h * w * 3)};
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

// Directory with n 4x4 images and a manifest built from the given body lines.
fs::path manifest_dir(const std::string& name, std::size_t n) {
  const auto dir = oracle::scratch_dir(name);
  Rng rng(1);
  for (std::size_t i = 0; i < n; ++i) write_ppm(dir / ("img" + std::to_string(i) + ".ppm"), random_image(4, 4, rng));
  return dir;
}

DatasetManifest grouped_manifest(std::size_t groups, std::size_t per_group) {
  DatasetManifest m;
  m.label_names = {"a", "b"};
  m.shape = {4, 4, 3};
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < per_group; ++i)
      m.entries.push_back({"x.ppm", {1.0f, 0.0f}, "site" + std::to_string(g)});
  return m;
}

DatasetManifest plain_manifest(std::size_t n) {
  DatasetManifest m;
  m.label_names = {"a", "b"};
  m.shape = {4, 4, 3};
  for (std::size_t i = 0; i < n; ++i) m.entries.push_back({"x.ppm", {1.0f, 0.0f}, ""});
  return m;
}

}  // namespace

TEST(Ppm, RoundTripQuantisesToBytes) {
  const auto dir = oracle::scratch_dir("ppm");
  Rng rng(2);
  const auto img = random_image(5, 7, rng);
  write_ppm(dir / "a.ppm", img);
  const auto back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.shape(), (Shape{5, 7, 3}));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    EXPECT_LE(std::abs(back.pixels[i] - img.pixels[i]), 0.5f / 255.0f + 1e-6f);
    EXPECT_EQ(back.pixels[i], static_cast<float>(to_byte(img.pixels[i])) / 255.0f);
  }
  // A quantised image survives a second round trip unchanged.
  write_ppm(dir / "b.ppm", back);
  EXPECT_EQ(read_ppm(dir / "b.ppm"), back);
  EXPECT_EQ(read_ppm_shape(dir / "a.ppm"), (Shape{5, 7, 3}));
}

TEST(Ppm, MalformedFilesAreDataErrors) {
  const auto dir = oracle::scratch_dir("ppm_bad");
  write_file(dir / "p3.ppm", "P3\n1 1\n255\n0 0 0\n");
  write_file(dir / "short.ppm", "P6\n2 2\n255\nabc");
  write_file(dir / "depth.ppm", "P6\n1 1\n65535\nabcdef");
  write_file(dir / "header.ppm", "P6\nx y\n255\n");
  for (const char* f : {"p3.ppm", "short.ppm", "depth.ppm", "header.ppm", "missing.ppm"})
    EXPECT_THROW(read_ppm(dir / f), DataError) << f;
  // Comments in the header are allowed.
  write_file(dir / "comment.ppm", std::string("P6\n# hi\n1 1\n255\n") + std::string("\x00\x80\xff", 3));
  const auto img = read_ppm(dir / "comment.ppm");
  EXPECT_EQ(img.pixels, (std::vector<float>{0.0f, 128.0f / 255.0f, 1.0f}));
}

TEST(Manifest, ParsesLabelsAndGroups) {
  const auto dir = manifest_dir("manifest_ok", 3);
  write_file(dir / "m.csv", "multilabel,4x4x3,cat,dog\nimg0.ppm,1,1,s1\nimg1.ppm,0,0,s1\nimg2.ppm,0,1,s2\n");
  const auto m = load_manifest(dir / "m.csv");
  EXPECT_EQ(m.label_kind, LabelKind::Multilabel);
  EXPECT_EQ(m.label_names, (std::vector<std::string>{"cat", "dog"}));
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_TRUE(m.has_groups());
  EXPECT_EQ(m.entries[2].group, "s2");
  EXPECT_EQ(m.entries[0].labels, (std::vector<float>{1, 1}));
  EXPECT_EQ(m.load_image(1).shape(), (Shape{4, 4, 3}));

  write_manifest(dir / "again.csv", m);
  const auto again = load_manifest(dir / "again.csv");
  ASSERT_EQ(again.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    EXPECT_EQ(again.entries[i].path, m.entries[i].path);
    EXPECT_EQ(again.entries[i].labels, m.entries[i].labels);
    EXPECT_EQ(again.entries[i].group, m.entries[i].group);
  }
}

TEST(Manifest, ValidationErrors) {
  const auto dir = manifest_dir("manifest_bad", 2);
  const std::vector<std::string> bad = {
      "",                                                         // empty
      "categorical,4x4x3\n",                                      // no labels
      "ordinal,4x4x3,a,b\nimg0.ppm,1,0\n",                        // label kind
      "categorical,4x4,a,b\nimg0.ppm,1,0\n",                      // shape
      "categorical,4x4x3,a,b\nimg0.ppm,1\n",                      // too few labels
      "categorical,4x4x3,a,b\nimg0.ppm,1,1\n",                    // not one-hot
      "categorical,4x4x3,a,b\nimg0.ppm,0,0\n",                    // not one-hot
      "multilabel,4x4x3,a,b\nimg0.ppm,0.5,0\n",                   // not binary
      "multilabel,4x4x3,a,b\nimg0.ppm,x,0\n",                     // not a number
      "categorical,4x4x3,a,b\nnope.ppm,1,0\n",                    // missing image
      "categorical,4x4x3,a,b\nimg0.ppm,1,0,g\nimg1.ppm,0,1\n",    // partial groups
      "categorical,4x4x3,a,b\nimg0.ppm,1,0,\n",                   // empty group
  };
  for (std::size_t i = 0; i < bad.size(); ++i) {
    write_file(dir / "m.csv", bad[i]);
    EXPECT_THROW(load_manifest(dir / "m.csv"), DataError) << "case " << i;
  }
  EXPECT_THROW(load_manifest(dir / "absent.csv"), DataError);
}

TEST(Manifest, ImageShapeMismatchIsReportedOnLoad) {
  const auto dir = manifest_dir("manifest_shape", 1);
  write_file(dir / "m.csv", "categorical,8x8x3,a,b\nimg0.ppm,1,0\n");
  const auto m = load_manifest(dir / "m.csv");
  EXPECT_THROW(m.load_image(0), DataError);
}

TEST(Manifest, FolderLayout) {
  const auto dir = oracle::scratch_dir("folders");
  Rng rng(3);
  fs::create_directories(dir / "zebra");
  fs::create_directories(dir / "ant");
  write_ppm(dir / "zebra" / "1.ppm", random_image(6, 6, rng));
  write_ppm(dir / "ant" / "2.ppm", random_image(6, 6, rng));
  write_ppm(dir / "ant" / "1.ppm", random_image(6, 6, rng));
  const auto m = load_manifest(dir);
  EXPECT_EQ(m.label_names, (std::vector<std::string>{"ant", "zebra"}));
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_EQ(m.entries[0].path, "ant/1.ppm");
  EXPECT_EQ(m.entries[2].labels, (std::vector<float>{0, 1}));
  EXPECT_EQ(m.shape, (Shape{6, 6, 3}));
  fs::remove_all(dir / "zebra");
  EXPECT_THROW(load_manifest(dir), DataError);
}

TEST(Split, SizesCoverAndDeterminism) {
  const auto m = plain_manifest(600);
  const auto parts = split(m, {0.7, 0.15, 0.15}, 0, false);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[0].size(), 420u);
  EXPECT_EQ(parts[1].size(), 90u);
  EXPECT_EQ(parts[2].size(), 90u);
  std::set<std::size_t> all;
  for (const auto& p : parts) {
    EXPECT_TRUE(std::is_sorted(p.begin(), p.end()));
    all.insert(p.begin(), p.end());
  }
  EXPECT_EQ(all.size(), 600u);
  EXPECT_EQ(split(m, {0.7, 0.15, 0.15}, 0, false), parts);
  EXPECT_NE(split(m, {0.7, 0.15, 0.15}, 1, false), parts);
}

TEST(Split, UnevenCountsUseLargestRemainder) {
  const auto parts = split(plain_manifest(10), {0.7, 0.15, 0.15}, 0, false);
  EXPECT_EQ(parts[0].size() + parts[1].size() + parts[2].size(), 10u);
  EXPECT_EQ(parts[0].size(), 7u);
}

TEST(Split, BadFractions) {
  const auto m = plain_manifest(10);
  EXPECT_THROW(split(m, {}, 0, false), DataError);
  EXPECT_THROW(split(m, {0.5, 0.4}, 0, false), DataError);
  EXPECT_THROW(split(m, {1.2, -0.2}, 0, false), DataError);
}

TEST(Split, GroupsNeverStraddleSplits) {
  const auto m = grouped_manifest(40, 5);
  const auto parts = split(m, {0.7, 0.15, 0.15}, 3, true);
  std::map<std::string, std::set<std::size_t>> where;
  std::size_t total = 0;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    total += parts[s].size();
    for (auto i : parts[s]) where[m.entries[i].group].insert(s);
  }
  EXPECT_EQ(total, 200u);
  for (const auto& [g, s] : where) EXPECT_EQ(s.size(), 1u) << g;
  EXPECT_NEAR(static_cast<double>(parts[0].size()), 140.0, 5.0);
  EXPECT_EQ(split(m, {0.7, 0.15, 0.15}, 3, true), parts);
}

TEST(Split, OversizedGroupIsAnError) {
  auto m = grouped_manifest(3, 2);
  for (int i = 0; i < 20; ++i) m.entries.push_back({"x.ppm", {1.0f, 0.0f}, "huge"});
  EXPECT_THROW(split(m, {0.5, 0.5}, 0, true), DataError);
}

TEST(Augment, IdentityParametersReturnTheImage) {
  Rng rng(4);
  const auto img = random_image(8, 8, rng);
  EXPECT_EQ(apply_augment(img, AugmentParams{}), img);
}

TEST(Augment, FlipsAreInvolutions) {
  Rng rng(5);
  const auto img = random_image(6, 9, rng);
  AugmentParams h;
  h.hflip = true;
  const auto once = apply_augment(img, h);
  EXPECT_NE(once, img);
  EXPECT_EQ(once.at(2, 0, 1), img.at(2, 8, 1));
  EXPECT_EQ(apply_augment(once, h), img);
  AugmentParams v;
  v.vflip = true;
  EXPECT_EQ(apply_augment(img, v).at(0, 3, 2), img.at(5, 3, 2));
}

TEST(Augment, IntegerShiftMovesPixelsWithReflection) {
  Rng rng(6);
  const auto img = random_image(5, 5, rng);
  AugmentParams p;
  p.shift_x = 2.0;
  const auto out = apply_augment(img, p);
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t x = 2; x < 5; ++x) EXPECT_EQ(out.at(y, x, 0), img.at(y, x - 2, 0));
    EXPECT_EQ(out.at(y, 0, 0), img.at(y, 1, 0));  // reflected border
    EXPECT_EQ(out.at(y, 1, 0), img.at(y, 0, 0));
  }
}

TEST(Augment, StreamAdvancesIndependentlyOfEnabledFeatures) {
  AugmentConfig on, off;
  off.hflip = off.vflip = false;
  off.max_translate_frac = off.max_zoom_frac = 0.0;
  Rng a(7), b(7);
  sample_augment_params(on, 16, 16, a);
  const auto pb = sample_augment_params(off, 16, 16, b);
  EXPECT_EQ(pb.zoom, 1.0);
  EXPECT_FALSE(pb.hflip);
  EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Augment, RangesAndValidation) {
  AugmentConfig cfg;
  Rng rng(8);
  for (int i = 0; i < 500; ++i) {
    const auto p = sample_augment_params(cfg, 20, 10, rng);
    EXPECT_LE(std::abs(p.shift_y), 2.0);
    EXPECT_LE(std::abs(p.shift_x), 1.0);
    EXPECT_GE(p.zoom, 0.9);
    EXPECT_LE(p.zoom, 1.1);
  }
  const auto out = augment(random_image(8, 8, rng), cfg, rng);
  for (float v : out.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  cfg.max_zoom_frac = 0.9;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Batches, EveryEpochIsAPermutation) {
  const BatchIterator it(103, 10, 11);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto batches = it.epoch(e);
    EXPECT_EQ(batches.size(), 11u);
    EXPECT_EQ(batches.back().size(), 3u);
    std::set<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    EXPECT_EQ(seen.size(), 103u);
  }
  EXPECT_EQ(it.epoch(1), BatchIterator(103, 10, 11).epoch(1));
  EXPECT_NE(it.epoch(1), it.epoch(2));
  EXPECT_NE(it.epoch(1), BatchIterator(103, 10, 12).epoch(1));
  EXPECT_EQ(BatchIterator(103, 10, 11, true).epoch(0).size(), 10u);
  EXPECT_THROW(BatchIterator(10, 0, 0), ConfigError);
}

TEST(Batches, StackingAndLabels) {
  const auto d = oracle::texture_dataset(target_texture_style(), 6, 0);
  const auto b = make_batch<float>(d, {4, 1});
  EXPECT_EQ(b.images.shape(), (Shape{2, 16, 16, 3}));
  EXPECT_EQ(b.labels.vec(), (std::vector<float>{1, 0, 0, 1}));
  EXPECT_EQ(b.images[0], d.images[4].pixels[0]);
  EXPECT_THROW(make_batch<float>(d, {}), DataError);
}

TEST(Synthetic, BalancedDeterministicFiles) {
  const auto a = oracle::scratch_dir("synth_a"), b = oracle::scratch_dir("synth_b");
  const SyntheticSpec spec{"textures-2class", 600, 16, 5};
  const auto m = make_synthetic(spec, a);
  make_synthetic(spec, b);
  ASSERT_EQ(m.entries.size(), 600u);
  std::size_t ones = 0;
  for (const auto& e : m.entries) ones += e.labels[1] == 1.0f;
  EXPECT_EQ(ones, 300u);
  EXPECT_EQ(slurp(a / "manifest.csv"), slurp(b / "manifest.csv"));
  for (std::size_t i = 0; i < 600; i += 37) EXPECT_EQ(slurp(a / m.entries[i].path), slurp(b / m.entries[i].path));
  const auto loaded = load_manifest(a / "manifest.csv");
  EXPECT_EQ(loaded.entries.size(), 600u);
  EXPECT_EQ(loaded.load_image(3), m.load_image(3));

  const auto c = oracle::scratch_dir("synth_c");
  const auto other = make_synthetic({"textures-2class", 4, 16, 6}, c);
  EXPECT_NE(slurp(c / other.entries[0].path), slurp(a / m.entries[0].path));
}

TEST(Synthetic, OtherTasksAndErrors) {
  const auto dir = oracle::scratch_dir("synth_shapes");
  const auto m = make_synthetic({"shapes-4class", 40, 16, 0}, dir);
  EXPECT_EQ(m.label_names.size(), 4u);
  std::vector<std::size_t> counts(4, 0);
  for (const auto& e : m.entries)
    for (std::size_t k = 0; k < 4; ++k) counts[k] += e.labels[k] == 1.0f;
  EXPECT_EQ(counts, (std::vector<std::size_t>{10, 10, 10, 10}));
  EXPECT_THROW(make_synthetic({"stripes", 4, 16, 0}, dir), DataError);
  EXPECT_THROW(make_synthetic({"textures-2class", 0, 16, 0}, dir), DataError);
  EXPECT_THROW(make_synthetic({"textures-2class", 4, 2, 0}, dir), DataError);
}

// Global brightness or colour must not give the class away.
TEST(Synthetic, PixelStatisticsDoNotSeparateClasses) {
  for (const auto& style : {target_texture_style(), source_texture_style()}) {
    const auto d = oracle::texture_dataset(style, 600, 9);
    std::vector<int> y;
    std::vector<std::vector<double>> feats(4);
    for (std::size_t i = 0; i < d.size(); ++i) {
      y.push_back(d.labels[i][1] == 1.0f ? 1 : 0);
      double c[3] = {0, 0, 0};
      for (std::size_t p = 0; p < d.images[i].pixels.size(); ++p) c[p % 3] += d.images[i].pixels[p];
      for (int k = 0; k < 3; ++k) feats[static_cast<std::size_t>(k)].push_back(c[k]);
      feats[3].push_back(c[0] + c[1] + c[2]);
    }
    for (const auto& f : feats) {
      const double auc = oracle::auc_oracle(f, y);
      EXPECT_LT(std::max(auc, 1.0 - auc), 0.7);
    }
  }
}

// A small network trained from scratch separates the target classes.
TEST(Synthetic, TargetClassesAreLearnable) {
  const auto train = oracle::texture_dataset(target_texture_style(), 400, 21);
  const auto val = oracle::texture_dataset(target_texture_style(), 100, 21, 5000);
  const auto test = oracle::texture_dataset(target_texture_style(), 200, 21, 9000);
  auto model = build_model<float>(mininet_spec(), 2, LabelKind::Categorical, 0);
  TrainOptions o;
  o.max_epochs_per_phase = 12;
  const Phase all{ParamSelector::All, true, BnMode::Training, 1e-3, StopRule::plateau(6)};
  train_phases(model, {all}, train, val, o, 0);
  EXPECT_GT(evaluate(model, test).macro_auc(), 0.9);
}
