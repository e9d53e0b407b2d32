#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "vqi/dataset.hpp"
#include "vqi/png_io.hpp"

using namespace vqi;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("vqi_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const SampleSet& benchmark_set() {
  static const SampleSet s = generate(2024);
  return s;
}

SampleSet tiny(std::size_t ng, std::size_t ok) {
  SampleSet s;
  s.height = s.width = 2;
  for (std::size_t i = 0; i < ng + ok; ++i) {
    char id[8];
    std::snprintf(id, sizeof id, "%05zu", i);
    s.samples.push_back({id, i < ng ? Label::Defective : Label::NonDefective, SplitTag::None, {0, 0, 0, 0}});
  }
  return s;
}

}  // namespace

TEST(Generate, DefaultCompositionAndRange) {
  const auto& s = benchmark_set();
  EXPECT_EQ(s.size(), 822u);
  EXPECT_EQ(s.count(Label::Defective), 422u);
  EXPECT_EQ(s.count(Label::NonDefective), 400u);
  EXPECT_EQ(s.generator_seed, 2024u);
  EXPECT_FALSE(s.is_split());
  for (const auto& smp : s.samples) {
    ASSERT_EQ(smp.pixels.size(), 224u * 224u);
    const auto [lo, hi] = std::minmax_element(smp.pixels.begin(), smp.pixels.end());
    ASSERT_GE(*lo, 0.0f);
    ASSERT_LE(*hi, 1.0f);
  }
}

TEST(Generate, SameSeedIsBitwiseIdentical) {
  const auto a = generate(5, 6, 6);
  const auto b = generate(5, 6, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, generate(6, 6, 6));
  // per-sample streams: a prefix of a larger set matches a smaller one
  const auto big = generate(5, 8, 0);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(big.samples[i].pixels, a.samples[i].pixels);
}

TEST(Generate, EveryDefectiveImageDiffersFromItsCleanTwin) {
  for (std::uint64_t i = 0; i < 120; ++i) {
    const auto stream = sample_stream(77, i);
    const auto recipe = draw_recipe(stream, true);
    ASSERT_GE(recipe.defects.size(), 1u);
    ASSERT_LE(recipe.defects.size(), 3u);
    const auto with = render_plate(recipe, 224, 224, 0.01, true);
    const auto clean = render_plate(recipe, 224, 224, 0.01, false);
    std::size_t changed = 0;
    for (std::size_t k = 0; k < with.size(); ++k) changed += std::abs(with[k] - clean[k]) >= 0.05f;
    EXPECT_GE(changed, 20u) << "sample " << i;
    // each defect on its own also clears the bar
    for (const auto& d : recipe.defects) {
      auto solo = recipe;
      solo.defects = {d};
      const auto one = render_plate(solo, 224, 224, 0.01, true);
      std::size_t c1 = 0;
      for (std::size_t k = 0; k < one.size(); ++k) c1 += std::abs(one[k] - clean[k]) >= 0.05f;
      EXPECT_GE(c1, 20u) << "sample " << i << " defect " << to_string(d.kind);
    }
  }
}

TEST(Generate, CleanRecipesFollowTheLatticeRanges) {
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto r = draw_recipe(sample_stream(3, i), false);
    EXPECT_TRUE(r.defects.empty());
    EXPECT_GE(r.pitch, 6.0);
    EXPECT_LE(r.pitch, 14.0);
    EXPECT_GE(r.dot_radius, 1.0);
    EXPECT_LE(r.dot_radius, 3.0);
  }
}

TEST(Generate, BrightnessAloneDoesNotSeparateTheClasses) {
  const double acc = brightness_threshold_accuracy(benchmark_set());
  EXPECT_LT(acc, 80.0);
  EXPECT_GE(acc, 50.0);
}

TEST(Split, BenchmarkRounding) {
  const auto s = split(benchmark_set(), 1);
  ASSERT_TRUE(s.is_split());
  // round(0.25 * 822) = round(205.5) = 206
  EXPECT_EQ(s.count(SplitTag::Train), 206u);
  EXPECT_EQ(s.count(SplitTag::Test), 616u);
  std::size_t train_ng = 0;
  for (const auto& smp : s.samples) train_ng += smp.split == SplitTag::Train && smp.label == Label::Defective;
  // global defective share 422/822 of 206 is 105.8
  EXPECT_GE(train_ng, 105u);
  EXPECT_LE(train_ng, 106u);
}

TEST(Split, PartitionStratifiedAndOrderInvariant) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 30; ++t) {
    const std::size_t ng = 2 + rng() % 40, ok = 2 + rng() % 40;
    auto base = tiny(ng, ok);
    const auto s = split(base, t);
    const std::size_t total = ng + ok;
    EXPECT_EQ(s.count(SplitTag::Train), std::size_t(std::lround(0.25 * double(total))));
    EXPECT_EQ(s.count(SplitTag::Train) + s.count(SplitTag::Test), total);
    std::size_t train_ng = 0;
    for (const auto& smp : s.samples) train_ng += smp.split == SplitTag::Train && smp.label == Label::Defective;
    EXPECT_LE(std::abs(double(train_ng) - 0.25 * double(ng)), 1.0);

    auto shuffled = base;
    std::shuffle(shuffled.samples.begin(), shuffled.samples.end(), rng);
    const auto s2 = split(shuffled, t);
    std::map<std::string, SplitTag> tags;
    for (const auto& smp : s.samples) tags[smp.id] = smp.split;
    for (const auto& smp : s2.samples) EXPECT_EQ(tags.at(smp.id), smp.split);
  }
}

TEST(Split, Rejections) {
  EXPECT_THROW(split(tiny(1, 10), 0), std::invalid_argument);
  EXPECT_THROW(split(tiny(10, 0), 0), std::invalid_argument);
  EXPECT_THROW(split(split(tiny(4, 4), 0), 0), std::invalid_argument);
  EXPECT_THROW(split(tiny(4, 4), 0, 1.5), std::invalid_argument);
}

TEST(Loader, FilenameConventions) {
  EXPECT_EQ(label_from_filename("00209_NG_Image.png"), Label::Defective);
  EXPECT_EQ(label_from_filename("00012_OK.png"), Label::NonDefective);
  EXPECT_EQ(id_from_filename("00209_NG_Image.png"), "00209");
  EXPECT_THROW(label_from_filename("plate.png"), std::invalid_argument);
  EXPECT_THROW(label_from_filename("00001_XX.png"), std::invalid_argument);
}

TEST(Loader, EmptyDirectoryGivesEmptySet) {
  const auto dir = temp_dir("empty");
  const auto s = load_directory(dir);
  EXPECT_EQ(s.size(), 0u);
  EXPECT_FALSE(s.generator_seed.has_value());
  EXPECT_THROW(load_directory(dir / "missing"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(Loader, RoundTripWithinQuantization) {
  const auto dir = temp_dir("roundtrip");
  const auto set = split(generate(11, 5, 5), 3);
  write_directory(set, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.csv"));
  const auto back = load_directory(dir);
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& a = set.samples[i];
    const auto& b = back.samples[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.split, b.split);
    ASSERT_EQ(a.pixels.size(), b.pixels.size());
    float worst = 0;
    for (std::size_t k = 0; k < a.pixels.size(); ++k) worst = std::max(worst, std::abs(a.pixels[k] - b.pixels[k]));
    EXPECT_LE(worst, 1.0f / 255.0f);
  }
  EXPECT_EQ(manifest_csv(back), manifest_csv(set));
  fs::remove_all(dir);
}

TEST(Loader, RejectsWrongSizeAndUnreadableFiles) {
  const auto dir = temp_dir("badsize");
  GrayImage img{100, 80, std::vector<std::uint8_t>(100 * 80, 128)};
  write_png(dir / "00001_OK.png", img);
  try {
    load_directory(dir);
    FAIL() << "expected rejection";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("00001_OK.png"), std::string::npos) << e.what();
  }
  fs::remove(dir / "00001_OK.png");
  std::ofstream(dir / "00002_NG.png") << "not a png";
  EXPECT_THROW(load_directory(dir), std::exception);
  fs::remove_all(dir);
}

TEST(Png, EncodeDecodeIsLossless) {
  GrayImage img{7, 3, {}};
  for (int i = 0; i < 21; ++i) img.pixels.push_back(std::uint8_t(i * 12));
  const auto bytes = encode_png(img);
  const auto back = decode_png(bytes.data(), bytes.size());
  EXPECT_EQ(back.width, 7);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.pixels, img.pixels);
  const std::uint8_t junk[4] = {1, 2, 3, 4};
  EXPECT_THROW(decode_png(junk, 4), ImageError);
}

TEST(Tensors, SplitViews) {
  const auto s = split(generate(12, 4, 4), 0);
  const auto d = to_train_test(s);
  EXPECT_EQ(d.train.inputs.shape(), (Shape{2, 1, 224, 224}));
  EXPECT_EQ(d.test.inputs.shape(), (Shape{6, 1, 224, 224}));
  EXPECT_EQ(d.train.labels.size(), 2u);
  for (int y : d.test.labels) EXPECT_TRUE(y == 0 || y == 1);
}
