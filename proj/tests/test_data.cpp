#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "bicanet/data.hpp"

namespace bicanet::data {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bicanet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Pnm, WhitePixelEncoding) {
  const Raster white{1, 1, 3, {255, 255, 255}};
  auto expect = bytes_of("P6\n1 1\n255\n");
  expect.insert(expect.end(), {0xFF, 0xFF, 0xFF});
  EXPECT_EQ(encode_pnm(white), expect);
  EXPECT_EQ(decode_pnm(expect), white);
}

TEST(Pnm, RandomP5RoundTripIsByteIdentical) {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 40), h = 1 + static_cast<int>(rng() % 40);
    auto file = bytes_of("P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
    for (int i = 0; i < w * h; ++i) file.push_back(static_cast<std::uint8_t>(rng()));
    EXPECT_EQ(encode_pnm(decode_pnm(file)), file);
  }
}

TEST(Pnm, HeaderMayContainCommentsAndExtraWhitespace) {
  auto file = bytes_of("P5 # a comment\n  3\t2 # dims\n255\n");
  file.insert(file.end(), {1, 2, 3, 4, 5, 6});
  const Raster r = decode_pnm(file);
  EXPECT_EQ(r.width, 3);
  EXPECT_EQ(r.height, 2);
  EXPECT_EQ(r.pixels, (std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6}));
}

std::size_t parse_offset(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_pnm(bytes);
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected a ParseError";
  return 0;
}

TEST(Pnm, MalformedHeadersReportOffsets) {
  EXPECT_EQ(parse_offset(bytes_of("Q6\n1 1\n255\n...")), 0u);
  EXPECT_EQ(parse_offset(bytes_of("P3\n1 1\n255\n...")), 1u);
  EXPECT_EQ(parse_offset(bytes_of("P6\nx 1\n255\n...")), 3u);
  EXPECT_EQ(parse_offset(bytes_of("P6\n1 1\n65535\n......")), 7u);
  EXPECT_EQ(parse_offset(bytes_of("P6\n2 1\n255\nabc")), 14u);   // truncated: offset is end of input
  EXPECT_EQ(parse_offset(bytes_of("P5\n1 1\n255\nab")), 12u);    // trailing byte
}

TEST(Pnm, LabelValuesAreValidatedOnRead) {
  const fs::path dir = temp_dir("labels");
  LabelMap m(1, 2, 3, 1);
  m.at(0, 1, 2) = LabelMap::kIgnore;
  write_labels(dir / "ok.pgm", m);
  EXPECT_EQ(read_labels(dir / "ok.pgm", 2), m);
  m.at(0, 0, 1) = 4;
  write_labels(dir / "bad.pgm", m);
  EXPECT_THROW(read_labels(dir / "bad.pgm", 4), DataError);
  EXPECT_NO_THROW(read_labels(dir / "bad.pgm", 5));
}

TEST(Palette, KnownEntriesAndColorize) {
  const std::map<int, std::array<std::uint8_t, 3>> known{
      {0, {0, 0, 0}},     {1, {128, 0, 0}},      {2, {0, 128, 0}},   {3, {128, 128, 0}},
      {4, {0, 0, 128}},   {7, {128, 128, 128}},  {8, {64, 0, 0}},    {15, {192, 128, 128}},
      {20, {0, 64, 128}}, {255, {224, 224, 192}}};
  for (const auto& [k, rgb] : known) EXPECT_EQ(palette()[k], rgb) << k;

  LabelMap all(1, 1, 256);
  for (int k = 0; k < 256; ++k) all.at(0, 0, k) = static_cast<std::uint8_t>(k);
  const Raster r = colorize(all);
  for (int k = 0; k < 256; ++k)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(r.pixels[k * 3 + c], palette()[k][c]);
}

TEST(Raster, ImageConversionRoundTrip) {
  Raster r{5, 4, 3, {}};
  std::mt19937 rng(2);
  for (int i = 0; i < 60; ++i) r.pixels.push_back(static_cast<std::uint8_t>(rng()));
  EXPECT_EQ(to_raster(from_raster(r)), r);
}

TEST(Synthetic, ZeroShapesGiveBackgroundOnly) {
  SyntheticSpec spec;
  spec.min_shapes = spec.max_shapes = 0;
  for (const auto& s : generate_synthetic(spec, 5))
    for (auto v : s.labels.data) EXPECT_EQ(v, 0);
}

TEST(Synthetic, DeterministicPerSeed) {
  SyntheticSpec spec;
  spec.seed = 9;
  const auto a = generate_synthetic(spec, 4);
  const auto b = generate_synthetic(spec, 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.vector(), b[i].image.vector());
    EXPECT_EQ(a[i].labels, b[i].labels);
  }
  spec.seed = 10;
  EXPECT_NE(generate_sample(spec, 0).image.vector(), a[0].image.vector());
  // a sample depends only on its own index
  SyntheticSpec same = spec;
  same.seed = 9;
  EXPECT_EQ(generate_sample(same, 3).labels, a[3].labels);
}

TEST(Synthetic, LabelsTracePaintedRegions) {
  SyntheticSpec spec;
  spec.num_classes = 5;
  spec.color_jitter = 0;
  spec.color_confusion = 0;
  spec.noise = 0;
  spec.min_shapes = 2;
  spec.max_shapes = 5;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto s = generate_sample(spec, i);
    std::map<int, std::set<std::array<float, 3>>> colours;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        colours[s.labels.at(0, y, x)].insert(
            {s.image.at(0, 0, y, x), s.image.at(0, 1, y, x), s.image.at(0, 2, y, x)});
    std::set<std::array<float, 3>> seen;
    for (const auto& [cls, set] : colours) {
      EXPECT_EQ(set.size(), 1u) << "class " << cls << " in sample " << i;
      EXPECT_TRUE(seen.insert(*set.begin()).second) << "two classes share a colour";
    }
  }
}

TEST(Synthetic, ForegroundClassesAreBalanced) {
  SyntheticSpec spec;
  spec.num_classes = 5;
  spec.width = spec.height = 32;
  std::vector<double> hist(5, 0.0);
  for (std::size_t i = 0; i < 1000; ++i)
    for (auto v : generate_sample(spec, i).labels.data) hist[v] += 1;
  const double mean = (hist[1] + hist[2] + hist[3] + hist[4]) / 4.0;
  for (int k = 1; k < 5; ++k) {
    EXPECT_GE(hist[k], 0.3 * mean) << k;
    EXPECT_LE(hist[k], 3.0 * mean) << k;
  }
}

TEST(Synthetic, PrimitivePerClassAndSpecValidation) {
  EXPECT_EQ(primitive_for_class(1), Primitive::kRectangle);
  EXPECT_EQ(primitive_for_class(2), Primitive::kDisk);
  EXPECT_EQ(primitive_for_class(3), Primitive::kTriangle);
  EXPECT_EQ(primitive_for_class(4), Primitive::kRing);
  EXPECT_EQ(primitive_for_class(5), Primitive::kRectangle);
  SyntheticSpec bad;
  bad.num_classes = 1;
  EXPECT_THROW(generate_sample(bad, 0), ConfigError);
  bad = SyntheticSpec{};
  bad.min_shapes = 3;
  bad.max_shapes = 2;
  EXPECT_THROW(validate(bad), ConfigError);
}

SegSample sample_with_ignore(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.width = 48;
  spec.height = 40;
  spec.seed = seed;
  SegSample s = generate_sample(spec, 0);
  s.labels.at(0, 3, 3) = LabelMap::kIgnore;
  return s;
}

TEST(Augment, IdentityConfigLeavesSampleUnchanged) {
  const SegSample s = sample_with_ignore(1);
  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.aspect_min = cfg.aspect_max = 1.0;
  cfg.horizontal_flip = false;
  cfg.crop_height = 40;
  cfg.crop_width = 48;
  std::mt19937_64 rng(3);
  const SegSample out = augment(s, cfg, rng);
  EXPECT_EQ(out.image.vector(), s.image.vector());
  EXPECT_EQ(out.labels, s.labels);
  const SegSample same = resize(s, 40, 48);
  EXPECT_EQ(same.image.vector(), s.image.vector());
  EXPECT_EQ(same.labels, s.labels);
}

TEST(Augment, FlipsAreInvolutions) {
  const SegSample s = sample_with_ignore(2);
  const SegSample h = flip_horizontal(flip_horizontal(s));
  const SegSample v = flip_vertical(flip_vertical(s));
  EXPECT_EQ(h.image.vector(), s.image.vector());
  EXPECT_EQ(h.labels, s.labels);
  EXPECT_EQ(v.labels, s.labels);
  EXPECT_NE(flip_horizontal(s).labels, s.labels);
}

TEST(Augment, NearestLabelsIntroduceNoNewValues) {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const SegSample s = sample_with_ignore(trial);
    const std::set<std::uint8_t> before(s.labels.data.begin(), s.labels.data.end());
    const int h = 5 + static_cast<int>(rng() % 100), w = 5 + static_cast<int>(rng() % 100);
    const SegSample r = resize(s, h, w);
    for (auto v : r.labels.data) EXPECT_TRUE(before.count(v)) << int(v);
  }
}

TEST(Augment, OutputAlwaysHasCropExtentsAndDeterministic) {
  AugmentConfig cfg;
  cfg.crop_height = 32;
  cfg.crop_width = 64;
  cfg.vertical_flip = true;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const SegSample s = sample_with_ignore(seed);
    std::mt19937_64 a(seed), b(seed);
    const SegSample x = augment(s, cfg, a);
    const SegSample y = augment(s, cfg, b);
    EXPECT_EQ(x.image.shape(), (Shape{1, 3, 32, 64}));
    EXPECT_EQ(x.labels.h, 32);
    EXPECT_EQ(x.labels.w, 64);
    EXPECT_EQ(x.labels, y.labels);
    EXPECT_EQ(x.image.vector(), y.image.vector());
    std::set<std::uint8_t> allowed(s.labels.data.begin(), s.labels.data.end());
    allowed.insert(LabelMap::kIgnore);  // padding
    for (auto v : x.labels.data) EXPECT_TRUE(allowed.count(v));
  }
}

TEST(Augment, PaddingUsesIgnoreAndZero) {
  const SegSample s = sample_with_ignore(5);
  const SegSample c = crop(s, -2, -3, 44, 52);
  EXPECT_EQ(c.labels.at(0, 0, 0), LabelMap::kIgnore);
  EXPECT_EQ(c.image.at(0, 1, 0, 0), 0.0f);
  EXPECT_EQ(c.labels.at(0, 2, 3), s.labels.at(0, 0, 0));
  EXPECT_EQ(c.labels.at(0, 43, 51), LabelMap::kIgnore);
}

TEST(Dataset, WriteThenLoadReproducesSamples) {
  const fs::path dir = temp_dir("dataset");
  SyntheticSpec spec;
  spec.width = spec.height = 32;
  spec.seed = 77;
  const Manifest m = write_synthetic_dataset(dir, spec, 6, 2);
  EXPECT_EQ(m.split("train"), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(m.split("val"), (std::vector<std::size_t>{4, 5}));
  EXPECT_TRUE(fs::exists(dir / "images" / "0003.ppm"));
  EXPECT_TRUE(fs::exists(dir / "labels" / "0005.pgm"));
  const auto val = load_split(dir, "val");
  ASSERT_EQ(val.size(), 2u);
  const SegSample ref = generate_sample(spec, 5);
  EXPECT_EQ(val[1].image.vector(), ref.image.vector());
  EXPECT_EQ(val[1].labels, ref.labels);
  EXPECT_THROW(load_split(dir, "test"), DataError);
  EXPECT_EQ(read_manifest(dir).num_classes, 4);
}

}  // namespace
}  // namespace bicanet::data
