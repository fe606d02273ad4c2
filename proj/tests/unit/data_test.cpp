#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "alphanet/data.hpp"

using namespace alphanet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("alphanet_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ToyConfig tiny_toy() {
  ToyConfig t;
  t.classes = 3;
  t.per_class = 4;
  t.size = 8;
  return t;
}

Tensor<float> ramp(std::size_t c, std::size_t h, std::size_t w) {
  Tensor<float> t({c, h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  return t;
}

}  // namespace

TEST(Toy, IsDeterministicAndWellFormed) {
  const auto a = make_toy_dataset(tiny_toy());
  const auto b = make_toy_dataset(tiny_toy());
  ASSERT_EQ(a.size(), 12u);
  EXPECT_EQ(a.class_count, 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].id, b.samples[i].id);
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].image.shape(), (Shape{3, 8, 8}));
    for (float v : a.samples[i].image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 255.0f);
    }
  }
  EXPECT_EQ(a.samples[0].id, "toy0000");
  EXPECT_NO_THROW(validate_dataset(a));
  ToyConfig other = tiny_toy();
  other.seed = 1;
  EXPECT_NE(make_toy_dataset(other).samples[0].image, a.samples[0].image);
}

TEST(Idx, RoundTripsPixelsAndLabels) {
  const auto dir = scratch("idx");
  const auto ds = make_toy_dataset(tiny_toy());
  save_idx(dir, ds);
  const auto back = load_idx(dir);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.class_count, 3u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    for (std::size_t k = 0; k < ds.samples[i].image.size(); ++k)
      ASSERT_EQ(back.samples[i].image[k], std::round(ds.samples[i].image[k]));
  }
  // The prefix form shares the same reader.
  save_idx(dir / "train", ds);
  EXPECT_EQ(load_idx(dir / "train").size(), ds.size());
  fs::remove_all(dir);
}

TEST(Idx, HeaderIsBigEndianWithTypeAndRank) {
  const auto dir = scratch("idxhdr");
  Dataset ds;
  ds.class_count = 2;
  ds.samples.push_back({"a", Tensor<float>({1, 2, 3}, 7.0f), 1});
  save_idx(dir, ds);
  std::ifstream f(dir / "images.idx", std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::vector<unsigned char> head{0, 0, 0x08, 4, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3};
  ASSERT_EQ(b.size(), head.size() + 6);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), b.begin()));
  EXPECT_EQ(b.back(), 7);
  fs::remove_all(dir);
}

TEST(Idx, MissingOrCorruptFilesAreIoErrors) {
  const auto dir = scratch("idxbad");
  EXPECT_THROW(load_idx(dir), IoError);
  std::ofstream(dir / "images.idx") << "junk";
  std::ofstream(dir / "labels.idx") << "junk";
  EXPECT_THROW(load_idx(dir), IoError);
  EXPECT_THROW(load_dataset(dir / "nope", DataFormat::idx), IoError);
  fs::remove_all(dir);
}

TEST(ImageDir, RoundTripsThroughPng) {
  const auto dir = scratch("imgdir");
  const auto ds = make_toy_dataset(tiny_toy());
  save_image_dir(dir, ds);
  const auto back = load_image_dir(dir);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.class_names, ds.class_names);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    for (std::size_t k = 0; k < ds.samples[i].image.size(); ++k)
      ASSERT_EQ(back.samples[i].image[k], std::round(ds.samples[i].image[k]));
  }
  fs::remove_all(dir);
}

TEST(Split, IsDeterministicDisjointAndSized) {
  ToyConfig t = tiny_toy();
  t.per_class = 20;
  const auto ds = make_toy_dataset(t);
  const auto [a, b] = split_dataset(ds, 0.25, 5);
  const auto [a2, b2] = split_dataset(ds, 0.25, 5);
  EXPECT_EQ(b.size(), 15u);
  EXPECT_EQ(a.size() + b.size(), ds.size());
  std::set<std::string> ids;
  for (const auto& s : a.samples) ids.insert(s.id);
  for (const auto& s : b.samples) EXPECT_EQ(ids.count(s.id), 0u);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b.samples[i].id, b2.samples[i].id);
  EXPECT_EQ(b.split, Split::val);
  const auto [c, d] = split_dataset(ds, 0.25, 6);
  bool differs = false;
  for (std::size_t i = 0; i < d.size(); ++i) differs |= d.samples[i].id != b.samples[i].id;
  EXPECT_TRUE(differs);
  EXPECT_THROW(split_dataset(ds, 1.0, 5), ConfigError);
}

TEST(Resize, IdentityAndHalfPixelCenters) {
  const auto img = ramp(2, 3, 4);
  EXPECT_EQ(resize_bilinear(img, 3, 4), img);
  // 1x2 -> 1x4: centers at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
  const Tensor<float> row({1, 1, 2}, {0.0f, 4.0f});
  EXPECT_EQ(resize_bilinear(row, 1, 4), Tensor<float>({1, 1, 4}, {0.0f, 1.0f, 3.0f, 4.0f}));
  // Downscale by 2 averages pixel pairs.
  const Tensor<float> quad({1, 1, 4}, {0.0f, 2.0f, 4.0f, 6.0f});
  EXPECT_EQ(resize_bilinear(quad, 1, 2), Tensor<float>({1, 1, 2}, {1.0f, 5.0f}));
  EXPECT_EQ(resize_shorter_side(ramp(1, 10, 20), 5).shape(), (Shape{1, 5, 10}));
}

TEST(Crops, TenCropOrderAndFlips) {
  const auto img = ramp(1, 4, 4);
  const auto crops = ten_crop(img, 2);
  ASSERT_EQ(crops.size(), 10u);
  EXPECT_EQ(crops[0], crop(img, 0, 0, 2, 2));
  EXPECT_EQ(crops[1], crop(img, 0, 2, 2, 2));
  EXPECT_EQ(crops[2], crop(img, 2, 0, 2, 2));
  EXPECT_EQ(crops[3], crop(img, 2, 2, 2, 2));
  EXPECT_EQ(crops[4], crop(img, 1, 1, 2, 2));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(crops[k + 5], hflip(crops[k]));
  EXPECT_EQ(crops[0], Tensor<float>({1, 2, 2}, {0, 1, 4, 5}));
  EXPECT_EQ(hflip(hflip(img)), img);
  EXPECT_THROW(ten_crop(img, 5), ShapeError);
}

TEST(Augment, DeterministicPerStreamAndShaped) {
  const auto img = ramp(3, 32, 32);
  const auto cfg = scaled_augment_config(32);
  EXPECT_EQ(cfg.min_side, 36u);
  EXPECT_EQ(cfg.max_side, 68u);
  PrngStream a(1, "aug"), b(1, "aug"), c(2, "aug");
  const auto x = augment(img, cfg, a);
  EXPECT_EQ(x.shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(x, augment(img, cfg, b));
  EXPECT_NE(x, augment(img, cfg, c));
  AugmentConfig bad = cfg;
  bad.min_side = 10;
  EXPECT_THROW(bad.validate(), ConfigError);
}
