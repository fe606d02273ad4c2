#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>

#include "alphanet/normalize.hpp"
#include "alphanet/prng.hpp"

using namespace alphanet;

TEST(LogScale, MapsPixelRangeOntoUnitInterval) {
  const Tensor<float> x({1, 1, 3}, {0.0f, 255.0f, 15.0f});
  const auto y = log_scale(x);
  EXPECT_FLOAT_EQ(y[0], 0.0f);
  EXPECT_FLOAT_EQ(y[1], 1.0f);
  EXPECT_NEAR(y[2], std::log(16.0) / std::log(256.0), 1e-7);  // = 0.5
  EXPECT_THROW(log_scale(Tensor<float>({1, 1, 1}, -1.0f)), DomainError);
}

TEST(ZScore, StatsMatchTwoPassOracleAndIgnoreOrder) {
  PrngStream s(1, "img");
  std::vector<Tensor<double>> imgs;
  for (int i = 0; i < 7; ++i) {
    Tensor<double> t({2, 3, 4});
    for (auto& v : t.data()) v = 255 * s.uniform();
    imgs.push_back(t);
  }
  const auto st = compute_dataset_stats(imgs);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, n = 0;
    for (const auto& t : imgs)
      for (std::size_t k = 0; k < 12; ++k, ++n) mean += t[c * 12 + k];
    mean /= n;
    double var = 0;
    for (const auto& t : imgs)
      for (std::size_t k = 0; k < 12; ++k) var += (t[c * 12 + k] - mean) * (t[c * 12 + k] - mean);
    EXPECT_NEAR(st.mean[c], mean, 1e-10);
    EXPECT_NEAR(st.stddev[c], std::sqrt(var / n), 1e-9);
  }
  auto reversed = imgs;
  std::reverse(reversed.begin(), reversed.end());
  const auto st2 = compute_dataset_stats(reversed);
  EXPECT_EQ(st.mean, st2.mean);
  EXPECT_EQ(st.stddev, st2.stddev);

  // Normalizing the set itself gives zero mean, unit std per channel.
  double m0 = 0, q0 = 0;
  for (const auto& t : imgs) {
    const auto z = z_score(t, st);
    for (std::size_t k = 0; k < 12; ++k) {
      m0 += z[k];
      q0 += z[k] * z[k];
    }
  }
  EXPECT_NEAR(m0 / 84, 0.0, 1e-12);
  EXPECT_NEAR(q0 / 84, 1.0, 1e-12);
}

TEST(ZScore, ConstantChannelUsesStdFloor) {
  const std::vector<Tensor<double>> imgs{Tensor<double>({1, 2, 2}, 5.0)};
  const auto st = compute_dataset_stats(imgs);
  EXPECT_EQ(st.stddev[0], 1e-6);
  EXPECT_TRUE(z_score(imgs[0], st).all_finite());
  EXPECT_THROW(compute_dataset_stats(std::vector<Tensor<double>>{}), ConfigError);
}

TEST(AlphaCodec, RoundTripWithinHalfQuantizationStep) {
  PrngStream s(2, "codec");
  for (int i = 0; i < 200; ++i) {
    Tensor<float> img({3, 8, 8});
    const double lo = -100 + 200 * s.uniform(), span = 1e-3 + 300 * s.uniform();
    for (auto& v : img.data()) v = static_cast<float>(lo + span * s.uniform());
    const auto e = alpha_encode(img);
    const auto back = alpha_decode<float>(e);
    const double bound = e.scale / 510.0 + 4 * 1.2e-7 * (std::abs(lo) + span);
    for (std::size_t k = 0; k < img.size(); ++k) ASSERT_LE(std::abs(back[k] - img[k]), bound);
    // Extremes hit the ends of the payload range.
    EXPECT_EQ(*std::min_element(e.payload.begin(), e.payload.end()), 0);
    EXPECT_EQ(*std::max_element(e.payload.begin(), e.payload.end()), 255);
  }
}

TEST(AlphaCodec, ConstantImageDecodesExactly) {
  const Tensor<float> img({1, 2, 2}, 42.0f);
  const auto e = alpha_encode(img);
  EXPECT_EQ(e.scale, 1.0f);
  EXPECT_EQ(alpha_decode<float>(e), img);
  EXPECT_EQ(alpha_normalize(img), Tensor<float>({1, 2, 2}, 0.0f));
}

TEST(AlphaCodec, NormalizedViewIsPayloadOverMax) {
  const Tensor<float> img({1, 1, 3}, {10.0f, 20.0f, 30.0f});
  const auto a = alpha_normalize(img);
  EXPECT_FLOAT_EQ(a[0], 0.0f);
  EXPECT_FLOAT_EQ(a[1], 128.0f / 255.0f);  // round(127.5) = 128
  EXPECT_FLOAT_EQ(a[2], 1.0f);
}

TEST(Aenc, ByteLayoutIsExact) {
  EncodedImage e;
  e.channels = 1;
  e.height = 2;
  e.width = 1;
  e.offset = -1.5f;
  e.scale = 2.0f;
  e.payload = {7, 250};
  const auto b = serialize_aenc(e);
  const std::vector<std::uint8_t> want{'A', 'E', 'N', 'C', 1,
                                       1, 0, 0, 0,       // C
                                       2, 0, 0, 0,       // H
                                       1, 0, 0, 0,       // W
                                       0x00, 0x00, 0xC0, 0xBF,  // -1.5f little endian
                                       0x00, 0x00, 0x00, 0x40,  // 2.0f
                                       7, 250};
  EXPECT_EQ(b, want);
  EXPECT_EQ(aenc_header_bytes, 25u);
  const auto back = parse_aenc(b);
  EXPECT_EQ(back.payload, e.payload);
  EXPECT_EQ(back.offset, -1.5f);
  EXPECT_EQ(back.height, 2u);
}

TEST(Aenc, RejectsCorruptFiles) {
  EncodedImage e{1, 1, 2, 0.0f, 1.0f, {1, 2}};
  auto b = serialize_aenc(e);
  auto bad = b;
  bad[0] = 'X';
  EXPECT_THROW(parse_aenc(bad), IoError);
  bad = b;
  bad[4] = 2;
  EXPECT_THROW(parse_aenc(bad), IoError);
  bad = b;
  bad.pop_back();
  EXPECT_THROW(parse_aenc(bad), IoError);
  e.payload.push_back(3);
  EXPECT_THROW(serialize_aenc(e), ShapeError);
}

TEST(Aenc, FileRoundTripAndCompressionRatio) {
  const auto dir = std::filesystem::temp_directory_path() / "alphanet_aenc_test";
  std::filesystem::create_directories(dir);
  PrngStream s(3, "aenc");
  Tensor<float> img({3, 64, 64});
  for (auto& v : img.data()) v = static_cast<float>(255 * s.uniform());
  const auto e = alpha_encode(img);
  write_aenc(dir / "a.aenc", e);
  const auto back = read_aenc(dir / "a.aenc");
  EXPECT_EQ(back.payload, e.payload);
  const double ratio = double(img.size() * 4) / double(std::filesystem::file_size(dir / "a.aenc"));
  // 49152 / (12288 + 25)
  EXPECT_NEAR(ratio, 49152.0 / 12313.0, 1e-12);
  EXPECT_GE(ratio, 3.9);
  std::filesystem::remove_all(dir);
}

TEST(Normalization, ParsesNames) {
  EXPECT_EQ(parse_normalization("zscore"), Normalization::zscore);
  EXPECT_EQ(to_string(Normalization::alpha), "alpha");
  EXPECT_THROW(parse_normalization("minmax"), ConfigError);
}
