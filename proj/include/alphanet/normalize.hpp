#pragma once

// Input normalizations (log scaling, per-channel z-score, alpha encoding) and
// the AENC file format for 8-bit alpha-encoded images.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

enum class Normalization { log, zscore, alpha };

inline std::string to_string(Normalization n) {
  switch (n) {
    case Normalization::log: return "log";
    case Normalization::zscore: return "zscore";
    case Normalization::alpha: return "alpha";
  }
  return "?";
}

inline Normalization parse_normalization(const std::string& s) {
  if (s == "log") return Normalization::log;
  if (s == "zscore") return Normalization::zscore;
  if (s == "alpha") return Normalization::alpha;
  throw ConfigError("unknown normalization '" + s + "' (expected log|zscore|alpha)");
}

/// ln(1 + x) / ln(1 + max_value).
template <typename T>
Tensor<T> log_scale(const Tensor<T>& img, double max_value = 255.0) {
  if (!(max_value > 0.0)) throw DomainError("log_scale max_value must be positive");
  const double denom = std::log1p(max_value);
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double x = static_cast<double>(img[i]);
    if (!(x >= 0.0)) throw DomainError("log_scale requires non-negative pixels, got " + std::to_string(x));
    out[i] = static_cast<T>(std::log1p(x) / denom);
  }
  return out;
}

struct DatasetStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  static constexpr double std_floor = 1e-6;
};

/// Exact per-channel mean and population std over C x H x W images. Sums are
/// accumulated per image then combined in sorted order so the result does not
/// depend on image order.
template <typename T>
DatasetStats compute_dataset_stats(const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw ConfigError("compute_dataset_stats on an empty split");
  const std::size_t c = images.front().dim(0);
  std::vector<std::vector<double>> sums(c), squares(c);
  double count = 0;
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(0) != c) {
      throw ShapeError("dataset images must share channel count, got " + shape_string(img.shape()));
    }
    const std::size_t hw = img.dim(1) * img.dim(2);
    count += static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, q = 0;
      for (std::size_t k = 0; k < hw; ++k) {
        const double v = static_cast<double>(img[ch * hw + k]);
        s += v;
        q += v * v;
      }
      sums[ch].push_back(s);
      squares[ch].push_back(q);
    }
  }
  DatasetStats st;
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::sort(sums[ch].begin(), sums[ch].end());
    std::sort(squares[ch].begin(), squares[ch].end());
    double s = 0, q = 0;
    for (double v : sums[ch]) s += v;
    for (double v : squares[ch]) q += v;
    const double mean = s / count;
    const double var = std::max(0.0, q / count - mean * mean);
    st.mean.push_back(mean);
    st.stddev.push_back(std::max(std::sqrt(var), DatasetStats::std_floor));
  }
  return st;
}

/// (x - mean_c) / std_c on a C x H x W image.
template <typename T>
Tensor<T> z_score(const Tensor<T>& img, const DatasetStats& stats) {
  if (img.rank() != 3) throw ShapeError("z_score expects C x H x W, got " + shape_string(img.shape()));
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  if (stats.mean.size() < c || stats.stddev.size() < c) {
    throw ConfigError("dataset stats cover " + std::to_string(stats.mean.size()) + " channels, image has " +
                      std::to_string(c));
  }
  Tensor<T> out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < hw; ++k) {
      out[ch * hw + k] = static_cast<T>((static_cast<double>(img[ch * hw + k]) - stats.mean[ch]) / stats.stddev[ch]);
    }
  }
  return out;
}

struct EncodedImage {
  std::uint32_t channels = 0, height = 0, width = 0;
  float offset = 0.0f;
  float scale = 1.0f;
  std::vector<std::uint8_t> payload;
};

/// Per-image min-max affine map quantized to 8 bits.
template <typename T>
EncodedImage alpha_encode(const Tensor<T>& img) {
  if (img.rank() != 3) throw ShapeError("alpha_encode expects C x H x W, got " + shape_string(img.shape()));
  require_finite(img, "alpha_encode input");
  const auto v = img.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  EncodedImage e;
  e.channels = static_cast<std::uint32_t>(img.dim(0));
  e.height = static_cast<std::uint32_t>(img.dim(1));
  e.width = static_cast<std::uint32_t>(img.dim(2));
  e.offset = static_cast<float>(*lo);
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  e.scale = range > 0.0 ? static_cast<float>(range) : 1.0f;
  e.payload.resize(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double q = std::round(255.0 * (static_cast<double>(v[i]) - e.offset) / e.scale);
    e.payload[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
  }
  return e;
}

template <typename T>
Tensor<T> alpha_decode(const EncodedImage& e) {
  const Shape shape{e.channels, e.height, e.width};
  if (e.payload.size() != shape_size(shape)) throw ShapeError("encoded payload length does not match dims");
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < e.payload.size(); ++i) {
    out[i] = static_cast<T>(static_cast<double>(e.offset) + static_cast<double>(e.scale) * e.payload[i] / 255.0);
  }
  return out;
}

/// The normalized view the trainer consumes: payload / 255, i.e. the decoded
/// image mapped through its own min-max affine transform into [0, 1].
template <typename T>
Tensor<T> alpha_normalize(const Tensor<T>& img) {
  const EncodedImage e = alpha_encode(img);
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < e.payload.size(); ++i) out[i] = static_cast<T>(e.payload[i] / 255.0);
  return out;
}

inline constexpr std::size_t aenc_header_bytes = 4 + 1 + 3 * 4 + 2 * 4;

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}
}  // namespace detail

/// "AENC", u8 version 1, u32 LE C H W, f32 LE offset and scale, payload.
inline std::vector<std::uint8_t> serialize_aenc(const EncodedImage& e) {
  if (e.payload.size() != std::size_t{e.channels} * e.height * e.width) {
    throw ShapeError("encoded payload length does not match dims");
  }
  std::vector<std::uint8_t> out{'A', 'E', 'N', 'C', 1};
  detail::put_u32(out, e.channels);
  detail::put_u32(out, e.height);
  detail::put_u32(out, e.width);
  detail::put_u32(out, std::bit_cast<std::uint32_t>(e.offset));
  detail::put_u32(out, std::bit_cast<std::uint32_t>(e.scale));
  out.insert(out.end(), e.payload.begin(), e.payload.end());
  return out;
}

inline EncodedImage parse_aenc(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < aenc_header_bytes || std::memcmp(bytes.data(), "AENC", 4) != 0) {
    throw IoError("not an AENC file");
  }
  if (bytes[4] != 1) throw IoError("unsupported AENC version " + std::to_string(bytes[4]));
  EncodedImage e;
  const std::uint8_t* p = bytes.data() + 5;
  e.channels = detail::get_u32(p);
  e.height = detail::get_u32(p + 4);
  e.width = detail::get_u32(p + 8);
  e.offset = std::bit_cast<float>(detail::get_u32(p + 12));
  e.scale = std::bit_cast<float>(detail::get_u32(p + 16));
  const std::size_t n = std::size_t{e.channels} * e.height * e.width;
  if (bytes.size() != aenc_header_bytes + n) throw IoError("AENC payload length mismatch");
  e.payload.assign(bytes.begin() + aenc_header_bytes, bytes.end());
  return e;
}

inline void write_aenc(const std::filesystem::path& path, const EncodedImage& e) {
  const auto bytes = serialize_aenc(e);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

inline EncodedImage read_aenc(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_aenc(bytes);
}

}  // namespace alphanet
