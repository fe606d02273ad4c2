#pragma once

// Dataset ingestion (IDX files or a PNG directory), a synthetic toy corpus,
// bilinear resizing, training augmentation and ten-crop geometry.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/png_io.hpp"
#include "alphanet/prng.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct Sample {
  std::string id;
  Tensor<float> image;  // C x H x W, raw pixel values in [0, 255]
  int label = 0;
};

struct Dataset {
  Split split = Split::train;
  std::vector<Sample> samples;
  std::size_t class_count = 0;
  std::vector<std::string> class_names;
  std::string source;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::vector<Tensor<float>> images() const {
    std::vector<Tensor<float>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
  }
};

enum class DataFormat { idx, image_dir, toy };

inline std::string to_string(DataFormat f) {
  switch (f) {
    case DataFormat::idx: return "idx";
    case DataFormat::image_dir: return "image-dir";
    case DataFormat::toy: return "toy";
  }
  return "?";
}

inline DataFormat parse_data_format(const std::string& s) {
  if (s == "idx") return DataFormat::idx;
  if (s == "image-dir") return DataFormat::image_dir;
  if (s == "toy") return DataFormat::toy;
  throw ConfigError("unknown dataset format '" + s + "' (expected idx|image-dir|toy)");
}

inline void validate_dataset(const Dataset& ds) {
  if (ds.samples.empty()) throw IoError("no samples in " + ds.source);
  std::set<std::string> ids;
  const Shape& first = ds.samples.front().image.shape();
  for (const auto& s : ds.samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= ds.class_count) {
      throw IoError("label " + std::to_string(s.label) + " of sample " + s.id + " outside class_count " +
                    std::to_string(ds.class_count));
    }
    if (s.image.shape()[0] != first[0]) throw IoError("sample " + s.id + " has a different channel count");
    if (!ids.insert(s.id).second) throw IoError("duplicate sample id " + s.id);
  }
}

// ---------------------------------------------------------------------------
// IDX: big-endian magic 0x0000 08 <ndim>, ndim u32 BE extents, u8 payload.
// Images are 0x0803 (N x H x W, one channel) or 0x0804 (N x C x H x W);
// labels are 0x0801 (N).

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t{b[at]} << 24 | std::uint32_t{b[at + 1]} << 16 | std::uint32_t{b[at + 2]} << 8 | b[at + 3];
}

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

inline IdxArray read_idx(const std::filesystem::path& p) {
  const auto b = read_bytes(p);
  if (b.size() < 4 || b[0] != 0 || b[1] != 0 || b[2] != 0x08) throw IoError("corrupt IDX header in " + p.string());
  const std::size_t ndim = b[3];
  if (ndim == 0 || b.size() < 4 + 4 * ndim) throw IoError("corrupt IDX header in " + p.string());
  IdxArray a;
  std::size_t n = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    a.dims.push_back(be32(b, 4 + 4 * d));
    n *= a.dims.back();
  }
  if (b.size() != 4 + 4 * ndim + n) {
    throw IoError("IDX payload of " + p.string() + " does not match declared count");
  }
  a.data.assign(b.begin() + static_cast<std::ptrdiff_t>(4 + 4 * ndim), b.end());
  return a;
}

inline void write_idx(const std::filesystem::path& p, const std::vector<std::size_t>& dims,
                      const std::vector<std::uint8_t>& data) {
  std::vector<std::uint8_t> b{0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
  for (std::size_t d : dims)
    for (int k = 3; k >= 0; --k) b.push_back(static_cast<std::uint8_t>(d >> (8 * k)));
  b.insert(b.end(), data.begin(), data.end());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

/// `dir/images.idx` for a directory, else `prefix-images.idx`.
inline std::filesystem::path idx_file(const std::filesystem::path& path, const std::string& what) {
  if (std::filesystem::is_directory(path)) return path / (what + ".idx");
  return std::filesystem::path(path.string() + "-" + what + ".idx");
}

}  // namespace detail

/// class_count 0 infers max(label) + 1.
inline Dataset load_idx(const std::filesystem::path& path, std::size_t class_count = 0) {
  const auto images = detail::read_idx(detail::idx_file(path, "images"));
  const auto labels = detail::read_idx(detail::idx_file(path, "labels"));
  if (images.dims.size() != 3 && images.dims.size() != 4) throw IoError("IDX images must have 3 or 4 dims");
  if (labels.dims.size() != 1) throw IoError("IDX labels must have 1 dim");
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) throw IoError("IDX image and label counts differ");
  const std::size_t c = images.dims.size() == 4 ? images.dims[1] : 1;
  const std::size_t h = images.dims[images.dims.size() - 2], w = images.dims.back();
  Dataset ds;
  ds.source = path.string();
  std::size_t max_label = 0;
  const std::size_t per = c * h * w;
  const int width = static_cast<int>(std::to_string(n).size());
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    std::ostringstream id;
    id << std::setw(width) << std::setfill('0') << i;
    s.id = id.str();
    std::vector<float> v(per);
    for (std::size_t k = 0; k < per; ++k) v[k] = images.data[i * per + k];
    s.image = Tensor<float>({c, h, w}, std::move(v));
    s.label = labels.data[i];
    max_label = std::max<std::size_t>(max_label, s.label);
    ds.samples.push_back(std::move(s));
  }
  ds.class_count = class_count ? class_count : max_label + 1;
  for (std::size_t k = 0; k < ds.class_count; ++k) ds.class_names.push_back(std::to_string(k));
  validate_dataset(ds);
  return ds;
}

inline void save_idx(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.empty()) throw IoError("cannot save an empty dataset");
  const Shape& s = ds.samples.front().image.shape();
  std::vector<std::uint8_t> px, lb;
  for (const auto& smp : ds.samples) {
    if (smp.image.shape() != s) throw ShapeError("IDX needs equal image shapes");
    for (float v : smp.image.data()) px.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
    lb.push_back(static_cast<std::uint8_t>(smp.label));
  }
  detail::write_idx(detail::idx_file(path, "images"), {ds.size(), s[0], s[1], s[2]}, px);
  detail::write_idx(detail::idx_file(path, "labels"), {ds.size()}, lb);
}

// ---------------------------------------------------------------------------
// image-dir: root/labels.csv (header "id,class_name") and root/<class>/<id>.png.
// Class indices follow sorted class names; samples are sorted by id.

inline Dataset load_image_dir(const std::filesystem::path& root) {
  const auto manifest = root / "labels.csv";
  std::ifstream f(manifest);
  if (!f) throw IoError("missing manifest " + manifest.string());
  std::string line;
  std::vector<std::pair<std::string, std::string>> rows;
  bool header = true;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("id,", 0) == 0) continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("malformed manifest row: " + line);
    rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  Dataset ds;
  ds.source = root.string();
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.second);
  ds.class_names.assign(names.begin(), names.end());
  ds.class_count = ds.class_names.size();
  std::sort(rows.begin(), rows.end());
  for (const auto& [id, cls] : rows) {
    Sample s;
    s.id = id;
    s.label = static_cast<int>(std::lower_bound(ds.class_names.begin(), ds.class_names.end(), cls) -
                               ds.class_names.begin());
    s.image = read_png(root / cls / (id + ".png"));
    ds.samples.push_back(std::move(s));
  }
  validate_dataset(ds);
  return ds;
}

inline void save_image_dir(const std::filesystem::path& root, const Dataset& ds) {
  std::filesystem::create_directories(root);
  std::ofstream f(root / "labels.csv");
  if (!f) throw IoError("cannot write manifest under " + root.string());
  f << "id,class_name\n";
  for (const auto& s : ds.samples) {
    const std::string cls = ds.class_names.at(static_cast<std::size_t>(s.label));
    std::filesystem::create_directories(root / cls);
    write_png(root / cls / (s.id + ".png"), s.image);
    f << s.id << "," << cls << "\n";
  }
}

// ---------------------------------------------------------------------------
// Synthetic toy corpus: each class is a color plus an oriented grating; each
// sample draws its own phase, contrast and pixel noise.

struct ToyConfig {
  std::size_t classes = 10;
  std::size_t per_class = 50;
  std::size_t size = 32;
  std::size_t channels = 3;
  double noise = 20.0;
  std::uint64_t seed = 0;
};

inline Dataset make_toy_dataset(const ToyConfig& cfg) {
  if (cfg.classes == 0 || cfg.per_class == 0 || cfg.size == 0 || cfg.channels == 0) {
    throw ConfigError("toy dataset dimensions must be positive");
  }
  Dataset ds;
  ds.source = "toy:" + std::to_string(cfg.classes) + "x" + std::to_string(cfg.per_class) + "@" +
              std::to_string(cfg.size) + "/seed" + std::to_string(cfg.seed);
  ds.class_count = cfg.classes;
  const PrngStream root(cfg.seed, "toy");
  const std::size_t s = cfg.size;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    ds.class_names.push_back("class" + std::to_string(k));
    PrngStream cls = root.fork("class").fork(std::to_string(k));
    std::vector<double> color(cfg.channels);
    for (auto& v : color) v = 60.0 + 140.0 * cls.uniform();
    const double angle = std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.classes);
    const double freq = 2.0 * std::numbers::pi * (1.5 + static_cast<double>(k % 3)) / static_cast<double>(s);
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      Sample smp;
      const std::size_t index = k * cfg.per_class + i;
      smp.id = "toy" + std::string(index < 10 ? "000" : index < 100 ? "00" : index < 1000 ? "0" : "") +
               std::to_string(index);
      smp.label = static_cast<int>(k);
      PrngStream r = root.fork("sample").fork(smp.id);
      const double phase = 2.0 * std::numbers::pi * r.uniform();
      const double contrast = 40.0 + 20.0 * r.uniform();
      Tensor<float> img({cfg.channels, s, s});
      for (std::size_t ch = 0; ch < cfg.channels; ++ch)
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double t = freq * (std::cos(angle) * double(x) + std::sin(angle) * double(y)) + phase;
            const double sign = ch % 2 == 0 ? 1.0 : -1.0;
            const double v = color[ch] + sign * contrast * std::sin(t) + cfg.noise * r.normal();
            img[(ch * s + y) * s + x] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
          }
      smp.image = std::move(img);
      ds.samples.push_back(std::move(smp));
    }
  }
  validate_dataset(ds);
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, DataFormat format) {
  if (format == DataFormat::toy) throw ConfigError("toy datasets are generated, not loaded");
  if (!std::filesystem::exists(path)) throw IoError("dataset path " + path.string() + " does not exist");
  if (format == DataFormat::image_dir) return load_image_dir(path);
  return load_idx(path);
}

/// Deterministic split: samples ordered by a seeded hash of their id, the first
/// `fraction` of them go to the second split.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction, std::uint64_t seed,
                                                 Split second = Split::val) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in [0, 1)");
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  const std::uint64_t key = detail::mix64(seed ^ 0x5eed5eedULL);
  for (std::size_t i = 0; i < ds.size(); ++i) order.emplace_back(detail::mix64(key ^ detail::fnv1a(ds.samples[i].id)), i);
  std::sort(order.begin(), order.end());
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
  Dataset a = ds, b = ds;
  a.samples.clear();
  b.samples.clear();
  a.split = Split::train;
  b.split = second;
  for (std::size_t k = 0; k < order.size(); ++k) (k < cut ? b : a).samples.push_back(ds.samples[order[k].second]);
  auto by_id = [](const Sample& x, const Sample& y) { return x.id < y.id; };
  std::sort(a.samples.begin(), a.samples.end(), by_id);
  std::sort(b.samples.begin(), b.samples.end(), by_id);
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Geometry

/// Bilinear resize with half-pixel centers (align_corners = false), edge clamped.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw ShapeError("resize expects C x H x W, got " + shape_string(img.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be positive");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h == h && out_w == w) return img;
  Tensor<T> out({c, out_h, out_w});
  auto axis = [](std::size_t in, std::size_t out, std::size_t i, std::size_t& i0, std::size_t& i1, double& f) {
    double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    f = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    axis(h, out_h, y, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      axis(w, out_w, x, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = img.ptr() + ch * h * w;
        const double top = (1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
        const double bot = (1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
        out[(ch * out_h + y) * out_w + x] = static_cast<T>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

/// Resize so the shorter side equals `side`, keeping the aspect ratio.
template <typename T>
Tensor<T> resize_shorter_side(const Tensor<T>& img, std::size_t side) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h <= w) {
    return resize_bilinear(img, side, static_cast<std::size_t>(std::lround(double(w) * double(side) / double(h))));
  }
  return resize_bilinear(img, static_cast<std::size_t>(std::lround(double(h) * double(side) / double(w))), side);
}

template <typename T>
Tensor<T> crop(const Tensor<T>& img, std::size_t top, std::size_t left, std::size_t ch, std::size_t cw) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (top + ch > h || left + cw > w) throw ShapeError("crop window exceeds image " + shape_string(img.shape()));
  Tensor<T> out({c, ch, cw});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) out[(k * ch + y) * cw + x] = img[(k * h + top + y) * w + left + x];
  return out;
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = img[(k * h + y) * w + (w - 1 - x)];
  return out;
}

struct AugmentConfig {
  std::size_t min_side = 36;
  std::size_t max_side = 68;
  std::size_t crop_size = 32;
  double hflip_prob = 0.5;
  double color_jitter = 0.1;

  void validate() const {
    if (crop_size == 0) throw ConfigError("crop_size must be positive");
    if (min_side < crop_size) throw ConfigError("augment min_side must be >= crop_size");
    if (max_side < min_side) throw ConfigError("augment max_side must be >= min_side");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("hflip_prob must lie in [0, 1]");
    if (!(color_jitter >= 0.0)) throw ConfigError("color_jitter must be non-negative");
  }
};

/// Scales the 224-crop range [256, 480] to another crop size (floored).
inline AugmentConfig scaled_augment_config(std::size_t crop_size) {
  AugmentConfig a;
  a.crop_size = crop_size;
  a.min_side = crop_size * 256 / 224;
  a.max_side = crop_size * 480 / 224;
  return a;
}

/// Random shorter-side resize, random crop, optional flip, channel gain jitter.
template <typename T>
Tensor<T> augment(const Tensor<T>& img, const AugmentConfig& cfg, PrngStream& stream) {
  cfg.validate();
  if (img.rank() != 3) throw ShapeError("augment expects C x H x W, got " + shape_string(img.shape()));
  const std::size_t side = cfg.min_side + stream.below(cfg.max_side - cfg.min_side + 1);
  Tensor<T> r = resize_shorter_side(img, side);
  if (r.dim(1) < cfg.crop_size || r.dim(2) < cfg.crop_size) {
    throw ShapeError("image " + shape_string(img.shape()) + " smaller than crop after resize");
  }
  const std::size_t top = stream.below(r.dim(1) - cfg.crop_size + 1);
  const std::size_t left = stream.below(r.dim(2) - cfg.crop_size + 1);
  Tensor<T> out = crop(r, top, left, cfg.crop_size, cfg.crop_size);
  if (stream.uniform() < cfg.hflip_prob) out = hflip(out);
  if (cfg.color_jitter > 0.0) {
    const std::size_t c = out.dim(0), hw = out.dim(1) * out.dim(2);
    for (std::size_t k = 0; k < c; ++k) {
      const double gain = std::max(0.0, 1.0 + cfg.color_jitter * stream.normal());
      for (std::size_t i = 0; i < hw; ++i) out[k * hw + i] = static_cast<T>(gain * out[k * hw + i]);
    }
  }
  return out;
}

/// TL, TR, BL, BR, center, then the horizontal flips of those five.
template <typename T>
std::vector<Tensor<T>> ten_crop(const Tensor<T>& img, std::size_t crop_size) {
  if (img.rank() != 3) throw ShapeError("ten_crop expects C x H x W, got " + shape_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (crop_size == 0 || h < crop_size || w < crop_size) {
    throw ShapeError("image " + shape_string(img.shape()) + " too small for ten_crop " + std::to_string(crop_size));
  }
  const std::size_t dy = h - crop_size, dx = w - crop_size;
  const std::pair<std::size_t, std::size_t> at[5] = {{0, 0}, {0, dx}, {dy, 0}, {dy, dx}, {dy / 2, dx / 2}};
  std::vector<Tensor<T>> out;
  for (const auto& [t, l] : at) out.push_back(crop(img, t, l, crop_size, crop_size));
  for (std::size_t k = 0; k < 5; ++k) out.push_back(hflip(out[k]));
  return out;
}

}  // namespace alphanet
