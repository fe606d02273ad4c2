#pragma once

// Experiment assembly: the key=value config format, result rows with the
// published reference accuracies, single runs and the comparison sweeps.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "alphanet/data.hpp"
#include "alphanet/error.hpp"
#include "alphanet/losses.hpp"
#include "alphanet/net.hpp"
#include "alphanet/normalize.hpp"
#include "alphanet/trainer.hpp"
#include "json.hpp"

namespace alphanet {

// ---------------------------------------------------------------------------
// Published reference accuracies (Top-1 %, as printed). Reference values only;
// nothing here is reproduced by the desk-scale runs.

struct ReferenceValue {
  int table;
  const char* row;
  const char* column;
  const char* top1;
};

inline constexpr ReferenceValue reference_values[] = {
    {1, "v1", "plain", "75.1"}, {1, "v1", "residual", "78.2"}, {1, "v1", "alpha", "79.0"},
    {1, "v2", "plain", "76.2"}, {1, "v2", "residual", "76.3"}, {1, "v2", "alpha", "79.2"},
    {1, "v3", "plain", "76.3"}, {1, "v3", "residual", "76.5"}, {1, "v3", "alpha", "79.5"},
    {1, "v4", "plain", "72.1"}, {1, "v4", "residual", "76.1"}, {1, "v4", "alpha", "77.5"},
    {2, "v1", "softmax", "72.1"}, {2, "v1", "am_softmax", "74.3"}, {2, "v1", "am_softmax_linear", "76.2"},
    {2, "v2", "softmax", "71.3"}, {2, "v2", "am_softmax", "74.3"}, {2, "v2", "am_softmax_linear", "77.1"},
    {2, "v3", "softmax", "72.1"}, {2, "v3", "am_softmax", "74.3"}, {2, "v3", "am_softmax_linear", "77.2"},
    {2, "v4", "softmax", "71.2"}, {2, "v4", "am_softmax", "73.1"}, {2, "v4", "am_softmax_linear", "75.1"},
    {3, "v1", "log", "69.2"}, {3, "v1", "zscore", "71.2"}, {3, "v1", "alpha", "71.0"},
    {3, "v2", "log", "69.5"}, {3, "v2", "zscore", "70.1"}, {3, "v2", "alpha", "71.2"},
    {3, "v3", "log", "70.1"}, {3, "v3", "zscore", "70.1"}, {3, "v3", "alpha", "71.5"},
    {3, "v4", "log", "71.2"}, {3, "v4", "zscore", "69.5"}, {3, "v4", "alpha", "70.5"},
    {4, "Xception", "top1", "79.0"}, {4, "Inception v3", "top1", "78.8"}, {4, "ResNet 50", "top1", "75.9"},
    {4, "VGG 19", "top1", "72.7"}, {4, "VGG 16", "top1", "71.5"}, {4, "InceptionResNet v2", "top1", "80.4"},
    {4, "Alpha-Net v1", "top1", "78.2"}, {4, "Alpha-Net v2", "top1", "79.1"}, {4, "Alpha-Net v3", "top1", "79.5"},
    {4, "Alpha-Net v4", "top1", "78.3"},
};

inline std::optional<std::string> reference_top1(int table, const std::string& row, const std::string& column) {
  for (const auto& r : reference_values) {
    if (r.table == table && row == r.row && column == r.column) return std::string(r.top1);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Precision { single, double_ };

inline std::string to_string(Precision p) { return p == Precision::single ? "float" : "double"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::single;
  if (s == "double") return Precision::double_;
  throw ConfigError("unknown precision '" + s + "' (expected float|double)");
}

struct ExperimentConfig {
  DataFormat dataset_format = DataFormat::toy;
  std::string dataset_path;
  std::string val_path;
  std::string test_path;
  double val_fraction = 0.2;  // 0 evaluates on the training split itself
  std::size_t toy_classes = 10;
  std::size_t toy_per_class = 50;
  std::size_t toy_size = 32;
  double toy_noise = 20.0;
  std::uint64_t toy_seed = 0;

  NetworkConfig net;
  Normalization normalization = Normalization::zscore;
  bool alpha_zscore = false;
  std::string head = "auto";  // auto: affine for softmax, cosine otherwise
  TrainConfig train;
  EvalConfig eval;
  Precision precision = Precision::single;
  int reference_table = 1;
  std::string out_dir = "runs";

  std::uint64_t seed() const { return net.seed; }
  void set_seed(std::uint64_t s) {
    net.seed = s;
    train.seed = s;
  }

  HeadKind resolved_head() const {
    if (head == "auto") return train.loss.kind == LossKind::softmax ? HeadKind::affine : HeadKind::cosine;
    return parse_head_kind(head);
  }

  void validate() const {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
    if (dataset_format != DataFormat::toy && dataset_path.empty()) throw ConfigError("dataset_path is required");
    if (reference_table < 1 || reference_table > 4) throw ConfigError("reference_table must be 1..4");
    if (head != "auto") parse_head_kind(head);
    train.validate();
    if (net.seed != train.seed) throw ConfigError("network and training seeds diverged");
    make_network_spec(network_config());
  }

  NetworkConfig network_config() const {
    NetworkConfig n = net;
    n.head = resolved_head();
    return n;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto u = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "' expects true|false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(static_cast<std::size_t>(parse_uint(key, item)));
  }
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Int>
Field uint_field(const char* key, Int ExperimentConfig::*outer) {
  return {key, [=](const ExperimentConfig& c) { return std::to_string(c.*outer); },
          [=](ExperimentConfig& c, const std::string& v) { c.*outer = static_cast<Int>(parse_uint(key, v)); }};
}

/// Every configurable key in file order; `to_text` writes all of them.
inline const std::vector<Field>& config_fields() {
  using C = ExperimentConfig;
  using S = const std::string&;
  auto d = fmt_double;
  static const std::vector<Field> fields = {
      {"dataset_format", [](const C& c) { return to_string(c.dataset_format); },
       [](C& c, S v) { c.dataset_format = parse_data_format(v); }},
      {"dataset_path", [](const C& c) { return c.dataset_path; }, [](C& c, S v) { c.dataset_path = v; }},
      {"val_path", [](const C& c) { return c.val_path; }, [](C& c, S v) { c.val_path = v; }},
      {"test_path", [](const C& c) { return c.test_path; }, [](C& c, S v) { c.test_path = v; }},
      {"val_fraction", [d](const C& c) { return d(c.val_fraction); },
       [](C& c, S v) { c.val_fraction = parse_double("val_fraction", v); }},
      uint_field("toy_classes", &C::toy_classes),
      uint_field("toy_per_class", &C::toy_per_class),
      uint_field("toy_size", &C::toy_size),
      {"toy_noise", [d](const C& c) { return d(c.toy_noise); },
       [](C& c, S v) { c.toy_noise = parse_double("toy_noise", v); }},
      uint_field("toy_seed", &C::toy_seed),
      {"seed", [](const C& c) { return std::to_string(c.seed()); },
       [](C& c, S v) { c.set_seed(parse_uint("seed", v)); }},
      {"version", [](const C& c) { return to_string(c.net.version); },
       [](C& c, S v) { c.net.version = parse_version(v); }},
      {"structure", [](const C& c) { return to_string(c.net.structure); },
       [](C& c, S v) { c.net.structure = parse_structure(v); }},
      {"desk_scale", [](const C& c) { return std::to_string(c.net.desk_scale); },
       [](C& c, S v) { c.net.desk_scale = parse_uint("desk_scale", v); }},
      {"num_classes", [](const C& c) { return std::to_string(c.net.num_classes); },
       [](C& c, S v) { c.net.num_classes = parse_uint("num_classes", v); }},
      {"in_channels", [](const C& c) { return std::to_string(c.net.in_channels); },
       [](C& c, S v) { c.net.in_channels = parse_uint("in_channels", v); }},
      {"input_size", [](const C& c) { return std::to_string(c.net.input_size); },
       [](C& c, S v) { c.net.input_size = parse_uint("input_size", v); }},
      {"base_width", [](const C& c) { return std::to_string(c.net.base_width); },
       [](C& c, S v) { c.net.base_width = parse_uint("base_width", v); }},
      {"stage_blocks", [](const C& c) { return join_sizes(c.net.stage_blocks); },
       [](C& c, S v) { c.net.stage_blocks = parse_size_list("stage_blocks", v); }},
      {"p_extra", [d](const C& c) { return d(c.net.p_extra); },
       [](C& c, S v) { c.net.p_extra = parse_double("p_extra", v); }},
      {"kernel_small", [](const C& c) { return std::to_string(c.net.kernel_small); },
       [](C& c, S v) { c.net.kernel_small = parse_uint("kernel_small", v); }},
      {"kernel_large", [](const C& c) { return std::to_string(c.net.kernel_large); },
       [](C& c, S v) { c.net.kernel_large = parse_uint("kernel_large", v); }},
      {"downsample_stride", [](const C& c) { return std::to_string(c.net.downsample_stride); },
       [](C& c, S v) { c.net.downsample_stride = parse_uint("downsample_stride", v); }},
      {"pool_in_downsample", [](const C& c) { return std::string(c.net.pool_in_downsample ? "true" : "false"); },
       [](C& c, S v) { c.net.pool_in_downsample = parse_bool("pool_in_downsample", v); }},
      {"pool_size", [](const C& c) { return std::to_string(c.net.pool.height); },
       [](C& c, S v) { c.net.pool.height = c.net.pool.width = parse_uint("pool_size", v); }},
      {"pool_stride", [](const C& c) { return std::to_string(c.net.pool.stride); },
       [](C& c, S v) { c.net.pool.stride = parse_uint("pool_stride", v); }},
      {"aux_heads", [](const C& c) { return std::string(c.net.aux_heads ? "true" : "false"); },
       [](C& c, S v) { c.net.aux_heads = parse_bool("aux_heads", v); }},
      {"head", [](const C& c) { return c.head; }, [](C& c, S v) { c.head = v; }},
      {"normalization", [](const C& c) { return to_string(c.normalization); },
       [](C& c, S v) { c.normalization = parse_normalization(v); }},
      {"alpha_zscore", [](const C& c) { return std::string(c.alpha_zscore ? "true" : "false"); },
       [](C& c, S v) { c.alpha_zscore = parse_bool("alpha_zscore", v); }},
      {"loss", [](const C& c) { return to_string(c.train.loss.kind); },
       [](C& c, S v) { c.train.loss.kind = parse_loss_kind(v); }},
      {"loss_scale", [d](const C& c) { return d(c.train.loss.scale); },
       [](C& c, S v) { c.train.loss.scale = parse_double("loss_scale", v); }},
      {"loss_margin", [d](const C& c) { return d(c.train.loss.margin); },
       [](C& c, S v) { c.train.loss.margin = parse_double("loss_margin", v); }},
      {"loss_slope", [d](const C& c) { return c.train.loss.slope ? d(*c.train.loss.slope) : std::string(); },
       [](C& c, S v) {
         c.train.loss.slope = v.empty() ? std::nullopt : std::optional<double>(parse_double("loss_slope", v));
       }},
      {"loss_offset", [d](const C& c) { return c.train.loss.offset ? d(*c.train.loss.offset) : std::string(); },
       [](C& c, S v) {
         c.train.loss.offset = v.empty() ? std::nullopt : std::optional<double>(parse_double("loss_offset", v));
       }},
      {"linear_mode", [](const C& c) { return to_string(c.train.loss.linear_mode); },
       [](C& c, S v) { c.train.loss.linear_mode = parse_linear_mode(v); }},
      {"lr0", [d](const C& c) { return d(c.train.lr0); }, [](C& c, S v) { c.train.lr0 = parse_double("lr0", v); }},
      {"momentum", [d](const C& c) { return d(c.train.momentum); },
       [](C& c, S v) { c.train.momentum = parse_double("momentum", v); }},
      {"weight_decay", [d](const C& c) { return d(c.train.weight_decay); },
       [](C& c, S v) { c.train.weight_decay = parse_double("weight_decay", v); }},
      {"batch_size", [](const C& c) { return std::to_string(c.train.batch_size); },
       [](C& c, S v) { c.train.batch_size = parse_uint("batch_size", v); }},
      {"accumulation_factor", [](const C& c) { return std::to_string(c.train.accumulation_factor); },
       [](C& c, S v) { c.train.accumulation_factor = parse_uint("accumulation_factor", v); }},
      {"max_epochs", [](const C& c) { return std::to_string(c.train.max_epochs); },
       [](C& c, S v) { c.train.max_epochs = parse_uint("max_epochs", v); }},
      {"plateau_epsilon", [d](const C& c) { return d(c.train.plateau.epsilon); },
       [](C& c, S v) { c.train.plateau.epsilon = parse_double("plateau_epsilon", v); }},
      {"plateau_patience", [](const C& c) { return std::to_string(c.train.plateau.patience); },
       [](C& c, S v) { c.train.plateau.patience = parse_uint("plateau_patience", v); }},
      {"plateau_max_reductions", [](const C& c) { return std::to_string(c.train.plateau.max_reductions); },
       [](C& c, S v) { c.train.plateau.max_reductions = parse_uint("plateau_max_reductions", v); }},
      {"lambda_aux", [d](const C& c) { return d(c.train.lambda_aux); },
       [](C& c, S v) { c.train.lambda_aux = parse_double("lambda_aux", v); }},
      {"stop_at_val_error",
       [d](const C& c) { return c.train.stop_at_val_error ? d(*c.train.stop_at_val_error) : std::string(); },
       [](C& c, S v) {
         c.train.stop_at_val_error =
             v.empty() ? std::nullopt : std::optional<double>(parse_double("stop_at_val_error", v));
       }},
      {"augment", [](const C& c) { return std::string(c.train.augment ? "true" : "false"); },
       [](C& c, S v) { c.train.augment = parse_bool("augment", v); }},
      {"augment_min_side", [](const C& c) { return std::to_string(c.train.augment_cfg.min_side); },
       [](C& c, S v) { c.train.augment_cfg.min_side = parse_uint("augment_min_side", v); }},
      {"augment_max_side", [](const C& c) { return std::to_string(c.train.augment_cfg.max_side); },
       [](C& c, S v) { c.train.augment_cfg.max_side = parse_uint("augment_max_side", v); }},
      {"augment_crop", [](const C& c) { return std::to_string(c.train.augment_cfg.crop_size); },
       [](C& c, S v) { c.train.augment_cfg.crop_size = parse_uint("augment_crop", v); }},
      {"hflip_prob", [d](const C& c) { return d(c.train.augment_cfg.hflip_prob); },
       [](C& c, S v) { c.train.augment_cfg.hflip_prob = parse_double("hflip_prob", v); }},
      {"color_jitter", [d](const C& c) { return d(c.train.augment_cfg.color_jitter); },
       [](C& c, S v) { c.train.augment_cfg.color_jitter = parse_double("color_jitter", v); }},
      {"eval_mode", [](const C& c) { return to_string(c.eval.mode); },
       [](C& c, S v) { c.eval.mode = parse_eval_mode(v); }},
      {"eval_scales", [](const C& c) { return join_sizes(c.eval.scales); },
       [](C& c, S v) { c.eval.scales = parse_size_list("eval_scales", v); }},
      {"eval_batch_size", [](const C& c) { return std::to_string(c.eval.batch_size); },
       [](C& c, S v) { c.eval.batch_size = parse_uint("eval_batch_size", v); }},
      {"precision", [](const C& c) { return to_string(c.precision); },
       [](C& c, S v) { c.precision = parse_precision(v); }},
      {"reference_table", [](const C& c) { return std::to_string(c.reference_table); },
       [](C& c, S v) { c.reference_table = static_cast<int>(parse_uint("reference_table", v)); }},
      {"out_dir", [](const C& c) { return c.out_dir; }, [](C& c, S v) { c.out_dir = v; }},
  };
  return fields;
}

}  // namespace detail

/// Applies one key; unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const ExperimentConfig& c, const std::string& key) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) return f.get(c);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Lines of `key = value`; `#` starts a comment line. Later keys override earlier ones.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: " + t);
    }
    set_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  if (!std::filesystem::exists(path)) throw IoError("config file " + path.string() + " does not exist");
  return parse_config(read_text(path), std::move(base));
}

/// Every key with its resolved value, so parse_config(to_text(c)) reproduces c.
inline std::string to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + " = " + f.get(c) + "\n";
  return out;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& f : detail::config_fields()) j[f.key] = f.get(c);
  return j;
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::string version;
  std::string structure;
  std::string normalization;
  std::string loss;
  std::size_t desk_scale = 0;
  std::uint64_t seed = 0;
  std::optional<double> top1;  // unset marks a failed cell
  std::size_t param_count = 0;
  double wall_s = 0.0;
  std::optional<std::string> paper_ref_top1;
  std::string error;  // failure message for failed cells
};

inline constexpr const char* results_header =
    "version,structure,normalization,loss,desk_scale,seed,top1,param_count,wall_s,paper_ref_top1";

inline std::string csv_line(const ResultRow& r) {
  char top1[32] = "failed", wall[32];
  if (r.top1) std::snprintf(top1, sizeof top1, "%.6f", *r.top1);
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_s);
  return r.version + "," + r.structure + "," + r.normalization + "," + r.loss + "," + std::to_string(r.desk_scale) +
         "," + std::to_string(r.seed) + "," + top1 + "," + std::to_string(r.param_count) + "," + wall + "," +
         r.paper_ref_top1.value_or("");
}

/// Appends to a results CSV, writing the header first when the file is new.
inline void append_result(const std::filesystem::path& csv, const ResultRow& r) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  std::ofstream f(csv, std::ios::app);
  if (!f) throw IoError("cannot append to " + csv.string());
  if (fresh) f << results_header << "\n";
  f << csv_line(r) << "\n";
}

/// Row label for the published table chosen by `reference_table`.
inline std::optional<std::string> reference_for(const ExperimentConfig& c) {
  const std::string v = to_string(c.net.version);
  switch (c.reference_table) {
    case 1: return reference_top1(1, v, to_string(c.net.structure));
    case 2: return reference_top1(2, v, to_string(c.train.loss.kind));
    case 3: return reference_top1(3, v, to_string(c.normalization));
    case 4: return reference_top1(4, "Alpha-Net " + v, "top1");
  }
  return std::nullopt;
}

inline std::string cell_name(const ExperimentConfig& c) {
  return to_string(c.net.version) + "-" + to_string(c.net.structure) + "-" + to_string(c.normalization) + "-" +
         to_string(c.train.loss.kind) + "-d" + std::to_string(c.net.desk_scale) + "-s" + std::to_string(c.seed());
}

struct Splits {
  Dataset train, val, test;
};

inline Splits load_splits(const ExperimentConfig& c) {
  Dataset all;
  if (c.dataset_format == DataFormat::toy) {
    ToyConfig t;
    t.classes = c.toy_classes;
    t.per_class = c.toy_per_class;
    t.size = c.toy_size;
    t.channels = c.net.in_channels;
    t.noise = c.toy_noise;
    t.seed = c.toy_seed;
    all = make_toy_dataset(t);
  } else {
    all = load_dataset(c.dataset_path, c.dataset_format);
  }
  Splits s;
  if (!c.val_path.empty()) {
    s.train = std::move(all);
    s.val = load_dataset(c.val_path, c.dataset_format);
    s.val.split = Split::val;
  } else if (c.val_fraction == 0.0) {
    s.train = all;
    s.val = std::move(all);
  } else {
    auto [tr, va] = split_dataset(all, c.val_fraction, c.seed());
    s.train = std::move(tr);
    s.val = std::move(va);
  }
  if (s.train.empty() || s.val.empty()) throw ConfigError("dataset split left an empty train or val set");
  if (!c.test_path.empty()) {
    s.test = load_dataset(c.test_path, c.dataset_format);
    s.test.split = Split::test;
  } else {
    s.test = s.val;
  }
  return s;
}

struct RunOutcome {
  ResultRow row;
  std::vector<HistoryRecord> history;
};

namespace detail {

template <typename T>
RunOutcome run_typed(const ExperimentConfig& c, const std::function<void(const HistoryRecord&)>& on_epoch) {
  const auto start = std::chrono::steady_clock::now();
  const Splits data = load_splits(c);
  NetworkConfig nc = c.network_config();
  if (data.train.class_count > nc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.train.class_count) + " classes but num_classes = " +
                      std::to_string(nc.num_classes));
  }
  auto net = build_network<T>(nc);
  const Preprocessor pre = fit_preprocessor(data.train, c.normalization, c.alpha_zscore);
  const std::filesystem::path dir = std::filesystem::path(c.out_dir) / cell_name(c);
  TrainOptions opts;
  opts.history_path = dir / "history.csv";
  opts.checkpoint_path = dir / "model";
  opts.on_epoch = on_epoch;
  write_text(dir / "config.cfg", to_text(c));
  RunOutcome out;
  auto state = train(net, data.train, data.val, pre, c.train, opts, EvalConfig{});
  EvalConfig ec = c.eval;
  ec.score_scale = c.train.loss.scale;
  out.row.top1 = evaluate_top1(net, data.test, pre, ec);
  out.row.param_count = net.parameter_count();
  out.history = std::move(state.history);
  out.row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace detail

/// Build, train, evaluate; the row is appended to `<out_dir>/results.csv`
/// with a JSON sidecar holding the fully resolved config.
inline RunOutcome run_experiment(const ExperimentConfig& c,
                                 const std::function<void(const HistoryRecord&)>& on_epoch = {}) {
  c.validate();
  RunOutcome out = c.precision == Precision::double_ ? detail::run_typed<double>(c, on_epoch)
                                                     : detail::run_typed<float>(c, on_epoch);
  ResultRow& r = out.row;
  r.version = to_string(c.net.version);
  r.structure = to_string(c.net.structure);
  r.normalization = to_string(c.normalization);
  r.loss = to_string(c.train.loss.kind);
  r.desk_scale = c.net.desk_scale;
  r.seed = c.seed();
  r.paper_ref_top1 = reference_for(c);
  const std::filesystem::path out_dir(c.out_dir);
  append_result(out_dir / "results.csv", r);
  nlohmann::ordered_json j;
  j["row"] = {{"version", r.version},       {"structure", r.structure}, {"normalization", r.normalization},
              {"loss", r.loss},             {"desk_scale", r.desk_scale}, {"seed", r.seed},
              {"top1", *r.top1},            {"param_count", r.param_count}, {"wall_s", r.wall_s},
              {"paper_ref_top1", r.paper_ref_top1 ? nlohmann::ordered_json(*r.paper_ref_top1) : nullptr},
              {"paper_ref_note", "reference, not reproduced"}};
  j["config"] = to_json(c);
  write_text(out_dir / "rows" / (cell_name(c) + ".json"), j.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { structure, loss, normalization, architecture };

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::structure: return "structure";
    case SweepAxis::loss: return "loss";
    case SweepAxis::normalization: return "normalization";
    case SweepAxis::architecture: return "architecture";
  }
  return "?";
}

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "structure" || s == "table1") return SweepAxis::structure;
  if (s == "loss" || s == "table2") return SweepAxis::loss;
  if (s == "normalization" || s == "table3") return SweepAxis::normalization;
  if (s == "architecture" || s == "table4") return SweepAxis::architecture;
  throw ConfigError("unknown sweep axis '" + s + "' (expected structure|loss|normalization|architecture)");
}

inline int reference_table_of(SweepAxis a) { return static_cast<int>(a) + 1; }

inline std::vector<std::string> default_variants(SweepAxis a) {
  switch (a) {
    case SweepAxis::structure: return {"plain", "residual", "alpha"};
    case SweepAxis::loss: return {"softmax", "am_softmax", "am_softmax_linear"};
    case SweepAxis::normalization: return {"log", "zscore", "alpha"};
    case SweepAxis::architecture: return {"alpha"};
  }
  return {};
}

struct SweepConfig {
  ExperimentConfig base;
  SweepAxis axis = SweepAxis::structure;
  std::vector<std::string> versions{"v1", "v2", "v3", "v4"};
  std::vector<std::string> variants;  // empty: the axis defaults
};

struct SweepCell {
  std::string version;
  std::string variant;
  ResultRow row;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::structure;
  std::vector<std::string> versions;
  std::vector<std::string> variants;
  std::vector<SweepCell> cells;

  std::vector<const SweepCell*> failed() const {
    std::vector<const SweepCell*> out;
    for (const auto& c : cells)
      if (!c.row.top1) out.push_back(&c);
    return out;
  }
};

inline ExperimentConfig sweep_cell_config(const SweepConfig& s, const std::string& version, const std::string& variant) {
  ExperimentConfig c = s.base;
  c.net.version = parse_version(version);
  c.reference_table = reference_table_of(s.axis);
  switch (s.axis) {
    case SweepAxis::structure: c.net.structure = parse_structure(variant); break;
    case SweepAxis::loss: c.train.loss.kind = parse_loss_kind(variant); break;
    case SweepAxis::normalization: c.normalization = parse_normalization(variant); break;
    case SweepAxis::architecture: c.net.structure = parse_structure(variant); break;
  }
  return c;
}

/// Cartesian product versions x variants; a failing cell is recorded and the sweep continues.
inline SweepResult sweep(const SweepConfig& s, const std::function<void(const SweepCell&)>& on_cell = {}) {
  SweepResult out;
  out.axis = s.axis;
  out.versions = s.versions;
  out.variants = s.variants.empty() ? default_variants(s.axis) : s.variants;
  for (const auto& v : out.versions) {
    for (const auto& var : out.variants) {
      SweepCell cell{v, var, {}};
      ExperimentConfig c = s.base;
      try {
        c = sweep_cell_config(s, v, var);
        cell.row = run_experiment(c).row;
      } catch (const Error& e) {
        cell.row.version = v;
        cell.row.structure = to_string(c.net.structure);
        cell.row.normalization = to_string(c.normalization);
        cell.row.loss = to_string(c.train.loss.kind);
        cell.row.desk_scale = c.net.desk_scale;
        cell.row.seed = c.seed();
        cell.row.paper_ref_top1 = reference_for(c);
        cell.row.error = e.what();
        append_result(std::filesystem::path(c.out_dir) / "results.csv", cell.row);
      }
      if (on_cell) on_cell(cell);
      out.cells.push_back(std::move(cell));
    }
  }
  return out;
}

/// Versions x variants layout with measured Top-1 (%) followed by the
/// reference columns. The architecture axis lists every published
/// architecture; only the Alpha-Net rows carry measurements.
inline std::string pivot_csv(const SweepResult& r) {
  auto measured = [&](const std::string& v, const std::string& var) -> std::string {
    for (const auto& c : r.cells) {
      if (c.version == v && c.variant == var) {
        if (!c.row.top1) return "failed";
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *c.row.top1);
        return buf;
      }
    }
    return "";
  };
  std::string out;
  if (r.axis == SweepAxis::architecture) {
    out = "architecture,measured_top1,paper_ref_top1\n";
    for (const auto& ref : reference_values) {
      if (ref.table != 4) continue;
      const std::string row = ref.row;
      std::string m;
      if (row.rfind("Alpha-Net ", 0) == 0) m = measured(row.substr(10), r.variants.empty() ? "alpha" : r.variants[0]);
      const bool listed = row.rfind("Alpha-Net ", 0) != 0 ||
                          std::find(r.versions.begin(), r.versions.end(), row.substr(10)) != r.versions.end();
      if (listed) out += row + "," + m + "," + ref.top1 + "\n";
    }
    return out;
  }
  const int table = reference_table_of(r.axis);
  out = "version,layers";
  for (const auto& var : r.variants) out += "," + var;
  for (const auto& var : r.variants) out += ",paper_" + var;
  out += "\n";
  for (const auto& v : r.versions) {
    out += v + "," + std::to_string(layer_budget(parse_version(v)));
    for (const auto& var : r.variants) out += "," + measured(v, var);
    for (const auto& var : r.variants) out += "," + reference_top1(table, v, var).value_or("");
    out += "\n";
  }
  return out;
}

}  // namespace alphanet
