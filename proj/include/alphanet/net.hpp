#pragma once

// Network construction and execution for the three comparable structures:
// plain conv stacks, pre-activation residual blocks, and alpha blocks wired
// by sampled same-shape skip edges with learned softmax gates.

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/modules.hpp"
#include "alphanet/prng.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

enum class Structure { plain, residual, alpha };
enum class Version { v1, v2, v3, v4 };

inline std::string to_string(Structure s) {
  switch (s) {
    case Structure::plain: return "plain";
    case Structure::residual: return "residual";
    case Structure::alpha: return "alpha";
  }
  return "?";
}

inline Structure parse_structure(const std::string& s) {
  if (s == "plain") return Structure::plain;
  if (s == "residual") return Structure::residual;
  if (s == "alpha") return Structure::alpha;
  throw ConfigError("unknown structure '" + s + "' (expected plain|residual|alpha)");
}

inline std::string to_string(Version v) {
  return "v" + std::to_string(static_cast<int>(v) + 1);
}

inline Version parse_version(const std::string& s) {
  if (s == "v1") return Version::v1;
  if (s == "v2") return Version::v2;
  if (s == "v3") return Version::v3;
  if (s == "v4") return Version::v4;
  throw ConfigError("unknown version '" + s + "' (expected v1|v2|v3|v4)");
}

/// Weighted-layer budget of each version before desk scaling.
inline std::size_t layer_budget(Version v) {
  return std::size_t{128} << static_cast<int>(v);
}

inline std::string to_string(HeadKind k) { return k == HeadKind::affine ? "affine" : "cosine"; }

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "affine") return HeadKind::affine;
  if (s == "cosine") return HeadKind::cosine;
  throw ConfigError("unknown head kind '" + s + "'");
}

struct NetworkConfig {
  Version version = Version::v1;
  Structure structure = Structure::alpha;
  std::size_t num_classes = 10;
  std::uint64_t seed = 0;
  std::size_t desk_scale = 16;
  std::size_t in_channels = 3;
  std::size_t input_size = 32;
  std::size_t base_width = 8;
  double p_extra = 0.5;
  std::size_t kernel_small = 5;
  std::size_t kernel_large = 10;
  std::size_t downsample_stride = 2;
  bool pool_in_downsample = true;
  PoolWindow pool{};
  bool aux_heads = true;
  HeadKind head = HeadKind::cosine;
  /// Explicit blocks per stage; empty derives the plan from version and desk_scale.
  std::vector<std::size_t> stage_blocks;
};

struct BlockSpec {
  std::size_t index = 0;
  Structure structure = Structure::alpha;
  std::size_t stage = 0;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  bool downsample = false;
  bool has_aux_head = false;
};

struct EdgeGate {
  std::size_t source = 0;
  std::size_t target = 0;
  double gate_logit = 0.0;
  friend bool operator==(const EdgeGate&, const EdgeGate&) = default;
};

struct NetworkSpec {
  NetworkConfig config;
  std::size_t weighted_layers = 0;
  std::array<std::size_t, 4> stage_blocks{};
  std::array<std::size_t, 4> stage_channels{};
  std::vector<BlockSpec> blocks;
  std::vector<EdgeGate> edges;  // sorted by (target, source); empty for plain/residual
  std::size_t min_input_size = 1;

  std::string manifest() const;
};

// ---------------------------------------------------------------------------
// Connectivity

/// Chain edges (i-1 -> i) always; each extra pair (j -> i), j < i-1, is kept
/// with probability p_extra when block j's output has the shape block i
/// consumes (group[j] == group[i-1]). Inclusion draws come from per-pair forks
/// of `stream`, gate logits from `init/gates`.
inline std::vector<EdgeGate> sample_connectivity(const std::vector<std::size_t>& groups,
                                                 double p_extra, const PrngStream& stream) {
  if (!(p_extra >= 0.0 && p_extra <= 1.0)) throw ConfigError("p_extra must lie in [0, 1]");
  const PrngStream gates = stream.fork("init").fork("gates");
  std::vector<EdgeGate> edges;
  const std::size_t n = groups.size();
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const std::string pair = std::to_string(j) + "-" + std::to_string(i);
      bool keep = j + 1 == i;
      if (!keep && groups[j] == groups[i - 1]) {
        PrngStream coin = stream.fork("edge").fork(pair);
        keep = coin.uniform() < p_extra;
      }
      if (!keep) continue;
      PrngStream g = gates.fork(pair);
      edges.push_back({j, i, 0.1 * g.normal()});
    }
  }
  return edges;
}

/// All blocks treated as shape-compatible.
inline std::vector<EdgeGate> sample_connectivity(std::size_t num_blocks, double p_extra,
                                                 const PrngStream& stream) {
  return sample_connectivity(std::vector<std::size_t>(num_blocks, 0), p_extra, stream);
}

inline std::string format_edges(const std::vector<EdgeGate>& edges) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& e : edges) os << e.source << " -> " << e.target << " " << e.gate_logit << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Spec construction

inline std::size_t weighted_layers_per_block(Structure s) { return s == Structure::plain ? 1 : 2; }

/// Resolves the stage plan, blocks and edges for a configuration.
inline NetworkSpec make_network_spec(const NetworkConfig& cfg) {
  if (cfg.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (cfg.in_channels == 0 || cfg.base_width == 0) throw ConfigError("channel counts must be positive");
  if (cfg.downsample_stride == 0) throw ConfigError("downsample_stride must be >= 1");
  if (cfg.kernel_small == 0 || cfg.kernel_large == 0) throw ConfigError("kernel sizes must be positive");
  if (cfg.pool.height == 0 || cfg.pool.width == 0 || cfg.pool.stride == 0) {
    throw ConfigError("pool window must be positive");
  }
  NetworkSpec spec;
  spec.config = cfg;
  const std::size_t per_block = weighted_layers_per_block(cfg.structure);
  std::size_t num_blocks = 0;
  if (cfg.stage_blocks.empty()) {
    if (cfg.desk_scale == 0 || layer_budget(cfg.version) % cfg.desk_scale != 0) {
      throw ConfigError("desk_scale must divide the " + to_string(cfg.version) + " budget of " +
                        std::to_string(layer_budget(cfg.version)));
    }
    const std::size_t budget = layer_budget(cfg.version) / cfg.desk_scale;
    if (budget < 8) {
      throw ConfigError("desk_scale " + std::to_string(cfg.desk_scale) + " leaves " +
                        std::to_string(budget) + " weighted layers for " + to_string(cfg.version) +
                        " (need >= 8)");
    }
    // stem conv + body + classifier
    num_blocks = (budget - 2) / per_block;
    const std::size_t base = num_blocks / 4, rem = num_blocks % 4;
    spec.stage_blocks.fill(base);
    constexpr std::array<std::size_t, 4> extra_order{1, 2, 3, 0};
    for (std::size_t r = 0; r < rem; ++r) ++spec.stage_blocks[extra_order[r]];
  } else {
    if (cfg.stage_blocks.size() != 4) throw ConfigError("stage_blocks needs exactly 4 entries");
    std::copy(cfg.stage_blocks.begin(), cfg.stage_blocks.end(), spec.stage_blocks.begin());
    for (std::size_t b : spec.stage_blocks) num_blocks += b;
    if (num_blocks == 0) throw ConfigError("stage_blocks must contain at least one block");
  }
  bool seen_empty = false;
  for (std::size_t s = 1; s < 4; ++s) {
    if (spec.stage_blocks[s] == 0) {
      seen_empty = true;
    } else if (seen_empty) {
      throw ConfigError("stage plan may only leave trailing stages empty");
    }
  }
  for (std::size_t s = 0; s < 4; ++s) spec.stage_channels[s] = cfg.base_width << s;
  spec.weighted_layers = 2 + num_blocks * per_block;

  std::size_t index = 0;
  std::size_t downsamples = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < spec.stage_blocks[s]; ++k, ++index) {
      BlockSpec b;
      b.index = index;
      b.structure = cfg.structure;
      b.stage = s;
      b.downsample = s > 0 && k == 0;
      b.out_ch = spec.stage_channels[s];
      b.in_ch = b.downsample ? spec.stage_channels[s - 1] : b.out_ch;
      downsamples += b.downsample ? 1 : 0;
      spec.blocks.push_back(b);
    }
  }
  if (cfg.aux_heads && cfg.structure != Structure::plain) {
    for (std::size_t i = 0; i + 1 < spec.blocks.size(); ++i) {
      spec.blocks[i].has_aux_head = spec.blocks[i + 1].stage != spec.blocks[i].stage;
    }
  }
  // Stochastic pooling pads partial windows, so only strided convolutions impose a minimum.
  const bool pooled = cfg.structure == Structure::alpha && cfg.pool_in_downsample;
  spec.min_input_size = 1;
  for (std::size_t d = 0; d < downsamples && !pooled; ++d) spec.min_input_size *= cfg.downsample_stride;

  if (cfg.structure == Structure::alpha) {
    std::vector<std::size_t> groups;
    for (const auto& b : spec.blocks) groups.push_back(b.stage);
    spec.edges = sample_connectivity(groups, cfg.p_extra, PrngStream(cfg.seed, "net"));
  }
  return spec;
}

inline std::string NetworkSpec::manifest() const {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto& c = config;
  os << "alphanet-manifest 1\n";
  os << "version " << to_string(c.version) << "\n";
  os << "structure " << to_string(c.structure) << "\n";
  os << "seed " << c.seed << "\n";
  os << "desk_scale " << c.desk_scale << "\n";
  os << "num_classes " << c.num_classes << "\n";
  os << "in_channels " << c.in_channels << "\n";
  os << "input_size " << c.input_size << "\n";
  os << "base_width " << c.base_width << "\n";
  os << "p_extra " << c.p_extra << "\n";
  os << "kernels " << c.kernel_small << " " << c.kernel_large << "\n";
  os << "downsample_stride " << c.downsample_stride << "\n";
  os << "pool_in_downsample " << (c.pool_in_downsample ? 1 : 0) << "\n";
  os << "pool " << c.pool.height << " " << c.pool.width << " " << c.pool.stride << "\n";
  os << "aux_heads " << (c.aux_heads ? 1 : 0) << "\n";
  os << "head " << to_string(c.head) << "\n";
  os << "stage_blocks";
  for (std::size_t b : stage_blocks) os << " " << b;
  os << "\n";
  os << "explicit_stage_plan " << (c.stage_blocks.empty() ? 0 : 1) << "\n";
  os << "weighted_layers " << weighted_layers << "\n";
  for (const auto& b : blocks) {
    os << "block " << b.index << " stage " << b.stage + 1 << " in " << b.in_ch << " out " << b.out_ch
       << " downsample " << (b.downsample ? 1 : 0) << " aux " << (b.has_aux_head ? 1 : 0) << "\n";
  }
  for (const auto& e : edges) os << "edge " << e.source << " " << e.target << "\n";
  return os.str();
}

/// Rebuilds the configuration recorded in a manifest.
inline NetworkConfig parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  NetworkConfig c;
  std::vector<std::size_t> plan;
  bool explicit_plan = false;
  bool header = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key.empty()) continue;
    if (key == "alphanet-manifest") {
      int v = 0;
      ls >> v;
      if (v != 1) throw IoError("unsupported manifest version");
      header = true;
    } else if (key == "version") {
      std::string v;
      ls >> v;
      c.version = parse_version(v);
    } else if (key == "structure") {
      std::string v;
      ls >> v;
      c.structure = parse_structure(v);
    } else if (key == "seed") {
      ls >> c.seed;
    } else if (key == "desk_scale") {
      ls >> c.desk_scale;
    } else if (key == "num_classes") {
      ls >> c.num_classes;
    } else if (key == "in_channels") {
      ls >> c.in_channels;
    } else if (key == "input_size") {
      ls >> c.input_size;
    } else if (key == "base_width") {
      ls >> c.base_width;
    } else if (key == "p_extra") {
      ls >> c.p_extra;
    } else if (key == "kernels") {
      ls >> c.kernel_small >> c.kernel_large;
    } else if (key == "downsample_stride") {
      ls >> c.downsample_stride;
    } else if (key == "pool_in_downsample") {
      int v = 0;
      ls >> v;
      c.pool_in_downsample = v != 0;
    } else if (key == "pool") {
      ls >> c.pool.height >> c.pool.width >> c.pool.stride;
    } else if (key == "aux_heads") {
      int v = 0;
      ls >> v;
      c.aux_heads = v != 0;
    } else if (key == "head") {
      std::string v;
      ls >> v;
      c.head = parse_head_kind(v);
    } else if (key == "stage_blocks") {
      std::size_t b;
      while (ls >> b) plan.push_back(b);
    } else if (key == "explicit_stage_plan") {
      int v = 0;
      ls >> v;
      explicit_plan = v != 0;
    }
    if (ls.fail() && !ls.eof()) throw IoError("malformed manifest line: " + line);
  }
  if (!header) throw IoError("not an alphanet manifest");
  if (explicit_plan) c.stage_blocks = plan;
  return c;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
class PlainUnit {
 public:
  PlainUnit() = default;
  PlainUnit(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t stride,
            const PrngStream& root)
      : conv_(name + "/conv", in_ch, out_ch, 3, stride, root), bn_(name + "/bn", out_ch) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode, PrngStream&) {
    return relu_.forward(bn_.forward(conv_.forward(x), mode));
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    return conv_.backward(bn_.backward(relu_.backward(dy)));
  }
  void visit(const ParamVisitor<T>& f) {
    conv_.visit(f);
    bn_.visit(f);
  }
  void buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (auto& b : bn_.buffers()) out.push_back(b);
  }

 private:
  Conv2d<T> conv_;
  BatchNorm<T> bn_;
  Relu<T> relu_;
};

/// Pre-activation residual block: out = shortcut(x) + conv(relu(bn(conv_s(relu(bn(x)))))).
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, const BlockSpec& b, std::size_t stride,
                const PrngStream& root)
      : bn1_(name + "/bn1", b.in_ch),
        conv1_(name + "/conv1", b.in_ch, b.out_ch, 3, b.downsample ? stride : 1, root),
        bn2_(name + "/bn2", b.out_ch),
        conv2_(name + "/conv2", b.out_ch, b.out_ch, 3, 1, root) {
    if (b.downsample) proj_ = Conv2d<T>(name + "/proj", b.in_ch, b.out_ch, 1, stride, root);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, PrngStream&) {
    const Tensor<T> a = relu1_.forward(bn1_.forward(x, mode));
    const Tensor<T> z = conv2_.forward(relu2_.forward(bn2_.forward(conv1_.forward(a), mode)));
    Tensor<T> shortcut = proj_ ? proj_->forward(a) : x;
    if (shortcut.shape() != z.shape()) throw ShapeError("residual addition shape mismatch");
    axpy(T{1}, z, shortcut);
    return shortcut;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    Tensor<T> da = conv1_.backward(bn2_.backward(relu2_.backward(conv2_.backward(dout))));
    if (proj_) {
      axpy(T{1}, proj_->backward(dout), da);
      return bn1_.backward(relu1_.backward(da));
    }
    Tensor<T> dx = bn1_.backward(relu1_.backward(da));
    axpy(T{1}, dout, dx);
    return dx;
  }

  void visit(const ParamVisitor<T>& f) {
    bn1_.visit(f);
    conv1_.visit(f);
    bn2_.visit(f);
    conv2_.visit(f);
    if (proj_) proj_->visit(f);
  }
  void buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (auto& b : bn1_.buffers()) out.push_back(b);
    for (auto& b : bn2_.buffers()) out.push_back(b);
  }

  Conv2d<T>& conv2() { return conv2_; }

 private:
  BatchNorm<T> bn1_;
  Relu<T> relu1_;
  Conv2d<T> conv1_;
  BatchNorm<T> bn2_;
  Relu<T> relu2_;
  Conv2d<T> conv2_;
  std::optional<Conv2d<T>> proj_;
};

/// Alpha block: pre-activation residual block whose second convolution is the
/// mean of a small- and a large-kernel convolution. Downsampling blocks either
/// stochastically pool the (non-negative) pre-activated input, feeding the
/// pooled map to both the conv path and the 1x1 projection, or fall back to a
/// strided first convolution and projection when pooling is disabled.
template <typename T>
class AlphaBlock {
 public:
  AlphaBlock() = default;
  AlphaBlock(const std::string& name, const BlockSpec& b, const NetworkConfig& cfg,
             const PrngStream& root)
      : name_(name),
        bn1_(name + "/bn1", b.in_ch),
        conv1_(name + "/conv1", b.in_ch, b.out_ch, 3, conv_stride(b, cfg), root),
        bn2_(name + "/bn2", b.out_ch),
        combined_(name + "/combined", b.out_ch, b.out_ch, cfg.kernel_small, cfg.kernel_large, 1, root) {
    if (b.downsample) {
      proj_ = Conv2d<T>(name + "/proj", b.in_ch, b.out_ch, 1, conv_stride(b, cfg), root);
      if (cfg.pool_in_downsample) pool_ = StochasticPool<T>(cfg.pool);
    }
  }

  static std::size_t conv_stride(const BlockSpec& b, const NetworkConfig& cfg) {
    return b.downsample && !cfg.pool_in_downsample ? cfg.downsample_stride : 1;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, PrngStream& stream) {
    Tensor<T> a = relu1_.forward(bn1_.forward(x, mode));
    if (pool_) {
      PrngStream ps = stream.fork(name_ + "/pool");
      a = pool_->forward(a, mode, ps);
    }
    const Tensor<T> z = combined_.forward(relu2_.forward(bn2_.forward(conv1_.forward(a), mode)));
    Tensor<T> shortcut = proj_ ? proj_->forward(a) : x;
    if (shortcut.shape() != z.shape()) {
      throw ShapeError("alpha block residual addition mismatch: " + shape_string(shortcut.shape()) +
                       " vs " + shape_string(z.shape()));
    }
    axpy(T{1}, z, shortcut);
    return shortcut;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    Tensor<T> da = conv1_.backward(bn2_.backward(relu2_.backward(combined_.backward(dout))));
    if (!proj_) {
      Tensor<T> dx = bn1_.backward(relu1_.backward(da));
      axpy(T{1}, dout, dx);
      return dx;
    }
    axpy(T{1}, proj_->backward(dout), da);
    if (pool_) da = pool_->backward(da);
    return bn1_.backward(relu1_.backward(da));
  }

  void visit(const ParamVisitor<T>& f) {
    bn1_.visit(f);
    conv1_.visit(f);
    bn2_.visit(f);
    combined_.visit(f);
    if (proj_) proj_->visit(f);
  }
  void buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (auto& b : bn1_.buffers()) out.push_back(b);
    for (auto& b : bn2_.buffers()) out.push_back(b);
  }
  void freeze_pooling(bool on) {
    if (pool_) pool_->freeze(on);
  }

  CombinedConv<T>& combined() { return combined_; }

 private:
  std::string name_;
  BatchNorm<T> bn1_;
  Relu<T> relu1_;
  std::optional<StochasticPool<T>> pool_;
  Conv2d<T> conv1_;
  BatchNorm<T> bn2_;
  Relu<T> relu2_;
  CombinedConv<T> combined_;
  std::optional<Conv2d<T>> proj_;
};

// ---------------------------------------------------------------------------
// Network

template <typename T>
struct ForwardResult {
  Tensor<T> features;
  Tensor<T> logits;  // affine logits or cosines, per the head kind
  std::vector<Tensor<T>> aux_logits;
};

/// softmax(v) in place, numerically stable.
template <typename T>
std::vector<T> softmax(std::vector<T> v) {
  if (v.empty()) return v;
  const T top = *std::max_element(v.begin(), v.end());
  T total{0};
  for (auto& x : v) total += (x = std::exp(x - top));
  for (auto& x : v) x /= total;
  return v;
}

template <typename T>
class Network {
 public:
  using Block = std::variant<PlainUnit<T>, ResidualBlock<T>, AlphaBlock<T>>;

  Network() = default;

  static Network build(const NetworkConfig& cfg) {
    Network net;
    net.spec_ = make_network_spec(cfg);
    net.built_ = true;
    const PrngStream root(cfg.seed, "net");
    const std::size_t w = net.spec_.stage_channels[0];
    if (cfg.structure == Structure::plain) {
      net.plain_stem_ = PlainUnit<T>("stem", cfg.in_channels, w, 1, root);
    } else {
      net.stem_ = Conv2d<T>("stem/conv", cfg.in_channels, w, 3, 1, root);
    }
    net.incoming_.resize(net.spec_.blocks.size());
    for (const auto& b : net.spec_.blocks) {
      const std::string name = "block" + std::to_string(b.index);
      switch (cfg.structure) {
        case Structure::plain:
          net.blocks_.emplace_back(PlainUnit<T>(name, b.in_ch, b.out_ch,
                                                b.downsample ? cfg.downsample_stride : 1, root));
          break;
        case Structure::residual:
          net.blocks_.emplace_back(ResidualBlock<T>(name, b, cfg.downsample_stride, root));
          break;
        case Structure::alpha:
          net.blocks_.emplace_back(AlphaBlock<T>(name, b, cfg, root));
          break;
      }
      if (b.has_aux_head) {
        net.aux_.emplace(b.index, Head<T>("aux" + std::to_string(b.index), b.out_ch,
                                          cfg.num_classes, cfg.head, root));
      }
    }
    // Incoming sources per block; the stem output feeds block 0.
    if (cfg.structure == Structure::alpha) {
      std::vector<std::vector<double>> logits(net.spec_.blocks.size());
      for (const auto& e : net.spec_.edges) {
        net.incoming_[e.target].push_back(e.source);
        logits[e.target].push_back(e.gate_logit);
      }
      net.gates_.resize(net.spec_.blocks.size());
      for (std::size_t i = 1; i < net.spec_.blocks.size(); ++i) {
        std::vector<T> v(logits[i].begin(), logits[i].end());
        const Shape shape{v.size()};
        net.gates_[i] = Parameter<T>("block" + std::to_string(i) + "/gates",
                                     Tensor<T>(shape, std::move(v)), false);
      }
    } else {
      for (std::size_t i = 1; i < net.spec_.blocks.size(); ++i) net.incoming_[i] = {i - 1};
    }
    const std::size_t last_ch = net.spec_.blocks.back().out_ch;
    if (cfg.structure != Structure::plain) net.final_bn_ = BatchNorm<T>("final/bn", last_ch);
    net.head_ = Head<T>("head", last_ch, cfg.num_classes, cfg.head, root);
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }
  bool built() const { return built_; }

  /// Blocks run in index order; block i consumes the gate-weighted sum of its sources.
  ForwardResult<T> forward(const Tensor<T>& batch, Mode mode, PrngStream& stream) {
    if (!built_) throw StateError("forward on a network without initialized parameters");
    const auto& cfg = spec_.config;
    if (batch.rank() != 4 || batch.dim(1) != cfg.in_channels) {
      throw ShapeError("network input must be N x " + std::to_string(cfg.in_channels) +
                       " x H x W, got " + shape_string(batch.shape()));
    }
    if (batch.dim(2) < spec_.min_input_size || batch.dim(3) < spec_.min_input_size) {
      throw ShapeError("input " + shape_string(batch.shape()) + " below minimum spatial size " +
                       std::to_string(spec_.min_input_size));
    }
    input_shape_ = batch.shape();
    outputs_.clear();
    PrngStream dummy = stream;
    outputs_.push_back(plain_stem_ ? plain_stem_->forward(batch, mode, dummy) : stem_->forward(batch));
    ForwardResult<T> r;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Tensor<T> x = aggregate(i);
      outputs_.push_back(std::visit([&](auto& b) { return b.forward(x, mode, stream); }, blocks_[i]));
      if (auto it = aux_.find(i); it != aux_.end()) r.aux_logits.push_back(it->second.forward(outputs_.back()));
    }
    Tensor<T> top = outputs_.back();
    if (final_bn_) top = final_relu_.forward(final_bn_->forward(top, mode));
    r.logits = head_.forward(top);
    r.features = head_.features();
    return r;
  }

  /// Accumulates parameter gradients; returns the gradient w.r.t. the input batch.
  Tensor<T> backward(const Tensor<T>& dlogits, const std::vector<Tensor<T>>& daux) {
    if (outputs_.size() != blocks_.size() + 1) throw StateError("network backward without forward");
    if (daux.size() != aux_.size()) throw ShapeError("aux gradient count mismatch");
    std::vector<std::optional<Tensor<T>>> dout(outputs_.size());
    auto add = [&](std::size_t slot, Tensor<T> g) {
      if (dout[slot]) {
        axpy(T{1}, g, *dout[slot]);
      } else {
        dout[slot] = std::move(g);
      }
    };
    Tensor<T> dtop = head_.backward(dlogits);
    if (final_bn_) dtop = final_bn_->backward(final_relu_.backward(dtop));
    add(outputs_.size() - 1, std::move(dtop));
    std::size_t aux_slot = aux_.size();
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      if (auto it = aux_.find(i); it != aux_.end()) add(i + 1, it->second.backward(daux[--aux_slot]));
      if (!dout[i + 1]) dout[i + 1] = Tensor<T>(outputs_[i + 1].shape());
      const Tensor<T> dx = std::visit([&](auto& b) { return b.backward(*dout[i + 1]); }, blocks_[i]);
      if (i == 0) {
        add(0, dx);
        continue;
      }
      const auto& src = incoming_[i];
      if (spec_.config.structure != Structure::alpha) {
        add(src[0] + 1, dx);
        continue;
      }
      const std::vector<T> w = gate_weights(i);
      std::vector<T> dw(src.size());
      T mean_dw{0};
      for (std::size_t e = 0; e < src.size(); ++e) {
        dw[e] = dot(dx, outputs_[src[e] + 1]);
        mean_dw += w[e] * dw[e];
      }
      for (std::size_t e = 0; e < src.size(); ++e) {
        gates_[i].grad[e] += w[e] * (dw[e] - mean_dw);
        add(src[e] + 1, w[e] * dx);
      }
    }
    if (plain_stem_) return plain_stem_->backward(*dout[0]);
    return stem_->backward(*dout[0]);
  }

  /// Softmax weights of block i's incoming edges.
  std::vector<T> gate_weights(std::size_t i) const {
    if (spec_.config.structure != Structure::alpha || i == 0) return {T{1}};
    return softmax(std::vector<T>(gates_[i].value.values()));
  }

  const std::vector<std::size_t>& incoming(std::size_t i) const { return incoming_.at(i); }

  void visit_parameters(const ParamVisitor<T>& f) {
    if (plain_stem_) plain_stem_->visit(f);
    if (stem_) stem_->visit(f);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (i < gates_.size() && i > 0) f(gates_[i]);
      std::visit([&](auto& b) { b.visit(f); }, blocks_[i]);
      if (auto it = aux_.find(i); it != aux_.end()) it->second.visit(f);
    }
    if (final_bn_) final_bn_->visit(f);
    head_.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit_parameters([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  /// Running statistics and other non-learned state, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    if (plain_stem_) plain_stem_->buffers(out);
    for (auto& b : blocks_) std::visit([&](auto& blk) { blk.buffers(out); }, b);
    if (final_bn_)
      for (auto& b : final_bn_->buffers()) out.push_back(b);
    return out;
  }

  void zero_grad() {
    visit_parameters([](Parameter<T>& p) { p.zero_grad(); });
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_parameters([&](Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  Parameter<T>* find_parameter(const std::string& name) {
    Parameter<T>* hit = nullptr;
    visit_parameters([&](Parameter<T>& p) {
      if (p.name == name) hit = &p;
    });
    return hit;
  }

  /// Hold stochastic pooling indices fixed across train-mode passes (gradient checks).
  void freeze_pooling(bool on) {
    for (auto& b : blocks_) {
      if (auto* a = std::get_if<AlphaBlock<T>>(&b)) a->freeze_pooling(on);
    }
  }

  Block& block(std::size_t i) { return blocks_.at(i); }
  std::size_t aux_head_count() const { return aux_.size(); }
  HeadKind head_kind() const { return spec_.config.head; }

 private:
  Tensor<T> aggregate(std::size_t i) const {
    if (i == 0) return outputs_[0];
    const auto& src = incoming_[i];
    if (src.size() == 1 && spec_.config.structure != Structure::alpha) return outputs_[src[0] + 1];
    const std::vector<T> w = gate_weights(i);
    Tensor<T> x(outputs_[src[0] + 1].shape());
    for (std::size_t e = 0; e < src.size(); ++e) {
      const Tensor<T>& o = outputs_[src[e] + 1];
      if (o.shape() != x.shape()) throw ShapeError("incompatible edge into block " + std::to_string(i));
      axpy(w[e], o, x);
    }
    return x;
  }

  NetworkSpec spec_;
  bool built_ = false;
  std::optional<PlainUnit<T>> plain_stem_;
  std::optional<Conv2d<T>> stem_;
  std::vector<Block> blocks_;
  std::vector<std::vector<std::size_t>> incoming_;
  std::vector<Parameter<T>> gates_;
  std::map<std::size_t, Head<T>> aux_;
  std::optional<BatchNorm<T>> final_bn_;
  Relu<T> final_relu_;
  Head<T> head_;
  Shape input_shape_;
  std::vector<Tensor<T>> outputs_;  // [stem, block0, block1, ...]
};

template <typename T>
Network<T> build_network(const NetworkConfig& cfg) {
  return Network<T>::build(cfg);
}

/// main + lambda_aux * mean(aux); an empty aux list contributes nothing.
template <typename T>
T total_loss(T main_loss, const std::vector<T>& aux_losses, T lambda_aux) {
  if (lambda_aux < T{0}) throw ConfigError("lambda_aux must be non-negative");
  if (aux_losses.empty() || lambda_aux == T{0}) return main_loss;
  T acc{0};
  for (T a : aux_losses) acc += a;
  return main_loss + lambda_aux * acc / static_cast<T>(aux_losses.size());
}

}  // namespace alphanet
