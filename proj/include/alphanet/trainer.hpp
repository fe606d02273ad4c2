#pragma once

// SGD with momentum and weight decay, plateau learning-rate decay, the epoch
// loop, Top-1 evaluation (single / ten-crop / multi-scale) and checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "alphanet/data.hpp"
#include "alphanet/error.hpp"
#include "alphanet/losses.hpp"
#include "alphanet/net.hpp"
#include "alphanet/normalize.hpp"

namespace alphanet {

struct PlateauConfig {
  double epsilon = 1e-3;
  std::size_t patience = 5;
  std::size_t max_reductions = 3;
};

struct TrainConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t accumulation_factor = 1;
  std::size_t max_epochs = 30;
  PlateauConfig plateau;
  double lambda_aux = 0.3;
  LossConfig loss;
  std::uint64_t seed = 0;
  bool augment = false;
  AugmentConfig augment_cfg;
  /// Stop once validation error falls to this value (unset: run all epochs).
  std::optional<double> stop_at_val_error;

  void validate() const {
    if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (accumulation_factor == 0 || batch_size % accumulation_factor != 0) {
      throw ConfigError("accumulation_factor must divide batch_size");
    }
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (!(lambda_aux >= 0.0)) throw ConfigError("lambda_aux must be non-negative");
    if (!(plateau.epsilon >= 0.0)) throw ConfigError("plateau epsilon must be non-negative");
    if (plateau.patience == 0) throw ConfigError("plateau patience must be positive");
    loss.validate();
    if (augment) augment_cfg.validate();
  }
};

struct HistoryRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_error = 0.0;
  double lr = 0.0;
};

template <typename T>
struct TrainState {
  std::map<std::string, Tensor<T>> velocity;
  double lr0 = 0.01;
  double lr = 0.01;
  std::size_t reductions_done = 0;
  double best_val_error = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;
  std::size_t epoch = 0;
  std::vector<HistoryRecord> history;

  explicit TrainState(double initial_lr = 0.01) : lr0(initial_lr), lr(initial_lr) {}
};

/// v <- mu v + g + wd p (wd only where p.decay), p <- p - lr v.
template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, TrainState<T>& state, const TrainConfig& cfg) {
  for (Parameter<T>* p : params) {
    if (p->grad.shape() != p->value.shape()) throw ShapeError("gradient shape mismatch for " + p->name);
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
  }
  const T mu = static_cast<T>(cfg.momentum), lr = static_cast<T>(state.lr);
  for (Parameter<T>* p : params) {
    const T wd = p->decay ? static_cast<T>(cfg.weight_decay) : T{0};
    auto [it, fresh] = state.velocity.try_emplace(p->name, p->value.shape());
    Tensor<T>& v = it->second;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + p->grad[i] + wd * p->value[i];
      p->value[i] -= lr * v[i];
    }
  }
}

/// Once per epoch: improvement by more than epsilon resets the counter;
/// `patience` stale epochs divide lr by 10, at most max_reductions times.
template <typename T>
void lr_schedule_update(TrainState<T>& state, double val_error, const PlateauConfig& plateau) {
  if (val_error < state.best_val_error - plateau.epsilon) {
    state.best_val_error = val_error;
    state.epochs_since_improvement = 0;
  } else {
    ++state.epochs_since_improvement;
  }
  if (state.epochs_since_improvement >= plateau.patience && state.reductions_done < plateau.max_reductions) {
    ++state.reductions_done;
    state.lr = state.lr0 * std::pow(10.0, -static_cast<double>(state.reductions_done));
    state.epochs_since_improvement = 0;
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Maps a raw image to network input. Statistics come from the training split only.
struct Preprocessor {
  Normalization kind = Normalization::zscore;
  bool zscore_after_alpha = false;
  DatasetStats stats;

  Tensor<float> operator()(const Tensor<float>& raw) const {
    switch (kind) {
      case Normalization::log: return log_scale(raw);
      case Normalization::zscore: return z_score(raw, stats);
      case Normalization::alpha: {
        Tensor<float> a = alpha_normalize(raw);
        return zscore_after_alpha ? z_score(a, stats) : a;
      }
    }
    throw ConfigError("unknown normalization");
  }
};

inline Preprocessor fit_preprocessor(const Dataset& train, Normalization kind, bool zscore_after_alpha = false) {
  Preprocessor p;
  p.kind = kind;
  p.zscore_after_alpha = zscore_after_alpha;
  if (kind == Normalization::zscore) {
    p.stats = compute_dataset_stats(train.images());
  } else if (kind == Normalization::alpha && zscore_after_alpha) {
    std::vector<Tensor<float>> enc;
    for (const auto& s : train.samples) enc.push_back(alpha_normalize(s.image));
    p.stats = compute_dataset_stats(enc);
  }
  return p;
}

/// Shorter side to `size`, then the centered size x size window.
template <typename T>
Tensor<T> center_fit(const Tensor<T>& img, std::size_t size) {
  if (img.dim(1) == size && img.dim(2) == size) return img;
  Tensor<T> r = resize_shorter_side(img, size);
  return crop(r, (r.dim(1) - size) / 2, (r.dim(2) - size) / 2, size, size);
}

template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw ShapeError("empty batch");
  const Shape& s = images.front().shape();
  Tensor<T> out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_size(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw ShapeError("batch images differ in shape");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>(images[i][k]);
  }
  return out;
}

/// Class probabilities from head outputs: softmax of logits, or of s * cos for cosine heads.
template <typename T>
Tensor<T> head_scores(const Tensor<T>& out, HeadKind kind, double scale) {
  const std::size_t n = out.dim(0), k = out.dim(1);
  Tensor<T> p(out.shape());
  const double mult = kind == HeadKind::cosine ? scale : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity(), total = 0;
    for (std::size_t j = 0; j < k; ++j) top = std::max(top, mult * out[i * k + j]);
    for (std::size_t j = 0; j < k; ++j) total += std::exp(mult * out[i * k + j] - top);
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] = static_cast<T>(std::exp(mult * out[i * k + j] - top) / total);
  }
  return p;
}

/// First index of the maximum: ties go to the lowest class.
template <typename It>
std::size_t argmax(It begin, It end) {
  std::size_t best = 0, i = 0;
  for (It it = begin; it != end; ++it, ++i)
    if (*it > *(begin + static_cast<std::ptrdiff_t>(best))) best = i;
  return best;
}

/// A prediction counts only when every score is finite; non-finite scores are a miss.
template <typename It>
bool predicts(It begin, It end, int label) {
  if (!std::all_of(begin, end, [](auto v) { return std::isfinite(static_cast<double>(v)); })) return false;
  return argmax(begin, end) == static_cast<std::size_t>(label);
}

enum class EvalMode { single, ten_crop, multi_scale };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::single: return "single";
    case EvalMode::ten_crop: return "ten_crop";
    case EvalMode::multi_scale: return "multi_scale";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "single") return EvalMode::single;
  if (s == "ten_crop") return EvalMode::ten_crop;
  if (s == "multi_scale") return EvalMode::multi_scale;
  throw ConfigError("unknown eval mode '" + s + "' (expected single|ten_crop|multi_scale)");
}

struct EvalConfig {
  EvalMode mode = EvalMode::single;
  std::vector<std::size_t> scales{32, 64, 128, 256, 512};
  std::size_t batch_size = 64;
  double score_scale = 30.0;  // s applied to cosine heads before the softmax
};

/// Eval-mode scores for a batch of preprocessed images.
template <typename T>
Tensor<T> predict_scores(Network<T>& net, const std::vector<Tensor<float>>& inputs, double score_scale) {
  PrngStream unused(0, "eval");
  auto r = net.forward(stack_batch<T>(inputs), Mode::eval, unused);
  return head_scores(r.logits, net.head_kind(), score_scale);
}

/// Mean of softmax scores over images resized to each scale.
template <typename T>
std::vector<double> multi_scale_scores(Network<T>& net, const Tensor<float>& raw, const std::vector<std::size_t>& scales,
                                       const Preprocessor& pre, double score_scale) {
  if (scales.empty()) throw ConfigError("multi_scale needs at least one scale");
  const std::size_t min_in = net.spec().min_input_size;
  std::vector<double> acc;
  for (std::size_t s : scales) {
    if (s < min_in) {
      throw ConfigError("scale " + std::to_string(s) + " below network minimum input " + std::to_string(min_in));
    }
    const Tensor<T> p = predict_scores(net, {pre(resize_bilinear(raw, s, s))}, score_scale);
    acc.resize(p.size(), 0.0);
    for (std::size_t j = 0; j < p.size(); ++j) acc[j] += p[j];
  }
  for (auto& v : acc) v /= static_cast<double>(scales.size());
  return acc;
}

template <typename T>
double evaluate_top1(Network<T>& net, const Dataset& ds, const Preprocessor& pre, const EvalConfig& ec = {}) {
  if (ds.empty()) throw ConfigError("evaluate_top1 on an empty dataset");
  const std::size_t size = net.spec().config.input_size;
  std::size_t correct = 0;
  if (ec.mode == EvalMode::single) {
    for (std::size_t b = 0; b < ds.size(); b += ec.batch_size) {
      const std::size_t e = std::min(ds.size(), b + ec.batch_size);
      std::vector<Tensor<float>> in;
      for (std::size_t i = b; i < e; ++i) in.push_back(pre(center_fit(ds.samples[i].image, size)));
      const Tensor<T> p = predict_scores(net, in, ec.score_scale);
      const std::size_t k = p.dim(1);
      for (std::size_t i = b; i < e; ++i) {
        const T* row = p.ptr() + (i - b) * k;
        correct += predicts(row, row + k, ds.samples[i].label);
      }
    }
  } else {
    for (const auto& s : ds.samples) {
      std::vector<double> score;
      if (ec.mode == EvalMode::ten_crop) {
        const Tensor<float> big = resize_shorter_side(s.image, scaled_augment_config(size).min_side);
        std::vector<Tensor<float>> in;
        for (auto& c : ten_crop(big, size)) in.push_back(pre(c));
        const Tensor<T> p = predict_scores(net, in, ec.score_scale);
        const std::size_t k = p.dim(1);
        score.assign(k, 0.0);
        for (std::size_t c = 0; c < in.size(); ++c)
          for (std::size_t j = 0; j < k; ++j) score[j] += p[c * k + j] / static_cast<double>(in.size());
      } else {
        score = multi_scale_scores(net, s.image, ec.scales, pre, ec.score_scale);
      }
      correct += predicts(score.begin(), score.end(), s.label);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// History and checkpoints

inline std::string history_csv(const std::vector<HistoryRecord>& h) {
  std::string out = "epoch,train_loss,val_error,lr\n";
  char line[160];
  for (const auto& r : h) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_error, r.lr);
    out += line;
  }
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("short write to " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> checkpoint_tensors(Network<T>& net) {
  std::vector<std::pair<std::string, Tensor<T>*>> all;
  net.visit_parameters([&](Parameter<T>& p) { all.emplace_back(p.name, &p.value); });
  for (auto& b : net.buffers()) all.push_back(b);
  return all;
}

/// `<path>.manifest` (network manifest plus a tensor index) and `<path>.bin`
/// ("ANCK", u32 count, then per tensor: u32 name length, name, u32 rank,
/// u32 extents, float64 values; all little-endian).
template <typename T>
void save_checkpoint(const std::filesystem::path& path, Network<T>& net) {
  std::string manifest = net.spec().manifest();
  std::vector<char> blob{'A', 'N', 'C', 'K'};
  auto u32 = [&](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>(v >> (8 * b)));
  };
  const auto tensors = checkpoint_tensors(net);
  u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    manifest += "tensor " + name + " " + shape_string(t->shape()) + "\n";
    u32(static_cast<std::uint32_t>(name.size()));
    blob.insert(blob.end(), name.begin(), name.end());
    u32(static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) u32(static_cast<std::uint32_t>(d));
    for (T v : t->data()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>(bits >> (8 * b)));
    }
  }
  write_text(path.string() + ".manifest", manifest);
  write_text(path.string() + ".bin", std::string(blob.begin(), blob.end()));
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string manifest = read_text(path.string() + ".manifest");
  const std::string blob = read_text(path.string() + ".bin");
  Network<T> net = Network<T>::build(parse_manifest(manifest));
  if (manifest.rfind(net.spec().manifest(), 0) != 0) {
    throw IoError("checkpoint manifest does not match the network it describes");
  }
  std::size_t at = 0;
  auto need = [&](std::size_t n) {
    if (at + n > blob.size()) throw IoError("truncated checkpoint blob");
  };
  auto u32 = [&]() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t{static_cast<unsigned char>(blob[at + b])} << (8 * b);
    at += 4;
    return v;
  };
  need(4);
  if (blob.compare(0, 4, "ANCK") != 0) throw IoError("not a checkpoint blob");
  at = 4;
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& [name, t] : checkpoint_tensors(net)) by_name[name] = t;
  const std::uint32_t count = u32();
  if (count != by_name.size()) throw IoError("checkpoint tensor count mismatch");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = u32();
    need(len);
    const std::string name = blob.substr(at, len);
    at += len;
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint has unknown tensor " + name);
    Shape shape(u32());
    for (auto& d : shape) d = u32();
    if (shape != it->second->shape()) throw IoError("checkpoint shape mismatch for " + name);
    for (std::size_t i = 0; i < it->second->size(); ++i) {
      need(8);
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t{static_cast<unsigned char>(blob[at + b])} << (8 * b);
      at += 8;
      (*it->second)[i] = static_cast<T>(std::bit_cast<double>(bits));
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::filesystem::path history_path;     // empty: not written
  std::filesystem::path checkpoint_path;  // empty: no checkpoints
  std::function<void(const HistoryRecord&)> on_epoch;
};

/// One forward/backward over a micro-batch; gradients scaled by `weight`
/// (micro-batch share of the full batch). Returns the unscaled total loss.
template <typename T>
double accumulate_batch(Network<T>& net, const Tensor<T>& x, std::span<const int> labels, const TrainConfig& cfg,
                        T weight, PrngStream& stream) {
  auto r = net.forward(x, Mode::train, stream);
  const auto main = evaluate_loss(r.logits, labels, cfg.loss);
  std::vector<T> aux_losses;
  std::vector<Tensor<T>> daux;
  const T aux_w = r.aux_logits.empty() ? T{0} : static_cast<T>(cfg.lambda_aux) / static_cast<T>(r.aux_logits.size());
  for (const auto& a : r.aux_logits) {
    auto l = evaluate_loss(a, labels, cfg.loss);
    aux_losses.push_back(l.loss);
    daux.push_back((weight * aux_w) * l.grad);
  }
  const T total = total_loss(main.loss, aux_losses, static_cast<T>(cfg.lambda_aux));
  if (!std::isfinite(static_cast<double>(total))) throw NumericError("non-finite training loss");
  net.backward(weight * main.grad, daux);
  return static_cast<double>(total);
}

/// Runs the epoch loop; returns the final state (history included).
template <typename T>
TrainState<T> train(Network<T>& net, const Dataset& train_set, const Dataset& val_set, const Preprocessor& pre,
                    const TrainConfig& cfg, const TrainOptions& opts = {}, const EvalConfig& eval = {}) {
  cfg.validate();
  if (!net.built()) throw StateError("train on a network without initialized parameters");
  if (train_set.empty() || val_set.empty()) throw ConfigError("train needs non-empty train and val splits");
  if (train_set.class_count > net.spec().config.num_classes) {
    throw ConfigError("dataset has more classes than the network head");
  }
  TrainState<T> state(cfg.lr0);
  const PrngStream root(cfg.seed, "train");
  const std::size_t n = train_set.size(), size = net.spec().config.input_size;
  const auto params = net.parameters();
  EvalConfig ec = eval;
  ec.score_scale = cfg.loss.scale;

  // Inputs are reused every epoch when augmentation is off.
  std::vector<Tensor<float>> fixed;
  if (!cfg.augment) {
    for (const auto& s : train_set.samples) fixed.push_back(pre(center_fit(s.image, size)));
  }

  auto snapshot = [&]() {
    std::vector<Tensor<T>> out;
    for (auto* p : params) out.push_back(p->value);
    return out;
  };
  std::vector<Tensor<T>> last_good = snapshot();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const PrngStream ep = root.fork("epoch").fork(std::to_string(epoch));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    PrngStream shuffle = ep.fork("shuffle");
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    try {
      for (std::size_t b = 0, batch_index = 0; b < n; b += cfg.batch_size, ++batch_index) {
        const std::size_t be = std::min(n, b + cfg.batch_size), bn = be - b;
        const std::size_t micro = std::max<std::size_t>(1, (bn + cfg.accumulation_factor - 1) / cfg.accumulation_factor);
        net.zero_grad();
        for (std::size_t m = b, mi = 0; m < be; m += micro, ++mi) {
          const std::size_t me = std::min(be, m + micro);
          std::vector<Tensor<float>> in;
          std::vector<int> labels;
          for (std::size_t i = m; i < me; ++i) {
            const Sample& s = train_set.samples[order[i]];
            if (cfg.augment) {
              PrngStream as = ep.fork("augment").fork(s.id);
              in.push_back(pre(augment(s.image, cfg.augment_cfg, as)));
            } else {
              in.push_back(fixed[order[i]]);
            }
            labels.push_back(s.label);
          }
          PrngStream ns = ep.fork("net").fork(std::to_string(batch_index) + "/" + std::to_string(mi));
          const T weight = static_cast<T>(me - m) / static_cast<T>(bn);
          loss_sum += static_cast<double>(me - m) *
                      accumulate_batch(net, stack_batch<T>(in), labels, cfg, weight, ns);
        }
        sgd_step(params, state, cfg);
      }
      for (auto* p : params) {
        if (!p->value.all_finite()) throw NumericError("non-finite value in parameter " + p->name);
      }
    } catch (const NumericError& e) {
      for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = last_good[k];
      throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                         "; parameters restored to the last completed epoch)");
    }
    last_good = snapshot();

    const double val_error = 1.0 - evaluate_top1(net, val_set, pre, ec);
    HistoryRecord rec{epoch, loss_sum / static_cast<double>(n), val_error, state.lr};
    state.epoch = epoch;
    state.history.push_back(rec);
    lr_schedule_update(state, val_error, cfg.plateau);
    if (!opts.history_path.empty()) write_text(opts.history_path, history_csv(state.history));
    if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, net);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (cfg.stop_at_val_error && val_error <= *cfg.stop_at_val_error) break;
  }
  return state;
}

}  // namespace alphanet
