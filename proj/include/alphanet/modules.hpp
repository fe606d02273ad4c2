#pragma once

// Stateful wrappers around the functional layers: each owns its parameters
// and gradient accumulators, caches what forward saw, and refuses to run
// backward without that cache.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "alphanet/layers.hpp"
#include "alphanet/losses.hpp"
#include "alphanet/prng.hpp"

namespace alphanet {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // weight decay applies

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool d = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(d) {}

  void zero_grad() { grad.fill(T{0}); }
  void accumulate(const Tensor<T>& g) { axpy(T{1}, g, grad); }
};

template <typename T>
using ParamVisitor = std::function<void(Parameter<T>&)>;

/// He-normal tensor drawn from the stream labelled `init/<name>`.
template <typename T>
Tensor<T> he_normal(const PrngStream& root, const std::string& name, const Shape& shape,
                    std::size_t fan_in) {
  PrngStream s = root.fork("init").fork(name);
  return prng_normal<T>(s, shape, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
         std::size_t stride, const PrngStream& root)
      : kernel_(name + "/kernel",
                he_normal<T>(root, name + "/kernel", {out_ch, in_ch, k, k}, in_ch * k * k)),
        bias_(name + "/bias", Tensor<T>({out_ch})),
        geometry_{stride, std::nullopt} {}

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return conv2d(x, kernel_.value, bias_.value, geometry_);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!input_) throw StateError("conv backward without forward cache: " + kernel_.name);
    auto g = conv2d_backward(*input_, kernel_.value, bias_.value, geometry_, dy);
    kernel_.accumulate(g.kernel);
    bias_.accumulate(g.bias);
    return std::move(g.input);
  }

  void visit(const ParamVisitor<T>& f) {
    f(kernel_);
    f(bias_);
  }

  Parameter<T>& kernel() { return kernel_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& kernel() const { return kernel_; }
  std::size_t stride() const { return geometry_.stride; }
  void clear_cache() { input_.reset(); }

 private:
  Parameter<T> kernel_;
  Parameter<T> bias_;
  ConvGeometry geometry_;
  std::optional<Tensor<T>> input_;
};

/// Mean of two same-padded convolutions with different kernel sizes.
template <typename T>
class CombinedConv {
 public:
  CombinedConv() = default;
  CombinedConv(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k1,
               std::size_t k2, std::size_t stride, const PrngStream& root)
      : first_(name + "/k" + std::to_string(k1), in_ch, out_ch, k1, stride, root),
        second_(name + "/k" + std::to_string(k2), in_ch, out_ch, k2, stride, root) {}

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> a = first_.forward(x);
    const Tensor<T> b = second_.forward(x);
    if (a.shape() != b.shape()) throw ShapeError("combined conv branch outputs disagree");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = T(0.5) * (a[i] + b[i]);
    return a;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T> half = T(0.5) * dy;
    return first_.backward(half) + second_.backward(half);
  }

  void visit(const ParamVisitor<T>& f) {
    first_.visit(f);
    second_.visit(f);
  }
  Conv2d<T>& first() { return first_; }
  Conv2d<T>& second() { return second_; }

 private:
  Conv2d<T> first_;
  Conv2d<T> second_;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels)
      : name_(name),
        gamma_(name + "/gamma", Tensor<T>({channels}, T{1}), false),
        beta_(name + "/beta", Tensor<T>({channels}), false),
        state_(BatchNormParams<T>::standard(channels)),
        tracked_({1}) {}

  /// The first train-mode batch seeds the running statistics; eval before that is a StateError.
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    state_.gamma = gamma_.value;
    state_.beta = beta_.value;
    state_.stats_ready = tracked_[0] > T{0};
    BatchNormCache<T> c;
    Tensor<T> y = batch_norm(x, state_, mode, &c);
    if (mode == Mode::train) tracked_[0] += T{1};
    cache_ = std::move(c);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!cache_) throw StateError("batch_norm backward without forward cache: " + gamma_.name);
    auto g = batch_norm_backward(*cache_, state_, dy);
    gamma_.accumulate(g.gamma);
    beta_.accumulate(g.beta);
    return std::move(g.input);
  }

  void visit(const ParamVisitor<T>& f) {
    f(gamma_);
    f(beta_);
  }

  /// Non-learned buffers saved in checkpoints.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    return {{name_ + "/running_mean", &state_.running_mean},
            {name_ + "/running_var", &state_.running_var},
            {name_ + "/batches_tracked", &tracked_}};
  }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  std::string name_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  BatchNormParams<T> state_;
  Tensor<T> tracked_;  // train-mode batches seen
  std::optional<BatchNormCache<T>> cache_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return relu(x);
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    if (!input_) throw StateError("relu backward without forward cache");
    return relu_backward(*input_, dy);
  }

 private:
  std::optional<Tensor<T>> input_;
};

template <typename T>
class StochasticPool {
 public:
  StochasticPool() = default;
  explicit StochasticPool(PoolWindow window) : window_(window) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode, PrngStream& stream) {
    mode_ = mode;
    input_ = x;
    if (mode == Mode::train && frozen_ && !choice_.empty()) {
      return stochastic_pool_replay(x, window_, choice_);
    }
    auto r = stochastic_pool(x, window_, mode, stream);
    choice_ = std::move(r.choice);
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!input_) throw StateError("stochastic_pool backward without forward cache");
    return stochastic_pool_backward(*input_, window_, mode_, choice_, dy);
  }

  /// Reuse the most recent sampled indices for subsequent train-mode passes.
  void freeze(bool on) { frozen_ = on; }
  const PoolWindow& window() const { return window_; }

 private:
  PoolWindow window_;
  Mode mode_ = Mode::train;
  bool frozen_ = false;
  std::optional<Tensor<T>> input_;
  std::vector<std::uint32_t> choice_;
};

enum class HeadKind { affine, cosine };

/// Global average pool, then either affine logits or cosine similarities
/// against the class weight rows.
template <typename T>
class Head {
 public:
  Head() = default;
  Head(const std::string& name, std::size_t channels, std::size_t classes, HeadKind kind,
       const PrngStream& root)
      : kind_(kind),
        weights_(name + "/weights", he_normal<T>(root, name + "/weights", {classes, channels}, channels)),
        bias_(name + "/bias", Tensor<T>({classes})) {}

  /// Returns logits (affine) or cosines (cosine); the pooled features are kept.
  Tensor<T> forward(const Tensor<T>& x) {
    input_shape_ = x.shape();
    features_ = global_avg_pool(x);
    if (kind_ == HeadKind::affine) return affine(*features_, weights_.value, bias_.value);
    cosine_ = cosine_logits(*features_, weights_.value);
    return cosine_->cos;
  }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    if (!features_) throw StateError("head backward without forward cache: " + weights_.name);
    Tensor<T> df;
    if (kind_ == HeadKind::affine) {
      auto g = affine_backward(*features_, weights_.value, dlogits);
      weights_.accumulate(g.weights);
      bias_.accumulate(g.bias);
      df = std::move(g.input);
    } else {
      auto g = cosine_logits_backward(*cosine_, dlogits);
      weights_.accumulate(g.weights);
      df = std::move(g.features);
    }
    return global_avg_pool_backward(input_shape_, df);
  }

  /// The cosine head ignores its bias, so only the affine kind exposes it.
  void visit(const ParamVisitor<T>& f) {
    f(weights_);
    if (kind_ == HeadKind::affine) f(bias_);
  }

  const Tensor<T>& features() const {
    if (!features_) throw StateError("head features requested before forward");
    return *features_;
  }
  HeadKind kind() const { return kind_; }
  Parameter<T>& weights() { return weights_; }
  Parameter<T>& bias() { return bias_; }

 private:
  HeadKind kind_ = HeadKind::affine;
  Parameter<T> weights_;
  Parameter<T> bias_;
  Shape input_shape_;
  std::optional<Tensor<T>> features_;
  std::optional<CosineLogits<T>> cosine_;
};

}  // namespace alphanet
