#pragma once

// Differentiable layer primitives as free functions over NCHW tensors.
// Each forward has a matching *_backward that returns gradients for the
// input and every parameter; stateful wrappers live in modules.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/gemm.hpp"
#include "alphanet/prng.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

enum class Mode { train, eval };

struct Padding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;

  /// "same" padding: even kernels get the extra row/column at the bottom/right.
  static Padding same(std::size_t kh, std::size_t kw) {
    return {(kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2};
  }
  friend bool operator==(const Padding&, const Padding&) = default;
};

/// Kernel geometry shared by the functional and module forms. An empty
/// padding means "same".
struct ConvGeometry {
  std::size_t stride = 1;
  std::optional<Padding> padding;
};

template <typename T>
struct ConvParams {
  Tensor<T> kernel;  // out_ch x in_ch x kH x kW
  Tensor<T> bias;    // out_ch
  ConvGeometry geometry;

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1); }
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;
};

namespace detail {

struct ConvPlan {
  std::size_t n, c, h, w;
  std::size_t o, kh, kw;
  std::size_t stride;
  Padding pad;
  std::size_t oh, ow;
};

template <typename T>
ConvPlan plan_conv(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                   const ConvGeometry& g) {
  if (x.rank() != 4) throw ShapeError("conv2d expects NCHW input, got " + shape_string(x.shape()));
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be rank 4");
  if (g.stride == 0) throw ConfigError("conv2d stride must be >= 1");
  ConvPlan p{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3),
             g.stride, g.padding.value_or(Padding::same(kernel.dim(2), kernel.dim(3))), 0, 0};
  if (kernel.dim(1) != p.c) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(x.shape()) + ", kernel " +
                     shape_string(kernel.shape()));
  }
  if (bias.size() != p.o) throw ShapeError("conv2d bias length must equal out_ch");
  const std::size_t ph = p.h + p.pad.top + p.pad.bottom;
  const std::size_t pw = p.w + p.pad.left + p.pad.right;
  if (ph < p.kh || pw < p.kw) {
    throw ShapeError("conv2d kernel " + shape_string(kernel.shape()) +
                     " larger than padded input " + shape_string(x.shape()));
  }
  p.oh = (ph - p.kh) / p.stride + 1;
  p.ow = (pw - p.kw) / p.stride + 1;
  return p;
}

// Samples per im2col chunk, bounding the column buffer to ~4M elements.
inline std::size_t conv_chunk(const ConvPlan& p) {
  const std::size_t per_sample = p.c * p.kh * p.kw * p.oh * p.ow;
  return std::clamp<std::size_t>((std::size_t{1} << 22) / std::max<std::size_t>(per_sample, 1), 1, p.n);
}

template <typename T>
void im2col(const ConvPlan& p, const T* x, std::size_t n0, std::size_t n1, T* col) {
  const std::size_t cols = (n1 - n0) * p.oh * p.ow;
  const std::size_t hw = p.oh * p.ow;
  for (std::size_t c = 0; c < p.c; ++c) {
    for (std::size_t i = 0; i < p.kh; ++i) {
      for (std::size_t j = 0; j < p.kw; ++j) {
        T* row = col + ((c * p.kh + i) * p.kw + j) * cols;
        for (std::size_t n = n0; n < n1; ++n) {
          const T* plane = x + (n * p.c + c) * p.h * p.w;
          T* dst = row + (n - n0) * hw;
          for (std::size_t oh = 0; oh < p.oh; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * p.stride + i) -
                                      static_cast<std::ptrdiff_t>(p.pad.top);
            T* out = dst + oh * p.ow;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(p.h)) {
              std::fill(out, out + p.ow, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(ih) * p.w;
            for (std::size_t ow = 0; ow < p.ow; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * p.stride + j) -
                                        static_cast<std::ptrdiff_t>(p.pad.left);
              out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(p.w))
                            ? T{0}
                            : src[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvPlan& p, const T* col, std::size_t n0, std::size_t n1, T* dx) {
  const std::size_t cols = (n1 - n0) * p.oh * p.ow;
  const std::size_t hw = p.oh * p.ow;
  for (std::size_t c = 0; c < p.c; ++c) {
    for (std::size_t i = 0; i < p.kh; ++i) {
      for (std::size_t j = 0; j < p.kw; ++j) {
        const T* row = col + ((c * p.kh + i) * p.kw + j) * cols;
        for (std::size_t n = n0; n < n1; ++n) {
          T* plane = dx + (n * p.c + c) * p.h * p.w;
          const T* src = row + (n - n0) * hw;
          for (std::size_t oh = 0; oh < p.oh; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * p.stride + i) -
                                      static_cast<std::ptrdiff_t>(p.pad.top);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(p.h)) continue;
            T* dst = plane + static_cast<std::size_t>(ih) * p.w;
            const T* in = src + oh * p.ow;
            for (std::size_t ow = 0; ow < p.ow; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * p.stride + j) -
                                        static_cast<std::ptrdiff_t>(p.pad.left);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(p.w)) {
                dst[static_cast<std::size_t>(iw)] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation plus bias. Output extent is floor((H + padT + padB - kH) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvGeometry& geometry) {
  const auto p = detail::plan_conv(x, kernel, bias, geometry);
  const std::size_t k = p.c * p.kh * p.kw;
  const std::size_t hw = p.oh * p.ow;
  Tensor<T> y({p.n, p.o, p.oh, p.ow});
  const std::size_t chunk = detail::conv_chunk(p);
  std::vector<T> col, out;
  for (std::size_t n0 = 0; n0 < p.n; n0 += chunk) {
    const std::size_t n1 = std::min(p.n, n0 + chunk);
    const std::size_t cols = (n1 - n0) * hw;
    col.resize(k * cols);
    out.resize(p.o * cols);
    detail::im2col(p, x.ptr(), n0, n1, col.data());
    gemm(false, false, p.o, cols, k, T{1}, kernel.ptr(), k, col.data(), cols, T{0}, out.data(),
         cols);
    for (std::size_t n = n0; n < n1; ++n) {
      for (std::size_t o = 0; o < p.o; ++o) {
        const T* src = out.data() + o * cols + (n - n0) * hw;
        T* dst = y.ptr() + (n * p.o + o) * hw;
        const T b = bias[o];
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& params) {
  return conv2d(x, params.kernel, params.bias, params.geometry);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                             const ConvGeometry& geometry, const Tensor<T>& dy) {
  const auto p = detail::plan_conv(x, kernel, bias, geometry);
  const Shape out_shape{p.n, p.o, p.oh, p.ow};
  if (dy.shape() != out_shape) {
    throw ShapeError("conv2d backward: upstream " + shape_string(dy.shape()) + " expected " +
                     shape_string(out_shape));
  }
  const std::size_t k = p.c * p.kh * p.kw;
  const std::size_t hw = p.oh * p.ow;
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(kernel.shape()), Tensor<T>(bias.shape())};
  const std::size_t chunk = detail::conv_chunk(p);
  std::vector<T> col, dout, dcol;
  for (std::size_t n0 = 0; n0 < p.n; n0 += chunk) {
    const std::size_t n1 = std::min(p.n, n0 + chunk);
    const std::size_t cols = (n1 - n0) * hw;
    col.resize(k * cols);
    dout.resize(p.o * cols);
    dcol.resize(k * cols);
    detail::im2col(p, x.ptr(), n0, n1, col.data());
    for (std::size_t n = n0; n < n1; ++n) {
      for (std::size_t o = 0; o < p.o; ++o) {
        const T* src = dy.ptr() + (n * p.o + o) * hw;
        std::copy(src, src + hw, dout.data() + o * cols + (n - n0) * hw);
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
        g.bias[o] += acc;
      }
    }
    gemm(false, true, p.o, k, cols, T{1}, dout.data(), cols, col.data(), cols, T{1},
         g.kernel.ptr(), k);
    gemm(true, false, k, cols, p.o, T{1}, kernel.ptr(), k, dout.data(), cols, T{0}, dcol.data(),
         cols);
    detail::col2im(p, dcol.data(), n0, n1, g.input.ptr());
  }
  return g;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& params, const Tensor<T>& dy) {
  return conv2d_backward(x, params.kernel, params.bias, params.geometry, dy);
}

template <typename T>
struct CombinedConvGrads {
  Tensor<T> input;
  ConvGrads<T> first;  // input field unused
  ConvGrads<T> second;
};

/// Elementwise mean of two parallel convolutions with different kernel sizes.
template <typename T>
Tensor<T> combined_conv(const Tensor<T>& x, const ConvParams<T>& first, const ConvParams<T>& second) {
  if (first.out_channels() != second.out_channels() ||
      first.geometry.stride != second.geometry.stride) {
    throw ShapeError("combined_conv branches must share out_ch and stride");
  }
  Tensor<T> a = conv2d(x, first);
  const Tensor<T> b = conv2d(x, second);
  if (a.shape() != b.shape()) {
    throw ShapeError("combined_conv branch outputs disagree: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = T(0.5) * (a[i] + b[i]);
  return a;
}

template <typename T>
CombinedConvGrads<T> combined_conv_backward(const Tensor<T>& x, const ConvParams<T>& first,
                                            const ConvParams<T>& second, const Tensor<T>& dy) {
  const Tensor<T> half = T(0.5) * dy;
  CombinedConvGrads<T> g{Tensor<T>(x.shape()), conv2d_backward(x, first, half),
                         conv2d_backward(x, second, half)};
  g.input = g.first.input + g.second.input;
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);
  bool stats_ready = false;  // false until the first train-mode update

  static BatchNormParams standard(std::size_t channels) {
    return {Tensor<T>({channels}, T{1}), Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{0}),
            Tensor<T>({channels}, T{1})};
  }
  std::size_t channels() const { return gamma.size(); }
};

/// Values kept from forward for the backward pass.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;     // x_hat
  std::vector<T> inv_std;   // per channel
  Mode mode = Mode::train;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Per-channel normalization over (N, H, W). Train mode normalizes with batch
/// statistics and folds them into the running estimates; eval mode uses the
/// running estimates and fails if none exist yet.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode,
                     BatchNormCache<T>* cache = nullptr) {
  if (x.rank() != 4) throw ShapeError("batch_norm expects NCHW input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (p.channels() != c) throw ShapeError("batch_norm channel mismatch for " + shape_string(x.shape()));
  if (mode == Mode::eval && !p.stats_ready) {
    throw StateError("batch_norm eval requested before running statistics were initialized");
  }
  const std::size_t m = n * hw;
  Tensor<T> y(x.shape());
  std::vector<T> inv_std(c);
  Tensor<T> xhat(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (mode == Mode::train) {
      double acc = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* src = x.ptr() + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
      }
      mean = static_cast<T>(acc / static_cast<double>(m));
      double sq = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* src = x.ptr() + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(src[i]) - static_cast<double>(mean);
          sq += d * d;
        }
      }
      var = static_cast<T>(sq / static_cast<double>(m));
      if (p.stats_ready) {
        p.running_mean[ch] = (T{1} - p.momentum) * p.running_mean[ch] + p.momentum * mean;
        p.running_var[ch] = (T{1} - p.momentum) * p.running_var[ch] + p.momentum * var;
      } else {
        p.running_mean[ch] = mean;
        p.running_var[ch] = var;
      }
    } else {
      mean = p.running_mean[ch];
      var = p.running_var[ch];
    }
    const T is = T{1} / std::sqrt(var + p.epsilon);
    inv_std[ch] = is;
    const T g = p.gamma[ch], b = p.beta[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[off + i] - mean) * is;
        xhat[off + i] = xh;
        y[off + i] = g * xh + b;
      }
    }
  }
  if (mode == Mode::train) p.stats_ready = true;
  if (cache) *cache = {std::move(xhat), std::move(inv_std), mode};
  return y;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const BatchNormParams<T>& p,
                                      const Tensor<T>& dy) {
  require_same_shape(cache.normalized, dy, "batch_norm backward");
  const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const T m = static_cast<T>(n * hw);
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += dy[off + i] * cache.normalized[off + i];
      }
    }
    g.gamma[ch] = sum_dy_xhat;
    g.beta[ch] = sum_dy;
    const T scale = p.gamma[ch] * cache.inv_std[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (cache.mode == Mode::train) {
          g.input[off + i] =
              scale * (dy[off + i] - sum_dy / m - cache.normalized[off + i] * sum_dy_xhat / m);
        } else {
          g.input[off + i] = scale * dy[off + i];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  // NaN passes through so a bad input cannot be silently zeroed.
  for (auto& v : y.data()) v = v < T{0} ? T{0} : v;
  return y;
}

/// Subgradient at zero is zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x, dy, "relu backward");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

// ---------------------------------------------------------------------------
// Stochastic pooling

struct PoolWindow {
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t stride = 2;

  /// Windows that run past the bottom/right edge see zero padding.
  std::size_t out_extent(std::size_t in, std::size_t region) const {
    if (in <= region) return 1;
    return (in - region + stride - 1) / stride + 1;
  }
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  /// Flat input index chosen for each output element (train mode only).
  std::vector<std::uint32_t> choice;
};

namespace detail {

inline void check_window(const PoolWindow& w) {
  if (w.height == 0 || w.width == 0 || w.stride == 0) {
    throw ConfigError("pooling region and stride must be positive");
  }
}

// Calls f(flat_index) for each in-bounds element of output cell (oh, ow) in plane `base`.
template <typename F>
void for_region(const PoolWindow& win, std::size_t h, std::size_t w, std::size_t base,
                std::size_t oh, std::size_t ow, F&& f) {
  const std::size_t h0 = oh * win.stride, w0 = ow * win.stride;
  const std::size_t h1 = std::min(h, h0 + win.height), w1 = std::min(w, w0 + win.width);
  for (std::size_t i = h0; i < h1; ++i)
    for (std::size_t j = w0; j < w1; ++j) f(base + i * w + j);
}

}  // namespace detail

/// Probability-proportional pooling: p_i = a_i / sum(a). Train mode samples one
/// activation per region (uniformly when the region sums to zero) and consumes
/// exactly one draw per output element; eval mode returns sum(p_i * a_i).
template <typename T>
PoolResult<T> stochastic_pool(const Tensor<T>& x, const PoolWindow& win, Mode mode,
                              PrngStream& stream) {
  detail::check_window(win);
  if (x.rank() != 4) throw ShapeError("stochastic_pool expects NCHW input");
  for (T v : x.data()) {
    if (v < T{0}) throw DomainError("stochastic_pool input must be non-negative (apply after ReLU)");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = win.out_extent(h, win.height), ow = win.out_extent(w, win.width);
  PoolResult<T> r{Tensor<T>({n, c, oh, ow}), {}};
  if (mode == Mode::train) r.choice.resize(r.output.size());
  std::size_t out = 0;
  std::vector<std::size_t> members;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++out) {
        members.clear();
        T total{0};
        detail::for_region(win, h, w, base, i, j, [&](std::size_t idx) {
          members.push_back(idx);
          total += x[idx];
        });
        // Non-finite input propagates as NaN; train mode still consumes its draw.
        if (!std::isfinite(total)) {
          if (mode == Mode::train) {
            stream.next_u64();
            r.choice[out] = static_cast<std::uint32_t>(members.front());
          }
          r.output[out] = std::numeric_limits<T>::quiet_NaN();
          continue;
        }
        if (mode == Mode::eval) {
          T acc{0};
          if (total > T{0}) {
            for (std::size_t idx : members) acc += x[idx] * x[idx];
            acc /= total;
          }
          r.output[out] = acc;
          continue;
        }
        std::size_t pick = members.back();
        if (total > T{0}) {
          const T target = stream.template uniform_as<T>() * total;
          T cum{0};
          for (std::size_t idx : members) {
            cum += x[idx];
            if (target < cum) {
              pick = idx;
              break;
            }
          }
          // Round-off can leave target >= cum; fall back to the last positive member.
          if (!(target < cum)) {
            for (auto it = members.rbegin(); it != members.rend(); ++it) {
              if (x[*it] > T{0}) {
                pick = *it;
                break;
              }
            }
          }
        } else {
          pick = members[stream.below(members.size())];
        }
        r.choice[out] = static_cast<std::uint32_t>(pick);
        r.output[out] = x[pick];
      }
    }
  }
  return r;
}

/// Forward pass with previously sampled indices held fixed.
template <typename T>
Tensor<T> stochastic_pool_replay(const Tensor<T>& x, const PoolWindow& win,
                                 const std::vector<std::uint32_t>& choice) {
  detail::check_window(win);
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor<T> y({n, c, win.out_extent(x.dim(2), win.height), win.out_extent(x.dim(3), win.width)});
  if (choice.size() != y.size()) throw StateError("stochastic_pool replay: index count mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[choice[i]];
  return y;
}

/// Train mode routes each upstream value to the sampled index only. Eval mode
/// differentiates sum(a_i^2)/sum(a); a zero region spreads the gradient evenly.
template <typename T>
Tensor<T> stochastic_pool_backward(const Tensor<T>& x, const PoolWindow& win, Mode mode,
                                   const std::vector<std::uint32_t>& choice, const Tensor<T>& dy) {
  detail::check_window(win);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = win.out_extent(h, win.height), ow = win.out_extent(w, win.width);
  if (dy.shape() != Shape{n, c, oh, ow}) throw ShapeError("stochastic_pool backward: bad upstream shape");
  Tensor<T> dx(x.shape());
  if (mode == Mode::train) {
    if (choice.size() != dy.size()) throw StateError("stochastic_pool backward without sampled indices");
    for (std::size_t i = 0; i < dy.size(); ++i) dx[choice[i]] += dy[i];
    return dx;
  }
  std::size_t out = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++out) {
        T total{0}, sq{0};
        std::size_t count = 0;
        detail::for_region(win, h, w, base, i, j, [&](std::size_t idx) {
          total += x[idx];
          sq += x[idx] * x[idx];
          ++count;
        });
        const T g = dy[out];
        detail::for_region(win, h, w, base, i, j, [&](std::size_t idx) {
          if (total > T{0}) {
            dx[idx] += g * (T{2} * x[idx] * total - sq) / (total * total);
          } else {
            dx[idx] += g / static_cast<T>(count);
          }
        });
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Classifier head: global average pool followed by an affine map.

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects NCHW input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> f({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* src = x.ptr() + i * hw;
    for (std::size_t k = 0; k < hw; ++k) acc += src[k];
    f[i] = acc / static_cast<T>(hw);
  }
  return f;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& df) {
  const std::size_t n = input_shape.at(0), c = input_shape.at(1), hw = input_shape.at(2) * input_shape.at(3);
  if (df.shape() != Shape{n, c}) throw ShapeError("global_avg_pool backward: bad upstream shape");
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < n * c; ++i) {
    const T g = df[i] / static_cast<T>(hw);
    std::fill(dx.ptr() + i * hw, dx.ptr() + (i + 1) * hw, g);
  }
  return dx;
}

/// features (N x d) times weights^T (classes x d) plus bias.
template <typename T>
Tensor<T> affine(const Tensor<T>& features, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (features.rank() != 2 || weights.rank() != 2 || weights.dim(1) != features.dim(1) ||
      bias.size() != weights.dim(0)) {
    throw ShapeError("affine shape mismatch: features " + shape_string(features.shape()) +
                     ", weights " + shape_string(weights.shape()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1), k = weights.dim(0);
  Tensor<T> out({n, k});
  gemm(false, true, n, k, d, T{1}, features.ptr(), d, weights.ptr(), d, T{0}, out.ptr(), k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += bias[j];
  return out;
}

template <typename T>
struct AffineGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
AffineGrads<T> affine_backward(const Tensor<T>& features, const Tensor<T>& weights,
                               const Tensor<T>& dout) {
  const std::size_t n = features.dim(0), d = features.dim(1), k = weights.dim(0);
  if (dout.shape() != Shape{n, k}) throw ShapeError("affine backward: bad upstream shape");
  AffineGrads<T> g{Tensor<T>({n, d}), Tensor<T>({k, d}), Tensor<T>({k})};
  gemm(false, false, n, d, k, T{1}, dout.ptr(), k, weights.ptr(), d, T{0}, g.input.ptr(), d);
  gemm(true, false, k, d, n, T{1}, dout.ptr(), k, features.ptr(), d, T{0}, g.weights.ptr(), d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) g.bias[j] += dout[i * k + j];
  return g;
}

template <typename T>
Tensor<T> classifier_head(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (x.rank() != 4 || weights.rank() != 2 || weights.dim(1) != x.dim(1)) {
    throw ShapeError("classifier_head shape mismatch: input " + shape_string(x.shape()) +
                     ", weights " + shape_string(weights.shape()));
  }
  return affine(global_avg_pool(x), weights, bias);
}

template <typename T>
AffineGrads<T> classifier_head_backward(const Tensor<T>& x, const Tensor<T>& weights,
                                        const Tensor<T>& dlogits) {
  const Tensor<T> f = global_avg_pool(x);
  auto g = affine_backward(f, weights, dlogits);
  g.input = global_avg_pool_backward(x.shape(), g.input);
  return g;
}

}  // namespace alphanet
