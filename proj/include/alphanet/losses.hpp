#pragma once

// Softmax cross-entropy, AM-Softmax and AM-Softmax with a linear branch for
// margin-violating samples. Every loss returns the batch-mean value and its
// gradient with respect to the logits it consumed.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

enum class LossKind { softmax, am_softmax, am_softmax_linear };
enum class LinearMode { fixed, calibrated };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::softmax: return "softmax";
    case LossKind::am_softmax: return "am_softmax";
    case LossKind::am_softmax_linear: return "am_softmax_linear";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "softmax") return LossKind::softmax;
  if (s == "am_softmax") return LossKind::am_softmax;
  if (s == "am_softmax_linear") return LossKind::am_softmax_linear;
  throw ConfigError("unknown loss '" + s + "' (expected softmax|am_softmax|am_softmax_linear)");
}

inline std::string to_string(LinearMode m) {
  return m == LinearMode::fixed ? "fixed" : "calibrated";
}

inline LinearMode parse_linear_mode(const std::string& s) {
  if (s == "fixed") return LinearMode::fixed;
  if (s == "calibrated") return LinearMode::calibrated;
  throw ConfigError("unknown linear_mode '" + s + "' (expected fixed|calibrated)");
}

struct LossConfig {
  LossKind kind = LossKind::am_softmax_linear;
  double scale = 30.0;   // s
  double margin = 0.35;  // m
  /// Linear-branch coefficients for fixed mode; unset values resolve to a = -s, c = 0.
  std::optional<double> slope;   // a
  std::optional<double> offset;  // c
  LinearMode linear_mode = LinearMode::calibrated;

  double resolved_slope() const { return slope.value_or(-scale); }
  double resolved_offset() const { return offset.value_or(0.0); }

  void validate() const {
    if (!(scale > 0.0)) throw ConfigError("loss scale s must be positive");
    if (!(margin >= 0.0 && margin < 1.0)) throw ConfigError("loss margin m must lie in [0, 1)");
    if (kind == LossKind::am_softmax_linear && linear_mode == LinearMode::fixed &&
        !(resolved_slope() < 0.0)) {
      throw ConfigError("fixed linear branch needs a < 0 so the loss grows with the margin violation");
    }
  }
};

template <typename T>
struct LossResult {
  T loss{0};
  Tensor<T> grad;
};

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// -log softmax(z)[y] and its gradient s*(softmax - onehot) scaled by `gscale`.
template <typename T>
T softmax_xent_row(const T* z, std::size_t k, std::size_t y, T gscale, T* g) {
  const T zmax = *std::max_element(z, z + k);
  T denom{0};
  for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
  for (std::size_t j = 0; j < k; ++j) g[j] = gscale * std::exp(z[j] - zmax) / denom;
  g[y] -= gscale;
  return std::log(denom) + zmax - z[y];
}

}  // namespace detail

/// Mean of -log softmax(logits)[y]; grad = (softmax - onehot) / N.
template <typename T>
LossResult<T> softmax_ce(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_ce expects N x classes logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  detail::check_labels(labels, n, k);
  LossResult<T> r{T{0}, Tensor<T>(logits.shape())};
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.loss += detail::softmax_xent_row(logits.ptr() + i * k, k, static_cast<std::size_t>(labels[i]),
                                       inv_n, r.grad.ptr() + i * k);
  }
  r.loss *= inv_n;
  return r;
}

// ---------------------------------------------------------------------------
// Cosine logits

/// cos(theta_j) between row-normalized features and class weights.
template <typename T>
struct CosineLogits {
  Tensor<T> cos;                // N x classes
  Tensor<T> unit_features;      // N x d
  Tensor<T> unit_weights;       // classes x d
  std::vector<T> feature_norms;
  std::vector<T> weight_norms;
};

namespace detail {

// Rows with (near) zero norm are an error unless `zero_ok`, in which case they
// stay zero and record norm 0. Non-finite rows come out as NaN.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& m, std::vector<T>& norms, const char* what, bool zero_ok) {
  const std::size_t r = m.dim(0), d = m.dim(1);
  Tensor<T> out(m.shape());
  norms.assign(r, T{0});
  for (std::size_t i = 0; i < r; ++i) {
    T sq{0};
    for (std::size_t j = 0; j < d; ++j) sq += m[i * d + j] * m[i * d + j];
    const T nrm = std::sqrt(sq);
    if (!std::isfinite(nrm)) {
      norms[i] = std::numeric_limits<T>::quiet_NaN();
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = norms[i];
      continue;
    }
    if (nrm < T(1e-12)) {
      if (zero_ok) continue;
      throw DomainError(std::string("cosine_logits: zero-norm ") + what + " row " + std::to_string(i));
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = m[i * d + j] / nrm;
  }
  return out;
}

}  // namespace detail

template <typename T>
CosineLogits<T> cosine_logits(const Tensor<T>& features, const Tensor<T>& class_weights) {
  if (features.rank() != 2 || class_weights.rank() != 2 || features.dim(1) != class_weights.dim(1)) {
    throw ShapeError("cosine_logits shape mismatch: " + shape_string(features.shape()) + " vs " +
                     shape_string(class_weights.shape()));
  }
  CosineLogits<T> c;
  // A dead feature vector (all ReLU outputs zero) scores cos = 0 against every class.
  c.unit_features = detail::normalize_rows(features, c.feature_norms, "feature", true);
  c.unit_weights = detail::normalize_rows(class_weights, c.weight_norms, "weight", false);
  c.cos = matmul(c.unit_features, transpose(c.unit_weights));
  return c;
}

template <typename T>
struct CosineGrads {
  Tensor<T> features;
  Tensor<T> weights;
};

/// d cos_ij / d f_i = (w^_j - cos_ij f^_i) / |f_i|, symmetric for w_j.
template <typename T>
CosineGrads<T> cosine_logits_backward(const CosineLogits<T>& c, const Tensor<T>& dcos) {
  require_same_shape(c.cos, dcos, "cosine_logits backward");
  const std::size_t n = c.cos.dim(0), k = c.cos.dim(1), d = c.unit_features.dim(1);
  CosineGrads<T> g{matmul(dcos, c.unit_weights), matmul(transpose(dcos), c.unit_features)};
  for (std::size_t i = 0; i < n; ++i) {
    if (c.feature_norms[i] == T{0}) {
      for (std::size_t t = 0; t < d; ++t) g.features[i * d + t] = T{0};
      continue;
    }
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += dcos[i * k + j] * c.cos[i * k + j];
    for (std::size_t t = 0; t < d; ++t) {
      g.features[i * d + t] = (g.features[i * d + t] - s * c.unit_features[i * d + t]) / c.feature_norms[i];
    }
  }
  for (std::size_t j = 0; j < k; ++j) {
    T s{0};
    for (std::size_t i = 0; i < n; ++i) s += dcos[i * k + j] * c.cos[i * k + j];
    for (std::size_t t = 0; t < d; ++t) {
      g.weights[j * d + t] = (g.weights[j * d + t] - s * c.unit_weights[j * d + t]) / c.weight_norms[j];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// AM-Softmax family

/// L_i = -log(e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j != y} e^{s cos_j})), averaged.
template <typename T>
LossResult<T> am_softmax(const Tensor<T>& cos, std::span<const int> labels, double s, double m) {
  if (cos.rank() != 2) throw ShapeError("am_softmax expects N x classes cosines");
  LossConfig cfg;
  cfg.kind = LossKind::am_softmax;
  cfg.scale = s;
  cfg.margin = m;
  cfg.validate();
  const std::size_t n = cos.dim(0), k = cos.dim(1);
  detail::check_labels(labels, n, k);
  LossResult<T> r{T{0}, Tensor<T>(cos.shape())};
  const T st = static_cast<T>(s), inv_n = T{1} / static_cast<T>(n);
  std::vector<T> z(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < k; ++j) z[j] = st * cos[i * k + j];
    z[y] -= st * static_cast<T>(m);
    r.loss += detail::softmax_xent_row(z.data(), k, y, st * inv_n, r.grad.ptr() + i * k);
  }
  r.loss *= inv_n;
  return r;
}

/// Per-sample switch on psi = cos_y - m. psi > 0 uses the AM-Softmax log term
/// with offset c inside the target exponent; psi <= 0 uses a * psi + c.
/// Calibrated mode derives (a, c) per sample as the slope and value of the
/// c = 0 log term at psi = 0, so the loss is C^1 across the switch.
template <typename T>
LossResult<T> am_softmax_linear(const Tensor<T>& cos, std::span<const int> labels,
                                const LossConfig& cfg) {
  if (cos.rank() != 2) throw ShapeError("am_softmax_linear expects N x classes cosines");
  cfg.validate();
  const std::size_t n = cos.dim(0), k = cos.dim(1);
  detail::check_labels(labels, n, k);
  const bool calibrated = cfg.linear_mode == LinearMode::calibrated;
  const T s = static_cast<T>(cfg.scale), m = static_cast<T>(cfg.margin);
  const T c = calibrated ? T{0} : static_cast<T>(cfg.resolved_offset());
  const T a = static_cast<T>(cfg.resolved_slope());
  const T inv_n = T{1} / static_cast<T>(n);
  LossResult<T> r{T{0}, Tensor<T>(cos.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = cos.ptr() + i * k;
    T* g = r.grad.ptr() + i * k;
    const auto y = static_cast<std::size_t>(labels[i]);
    const T psi = row[y] - m;
    // Shared stable pieces: others = sum_{j != y} e^{s cos_j}, relative to `top`.
    T top = s * psi + c;
    for (std::size_t j = 0; j < k; ++j)
      if (j != y) top = std::max(top, s * row[j]);
    if (psi > T{0}) {
      T denom = std::exp(s * psi + c - top);
      for (std::size_t j = 0; j < k; ++j)
        if (j != y) denom += std::exp(s * row[j] - top);
      r.loss += std::log(denom) + top - s * psi;
      g[y] = inv_n * s * (std::exp(s * psi + c - top) / denom - T{1});
      for (std::size_t j = 0; j < k; ++j)
        if (j != y) g[j] = inv_n * s * std::exp(s * row[j] - top) / denom;
      continue;
    }
    if (!calibrated) {
      r.loss += a * psi + c;
      g[y] = inv_n * a;
      continue;
    }
    // Calibrated: L_A(psi) = log(e^{s psi} + O) - s psi with O = sum_{j != y} e^{s cos_j}.
    // c_i = L_A(0) = log(1 + O); a_i = L_A'(0) = -s O / (1 + O).
    T top0 = T{0};
    for (std::size_t j = 0; j < k; ++j)
      if (j != y) top0 = std::max(top0, s * row[j]);
    T denom0 = std::exp(-top0);  // the "1" term
    for (std::size_t j = 0; j < k; ++j)
      if (j != y) denom0 += std::exp(s * row[j] - top0);
    const T q0 = std::exp(-top0) / denom0;  // 1 / (1 + O)
    const T ci = std::log(denom0) + top0;
    const T ai = -s * (T{1} - q0);
    r.loss += ai * psi + ci;
    g[y] = inv_n * ai;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == y) continue;
      const T qj = std::exp(s * row[j] - top0) / denom0;  // e^{s cos_j} / (1 + O)
      // d c_i / d cos_j = s q_j ; d a_i / d cos_j = -s^2 q_j q0
      g[j] = inv_n * (s * qj - psi * s * s * qj * q0);
    }
  }
  r.loss *= inv_n;
  return r;
}

/// Dispatch on cfg.kind. `logits` are affine logits for softmax and cosines otherwise.
template <typename T>
LossResult<T> evaluate_loss(const Tensor<T>& logits, std::span<const int> labels,
                            const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::softmax: return softmax_ce(logits, labels);
    case LossKind::am_softmax: return am_softmax(logits, labels, cfg.scale, cfg.margin);
    case LossKind::am_softmax_linear: return am_softmax_linear(logits, labels, cfg);
  }
  throw ConfigError("unknown loss kind");
}

}  // namespace alphanet
