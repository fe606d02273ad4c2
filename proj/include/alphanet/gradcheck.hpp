#pragma once

// Central finite-difference checks of every analytic backward pass, run in
// double precision. Each check contracts the op's output with a fixed random
// tensor so one scalar exercises every output element.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "alphanet/layers.hpp"
#include "alphanet/losses.hpp"
#include "alphanet/net.hpp"
#include "alphanet/prng.hpp"

namespace alphanet {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradcheckResult {
  std::string name;
  std::string scope;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;

  bool passed() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed(); });
  }

  std::string format() const {
    std::string out;
    char line[256];
    for (const auto& r : results) {
      std::snprintf(line, sizeof line, "%-4s %-8s %-40s max_rel_err=%.3e tol=%.0e entries=%zu\n",
                    r.passed() ? "PASS" : "FAIL", r.scope.c_str(), r.name.c_str(), r.max_rel_error,
                    r.tolerance, r.checked);
      out += line;
    }
    return out;
  }
};

/// Compares `analytic` against central differences of `f` w.r.t. `x`. Tensors
/// larger than `max_entries` are checked on an evenly strided subset. With a
/// nonzero `fallback_h`, entries that disagree at `h` are re-measured at the
/// smaller step: a ReLU kink inside [x - h, x + h] spoils the wide stencil,
/// while a wrong analytic gradient disagrees at both.
inline std::pair<double, std::size_t> fd_compare(const std::function<double()>& f, Tensor<double>& x,
                                                 const Tensor<double>& analytic, std::size_t max_entries = 400,
                                                 double h = 1e-5, double fallback_h = 0.0,
                                                 double accept = 0.0) {
  require_same_shape(x, analytic, "gradcheck");
  const std::size_t step = std::max<std::size_t>(1, (x.size() + max_entries - 1) / max_entries);
  auto central = [&](std::size_t i, double dh) {
    const double saved = x[i];
    x[i] = saved + dh;
    const double up = f();
    x[i] = saved - dh;
    const double down = f();
    x[i] = saved;
    return (up - down) / (2 * dh);
  };
  double worst = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); i += step, ++count) {
    double e = relative_error(analytic[i], central(i, h));
    if (fallback_h > 0.0 && e >= accept) e = std::min(e, relative_error(analytic[i], central(i, fallback_h)));
    worst = std::max(worst, e);
  }
  return {worst, count};
}

namespace detail {

/// Accumulates the worst error over several tensors into one result.
struct Checker {
  GradcheckResult r;
  double fallback_h = 0.0;
  Checker(std::string name, std::string scope, double tol, double fallback = 0.0) : fallback_h(fallback) {
    r = {std::move(name), std::move(scope), 0.0, tol, 0};
  }
  void add(const std::function<double()>& f, Tensor<double>& x, const Tensor<double>& g,
           std::size_t max_entries = 400) {
    auto [e, n] = fd_compare(f, x, g, max_entries, 1e-5, fallback_h, 0.1 * r.tolerance);
    r.max_rel_error = std::max(r.max_rel_error, e);
    r.checked += n;
  }
};

/// Values kept at least `margin` away from zero so ReLU/pool kinks are not crossed.
inline Tensor<double> away_from_zero(PrngStream& s, const Shape& shape, double margin = 0.05) {
  Tensor<double> t = prng_normal<double>(s, shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = t[i] >= 0 ? t[i] + margin : t[i] - margin;
  return t;
}

}  // namespace detail

inline constexpr double layer_tolerance = 1e-4;
inline constexpr double network_tolerance = 1e-3;

// ---------------------------------------------------------------------------
// Layer suite

inline GradcheckResult check_conv2d(std::size_t k, std::size_t stride, std::uint64_t seed = 1) {
  PrngStream s(seed, "gradcheck/conv2d");
  Tensor<double> x = prng_normal<double>(s, {2, 3, 7, 6});
  Tensor<double> w = prng_normal<double>(s, {4, 3, k, k}, 0.3);
  Tensor<double> b = prng_normal<double>(s, {4});
  const ConvGeometry geo{stride, std::nullopt};
  const Tensor<double> proj = prng_normal<double>(s, conv2d(x, w, b, geo).shape());
  auto f = [&] { return dot(conv2d(x, w, b, geo), proj); };
  const auto g = conv2d_backward(x, w, b, geo, proj);
  detail::Checker c("conv2d k" + std::to_string(k) + " s" + std::to_string(stride), "layer", layer_tolerance);
  c.add(f, x, g.input);
  c.add(f, w, g.kernel);
  c.add(f, b, g.bias);
  return c.r;
}

inline GradcheckResult check_combined_conv(std::uint64_t seed = 2) {
  PrngStream s(seed, "gradcheck/combined_conv");
  Tensor<double> x = prng_normal<double>(s, {2, 2, 6, 6});
  ConvParams<double> p1{prng_normal<double>(s, {3, 2, 5, 5}, 0.2), prng_normal<double>(s, {3}), {}};
  ConvParams<double> p2{prng_normal<double>(s, {3, 2, 10, 10}, 0.1), prng_normal<double>(s, {3}), {}};
  const Tensor<double> proj = prng_normal<double>(s, combined_conv(x, p1, p2).shape());
  auto f = [&] { return dot(combined_conv(x, p1, p2), proj); };
  const auto g = combined_conv_backward(x, p1, p2, proj);
  detail::Checker c("combined_conv 5x5+10x10", "layer", layer_tolerance);
  c.add(f, x, g.input);
  c.add(f, p1.kernel, g.first.kernel);
  c.add(f, p1.bias, g.first.bias);
  c.add(f, p2.kernel, g.second.kernel);
  c.add(f, p2.bias, g.second.bias);
  return c.r;
}

inline GradcheckResult check_batch_norm(Mode mode, std::uint64_t seed = 3) {
  PrngStream s(seed, "gradcheck/batch_norm");
  Tensor<double> x = prng_normal<double>(s, {3, 4, 3, 3});
  auto p = BatchNormParams<double>::standard(4);
  p.gamma = prng_normal<double>(s, {4});
  p.beta = prng_normal<double>(s, {4});
  p.running_mean = prng_normal<double>(s, {4});
  p.running_var = prng_uniform<double>(s, {4}) + Tensor<double>({4}, 0.5);
  p.stats_ready = true;
  const Tensor<double> proj = prng_normal<double>(s, x.shape());
  auto f = [&] {
    auto q = p;  // running statistics must not drift between evaluations
    return dot(batch_norm(x, q, mode), proj);
  };
  auto q = p;
  BatchNormCache<double> cache;
  batch_norm(x, q, mode, &cache);
  const auto g = batch_norm_backward(cache, p, proj);
  detail::Checker c(std::string("batch_norm ") + (mode == Mode::train ? "train" : "eval"), "layer", layer_tolerance);
  c.add(f, x, g.input);
  c.add(f, p.gamma, g.gamma);
  c.add(f, p.beta, g.beta);
  return c.r;
}

inline GradcheckResult check_relu(std::uint64_t seed = 4) {
  PrngStream s(seed, "gradcheck/relu");
  Tensor<double> x = detail::away_from_zero(s, {2, 3, 4, 4});
  const Tensor<double> proj = prng_normal<double>(s, x.shape());
  auto f = [&] { return dot(relu(x), proj); };
  detail::Checker c("relu", "layer", layer_tolerance);
  c.add(f, x, relu_backward(x, proj));
  return c.r;
}

/// Train mode with the sampled indices frozen, and the deterministic eval mode.
inline GradcheckResult check_stochastic_pool(Mode mode, std::uint64_t seed = 5) {
  PrngStream s(seed, "gradcheck/stochastic_pool");
  Tensor<double> x = prng_uniform<double>(s, {2, 3, 5, 5}) + Tensor<double>({2, 3, 5, 5}, 0.1);
  const PoolWindow win{};
  PrngStream draw = s.fork("draw");
  const auto first = stochastic_pool(x, win, mode, draw);
  const Tensor<double> proj = prng_normal<double>(s, first.output.shape());
  auto f = [&] {
    if (mode == Mode::train) return dot(stochastic_pool_replay(x, win, first.choice), proj);
    PrngStream unused(0, "unused");
    return dot(stochastic_pool(x, win, Mode::eval, unused).output, proj);
  };
  detail::Checker c(std::string("stochastic_pool ") + (mode == Mode::train ? "train (frozen index)" : "eval"),
                    "layer", layer_tolerance);
  c.add(f, x, stochastic_pool_backward(x, win, mode, first.choice, proj));
  return c.r;
}

inline GradcheckResult check_classifier_head(std::uint64_t seed = 6) {
  PrngStream s(seed, "gradcheck/classifier_head");
  Tensor<double> x = prng_normal<double>(s, {3, 4, 3, 2});
  Tensor<double> w = prng_normal<double>(s, {5, 4});
  Tensor<double> b = prng_normal<double>(s, {5});
  const Tensor<double> proj = prng_normal<double>(s, {3, 5});
  auto f = [&] { return dot(classifier_head(x, w, b), proj); };
  const auto g = classifier_head_backward(x, w, proj);
  detail::Checker c("classifier_head", "layer", layer_tolerance);
  c.add(f, x, g.input);
  c.add(f, w, g.weights);
  c.add(f, b, g.bias);
  return c.r;
}

inline GradcheckResult check_cosine_logits(std::uint64_t seed = 7) {
  PrngStream s(seed, "gradcheck/cosine_logits");
  Tensor<double> feat = prng_normal<double>(s, {4, 6});
  Tensor<double> w = prng_normal<double>(s, {5, 6});
  const Tensor<double> proj = prng_normal<double>(s, {4, 5});
  auto f = [&] { return dot(cosine_logits(feat, w).cos, proj); };
  const auto g = cosine_logits_backward(cosine_logits(feat, w), proj);
  detail::Checker c("cosine_logits", "layer", layer_tolerance);
  c.add(f, feat, g.features);
  c.add(f, w, g.weights);
  return c.r;
}

// ---------------------------------------------------------------------------
// Loss suite

/// Gradient of a loss w.r.t. its logits/cosines.
inline GradcheckResult check_loss(const std::string& name, const LossConfig& cfg, Tensor<double> z,
                                  const std::vector<int>& labels) {
  const auto r = evaluate_loss(z, labels, cfg);
  auto f = [&] { return evaluate_loss(z, labels, cfg).loss; };
  detail::Checker c(name, "loss", layer_tolerance);
  c.add(f, z, r.grad);
  return c.r;
}

/// Cosines chosen so every target's psi = cos_y - m is on the requested side of zero.
inline Tensor<double> cosines_for_branch(bool linear_branch, double margin, std::uint64_t seed) {
  PrngStream s(seed, "gradcheck/cosines");
  Tensor<double> c({4, 5});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.9 * (2 * s.uniform() - 1);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t y = i % 5;
    const double off = 0.05 + 0.3 * s.uniform();
    c[i * 5 + y] = linear_branch ? margin - off : std::min(0.99, margin + off);
  }
  return c;
}

inline std::vector<GradcheckResult> loss_suite() {
  std::vector<GradcheckResult> out;
  const std::vector<int> labels{0, 1, 2, 3};
  PrngStream s(8, "gradcheck/softmax");
  LossConfig softmax;
  softmax.kind = LossKind::softmax;
  out.push_back(check_loss("softmax_ce", softmax, prng_normal<double>(s, {4, 5}, 2.0), labels));
  LossConfig am;
  am.kind = LossKind::am_softmax;
  out.push_back(check_loss("am_softmax", am, cosines_for_branch(false, am.margin, 9), labels));
  for (LinearMode mode : {LinearMode::fixed, LinearMode::calibrated}) {
    LossConfig lin;
    lin.kind = LossKind::am_softmax_linear;
    lin.linear_mode = mode;
    if (mode == LinearMode::fixed) lin.offset = 0.7;
    const std::string tag = "am_softmax_linear " + to_string(mode);
    out.push_back(check_loss(tag + " log branch", lin, cosines_for_branch(false, lin.margin, 10), labels));
    out.push_back(check_loss(tag + " linear branch", lin, cosines_for_branch(true, lin.margin, 11), labels));
  }
  return out;
}

inline std::vector<GradcheckResult> layer_suite() {
  return {check_conv2d(3, 1),
          check_conv2d(3, 2),
          check_conv2d(1, 2),
          check_conv2d(10, 1),
          check_combined_conv(),
          check_batch_norm(Mode::train),
          check_batch_norm(Mode::eval),
          check_relu(),
          check_stochastic_pool(Mode::train),
          check_stochastic_pool(Mode::eval),
          check_classifier_head(),
          check_cosine_logits()};
}

// ---------------------------------------------------------------------------
// Network suite

/// Total training loss (main + lambda * mean aux) of a train-mode pass, with
/// pooling indices frozen after the first pass.
inline double network_loss(Network<double>& net, const Tensor<double>& x, const std::vector<int>& labels,
                           const LossConfig& loss, double lambda, bool with_backward,
                           Tensor<double>* dx = nullptr) {
  PrngStream s(11, "gradcheck/net-pass");
  auto r = net.forward(x, Mode::train, s);
  const auto main = evaluate_loss(r.logits, labels, loss);
  std::vector<double> aux;
  std::vector<Tensor<double>> daux;
  for (const auto& a : r.aux_logits) {
    const auto l = evaluate_loss(a, labels, loss);
    aux.push_back(l.loss);
    daux.push_back((lambda / static_cast<double>(r.aux_logits.size())) * l.grad);
  }
  if (with_backward) {
    Tensor<double> d = net.backward(main.grad, daux);
    if (dx) *dx = std::move(d);
  }
  return total_loss(main.loss, aux, lambda);
}

/// Two-block network of the given structure: every parameter tensor and the
/// input batch are checked (large tensors on a strided subset).
inline GradcheckResult check_network(Structure structure, std::uint64_t seed = 12) {
  NetworkConfig cfg;
  cfg.structure = structure;
  cfg.stage_blocks = {1, 1, 0, 0};
  cfg.base_width = 2;
  cfg.num_classes = 4;
  cfg.input_size = 8;
  cfg.p_extra = 1.0;
  cfg.seed = seed;
  cfg.head = HeadKind::cosine;
  auto net = build_network<double>(cfg);
  // Non-trivial gates so the softmax weighting is exercised.
  for (auto* p : net.parameters()) {
    if (p->name.find("/gates") != std::string::npos)
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.3 * static_cast<double>(i) - 0.2;
  }
  net.freeze_pooling(true);
  PrngStream s(seed, "gradcheck/network");
  Tensor<double> x = prng_normal<double>(s, {4, 3, 8, 8});
  const std::vector<int> labels{0, 1, 2, 3};
  LossConfig loss;
  loss.scale = 4.0;  // a modest scale keeps the loss surface smooth at h = 1e-5
  const double lambda = 0.3;
  net.zero_grad();
  Tensor<double> dx;
  network_loss(net, x, labels, loss, lambda, true, &dx);
  auto f = [&] { return network_loss(net, x, labels, loss, lambda, false); };
  detail::Checker c("network " + to_string(structure) + " (2 blocks)", "network", network_tolerance, 1e-6);
  for (auto* p : net.parameters()) {
    const Tensor<double> g = p->grad;
    c.add(f, p->value, g, 60);
  }
  c.add(f, x, dx, 60);
  net.freeze_pooling(false);
  return c.r;
}

inline std::vector<GradcheckResult> network_suite() {
  return {check_network(Structure::alpha), check_network(Structure::residual), check_network(Structure::plain)};
}

enum class GradcheckScope { all, layer, loss, network };

inline GradcheckScope parse_gradcheck_scope(const std::string& s) {
  if (s == "all") return GradcheckScope::all;
  if (s == "layer") return GradcheckScope::layer;
  if (s == "loss") return GradcheckScope::loss;
  if (s == "network") return GradcheckScope::network;
  throw ConfigError("unknown gradcheck scope '" + s + "' (expected all|layer|loss|network)");
}

inline GradcheckReport gradcheck(GradcheckScope scope) {
  GradcheckReport rep;
  auto take = [&](std::vector<GradcheckResult> v) { rep.results.insert(rep.results.end(), v.begin(), v.end()); };
  if (scope == GradcheckScope::all || scope == GradcheckScope::layer) take(layer_suite());
  if (scope == GradcheckScope::all || scope == GradcheckScope::loss) take(loss_suite());
  if (scope == GradcheckScope::all || scope == GradcheckScope::network) take(network_suite());
  return rep;
}

}  // namespace alphanet
