#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

#include "depthot/ops.hpp"
#include "depthot/params.hpp"
#include "depthot/stencil.hpp"

// Depth gradient refinement block.
//
//   merged  = [F | lap(F) | d3(F)]                        3C channels
//   w       = sigmoid(FC2(relu(FC1(gap(merged)))))        per-channel gates
//   spatial = conv3x3(relu(merged * w))                   3C channels
//   out     = conv1x1(outer(Pa spatial, Pb merged))       C channels
//
// where outer() forms, per pixel, the rank x rank outer product of the two
// projected channel vectors. The output width equals the input width so the
// block can follow any encoder stage.
namespace depthot::dgr {

struct Config {
  std::size_t channels = 1;
  std::size_t reduction_ratio = 1;
  std::size_t interaction_rank = 1;
  bool residual = false;  // add the input back onto the output

  std::size_t merged() const { return 3 * channels; }
  std::size_t hidden() const { return merged() / reduction_ratio; }

  void validate() const {
    if (channels == 0) throw std::invalid_argument("dgr channels must be positive");
    if (reduction_ratio == 0 || merged() % reduction_ratio != 0) {
      throw std::invalid_argument("dgr reduction ratio must divide 3C = " + std::to_string(merged()));
    }
    if (interaction_rank == 0 || interaction_rank > merged()) {
      throw std::invalid_argument("dgr interaction rank must lie in [1, 3C]");
    }
  }
};

namespace detail {

inline std::vector<std::pair<std::string, Shape>> layout(const Config& c) {
  const std::size_t m = c.merged(), h = c.hidden(), r = c.interaction_rank;
  return {
      {"fc1.weight", {h, m}},         {"fc1.bias", {h}},
      {"fc2.weight", {m, h}},         {"fc2.bias", {m}},
      {"spatial.weight", {m, m, 3, 3}}, {"spatial.bias", {m}},
      {"proj_a.weight", {r, m}},      {"proj_b.weight", {r, m}},
      {"reduce.weight", {c.channels, r * r}}, {"reduce.bias", {c.channels}},
  };
}

}  // namespace detail

/// Appends DGR parameters to `set` under `prefix`. Weights are drawn
/// fan-in scaled uniform; biases start at zero so initial gates sit near 0.5.
template <class Rng>
void add_params(ParamSet& set, const Config& cfg, Rng& rng, const std::string& prefix = "") {
  cfg.validate();
  for (auto& [name, shape] : detail::layout(cfg)) {
    const bool is_bias = name.ends_with(".bias");
    std::size_t fan_in = 1;
    for (std::size_t k = 1; k < shape.size(); ++k) fan_in *= shape[k];
    set.add(prefix + name, is_bias ? Tensor(shape) : fan_in_uniform(shape, fan_in, rng));
  }
}

template <class Rng>
ParamSet make_params(const Config& cfg, Rng& rng) {
  ParamSet set;
  add_params(set, cfg, rng);
  return set;
}

inline ParamSet zero_params(const Config& cfg) {
  cfg.validate();
  ParamSet set;
  for (auto& [name, shape] : detail::layout(cfg)) set.add(name, Tensor(shape));
  return set;
}

/// Throws ShapeError unless every expected tensor exists with the configured shape.
inline void check_params(const Config& cfg, const ParamSet& set, const std::string& prefix = "") {
  cfg.validate();
  for (auto& [name, shape] : detail::layout(cfg)) {
    const Tensor& t = set[prefix + name];
    if (t.shape() != shape) depthot::detail::shape_fail("dgr parameter " + name, t.shape(), shape);
    if (!t.all_finite()) throw std::invalid_argument("dgr parameter " + name + " is not finite");
  }
}

/// DGR parameters recorded on a tape.
struct Vars {
  Var fc1_w, fc1_b, fc2_w, fc2_b, spatial_w, spatial_b, proj_a, proj_b, reduce_w, reduce_b;

  static Vars from(const BoundParams& p, const std::string& prefix = "") {
    return {p[prefix + "fc1.weight"],     p[prefix + "fc1.bias"],      p[prefix + "fc2.weight"],
            p[prefix + "fc2.bias"],       p[prefix + "spatial.weight"], p[prefix + "spatial.bias"],
            p[prefix + "proj_a.weight"],  p[prefix + "proj_b.weight"],  p[prefix + "reduce.weight"],
            p[prefix + "reduce.bias"]};
  }
};

namespace detail {

/// [m,n] matrix viewed as an [m,n,1,1] pointwise convolution kernel.
inline Var as_pointwise(Var w) { return reshape(w, Shape{w.shape()[0], w.shape()[1], 1, 1}); }

}  // namespace detail

/// [C,H,W] -> [3C,H,W]: the input, its Laplacian, and its third-order response.
inline Var merge(Var features) {
  depthot::detail::require_extent(features.shape(), 5, "dgr merge");
  if (features.shape().size() != 3) throw ShapeError("dgr merge expects [C,H,W]");
  return concat_channels({features, laplacian(features), third_order(features)});
}

/// Per-channel gates in (0,1).
inline Var channel_weights(Var merged, const Vars& p) {
  const Var pooled = gap(merged);
  const Var hidden = relu(fully_connected(pooled, p.fc1_w, p.fc1_b));
  return sigmoid(fully_connected(hidden, p.fc2_w, p.fc2_b));
}

/// conv3x3(relu(merged * w)), zero padded.
inline Var spatial_refine(Var merged, Var weights, const Vars& p) {
  return conv2d(relu(mul(merged, weights)), p.spatial_w, p.spatial_b, Padding::zero);
}

/// Low-rank bilinear interaction reduced back to C channels.
inline Var interact(Var spatial, Var merged, const Vars& p) {
  if (spatial.shape() != merged.shape()) {
    depthot::detail::shape_fail("dgr interact", spatial.shape(), merged.shape());
  }
  const Var a = conv2d(spatial, detail::as_pointwise(p.proj_a), Padding::zero);
  const Var b = conv2d(merged, detail::as_pointwise(p.proj_b), Padding::zero);
  return conv2d(pixel_outer(a, b), detail::as_pointwise(p.reduce_w), p.reduce_b, Padding::zero);
}

inline Var forward(Var features, const Vars& p, const Config& cfg) {
  cfg.validate();
  if (features.shape().size() != 3 || features.shape()[0] != cfg.channels) {
    throw ShapeError("dgr input must be [" + std::to_string(cfg.channels) + ",H,W], got " +
                     to_string(features.shape()));
  }
  const Var merged = merge(features);
  const Var w = channel_weights(merged, p);
  const Var out = interact(spatial_refine(merged, w, p), merged, p);
  return cfg.residual ? add(features, out) : out;
}

// Plain-tensor conveniences.

inline Tensor merge(const Tensor& features) {
  return depthot::detail::eval1(features, [](Var v) { return merge(v); });
}

inline Tensor channel_weights(const Tensor& merged, const ParamSet& params) {
  Tape t;
  const BoundParams p(t, params, false);
  return channel_weights(t.constant(merged), Vars::from(p)).value();
}

inline Tensor spatial_refine(const Tensor& merged, const Tensor& weights, const ParamSet& params) {
  Tape t;
  const BoundParams p(t, params, false);
  return spatial_refine(t.constant(merged), t.constant(weights), Vars::from(p)).value();
}

inline Tensor interact(const Tensor& spatial, const Tensor& merged, const ParamSet& params) {
  Tape t;
  const BoundParams p(t, params, false);
  return interact(t.constant(spatial), t.constant(merged), Vars::from(p)).value();
}

inline Tensor forward(const Tensor& features, const ParamSet& params, const Config& cfg) {
  check_params(cfg, params);
  Tape t;
  const BoundParams p(t, params, false);
  return forward(t.constant(features), Vars::from(p), cfg).value();
}

}  // namespace depthot::dgr
