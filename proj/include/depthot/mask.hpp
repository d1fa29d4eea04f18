#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/losses.hpp"
#include "depthot/models.hpp"
#include "depthot/ops.hpp"
#include "depthot/params.hpp"

// Sparse-pixel masks: a sigmoid-output network G(I) is optimized so that a
// frozen predictor N reproduces its full-image output from I * G(I) while a
// sparsity penalty lambda * mean(G(I)) pushes pixels out.
namespace depthot {

enum class MaskMode {
  network,  // G is a small conv net of the image
  free      // G is a per-pixel logit map, independent of the image
};

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "network") return MaskMode::network;
  if (s == "free") return MaskMode::free;
  throw std::invalid_argument("unknown mask mode '" + s + "' (expected network or free)");
}

struct MaskConfig {
  MaskMode mode = MaskMode::network;
  std::size_t hidden = 8;
  /// Initial bias of the last layer (logit map in free mode). Positive values
  /// start from an almost fully open mask.
  double open_bias = 2.0;
};

struct MaskState {
  MaskConfig config;
  std::size_t height = 0, width = 0;
  ParamSet g_params;
  double lambda = 0.0;
  double threshold = 0.5;
};

template <class Rng>
MaskState init_mask(std::size_t height, std::size_t width, const MaskConfig& cfg, Rng& rng) {
  if (height < 3 || width < 3) throw std::invalid_argument("mask needs at least 3x3 pixels");
  MaskState s{cfg, height, width, {}, 0.0, 0.5};
  if (cfg.mode == MaskMode::free) {
    s.g_params.add("logits", Tensor(Shape{height, width}, cfg.open_bias));
    return s;
  }
  const std::size_t c = cfg.hidden;
  if (c == 0) throw std::invalid_argument("mask network width must be positive");
  s.g_params.add("conv1.weight", fan_in_uniform(Shape{c, 3, 3, 3}, 27, rng));
  s.g_params.add("conv1.bias", Tensor(Shape{c}));
  s.g_params.add("conv2.weight", fan_in_uniform(Shape{c, c, 3, 3}, 9 * c, rng));
  s.g_params.add("conv2.bias", Tensor(Shape{c}));
  s.g_params.add("conv3.weight", fan_in_uniform(Shape{1, c, 3, 3}, 9 * c, rng));
  s.g_params.add("conv3.bias", Tensor(Shape{1}, cfg.open_bias));
  return s;
}

inline MaskState init_mask(std::size_t height, std::size_t width, const MaskConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_mask(height, width, cfg, rng);
}

/// G(I): [3,H,W] -> [H,W] with values in (0,1).
inline Var mask_apply(const MaskState& s, Var image, const BoundParams& p) {
  const Shape expect{3, s.height, s.width};
  if (image.shape() != expect) detail::shape_fail("mask input", image.shape(), expect);
  if (s.config.mode == MaskMode::free) return sigmoid(p["logits"]);
  Var x = relu(conv2d(image, p["conv1.weight"], p["conv1.bias"], Padding::replicate));
  x = relu(conv2d(x, p["conv2.weight"], p["conv2.bias"], Padding::replicate));
  x = conv2d(x, p["conv3.weight"], p["conv3.bias"], Padding::replicate);
  return sigmoid(reshape(x, Shape{s.height, s.width}));
}

inline Tensor mask_of(const MaskState& s, const Tensor& image) {
  Tape t;
  const BoundParams p(t, s.g_params, false);
  return mask_apply(s, t.constant(image), p).value();
}

/// Broadcasts an [H,W] mask over the channels of a [C,H,W] image.
inline Var apply_mask(Var image, Var mask) {
  const Shape& s = image.shape();
  if (s.size() != 3 || mask.shape() != Shape{s[1], s[2]}) {
    detail::shape_fail("apply_mask", image.shape(), mask.shape());
  }
  const std::size_t plane = s[1] * s[2];
  std::vector<std::size_t> index(s[0] * plane);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = i % plane;
  return mul(image, gather(mask, std::move(index), s));
}

inline Tensor apply_mask(const Tensor& image, const Tensor& mask) {
  return detail::eval2(image, mask, [](Var i, Var m) { return apply_mask(i, m); });
}

struct MaskObjective {
  Var total, fidelity, sparsity;
};

/// L_dif(Y, N(I * G(I))) + lambda * mean(G(I)) on the tape of `image`.
/// The predictor is bound as constants and receives no gradient.
inline MaskObjective mask_objective(const MaskState& s, const BoundParams& g, const Predictor& net, Var image,
                                    const Tensor& target) {
  if (!(s.lambda >= 0)) throw std::invalid_argument("lambda must be nonnegative");
  Tape& tape = *image.tape();
  const BoundParams frozen(tape, net.params(), false);
  const Var m = mask_apply(s, image, g);
  const Var pred = net.apply(apply_mask(image, m), frozen);
  const Var fidelity = composite_loss(tape.constant(target), pred).total;
  const Var sparsity = mean(m);
  return {s.lambda == 0.0 ? fidelity : add(fidelity, scale(sparsity, s.lambda)), fidelity, sparsity};
}

inline double mask_objective(const MaskState& s, const Predictor& net, const Tensor& image, const Tensor& target) {
  Tape t;
  const BoundParams g(t, s.g_params, false);
  return mask_objective(s, g, net, t.constant(image), target).total.value().item();
}

struct MaskFit {
  MaskState state;                 // lowest-objective iterate
  double objective = 0;            // its objective
  std::size_t best_step = 0;
  std::vector<double> history;     // objective at every visited iterate
};

/// Gradient descent on the parameters of G with a fixed step. Iterate k is
/// evaluated before update k; the final iterate is evaluated too, so
/// `steps` updates visit steps + 1 states. Returns the best one.
inline MaskFit optimize_mask(const MaskState& start, const Predictor& net, const Tensor& image, std::size_t steps,
                             double lr) {
  if (!(lr > 0)) throw std::invalid_argument("mask learning rate must be positive");
  const Tensor target = net.predict(image);
  MaskState cur = start;
  MaskFit fit{start, std::numeric_limits<double>::infinity(), 0, {}};
  for (std::size_t k = 0;; ++k) {
    Tape tape;
    const BoundParams g(tape, cur.g_params, true);
    const MaskObjective obj = mask_objective(cur, g, net, tape.constant(image), target);
    const double v = obj.total.value().item();
    if (!std::isfinite(v)) throw std::runtime_error("mask objective diverged at step " + std::to_string(k));
    fit.history.push_back(v);
    if (v < fit.objective) {
      fit.objective = v;
      fit.state = cur;
      fit.best_step = k;
    }
    if (k == steps) break;
    tape.backward(obj.total);
    sgd_step(cur.g_params, g.grads(), lr);
  }
  return fit;
}

/// 1 where mask >= threshold, else 0.
inline Tensor binarize(const Tensor& mask, double threshold = 0.5) {
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("binarize threshold must lie in (0,1)");
  Tensor out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!(mask[i] >= 0 && mask[i] <= 1)) throw std::invalid_argument("mask values must lie in [0,1]");
    out[i] = mask[i] >= threshold ? 1.0 : 0.0;
  }
  return out;
}

inline void check_binary(const Tensor& mask) {
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask is not binary");
  }
}

/// Fraction of retained pixels of a binary mask.
inline double sparseness(const Tensor& binary_mask) {
  check_binary(binary_mask);
  if (binary_mask.size() == 0) throw std::invalid_argument("empty mask");
  return binary_mask.sum() / static_cast<double>(binary_mask.size());
}

/// RMSE between net(I * mask) and `reference`.
inline double cross_evaluate(const Predictor& net, const Tensor& binary_mask, const Tensor& image,
                             const Tensor& reference) {
  check_binary(binary_mask);
  return rmse(net.predict(apply_mask(image, binary_mask)), reference);
}

struct SparsityReport {
  double lambda = 0;
  double sparseness = 0;
  double rmse_vs_full = 0;
  std::optional<double> rmse_vs_gt;
  Tensor mask;    // binarized
  Tensor output;  // net(I * mask)

  static constexpr const char* kCsvHeader = "lambda,sparseness,rmse_vs_full,rmse_vs_gt";
  std::string csv_row() const {
    return format_number(lambda) + ',' + format_number(sparseness) + ',' + format_number(rmse_vs_full) + ',' +
           (rmse_vs_gt ? format_number(*rmse_vs_gt) : std::string());
  }
};

struct SweepConfig {
  MaskConfig mask{};
  std::size_t steps = 300;
  double lr = 0.2;
  double threshold = 0.5;
  std::uint64_t seed = 42;
};

/// One optimize / binarize / evaluate pass per lambda, each from the same
/// seeded initial state.
inline std::vector<SparsityReport> lambda_sweep(const Predictor& net, const Tensor& image,
                                                const std::vector<double>& lambdas, const SweepConfig& cfg,
                                                const std::optional<Tensor>& gt = std::nullopt) {
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] >= 0)) throw std::invalid_argument("lambdas must be nonnegative");
    if (i && lambdas[i] < lambdas[i - 1]) throw std::invalid_argument("lambdas must be ascending");
  }
  const std::size_t h = net.config().height, w = net.config().width;
  const Tensor full = net.predict(image);
  if (gt && gt->shape() != full.shape()) detail::shape_fail("sweep ground truth", gt->shape(), full.shape());
  std::vector<SparsityReport> out;
  for (double lambda : lambdas) {
    MaskState s = init_mask(h, w, cfg.mask, cfg.seed);
    s.lambda = lambda;
    s.threshold = cfg.threshold;
    const MaskFit fit = optimize_mask(s, net, image, cfg.steps, cfg.lr);
    SparsityReport r;
    r.lambda = lambda;
    r.mask = binarize(mask_of(fit.state, image), cfg.threshold);
    r.sparseness = sparseness(r.mask);
    r.output = net.predict(apply_mask(image, r.mask));
    r.rmse_vs_full = rmse(r.output, full);
    if (gt) r.rmse_vs_gt = rmse(r.output, *gt);
    out.push_back(std::move(r));
  }
  return out;
}

struct ToySweepConfig {
  PredictorKind predictor = PredictorKind::cnn_toy;
  std::vector<double> lambdas{0, 1, 2, 3, 4, 5, 6};
  std::size_t train_scenes = 24;
  SceneOptions scene{};
  PretrainOptions pretrain{};
  SweepConfig sweep{};  // its seed also drives data, predictor init and pretraining
};

struct ToySweep {
  Predictor net;
  Scene scene;                        // the swept image and its true depth
  std::vector<double> pretrain_curve;
  std::vector<SparsityReport> reports;
};

/// Trains a toy predictor on generated scenes, then sweeps lambda on one
/// further scene.
inline ToySweep toy_sweep(const ToySweepConfig& cfg) {
  std::mt19937_64 rng(cfg.sweep.seed);
  const std::vector<Scene> data = make_scenes(cfg.train_scenes, cfg.scene, rng);
  PredictorConfig pc;
  pc.kind = cfg.predictor;
  pc.height = cfg.scene.height;
  pc.width = cfg.scene.width;
  ToySweep out{Predictor(pc, rng), {}, {}, {}};
  out.pretrain_curve = pretrain(out.net, data, cfg.pretrain, rng);
  out.scene = make_scene(cfg.scene, rng);
  out.reports = lambda_sweep(out.net, out.scene.image, cfg.lambdas, cfg.sweep, out.scene.depth);
  return out;
}

}  // namespace depthot
