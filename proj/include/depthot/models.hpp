#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/dgr.hpp"
#include "depthot/losses.hpp"
#include "depthot/ops.hpp"
#include "depthot/params.hpp"
#include "depthot/scene.hpp"

// Two small monocular depth predictors mapping a [3,H,W] image to an [H,W]
// depth map in (min_depth, max_depth):
//   cnn_toy:  three 3x3 convolutions over the image plus coordinate channels,
//             with an optional DGR block after the first layer.
//   attn_toy: single-head self-attention over non-overlapping patches with
//             learned positional embeddings and a per-patch linear head.
namespace depthot {

enum class PredictorKind { cnn_toy, attn_toy };

inline PredictorKind parse_predictor(const std::string& s) {
  if (s == "cnn_toy") return PredictorKind::cnn_toy;
  if (s == "attn_toy") return PredictorKind::attn_toy;
  throw std::invalid_argument("unknown predictor '" + s + "' (expected cnn_toy or attn_toy)");
}

inline std::string to_string(PredictorKind k) { return k == PredictorKind::cnn_toy ? "cnn_toy" : "attn_toy"; }

struct PredictorConfig {
  PredictorKind kind = PredictorKind::cnn_toy;
  std::size_t height = 32, width = 32;
  std::size_t hidden = 8;      // conv width / token width
  std::size_t patch = 8;       // attn_toy only
  std::optional<dgr::Config> dgr;  // cnn_toy only
  double min_depth = 0.5, max_depth = 10.0;

  void validate() const {
    if (height < 5 || width < 5) throw std::invalid_argument("predictor input must be at least 5x5");
    if (hidden == 0) throw std::invalid_argument("predictor hidden width must be positive");
    if (!(max_depth > min_depth && min_depth > 0)) throw std::invalid_argument("bad predictor depth range");
    if (kind == PredictorKind::attn_toy) {
      if (patch == 0 || height % patch || width % patch) {
        throw std::invalid_argument("attn_toy patch size must divide the image size");
      }
      if (dgr) throw std::invalid_argument("the DGR block is only wired into cnn_toy");
    }
    if (dgr) {
      dgr->validate();
      if (dgr->channels != hidden) throw std::invalid_argument("DGR channels must equal the predictor hidden width");
    }
  }
  std::size_t tokens() const { return (height / patch) * (width / patch); }
};

class Predictor {
 public:
  template <class Rng>
  Predictor(PredictorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c = cfg_.hidden;
    auto w = [&](const std::string& name, Shape s, std::size_t fan_in) {
      params_.add(name, fan_in_uniform(std::move(s), fan_in, rng));
    };
    auto zero = [&](const std::string& name, Shape s) { params_.add(name, Tensor(std::move(s))); };
    if (cfg_.kind == PredictorKind::cnn_toy) {
      w("conv1.weight", {c, 5, 3, 3}, 45);
      zero("conv1.bias", {c});
      if (cfg_.dgr) dgr::add_params(params_, *cfg_.dgr, rng, "dgr.");
      w("conv2.weight", {c, c, 3, 3}, 9 * c);
      zero("conv2.bias", {c});
      w("conv3.weight", {1, c, 3, 3}, 9 * c);
      zero("conv3.bias", {1});
    } else {
      const std::size_t in = 3 * cfg_.patch * cfg_.patch, out = cfg_.patch * cfg_.patch, t = cfg_.tokens();
      w("embed.weight", {in, c}, in);
      zero("embed.bias", {1, c});
      params_.add("pos", Tensor::uniform(Shape{t, c}, -0.5, 0.5, rng));
      w("query.weight", {c, c}, c);
      w("key.weight", {c, c}, c);
      w("value.weight", {c, c}, c);
      w("head.weight", {c, out}, c);
      zero("head.bias", {1, out});
    }
  }

  const PredictorConfig& config() const { return cfg_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  /// image [3,H,W] -> depth [H,W] on the tape of `image`.
  Var apply(Var image, const BoundParams& p) const {
    const Shape expect{3, cfg_.height, cfg_.width};
    if (image.shape() != expect) detail::shape_fail("predictor input", image.shape(), expect);
    const Var logits = cfg_.kind == PredictorKind::cnn_toy ? apply_cnn(image, p) : apply_attn(image, p);
    return shift(scale(sigmoid(logits), cfg_.max_depth - cfg_.min_depth), cfg_.min_depth);
  }

  Tensor predict(const Tensor& image) const {
    Tape t;
    const BoundParams p(t, params_, false);
    return apply(t.constant(image), p).value();
  }

 private:
  Var apply_cnn(Var image, const BoundParams& p) const {
    Tape& tape = *image.tape();
    const std::size_t h = cfg_.height, w = cfg_.width;
    Tensor coords(Shape{2, h, w});
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        coords[y * w + x] = 2.0 * static_cast<double>(x) / static_cast<double>(w - 1) - 1.0;
        coords[h * w + y * w + x] = 2.0 * static_cast<double>(y) / static_cast<double>(h - 1) - 1.0;
      }
    }
    Var x = concat_channels({image, tape.constant(std::move(coords))});
    x = relu(conv2d(x, p["conv1.weight"], p["conv1.bias"], Padding::replicate));
    if (cfg_.dgr) x = dgr::forward(x, dgr::Vars::from(p, "dgr."), *cfg_.dgr);
    x = relu(conv2d(x, p["conv2.weight"], p["conv2.bias"], Padding::replicate));
    x = conv2d(x, p["conv3.weight"], p["conv3.bias"], Padding::replicate);
    return reshape(x, Shape{h, w});
  }

  Var apply_attn(Var image, const BoundParams& p) const {
    Tape& tape = *image.tape();
    const std::size_t h = cfg_.height, w = cfg_.width, ps = cfg_.patch, c = cfg_.hidden;
    const std::size_t tx_count = w / ps, t = cfg_.tokens(), pp = ps * ps;
    // Patchify: row = token, column = channel-major pixel within the patch.
    std::vector<std::size_t> to_tokens(t * 3 * pp), to_image(h * w);
    for (std::size_t tok = 0; tok < t; ++tok) {
      const std::size_t oy = (tok / tx_count) * ps, ox = (tok % tx_count) * ps;
      for (std::size_t dy = 0; dy < ps; ++dy) {
        for (std::size_t dx = 0; dx < ps; ++dx) {
          const std::size_t pix = (oy + dy) * w + ox + dx;
          for (std::size_t ch = 0; ch < 3; ++ch) to_tokens[tok * 3 * pp + ch * pp + dy * ps + dx] = ch * h * w + pix;
          to_image[pix] = tok * pp + dy * ps + dx;
        }
      }
    }
    const Var ones = tape.constant(Tensor(Shape{t, 1}, 1.0));
    const Var tokens = gather(image, std::move(to_tokens), Shape{t, 3 * pp});
    const Var e = add(add(matmul(tokens, p["embed.weight"]), matmul(ones, p["embed.bias"])), p["pos"]);
    const Var q = matmul(e, p["query.weight"]);
    const Var k = matmul(e, p["key.weight"]);
    const Var v = matmul(e, p["value.weight"]);
    const Var attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c))));
    const Var mixed = add(e, matmul(attn, v));
    const Var out = add(matmul(mixed, p["head.weight"]), matmul(ones, p["head.bias"]));
    return gather(out, std::move(to_image), Shape{h, w});
  }

  PredictorConfig cfg_;
  ParamSet params_;
};

struct PretrainOptions {
  std::size_t steps = 400;
  std::size_t batch = 4;
  double lr = 1e-2;
};

/// Fits `net` to (image, depth) pairs with Adam on the mean squared error.
/// Returns the mean training loss per step.
template <class Rng>
std::vector<double> pretrain(Predictor& net, const std::vector<Scene>& data, const PretrainOptions& opt, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("pretraining needs at least one scene");
  Adam adam({.lr = opt.lr});
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<double> curve;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tape tape;
    const BoundParams p(tape, net.params(), true);
    std::optional<Var> total;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const Scene& s = data[pick(rng)];
      const Var pred = net.apply(tape.constant(s.image), p);
      const Var l = mean(square(sub(pred, tape.constant(s.depth))));
      total = total ? add(*total, l) : l;
    }
    const Var loss = scale(*total, 1.0 / static_cast<double>(opt.batch));
    tape.backward(loss);
    curve.push_back(loss.value().item());
    adam.step(net.params(), p.grads());
  }
  return curve;
}

}  // namespace depthot
