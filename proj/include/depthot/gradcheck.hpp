#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/dgr.hpp"
#include "depthot/io.hpp"
#include "depthot/losses.hpp"
#include "depthot/mask.hpp"
#include "depthot/models.hpp"
#include "depthot/ops.hpp"
#include "depthot/otdl.hpp"
#include "depthot/stencil.hpp"

// Finite-difference audit of the reverse-mode gradients. Each check builds a
// graph on random leaves, reduces its output to a scalar with random
// weights, and compares the analytic directional derivative along a random
// direction with the central difference obtained by replaying the tape.
namespace depthot::gradcheck {

struct Row {
  std::string name;
  double analytic = 0, numeric = 0, rel_err = 0;
  double tolerance = 0;
  bool pass() const { return rel_err < tolerance; }
};

inline constexpr const char* kCsvHeader = "name,analytic,numeric,rel_err";

inline std::string to_csv(const std::vector<Row>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const Row& r : rows) out += r.name + ',' + csv_join({r.analytic, r.numeric, r.rel_err}) + '\n';
  return out;
}

enum class Scope { tensor, dgr, losses, otdl, mask, all };

inline Scope parse_scope(const std::string& s) {
  if (s == "tensor") return Scope::tensor;
  if (s == "dgr") return Scope::dgr;
  if (s == "losses") return Scope::losses;
  if (s == "otdl") return Scope::otdl;
  if (s == "mask") return Scope::mask;
  if (s == "all") return Scope::all;
  throw std::invalid_argument("unknown gradcheck scope '" + s + "' (expected tensor, dgr, losses, otdl, mask or all)");
}

struct Options {
  std::size_t instances = 20;
  double step = 1e-6;
  double tolerance = 1e-5;
  /// Sinkhorn-backed checks: the solver's stopping error bounds how small
  /// the difference step may be.
  double otdl_step = 1e-4;
  double otdl_tolerance = 1e-3;
  std::uint64_t seed = 42;
};

using Rng = std::mt19937_64;

/// Relative disagreement of one-sided slopes, per unit step, treated as a
/// kink. Smooth functions disagree by about step * |f''| / |f'|.
inline constexpr double kKinkRatio = 100.0;
using Build = std::function<Var(const std::vector<Var>& leaves)>;

/// |a - n| / max(|a|, |n|); 0 when both vanish.
inline double relative_error(double a, double n) {
  const double scale = std::max(std::abs(a), std::abs(n));
  return scale == 0 ? 0.0 : std::abs(a - n) / scale;
}

/// Directional check of `build` at `inputs`. Returns nothing when the
/// one-sided slopes disagree, i.e. a kink (relu, abs) lies within the step
/// and the central difference is not an estimate of any derivative.
inline std::optional<Row> check(std::string name, const std::vector<Tensor>& inputs, const Build& build, Rng& rng, double step,
                 double tolerance) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.param(t));
  const Var out = build(leaves);
  const Var loss = sum(mul(out, tape.constant(Tensor::uniform(out.shape(), -1.0, 1.0, rng))));
  tape.backward(loss);

  std::vector<Tensor> dirs;
  double analytic = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    dirs.push_back(Tensor::uniform(inputs[i].shape(), -1.0, 1.0, rng));
    const Tensor g = tape.grad(leaves[i]);
    for (std::size_t k = 0; k < g.size(); ++k) analytic += g[k] * dirs[i][k];
  }
  auto at = [&](double t) {
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Tensor x = inputs[i];
      for (std::size_t k = 0; k < x.size(); ++k) x[k] += t * dirs[i][k];
      tape.set_value(leaves[i], std::move(x));
    }
    tape.replay();
    return loss.value().item();
  };
  const double fp = at(step), fm = at(-step), f0 = at(0.0);
  const double forward = (fp - f0) / step, backward = (f0 - fm) / step;
  if (relative_error(forward, backward) > kKinkRatio * step) return std::nullopt;
  const double numeric = (fp - fm) / (2.0 * step);
  return Row{std::move(name), analytic, numeric, relative_error(analytic, numeric), tolerance};
}

struct Report {
  std::vector<Row> rows;
  std::size_t skipped = 0;  // instances redrawn because they sat on a kink

  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.pass(); });
  }
  void append(Report other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
    skipped += other.skipped;
  }
};

namespace detail {

inline Tensor uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(s), lo, hi, rng);
}

/// Values with magnitude in [lo, hi] and random sign.
inline Tensor away_from_zero(Shape s, Rng& rng, double lo = 0.5, double hi = 2.0) {
  Tensor t = Tensor::uniform(std::move(s), lo, hi, rng);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.data()) v = flip(rng) ? -v : v;
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

class Suite {
 public:
  Suite(const Options& opt, std::uint64_t salt) : opt_(opt) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(salt)};
    rng_.seed(seq);
  }

  Rng& rng() { return rng_; }

  /// Runs `instances` checks; `make` draws fresh inputs and a graph builder.
  /// Instances landing on a kink are redrawn (at most as many times again).
  void run(const std::string& name, const std::function<std::pair<std::vector<Tensor>, Build>(Rng&)>& make,
           bool sinkhorn = false) {
    std::size_t accepted = 0;
    for (std::size_t attempt = 0; accepted < opt_.instances; ++attempt) {
      if (attempt >= 2 * opt_.instances) throw std::runtime_error(name + ": too many non-smooth instances");
      auto [inputs, build] = make(rng_);
      auto row = check(name + "#" + std::to_string(accepted), inputs, build, rng_,
                       sinkhorn ? opt_.otdl_step : opt_.step, sinkhorn ? opt_.otdl_tolerance : opt_.tolerance);
      if (!row) {
        ++report_.skipped;
        continue;
      }
      report_.rows.push_back(std::move(*row));
      ++accepted;
    }
  }

  Report take() { return std::move(report_); }

 private:
  Options opt_;
  Rng rng_;
  Report report_;
};

using Case = std::pair<std::vector<Tensor>, Build>;

inline Shape random_chw(Rng& rng, std::size_t min_extent = 3) {
  return {pick(rng, 1, 3), pick(rng, min_extent, min_extent + 3), pick(rng, min_extent, min_extent + 3)};
}

}  // namespace detail

inline Report tensor_suite(const Options& opt) {
  using namespace detail;
  Suite s(opt, 1);
  auto unary = [&](const std::string& name, std::function<Var(Var)> f, bool positive = false) {
    s.run(name, [f, positive](Rng& r) -> Case {
      Shape sh = random_chw(r, 2);
      return {{positive ? uniform(sh, r, 0.5, 2.0) : uniform(sh, r)}, [f](const auto& v) { return f(v[0]); }};
    });
  };
  auto binary = [&](const std::string& name, std::function<Var(Var, Var)> f, bool nonzero_b = false) {
    s.run(name, [f, nonzero_b](Rng& r) -> Case {
      Shape sh = random_chw(r, 2);
      return {{uniform(sh, r), nonzero_b ? away_from_zero(sh, r) : uniform(sh, r)},
              [f](const auto& v) { return f(v[0], v[1]); }};
    });
  };

  binary("add", [](Var a, Var b) { return add(a, b); });
  binary("sub", [](Var a, Var b) { return sub(a, b); });
  binary("mul", [](Var a, Var b) { return mul(a, b); });
  binary("div", [](Var a, Var b) { return div(a, b); }, true);
  s.run("mul.channel_broadcast", [](Rng& r) -> Case {
    Shape sh = random_chw(r, 2);
    return {{uniform(sh, r), uniform({sh[0]}, r)}, [](const auto& v) { return mul(v[0], v[1]); }};
  });
  unary("relu", [](Var a) { return relu(a); });
  unary("sigmoid", [](Var a) { return sigmoid(scale(a, 3.0)); });
  unary("ln", [](Var a) { return ln(a); }, true);
  unary("abs", [](Var a) { return abs(a); });
  unary("exp", [](Var a) { return exp(a); });
  unary("sqrt", [](Var a) { return sqrt(a); }, true);
  unary("square", [](Var a) { return square(a); });
  unary("scale", [](Var a) { return scale(a, -1.7); });
  unary("shift", [](Var a) { return shift(square(a), 0.3); });
  unary("sum", [](Var a) { return sum(square(a)); });
  unary("mean", [](Var a) { return mean(square(a)); });
  unary("gap", [](Var a) { return gap(square(a)); });
  unary("reshape", [](Var a) {
    const Shape& sh = a.shape();
    return square(reshape(a, Shape{sh[0] * sh[1], sh[2]}));
  });
  unary("transpose", [](Var a) {
    const Shape& sh = a.shape();
    return square(transpose(reshape(a, Shape{sh[0] * sh[1], sh[2]})));
  });
  unary("softmax_rows", [](Var a) {
    const Shape& sh = a.shape();
    return softmax_rows(scale(reshape(a, Shape{sh[0] * sh[1], sh[2]}), 2.0));
  });
  s.run("gather", [](Rng& r) -> Case {
    Shape sh = random_chw(r, 2);
    std::vector<std::size_t> idx(2 * numel(sh));
    for (auto& i : idx) i = pick(r, 0, numel(sh) - 1);
    return {{uniform(sh, r)}, [idx](const auto& v) {
              return square(gather(v[0], idx, Shape{idx.size()}));
            }};
  });
  for (Padding pad : {Padding::replicate, Padding::zero}) {
    const std::string tag = pad == Padding::replicate ? "replicate" : "zero";
    s.run("conv2d." + tag, [pad](Rng& r) -> Case {
      Shape sh = random_chw(r, 3);
      const std::size_t co = pick(r, 1, 3), kh = 2 * pick(r, 0, 1) + 1, kw = 2 * pick(r, 0, 1) + 1;
      return {{uniform(sh, r), uniform({co, sh[0], kh, kw}, r), uniform({co}, r)},
              [pad](const auto& v) { return conv2d(v[0], v[1], v[2], pad); }};
    });
    s.run("conv2d_depthwise." + tag, [pad](Rng& r) -> Case {
      Shape sh = random_chw(r, 5);
      const Tensor k = uniform({3, 5}, r);
      return {{uniform(sh, r)}, [pad, k](const auto& v) { return conv2d_depthwise(v[0], k, pad); }};
    });
  }
  s.run("fully_connected", [](Rng& r) -> Case {
    const std::size_t n = pick(r, 1, 6), m = pick(r, 1, 6);
    return {{uniform({n}, r), uniform({m, n}, r), uniform({m}, r)},
            [](const auto& v) { return fully_connected(v[0], v[1], v[2]); }};
  });
  s.run("concat_channels", [](Rng& r) -> Case {
    const std::size_t h = pick(r, 2, 5), w = pick(r, 2, 5);
    return {{uniform({pick(r, 1, 3), h, w}, r), uniform({h, w}, r)},
            [](const auto& v) { return square(concat_channels({v[0], v[1]})); }};
  });
  s.run("matmul", [](Rng& r) -> Case {
    const std::size_t m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
    return {{uniform({m, k}, r), uniform({k, n}, r)}, [](const auto& v) { return matmul(v[0], v[1]); }};
  });
  s.run("pixel_outer", [](Rng& r) -> Case {
    Shape sh = random_chw(r, 2);
    return {{uniform(sh, r), uniform(sh, r)}, [](const auto& v) { return pixel_outer(v[0], v[1]); }};
  });
  s.run("laplacian", [](Rng& r) -> Case {
    return {{uniform(random_chw(r, 3), r)}, [](const auto& v) { return laplacian(v[0]); }};
  });
  s.run("third_order", [](Rng& r) -> Case {
    return {{uniform(random_chw(r, 5), r)}, [](const auto& v) { return third_order(v[0]); }};
  });
  s.run("composite_graph", [](Rng& r) -> Case {
    Shape sh = random_chw(r, 3);
    return {{uniform(sh, r), uniform({2, sh[0], 3, 3}, r)}, [](const auto& v) {
              const Var c = conv2d(sigmoid(v[0]), v[1], Padding::replicate);
              return mul(exp(scale(c, 0.5)), relu(shift(c, 0.1)));
            }};
  });
  return s.take();
}

inline Report dgr_suite(const Options& opt) {
  using namespace detail;
  Suite s(opt, 2);
  // Parameter tensors become leaves after the feature map.
  auto make = [](Rng& r, bool residual) {
    dgr::Config cfg{pick(r, 1, 3), 1, 0, residual};
    cfg.reduction_ratio = cfg.merged() % 3 == 0 && pick(r, 0, 1) ? 3 : 1;
    cfg.interaction_rank = pick(r, 1, 3);
    const Shape sh{cfg.channels, pick(r, 5, 7), pick(r, 5, 7)};
    ParamSet p = dgr::make_params(cfg, r);
    std::vector<Tensor> inputs{uniform(sh, r)};
    for (std::size_t i = 0; i < p.size(); ++i) {
      // Nonzero biases so every gradient path is exercised.
      inputs.push_back(p.name(i).ends_with(".bias") ? uniform(p.tensor(i).shape(), r, -0.5, 0.5) : p.tensor(i));
    }
    return std::tuple{cfg, inputs, p};
  };
  auto bind = [](const std::vector<Var>& v) {
    return dgr::Vars{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
  };
  s.run("dgr.merge", [](Rng& r) -> Case {
    return {{uniform(random_chw(r, 5), r)}, [](const auto& v) { return dgr::merge(v[0]); }};
  });
  s.run("dgr.channel_weights", [&](Rng& r) -> Case {
    auto [cfg, inputs, p] = make(r, false);
    return {inputs, [bind](const auto& v) { return dgr::channel_weights(dgr::merge(v[0]), bind(v)); }};
  });
  s.run("dgr.spatial_refine", [&](Rng& r) -> Case {
    auto [cfg, inputs, p] = make(r, false);
    return {inputs, [bind](const auto& v) {
              const Var m = dgr::merge(v[0]);
              return dgr::spatial_refine(m, dgr::channel_weights(m, bind(v)), bind(v));
            }};
  });
  s.run("dgr.interact", [&](Rng& r) -> Case {
    auto [cfg, inputs, p] = make(r, false);
    const Shape sh{cfg.merged(), inputs[0].shape()[1], inputs[0].shape()[2]};
    inputs.push_back(uniform(sh, r));
    return {inputs, [bind](const auto& v) { return dgr::interact(v[11], dgr::merge(v[0]), bind(v)); }};
  });
  for (bool residual : {false, true}) {
    s.run(residual ? "dgr.forward.residual" : "dgr.forward", [&, residual](Rng& r) -> Case {
      auto [cfg, inputs, p] = make(r, residual);
      return {inputs, [bind, cfg](const auto& v) { return dgr::forward(v[0], bind(v), cfg); }};
    });
  }
  return s.take();
}

inline Report losses_suite(const Options& opt) {
  using namespace detail;
  Suite s(opt, 3);
  auto maps = [](Rng& r) {
    const Shape sh{pick(r, 3, 7), pick(r, 3, 7)};
    return std::pair{uniform(sh, r, 0.5, 4.0), uniform(sh, r, 0.5, 4.0)};
  };
  const std::vector<std::pair<std::string, Var LossTerms::*>> terms{
      {"composite.depth", &LossTerms::depth_term},
      {"composite.grad", &LossTerms::grad_term},
      {"composite.normal", &LossTerms::normal_term},
      {"composite.total", &LossTerms::total}};
  for (const auto& [name, member] : terms) {
    s.run(name, [&, member](Rng& r) -> Case {
      auto [p, g] = maps(r);
      return {{p, g}, [member](const auto& v) { return composite_loss(v[0], v[1]).*member; }};
    });
  }
  s.run("composite.masked", [&](Rng& r) -> Case {
    auto [p, g] = maps(r);
    Tensor valid(p.shape(), 1.0);
    for (double& m : valid.data()) m = pick(r, 0, 3) ? 1.0 : 0.0;
    valid[0] = 1.0;
    return {{p, g}, [valid](const auto& v) { return composite_loss(v[0], v[1], valid).total; }};
  });
  s.run("si_loss", [&](Rng& r) -> Case {
    auto [p, g] = maps(r);
    return {{p, g}, [](const auto& v) { return si_loss(v[0], v[1]); }};
  });
  s.run("mse", [&](Rng& r) -> Case {
    auto [p, g] = maps(r);
    return {{p, g}, [](const auto& v) { return mse(v[0], v[1]); }};
  });
  return s.take();
}

/// Configuration used for the Sinkhorn-backed checks.
inline OtdlConfig gradcheck_otdl_config() {
  OtdlConfig cfg;
  cfg.grid = {0.0, 8.0, 16};
  cfg.softness = 1.0;
  cfg.solver = OtSolver::sinkhorn;
  cfg.sinkhorn.epsilon_scale = 1e-2;
  cfg.sinkhorn.tol = 1e-13;
  cfg.sinkhorn.max_iter = 200000;
  return cfg;
}

inline Report otdl_suite(const Options& opt) {
  using namespace detail;
  Suite s(opt, 4);
  const OtdlConfig cfg = gradcheck_otdl_config();
  auto maps = [](Rng& r) {
    const Shape sh{pick(r, 3, 6), pick(r, 3, 6)};
    return std::pair{uniform(sh, r, 0.5, 7.5), uniform(sh, r, 0.5, 7.5)};
  };
  s.run("otdl.smooth", [&](Rng& r) -> Case {
    auto [p, g] = maps(r);
    return {{p}, [g, cfg](const auto& v) { return otdl_loss(v[0], g, cfg); }};
  }, true);
  s.run("otdl.combined", [&](Rng& r) -> Case {
    auto [p, g] = maps(r);
    return {{p}, [g, cfg](const auto& v) { return combined_loss(v[0], g, 1.0, cfg); }};
  }, true);
  return s.take();
}

inline Report mask_suite(const Options& opt) {
  using namespace detail;
  Suite s(opt, 5);
  const std::size_t side = 16;
  auto predictor = [side](Rng& r, PredictorKind kind, bool with_dgr) {
    PredictorConfig pc;
    pc.kind = kind;
    pc.height = pc.width = side;
    pc.hidden = 4;
    if (with_dgr) pc.dgr = dgr::Config{4, 3, 2};
    return Predictor(pc, r);
  };
  struct Variant {
    std::string name;
    PredictorKind kind;
    bool with_dgr;
    MaskMode mode;
  };
  const std::vector<Variant> variants{{"mask.objective.cnn_toy", PredictorKind::cnn_toy, false, MaskMode::network},
                                      {"mask.objective.attn_toy", PredictorKind::attn_toy, false, MaskMode::network},
                                      {"mask.objective.free", PredictorKind::cnn_toy, false, MaskMode::free}};
  for (const Variant& var : variants) {
    s.run(var.name, [&, var](Rng& r) -> Case {
      auto net = std::make_shared<Predictor>(predictor(r, var.kind, var.with_dgr));
      MaskConfig mc;
      mc.mode = var.mode;
      mc.hidden = 4;
      mc.open_bias = 0.5;
      auto state = std::make_shared<MaskState>(init_mask(side, side, mc, r));
      state->lambda = std::uniform_real_distribution<double>(0.0, 6.0)(r);
      const Tensor image = uniform({3, side, side}, r, -2.0, 2.0);
      const Tensor target = uniform({side, side}, r, 1.0, 8.0);
      std::vector<Tensor> inputs;
      for (std::size_t i = 0; i < state->g_params.size(); ++i) inputs.push_back(state->g_params.tensor(i));
      return {inputs, [net, state, image, target](const std::vector<Var>& v) {
                Tape& tape = *v[0].tape();
                const BoundParams g = BoundParams::wrap(state->g_params, v);
                return mask_objective(*state, g, *net, tape.constant(image), target).total;
              }};
    });
  }
  for (auto [name, kind, with_dgr] : {std::tuple{"predictor.cnn_toy", PredictorKind::cnn_toy, false},
                                      std::tuple{"predictor.cnn_toy.dgr", PredictorKind::cnn_toy, true},
                                      std::tuple{"predictor.attn_toy", PredictorKind::attn_toy, false}}) {
    s.run(name, [&, kind, with_dgr](Rng& r) -> Case {
      auto net = std::make_shared<Predictor>(predictor(r, kind, with_dgr));
      std::vector<Tensor> inputs{uniform({3, side, side}, r, -2.0, 2.0)};
      for (std::size_t i = 0; i < net->params().size(); ++i) inputs.push_back(net->params().tensor(i));
      return {inputs, [net](const std::vector<Var>& v) {
                const BoundParams p = BoundParams::wrap(net->params(), {v.begin() + 1, v.end()});
                return net->apply(v[0], p);
              }};
    });
  }
  return s.take();
}

inline Report run(Scope scope, const Options& opt = {}) {
  Report r;
  if (scope == Scope::tensor || scope == Scope::all) r.append(tensor_suite(opt));
  if (scope == Scope::dgr || scope == Scope::all) r.append(dgr_suite(opt));
  if (scope == Scope::losses || scope == Scope::all) r.append(losses_suite(opt));
  if (scope == Scope::otdl || scope == Scope::all) r.append(otdl_suite(opt));
  if (scope == Scope::mask || scope == Scope::all) r.append(mask_suite(opt));
  return r;
}

}  // namespace depthot::gradcheck
