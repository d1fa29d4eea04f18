#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/losses.hpp"
#include "depthot/models.hpp"
#include "depthot/otdl.hpp"
#include "depthot/scene.hpp"

// Loss ablation on synthetic scenes: the same initial network and batch
// sequence trained once per loss configuration.
namespace depthot {

enum class LossKind { mse, otdl, both };

inline LossKind parse_loss(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "otdl") return LossKind::otdl;
  if (s == "both") return LossKind::both;
  throw std::invalid_argument("unknown loss '" + s + "' (expected mse, otdl or both)");
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::otdl: return "otdl";
    case LossKind::both: return "both";
  }
  return {};
}

inline OtdlConfig default_training_otdl() {
  OtdlConfig cfg;
  cfg.grid = {0.0, 10.0, 32};
  cfg.softness = 1.0;
  cfg.solver = OtSolver::sinkhorn;
  return cfg;
}

struct ToyTrainConfig {
  bool with_dgr = false;
  std::vector<LossKind> losses{LossKind::mse, LossKind::otdl, LossKind::both};
  std::size_t steps = 200;
  std::size_t batch = 4;
  std::size_t train_scenes = 16;
  std::size_t eval_scenes = 8;
  std::size_t image_size = 32;
  double lr = 1e-2;
  double lambda_otdl = 1.0;
  OtdlConfig otdl = default_training_otdl();
  std::uint64_t seed = 42;
};

struct ToyTrainRun {
  LossKind loss = LossKind::mse;
  std::vector<double> curve;  // batch loss per step
  double initial_loss = 0;    // training-set loss before the first step
  double final_loss = 0;      // training-set loss after the last step
  MetricReport metrics;       // held-out scenes
  double ot_distance = 0;     // held-out, exact OT between hard depth histograms
  double train_ot_distance = 0;  // same, on the training scenes

  static constexpr const char* kCsvHeader =
      "loss,initial_loss,final_loss,ot_distance,train_ot_distance,abs_rel,rms,log10,delta1,delta2,delta3,rmse";
  std::string csv_row() const {
    return to_string(loss) + ',' + csv_join({initial_loss, final_loss, ot_distance, train_ot_distance}) + ',' +
           metrics.csv_row();
  }
};

namespace detail {

inline Var training_loss(LossKind kind, Var pred, const Tensor& gt, const ToyTrainConfig& cfg) {
  switch (kind) {
    case LossKind::mse: return mse(pred, pred.tape()->constant(gt));
    case LossKind::otdl: return otdl_loss(pred, gt, cfg.otdl);
    case LossKind::both: return combined_loss(pred, gt, cfg.lambda_otdl, cfg.otdl);
  }
  throw std::logic_error("unreachable");
}

inline double dataset_loss(LossKind kind, const Predictor& net, const std::vector<Scene>& data,
                           const ToyTrainConfig& cfg) {
  double total = 0;
  for (const Scene& s : data) {
    Tape t;
    const BoundParams p(t, net.params(), false);
    total += training_loss(kind, net.apply(t.constant(s.image), p), s.depth, cfg).value().item();
  }
  return total / static_cast<double>(data.size());
}

/// All held-out pixels as one flat tensor.
inline Tensor flatten(const std::vector<Tensor>& maps) {
  std::vector<double> v;
  for (const Tensor& m : maps) v.insert(v.end(), m.data().begin(), m.data().end());
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

}  // namespace detail

inline PredictorConfig toy_train_predictor(const ToyTrainConfig& cfg) {
  PredictorConfig pc;
  pc.kind = PredictorKind::cnn_toy;
  pc.height = pc.width = cfg.image_size;
  if (cfg.with_dgr) pc.dgr = dgr::Config{pc.hidden, 4, 4};
  return pc;
}

inline std::vector<ToyTrainRun> toy_train(const ToyTrainConfig& cfg) {
  if (cfg.losses.empty()) throw std::invalid_argument("toytrain needs at least one loss");
  if (cfg.batch == 0 || cfg.train_scenes == 0 || cfg.eval_scenes == 0) {
    throw std::invalid_argument("toytrain batch and scene counts must be positive");
  }
  if (!(cfg.lambda_otdl >= 0)) throw std::invalid_argument("lambda_otdl must be nonnegative");
  std::mt19937_64 data_rng(cfg.seed);
  SceneOptions so;
  so.height = so.width = cfg.image_size;
  const std::vector<Scene> train = make_scenes(cfg.train_scenes, so, data_rng);
  const std::vector<Scene> held_out = make_scenes(cfg.eval_scenes, so, data_rng);
  std::mt19937_64 init_rng(cfg.seed + 1);
  const Predictor initial(toy_train_predictor(cfg), init_rng);

  OtdlConfig eval_ot = cfg.otdl;
  eval_ot.softness = 0.0;
  eval_ot.solver = OtSolver::exact_1d;

  std::vector<ToyTrainRun> runs;
  for (LossKind kind : cfg.losses) {
    Predictor net = initial;
    Adam adam({.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-6});
    std::mt19937_64 batch_rng(cfg.seed + 2);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    ToyTrainRun run;
    run.loss = kind;
    run.initial_loss = detail::dataset_loss(kind, net, train, cfg);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      Tape tape;
      const BoundParams p(tape, net.params(), true);
      std::optional<Var> total;
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const Scene& s = train[pick(batch_rng)];
        const Var l = detail::training_loss(kind, net.apply(tape.constant(s.image), p), s.depth, cfg);
        total = total ? add(*total, l) : l;
      }
      const Var loss = scale(*total, 1.0 / static_cast<double>(cfg.batch));
      const double v = loss.value().item();
      if (!std::isfinite(v)) throw std::runtime_error("training loss diverged at step " + std::to_string(step));
      run.curve.push_back(v);
      tape.backward(loss);
      adam.step(net.params(), p.grads());
    }
    run.final_loss = detail::dataset_loss(kind, net, train, cfg);

    std::vector<Tensor> preds, gts;
    for (const Scene& s : held_out) {
      preds.push_back(net.predict(s.image));
      gts.push_back(s.depth);
      run.ot_distance += otdl(preds.back(), s.depth, eval_ot);
    }
    run.ot_distance /= static_cast<double>(held_out.size());
    for (const Scene& s : train) run.train_ot_distance += otdl(net.predict(s.image), s.depth, eval_ot);
    run.train_ot_distance /= static_cast<double>(train.size());
    run.metrics = evaluate(detail::flatten(preds), detail::flatten(gts));
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace depthot
