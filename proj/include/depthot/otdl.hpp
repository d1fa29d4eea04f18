#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/ops.hpp"
#include "depthot/transport.hpp"

namespace depthot {

enum class OtSolver { exact_1d, sinkhorn, lp };

inline OtSolver parse_solver(const std::string& s) {
  if (s == "exact1d" || s == "exact_1d") return OtSolver::exact_1d;
  if (s == "sinkhorn") return OtSolver::sinkhorn;
  if (s == "lp") return OtSolver::lp;
  throw std::invalid_argument("unknown OT solver '" + s + "' (expected exact1d, sinkhorn or lp)");
}

struct OtdlConfig {
  BinGrid grid{};
  /// 0: hard histograms. > 0.5: triangular soft binning (required for gradients).
  double softness = 0.0;
  OtSolver solver = OtSolver::exact_1d;
  SinkhornOptions sinkhorn{};
};

namespace detail {

inline void check_pair(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) shape_fail("prediction and ground truth", pred.shape(), gt.shape());
  if (pred.size() == 0) throw std::invalid_argument("empty depth map");
}

}  // namespace detail

/// Full solver output for the pair of normalized depth maps.
struct OtdlSolution {
  DepthDistribution pred, gt;
  CostMatrix cost;
  TransportResult result;
  /// Set for the Sinkhorn solver.
  std::optional<SinkhornResult> sinkhorn;
};

inline OtdlSolution otdl_solve(const Tensor& pred, const Tensor& gt, const OtdlConfig& cfg) {
  detail::check_pair(pred, gt);
  OtdlSolution s{normalize(pred, cfg.grid, cfg.softness), normalize(gt, cfg.grid, cfg.softness), {}, {}, {}};
  s.cost = cost_matrix(s.pred.centers);
  switch (cfg.solver) {
    case OtSolver::exact_1d: s.result = ot_exact_1d(s.pred, s.gt); break;
    case OtSolver::lp: s.result = ot_lp(s.pred, s.gt, s.cost); break;
    case OtSolver::sinkhorn: {
      s.sinkhorn = ot_sinkhorn(s.pred, s.gt, s.cost, cfg.sinkhorn);
      s.result = {s.sinkhorn->cost, s.sinkhorn->plan};
      break;
    }
  }
  return s;
}

/// OT cost between the depth histograms of `pred` and `gt`.
inline double otdl(const Tensor& pred, const Tensor& gt, const OtdlConfig& cfg = {}) {
  return otdl_solve(pred, gt, cfg).result.cost;
}

/// Smooth OTDL: the debiased entropic transport cost
///   S(P,Q) = OT_eps(P,Q) - OT_eps(P,P)/2 - OT_eps(Q,Q)/2
/// over soft-binned histograms. S(P,P) = 0, S >= 0, and S tends to the exact
/// OT cost as eps -> 0. Its gradient comes from the dual potentials.
struct SmoothOtdl {
  double value = 0;
  Tensor grad;  // d value / d pred, shape of pred
  bool converged = true;
};

inline SmoothOtdl otdl_smooth_with_grad(const Tensor& pred, const Tensor& gt, const OtdlConfig& cfg) {
  detail::check_pair(pred, gt);
  if (cfg.softness == 0.0) {
    throw std::invalid_argument("smooth OTDL needs soft binning (softness > 0); hard histograms are not differentiable");
  }
  const DepthDistribution p = normalize(pred, cfg.grid, cfg.softness);
  const DepthDistribution q = normalize(gt, cfg.grid, cfg.softness);
  const CostMatrix m = cost_matrix(p.centers);
  const SinkhornResult pq = ot_sinkhorn(p, q, m, cfg.sinkhorn);
  const SinkhornResult pp = ot_sinkhorn(p, p, m, cfg.sinkhorn);
  const SinkhornResult qq = ot_sinkhorn(q, q, m, cfg.sinkhorn);

  SmoothOtdl out;
  out.value = pq.regularized_cost - 0.5 * pp.regularized_cost - 0.5 * qq.regularized_cost;
  out.converged = pq.converged && pp.converged && qq.converged;

  // d/dP of the floored, renormalized marginal contributes 1/(1 + B*floor);
  // the renormalization's rank-one part is constant over bins and cancels
  // against the mass-preserving soft assignment.
  const std::size_t bins = p.size();
  const double floor_scale = 1.0 / (1.0 + static_cast<double>(bins) * cfg.sinkhorn.mass_floor);
  std::vector<double> g_mass(bins);
  for (std::size_t b = 0; b < bins; ++b) g_mass[b] = floor_scale * (pq.f[b] - 0.5 * (pp.f[b] + pp.g[b]));

  out.grad = Tensor(pred.shape());
  const double unit = 1.0 / static_cast<double>(pred.size());
  std::vector<double> w, dw;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    soft_assign(pred[k], cfg.grid, cfg.softness, w, &dw);
    double s = 0;
    for (std::size_t b = 0; b < bins; ++b) s += g_mass[b] * dw[b];
    out.grad[k] = unit * s;
  }
  return out;
}

inline double otdl_smooth(const Tensor& pred, const Tensor& gt, const OtdlConfig& cfg) {
  return otdl_smooth_with_grad(pred, gt, cfg).value;
}

/// Gradient of the smooth OTDL with respect to the predicted depth map.
inline Tensor otdl_gradient(const Tensor& pred, const Tensor& gt, const OtdlConfig& cfg) {
  return otdl_smooth_with_grad(pred, gt, cfg).grad;
}

/// Smooth OTDL as a tape operation.
inline Var otdl_loss(Var pred, const Tensor& gt, const OtdlConfig& cfg) {
  detail::check_pair(pred.value(), gt);
  auto cached = std::make_shared<Tensor>();
  return pred.tape()->record(
      {pred},
      [gt, cfg, cached](detail::Inputs in) {
        SmoothOtdl s = otdl_smooth_with_grad(*in[0], gt, cfg);
        *cached = std::move(s.grad);
        return Tensor::scalar(s.value);
      },
      [cached](detail::Inputs, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < cached->size(); ++i) gin[0][i] += g[0] * (*cached)[i];
      });
}

/// (1/N) sum (p - q)^2
inline double mse(const Tensor& pred, const Tensor& gt) {
  detail::check_pair(pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

inline Var mse(Var pred, Var gt) {
  detail::check_pair(pred.value(), gt.value());
  return mean(square(sub(pred, gt)));
}

/// MSE + lambda * OTDL on plain tensors, using the configured solver.
inline double combined_loss(const Tensor& pred, const Tensor& gt, double lambda_otdl, const OtdlConfig& cfg = {}) {
  if (lambda_otdl < 0) throw std::invalid_argument("lambda_otdl must be nonnegative");
  const double base = mse(pred, gt);
  if (lambda_otdl == 0.0) return base;
  return base + lambda_otdl * otdl(pred, gt, cfg);
}

/// MSE + lambda * smooth OTDL on the tape.
inline Var combined_loss(Var pred, const Tensor& gt, double lambda_otdl, const OtdlConfig& cfg) {
  if (lambda_otdl < 0) throw std::invalid_argument("lambda_otdl must be nonnegative");
  const Var base = mse(pred, pred.tape()->constant(gt));
  if (lambda_otdl == 0.0) return base;
  return add(base, scale(otdl_loss(pred, gt, cfg), lambda_otdl));
}

}  // namespace depthot
