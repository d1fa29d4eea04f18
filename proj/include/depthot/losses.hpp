#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/io.hpp"
#include "depthot/ops.hpp"

namespace depthot {

/// Terms of the depth-training loss; total is their sum.
struct LossBreakdown {
  double depth_term = 0;
  double grad_term = 0;
  double normal_term = 0;
  double total = 0;
};

/// Tape form of LossBreakdown.
struct LossTerms {
  Var depth_term, grad_term, normal_term, total;
};

namespace detail {

inline Tensor central_x_kernel() { return Tensor(Shape{1, 3}, {-0.5, 0.0, 0.5}); }
inline Tensor central_y_kernel() { return Tensor(Shape{3, 1}, {-0.5, 0.0, 0.5}); }

/// ln(|x| + 0.5)
inline Var log_penalty(Var x) { return ln(shift(abs(x), 0.5)); }

inline Tensor full_mask(const Shape& s) { return Tensor(s, 1.0); }

/// Count of valid pixels; validates that the mask is 0/1 and matches `s`.
inline std::size_t count_valid(const Tensor& mask, const Shape& s) {
  if (mask.shape() != s) shape_fail("validity mask", mask.shape(), s);
  std::size_t n = 0;
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("validity mask must be 0/1");
    n += v == 1.0;
  }
  if (n == 0) throw std::invalid_argument("no valid pixels");
  return n;
}

/// Mean of x over pixels where mask is 1. The running-mean form returns a
/// constant input exactly, which a sum-then-divide does not.
inline Var masked_mean(Var x, const Tensor& mask, std::size_t n) {
  const double inv_n = 1.0 / static_cast<double>(n);
  return x.tape()->record(
      {x},
      [mask](Inputs in) {
        double m = 0;
        std::size_t k = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) {
          if (mask[i] == 1.0) m += ((*in[0])[i] - m) / static_cast<double>(++k);
        }
        return Tensor::scalar(m);
      },
      [mask, inv_n](Inputs, const Tensor&, GradOut g, GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < mask.size(); ++i) gin[0][i] += mask[i] * inv_n * g[0];
      });
}

}  // namespace detail

/// Depth-training loss on [H,W] maps with e = pred - gt:
///   depth  = mean F(|e|)
///   grad   = mean F(|dx e|) + F(|dy e|)
///   normal = mean 1 - cos(n_pred, n_gt),  n = (-dx d, -dy d, 1) / |.|
/// with F(x) = ln(x + 0.5), central first differences (replicate border) and
/// means over valid pixels only.
inline LossTerms composite_loss(Var pred, Var gt, const std::optional<Tensor>& mask = std::nullopt) {
  detail::common_tape({pred, gt});
  if (pred.shape() != gt.shape() || pred.shape().size() != 2) {
    detail::shape_fail("composite_loss expects matching [H,W] maps", pred.shape(), gt.shape());
  }
  const Tensor valid = mask ? *mask : detail::full_mask(pred.shape());
  const std::size_t n = detail::count_valid(valid, pred.shape());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i] == 1.0 && !(gt.value()[i] > 0)) throw std::domain_error("ground truth must be positive where valid");
  }
  const Tensor kx = detail::central_x_kernel(), ky = detail::central_y_kernel();

  const Var e = sub(pred, gt);
  const Var depth = detail::masked_mean(detail::log_penalty(e), valid, n);

  const Var ex = conv2d_depthwise(e, kx, Padding::replicate);
  const Var ey = conv2d_depthwise(e, ky, Padding::replicate);
  const Var grad = detail::masked_mean(add(detail::log_penalty(ex), detail::log_penalty(ey)), valid, n);

  const Var px = conv2d_depthwise(pred, kx, Padding::replicate);
  const Var py = conv2d_depthwise(pred, ky, Padding::replicate);
  const Var gx = conv2d_depthwise(gt, kx, Padding::replicate);
  const Var gy = conv2d_depthwise(gt, ky, Padding::replicate);
  const Var pn2 = shift(add(square(px), square(py)), 1.0);
  const Var gn2 = shift(add(square(gx), square(gy)), 1.0);
  const Var dot = shift(add(mul(px, gx), mul(py, gy)), 1.0);
  const Var cosine = div(dot, sqrt(mul(pn2, gn2)));
  const Var normal = detail::masked_mean(shift(scale(cosine, -1.0), 1.0), valid, n);

  return {depth, grad, normal, add(add(depth, grad), normal)};
}

inline LossBreakdown composite_loss(const Tensor& pred, const Tensor& gt,
                                    const std::optional<Tensor>& mask = std::nullopt) {
  Tape t;
  const LossTerms terms = composite_loss(t.constant(pred), t.constant(gt), mask);
  return {terms.depth_term.value().item(), terms.grad_term.value().item(), terms.normal_term.value().item(),
          terms.total.value().item()};
}

/// Scale-invariant log loss: (1/n) sum d^2 - (1/(2 n^2)) (sum d)^2, d = ln p - ln g.
inline Var si_loss(Var pred, Var gt) {
  detail::common_tape({pred, gt});
  if (pred.shape() != gt.shape()) detail::shape_fail("si_loss", pred.shape(), gt.shape());
  const double n = static_cast<double>(pred.value().size());
  const Var d = sub(ln(pred), ln(gt));
  return sub(scale(sum(square(d)), 1.0 / n), scale(square(sum(d)), 1.0 / (2.0 * n * n)));
}

inline double si_loss(const Tensor& pred, const Tensor& gt) {
  return detail::eval2(pred, gt, [](Var p, Var g) { return si_loss(p, g); }).item();
}

/// Standard depth-benchmark metrics.
struct MetricReport {
  double abs_rel = 0, rms = 0, log10 = 0, delta1 = 0, delta2 = 0, delta3 = 0, rmse = 0;

  static constexpr const char* kCsvHeader = "abs_rel,rms,log10,delta1,delta2,delta3,rmse";

  std::vector<double> values() const { return {abs_rel, rms, log10, delta1, delta2, delta3, rmse}; }
  std::string csv_row() const { return csv_join(values()); }
  std::string to_csv() const { return std::string(kCsvHeader) + "\n" + csv_row() + "\n"; }
};

/// Metrics over pixels where `mask` is 1 (all pixels when absent). The
/// delta thresholds are inclusive: max(p/g, g/p) <= 1.25^k.
inline MetricReport evaluate(const Tensor& pred, const Tensor& gt, const std::optional<Tensor>& mask = std::nullopt) {
  if (pred.shape() != gt.shape()) detail::shape_fail("evaluate", pred.shape(), gt.shape());
  if (mask && mask->shape() != pred.shape()) detail::shape_fail("evaluate mask", mask->shape(), pred.shape());
  MetricReport r;
  std::size_t n = 0;
  double se = 0;
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask && (*mask)[i] == 0.0) continue;
    const double p = pred[i], g = gt[i];
    if (!(g > 0)) throw std::domain_error("ground truth depth must be positive under the mask");
    if (!(p > 0)) throw std::domain_error("predicted depth must be positive under the mask");
    ++n;
    r.abs_rel += std::abs(p - g) / g;
    se += (p - g) * (p - g);
    r.log10 += std::abs(std::log10(p) - std::log10(g));
    // p <= t*g and g <= t*p  <=>  max(p/g, g/p) <= t, without the rounding of a quotient.
    r.delta1 += (p <= t1 * g && g <= t1 * p);
    r.delta2 += (p <= t2 * g && g <= t2 * p);
    r.delta3 += (p <= t3 * g && g <= t3 * p);
  }
  if (n == 0) throw std::invalid_argument("evaluate: mask selects no pixels");
  const double inv = 1.0 / static_cast<double>(n);
  r.abs_rel *= inv;
  r.rms = std::sqrt(se * inv);
  r.log10 *= inv;
  r.delta1 *= inv;
  r.delta2 *= inv;
  r.delta3 *= inv;
  r.rmse = r.rms;
  return r;
}

/// Root-mean-square difference of two equally shaped maps.
inline double rmse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_fail("rmse", a.shape(), b.shape());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace depthot
