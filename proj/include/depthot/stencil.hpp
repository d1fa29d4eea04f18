#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "depthot/ops.hpp"
#include "depthot/tensor.hpp"

namespace depthot {

/// Fixed-coefficient 2D differential operator. Applied as a correlation:
/// out(y,x) = normalization * sum_{dy,dx} c(dy,dx) f(y+dy, x+dx).
struct Stencil {
  Tensor coefficients;  // [kh,kw], odd extents
  double normalization = 1.0;

  Tensor kernel() const {
    Tensor k = coefficients;
    for (double& v : k.data()) v *= normalization;
    return k;
  }
  std::size_t radius_y() const { return coefficients.extent(0) / 2; }
  std::size_t radius_x() const { return coefficients.extent(1) / 2; }
};

/// 5-point Laplacian [[0,1,0],[1,-4,1],[0,1,0]].
inline Stencil laplacian_stencil() {
  return {Tensor(Shape{3, 3}, {0, 1, 0, 1, -4, 1, 0, 1, 0}), 1.0};
}

/// Central third difference along x, taps at offsets -2..2: (-1/2, 1, 0, -1, 1/2).
inline Stencil third_order_x_stencil() { return {Tensor(Shape{1, 5}, {-0.5, 1, 0, -1, 0.5}), 1.0}; }

inline Stencil third_order_y_stencil() { return {Tensor(Shape{5, 1}, {-0.5, 1, 0, -1, 0.5}), 1.0}; }

/// d3/dx3 + d3/dy3 as a single 5x5 cross-shaped kernel. Equivalent to the sum
/// of the two 1D stencils under replicate or zero padding.
inline Stencil third_order_stencil() {
  Tensor k(Shape{5, 5});
  const double taps[5] = {-0.5, 1, 0, -1, 0.5};
  for (std::size_t i = 0; i < 5; ++i) {
    k.at(2, i) += taps[i];
    k.at(i, 2) += taps[i];
  }
  return {std::move(k), 1.0};
}

namespace detail {

inline void require_extent(const Shape& s, std::size_t min_extent, const char* what) {
  const PlanarDims d = planar_dims(s, what);
  if (d.height < min_extent || d.width < min_extent) {
    throw ShapeError(std::string(what) + " needs spatial extents >= " + std::to_string(min_extent) + ", got " +
                     to_string(s));
  }
}

}  // namespace detail

inline Var apply_stencil(Var d, const Stencil& s, Padding padding = Padding::replicate) {
  return conv2d_depthwise(d, s.kernel(), padding);
}

/// Channel-wise 5-point Laplacian with replicate padding. Input [C,H,W] or [H,W], H,W >= 3.
inline Var laplacian(Var d) {
  detail::require_extent(d.shape(), 3, "laplacian");
  return apply_stencil(d, laplacian_stencil());
}

/// Channel-wise third-order operator (x plus y central third differences),
/// replicate padding. Input [C,H,W] or [H,W], H,W >= 5.
inline Var third_order(Var d) {
  detail::require_extent(d.shape(), 5, "third_order");
  return apply_stencil(d, third_order_stencil());
}

inline Var third_order_x(Var d) {
  detail::require_extent(d.shape(), 5, "third_order_x");
  return apply_stencil(d, third_order_x_stencil());
}

inline Var third_order_y(Var d) {
  detail::require_extent(d.shape(), 5, "third_order_y");
  return apply_stencil(d, third_order_y_stencil());
}

inline Tensor laplacian(const Tensor& d) { return detail::eval1(d, [](Var v) { return laplacian(v); }); }
inline Tensor third_order(const Tensor& d) { return detail::eval1(d, [](Var v) { return third_order(v); }); }
inline Tensor third_order_x(const Tensor& d) { return detail::eval1(d, [](Var v) { return third_order_x(v); }); }
inline Tensor third_order_y(const Tensor& d) { return detail::eval1(d, [](Var v) { return third_order_y(v); }); }

}  // namespace depthot
