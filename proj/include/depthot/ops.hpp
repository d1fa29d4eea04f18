#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/tape.hpp"
#include "depthot/tensor.hpp"

namespace depthot {

/// Border handling for same-size convolution.
enum class Padding { replicate, zero };

namespace detail {

using Inputs = std::span<const Tensor* const>;
using GradOut = std::span<const double>;
using GradIn = std::span<const GradSlot>;

inline Tape& common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::invalid_argument("empty Var operand");
    if (t && v.tape() != t) throw std::invalid_argument("operands belong to different tapes");
    t = v.tape();
  }
  return *t;
}

template <class F, class D>
Var unary(Var a, F f, D df) {
  return a.tape()->record(
      {a},
      [f](Inputs in) {
        Tensor out(in[0]->shape());
        auto x = in[0]->data();
        auto y = out.data();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
        return out;
      },
      [df](Inputs in, const Tensor& out, GradOut g, GradIn gin) {
        if (gin[0].empty()) return;
        auto x = in[0]->data();
        auto y = out.data();
        for (std::size_t i = 0; i < x.size(); ++i) gin[0][i] += g[i] * df(x[i], y[i]);
      });
}

/// Elementwise pairing of two operands: identical shapes, or a per-channel
/// vector [C] against a [C,H,W] map.
struct Broadcast {
  Shape out;
  std::size_t plane_a = 0;  // 0: index directly; otherwise index / plane_a
  std::size_t plane_b = 0;

  std::size_t ia(std::size_t i) const { return plane_a ? i / plane_a : i; }
  std::size_t ib(std::size_t i) const { return plane_b ? i / plane_b : i; }

  static Broadcast of(const Shape& a, const Shape& b, const char* what) {
    if (a == b) return {a, 0, 0};
    auto per_channel = [](const Shape& vec, const Shape& map) {
      return vec.size() == 1 && map.size() == 3 && vec[0] == map[0];
    };
    if (per_channel(b, a)) return {a, 0, a[1] * a[2]};
    if (per_channel(a, b)) return {b, b[1] * b[2], 0};
    shape_fail(what, a, b);
  }
};

template <class F, class Da, class Db>
Var binary(Var a, Var b, const char* name, F f, Da da, Db db) {
  Tape& tape = common_tape({a, b});
  const Broadcast bc = Broadcast::of(a.shape(), b.shape(), name);
  return tape.record(
      {a, b},
      [bc, f](Inputs in) {
        Tensor out(bc.out);
        auto x = in[0]->data();
        auto y = in[1]->data();
        auto o = out.data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[bc.ia(i)], y[bc.ib(i)]);
        return out;
      },
      [bc, da, db](Inputs in, const Tensor&, GradOut g, GradIn gin) {
        auto x = in[0]->data();
        auto y = in[1]->data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double xa = x[bc.ia(i)];
          const double yb = y[bc.ib(i)];
          if (!gin[0].empty()) gin[0][bc.ia(i)] += g[i] * da(xa, yb);
          if (!gin[1].empty()) gin[1][bc.ib(i)] += g[i] * db(xa, yb);
        }
      });
}

/// Evaluates a tape-level function on plain tensors.
template <class F>
Tensor eval1(const Tensor& a, F f) {
  Tape t;
  return f(t.constant(a)).value();
}

template <class F>
Tensor eval2(const Tensor& a, const Tensor& b, F f) {
  Tape t;
  return f(t.constant(a), t.constant(b)).value();
}

inline double sigmoid_scalar(double x) {
  double y;
  if (x >= 0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  // Saturate at the representable neighbours of 0 and 1 so the range stays open.
  return std::clamp(y, std::numeric_limits<double>::denorm_min(), 1.0 - 0x1p-53);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary(
      a, b, "div",
      [](double x, double y) {
        if (y == 0.0) throw std::domain_error("division by zero");
        return x / y;
      },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// Logistic function; outputs are strictly inside (0,1) for every finite input.
inline Var sigmoid(Var a) {
  return detail::unary(a, detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Var ln(Var a) {
  return detail::unary(
      a,
      [](double x) {
        if (!(x > 0.0)) throw std::domain_error("ln of non-positive argument " + std::to_string(x));
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

/// |x| with the subgradient 0 at the kink.
inline Var abs(Var a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var sqrt(Var a) {
  return detail::unary(
      a,
      [](double x) {
        if (!(x > 0.0)) throw std::domain_error("sqrt requires a positive argument");
        return std::sqrt(x);
      },
      [](double, double y) { return 0.5 / y; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var shift(Var a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

enum class Elementwise { add, mul, relu, sigmoid, ln, abs };

inline Var elementwise(Elementwise kind, Var a, std::optional<Var> b = std::nullopt) {
  const bool binary = kind == Elementwise::add || kind == Elementwise::mul;
  if (binary != b.has_value()) throw std::invalid_argument("wrong operand count for elementwise op");
  switch (kind) {
    case Elementwise::add: return add(a, *b);
    case Elementwise::mul: return mul(a, *b);
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::ln: return ln(a);
    case Elementwise::abs: return abs(a);
  }
  throw std::invalid_argument("unknown elementwise kind");
}

inline Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr) {
  Tape t;
  const Var va = t.constant(a);
  if (b) return elementwise(kind, va, t.constant(*b)).value();
  return elementwise(kind, va).value();
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  return a.tape()->record(
      {a}, [](detail::Inputs in) { return Tensor::scalar(in[0]->sum()); },
      [](detail::Inputs, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (double& v : gin[0]) v += g[0];
      });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Global average pool: [C, ...] -> [C], each entry the mean over the trailing axes.
inline Var gap(Var a) {
  if (a.shape().size() < 3) throw ShapeError("gap requires rank >= 3, got " + to_string(a.shape()));
  const std::size_t channels = a.shape()[0];
  const std::size_t plane = a.value().size() / channels;
  return a.tape()->record(
      {a},
      [channels, plane](detail::Inputs in) {
        Tensor out(Shape{channels});
        auto x = in[0]->data();
        for (std::size_t c = 0; c < channels; ++c) {
          double s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += x[c * plane + i];
          out[c] = s / static_cast<double>(plane);
        }
        return out;
      },
      [channels, plane](detail::Inputs, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t c = 0; c < channels; ++c) {
          const double gc = g[c] / static_cast<double>(plane);
          for (std::size_t i = 0; i < plane; ++i) gin[0][c * plane + i] += gc;
        }
      });
}

enum class Reduction { sum, mean, gap };

inline Var reduce(Reduction kind, Var a) {
  switch (kind) {
    case Reduction::sum: return sum(a);
    case Reduction::mean: return mean(a);
    case Reduction::gap: return gap(a);
  }
  throw std::invalid_argument("unknown reduction");
}

inline Tensor reduce(Reduction kind, const Tensor& a) {
  return detail::eval1(a, [kind](Var v) { return reduce(kind, v); });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, same-size output)
// ---------------------------------------------------------------------------

namespace detail {

struct PaddedPlanes {
  std::vector<double> data;
  std::size_t channels = 0, height = 0, width = 0;
  const double* row(std::size_t c, std::size_t y) const { return data.data() + (c * height + y) * width; }
  double* row(std::size_t c, std::size_t y) { return data.data() + (c * height + y) * width; }
};

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
}

inline PaddedPlanes pad_planes(std::span<const double> in, PlanarDims d, std::size_t rh, std::size_t rw,
                               Padding mode) {
  PaddedPlanes p;
  p.channels = d.channels;
  p.height = d.height + 2 * rh;
  p.width = d.width + 2 * rw;
  p.data.assign(p.channels * p.height * p.width, 0.0);
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t py = 0; py < p.height; ++py) {
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(rh);
      const bool row_in = sy >= 0 && sy < static_cast<std::ptrdiff_t>(d.height);
      if (!row_in && mode == Padding::zero) continue;
      const std::size_t y = clamp_index(sy, d.height);
      double* dst = p.row(c, py);
      const double* src = in.data() + (c * d.height + y) * d.width;
      for (std::size_t px = 0; px < p.width; ++px) {
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(px) - static_cast<std::ptrdiff_t>(rw);
        const bool col_in = sx >= 0 && sx < static_cast<std::ptrdiff_t>(d.width);
        if (!col_in && mode == Padding::zero) continue;
        dst[px] = src[clamp_index(sx, d.width)];
      }
    }
  }
  return p;
}

/// Adjoint of pad_planes: folds a gradient over the padded planes back onto the input.
inline void unpad_accumulate(const PaddedPlanes& g, PlanarDims d, std::size_t rh, std::size_t rw,
                             Padding mode, std::span<double> out) {
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t py = 0; py < g.height; ++py) {
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(rh);
      const bool row_in = sy >= 0 && sy < static_cast<std::ptrdiff_t>(d.height);
      if (!row_in && mode == Padding::zero) continue;
      const std::size_t y = clamp_index(sy, d.height);
      const double* src = g.row(c, py);
      double* dst = out.data() + (c * d.height + y) * d.width;
      for (std::size_t px = 0; px < g.width; ++px) {
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(px) - static_cast<std::ptrdiff_t>(rw);
        const bool col_in = sx >= 0 && sx < static_cast<std::ptrdiff_t>(d.width);
        if (!col_in && mode == Padding::zero) continue;
        dst[clamp_index(sx, d.width)] += src[px];
      }
    }
  }
}

inline void check_odd_kernel(std::size_t kh, std::size_t kw) {
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("kernel extents must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
  }
}

}  // namespace detail

/// Multi-channel convolution. `weight` is [Co,Ci,kh,kw], `bias` (optional) is
/// [Co]; the input is [Ci,H,W] (or [H,W] when Ci = 1). Output is [Co,H,W].
///
/// Computes out[o,y,x] = b[o] + sum_{i,dy,dx} w[o,i,dy,dx] * in[i, y+dy-rh, x+dx-rw]
/// (cross-correlation) with the chosen border extension.
inline Var conv2d(Var input, Var weight, std::optional<Var> bias, Padding padding) {
  Tape& tape = bias ? detail::common_tape({input, weight, *bias}) : detail::common_tape({input, weight});
  const PlanarDims d = planar_dims(input.shape(), "conv2d");
  const Shape& ws = weight.shape();
  if (ws.size() != 4) throw ShapeError("conv2d weight must be [Co,Ci,kh,kw], got " + to_string(ws));
  detail::check_odd_kernel(ws[2], ws[3]);
  if (ws[1] != d.channels) detail::shape_fail("conv2d channel mismatch", ws, input.shape());
  if (bias && bias->shape() != Shape{ws[0]}) detail::shape_fail("conv2d bias", bias->shape(), Shape{ws[0]});
  const std::size_t co_n = ws[0], kh = ws[2], kw = ws[3], rh = kh / 2, rw = kw / 2;

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);

  auto forward = [d, co_n, kh, kw, rh, rw, padding](detail::Inputs in) {
    const auto p = detail::pad_planes(in[0]->data(), d, rh, rw, padding);
    auto w = in[1]->data();
    Tensor out(Shape{co_n, d.height, d.width});
    auto o = out.data();
    for (std::size_t co = 0; co < co_n; ++co) {
      double* oplane = o.data() + co * d.plane();
      if (in.size() > 2) std::fill(oplane, oplane + d.plane(), (*in[2])[co]);
      for (std::size_t ci = 0; ci < d.channels; ++ci) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wv = w[((co * d.channels + ci) * kh + ky) * kw + kx];
            for (std::size_t y = 0; y < d.height; ++y) {
              const double* prow = p.row(ci, y + ky) + kx;
              double* orow = oplane + y * d.width;
              for (std::size_t x = 0; x < d.width; ++x) orow[x] += wv * prow[x];
            }
          }
        }
      }
    }
    return out;
  };

  auto backward = [d, co_n, kh, kw, rh, rw, padding](detail::Inputs in, const Tensor&, detail::GradOut g,
                                                      detail::GradIn gin) {
    const auto p = detail::pad_planes(in[0]->data(), d, rh, rw, padding);
    auto w = in[1]->data();
    detail::PaddedPlanes gp;
    const bool want_in = !gin[0].empty();
    if (want_in) {
      gp = p;
      std::fill(gp.data.begin(), gp.data.end(), 0.0);
    }
    for (std::size_t co = 0; co < co_n; ++co) {
      const double* gplane = g.data() + co * d.plane();
      if (gin.size() > 2 && !gin[2].empty()) {
        double s = 0;
        for (std::size_t i = 0; i < d.plane(); ++i) s += gplane[i];
        gin[2][co] += s;
      }
      for (std::size_t ci = 0; ci < d.channels; ++ci) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t widx = ((co * d.channels + ci) * kh + ky) * kw + kx;
            const double wv = w[widx];
            double gw = 0;
            for (std::size_t y = 0; y < d.height; ++y) {
              const double* prow = p.row(ci, y + ky) + kx;
              const double* grow = gplane + y * d.width;
              if (want_in) {
                double* gprow = gp.row(ci, y + ky) + kx;
                for (std::size_t x = 0; x < d.width; ++x) {
                  gprow[x] += wv * grow[x];
                  gw += prow[x] * grow[x];
                }
              } else {
                for (std::size_t x = 0; x < d.width; ++x) gw += prow[x] * grow[x];
              }
            }
            if (!gin[1].empty()) gin[1][widx] += gw;
          }
        }
      }
    }
    if (want_in) detail::unpad_accumulate(gp, d, rh, rw, padding, gin[0]);
  };

  return tape.record(std::move(inputs), forward, backward);
}

inline Var conv2d(Var input, Var weight, Padding padding) { return conv2d(input, weight, std::nullopt, padding); }

/// Applies one fixed 2D kernel [kh,kw] to every channel independently.
/// Output has the input's shape.
inline Var conv2d_depthwise(Var input, const Tensor& kernel, Padding padding) {
  const PlanarDims d = planar_dims(input.shape(), "conv2d_depthwise");
  if (kernel.rank() != 2) throw ShapeError("depthwise kernel must be [kh,kw], got " + to_string(kernel.shape()));
  const std::size_t kh = kernel.extent(0), kw = kernel.extent(1), rh = kh / 2, rw = kw / 2;
  detail::check_odd_kernel(kh, kw);
  const std::vector<double> k = kernel.values();

  auto forward = [d, k, kh, kw, rh, rw, padding](detail::Inputs in) {
    const auto p = detail::pad_planes(in[0]->data(), d, rh, rw, padding);
    Tensor out(in[0]->shape());
    auto o = out.data();
    for (std::size_t c = 0; c < d.channels; ++c) {
      double* oplane = o.data() + c * d.plane();
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = k[ky * kw + kx];
          if (wv == 0.0) continue;
          for (std::size_t y = 0; y < d.height; ++y) {
            const double* prow = p.row(c, y + ky) + kx;
            double* orow = oplane + y * d.width;
            for (std::size_t x = 0; x < d.width; ++x) orow[x] += wv * prow[x];
          }
        }
      }
    }
    return out;
  };

  auto backward = [d, k, kh, kw, rh, rw, padding](detail::Inputs, const Tensor&, detail::GradOut g,
                                                   detail::GradIn gin) {
    if (gin[0].empty()) return;
    detail::PaddedPlanes gp;
    gp.channels = d.channels;
    gp.height = d.height + 2 * rh;
    gp.width = d.width + 2 * rw;
    gp.data.assign(gp.channels * gp.height * gp.width, 0.0);
    for (std::size_t c = 0; c < d.channels; ++c) {
      const double* gplane = g.data() + c * d.plane();
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = k[ky * kw + kx];
          if (wv == 0.0) continue;
          for (std::size_t y = 0; y < d.height; ++y) {
            double* gprow = gp.row(c, y + ky) + kx;
            const double* grow = gplane + y * d.width;
            for (std::size_t x = 0; x < d.width; ++x) gprow[x] += wv * grow[x];
          }
        }
      }
    }
    detail::unpad_accumulate(gp, d, rh, rw, padding, gin[0]);
  };

  return input.tape()->record({input}, forward, backward);
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, Padding padding) {
  return detail::eval2(input, weight, [padding](Var x, Var w) { return conv2d(x, w, padding); });
}

inline Tensor conv2d_depthwise(const Tensor& input, const Tensor& kernel, Padding padding) {
  return detail::eval1(input, [&](Var x) { return conv2d_depthwise(x, kernel, padding); });
}

// ---------------------------------------------------------------------------
// Dense layers and shape manipulation
// ---------------------------------------------------------------------------

/// y = W x + b with x [n], W [m,n], b [m].
inline Var fully_connected(Var x, Var w, Var b) {
  Tape& tape = detail::common_tape({x, w, b});
  const Shape& ws = w.shape();
  if (x.shape().size() != 1 || ws.size() != 2 || ws[1] != x.shape()[0]) {
    detail::shape_fail("fully_connected weight/input", ws, x.shape());
  }
  if (b.shape() != Shape{ws[0]}) detail::shape_fail("fully_connected bias", b.shape(), Shape{ws[0]});
  const std::size_t m = ws[0], n = ws[1];
  return tape.record(
      {x, w, b},
      [m, n](detail::Inputs in) {
        Tensor y(Shape{m});
        for (std::size_t i = 0; i < m; ++i) {
          double s = (*in[2])[i];
          for (std::size_t j = 0; j < n; ++j) s += (*in[1])[i * n + j] * (*in[0])[j];
          y[i] = s;
        }
        return y;
      },
      [m, n](detail::Inputs in, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        for (std::size_t i = 0; i < m; ++i) {
          if (!gin[2].empty()) gin[2][i] += g[i];
          for (std::size_t j = 0; j < n; ++j) {
            if (!gin[0].empty()) gin[0][j] += (*in[1])[i * n + j] * g[i];
            if (!gin[1].empty()) gin[1][i * n + j] += (*in[0])[j] * g[i];
          }
        }
      });
}

inline Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tape t;
  return fully_connected(t.constant(x), t.constant(w), t.constant(b)).value();
}

/// Stacks [Ci,H,W] parts along the channel axis, in argument order.
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels needs at least one part");
  Tape* tape = parts.front().tape();
  std::vector<PlanarDims> dims;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw std::invalid_argument("operands belong to different tapes");
    const PlanarDims d = planar_dims(p.shape(), "concat_channels");
    if (!dims.empty() && (d.height != dims[0].height || d.width != dims[0].width)) {
      detail::shape_fail("concat_channels spatial mismatch", p.shape(), parts.front().shape());
    }
    dims.push_back(d);
    total += d.channels;
  }
  const Shape out_shape{total, dims[0].height, dims[0].width};
  return tape->record(
      parts,
      [out_shape](detail::Inputs in) {
        Tensor out(out_shape);
        std::size_t offset = 0;
        for (const Tensor* t : in) {
          std::copy(t->data().begin(), t->data().end(), out.data().begin() + offset);
          offset += t->size();
        }
        return out;
      },
      [](detail::Inputs in, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (!gin[k].empty()) {
            for (std::size_t i = 0; i < in[k]->size(); ++i) gin[k][i] += g[offset + i];
          }
          offset += in[k]->size();
        }
      });
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  Tape t;
  std::vector<Var> vars;
  for (const Tensor& p : parts) vars.push_back(t.constant(p));
  return concat_channels(vars).value();
}

/// Same elements under a new shape.
inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size()) detail::shape_fail("reshape", a.shape(), shape);
  return a.tape()->record(
      {a}, [shape](detail::Inputs in) { return in[0]->reshaped(shape); },
      [](detail::Inputs, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
      });
}

/// out[i] = a[index[i]]; indices may repeat or omit elements.
inline Var gather(Var a, std::vector<std::size_t> index, Shape shape) {
  if (numel(shape) != index.size()) throw ShapeError("gather index count does not match output shape");
  for (std::size_t i : index) {
    if (i >= a.value().size()) throw ShapeError("gather index out of range");
  }
  return a.tape()->record(
      {a},
      [index, shape](detail::Inputs in) {
        Tensor out(shape);
        for (std::size_t i = 0; i < index.size(); ++i) out[i] = (*in[0])[index[i]];
        return out;
      },
      [index](detail::Inputs, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < index.size(); ++i) gin[0][index[i]] += g[i];
      });
}

inline Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(s));
  std::vector<std::size_t> index(s[0] * s[1]);
  for (std::size_t i = 0; i < s[0]; ++i) {
    for (std::size_t j = 0; j < s[1]; ++j) index[j * s[0] + i] = i * s[1] + j;
  }
  return gather(a, std::move(index), Shape{s[1], s[0]});
}

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::common_tape({a, b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) detail::shape_fail("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  return tape.record(
      {a, b},
      [m, k, n](detail::Inputs in) {
        Tensor out(Shape{m, n});
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = (*in[0])[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * (*in[1])[p * n + j];
          }
        }
        return out;
      },
      [m, k, n](detail::Inputs in, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double ga = 0;
            const double av = (*in[0])[i * k + p];
            for (std::size_t j = 0; j < n; ++j) {
              ga += g[i * n + j] * (*in[1])[p * n + j];
              if (!gin[1].empty()) gin[1][p * n + j] += av * g[i * n + j];
            }
            if (!gin[0].empty()) gin[0][i * k + p] += ga;
          }
        }
      });
}

/// Row-wise softmax of a matrix.
inline Var softmax_rows(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("softmax_rows expects a matrix, got " + to_string(s));
  const std::size_t m = s[0], n = s[1];
  return a.tape()->record(
      {a},
      [m, n](detail::Inputs in) {
        Tensor out(Shape{m, n});
        for (std::size_t i = 0; i < m; ++i) {
          const double* x = in[0]->data().data() + i * n;
          const double mx = *std::max_element(x, x + n);
          double z = 0;
          for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
          for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
        }
        return out;
      },
      [m, n](detail::Inputs, const Tensor& y, detail::GradOut g, detail::GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
        }
      });
}

/// Per-pixel outer product of two [R,H,W] maps: out[i*R + j, y, x] = a[i,y,x] * b[j,y,x].
inline Var pixel_outer(Var a, Var b) {
  Tape& tape = detail::common_tape({a, b});
  if (a.shape() != b.shape() || a.shape().size() != 3) detail::shape_fail("pixel_outer", a.shape(), b.shape());
  const std::size_t r = a.shape()[0], plane = a.shape()[1] * a.shape()[2];
  const Shape out_shape{r * r, a.shape()[1], a.shape()[2]};
  return tape.record(
      {a, b},
      [r, plane, out_shape](detail::Inputs in) {
        Tensor out(out_shape);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < r; ++j) {
            double* o = out.data().data() + (i * r + j) * plane;
            const double* av = in[0]->data().data() + i * plane;
            const double* bv = in[1]->data().data() + j * plane;
            for (std::size_t p = 0; p < plane; ++p) o[p] = av[p] * bv[p];
          }
        }
        return out;
      },
      [r, plane](detail::Inputs in, const Tensor&, detail::GradOut g, detail::GradIn gin) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < r; ++j) {
            const double* gv = g.data() + (i * r + j) * plane;
            const double* av = in[0]->data().data() + i * plane;
            const double* bv = in[1]->data().data() + j * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              if (!gin[0].empty()) gin[0][i * plane + p] += gv[p] * bv[p];
              if (!gin[1].empty()) gin[1][j * plane + p] += gv[p] * av[p];
            }
          }
        }
      });
}

}  // namespace depthot
