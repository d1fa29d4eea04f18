#pragma once

// Independent reference implementations used by the tests. Everything here
// is written as plain loops over std::vector so that it shares no code with
// the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "depthot/tensor.hpp"

namespace oracle {

using depthot::Shape;
using depthot::Tensor;

/// Same-padded 2D cross-correlation, input [Ci,H,W], weight [Co,Ci,kh,kw].
inline Tensor conv2d(const Tensor& in, const Tensor& w, bool replicate, const Tensor* bias = nullptr) {
  const std::size_t ci = in.extent(0), h = in.extent(1), wd = in.extent(2);
  const std::size_t co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const long rh = static_cast<long>(kh / 2), rw = static_cast<long>(kw / 2);
  Tensor out(Shape{co, h, wd});
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < wd; ++x) {
        double acc = bias ? (*bias)[o] : 0.0;
        for (std::size_t c = 0; c < ci; ++c) {
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              long yy = static_cast<long>(y) + static_cast<long>(i) - rh;
              long xx = static_cast<long>(x) + static_cast<long>(j) - rw;
              const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(wd);
              if (!inside && !replicate) continue;
              yy = std::clamp(yy, 0L, static_cast<long>(h) - 1);
              xx = std::clamp(xx, 0L, static_cast<long>(wd) - 1);
              acc += w[((o * ci + c) * kh + i) * kw + j] * in[(c * h + static_cast<std::size_t>(yy)) * wd +
                                                               static_cast<std::size_t>(xx)];
            }
          }
        }
        out[(o * h + y) * wd + x] = acc;
      }
    }
  }
  return out;
}

/// Per-channel application of one 2D kernel [kh,kw], replicate padding.
inline Tensor stencil(const Tensor& in, const Tensor& k) {
  const std::size_t c = in.extent(0), kh = k.extent(0), kw = k.extent(1);
  Tensor out(in.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor plane(Shape{1, in.extent(1), in.extent(2)});
    for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = in[ch * plane.size() + p];
    const Tensor r = conv2d(plane, k.reshaped(Shape{1, 1, kh, kw}), true);
    for (std::size_t p = 0; p < plane.size(); ++p) out[ch * plane.size() + p] = r[p];
  }
  return out;
}

inline std::vector<double> matvec(const Tensor& w, const std::vector<double>& x, const Tensor& b) {
  std::vector<double> y(w.extent(0));
  for (std::size_t i = 0; i < y.size(); ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < x.size(); ++j) acc += w[i * x.size() + j] * x[j];
    y[i] = acc;
  }
  return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Central difference of f along every coordinate of x.
inline std::vector<double> numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  }
  return worst;
}

// Transportation-polytope vertices ------------------------------------------

/// Exact optimal transport cost by enumerating every basis of the
/// transportation polytope: spanning trees over the m + n row/column nodes.
/// Each tree fixes the flows by peeling leaves; feasible ones are vertices.
/// Intended for m, n <= 5.
inline double basis_enumeration_ot(const std::vector<double>& a, const std::vector<double>& b,
                                   const std::vector<double>& cost) {
  const std::size_t m = a.size(), n = b.size(), nodes = m + n, need = nodes - 1;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> chosen;

  auto find = [](std::vector<std::size_t>& parent, std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto evaluate = [&]() {
    std::vector<double> supply(nodes);
    for (std::size_t i = 0; i < m; ++i) supply[i] = a[i];
    for (std::size_t j = 0; j < n; ++j) supply[m + j] = b[j];
    std::vector<std::size_t> degree(nodes, 0);
    for (std::size_t e : chosen) {
      ++degree[e / n];
      ++degree[m + e % n];
    }
    std::vector<char> used(chosen.size(), 0);
    double total = 0;
    for (std::size_t round = 0; round < chosen.size(); ++round) {
      // Any edge with a leaf endpoint carries that leaf's remaining supply.
      bool found = false;
      for (std::size_t k = 0; k < chosen.size() && !found; ++k) {
        if (used[k]) continue;
        const std::size_t r = chosen[k] / n, c = m + chosen[k] % n;
        std::size_t leaf = nodes, other = nodes;
        if (degree[r] == 1) {
          leaf = r;
          other = c;
        } else if (degree[c] == 1) {
          leaf = c;
          other = r;
        }
        if (leaf == nodes) continue;
        const double t = supply[leaf];
        if (t < -1e-12) return;
        total += t * cost[chosen[k]];
        supply[other] -= t;
        supply[leaf] = 0;
        --degree[leaf];
        --degree[other];
        used[k] = 1;
        found = true;
      }
      if (!found) return;
    }
    best = std::min(best, total);
  };

  std::function<void(std::size_t, std::vector<std::size_t>)> pick = [&](std::size_t next,
                                                                         std::vector<std::size_t> parent) {
    if (chosen.size() == need) {
      evaluate();
      return;
    }
    for (std::size_t e = next; e + (need - chosen.size()) <= m * n; ++e) {
      const std::size_t ru = find(parent, e / n), rv = find(parent, m + e % n);
      if (ru == rv) continue;  // would close a cycle
      std::vector<std::size_t> p = parent;
      p[ru] = rv;
      chosen.push_back(e);
      pick(e + 1, std::move(p));
      chosen.pop_back();
    }
  };
  std::vector<std::size_t> parent(nodes);
  std::iota(parent.begin(), parent.end(), 0);
  pick(0, parent);
  return best;
}

/// 1D optimal transport for squared distance by merging the two CDFs.
inline double quantile_ot(const std::vector<double>& centers, const std::vector<double>& a,
                          const std::vector<double>& b) {
  std::size_t i = 0, j = 0;
  double ra = a[0], rb = b[0], total = 0;
  while (i < a.size() && j < b.size()) {
    const double t = std::min(ra, rb);
    const double d = centers[i] - centers[j];
    total += t * d * d;
    ra -= t;
    rb -= t;
    if (ra <= 1e-300 && ++i < a.size()) ra = a[i];
    if (rb <= 1e-300 && ++j < b.size()) rb = b[j];
    if (ra <= 1e-300 && i >= a.size()) break;
  }
  return total;
}

template <class Rng>
std::vector<double> random_histogram(std::size_t n, Rng& rng, double zero_prob = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> m(n);
  double s = 0;
  for (double& v : m) s += (v = u(rng) < zero_prob ? 0.0 : u(rng));
  if (s == 0) {
    m[0] = 1;
    s = 1;
  }
  for (double& v : m) v /= s;
  return m;
}

}  // namespace oracle
