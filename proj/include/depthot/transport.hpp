#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "depthot/tensor.hpp"

namespace depthot {

/// B uniform depth bins over [lo, hi]; bin k covers [lo + k*w, lo + (k+1)*w).
struct BinGrid {
  double lo = 1e-3;
  double hi = 10.0;
  std::size_t bins = 64;

  void validate() const {
    if (!(lo < hi)) throw std::invalid_argument("bin range requires lo < hi");
    if (bins < 1) throw std::invalid_argument("bin count must be positive");
  }
  double width() const { return (hi - lo) / static_cast<double>(bins); }
  double center(std::size_t k) const { return lo + (static_cast<double>(k) + 0.5) * width(); }
  std::vector<double> centers() const {
    std::vector<double> c(bins);
    for (std::size_t k = 0; k < bins; ++k) c[k] = center(k);
    return c;
  }
  /// Index of the bin holding `x` after clamping into range.
  std::size_t index(double x) const {
    const double t = (std::clamp(x, lo, hi) - lo) / width();
    return std::min(static_cast<std::size_t>(t), bins - 1);
  }
};

/// Histogram over depth bins with unit total mass.
struct DepthDistribution {
  std::vector<double> centers;
  std::vector<double> mass;

  std::size_t size() const { return mass.size(); }

  void validate(double tol = 1e-12) const {
    if (mass.empty() || centers.size() != mass.size()) {
      throw std::invalid_argument("distribution needs matching, non-empty centers and mass");
    }
    double total = 0;
    for (double m : mass) {
      if (!(m >= 0)) throw std::invalid_argument("distribution mass must be nonnegative");
      total += m;
    }
    if (std::abs(total - 1.0) > tol) {
      throw std::invalid_argument("distribution mass sums to " + std::to_string(total) + ", expected 1");
    }
  }
};

/// Triangular soft assignment of one depth value. Writes normalized weights
/// into `w` (size B) and, when `dw` is non-null, their derivatives d w_b / d x.
/// Values outside the range are clamped first, so their derivative is zero.
inline void soft_assign(double x, const BinGrid& grid, double softness, std::vector<double>& w,
                        std::vector<double>* dw) {
  const std::size_t n = grid.bins;
  w.assign(n, 0.0);
  if (dw) dw->assign(n, 0.0);
  const bool inside = x > grid.lo && x < grid.hi;
  const double xc = std::clamp(x, grid.lo, grid.hi);
  const double half = softness * grid.width();
  double s = 0, ds = 0;
  std::vector<double> dk(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const double r = xc - grid.center(b);
    const double k = 1.0 - std::abs(r) / half;
    if (k <= 0) continue;
    w[b] = k;
    dk[b] = inside ? (r > 0 ? -1.0 : (r < 0 ? 1.0 : 0.0)) / half : 0.0;
    s += k;
    ds += dk[b];
  }
  for (std::size_t b = 0; b < n; ++b) {
    if (dw) (*dw)[b] = (dk[b] * s - w[b] * ds) / (s * s);
    w[b] /= s;
  }
}

inline void check_softness(double softness) {
  // Narrower kernels leave gaps between neighbouring bins where a value gets no weight.
  if (softness != 0.0 && !(softness > 0.5)) {
    throw std::invalid_argument("softness must be 0 (hard binning) or greater than 0.5");
  }
}

/// Depth map -> histogram over the grid. softness = 0 gives a hard histogram;
/// softness > 0.5 spreads each value over a triangular kernel of half-width
/// softness * bin width. Either way the result has unit mass.
inline DepthDistribution normalize(const Tensor& depth, const BinGrid& grid, double softness = 0.0) {
  grid.validate();
  check_softness(softness);
  if (depth.size() == 0) throw std::invalid_argument("cannot normalize an empty depth map");
  DepthDistribution d{grid.centers(), std::vector<double>(grid.bins, 0.0)};
  const double unit = 1.0 / static_cast<double>(depth.size());
  std::vector<double> w;
  for (double x : depth.data()) {
    if (!std::isfinite(x)) throw std::invalid_argument("depth map contains a non-finite value");
    if (softness == 0.0) {
      d.mass[grid.index(x)] += unit;
    } else {
      soft_assign(x, grid, softness, w, nullptr);
      for (std::size_t b = 0; b < grid.bins; ++b) d.mass[b] += unit * w[b];
    }
  }
  return d;
}

/// Squared distances between bin centers.
struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> entries;  // row-major n x n

  double operator()(std::size_t i, std::size_t j) const { return entries[i * n + j]; }
  double max() const { return *std::max_element(entries.begin(), entries.end()); }
};

inline CostMatrix cost_matrix(const std::vector<double>& centers) {
  if (centers.empty()) throw std::invalid_argument("cost matrix needs at least one center");
  for (std::size_t i = 1; i < centers.size(); ++i) {
    if (!(centers[i] > centers[i - 1])) throw std::invalid_argument("bin centers must be strictly increasing");
  }
  CostMatrix m{centers.size(), std::vector<double>(centers.size() * centers.size())};
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) {
      const double d = centers[i] - centers[j];
      m.entries[i * m.n + j] = d * d;
    }
  }
  return m;
}

/// Coupling between two marginals.
struct TransportPlan {
  std::size_t rows = 0, cols = 0;
  std::vector<double> flow;  // row-major
  std::vector<double> row_marginal, col_marginal;

  double operator()(std::size_t i, std::size_t j) const { return flow[i * cols + j]; }

  /// max(L1 row-sum error, L1 column-sum error).
  double marginal_violation() const {
    double er = 0, ec = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < cols; ++j) s += flow[i * cols + j];
      er += std::abs(s - row_marginal[i]);
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < rows; ++i) s += flow[i * cols + j];
      ec += std::abs(s - col_marginal[j]);
    }
    return std::max(er, ec);
  }

  double cost(const CostMatrix& m) const {
    double c = 0;
    for (std::size_t k = 0; k < flow.size(); ++k) c += flow[k] * m.entries[k];
    return c;
  }

  Tensor to_tensor() const { return Tensor(Shape{rows, cols}, flow); }
};

struct TransportResult {
  double cost = 0;
  TransportPlan plan;
};

namespace detail {

inline void check_same_grid(const DepthDistribution& p, const DepthDistribution& q) {
  p.validate(1e-9);
  q.validate(1e-9);
  if (p.centers != q.centers) throw std::invalid_argument("distributions are defined on different bin grids");
}

inline TransportPlan empty_plan(const std::vector<double>& a, const std::vector<double>& b) {
  return {a.size(), b.size(), std::vector<double>(a.size() * b.size(), 0.0), a, b};
}

}  // namespace detail

/// Exact OT on the line: the monotone (quantile-matching) coupling, optimal
/// for any convex cost of the displacement.
inline TransportResult ot_exact_1d(const DepthDistribution& p, const DepthDistribution& q) {
  detail::check_same_grid(p, q);
  const CostMatrix m = cost_matrix(p.centers);
  TransportResult r{0.0, detail::empty_plan(p.mass, q.mass)};
  const std::size_t n = p.size();
  std::size_t i = 0, j = 0;
  double ra = p.mass[0], rb = q.mass[0];
  while (i < n && j < n) {
    const double x = std::min(ra, rb);
    r.plan.flow[i * n + j] += x;
    ra -= x;
    rb -= x;
    if (ra <= rb) {
      if (++i < n) ra = p.mass[i];
    } else {
      if (++j < n) rb = q.mass[j];
    }
  }
  r.cost = r.plan.cost(m);
  return r;
}

inline constexpr std::size_t kLpMaxBins = 64;

/// Exact OT over the transportation polytope by the transportation simplex
/// (north-west-corner start, u-v potentials, cycle pivots). Dantzig pricing,
/// switching to Bland's rule during runs of degenerate pivots so it cannot cycle.
inline TransportResult ot_lp(const DepthDistribution& p, const DepthDistribution& q, const CostMatrix& cost) {
  detail::check_same_grid(p, q);
  const std::size_t m = p.size(), n = q.size();
  if (m > kLpMaxBins) {
    throw std::invalid_argument("ot_lp supports at most " + std::to_string(kLpMaxBins) + " bins (got " +
                                std::to_string(m) + "); use the Sinkhorn solver for larger grids");
  }
  if (cost.n != m) throw std::invalid_argument("cost matrix size does not match the distributions");

  const std::vector<double>& a = p.mass;
  const std::vector<double>& b = q.mass;
  std::vector<double> flow(m * n, 0.0);
  std::vector<char> basic(m * n, 0);

  // North-west corner start: a staircase of exactly m + n - 1 basic cells.
  {
    std::size_t i = 0, j = 0;
    double ra = a[0], rb = b[0];
    for (;;) {
      const double x = std::max(0.0, std::min(ra, rb));
      basic[i * n + j] = 1;
      flow[i * n + j] = x;
      ra -= x;
      rb -= x;
      if (i == m - 1 && j == n - 1) break;
      if (i == m - 1 || (j != n - 1 && rb < ra)) {
        rb = b[++j];
      } else {
        ra = a[++i];
      }
    }
  }

  double scale = 1.0;
  for (double c : cost.entries) scale = std::max(scale, std::abs(c));
  const double tol = 1e-12 * scale;

  std::vector<double> u(m), v(n);
  std::vector<std::vector<std::size_t>> row_adj(m), col_adj(n);
  // Tree search state: node ids 0..m-1 are rows, m..m+n-1 are columns.
  std::vector<std::ptrdiff_t> parent(m + n);
  std::vector<std::size_t> order;
  bool bland = false;
  std::size_t degenerate_run = 0;
  const std::size_t max_pivots = 50 * m * n + 1000;

  auto rebuild_adjacency = [&] {
    for (auto& r : row_adj) r.clear();
    for (auto& c : col_adj) c.clear();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (basic[i * n + j]) {
          row_adj[i].push_back(j);
          col_adj[j].push_back(i);
        }
      }
    }
  };

  // Breadth-first traversal of the basis tree from `root`, filling `parent`.
  auto traverse = [&](std::size_t root) {
    std::fill(parent.begin(), parent.end(), -2);
    parent[root] = -1;
    order.assign(1, root);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t node = order[k];
      if (node < m) {
        for (std::size_t j : row_adj[node]) {
          if (parent[m + j] == -2) {
            parent[m + j] = static_cast<std::ptrdiff_t>(node);
            order.push_back(m + j);
          }
        }
      } else {
        for (std::size_t i : col_adj[node - m]) {
          if (parent[i] == -2) {
            parent[i] = static_cast<std::ptrdiff_t>(node);
            order.push_back(i);
          }
        }
      }
    }
    if (order.size() != m + n) throw std::logic_error("transportation basis is not a spanning tree");
  };

  for (std::size_t pivot = 0;; ++pivot) {
    if (pivot > max_pivots) throw std::runtime_error("transportation simplex exceeded its pivot limit");
    rebuild_adjacency();

    traverse(0);
    for (std::size_t node : order) {
      if (node == 0) {
        u[0] = 0;
      } else if (node < m) {
        const std::size_t j = static_cast<std::size_t>(parent[node]) - m;
        u[node] = cost(node, j) - v[j];
      } else {
        const std::size_t i = static_cast<std::size_t>(parent[node]);
        v[node - m] = cost(i, node - m) - u[i];
      }
    }

    std::size_t enter = m * n;
    double best = -tol;
    for (std::size_t k = 0; k < m * n; ++k) {
      if (basic[k]) continue;
      const double d = cost.entries[k] - u[k / n] - v[k % n];
      if (d < best) {
        enter = k;
        best = d;
        if (bland) break;
      }
    }
    if (enter == m * n) break;

    // Cycle: entering cell plus the tree path from its column back to its row.
    const std::size_t ei = enter / n, ej = enter % n;
    traverse(ei);
    std::vector<std::size_t> minus, plus{enter};
    std::size_t node = m + ej;
    bool sign_minus = true;
    while (node != ei) {
      const auto up = static_cast<std::size_t>(parent[node]);
      const std::size_t cell = node < m ? node * n + (up - m) : up * n + (node - m);
      (sign_minus ? minus : plus).push_back(cell);
      sign_minus = !sign_minus;
      node = up;
    }

    std::size_t leave = minus.front();
    for (std::size_t cell : minus) {
      if (flow[cell] < flow[leave] || (flow[cell] == flow[leave] && bland && cell < leave)) leave = cell;
    }
    const double theta = flow[leave];
    for (std::size_t cell : plus) flow[cell] += theta;
    for (std::size_t cell : minus) flow[cell] -= theta;
    flow[leave] = 0.0;
    basic[leave] = 0;
    basic[enter] = 1;

    if (theta > 0) {
      degenerate_run = 0;
      bland = false;
    } else if (++degenerate_run > m + n) {
      bland = true;
    }
  }

  TransportResult r{0.0, {m, n, std::move(flow), a, b}};
  r.cost = r.plan.cost(cost);
  return r;
}

struct SinkhornOptions {
  /// Absolute regularization; when <= 0, `epsilon_scale * max(M)` is used.
  double epsilon = 0.0;
  double epsilon_scale = 1e-2;
  /// Cap on Sinkhorn sweeps plus Newton steps.
  std::size_t max_iter = 10000;
  /// Stop once the L1 marginal error falls below this.
  double tol = 1e-9;
  /// Additive floor applied to both marginals (then renormalized).
  double mass_floor = 1e-12;
  /// Start from eps = max(M) and halve per stage down to the target.
  bool annealing = true;
  double stage_tol = 1e-3;
  /// Switch from Sinkhorn sweeps to Newton steps on the dual below this error.
  bool newton = true;
  double newton_switch = 1e-3;

  double resolve_epsilon(const CostMatrix& m) const {
    const double e = epsilon > 0 ? epsilon : epsilon_scale * m.max();
    if (!(e > 0)) throw std::invalid_argument("Sinkhorn epsilon must be positive");
    return e;
  }
};

struct SinkhornResult {
  /// <plan, M>
  double cost = 0;
  /// Entropic objective <plan, M> + eps * KL(plan | a b^T), evaluated through the duals.
  double regularized_cost = 0;
  TransportPlan plan;
  std::vector<double> f, g;  // dual potentials
  double epsilon = 0;
  std::size_t iterations = 0;
  double marginal_violation = 0;
  bool converged = false;
};

namespace detail {

inline std::vector<double> floor_and_renormalize(const std::vector<double>& mass, double floor) {
  std::vector<double> out(mass.size());
  double total = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) total += (out[i] = mass[i] + floor);
  for (double& v : out) v /= total;
  return out;
}

/// Log-domain soft c-transforms for T_ij = exp((f_i + g_j - M_ij) / e) a_i b_j.
struct EntropicDual {
  const CostMatrix& cost;
  const std::vector<double>& a;
  const std::vector<double>& b;
  std::vector<double> log_a, log_b;
  double e = 1;
  mutable std::vector<double> z;

  EntropicDual(const CostMatrix& m, const std::vector<double>& a_, const std::vector<double>& b_)
      : cost(m), a(a_), b(b_), log_a(a_.size()), log_b(b_.size()), z(a_.size()) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      log_a[i] = std::log(a[i]);
      log_b[i] = std::log(b[i]);
    }
  }

  double soft_min() const {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double v : z) s += std::exp(v - mx);
    return -e * (mx + std::log(s));
  }

  /// f_i = -e log sum_j exp((g_j - M_ij) / e) b_j: rows become exact.
  void rows(const std::vector<double>& g, std::vector<double>& f) const {
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) z[j] = (g[j] - cost(i, j)) / e + log_b[j];
      f[i] = soft_min();
    }
  }

  /// g_j = -e log sum_i exp((f_i - M_ij) / e) a_i: columns become exact.
  void cols(const std::vector<double>& f, std::vector<double>& g) const {
    const std::size_t n = a.size();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) z[i] = (f[i] - cost(i, j)) / e + log_a[i];
      g[j] = soft_min();
    }
  }

  double plan(std::size_t i, std::size_t j, const std::vector<double>& f, const std::vector<double>& g) const {
    return std::exp((f[i] + g[j] - cost(i, j)) / e + log_a[i] + log_b[j]);
  }

  /// Semi-dual objective sum_j b_j g_j + sum_i a_i f_i(g).
  double semi_dual(const std::vector<double>& f, const std::vector<double>& g) const {
    double v = 0;
    for (std::size_t k = 0; k < a.size(); ++k) v += a[k] * f[k] + b[k] * g[k];
    return v;
  }
};

/// Solves the symmetric positive definite system A x = r in place (A is
/// n x n row-major) by Cholesky. Returns false if A is not numerically SPD.
inline bool cholesky_solve(std::vector<double>& A, std::vector<double>& r, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = A[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= A[j * n + k] * A[j * n + k];
    if (!(d > 0)) return false;
    d = std::sqrt(d);
    A[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = A[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= A[i * n + k] * A[j * n + k];
      A[i * n + j] = s / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = r[i];
    for (std::size_t k = 0; k < i; ++k) s -= A[i * n + k] * r[k];
    r[i] = s / A[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = r[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= A[k * n + i] * r[k];
    r[i] = s / A[i * n + i];
  }
  return true;
}

/// Column L1 error of the plan for (f, g); fills the plan and column sums.
inline double column_error(const EntropicDual& d, const std::vector<double>& f, const std::vector<double>& g,
                           std::vector<double>& T, std::vector<double>& c) {
  const std::size_t n = d.a.size();
  std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[j] += (T[i * n + j] = d.plan(i, j, f, g));
  }
  double err = 0;
  for (std::size_t j = 0; j < n; ++j) err += std::abs(d.b[j] - c[j]);
  return err;
}

inline constexpr std::size_t kNewtonMaxSteps = 50;

/// Damped Newton ascent on the semi-dual in g, with f the exact row
/// transform of g. Updates f, g and returns the final column L1 error, or a
/// negative value when it stalls.
inline double newton_refine(const EntropicDual& d, std::vector<double>& f, std::vector<double>& g, double tol,
                            std::size_t& budget, std::size_t max_iter) {
  const std::size_t n = d.a.size();
  std::vector<double> T(n * n), c(n), T_try(n * n), c_try(n), H, rhs, step(n), g_try(n), f_try(n);
  // Gauge: the potential of the heaviest column stays fixed.
  const std::size_t pin = static_cast<std::size_t>(std::max_element(d.b.begin(), d.b.end()) - d.b.begin());
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < n; ++j) {
    if (j != pin) cols.push_back(j);
  }
  const std::size_t m = cols.size();
  std::vector<double> scale(m);
  d.rows(g, f);
  double value = d.semi_dual(f, g);
  double err = column_error(d, f, g, T, c);
  for (std::size_t k = 0;; ++k) {
    if (err < tol || m == 0) return err;
    if (k == kNewtonMaxSteps || budget >= max_iter) return -1;
    ++budget;

    // (diag(c) - T^T diag(1/a) T) step = e (b - c) over the unpinned columns,
    // Jacobi-scaled by sqrt(c) for conditioning.
    H.assign(m * m, 0.0);
    rhs.assign(m, 0.0);
    for (std::size_t u = 0; u < m; ++u) scale[u] = 1.0 / std::sqrt(c[cols[u]]);
    for (std::size_t i = 0; i < n; ++i) {
      const double inv_a = 1.0 / d.a[i];
      for (std::size_t u = 0; u < m; ++u) {
        const double tu = T[i * n + cols[u]] * scale[u] * inv_a;
        if (tu == 0) continue;
        for (std::size_t v = 0; v <= u; ++v) H[u * m + v] -= tu * T[i * n + cols[v]] * scale[v];
      }
    }
    for (std::size_t u = 0; u < m; ++u) {
      H[u * m + u] += 1.0 + 1e-12;  // scaled diag(c), plus a rounding ridge
      for (std::size_t v = 0; v < u; ++v) H[v * m + u] = H[u * m + v];
      rhs[u] = d.e * (d.b[cols[u]] - c[cols[u]]) * scale[u];
    }
    if (!cholesky_solve(H, rhs, m)) return -1;
    std::fill(step.begin(), step.end(), 0.0);
    double slope = 0;
    for (std::size_t u = 0; u < m; ++u) {
      step[cols[u]] = rhs[u] * scale[u];
      slope += step[cols[u]] * (d.b[cols[u]] - c[cols[u]]);
    }
    if (!(slope > 0)) return -1;

    // Near the optimum the gain in the dual value drops below rounding, so a
    // step that shrinks the residual is accepted as well.
    bool moved = false;
    for (double t = 1.0; t > 1e-10; t *= 0.5) {
      for (std::size_t j = 0; j < n; ++j) g_try[j] = g[j] + t * step[j];
      d.rows(g_try, f_try);
      const double v = d.semi_dual(f_try, g_try);
      const double e_try = column_error(d, f_try, g_try, T_try, c_try);
      if (e_try < (1.0 - 0.25 * t) * err || (v >= value + 1e-4 * t * slope && e_try < err)) {
        g.swap(g_try);
        f.swap(f_try);
        T.swap(T_try);
        c.swap(c_try);
        value = v;
        err = e_try;
        moved = true;
        break;
      }
    }
    if (!moved) return -1;
  }
}

}  // namespace detail

/// Entropy-regularized OT in the log domain.
///
/// The plan is T_ij = exp((f_i + g_j - M_ij) / eps) a_i b_j, which equals
/// diag(u) K diag(v) with K = exp(-M/eps). Sinkhorn sweeps run through an
/// annealed sequence of regularizations; once close, damped Newton steps on
/// the dual finish the solve. Non-convergence is reported in the result
/// rather than thrown.
inline SinkhornResult ot_sinkhorn(const DepthDistribution& p, const DepthDistribution& q, const CostMatrix& cost,
                                  const SinkhornOptions& opt = {}) {
  detail::check_same_grid(p, q);
  const std::size_t n = p.size();
  if (cost.n != n) throw std::invalid_argument("cost matrix size does not match the distributions");
  const double eps = opt.resolve_epsilon(cost);
  const std::vector<double> a = detail::floor_and_renormalize(p.mass, opt.mass_floor);
  const std::vector<double> b = detail::floor_and_renormalize(q.mass, opt.mass_floor);
  detail::EntropicDual dual(cost, a, b);

  SinkhornResult r;
  r.epsilon = eps;
  r.f.assign(n, 0.0);
  r.g.assign(n, 0.0);
  std::vector<double> f_next(n);

  dual.e = opt.annealing ? std::max(eps, cost.max()) : eps;
  bool newton_failed = !opt.newton;
  for (;;) {
    const bool last = dual.e == eps;
    const double target = last ? (newton_failed ? opt.tol : std::max(opt.tol, opt.newton_switch)) : opt.stage_tol;
    bool done = false;
    while (r.iterations < opt.max_iter) {
      dual.rows(r.g, f_next);
      if (r.iterations > 0) {
        // Columns are exact after the g update; row i sums to a_i exp((f_i - f_next_i) / e).
        double err = 0;
        for (std::size_t i = 0; i < n; ++i) err += a[i] * std::abs(std::expm1((r.f[i] - f_next[i]) / dual.e));
        r.marginal_violation = err;
        if (err < target) {
          done = true;
          break;
        }
      }
      r.f = f_next;
      dual.cols(r.f, r.g);
      ++r.iterations;
    }
    if (last && done && !newton_failed && r.marginal_violation >= opt.tol) {
      std::vector<double> f = r.f, g = r.g;
      const double err = detail::newton_refine(dual, f, g, opt.tol, r.iterations, opt.max_iter);
      if (err >= 0 && err < opt.tol) {
        r.f = std::move(f);
        r.g = std::move(g);
        r.marginal_violation = err;
      } else {
        newton_failed = true;  // finish with plain sweeps
        continue;
      }
    }
    if (last || !done) {
      r.converged = last && done;
      break;
    }
    dual.e = std::max(eps, dual.e * 0.5);
  }

  r.plan = detail::empty_plan(a, b);
  double mass = 0, fa = 0, gb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fa += r.f[i] * a[i];
    gb += r.g[i] * b[i];
    for (std::size_t j = 0; j < n; ++j) {
      const double t = dual.plan(i, j, r.f, r.g);
      r.plan.flow[i * n + j] = t;
      mass += t;
    }
  }
  r.cost = r.plan.cost(cost);
  r.regularized_cost = fa + gb - eps * (mass - 1.0);
  r.marginal_violation = r.plan.marginal_violation();
  r.converged = r.converged && r.marginal_violation < opt.tol;
  return r;
}

}  // namespace depthot
