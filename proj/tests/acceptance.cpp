// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "depthot/dgr.hpp"
#include "depthot/io.hpp"
#include "depthot/losses.hpp"
#include "depthot/otdl.hpp"
#include "depthot/stencil.hpp"
#include "depthot/transport.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace depthot;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DEPTHOT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

// Column `name` of a CSV with a header row, as numbers.
std::vector<double> column(const std::vector<std::vector<std::string>>& rows, const std::string& name) {
  std::vector<double> out;
  if (rows.empty()) return out;
  std::size_t k = 0;
  while (k < rows[0].size() && rows[0][k] != name) ++k;
  for (std::size_t r = 1; r < rows.size(); ++r) out.push_back(k < rows[r].size() ? std::stod(rows[r][k]) : NAN);
  return out;
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const fs::path other = b / e.path().filename();
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
      why = e.path().filename().string() + " differs";
      return false;
    }
    ++n;
  }
  std::size_t m = std::distance(fs::directory_iterator(b), fs::directory_iterator{});
  if (n != m || n == 0) {
    why = "file sets differ";
    return false;
  }
  return true;
}

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

DepthDistribution random_dist(std::size_t n, std::mt19937_64& rng, double zero_prob = 0.2) {
  const BinGrid grid{0.0, 10.0, n};
  DepthDistribution d;
  for (std::size_t i = 0; i < n; ++i) d.centers.push_back(grid.center(i));
  d.mass = oracle::random_histogram(n, rng, zero_prob);
  return d;
}

Outcome gradient_audit() {
  Outcome o;
  const auto t0 = Clock::now();
  const int code = run_cli("gradcheck --scope all --out acc_gradcheck");
  const double secs = seconds_since(t0);
  const auto rows = read_csv("acc_gradcheck/gradcheck.csv");
  std::map<std::string, int> per_op;
  for (std::size_t r = 1; r < rows.size(); ++r) ++per_op[rows[r][0].substr(0, rows[r][0].find('#'))];
  int fewest = per_op.empty() ? 0 : 1 << 30;
  for (auto& [name, n] : per_op) fewest = std::min(fewest, n);
  o.require(code == 0, "gradcheck reported failures");
  o.require(fewest >= 20, "an operation has fewer than 20 instances");
  o.require(secs < 300, "runtime over 5 minutes");
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(rows.size() - 1) + " checks over " +
              std::to_string(per_op.size()) + " ops, min " + std::to_string(fewest) + " each, " +
              format_number(std::round(secs * 10) / 10) + " s";
  return o;
}

Outcome solver_consistency() {
  Outcome o;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> bins(2, 16);
  double worst_exact = 0, worst_rel = 0, worst_sk_violation = 0, worst_lp_violation = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = bins(rng);
    // Full support: a relative gap is undefined when both histograms share one occupied bin.
    const DepthDistribution p = random_dist(n, rng, 0.0), q = random_dist(n, rng, 0.0);
    const CostMatrix m = cost_matrix(p.centers);
    const TransportResult exact = ot_exact_1d(p, q), lp = ot_lp(p, q, m);
    SinkhornOptions so;
    so.epsilon_scale = 1e-3;
    so.tol = 1e-9;
    so.max_iter = 100000;
    const SinkhornResult sk = ot_sinkhorn(p, q, m, so);
    worst_exact = std::max(worst_exact, std::abs(exact.cost - lp.cost));
    worst_rel = std::max(worst_rel, std::abs(sk.cost - lp.cost) / std::max(lp.cost, 1e-300));
    worst_sk_violation = std::max(worst_sk_violation, sk.plan.marginal_violation());
    worst_lp_violation = std::max({worst_lp_violation, lp.plan.marginal_violation(), exact.plan.marginal_violation()});
    o.require(sk.converged, "sinkhorn did not converge");
  }
  o.require(worst_exact <= 1e-9, "exact_1d and lp disagree");
  o.require(worst_rel <= 0.01, "sinkhorn beyond 1% of lp");
  o.require(worst_sk_violation < 1e-9, "sinkhorn marginal violation above tolerance");
  o.require(worst_lp_violation < 1e-12, "exact plan marginal violation");
  std::ostringstream d;
  d << "max |exact-lp| " << worst_exact << ", max sinkhorn rel gap " << worst_rel << ", max violations sinkhorn "
    << worst_sk_violation << " exact " << worst_lp_violation;
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

Outcome metric_properties() {
  Outcome o;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> bins(2, 16);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = bins(rng);
    const DepthDistribution p = random_dist(n, rng), q = random_dist(n, rng), r = random_dist(n, rng);
    const CostMatrix m = cost_matrix(p.centers);
    for (auto solve : {std::function<double(const DepthDistribution&, const DepthDistribution&)>(
                           [](const auto& a, const auto& b) { return ot_exact_1d(a, b).cost; }),
                       std::function<double(const DepthDistribution&, const DepthDistribution&)>(
                           [&m](const auto& a, const auto& b) { return ot_lp(a, b, m).cost; })}) {
      const double pp = solve(p, p), pq = solve(p, q), qp = solve(q, p), qr = solve(q, r), pr = solve(p, r);
      const double tri = std::sqrt(pr) - std::sqrt(pq) - std::sqrt(qr);
      worst = std::max({worst, std::abs(pp), std::abs(pq - qp), tri});
    }
  }
  o.require(worst <= 1e-9, "metric property violated");
  std::ostringstream d;
  d << "worst slack used " << worst << " over 100 triples (exact_1d and lp)";
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

Outcome stencil_exactness() {
  Outcome o;
  const std::size_t h = 12, w = 14;
  Tensor bowl(Shape{1, h, w}), cubic(Shape{1, h, w}), constant(Shape{1, h, w}, 3.25), affine(Shape{1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      bowl.at(0, y, x) = fx * fx + fy * fy;
      cubic.at(0, y, x) = fx * fx * fx;
      affine.at(0, y, x) = 0.5 - 1.5 * fx + 2.0 * fy;
    }
  }
  double worst = 0;
  const auto interior = [&](const Tensor& t, std::size_t r, double expect) {
    for (std::size_t y = r; y + r < h; ++y) {
      for (std::size_t x = r; x + r < w; ++x) worst = std::max(worst, std::abs(t.at(0, y, x) - expect));
    }
  };
  interior(laplacian(bowl), 1, 4.0);
  interior(third_order_x(cubic), 2, 6.0);
  interior(laplacian(affine), 1, 0.0);
  interior(third_order(affine), 2, 0.0);
  for (const Tensor held = laplacian(constant); double v : held.data()) worst = std::max(worst, std::abs(v));
  for (const Tensor held = third_order(constant); double v : held.data()) worst = std::max(worst, std::abs(v));
  o.require(worst <= 1e-12, "stencil residual above 1e-12");
  std::ostringstream d;
  d << "max residual " << worst;
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

Outcome dgr_contracts() {
  Outcome o;
  std::mt19937_64 rng(5);
  int shapes = 0;
  for (std::size_t c : {1, 4, 8, 16}) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{5, 5}, {7, 9}, {16, 12}}) {
      dgr::Config cfg{c, std::min<std::size_t>(4, c), 2};
      const ParamSet params = dgr::make_params(cfg, rng);
      const Tensor x = Tensor::uniform(Shape{c, h, w}, -2, 2, rng);
      o.require(dgr::forward(x, params, cfg).shape() == x.shape(), "output shape differs from input");
      const Tensor weights = dgr::channel_weights(dgr::merge(x), params);
      for (double v : weights.data()) o.require(v > 0 && v < 1, "channel weight outside (0,1)");
      for (const Tensor held = dgr::channel_weights(dgr::merge(x), dgr::zero_params(cfg)); double v : held.data()) {
        o.require(v == 0.5, "zero-parameter channel weight is not 0.5");
      }
      for (const Tensor held = dgr::forward(Tensor(Shape{c, h, w}), params, cfg); double v : held.data()) {
        o.require(v == 0.0, "zero input with zero biases gives nonzero output");
      }
      ++shapes;
    }
  }
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(shapes) + " (C,H,W) shapes";
  return o;
}

Outcome loss_identities() {
  Outcome o;
  std::mt19937_64 rng(6);
  const Tensor g = Tensor::uniform(Shape{9, 11}, 0.5, 9.5, rng), other = Tensor::uniform(Shape{9, 11}, 0.5, 9.5, rng);
  const LossBreakdown c = composite_loss(g, g);
  o.require(c.total == 3.0 * std::log(0.5) && c.normal_term == 0.0, "composite_loss at identity");
  double si_err = 0;
  for (double k : {-0.7, 0.1, 1.3}) {
    Tensor p = g;
    for (double& v : p.data()) v *= std::exp(k);
    si_err = std::max(si_err, std::abs(si_loss(p, g) - k * k / 2));
  }
  o.require(si_err < 1e-12, "si_loss at log offset");
  o.require(combined_loss(other, g, 0.0) == mse(other, g), "combined_loss with zero weight differs from mse");
  const MetricReport e = evaluate(g, g);
  o.require(e.abs_rel == 0 && e.rms == 0 && e.log10 == 0 && e.delta1 == 1, "evaluate at identity");
  std::ostringstream d;
  d << "composite " << c.total << ", si_loss max err " << si_err;
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

const char* kSweepArgs = " --lambdas 1,2,3,4,5,6 --seed 42";

Outcome table1_trend() {
  Outcome o;
  const auto t0 = Clock::now();
  std::ostringstream d;
  for (const char* p : {"cnn_toy", "attn_toy"}) {
    const int code = run_cli(std::string("masksweep --predictor ") + p + kSweepArgs + " --out acc_masksweep_" + p);
    o.require(code == 0, std::string("masksweep failed for ") + p);
    const auto rows = read_csv(std::string("acc_masksweep_") + p + "/masksweep.csv");
    const std::vector<double> s = column(rows, "sparseness"), r = column(rows, "rmse_vs_full");
    o.require(s.size() == 6, "expected six sweep rows");
    int inversions = 0;
    bool rmse_monotone = true;
    for (std::size_t i = 1; i < s.size(); ++i) {
      inversions += s[i] > s[i - 1];
      rmse_monotone = rmse_monotone && r[i] >= r[i - 1];
    }
    o.require(inversions <= 1, std::string("sparseness not monotone for ") + p);
    o.require(rmse_monotone, std::string("rmse_vs_full decreases for ") + p);
    d << p << " sparseness";
    for (double v : s) d << ' ' << v;
    d << " rmse";
    for (double v : r) d << ' ' << v;
    d << "; ";
  }
  const double secs = seconds_since(t0);
  o.require(secs < 600, "runtime over 10 minutes");
  d << std::round(secs) << " s";
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

Outcome table3_shape() {
  Outcome o;
  const auto t0 = Clock::now();
  const int code = run_cli("toytrain --seed 42 --out acc_toytrain");
  const double secs = seconds_since(t0);
  o.require(code == 0, "toytrain failed");
  const auto rows = read_csv("acc_toytrain/ablation.csv");
  o.require(rows.size() == 4 && rows[1][0] == "mse" && rows[2][0] == "otdl" && rows[3][0] == "both",
            "ablation rows are not mse/otdl/both");
  const std::vector<double> ot = column(rows, "ot_distance"), init = column(rows, "initial_loss"),
                            fin = column(rows, "final_loss");
  std::ostringstream d;
  if (ot.size() == 3) {
    o.require(ot[2] <= ot[0], "combined OT distance above mse");
    for (std::size_t i = 0; i < 3; ++i) o.require(fin[i] <= 0.5 * init[i], "a run reduced its loss by under 50%");
    d << "OT mse " << ot[0] << " otdl " << ot[1] << " both " << ot[2] << ", loss ratios " << fin[0] / init[0] << ' '
      << fin[1] / init[1] << ' ' << fin[2] / init[2] << ", ";
  }
  o.require(secs < 600, "runtime over 10 minutes");
  d << std::round(secs) << " s";
  o.detail += (o.detail.empty() ? "" : "; ") + d.str();
  return o;
}

Outcome determinism() {
  Outcome o;
  std::mt19937_64 rng(9);
  write_dten("acc_pred.dten", Tensor::uniform(Shape{16, 16}, 1, 9, rng));
  write_dten("acc_gt.dten", Tensor::uniform(Shape{16, 16}, 1, 9, rng));
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gradcheck --scope all", "gradcheck"},
      {"otdl --pred acc_pred.dten --gt acc_gt.dten --solver sinkhorn --softness 1", "otdl"},
      {"eval --pred acc_pred.dten --gt acc_gt.dten", "eval"},
      {"toytrain --seed 42", "toytrain"},
      {std::string("masksweep --predictor cnn_toy") + kSweepArgs, "masksweep"},
  };
  int compared = 0;
  for (const auto& [args, tag] : commands) {
    const std::string a = "acc_det_" + tag + "_a", b = "acc_det_" + tag + "_b";
    fs::remove_all(a);
    fs::remove_all(b);
    o.require(run_cli(args + " --out " + a) == 0 && run_cli(args + " --out " + b) == 0, tag + " failed");
    std::string why;
    const bool same = same_tree(a, b, why);
    o.require(same, tag + ": " + why);
    compared += static_cast<int>(std::distance(fs::directory_iterator(a), fs::directory_iterator{}));
  }
  o.detail += (o.detail.empty() ? "" : "; ") + std::to_string(compared) + " files byte-identical across reruns of " +
              std::to_string(commands.size()) + " commands";
  return o;
}

}  // namespace

int main() {
  const std::vector<std::function<Outcome()>> criteria{gradient_audit,    solver_consistency, metric_properties,
                                                        stencil_exactness, dgr_contracts,      loss_identities,
                                                        table1_trend,      table3_shape,       determinism};
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    all = all && o.pass;
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
