#include <CLI11.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "depthot/gradcheck.hpp"
#include "depthot/io.hpp"
#include "depthot/losses.hpp"
#include "depthot/mask.hpp"
#include "depthot/otdl.hpp"
#include "depthot/toytrain.hpp"

namespace fs = std::filesystem;
using namespace depthot;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kError = 2 };

struct Common {
  std::uint64_t seed = 42;
  std::string out;
  std::string config;  // consumed by inject_config before parsing
};

void add_common(CLI::App* sub, Common& c, const std::string& default_out) {
  c.out = default_out;
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  sub->add_option("--config", c.config, "key=value file; command-line flags take precedence");
}

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
  for (const std::string& a : args) {
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  }
  return false;
}

// Replaces --config <path> by --key=value for every key in the file that is
// not already on the command line. Unknown keys then fail like unknown flags.
std::vector<std::string> inject_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;
  if (!fs::exists(path)) throw std::runtime_error("config file not found: " + path);
  std::vector<std::string> extra;
  for (const CLI::ConfigItem& item : CLI::ConfigINI().from_file(path)) {
    if (item.name == "++" || item.name == "--" || item.name == "config") continue;  // section markers
    if (!item.parents.empty()) throw std::runtime_error("config sections are not supported: " + item.fullname());
    const std::string flag = "--" + item.name;
    if (has_flag(args, flag)) continue;
    std::string value;
    for (std::size_t k = 0; k < item.inputs.size(); ++k) value += (k ? "," : "") + item.inputs[k];
    if (value.empty()) continue;  // unset optional path
    extra.push_back(flag + "=" + value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

// Resolved settings, written next to the outputs so a run can be replayed
// with --config.
void echo_config(const CLI::App& sub, const Common& c) {
  std::cerr << sub.get_name() << ": seed=" << c.seed << '\n';
  if (c.out.empty()) return;
  fs::create_directories(c.out);
  std::string text;
  std::istringstream lines(sub.config_to_str(true, false));
  for (std::string line; std::getline(lines, line);) {
    // The output directory is where a run goes, not part of what it computes.
    const bool skip = line.rfind("config=", 0) == 0 || line.rfind("out=", 0) == 0 || line.find("=\"\"") != std::string::npos;
    if (!skip) text += line + '\n';
  }
  write_file_atomic(fs::path(c.out) / "config.txt", text);
}

void add_grid_options(CLI::App* sub, OtdlConfig& cfg) {
  sub->add_option("--bins", cfg.grid.bins, "Number of depth bins")->capture_default_str();
  sub->add_option("--lo", cfg.grid.lo, "Lower edge of the bin range")->capture_default_str();
  sub->add_option("--hi", cfg.grid.hi, "Upper edge of the bin range")->capture_default_str();
  sub->add_option("--softness", cfg.softness, "0 for hard bins, > 0.5 for triangular soft bins")->capture_default_str();
  sub->add_option("--epsilon-scale", cfg.sinkhorn.epsilon_scale, "Sinkhorn epsilon as a fraction of max cost")
      ->capture_default_str();
  sub->add_option("--sinkhorn-tol", cfg.sinkhorn.tol, "Sinkhorn L1 marginal tolerance")->capture_default_str();
  sub->add_option("--max-iter", cfg.sinkhorn.max_iter, "Sinkhorn iteration cap")->capture_default_str();
}

std::string with_header(const char* header, const std::string& rows) { return std::string(header) + '\n' + rows; }

// gradcheck ----------------------------------------------------------------

struct GradcheckArgs {
  Common common;
  std::string scope = "all";
  gradcheck::Options opt;
};

int run_gradcheck(const CLI::App& sub, GradcheckArgs& a) {
  a.opt.seed = a.common.seed;
  echo_config(sub, a.common);
  const gradcheck::Report rep = gradcheck::run(gradcheck::parse_scope(a.scope), a.opt);
  write_file_atomic(fs::path(a.common.out) / "gradcheck.csv", gradcheck::to_csv(rep.rows));
  std::size_t failed = 0;
  for (const gradcheck::Row& r : rep.rows) {
    if (r.pass()) continue;
    ++failed;
    std::cerr << "FAIL " << r.name << " analytic=" << format_number(r.analytic) << " numeric=" << format_number(r.numeric)
              << " rel_err=" << format_number(r.rel_err) << '\n';
  }
  std::cerr << rep.rows.size() << " checks, " << failed << " failed, " << rep.skipped << " redrawn at kinks\n";
  return failed ? kCheckFailed : kOk;
}

// otdl ---------------------------------------------------------------------

struct OtdlArgs {
  Common common;
  std::string pred, gt, solver = "exact1d", plan;
  OtdlConfig cfg;
};

int run_otdl(const CLI::App& sub, OtdlArgs& a) {
  a.cfg.solver = parse_solver(a.solver);
  echo_config(sub, a.common);
  const OtdlSolution s = otdl_solve(read_dten(a.pred), read_dten(a.gt), a.cfg);
  if (s.sinkhorn && !s.sinkhorn->converged) {
    std::cerr << "sinkhorn did not converge: marginal violation " << format_number(s.sinkhorn->marginal_violation)
              << " after " << s.sinkhorn->iterations << " iterations\n";
  }
  const std::string cost = format_number(s.result.cost);
  std::cout << cost << '\n';
  if (!a.common.out.empty()) write_file_atomic(fs::path(a.common.out) / "otdl.txt", cost + '\n');
  if (!a.plan.empty()) write_dten(a.plan, s.result.plan.to_tensor());
  return s.sinkhorn && !s.sinkhorn->converged ? kCheckFailed : kOk;
}

// toytrain -----------------------------------------------------------------

struct ToyTrainArgs {
  Common common;
  std::vector<std::string> losses{"mse", "otdl", "both"};
  ToyTrainConfig cfg;
};

int run_toytrain(const CLI::App& sub, ToyTrainArgs& a) {
  a.cfg.seed = a.common.seed;
  a.cfg.losses.clear();
  for (const std::string& l : a.losses) a.cfg.losses.push_back(parse_loss(l));
  echo_config(sub, a.common);
  const std::vector<ToyTrainRun> runs = toy_train(a.cfg);
  const fs::path out(a.common.out);
  std::string ablation;
  for (const ToyTrainRun& r : runs) {
    const std::string name = to_string(r.loss);
    std::string curve = "step,loss\n";
    for (std::size_t k = 0; k < r.curve.size(); ++k) curve += std::to_string(k) + ',' + format_number(r.curve[k]) + '\n';
    write_file_atomic(out / ("curve_" + name + ".csv"), curve);
    write_file_atomic(out / ("metrics_" + name + ".csv"), with_header(MetricReport::kCsvHeader, r.metrics.csv_row() + '\n'));
    ablation += r.csv_row() + '\n';
    std::cerr << name << ": loss " << format_number(r.initial_loss) << " -> " << format_number(r.final_loss)
              << ", held-out OT " << format_number(r.ot_distance) << '\n';
  }
  write_file_atomic(out / "ablation.csv", with_header(ToyTrainRun::kCsvHeader, ablation));
  return kOk;
}

// masksweep ----------------------------------------------------------------

struct MaskSweepArgs {
  Common common;
  std::string predictor = "cnn_toy", mode = "network";
  ToySweepConfig cfg;
};

int run_masksweep(const CLI::App& sub, MaskSweepArgs& a) {
  a.cfg.predictor = parse_predictor(a.predictor);
  a.cfg.sweep.mask.mode = parse_mask_mode(a.mode);
  a.cfg.sweep.seed = a.common.seed;
  echo_config(sub, a.common);
  const ToySweep sw = toy_sweep(a.cfg);
  const fs::path out(a.common.out);
  std::string rows;
  for (std::size_t k = 0; k < sw.reports.size(); ++k) {
    const SparsityReport& r = sw.reports[k];
    rows += r.csv_row() + '\n';
    const std::string stem = "mask_" + std::to_string(k);
    write_pgm(out / (stem + ".pgm"), r.mask);
    write_dten(out / (stem + ".dten"), r.mask);
    write_dten(out / ("output_" + std::to_string(k) + ".dten"), r.output);
  }
  write_file_atomic(out / "masksweep.csv", with_header(SparsityReport::kCsvHeader, rows));
  write_dten(out / "image.dten", sw.scene.image);
  write_dten(out / "depth.dten", sw.scene.depth);
  write_dten(out / "full.dten", sw.net.predict(sw.scene.image));
  std::cerr << to_string(a.cfg.predictor) << ": pretrain loss " << format_number(sw.pretrain_curve.front()) << " -> "
            << format_number(sw.pretrain_curve.back()) << '\n';
  return kOk;
}

// eval ---------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string pred, gt, mask;
};

int run_eval(const CLI::App& sub, EvalArgs& a) {
  echo_config(sub, a.common);
  std::optional<Tensor> mask;
  if (!a.mask.empty()) mask = read_dten(a.mask);
  const MetricReport m = evaluate(read_dten(a.pred), read_dten(a.gt), mask);
  const std::string csv = with_header(MetricReport::kCsvHeader, m.csv_row() + '\n');
  std::cout << csv;
  if (!a.common.out.empty()) write_file_atomic(fs::path(a.common.out) / "metrics.csv", csv);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth optimal-transport toolkit"};
  app.require_subcommand(1);

  GradcheckArgs gc;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference audit of every differentiable operation");
  add_common(gc_cmd, gc.common, "gradcheck_out");
  gc_cmd->add_option("--scope", gc.scope, "tensor, dgr, losses, otdl, mask or all")->capture_default_str();
  gc_cmd->add_option("--instances", gc.opt.instances, "Random instances per operation")->capture_default_str();
  gc_cmd->add_option("--step", gc.opt.step, "Central-difference step")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.opt.tolerance, "Relative error bound")->capture_default_str();
  gc_cmd->add_option("--otdl-step", gc.opt.otdl_step, "Step for Sinkhorn-backed checks")->capture_default_str();
  gc_cmd->add_option("--otdl-tolerance", gc.opt.otdl_tolerance, "Bound for Sinkhorn-backed checks")
      ->capture_default_str();

  OtdlArgs ot;
  CLI::App* ot_cmd = app.add_subcommand("otdl", "OT cost between the depth histograms of two DTEN maps");
  add_common(ot_cmd, ot.common, "");
  ot_cmd->add_option("--pred", ot.pred, "Predicted depth (DTEN)")->required();
  ot_cmd->add_option("--gt", ot.gt, "Reference depth (DTEN)")->required();
  ot_cmd->add_option("--solver", ot.solver, "exact1d, sinkhorn or lp")->capture_default_str();
  ot_cmd->add_option("--plan", ot.plan, "Write the coupling here (DTEN)");
  add_grid_options(ot_cmd, ot.cfg);

  ToyTrainArgs tt;
  CLI::App* tt_cmd = app.add_subcommand("toytrain", "Loss ablation of a toy predictor on synthetic scenes");
  add_common(tt_cmd, tt.common, "toytrain_out");
  tt_cmd->add_flag("--dgr", tt.cfg.with_dgr, "Insert the DGR block");
  tt_cmd->add_option("--loss", tt.losses, "mse, otdl, both (repeatable)")->capture_default_str()->delimiter(',');
  tt_cmd->add_option("--steps", tt.cfg.steps, "Optimizer steps")->capture_default_str();
  tt_cmd->add_option("--batch", tt.cfg.batch, "Scenes per step")->capture_default_str();
  tt_cmd->add_option("--train-scenes", tt.cfg.train_scenes, "Training scenes")->capture_default_str();
  tt_cmd->add_option("--eval-scenes", tt.cfg.eval_scenes, "Held-out scenes")->capture_default_str();
  tt_cmd->add_option("--image-size", tt.cfg.image_size, "Scene height and width")->capture_default_str();
  tt_cmd->add_option("--lr", tt.cfg.lr, "Adam learning rate")->capture_default_str();
  tt_cmd->add_option("--lambda-otdl", tt.cfg.lambda_otdl, "Weight of the OT term in the combined loss")
      ->capture_default_str();
  add_grid_options(tt_cmd, tt.cfg.otdl);

  MaskSweepArgs ms;
  CLI::App* ms_cmd = app.add_subcommand("masksweep", "Sparse-pixel masks of a toy predictor across lambda");
  add_common(ms_cmd, ms.common, "masksweep_out");
  ms_cmd->add_option("--predictor", ms.predictor, "cnn_toy or attn_toy")->capture_default_str();
  ms_cmd->add_option("--lambdas", ms.cfg.lambdas, "Ascending sparsity weights")->capture_default_str()->delimiter(',');
  ms_cmd->add_option("--mode", ms.mode, "network or free")->capture_default_str();
  ms_cmd->add_option("--steps", ms.cfg.sweep.steps, "Mask optimization steps")->capture_default_str();
  ms_cmd->add_option("--lr", ms.cfg.sweep.lr, "Mask learning rate")->capture_default_str();
  ms_cmd->add_option("--threshold", ms.cfg.sweep.threshold, "Binarization threshold")->capture_default_str();
  ms_cmd->add_option("--train-scenes", ms.cfg.train_scenes, "Scenes for auto-training the predictor")
      ->capture_default_str();
  ms_cmd->add_option("--pretrain-steps", ms.cfg.pretrain.steps, "Predictor training steps")->capture_default_str();

  EvalArgs ev;
  CLI::App* ev_cmd = app.add_subcommand("eval", "Depth metrics of a prediction against ground truth");
  add_common(ev_cmd, ev.common, "");
  ev_cmd->add_option("--pred", ev.pred, "Predicted depth (DTEN)")->required();
  ev_cmd->add_option("--gt", ev.gt, "Reference depth (DTEN)")->required();
  ev_cmd->add_option("--mask", ev.mask, "Validity mask (DTEN, 0/1)");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = inject_config(std::move(args));
    std::reverse(args.begin(), args.end());  // CLI11 takes the vector back to front
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }

  try {
    if (*gc_cmd) return run_gradcheck(*gc_cmd, gc);
    if (*ot_cmd) return run_otdl(*ot_cmd, ot);
    if (*tt_cmd) return run_toytrain(*tt_cmd, tt);
    if (*ms_cmd) return run_masksweep(*ms_cmd, ms);
    if (*ev_cmd) return run_eval(*ev_cmd, ev);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return kError;
}
