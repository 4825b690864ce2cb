#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lrlab/analytics.hpp"
#include "lrlab/checkpoint.hpp"
#include "lrlab/config.hpp"
#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/metrics_io.hpp"
#include "lrlab/trainer.hpp"
#include "lrlab/verify.hpp"

namespace lrlab::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitNumeric = 2;

std::string num(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08zu.ckpt", step);
  return buf;
}

// --out, then output.dir, then $LRLAB_OUT (or ./runs) / <config stem>.
fs::path resolve_out_dir(const std::string& flag, const RunConfig& cfg, const std::string& config_path) {
  if (!flag.empty()) return flag;
  if (!cfg.output.dir.empty()) return cfg.output.dir;
  const char* env = std::getenv("LRLAB_OUT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  return root / fs::path(config_path).stem();
}

// A checkpoint's run config: explicit path, or config.json beside the
// checkpoint or in its parent directory.
RunConfig config_for_checkpoint(const std::string& explicit_path, const std::string& ckpt_path) {
  if (!explicit_path.empty()) return load_config(explicit_path);
  const fs::path dir = fs::path(ckpt_path).parent_path();
  for (const fs::path& candidate : {dir / "config.json", dir.parent_path() / "config.json"}) {
    if (fs::exists(candidate)) return load_config(candidate.string());
  }
  throw ConfigError("no config.json found next to '" + ckpt_path + "'; pass --config");
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& args, bool switch_mode, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(args.config);
  if (args.seed) cfg.train.seed = *args.seed;
  if (switch_mode) {
    if (!cfg.switch_policy) cfg.switch_policy = default_switch_policy(cfg.train.steps);
    cfg.switch_policy->validate(cfg.train.steps);
  } else if (cfg.switch_policy) {
    err << "note: 'switch' section ignored by the train subcommand\n";
    cfg.switch_policy.reset();
  }
  const fs::path dir = resolve_out_dir(args.out, cfg, args.config);
  cfg.output.dir = dir.string();
  fs::create_directories(dir / "checkpoints");
  write_text(dir / "config.json", materialize_config(cfg));

  const DataSplit data = make_dataset(cfg.data);
  const Digest digest = architecture_digest(cfg.model);

  RunOptions options;
  if (!args.resume.empty()) {
    Checkpoint ck = load_checkpoint(args.resume);
    if (ck.digest != digest) {
      err << "warning: checkpoint '" << args.resume
          << "' was written for a different architecture digest\n";
    }
    options.initial_params = std::move(ck.params);
    options.start_step = static_cast<std::size_t>(ck.step);
    if (options.start_step >= cfg.train.steps) {
      throw ConfigError("checkpoint step " + std::to_string(ck.step) + " is not before train.steps");
    }
  }

  MetricsWriter writer((dir / "metrics.jsonl").string());
  options.hooks.on_metric = [&](const MetricRecord& r) { writer.write(r); };
  options.hooks.on_checkpoint = [&](const RunState& s) {
    save_checkpoint({s.step, digest, s.params}, (dir / "checkpoints" / checkpoint_name(s.step)).string());
  };

  const RunResult result = switch_mode
                               ? pretrain_switch(cfg.model, cfg.train, *cfg.switch_policy, data, options)
                               : train(cfg.model, cfg.train, data, options);
  save_checkpoint({cfg.train.steps, digest, result.final_params}, (dir / "final.ckpt").string());

  const MetricRecord& last = result.metrics.back();
  out << "run directory: " << dir.string() << "\n";
  if (result.switch_step) out << "switched to low rank at step " << *result.switch_step << "\n";
  out << "final step " << last.step << ": eval_loss " << num(last.eval_loss) << ", eval_acc "
      << num(last.eval_acc) << "\n";
  return kExitOk;
}

int cmd_analyze_rank(const std::string& ckpt_path, const std::string& config_path,
                     const std::string& out_dir, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  EffectiveRankReport rep;
  if (!config_path.empty()) {
    rep = effective_rank_report(load_config(config_path).model, ck.params);
  } else {
    rep = effective_rank_report(ck.params);
  }
  json j;
  j["checkpoint"] = ckpt_path;
  j["step"] = ck.step;
  out << "layer\teffective_rank\n";
  for (const LayerRank& l : rep.layers) {
    out << l.layer << "\t" << num(l.effective_rank, 8) << "\n";
    j["layers"][l.layer] = l.effective_rank;
  }
  out << "mean\t" << num(rep.mean, 8) << "\n";
  j["mean"] = rep.mean;
  if (!out_dir.empty()) write_text(fs::path(out_dir) / "effective_rank.json", j.dump(2) + "\n");
  return kExitOk;
}

struct EsdArgs {
  std::string ckpt;
  std::string layer;
  std::string random;
  double std = 0.0;
  std::uint64_t seed = 0;
  std::size_t bins = 50;
  std::string out;
};

int cmd_analyze_esd(const EsdArgs& a, std::ostream& out) {
  Matrix w;
  double assumed_std = a.std;
  if (!a.random.empty()) {
    std::smatch m;
    const std::regex shape(R"((\d+)[xX](\d+))");
    if (!std::regex_match(a.random, m, shape)) throw InvalidInput("--random expects ROWSxCOLS");
    const std::size_t rows = std::stoul(m[1]), cols = std::stoul(m[2]);
    if (assumed_std <= 0.0) assumed_std = 1.0 / std::sqrt(static_cast<double>(std::max(rows, cols)));
    Rng rng(a.seed);
    w = gaussian_matrix(rng, rows, cols, assumed_std);
  } else {
    if (a.ckpt.empty() || a.layer.empty()) throw InvalidInput("analyze-esd needs --ckpt and --layer, or --random");
    w = layer_weight(load_checkpoint(a.ckpt).params, a.layer);
    // He scale of the layer's fan-in unless given.
    if (assumed_std <= 0.0) assumed_std = std::sqrt(2.0 / static_cast<double>(w.rows()));
  }
  const EsdReport rep = esd_vs_mp(w, assumed_std, a.bins);
  out << "ks_distance\t" << num(rep.ks_distance, 8) << "\n";
  out << "lambda_minus\t" << num(rep.edges.lambda_minus, 12) << "\n";
  out << "lambda_plus\t" << num(rep.edges.lambda_plus, 12) << "\n";
  out << "bin_lower\tbin_upper\tcount\tmp_expected\n";
  std::string tsv = "bin_lower\tbin_upper\tcount\tmp_expected\n";
  for (const HistogramBin& b : rep.histogram) {
    const std::string row = num(b.lower, 10) + "\t" + num(b.upper, 10) + "\t" +
                            std::to_string(b.count) + "\t" + num(b.mp_expected, 8) + "\n";
    out << row;
    tsv += row;
  }
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / "esd_histogram.tsv", tsv);
    json j = {{"ks_distance", rep.ks_distance},
              {"assumed_std", assumed_std},
              {"sigma2", rep.params.sigma2},
              {"n_rows", rep.params.n_rows},
              {"n_cols", rep.params.n_cols},
              {"lambda_minus", rep.edges.lambda_minus},
              {"lambda_plus", rep.edges.lambda_plus}};
    write_text(fs::path(a.out) / "esd.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

CheckpointSeries load_series(const std::string& run_dir) {
  const fs::path dir = fs::path(run_dir) / "checkpoints";
  if (!fs::is_directory(dir)) throw IoError("no checkpoints directory in '" + run_dir + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ckpt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  CheckpointSeries series;
  for (const fs::path& f : files) {
    Checkpoint ck = load_checkpoint(f.string());
    series.emplace_back(static_cast<std::size_t>(ck.step), std::move(ck.params));
  }
  std::stable_sort(series.begin(), series.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  return series;
}

int cmd_analyze_svtraj(const std::string& run_dir, const std::string& layer, std::size_t top_k,
                       const std::string& out_dir, std::ostream& out) {
  const CheckpointSeries series = load_series(run_dir);
  const TrajectoryReport rep = sv_trajectory(series, layer);
  std::string tsv = "step\ttop1_share\teffective_rank";
  const std::size_t k = std::min(top_k, rep.singular_values.front().size());
  for (std::size_t i = 0; i < k; ++i) tsv += "\tsv" + std::to_string(i + 1);
  tsv += "\n";
  for (std::size_t s = 0; s < rep.steps.size(); ++s) {
    tsv += std::to_string(rep.steps[s]) + "\t" + num(rep.top1_share[s], 8) + "\t" +
           num(rep.effective_rank[s], 8);
    for (std::size_t i = 0; i < k && i < rep.singular_values[s].size(); ++i)
      tsv += "\t" + num(rep.singular_values[s][i], 8);
    tsv += "\n";
  }
  out << tsv << "top1_trend_tau\t" << num(rep.top1_trend, 6) << "\n";
  if (!out_dir.empty()) write_text(fs::path(out_dir) / ("svtraj_" + layer + ".tsv"), tsv);
  return kExitOk;
}

struct InterpArgs {
  std::string a;
  std::string b;
  std::string config;
  std::size_t steps = 11;
  std::string out;
};

int cmd_interpolate(const InterpArgs& args, std::ostream& out) {
  const Checkpoint ca = load_checkpoint(args.a);
  const Checkpoint cb = load_checkpoint(args.b);
  if (ca.digest != cb.digest) {
    throw ShapeError("checkpoints '" + args.a + "' and '" + args.b + "' have different architectures");
  }
  const RunConfig cfg = config_for_checkpoint(args.config, args.a);
  if (architecture_digest(cfg.model) != ca.digest) {
    throw ShapeError("config architecture does not match checkpoint '" + args.a + "'");
  }
  const DataSplit data = make_dataset(cfg.data);
  const std::vector<double> ts = interpolation_grid(args.steps);
  const InterpolationResult r = interpolate(ca.params, cb.params, cfg.model, data.eval, ts);
  std::string tsv = "t\tloss\taccuracy\n";
  for (std::size_t i = 0; i < r.ts.size(); ++i) {
    tsv += num(r.ts[i], 4) + "\t" + num(r.loss[i], 10) + "\t" + num(r.accuracy[i], 6) + "\n";
  }
  out << tsv << "barrier\t" << num(loss_barrier(r), 10) << "\n";
  if (!args.out.empty()) write_text(fs::path(args.out) / "interpolation.tsv", tsv);
  return kExitOk;
}

int cmd_verify(std::uint64_t seed, std::ostream& out) {
  const std::vector<CheckResult> checks = run_verify_suite(seed);
  bool ok = true;
  out << "check\tresult\tvalue\tthreshold\tseconds\tdetail\n";
  for (const CheckResult& c : checks) {
    ok = ok && c.passed;
    out << c.name << "\t" << (c.passed ? "PASS" : "FAIL") << "\t" << num(c.value, 4) << "\t"
        << num(c.threshold, 4) << "\t" << num(c.seconds, 3) << "\t" << c.detail << "\n";
  }
  out << (ok ? "all checks passed" : "some checks FAILED") << "\n";
  return ok ? kExitOk : kExitNumeric;
}

void print_cost(const std::string& label, const CostReport& c, std::ostream& out) {
  const double ratio = static_cast<double>(c.full_flops) / static_cast<double>(c.fact_flops);
  out << label << "\t" << c.rows << "\t" << c.cols << "\t" << c.rank << "\t" << c.full_flops << "\t"
      << c.fact_flops << "\t" << num(ratio, 4) << "\t" << c.full_params << "\t" << c.fact_params
      << "\t" << c.full_train_memory << "\t" << c.fact_train_memory << "\t" << c.breakeven_rank
      << "\t" << (c.economical ? "yes" : "no") << "\n";
}

struct CostArgs {
  std::size_t m = 0, n = 0, r = 0;
  std::size_t kh = 0, kw = 0, c_in = 0, c_out = 0;
  std::string config;
};

int cmd_cost(const CostArgs& a, std::ostream& out) {
  out << "layer\trows\tcols\trank\tfull_flops\tfact_flops\treduction\tfull_params\tfact_params"
         "\tfull_train_mem\tfact_train_mem\tbreakeven\teconomical\n";
  if (!a.config.empty()) {
    const RunConfig cfg = load_config(a.config);
    const NetworkSpec low = cfg.model.factorized(cfg.train.rank_fraction);
    for (const LayerSpec& l : low.layers) {
      if (l.factorized()) print_cost(l.name, cost_model(l), out);
    }
    return kExitOk;
  }
  if (a.kh > 0 || a.kw > 0 || a.c_in > 0 || a.c_out > 0) {
    if (!a.kh || !a.kw || !a.c_in || !a.c_out || !a.r) {
      throw InvalidInput("conv cost needs --kh, --kw, --cin, --cout and --r");
    }
    print_cost("conv", conv_cost(a.kh, a.kw, a.c_in, a.c_out, a.r), out);
    return kExitOk;
  }
  if (!a.m || !a.n || !a.r) throw InvalidInput("cost needs --m, --n and --r (or conv dimensions, or --config)");
  print_cost("dense", dense_cost(a.m, a.n, a.r), out);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"lrlab: low-rank training laboratory"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a network from a config");
  auto* switch_cmd = app.add_subcommand("pretrain-switch", "train unfactorized, then switch to low rank");
  for (auto* cmd : {train_cmd, switch_cmd}) {
    cmd->add_option("--config", train_args.config, "run config (JSON)")->required();
    cmd->add_option("--out", train_args.out, "output directory");
    cmd->add_option("--seed", train_args.seed, "override train.seed");
    cmd->add_option("--resume", train_args.resume, "continue from a checkpoint");
  }

  std::string rank_ckpt, rank_config, rank_out;
  auto* rank_cmd = app.add_subcommand("analyze-rank", "effective rank of every weight layer");
  rank_cmd->add_option("--ckpt", rank_ckpt, "checkpoint file")->required();
  rank_cmd->add_option("--config", rank_config, "restrict to the config's low-rank layers");
  rank_cmd->add_option("--out", rank_out, "write effective_rank.json here");

  EsdArgs esd;
  auto* esd_cmd = app.add_subcommand("analyze-esd", "squared singular values against Marchenko-Pastur");
  esd_cmd->add_option("--ckpt", esd.ckpt, "checkpoint file");
  esd_cmd->add_option("--layer", esd.layer, "layer name");
  esd_cmd->add_option("--random", esd.random, "use a Gaussian ROWSxCOLS matrix instead");
  esd_cmd->add_option("--std", esd.std, "assumed entry standard deviation");
  esd_cmd->add_option("--seed", esd.seed, "seed for --random");
  esd_cmd->add_option("--bins", esd.bins, "histogram bins")->check(CLI::PositiveNumber);
  esd_cmd->add_option("--out", esd.out, "write esd.json and esd_histogram.tsv here");

  std::string traj_run, traj_layer, traj_out;
  std::size_t traj_k = 5;
  auto* traj_cmd = app.add_subcommand("analyze-svtraj", "singular value trajectory over checkpoints");
  traj_cmd->add_option("--run", traj_run, "run directory")->required();
  traj_cmd->add_option("--layer", traj_layer, "layer name")->required();
  traj_cmd->add_option("--top", traj_k, "singular values per row");
  traj_cmd->add_option("--out", traj_out, "write svtraj_<layer>.tsv here");

  InterpArgs interp;
  auto* interp_cmd = app.add_subcommand("interpolate", "loss along the line between two checkpoints");
  interp_cmd->add_option("--a", interp.a, "checkpoint at t = 0")->required();
  interp_cmd->add_option("--b", interp.b, "checkpoint at t = 1")->required();
  interp_cmd->add_option("--steps", interp.steps, "grid points")->check(CLI::Range(2, 100000));
  interp_cmd->add_option("--config", interp.config, "run config (default: beside --a)");
  interp_cmd->add_option("--out", interp.out, "write interpolation.tsv here");

  std::uint64_t verify_seed = 0;
  auto* verify_cmd = app.add_subcommand("verify", "run the numerical invariant suite");
  verify_cmd->add_option("--seed", verify_seed, "seed");

  CostArgs cost;
  auto* cost_cmd = app.add_subcommand("cost", "flop and memory cost of a factorized layer");
  cost_cmd->add_option("--m", cost.m, "input dimension");
  cost_cmd->add_option("--n", cost.n, "output dimension");
  cost_cmd->add_option("--r", cost.r, "rank");
  cost_cmd->add_option("--kh", cost.kh, "kernel height");
  cost_cmd->add_option("--kw", cost.kw, "kernel width");
  cost_cmd->add_option("--cin", cost.c_in, "input channels");
  cost_cmd->add_option("--cout", cost.c_out, "output channels");
  cost_cmd->add_option("--config", cost.config, "report every factorized layer of a config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args, false, out, err);
    if (switch_cmd->parsed()) return cmd_train(train_args, true, out, err);
    if (rank_cmd->parsed()) return cmd_analyze_rank(rank_ckpt, rank_config, rank_out, out);
    if (esd_cmd->parsed()) return cmd_analyze_esd(esd, out);
    if (traj_cmd->parsed()) return cmd_analyze_svtraj(traj_run, traj_layer, traj_k, traj_out, out);
    if (interp_cmd->parsed()) return cmd_interpolate(interp, out);
    if (verify_cmd->parsed()) return cmd_verify(verify_seed, out);
    if (cost_cmd->parsed()) return cmd_cost(cost, out);
  } catch (const NumericsError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}

}  // namespace lrlab::cli
