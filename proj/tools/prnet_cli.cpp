// prnet: synthesize datasets, train, register, evaluate and plot.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "prnet/checkpoint.hpp"
#include "prnet/config.hpp"
#include "prnet/datagen.hpp"
#include "prnet/evaluator.hpp"
#include "prnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace prnet;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  bool verbose = false;
};

void log_config(const std::string& command, const KeyValues& kv) {
  std::cerr << "# " << command << " resolved config\n";
  for (const auto& [k, v] : kv.values()) std::cerr << "#   " << k << " = " << v << '\n';
}

KeyValues read_config(const std::string& path) { return path.empty() ? KeyValues{} : KeyValues::read(path); }

bool given(const CLI::App* app, const std::string& name) { return app->count(name) > 0; }

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string config, shape = "fish", noise = "none", out;
  std::size_t points = 96, count = 100, controls = 12;
  double level = 0.5, noise_level = 0.0, drift_scale = 0.4, deform_reg = 1.0, outlier_std = 1.0;
};

void run_synth(const CLI::App* app, const SynthArgs& a, const Globals& g) {
  KeyValues file = read_config(a.config);
  SynthConfig cfg;
  cfg.seed = g.seed;
  cfg.load(file);
  std::string shape = a.shape;
  std::size_t points = a.points;
  file.maybe("shape", shape);
  file.maybe("points", points);
  if (given(app, "--shape")) shape = a.shape;
  if (given(app, "--points")) points = a.points;
  if (given(app, "--level")) cfg.deformation_level = a.level;
  if (given(app, "--noise")) cfg.noise_kind = parse_noise_kind(a.noise);
  if (given(app, "--noise-level")) cfg.noise_level = a.noise_level;
  if (given(app, "--count")) cfg.pair_count = a.count;
  if (given(app, "--controls")) cfg.num_deform_controls = a.controls;
  if (given(app, "--drift-scale")) cfg.drift_scale = a.drift_scale;
  if (given(app, "--deform-reg")) cfg.deform_regularization = a.deform_reg;
  if (given(app, "--outlier-std")) cfg.outlier_std = a.outlier_std;
  if (app->get_parent()->count("--seed")) cfg.seed = g.seed;
  cfg.validate();

  KeyValues resolved;
  cfg.store(resolved);
  resolved.set("shape", shape);
  resolved.set("points", static_cast<std::uint64_t>(points));
  resolved.set("out", a.out);
  log_config("synth", resolved);

  Rng shape_rng = derived_rng(cfg.seed, ~std::uint64_t{0});
  const PointSet base = sample_shape(shape, points, shape_rng);
  const Dataset d = generate_dataset(base, cfg, shape, g.threads);
  save_dataset(d, a.out);
  std::cout << "wrote " << d.size() << " pairs to " << a.out << '\n';
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume, history, anneal = "batch";
  std::size_t epochs = 30, batch_size = 16, checkpoint_every = 1;
  double lr = 1e-4, lr_decay = 0.995, sigma_floor = kSigmaFloor, initial_sigma = 1.0, val_fraction = 0.05;
};

void run_train(const CLI::App* app, const TrainArgs& a, const Globals& g) {
  KeyValues file = read_config(a.config);
  TrainConfig cfg;
  cfg.seed = g.seed;
  cfg.load(file);
  if (given(app, "--epochs")) cfg.epochs = a.epochs;
  if (given(app, "--batch-size")) cfg.batch_size = a.batch_size;
  if (given(app, "--lr")) cfg.learning_rate = a.lr;
  if (given(app, "--lr-decay")) cfg.lr_decay = a.lr_decay;
  if (given(app, "--sigma-floor")) cfg.sigma_floor = a.sigma_floor;
  if (given(app, "--initial-sigma")) cfg.initial_sigma = a.initial_sigma;
  if (given(app, "--anneal")) cfg.anneal_unit = parse_anneal_unit(a.anneal);
  if (given(app, "--val-fraction")) cfg.validation_fraction = a.val_fraction;
  if (given(app, "--checkpoint-every")) cfg.checkpoint_every = a.checkpoint_every;
  if (app->get_parent()->count("--seed")) cfg.seed = g.seed;
  cfg.validate();

  const Dataset data = load_dataset(a.data);
  const std::string history = a.history.empty() ? a.out + ".history.csv" : a.history;
  KeyValues resolved;
  cfg.store(resolved);
  resolved.set("data", a.data);
  resolved.set("out", a.out);
  resolved.set("history", history);
  if (!a.resume.empty()) resolved.set("resume", a.resume);
  log_config("train", resolved);

  TrainState state;
  if (!a.resume.empty()) {
    state.checkpoint = load_checkpoint(a.resume);
  } else {
    state = fresh_train_state(ModelConfig::for_dimension(data.dim()), cfg);
  }
  TrainHooks hooks;
  hooks.checkpoint_path = a.out;
  hooks.history_path = history;
  hooks.on_epoch = [&](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " sigma " << r.sigma << " lr " << r.lr << " loss " << r.train_loss
              << " val_cd " << r.val_cd << " (" << r.seconds << " s)\n";
  };
  if (state.checkpoint.epoch >= cfg.epochs) {
    save_checkpoint(state.checkpoint, a.out);
  } else {
    train(cfg, data, state, hooks);
  }
  std::cout << "checkpoint " << a.out << " at epoch " << state.checkpoint.epoch << '\n';
}

// --- register --------------------------------------------------------------

struct RegisterArgs {
  std::string model, src, tgt, out_svg, out_points;
};

void run_register(const RegisterArgs& a, const Globals&) {
  KeyValues resolved;
  resolved.set("model", a.model);
  resolved.set("src", a.src);
  resolved.set("tgt", a.tgt);
  resolved.set("out_svg", a.out_svg);
  resolved.set("out_points", a.out_points);
  log_config("register", resolved);
  const Checkpoint ckpt = load_checkpoint(a.model);
  const PointSet s = read_points(a.src), t = read_points(a.tgt);
  const auto r = register_pair(ckpt.weights, s, t, true);
  if (!a.out_svg.empty()) write_overlay_svg(s, t, r.transformed, r.cd_post, a.out_svg);
  if (!a.out_points.empty()) write_points(r.transformed, a.out_points);
  std::cout << "cd_pre " << format_double(r.cd_pre) << " cd_post " << format_double(r.cd_post) << " time_s "
            << format_double(r.elapsed) << '\n';
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string model, report;
  std::vector<std::string> data;
  bool no_timing = false;
};

void run_eval(const EvalArgs& a, const Globals& g) {
  KeyValues resolved;
  resolved.set("model", a.model);
  std::string joined;
  for (const auto& d : a.data) joined += (joined.empty() ? "" : ",") + d;
  resolved.set("data", joined);
  resolved.set("report", a.report);
  resolved.set("threads", static_cast<int>(g.threads));
  resolved.set("timing", std::string(a.no_timing ? "off" : "on"));
  log_config("eval", resolved);
  const Checkpoint ckpt = load_checkpoint(a.model);
  std::vector<EvaluationSummary> rows;
  for (const auto& dir : a.data) {
    const Dataset d = load_dataset(dir);
    EvaluateOptions opt;
    opt.threads = g.threads;
    rows.push_back(evaluate(ckpt.weights, d, fs::path(dir).filename().string(), opt));
    const auto& r = rows.back();
    std::cerr << r.dataset_id << ": pairs " << r.pair_count << " cd_pre " << r.cd_pre_mean << " cd_post "
              << r.cd_post_mean << " +- " << r.cd_post_std << " model_time " << r.model_time_s << " s\n";
  }
  if (a.report.empty()) {
    write_report(rows, std::cout, !a.no_timing);
  } else {
    write_report(rows, a.report, !a.no_timing);
  }
}

// --- plot ------------------------------------------------------------------

struct PlotArgs {
  std::string model, data, out_dir;
  std::size_t count = 8;
};

void run_plot(const PlotArgs& a, const Globals& g) {
  KeyValues resolved;
  resolved.set("model", a.model);
  resolved.set("data", a.data);
  resolved.set("out_dir", a.out_dir);
  resolved.set("count", static_cast<std::uint64_t>(a.count));
  log_config("plot", resolved);
  const Checkpoint ckpt = load_checkpoint(a.model);
  Dataset d = load_dataset(a.data);
  const std::size_t n = std::min(a.count, d.size());
  d.sources.resize(n);
  d.targets.resize(n);
  EvaluateOptions opt;
  opt.threads = g.threads;
  opt.keep_transformed = true;
  const auto summary = evaluate(ckpt.weights, d, fs::path(a.data).filename().string(), opt);
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create " + a.out_dir + ": " + ec.message());
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "pair_%06zu.svg", i);
    write_overlay_svg(d.sources[i], d.targets[i], summary.transformed[i], summary.pairs[i].cd_post,
                      (fs::path(a.out_dir) / name).string());
  }
  std::cout << "wrote " << n << " plots to " << a.out_dir << '\n';
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const EmptyInputError*>(&e)) return "empty_input";
  if (dynamic_cast<const ContractError*>(&e)) return "contract";
  if (dynamic_cast<const SingularSystemError*>(&e)) return "singular";
  if (dynamic_cast<const NonFiniteLossError*>(&e)) return "non_finite_loss";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned non-rigid point-set registration with thin-plate splines"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed for data synthesis, initialization and shuffling")
      ->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for generation and evaluation")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "Log progress");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a dataset of (source, deformed target) pairs");
  synth->add_option("--config", sa.config, "key = value file with synthesis settings");
  synth->add_option("--shape", sa.shape, "Built-in shape (fish, torus) or a point file")->capture_default_str();
  synth->add_option("--points", sa.points, "Points sampled from the shape")->capture_default_str();
  synth->add_option("--level", sa.level, "Deformation level")->capture_default_str();
  synth->add_option("--noise", sa.noise, "Noise kind: none, pd, di, do")->capture_default_str();
  synth->add_option("--noise-level", sa.noise_level, "Noise level or ratio")->capture_default_str();
  synth->add_option("--count", sa.count, "Number of pairs")->capture_default_str();
  synth->add_option("--controls", sa.controls, "Random control points of the deforming TPS")->capture_default_str();
  synth->add_option("--drift-scale", sa.drift_scale, "Control drift std per unit of 2 x level")
      ->capture_default_str();
  synth->add_option("--deform-reg", sa.deform_reg, "Regularization of the deforming TPS")->capture_default_str();
  synth->add_option("--outlier-std", sa.outlier_std, "Std of outlier points (do noise)")->capture_default_str();
  synth->add_option("--out", sa.out, "Output dataset directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model on a dataset");
  trn->add_option("--config", ta.config, "key = value file with training settings");
  trn->add_option("--data", ta.data, "Dataset directory")->required();
  trn->add_option("--out", ta.out, "Checkpoint path (rewritten every checkpoint interval)")->required();
  trn->add_option("--epochs", ta.epochs, "Total epochs")->capture_default_str();
  trn->add_option("--batch-size", ta.batch_size, "Pairs per batch")->capture_default_str();
  trn->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  trn->add_option("--lr-decay", ta.lr_decay, "Learning-rate decay per epoch")->capture_default_str();
  trn->add_option("--sigma-floor", ta.sigma_floor, "Lower bound of the annealed sigma")->capture_default_str();
  trn->add_option("--initial-sigma", ta.initial_sigma, "Sigma at the first annealing step")->capture_default_str();
  trn->add_option("--anneal", ta.anneal, "Annealing step unit: batch or epoch")->capture_default_str();
  trn->add_option("--val-fraction", ta.val_fraction, "Held-out fraction of pairs")->capture_default_str();
  trn->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint interval in epochs (0: end only)")
      ->capture_default_str();
  trn->add_option("--resume", ta.resume, "Continue from this checkpoint");
  trn->add_option("--history", ta.history, "History CSV path (default: <out>.history.csv)");

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Register one source file to one target file");
  reg->add_option("--model", ra.model, "Checkpoint")->required();
  reg->add_option("--src", ra.src, "Source point file")->required();
  reg->add_option("--tgt", ra.tgt, "Target point file")->required();
  reg->add_option("--out-svg", ra.out_svg, "Overlay plot path");
  reg->add_option("--out", ra.out_points, "Transformed source point file");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a model on datasets and write a CSV report");
  ev->add_option("--model", ea.model, "Checkpoint")->required();
  ev->add_option("--data", ea.data, "Dataset directories")->required();
  ev->add_option("--report", ea.report, "Report CSV path (default: stdout)");
  ev->add_flag("--no-timing", ea.no_timing, "Write zero timings so the report is reproducible byte for byte");

  PlotArgs pa;
  auto* plot = app.add_subcommand("plot", "Write overlay plots for the first pairs of a dataset");
  plot->add_option("--model", pa.model, "Checkpoint")->required();
  plot->add_option("--data", pa.data, "Dataset directory")->required();
  plot->add_option("--out-dir", pa.out_dir, "Output directory")->required();
  plot->add_option("--count", pa.count, "Number of pairs to plot")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) run_synth(synth, sa, g);
    if (*trn) run_train(trn, ta, g);
    if (*reg) run_register(ra, g);
    if (*ev) run_eval(ea, g);
    if (*plot) run_plot(pa, g);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::cerr << "error: " << error_kind(e) << ": " << msg << '\n';
    return 1;
  }
  return 0;
}
