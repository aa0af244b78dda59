#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prnet/adam.hpp"
#include "prnet/checkpoint.hpp"
#include "prnet/datagen.hpp"
#include "prnet/losses.hpp"
#include "prnet/model.hpp"

namespace prnet {

enum class AnnealUnit { batch, epoch };

inline std::string to_string(AnnealUnit u) { return u == AnnealUnit::batch ? "batch" : "epoch"; }

inline AnnealUnit parse_anneal_unit(const std::string& s) {
  if (s == "batch" || s == "step") return AnnealUnit::batch;
  if (s == "epoch") return AnnealUnit::epoch;
  throw ContractError("unknown annealing unit '" + s + "' (expected batch or epoch)");
}

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  double lr_decay = 0.995;
  std::size_t epochs = 30;
  double initial_sigma = 1.0;
  double sigma_floor = kSigmaFloor;
  AnnealUnit anneal_unit = AnnealUnit::batch;
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // 0 = only at the end

  void validate() const {
    if (batch_size < 2) throw ContractError("train: batch size must be >= 2 for batch normalization");
    if (!(learning_rate > 0.0) || !(lr_decay > 0.0) || !(initial_sigma > 0.0) || !(sigma_floor > 0.0)) {
      throw ContractError("train: learning rate, decay and sigma values must be positive");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ContractError("train: validation fraction must lie in [0, 1)");
    }
  }

  AnnealingSchedule schedule() const { return {initial_sigma, sigma_floor}; }

  void store(KeyValues& kv) const {
    kv.set("batch_size", static_cast<std::uint64_t>(batch_size));
    kv.set("learning_rate", learning_rate);
    kv.set("lr_decay", lr_decay);
    kv.set("epochs", static_cast<std::uint64_t>(epochs));
    kv.set("initial_sigma", initial_sigma);
    kv.set("sigma_floor", sigma_floor);
    kv.set("anneal_unit", to_string(anneal_unit));
    kv.set("validation_fraction", validation_fraction);
    kv.set("seed", seed);
    kv.set("checkpoint_every", static_cast<std::uint64_t>(checkpoint_every));
  }

  void load(const KeyValues& kv) {
    kv.maybe("batch_size", batch_size);
    kv.maybe("learning_rate", learning_rate);
    kv.maybe("lr_decay", lr_decay);
    kv.maybe("epochs", epochs);
    kv.maybe("initial_sigma", initial_sigma);
    kv.maybe("sigma_floor", sigma_floor);
    if (kv.contains("anneal_unit")) anneal_unit = parse_anneal_unit(kv.text("anneal_unit"));
    kv.maybe("validation_fraction", validation_fraction);
    kv.maybe("seed", seed);
    kv.maybe("checkpoint_every", checkpoint_every);
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double sigma = 0.0;  // σ of the epoch's last batch
  double lr = 0.0;
  double train_loss = 0.0;
  double val_cd = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

inline constexpr const char* kHistoryHeader = "epoch,sigma,lr,train_loss,val_cd";

inline std::string history_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + format_double(r.sigma) + "," + format_double(r.lr) + "," +
         format_double(r.train_loss) + "," + format_double(r.val_cd);
}

/// A training run's mutable state: everything a checkpoint restores.
struct TrainState {
  Checkpoint checkpoint;

  PrNetWeights<float>& weights() { return checkpoint.weights; }
};

inline TrainState fresh_train_state(const ModelConfig& model, const TrainConfig& cfg) {
  TrainState s;
  s.checkpoint.weights = init_weights<float>(model, cfg.seed);
  s.checkpoint.seed = cfg.seed;
  s.checkpoint.adam.learning_rate = cfg.learning_rate;
  s.checkpoint.adam.decay = cfg.lr_decay;
  return s;
}

struct TrainHooks {
  std::string checkpoint_path;  // empty: no checkpoint files
  std::string history_path;     // empty: no history file
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Indices of the held-out slice: the last ceil(fraction · N) pairs, kept at
/// zero when that would leave fewer than two training pairs.
inline std::size_t validation_count(std::size_t pairs, double fraction) {
  auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pairs)));
  if (pairs < n + 2) n = 0;
  return n;
}

/// Mean normalized Chamfer distance of eval-mode registrations.
template <typename T>
double mean_registration_cd(const PrNetWeights<T>& w, std::span<const PointSet> sources,
                            std::span<const PointSet> targets, std::size_t chunk = 16) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t b = 0; b < sources.size(); b += chunk) {
    const std::size_t e = std::min(sources.size(), b + chunk);
    auto out = forward_batch<T>(w, sources.subspan(b, e - b), targets.subspan(b, e - b), NormMode::eval);
    for (std::size_t i = b; i < e; ++i) {
      const auto& t = out.transformed[i - b];
      PointSet moved(sources[i].dim(), std::vector<double>(t.data().begin(), t.data().end()));
      total += chamfer(moved, targets[i]).normalized;
    }
  }
  return sources.empty() ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(sources.size());
}

/// One optimization step on a mini-batch; returns the batch-mean GMM loss.
inline double train_step(PrNetWeights<float>& w, AdamState<float>& adam, std::span<const PointSet> sources,
                         std::span<const PointSet> targets, double sigma) {
  auto out = forward_batch<float>(w, sources, targets, NormMode::train);
  std::vector<Tensor<float>> terms;
  for (std::size_t b = 0; b < sources.size(); ++b) terms.push_back(gmm_loss(out.transformed[b], targets[b], sigma));
  auto loss = scale(add_scalars(terms), 1.0f / static_cast<float>(sources.size()));
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  auto params = w.parameters();
  for (auto* p : params) p->zero_grad();
  backward(loss);
  adam_step(params, adam);
  return value;
}

/// Trains from `state` (fresh or resumed) until `cfg.epochs` epochs are
/// complete. Epoch e shuffles with a stream derived from (seed, e), and σ
/// depends only on the global step count, so a resumed run retraces the
/// uninterrupted one exactly.
inline std::vector<EpochRecord> train(const TrainConfig& cfg, const Dataset& data, TrainState& state,
                                      const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.size() == 0) throw EmptyInputError("train: empty dataset");
  auto& w = state.checkpoint.weights;
  auto& adam = state.checkpoint.adam;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.sources[i].dim() != w.config.dim || data.targets[i].dim() != w.config.dim) {
      throw DimensionError("train: pair " + std::to_string(i) + " is " + std::to_string(data.sources[i].dim()) +
                           "D but the model is " + std::to_string(w.config.dim) + "D");
    }
  }
  const std::size_t n_val = validation_count(data.size(), cfg.validation_fraction);
  const std::size_t n_train = data.size() - n_val;
  if (n_train < 2) throw ContractError("train: need at least two training pairs");
  std::span<const PointSet> val_src(data.sources.data() + n_train, n_val);
  std::span<const PointSet> val_tgt(data.targets.data() + n_train, n_val);
  const auto schedule = cfg.schedule();
  {
    KeyValues kv;
    cfg.store(kv);
    state.checkpoint.hyperparameters = kv.values();
    state.checkpoint.seed = cfg.seed;
  }

  std::vector<EpochRecord> history;
  std::ofstream history_file;
  if (!hooks.history_path.empty()) {
    const bool resume = state.checkpoint.epoch > 0 && std::filesystem::exists(hooks.history_path);
    history_file.open(hooks.history_path, resume ? std::ios::app : std::ios::trunc);
    if (!history_file) throw IoError("cannot write training history " + hooks.history_path);
    if (!resume) history_file << kHistoryHeader << '\n';
  }

  std::vector<std::size_t> order(n_train);
  std::vector<PointSet> batch_src, batch_tgt;
  for (std::size_t epoch = state.checkpoint.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = derived_rng(cfg.seed ^ 0x5bd1e995ULL, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.effective_learning_rate();
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n_train; b += cfg.batch_size) {
      const std::size_t e = std::min(n_train, b + cfg.batch_size);
      if (e - b < 2) break;  // a lone trailing pair cannot be batch-normalized
      batch_src.clear();
      batch_tgt.clear();
      for (std::size_t i = b; i < e; ++i) {
        batch_src.push_back(data.sources[order[i]]);
        batch_tgt.push_back(data.targets[order[i]]);
      }
      const long long step =
          cfg.anneal_unit == AnnealUnit::batch ? static_cast<long long>(adam.step_count) + 1 : static_cast<long long>(epoch);
      const double sigma = schedule.sigma_at(step);
      const double loss = train_step(w, adam, batch_src, batch_tgt, sigma);
      if (!std::isfinite(loss)) {
        throw NonFiniteLossError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batches) + " (sigma " + format_double(sigma) + ", lr " +
                                 format_double(rec.lr) + ")");
      }
      rec.sigma = sigma;
      loss_sum += loss;
      ++batches;
    }
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_cd = n_val ? mean_registration_cd(static_cast<const PrNetWeights<float>&>(w), val_src, val_tgt)
                       : std::numeric_limits<double>::quiet_NaN();
    adam.end_epoch();
    state.checkpoint.epoch = epoch;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(rec);
    if (history_file.is_open()) history_file << history_row(rec) << '\n' << std::flush;
    const bool periodic = cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0;
    if (!hooks.checkpoint_path.empty() && (periodic || epoch == cfg.epochs)) {
      save_checkpoint(state.checkpoint, hooks.checkpoint_path);
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return history;
}

}  // namespace prnet
