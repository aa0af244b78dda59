#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "prnet/trainer.hpp"

using namespace prnet;
namespace fs = std::filesystem;

namespace {

ModelConfig narrow_config() {
  ModelConfig c;
  c.grid_resolution = {5, 5};
  c.mlp_widths = {8, 16};
  c.conv_channels = {8, 8, 8};
  c.conv_kernels = {3, 2, 2};
  c.fc_widths = {16, 18};
  return c;
}

Dataset small_dataset(std::size_t pairs, std::uint64_t seed, std::size_t points = 40) {
  Rng rng(seed);
  SynthConfig cfg;
  cfg.pair_count = pairs;
  cfg.seed = seed;
  return generate_dataset(sample_shape("fish", points, rng), cfg, "fish");
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("prnet_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_weights(const PrNetWeights<float>& a, const PrNetWeights<float>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!std::equal(pa[i]->data().begin(), pa[i]->data().end(), pb[i]->data().begin())) return false;
  return true;
}

// Mean eval-mode GMM loss at σ minus its value when every source sits on its target.
double excess_loss(const PrNetWeights<float>& w, const Dataset& d, double sigma) {
  NoGradGuard guard;
  auto out = forward_batch<float>(w, std::span<const PointSet>(d.sources), std::span<const PointSet>(d.targets),
                                  NormMode::eval);
  double total = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& t = out.transformed[i];
    PointSet moved(2, std::vector<double>(t.data().begin(), t.data().end()));
    total += gmm_loss(moved, d.targets[i], sigma) - gmm_loss(d.targets[i], d.targets[i], sigma);
  }
  return total / static_cast<double>(d.size());
}

}  // namespace

TEST(Trainer, ZeroEpochsLeavesWeightsUnchanged) {
  TrainConfig cfg;
  cfg.epochs = 0;
  auto state = fresh_train_state(narrow_config(), cfg);
  auto before = state.weights().clone();
  auto history = train(cfg, small_dataset(8, 1), state);
  EXPECT_TRUE(history.empty());
  EXPECT_TRUE(same_weights(before, state.weights()));
}

TEST(Trainer, SchedulesMatchClosedForms) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.validation_fraction = 0.1;
  auto data = small_dataset(20, 2);  // 2 held out, 18 train: 4 full batches and a pair per epoch
  auto state = fresh_train_state(narrow_config(), cfg);
  auto history = train(cfg, data, state);
  ASSERT_EQ(history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(history[e].epoch, e + 1);
    EXPECT_DOUBLE_EQ(history[e].lr, 1e-3 * std::pow(0.995, static_cast<double>(e)));
    EXPECT_DOUBLE_EQ(history[e].sigma, std::max(std::sqrt(1.0 / (5.0 * (e + 1))), 0.1));
    EXPECT_TRUE(std::isfinite(history[e].val_cd));
  }
  EXPECT_EQ(state.checkpoint.adam.step_count, 15u);

  cfg.anneal_unit = AnnealUnit::epoch;
  auto per_epoch = fresh_train_state(narrow_config(), cfg);
  auto h2 = train(cfg, data, per_epoch);
  EXPECT_DOUBLE_EQ(h2[2].sigma, std::sqrt(1.0 / 3.0));
}

TEST(Trainer, SameSeedGivesIdenticalWeights) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 17;
  auto data = small_dataset(12, 3);
  auto a = fresh_train_state(narrow_config(), cfg);
  auto b = fresh_train_state(narrow_config(), cfg);
  train(cfg, data, a);
  train(cfg, data, b);
  EXPECT_TRUE(same_weights(a.weights(), b.weights()));
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto dir = scratch_dir("resume");
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.validation_fraction = 0.1;
  auto data = small_dataset(22, 4);

  auto full = fresh_train_state(narrow_config(), cfg);
  TrainHooks full_hooks{(dir / "full.ckpt").string(), (dir / "full.csv").string(), {}};
  auto uninterrupted = train(cfg, data, full, full_hooks);

  TrainConfig first = cfg;
  first.epochs = 2;
  auto part = fresh_train_state(narrow_config(), cfg);
  TrainHooks hooks{(dir / "part.ckpt").string(), (dir / "part.csv").string(), {}};
  train(first, data, part, hooks);
  TrainState resumed;
  resumed.checkpoint = load_checkpoint(hooks.checkpoint_path);
  EXPECT_EQ(resumed.checkpoint.epoch, 2u);
  auto rest = train(cfg, data, resumed, hooks);

  ASSERT_EQ(rest.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(rest[i].train_loss, uninterrupted[i + 2].train_loss, 1e-12);
    EXPECT_NEAR(rest[i].val_cd, uninterrupted[i + 2].val_cd, 1e-12);
  }
  EXPECT_TRUE(same_weights(resumed.weights(), full.weights()));
  EXPECT_EQ(read_file(dir / "part.ckpt"), read_file(dir / "full.ckpt"));
  // The resumed history continues the same file.
  EXPECT_EQ(read_file(dir / "part.csv"), read_file(dir / "full.csv"));
  fs::remove_all(dir);
}

TEST(Trainer, HistoryFileHasHeaderAndRows) {
  auto dir = scratch_dir("history");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  auto state = fresh_train_state(narrow_config(), cfg);
  TrainHooks hooks{"", (dir / "h.csv").string(), {}};
  auto history = train(cfg, small_dataset(8, 5), state, hooks);
  std::ifstream in(hooks.history_path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kHistoryHeader);
  std::getline(in, line);
  EXPECT_EQ(line, history_row(history[0]));
  fs::remove_all(dir);
}

TEST(Trainer, NonFiniteLossAborts) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  auto state = fresh_train_state(narrow_config(), cfg);
  state.weights().fc.back().bias.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(cfg, small_dataset(8, 6), state);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos);
    EXPECT_NE(msg.find("batch 0"), std::string::npos);
    EXPECT_NE(msg.find("sigma 1"), std::string::npos);
    EXPECT_NE(msg.find("lr "), std::string::npos);
  }
}

TEST(Trainer, RejectsBadInputs) {
  TrainConfig cfg;
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = TrainConfig{};
  auto state = fresh_train_state(ModelConfig::for_dimension(3), cfg);
  EXPECT_THROW(train(cfg, small_dataset(4, 7), state), DimensionError);
  EXPECT_THROW(train(cfg, Dataset{}, state), EmptyInputError);
  EXPECT_EQ(parse_anneal_unit("step"), AnnealUnit::batch);
  EXPECT_THROW(parse_anneal_unit("hour"), ContractError);
}

TEST(Trainer, ConfigRoundTrip) {
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.sigma_floor = kSigmaFloorNoisy;
  cfg.anneal_unit = AnnealUnit::epoch;
  cfg.seed = 77;
  KeyValues kv;
  cfg.store(kv);
  TrainConfig back;
  back.load(kv);
  KeyValues again;
  back.store(again);
  EXPECT_EQ(kv.values(), again.values());
}

// Learnability smoke test on the full-size network: 20 pairs, 50 epochs.
TEST(Trainer, OverfitsTwentyPairs) {
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.validation_fraction = 0.0;
  cfg.seed = 8;
  auto data = small_dataset(20, 8, 96);
  auto state = fresh_train_state(ModelConfig::for_dimension(2), cfg);
  const double before = excess_loss(state.weights(), data, kSigmaFloor);
  train(cfg, data, state);
  const double after = excess_loss(state.weights(), data, kSigmaFloor);
  EXPECT_GT(before, 0.0);
  EXPECT_LT(after, 0.5 * before) << "before " << before << " after " << after;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = scratch_dir("ckpt");
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  auto state = fresh_train_state(narrow_config(), cfg);
  train(cfg, small_dataset(8, 9), state);
  save_checkpoint(state.checkpoint, (dir / "a.ckpt").string());
  auto loaded = load_checkpoint((dir / "a.ckpt").string());
  save_checkpoint(loaded, (dir / "b.ckpt").string());
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
  EXPECT_EQ(loaded.epoch, 1u);
  EXPECT_EQ(loaded.weights.config, narrow_config());
  EXPECT_EQ(loaded.adam.step_count, state.checkpoint.adam.step_count);
  EXPECT_TRUE(same_weights(loaded.weights, state.weights()));
  EXPECT_EQ(loaded.hyperparameters.at("batch_size"), "4");
  fs::remove_all(dir);
}

TEST(Checkpoint, DetectsCorruptionTruncationAndVersion) {
  TrainConfig cfg;
  auto state = fresh_train_state(narrow_config(), cfg);
  const std::string bytes = serialize_checkpoint(state.checkpoint);
  std::string corrupt = bytes;
  corrupt[corrupt.size() - 5] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(corrupt), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 40)), FormatError);
  std::string version = bytes;
  version.replace(0, std::string("prnet-checkpoint 1").size(), "prnet-checkpoint 9");
  EXPECT_THROW(deserialize_checkpoint(version), FormatError);
  EXPECT_THROW(deserialize_checkpoint("garbage"), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}
