#pragma once

// Synthetic registration pairs: a normalized base shape as the source and a
// TPS-deformed, optionally corrupted copy as the target.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "prnet/config.hpp"
#include "prnet/pointset.hpp"
#include "prnet/tps.hpp"

namespace prnet {

enum class NoiseKind { none, pd, di, do_ };

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::pd: return "pd";
    case NoiseKind::di: return "di";
    case NoiseKind::do_: return "do";
    default: return "none";
  }
}

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "none") return NoiseKind::none;
  if (s == "pd") return NoiseKind::pd;
  if (s == "di") return NoiseKind::di;
  if (s == "do") return NoiseKind::do_;
  throw ContractError("unknown noise kind '" + s + "' (expected none, pd, di or do)");
}

struct SynthConfig {
  double deformation_level = 0.5;
  std::size_t num_deform_controls = 12;
  // Control drift std = 2 · deformation_level · drift_scale, in normalized units.
  double drift_scale = 0.4;
  // Smoothing of the deforming TPS; larger values damp local folds.
  double deform_regularization = 1.0;
  NoiseKind noise_kind = NoiseKind::none;
  double noise_level = 0.0;
  double outlier_std = 1.0;
  std::uint64_t seed = 0;
  std::size_t pair_count = 100;

  double drift_std() const { return 2.0 * deformation_level * drift_scale; }

  void validate() const {
    if (!(deformation_level >= 0.0) || !std::isfinite(deformation_level)) {
      throw ContractError("synth: deformation level must be finite and >= 0");
    }
    if (num_deform_controls == 0) throw ContractError("synth: need at least one deformation control");
    if (!(drift_scale > 0.0)) throw ContractError("synth: drift scale must be positive");
    if (!(deform_regularization >= 0.0)) throw ContractError("synth: deform regularization must be >= 0");
    if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) throw ContractError("synth: noise level must be >= 0");
    if (noise_kind == NoiseKind::di && noise_level >= 1.0) {
      throw ContractError("synth: missing-point ratio must be < 1");
    }
    if (!(outlier_std > 0.0)) throw ContractError("synth: outlier std must be positive");
    if (pair_count == 0) throw ContractError("synth: pair count must be positive");
  }

  void store(KeyValues& kv) const {
    kv.set("deformation_level", deformation_level);
    kv.set("num_deform_controls", static_cast<std::uint64_t>(num_deform_controls));
    kv.set("drift_scale", drift_scale);
    kv.set("deform_regularization", deform_regularization);
    kv.set("noise_kind", to_string(noise_kind));
    kv.set("noise_level", noise_level);
    kv.set("outlier_std", outlier_std);
    kv.set("seed", seed);
    kv.set("pair_count", static_cast<std::uint64_t>(pair_count));
  }

  /// Overrides every field present in `kv`.
  void load(const KeyValues& kv) {
    kv.maybe("deformation_level", deformation_level);
    kv.maybe("num_deform_controls", num_deform_controls);
    kv.maybe("drift_scale", drift_scale);
    kv.maybe("deform_regularization", deform_regularization);
    if (kv.contains("noise_kind")) noise_kind = parse_noise_kind(kv.text("noise_kind"));
    kv.maybe("noise_level", noise_level);
    kv.maybe("outlier_std", outlier_std);
    kv.maybe("seed", seed);
    kv.maybe("pair_count", pair_count);
  }

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

using Rng = std::mt19937_64;

/// Independent stream for item `index` of a run seeded with `seed`.
inline Rng derived_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

/// `count` distinct indices from [0, n), in increasing order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
  if (count > n) throw ContractError("cannot sample " + std::to_string(count) + " of " + std::to_string(n) + " items");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline PointSet select_points(const PointSet& p, const std::vector<std::size_t>& idx) {
  std::vector<double> coords;
  coords.reserve(idx.size() * static_cast<std::size_t>(p.dim()));
  for (auto i : idx) coords.insert(coords.end(), p.point(i).begin(), p.point(i).end());
  return PointSet(p.dim(), std::move(coords));
}

/// The drifted controls of one deformation, exposed for calibration checks.
struct Deformation {
  PointSet controls;
  PointSet drifted;
};

inline Deformation draw_deformation(const PointSet& points, double drift_std, std::size_t k_controls, Rng& rng) {
  if (k_controls > points.size()) {
    throw ContractError("deform: " + std::to_string(k_controls) + " controls requested from " +
                        std::to_string(points.size()) + " points");
  }
  if (!(drift_std >= 0.0)) throw ContractError("deform: drift std must be >= 0");
  Deformation d;
  d.controls = select_points(points, sample_indices(points.size(), k_controls, rng));
  d.drifted = d.controls;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double& c : d.drifted.coords()) c += drift_std * noise(rng);
  return d;
}

/// Drifts `k_controls` random points of the set and warps the whole set with
/// the TPS through the drifted controls.
inline PointSet deform(const PointSet& points, double level, std::size_t k_controls, Rng& rng, double drift_scale = 0.4,
                       double regularization = 1.0) {
  if (!(level >= 0.0)) throw ContractError("deform: level must be >= 0");
  if (points.empty()) throw EmptyInputError("deform: empty point set");
  const auto d = draw_deformation(points, 2.0 * level * drift_scale, k_controls, rng);
  return apply_basis(tps_basis(d.controls, points, regularization), d.drifted);
}

/// Per-point Gaussian jitter with std `level` on every coordinate.
inline PointSet add_pd_noise(const PointSet& points, double level, Rng& rng) {
  if (!(level >= 0.0)) throw ContractError("pd noise: level must be >= 0");
  PointSet out = points;
  if (level == 0.0) return out;
  std::normal_distribution<double> noise(0.0, level);
  for (double& c : out.coords()) c += noise(rng);
  return out;
}

/// Removes round(level · N) points uniformly without replacement.
inline PointSet add_di_noise(const PointSet& points, double level, Rng& rng) {
  if (!(level >= 0.0 && level < 1.0)) throw ContractError("di noise: ratio must lie in [0, 1)");
  const auto removed = static_cast<std::size_t>(std::llround(level * static_cast<double>(points.size())));
  if (removed == 0) return points;
  return select_points(points, sample_indices(points.size(), points.size() - removed, rng));
}

/// Appends round(level · N) points drawn from N(0, outlier_std² I).
inline PointSet add_do_noise(const PointSet& points, double level, Rng& rng, double outlier_std = 1.0) {
  if (!(level >= 0.0)) throw ContractError("do noise: ratio must be >= 0");
  const auto added = static_cast<std::size_t>(std::llround(level * static_cast<double>(points.size())));
  PointSet out = points;
  std::normal_distribution<double> noise(0.0, outlier_std);
  std::vector<double> p(static_cast<std::size_t>(points.dim()));
  for (std::size_t i = 0; i < added; ++i) {
    for (double& c : p) c = noise(rng);
    out.push_back(p);
  }
  return out;
}

inline PointSet add_noise(const PointSet& points, NoiseKind kind, double level, Rng& rng, double outlier_std = 1.0) {
  switch (kind) {
    case NoiseKind::pd: return add_pd_noise(points, level, rng);
    case NoiseKind::di: return add_di_noise(points, level, rng);
    case NoiseKind::do_: return add_do_noise(points, level, rng, outlier_std);
    default: return points;
  }
}

// ---------------------------------------------------------------------------
// Built-in shapes

namespace detail {

// Closed fish outline (head at +x, forked tail at −x) as a Catmull-Rom
// control polygon.
inline constexpr std::array<std::array<double, 2>, 18> kFishOutline{{
    {1.0, 0.0},    {0.85, 0.2},   {0.55, 0.38},   {0.15, 0.48},   {-0.1, 0.62},  {-0.2, 0.45},
    {-0.45, 0.3},  {-0.7, 0.12},  {-0.95, 0.42},  {-1.05, 0.38},  {-0.88, 0.0},  {-1.05, -0.38},
    {-0.95, -0.42}, {-0.7, -0.12}, {-0.45, -0.3}, {0.0, -0.42},   {0.45, -0.36}, {0.85, -0.2},
}};

inline PointSet fish_shape(std::size_t count) {
  constexpr std::size_t kSubdiv = 64;
  const std::size_t n = kFishOutline.size();
  std::vector<std::array<double, 2>> dense;
  dense.reserve(n * kSubdiv + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p0 = kFishOutline[(i + n - 1) % n];
    const auto& p1 = kFishOutline[i];
    const auto& p2 = kFishOutline[(i + 1) % n];
    const auto& p3 = kFishOutline[(i + 2) % n];
    for (std::size_t s = 0; s < kSubdiv; ++s) {
      const double t = static_cast<double>(s) / kSubdiv, t2 = t * t, t3 = t2 * t;
      std::array<double, 2> q{};
      for (int a = 0; a < 2; ++a) {
        q[a] = 0.5 * (2 * p1[a] + (-p0[a] + p2[a]) * t + (2 * p0[a] - 5 * p1[a] + 4 * p2[a] - p3[a]) * t2 +
                      (-p0[a] + 3 * p1[a] - 3 * p2[a] + p3[a]) * t3);
      }
      dense.push_back(q);
    }
  }
  dense.push_back(dense.front());
  std::vector<double> arc(dense.size(), 0.0);
  for (std::size_t i = 1; i < dense.size(); ++i) {
    arc[i] = arc[i - 1] + std::hypot(dense[i][0] - dense[i - 1][0], dense[i][1] - dense[i - 1][1]);
  }
  // resample at equal arc-length spacing
  std::vector<double> coords;
  std::size_t seg = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double s = arc.back() * static_cast<double>(i) / static_cast<double>(count);
    while (arc[seg + 1] < s) ++seg;
    const double len = arc[seg + 1] - arc[seg];
    const double u = len > 0.0 ? (s - arc[seg]) / len : 0.0;
    coords.push_back(dense[seg][0] + u * (dense[seg + 1][0] - dense[seg][0]));
    coords.push_back(dense[seg][1] + u * (dense[seg + 1][1] - dense[seg][1]));
  }
  return PointSet(2, std::move(coords));
}

// Torus (radii 1 and 0.4) covered by a golden-ratio lattice in the angles.
inline PointSet torus_shape(std::size_t count) {
  const double golden = (std::sqrt(5.0) - 1.0) / 2.0;
  std::vector<double> coords;
  for (std::size_t i = 0; i < count; ++i) {
    const double u = 2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(count);
    const double v = 2.0 * std::numbers::pi * std::fmod(static_cast<double>(i) * golden, 1.0);
    const double r = 1.0 + 0.4 * std::cos(v);
    coords.insert(coords.end(), {r * std::cos(u), r * std::sin(u), 0.4 * std::sin(v)});
  }
  return PointSet(3, std::move(coords));
}

}  // namespace detail

inline bool is_builtin_shape(const std::string& name) { return name == "fish" || name == "torus"; }

/// A built-in shape ("fish" in 2D, "torus" in 3D) with exactly `count`
/// points, or a point file uniformly subsampled to `count` points when it has
/// more. The result is normalized.
inline PointSet sample_shape(const std::string& name, std::size_t count, Rng& rng) {
  if (count == 0) throw ContractError("sample_shape: point count must be positive");
  PointSet p;
  if (name == "fish") {
    p = detail::fish_shape(count);
  } else if (name == "torus") {
    p = detail::torus_shape(count);
  } else {
    p = read_points(name);
    if (p.size() > count) p = select_points(p, sample_indices(p.size(), count, rng));
  }
  return normalize(p);
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  SynthConfig config;
  std::string shape_name = "fish";
  std::vector<PointSet> sources;
  std::vector<PointSet> targets;

  std::size_t size() const { return sources.size(); }
  int dim() const { return sources.empty() ? 0 : sources.front().dim(); }
};

/// Target for pair `index`: deform the source, renormalize, then corrupt.
inline PointSet synthesize_target(const PointSet& source, const SynthConfig& cfg, std::size_t index) {
  Rng rng = derived_rng(cfg.seed, index);
  PointSet deformed =
      deform(source, cfg.deformation_level, cfg.num_deform_controls, rng, cfg.drift_scale, cfg.deform_regularization);
  return add_noise(normalize(deformed), cfg.noise_kind, cfg.noise_level, rng, cfg.outlier_std);
}

/// Every pair is a pure function of (base shape, config, pair index), so the
/// result does not depend on `threads`.
inline Dataset generate_dataset(const PointSet& base_shape, const SynthConfig& cfg, const std::string& shape_name,
                                unsigned threads = 1) {
  cfg.validate();
  if (base_shape.empty()) throw EmptyInputError("generate_dataset: empty base shape");
  Dataset d;
  d.config = cfg;
  d.shape_name = shape_name;
  const PointSet source = normalize(base_shape);
  d.sources.assign(cfg.pair_count, source);
  d.targets.resize(cfg.pair_count);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cfg.pair_count)));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < cfg.pair_count; i += threads) d.targets[i] = synthesize_target(source, cfg, i);
      } catch (...) {
        failures[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);
  return d;
}

inline constexpr int kDatasetFormatVersion = 1;

inline std::string pair_file(const std::filesystem::path& dir, std::size_t index, const char* role) {
  char name[32];
  std::snprintf(name, sizeof name, "pair_%06zu_%s", index, role);
  return (dir / name).string();
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  KeyValues kv;
  kv.set("format_version", kDatasetFormatVersion);
  kv.set("shape", d.shape_name);
  kv.set("dim", d.dim());
  kv.set("source_points", static_cast<std::uint64_t>(d.sources.empty() ? 0 : d.sources.front().size()));
  d.config.store(kv);
  kv.set("pair_count", static_cast<std::uint64_t>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    write_points(d.sources[i], pair_file(dir, i, "src"));
    write_points(d.targets[i], pair_file(dir, i, "tgt"));
  }
  kv.write((dir / "manifest").string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest";
  if (!std::filesystem::exists(manifest)) throw IoError("dataset manifest not found: " + manifest.string());
  const KeyValues kv = KeyValues::read(manifest.string());
  if (kv.integer("format_version") != kDatasetFormatVersion) {
    throw FormatError(manifest.string() + ": unsupported dataset format version " + kv.text("format_version"));
  }
  Dataset d;
  d.config.load(kv);
  d.shape_name = kv.text("shape");
  const int dim = kv.integer("dim");
  for (std::size_t i = 0; i < d.config.pair_count; ++i) {
    const auto src = pair_file(dir, i, "src");
    const auto tgt = pair_file(dir, i, "tgt");
    if (!std::filesystem::exists(src) || !std::filesystem::exists(tgt)) {
      throw IoError("dataset " + dir.string() + " lists " + std::to_string(d.config.pair_count) +
                    " pairs but pair " + std::to_string(i) + " is missing (" + src + ")");
    }
    d.sources.push_back(read_points(src));
    d.targets.push_back(read_points(tgt));
    if (d.sources.back().dim() != dim || d.targets.back().dim() != dim) {
      throw DimensionError("dataset " + dir.string() + ": pair " + std::to_string(i) + " is not " +
                           std::to_string(dim) + "D");
    }
  }
  return d;
}

}  // namespace prnet
