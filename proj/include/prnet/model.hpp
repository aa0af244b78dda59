#pragma once

// The registration network: shape descriptor tensors on reference grids, the
// all-to-all correlation between them, and a CNN + fully connected head that
// regresses TPS control-point displacements.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prnet/ops.hpp"
#include "prnet/pointset.hpp"
#include "prnet/tps.hpp"

namespace prnet {

struct ModelConfig {
  int dim = 2;
  std::vector<std::size_t> grid_resolution{11, 11};
  std::vector<std::size_t> mlp_widths{16, 32, 64, 128};
  std::vector<std::size_t> conv_channels{128, 256, 512};
  std::vector<std::size_t> conv_kernels{3, 4, 5};
  std::vector<std::size_t> fc_widths{64, 18};
  double leaky_slope = 0.1;

  /// Defaults: 11×11 grid with kernels 3,4,5 in 2D; 5×5×5 grid with
  /// kernels 3,2,2 and FC widths 512,81 in 3D.
  static ModelConfig for_dimension(int dim) {
    ModelConfig c;
    c.dim = dim;
    if (dim == 3) {
      c.grid_resolution = {5, 5, 5};
      c.conv_kernels = {3, 2, 2};
      c.fc_widths = {512, 81};
    } else if (dim != 2) {
      throw DimensionError("model: unsupported dimension " + std::to_string(dim));
    }
    return c;
  }

  std::size_t control_count() const { return dim == 2 ? 9 : 27; }
  std::size_t theta_count() const { return control_count() * static_cast<std::size_t>(dim); }
  std::size_t descriptor_width() const { return mlp_widths.back(); }

  std::size_t grid_points() const {
    std::size_t n = 1;
    for (auto r : grid_resolution) n *= r;
    return n;
  }

  /// Spatial extent per axis after each conv layer.
  std::vector<std::vector<std::size_t>> conv_extents() const {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur = grid_resolution;
    for (auto k : conv_kernels) {
      for (auto& e : cur) {
        if (k > e) throw DimensionError("model: conv kernel " + std::to_string(k) + " exceeds extent " + std::to_string(e));
        e = e - k + 1;
      }
      out.push_back(cur);
    }
    return out;
  }

  std::size_t flattened_width() const {
    std::size_t n = conv_channels.back();
    const auto extents = conv_extents();
    for (auto e : extents.back()) n *= e;
    return n;
  }

  void validate() const {
    if (dim != 2 && dim != 3) throw DimensionError("model: unsupported dimension " + std::to_string(dim));
    if (grid_resolution.size() != static_cast<std::size_t>(dim)) {
      throw DimensionError("model: grid resolution needs one extent per axis");
    }
    for (auto r : grid_resolution)
      if (r < 2) throw DimensionError("model: reference grid resolution must be >= 2 per axis");
    if (mlp_widths.empty() || conv_channels.empty() || fc_widths.empty()) {
      throw DimensionError("model: every stage needs at least one layer");
    }
    if (conv_channels.size() != conv_kernels.size()) {
      throw DimensionError("model: conv channels and kernels differ in length");
    }
    (void)conv_extents();
    if (fc_widths.back() != theta_count()) {
      throw DimensionError("model: output width " + std::to_string(fc_widths.back()) + " but TPS needs " +
                           std::to_string(theta_count()));
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ContractError("model: leaky slope must lie in (0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Reference grids

/// Uniform lattice over [−1,1]^dim, axis 0 varying slowest.
inline PointSet build_reference_grid(int dim, const std::vector<std::size_t>& resolution) {
  if (dim != 2 && dim != 3) throw DimensionError("reference grid: unsupported dimension " + std::to_string(dim));
  if (resolution.size() != static_cast<std::size_t>(dim)) {
    throw DimensionError("reference grid: need " + std::to_string(dim) + " extents");
  }
  for (auto r : resolution)
    if (r < 2) throw DimensionError("reference grid: resolution must be >= 2 per axis");
  auto tick = [](std::size_t i, std::size_t n) { return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1); };
  std::vector<double> coords;
  const std::size_t nz = dim == 3 ? resolution[2] : 1;
  for (std::size_t i = 0; i < resolution[0]; ++i)
    for (std::size_t j = 0; j < resolution[1]; ++j)
      for (std::size_t k = 0; k < nz; ++k) {
        coords.push_back(tick(i, resolution[0]));
        coords.push_back(tick(j, resolution[1]));
        if (dim == 3) coords.push_back(tick(k, resolution[2]));
      }
  return PointSet(dim, std::move(coords));
}

// ---------------------------------------------------------------------------
// Weights

template <typename T>
struct DenseLayer {
  Tensor<T> weight;  // [in × out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct ConvLayer {
  Tensor<T> kernel;  // [out × in × k...]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormLayer {
  Tensor<T> scale;
  Tensor<T> shift;
  BatchNormState<T> stats;
};

/// All trainable parameters plus normalization statistics.
template <typename T>
struct PrNetWeights {
  ModelConfig config;
  std::vector<DenseLayer<T>> mlp;
  std::vector<NormLayer<T>> mlp_norm;
  std::vector<ConvLayer<T>> conv;
  std::vector<NormLayer<T>> conv_norm;
  std::vector<DenseLayer<T>> fc;
  std::vector<NormLayer<T>> fc_norm;  // one per hidden FC layer

  /// Trainable tensors in manifest order.
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    auto norm = [&](NormLayer<T>& n) {
      out.push_back(&n.scale);
      out.push_back(&n.shift);
    };
    for (std::size_t i = 0; i < mlp.size(); ++i) {
      out.push_back(&mlp[i].weight);
      out.push_back(&mlp[i].bias);
      norm(mlp_norm[i]);
    }
    for (std::size_t i = 0; i < conv.size(); ++i) {
      out.push_back(&conv[i].kernel);
      out.push_back(&conv[i].bias);
      norm(conv_norm[i]);
    }
    for (std::size_t i = 0; i < fc.size(); ++i) {
      out.push_back(&fc[i].weight);
      out.push_back(&fc[i].bias);
      if (i < fc_norm.size()) norm(fc_norm[i]);
    }
    return out;
  }

  std::vector<const Tensor<T>*> parameters() const {
    auto ptrs = const_cast<PrNetWeights*>(this)->parameters();
    return {ptrs.begin(), ptrs.end()};
  }

  /// Manifest names, parallel to parameters().
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    auto add = [&](const std::string& prefix, bool normed) {
      out.push_back(prefix + ".weight");
      out.push_back(prefix + ".bias");
      if (normed) {
        out.push_back(prefix + ".norm.scale");
        out.push_back(prefix + ".norm.shift");
      }
    };
    for (std::size_t i = 0; i < mlp.size(); ++i) add("mlp" + std::to_string(i), true);
    for (std::size_t i = 0; i < conv.size(); ++i) add("conv" + std::to_string(i), true);
    for (std::size_t i = 0; i < fc.size(); ++i) add("fc" + std::to_string(i), i < fc_norm.size());
    return out;
  }

  /// Normalization layers in manifest order.
  std::vector<BatchNormState<T>*> norm_states() {
    std::vector<BatchNormState<T>*> out;
    for (auto& n : mlp_norm) out.push_back(&n.stats);
    for (auto& n : conv_norm) out.push_back(&n.stats);
    for (auto& n : fc_norm) out.push_back(&n.stats);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  /// Deep copy in another scalar type.
  template <typename U>
  PrNetWeights<U> cast() const {
    auto tensor = [](const Tensor<T>& t) {
      std::vector<U> v(t.data().begin(), t.data().end());
      return Tensor<U>::parameter(t.shape(), std::move(v));
    };
    auto stats = [](const BatchNormState<T>& s) {
      BatchNormState<U> out;
      out.running_mean.assign(s.running_mean.begin(), s.running_mean.end());
      out.running_var.assign(s.running_var.begin(), s.running_var.end());
      out.momentum = static_cast<U>(s.momentum);
      out.eps = static_cast<U>(s.eps);
      return out;
    };
    PrNetWeights<U> w;
    w.config = config;
    for (const auto& l : mlp) w.mlp.push_back({tensor(l.weight), tensor(l.bias)});
    for (const auto& l : conv) w.conv.push_back({tensor(l.kernel), tensor(l.bias)});
    for (const auto& l : fc) w.fc.push_back({tensor(l.weight), tensor(l.bias)});
    for (const auto& n : mlp_norm) w.mlp_norm.push_back({tensor(n.scale), tensor(n.shift), stats(n.stats)});
    for (const auto& n : conv_norm) w.conv_norm.push_back({tensor(n.scale), tensor(n.shift), stats(n.stats)});
    for (const auto& n : fc_norm) w.fc_norm.push_back({tensor(n.scale), tensor(n.shift), stats(n.stats)});
    return w;
  }

  PrNetWeights clone() const { return cast<T>(); }
};

/// Allocates every tensor with the shapes `config` implies, all zeros, unit
/// normalization scales.
template <typename T>
PrNetWeights<T> allocate_weights(const ModelConfig& config) {
  config.validate();
  PrNetWeights<T> w;
  w.config = config;
  auto norm = [](std::size_t f) {
    NormLayer<T> n;
    n.scale = Tensor<T>::parameter({f}, std::vector<T>(f, T{1}));
    n.shift = Tensor<T>::zeros({f}, true);
    n.stats = BatchNormState<T>(f);
    return n;
  };
  std::size_t in = 2 * static_cast<std::size_t>(config.dim);
  for (auto width : config.mlp_widths) {
    w.mlp.push_back({Tensor<T>::zeros({in, width}, true), Tensor<T>::zeros({width}, true)});
    w.mlp_norm.push_back(norm(width));
    in = width;
  }
  in = config.grid_points();  // correlation channels
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    Shape kshape{config.conv_channels[i], in};
    for (int a = 0; a < config.dim; ++a) kshape.push_back(config.conv_kernels[i]);
    w.conv.push_back({Tensor<T>::zeros(kshape, true), Tensor<T>::zeros({config.conv_channels[i]}, true)});
    w.conv_norm.push_back(norm(config.conv_channels[i]));
    in = config.conv_channels[i];
  }
  in = config.flattened_width();
  for (std::size_t i = 0; i < config.fc_widths.size(); ++i) {
    const std::size_t width = config.fc_widths[i];
    w.fc.push_back({Tensor<T>::zeros({in, width}, true), Tensor<T>::zeros({width}, true)});
    if (i + 1 < config.fc_widths.size()) w.fc_norm.push_back(norm(width));
    in = width;
  }
  return w;
}

/// Uniform fan-in scaled initialization (bound sqrt(6/fan_in) for weights,
/// 1/sqrt(fan_in) for biases). The output layer starts at zero so the
/// untrained network predicts the identity warp.
template <typename T>
PrNetWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
  auto w = allocate_weights<T>(config);
  std::mt19937_64 rng(seed);
  auto fill = [&](Tensor<T>& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  };
  auto init_pair = [&](Tensor<T>& weight, Tensor<T>& bias, std::size_t fan_in) {
    fill(weight, std::sqrt(6.0 / static_cast<double>(fan_in)));
    fill(bias, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  for (auto& l : w.mlp) init_pair(l.weight, l.bias, l.weight.dim(0));
  for (auto& l : w.conv) init_pair(l.kernel, l.bias, l.kernel.size() / l.kernel.dim(0));
  for (std::size_t i = 0; i + 1 < w.fc.size(); ++i) init_pair(w.fc[i].weight, w.fc[i].bias, w.fc[i].weight.dim(0));
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

template <typename T>
Tensor<T> normalize_layer(const Tensor<T>& x, NormLayer<T>& layer, NormMode mode,
                          std::span<const T> sample_weights = {}) {
  if (mode == NormMode::train && !sample_weights.empty()) {
    return weighted_batch_norm(x, layer.scale, layer.shift, layer.stats, sample_weights);
  }
  return batch_norm(x, layer.scale, layer.shift, layer.stats, mode);
}

template <typename T>
Tensor<T> normalize_layer(const Tensor<T>& x, const NormLayer<T>& layer, NormMode mode,
                          std::span<const T> = {}) {
  if (mode == NormMode::train) throw ContractError("train-mode normalization needs mutable weights");
  return batch_norm(x, layer.scale, layer.shift, layer.stats);
}

}  // namespace detail

/// Shape descriptor tensors for a batch of point sets, [sets × grid × d].
///
/// Every grid point is paired with every set point, the 4- or 6-wide rows
/// pass through the shared MLP, each (set, grid point) block is max-pooled
/// over the set, and the pooled vectors are scaled to unit length.
/// `Weights` is PrNetWeights<T> (train mode allowed) or const PrNetWeights<T>.
template <typename T, typename Weights>
Tensor<T> compute_sdt_batch(Weights& weights, std::span<const PointSet* const> sets, NormMode mode) {
  const auto& cfg = weights.config;
  if (sets.empty()) throw EmptyInputError("compute_sdt: no point sets");
  const PointSet grid = build_reference_grid(cfg.dim, cfg.grid_resolution);
  const std::size_t g = grid.size(), dim = static_cast<std::size_t>(cfg.dim);
  for (const auto* s : sets) {
    if (s->empty()) throw EmptyInputError("compute_sdt: empty point set");
    if (s->dim() != cfg.dim) {
      throw DimensionError("compute_sdt: " + std::to_string(s->dim()) + "D points for a " + std::to_string(cfg.dim) +
                           "D model");
    }
  }
  // Identical sets (typically the shared source shape) go through the MLP
  // once; in train mode their rows are weighted by multiplicity so the batch
  // statistics equal those of the full batch.
  std::vector<const PointSet*> unique;
  std::vector<std::size_t> slot(sets.size());
  std::vector<T> multiplicity;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    std::size_t u = 0;
    while (u < unique.size() && !(unique[u] == sets[i] || *unique[u] == *sets[i])) ++u;
    if (u == unique.size()) {
      unique.push_back(sets[i]);
      multiplicity.push_back(T{0});
    }
    multiplicity[u] += T{1};
    slot[i] = u;
  }
  const bool deduplicated = unique.size() < sets.size();

  std::size_t rows = 0;
  for (const auto* s : unique) rows += g * s->size();
  std::vector<T> input;
  input.reserve(rows * 2 * dim);
  std::vector<std::size_t> segments;
  segments.reserve(unique.size() * g);
  std::vector<T> row_weights;
  if (deduplicated && mode == NormMode::train) row_weights.reserve(rows);
  for (std::size_t u = 0; u < unique.size(); ++u) {
    const PointSet& s = *unique[u];
    for (std::size_t i = 0; i < g; ++i) {
      const auto gp = grid.point(i);
      for (std::size_t j = 0; j < s.size(); ++j) {
        const auto sp = s.point(j);
        for (std::size_t a = 0; a < dim; ++a) input.push_back(static_cast<T>(gp[a]));
        for (std::size_t a = 0; a < dim; ++a) input.push_back(static_cast<T>(sp[a]));
      }
      segments.push_back(s.size());
    }
    if (row_weights.capacity()) row_weights.insert(row_weights.end(), g * s.size(), multiplicity[u]);
  }
  const T slope = static_cast<T>(cfg.leaky_slope);
  Tensor<T> x = Tensor<T>::constant({rows, 2 * dim}, std::move(input));
  for (std::size_t l = 0; l < weights.mlp.size(); ++l) {
    x = linear(x, weights.mlp[l].weight, weights.mlp[l].bias);
    x = detail::normalize_layer(x, weights.mlp_norm[l], mode, std::span<const T>(row_weights));
    x = leaky_relu(x, slope);
  }
  x = max_pool_segments(x, segments);
  x = l2_normalize(x, 1);
  x = reshape(x, {unique.size(), g, cfg.descriptor_width()});
  return deduplicated ? gather_rows(x, std::move(slot)) : x;
}

/// Descriptor tensor of a single point set, [grid × d].
template <typename T, typename Weights>
Tensor<T> compute_sdt(const PointSet& points, Weights& weights, NormMode mode = NormMode::eval) {
  const PointSet* one[] = {&points};
  auto f = compute_sdt_batch<T>(weights, std::span<const PointSet* const>(one), mode);
  return reshape(f, {f.dim(1), f.dim(2)});
}

/// Correlation volume [B × t × G]: entry (b, j, i) is the inner product of
/// target descriptor j with source descriptor i, and each length-t fiber
/// (fixed b, i) is scaled to unit length. Axis 1 doubles as the channel axis
/// of the regression CNN, whose spatial axes are the source grid.
template <typename T>
Tensor<T> compute_correlation(const Tensor<T>& source_sdt, const Tensor<T>& target_sdt) {
  if (source_sdt.rank() != 3 || target_sdt.rank() != 3 || source_sdt.dim(0) != target_sdt.dim(0)) {
    throw DimensionError("compute_correlation: incompatible descriptor batches " +
                         detail::shape_string(source_sdt.shape()) + " and " + detail::shape_string(target_sdt.shape()));
  }
  if (source_sdt.dim(2) != target_sdt.dim(2)) {
    throw DimensionError("compute_correlation: descriptor widths " + std::to_string(source_sdt.dim(2)) + " and " +
                         std::to_string(target_sdt.dim(2)) + " differ");
  }
  return l2_normalize(batched_matmul_nt(target_sdt, source_sdt), 1);
}

/// Regression head: correlation [B × t × G] → displacements Δθ [B × K·dim].
template <typename T, typename Weights>
Tensor<T> predict_displacements(const Tensor<T>& correlation, Weights& weights, NormMode mode) {
  const auto& cfg = weights.config;
  const std::size_t t = cfg.grid_points();
  if (correlation.rank() != 3 || correlation.dim(1) != t || correlation.dim(2) != t) {
    throw DimensionError("predict_theta: correlation " + detail::shape_string(correlation.shape()) +
                         " does not match a " + std::to_string(t) + "-point reference grid");
  }
  const std::size_t batch = correlation.dim(0);
  const T slope = static_cast<T>(cfg.leaky_slope);
  Shape spatial{batch, t};
  for (auto r : cfg.grid_resolution) spatial.push_back(r);
  Tensor<T> x = reshape(correlation, spatial);
  for (std::size_t l = 0; l < weights.conv.size(); ++l) {
    x = conv_valid(x, weights.conv[l].kernel, weights.conv[l].bias);
    x = detail::normalize_layer(x, weights.conv_norm[l], mode);
    x = leaky_relu(x, slope);
  }
  x = reshape(x, {batch, x.size() / batch});
  for (std::size_t l = 0; l < weights.fc.size(); ++l) {
    x = linear(x, weights.fc[l].weight, weights.fc[l].bias);
    if (l < weights.fc_norm.size()) {
      x = detail::normalize_layer(x, weights.fc_norm[l], mode);
      x = leaky_relu(x, slope);
    }
  }
  return x;
}

/// θ = θ₀ + Δθ, [B × K·dim].
template <typename T, typename Weights>
Tensor<T> predict_theta(const Tensor<T>& correlation, Weights& weights, NormMode mode) {
  auto delta = predict_displacements<T>(correlation, weights, mode);
  const ControlGrid base = make_control_grid(weights.config.dim);
  const std::size_t batch = delta.dim(0), width = delta.dim(1);
  std::vector<T> offsets(batch * width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < width; ++i) offsets[b * width + i] = static_cast<T>(base.points.coords()[i]);
  return add(delta, Tensor<T>::constant({batch, width}, std::move(offsets)));
}

template <typename T>
struct ForwardResult {
  Tensor<T> theta;                     // [B × K·dim], absolute control positions
  std::vector<Tensor<T>> transformed;  // per pair, [N_b × dim]
};

/// Registers every (sources[b], targets[b]) pair in one batched pass. Inputs
/// are expected in the normalized frame.
template <typename T, typename Weights>
ForwardResult<T> forward_batch(Weights& weights, std::span<const PointSet> sources, std::span<const PointSet> targets,
                               NormMode mode) {
  if (sources.size() != targets.size()) throw DimensionError("forward: source and target batches differ in size");
  if (sources.empty()) throw EmptyInputError("forward: empty batch");
  const std::size_t batch = sources.size();
  std::vector<const PointSet*> sets;
  sets.reserve(2 * batch);
  for (const auto& s : sources) sets.push_back(&s);
  for (const auto& g : targets) sets.push_back(&g);
  auto sdt = compute_sdt_batch<T>(weights, std::span<const PointSet* const>(sets), mode);
  auto correlation = compute_correlation(slice_rows(sdt, 0, batch), slice_rows(sdt, batch, 2 * batch));

  ForwardResult<T> result;
  result.theta = predict_theta<T>(correlation, weights, mode);
  const ControlGrid base = make_control_grid(weights.config.dim);
  const std::size_t k = base.count(), dim = static_cast<std::size_t>(weights.config.dim);
  for (std::size_t b = 0; b < batch; ++b) {
    auto theta_b = reshape(slice_rows(result.theta, b, b + 1), {k, dim});
    result.transformed.push_back(apply_warp(tps_basis(base, sources[b], kDefaultTpsRegularization), theta_b));
  }
  return result;
}

/// Single-pair eval-mode forward: the predicted warp and the warped source.
template <typename T>
std::pair<TpsWarp, PointSet> forward(const PointSet& source, const PointSet& target, const PrNetWeights<T>& weights) {
  NoGradGuard no_grad;
  const PointSet s[] = {source};
  const PointSet g[] = {target};
  auto out = forward_batch<T>(weights, std::span<const PointSet>(s), std::span<const PointSet>(g), NormMode::eval);
  TpsWarp warp = TpsWarp::identity(make_control_grid(weights.config.dim));
  warp.targets = PointSet(weights.config.dim, std::vector<double>(out.theta.data().begin(), out.theta.data().end()));
  PointSet moved(weights.config.dim,
                 std::vector<double>(out.transformed[0].data().begin(), out.transformed[0].data().end()));
  return {std::move(warp), std::move(moved)};
}

}  // namespace prnet
