#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "prnet/datagen.hpp"
#include "prnet/losses.hpp"
#include "prnet/model.hpp"

namespace prnet {

struct RegistrationResult {
  PointSet transformed;
  TpsWarp warp;  // in the normalized frame
  double cd_pre = 0.0;
  double cd_post = 0.0;
  double elapsed = 0.0;  // seconds, model forward only
};

/// Registers one pair with an eval-mode forward pass. With `normalize_inputs`
/// each set is first mapped into the unit box by its own similarity and the
/// result is mapped back through the target's, so distances are reported in
/// the target's original coordinates.
template <typename T>
RegistrationResult register_pair(const PrNetWeights<T>& weights, const PointSet& source, const PointSet& target,
                                 bool normalize_inputs = true) {
  if (source.dim() != weights.config.dim || target.dim() != weights.config.dim) {
    throw DimensionError("register: " + std::to_string(source.dim()) + "D/" + std::to_string(target.dim()) +
                         "D pair for a " + std::to_string(weights.config.dim) + "D model");
  }
  Similarity src_frame, tgt_frame;
  PointSet s = source, g = target;
  if (normalize_inputs) {
    src_frame = normalizing_similarity(source);
    tgt_frame = normalizing_similarity(target);
    s = src_frame.apply(source);
    g = tgt_frame.apply(target);
  }
  RegistrationResult r;
  const auto t0 = std::chrono::steady_clock::now();
  auto [warp, moved] = forward(s, g, weights);
  r.elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.warp = std::move(warp);
  r.transformed = normalize_inputs ? tgt_frame.invert(moved) : std::move(moved);
  r.cd_pre = chamfer(source, target).normalized;
  r.cd_post = chamfer(r.transformed, target).normalized;
  return r;
}

struct PairScore {
  double cd_pre = 0.0;
  double cd_post = 0.0;
};

struct EvaluationSummary {
  std::string dataset_id;
  std::size_t pair_count = 0;
  double cd_pre_mean = 0.0, cd_pre_std = 0.0;
  double cd_post_mean = 0.0, cd_post_std = 0.0;
  double model_time_s = 0.0;
  double total_time_s = 0.0;
  std::vector<PairScore> pairs;
  std::vector<PointSet> transformed;  // filled when requested
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

/// Two-pass mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

struct EvaluateOptions {
  unsigned threads = 1;
  std::size_t chunk = 16;  // pairs per batched forward; fixed so results do not depend on threads
  bool keep_transformed = false;
};

/// Registers every pair of a dataset in its stored (already normalized)
/// frame. Pairs are processed in fixed chunks handed out to worker threads,
/// so statistics are identical for every thread count.
template <typename T>
EvaluationSummary evaluate(const PrNetWeights<T>& weights, const Dataset& data, const std::string& dataset_id,
                           const EvaluateOptions& opt = {}) {
  if (data.size() == 0) throw EmptyInputError("evaluate: empty dataset");
  if (data.dim() != weights.config.dim) {
    throw DimensionError("evaluate: " + std::to_string(data.dim()) + "D dataset for a " +
                         std::to_string(weights.config.dim) + "D model");
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.size(), chunk = std::max<std::size_t>(1, opt.chunk);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<PointSet> moved(n);
  std::vector<PairScore> scores(n);
  std::vector<double> model_seconds(chunks, 0.0);
  std::atomic<std::size_t> next{0};
  const unsigned threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(chunks)));
  std::vector<std::exception_ptr> failures(threads);
  auto work = [&](unsigned t) {
    try {
      NoGradGuard no_grad;
      for (std::size_t c; (c = next.fetch_add(1)) < chunks;) {
        const std::size_t b = c * chunk, e = std::min(n, b + chunk);
        const auto t0 = std::chrono::steady_clock::now();
        auto out = forward_batch<T>(weights, std::span<const PointSet>(data.sources).subspan(b, e - b),
                                    std::span<const PointSet>(data.targets).subspan(b, e - b), NormMode::eval);
        model_seconds[c] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (std::size_t i = b; i < e; ++i) {
          const auto& x = out.transformed[i - b];
          moved[i] = PointSet(data.dim(), std::vector<double>(x.data().begin(), x.data().end()));
          scores[i] = {chamfer(data.sources[i], data.targets[i]).normalized, chamfer(moved[i], data.targets[i]).normalized};
        }
      }
    } catch (...) {
      failures[t] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(work, t);
  work(0);
  for (auto& th : pool) th.join();
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);

  EvaluationSummary s;
  s.dataset_id = dataset_id;
  s.pair_count = n;
  std::vector<double> pre, post;
  for (const auto& p : scores) {
    pre.push_back(p.cd_pre);
    post.push_back(p.cd_post);
  }
  const auto a = mean_std(pre), b = mean_std(post);
  s.cd_pre_mean = a.mean;
  s.cd_pre_std = a.std;
  s.cd_post_mean = b.mean;
  s.cd_post_std = b.std;
  for (double t : model_seconds) s.model_time_s += t;
  s.pairs = std::move(scores);
  if (opt.keep_transformed) s.transformed = std::move(moved);
  s.total_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportVersion = 1;
inline constexpr const char* kReportColumns =
    "dataset_id,pair_count,cd_pre_mean,cd_pre_std,cd_post_mean,cd_post_std,model_time_s,total_time_s";

/// CSV report: a versioned comment line naming the Chamfer statistic, the
/// column header, then one row per dataset. With `include_timing` false the
/// time columns are written as 0 so the file is a pure function of its inputs.
inline void write_report(const std::vector<EvaluationSummary>& rows, std::ostream& out, bool include_timing = true) {
  out << "# prnet-report v" << kReportVersion
      << "; cd = normalized chamfer (sum of squared nearest-neighbour distances both ways / (|a|+|b|)); std = "
         "population\n";
  out << kReportColumns << '\n';
  for (const auto& r : rows) {
    out << r.dataset_id << ',' << r.pair_count << ',' << format_double(r.cd_pre_mean) << ','
        << format_double(r.cd_pre_std) << ',' << format_double(r.cd_post_mean) << ',' << format_double(r.cd_post_std)
        << ',' << format_double(include_timing ? r.model_time_s : 0.0) << ','
        << format_double(include_timing ? r.total_time_s : 0.0) << '\n';
  }
}

inline void write_report(const std::vector<EvaluationSummary>& rows, const std::string& path,
                         bool include_timing = true) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path);
  write_report(rows, out, include_timing);
  if (!out) throw IoError("failed writing report " + path);
}

// ---------------------------------------------------------------------------
// SVG overlays

namespace detail {

inline void svg_panel(std::ostream& out, const PointSet* sets[3], int ax, int ay, double x0, double size) {
  static const char* colors[3] = {"#1f5fd6", "#d62728", "#2ca02c"};
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < sets[k]->size(); ++i) {
      for (int a : {ax, ay}) {
        lo = std::min(lo, (*sets[k])(i, a));
        hi = std::max(hi, (*sets[k])(i, a));
      }
    }
  const double span = hi > lo ? hi - lo : 1.0, pad = 20.0, inner = size - 2 * pad;
  auto px = [&](double v) { return x0 + pad + (v - lo) / span * inner; };
  auto py = [&](double v) { return 40.0 + pad + (hi - v) / span * inner; };
  out << "<rect x=\"" << x0 << "\" y=\"40\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
  for (int k = 0; k < 3; ++k) {
    out << "<g fill=\"" << colors[k] << "\" fill-opacity=\"0.8\">\n";
    for (std::size_t i = 0; i < sets[k]->size(); ++i) {
      out << "<circle cx=\"" << format_double(px((*sets[k])(i, ax))) << "\" cy=\""
          << format_double(py((*sets[k])(i, ay))) << "\" r=\"2.5\"/>\n";
    }
    out << "</g>\n";
  }
}

}  // namespace detail

/// Source (blue), target (red) and transformed source (green) scatter plot
/// with a legend and the post-registration Chamfer distance. 3D pairs are
/// drawn as xy, xz and yz projections.
inline void write_overlay_svg(const PointSet& source, const PointSet& target, const PointSet& transformed,
                              double cd_post, std::ostream& out) {
  if (source.dim() != target.dim() || transformed.dim() != target.dim()) {
    throw DimensionError("overlay: point sets differ in dimension");
  }
  const double size = 400.0;
  const int panels = source.dim() == 2 ? 1 : 3;
  const double width = size * panels;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << size + 70
      << "\" viewBox=\"0 0 " << width << ' ' << size + 70 << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"10\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">C.D. = " << format_double(cd_post)
      << "</text>\n";
  const PointSet* sets[3] = {&source, &target, &transformed};
  if (panels == 1) {
    detail::svg_panel(out, sets, 0, 1, 0.0, size);
  } else {
    const int axes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    for (int p = 0; p < 3; ++p) detail::svg_panel(out, sets, axes[p][0], axes[p][1], p * size, size);
  }
  const char* labels[3] = {"source", "target", "transformed"};
  const char* colors[3] = {"#1f5fd6", "#d62728", "#2ca02c"};
  for (int k = 0; k < 3; ++k) {
    const double x = 10.0 + 120.0 * k, y = size + 58.0;
    out << "<circle cx=\"" << x + 5 << "\" cy=\"" << y - 4 << "\" r=\"4\" fill=\"" << colors[k] << "\"/>\n";
    out << "<text x=\"" << x + 14 << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"12\">" << labels[k]
        << "</text>\n";
  }
  out << "</svg>\n";
}

inline void write_overlay_svg(const PointSet& source, const PointSet& target, const PointSet& transformed,
                              double cd_post, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write plot " + path);
  write_overlay_svg(source, target, transformed, cd_post, out);
  if (!out) throw IoError("failed writing plot " + path);
}

}  // namespace prnet
