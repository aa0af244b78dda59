#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "prnet/errors.hpp"

namespace prnet {

/// An ordered list of 2D or 3D points stored row-major.
class PointSet {
 public:
  PointSet() = default;
  PointSet(int dim, std::vector<double> coords) : dim_(dim), coords_(std::move(coords)) {
    if (dim != 2 && dim != 3) throw DimensionError("point sets must be 2D or 3D, got dim " + std::to_string(dim));
    if (coords_.size() % static_cast<std::size_t>(dim) != 0) {
      throw DimensionError(std::to_string(coords_.size()) + " coordinates do not form " + std::to_string(dim) +
                           "D points");
    }
  }

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return dim_ ? coords_.size() / static_cast<std::size_t>(dim_) : 0; }
  bool empty() const noexcept { return coords_.empty(); }

  std::span<const double> point(std::size_t i) const {
    return {coords_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
  }
  std::span<double> point(std::size_t i) {
    return {coords_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
  }
  double operator()(std::size_t i, std::size_t axis) const { return coords_[i * static_cast<std::size_t>(dim_) + axis]; }

  const std::vector<double>& coords() const noexcept { return coords_; }
  std::vector<double>& coords() noexcept { return coords_; }

  void push_back(std::span<const double> p) {
    if (p.size() != static_cast<std::size_t>(dim_)) throw DimensionError("point arity does not match set dimension");
    coords_.insert(coords_.end(), p.begin(), p.end());
  }

  friend bool operator==(const PointSet&, const PointSet&) = default;

 private:
  int dim_ = 0;
  std::vector<double> coords_;
};

/// Translation plus isotropic scale: normalized = (p − center) · factor.
struct Similarity {
  std::vector<double> center;
  double factor = 1.0;

  PointSet apply(const PointSet& p) const {
    PointSet out = p;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto q = out.point(i);
      for (std::size_t a = 0; a < q.size(); ++a) q[a] = (q[a] - center[a]) * factor;
    }
    return out;
  }

  PointSet invert(const PointSet& p) const {
    PointSet out = p;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto q = out.point(i);
      for (std::size_t a = 0; a < q.size(); ++a) q[a] = q[a] / factor + center[a];
    }
    return out;
  }
};

inline constexpr double kNormalizedExtent = 0.9;

/// Similarity that moves the centroid to the origin and scales the largest
/// absolute coordinate to `extent`.
inline Similarity normalizing_similarity(const PointSet& p, double extent = kNormalizedExtent) {
  if (p.empty()) throw EmptyInputError("cannot normalize an empty point set");
  Similarity s;
  s.center.assign(static_cast<std::size_t>(p.dim()), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int a = 0; a < p.dim(); ++a) s.center[a] += p(i, a);
  for (auto& c : s.center) c /= static_cast<double>(p.size());
  double max_abs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int a = 0; a < p.dim(); ++a) max_abs = std::max(max_abs, std::abs(p(i, a) - s.center[a]));
  s.factor = max_abs > 0.0 ? extent / max_abs : 1.0;
  return s;
}

inline PointSet normalize(const PointSet& p, double extent = kNormalizedExtent) {
  return normalizing_similarity(p, extent).apply(p);
}

// ---------------------------------------------------------------------------
// Text point files: one point per line, 2 or 3 reals separated by whitespace
// or commas, '#' starts a comment. Wavefront-style "v x y z" vertex lines are
// accepted and any other mesh record ("f", "vn", ...) is skipped.

inline PointSet parse_points(std::istream& in, const std::string& source_name) {
  std::vector<double> coords;
  int dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    for (char& c : line)
      if (c == ',' || c == '\t' || c == '\r') c = ' ';
    std::istringstream tokens(line);
    std::vector<std::string> fields;
    for (std::string tok; tokens >> tok;) fields.push_back(tok);
    if (fields.empty()) continue;
    if (std::isalpha(static_cast<unsigned char>(fields[0][0]))) {
      if (fields[0] != "v") continue;
      fields.erase(fields.begin());
    }
    if (fields.size() != 2 && fields.size() != 3) {
      throw ParseError(source_name, line_no, "expected 2 or 3 coordinates, found " + std::to_string(fields.size()));
    }
    const int row_dim = static_cast<int>(fields.size());
    if (dim == 0) dim = row_dim;
    if (row_dim != dim) {
      throw ParseError(source_name, line_no,
                       "expected " + std::to_string(dim) + " coordinates, found " + std::to_string(row_dim));
    }
    for (const auto& f : fields) {
      double value = 0.0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(value)) {
        throw ParseError(source_name, line_no, "not a finite number: '" + f + "'");
      }
      coords.push_back(value);
    }
  }
  if (dim == 0) throw ParseError(source_name, line_no, "no points found");
  return PointSet(dim, std::move(coords));
}

inline PointSet read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point file " + path);
  return parse_points(in, path);
}

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_points(const PointSet& p, std::ostream& out) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (int a = 0; a < p.dim(); ++a) {
      if (a) out << ' ';
      out << format_double(p(i, a));
    }
    out << '\n';
  }
}

inline void write_points(const PointSet& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write point file " + path);
  write_points(p, out);
  if (!out) throw IoError("failed writing point file " + path);
}

}  // namespace prnet
