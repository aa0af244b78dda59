#pragma once

// Differentiable operations over prnet::Tensor.
//
// Every reduction runs in a fixed order so repeated evaluation with the same
// inputs is bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "prnet/tensor.hpp"

namespace prnet {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                         shape_string(b) + " differ");
  }
}

// A tensor viewed as [outer, extent, inner] around one axis.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* g = detail::parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [factor](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

/// Sum of all elements, as a one-element tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{};
  for (T v : a.data()) total += v;
  return Tensor<T>::from_op({1}, {total}, {a}, [](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      const T s = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += s;
    }
  });
}

/// Sum of one-element tensors, in order.
template <typename T>
Tensor<T> add_scalars(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw EmptyInputError("add_scalars: no terms");
  T total{};
  for (const auto& t : terms) total += t.item();
  return Tensor<T>::from_op({1}, {total}, terms, [](auto& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (T* g = detail::parent_grad(self, p)) g[0] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (element_count(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + detail::shape_string(a.shape()) + " as " +
                         detail::shape_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a}, [](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + detail::shape_string(a.shape()));
  }
  const std::size_t row = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a}, [begin, row](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      g += begin * row;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Rows of `a` (along axis 0) in the order given by `index`; rows may repeat.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> index) {
  if (a.rank() < 1 || index.empty()) throw DimensionError("gather_rows: need a tensor and a nonempty index");
  const std::size_t row = a.size() / a.dim(0);
  for (auto i : index)
    if (i >= a.dim(0)) {
      throw DimensionError("gather_rows: row " + std::to_string(i) + " out of range for " +
                           detail::shape_string(a.shape()));
    }
  Shape shape = a.shape();
  shape[0] = index.size();
  std::vector<T> out;
  out.reserve(index.size() * row);
  for (auto i : index) out.insert(out.end(), a.data().begin() + i * row, a.data().begin() + (i + 1) * row);
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a}, [row, index = std::move(index)](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t r = 0; r < index.size(); ++r) {
        T* dst = g + index[r] * row;
        const T* src = self.grad.data() + r * row;
        for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T{0} && slope < T{1})) throw ContractError("leaky_relu: slope must lie in (0,1)");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T{0} ? v : slope * v;
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [slope](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      const auto& in = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += in[i] > T{0} ? self.grad[i] : slope * self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// x[N×a] · w[a×b] + bias[b]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1 || x.dim(1) != w.dim(0) ||
      bias.dim(0) != w.dim(1)) {
    throw DimensionError("linear: incompatible shapes x=" + detail::shape_string(x.shape()) +
                         " w=" + detail::shape_string(w.shape()) +
                         " bias=" + detail::shape_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), a = x.dim(1), b = w.dim(1);
  std::vector<T> out(n * b);
  {
    detail::MatMap<T> y(out.data(), n, b);
    detail::ConstMatMap<T> xm(x.data().data(), n, a), wm(w.data().data(), a, b);
    y.noalias() = xm * wm;
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), b);
    y.rowwise() += bv;
  }
  return Tensor<T>::from_op({n, b}, std::move(out), {x, w, bias}, [n, a, b](auto& self) {
    detail::ConstMatMap<T> dy(self.grad.data(), n, b);
    detail::ConstMatMap<T> xm(self.parents[0]->value.data(), n, a);
    detail::ConstMatMap<T> wm(self.parents[1]->value.data(), a, b);
    if (T* g = detail::parent_grad(self, 0)) detail::MatMap<T>(g, n, a).noalias() += dy * wm.transpose();
    if (T* g = detail::parent_grad(self, 1)) detail::MatMap<T>(g, a, b).noalias() += xm.transpose() * dy;
    if (T* g = detail::parent_grad(self, 2)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < b; ++j) g[j] += dy(i, j);
      }
    }
  });
}

/// a[M×K] · b[K×N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + detail::shape_string(a.shape()) + " and " +
                         detail::shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    detail::ConstMatMap<T> dy(self.grad.data(), m, n);
    detail::ConstMatMap<T> am(self.parents[0]->value.data(), m, k);
    detail::ConstMatMap<T> bm(self.parents[1]->value.data(), k, n);
    if (T* g = detail::parent_grad(self, 0)) detail::MatMap<T>(g, m, k).noalias() += dy * bm.transpose();
    if (T* g = detail::parent_grad(self, 1)) detail::MatMap<T>(g, k, n).noalias() += am.transpose() * dy;
  });
}

/// Batched a[B×M×K] · b[B×N×K]ᵀ → [B×M×N].
template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw DimensionError("batched_matmul_nt: incompatible shapes " + detail::shape_string(a.shape()) +
                         " and " + detail::shape_string(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), n = b.dim(1), k = a.dim(2);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MatMap<T>(out.data() + i * m * n, m, n).noalias() =
        detail::ConstMatMap<T>(a.data().data() + i * m * k, m, k) *
        detail::ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
  }
  return Tensor<T>::from_op({batch, m, n}, std::move(out), {a, b}, [batch, m, n, k](auto& self) {
    T* ga = detail::parent_grad(self, 0);
    T* gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < batch; ++i) {
      detail::ConstMatMap<T> dy(self.grad.data() + i * m * n, m, n);
      detail::ConstMatMap<T> am(self.parents[0]->value.data() + i * m * k, m, k);
      detail::ConstMatMap<T> bm(self.parents[1]->value.data() + i * n * k, n, k);
      if (ga) detail::MatMap<T>(ga + i * m * k, m, k).noalias() += dy * bm;
      if (gb) detail::MatMap<T>(gb + i * n * k, n, k).noalias() += dy.transpose() * am;
    }
  });
}

/// Scales each fiber along `axis` to unit Euclidean norm. Fibers with norm
/// below `eps` are divided by `eps` instead.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-12)) {
  const auto v = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  std::vector<T> norms(v.outer * v.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      T ss{};
      for (std::size_t e = 0; e < v.extent; ++e) {
        T val = in[(o * v.extent + e) * v.inner + i];
        ss += val * val;
      }
      const T norm = std::max(std::sqrt(ss), eps);
      norms[o * v.inner + i] = norm;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const std::size_t idx = (o * v.extent + e) * v.inner + i;
        out[idx] = in[idx] / norm;
      }
    }
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [v, eps, norms = std::move(norms)](auto& self) {
    T* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const T norm = norms[o * v.inner + i];
        T dot{};
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t idx = (o * v.extent + e) * v.inner + i;
          dot += self.grad[idx] * y[idx];
        }
        // Below eps the map is a plain scaling by 1/eps.
        const T proj = norm > eps ? dot : T{0};
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t idx = (o * v.extent + e) * v.inner + i;
          g[idx] += (self.grad[idx] - y[idx] * proj) / norm;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Set pooling

/// Column-wise max over consecutive row segments of x[R×d]. Returns
/// [segments×d]. Gradients flow to the first maximal row of each column.
template <typename T>
Tensor<T> max_pool_segments(const Tensor<T>& x, const std::vector<std::size_t>& segment_lengths) {
  detail::require_rank(x.shape(), 2, "max_pool_segments");
  const std::size_t rows = x.dim(0), d = x.dim(1), segments = segment_lengths.size();
  if (segments == 0) throw EmptyInputError("max_pool_segments: no segments");
  std::size_t total = 0;
  for (std::size_t len : segment_lengths) {
    if (len == 0) throw EmptyInputError("max_pool_over_set: empty set");
    total += len;
  }
  if (total != rows) {
    throw DimensionError("max_pool_segments: segments cover " + std::to_string(total) + " rows, input has " +
                         std::to_string(rows));
  }
  std::vector<T> out(segments * d);
  std::vector<std::uint32_t> argmax(segments * d);
  auto in = x.data();
  std::size_t start = 0;
  for (std::size_t s = 0; s < segments; ++s) {
    T* best = out.data() + s * d;
    std::uint32_t* arg = argmax.data() + s * d;
    for (std::size_t j = 0; j < d; ++j) {
      best[j] = in[start * d + j];
      arg[j] = static_cast<std::uint32_t>(start);
    }
    for (std::size_t r = start + 1; r < start + segment_lengths[s]; ++r) {
      const T* row = in.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) {
        if (row[j] > best[j]) {
          best[j] = row[j];
          arg[j] = static_cast<std::uint32_t>(r);
        }
      }
    }
    start += segment_lengths[s];
  }
  return Tensor<T>::from_op({segments, d}, std::move(out), {x}, [d, argmax = std::move(argmax)](auto& self) {
    if (T* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i] * d + i % d] += self.grad[i];
    }
  });
}

/// Column-wise max over all K rows of x[K×d] → [d].
template <typename T>
Tensor<T> max_pool_over_set(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 2, "max_pool_over_set");
  return reshape(max_pool_segments(x, {x.dim(0)}), {x.dim(1)});
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeometry {
  std::size_t batch = 1, in_channels = 0, out_channels = 0;
  std::size_t in[3] = {1, 1, 1};
  std::size_t k[3] = {1, 1, 1};
  std::size_t out[3] = {1, 1, 1};
  std::size_t spatial_dims = 0;
  bool batched = false;

  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  std::size_t patch() const { return in_channels * k[0] * k[1] * k[2]; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& bias) {
  ConvGeometry g;
  if (w.size() < 3 || w.size() > 5) {
    throw DimensionError("conv_valid: kernel must be [C_out×C_in×k...] with 1-3 spatial axes, got " +
                         shape_string(w));
  }
  g.spatial_dims = w.size() - 2;
  if (x.size() == g.spatial_dims + 1) {
    g.batched = false;
  } else if (x.size() == g.spatial_dims + 2) {
    g.batched = true;
  } else {
    throw DimensionError("conv_valid: input " + shape_string(x) + " does not match kernel " + shape_string(w));
  }
  const std::size_t off = g.batched ? 1 : 0;
  g.batch = g.batched ? x[0] : 1;
  g.in_channels = x[off];
  g.out_channels = w[0];
  if (w[1] != g.in_channels) {
    throw DimensionError("conv_valid: input channels of " + shape_string(x) + " differ from kernel " +
                         shape_string(w));
  }
  if (bias.size() != 1 || bias[0] != g.out_channels) {
    throw DimensionError("conv_valid: bias " + shape_string(bias) + " does not match kernel " + shape_string(w));
  }
  for (std::size_t s = 0; s < g.spatial_dims; ++s) {
    g.in[s] = x[off + 1 + s];
    g.k[s] = w[2 + s];
    if (g.k[s] > g.in[s]) {
      throw DimensionError("conv_valid: kernel " + shape_string(w) + " larger than input " + shape_string(x));
    }
    g.out[s] = g.in[s] - g.k[s] + 1;
  }
  return g;
}

// Column matrix [batch·out_volume × patch], patch ordered (channel, k0, k1, k2)
// to match the kernel layout.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* xb = x + b * g.in_channels * g.in_volume();
    for (std::size_t o0 = 0; o0 < g.out[0]; ++o0)
      for (std::size_t o1 = 0; o1 < g.out[1]; ++o1)
        for (std::size_t o2 = 0; o2 < g.out[2]; ++o2) {
          T* row = col + ((b * g.out[0] + o0) * g.out[1] * g.out[2] + o1 * g.out[2] + o2) * patch;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            const T* xc = xb + c * g.in_volume();
            for (std::size_t k0 = 0; k0 < g.k[0]; ++k0)
              for (std::size_t k1 = 0; k1 < g.k[1]; ++k1) {
                const T* src = xc + ((o0 + k0) * g.in[1] + (o1 + k1)) * g.in[2] + o2;
                for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) *row++ = src[k2];
              }
          }
        }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    T* xb = x + b * g.in_channels * g.in_volume();
    for (std::size_t o0 = 0; o0 < g.out[0]; ++o0)
      for (std::size_t o1 = 0; o1 < g.out[1]; ++o1)
        for (std::size_t o2 = 0; o2 < g.out[2]; ++o2) {
          const T* row = col + ((b * g.out[0] + o0) * g.out[1] * g.out[2] + o1 * g.out[2] + o2) * patch;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            T* xc = xb + c * g.in_volume();
            for (std::size_t k0 = 0; k0 < g.k[0]; ++k0)
              for (std::size_t k1 = 0; k1 < g.k[1]; ++k1) {
                T* dst = xc + ((o0 + k0) * g.in[1] + (o1 + k1)) * g.in[2] + o2;
                for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) dst[k2] += *row++;
              }
          }
        }
  }
}

}  // namespace detail

/// Valid (unpadded) stride-1 cross-correlation over 1-3 spatial axes.
///
/// x is [C_in×spatial...] or [B×C_in×spatial...]; kernels are
/// [C_out×C_in×k...]; the output keeps the input's batching and has spatial
/// extent input − kernel + 1 on every axis.
template <typename T>
Tensor<T> conv_valid(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), kernels.shape(), bias.shape());
  const std::size_t rows = g.batch * g.out_volume(), patch = g.patch(), co = g.out_channels;

  std::vector<T> col(rows * patch);
  detail::im2col(g, x.data().data(), col.data());
  detail::RowMatrix<T> prod(rows, co);
  prod.noalias() = detail::ConstMatMap<T>(col.data(), rows, patch) *
                   detail::ConstMatMap<T>(kernels.data().data(), co, patch).transpose();

  const std::size_t vol = g.out_volume();
  std::vector<T> out(g.batch * co * vol);
  auto bv = bias.data();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < co; ++c)
      for (std::size_t p = 0; p < vol; ++p) out[(b * co + c) * vol + p] = prod(b * vol + p, c) + bv[c];

  Shape shape;
  if (g.batched) shape.push_back(g.batch);
  shape.push_back(co);
  for (std::size_t s = 0; s < g.spatial_dims; ++s) shape.push_back(g.out[s]);

  // The column matrix is only needed for the kernel gradient.
  if (!(grad_enabled() && kernels.requires_grad())) col.clear();
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x, kernels, bias},
                            [g, col = std::move(col)](auto& self) {
    const std::size_t vol = g.out_volume(), co = g.out_channels, rows = g.batch * vol, patch = g.patch();
    detail::RowMatrix<T> dprod(rows, co);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t p = 0; p < vol; ++p) dprod(b * vol + p, c) = self.grad[(b * co + c) * vol + p];

    if (T* gb = detail::parent_grad(self, 2)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < co; ++c) gb[c] += dprod(r, c);
    }
    if (T* gw = detail::parent_grad(self, 1)) {
      detail::MatMap<T>(gw, co, patch).noalias() +=
          dprod.transpose() * detail::ConstMatMap<T>(col.data(), rows, patch);
    }
    if (T* gx = detail::parent_grad(self, 0)) {
      detail::RowMatrix<T> dcol(rows, patch);
      dcol.noalias() = dprod * detail::ConstMatMap<T>(self.parents[1]->value.data(), co, patch);
      detail::col2im_add(g, dcol.data(), gx);
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class NormMode { train, eval };

/// Running statistics for one normalization layer.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(features, T{0}), running_var(features, T{1}) {}
};

namespace detail {

inline std::string format_count(double n) {
  std::ostringstream os;
  os << n;
  return os.str();
}

template <typename T>
Tensor<T> batch_norm_impl(const Tensor<T>& x, const Tensor<T>& scale_param, const Tensor<T>& shift_param,
                          const BatchNormState<T>& stats, BatchNormState<T>* update, bool train,
                          std::span<const T> sample_weights = {}) {
  if (x.rank() < 2) throw DimensionError("batch_norm: need rank >= 2, got " + shape_string(x.shape()));
  const auto v = split_axis(x.shape(), 1);
  const std::size_t f = v.extent;
  if (scale_param.size() != f || shift_param.size() != f || stats.running_mean.size() != f ||
      stats.running_var.size() != f) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(f) + " features");
  }
  const bool weighted = !sample_weights.empty();
  if (weighted && sample_weights.size() != v.outer) {
    throw DimensionError("batch_norm: " + std::to_string(sample_weights.size()) + " sample weights for " +
                         std::to_string(v.outer) + " samples");
  }
  // Weighted statistics treat sample o as if it were repeated w[o] times.
  double count = static_cast<double>(v.outer * v.inner);
  if (weighted) {
    count = 0.0;
    for (T w : sample_weights) count += static_cast<double>(w) * static_cast<double>(v.inner);
  }
  if (train && count < 2) {
    throw ContractError("batch_norm: batch too small for train mode (" + format_count(count) + " samples)");
  }
  // Visits every element as (channel c, flat index k, sample o), in a fixed
  // order. With inner == 1 the channel loop is innermost so it vectorizes.
  auto for_each = [v, f](auto&& fn) {
    if (v.inner == 1) {
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t c = 0; c < f; ++c) fn(c, o * f + c, o);
    } else {
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t c = 0; c < f; ++c) {
          const std::size_t base = (o * f + c) * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) fn(c, base + i, o);
        }
    }
  };
  std::vector<T> weights(sample_weights.begin(), sample_weights.end());

  const T* in = x.data().data();
  std::vector<T> inv_std(f), mean(f);
  if (train) {
    // Double accumulators in a fixed order.
    std::vector<double> s1(f, 0.0), s2(f, 0.0);
    if (weighted) {
      for_each([&](std::size_t c, std::size_t k, std::size_t o) { s1[c] += static_cast<double>(weights[o]) * in[k]; });
    } else {
      for_each([&](std::size_t c, std::size_t k, std::size_t) { s1[c] += in[k]; });
    }
    for (std::size_t c = 0; c < f; ++c) s1[c] /= count;
    for_each([&](std::size_t c, std::size_t k, std::size_t o) {
      const double d = in[k] - s1[c];
      s2[c] += (weighted ? static_cast<double>(weights[o]) : 1.0) * d * d;
    });
    for (std::size_t c = 0; c < f; ++c) {
      const double var = s2[c] / count;
      mean[c] = static_cast<T>(s1[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(stats.eps)));
      if (update) {
        const T m = update->momentum;
        const double unbiased = s2[c] / (count - 1.0);
        update->running_mean[c] = (T{1} - m) * update->running_mean[c] + m * static_cast<T>(s1[c]);
        update->running_var[c] = (T{1} - m) * update->running_var[c] + m * static_cast<T>(unbiased);
      }
    }
  } else {
    for (std::size_t c = 0; c < f; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }

  const T* gamma = scale_param.data().data();
  const T* beta = shift_param.data().data();
  std::vector<T> out(x.size());
  for_each([&](std::size_t c, std::size_t k, std::size_t) { out[k] = gamma[c] * ((in[k] - mean[c]) * inv_std[c]) + beta[c]; });

  // The normalized input is recomputed from the parent's value in backward.
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, scale_param, shift_param},
      [f, count, train, weighted, for_each, weights = std::move(weights), mean = std::move(mean),
       inv_std = std::move(inv_std)](auto& self) {
        const T* xv = self.parents[0]->value.data();
        const T* gamma = self.parents[1]->value.data();
        const T* dy = self.grad.data();
        auto xhat = [&](std::size_t c, std::size_t k) { return (xv[k] - mean[c]) * inv_std[c]; };
        std::vector<double> sum_dy(f, 0.0), sum_dy_xh(f, 0.0);
        for_each([&](std::size_t c, std::size_t k, std::size_t) {
          sum_dy[c] += dy[k];
          sum_dy_xh[c] += static_cast<double>(dy[k]) * xhat(c, k);
        });
        if (T* g = parent_grad(self, 1)) {
          for (std::size_t c = 0; c < f; ++c) g[c] += static_cast<T>(sum_dy_xh[c]);
        }
        if (T* g = parent_grad(self, 2)) {
          for (std::size_t c = 0; c < f; ++c) g[c] += static_cast<T>(sum_dy[c]);
        }
        if (T* g = parent_grad(self, 0)) {
          const double n = count;
          std::vector<T> k(f), mdy(f, T{0}), mdyx(f, T{0});
          for (std::size_t c = 0; c < f; ++c) {
            k[c] = gamma[c] * inv_std[c];
            if (train) {
              mdy[c] = static_cast<T>(sum_dy[c] / n);
              mdyx[c] = static_cast<T>(sum_dy_xh[c] / n);
            }
          }
          if (train && weighted) {
            for_each([&](std::size_t c, std::size_t i, std::size_t o) {
              g[i] += k[c] * (dy[i] - weights[o] * (mdy[c] + xhat(c, i) * mdyx[c]));
            });
          } else if (train) {
            for_each([&](std::size_t c, std::size_t i, std::size_t) {
              g[i] += k[c] * (dy[i] - mdy[c] - xhat(c, i) * mdyx[c]);
            });
          } else {
            for_each([&](std::size_t c, std::size_t i, std::size_t) { g[i] += k[c] * dy[i]; });
          }
        }
      });
}
}  // namespace detail

/// Normalizes each feature channel (axis 1) over every other axis, then
/// applies per-channel scale and shift. Train mode uses batch statistics and
/// updates `state`; eval mode uses the stored running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale_param, const Tensor<T>& shift_param,
                     BatchNormState<T>& state, NormMode mode) {
  const bool train = mode == NormMode::train;
  return detail::batch_norm_impl<T>(x, scale_param, shift_param, state, train ? &state : nullptr, train);
}

/// Train-mode normalization where sample o (an index over every axis before
/// the feature axis) counts `sample_weights[o]` times in the batch statistics,
/// exactly as if it had been repeated. Updates `state`.
template <typename T>
Tensor<T> weighted_batch_norm(const Tensor<T>& x, const Tensor<T>& scale_param, const Tensor<T>& shift_param,
                              BatchNormState<T>& state, std::span<const T> sample_weights) {
  return detail::batch_norm_impl<T>(x, scale_param, shift_param, state, &state, true, sample_weights);
}

/// Eval-mode normalization with read-only statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale_param, const Tensor<T>& shift_param,
                     const BatchNormState<T>& state) {
  return detail::batch_norm_impl<T>(x, scale_param, shift_param, state, nullptr, false);
}

// ---------------------------------------------------------------------------
// Reductions used by the alignment losses

/// Max-shifted log Σ exp along `axis`; the axis is removed from the shape
/// (a rank-1 input yields a one-element tensor).
template <typename T>
Tensor<T> log_sum_exp(const Tensor<T>& x, std::size_t axis) {
  const auto v = detail::split_axis(x.shape(), axis);
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) shape.push_back(x.dim(i));
  if (shape.empty()) shape.push_back(1);
  std::vector<T> out(v.outer * v.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) m = std::max(m, in[(o * v.extent + e) * v.inner + i]);
      T s{};
      for (std::size_t e = 0; e < v.extent; ++e) s += std::exp(in[(o * v.extent + e) * v.inner + i] - m);
      out[o * v.inner + i] = m + std::log(s);
    }
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [v](auto& self) {
    T* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& in = self.parents[0]->value;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const T lse = self.value[o * v.inner + i];
        const T dy = self.grad[o * v.inner + i];
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t idx = (o * v.extent + e) * v.inner + i;
          g[idx] += dy * std::exp(in[idx] - lse);
        }
      }
  });
}

/// Pairwise squared Euclidean distances between rows of x[N×d] and y[M×d].
template <typename T>
Tensor<T> squared_distances(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    throw DimensionError("squared_distances: incompatible shapes " + detail::shape_string(x.shape()) + " and " +
                         detail::shape_string(y.shape()));
  }
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
  std::vector<T> out(n * m);
  auto xa = x.data(), ya = y.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      T s{};
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = xa[i * d + k] - ya[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  return Tensor<T>::from_op({n, m}, std::move(out), {x, y}, [n, m, d](auto& self) {
    const auto& xa = self.parents[0]->value;
    const auto& ya = self.parents[1]->value;
    T* gx = detail::parent_grad(self, 0);
    T* gy = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const T dy = self.grad[i * m + j];
        if (dy == T{0}) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const T diff = T{2} * dy * (xa[i * d + k] - ya[j * d + k]);
          if (gx) gx[i * d + k] += diff;
          if (gy) gy[j * d + k] -= diff;
        }
      }
  });
}

}  // namespace prnet
