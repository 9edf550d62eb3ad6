// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over channels-first tensors.
//
// Layout: shape = {C, [nz,] [ny,] nx}, row-major, so x varies fastest exactly as in
// Volume3. A stack of 2D slices is a tensor {C, B, ny, nx} run through kernels and
// pooling factors with z-extent 1, which keeps the slices independent.
//
// Every op records its parents and a closure that pushes the node's gradient into
// them. Leaves (parameters, inputs) keep accumulating gradient across backward()
// calls until zero_grad(); interior gradients are rebuilt on every call.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "cspca/errors.hpp"
#include "cspca/rng.hpp"

namespace cspca::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Kernel size or pooling factor per spatial axis.
struct Triple {
  std::size_t x = 1, y = 1, z = 1;
  std::size_t volume() const noexcept { return x * y * z; }
  bool operator==(const Triple&) const = default;
};

struct Extent {
  std::size_t nx = 1, ny = 1, nz = 1;
  std::size_t size() const noexcept { return nx * ny * nz; }
  bool operator==(const Extent&) const = default;
};

inline std::size_t channels_of(const Shape& s) {
  if (s.size() < 2 || s.size() > 4) throw ShapeError("rank", "expected {C, spatial...} with 1-3 spatial axes, got " + shape_string(s));
  return s[0];
}

inline Extent extent_of(const Shape& s) {
  channels_of(s);
  Extent e;
  e.nx = s.back();
  if (s.size() >= 3) e.ny = s[s.size() - 2];
  if (s.size() == 4) e.nz = s[1];
  return e;
}

inline Shape with_extent(std::size_t channels, const Extent& e, std::size_t rank) {
  if (rank == 2) return {channels, e.nx};
  if (rank == 3) return {channels, e.ny, e.nx};
  return {channels, e.nz, e.ny, e.nx};
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording in its scope (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Fingerprint of the piecewise-linear branch taken by relu and maxpool while active.
/// grad_check uses it to tell smooth neighbourhoods from ones straddling a kink.
class BranchProbe {
 public:
  BranchProbe() : previous_(slot()) { slot() = this; }
  ~BranchProbe() { slot() = previous_; }
  BranchProbe(const BranchProbe&) = delete;
  BranchProbe& operator=(const BranchProbe&) = delete;

  std::uint64_t fingerprint() const noexcept { return hash_; }
  void mix(std::uint64_t v) noexcept { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }

  static BranchProbe* active() noexcept { return slot(); }

 private:
  static BranchProbe*& slot() {
    thread_local BranchProbe* p = nullptr;
    return p;
  }
  BranchProbe* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != values.size())
      throw ShapeError("values", "shape " + shape_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                                     " values, got " + std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t channels() const { return channels_of(shape()); }
  Extent extent() const { return extent_of(shape()); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T item() const {
    if (size() != 1) throw ShapeError("item", "tensor has " + std::to_string(size()) + " values");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  /// Accumulated gradient; empty until a backward pass reaches this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  const std::string& name() const { return node_->name; }
  Tensor& named(std::string n) {
    node_->name = std::move(n);
    return *this;
  }

  /// Same values in a fresh leaf, no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Result of an op; records `parents` when any of them needs a gradient.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                            std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(values), false);
    if (!grad_enabled()) return out;
    const bool track = std::ranges::any_of(parents, [](const Tensor& p) { return p.requires_grad(); });
    if (!track) return out;
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

/// Adds `g` into parent `i`'s gradient when that parent participates.
template <class T>
inline std::vector<T>* parent_grad(Node<T>& n, std::size_t i) {
  auto& p = *n.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

template <class T>
struct Simd;
template <>
struct Simd<float> {
  typedef float type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 16;
};
template <>
struct Simd<double> {
  typedef double type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 8;
};

/// Column-panel layout consumed by gemm_packed: block b holds, for each k row, the `block`
/// consecutive columns starting at b * block (zero beyond n).
template <class T>
struct Panel {
  using V = typename Simd<T>::type;
  static constexpr std::size_t vecs = 4;
  static constexpr std::size_t block = vecs * Simd<T>::lanes;
  static std::size_t blocks(std::size_t n) { return (n + block - 1) / block; }
};

/// out (m x n, row stride ldo) = w (m x k) * panel (k x n).
///
/// Each output element is accumulated in strictly ascending k order, starting from zero, by the
/// same code path whatever k is. Appending zero-weight rows to the panel therefore leaves every
/// output bit-identical, which the fusion graft identities rely on. (Eigen's GEMM reorders the
/// reduction depending on k.)
template <class T>
void gemm_packed(const T* w, const typename Panel<T>::V* panel, T* out, std::size_t m, std::size_t k, std::size_t n,
                 std::size_t ldo) {
  using V = typename Panel<T>::V;
  constexpr std::size_t rows = 4, vecs = Panel<T>::vecs, block = Panel<T>::block;
  alignas(64) T tail[block];
  for (std::size_t b = 0; b < Panel<T>::blocks(n); ++b) {
    const std::size_t i0 = b * block, cnt = std::min(block, n - i0);
    const V* pack = panel + b * k * vecs;
    auto store = [&](std::size_t o, const V* acc) {
      if (cnt == block) {
        std::memcpy(out + o * ldo + i0, acc, sizeof(V) * vecs);
      } else {
        std::memcpy(tail, acc, sizeof(V) * vecs);
        std::memcpy(out + o * ldo + i0, tail, sizeof(T) * cnt);
      }
    };
    std::size_t o0 = 0;
    for (; o0 + rows <= m; o0 += rows) {
      V acc[rows][vecs];
      for (auto& r : acc)
        for (auto& a : r) a = V{};
      const T* wr = w + o0 * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const V* xv = pack + kk * vecs;
        for (std::size_t r = 0; r < rows; ++r) {
          const T wv = wr[r * k + kk];
          for (std::size_t v = 0; v < vecs; ++v) acc[r][v] += wv * xv[v];
        }
      }
      for (std::size_t r = 0; r < rows; ++r) store(o0 + r, acc[r]);
    }
    for (; o0 < m; ++o0) {
      V acc[vecs];
      for (auto& a : acc) a = V{};
      const T* wr = w + o0 * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const V* xv = pack + kk * vecs;
        for (std::size_t v = 0; v < vecs; ++v) acc[v] += wr[kk] * xv[v];
      }
      store(o0, acc);
    }
  }
}

/// dw (m x k) += g (m x n, row stride ldg) * panel^T.
template <class T>
void gemm_nt_panel_acc(const T* g, std::size_t ldg, const typename Panel<T>::V* panel, std::size_t m, std::size_t k,
                       std::size_t n, T* dw) {
  using V = typename Panel<T>::V;
  constexpr std::size_t rows = 4, vecs = Panel<T>::vecs, block = Panel<T>::block, lanes = Simd<T>::lanes;
  std::vector<V> acc(m * k, V{});
  alignas(64) T gtail[rows][block];
  // Chunks of k keep their accumulators in L1.
  const std::size_t chunk = std::max<std::size_t>(1, (24 * 1024) / (m * sizeof(V)));
  for (std::size_t k0 = 0; k0 < k; k0 += chunk) {
    const std::size_t k1 = std::min(k, k0 + chunk);
    for (std::size_t b = 0; b < Panel<T>::blocks(n); ++b) {
      const std::size_t i0 = b * block, cnt = std::min(block, n - i0);
      const V* pack = panel + b * k * vecs;
      for (std::size_t o0 = 0; o0 < m; o0 += rows) {
        const std::size_t nr = std::min(rows, m - o0);
        V gv[rows][vecs];
        for (std::size_t r = 0; r < rows; ++r) {
          if (r < nr && cnt == block) {
            std::memcpy(&gv[r][0], g + (o0 + r) * ldg + i0, sizeof(V) * vecs);
          } else {
            std::fill_n(gtail[r], block, T(0));
            if (r < nr) std::memcpy(gtail[r], g + (o0 + r) * ldg + i0, sizeof(T) * cnt);
            std::memcpy(&gv[r][0], gtail[r], sizeof(V) * vecs);
          }
        }
        for (std::size_t kk = k0; kk < k1; ++kk) {
          const V* xv = pack + kk * vecs;
          for (std::size_t r = 0; r < nr; ++r) {
            V a = acc[(o0 + r) * k + kk];
            for (std::size_t v = 0; v < vecs; ++v) a += gv[r][v] * xv[v];
            acc[(o0 + r) * k + kk] = a;
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < m * k; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < lanes; ++l) s += acc[i][l];
    dw[i] += static_cast<T>(s);
  }
}

/// Row-major x (k x n, row stride ldx) into panel layout.
template <class T>
std::vector<typename Panel<T>::V> pack_panel(const T* x, std::size_t k, std::size_t n, std::size_t ldx) {
  using P = Panel<T>;
  std::vector<typename P::V> panel(P::blocks(n) * k * P::vecs);
  for (std::size_t b = 0; b < P::blocks(n); ++b) {
    const std::size_t i0 = b * P::block, cnt = std::min(P::block, n - i0);
    for (std::size_t kk = 0; kk < k; ++kk)
      std::memcpy(&panel[(b * k + kk) * P::vecs], x + kk * ldx + i0, sizeof(T) * cnt);
  }
  return panel;
}

template <class T>
void gemm_sequential_k(const T* w, const T* x, T* out, std::size_t m, std::size_t k, std::size_t n) {
  const auto panel = pack_panel(x, k, n, n);
  gemm_packed(w, panel.data(), out, m, k, n, n);
}

/// Unfolds `in` ({C, nz, ny, nx}) straight into panel layout with zero padding. Only output rows
/// (z * ny + y) in [r0, r1) are produced; panel column j maps to voxel r0 * nx + j.
template <class T>
void im2col_panel(const T* in, std::size_t channels, const Extent& e, const Triple& k,
                  std::vector<typename Panel<T>::V>& panel, std::size_t r0, std::size_t r1) {
  using P = Panel<T>;
  const std::size_t n = e.size(), width = (r1 - r0) * e.nx, kdim = channels * k.volume();
  panel.resize(P::blocks(width) * kdim * P::vecs);
  T* base = reinterpret_cast<T*>(panel.data());
  if (width % P::block) {
    const std::size_t b = width / P::block, lane = width % P::block;
    for (std::size_t row = 0; row < kdim; ++row) std::fill_n(base + (b * kdim + row) * P::block + lane, P::block - lane, T(0));
  }
  const auto px = static_cast<std::ptrdiff_t>(k.x / 2), py = static_cast<std::ptrdiff_t>(k.y / 2),
             pz = static_cast<std::ptrdiff_t>(k.z / 2);
  const auto nx = static_cast<std::ptrdiff_t>(e.nx), ny = static_cast<std::ptrdiff_t>(e.ny),
             nz = static_cast<std::ptrdiff_t>(e.nz);
  for (std::size_t r = r0; r < r1; ++r) {
    const auto z = static_cast<std::ptrdiff_t>(r) / ny, y = static_cast<std::ptrdiff_t>(r) % ny;
    const std::size_t j0 = (r - r0) * e.nx;
    const bool contiguous = j0 % P::block + e.nx <= P::block;
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* src = in + c * n;
      for (std::ptrdiff_t dz = -pz; dz <= pz; ++dz)
        for (std::ptrdiff_t dy = -py; dy <= py; ++dy)
          for (std::ptrdiff_t dx = -px; dx <= px; ++dx, ++row) {
            const std::ptrdiff_t sz = z + dz, sy = y + dy;
            const bool inside = sz >= 0 && sz < nz && sy >= 0 && sy < ny;
            const std::ptrdiff_t x0 = inside ? std::clamp<std::ptrdiff_t>(-dx, 0, nx) : nx;
            const std::ptrdiff_t x1 = inside ? std::clamp<std::ptrdiff_t>(nx - dx, x0, nx) : nx;
            const T* s = inside ? src + (sz * ny + sy) * nx + dx : nullptr;
            if (contiguous) {
              T* d = base + ((j0 / P::block) * kdim + row) * P::block + j0 % P::block;
              for (std::ptrdiff_t x = 0; x < x0; ++x) d[x] = T(0);
              for (std::ptrdiff_t x = x0; x < x1; ++x) d[x] = s[x];
              for (std::ptrdiff_t x = x1; x < nx; ++x) d[x] = T(0);
            } else {
              for (std::ptrdiff_t x = 0; x < nx; ++x) {
                const std::size_t j = j0 + static_cast<std::size_t>(x);
                base[((j / P::block) * kdim + row) * P::block + j % P::block] = x >= x0 && x < x1 ? s[x] : T(0);
              }
            }
          }
    }
  }
}

/// Unfolds `in` ({C, nz, ny, nx}) into rows (c, dz, dy, dx) x columns, zero padded. Only the
/// output rows (z * ny + y) in [r0, r1) are produced; column j maps to voxel r0 * nx + j.
template <class T>
void im2col(const T* in, std::size_t channels, const Extent& e, const Triple& k, T* cols, std::size_t r0,
            std::size_t r1) {
  const std::size_t n = e.size();
  const std::size_t width = (r1 - r0) * e.nx;
  const auto px = static_cast<std::ptrdiff_t>(k.x / 2), py = static_cast<std::ptrdiff_t>(k.y / 2),
             pz = static_cast<std::ptrdiff_t>(k.z / 2);
  const auto nx = static_cast<std::ptrdiff_t>(e.nx), ny = static_cast<std::ptrdiff_t>(e.ny),
             nz = static_cast<std::ptrdiff_t>(e.nz);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in + c * n;
    for (std::ptrdiff_t dz = -pz; dz <= pz; ++dz)
      for (std::ptrdiff_t dy = -py; dy <= py; ++dy)
        for (std::ptrdiff_t dx = -px; dx <= px; ++dx, ++row) {
          T* dst = cols + row * width;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(nx, nx - dx);
          for (std::size_t r = r0; r < r1; ++r) {
            const auto z = static_cast<std::ptrdiff_t>(r) / ny, y = static_cast<std::ptrdiff_t>(r) % ny;
            T* d = dst + (r - r0) * e.nx;
            const std::ptrdiff_t sz = z + dz, sy = y + dy;
            if (sz < 0 || sz >= nz || sy < 0 || sy >= ny || x0 >= x1) {
              std::fill(d, d + nx, T(0));
              continue;
            }
            const T* s = src + (sz * ny + sy) * nx + dx;
            std::fill(d, d + x0, T(0));
            std::copy(s + x0, s + x1, d + x0);
            std::fill(d + x1, d + nx, T(0));
          }
        }
  }
}

template <class T>
void im2col(const T* in, std::size_t channels, const Extent& e, const Triple& k, T* cols) {
  im2col(in, channels, e, k, cols, 0, e.nz * e.ny);
}

/// Output rows per tile so that an unfolded tile stays cache resident.
inline std::size_t tile_rows(std::size_t kdim, std::size_t nx, std::size_t total_rows) {
  constexpr std::size_t budget = 96 * 1024;  // values
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(1, kdim * nx), 1, total_rows);
}

/// Weights {Cout, Cin, K} -> {Cin, Cout, K} with the kernel reversed: the adjoint of a
/// same-padded correlation is the correlation with these weights.
template <class T>
std::vector<T> adjoint_weights(std::span<const T> w, std::size_t cout, std::size_t cin, std::size_t kvol) {
  std::vector<T> out(w.size());
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t d = 0; d < kvol; ++d) out[(c * cout + o) * kvol + (kvol - 1 - d)] = w[(o * cin + c) * kvol + d];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers

/// "Same"-padded cross-correlation. weights: {Cout, Cin, kz, ky, kx}; bias: {Cout}.
template <class T>
Tensor<T> conv(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, const Triple& kernel) {
  const std::size_t cin = input.channels();
  const Extent e = input.extent();
  const std::size_t rank = input.shape().size();
  if (kernel.x % 2 == 0 || kernel.y % 2 == 0 || kernel.z % 2 == 0)
    throw ShapeError("kernel", "kernel extents must be odd for symmetric same padding");
  if ((rank < 4 && kernel.z != 1) || (rank < 3 && kernel.y != 1))
    throw ShapeError("kernel", "kernel spans an axis the input does not have");
  const auto& ws = weights.shape();
  if (ws.size() != 5 || ws[2] != kernel.z || ws[3] != kernel.y || ws[4] != kernel.x)
    throw ShapeError("weights", "expected {Cout, Cin, kz, ky, kx} matching the kernel, got " + shape_string(ws));
  if (ws[1] != cin)
    throw ShapeError("channels", "input has " + std::to_string(cin) + " channels, weights expect " +
                                     std::to_string(ws[1]));
  const std::size_t cout = ws[0];
  if (bias.shape() != Shape{cout}) throw ShapeError("bias", "expected {" + std::to_string(cout) + "}");

  const std::size_t n = e.size();
  const std::size_t kvol = kernel.volume();
  const std::size_t kdim = cin * kvol;
  const bool pointwise = kvol == 1;
  const std::size_t nrows = e.nz * e.ny;

  std::vector<T> out(cout * n);
  if (pointwise) {
    detail::gemm_sequential_k(weights.values().data(), input.values().data(), out.data(), cout, kdim, n);
  } else {
    const std::size_t tr = detail::tile_rows(kdim, e.nx, nrows);
    std::vector<typename detail::Panel<T>::V> panel;
    for (std::size_t r0 = 0; r0 < nrows; r0 += tr) {
      const std::size_t r1 = std::min(nrows, r0 + tr), width = (r1 - r0) * e.nx;
      detail::im2col_panel(input.values().data(), cin, e, kernel, panel, r0, r1);
      detail::gemm_packed(weights.values().data(), panel.data(), out.data() + r0 * e.nx, cout, kdim, width, n);
    }
  }
  {
    const auto b = bias.values();
    for (std::size_t o = 0; o < cout; ++o) {
      T* row = out.data() + o * n;
      for (std::size_t i = 0; i < n; ++i) row[i] += b[o];
    }
  }

  return Tensor<T>::make_result(
      with_extent(cout, e, rank), std::move(out), {input, weights, bias},
      [cin, cout, e, kernel, n, kvol, kdim, pointwise, nrows](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& w = *self.parents[1];
        auto* gw = detail::parent_grad(self, 1);
        auto* gi = detail::parent_grad(self, 0);
        if (auto* gb = detail::parent_grad(self, 2)) {
          for (std::size_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            const T* row = self.grad.data() + o * n;
            for (std::size_t i = 0; i < n; ++i) acc += row[i];
            (*gb)[o] += static_cast<T>(acc);
          }
        }
        if (pointwise) {
          detail::CMapRM<T> g(self.grad.data(), cout, n);
          if (gw) {
            detail::MapRM<T> dw(gw->data(), cout, kdim);
            dw.noalias() += g * detail::CMapRM<T>(in.value.data(), kdim, n).transpose();
          }
          if (gi) {
            detail::MapRM<T> dx(gi->data(), kdim, n);
            dx.noalias() += detail::CMapRM<T>(w.value.data(), cout, kdim).transpose() * g;
          }
          return;
        }
        using Strided = Eigen::Map<const detail::MatRM<T>, 0, Eigen::OuterStride<>>;
        if (gw) {
          const std::size_t tr = detail::tile_rows(kdim, e.nx, nrows);
          // Small weight matrices: panel kernel; large ones: Eigen.
          const bool small = cout * kdim <= 4096;
          std::vector<typename detail::Panel<T>::V> panel;
          std::vector<T> cols(small ? 0 : kdim * tr * e.nx);
          detail::MapRM<T> dw(gw->data(), cout, kdim);
          for (std::size_t r0 = 0; r0 < nrows; r0 += tr) {
            const std::size_t r1 = std::min(nrows, r0 + tr), width = (r1 - r0) * e.nx;
            if (small) {
              detail::im2col_panel(in.value.data(), cin, e, kernel, panel, r0, r1);
              detail::gemm_nt_panel_acc(self.grad.data() + r0 * e.nx, n, panel.data(), cout, kdim, width, gw->data());
            } else {
              detail::im2col(in.value.data(), cin, e, kernel, cols.data(), r0, r1);
              Strided g(self.grad.data() + r0 * e.nx, cout, width, Eigen::OuterStride<>(n));
              dw.noalias() += g * detail::CMapRM<T>(cols.data(), kdim, width).transpose();
            }
          }
        }
        if (gi) {
          const auto wa = detail::adjoint_weights<T>(w.value, cout, cin, kvol);
          const std::size_t kd = cout * kvol;
          const std::size_t tr = detail::tile_rows(kd, e.nx, nrows);
          std::vector<typename detail::Panel<T>::V> panel;
          std::vector<T> tile(cin * tr * e.nx);
          for (std::size_t r0 = 0; r0 < nrows; r0 += tr) {
            const std::size_t r1 = std::min(nrows, r0 + tr), width = (r1 - r0) * e.nx;
            detail::im2col_panel(self.grad.data(), cout, e, kernel, panel, r0, r1);
            detail::gemm_packed(wa.data(), panel.data(), tile.data(), cin, kd, width, width);
            for (std::size_t c = 0; c < cin; ++c) {
              T* d = gi->data() + c * n + r0 * e.nx;
              const T* s = tile.data() + c * width;
              for (std::size_t i = 0; i < width; ++i) d[i] += s[i];
            }
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  const auto v = input.values();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  if (auto* probe = BranchProbe::active())
    for (std::size_t i = 0; i < v.size(); ++i) probe->mix(v[i] > T(0));
  return Tensor<T>::make_result(input.shape(), std::move(out), {input}, [](detail::Node<T>& self) {
    auto* gi = detail::parent_grad(self, 0);
    if (!gi) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > T(0)) (*gi)[i] += self.grad[i];
  });
}

/// Per-window maximum; the first maximum in scan order receives the gradient.
template <class T>
Tensor<T> maxpool(const Tensor<T>& input, const Triple& factor) {
  const std::size_t c = input.channels();
  const Extent e = input.extent();
  const std::size_t rank = input.shape().size();
  if (factor.x == 0 || factor.y == 0 || factor.z == 0 || e.nx % factor.x || e.ny % factor.y || e.nz % factor.z)
    throw ShapeError("pooling", "extent {" + std::to_string(e.nx) + "," + std::to_string(e.ny) + "," +
                                    std::to_string(e.nz) + "} is not divisible by the pooling factor");
  const Extent o{e.nx / factor.x, e.ny / factor.y, e.nz / factor.z};
  const auto v = input.values();
  std::vector<T> out(c * o.size());
  std::vector<std::uint32_t> arg(out.size());
  // Window offsets in scan order; the first maximum wins.
  std::vector<std::size_t> window;
  for (std::size_t dz = 0; dz < factor.z; ++dz)
    for (std::size_t dy = 0; dy < factor.y; ++dy)
      for (std::size_t dx = 0; dx < factor.x; ++dx) window.push_back((dz * e.ny + dy) * e.nx + dx);
  std::size_t k = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < o.nz; ++z)
      for (std::size_t y = 0; y < o.ny; ++y) {
        const std::size_t row = ch * e.size() + (z * factor.z * e.ny + y * factor.y) * e.nx;
        for (std::size_t x = 0; x < o.nx; ++x, ++k) {
          const std::size_t base = row + x * factor.x;
          std::size_t best = base + window[0];
          T best_v = v[best];
          for (std::size_t w = 1; w < window.size(); ++w)
            if (v[base + window[w]] > best_v) {
              best = base + window[w];
              best_v = v[best];
            }
          out[k] = best_v;
          arg[k] = static_cast<std::uint32_t>(best);
        }
      }
  if (auto* probe = BranchProbe::active())
    for (auto a : arg) probe->mix(a);
  return Tensor<T>::make_result(with_extent(c, o, rank), std::move(out), {input},
                                [arg = std::move(arg)](detail::Node<T>& self) {
                                  auto* gi = detail::parent_grad(self, 0);
                                  if (!gi) return;
                                  for (std::size_t i = 0; i < arg.size(); ++i) (*gi)[arg[i]] += self.grad[i];
                                });
}

/// Nearest-neighbour repetition by `factor` along each axis.
template <class T>
Tensor<T> upsample(const Tensor<T>& input, const Triple& factor) {
  const std::size_t c = input.channels();
  const Extent e = input.extent();
  const std::size_t rank = input.shape().size();
  if (factor.x == 0 || factor.y == 0 || factor.z == 0) throw ShapeError("upsample", "factor must be positive");
  if ((rank < 4 && factor.z != 1) || (rank < 3 && factor.y != 1))
    throw ShapeError("upsample", "factor spans an axis the input does not have");
  const Extent o{e.nx * factor.x, e.ny * factor.y, e.nz * factor.z};
  const auto v = input.values();
  std::vector<T> out(c * o.size());
  std::vector<std::size_t> xs(o.nx);
  for (std::size_t x = 0; x < o.nx; ++x) xs[x] = x / factor.x;
  std::size_t k = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < o.nz; ++z)
      for (std::size_t y = 0; y < o.ny; ++y) {
        const T* src = v.data() + ch * e.size() + ((z / factor.z) * e.ny + y / factor.y) * e.nx;
        for (std::size_t x = 0; x < o.nx; ++x, ++k) out[k] = src[xs[x]];
      }
  return Tensor<T>::make_result(
      with_extent(c, o, rank), std::move(out), {input}, [c, e, o, factor](detail::Node<T>& self) {
        auto* gi = detail::parent_grad(self, 0);
        if (!gi) return;
        std::vector<double> acc(c * e.size(), 0.0);
        std::vector<std::size_t> xs(o.nx);
        for (std::size_t x = 0; x < o.nx; ++x) xs[x] = x / factor.x;
        std::size_t k = 0;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t z = 0; z < o.nz; ++z)
            for (std::size_t y = 0; y < o.ny; ++y) {
              double* dst = acc.data() + ch * e.size() + ((z / factor.z) * e.ny + y / factor.y) * e.nx;
              for (std::size_t x = 0; x < o.nx; ++x, ++k) dst[xs[x]] += self.grad[k];
            }
        for (std::size_t i = 0; i < acc.size(); ++i) (*gi)[i] += static_cast<T>(acc[i]);
      });
}

/// Channel concatenation; `a`'s channels come first.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw ShapeError("spatial", "cannot concatenate " + shape_string(sa) + " with " + shape_string(sb));
  Shape s = sa;
  s[0] = sa[0] + sb[0];
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.size();
  return Tensor<T>::make_result(std::move(s), std::move(out), {a, b}, [na](detail::Node<T>& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += self.grad[i];
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += self.grad[na + i];
  });
}

/// Per-voxel softmax across channels (max-subtracted, double accumulation).
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const std::size_t c = logits.channels();
  if (c == 0) throw ShapeError("channels", "softmax needs at least one channel");
  const std::size_t n = logits.extent().size();
  const auto v = logits.values();
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) throw NumericError("softmax_channels: non-finite logit");
  std::vector<T> out(v.size());
  std::vector<double> ex(c);
  for (std::size_t i = 0; i < n; ++i) {
    double m = v[i];
    for (std::size_t k = 1; k < c; ++k) m = std::max(m, static_cast<double>(v[k * n + i]));
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (ex[k] = std::exp(static_cast<double>(v[k * n + i]) - m));
    for (std::size_t k = 0; k < c; ++k) out[k * n + i] = static_cast<T>(ex[k] / s);
  }
  return Tensor<T>::make_result(logits.shape(), std::move(out), {logits}, [c, n](detail::Node<T>& self) {
    auto* gi = detail::parent_grad(self, 0);
    if (!gi) return;
    const auto& p = self.value;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += static_cast<double>(g[k * n + i]) * p[k * n + i];
      for (std::size_t k = 0; k < c; ++k)
        (*gi)[k * n + i] += static_cast<T>(p[k * n + i] * (static_cast<double>(g[k * n + i]) - dot));
    }
  });
}

/// Weight-normalised cross entropy: sum_v w[y_v] * -log p_{y_v}(v) / sum_v w[y_v].
template <class T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& probabilities, std::span<const std::uint8_t> labels,
                                 std::span<const double> class_weights) {
  const std::size_t c = probabilities.channels();
  const std::size_t n = probabilities.extent().size();
  if (labels.size() != n)
    throw ShapeError("labels", "expected " + std::to_string(n) + " labels, got " + std::to_string(labels.size()));
  if (class_weights.size() != c) throw ShapeError("class_weights", "one weight per channel required");
  const auto p = probabilities.values();
  constexpr double tiny = 1e-30;
  double total_w = 0.0, loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("labels", "label " + std::to_string(labels[i]) + " out of range");
    const double w = class_weights[labels[i]];
    total_w += w;
    loss += w * -std::log(std::max(static_cast<double>(p[labels[i] * n + i]), tiny));
  }
  if (!(total_w > 0.0)) throw NumericError("weighted_cross_entropy: total weight is zero");
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  std::vector<double> w(class_weights.begin(), class_weights.end());
  return Tensor<T>::make_result(
      {1}, {static_cast<T>(loss / total_w)}, {probabilities},
      [n, total_w, lab = std::move(lab), w = std::move(w)](detail::Node<T>& self) {
        auto* gi = detail::parent_grad(self, 0);
        if (!gi) return;
        const auto& p = self.parents[0]->value;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
          const double pv = p[lab[i] * n + i];
          if (pv <= tiny) continue;
          (*gi)[lab[i] * n + i] += static_cast<T>(-g * w[lab[i]] / (total_w * pv));
        }
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& input) {
  double s = 0.0;
  for (T v : input.values()) s += v;
  return Tensor<T>::make_result({1}, {static_cast<T>(s)}, {input}, [](detail::Node<T>& self) {
    if (auto* gi = detail::parent_grad(self, 0))
      for (auto& g : *gi) g += self.grad[0];
  });
}

/// Sum of `input` weighted elementwise by a constant tensor of coefficients.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& input, std::span<const T> coeffs) {
  if (coeffs.size() != input.size()) throw ShapeError("coeffs", "one coefficient per element required");
  double s = 0.0;
  const auto v = input.values();
  for (std::size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * coeffs[i];
  std::vector<T> c(coeffs.begin(), coeffs.end());
  return Tensor<T>::make_result({1}, {static_cast<T>(s)}, {input}, [c = std::move(c)](detail::Node<T>& self) {
    if (auto* gi = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < c.size(); ++i) (*gi)[i] += self.grad[0] * c[i];
  });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Reverse-mode accumulation from a scalar. Leaf gradients accumulate across calls.
template <class T>
void backward(const Tensor<T>& loss) {
  using Node = detail::Node<T>;
  if (loss.size() != 1) throw ShapeError("loss", "backward() needs a scalar, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->is_leaf())
      n->ensure_grad();
    else
      n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf() && (*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;  ///< coordinates compared
  std::size_t straddling = 0;   ///< coordinates skipped because [x-h, x+h] crosses a relu/maxpool kink
  bool passed = false;
};

/// Compares backward() against central differences on a random subset (at least
/// `min_coordinates`, or all) of `input`'s coordinates. A coordinate whose interval [x-h, x+h]
/// changes the relu/maxpool branch pattern is not a smooth point for the difference quotient; it
/// is skipped, counted in `straddling`, and replaced by the next coordinate in the shuffled order.
/// `graph` must map `input` to a scalar; it may also read other tensors.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& graph, Tensor<T> input, double step,
                           double tolerance, std::uint64_t seed = 7, std::size_t min_coordinates = 64) {
  input.set_requires_grad(true);
  input.zero_grad();
  std::uint64_t base_branch = 0;
  {
    BranchProbe probe;
    backward(graph(input));
    base_branch = probe.fingerprint();
  }
  const std::vector<T> analytic(input.grad().begin(), input.grad().end());

  std::vector<std::size_t> coords(input.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(coords);

  NoGradGuard no_grad;
  auto values = input.mutable_values();
  GradCheckResult r;
  auto evaluate = [&](std::size_t i, T v, std::uint64_t& branch) {
    values[i] = v;
    BranchProbe probe;
    const double f = graph(input).item();
    branch = probe.fingerprint();
    return f;
  };
  for (auto i : coords) {
    if (r.coordinates >= min_coordinates) break;
    const T saved = values[i];
    std::uint64_t bp = 0, bm = 0;
    const double fp = evaluate(i, static_cast<T>(saved + step), bp);
    const double fm = evaluate(i, static_cast<T>(saved - step), bm);
    values[i] = saved;
    if (bp != base_branch || bm != base_branch) {
      ++r.straddling;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
    ++r.coordinates;
  }
  r.passed = r.coordinates > 0 && r.max_rel_error < tolerance;
  return r;
}

}  // namespace cspca::ad
