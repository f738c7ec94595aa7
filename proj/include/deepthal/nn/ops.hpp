#pragma once

#include "deepthal/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepthal::nn {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

// Rows of the im2col buffer are (ci, dx, dy, dz) with dz fastest; columns are
// the voxels of the x-slab [x0, x1).
template <typename Scalar>
void im2col(const Tensor<Scalar>& in, int k, int x0, int x1, RowMatrix<Scalar>& col) {
  const int Y = in.shape.y, Z = in.shape.z, X = in.shape.x;
  const int r = k / 2;
  const std::int64_t plane = std::int64_t(Y) * Z;
  const std::int64_t ncols = (x1 - x0) * plane;
  col.resize(std::int64_t(in.shape.c) * k * k * k, ncols);
  int row = 0;
  for (int ci = 0; ci < in.shape.c; ++ci) {
    const Scalar* src = in.data.row(ci).data();
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz, ++row) {
          Scalar* dst = col.row(row).data();
          const int zlo = std::max(0, -dz), zhi = std::min(Z, Z - dz);
          for (int x = x0; x < x1; ++x) {
            const int sx = x + dx;
            Scalar* dplane = dst + (x - x0) * plane;
            if (sx < 0 || sx >= X) {
              std::fill(dplane, dplane + plane, Scalar(0));
              continue;
            }
            for (int y = 0; y < Y; ++y) {
              const int sy = y + dy;
              Scalar* drow = dplane + std::int64_t(y) * Z;
              if (sy < 0 || sy >= Y) {
                std::fill(drow, drow + Z, Scalar(0));
                continue;
              }
              const Scalar* srow = src + (std::int64_t(sx) * Y + sy) * Z;
              std::fill(drow, drow + zlo, Scalar(0));
              if (zhi > zlo) std::memcpy(drow + zlo, srow + zlo + dz, sizeof(Scalar) * (zhi - zlo));
              std::fill(drow + std::max(zhi, zlo), drow + Z, Scalar(0));
            }
          }
        }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, int k, int x0, int x1, Tensor<Scalar>& out) {
  const int Y = out.shape.y, Z = out.shape.z, X = out.shape.x;
  const int r = k / 2;
  const std::int64_t plane = std::int64_t(Y) * Z;
  int row = 0;
  for (int ci = 0; ci < out.shape.c; ++ci) {
    Scalar* dst = out.data.row(ci).data();
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz, ++row) {
          const Scalar* src = col.row(row).data();
          const int zlo = std::max(0, -dz), zhi = std::min(Z, Z - dz);
          for (int x = x0; x < x1; ++x) {
            const int sx = x + dx;
            if (sx < 0 || sx >= X) continue;
            const Scalar* splane = src + (x - x0) * plane;
            for (int y = 0; y < Y; ++y) {
              const int sy = y + dy;
              if (sy < 0 || sy >= Y) continue;
              const Scalar* srow = splane + std::int64_t(y) * Z;
              Scalar* drow = dst + (std::int64_t(sx) * Y + sy) * Z;
              for (int z = zlo; z < zhi; ++z) drow[z + dz] += srow[z];
            }
          }
        }
  }
}

inline int slab_planes(const Shape& s, int k) {
  // Keep the im2col buffer around 4M scalars.
  const std::int64_t per_plane = std::int64_t(s.y) * s.z * s.c * k * k * k;
  return int(std::clamp<std::int64_t>(4'000'000 / std::max<std::int64_t>(per_plane, 1), 1, s.x));
}

// Linear interpolation table for resampling an axis of length n_in to n_out
// with half-voxel-centred coordinates and edge clamping.
struct LerpTable {
  std::vector<int> i0, i1;
  std::vector<double> t;
};

inline LerpTable lerp_table(int n_in, int n_out) {
  LerpTable tab;
  tab.i0.resize(n_out);
  tab.i1.resize(n_out);
  tab.t.resize(n_out);
  const double scale = double(n_in) / n_out;
  for (int o = 0; o < n_out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(n_in - 1));
    int a = std::min(int(std::floor(src)), n_in - 1);
    int b = std::min(a + 1, n_in - 1);
    tab.i0[o] = a;
    tab.i1[o] = b;
    tab.t[o] = src - a;
  }
  return tab;
}

// Generic strided view for resampling along one axis: `outer` blocks, each with
// `len` entries spaced by `inner` contiguous scalars.
struct AxisLayout {
  std::int64_t outer, len, inner;
};

inline AxisLayout axis_layout(const Shape& s, int axis, int len) {
  switch (axis) {
    case 0: return {1, len, std::int64_t(s.y) * s.z};
    case 1: return {s.x, len, s.z};
    default: return {std::int64_t(s.x) * s.y, len, 1};
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, int k) {
  const Shape& s = x->value.shape;
  const int cout = int(w->value.data.rows());
  detail::require(k == 1 || k == 3, "conv3d: kernel must be 1 or 3");
  detail::require(w->value.data.cols() == std::int64_t(s.c) * k * k * k,
                  "conv3d: weight columns do not match input channels " + s.str());
  Shape os{cout, s.x, s.y, s.z};
  Tensor<Scalar> out(os);
  const auto& W = w->value.data;
  if (k == 1) {
    out.data.noalias() = W * x->value.data;
  } else {
    RowMatrix<Scalar> col;
    const int step = detail::slab_planes(s, k);
    const std::int64_t plane = std::int64_t(s.y) * s.z;
    for (int x0 = 0; x0 < s.x; x0 += step) {
      const int x1 = std::min(s.x, x0 + step);
      detail::im2col(x->value, k, x0, x1, col);
      out.data.middleCols(x0 * plane, col.cols()).noalias() = W * col;
    }
  }
  if (b) out.data.colwise() += b->value.data.col(0);

  std::vector<Var<Scalar>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<Scalar>(std::move(out), std::move(parents), [k](Node<Scalar>& n) {
    auto& xin = n.parents[0];
    auto& win = n.parents[1];
    const auto& G = n.grad.data;
    const auto& Wv = win->value.data;
    const Shape& s = xin->value.shape;
    if (n.parents.size() > 2 && n.parents[2]->requires_grad)
      n.parents[2]->ensure_grad().data.col(0) += G.rowwise().sum();
    if (k == 1) {
      if (win->requires_grad) win->ensure_grad().data.noalias() += G * xin->value.data.transpose();
      if (xin->requires_grad) xin->ensure_grad().data.noalias() += Wv.transpose() * G;
      return;
    }
    RowMatrix<Scalar> col, dcol;
    const int step = detail::slab_planes(s, k);
    const std::int64_t plane = std::int64_t(s.y) * s.z;
    for (int x0 = 0; x0 < s.x; x0 += step) {
      const int x1 = std::min(s.x, x0 + step);
      const std::int64_t ncols = (x1 - x0) * plane;
      auto Gs = G.middleCols(x0 * plane, ncols);
      if (win->requires_grad) {
        detail::im2col(xin->value, k, x0, x1, col);
        win->ensure_grad().data.noalias() += Gs * col.transpose();
      }
      if (xin->requires_grad) {
        dcol.noalias() = Wv.transpose() * Gs;
        detail::col2im(dcol, k, x0, x1, xin->ensure_grad());
      }
    }
  });
}

/// Running statistics of a batch-normalization layer (not trainable).
template <typename Scalar>
struct NormState {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var;
};

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       NormState<Scalar>& state, bool training, double momentum = 0.1,
                       double eps = 1e-5) {
  const Shape& s = x->value.shape;
  const auto& X = x->value.data;
  const double n = double(s.voxels());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean(s.c), inv_std(s.c);
  if (training) {
    for (int c = 0; c < s.c; ++c) {
      const double m = X.row(c).template cast<double>().sum() / n;
      const double v = (X.row(c).template cast<double>().array() - m).square().sum() / n;
      mean(c) = Scalar(m);
      inv_std(c) = Scalar(1.0 / std::sqrt(v + eps));
      state.mean(c) = Scalar((1 - momentum) * state.mean(c) + momentum * m);
      state.var(c) = Scalar((1 - momentum) * state.var(c) + momentum * v);
    }
  } else {
    mean = state.mean;
    inv_std = (state.var.array() + Scalar(eps)).rsqrt().matrix();
  }
  Tensor<Scalar> xhat(s);
  xhat.data = ((X.colwise() - mean).array().colwise() * inv_std.array()).matrix();
  Tensor<Scalar> out(s);
  out.data = (xhat.data.array().colwise() * gamma->value.data.col(0).array()).matrix();
  out.data.colwise() += beta->value.data.col(0);

  return make_node<Scalar>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, training](Node<Scalar>& n) {
        const auto& G = n.grad.data;
        auto& xin = n.parents[0];
        auto& g = n.parents[1];
        auto& bt = n.parents[2];
        if (g->requires_grad)
          g->ensure_grad().data.col(0) += (G.array() * xhat.data.array()).rowwise().sum().matrix();
        if (bt->requires_grad) bt->ensure_grad().data.col(0) += G.rowwise().sum();
        if (!xin->requires_grad) return;
        const auto gam = g->value.data.col(0).array();
        auto& dx = xin->ensure_grad().data;
        if (!training) {
          dx.array() += G.array().colwise() * (gam * inv_std.array());
          return;
        }
        const Scalar n_vox = Scalar(G.cols());
        const auto mean_g = (G.rowwise().sum().array() / n_vox).eval();
        const auto mean_gx = ((G.array() * xhat.data.array()).rowwise().sum() / n_vox).eval();
        dx.array() += ((G.array().colwise() - mean_g) - xhat.data.array().colwise() * mean_gx)
                          .colwise() *
                      (gam * inv_std.array());
      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x->value.shape, x->value.data.cwiseMax(Scalar(0)));
  return make_node<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) {
    auto& xin = n.parents[0];
    xin->ensure_grad().data.array() +=
        (xin->value.data.array() > Scalar(0)).select(n.grad.data.array(), Scalar(0));
  });
}

/// Inverted dropout; identity when not training or rate == 0.
template <typename Scalar, typename Rng>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!training || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar scale = Scalar(1.0 / (1.0 - rate));
  RowMatrix<Scalar> mask(x->value.data.rows(), x->value.data.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : Scalar(0);
  Tensor<Scalar> out(x->value.shape, x->value.data.cwiseProduct(mask));
  return make_node<Scalar>(std::move(out), {x}, [mask = std::move(mask)](Node<Scalar>& n) {
    n.parents[0]->ensure_grad().data += n.grad.data.cwiseProduct(mask);
  });
}

template <typename Scalar>
Var<Scalar> avg_pool(const Var<Scalar>& x, int f) {
  const Shape& s = x->value.shape;
  detail::require(s.x % f == 0 && s.y % f == 0 && s.z % f == 0,
                  "avg_pool: grid " + s.str() + " not divisible by " + std::to_string(f) +
                      "; pad_to_multiple first");
  Shape os{s.c, s.x / f, s.y / f, s.z / f};
  Tensor<Scalar> out(os);
  const Scalar inv = Scalar(1.0 / (f * f * f));
  for (int c = 0; c < s.c; ++c)
    for (int i = 0; i < s.x; ++i)
      for (int j = 0; j < s.y; ++j)
        for (int k = 0; k < s.z; ++k) out.at(c, i / f, j / f, k / f) += x->value.at(c, i, j, k);
  out.data *= inv;
  return make_node<Scalar>(std::move(out), {x}, [f, inv](Node<Scalar>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const Shape& s = g.shape;
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.x; ++i)
        for (int j = 0; j < s.y; ++j)
          for (int k = 0; k < s.z; ++k) g.at(c, i, j, k) += inv * n.grad.at(c, i / f, j / f, k / f);
  });
}

template <typename Scalar>
Var<Scalar> max_pool(const Var<Scalar>& x, int f) {
  const Shape& s = x->value.shape;
  detail::require(s.x % f == 0 && s.y % f == 0 && s.z % f == 0,
                  "max_pool: grid " + s.str() + " not divisible by " + std::to_string(f));
  Shape os{s.c, s.x / f, s.y / f, s.z / f};
  Tensor<Scalar> out = Tensor<Scalar>::constant(os, -std::numeric_limits<Scalar>::infinity());
  std::vector<std::int64_t> arg(std::size_t(os.size()), 0);
  for (int c = 0; c < s.c; ++c)
    for (int i = 0; i < s.x; ++i)
      for (int j = 0; j < s.y; ++j)
        for (int k = 0; k < s.z; ++k) {
          const std::int64_t o = out.index(i / f, j / f, k / f);
          const Scalar v = x->value.at(c, i, j, k);
          if (v > out.data(c, o)) {
            out.data(c, o) = v;
            arg[std::size_t(c * os.voxels() + o)] = x->value.index(i, j, k);
          }
        }
  return make_node<Scalar>(std::move(out), {x}, [arg = std::move(arg)](Node<Scalar>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const std::int64_t nv = n.grad.shape.voxels();
    for (int c = 0; c < n.grad.shape.c; ++c)
      for (std::int64_t o = 0; o < nv; ++o) g.data(c, arg[std::size_t(c * nv + o)]) += n.grad.data(c, o);
  });
}

/// Linear resampling of one axis to a new length.
template <typename Scalar>
Var<Scalar> resize_axis(const Var<Scalar>& x, int axis, int new_len) {
  const Shape& s = x->value.shape;
  const int old_len = axis == 0 ? s.x : axis == 1 ? s.y : s.z;
  if (old_len == new_len) return x;
  Shape os = s;
  (axis == 0 ? os.x : axis == 1 ? os.y : os.z) = new_len;
  const auto tab = detail::lerp_table(old_len, new_len);
  const auto li = detail::axis_layout(s, axis, old_len);
  const auto lo = detail::axis_layout(os, axis, new_len);
  Tensor<Scalar> out(os);
  for (int c = 0; c < s.c; ++c) {
    const Scalar* src = x->value.data.row(c).data();
    Scalar* dst = out.data.row(c).data();
    for (std::int64_t b = 0; b < li.outer; ++b)
      for (int o = 0; o < new_len; ++o) {
        const Scalar t = Scalar(tab.t[o]);
        const Scalar* a0 = src + (b * li.len + tab.i0[o]) * li.inner;
        const Scalar* a1 = src + (b * li.len + tab.i1[o]) * li.inner;
        Scalar* d = dst + (b * lo.len + o) * lo.inner;
        for (std::int64_t q = 0; q < li.inner; ++q) d[q] = (Scalar(1) - t) * a0[q] + t * a1[q];
      }
  }
  return make_node<Scalar>(std::move(out), {x}, [tab, li, lo, new_len](Node<Scalar>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (int c = 0; c < g.shape.c; ++c) {
      Scalar* dst = g.data.row(c).data();
      const Scalar* src = n.grad.data.row(c).data();
      for (std::int64_t b = 0; b < li.outer; ++b)
        for (int o = 0; o < new_len; ++o) {
          const Scalar t = Scalar(tab.t[o]);
          Scalar* a0 = dst + (b * li.len + tab.i0[o]) * li.inner;
          Scalar* a1 = dst + (b * li.len + tab.i1[o]) * li.inner;
          const Scalar* d = src + (b * lo.len + o) * lo.inner;
          for (std::int64_t q = 0; q < li.inner; ++q) {
            a0[q] += (Scalar(1) - t) * d[q];
            a1[q] += t * d[q];
          }
        }
    }
  });
}

/// Separable trilinear resize to an explicit grid.
template <typename Scalar>
Var<Scalar> resize_trilinear(const Var<Scalar>& x, std::array<int, 3> grid) {
  auto y = resize_axis(x, 0, grid[0]);
  y = resize_axis(y, 1, grid[1]);
  return resize_axis(y, 2, grid[2]);
}

template <typename Scalar>
Var<Scalar> upsample(const Var<Scalar>& x, int f) {
  const Shape& s = x->value.shape;
  return resize_trilinear(x, {s.x * f, s.y * f, s.z * f});
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& xs) {
  detail::require(!xs.empty(), "concat: no inputs");
  Shape os = xs.front()->value.shape;
  os.c = 0;
  for (const auto& v : xs) {
    const Shape& s = v->value.shape;
    detail::require(s.grid() == xs.front()->value.shape.grid(), "concat: grid mismatch " + s.str());
    os.c += s.c;
  }
  Tensor<Scalar> out(os);
  int row = 0;
  std::vector<int> offsets;
  for (const auto& v : xs) {
    offsets.push_back(row);
    out.data.middleRows(row, v->value.shape.c) = v->value.data;
    row += v->value.shape.c;
  }
  return make_node<Scalar>(std::move(out), xs, [offsets](Node<Scalar>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      auto& p = n.parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad().data += n.grad.data.middleRows(offsets[i], p->value.shape.c);
    }
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  const auto& X = x->value.data;
  RowMatrix<Scalar> P = (X.rowwise() - X.colwise().maxCoeff()).array().exp().matrix();
  P.array().rowwise() /= P.colwise().sum().array();
  Tensor<Scalar> out(x->value.shape, std::move(P));
  return make_node<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) {
    const auto& P = n.value.data;
    const auto& G = n.grad.data;
    const auto dot = (P.array() * G.array()).colwise().sum().eval();
    n.parents[0]->ensure_grad().data.array() += P.array() * (G.array().rowwise() - dot);
  });
}

/// (C, 2X, 2Y, 2Z) -> (8C, X, Y, Z); sub-voxel (dx, dy, dz) goes to channel c*8 + dx*4 + dy*2 + dz.
template <typename Scalar>
Var<Scalar> space_to_depth(const Var<Scalar>& x) {
  const Shape& s = x->value.shape;
  detail::require(s.x % 2 == 0 && s.y % 2 == 0 && s.z % 2 == 0,
                  "space_to_depth: odd grid " + s.str());
  Shape os{s.c * 8, s.x / 2, s.y / 2, s.z / 2};
  Tensor<Scalar> out(os);
  for (int c = 0; c < s.c; ++c)
    for (int i = 0; i < s.x; ++i)
      for (int j = 0; j < s.y; ++j)
        for (int k = 0; k < s.z; ++k)
          out.at(c * 8 + (i % 2) * 4 + (j % 2) * 2 + (k % 2), i / 2, j / 2, k / 2) =
              x->value.at(c, i, j, k);
  return make_node<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const Shape& s = g.shape;
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.x; ++i)
        for (int j = 0; j < s.y; ++j)
          for (int k = 0; k < s.z; ++k)
            g.at(c, i, j, k) += n.grad.at(c * 8 + (i % 2) * 4 + (j % 2) * 2 + (k % 2), i / 2, j / 2, k / 2);
  });
}

template <typename Scalar>
Var<Scalar> depth_to_space(const Var<Scalar>& x) {
  const Shape& s = x->value.shape;
  detail::require(s.c % 8 == 0, "depth_to_space: channels not a multiple of 8 " + s.str());
  Shape os{s.c / 8, s.x * 2, s.y * 2, s.z * 2};
  Tensor<Scalar> out(os);
  for (int c = 0; c < os.c; ++c)
    for (int i = 0; i < os.x; ++i)
      for (int j = 0; j < os.y; ++j)
        for (int k = 0; k < os.z; ++k)
          out.at(c, i, j, k) = x->value.at(c * 8 + (i % 2) * 4 + (j % 2) * 2 + (k % 2), i / 2, j / 2, k / 2);
  return make_node<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const Shape& os = n.grad.shape;
    for (int c = 0; c < os.c; ++c)
      for (int i = 0; i < os.x; ++i)
        for (int j = 0; j < os.y; ++j)
          for (int k = 0; k < os.z; ++k)
            g.at(c * 8 + (i % 2) * 4 + (j % 2) * 2 + (k % 2), i / 2, j / 2, k / 2) += n.grad.at(c, i, j, k);
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require(a->value.shape == b->value.shape,
                  "add: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  Tensor<Scalar> out(a->value.shape, a->value.data + b->value.data);
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) p->ensure_grad().data += n.grad.data;
  });
}

/// Subtracts each channel's global mean.
template <typename Scalar>
Var<Scalar> center(const Var<Scalar>& x) {
  const auto& X = x->value.data;
  Tensor<Scalar> out(x->value.shape, (X.colwise() - X.rowwise().mean()).eval());
  return make_node<Scalar>(std::move(out), {x}, [](Node<Scalar>& n) {
    const auto& G = n.grad.data;
    n.parents[0]->ensure_grad().data += (G.colwise() - G.rowwise().mean());
  });
}

/// Fully connected layer on the flattened input; result reshaped to `out_shape`.
/// Weight layout: (out_shape.size() x input size); bias: (out_shape.size() x 1).
template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Shape out_shape) {
  const std::int64_t in_size = x->value.shape.size();
  detail::require(w->value.data.cols() == in_size && w->value.data.rows() == out_shape.size(),
                  "dense: weight does not match input " + x->value.shape.str());
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> flat(x->value.data.data(), in_size);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y = w->value.data * flat + b->value.data.col(0);
  Tensor<Scalar> out(out_shape);
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(out.data.data(), out_shape.size()) = y;
  return make_node<Scalar>(std::move(out), {x, w, b}, [](Node<Scalar>& n) {
    auto& xin = n.parents[0];
    auto& win = n.parents[1];
    auto& bin = n.parents[2];
    const std::int64_t in_size = xin->value.shape.size();
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> g(n.grad.data.data(), n.grad.shape.size());
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> flat(xin->value.data.data(), in_size);
    if (win->requires_grad) win->ensure_grad().data.noalias() += g * flat.transpose();
    if (bin->requires_grad) bin->ensure_grad().data.col(0) += g;
    if (xin->requires_grad) {
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dx(xin->ensure_grad().data.data(), in_size);
      dx.noalias() += win->value.data.transpose() * g;
    }
  });
}

/// Resamples `image` at x + disp(x) (displacements in voxels, channels = axes)
/// with trilinear interpolation and border clamping.
template <typename Scalar>
Var<Scalar> warp(const Var<Scalar>& image, const Var<Scalar>& disp) {
  const Shape& s = image->value.shape;
  detail::require(disp->value.shape == Shape{3, s.x, s.y, s.z},
                  "warp: displacement " + disp->value.shape.str() + " does not match image " + s.str());
  Tensor<Scalar> out(s);
  const std::int64_t nv = s.voxels();
  struct Corner {
    std::int64_t idx[8];
    Scalar w[8];
    Scalar f[3];
    int base[3];
    bool clamped[3];
  };
  std::vector<Corner> corners(static_cast<std::size_t>(nv));
  const int dims[3] = {s.x, s.y, s.z};
  std::int64_t v = 0;
  for (int i = 0; i < s.x; ++i)
    for (int j = 0; j < s.y; ++j)
      for (int k = 0; k < s.z; ++k, ++v) {
        Corner& cr = corners[std::size_t(v)];
        const int pos[3] = {i, j, k};
        int lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
          Scalar p = Scalar(pos[a]) + disp->value.data(a, v);
          cr.clamped[a] = p <= Scalar(0) || p >= Scalar(dims[a] - 1);
          p = std::clamp(p, Scalar(0), Scalar(dims[a] - 1));
          lo[a] = std::min(int(std::floor(p)), dims[a] - 1);
          hi[a] = std::min(lo[a] + 1, dims[a] - 1);
          cr.f[a] = p - Scalar(lo[a]);
          cr.base[a] = lo[a];
        }
        int q = 0;
        for (int a = 0; a < 2; ++a)
          for (int b2 = 0; b2 < 2; ++b2)
            for (int c = 0; c < 2; ++c, ++q) {
              const int xi = a ? hi[0] : lo[0], yi = b2 ? hi[1] : lo[1], zi = c ? hi[2] : lo[2];
              cr.idx[q] = (std::int64_t(xi) * s.y + yi) * s.z + zi;
              cr.w[q] = (a ? cr.f[0] : 1 - cr.f[0]) * (b2 ? cr.f[1] : 1 - cr.f[1]) * (c ? cr.f[2] : 1 - cr.f[2]);
            }
        for (int ch = 0; ch < s.c; ++ch) {
          Scalar acc = 0;
          for (int q2 = 0; q2 < 8; ++q2) acc += cr.w[q2] * image->value.data(ch, cr.idx[q2]);
          out.data(ch, v) = acc;
        }
      }
  return make_node<Scalar>(std::move(out), {image, disp}, [corners = std::move(corners)](Node<Scalar>& n) {
    auto& img = n.parents[0];
    auto& dsp = n.parents[1];
    const auto& I = img->value.data;
    const std::int64_t nv = n.grad.shape.voxels();
    const int C = n.grad.shape.c;
    for (std::int64_t v = 0; v < nv; ++v) {
      const Corner& cr = corners[std::size_t(v)];
      if (img->requires_grad) {
        auto& gi = img->ensure_grad().data;
        for (int ch = 0; ch < C; ++ch)
          for (int q = 0; q < 8; ++q) gi(ch, cr.idx[q]) += cr.w[q] * n.grad.data(ch, v);
      }
      if (dsp->requires_grad) {
        auto& gd = dsp->ensure_grad().data;
        for (int a = 0; a < 3; ++a) {
          if (cr.clamped[a]) continue;
          Scalar acc = 0;
          for (int ch = 0; ch < C; ++ch) {
            Scalar d = 0;
            int q = 0;
            for (int bx = 0; bx < 2; ++bx)
              for (int by = 0; by < 2; ++by)
                for (int bz = 0; bz < 2; ++bz, ++q) {
                  const int bit[3] = {bx, by, bz};
                  Scalar wq = 1;
                  for (int e = 0; e < 3; ++e) {
                    if (e == a) wq *= bit[e] ? Scalar(1) : Scalar(-1);
                    else wq *= bit[e] ? cr.f[e] : 1 - cr.f[e];
                  }
                  d += wq * I(ch, cr.idx[q]);
                }
            acc += d * n.grad.data(ch, v);
          }
          gd(a, v) += acc;
        }
      }
    }
  });
}

/// Weighted sum of scalar nodes.
template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<Var<Scalar>>& terms, const std::vector<double>& weights) {
  detail::require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: bad arity");
  Scalar total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += Scalar(weights[i]) * terms[i]->value.data(0, 0);
  return make_node<Scalar>(Tensor<Scalar>::constant({1, 1, 1, 1}, total), terms, [weights](Node<Scalar>& n) {
    const Scalar g = n.grad.data(0, 0);
    for (std::size_t i = 0; i < n.parents.size(); ++i)
      if (n.parents[i]->requires_grad) n.parents[i]->ensure_grad().data.array() += Scalar(weights[i]) * g;
  });
}

/// Mean squared error against a constant target.
template <typename Scalar>
Var<Scalar> mse_loss(const Var<Scalar>& pred, const Tensor<Scalar>& target) {
  detail::require(pred->value.shape == target.shape, "mse_loss: shape mismatch " +
                                                         pred->value.shape.str() + " vs " + target.shape.str());
  RowMatrix<Scalar> diff = pred->value.data - target.data;
  const double n = double(diff.size());
  const Scalar val = Scalar(diff.template cast<double>().squaredNorm() / n);
  return make_node<Scalar>(Tensor<Scalar>::constant({1, 1, 1, 1}, val), {pred},
                           [diff = std::move(diff), n](Node<Scalar>& node) {
                             const Scalar g = node.grad.data(0, 0) * Scalar(2.0 / n);
                             node.parents[0]->ensure_grad().data += g * diff;
                           });
}

namespace detail {

template <typename Fn>
void for_each_forward_pair(const Shape& s, Fn&& fn) {
  const int dims[3] = {s.x, s.y, s.z};
  const std::int64_t strides[3] = {std::int64_t(s.y) * s.z, s.z, 1};
  for (int a = 0; a < 3; ++a)
    for (int i = 0; i < s.x; ++i)
      for (int j = 0; j < s.y; ++j)
        for (int k = 0; k < s.z; ++k) {
          const int pos[3] = {i, j, k};
          if (pos[a] + 1 >= dims[a]) continue;
          const std::int64_t v = (std::int64_t(i) * s.y + j) * s.z + k;
          fn(v, v + strides[a]);
        }
}

}  // namespace detail

/// Mean squared forward difference of a vector field along each axis.
template <typename Scalar>
Var<Scalar> smoothness_loss(const Var<Scalar>& field) {
  const Tensor<Scalar>& F = field->value;
  const Shape s = F.shape;
  double total = 0;
  std::int64_t count = 0;
  for (int c = 0; c < s.c; ++c)
    detail::for_each_forward_pair(s, [&](std::int64_t v0, std::int64_t v1) {
      const double d = double(F.data(c, v1)) - double(F.data(c, v0));
      total += d * d;
      ++count;
    });
  const double n = double(std::max<std::int64_t>(count, 1));
  return make_node<Scalar>(Tensor<Scalar>::constant({1, 1, 1, 1}, Scalar(total / n)), {field},
                           [n](Node<Scalar>& node) {
                             const Tensor<Scalar>& F = node.parents[0]->value;
                             auto& g = node.parents[0]->ensure_grad();
                             const Scalar scale = node.grad.data(0, 0) * Scalar(2.0 / n);
                             for (int c = 0; c < F.shape.c; ++c)
                               detail::for_each_forward_pair(F.shape, [&](std::int64_t v0, std::int64_t v1) {
                                 const Scalar d = F.data(c, v1) - F.data(c, v0);
                                 g.data(c, v1) += scale * d;
                                 g.data(c, v0) -= scale * d;
                               });
                           });
}

}  // namespace deepthal::nn
