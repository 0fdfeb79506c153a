#pragma once

// Dense-prediction layers on single images in CHW layout, plus the layout
// bridge to per-pixel rows ([pixels x channels]) used by everything
// downstream of the backbone.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gfss/autograd.hpp"

namespace gfss::ag {

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// x: [C, H, W], w: [O, C, k, k], b: [O]  ->  [O, Ho, Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
  const auto& X = x.value();
  const auto& Wt = w.value();
  if (X.rank() != 3 || Wt.rank() != 4 || Wt.dim(1) != X.dim(0) || Wt.dim(2) != Wt.dim(3) ||
      b.value().size() != Wt.dim(0))
    throw ShapeError("conv2d: input " + shape_str(X.shape()) + " weight " +
                     shape_str(Wt.shape()));
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t O = Wt.dim(0), k = Wt.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);

  // Output column range [lo, hi) whose input column ox*stride + kx - pad is in bounds.
  auto col_range = [=](std::size_t kx) {
    const long long off = static_cast<long long>(kx) - static_cast<long long>(pad);
    const long long s = static_cast<long long>(stride);
    long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long long hi = (static_cast<long long>(W) - 1 - off) / s + 1;
    hi = std::min<long long>(hi, static_cast<long long>(Wo));
    return std::pair<std::size_t, std::size_t>(lo, std::max(lo, hi));
  };

  Tensor<T> out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o) {
    T* op = out.data() + o * Ho * Wo;
    std::fill(op, op + Ho * Wo, b.value()[o]);
    for (std::size_t c = 0; c < C; ++c) {
      const T* ip = X.data() + c * H * W;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = Wt.data()[((o * C + c) * k + ky) * k + kx];
          const auto [lo, hi] = col_range(kx);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
            if (iy < 0 || iy >= static_cast<long long>(H)) continue;
            const long long base = iy * static_cast<long long>(W) + static_cast<long long>(kx) -
                                   static_cast<long long>(pad);
            T* orow = op + oy * Wo;
            if (stride == 1) {
              const T* irow = ip + (base + static_cast<long long>(lo));
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox - lo];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox)
                orow[ox] += wv * ip[base + static_cast<long long>(ox * stride)];
            }
          }
        }
    }
  }

  return make_op<T>(std::move(out), {x, w, b}, [=](Node<T>& n) {
    const auto& X = n.parents[0]->value;
    const auto& Wt = n.parents[1]->value;
    const auto& G = n.grad;
    Tensor<T>* gx = parent_grad(n, 0);
    Tensor<T>* gw = parent_grad(n, 1);
    if (Tensor<T>* gb = parent_grad(n, 2))
      for (std::size_t o = 0; o < O; ++o) {
        T s{};
        const T* gp = G.data() + o * Ho * Wo;
        for (std::size_t i = 0; i < Ho * Wo; ++i) s += gp[i];
        (*gb)[o] += s;
      }
    if (!gx && !gw) return;
    for (std::size_t o = 0; o < O; ++o) {
      const T* gp = G.data() + o * Ho * Wo;
      for (std::size_t c = 0; c < C; ++c) {
        const T* ip = X.data() + c * H * W;
        T* gip = gx ? gx->data() + c * H * W : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * C + c) * k + ky) * k + kx;
            const T wv = Wt.data()[widx];
            const auto [lo, hi] = col_range(kx);
            T acc{};
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
              if (iy < 0 || iy >= static_cast<long long>(H)) continue;
              const long long base = iy * static_cast<long long>(W) + static_cast<long long>(kx) -
                                     static_cast<long long>(pad);
              const T* grow = gp + oy * Wo;
              if (gw) {
                if (stride == 1) {
                  const T* irow = ip + (base + static_cast<long long>(lo));
                  for (std::size_t ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox - lo];
                } else {
                  for (std::size_t ox = lo; ox < hi; ++ox)
                    acc += grow[ox] * ip[base + static_cast<long long>(ox * stride)];
                }
              }
              if (gip) {
                if (stride == 1) {
                  T* girow = gip + (base + static_cast<long long>(lo));
                  for (std::size_t ox = lo; ox < hi; ++ox) girow[ox - lo] += wv * grow[ox];
                } else {
                  for (std::size_t ox = lo; ox < hi; ++ox)
                    gip[base + static_cast<long long>(ox * stride)] += wv * grow[ox];
                }
              }
            }
            if (gw) (*gw)[widx] += acc;
          }
      }
    }
  });
}

// Group normalization over [C, H, W] with a per-channel affine transform.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  T eps = T(1e-5)) {
  const auto& X = x.value();
  if (X.rank() != 3) throw ShapeError("group_norm: expected [C, H, W]");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  if (groups == 0 || C % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  if (gamma.value().size() != C || beta.value().size() != C)
    throw ShapeError("group_norm: affine parameter size mismatch");
  const std::size_t cpg = C / groups, count = cpg * HW;

  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* p = X.data() + g * count;
    T mean{};
    for (std::size_t i = 0; i < count; ++i) mean += p[i];
    mean /= static_cast<T>(count);
    T var{};
    for (std::size_t i = 0; i < count; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<T>(count);
    inv_std[g] = T{1} / std::sqrt(var + eps);
    T* q = xhat.data() + g * count;
    for (std::size_t i = 0; i < count; ++i) q[i] = (p[i] - mean) * inv_std[g];
  }
  Tensor<T> out(X.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T ga = gamma.value()[c], be = beta.value()[c];
    const T* q = xhat.data() + c * HW;
    T* o = out.data() + c * HW;
    for (std::size_t i = 0; i < HW; ++i) o[i] = ga * q[i] + be;
  }

  return make_op<T>(std::move(out), {x, gamma, beta},
                    [=, xhat = std::move(xhat)](Node<T>& n) {
                      const auto& G = n.grad;
                      const auto& Ga = n.parents[1]->value;
                      if (auto* gg = parent_grad(n, 1))
                        for (std::size_t c = 0; c < C; ++c) {
                          T s{};
                          for (std::size_t i = 0; i < HW; ++i)
                            s += G[c * HW + i] * xhat[c * HW + i];
                          (*gg)[c] += s;
                        }
                      if (auto* gbeta = parent_grad(n, 2))
                        for (std::size_t c = 0; c < C; ++c) {
                          T s{};
                          for (std::size_t i = 0; i < HW; ++i) s += G[c * HW + i];
                          (*gbeta)[c] += s;
                        }
                      auto* gx = parent_grad(n, 0);
                      if (!gx) return;
                      std::vector<T> dxhat(count);
                      for (std::size_t g = 0; g < groups; ++g) {
                        T mean_d{}, mean_dx{};
                        for (std::size_t i = 0; i < count; ++i) {
                          const std::size_t idx = g * count + i;
                          dxhat[i] = G[idx] * Ga[idx / HW];
                          mean_d += dxhat[i];
                          mean_dx += dxhat[i] * xhat[idx];
                        }
                        mean_d /= static_cast<T>(count);
                        mean_dx /= static_cast<T>(count);
                        for (std::size_t i = 0; i < count; ++i) {
                          const std::size_t idx = g * count + i;
                          (*gx)[idx] += inv_std[g] * (dxhat[i] - mean_d - xhat[idx] * mean_dx);
                        }
                      }
                    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (n.value[i] > T{0}) (*g)[i] += n.grad[i];
  });
}

// [C, H, W] -> [H*W, C]
template <typename T>
Var<T> chw_to_rows(const Var<T>& x) {
  const auto& X = x.value();
  if (X.rank() != 3) throw ShapeError("chw_to_rows: expected [C, H, W]");
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor<T> out({HW, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out(i, c) = X[c * HW + i];
  return make_op<T>(std::move(out), {x}, [C, HW](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) (*g)[c * HW + i] += n.grad(i, c);
  });
}

// [H, W, C] image -> [C, H, W]
template <typename T>
Tensor<T> hwc_to_chw(const Tensor<T>& img) {
  if (img.rank() != 3) throw ShapeError("hwc_to_chw: expected [H, W, C]");
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  Tensor<T> out({C, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(c * H + y) * W + x] = img(y, x, c);
  return out;
}

// Source taps of half-pixel-centred bilinear resampling from `in` to `out`
// samples along one axis.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t l = static_cast<std::size_t>(src);
    if (l > in - 1) l = in - 1;
    t.lo[i] = l;
    t.hi[i] = std::min(l + 1, in - 1);
    t.frac[i] = src - static_cast<double>(l);
  }
  return t;
}

// Bilinear resize of per-pixel rows: [h*w, C] -> [H*W, C].
template <typename T>
Var<T> upsample_rows(const Var<T>& x, std::size_t h, std::size_t w, std::size_t H,
                     std::size_t W) {
  const auto& X = x.value();
  if (X.rank() != 2 || X.rows() != h * w) throw ShapeError("upsample_rows: grid mismatch");
  const std::size_t C = X.cols();
  const LinearTaps ty = linear_taps(h, H), tx = linear_taps(w, W);
  Tensor<T> out({H * W, C});
  for (std::size_t y = 0; y < H; ++y) {
    const T fy = static_cast<T>(ty.frac[y]);
    for (std::size_t xx = 0; xx < W; ++xx) {
      const T fx = static_cast<T>(tx.frac[xx]);
      const T w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
      const T* a = X.data() + (ty.lo[y] * w + tx.lo[xx]) * C;
      const T* b = X.data() + (ty.lo[y] * w + tx.hi[xx]) * C;
      const T* c = X.data() + (ty.hi[y] * w + tx.lo[xx]) * C;
      const T* d = X.data() + (ty.hi[y] * w + tx.hi[xx]) * C;
      T* o = out.data() + (y * W + xx) * C;
      for (std::size_t k = 0; k < C; ++k) o[k] = w00 * a[k] + w01 * b[k] + w10 * c[k] + w11 * d[k];
    }
  }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    for (std::size_t y = 0; y < H; ++y) {
      const T fy = static_cast<T>(ty.frac[y]);
      for (std::size_t xx = 0; xx < W; ++xx) {
        const T fx = static_cast<T>(tx.frac[xx]);
        const T w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
        T* a = g->data() + (ty.lo[y] * w + tx.lo[xx]) * C;
        T* b = g->data() + (ty.lo[y] * w + tx.hi[xx]) * C;
        T* c = g->data() + (ty.hi[y] * w + tx.lo[xx]) * C;
        T* d = g->data() + (ty.hi[y] * w + tx.hi[xx]) * C;
        const T* go = n.grad.data() + (y * W + xx) * C;
        for (std::size_t k = 0; k < C; ++k) {
          a[k] += w00 * go[k];
          b[k] += w01 * go[k];
          c[k] += w10 * go[k];
          d[k] += w11 * go[k];
        }
      }
    }
  });
}

}  // namespace gfss::ag
