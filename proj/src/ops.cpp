#include "capsnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace capsnet {
namespace {

template <typename T>
T* accum(const std::shared_ptr<Storage<T>>& s) {
  if (!s->requires_grad) return nullptr;
  s->ensure_grad();
  return s->grad.data();
}

template <typename T>
T dot(const T* a, const T* b, int64_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T a, const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(int64_t m, int64_t k, int64_t n, const T* A, const T* B, T* C) {
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (int64_t l = 0; l < k; ++l) axpy(a[l], B + l * n, c, n);
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(int64_t m, int64_t k, int64_t n, const T* A, const T* B, T* C) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      C[i * n + j] += dot(A + i * k, B + j * k, k);
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(int64_t m, int64_t k, int64_t n, const T* A, const T* B, T* C) {
  for (int64_t l = 0; l < k; ++l) {
    const T* a = A + l * m;
    const T* b = B + l * n;
    for (int64_t i = 0; i < m; ++i) axpy(a[i], b, C + i * n, n);
  }
}

// Splits `shape` around `axis` into (outer, m, inner) extents.
struct AxisSplit {
  int64_t outer = 1, m = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  int nd = static_cast<int>(shape.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " +
                     shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.m = shape[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < nd; ++i) s.inner *= shape[static_cast<size_t>(i)];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  bool bscalar = b.numel() == 1 && a.numel() != 1;
  if (!bscalar && a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + (bscalar ? pb[0] : pb[i]);
  if (recording(tape, rg)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(so, [sa, sb, so, bscalar, n] {
      const T* g = so->grad.data();
      if (T* ga = accum(sa)) {
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (T* gb = accum(sb)) {
        if (bscalar) {
          T acc = 0;
          for (int64_t i = 0; i < n; ++i) acc += g[i];
          gb[0] += acc;
        } else {
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  bool bscalar = b.numel() == 1 && a.numel() != 1;
  if (!bscalar && a.shape() != b.shape()) {
    throw ShapeError("sub: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - (bscalar ? pb[0] : pb[i]);
  if (recording(tape, rg)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(so, [sa, sb, so, bscalar, n] {
      const T* g = so->grad.data();
      if (T* ga = accum(sa)) {
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (T* gb = accum(sb)) {
        if (bscalar) {
          T acc = 0;
          for (int64_t i = 0; i < n; ++i) acc += g[i];
          gb[0] -= acc;
        } else {
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  bool bscalar = b.numel() == 1 && a.numel() != 1;
  if (!bscalar && a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * (bscalar ? pb[0] : pb[i]);
  if (recording(tape, rg)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(so, [sa, sb, so, bscalar, n] {
      const T* g = so->grad.data();
      const T* pa2 = sa->data.data();
      const T* pb2 = sb->data.data();
      if (T* ga = accum(sa)) {
        for (int64_t i = 0; i < n; ++i)
          ga[i] += g[i] * (bscalar ? pb2[0] : pb2[i]);
      }
      if (T* gb = accum(sb)) {
        if (bscalar) {
          T acc = 0;
          for (int64_t i = 0; i < n; ++i) acc += g[i] * pa2[i];
          gb[0] += acc;
        } else {
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape) {
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = c * px[i];
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, c, n] {
      const T* g = so->grad.data();
      if (T* gx = accum(sx)) {
        for (int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape) {
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > 0 ? px[i] : T(0);
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, n] {
      const T* g = so->grad.data();
      const T* px2 = sx->data.data();
      if (T* gx = accum(sx)) {
        // derivative at exactly 0 is taken as 0
        for (int64_t i = 0; i < n; ++i) gx[i] += px2[i] > 0 ? g[i] : T(0);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape) {
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    // split on sign so exp never overflows
    po[i] = px[i] >= 0 ? T(1) / (T(1) + std::exp(-px[i]))
                       : std::exp(px[i]) / (T(1) + std::exp(px[i]));
  }
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, n] {
      const T* g = so->grad.data();
      const T* y = so->data.data();
      if (T* gx = accum(sx)) {
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape) {
  bool rg = x.requires_grad();
  const T* px = x.data();
  int64_t n = x.numel();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor<T> out = Tensor<T>::scalar(acc, rg);
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, n] {
      T g = so->grad[0];
      if (T* gx = accum(sx)) {
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not chain");
  }
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({m, n}, rg);
  gemm_nn(m, k, n, a.data(), b.data(), out.data());
  if (recording(tape, rg)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(so, [sa, sb, so, m, k, n] {
      const T* g = so->grad.data();
      if (T* ga = accum(sa)) gemm_nt(m, n, k, g, sb->data.data(), ga);
      if (T* gb = accum(sb)) gemm_tn(k, m, n, sa->data.data(), g, gb);
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int padding, Tape<T>* tape) {
  if (x.ndim() != 3 || kernel.ndim() != 4 || x.dim(0) != kernel.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  int64_t oh = (h + 2 * padding - kh) / stride + 1;
  int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || oh < 1 || ow < 1) {
    throw ConfigError("conv2d: kernel " + shape_str(kernel.shape()) +
                      " stride " + std::to_string(stride) + " pad " +
                      std::to_string(padding) + " produces empty output from " +
                      shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " vs output channels " + std::to_string(cout));
  }

  // im2col: rows indexed by (cin, kh, kw), columns by output position.
  int64_t ckk = cin * kh * kw, np = oh * ow;
  std::vector<T> cols(static_cast<size_t>(ckk * np), T(0));
  const T* px = x.data();
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t a = 0; a < kh; ++a) {
      for (int64_t b = 0; b < kw; ++b) {
        T* row = cols.data() + ((c * kh + a) * kw + b) * np;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride + a - padding;
          if (iy < 0 || iy >= h) continue;
          const T* src = px + (c * h + iy) * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride + b - padding;
            if (ix >= 0 && ix < w) row[oy * ow + ox] = src[ix];
          }
        }
      }
    }
  }

  bool rg = x.requires_grad() || kernel.requires_grad() ||
            (bias.defined() && bias.requires_grad());
  Tensor<T> out = Tensor<T>::zeros({cout, oh, ow}, rg);
  gemm_nn(cout, ckk, np, kernel.data(), cols.data(), out.data());
  if (bias.defined()) {
    T* po = out.data();
    const T* pb = bias.data();
    for (int64_t c = 0; c < cout; ++c) {
      for (int64_t p = 0; p < np; ++p) po[c * np + p] += pb[c];
    }
  }

  if (recording(tape, rg)) {
    auto sx = x.storage(), sk = kernel.storage(), so = out.storage();
    auto sbias = bias.defined() ? bias.storage() : nullptr;
    tape->record(so, [sx, sk, sbias, so, cols = std::move(cols), cin, h, w,
                      cout, kh, kw, oh, ow, stride, padding, ckk, np] {
      const T* g = so->grad.data();
      if (T* gk = accum(sk)) gemm_nt(cout, np, ckk, g, cols.data(), gk);
      if (sbias) {
        if (T* gb = accum(sbias)) {
          for (int64_t c = 0; c < cout; ++c) {
            T acc = 0;
            for (int64_t p = 0; p < np; ++p) acc += g[c * np + p];
            gb[c] += acc;
          }
        }
      }
      if (T* gx = accum(sx)) {
        std::vector<T> gcols(static_cast<size_t>(ckk * np), T(0));
        gemm_tn(ckk, cout, np, sk->data.data(), g, gcols.data());
        for (int64_t c = 0; c < cin; ++c) {
          for (int64_t a = 0; a < kh; ++a) {
            for (int64_t b = 0; b < kw; ++b) {
              const T* row = gcols.data() + ((c * kh + a) * kw + b) * np;
              for (int64_t oy = 0; oy < oh; ++oy) {
                int64_t iy = oy * stride + a - padding;
                if (iy < 0 || iy >= h) continue;
                T* dst = gx + (c * h + iy) * w;
                for (int64_t ox = 0; ox < ow; ++ox) {
                  int64_t ix = ox * stride + b - padding;
                  if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis, Tape<T>* tape) {
  AxisSplit ax = split_axis(x.shape(), axis, "softmax");
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < ax.outer; ++o) {
    for (int64_t i = 0; i < ax.inner; ++i) {
      const T* sx = px + o * ax.m * ax.inner + i;
      T* sy = po + o * ax.m * ax.inner + i;
      T mx = sx[0];
      for (int64_t t = 1; t < ax.m; ++t) mx = std::max(mx, sx[t * ax.inner]);
      T z = 0;
      for (int64_t t = 0; t < ax.m; ++t) {
        T e = std::exp(sx[t * ax.inner] - mx);
        sy[t * ax.inner] = e;
        z += e;
      }
      for (int64_t t = 0; t < ax.m; ++t) sy[t * ax.inner] /= z;
    }
  }
  if (recording(tape, rg)) {
    auto sx2 = x.storage(), so = out.storage();
    tape->record(so, [sx2, so, ax] {
      const T* g = so->grad.data();
      const T* y = so->data.data();
      if (T* gx = accum(sx2)) {
        for (int64_t o = 0; o < ax.outer; ++o) {
          for (int64_t i = 0; i < ax.inner; ++i) {
            int64_t base = o * ax.m * ax.inner + i;
            T inner = 0;
            for (int64_t t = 0; t < ax.m; ++t) {
              inner += g[base + t * ax.inner] * y[base + t * ax.inner];
            }
            for (int64_t t = 0; t < ax.m; ++t) {
              int64_t k = base + t * ax.inner;
              gx[k] += y[k] * (g[k] - inner);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis, T eps, const Tensor<T>& gain,
                     const Tensor<T>& bias, Tape<T>* tape) {
  AxisSplit ax = split_axis(x.shape(), axis, "layer_norm");
  if (gain.defined() && gain.numel() != ax.m) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) +
                     " vs slice length " + std::to_string(ax.m));
  }
  if (bias.defined() && bias.numel() != ax.m) {
    throw ShapeError("layer_norm: bias " + shape_str(bias.shape()) +
                     " vs slice length " + std::to_string(ax.m));
  }
  bool rg = x.requires_grad() || (gain.defined() && gain.requires_grad()) ||
            (bias.defined() && bias.requires_grad());
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  const T* pg = gain.defined() ? gain.data() : nullptr;
  const T* pb = bias.defined() ? bias.data() : nullptr;
  int64_t slices = ax.outer * ax.inner;
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv(static_cast<size_t>(slices));
  for (int64_t o = 0; o < ax.outer; ++o) {
    for (int64_t i = 0; i < ax.inner; ++i) {
      int64_t base = o * ax.m * ax.inner + i;
      T mean = 0;
      for (int64_t t = 0; t < ax.m; ++t) mean += px[base + t * ax.inner];
      mean /= T(ax.m);
      T var = 0;
      for (int64_t t = 0; t < ax.m; ++t) {
        T d = px[base + t * ax.inner] - mean;
        var += d * d;
      }
      var /= T(ax.m);  // population variance
      T iv = T(1) / std::sqrt(var + eps);
      inv[static_cast<size_t>(o * ax.inner + i)] = iv;
      for (int64_t t = 0; t < ax.m; ++t) {
        int64_t k = base + t * ax.inner;
        T xh = (px[k] - mean) * iv;
        xhat[static_cast<size_t>(k)] = xh;
        po[k] = (pg ? pg[t] : T(1)) * xh + (pb ? pb[t] : T(0));
      }
    }
  }
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    auto sg = gain.defined() ? gain.storage() : nullptr;
    auto sb = bias.defined() ? bias.storage() : nullptr;
    tape->record(so, [sx, sg, sb, so, ax, xhat = std::move(xhat),
                      inv = std::move(inv)] {
      const T* g = so->grad.data();
      const T* pg2 = sg ? sg->data.data() : nullptr;
      T* ggain = sg ? accum(sg) : nullptr;
      T* gbias = sb ? accum(sb) : nullptr;
      T* gx = accum(sx);
      for (int64_t o = 0; o < ax.outer; ++o) {
        for (int64_t i = 0; i < ax.inner; ++i) {
          int64_t base = o * ax.m * ax.inner + i;
          T iv = inv[static_cast<size_t>(o * ax.inner + i)];
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (int64_t t = 0; t < ax.m; ++t) {
            int64_t k = base + t * ax.inner;
            T xh = xhat[static_cast<size_t>(k)];
            if (ggain) ggain[t] += g[k] * xh;
            if (gbias) gbias[t] += g[k];
            T dxh = g[k] * (pg2 ? pg2[t] : T(1));
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh;
          }
          if (!gx) continue;
          mean_dxh /= T(ax.m);
          mean_dxh_xh /= T(ax.m);
          for (int64_t t = 0; t < ax.m; ++t) {
            int64_t k = base + t * ax.inner;
            T xh = xhat[static_cast<size_t>(k)];
            T dxh = g[k] * (pg2 ? pg2[t] : T(1));
            gx[k] += iv * (dxh - mean_dxh - xh * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> multiclass_ce(const Tensor<T>& logits, int64_t target, Tape<T>* tape) {
  int64_t c = logits.numel();
  if (target < 0 || target >= c) {
    throw InputError("multiclass_ce: target " + std::to_string(target) +
                     " out of range for " + std::to_string(c) + " classes");
  }
  const T* pl = logits.data();
  T mx = pl[0];
  for (int64_t i = 1; i < c; ++i) mx = std::max(mx, pl[i]);
  T z = 0;
  std::vector<T> prob(static_cast<size_t>(c));
  for (int64_t i = 0; i < c; ++i) {
    prob[static_cast<size_t>(i)] = std::exp(pl[i] - mx);
    z += prob[static_cast<size_t>(i)];
  }
  for (int64_t i = 0; i < c; ++i) prob[static_cast<size_t>(i)] /= z;
  T loss = std::log(z) + mx - pl[target];
  bool rg = logits.requires_grad();
  Tensor<T> out = Tensor<T>::scalar(loss, rg);
  if (recording(tape, rg)) {
    auto sl = logits.storage(), so = out.storage();
    tape->record(so, [sl, so, prob = std::move(prob), target, c] {
      T g = so->grad[0];
      if (T* gl = accum(sl)) {
        for (int64_t i = 0; i < c; ++i) {
          gl[i] += g * (prob[static_cast<size_t>(i)] - (i == target ? 1 : 0));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> binary_ce(const Tensor<T>& logits, const Tensor<T>& target,
                    Tape<T>* tape) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("binary_ce: logits " + shape_str(logits.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  int64_t c = logits.numel();
  const T* pl = logits.data();
  const T* pt = target.data();
  std::vector<T> sig(static_cast<size_t>(c));
  T loss = 0;
  for (int64_t i = 0; i < c; ++i) {
    if (pt[i] != T(0) && pt[i] != T(1)) {
      throw InputError("binary_ce: target[" + std::to_string(i) +
                       "] is not a 0/1 indicator");
    }
    // softplus(l) - y*l, with softplus(l) = max(l,0) + log1p(exp(-|l|))
    T l = pl[i];
    loss += std::max(l, T(0)) + std::log1p(std::exp(-std::abs(l))) - pt[i] * l;
    sig[static_cast<size_t>(i)] = l >= 0 ? T(1) / (T(1) + std::exp(-l))
                                         : std::exp(l) / (T(1) + std::exp(l));
  }
  loss /= T(c);
  bool rg = logits.requires_grad();
  Tensor<T> out = Tensor<T>::scalar(loss, rg);
  if (recording(tape, rg)) {
    auto sl = logits.storage(), st = target.storage(), so = out.storage();
    tape->record(so, [sl, st, so, sig = std::move(sig), c] {
      T g = so->grad[0] / T(c);
      const T* pt2 = st->data.data();
      if (T* gl = accum(sl)) {
        for (int64_t i = 0; i < c; ++i) {
          gl[i] += g * (sig[static_cast<size_t>(i)] - pt2[i]);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> capsule_votes(const Tensor<T>& children, const Tensor<T>& weights,
                        PoseStructure structure, Tape<T>* tape) {
  if (children.ndim() != 3) {
    throw ShapeError("capsule_votes: children " + shape_str(children.shape()) +
                     " is not [windows, child types, pose]");
  }
  int64_t gw = children.dim(0), nc = children.dim(1), din = children.dim(2);
  if (weights.ndim() != 4 || weights.dim(0) != nc) {
    throw ShapeError("capsule_votes: weights " + shape_str(weights.shape()) +
                     " vs children " + shape_str(children.shape()));
  }
  int64_t np = weights.dim(1);
  int64_t r = 0, dout = 0;
  if (structure == PoseStructure::matrix) {
    r = weights.dim(2);
    if (weights.dim(3) != r || r * r != din) {
      throw ConfigError("capsule_votes: matrix poses of dim " +
                        std::to_string(din) + " need square " +
                        std::to_string(r) + "x" + std::to_string(r) +
                        " weights with matching pose side");
    }
    dout = din;
  } else {
    dout = weights.dim(2);
    if (weights.dim(3) != din) {
      throw ConfigError("capsule_votes: weight input dim " +
                        std::to_string(weights.dim(3)) + " vs pose dim " +
                        std::to_string(din));
    }
  }
  bool rg = children.requires_grad() || weights.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({gw, nc, np, dout}, rg);
  const T* pc = children.data();
  const T* pw = weights.data();
  T* po = out.data();
  for (int64_t g = 0; g < gw; ++g) {
    for (int64_t i = 0; i < nc; ++i) {
      const T* child = pc + (g * nc + i) * din;
      for (int64_t j = 0; j < np; ++j) {
        const T* wij = pw + (i * np + j) * (structure == PoseStructure::matrix
                                                ? r * r
                                                : dout * din);
        T* v = po + ((g * nc + i) * np + j) * dout;
        if (structure == PoseStructure::matrix) {
          gemm_nn(r, r, r, wij, child, v);
        } else {
          for (int64_t o = 0; o < dout; ++o) v[o] = dot(wij + o * din, child, din);
        }
      }
    }
  }
  if (recording(tape, rg)) {
    auto sc = children.storage(), sw = weights.storage(), so = out.storage();
    tape->record(so, [sc, sw, so, structure, gw, nc, np, din, dout, r] {
      const T* g = so->grad.data();
      const T* pc2 = sc->data.data();
      const T* pw2 = sw->data.data();
      T* gc = accum(sc);
      T* gwt = accum(sw);
      int64_t wsz = structure == PoseStructure::matrix ? r * r : dout * din;
      for (int64_t gi = 0; gi < gw; ++gi) {
        for (int64_t i = 0; i < nc; ++i) {
          const T* child = pc2 + (gi * nc + i) * din;
          T* gchild = gc ? gc + (gi * nc + i) * din : nullptr;
          for (int64_t j = 0; j < np; ++j) {
            const T* wij = pw2 + (i * np + j) * wsz;
            T* gwij = gwt ? gwt + (i * np + j) * wsz : nullptr;
            const T* gv = g + ((gi * nc + i) * np + j) * dout;
            if (structure == PoseStructure::matrix) {
              if (gwij) gemm_nt(r, r, r, gv, child, gwij);   // dW += dV P^T
              if (gchild) gemm_tn(r, r, r, wij, gv, gchild);  // dP += W^T dV
            } else {
              for (int64_t o = 0; o < dout; ++o) {
                if (gwij) axpy(gv[o], child, gwij + o * din, din);
                if (gchild) axpy(gv[o], wij + o * din, gchild, din);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> capsule_agreements(const Tensor<T>& votes, const Tensor<T>& parents,
                             Tape<T>* tape) {
  if (votes.ndim() != 4 || parents.ndim() != 3 ||
      votes.dim(0) != parents.dim(0) || votes.dim(2) != parents.dim(1) ||
      votes.dim(3) != parents.dim(2)) {
    throw ShapeError("capsule_agreements: votes " + shape_str(votes.shape()) +
                     " vs parents " + shape_str(parents.shape()));
  }
  int64_t gw = votes.dim(0), nc = votes.dim(1), np = votes.dim(2),
          d = votes.dim(3);
  bool rg = votes.requires_grad() || parents.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({gw, nc, np}, rg);
  const T* pv = votes.data();
  const T* pp = parents.data();
  T* po = out.data();
  for (int64_t g = 0; g < gw; ++g) {
    for (int64_t i = 0; i < nc; ++i) {
      for (int64_t j = 0; j < np; ++j) {
        po[(g * nc + i) * np + j] =
            dot(pv + ((g * nc + i) * np + j) * d, pp + (g * np + j) * d, d);
      }
    }
  }
  if (recording(tape, rg)) {
    auto sv = votes.storage(), sp = parents.storage(), so = out.storage();
    tape->record(so, [sv, sp, so, gw, nc, np, d] {
      const T* g = so->grad.data();
      const T* pv2 = sv->data.data();
      const T* pp2 = sp->data.data();
      T* gv = accum(sv);
      T* gp = accum(sp);
      for (int64_t gi = 0; gi < gw; ++gi) {
        for (int64_t i = 0; i < nc; ++i) {
          for (int64_t j = 0; j < np; ++j) {
            T ga = g[(gi * nc + i) * np + j];
            int64_t voff = ((gi * nc + i) * np + j) * d;
            int64_t poff = (gi * np + j) * d;
            if (gv) axpy(ga, pp2 + poff, gv + voff, d);
            if (gp) axpy(ga, pv2 + voff, gp + poff, d);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> capsule_weighted_sum(const Tensor<T>& coeff, const Tensor<T>& votes,
                               Tape<T>* tape) {
  if (coeff.ndim() != 3 || votes.ndim() != 4 || coeff.dim(0) != votes.dim(0) ||
      coeff.dim(1) != votes.dim(1) || coeff.dim(2) != votes.dim(2)) {
    throw ShapeError("capsule_weighted_sum: coeff " + shape_str(coeff.shape()) +
                     " vs votes " + shape_str(votes.shape()));
  }
  int64_t gw = votes.dim(0), nc = votes.dim(1), np = votes.dim(2),
          d = votes.dim(3);
  bool rg = coeff.requires_grad() || votes.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({gw, np, d}, rg);
  const T* pr = coeff.data();
  const T* pv = votes.data();
  T* po = out.data();
  for (int64_t g = 0; g < gw; ++g) {
    for (int64_t i = 0; i < nc; ++i) {
      for (int64_t j = 0; j < np; ++j) {
        axpy(pr[(g * nc + i) * np + j], pv + ((g * nc + i) * np + j) * d,
             po + (g * np + j) * d, d);
      }
    }
  }
  if (recording(tape, rg)) {
    auto sr = coeff.storage(), sv = votes.storage(), so = out.storage();
    tape->record(so, [sr, sv, so, gw, nc, np, d] {
      const T* g = so->grad.data();
      const T* pr2 = sr->data.data();
      const T* pv2 = sv->data.data();
      T* gr = accum(sr);
      T* gv = accum(sv);
      for (int64_t gi = 0; gi < gw; ++gi) {
        for (int64_t i = 0; i < nc; ++i) {
          for (int64_t j = 0; j < np; ++j) {
            int64_t voff = ((gi * nc + i) * np + j) * d;
            int64_t soff = (gi * np + j) * d;
            if (gr) gr[(gi * nc + i) * np + j] += dot(g + soff, pv2 + voff, d);
            if (gv) axpy(pr2[(gi * nc + i) * np + j], g + soff, gv + voff, d);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> unfold_capsules(const Tensor<T>& grid, int kernel, int stride,
                          Tape<T>* tape) {
  if (grid.ndim() != 4) {
    throw ShapeError("unfold_capsules: grid " + shape_str(grid.shape()) +
                     " is not [H,W,types,pose]");
  }
  int64_t h = grid.dim(0), w = grid.dim(1), n = grid.dim(2), d = grid.dim(3);
  if (kernel < 1 || stride < 1 || h < kernel || w < kernel) {
    throw ConfigError("unfold_capsules: kernel " + std::to_string(kernel) +
                      " stride " + std::to_string(stride) +
                      " does not fit grid " + shape_str(grid.shape()));
  }
  int64_t oh = (h - kernel) / stride + 1;
  int64_t ow = (w - kernel) / stride + 1;
  bool rg = grid.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({oh * ow, kernel * kernel * n, d}, rg);
  const T* pg = grid.data();
  T* po = out.data();
  for (int64_t oy = 0; oy < oh; ++oy) {
    for (int64_t ox = 0; ox < ow; ++ox) {
      T* win = po + (oy * ow + ox) * kernel * kernel * n * d;
      for (int64_t ky = 0; ky < kernel; ++ky) {
        for (int64_t kx = 0; kx < kernel; ++kx) {
          const T* src =
              pg + ((oy * stride + ky) * w + (ox * stride + kx)) * n * d;
          std::copy(src, src + n * d, win + (ky * kernel + kx) * n * d);
        }
      }
    }
  }
  if (recording(tape, rg)) {
    auto sg = grid.storage(), so = out.storage();
    tape->record(so, [sg, so, h, w, n, d, kernel, stride, oh, ow] {
      const T* g = so->grad.data();
      if (T* gg = accum(sg)) {
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            const T* win = g + (oy * ow + ox) * kernel * kernel * n * d;
            for (int64_t ky = 0; ky < kernel; ++ky) {
              for (int64_t kx = 0; kx < kernel; ++kx) {
                T* dst =
                    gg + ((oy * stride + ky) * w + (ox * stride + kx)) * n * d;
                const T* srcg = win + (ky * kernel + kx) * n * d;
                for (int64_t t = 0; t < n * d; ++t) dst[t] += srcg[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> squash(const Tensor<T>& x, Tape<T>* tape) {
  if (x.ndim() < 1) throw ShapeError("squash: undefined input");
  int64_t d = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / d;
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t rw = 0; rw < rows; ++rw) {
    const T* s = px + rw * d;
    T n2 = dot(s, s, d);
    T f = std::sqrt(n2) / (T(1) + n2);  // (n2/(1+n2)) / |s|
    for (int64_t k = 0; k < d; ++k) po[rw * d + k] = f * s[k];
  }
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, rows, d] {
      const T* g = so->grad.data();
      const T* px2 = sx->data.data();
      if (T* gx = accum(sx)) {
        for (int64_t rw = 0; rw < rows; ++rw) {
          const T* s = px2 + rw * d;
          const T* gy = g + rw * d;
          T n2 = dot(s, s, d);
          T nrm = std::sqrt(n2);
          if (nrm < T(1e-30)) continue;  // derivative vanishes at the origin
          T f = nrm / (T(1) + n2);
          T fp = (T(1) - n2) / (T(2) * nrm * (T(1) + n2) * (T(1) + n2));
          T gs = dot(gy, s, d);
          for (int64_t k = 0; k < d; ++k) {
            gx[rw * d + k] += f * gy[k] + T(2) * fp * gs * s[k];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> shared_linear(const Tensor<T>& poses, const Tensor<T>& w,
                        const Tensor<T>& b, Tape<T>* tape) {
  if (poses.ndim() != 2 || w.numel() != poses.dim(1) || b.numel() != 1) {
    throw ShapeError("shared_linear: poses " + shape_str(poses.shape()) +
                     " vs weight " + shape_str(w.shape()));
  }
  int64_t n = poses.dim(0), d = poses.dim(1);
  bool rg = poses.requires_grad() || w.requires_grad() || b.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({n}, rg);
  const T* pp = poses.data();
  const T* pw = w.data();
  T bv = b.data()[0];
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = dot(pp + i * d, pw, d) + bv;
  if (recording(tape, rg)) {
    auto sp = poses.storage(), sw = w.storage(), sb = b.storage(),
         so = out.storage();
    tape->record(so, [sp, sw, sb, so, n, d] {
      const T* g = so->grad.data();
      const T* pp2 = sp->data.data();
      const T* pw2 = sw->data.data();
      T* gp = accum(sp);
      T* gw = accum(sw);
      T* gb = accum(sb);
      for (int64_t i = 0; i < n; ++i) {
        if (gp) axpy(g[i], pw2, gp + i * d, d);
        if (gw) axpy(g[i], pp2 + i * d, gw, d);
        if (gb) gb[0] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> chw_to_capsule_grid(const Tensor<T>& x, int64_t types, int64_t d,
                              Tape<T>* tape) {
  if (x.ndim() != 3 || x.dim(0) != types * d) {
    throw ConfigError("chw_to_capsule_grid: " + std::to_string(x.dim(0)) +
                      " channels do not split into " + std::to_string(types) +
                      " capsules of dim " + std::to_string(d));
  }
  int64_t h = x.dim(1), w = x.dim(2);
  bool rg = x.requires_grad();
  Tensor<T> out = Tensor<T>::zeros({h, w, types, d}, rg);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t t = 0; t < types; ++t) {
    for (int64_t k = 0; k < d; ++k) {
      const T* src = px + (t * d + k) * h * w;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
          po[((y * w + xx) * types + t) * d + k] = src[y * w + xx];
        }
      }
    }
  }
  if (recording(tape, rg)) {
    auto sx = x.storage(), so = out.storage();
    tape->record(so, [sx, so, types, d, h, w] {
      const T* g = so->grad.data();
      if (T* gx = accum(sx)) {
        for (int64_t t = 0; t < types; ++t) {
          for (int64_t k = 0; k < d; ++k) {
            T* dst = gx + (t * d + k) * h * w;
            for (int64_t y = 0; y < h; ++y) {
              for (int64_t xx = 0; xx < w; ++xx) {
                dst[y * w + xx] += g[((y * w + xx) * types + t) * d + k];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

#define INSTANTIATE_OPS(T)                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&, Tape<T>*);       \
  template Tensor<T> scale(const Tensor<T>&, T, Tape<T>*);                    \
  template Tensor<T> relu(const Tensor<T>&, Tape<T>*);                        \
  template Tensor<T> sigmoid(const Tensor<T>&, Tape<T>*);                     \
  template Tensor<T> sum(const Tensor<T>&, Tape<T>*);                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Tape<T>*);    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,               \
                            const Tensor<T>&, int, int, Tape<T>*);            \
  template Tensor<T> softmax(const Tensor<T>&, int, Tape<T>*);                \
  template Tensor<T> layer_norm(const Tensor<T>&, int, T, const Tensor<T>&,   \
                                const Tensor<T>&, Tape<T>*);                  \
  template Tensor<T> multiclass_ce(const Tensor<T>&, int64_t, Tape<T>*);      \
  template Tensor<T> binary_ce(const Tensor<T>&, const Tensor<T>&, Tape<T>*); \
  template Tensor<T> capsule_votes(const Tensor<T>&, const Tensor<T>&,        \
                                   PoseStructure, Tape<T>*);                  \
  template Tensor<T> capsule_agreements(const Tensor<T>&, const Tensor<T>&,   \
                                        Tape<T>*);                            \
  template Tensor<T> capsule_weighted_sum(const Tensor<T>&, const Tensor<T>&, \
                                          Tape<T>*);                          \
  template Tensor<T> unfold_capsules(const Tensor<T>&, int, int, Tape<T>*);   \
  template Tensor<T> squash(const Tensor<T>&, Tape<T>*);                      \
  template Tensor<T> shared_linear(const Tensor<T>&, const Tensor<T>&,        \
                                   const Tensor<T>&, Tape<T>*);               \
  template Tensor<T> chw_to_capsule_grid(const Tensor<T>&, int64_t, int64_t,  \
                                         Tape<T>*);

INSTANTIATE_OPS(float)
INSTANTIATE_OPS(double)

#undef INSTANTIATE_OPS

}  // namespace capsnet
