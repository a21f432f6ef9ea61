#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "rsmn/rng.hpp"
#include "rsmn/tensor.hpp"

namespace rsmn::ops {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;

enum class EwKind { kAdd, kSub, kHadamard };
enum class Act { kRelu, kSigmoid, kTanh };

namespace detail {

template <typename T>
inline bool bias_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  return a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1);
}

// Reduces a full NCHW gradient to a per-channel vector.
template <typename T>
inline void reduce_channels(const Tensor<T>& full_grad_src, AlignedVec<T>& out,
                            const Shape& s) {
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  const T* g = full_grad_src.ptr();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      T acc = T(0);
      const T* row = g + (int64_t(in) * c + ic) * hw;
      for (int i = 0; i < hw; ++i) acc += row[i];
      out[size_t(ic)] += acc;
    }
}

}  // namespace detail

template <typename T>
Tensor<T> ew_binary(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
  const bool bcast = detail::bias_broadcast(a, b);
  if (!bcast && a.shape() != b.shape())
    throw ShapeError("ew_binary shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  const int64_t n = a.numel();
  auto bval = [&](int64_t i) -> T {
    if (!bcast) return pb[i];
    const int64_t hw = a.dim(2) * int64_t(a.dim(3));
    return pb[(i / hw) % a.dim(1)];
  };
  switch (kind) {
    case EwKind::kAdd:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + bval(i);
      break;
    case EwKind::kSub:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - bval(i);
      break;
    case EwKind::kHadamard:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * bval(i);
      break;
  }
  check_finite(out, "ew_binary");
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, kind, bcast]() mutable {
      const AlignedVec<T>& g = oc.grad();
      const int64_t n = oc.numel();
      const int64_t hw = bcast ? oc.dim(2) * int64_t(oc.dim(3)) : 0;
      auto bidx = [&](int64_t i) { return bcast ? (i / hw) % oc.dim(1) : i; };
      if (ac.requires_grad()) {
        AlignedVec<T>& ga = ac.grad();
        switch (kind) {
          case EwKind::kAdd:
          case EwKind::kSub:
            for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
            break;
          case EwKind::kHadamard: {
            const T* pb = bc.ptr();
            for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * pb[bidx(i)];
            break;
          }
        }
      }
      if (bc.requires_grad()) {
        AlignedVec<T>& gb = bc.grad();
        const T* pa = ac.ptr();
        switch (kind) {
          case EwKind::kAdd:
            for (int64_t i = 0; i < n; ++i) gb[size_t(bidx(i))] += g[size_t(i)];
            break;
          case EwKind::kSub:
            for (int64_t i = 0; i < n; ++i) gb[size_t(bidx(i))] -= g[size_t(i)];
            break;
          case EwKind::kHadamard:
            for (int64_t i = 0; i < n; ++i) gb[size_t(bidx(i))] += g[size_t(i)] * pa[i];
            break;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary(t, a, b, EwKind::kAdd);
}
template <typename T>
Tensor<T> sub(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary(t, a, b, EwKind::kSub);
}
template <typename T>
Tensor<T> hadamard(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary(t, a, b, EwKind::kHadamard);
}

namespace detail {

// input (C,H,W) -> col (C*Kh*Kw, Ho*Wo), zero padded.
template <typename T>
void im2col(const T* in, int c, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, T* col) {
  for (int ic = 0; ic < c; ++ic)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (int64_t(ic) * kh * kw + ky * kw + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) row[oy * wo + ox] = T(0);
            continue;
          }
          const T* src = in + (int64_t(ic) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, T* out) {
  for (int ic = 0; ic < c; ++ic)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (int64_t(ic) * kh * kw + ky * kw + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = out + (int64_t(ic) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation convolution, NCHW input, OIKhKw kernel, optional per-output
// channel bias. Implemented as im2col + GEMM; the column buffers are kept for
// the backward pass.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride, int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw ShapeError("conv2d expects NCHW input and OIKhKw kernel");
  if (stride < 1) throw ArgumentError("conv2d stride must be positive");
  if (padding < 0) throw ArgumentError("conv2d padding must be nonnegative");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int o = kernel.dim(0), ki = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (ki != c)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(c) +
                     ", kernel expects " + std::to_string(ki));
  const int ho = (h + 2 * padding - kh) / stride + 1;
  const int wo = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || ho < 1 || wo < 1)
    throw ShapeError("conv2d output extent is non-positive");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o))
    throw ShapeError("conv2d bias must be a length-O vector");

  const int ckk = c * kh * kw, owo = ho * wo;
  Tensor<T> out(Shape{n, o, ho, wo});
  auto cols = std::make_shared<std::vector<AlignedVec<T>>>(size_t(n));
  CMatMap<T> wmat(kernel.ptr(), o, ckk);
  for (int in = 0; in < n; ++in) {
    auto& col = (*cols)[size_t(in)];
    col.resize(size_t(ckk) * owo);
    detail::im2col(input.ptr() + int64_t(in) * c * h * w, c, h, w, kh, kw, stride,
                   padding, ho, wo, col.data());
    MatMap<T> om(out.ptr() + int64_t(in) * o * owo, o, owo);
    CMatMap<T> cm(col.data(), ckk, owo);
    om.noalias() = wmat * cm;
    if (bias.defined())
      for (int io = 0; io < o; ++io) om.row(io).array() += bias.ptr()[io];
  }
  check_finite(out, "conv2d");

  const bool need = tape.recording() && (input.requires_grad() || kernel.requires_grad() ||
                                         (bias.defined() && bias.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    Tensor<T> ic = input, kc = kernel, bc = bias, oc = out;
    tape.record([ic, kc, bc, oc, cols, stride, padding]() mutable {
      const int n = ic.dim(0), c = ic.dim(1), h = ic.dim(2), w = ic.dim(3);
      const int o = kc.dim(0), kh = kc.dim(2), kw = kc.dim(3);
      const int ho = oc.dim(2), wo = oc.dim(3);
      const int ckk = c * kh * kw, owo = ho * wo;
      AlignedVec<T> dcol;
      for (int in = 0; in < n; ++in) {
        CMatMap<T> gm(oc.grad().data() + int64_t(in) * o * owo, o, owo);
        if (kc.requires_grad()) {
          MatMap<T> dw(kc.grad().data(), o, ckk);
          CMatMap<T> cm((*cols)[size_t(in)].data(), ckk, owo);
          dw.noalias() += gm * cm.transpose();
        }
        if (bc.defined() && bc.requires_grad())
          for (int io = 0; io < o; ++io) bc.grad()[size_t(io)] += gm.row(io).sum();
        if (ic.requires_grad()) {
          dcol.resize(size_t(ckk) * owo);
          MatMap<T> dcm(dcol.data(), ckk, owo);
          CMatMap<T> wmat(kc.ptr(), o, ckk);
          dcm.noalias() = wmat.transpose() * gm;
          detail::col2im_acc(dcol.data(), c, h, w, kh, kw, stride, padding, ho, wo,
                             ic.grad().data() + int64_t(in) * c * h * w);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(Tape<T>& tape, const Tensor<T>& input, int k, int stride) {
  if (input.rank() != 4) throw ShapeError("avg_pool2d expects NCHW input");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (k > h || k > w)
    throw ShapeError("avg_pool2d window " + std::to_string(k) + " larger than input " +
                     shape_str(input.shape()));
  const int ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  Tensor<T> out(Shape{n, c, ho, wo});
  const T inv = T(1) / T(k * k);
  const T* pi = input.ptr();
  T* po = out.ptr();
  for (int nc = 0; nc < n * c; ++nc) {
    const T* plane = pi + int64_t(nc) * h * w;
    T* oplane = po + int64_t(nc) * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            acc += plane[(oy * stride + ky) * w + ox * stride + kx];
        oplane[oy * wo + ox] = acc * inv;
      }
  }
  check_finite(out, "avg_pool2d");
  if (tape.recording() && input.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> icl = input, ocl = out;
    tape.record([icl, ocl, k, stride]() mutable {
      const int n = icl.dim(0), c = icl.dim(1), h = icl.dim(2), w = icl.dim(3);
      const int ho = ocl.dim(2), wo = ocl.dim(3);
      const T inv = T(1) / T(k * k);
      for (int nc = 0; nc < n * c; ++nc) {
        T* gplane = icl.grad().data() + int64_t(nc) * h * w;
        const T* go = ocl.grad().data() + int64_t(nc) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const T g = go[oy * wo + ox] * inv;
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx)
                gplane[(oy * stride + ky) * w + ox * stride + kx] += g;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& input, Act kind) {
  Tensor<T> out(input.shape());
  const T* pi = input.ptr();
  T* po = out.ptr();
  const int64_t n = input.numel();
  switch (kind) {
    case Act::kRelu:
      for (int64_t i = 0; i < n; ++i) po[i] = pi[i] > T(0) ? pi[i] : T(0);
      break;
    case Act::kSigmoid:
      for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-pi[i]));
      break;
    case Act::kTanh:
      for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pi[i]);
      break;
  }
  check_finite(out, "activation");
  if (tape.recording() && input.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> icl = input, ocl = out;
    tape.record([icl, ocl, kind]() mutable {
      const AlignedVec<T>& g = ocl.grad();
      const T* y = ocl.ptr();
      AlignedVec<T>& gi = icl.grad();
      const int64_t n = ocl.numel();
      switch (kind) {
        case Act::kRelu:
          for (int64_t i = 0; i < n; ++i)
            if (y[i] > T(0)) gi[size_t(i)] += g[size_t(i)];
          break;
        case Act::kSigmoid:
          for (int64_t i = 0; i < n; ++i) gi[size_t(i)] += g[size_t(i)] * y[i] * (T(1) - y[i]);
          break;
        case Act::kTanh:
          for (int64_t i = 0; i < n; ++i) gi[size_t(i)] += g[size_t(i)] * (T(1) - y[i] * y[i]);
          break;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& t, const Tensor<T>& x) { return activation(t, x, Act::kRelu); }
template <typename T>
Tensor<T> sigmoid(Tape<T>& t, const Tensor<T>& x) { return activation(t, x, Act::kSigmoid); }
template <typename T>
Tensor<T> tanh_op(Tape<T>& t, const Tensor<T>& x) { return activation(t, x, Act::kTanh); }

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels batch/spatial mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  for (int in = 0; in < n; ++in) {
    std::copy_n(a.ptr() + int64_t(in) * ca * hw, size_t(ca) * hw,
                out.ptr() + int64_t(in) * (ca + cb) * hw);
    std::copy_n(b.ptr() + int64_t(in) * cb * hw, size_t(cb) * hw,
                out.ptr() + (int64_t(in) * (ca + cb) + ca) * hw);
  }
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> acl = a, bcl = b, ocl = out;
    tape.record([acl, bcl, ocl]() mutable {
      const int n = acl.dim(0), ca = acl.dim(1), cb = bcl.dim(1);
      const int hw = acl.dim(2) * acl.dim(3);
      for (int in = 0; in < n; ++in) {
        const T* g = ocl.grad().data() + int64_t(in) * (ca + cb) * hw;
        if (acl.requires_grad()) {
          T* ga = acl.grad().data() + int64_t(in) * ca * hw;
          for (int i = 0; i < ca * hw; ++i) ga[i] += g[i];
        }
        if (bcl.requires_grad()) {
          T* gb = bcl.grad().data() + int64_t(in) * cb * hw;
          for (int i = 0; i < cb * hw; ++i) gb[i] += g[ca * hw + i];
        }
      }
    });
  }
  return out;
}

// Channels [c0, c1) of an NCHW tensor.
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, int c0, int c1) {
  if (x.rank() != 4 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeError("slice_channels bad range");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), cs = c1 - c0;
  Tensor<T> out(Shape{n, cs, x.dim(2), x.dim(3)});
  for (int in = 0; in < n; ++in)
    std::copy_n(x.ptr() + (int64_t(in) * c + c0) * hw, size_t(cs) * hw,
                out.ptr() + int64_t(in) * cs * hw);
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl, c0]() mutable {
      const int n = xcl.dim(0), c = xcl.dim(1), hw = xcl.dim(2) * xcl.dim(3);
      const int cs = ocl.dim(1);
      for (int in = 0; in < n; ++in) {
        T* gx = xcl.grad().data() + (int64_t(in) * c + c0) * hw;
        const T* go = ocl.grad().data() + int64_t(in) * cs * hw;
        for (int i = 0; i < cs * hw; ++i) gx[i] += go[i];
      }
    });
  }
  return out;
}

// Batch norm over NCHW. Train mode normalizes with batch statistics, updates
// the running buffers in place, and backpropagates through mean and variance.
// Eval mode uses the running buffers.
template <typename T>
Tensor<T> batch_norm2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool train, double momentum, double eps) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d expects NCHW input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("batch_norm2d gamma/beta must have C elements");
  if (!running_mean.defined() || !running_var.defined() || running_mean.numel() != c ||
      running_var.numel() != c)
    throw StateError("batch_norm2d running statistics are not populated");
  const int64_t m = int64_t(n) * h * w;
  if (train && m < 2) throw ShapeError("batch_norm2d train mode needs N*H*W >= 2");

  auto mean = std::make_shared<AlignedVec<T>>(size_t(c));
  auto var = std::make_shared<AlignedVec<T>>(size_t(c));
  if (train) {
    for (int ic = 0; ic < c; ++ic) {
      double acc = 0;
      for (int in = 0; in < n; ++in) {
        const T* p = x.ptr() + (int64_t(in) * c + ic) * h * w;
        for (int i = 0; i < h * w; ++i) acc += double(p[i]);
      }
      const double mu = acc / double(m);
      double vacc = 0;
      for (int in = 0; in < n; ++in) {
        const T* p = x.ptr() + (int64_t(in) * c + ic) * h * w;
        for (int i = 0; i < h * w; ++i) {
          const double d = double(p[i]) - mu;
          vacc += d * d;
        }
      }
      (*mean)[size_t(ic)] = T(mu);
      (*var)[size_t(ic)] = T(vacc / double(m));
      running_mean.data()[size_t(ic)] =
          T((1.0 - momentum) * double(running_mean.ptr()[ic]) + momentum * mu);
      running_var.data()[size_t(ic)] =
          T((1.0 - momentum) * double(running_var.ptr()[ic]) + momentum * vacc / double(m));
    }
  } else {
    *mean = running_mean.data();
    *var = running_var.data();
  }

  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<AlignedVec<T>>(x.data().size());
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const T* p = x.ptr() + (int64_t(in) * c + ic) * h * w;
      T* po = out.ptr() + (int64_t(in) * c + ic) * h * w;
      T* ph = xhat->data() + (int64_t(in) * c + ic) * h * w;
      const T istd = T(1.0 / std::sqrt(double((*var)[size_t(ic)]) + eps));
      const T mu = (*mean)[size_t(ic)];
      const T g = gamma.ptr()[ic], b = beta.ptr()[ic];
      for (int i = 0; i < h * w; ++i) {
        ph[i] = (p[i] - mu) * istd;
        po[i] = g * ph[i] + b;
      }
    }
  check_finite(out, "batch_norm2d");

  if (tape.recording() &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, gcl = gamma, bcl = beta, ocl = out;
    tape.record([xcl, gcl, bcl, ocl, xhat, var, train, eps]() mutable {
      const int n = xcl.dim(0), c = xcl.dim(1), hw = xcl.dim(2) * xcl.dim(3);
      const int64_t m = int64_t(n) * hw;
      for (int ic = 0; ic < c; ++ic) {
        const T istd = T(1.0 / std::sqrt(double((*var)[size_t(ic)]) + eps));
        double sum_g = 0, sum_gx = 0;
        for (int in = 0; in < n; ++in) {
          const T* go = ocl.grad().data() + (int64_t(in) * c + ic) * hw;
          const T* xh = xhat->data() + (int64_t(in) * c + ic) * hw;
          for (int i = 0; i < hw; ++i) {
            sum_g += double(go[i]);
            sum_gx += double(go[i]) * double(xh[i]);
          }
        }
        if (gcl.requires_grad()) gcl.grad()[size_t(ic)] += T(sum_gx);
        if (bcl.requires_grad()) bcl.grad()[size_t(ic)] += T(sum_g);
        if (xcl.requires_grad()) {
          const T g = gcl.ptr()[ic];
          for (int in = 0; in < n; ++in) {
            const T* go = ocl.grad().data() + (int64_t(in) * c + ic) * hw;
            const T* xh = xhat->data() + (int64_t(in) * c + ic) * hw;
            T* gx = xcl.grad().data() + (int64_t(in) * c + ic) * hw;
            if (train) {
              for (int i = 0; i < hw; ++i)
                gx[i] += g * istd *
                         (go[i] - T(sum_g / double(m)) - xh[i] * T(sum_gx / double(m)));
            } else {
              for (int i = 0; i < hw; ++i) gx[i] += g * istd * go[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// Inverted dropout: train mode zeroes with probability p and scales survivors
// by 1/(1-p); eval mode is the identity.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout probability must be in [0, 1)");
  if (!train || p == 0.0) return x;
  Tensor<T> out(x.shape());
  auto mask = std::make_shared<std::vector<uint8_t>>(x.data().size());
  const T scale = T(1.0 / (1.0 - p));
  for (int64_t i = 0; i < x.numel(); ++i) {
    const bool keep = rng.uniform() >= p;
    (*mask)[size_t(i)] = keep;
    out.ptr()[i] = keep ? x.ptr()[i] * scale : T(0);
  }
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl, mask, scale]() mutable {
      for (int64_t i = 0; i < xcl.numel(); ++i)
        if ((*mask)[size_t(i)]) xcl.grad()[size_t(i)] += ocl.grad()[size_t(i)] * scale;
    });
  }
  return out;
}

// input (N,F) * W (F,G) + b (G)
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0))
    throw ShapeError("affine shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(weight.shape()));
  const int n = x.dim(0), f = x.dim(1), g = weight.dim(1);
  if (bias.defined() && bias.numel() != g) throw ShapeError("affine bias must have G elements");
  Tensor<T> out(Shape{n, g});
  CMatMap<T> xm(x.ptr(), n, f), wm(weight.ptr(), f, g);
  MatMap<T> om(out.ptr(), n, g);
  om.noalias() = xm * wm;
  if (bias.defined())
    for (int in = 0; in < n; ++in)
      for (int j = 0; j < g; ++j) out.ptr()[in * g + j] += bias.ptr()[j];
  check_finite(out, "affine");
  const bool need = tape.recording() && (x.requires_grad() || weight.requires_grad() ||
                                         (bias.defined() && bias.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, wcl = weight, bcl = bias, ocl = out;
    tape.record([xcl, wcl, bcl, ocl]() mutable {
      const int n = xcl.dim(0), f = xcl.dim(1), g = wcl.dim(1);
      CMatMap<T> gm(ocl.grad().data(), n, g);
      if (xcl.requires_grad()) {
        MatMap<T> gx(xcl.grad().data(), n, f);
        CMatMap<T> wm(wcl.ptr(), f, g);
        gx.noalias() += gm * wm.transpose();
      }
      if (wcl.requires_grad()) {
        MatMap<T> gw(wcl.grad().data(), f, g);
        CMatMap<T> xm(xcl.ptr(), n, f);
        gw.noalias() += xm.transpose() * gm;
      }
      if (bcl.defined() && bcl.requires_grad())
        for (int j = 0; j < g; ++j) bcl.grad()[size_t(j)] += gm.col(j).sum();
    });
  }
  return out;
}

// 2-d or batched 3-d matrix product.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3))
    throw ShapeError("matmul expects matching rank-2 or rank-3 operands");
  const int batch = a.rank() == 3 ? a.dim(0) : 1;
  if (a.rank() == 3 && b.dim(0) != batch) throw ShapeError("matmul batch mismatch");
  const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const int k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2)
    throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Shape os = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(os);
  for (int ib = 0; ib < batch; ++ib) {
    CMatMap<T> am(a.ptr() + int64_t(ib) * m * k, m, k);
    CMatMap<T> bm(b.ptr() + int64_t(ib) * k * n, k, n);
    MatMap<T> om(out.ptr() + int64_t(ib) * m * n, m, n);
    om.noalias() = am * bm;
  }
  check_finite(out, "matmul");
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> acl = a, bcl = b, ocl = out;
    tape.record([acl, bcl, ocl, batch, m, k, n]() mutable {
      for (int ib = 0; ib < batch; ++ib) {
        CMatMap<T> gm(ocl.grad().data() + int64_t(ib) * m * n, m, n);
        if (acl.requires_grad()) {
          MatMap<T> ga(acl.grad().data() + int64_t(ib) * m * k, m, k);
          CMatMap<T> bm(bcl.ptr() + int64_t(ib) * k * n, k, n);
          ga.noalias() += gm * bm.transpose();
        }
        if (bcl.requires_grad()) {
          MatMap<T> gb(bcl.grad().data() + int64_t(ib) * k * n, k, n);
          CMatMap<T> am(acl.ptr() + int64_t(ib) * m * k, m, k);
          gb.noalias() += am.transpose() * gm;
        }
      }
    });
  }
  return out;
}

// Swap the trailing two dims of a rank-2/3 tensor.
template <typename T>
Tensor<T> transpose2(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("transpose2 expects rank 2 or 3");
  const int batch = x.rank() == 3 ? x.dim(0) : 1;
  const int m = x.dim(x.rank() - 2), n = x.dim(x.rank() - 1);
  Shape os = x.rank() == 3 ? Shape{batch, n, m} : Shape{n, m};
  Tensor<T> out(os);
  for (int ib = 0; ib < batch; ++ib)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out.ptr()[(int64_t(ib) * n + j) * m + i] = x.ptr()[(int64_t(ib) * m + i) * n + j];
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl, batch, m, n]() mutable {
      for (int ib = 0; ib < batch; ++ib)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            xcl.grad()[size_t((int64_t(ib) * m + i) * n + j)] +=
                ocl.grad()[size_t((int64_t(ib) * n + j) * m + i)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape element count mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(shape));
  Tensor<T> out(shape, x.data());
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl]() mutable {
      for (int64_t i = 0; i < xcl.numel(); ++i)
        xcl.grad()[size_t(i)] += ocl.grad()[size_t(i)];
    });
  }
  return out;
}

// Max-subtracted softmax along the given axis (negative counts from the end).
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ArgumentError("softmax axis out of range");
  const int len = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  Tensor<T> out(x.shape());
  for (int64_t io = 0; io < outer; ++io)
    for (int64_t ii = 0; ii < inner; ++ii) {
      const T* px = x.ptr() + io * len * inner + ii;
      T* po = out.ptr() + io * len * inner + ii;
      T mx = px[0];
      for (int i = 1; i < len; ++i) mx = std::max(mx, px[int64_t(i) * inner]);
      double sum = 0;
      for (int i = 0; i < len; ++i) sum += std::exp(double(px[int64_t(i) * inner] - mx));
      for (int i = 0; i < len; ++i)
        po[int64_t(i) * inner] = T(std::exp(double(px[int64_t(i) * inner] - mx)) / sum);
    }
  check_finite(out, "softmax");
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl, len, inner, outer]() mutable {
      for (int64_t io = 0; io < outer; ++io)
        for (int64_t ii = 0; ii < inner; ++ii) {
          const T* y = ocl.ptr() + io * len * inner + ii;
          const T* g = ocl.grad().data() + io * len * inner + ii;
          T* gx = xcl.grad().data() + io * len * inner + ii;
          double dot = 0;
          for (int i = 0; i < len; ++i)
            dot += double(g[int64_t(i) * inner]) * double(y[int64_t(i) * inner]);
          for (int i = 0; i < len; ++i)
            gx[int64_t(i) * inner] +=
                y[int64_t(i) * inner] * (g[int64_t(i) * inner] - T(dot));
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += double(v);
  Tensor<T> out = Tensor<T>::scalar(T(acc));
  check_finite(out, "sum_all");
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl]() mutable {
      const T g = ocl.grad()[0];
      for (auto& gv : xcl.grad()) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.ptr()[i] = x.ptr()[i] * c;
  check_finite(out, "scale");
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> xcl = x, ocl = out;
    tape.record([xcl, ocl, c]() mutable {
      for (int64_t i = 0; i < xcl.numel(); ++i)
        xcl.grad()[size_t(i)] += ocl.grad()[size_t(i)] * c;
    });
  }
  return out;
}

// Central-difference gradient oracle, computed in double precision.
inline Tensor<double> finite_diff_grad(
    const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
    double h) {
  if (h <= 0) throw ArgumentError("finite_diff_grad requires h > 0");
  Tensor<double> g(x.shape());
  Tensor<double> probe = x.clone();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = probe.ptr()[i];
    probe.ptr()[i] = v + h;
    const double fp = f(probe);
    probe.ptr()[i] = v - h;
    const double fm = f(probe);
    probe.ptr()[i] = v;
    g.ptr()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace rsmn::ops
