#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lstsr/error.hpp"
#include "lstsr/tensor.hpp"

namespace lstsr::ad {

/// Convolution back end. Both produce the same cross-correlation; `gemm`
/// lowers to im2col + matrix products, `direct` is the reference loop nest.
enum class ConvAlgo { direct, gemm };

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <class T>
std::vector<T>* grad_sink(Node<T>& n) {
  return n.requires_grad ? &n.ensure_grad() : nullptr;
}

// Fixed 16-lane reductions: the summation order depends only on n, never on
// where the buffer happens to be aligned.
template <class T, class F>
double lane_sum(std::size_t n, F term) {
  constexpr std::size_t L = 16;
  T acc[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t l = 0; l < L; ++l) acc[l] += term(i + l);
  T tail = T(0);
  for (; i < n; ++i) tail += term(i);
  double s = 0.0;
  for (std::size_t l = 0; l < L; ++l) s += static_cast<double>(acc[l]);
  return s + static_cast<double>(tail);
}

// Geometry of a k x k sliding window over a C x H x W image.
struct Window {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t k_off,
                                                      std::size_t stride, std::size_t pad) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + k_off < pad) ++lo;
  std::size_t hi = out;
  while (hi > lo && (hi - 1) * stride + k_off - pad >= in) --hi;
  return {lo, hi};
}

// Columns for output rows [oy0, oy1); col is rows() x ((oy1 - oy0) * out_w).
template <class T>
void im2col(const T* img, const Window& g, T* col, std::size_t oy0, std::size_t oy1) {
  const std::size_t P = (oy1 - oy0) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      auto [ylo, yhi] = valid_span(g.out_h, g.height, ky, g.stride, g.pad);
      ylo = std::clamp(ylo, oy0, oy1);
      yhi = std::clamp(yhi, ylo, oy1);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_span(g.out_w, g.width, kx, g.stride, g.pad);
        T* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * P - oy0 * g.out_w;
        std::fill(dst + oy0 * g.out_w, dst + ylo * g.out_w, T(0));
        std::fill(dst + yhi * g.out_w, dst + oy1 * g.out_w, T(0));
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const T* src = img + (c * g.height + oy * g.stride + ky - g.pad) * g.width + kx - g.pad;
          T* row = dst + oy * g.out_w;
          std::fill(row, row + xlo, T(0));
          std::fill(row + xhi, row + g.out_w, T(0));
          if (g.stride == 1) {
            std::copy(src + xlo, src + xhi, row + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) row[ox] = src[ox * g.stride];
          }
        }
      }
    }
}

template <class T>
void col2im_add(const T* col, const Window& g, T* img, std::size_t oy0, std::size_t oy1) {
  const std::size_t P = (oy1 - oy0) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      auto [ylo, yhi] = valid_span(g.out_h, g.height, ky, g.stride, g.pad);
      ylo = std::clamp(ylo, oy0, oy1);
      yhi = std::clamp(yhi, ylo, oy1);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_span(g.out_w, g.width, kx, g.stride, g.pad);
        const T* src = col + ((c * g.kernel + ky) * g.kernel + kx) * P - oy0 * g.out_w;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* dst = img + (c * g.height + oy * g.stride + ky - g.pad) * g.width + kx - g.pad;
          const T* row = src + oy * g.out_w;
          if (g.stride == 1) {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] += row[ox];
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride] += row[ox];
          }
        }
      }
    }
}

inline bool is_pointwise(const Window& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

// Output rows per im2col block, sized so one block stays cache resident.
template <class T>
std::size_t block_rows(const Window& g) {
  constexpr std::size_t budget = (256u << 10) / sizeof(T);
  const std::size_t per_row = g.rows() * g.out_w;
  const std::size_t min_rows = (256 + g.out_w - 1) / g.out_w;
  return std::clamp<std::size_t>(std::max(budget / std::max<std::size_t>(per_row, 1), min_rows), 1, g.out_h);
}

template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

// Stride-1 windows expand only along kx: row (c, kx) of `buf` holds padded
// input rows [oy0, oy1 + k - 1) shifted by kx, so tap row ky is a column
// offset of ky * out_w into the same buffer.
template <class T>
void shifted_rows(const T* img, const Window& g, T* buf, std::size_t oy0, std::size_t oy1) {
  const std::size_t R = oy1 - oy0 + g.kernel - 1, Wo = g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
      const auto [xlo, xhi] = valid_span(Wo, g.width, kx, 1, g.pad);
      T* dst = buf + (c * g.kernel + kx) * R * Wo;
      for (std::size_t r = 0; r < R; ++r) {
        T* row = dst + r * Wo;
        const std::size_t y = oy0 + r;
        if (y < g.pad || y - g.pad >= g.height) {
          std::fill(row, row + Wo, T(0));
          continue;
        }
        const T* src = img + (c * g.height + y - g.pad) * g.width + kx - g.pad;
        std::fill(row, row + xlo, T(0));
        std::copy(src + xlo, src + xhi, row + xlo);
        std::fill(row + xhi, row + Wo, T(0));
      }
    }
}

template <class T>
std::size_t shifted_block_rows(const Window& g) {
  constexpr std::size_t budget = (256u << 10) / sizeof(T);
  const std::size_t per_row = g.channels * g.kernel * g.out_w;
  const std::size_t min_rows = (256 + g.out_w - 1) / g.out_w;
  return std::clamp<std::size_t>(std::max(budget / std::max<std::size_t>(per_row, 1), min_rows), 1, g.out_h);
}

// (Cout, C, k, k) weights as k matrices of shape Cout x (C * k), one per ky.
template <class T>
std::vector<T> split_taps(const T* w, std::size_t Cout, const Window& g) {
  const std::size_t k = g.kernel, Ck = g.channels * k;
  std::vector<T> out(k * Cout * Ck);
  for (std::size_t co = 0; co < Cout; ++co)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx)
          out[(ky * Cout + co) * Ck + c * k + kx] = w[((co * g.channels + c) * k + ky) * k + kx];
  return out;
}

// Stride-1 correlation of one image: planes of `out` are `plane` apart.
template <class T>
void conv_shifted(const T* img, const Window& g, const T* taps, std::size_t Cout, T* out, std::size_t plane,
                  bool accumulate, std::vector<T>& buf) {
  const std::size_t k = g.kernel, Ck = g.channels * k, Wo = g.out_w;
  const std::size_t rows = shifted_block_rows<T>(g);
  buf.resize(Ck * (rows + k - 1) * Wo);
  for (std::size_t oy0 = 0; oy0 < g.out_h; oy0 += rows) {
    const std::size_t oy1 = std::min(oy0 + rows, g.out_h), Pc = (oy1 - oy0) * Wo, R = oy1 - oy0 + k - 1;
    shifted_rows(img, g, buf.data(), oy0, oy1);
    StridedMap<T> ym(out + oy0 * Wo, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(Pc),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
    for (std::size_t ky = 0; ky < k; ++ky) {
      ConstMatMap<T> wm(taps + ky * Cout * Ck, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(Ck));
      ConstStridedMap<T> xm(buf.data() + ky * Wo, static_cast<Eigen::Index>(Ck), static_cast<Eigen::Index>(Pc),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(R * Wo)));
      if (ky == 0 && !accumulate)
        ym.noalias() = wm * xm;
      else
        ym.noalias() += wm * xm;
    }
  }
}

}  // namespace detail

/// 2D cross-correlation. weight is (Cout, Cin, k, k), bias is (1, Cout, 1, 1).
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding, ConvAlgo algo = ConvAlgo::gemm) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (ws.c != xs.c) throw ShapeError("conv2d: weight expects " + std::to_string(ws.c) +
                                     " input channels, got " + std::to_string(xs.c));
  if (ws.h != ws.w) throw ShapeError("conv2d: only square kernels are supported");
  if (bias.numel() != ws.n) throw ShapeError("conv2d: bias length must equal output channels");
  const std::size_t k = ws.h, s = static_cast<std::size_t>(stride), p = static_cast<std::size_t>(padding);
  if (xs.h + 2 * p < k || xs.w + 2 * p < k) throw ShapeError("conv2d: kernel larger than padded input");

  detail::Window g{xs.c, xs.h, xs.w, k, s, p, (xs.h + 2 * p - k) / s + 1, (xs.w + 2 * p - k) / s + 1};
  const std::size_t Cout = ws.n, K = g.rows(), P = g.cols(), N = xs.n;
  const Shape os{N, Cout, g.out_h, g.out_w};
  std::vector<T> out(os.numel());
  const T* X = x.data().data();
  const T* Wt = weight.data().data();
  const T* B = bias.data().data();

  if (algo == ConvAlgo::gemm) {
    detail::ConstMatMap<T> wm(Wt, Cout, K);
    if (detail::is_pointwise(g)) {
      for (std::size_t n = 0; n < N; ++n) {
        detail::MatMap<T> ym(out.data() + n * Cout * P, Cout, P);
        ym.noalias() = wm * detail::ConstMatMap<T>(X + n * K * P, K, P);
      }
    } else if (g.stride == 1) {
      const auto taps = detail::split_taps(Wt, Cout, g);
      std::vector<T> buf;
      for (std::size_t n = 0; n < N; ++n)
        detail::conv_shifted(X + n * xs.c * xs.plane(), g, taps.data(), Cout, out.data() + n * Cout * P, P, false,
                             buf);
    } else {
      const std::size_t rows = detail::block_rows<T>(g);
      std::vector<T> col(K * rows * g.out_w);
      for (std::size_t n = 0; n < N; ++n) {
        const T* img = X + n * xs.c * xs.plane();
        for (std::size_t oy0 = 0; oy0 < g.out_h; oy0 += rows) {
          const std::size_t oy1 = std::min(oy0 + rows, g.out_h), Pc = (oy1 - oy0) * g.out_w;
          detail::im2col(img, g, col.data(), oy0, oy1);
          detail::StridedMap<T> ym(out.data() + n * Cout * P + oy0 * g.out_w, Cout, Pc,
                                   Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
          ym.noalias() = wm * detail::ConstMatMap<T>(col.data(), K, Pc);
        }
      }
    }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Cout; ++co) {
        T* row = out.data() + (n * Cout + co) * P;
        for (std::size_t i = 0; i < P; ++i) row[i] += B[co];
      }
  } else {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t oy = 0; oy < g.out_h; ++oy)
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T acc = B[co];
            for (std::size_t ci = 0; ci < xs.c; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                  if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
                  acc += Wt[((co * xs.c + ci) * k + ky) * k + kx] *
                         X[((n * xs.c + ci) * xs.h + static_cast<std::size_t>(iy)) * xs.w +
                           static_cast<std::size_t>(ix)];
                }
              }
            out[((n * Cout + co) * g.out_h + oy) * g.out_w + ox] = acc;
          }
  }

  return make_result<T>(os, std::move(out), {&x, &weight, &bias}, [g, N, Cout, algo](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    Node<T>& bn = *self.inputs[2];
    auto* dx = detail::grad_sink(xn);
    auto* dw = detail::grad_sink(wn);
    auto* db = detail::grad_sink(bn);
    const std::size_t K = g.rows(), P = g.cols(), Cin = g.channels, k = g.kernel;
    const std::size_t img_size = Cin * g.height * g.width;
    const T* dY = self.grad.data();

    if (db)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* row = dY + (n * Cout + co) * P;
          T acc = 0;
          for (std::size_t i = 0; i < P; ++i) acc += row[i];
          (*db)[co] += acc;
        }

    if (algo == ConvAlgo::gemm) {
      detail::ConstMatMap<T> wm(wn.value.data(), Cout, K);
      if (detail::is_pointwise(g)) {
        for (std::size_t n = 0; n < N; ++n) {
          detail::ConstMatMap<T> dym(dY + n * Cout * P, Cout, P);
          detail::ConstMatMap<T> xm(xn.value.data() + n * img_size, K, P);
          if (dw) detail::MatMap<T>(dw->data(), Cout, K).noalias() += dym * xm.transpose();
          if (dx) detail::MatMap<T>(dx->data() + n * img_size, K, P).noalias() += wm.transpose() * dym;
        }
        return;
      }
      const std::size_t rows = detail::block_rows<T>(g);
      // Unit stride: the input gradient is a correlation of dY with the
      // flipped, transposed kernel, which avoids the scatter in col2im.
      const bool gather = dx && g.stride == 1 && g.pad < k;
      const bool shifted = dw && g.stride == 1;
      std::vector<T> col(dw && !shifted ? K * rows * g.out_w : 0);
      std::vector<T> dcol(dx && !gather ? K * rows * g.out_w : 0);
      if (shifted) {
        const std::size_t Ck = Cin * k, Wo = g.out_w, srows = detail::shifted_block_rows<T>(g);
        std::vector<T> dtaps(k * Cout * Ck, T(0)), buf(Ck * (srows + k - 1) * Wo);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oy0 = 0; oy0 < g.out_h; oy0 += srows) {
            const std::size_t oy1 = std::min(oy0 + srows, g.out_h), Pc = (oy1 - oy0) * Wo, R = oy1 - oy0 + k - 1;
            detail::shifted_rows(xn.value.data() + n * img_size, g, buf.data(), oy0, oy1);
            detail::ConstStridedMap<T> dym(dY + n * Cout * P + oy0 * Wo, Cout, Pc,
                                           Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
            for (std::size_t ky = 0; ky < k; ++ky)
              detail::MatMap<T>(dtaps.data() + ky * Cout * Ck, Cout, Ck).noalias() +=
                  dym * detail::ConstStridedMap<T>(buf.data() + ky * Wo, Ck, Pc,
                                                   Eigen::OuterStride<>(static_cast<Eigen::Index>(R * Wo)))
                            .transpose();
          }
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t c = 0; c < Cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                (*dw)[((co * Cin + c) * k + ky) * k + kx] += dtaps[(ky * Cout + co) * Ck + c * k + kx];
      }
      for (std::size_t n = 0; n < N && (dcol.size() || col.size()); ++n) {
        const T* img = xn.value.data() + n * img_size;
        for (std::size_t oy0 = 0; oy0 < g.out_h; oy0 += rows) {
          const std::size_t oy1 = std::min(oy0 + rows, g.out_h), Pc = (oy1 - oy0) * g.out_w;
          detail::ConstStridedMap<T> dym(dY + n * Cout * P + oy0 * g.out_w, Cout, Pc,
                                         Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
          if (dw && !shifted) {
            detail::im2col(img, g, col.data(), oy0, oy1);
            detail::MatMap<T>(dw->data(), Cout, K).noalias() +=
                dym * detail::ConstMatMap<T>(col.data(), K, Pc).transpose();
          }
          if (dx && !gather) {
            detail::MatMap<T>(dcol.data(), K, Pc).noalias() = wm.transpose() * dym;
            detail::col2im_add(dcol.data(), g, dx->data() + n * img_size, oy0, oy1);
          }
        }
      }
      if (gather) {
        const std::size_t KT = Cout * k * k, Pin = g.height * g.width;
        std::vector<T> wf(Cin * KT);
        const T* Wt = wn.value.data();
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                wf[((ci * Cout + co) * k + ky) * k + kx] = Wt[((co * Cin + ci) * k + k - 1 - ky) * k + k - 1 - kx];
        detail::Window gt{Cout, g.out_h, g.out_w, k, 1, k - 1 - g.pad, g.height, g.width};
        const auto taps = detail::split_taps(wf.data(), Cin, gt);
        std::vector<T> buf;
        for (std::size_t n = 0; n < N; ++n)
          detail::conv_shifted(dY + n * Cout * P, gt, taps.data(), Cin, dx->data() + n * img_size, Pin, true, buf);
      }
      return;
    }

    const T* X = xn.value.data();
    const T* Wt = wn.value.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t oy = 0; oy < g.out_h; ++oy)
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const T gy = dY[((n * Cout + co) * g.out_h + oy) * g.out_w + ox];
            for (std::size_t ci = 0; ci < Cin; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                  if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                  const std::size_t xi = ((n * Cin + ci) * g.height + static_cast<std::size_t>(iy)) * g.width +
                                         static_cast<std::size_t>(ix);
                  const std::size_t wi = ((co * Cin + ci) * k + ky) * k + kx;
                  if (dw) (*dw)[wi] += gy * X[xi];
                  if (dx) (*dx)[xi] += gy * Wt[wi];
                }
              }
          }
  });
}

/// Transposed convolution without padding. weight is (Cin, Cout, k, k);
/// output extent is (H - 1) * stride + k.
template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, ConvAlgo algo = ConvAlgo::gemm) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  if (ws.n != xs.c) throw ShapeError("conv_transpose2d: weight expects " + std::to_string(ws.n) +
                                     " input channels, got " + std::to_string(xs.c));
  if (ws.h != ws.w) throw ShapeError("conv_transpose2d: only square kernels are supported");
  if (bias.numel() != ws.c) throw ShapeError("conv_transpose2d: bias length must equal output channels");
  const std::size_t k = ws.h, s = static_cast<std::size_t>(stride), Cin = xs.c, Cout = ws.c, N = xs.n;
  const std::size_t Ho = (xs.h - 1) * s + k, Wo = (xs.w - 1) * s + k;
  // Window over the *output* image that maps back onto the input lattice.
  detail::Window g{Cout, Ho, Wo, k, s, 0, xs.h, xs.w};
  const std::size_t KC = g.rows(), P = g.cols();
  const Shape os{N, Cout, Ho, Wo};
  std::vector<T> out(os.numel(), T(0));
  const T* X = x.data().data();
  const T* Wt = weight.data().data();
  const T* B = bias.data().data();
  const std::size_t out_plane = Ho * Wo;

  if (algo == ConvAlgo::gemm) {
    std::vector<T> col(KC * P);
    detail::ConstMatMap<T> wm(Wt, Cin, KC);
    for (std::size_t n = 0; n < N; ++n) {
      detail::MatMap<T> cm(col.data(), KC, P);
      cm.noalias() = wm.transpose() * detail::ConstMatMap<T>(X + n * Cin * P, Cin, P);
      detail::col2im_add(col.data(), g, out.data() + n * Cout * out_plane, 0, g.out_h);
    }
  } else {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t iy = 0; iy < xs.h; ++iy)
          for (std::size_t ix = 0; ix < xs.w; ++ix) {
            const T v = X[((n * Cin + ci) * xs.h + iy) * xs.w + ix];
            for (std::size_t co = 0; co < Cout; ++co)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx)
                  out[((n * Cout + co) * Ho + iy * s + ky) * Wo + ix * s + kx] +=
                      v * Wt[((ci * Cout + co) * k + ky) * k + kx];
          }
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co) {
      T* plane = out.data() + (n * Cout + co) * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) plane[i] += B[co];
    }

  return make_result<T>(os, std::move(out), {&x, &weight, &bias}, [g, N, Cin, Cout, xs, algo](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    Node<T>& bn = *self.inputs[2];
    auto* dx = detail::grad_sink(xn);
    auto* dw = detail::grad_sink(wn);
    auto* db = detail::grad_sink(bn);
    const std::size_t KC = g.rows(), P = g.cols(), k = g.kernel, s = g.stride;
    const std::size_t out_plane = g.height * g.width;
    const T* dY = self.grad.data();

    if (db)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* plane = dY + (n * Cout + co) * out_plane;
          T acc = 0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += plane[i];
          (*db)[co] += acc;
        }

    if (algo == ConvAlgo::gemm) {
      std::vector<T> col(KC * P);
      detail::ConstMatMap<T> wm(wn.value.data(), Cin, KC);
      for (std::size_t n = 0; n < N; ++n) {
        detail::im2col(dY + n * Cout * out_plane, g, col.data(), 0, g.out_h);
        detail::ConstMatMap<T> cm(col.data(), KC, P);
        if (dx) {
          detail::MatMap<T> dxm(dx->data() + n * Cin * P, Cin, P);
          dxm.noalias() += wm * cm;
        }
        if (dw) {
          detail::MatMap<T> dwm(dw->data(), Cin, KC);
          dwm.noalias() += detail::ConstMatMap<T>(xn.value.data() + n * Cin * P, Cin, P) * cm.transpose();
        }
      }
      return;
    }

    const T* X = xn.value.data();
    const T* Wt = wn.value.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t iy = 0; iy < xs.h; ++iy)
          for (std::size_t ix = 0; ix < xs.w; ++ix) {
            const std::size_t xi = ((n * Cin + ci) * xs.h + iy) * xs.w + ix;
            T acc = 0;
            for (std::size_t co = 0; co < Cout; ++co)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const T gy = dY[((n * Cout + co) * g.height + iy * s + ky) * g.width + ix * s + kx];
                  const std::size_t wi = ((ci * Cout + co) * k + ky) * k + kx;
                  acc += gy * Wt[wi];
                  if (dw) (*dw)[wi] += gy * X[xi];
                }
            if (dx) (*dx)[xi] += acc;
          }
  });
}

enum class Mode { train, eval };

/// Per-channel batch normalisation over (N, H, W). In train mode the batch
/// statistics are used and the running estimates are updated with
/// `momentum` (unbiased variance); eval mode uses the running estimates.
template <std::floating_point T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::span<T> running_mean, std::span<T> running_var, Mode mode,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape xs = x.shape();
  const std::size_t C = xs.c, N = xs.n, HW = xs.plane(), m = N * HW;
  if (gamma.numel() != C || beta.numel() != C || running_mean.size() != C || running_var.size() != C)
    throw ShapeError("batchnorm2d: parameter length does not match channel count");
  if (!(eps > T(0))) throw InvalidArgument("batchnorm2d: eps must be positive");
  const T* X = x.data().data();
  const T* G = gamma.data().data();
  const T* Bt = beta.data().data();

  using Plane = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using ConstPlane = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
  const auto hw = static_cast<Eigen::Index>(HW);
  std::vector<T> out(xs.numel());
  std::vector<T> xhat(xs.numel());
  std::vector<T> invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::train) {
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = X + (n * C + c) * HW;
        mean += detail::lane_sum<T>(HW, [p](std::size_t i) { return p[i]; });
      }
      mean /= static_cast<double>(m);
      const T mu = static_cast<T>(mean);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = X + (n * C + c) * HW;
        var += detail::lane_sum<T>(HW, [p, mu](std::size_t i) { return (p[i] - mu) * (p[i] - mu); });
      }
      var /= static_cast<double>(m);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    invstd[c] = static_cast<T>(is);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      Plane h(xhat.data() + off, hw);
      h = (ConstPlane(X + off, hw) - static_cast<T>(mean)) * static_cast<T>(is);
      Plane(out.data() + off, hw) = h * G[c] + Bt[c];
    }
  }

  return make_result<T>(xs, std::move(out), {&x, &gamma, &beta},
                        [xhat = std::move(xhat), invstd = std::move(invstd), C, N, HW, m, mode](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& gn = *self.inputs[1];
    Node<T>& bn = *self.inputs[2];
    auto* dx = detail::grad_sink(xn);
    auto* dg = detail::grad_sink(gn);
    auto* db = detail::grad_sink(bn);
    using Plane = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
    using ConstPlane = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    const auto hw = static_cast<Eigen::Index>(HW);
    const T* dY = self.grad.data();
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        const T* g = dY + off;
        const T* xh = xhat.data() + off;
        sum_dy += detail::lane_sum<T>(HW, [g](std::size_t i) { return g[i]; });
        sum_dy_xhat += detail::lane_sum<T>(HW, [g, xh](std::size_t i) { return g[i] * xh[i]; });
      }
      if (dg) (*dg)[c] += static_cast<T>(sum_dy_xhat);
      if (db) (*db)[c] += static_cast<T>(sum_dy);
      if (!dx) continue;
      const T gscale = static_cast<T>(static_cast<double>(gn.value[c]) * invstd[c]);
      const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        Plane d(dx->data() + off, hw);
        ConstPlane g(dY + off, hw);
        if (mode == Mode::train)
          d += gscale * (g - mean_dy - ConstPlane(xhat.data() + off, hw) * mean_dy_xhat);
        else
          d += gscale * g;
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    auto* dx = detail::grad_sink(xn);
    if (!dx) return;
    using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto len = static_cast<Eigen::Index>(self.grad.size());
    Eigen::Map<const Vec> v(xn.value.data(), len), g(self.grad.data(), len);
    Eigen::Map<Vec>(dx->data(), len) += (v > T(0)).select(g, T(0));
  });
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto* d = detail::grad_sink(*self.inputs[k]);
      if (!d) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*d)[i] += self.grad[i];
    }
  });
}

/// Stacks b's channels after a's.
template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw ShapeError("concat_channels: N/H/W mismatch " + as.str() + " vs " + bs.str());
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  const std::size_t ablk = as.c * as.plane(), bblk = bs.c * bs.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < as.n; ++n) {
    std::copy_n(a.data().data() + n * ablk, ablk, out.data() + n * (ablk + bblk));
    std::copy_n(b.data().data() + n * bblk, bblk, out.data() + n * (ablk + bblk) + ablk);
  }
  return make_result<T>(os, std::move(out), {&a, &b}, [ablk, bblk, N = as.n](Node<T>& self) {
    auto* da = detail::grad_sink(*self.inputs[0]);
    auto* db = detail::grad_sink(*self.inputs[1]);
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * (ablk + bblk);
      if (da)
        for (std::size_t i = 0; i < ablk; ++i) (*da)[n * ablk + i] += g[i];
      if (db)
        for (std::size_t i = 0; i < bblk; ++i) (*db)[n * bblk + i] += g[ablk + i];
    }
  });
}

/// Channels [begin, begin + count) of x.
template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape xs = x.shape();
  if (begin + count > xs.c || count == 0) throw ShapeError("slice_channels: range out of bounds");
  const Shape os{xs.n, count, xs.h, xs.w};
  const std::size_t HW = xs.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < xs.n; ++n)
    std::copy_n(x.data().data() + (n * xs.c + begin) * HW, count * HW, out.data() + n * count * HW);
  return make_result<T>(os, std::move(out), {&x}, [xs, begin, count, HW](Node<T>& self) {
    auto* dx = detail::grad_sink(*self.inputs[0]);
    if (!dx) return;
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t i = 0; i < count * HW; ++i)
        (*dx)[(n * xs.c + begin) * HW + i] += self.grad[n * count * HW + i];
  });
}

/// Nearest-neighbour x2 spatial upsampling.
template <std::floating_point T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const Shape os{xs.n, xs.c, xs.h * 2, xs.w * 2};
  std::vector<T> out(os.numel());
  const T* X = x.data().data();
  for (std::size_t p = 0; p < xs.n * xs.c; ++p)
    for (std::size_t y = 0; y < os.h; ++y)
      for (std::size_t xx = 0; xx < os.w; ++xx)
        out[(p * os.h + y) * os.w + xx] = X[(p * xs.h + y / 2) * xs.w + xx / 2];
  return make_result<T>(os, std::move(out), {&x}, [xs, os](Node<T>& self) {
    auto* dx = detail::grad_sink(*self.inputs[0]);
    if (!dx) return;
    for (std::size_t p = 0; p < xs.n * xs.c; ++p)
      for (std::size_t y = 0; y < os.h; ++y)
        for (std::size_t xx = 0; xx < os.w; ++xx)
          (*dx)[(p * xs.h + y / 2) * xs.w + xx / 2] += self.grad[(p * os.h + y) * os.w + xx];
  });
}

/// Mean squared error over all N*M elements, as a (1,1,1,1) tensor.
template <std::floating_point T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
  const auto p = pred.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    acc += d * d;
  }
  const double count = static_cast<double>(p.size());
  return make_result<T>(Shape{}, {static_cast<T>(acc / count)}, {&pred, &target}, [count](Node<T>& self) {
    Node<T>& pn = *self.inputs[0];
    Node<T>& tn = *self.inputs[1];
    auto* dp = detail::grad_sink(pn);
    auto* dt = detail::grad_sink(tn);
    const double scale = 2.0 * self.grad[0] / count;
    for (std::size_t i = 0; i < pn.value.size(); ++i) {
      const T g = static_cast<T>(scale * (static_cast<double>(pn.value[i]) - tn.value[i]));
      if (dp) (*dp)[i] += g;
      if (dt) (*dt)[i] -= g;
    }
  });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{}, {static_cast<T>(acc)}, {&x}, [](Node<T>& self) {
    auto* dx = detail::grad_sink(*self.inputs[0]);
    if (!dx) return;
    for (T& g : *dx) g += self.grad[0];
  });
}

}  // namespace lstsr::ad
