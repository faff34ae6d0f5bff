#pragma once

// Forward and adjoint kernels for every layer type used by the networks.
// All kernels are pure functions of their arguments except batch_norm in
// training mode, which updates the running statistics it is handed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <string>
#include <vector>

#include "swiftsr/gemm.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

enum class Mode { Train, Eval };

/// Weights of a standard (out_c, in_c, k, k) or depthwise (c, 1, k, k)
/// convolution. Bias is a (out_c, 1, 1, 1) tensor when present.
struct ConvParams {
  Tensor weight;
  Tensor bias;
  bool has_bias = false;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t kernel() const { return weight.shape().h; }
};

struct BatchNormState {
  Tensor gamma;         // (c,1,1,1)
  Tensor beta;          // (c,1,1,1)
  Tensor running_mean;  // (c,1,1,1)
  Tensor running_var;   // (c,1,1,1)
  float eps = 1e-5f;
  float momentum = 0.1f;
};

struct PReluParams {
  Tensor slope;  // (c,1,1,1)
};

inline constexpr float kSigmoidClamp = 1e-7f;

inline Shape vec_shape(std::size_t len) { return Shape{len, 1, 1, 1}; }

/// floor((in + 2*pad - k) / stride) + 1, rejecting empty outputs.
inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  if (stride == 0) throw ShapeError("convolution stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError("convolution output size is non-positive (input " +
                     std::to_string(in) + ", kernel " + std::to_string(k) +
                     ", padding " + std::to_string(pad) + ")");
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Upper bound on im2col scratch, in floats.
inline constexpr std::size_t kColBudget = std::size_t{1} << 22;

inline void check_conv(const Tensor& x, const ConvParams& p, bool depthwise) {
  const Shape& ws = p.weight.shape();
  if (ws.h != ws.w) throw ShapeError("convolution kernel must be square, got " + ws.str());
  if (depthwise) {
    if (ws.c != 1 || ws.n != x.shape().c) {
      throw ShapeError("depthwise weight " + ws.str() + " does not match input channels " +
                       std::to_string(x.shape().c));
    }
  } else if (ws.c != x.shape().c) {
    throw ShapeError("conv2d channel mismatch: input " + x.shape().str() + ", weight " +
                     ws.str());
  }
  if (p.has_bias && p.bias.size() != ws.n) {
    throw ShapeError("convolution bias length " + std::to_string(p.bias.size()) +
                     " does not match " + std::to_string(ws.n) + " output channels");
  }
}

// Valid output-column range [lo, hi) for a kernel tap at offset kx.
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride,
                        std::size_t pad, std::size_t kx, std::size_t& lo,
                        std::size_t& hi) {
  // need 0 <= o*stride + kx - pad < in
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(in) - 1 - off);
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::min<std::ptrdiff_t>(first, static_cast<std::ptrdiff_t>(out)));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(last + 1, static_cast<std::ptrdiff_t>(lo),
                                                           static_cast<std::ptrdiff_t>(out)));
}

// col[(c*k + ky)*k + kx][r*ow + x] for output rows [oh0, oh0 + rows).
inline void im2col(const float* img, std::size_t channels, std::size_t h, std::size_t w,
                   std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh0,
                   std::size_t rows, std::size_t ow, float* col) {
  const std::size_t pcount = rows * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* plane = img + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        float* dst = col + ((c * k + ky) * k + kx) * pcount;
        std::size_t lo, hi;
        valid_range(w, ow, stride, pad, kx, lo, hi);
        for (std::size_t r = 0; r < rows; ++r) {
          float* drow = dst + r * ow;
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>((oh0 + r) * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + ow, 0.0f);
            continue;
          }
          const float* srow = plane + static_cast<std::size_t>(ih) * w;
          std::fill(drow, drow + lo, 0.0f);
          for (std::size_t x = lo; x < hi; ++x) drow[x] = srow[x * stride + kx - pad];
          std::fill(drow + hi, drow + ow, 0.0f);
        }
      }
    }
  }
}

// Scatter-add of im2col's layout back into an image.
inline void col2im(const float* col, std::size_t channels, std::size_t h, std::size_t w,
                   std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh0,
                   std::size_t rows, std::size_t ow, float* img) {
  const std::size_t pcount = rows * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = img + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const float* src = col + ((c * k + ky) * k + kx) * pcount;
        std::size_t lo, hi;
        valid_range(w, ow, stride, pad, kx, lo, hi);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>((oh0 + r) * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          float* drow = plane + static_cast<std::size_t>(ih) * w;
          const float* srow = src + r * ow;
          for (std::size_t x = lo; x < hi; ++x) drow[x * stride + kx - pad] += srow[x];
        }
      }
    }
  }
}

inline void add_channel_bias(Tensor& out, const Tensor& bias) {
  const Shape& s = out.shape();
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      float* p = out.ptr() + (n * s.c + c) * hw;
      const float b = bias[c];
      for (std::size_t i = 0; i < hw; ++i) p[i] += b;
    }
  }
}

inline void accumulate_channel_sums(const Tensor& g, Tensor& acc) {
  const Shape& s = g.shape();
  const std::size_t hw = s.plane();
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const float* p = g.ptr() + (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) sum += p[i];
    }
    acc[c] += static_cast<float>(sum);
  }
}

// Stride-1 conv with few output channels (e.g. a wide layer down to RGB).
// im2col there feeds a GEMM with a tiny M over a huge column buffer, so
// instead every (oc, ky, kx) tap is applied to the raw input in one GEMM and
// the partial planes are shifted into place.
inline void conv2d_few_outputs(const Tensor& x, const ConvParams& p, Tensor& out) {
  const Shape& xs = x.shape();
  const Shape& os = out.shape();
  const std::size_t oc = os.c, k = p.kernel(), taps = oc * k * k;
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  // weight (oc, c, ky, kx) -> rows (oc, ky, kx), columns c
  std::vector<float> wt(taps * xs.c);
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t t = 0; t < k * k; ++t)
        wt[(o * k * k + t) * xs.c + c] = p.weight.ptr()[(o * xs.c + c) * k * k + t];
  const std::size_t rows_per = std::max<std::size_t>(1, kColBudget / (taps * xs.w));
  std::vector<float> z(taps * std::min(rows_per, xs.h) * xs.w);
  const std::size_t in_plane = xs.plane(), out_plane = os.plane();
  std::fill(out.data().begin(), out.data().end(), 0.0f);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t i0 = 0; i0 < xs.h; i0 += rows_per) {
      const std::size_t rows = std::min(rows_per, xs.h - i0), pc = rows * xs.w;
      gemm(false, false, taps, pc, xs.c, 1.0f, wt.data(), xs.c, x.ptr() + n * xs.c * in_plane + i0 * xs.w,
           in_plane, 0.0f, z.data(), pc);
      for (std::size_t o = 0; o < oc; ++o) {
        float* dst = out.ptr() + (n * oc + o) * out_plane;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const float* src = z.data() + (o * k * k + ky * k + kx) * pc;
            std::size_t lo, hi;
            valid_range(xs.w, os.w, 1, p.padding, kx, lo, hi);
            for (std::size_t r = 0; r < rows; ++r) {
              const auto y = static_cast<std::ptrdiff_t>(i0 + r) - static_cast<std::ptrdiff_t>(ky) + pad;
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(os.h)) continue;
              float* drow = dst + static_cast<std::size_t>(y) * os.w;
              const float* srow = src + static_cast<std::ptrdiff_t>(r * xs.w + kx) - pad;
              for (std::size_t xo = lo; xo < hi; ++xo) drow[xo] += srow[xo];
            }
          }
        }
      }
    }
  }
}

// One stride-1 depthwise plane. Interior outputs go in blocks of 8 with the
// accumulators held across all taps; edges fall back to a scalar loop. Each
// output sums its taps ky-major, then kx, on both paths.
inline void depthwise_plane_s1(const float* in, std::size_t h, std::size_t w, const float* wk,
                               std::size_t k, std::size_t pad, std::size_t oh, std::size_t ow,
                               const std::vector<std::size_t>& xlos,
                               const std::vector<std::size_t>& xhis, float* o) {
  constexpr std::size_t B = 16;
  using Lanes = float __attribute__((vector_size(B * sizeof(float))));
  std::size_t ilo = 0, ihi = ow;
  for (std::size_t kx = 0; kx < k; ++kx) {
    ilo = std::max(ilo, xlos[kx]);
    ihi = std::min(ihi, xhis[kx]);
  }
  if (ihi < ilo) ihi = ilo;
  const std::size_t blocks_end = ilo + (ihi - ilo) / B * B;
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t ky_lo = y < pad ? pad - y : 0;
    const std::size_t ky_hi = std::min(k, h + pad - y);
    float* drow = o + y * ow;
    // rows[ky] points at input column (kx - pad) = 0 when added to xo
    const float* base = in + (y + ky_lo - pad) * w;
    for (std::size_t x0 = ilo; x0 < blocks_end; x0 += B) {
      Lanes acc = {};
      for (std::size_t ky = ky_lo; ky < ky_hi; ++ky) {
        const float* src = base + (ky - ky_lo) * w + x0 - pad;
        const float* wr = wk + ky * k;
        for (std::size_t kx = 0; kx < k; ++kx) {
          Lanes v;
          std::memcpy(&v, src + kx, sizeof v);
          acc += wr[kx] * v;
        }
      }
      std::memcpy(drow + x0, &acc, sizeof acc);
    }
    auto scalar = [&](std::size_t xo) {
      float acc = 0.0f;
      for (std::size_t ky = ky_lo; ky < ky_hi; ++ky) {
        const float* irow = base + (ky - ky_lo) * w;
        for (std::size_t kx = 0; kx < k; ++kx) {
          if (xo < xlos[kx] || xo >= xhis[kx]) continue;
          acc += wk[ky * k + kx] * irow[xo + kx - pad];
        }
      }
      drow[xo] = acc;
    };
    for (std::size_t xo = 0; xo < ilo; ++xo) scalar(xo);
    for (std::size_t xo = blocks_end; xo < ow; ++xo) scalar(xo);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// Standard 2-D cross-correlation with zero padding (no kernel flip).
inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
  detail::check_conv(x, p, false);
  const Shape& xs = x.shape();
  const std::size_t oc = p.weight.shape().n;
  const std::size_t k = p.kernel();
  const std::size_t oh = conv_out_size(xs.h, k, p.stride, p.padding);
  const std::size_t ow = conv_out_size(xs.w, k, p.stride, p.padding);
  Tensor out(Shape{xs.n, oc, oh, ow});
  const std::size_t in_plane = xs.c * xs.h * xs.w;
  const std::size_t out_plane = oc * oh * ow;
  const std::size_t ck2 = xs.c * k * k;

  if (k == 1 && p.stride == 1 && p.padding == 0) {
    for (std::size_t n = 0; n < xs.n; ++n) {
      detail::gemm(false, false, oc, oh * ow, xs.c, 1.0f, p.weight.ptr(), xs.c,
                   x.ptr() + n * in_plane, oh * ow, 0.0f, out.ptr() + n * out_plane, oh * ow);
    }
  } else if (p.stride == 1 && oc * 8 <= xs.c) {
    detail::conv2d_few_outputs(x, p, out);
  } else {
    const std::size_t rows_per = std::max<std::size_t>(1, detail::kColBudget / (ck2 * ow));
    std::vector<float> col(ck2 * std::min(rows_per, oh) * ow);
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t r0 = 0; r0 < oh; r0 += rows_per) {
        const std::size_t rows = std::min(rows_per, oh - r0);
        const std::size_t pc = rows * ow;
        detail::im2col(x.ptr() + n * in_plane, xs.c, xs.h, xs.w, k, p.stride, p.padding, r0,
                       rows, ow, col.data());
        detail::gemm(false, false, oc, pc, ck2, 1.0f, p.weight.ptr(), ck2, col.data(), pc,
                     0.0f, out.ptr() + n * out_plane + r0 * ow, oh * ow);
      }
    }
  }
  if (p.has_bias) detail::add_channel_bias(out, p.bias);
  return out;
}

/// Returns dL/dx and accumulates dL/dweight, dL/dbias into the given tensors
/// (either may be null to skip).
inline Tensor conv2d_backward(const Tensor& x, const ConvParams& p, const Tensor& gy,
                              Tensor* gw, Tensor* gb) {
  detail::check_conv(x, p, false);
  const Shape& xs = x.shape();
  const std::size_t oc = p.weight.shape().n;
  const std::size_t k = p.kernel();
  const std::size_t oh = conv_out_size(xs.h, k, p.stride, p.padding);
  const std::size_t ow = conv_out_size(xs.w, k, p.stride, p.padding);
  if (gy.shape() != Shape{xs.n, oc, oh, ow}) {
    throw ShapeError("conv2d_backward: upstream gradient " + gy.shape().str() +
                     " does not match output " + Shape{xs.n, oc, oh, ow}.str());
  }
  Tensor gx(xs);
  const std::size_t in_plane = xs.c * xs.h * xs.w;
  const std::size_t out_plane = oc * oh * ow;
  const std::size_t ck2 = xs.c * k * k;

  if (k == 1 && p.stride == 1 && p.padding == 0) {
    const std::size_t hw = oh * ow;
    for (std::size_t n = 0; n < xs.n; ++n) {
      const float* g = gy.ptr() + n * out_plane;
      if (gw) {
        detail::gemm(false, true, oc, xs.c, hw, 1.0f, g, hw, x.ptr() + n * in_plane, hw, 1.0f,
                     gw->ptr(), xs.c);
      }
      detail::gemm(true, false, xs.c, hw, oc, 1.0f, p.weight.ptr(), xs.c, g, hw, 0.0f,
                   gx.ptr() + n * in_plane, hw);
    }
  } else {
    const std::size_t rows_per = std::max<std::size_t>(1, detail::kColBudget / (ck2 * ow));
    const std::size_t cap = ck2 * std::min(rows_per, oh) * ow;
    std::vector<float> col(cap);
    std::vector<float> dcol(cap);
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t r0 = 0; r0 < oh; r0 += rows_per) {
        const std::size_t rows = std::min(rows_per, oh - r0);
        const std::size_t pc = rows * ow;
        const float* g = gy.ptr() + n * out_plane + r0 * ow;
        if (gw) {
          detail::im2col(x.ptr() + n * in_plane, xs.c, xs.h, xs.w, k, p.stride, p.padding, r0,
                         rows, ow, col.data());
          detail::gemm(false, true, oc, ck2, pc, 1.0f, g, oh * ow, col.data(), pc, 1.0f,
                       gw->ptr(), ck2);
        }
        detail::gemm(true, false, ck2, pc, oc, 1.0f, p.weight.ptr(), ck2, g, oh * ow, 0.0f,
                     dcol.data(), pc);
        detail::col2im(dcol.data(), xs.c, xs.h, xs.w, k, p.stride, p.padding, r0, rows, ow,
                       gx.ptr() + n * in_plane);
      }
    }
  }
  if (gb && p.has_bias) detail::accumulate_channel_sums(gy, *gb);
  return gx;
}

/// Per-channel convolution; weight (c, 1, k, k).
inline Tensor depthwise_conv2d(const Tensor& x, const ConvParams& p) {
  detail::check_conv(x, p, true);
  const Shape& xs = x.shape();
  const std::size_t k = p.kernel();
  const std::size_t s = p.stride;
  const std::size_t oh = conv_out_size(xs.h, k, s, p.padding);
  const std::size_t ow = conv_out_size(xs.w, k, s, p.padding);
  Tensor out(Shape{xs.n, xs.c, oh, ow});
  std::vector<std::size_t> xlos(k), xhis(k);
  for (std::size_t kx = 0; kx < k; ++kx) detail::valid_range(xs.w, ow, s, p.padding, kx, xlos[kx], xhis[kx]);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const float* in = x.ptr() + (n * xs.c + c) * xs.h * xs.w;
      float* o = out.ptr() + (n * xs.c + c) * oh * ow;
      const float* wk = p.weight.ptr() + c * k * k;
      if (s == 1) {
        detail::depthwise_plane_s1(in, xs.h, xs.w, wk, k, p.padding, oh, ow, xlos, xhis, o);
        continue;
      }
      // Row-major over outputs so each output row stays in cache across taps;
      // per-element accumulation order is ky-major, then kx.
      for (std::size_t y = 0; y < oh; ++y) {
        float* drow = o + y * ow;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(y * s + ky) - static_cast<std::ptrdiff_t>(p.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xs.h)) continue;
          const float* irow = in + static_cast<std::size_t>(iy) * xs.w;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t xlo = xlos[kx], xhi = xhis[kx];
            if (xlo >= xhi) continue;
            const float wv = wk[ky * k + kx];
            // modular arithmetic: xo*s + kx - pad is in range for xo in [xlo, xhi)
            const float* srow = irow + (xlo * s + kx - p.padding);
            for (std::size_t xo = xlo; xo < xhi; ++xo) drow[xo] += wv * srow[(xo - xlo) * s];
          }
        }
      }
    }
  }
  if (p.has_bias) detail::add_channel_bias(out, p.bias);
  return out;
}

inline Tensor depthwise_conv2d_backward(const Tensor& x, const ConvParams& p, const Tensor& gy,
                                        Tensor* gw, Tensor* gb) {
  detail::check_conv(x, p, true);
  const Shape& xs = x.shape();
  const std::size_t k = p.kernel();
  const std::size_t s = p.stride;
  const std::size_t oh = conv_out_size(xs.h, k, s, p.padding);
  const std::size_t ow = conv_out_size(xs.w, k, s, p.padding);
  if (gy.shape() != Shape{xs.n, xs.c, oh, ow}) {
    throw ShapeError("depthwise_conv2d_backward: upstream gradient " + gy.shape().str() +
                     " does not match output " + Shape{xs.n, xs.c, oh, ow}.str());
  }
  Tensor gx(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const float* in = x.ptr() + (n * xs.c + c) * xs.h * xs.w;
      float* gin = gx.ptr() + (n * xs.c + c) * xs.h * xs.w;
      const float* g = gy.ptr() + (n * xs.c + c) * oh * ow;
      const float* wk = p.weight.ptr() + c * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        std::size_t ylo, yhi;
        detail::valid_range(xs.h, oh, s, p.padding, ky, ylo, yhi);
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t xlo, xhi;
          detail::valid_range(xs.w, ow, s, p.padding, kx, xlo, xhi);
          const float wv = wk[ky * k + kx];
          double wacc = 0.0;
          for (std::size_t y = ylo; y < yhi; ++y) {
            const std::size_t base = (y * s + ky - p.padding) * xs.w + kx - p.padding;
            const float* grow = g + y * ow;
            float rowacc = 0.0f;
            if (s == 1) {
              // Split so both loops vectorize; eight partial sums for the dot.
              const std::size_t len = xhi > xlo ? xhi - xlo : 0;
              float* gdst = gin + base + xlo;
              const float* src = in + base + xlo;
              const float* gr = grow + xlo;
              for (std::size_t i = 0; i < len; ++i) gdst[i] += wv * gr[i];
              float lanes[8] = {};
              std::size_t i = 0;
              for (; i + 8 <= len; i += 8)
                for (std::size_t j = 0; j < 8; ++j) lanes[j] += gr[i + j] * src[i + j];
              for (; i < len; ++i) lanes[0] += gr[i] * src[i];
              for (float v : lanes) rowacc += v;
            } else {
              for (std::size_t xo = xlo; xo < xhi; ++xo) {
                gin[base + xo * s] += wv * grow[xo];
                rowacc += grow[xo] * in[base + xo * s];
              }
            }
            wacc += rowacc;
          }
          if (gw) (*gw)[c * k * k + ky * k + kx] += static_cast<float>(wacc);
        }
      }
    }
  }
  if (gb && p.has_bias) detail::accumulate_channel_sums(gy, *gb);
  return gx;
}

/// Depthwise-separable convolution: per-channel spatial filter then a 1x1
/// channel mix. Stride and padding live on the depthwise stage.
inline Tensor ds_conv2d(const Tensor& x, const ConvParams& dw, const ConvParams& pw) {
  if (pw.kernel() != 1 || pw.stride != 1 || pw.padding != 0) {
    throw ShapeError("ds_conv2d: pointwise stage must be 1x1, stride 1, no padding");
  }
  return conv2d(depthwise_conv2d(x, dw), pw);
}

// ---------------------------------------------------------------------------
// Normalization and activations

struct BatchNormContext {
  Tensor xhat;
  std::vector<float> inv_std;
  Mode mode = Mode::Eval;
};

/// Per-channel batch normalization. Train mode normalizes by batch
/// statistics over (n,h,w) and folds them into the running estimates
/// (the running variance uses the unbiased batch variance).
inline Tensor batch_norm(const Tensor& x, BatchNormState& st, Mode mode,
                         BatchNormContext* ctx = nullptr) {
  const Shape& s = x.shape();
  for (const Tensor* t : {&st.gamma, &st.beta, &st.running_mean, &st.running_var}) {
    if (t->size() != s.c) {
      throw ShapeError("batch_norm: parameter length " + std::to_string(t->size()) +
                       " does not match " + std::to_string(s.c) + " channels");
    }
  }
  const std::size_t hw = s.plane();
  const std::size_t count = s.n * hw;
  if (mode == Mode::Train && count < 2) {
    throw ShapeError("batch_norm: training mode needs at least 2 values per channel, got " +
                     std::to_string(count));
  }
  Tensor out(s);
  std::vector<float> inv_std(s.c);
  Tensor xhat;
  if (ctx) xhat = Tensor(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const float* p = x.ptr() + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const float* p = x.ptr() + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      st.running_mean[c] = static_cast<float>((1.0 - st.momentum) * st.running_mean[c] +
                                              st.momentum * mean);
      st.running_var[c] = static_cast<float>((1.0 - st.momentum) * st.running_var[c] +
                                             st.momentum * unbiased);
    } else {
      mean = st.running_mean[c];
      var = st.running_var[c];
    }
    const float istd = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(st.eps)));
    inv_std[c] = istd;
    const float m = static_cast<float>(mean);
    const float g = st.gamma[c];
    const float b = st.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const float xh = (x[off + i] - m) * istd;
        out[off + i] = g * xh + b;
        if (ctx) xhat[off + i] = xh;
      }
    }
  }
  if (ctx) {
    ctx->xhat = std::move(xhat);
    ctx->inv_std = std::move(inv_std);
    ctx->mode = mode;
  }
  return out;
}

inline Tensor batch_norm_backward(const BatchNormContext& ctx, const BatchNormState& st,
                                  const Tensor& gy, Tensor* ggamma, Tensor* gbeta) {
  require_same_shape(ctx.xhat, gy, "batch_norm_backward");
  const Shape& s = gy.shape();
  const std::size_t hw = s.plane();
  const double count = static_cast<double>(s.n * hw);
  Tensor gx(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_g += gy[off + i];
        sum_gx += static_cast<double>(gy[off + i]) * ctx.xhat[off + i];
      }
    }
    if (ggamma) (*ggamma)[c] += static_cast<float>(sum_gx);
    if (gbeta) (*gbeta)[c] += static_cast<float>(sum_g);
    const double scale = static_cast<double>(st.gamma[c]) * ctx.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (ctx.mode == Mode::Train) {
          gx[off + i] = static_cast<float>(
              scale * (gy[off + i] - sum_g / count - ctx.xhat[off + i] * sum_gx / count));
        } else {
          gx[off + i] = static_cast<float>(scale * gy[off + i]);
        }
      }
    }
  }
  return gx;
}

inline Tensor prelu(const Tensor& x, const PReluParams& p) {
  const Shape& s = x.shape();
  if (p.slope.size() != s.c) {
    throw ShapeError("prelu: slope length " + std::to_string(p.slope.size()) +
                     " does not match " + std::to_string(s.c) + " channels");
  }
  Tensor out(s);
  const std::size_t hw = s.plane();
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    const float a = p.slope[plane % s.c];
    const float* src = x.ptr() + plane * hw;
    float* dst = out.ptr() + plane * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] >= 0.0f ? src[i] : a * src[i];
  }
  return out;
}

inline Tensor prelu_backward(const Tensor& x, const PReluParams& p, const Tensor& gy,
                             Tensor* gslope) {
  require_same_shape(x, gy, "prelu_backward");
  const Shape& s = x.shape();
  const std::size_t hw = s.plane();
  Tensor gx(s);
  std::vector<double> acc(s.c, 0.0);
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    const std::size_t c = plane % s.c;
    const float a = p.slope[c];
    const float* xs = x.ptr() + plane * hw;
    const float* g = gy.ptr() + plane * hw;
    float* dst = gx.ptr() + plane * hw;
    double sum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      if (xs[i] >= 0.0f) {
        dst[i] = g[i];
      } else {
        dst[i] = a * g[i];
        sum += static_cast<double>(g[i]) * xs[i];
      }
    }
    acc[c] += sum;
  }
  if (gslope) {
    for (std::size_t c = 0; c < s.c; ++c) (*gslope)[c] += static_cast<float>(acc[c]);
  }
  return gx;
}

inline Tensor leaky_relu(const Tensor& x, float slope) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.0f ? x[i] : slope * x[i];
  return out;
}

inline Tensor leaky_relu_backward(const Tensor& x, float slope, const Tensor& gy) {
  require_same_shape(x, gy, "leaky_relu_backward");
  Tensor gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] >= 0.0f ? gy[i] : slope * gy[i];
  return gx;
}

inline Tensor relu6(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(std::max(x[i], 0.0f), 6.0f);
  return out;
}

inline Tensor relu6_backward(const Tensor& x, const Tensor& gy) {
  require_same_shape(x, gy, "relu6_backward");
  Tensor gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    gx[i] = (x[i] > 0.0f && x[i] < 6.0f) ? gy[i] : 0.0f;
  }
  return gx;
}

/// Logistic function clamped into [kSigmoidClamp, 1 - kSigmoidClamp].
inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
    out[i] = static_cast<float>(
        std::clamp(v, static_cast<double>(kSigmoidClamp), 1.0 - kSigmoidClamp));
  }
  return out;
}

/// Gradient from the saved output p: dx = dy * p * (1 - p). The clamp is
/// treated as pass-through.
inline Tensor sigmoid_backward(const Tensor& out, const Tensor& gy) {
  require_same_shape(out, gy, "sigmoid_backward");
  Tensor gx(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) gx[i] = gy[i] * out[i] * (1.0f - out[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// Rearrangement and pooling

/// (n, c*r*r, h, w) -> (n, c, h*r, w*r);
/// out[n][c][h*r+i][w*r+j] = in[n][c*r*r + i*r + j][h][w].
inline Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  const Shape& s = x.shape();
  if (r == 0 || s.c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(s.c) +
                     " not divisible by r^2 = " + std::to_string(r * r));
  }
  const std::size_t oc = s.c / (r * r);
  Tensor out(Shape{s.n, oc, s.h * r, s.w * r});
  const Shape& os = out.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < oc; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) {
          const std::size_t ic = c * r * r + i * r + j;
          for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x0 = 0; x0 < s.w; ++x0)
              out[flat_index(os, n, c, y * r + i, x0 * r + j)] = x[flat_index(s, n, ic, y, x0)];
        }
  return out;
}

/// Exact inverse of pixel_shuffle.
inline Tensor pixel_unshuffle(const Tensor& x, std::size_t r) {
  const Shape& s = x.shape();
  if (r == 0 || s.h % r != 0 || s.w % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial size " + std::to_string(s.h) + "x" +
                     std::to_string(s.w) + " not divisible by " + std::to_string(r));
  }
  Tensor out(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
  const Shape& os = out.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) {
          const std::size_t oc = c * r * r + i * r + j;
          for (std::size_t y = 0; y < os.h; ++y)
            for (std::size_t x0 = 0; x0 < os.w; ++x0)
              out[flat_index(os, n, oc, y, x0)] = x[flat_index(s, n, c, y * r + i, x0 * r + j)];
        }
  return out;
}

namespace detail {
inline std::size_t pool_begin(std::size_t i, std::size_t in, std::size_t out) {
  return (i * in) / out;
}
inline std::size_t pool_end(std::size_t i, std::size_t in, std::size_t out) {
  return ((i + 1) * in + out - 1) / out;
}
}  // namespace detail

/// Averages window [floor(i*H/oh), ceil((i+1)*H/oh)) per axis.
inline Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("adaptive_avg_pool: output size must be >= 1");
  const Shape& s = x.shape();
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const float* in = x.ptr() + nc * s.plane();
    float* o = out.ptr() + nc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t y0 = detail::pool_begin(i, s.h, out_h), y1 = detail::pool_end(i, s.h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t x0 = detail::pool_begin(j, s.w, out_w), x1 = detail::pool_end(j, s.w, out_w);
        double sum = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) sum += in[y * s.w + xx];
        o[i * out_w + j] = static_cast<float>(sum / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return out;
}

inline Tensor adaptive_avg_pool_backward(const Shape& in_shape, const Tensor& gy) {
  const Shape& s = in_shape;
  const std::size_t out_h = gy.shape().h, out_w = gy.shape().w;
  if (gy.shape().n != s.n || gy.shape().c != s.c) {
    throw ShapeError("adaptive_avg_pool_backward: gradient " + gy.shape().str() +
                     " does not match input " + s.str());
  }
  Tensor gx(s);
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    float* gi = gx.ptr() + nc * s.plane();
    const float* g = gy.ptr() + nc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t y0 = detail::pool_begin(i, s.h, out_h), y1 = detail::pool_end(i, s.h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t x0 = detail::pool_begin(j, s.w, out_w), x1 = detail::pool_end(j, s.w, out_w);
        const float v = g[i * out_w + j] / static_cast<float>((y1 - y0) * (x1 - x0));
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) gi[y * s.w + xx] += v;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Fully connected

/// Rows are batch entries; each row is the flattened (c,h,w) of the input.
/// weight is (out, in, 1, 1), bias (out, 1, 1, 1). Output (n, out, 1, 1).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t n = x.shape().n;
  const std::size_t in = x.shape().c * x.shape().plane();
  const std::size_t out = weight.shape().n;
  if (weight.shape().c * weight.shape().plane() != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " +
                     weight.shape().str());
  }
  if (!bias.empty() && bias.size() != out) {
    throw ShapeError("linear: bias length " + std::to_string(bias.size()) +
                     " does not match " + std::to_string(out) + " outputs");
  }
  Tensor y(Shape{n, out, 1, 1});
  detail::gemm(false, true, n, out, in, 1.0f, x.ptr(), in, weight.ptr(), in, 0.0f, y.ptr(), out);
  if (!bias.empty()) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += bias[o];
  }
  return y;
}

inline Tensor linear_backward(const Tensor& x, const Tensor& weight, const Tensor& gy,
                              Tensor* gw, Tensor* gb) {
  const std::size_t n = x.shape().n;
  const std::size_t in = x.shape().c * x.shape().plane();
  const std::size_t out = weight.shape().n;
  if (gy.shape() != Shape{n, out, 1, 1}) {
    throw ShapeError("linear_backward: gradient " + gy.shape().str() + " does not match output " +
                     Shape{n, out, 1, 1}.str());
  }
  Tensor gx(x.shape());
  detail::gemm(false, false, n, in, out, 1.0f, gy.ptr(), out, weight.ptr(), in, 0.0f, gx.ptr(), in);
  if (gw) detail::gemm(true, false, out, in, n, 1.0f, gy.ptr(), out, x.ptr(), in, 1.0f, gw->ptr(), in);
  if (gb) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += gy[r * out + o];
      (*gb)[o] += static_cast<float>(s);
    }
  }
  return gx;
}

}  // namespace swiftsr
