#include "vqi/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace vqi {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

void require_dim(std::size_t actual, std::size_t expected, const char* what, const char* dim_name) {
  if (actual != expected) {
    throw ShapeError(std::string(what) + ": " + dim_name + " is " + std::to_string(actual) +
                     ", expected " + std::to_string(expected));
  }
}

void check_conv_operands(const Shape& in, const Shape& w, const ConvSpec& spec, const char* what) {
  spec.validate();
  require_rank(in, 4, what);
  require_dim(in[1], static_cast<std::size_t>(spec.in_channels), what, "input channels (dim 1)");
  expect_shape(w, spec.weight_shape(), "conv weights");
  if (in[2] + 2 * spec.padding < static_cast<std::size_t>(spec.kernel_h) ||
      in[3] + 2 * spec.padding < static_cast<std::size_t>(spec.kernel_w)) {
    throw ShapeError(std::string(what) + ": padded input " + shape_str(in) + " smaller than kernel");
  }
}

// Valid [lo, hi) range of output positions o for which o*stride - pad + tap lands in [0, extent).
inline void valid_range(long out_extent, long extent, long stride, long pad, long tap, long& lo, long& hi) {
  // need 0 <= o*s - p + t < extent
  long first = pad - tap;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  long last = extent - 1 + pad - tap;  // o*s <= last
  hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* img, long channels, long H, long W, const ConvSpec& s, long Ho, long Wo, T* col) {
  const long kh = s.kernel_h, kw = s.kernel_w, st = s.stride, pd = s.padding;
  const long P = Ho * Wo;
  for (long c = 0; c < channels; ++c) {
    const T* plane = img + c * H * W;
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * P;
        long w_lo, w_hi;
        valid_range(Wo, W, st, pd, kj, w_lo, w_hi);
        for (long oh = 0; oh < Ho; ++oh) {
          T* dst = row + oh * Wo;
          const long ih = oh * st - pd + ki;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = plane + ih * W - pd + kj;
          std::fill(dst, dst + w_lo, T(0));
          if (st == 1) {
            std::copy(src + w_lo, src + w_hi, dst + w_lo);
          } else {
            for (long ow = w_lo; ow < w_hi; ++ow) dst[ow] = src[ow * st];
          }
          std::fill(dst + w_hi, dst + Wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, long channels, long H, long W, const ConvSpec& s, long Ho, long Wo, T* img) {
  const long kh = s.kernel_h, kw = s.kernel_w, st = s.stride, pd = s.padding;
  const long P = Ho * Wo;
  for (long c = 0; c < channels; ++c) {
    T* plane = img + c * H * W;
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * P;
        long w_lo, w_hi;
        valid_range(Wo, W, st, pd, kj, w_lo, w_hi);
        for (long oh = 0; oh < Ho; ++oh) {
          const long ih = oh * st - pd + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = plane + ih * W - pd + kj;
          const T* src = row + oh * Wo;
          for (long ow = w_lo; ow < w_hi; ++ow) dst[ow * st] += src[ow];
        }
      }
    }
  }
}

// out[c] += sum_taps w[c,tap] * in[c, shifted]; one kernel per channel.
template <typename T>
void depthwise_accumulate(const T* in, long H, long W, const T* w, long kh, long kw, long st, long pd,
                          long Ho, long Wo, T* out) {
  for (long ki = 0; ki < kh; ++ki) {
    for (long kj = 0; kj < kw; ++kj) {
      const T tap = w[ki * kw + kj];
      long w_lo, w_hi;
      valid_range(Wo, W, st, pd, kj, w_lo, w_hi);
      for (long oh = 0; oh < Ho; ++oh) {
        const long ih = oh * st - pd + ki;
        if (ih < 0 || ih >= H) continue;
        const T* src = in + ih * W - pd + kj;
        T* dst = out + oh * Wo;
        if (st == 1) {
          for (long ow = w_lo; ow < w_hi; ++ow) dst[ow] += tap * src[ow];
        } else {
          for (long ow = w_lo; ow < w_hi; ++ow) dst[ow] += tap * src[ow * st];
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward_plane(const T* gout, const T* in, long H, long W, const T* w, long kh, long kw, long st,
                              long pd, long Ho, long Wo, T* gin, T* gw) {
  for (long ki = 0; ki < kh; ++ki) {
    for (long kj = 0; kj < kw; ++kj) {
      const T tap = w[ki * kw + kj];
      T acc = 0;
      long w_lo, w_hi;
      valid_range(Wo, W, st, pd, kj, w_lo, w_hi);
      for (long oh = 0; oh < Ho; ++oh) {
        const long ih = oh * st - pd + ki;
        if (ih < 0 || ih >= H) continue;
        const long base = ih * W - pd + kj;
        const T* g = gout + oh * Wo;
        for (long ow = w_lo; ow < w_hi; ++ow) {
          const long idx = base + ow * st;
          acc += g[ow] * in[idx];
          gin[idx] += tap * g[ow];
        }
      }
      if (gw) gw[ki * kw + kj] += acc;
    }
  }
}

}  // namespace

void ConvSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ConvSpec: " + m); };
  if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 || groups < 1) {
    fail("channels, kernel extents and groups must be positive");
  }
  if (stride < 1) fail("stride must be >= 1");
  if (padding < 0) fail("padding must be >= 0");
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    fail("groups=" + std::to_string(groups) + " must divide in_channels=" + std::to_string(in_channels) +
         " and out_channels=" + std::to_string(out_channels));
  }
}

Shape ConvSpec::weight_shape() const {
  return {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels / groups),
          static_cast<std::size_t>(kernel_h), static_cast<std::size_t>(kernel_w)};
}

std::size_t ConvSpec::out_extent_h(std::size_t h) const {
  return (h + 2 * padding - kernel_h) / stride + 1;
}

std::size_t ConvSpec::out_extent_w(std::size_t w) const {
  return (w + 2 * padding - kernel_w) / stride + 1;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvSpec& spec) {
  check_conv_operands(input.shape(), weights.shape(), spec, "conv2d_forward");
  expect_shape(bias.shape(), {static_cast<std::size_t>(spec.out_channels)}, "conv bias");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long Ho = spec.out_extent_h(H), Wo = spec.out_extent_w(W), P = Ho * Wo;
  const long Co = spec.out_channels, G = spec.groups, Cg = C / G, Cog = Co / G;
  const long K = Cg * spec.kernel_h * spec.kernel_w;
  Tensor<T> out({std::size_t(N), std::size_t(Co), std::size_t(Ho), std::size_t(Wo)});

  if (spec.is_depthwise()) {
    const long taps = spec.kernel_h * spec.kernel_w;
    for (long n = 0; n < N; ++n) {
      for (long c = 0; c < C; ++c) {
        T* o = out.data() + (n * Co + c) * P;
        std::fill(o, o + P, bias[c]);
        depthwise_accumulate(input.data() + (n * C + c) * H * W, H, W, weights.data() + c * taps,
                             spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, Ho, Wo, o);
      }
    }
    return out;
  }

  const bool direct = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0;
  std::vector<T> col(direct ? 0 : std::size_t(K * P));
  for (long n = 0; n < N; ++n) {
    for (long g = 0; g < G; ++g) {
      const T* img = input.data() + (n * C + g * Cg) * H * W;
      const T* colp = img;
      if (!direct) {
        im2col(img, Cg, H, W, spec, Ho, Wo, col.data());
        colp = col.data();
      }
      Eigen::Map<const MatR<T>> Wm(weights.data() + g * Cog * K, Cog, K);
      Eigen::Map<const MatR<T>> Cm(colp, K, P);
      Eigen::Map<MatR<T>> Om(out.data() + (n * Co + g * Cog) * P, Cog, P);
      Om.noalias() = Wm * Cm;
      for (long co = 0; co < Cog; ++co) Om.row(co).array() += bias[g * Cog + co];
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weights,
                             const ConvSpec& spec) {
  check_conv_operands(input.shape(), weights.shape(), spec, "conv2d_backward");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long Ho = spec.out_extent_h(H), Wo = spec.out_extent_w(W), P = Ho * Wo;
  const long Co = spec.out_channels, G = spec.groups, Cg = C / G, Cog = Co / G;
  const long K = Cg * spec.kernel_h * spec.kernel_w;
  expect_shape(grad_out.shape(), {std::size_t(N), std::size_t(Co), std::size_t(Ho), std::size_t(Wo)},
               "conv2d_backward grad_out");

  ConvGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), Tensor<T>({std::size_t(Co)})};
  for (long n = 0; n < N; ++n) {
    for (long co = 0; co < Co; ++co) {
      const T* go = grad_out.data() + (n * Co + co) * P;
      T s = 0;
      for (long p = 0; p < P; ++p) s += go[p];
      g.bias[co] += s;
    }
  }

  if (spec.is_depthwise()) {
    const long taps = spec.kernel_h * spec.kernel_w;
    for (long n = 0; n < N; ++n) {
      for (long c = 0; c < C; ++c) {
        depthwise_backward_plane(grad_out.data() + (n * Co + c) * P, input.data() + (n * C + c) * H * W, H, W,
                                 weights.data() + c * taps, spec.kernel_h, spec.kernel_w, spec.stride,
                                 spec.padding, Ho, Wo, g.input.data() + (n * C + c) * H * W,
                                 g.weights.data() + c * taps);
      }
    }
    return g;
  }

  const bool direct = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0;
  std::vector<T> col(direct ? 0 : std::size_t(K * P));
  std::vector<T> gcol(direct ? 0 : std::size_t(K * P));
  for (long n = 0; n < N; ++n) {
    for (long grp = 0; grp < G; ++grp) {
      const T* img = input.data() + (n * C + grp * Cg) * H * W;
      const T* colp = img;
      if (!direct) {
        im2col(img, Cg, H, W, spec, Ho, Wo, col.data());
        colp = col.data();
      }
      Eigen::Map<const MatR<T>> Wm(weights.data() + grp * Cog * K, Cog, K);
      Eigen::Map<const MatR<T>> Cm(colp, K, P);
      Eigen::Map<const MatR<T>> Gm(grad_out.data() + (n * Co + grp * Cog) * P, Cog, P);
      Eigen::Map<MatR<T>> GWm(g.weights.data() + grp * Cog * K, Cog, K);
      GWm.noalias() += Gm * Cm.transpose();
      T* gin = g.input.data() + (n * C + grp * Cg) * H * W;
      if (direct) {
        Eigen::Map<MatR<T>> GIm(gin, K, P);
        GIm.noalias() += Wm.transpose() * Gm;
      } else {
        Eigen::Map<MatR<T>> GCm(gcol.data(), K, P);
        GCm.noalias() = Wm.transpose() * Gm;
        col2im_add(gcol.data(), Cg, H, W, spec, Ho, Wo, gin);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Binomial blur

namespace {

template <typename T>
const T* binomial_taps() {
  static const T taps[9] = {T(1) / 16, T(2) / 16, T(1) / 16, T(2) / 16, T(4) / 16,
                            T(2) / 16, T(1) / 16, T(2) / 16, T(1) / 16};
  return taps;
}

// Reflect padding keeps constants exact at the border.
inline long reflect(long i, long n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// For each output index, the three source indices of the taps (-1, 0, +1).
inline std::vector<long> tap_sources(long out_extent, long extent, int stride) {
  std::vector<long> src(std::size_t(3 * out_extent));
  for (long o = 0; o < out_extent; ++o)
    for (long k = 0; k < 3; ++k) src[std::size_t(3 * o + k)] = reflect(o * stride + k - 1, extent);
  return src;
}

template <typename T>
Tensor<T> blur_impl(const Tensor<T>& input, int stride) {
  require_rank(input.shape(), 4, "blur_pool");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  Tensor<T> out({std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)});
  const auto ry = tap_sources(Ho, H, stride), rx = tap_sources(Wo, W, stride);
  const T* taps = binomial_taps<T>();
  for (long nc = 0; nc < N * C; ++nc) {
    const T* x = input.data() + nc * H * W;
    T* y = out.data() + nc * Ho * Wo;
    for (long oy = 0; oy < Ho; ++oy) {
      for (long ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (long ky = 0; ky < 3; ++ky) {
          const T* row = x + ry[std::size_t(3 * oy + ky)] * W;
          for (long kx = 0; kx < 3; ++kx) acc += taps[ky * 3 + kx] * row[rx[std::size_t(3 * ox + kx)]];
        }
        y[oy * Wo + ox] = acc;
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> blur_pool(const Tensor<T>& input, int stride) {
  if (stride < 2) {
    throw std::invalid_argument("blur_pool: stride must be >= 2, got " + std::to_string(stride));
  }
  return blur_impl(input, stride);
}

template <typename T>
Tensor<T> binomial_blur(const Tensor<T>& input) {
  return blur_impl(input, 1);
}

template <typename T>
Tensor<T> blur_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape, int stride) {
  if (stride < 1) throw std::invalid_argument("blur_pool_backward: stride must be >= 1");
  require_rank(input_shape, 4, "blur_pool_backward");
  const long N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  const long Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  expect_shape(grad_out.shape(), {std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)},
               "blur_pool_backward grad_out");
  Tensor<T> gin(input_shape);
  const auto ry = tap_sources(Ho, H, stride), rx = tap_sources(Wo, W, stride);
  const T* taps = binomial_taps<T>();
  for (long nc = 0; nc < N * C; ++nc) {
    const T* g = grad_out.data() + nc * Ho * Wo;
    T* gi = gin.data() + nc * H * W;
    for (long oy = 0; oy < Ho; ++oy) {
      for (long ox = 0; ox < Wo; ++ox) {
        const T v = g[oy * Wo + ox];
        for (long ky = 0; ky < 3; ++ky) {
          T* row = gi + ry[std::size_t(3 * oy + ky)] * W;
          for (long kx = 0; kx < 3; ++kx) row[rx[std::size_t(3 * ox + kx)]] += taps[ky * 3 + kx] * v;
        }
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Pooling and resampling

template <typename T>
Tensor<T> max_pool(const Tensor<T>& input, int kernel, int stride, int padding) {
  require_rank(input.shape(), 4, "max_pool");
  if (kernel < 1 || stride < 1 || padding < 0 || padding >= kernel) {
    throw std::invalid_argument("max_pool: invalid kernel/stride/padding");
  }
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H + 2 * padding < kernel || W + 2 * padding < kernel) {
    throw ShapeError("max_pool: input " + shape_str(input.shape()) + " smaller than kernel");
  }
  const long Ho = (H + 2 * padding - kernel) / stride + 1, Wo = (W + 2 * padding - kernel) / stride + 1;
  Tensor<T> out({std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* in = input.data() + nc * H * W;
    T* o = out.data() + nc * Ho * Wo;
    for (long oh = 0; oh < Ho; ++oh) {
      const long h0 = std::max(0L, oh * stride - padding), h1 = std::min(H, oh * stride - padding + kernel);
      for (long ow = 0; ow < Wo; ++ow) {
        const long w0 = std::max(0L, ow * stride - padding), w1 = std::min(W, ow * stride - padding + kernel);
        T m = -std::numeric_limits<T>::infinity();
        for (long h = h0; h < h1; ++h)
          for (long w = w0; w < w1; ++w) m = std::max(m, in[h * W + w]);
        o[oh * Wo + ow] = m;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> max_pool_backward(const Tensor<T>& grad_out, const Tensor<T>& input, int kernel, int stride,
                            int padding) {
  require_rank(input.shape(), 4, "max_pool_backward");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long Ho = (H + 2 * padding - kernel) / stride + 1, Wo = (W + 2 * padding - kernel) / stride + 1;
  expect_shape(grad_out.shape(), {std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)},
               "max_pool_backward grad_out");
  Tensor<T> gin(input.shape());
  for (long nc = 0; nc < N * C; ++nc) {
    const T* in = input.data() + nc * H * W;
    T* gi = gin.data() + nc * H * W;
    const T* go = grad_out.data() + nc * Ho * Wo;
    for (long oh = 0; oh < Ho; ++oh) {
      const long h0 = std::max(0L, oh * stride - padding), h1 = std::min(H, oh * stride - padding + kernel);
      for (long ow = 0; ow < Wo; ++ow) {
        const long w0 = std::max(0L, ow * stride - padding), w1 = std::min(W, ow * stride - padding + kernel);
        long best = h0 * W + w0;
        for (long h = h0; h < h1; ++h)
          for (long w = w0; w < w1; ++w)
            if (in[h * W + w] > in[best]) best = h * W + w;
        gi[best] += go[oh * Wo + ow];
      }
    }
  }
  return gin;
}

template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& input, int factor) {
  require_rank(input.shape(), 4, "nearest_upsample");
  if (factor < 1) throw std::invalid_argument("nearest_upsample: factor must be >= 1");
  const long N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const long Ho = H * factor, Wo = W * factor;
  Tensor<T> out({std::size_t(N), std::size_t(C), std::size_t(Ho), std::size_t(Wo)});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* in = input.data() + nc * H * W;
    T* o = out.data() + nc * Ho * Wo;
    for (long oh = 0; oh < Ho; ++oh) {
      const T* src = in + (oh / factor) * W;
      T* dst = o + oh * Wo;
      for (long ow = 0; ow < Wo; ++ow) dst[ow] = src[ow / factor];
    }
  }
  return out;
}

template <typename T>
Tensor<T> nearest_upsample_backward(const Tensor<T>& grad_out, int factor) {
  require_rank(grad_out.shape(), 4, "nearest_upsample_backward");
  const long N = grad_out.dim(0), C = grad_out.dim(1), Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  if (factor < 1 || Ho % factor || Wo % factor) {
    throw ShapeError("nearest_upsample_backward: extent not divisible by factor");
  }
  const long H = Ho / factor, W = Wo / factor;
  Tensor<T> gin({std::size_t(N), std::size_t(C), std::size_t(H), std::size_t(W)});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* go = grad_out.data() + nc * Ho * Wo;
    T* gi = gin.data() + nc * H * W;
    for (long oh = 0; oh < Ho; ++oh) {
      T* dst = gi + (oh / factor) * W;
      const T* src = go + oh * Wo;
      for (long ow = 0; ow < Wo; ++ow) dst[ow / factor] += src[ow];
    }
  }
  return gin;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "global_avg_pool");
  const long N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out({std::size_t(N), std::size_t(C)});
  for (long nc = 0; nc < N * C; ++nc) {
    const T* in = input.data() + nc * HW;
    T s = 0;
    for (long i = 0; i < HW; ++i) s += in[i];
    out[nc] = s / T(HW);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  require_rank(input_shape, 4, "global_avg_pool_backward");
  expect_shape(grad_out.shape(), {input_shape[0], input_shape[1]}, "global_avg_pool_backward grad_out");
  const long NC = input_shape[0] * input_shape[1], HW = input_shape[2] * input_shape[3];
  Tensor<T> gin(input_shape);
  for (long nc = 0; nc < NC; ++nc) {
    const T v = grad_out[nc] / T(HW);
    std::fill(gin.data() + nc * HW, gin.data() + (nc + 1) * HW, v);
  }
  return gin;
}

template <typename T>
Tensor<T> standardize(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "standardize");
  const long N = input.dim(0), M = input.dim(1) * input.dim(2) * input.dim(3);
  if (M == 0) throw ShapeError("standardize: empty sample");
  Tensor<T> out(input.shape());
  for (long n = 0; n < N; ++n) {
    const T* x = input.data() + n * M;
    T* y = out.data() + n * M;
    double mean = 0, var = 0;
    for (long i = 0; i < M; ++i) mean += x[i];
    mean /= double(M);
    for (long i = 0; i < M; ++i) var += (x[i] - mean) * (x[i] - mean);
    const double inv = 1.0 / std::sqrt(var / double(M) + kStandardizeEps);
    for (long i = 0; i < M; ++i) y[i] = static_cast<T>((x[i] - mean) * inv);
  }
  return out;
}

template <typename T>
Tensor<T> standardize_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& y) {
  expect_shape(grad_out.shape(), input.shape(), "standardize_backward grad_out");
  expect_shape(y.shape(), input.shape(), "standardize_backward output");
  const long N = input.dim(0), M = input.dim(1) * input.dim(2) * input.dim(3);
  Tensor<T> gin(input.shape());
  for (long n = 0; n < N; ++n) {
    const T* x = input.data() + n * M;
    const T* g = grad_out.data() + n * M;
    const T* yy = y.data() + n * M;
    double mean = 0, var = 0, gm = 0, gy = 0;
    for (long i = 0; i < M; ++i) mean += x[i];
    mean /= double(M);
    for (long i = 0; i < M; ++i) {
      var += (x[i] - mean) * (x[i] - mean);
      gm += g[i];
      gy += double(g[i]) * yy[i];
    }
    const double inv = 1.0 / std::sqrt(var / double(M) + kStandardizeEps);
    gm /= double(M);
    gy /= double(M);
    T* out = gin.data() + n * M;
    for (long i = 0; i < M; ++i) out[i] = static_cast<T>(inv * (g[i] - gm - yy[i] * gy));
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  relu_inplace(y);
  return y;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  expect_shape(grad_out.shape(), x.shape(), "relu_backward");
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    // Branch on sign so exp never overflows.
    if (v >= 0) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& y) {
  expect_shape(grad_out.shape(), y.shape(), "sigmoid_backward");
  Tensor<T> g(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) g[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return g;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "fully_connected input");
  require_rank(weights.shape(), 2, "fully_connected weights");
  const long N = x.dim(0), F = x.dim(1), O = weights.dim(0);
  require_dim(weights.dim(1), F, "fully_connected", "weight fan-in (dim 1)");
  expect_shape(bias.shape(), {std::size_t(O)}, "fully_connected bias");
  Tensor<T> y({std::size_t(N), std::size_t(O)});
  Eigen::Map<const MatR<T>> X(x.data(), N, F), Wm(weights.data(), O, F);
  Eigen::Map<MatR<T>> Y(y.data(), N, O);
  Y.noalias() = X * Wm.transpose();
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o) Y(n, o) += bias[o];
  return y;
}

template <typename T>
LinearGrads<T> fully_connected_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& weights) {
  require_rank(x.shape(), 2, "fully_connected_backward input");
  const long N = x.dim(0), F = x.dim(1), O = weights.dim(0);
  expect_shape(grad_out.shape(), {std::size_t(N), std::size_t(O)}, "fully_connected_backward grad_out");
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weights.shape()), Tensor<T>({std::size_t(O)})};
  Eigen::Map<const MatR<T>> X(x.data(), N, F), Wm(weights.data(), O, F), G(grad_out.data(), N, O);
  Eigen::Map<MatR<T>>(g.input.data(), N, F).noalias() = G * Wm;
  Eigen::Map<MatR<T>>(g.weights.data(), O, F).noalias() = G.transpose() * X;
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o) g.bias[o] += G(n, o);
  return g;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax");
  const long N = logits.dim(0), C = logits.dim(1);
  if (C == 0) throw ShapeError("softmax: empty class axis");
  Tensor<T> p(logits.shape());
  for (long n = 0; n < N; ++n) {
    const T* z = logits.data() + n * C;
    T* out = p.data() + n * C;
    const T m = *std::max_element(z, z + C);
    T s = 0;
    for (long c = 0; c < C; ++c) s += (out[c] = std::exp(z[c] - m));
    for (long c = 0; c < C; ++c) out[c] /= s;
  }
  return p;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_out, const Tensor<T>& probs) {
  expect_shape(grad_out.shape(), probs.shape(), "softmax_backward");
  const long N = probs.dim(0), C = probs.dim(1);
  Tensor<T> g(probs.shape());
  for (long n = 0; n < N; ++n) {
    const T* p = probs.data() + n * C;
    const T* go = grad_out.data() + n * C;
    T dot = 0;
    for (long c = 0; c < C; ++c) dot += go[c] * p[c];
    for (long c = 0; c < C; ++c) g[n * C + c] = p[c] * (go[c] - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b) {
  expect_shape(b.shape(), acc.shape(), "add");
  T* d = acc.data();
  const T* s = b.data();
  for (std::size_t i = 0; i < acc.numel(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  expect_shape(b.shape(), a.shape(), "multiply");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts.front()->shape();
  require_rank(s0, 4, "concat_channels");
  std::size_t channels = 0;
  for (const auto* p : parts) {
    require_rank(p->shape(), 4, "concat_channels");
    require_dim(p->dim(0), s0[0], "concat_channels", "batch (dim 0)");
    require_dim(p->dim(2), s0[2], "concat_channels", "height (dim 2)");
    require_dim(p->dim(3), s0[3], "concat_channels", "width (dim 3)");
    channels += p->dim(1);
  }
  const std::size_t N = s0[0], HW = s0[2] * s0[3];
  Tensor<T> out({N, channels, s0[2], s0[3]});
  for (std::size_t n = 0; n < N; ++n) {
    T* dst = out.data() + n * channels * HW;
    for (const auto* p : parts) {
      const std::size_t block = p->dim(1) * HW;
      const T* src = p->data() + n * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x.shape(), 4, "slice_channels");
  if (begin + count > x.dim(1)) throw ShapeError("slice_channels: range exceeds channel count");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    const T* src = x.data() + (n * C + begin) * HW;
    std::copy(src, src + count * HW, out.data() + n * count * HW);
  }
  return out;
}

#define VQI_INSTANTIATE_KERNELS(T)                                                                     \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&); \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&); \
  template Tensor<T> blur_pool(const Tensor<T>&, int);                                                \
  template Tensor<T> binomial_blur(const Tensor<T>&);                                                 \
  template Tensor<T> blur_pool_backward(const Tensor<T>&, const Shape&, int);                         \
  template Tensor<T> max_pool(const Tensor<T>&, int, int, int);                                       \
  template Tensor<T> max_pool_backward(const Tensor<T>&, const Tensor<T>&, int, int, int);            \
  template Tensor<T> nearest_upsample(const Tensor<T>&, int);                                         \
  template Tensor<T> nearest_upsample_backward(const Tensor<T>&, int);                                \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                               \
  template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                        \
  template Tensor<T> standardize(const Tensor<T>&);                                                   \
  template Tensor<T> standardize_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> relu(const Tensor<T>&);                                                          \
  template void relu_inplace(Tensor<T>&);                                                             \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template LinearGrads<T> fully_connected_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> softmax(const Tensor<T>&);                                                       \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> multiply(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);                              \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);

VQI_INSTANTIATE_KERNELS(float)
VQI_INSTANTIATE_KERNELS(double)

#undef VQI_INSTANTIATE_KERNELS

}  // namespace vqi
