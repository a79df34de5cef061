#pragma once

// Forward and backward kernels on plain tensors. The tape in autodiff.hpp
// wires these together; evaluation-only paths may call them directly.
// Reductions accumulate in double and round once on store.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ctta/channel_stats.hpp"
#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta::kernels {

struct ConvGeometry {
  std::size_t n, c, h, w;       // input
  std::size_t o, kh, kw;        // weight
  std::size_t oh, ow;           // output
  std::size_t stride, pad;
};

template <class T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                           const BasicTensor<T>& bias, std::size_t stride, std::size_t pad) {
  if (input.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
    throw ConfigError("conv2d: expected NCHW input, OIKhKw weight and O bias, got " +
                      shape_str(input.shape()) + ", " + shape_str(weight.shape()) + ", " +
                      shape_str(bias.shape()));
  }
  if (input.dim(1) != weight.dim(1) || bias.dim(0) != weight.dim(0)) {
    throw ConfigError("conv2d: shape mismatch between input " + shape_str(input.shape()) +
                      " and weight " + shape_str(weight.shape()) + " / bias " +
                      shape_str(bias.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                 weight.dim(2), weight.dim(3), 0, 0, stride, pad};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw ConfigError("conv2d: kernel " + shape_str(weight.shape()) +
                      " does not fit padded input " + shape_str(input.shape()));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

namespace detail {

// Unfolds one image into a (C*Kh*Kw) x (OH*OW) matrix of doubles.
template <class T>
void im2col(const T* image, const ConvGeometry& g, std::vector<double>& col) {
  const std::size_t plane = g.oh * g.ow;
  col.assign(g.c * g.kh * g.kw * plane, 0.0);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* src = image + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        double* dst = col.data() + row * plane;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* srow = src + static_cast<std::size_t>(iy) * g.w;
          double* drow = dst + y * g.ow;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) {
              drow[x] = static_cast<double>(srow[static_cast<std::size_t>(ix)]);
            }
          }
        }
      }
    }
  }
}

// Folds a column-gradient matrix back into image layout (accumulating).
inline void col2im(const std::vector<double>& col, const ConvGeometry& g, double* image) {
  const std::size_t plane = g.oh * g.ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* dst = image + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        const double* src = col.data() + row * plane;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* drow = dst + static_cast<std::size_t>(iy) * g.w;
          const double* srow = src + y * g.ow;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) drow[ix] += srow[x];
          }
        }
      }
    }
  }
}

// Dot product with eight fixed partial sums; the summation order depends only
// on the length, so results are reproducible.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) s[j] += a[i + j] * b[i + j];
  }
  for (; i < n; ++i) s[0] += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// Four dot products of rows a, a + stride, a + 2 stride, a + 3 stride with b,
// each summed in the same order as dot().
inline void dot4(const double* a, std::size_t stride, const double* b, std::size_t n, double* out) {
  double s[4][8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t r = 0; r < 4; ++r) {
      const double* ar = a + r * stride + i;
      for (std::size_t j = 0; j < 8; ++j) s[r][j] += ar[j] * b[i + j];
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t t = i; t < n; ++t) s[r][0] += a[r * stride + t] * b[t];
    out[r] = ((s[r][0] + s[r][1]) + (s[r][2] + s[r][3])) + ((s[r][4] + s[r][5]) + (s[r][6] + s[r][7]));
  }
}

}  // namespace detail

/// Cross-correlation with zero padding.
template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, pad);
  BasicTensor<T> out(Shape{g.n, g.o, g.oh, g.ow});
  const std::size_t plane = g.oh * g.ow;
  const std::size_t kdim = g.c * g.kh * g.kw;
  std::vector<double> col;
  std::vector<double> acc(4 * plane);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(input.data() + n * g.c * g.h * g.w, g, col);
    // Four output channels per pass share each column row read.
    for (std::size_t o0 = 0; o0 < g.o; o0 += 4) {
      const std::size_t ob = std::min<std::size_t>(4, g.o - o0);
      for (std::size_t j = 0; j < ob; ++j) {
        std::fill_n(acc.data() + j * plane, plane, static_cast<double>(bias[o0 + j]));
      }
      for (std::size_t k = 0; k < kdim; ++k) {
        const double* cr = col.data() + k * plane;
        for (std::size_t j = 0; j < ob; ++j) {
          const double wv = static_cast<double>(weight[(o0 + j) * kdim + k]);
          if (wv == 0.0) continue;
          double* a = acc.data() + j * plane;
          for (std::size_t p = 0; p < plane; ++p) a[p] += wv * cr[p];
        }
      }
      for (std::size_t j = 0; j < ob; ++j) {
        T* dst = out.data() + (n * g.o + o0 + j) * plane;
        const double* a = acc.data() + j * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<T>(a[p]);
      }
    }
  }
  return out;
}

template <class T>
struct ConvGrads {
  BasicTensor<T> input, weight, bias;
};

/// Gradients of conv2d. Only the requested ones are computed; the others are
/// left empty.
template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias, const BasicTensor<T>& grad_out,
                             std::size_t stride, std::size_t pad, bool need_input,
                             bool need_weight, bool need_bias) {
  const ConvGeometry g = conv_geometry(input, weight, bias, stride, pad);
  const std::size_t plane = g.oh * g.ow;
  const std::size_t kdim = g.c * g.kh * g.kw;
  ConvGrads<T> grads;
  std::vector<double> gw(need_weight ? g.o * kdim : 0, 0.0);
  std::vector<double> gb(need_bias ? g.o : 0, 0.0);
  std::vector<double> gin;
  if (need_input) gin.assign(g.n * g.c * g.h * g.w, 0.0);
  std::vector<double> col, gcol, gout(g.o * plane);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* go = grad_out.data() + n * g.o * plane;
    for (std::size_t i = 0; i < g.o * plane; ++i) gout[i] = static_cast<double>(go[i]);
    if (need_bias) {
      for (std::size_t o = 0; o < g.o; ++o) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += gout[o * plane + p];
        gb[o] += s;
      }
    }
    if (need_weight) {
      detail::im2col(input.data() + n * g.c * g.h * g.w, g, col);
      std::size_t o = 0;
      for (; o + 4 <= g.o; o += 4) {
        for (std::size_t k = 0; k < kdim; ++k) {
          double d[4];
          detail::dot4(gout.data() + o * plane, plane, col.data() + k * plane, plane, d);
          for (std::size_t j = 0; j < 4; ++j) gw[(o + j) * kdim + k] += d[j];
        }
      }
      for (; o < g.o; ++o) {
        for (std::size_t k = 0; k < kdim; ++k) {
          gw[o * kdim + k] += detail::dot(gout.data() + o * plane, col.data() + k * plane, plane);
        }
      }
    }
    if (need_input) {
      gcol.assign(kdim * plane, 0.0);
      for (std::size_t o = 0; o < g.o; ++o) {
        const double* gr = gout.data() + o * plane;
        for (std::size_t k = 0; k < kdim; ++k) {
          const double wv = static_cast<double>(weight[o * kdim + k]);
          if (wv == 0.0) continue;
          double* dst = gcol.data() + k * plane;
          for (std::size_t p = 0; p < plane; ++p) dst[p] += wv * gr[p];
        }
      }
      detail::col2im(gcol, g, gin.data() + n * g.c * g.h * g.w);
    }
  }
  auto round = [](const std::vector<double>& src, Shape shape) {
    BasicTensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < src.size(); ++i) t[i] = static_cast<T>(src[i]);
    return t;
  };
  if (need_input) grads.input = round(gin, input.shape());
  if (need_weight) grads.weight = round(gw, weight.shape());
  if (need_bias) grads.bias = round(gb, bias.shape());
  return grads;
}

inline std::vector<double> inv_std(const ChannelStats& stats, double eps) {
  std::vector<double> inv(stats.channels());
  for (std::size_t c = 0; c < inv.size(); ++c) {
    if (!(stats.sigma[c] > 0.0)) {
      throw NumericError("batchnorm2d: nonpositive sigma " + std::to_string(stats.sigma[c]) +
                         " in channel " + std::to_string(c));
    }
    inv[c] = 1.0 / std::sqrt(stats.sigma[c] * stats.sigma[c] + eps);
  }
  return inv;
}

/// scale * (x - mu) / sqrt(sigma^2 + eps) + shift with externally supplied stats.
template <class T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, const ChannelStats& stats,
                                 const BasicTensor<T>& scale, const BasicTensor<T>& shift,
                                 double eps) {
  if (input.rank() != 4 || stats.channels() != input.dim(1) || scale.size() != input.dim(1) ||
      shift.size() != input.dim(1)) {
    throw ConfigError("batchnorm2d: channel mismatch between input " + shape_str(input.shape()) +
                      " and stats/scale/shift of length " + std::to_string(stats.channels()) +
                      "/" + std::to_string(scale.size()) + "/" + std::to_string(shift.size()));
  }
  const std::vector<double> inv = inv_std(stats, eps);
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  BasicTensor<T> out(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = static_cast<double>(scale[ch]) * inv[ch];
      const double mu = stats.mu[ch];
      const double sh = static_cast<double>(shift[ch]);
      const T* src = input.data() + (b * c + ch) * plane;
      T* dst = out.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] = static_cast<T>(a * (static_cast<double>(src[i]) - mu) + sh);
      }
    }
  }
  return out;
}

template <class T>
struct BatchNormGrads {
  BasicTensor<T> input, scale, shift;
};

template <class T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& input, const ChannelStats& stats,
                                     const BasicTensor<T>& scale, const BasicTensor<T>& grad_out,
                                     double eps, bool need_input, bool need_affine) {
  const std::vector<double> inv = inv_std(stats, eps);
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  BatchNormGrads<T> g;
  if (need_input) g.input = BasicTensor<T>(input.shape());
  std::vector<double> gs(c, 0.0), gsh(c, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const double a = static_cast<double>(scale[ch]) * inv[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        const double gy = static_cast<double>(grad_out[off + i]);
        if (need_affine) {
          gs[ch] += gy * (static_cast<double>(input[off + i]) - stats.mu[ch]) * inv[ch];
          gsh[ch] += gy;
        }
        if (need_input) g.input[off + i] = static_cast<T>(gy * a);
      }
    }
  }
  if (need_affine) {
    g.scale = BasicTensor<T>(Shape{c});
    g.shift = BasicTensor<T>(Shape{c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      g.scale[ch] = static_cast<T>(gs[ch]);
      g.shift[ch] = static_cast<T>(gsh[ch]);
    }
  }
  return g;
}

/// Training-mode batch norm: normalizes with the batch's own moments and
/// differentiates through them. Returns the output; `moments` receives
/// (mean, population variance) per channel.
template <class T>
BasicTensor<T> batchnorm_train_forward(const BasicTensor<T>& input, const BasicTensor<T>& scale,
                                       const BasicTensor<T>& shift, double eps,
                                       std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  const double count = static_cast<double>(n * plane);
  mean.assign(c, 0.0);
  var.assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = input.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
    }
    mean[ch] = s / count;
    double sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = input.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mean[ch];
        sq += d * d;
      }
    }
    var[ch] = sq / count;
  }
  BasicTensor<T> out(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv = 1.0 / std::sqrt(var[ch] + eps);
      const double a = static_cast<double>(scale[ch]) * inv;
      const double sh = static_cast<double>(shift[ch]);
      const T* src = input.data() + (b * c + ch) * plane;
      T* dst = out.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] = static_cast<T>(a * (static_cast<double>(src[i]) - mean[ch]) + sh);
      }
    }
  }
  return out;
}

template <class T>
BatchNormGrads<T> batchnorm_train_backward(const BasicTensor<T>& input,
                                           const std::vector<double>& mean,
                                           const std::vector<double>& var,
                                           const BasicTensor<T>& scale,
                                           const BasicTensor<T>& grad_out, double eps,
                                           bool need_input, bool need_affine) {
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  const double count = static_cast<double>(n * plane);
  BatchNormGrads<T> g;
  if (need_input) g.input = BasicTensor<T>(input.shape());
  if (need_affine) {
    g.scale = BasicTensor<T>(Shape{c});
    g.shift = BasicTensor<T>(Shape{c});
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(var[ch] + eps);
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double gy = static_cast<double>(grad_out[off + i]);
        sum_gy += gy;
        sum_gy_xhat += gy * (static_cast<double>(input[off + i]) - mean[ch]) * inv;
      }
    }
    if (need_affine) {
      g.scale[ch] = static_cast<T>(sum_gy_xhat);
      g.shift[ch] = static_cast<T>(sum_gy);
    }
    if (need_input) {
      const double a = static_cast<double>(scale[ch]) * inv / count;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (static_cast<double>(input[off + i]) - mean[ch]) * inv;
          const double gy = static_cast<double>(grad_out[off + i]);
          g.input[off + i] = static_cast<T>(a * (count * gy - sum_gy - xhat * sum_gy_xhat));
        }
      }
    }
  }
  return g;
}

template <class T>
BasicTensor<T> upsample_nearest_forward(const BasicTensor<T>& input, std::size_t factor) {
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be >= 1");
  if (input.rank() != 4) {
    throw ConfigError("upsample_nearest expects NCHW, got " + shape_str(input.shape()));
  }
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  BasicTensor<T> out(Shape{input.dim(0), input.dim(1), h * factor, w * factor});
  const std::size_t ow = w * factor;
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = input.data() + p * h * w;
    T* dst = out.data() + p * h * w * factor * factor;
    for (std::size_t y = 0; y < h * factor; ++y) {
      const T* srow = src + (y / factor) * w;
      T* drow = dst + y * ow;
      for (std::size_t x = 0; x < ow; ++x) drow[x] = srow[x / factor];
    }
  }
  return out;
}

template <class T>
BasicTensor<T> upsample_nearest_backward(const BasicTensor<T>& grad_out, std::size_t factor) {
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t h = grad_out.dim(2) / factor, w = grad_out.dim(3) / factor;
  BasicTensor<T> gin(Shape{n, c, h, w});
  std::vector<double> acc(h * w);
  const std::size_t ow = w * factor;
  for (std::size_t p = 0; p < n * c; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* src = grad_out.data() + p * h * w * factor * factor;
    for (std::size_t y = 0; y < h * factor; ++y) {
      const T* srow = src + y * ow;
      double* arow = acc.data() + (y / factor) * w;
      for (std::size_t x = 0; x < ow; ++x) arow[x / factor] += static_cast<double>(srow[x]);
    }
    T* dst = gin.data() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = static_cast<T>(acc[i]);
  }
  return gin;
}

/// Per-pixel softmax over the channel axis with max subtraction.
template <class T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  if (logits.rank() != 4 || logits.dim(1) < 2) {
    throw ConfigError("softmax_channels expects NKHW with K >= 2, got " +
                      shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  BasicTensor<T> out(logits.shape());
  std::vector<double> e(k);
  for (std::size_t b = 0; b < n; ++b) {
    const T* z = logits.data() + b * k * plane;
    T* p = out.data() + b * k * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double m = static_cast<double>(z[i]);
      for (std::size_t c = 1; c < k; ++c) m = std::max(m, static_cast<double>(z[c * plane + i]));
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        e[c] = std::exp(static_cast<double>(z[c * plane + i]) - m);
        s += e[c];
      }
      for (std::size_t c = 0; c < k; ++c) p[c * plane + i] = static_cast<T>(e[c] / s);
    }
  }
  return out;
}

/// Per-pixel Shannon entropy (nats) of NKHW probabilities, clamped to
/// [0, ln K]; 0 * ln 0 counts as 0.
template <class T>
BasicTensor<T> entropy_map(const BasicTensor<T>& probs) {
  if (probs.rank() != 4) throw ConfigError("entropy_map expects NKHW, got " + shape_str(probs.shape()));
  const std::size_t n = probs.dim(0), k = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  const double max_h = std::log(static_cast<double>(k));
  BasicTensor<T> out(Shape{n, 1, probs.dim(2), probs.dim(3)});
  for (std::size_t b = 0; b < n; ++b) {
    const T* p = probs.data() + b * k * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double h = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double v = static_cast<double>(p[c * plane + i]);
        if (v > 0.0) h -= v * std::log(v);
      }
      out[b * plane + i] = static_cast<T>(std::clamp(h, 0.0, max_h));
    }
  }
  return out;
}

/// Mean over all pixels of the entropy map.
template <class T>
double mean_entropy(const BasicTensor<T>& probs) {
  const BasicTensor<T> h = entropy_map(probs);
  double s = 0.0;
  for (T v : h.values()) s += static_cast<double>(v);
  return s / static_cast<double>(h.size());
}

namespace detail {

// log-softmax of one pixel's logits into `logp`, returning nothing; used by the
// fused losses so that log p never sees an underflowed zero.
template <class T>
void log_softmax_pixel(const T* z, std::size_t k, std::size_t stride, std::vector<double>& logp) {
  double m = static_cast<double>(z[0]);
  for (std::size_t c = 1; c < k; ++c) m = std::max(m, static_cast<double>(z[c * stride]));
  double s = 0.0;
  for (std::size_t c = 0; c < k; ++c) s += std::exp(static_cast<double>(z[c * stride]) - m);
  const double lse = m + std::log(s);
  for (std::size_t c = 0; c < k; ++c) logp[c] = static_cast<double>(z[c * stride]) - lse;
}

}  // namespace detail

/// Mean prediction entropy over pixels with mask == 1, and its gradient with
/// respect to the logits. An all-zero mask yields loss 0 and a zero gradient.
template <class T>
double masked_entropy_loss(const BasicTensor<T>& logits, const BasicTensor<T>& mask,
                           BasicTensor<T>* grad) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  if (mask.size() != n * plane) {
    throw ConfigError("masked entropy loss: mask " + shape_str(mask.shape()) +
                      " does not match logits " + shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (T m : mask.values()) count += (m != T{0}) ? 1 : 0;
  if (grad) *grad = BasicTensor<T>(logits.shape());
  if (count == 0) return 0.0;
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<double> logp(k);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask[b * plane + i] == T{0}) continue;
      const T* z = logits.data() + b * k * plane + i;
      detail::log_softmax_pixel(z, k, plane, logp);
      double h = 0.0;
      for (std::size_t c = 0; c < k; ++c) h -= std::exp(logp[c]) * logp[c];
      total += h;
      if (grad) {
        T* g = grad->data() + b * k * plane + i;
        for (std::size_t c = 0; c < k; ++c) {
          g[c * plane] = static_cast<T>(-std::exp(logp[c]) * (logp[c] + h) * inv_count);
        }
      }
    }
  }
  return total * inv_count;
}

/// Mean over pixels of -sum_k q_k ln p_k, gradient with respect to logits.
template <class T>
double cross_entropy_loss(const BasicTensor<T>& logits, const BasicTensor<T>& target,
                          BasicTensor<T>* grad) {
  if (logits.shape() != target.shape()) {
    throw ConfigError("cross_entropy: logits " + shape_str(logits.shape()) +
                      " vs target " + shape_str(target.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const double inv_count = 1.0 / static_cast<double>(n * plane);
  if (grad) *grad = BasicTensor<T>(logits.shape());
  std::vector<double> logp(k);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const T* z = logits.data() + b * k * plane + i;
      const T* q = target.data() + b * k * plane + i;
      detail::log_softmax_pixel(z, k, plane, logp);
      double qsum = 0.0, l = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double qc = static_cast<double>(q[c * plane]);
        qsum += qc;
        l -= qc * logp[c];
      }
      total += l;
      if (grad) {
        T* g = grad->data() + b * k * plane + i;
        for (std::size_t c = 0; c < k; ++c) {
          g[c * plane] = static_cast<T>(
              (std::exp(logp[c]) * qsum - static_cast<double>(q[c * plane])) * inv_count);
        }
      }
    }
  }
  return total * inv_count;
}

}  // namespace ctta::kernels
