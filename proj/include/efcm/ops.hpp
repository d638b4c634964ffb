#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "efcm/tensor.hpp"

// Primitive forward/backward kernels. All functions are pure with respect to
// their inputs (outputs are freshly allocated) and validate shapes. Every
// forward checks its output for NaN/Inf: non-finite values are an error,
// never a silent result.

namespace efcm {

struct ConvSpec {
  size_t stride = 1;
  size_t pad = 0;
  size_t dilation = 1;
  size_t groups = 1;
};

/// Kernel layout is (out_ch, in_ch/groups, k, k); bias may be empty.
template <typename T>
struct ConvParams {
  Tensor<T> kernel;
  Tensor<T> bias;
  ConvSpec spec;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite())
    throw std::runtime_error(std::string(op) + ": non-finite value in output");
}

inline size_t conv_out_extent(size_t in, size_t k, size_t stride, size_t pad, size_t dil) {
  long long num = static_cast<long long>(in) + 2 * static_cast<long long>(pad) -
                  static_cast<long long>(dil) * (static_cast<long long>(k) - 1) - 1;
  require(num >= 0, "conv2d: spatial extent too small for one output position");
  return static_cast<size_t>(num / static_cast<long long>(stride)) + 1;
}

// Valid output range [o_lo, o_hi) such that 0 <= o*stride - pad + tap < in.
inline void conv_tap_range(size_t in, size_t out, size_t stride, size_t pad, long long tap,
                           size_t& o_lo, size_t& o_hi) {
  long long lo_num = static_cast<long long>(pad) - tap;
  long long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long long>(stride) - 1) /
                                       static_cast<long long>(stride);
  long long hi = (static_cast<long long>(in) - 1 + static_cast<long long>(pad) - tap) /
                 static_cast<long long>(stride);
  lo = std::max(lo, 0ll);
  hi = std::min(hi, static_cast<long long>(out) - 1);
  if (hi < lo) {
    o_lo = o_hi = 0;
  } else {
    o_lo = static_cast<size_t>(lo);
    o_hi = static_cast<size_t>(hi) + 1;
  }
}

}  // namespace detail

/// Cross-correlation on (N, C_in, H, W) with square kernels.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                         const ConvSpec& s) {
  detail::require(x.rank() == 4, "conv2d: input must be (N,C,H,W)");
  detail::require(w.rank() == 4, "conv2d: kernel must be (out,in/g,k,k)");
  detail::require(s.dilation >= 1 && s.stride >= 1, "conv2d: stride/dilation must be >= 1");
  const size_t n = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const size_t co = w.extent(0), cig = w.extent(1), k = w.extent(2);
  detail::require(w.extent(3) == k, "conv2d: kernel must be square");
  detail::require(s.groups >= 1 && ci % s.groups == 0 && co % s.groups == 0,
                  "conv2d: groups must divide both channel counts");
  detail::require(cig == ci / s.groups, "conv2d: kernel in-channel extent mismatch");
  detail::require(bias.empty() || (bias.rank() == 1 && bias.extent(0) == co),
                  "conv2d: bias must be (out_ch)");
  const size_t ho = detail::conv_out_extent(h, k, s.stride, s.pad, s.dilation);
  const size_t wo = detail::conv_out_extent(wd, k, s.stride, s.pad, s.dilation);

  Tensor<T> y({n, co, ho, wo});
  const size_t co_g = co / s.groups;
  for (size_t b = 0; b < n; ++b) {
    for (size_t g = 0; g < s.groups; ++g) {
      for (size_t oc = g * co_g; oc < (g + 1) * co_g; ++oc) {
        T* yc = &y.at4(b, oc, 0, 0);
        if (!bias.empty()) {
          const T bv = bias[oc];
          for (size_t i = 0; i < ho * wo; ++i) yc[i] = bv;
        }
        for (size_t icg = 0; icg < cig; ++icg) {
          const size_t ic = g * cig + icg;
          const T* xc = &x.at4(b, ic, 0, 0);
          for (size_t ky = 0; ky < k; ++ky) {
            const long long ty = static_cast<long long>(ky * s.dilation);
            size_t oy_lo, oy_hi;
            detail::conv_tap_range(h, ho, s.stride, s.pad, ty, oy_lo, oy_hi);
            for (size_t kx = 0; kx < k; ++kx) {
              const long long tx = static_cast<long long>(kx * s.dilation);
              size_t ox_lo, ox_hi;
              detail::conv_tap_range(wd, wo, s.stride, s.pad, tx, ox_lo, ox_hi);
              const T wv = w.at4(oc, icg, ky, kx);
              if (wv == T(0)) continue;
              for (size_t oy = oy_lo; oy < oy_hi; ++oy) {
                const size_t iy = oy * s.stride - s.pad + static_cast<size_t>(ty);
                const T* xrow = xc + iy * wd - s.pad + static_cast<size_t>(tx);
                T* yrow = yc + oy * wo;
                if (s.stride == 1) {
                  for (size_t ox = ox_lo; ox < ox_hi; ++ox) yrow[ox] += wv * xrow[ox];
                } else {
                  for (size_t ox = ox_lo; ox < ox_hi; ++ox)
                    yrow[ox] += wv * xrow[ox * s.stride];
                }
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite(y, "conv2d");
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                             const ConvSpec& s, const Tensor<T>& dy) {
  const size_t n = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const size_t co = w.extent(0), cig = w.extent(1), k = w.extent(2);
  const size_t ho = dy.extent(2), wo = dy.extent(3);
  const size_t co_g = co / s.groups;

  ConvGrads<T> g;
  g.dx = Tensor<T>({n, ci, h, wd});
  g.dw = Tensor<T>({co, cig, k, k});
  if (has_bias) g.db = Tensor<T>({co});

  for (size_t b = 0; b < n; ++b) {
    for (size_t gr = 0; gr < s.groups; ++gr) {
      for (size_t oc = gr * co_g; oc < (gr + 1) * co_g; ++oc) {
        const T* dyc = &dy.at4(b, oc, 0, 0);
        if (has_bias) {
          T acc = 0;
          for (size_t i = 0; i < ho * wo; ++i) acc += dyc[i];
          g.db[oc] += acc;
        }
        for (size_t icg = 0; icg < cig; ++icg) {
          const size_t ic = gr * cig + icg;
          const T* xc = &x.at4(b, ic, 0, 0);
          T* dxc = &g.dx.at4(b, ic, 0, 0);
          for (size_t ky = 0; ky < k; ++ky) {
            const long long ty = static_cast<long long>(ky * s.dilation);
            size_t oy_lo, oy_hi;
            detail::conv_tap_range(h, ho, s.stride, s.pad, ty, oy_lo, oy_hi);
            for (size_t kx = 0; kx < k; ++kx) {
              const long long tx = static_cast<long long>(kx * s.dilation);
              size_t ox_lo, ox_hi;
              detail::conv_tap_range(wd, wo, s.stride, s.pad, tx, ox_lo, ox_hi);
              const T wv = w.at4(oc, icg, ky, kx);
              T wacc = 0;
              for (size_t oy = oy_lo; oy < oy_hi; ++oy) {
                const size_t iy = oy * s.stride - s.pad + static_cast<size_t>(ty);
                const T* xrow = xc + iy * wd - s.pad + static_cast<size_t>(tx);
                T* dxrow = dxc + iy * wd - s.pad + static_cast<size_t>(tx);
                const T* dyrow = dyc + oy * wo;
                if (s.stride == 1) {
                  for (size_t ox = ox_lo; ox < ox_hi; ++ox) {
                    wacc += xrow[ox] * dyrow[ox];
                    dxrow[ox] += wv * dyrow[ox];
                  }
                } else {
                  for (size_t ox = ox_lo; ox < ox_hi; ++ox) {
                    wacc += xrow[ox * s.stride] * dyrow[ox];
                    dxrow[ox * s.stride] += wv * dyrow[ox];
                  }
                }
              }
              g.dw.at4(oc, icg, ky, kx) += wacc;
            }
          }
        }
      }
    }
  }
  return g;
}

/// Spec-level convenience on a single (C,H,W) map.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::require(x.rank() == 3, "conv2d: input must be (C,H,W)");
  detail::require(x.extent(0) == p.kernel.extent(1) * p.spec.groups,
                  "conv2d: input channels do not match kernel");
  Tensor<T> x4 = x.reshaped({1, x.extent(0), x.extent(1), x.extent(2)});
  Tensor<T> y = conv2d_forward(x4, p.kernel, p.bias, p.spec);
  return y.reshaped({y.extent(1), y.extent(2), y.extent(3)});
}

template <typename T>
Tensor<T> max_pool2d_forward(const Tensor<T>& x, size_t k, size_t stride, size_t pad,
                             std::vector<uint32_t>* argmax) {
  detail::require(x.rank() == 4, "max_pool2d: input must be (N,C,H,W)");
  const size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const size_t ho = detail::conv_out_extent(h, k, stride, pad, 1);
  const size_t wo = detail::conv_out_extent(w, k, stride, pad, 1);
  Tensor<T> y({n, c, ho, wo});
  if (argmax) argmax->assign(n * c * ho * wo, 0);
  size_t oi = 0;
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      const T* xc = &x.at4(b, ch, 0, 0);
      for (size_t oy = 0; oy < ho; ++oy)
        for (size_t ox = 0; ox < wo; ++ox, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          uint32_t best_i = 0;
          for (size_t ky = 0; ky < k; ++ky) {
            const long long iy = static_cast<long long>(oy * stride + ky) -
                                 static_cast<long long>(pad);
            if (iy < 0 || iy >= static_cast<long long>(h)) continue;
            for (size_t kx = 0; kx < k; ++kx) {
              const long long ix = static_cast<long long>(ox * stride + kx) -
                                   static_cast<long long>(pad);
              if (ix < 0 || ix >= static_cast<long long>(w)) continue;
              const T v = xc[iy * w + ix];
              if (v > best) {
                best = v;
                best_i = static_cast<uint32_t>(iy * w + ix);
              }
            }
          }
          y[oi] = best;
          if (argmax) (*argmax)[oi] = best_i;
        }
    }
  detail::check_finite(y, "max_pool2d");
  return y;
}

template <typename T>
Tensor<T> max_pool2d_backward(const std::vector<size_t>& x_shape,
                              const std::vector<uint32_t>& argmax, const Tensor<T>& dy) {
  Tensor<T> dx(x_shape);
  const size_t n = x_shape[0], c = x_shape[1], hw = x_shape[2] * x_shape[3];
  const size_t per = dy.size() / (n * c);
  size_t oi = 0;
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      T* dxc = dx.data() + (b * c + ch) * hw;
      for (size_t i = 0; i < per; ++i, ++oi) dxc[argmax[oi]] += dy[oi];
    }
  return dx;
}

/// Mean over the spatial extent: (N,C,H,W) -> (N,C).
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: input must be (N,C,H,W)");
  const size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  detail::require(hw > 0, "global_avg_pool: empty spatial extent");
  Tensor<T> y({n, c});
  for (size_t i = 0; i < n * c; ++i) {
    const T* p = x.data() + i * hw;
    T acc = 0;
    for (size_t j = 0; j < hw; ++j) acc += p[j];
    y[i] = acc / static_cast<T>(hw);
  }
  detail::check_finite(y, "global_avg_pool");
  return y;
}

/// Spec-level convenience on a single (C,H,W) map -> (C).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "global_avg_pool: input must be (C,H,W)");
  Tensor<T> y = global_avg_pool_forward(x.reshaped({1, x.extent(0), x.extent(1), x.extent(2)}));
  return y.reshaped({x.extent(0)});
}

// ---- elementwise activations -------------------------------------------

template <typename T>
inline T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
inline T gelu_scalar(T v) {
  return T(0.5) * v * (T(1) + std::erf(v * T(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad_scalar(T v) {
  const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * v * v) * T(0.39894228040143267794);
  return cdf + v * pdf;
}

enum class Act { relu, sigmoid, gelu, tanh };

template <typename T>
Tensor<T> act_forward(Act a, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  switch (a) {
    case Act::relu:
      for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
      break;
    case Act::gelu:
      for (size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
      break;
    case Act::tanh:
      for (size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
      break;
  }
  detail::check_finite(y, "activation");
  return y;
}

template <typename T>
Tensor<T> act_backward(Act a, const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  switch (a) {
    case Act::relu:
      for (size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
      break;
    case Act::gelu:
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
      break;
    case Act::tanh:
      for (size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * (T(1) - y[i] * y[i]);
      break;
  }
  return dx;
}

// ---- normalization -------------------------------------------------------

// Batch norm works in two layouts: (N,F) normalizes over N per feature,
// (N,C,H,W) over N*H*W per channel. Normalization uses the biased variance;
// running-variance updates use the unbiased one (momentum convention of the
// usual deep-learning libraries, documented in the README).
struct BnAxes {
  size_t channels = 0;
  size_t reduce = 0;  // elements per channel
};

template <typename T>
inline BnAxes bn_axes(const Tensor<T>& x) {
  detail::require(x.rank() == 2 || x.rank() == 4, "batch_norm: input must be (N,F) or (N,C,H,W)");
  BnAxes a;
  if (x.rank() == 2) {
    a.channels = x.extent(1);
    a.reduce = x.extent(0);
  } else {
    a.channels = x.extent(1);
    a.reduce = x.extent(0) * x.extent(2) * x.extent(3);
  }
  return a;
}

template <typename T, typename Fn>
inline void bn_for_each(const Tensor<T>& x, size_t c, Fn&& fn) {
  if (x.rank() == 2) {
    const size_t n = x.extent(0), f = x.extent(1);
    for (size_t i = 0; i < n; ++i) fn(i * f + c);
  } else {
    const size_t n = x.extent(0), ch = x.extent(1), hw = x.extent(2) * x.extent(3);
    for (size_t i = 0; i < n; ++i) {
      const size_t base = (i * ch + c) * hw;
      for (size_t j = 0; j < hw; ++j) fn(base + j);
    }
  }
}

template <typename T>
struct BnCache {
  Tensor<T> mean, inv_std, xhat;
};

template <typename T>
Tensor<T> batch_norm_train_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                   const Tensor<T>& beta, Tensor<T>& running_mean,
                                   Tensor<T>& running_var, double momentum, double eps,
                                   BnCache<T>* cache = nullptr) {
  const BnAxes ax = bn_axes(x);
  detail::require(ax.reduce >= 2, "batch_norm: training mode needs >= 2 elements per statistic");
  detail::require(gamma.size() == ax.channels && beta.size() == ax.channels,
                  "batch_norm: affine size mismatch");
  Tensor<T> y(x.shape());
  Tensor<T> mean({ax.channels}), inv_std({ax.channels});
  for (size_t c = 0; c < ax.channels; ++c) {
    T m = 0;
    bn_for_each(x, c, [&](size_t i) { m += x[i]; });
    m /= static_cast<T>(ax.reduce);
    T v = 0;
    bn_for_each(x, c, [&](size_t i) {
      const T d = x[i] - m;
      v += d * d;
    });
    const T var_biased = v / static_cast<T>(ax.reduce);
    const T var_unbiased = v / static_cast<T>(ax.reduce - 1);
    detail::require(var_biased + static_cast<T>(eps) > T(0), "batch_norm: nonpositive variance+eps");
    const T is = T(1) / std::sqrt(var_biased + static_cast<T>(eps));
    mean[c] = m;
    inv_std[c] = is;
    running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * m);
    running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * var_unbiased);
    bn_for_each(x, c, [&](size_t i) { y[i] = gamma[c] * ((x[i] - m) * is) + beta[c]; });
  }
  if (cache) {
    cache->mean = mean;
    cache->inv_std = inv_std;
  }
  detail::check_finite(y, "batch_norm");
  return y;
}

template <typename T>
Tensor<T> batch_norm_eval_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, const Tensor<T>& running_mean,
                                  const Tensor<T>& running_var, double eps) {
  const BnAxes ax = bn_axes(x);
  detail::require(gamma.size() == ax.channels && running_mean.size() == ax.channels,
                  "batch_norm: affine/stat size mismatch");
  Tensor<T> y(x.shape());
  for (size_t c = 0; c < ax.channels; ++c) {
    detail::require(running_var[c] + static_cast<T>(eps) > T(0),
                    "batch_norm: nonpositive variance+eps");
    const T is = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    const T m = running_mean[c];
    bn_for_each(x, c, [&](size_t i) { y[i] = gamma[c] * ((x[i] - m) * is) + beta[c]; });
  }
  detail::check_finite(y, "batch_norm");
  return y;
}

template <typename T>
struct NormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
NormGrads<T> batch_norm_train_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BnCache<T>& cache, const Tensor<T>& dy) {
  const BnAxes ax = bn_axes(x);
  NormGrads<T> g;
  g.dx = Tensor<T>(x.shape());
  g.dgamma = Tensor<T>({ax.channels});
  g.dbeta = Tensor<T>({ax.channels});
  const T n = static_cast<T>(ax.reduce);
  for (size_t c = 0; c < ax.channels; ++c) {
    const T m = cache.mean[c], is = cache.inv_std[c];
    T sum_dy = 0, sum_dy_xhat = 0;
    bn_for_each(x, c, [&](size_t i) {
      const T xh = (x[i] - m) * is;
      sum_dy += dy[i];
      sum_dy_xhat += dy[i] * xh;
    });
    g.dgamma[c] = sum_dy_xhat;
    g.dbeta[c] = sum_dy;
    const T k1 = gamma[c] * is;
    bn_for_each(x, c, [&](size_t i) {
      const T xh = (x[i] - m) * is;
      g.dx[i] = k1 * (dy[i] - sum_dy / n - xh * sum_dy_xhat / n);
    });
  }
  return g;
}

template <typename T>
NormGrads<T> batch_norm_eval_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& running_mean,
                                      const Tensor<T>& running_var, double eps,
                                      const Tensor<T>& dy) {
  const BnAxes ax = bn_axes(x);
  NormGrads<T> g;
  g.dx = Tensor<T>(x.shape());
  g.dgamma = Tensor<T>({ax.channels});
  g.dbeta = Tensor<T>({ax.channels});
  for (size_t c = 0; c < ax.channels; ++c) {
    const T is = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    const T m = running_mean[c];
    T dg = 0, db = 0;
    bn_for_each(x, c, [&](size_t i) {
      dg += dy[i] * (x[i] - m) * is;
      db += dy[i];
      g.dx[i] = dy[i] * gamma[c] * is;
    });
    g.dgamma[c] = dg;
    g.dbeta[c] = db;
  }
  return g;
}

/// Layer norm over the last axis.
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             double eps, Tensor<T>* cache_mean = nullptr,
                             Tensor<T>* cache_inv_std = nullptr) {
  detail::require(x.rank() >= 1, "layer_norm: rank must be >= 1");
  const size_t f = x.extent(x.rank() - 1);
  detail::require(gamma.size() == f && beta.size() == f, "layer_norm: affine size mismatch");
  const size_t rows = x.size() / f;
  Tensor<T> y(x.shape());
  if (cache_mean) *cache_mean = Tensor<T>({rows});
  if (cache_inv_std) *cache_inv_std = Tensor<T>({rows});
  for (size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * f;
    T* q = y.data() + r * f;
    T m = 0;
    for (size_t i = 0; i < f; ++i) m += p[i];
    m /= static_cast<T>(f);
    T v = 0;
    for (size_t i = 0; i < f; ++i) {
      const T d = p[i] - m;
      v += d * d;
    }
    v /= static_cast<T>(f);
    const T is = T(1) / std::sqrt(v + static_cast<T>(eps));
    for (size_t i = 0; i < f; ++i) q[i] = gamma[i] * ((p[i] - m) * is) + beta[i];
    if (cache_mean) (*cache_mean)[r] = m;
    if (cache_inv_std) (*cache_inv_std)[r] = is;
  }
  detail::check_finite(y, "layer_norm");
  return y;
}

template <typename T>
NormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& mean, const Tensor<T>& inv_std,
                                 const Tensor<T>& dy) {
  const size_t f = x.extent(x.rank() - 1);
  const size_t rows = x.size() / f;
  NormGrads<T> g;
  g.dx = Tensor<T>(x.shape());
  g.dgamma = Tensor<T>({f});
  g.dbeta = Tensor<T>({f});
  for (size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * f;
    const T* d = dy.data() + r * f;
    T* q = g.dx.data() + r * f;
    const T m = mean[r], is = inv_std[r];
    T sum_dyg = 0, sum_dyg_xhat = 0;
    for (size_t i = 0; i < f; ++i) {
      const T xh = (p[i] - m) * is;
      const T dg = d[i] * gamma[i];
      sum_dyg += dg;
      sum_dyg_xhat += dg * xh;
      g.dgamma[i] += d[i] * xh;
      g.dbeta[i] += d[i];
    }
    for (size_t i = 0; i < f; ++i) {
      const T xh = (p[i] - m) * is;
      q[i] = is * (d[i] * gamma[i] - sum_dyg / static_cast<T>(f) -
                   xh * sum_dyg_xhat / static_cast<T>(f));
    }
  }
  return g;
}

// ---- linear algebra ------------------------------------------------------

/// y = x W^T + b with x (..., in), W (out, in), b (out) or empty.
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() >= 1 && w.rank() == 2, "linear: bad ranks");
  const size_t in = w.extent(1), out = w.extent(0);
  detail::require(x.extent(x.rank() - 1) == in, "linear: input feature size mismatch");
  detail::require(b.empty() || b.size() == out, "linear: bias size mismatch");
  const size_t rows = x.size() / in;
  std::vector<size_t> yshape(x.shape());
  yshape.back() = out;
  Tensor<T> y(yshape);
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * in;
    T* yr = y.data() + r * out;
    for (size_t o = 0; o < out; ++o) {
      const T* wrow = w.data() + o * in;
      T acc = b.empty() ? T(0) : b[o];
      for (size_t i = 0; i < in; ++i) acc += xr[i] * wrow[i];
      yr[o] = acc;
    }
  }
  detail::check_finite(y, "linear");
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                               const Tensor<T>& dy) {
  const size_t in = w.extent(1), out = w.extent(0);
  const size_t rows = x.size() / in;
  LinearGrads<T> g;
  g.dx = Tensor<T>(x.shape());
  g.dw = Tensor<T>(w.shape());
  if (has_bias) g.db = Tensor<T>({out});
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * in;
    const T* dyr = dy.data() + r * out;
    T* dxr = g.dx.data() + r * in;
    for (size_t o = 0; o < out; ++o) {
      const T d = dyr[o];
      if (has_bias) g.db[o] += d;
      if (d == T(0)) continue;
      const T* wrow = w.data() + o * in;
      T* dwrow = g.dw.data() + o * in;
      for (size_t i = 0; i < in; ++i) {
        dxr[i] += d * wrow[i];
        dwrow[i] += d * xr[i];
      }
    }
  }
  return g;
}

/// (M,K) x (K,N) -> (M,N)
template <typename T>
Tensor<T> matmul_forward(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0),
                  "matmul: shape mismatch");
  const size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> y({m, n});
  for (size_t i = 0; i < m; ++i) {
    T* yr = y.data() + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      const T av = a[i * k + kk];
      if (av == T(0)) continue;
      const T* br = b.data() + kk * n;
      for (size_t j = 0; j < n; ++j) yr[j] += av * br[j];
    }
  }
  detail::check_finite(y, "matmul");
  return y;
}

/// (B,M,K) x (B,K,N) -> (B,M,N)
template <typename T>
Tensor<T> bmm_forward(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.extent(0) == b.extent(0) &&
                      a.extent(2) == b.extent(1),
                  "bmm: shape mismatch");
  const size_t bs = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  Tensor<T> y({bs, m, n});
  for (size_t bb = 0; bb < bs; ++bb) {
    const T* ab = a.data() + bb * m * k;
    const T* bbp = b.data() + bb * k * n;
    T* yb = y.data() + bb * m * n;
    for (size_t i = 0; i < m; ++i)
      for (size_t kk = 0; kk < k; ++kk) {
        const T av = ab[i * k + kk];
        if (av == T(0)) continue;
        const T* br = bbp + kk * n;
        T* yr = yb + i * n;
        for (size_t j = 0; j < n; ++j) yr[j] += av * br[j];
      }
  }
  detail::check_finite(y, "bmm");
  return y;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose2d: rank must be 2");
  const size_t m = a.extent(0), n = a.extent(1);
  Tensor<T> y({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) y[j * m + i] = a[i * n + j];
  return y;
}

/// Swap the last two axes of a rank-3 tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  detail::require(a.rank() == 3, "transpose_last2: rank must be 3");
  const size_t b = a.extent(0), m = a.extent(1), n = a.extent(2);
  Tensor<T> y({b, n, m});
  for (size_t bb = 0; bb < b; ++bb)
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) y[(bb * n + j) * m + i] = a[(bb * m + i) * n + j];
  return y;
}

// ---- softmax -------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim_forward(const Tensor<T>& x) {
  const size_t f = x.extent(x.rank() - 1);
  const size_t rows = x.size() / f;
  Tensor<T> y(x.shape());
  for (size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * f;
    T* q = y.data() + r * f;
    T mx = p[0];
    for (size_t i = 1; i < f; ++i) mx = std::max(mx, p[i]);
    T z = 0;
    for (size_t i = 0; i < f; ++i) {
      q[i] = std::exp(p[i] - mx);
      z += q[i];
    }
    for (size_t i = 0; i < f; ++i) q[i] /= z;
  }
  detail::check_finite(y, "softmax");
  return y;
}

template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const size_t f = y.extent(y.rank() - 1);
  const size_t rows = y.size() / f;
  Tensor<T> dx(y.shape());
  for (size_t r = 0; r < rows; ++r) {
    const T* s = y.data() + r * f;
    const T* d = dy.data() + r * f;
    T* q = dx.data() + r * f;
    T dot = 0;
    for (size_t i = 0; i < f; ++i) dot += s[i] * d[i];
    for (size_t i = 0; i < f; ++i) q[i] = s[i] * (d[i] - dot);
  }
  return dx;
}

template <typename T>
Tensor<T> log_softmax_lastdim_forward(const Tensor<T>& x) {
  const size_t f = x.extent(x.rank() - 1);
  const size_t rows = x.size() / f;
  Tensor<T> y(x.shape());
  for (size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * f;
    T* q = y.data() + r * f;
    T mx = p[0];
    for (size_t i = 1; i < f; ++i) mx = std::max(mx, p[i]);
    T z = 0;
    for (size_t i = 0; i < f; ++i) z += std::exp(p[i] - mx);
    const T lz = std::log(z) + mx;
    for (size_t i = 0; i < f; ++i) q[i] = p[i] - lz;
  }
  detail::check_finite(y, "log_softmax");
  return y;
}

template <typename T>
Tensor<T> log_softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const size_t f = y.extent(y.rank() - 1);
  const size_t rows = y.size() / f;
  Tensor<T> dx(y.shape());
  for (size_t r = 0; r < rows; ++r) {
    const T* ly = y.data() + r * f;
    const T* d = dy.data() + r * f;
    T* q = dx.data() + r * f;
    T sum = 0;
    for (size_t i = 0; i < f; ++i) sum += d[i];
    for (size_t i = 0; i < f; ++i) q[i] = d[i] - std::exp(ly[i]) * sum;
  }
  return dx;
}

}  // namespace efcm
