#pragma once

#include <functional>
#include <memory>
#include <utility>

#include "efcm/ops.hpp"

// Reverse-mode autodiff over whole tensors. A Tape is built per forward pass
// (define-by-run); each op evaluates eagerly through the kernels in ops.hpp
// and records a closure that routes the adjoint to its parents. Gradients of
// composite blocks therefore come from composing hand-written primitive
// backwards, and every primitive backward is covered by finite-difference
// tests.

namespace efcm {

struct Var {
  uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

template <typename T>
class Tape {
 public:
  Var input(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }

  /// Zero tensor if no gradient reached the node.
  const Tensor<T>& grad(Var v) const {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) {
      zero_like_ = Tensor<T>(n.value.shape());
      return zero_like_;
    }
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t num_nodes() const { return nodes_.size(); }

  void backward(Var loss) {
    detail::require(val(loss).size() == 1, "backward: loss must be a scalar");
    backward(loss, Tensor<T>::scalar(T(1)));
  }

  void backward(Var out, Tensor<T> seed) {
    detail::require(seed.same_shape(val(out)), "backward: seed shape mismatch");
    accum(out, seed);
    for (size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.back && n.requires_grad && !n.grad.empty()) n.back();
    }
  }

  // ---- arithmetic --------------------------------------------------------

  Var add(Var a, Var b) {
    detail::require(val(a).same_shape(val(b)), "add: shape mismatch");
    Tensor<T> y(val(a).shape());
    for (size_t i = 0; i < y.size(); ++i) y[i] = val(a)[i] + val(b)[i];
    detail::check_finite(y, "add");
    Var out = push(std::move(y), requires_grad(a) || requires_grad(b), nullptr);
    set_back(out, [this, a, b, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      accum(a, d);
      accum(b, d);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    detail::require(val(a).same_shape(val(b)), "sub: shape mismatch");
    Tensor<T> y(val(a).shape());
    for (size_t i = 0; i < y.size(); ++i) y[i] = val(a)[i] - val(b)[i];
    detail::check_finite(y, "sub");
    Var out = push(std::move(y), requires_grad(a) || requires_grad(b), nullptr);
    set_back(out, [this, a, b, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      accum(a, d);
      Tensor<T> nd(d.shape());
      for (size_t i = 0; i < d.size(); ++i) nd[i] = -d[i];
      accum(b, nd);
    });
    return out;
  }

  Var mul(Var a, Var b) {
    detail::require(val(a).same_shape(val(b)), "mul: shape mismatch");
    Tensor<T> y(val(a).shape());
    for (size_t i = 0; i < y.size(); ++i) y[i] = val(a)[i] * val(b)[i];
    detail::check_finite(y, "mul");
    Var out = push(std::move(y), requires_grad(a) || requires_grad(b), nullptr);
    set_back(out, [this, a, b, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      if (requires_grad(a)) {
        Tensor<T> da(d.shape());
        for (size_t i = 0; i < d.size(); ++i) da[i] = d[i] * val(b)[i];
        accum(a, da);
      }
      if (requires_grad(b)) {
        Tensor<T> db(d.shape());
        for (size_t i = 0; i < d.size(); ++i) db[i] = d[i] * val(a)[i];
        accum(b, db);
      }
    });
    return out;
  }

  Var scale(Var a, double c) {
    Tensor<T> y(val(a).shape());
    for (size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(c) * val(a)[i];
    detail::check_finite(y, "scale");
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, c, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> da(d.shape());
      for (size_t i = 0; i < d.size(); ++i) da[i] = static_cast<T>(c) * d[i];
      accum(a, da);
    });
    return out;
  }

  Var add_const(Var a, double c) {
    Tensor<T> y(val(a).shape());
    for (size_t i = 0; i < y.size(); ++i) y[i] = val(a)[i] + static_cast<T>(c);
    detail::check_finite(y, "add_const");
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, out] { accum(a, nodes_[out.id].grad); });
    return out;
  }

  /// 1 - a (complementary selection weight).
  Var one_minus(Var a) { return add_const(scale(a, -1.0), 1.0); }

  Var reshape(Var a, std::vector<size_t> shape) {
    Tensor<T> y = val(a).reshaped(shape);
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, out] {
      accum(a, nodes_[out.id].grad.reshaped(val(a).shape()));
    });
    return out;
  }

  // ---- reductions --------------------------------------------------------

  Var sum_all(Var a) {
    T acc = 0;
    for (size_t i = 0; i < val(a).size(); ++i) acc += val(a)[i];
    Var out = push(Tensor<T>::scalar(acc), requires_grad(a), nullptr);
    set_back(out, [this, a, out] {
      const T d = nodes_[out.id].grad[0];
      accum(a, Tensor<T>::full(val(a).shape(), d));
    });
    return out;
  }

  Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(val(a).size())); }

  /// Sum over the last axis: (..., F) -> (...).
  Var sum_lastdim(Var a) {
    const auto& xs = val(a).shape();
    detail::require(xs.size() >= 2, "sum_lastdim: rank must be >= 2");
    const size_t f = xs.back();
    std::vector<size_t> ys(xs.begin(), xs.end() - 1);
    Tensor<T> y(ys);
    for (size_t r = 0; r < y.size(); ++r) {
      const T* p = val(a).data() + r * f;
      T acc = 0;
      for (size_t i = 0; i < f; ++i) acc += p[i];
      y[r] = acc;
    }
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, f, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> dx(val(a).shape());
      for (size_t r = 0; r < d.size(); ++r)
        for (size_t i = 0; i < f; ++i) dx[r * f + i] = d[r];
      accum(a, dx);
    });
    return out;
  }

  /// Mean over the token axis: (N,T,C) -> (N,C).
  Var mean_tokens(Var a) {
    detail::require(val(a).rank() == 3, "mean_tokens: input must be (N,T,C)");
    const size_t n = val(a).extent(0), t = val(a).extent(1), c = val(a).extent(2);
    Tensor<T> y({n, c});
    for (size_t b = 0; b < n; ++b)
      for (size_t j = 0; j < c; ++j) {
        T acc = 0;
        for (size_t i = 0; i < t; ++i) acc += val(a).at3(b, i, j);
        y.at2(b, j) = acc / static_cast<T>(t);
      }
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, n, t, c, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> dx({n, t, c});
      for (size_t b = 0; b < n; ++b)
        for (size_t i = 0; i < t; ++i)
          for (size_t j = 0; j < c; ++j) dx.at3(b, i, j) = d.at2(b, j) / static_cast<T>(t);
      accum(a, dx);
    });
    return out;
  }

  // ---- layout ------------------------------------------------------------

  /// (N,C,H,W) -> (N, H*W, C): row-major spatial positions become tokens.
  Var to_tokens(Var a) {
    detail::require(val(a).rank() == 4, "to_tokens: input must be (N,C,H,W)");
    const size_t n = val(a).extent(0), c = val(a).extent(1), h = val(a).extent(2),
                 w = val(a).extent(3);
    Tensor<T> y({n, h * w, c});
    for (size_t b = 0; b < n; ++b)
      for (size_t ch = 0; ch < c; ++ch) {
        const T* p = &val(a).at4(b, ch, 0, 0);
        for (size_t i = 0; i < h * w; ++i) y.at3(b, i, ch) = p[i];
      }
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, n, c, h, w, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> dx({n, c, h, w});
      for (size_t b = 0; b < n; ++b)
        for (size_t ch = 0; ch < c; ++ch) {
          T* p = &dx.at4(b, ch, 0, 0);
          for (size_t i = 0; i < h * w; ++i) p[i] = d.at3(b, i, ch);
        }
      accum(a, dx);
    });
    return out;
  }

  /// (N, H*W, C) -> (N,C,H,W), inverse of to_tokens.
  Var from_tokens(Var a, size_t h, size_t w) {
    detail::require(val(a).rank() == 3 && val(a).extent(1) == h * w,
                    "from_tokens: token count mismatch");
    const size_t n = val(a).extent(0), c = val(a).extent(2);
    Tensor<T> y({n, c, h, w});
    for (size_t b = 0; b < n; ++b)
      for (size_t ch = 0; ch < c; ++ch) {
        T* p = &y.at4(b, ch, 0, 0);
        for (size_t i = 0; i < h * w; ++i) p[i] = val(a).at3(b, i, ch);
      }
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, n, c, h, w, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> dx({n, h * w, c});
      for (size_t b = 0; b < n; ++b)
        for (size_t ch = 0; ch < c; ++ch) {
          const T* p = &d.at4(b, ch, 0, 0);
          for (size_t i = 0; i < h * w; ++i) dx.at3(b, i, ch) = p[i];
        }
      accum(a, dx);
    });
    return out;
  }

  /// Slice of the last axis: (..., F) -> (..., c1-c0).
  Var slice_lastdim(Var a, size_t c0, size_t c1) {
    const auto& xs = val(a).shape();
    const size_t f = xs.back();
    detail::require(c0 < c1 && c1 <= f, "slice_lastdim: bad range");
    std::vector<size_t> ys(xs);
    ys.back() = c1 - c0;
    Tensor<T> y(ys);
    const size_t rows = val(a).size() / f, m = c1 - c0;
    for (size_t r = 0; r < rows; ++r)
      std::copy_n(val(a).data() + r * f + c0, m, y.data() + r * m);
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, c0, m, f, rows, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      Tensor<T> dx(val(a).shape());
      for (size_t r = 0; r < rows; ++r)
        for (size_t i = 0; i < m; ++i) dx[r * f + c0 + i] = d[r * m + i];
      accum(a, dx);
    });
    return out;
  }

  Var concat_lastdim(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat_lastdim: empty input");
    const auto& s0 = val(parts[0]).shape();
    size_t f = 0;
    bool rq = false;
    for (Var p : parts) {
      const auto& s = val(p).shape();
      detail::require(s.size() == s0.size(), "concat_lastdim: rank mismatch");
      for (size_t i = 0; i + 1 < s.size(); ++i)
        detail::require(s[i] == s0[i], "concat_lastdim: leading shape mismatch");
      f += s.back();
      rq = rq || requires_grad(p);
    }
    std::vector<size_t> ys(s0);
    ys.back() = f;
    Tensor<T> y(ys);
    const size_t rows = y.size() / f;
    size_t off = 0;
    for (Var p : parts) {
      const size_t m = val(p).shape().back();
      for (size_t r = 0; r < rows; ++r)
        std::copy_n(val(p).data() + r * m, m, y.data() + r * f + off);
      off += m;
    }
    Var out = push(std::move(y), rq, nullptr);
    set_back(out, [this, parts, f, rows, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      size_t off2 = 0;
      for (Var p : parts) {
        const size_t m = val(p).shape().back();
        if (requires_grad(p)) {
          Tensor<T> dp(val(p).shape());
          for (size_t r = 0; r < rows; ++r)
            std::copy_n(d.data() + r * f + off2, m, dp.data() + r * m);
          accum(p, dp);
        }
        off2 += m;
      }
    });
    return out;
  }

  // ---- kernels from ops.hpp ---------------------------------------------

  Var conv2d(Var x, Var w, Var b, ConvSpec spec) {
    Tensor<T> y = conv2d_forward(val(x), val(w), b.valid() ? val(b) : Tensor<T>(), spec);
    bool rq = requires_grad(x) || requires_grad(w) || (b.valid() && requires_grad(b));
    Var out = push(std::move(y), rq, nullptr);
    set_back(out, [this, x, w, b, spec, out] {
      auto g = conv2d_backward(val(x), val(w), b.valid(), spec, nodes_[out.id].grad);
      if (requires_grad(x)) accum(x, g.dx);
      if (requires_grad(w)) accum(w, g.dw);
      if (b.valid() && requires_grad(b)) accum(b, g.db);
    });
    return out;
  }

  Var max_pool2d(Var x, size_t k, size_t stride, size_t pad) {
    auto argmax = std::make_shared<std::vector<uint32_t>>();
    Tensor<T> y = max_pool2d_forward(val(x), k, stride, pad, argmax.get());
    Var out = push(std::move(y), requires_grad(x), nullptr);
    set_back(out, [this, x, argmax, out] {
      accum(x, max_pool2d_backward<T>(val(x).shape(), *argmax, nodes_[out.id].grad));
    });
    return out;
  }

  Var global_avg_pool(Var x) {
    Tensor<T> y = global_avg_pool_forward(val(x));
    Var out = push(std::move(y), requires_grad(x), nullptr);
    set_back(out, [this, x, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      const auto& xs = val(x).shape();
      const size_t hw = xs[2] * xs[3];
      Tensor<T> dx(xs);
      for (size_t i = 0; i < d.size(); ++i) {
        const T v = d[i] / static_cast<T>(hw);
        T* p = dx.data() + i * hw;
        for (size_t j = 0; j < hw; ++j) p[j] = v;
      }
      accum(x, dx);
    });
    return out;
  }

  Var linear(Var x, Var w, Var b) {
    Tensor<T> y = linear_forward(val(x), val(w), b.valid() ? val(b) : Tensor<T>());
    bool rq = requires_grad(x) || requires_grad(w) || (b.valid() && requires_grad(b));
    Var out = push(std::move(y), rq, nullptr);
    set_back(out, [this, x, w, b, out] {
      auto g = linear_backward(val(x), val(w), b.valid(), nodes_[out.id].grad);
      if (requires_grad(x)) accum(x, g.dx);
      if (requires_grad(w)) accum(w, g.dw);
      if (b.valid() && requires_grad(b)) accum(b, g.db);
    });
    return out;
  }

  Var matmul(Var a, Var b) {
    Tensor<T> y = matmul_forward(val(a), val(b));
    Var out = push(std::move(y), requires_grad(a) || requires_grad(b), nullptr);
    set_back(out, [this, a, b, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      if (requires_grad(a)) accum(a, matmul_forward(d, transpose2d(val(b))));
      if (requires_grad(b)) accum(b, matmul_forward(transpose2d(val(a)), d));
    });
    return out;
  }

  Var bmm(Var a, Var b) {
    Tensor<T> y = bmm_forward(val(a), val(b));
    Var out = push(std::move(y), requires_grad(a) || requires_grad(b), nullptr);
    set_back(out, [this, a, b, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      if (requires_grad(a)) accum(a, bmm_forward(d, efcm::transpose_last2(val(b))));
      if (requires_grad(b)) accum(b, bmm_forward(efcm::transpose_last2(val(a)), d));
    });
    return out;
  }

  Var transpose_last2(Var a) {
    Tensor<T> y = efcm::transpose_last2(val(a));
    Var out = push(std::move(y), requires_grad(a), nullptr);
    set_back(out, [this, a, out] {
      accum(a, efcm::transpose_last2(nodes_[out.id].grad));
    });
    return out;
  }

  Var activation(Act act, Var x) {
    Tensor<T> y = act_forward(act, val(x));
    Var out = push(std::move(y), requires_grad(x), nullptr);
    set_back(out, [this, act, x, out] {
      accum(x, act_backward(act, val(x), val(out), nodes_[out.id].grad));
    });
    return out;
  }

  Var relu(Var x) { return activation(Act::relu, x); }
  Var sigmoid(Var x) { return activation(Act::sigmoid, x); }
  Var gelu(Var x) { return activation(Act::gelu, x); }
  Var tanh_(Var x) { return activation(Act::tanh, x); }

  Var softmax_lastdim(Var x) {
    Tensor<T> y = softmax_lastdim_forward(val(x));
    Var out = push(std::move(y), requires_grad(x), nullptr);
    set_back(out, [this, x, out] {
      accum(x, softmax_lastdim_backward(val(out), nodes_[out.id].grad));
    });
    return out;
  }

  Var log_softmax_lastdim(Var x) {
    Tensor<T> y = log_softmax_lastdim_forward(val(x));
    Var out = push(std::move(y), requires_grad(x), nullptr);
    set_back(out, [this, x, out] {
      accum(x, log_softmax_lastdim_backward(val(out), nodes_[out.id].grad));
    });
    return out;
  }

  /// Per-batch/per-channel scaling: (N,C,H,W) * (N,C) broadcast over space.
  Var scale_channels(Var x, Var s) {
    detail::require(val(x).rank() == 4 && val(s).rank() == 2 &&
                        val(x).extent(0) == val(s).extent(0) &&
                        val(x).extent(1) == val(s).extent(1),
                    "scale_channels: shape mismatch");
    const size_t nc = val(s).size(), hw = val(x).extent(2) * val(x).extent(3);
    Tensor<T> y(val(x).shape());
    for (size_t i = 0; i < nc; ++i) {
      const T sv = val(s)[i];
      const T* p = val(x).data() + i * hw;
      T* q = y.data() + i * hw;
      for (size_t j = 0; j < hw; ++j) q[j] = sv * p[j];
    }
    detail::check_finite(y, "scale_channels");
    Var out = push(std::move(y), requires_grad(x) || requires_grad(s), nullptr);
    set_back(out, [this, x, s, nc, hw, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      if (requires_grad(x)) {
        Tensor<T> dx(val(x).shape());
        for (size_t i = 0; i < nc; ++i) {
          const T sv = val(s)[i];
          const T* dp = d.data() + i * hw;
          T* q = dx.data() + i * hw;
          for (size_t j = 0; j < hw; ++j) q[j] = sv * dp[j];
        }
        accum(x, dx);
      }
      if (requires_grad(s)) {
        Tensor<T> ds(val(s).shape());
        for (size_t i = 0; i < nc; ++i) {
          const T* dp = d.data() + i * hw;
          const T* p = val(x).data() + i * hw;
          T acc = 0;
          for (size_t j = 0; j < hw; ++j) acc += dp[j] * p[j];
          ds[i] = acc;
        }
        accum(s, ds);
      }
    });
    return out;
  }

  /// Spatial mask broadcast over channels: (N,C,H,W) * (N,1,H,W).
  Var scale_spatial(Var x, Var m) {
    detail::require(val(x).rank() == 4 && val(m).rank() == 4 && val(m).extent(1) == 1 &&
                        val(x).extent(0) == val(m).extent(0) &&
                        val(x).extent(2) == val(m).extent(2) &&
                        val(x).extent(3) == val(m).extent(3),
                    "scale_spatial: shape mismatch");
    const size_t n = val(x).extent(0), c = val(x).extent(1),
                 hw = val(x).extent(2) * val(x).extent(3);
    Tensor<T> y(val(x).shape());
    for (size_t b = 0; b < n; ++b) {
      const T* mb = val(m).data() + b * hw;
      for (size_t ch = 0; ch < c; ++ch) {
        const T* p = val(x).data() + (b * c + ch) * hw;
        T* q = y.data() + (b * c + ch) * hw;
        for (size_t j = 0; j < hw; ++j) q[j] = p[j] * mb[j];
      }
    }
    detail::check_finite(y, "scale_spatial");
    Var out = push(std::move(y), requires_grad(x) || requires_grad(m), nullptr);
    set_back(out, [this, x, m, n, c, hw, out] {
      const Tensor<T>& d = nodes_[out.id].grad;
      if (requires_grad(x)) {
        Tensor<T> dx(val(x).shape());
        for (size_t b = 0; b < n; ++b) {
          const T* mb = val(m).data() + b * hw;
          for (size_t ch = 0; ch < c; ++ch) {
            const T* dp = d.data() + (b * c + ch) * hw;
            T* q = dx.data() + (b * c + ch) * hw;
            for (size_t j = 0; j < hw; ++j) q[j] = dp[j] * mb[j];
          }
        }
        accum(x, dx);
      }
      if (requires_grad(m)) {
        Tensor<T> dm(val(m).shape());
        for (size_t b = 0; b < n; ++b) {
          T* q = dm.data() + b * hw;
          for (size_t ch = 0; ch < c; ++ch) {
            const T* dp = d.data() + (b * c + ch) * hw;
            const T* p = val(x).data() + (b * c + ch) * hw;
            for (size_t j = 0; j < hw; ++j) q[j] += dp[j] * p[j];
          }
        }
        accum(m, dm);
      }
    });
    return out;
  }

  /// Training-mode batch norm; updates the caller-owned running statistics
  /// in place (single-writer by contract).
  Var batch_norm_train(Var x, Var gamma, Var beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, double momentum, double eps) {
    auto cache = std::make_shared<BnCache<T>>();
    Tensor<T> y = batch_norm_train_forward(val(x), val(gamma), val(beta), running_mean,
                                           running_var, momentum, eps, cache.get());
    bool rq = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var out = push(std::move(y), rq, nullptr);
    set_back(out, [this, x, gamma, beta, cache, out] {
      auto g = batch_norm_train_backward(val(x), val(gamma), *cache, nodes_[out.id].grad);
      if (requires_grad(x)) accum(x, g.dx);
      if (requires_grad(gamma)) accum(gamma, g.dgamma);
      if (requires_grad(beta)) accum(beta, g.dbeta);
    });
    return out;
  }

  Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                      const Tensor<T>& running_var, double eps) {
    Tensor<T> y =
        batch_norm_eval_forward(val(x), val(gamma), val(beta), running_mean, running_var, eps);
    bool rq = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var out = push(std::move(y), rq, nullptr);
    // Copy the stats; the caller may mutate its running buffers later.
    auto rm = std::make_shared<Tensor<T>>(running_mean);
    auto rv = std::make_shared<Tensor<T>>(running_var);
    set_back(out, [this, x, gamma, beta, rm, rv, eps, out] {
      auto g = batch_norm_eval_backward(val(x), val(gamma), *rm, *rv, eps, nodes_[out.id].grad);
      if (requires_grad(x)) accum(x, g.dx);
      if (requires_grad(gamma)) accum(gamma, g.dgamma);
      if (requires_grad(beta)) accum(beta, g.dbeta);
    });
    return out;
  }

  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6) {
    auto mean = std::make_shared<Tensor<T>>();
    auto inv_std = std::make_shared<Tensor<T>>();
    Tensor<T> y = layer_norm_forward(val(x), val(gamma), val(beta), eps, mean.get(), inv_std.get());
    bool rq = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var out = push(std::move(y), rq, nullptr);
    set_back(out, [this, x, gamma, beta, mean, inv_std, out] {
      auto g = layer_norm_backward(val(x), val(gamma), *mean, *inv_std, nodes_[out.id].grad);
      if (requires_grad(x)) accum(x, g.dx);
      if (requires_grad(gamma)) accum(gamma, g.dgamma);
      if (requires_grad(beta)) accum(beta, g.dbeta);
    });
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void()> back;
  };

  Var push(Tensor<T> value, bool rq, std::function<void()> back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), rq, std::move(back)});
    return Var{static_cast<uint32_t>(nodes_.size() - 1)};
  }

  void set_back(Var v, std::function<void()> fn) {
    if (nodes_[v.id].requires_grad) nodes_[v.id].back = std::move(fn);
  }

  void accum(Var v, const Tensor<T>& d) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = d;
    } else {
      for (size_t i = 0; i < d.size(); ++i) n.grad[i] += d[i];
    }
  }

  std::vector<Node> nodes_;
  mutable Tensor<T> zero_like_;
};

}  // namespace efcm
