#pragma once

#include <cassert>
#include <vector>

#include "efcm/tensor.hpp"

namespace efcm {

/// Linear warmup to the base rate, then cosine annealing to zero.
/// `scale(step)` takes the 1-based optimizer step and returns a multiplier
/// in [0,1]; the two pieces agree exactly at step == warmup.
struct WarmupCosineSchedule {
  size_t warmup = 200;
  size_t total = 1;

  double scale(size_t step) const {
    detail::require(total >= 1, "schedule: total steps must be >= 1");
    if (warmup > 0 && step <= warmup) return static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return 0.5 * (1.0 + std::cos(3.141592653589793238462643383280 * t));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Decoupled weight decay Adam. Parameters are registered with their own
/// base learning rate (the fine-tuning stage drives the backbone and the
/// classifier head at different rates); step() applies a shared schedule
/// multiplier on top.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  size_t add_param(Tensor<T>* p, double base_lr) {
    detail::require(p != nullptr && p->size() > 0, "AdamW: null/empty parameter");
    slots_.push_back(Slot{p, base_lr, Tensor<T>(p->shape()), Tensor<T>(p->shape())});
    return slots_.size() - 1;
  }

  size_t size() const { return slots_.size(); }
  size_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  /// `grads[i]` pairs with the i-th registered parameter; a null entry skips
  /// the slot (parameter untouched this step).
  void step(const std::vector<const Tensor<T>*>& grads, double schedule_scale) {
    detail::require(grads.size() == slots_.size(), "AdamW: gradient list size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t s = 0; s < slots_.size(); ++s) {
      if (!grads[s]) continue;
      Slot& sl = slots_[s];
      const Tensor<T>& g = *grads[s];
      detail::require(g.same_shape(*sl.p), "AdamW: gradient shape mismatch");
      const double lr = sl.lr * schedule_scale;
      Tensor<T>& p = *sl.p;
      for (size_t i = 0; i < p.size(); ++i) {
        const double gv = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * static_cast<double>(sl.m[i]) + (1.0 - cfg_.beta1) * gv;
        const double v = cfg_.beta2 * static_cast<double>(sl.v[i]) + (1.0 - cfg_.beta2) * gv * gv;
        sl.m[i] = static_cast<T>(m);
        sl.v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double pv = static_cast<double>(p[i]);
        pv -= lr * cfg_.weight_decay * pv;                    // decoupled decay
        pv -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p[i] = static_cast<T>(pv);
      }
    }
  }

 private:
  struct Slot {
    Tensor<T>* p;
    double lr;
    Tensor<T> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  size_t t_ = 0;
};

}  // namespace efcm
