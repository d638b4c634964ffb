#pragma once

#include "efcm/autodiff.hpp"
#include "efcm/params.hpp"

namespace efcm {

/// Lazily materializes parameters as tape leaves for one forward/backward
/// pass. In training mode a trainable parameter becomes a differentiable
/// leaf; frozen parameters and eval-mode passes bind as constants.
template <typename T>
class Bound {
 public:
  Bound(Tape<T>& tape, ParamStore<T>& store, bool training)
      : tape_(&tape), store_(&store), training_(training) {}

  Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const auto& item = store_->item(name);
    detail::require(!item.buffer, "bind: buffers are not tape leaves: " + name);
    Var v = tape_->input(item.value, training_ && item.trainable);
    vars_[name] = v;
    return v;
  }

  bool training() const { return training_; }
  Tensor<T>& buffer(const std::string& name) { return store_->at(name); }
  ParamStore<T>& store() { return *store_; }
  Tape<T>& tape() { return *tape_; }

  /// Gradient for a bound parameter (zeros when the parameter never bound
  /// or no gradient reached it).
  const Tensor<T>& grad_of(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) {
      zero_ = Tensor<T>(store_->at(name).shape());
      return zero_;
    }
    return tape_->grad(it->second);
  }

  bool bound(const std::string& name) const { return vars_.count(name) > 0; }

 private:
  Tape<T>* tape_;
  ParamStore<T>* store_;
  bool training_;
  std::unordered_map<std::string, Var> vars_;
  mutable Tensor<T> zero_;
};

}  // namespace efcm
