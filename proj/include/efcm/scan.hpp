#pragma once

#include "efcm/bind.hpp"

// Selective Convolutional Attention Network. Two grouped 3x3 branches with
// different dilations are fused by a channel-wise two-way softmax selection,
// a sigmoid spatial attention re-weights the summed branches, and the block
// output adds both onto the input:
//
//   U  = branch1(X) + branch2(X)
//   z  = relu(bn(fc(gap(U))))
//   a  = softmax over the two per-channel logits (A z, B z); b = 1 - a
//   V  = a * branch1(X) + b * branch2(X)
//   U' = U * sigmoid(conv1x1(U))
//   X' = X + U' + V
//
// Both selection matrices are kept even though a + b == 1 makes the second
// one redundant in the two-branch case; the pair costs well under 1% of the
// block and keeps the selection in its general form.

namespace efcm {

struct ScanConfig {
  size_t groups = 32;
  size_t reduced_dim = 32;
  static constexpr size_t kernel = 3;

  void validate(size_t channels) const {
    detail::require(groups >= 1 && channels % groups == 0,
                    "scan: channels must be divisible by the group count");
    detail::require(reduced_dim >= 1, "scan: reduced dim must be >= 1");
  }
};

/// Parameter names of one SCAN block under `prefix` (e.g. "block0.scan.").
/// The same naming is used by the model builder, the checkpoint files and
/// the cost model.
inline std::vector<std::string> scan_param_names(const std::string& p) {
  return {p + "branch1.kernel", p + "branch1.bias", p + "branch2.kernel", p + "branch2.bias",
          p + "fc.weight",      p + "fc.bias",      p + "bn.gamma",       p + "bn.beta",
          p + "A.weight",       p + "A.bias",       p + "B.weight",       p + "B.bias",
          p + "spatial.weight", p + "spatial.bias"};
}

template <typename T>
void init_scan_params(ParamStore<T>& ps, const std::string& prefix, size_t channels,
                      const ScanConfig& cfg, Rng& rng, bool trainable) {
  cfg.validate(channels);
  const size_t cg = channels / cfg.groups;
  auto conv_init = [&](const std::string& name, size_t out, size_t in_g, size_t k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_g * k * k));
    ps.add(name + ".kernel", rng.uniform_tensor<T>({out, in_g, k, k}, -bound, bound), trainable);
    ps.add(name + ".bias", rng.uniform_tensor<T>({out}, -bound, bound), trainable);
  };
  conv_init(prefix + "branch1", channels, cg, ScanConfig::kernel);
  conv_init(prefix + "branch2", channels, cg, ScanConfig::kernel);
  const double fcb = 1.0 / std::sqrt(static_cast<double>(channels));
  ps.add(prefix + "fc.weight", rng.uniform_tensor<T>({cfg.reduced_dim, channels}, -fcb, fcb),
         trainable);
  ps.add(prefix + "fc.bias", rng.uniform_tensor<T>({cfg.reduced_dim}, -fcb, fcb), trainable);
  ps.add(prefix + "bn.gamma", Tensor<T>::full({cfg.reduced_dim}, T(1)), trainable);
  ps.add(prefix + "bn.beta", Tensor<T>({cfg.reduced_dim}), trainable);
  ps.add(prefix + "bn.running_mean", Tensor<T>({cfg.reduced_dim}), false, true);
  ps.add(prefix + "bn.running_var", Tensor<T>::full({cfg.reduced_dim}, T(1)), false, true);
  const double selb = 1.0 / std::sqrt(static_cast<double>(cfg.reduced_dim));
  ps.add(prefix + "A.weight", rng.uniform_tensor<T>({channels, cfg.reduced_dim}, -selb, selb),
         trainable);
  ps.add(prefix + "A.bias", rng.uniform_tensor<T>({channels}, -selb, selb), trainable);
  ps.add(prefix + "B.weight", rng.uniform_tensor<T>({channels, cfg.reduced_dim}, -selb, selb),
         trainable);
  ps.add(prefix + "B.bias", rng.uniform_tensor<T>({channels}, -selb, selb), trainable);
  const double spb = 1.0 / std::sqrt(static_cast<double>(channels));
  ps.add(prefix + "spatial.weight", rng.uniform_tensor<T>({1, channels, 1, 1}, -spb, spb),
         trainable);
  ps.add(prefix + "spatial.bias", rng.uniform_tensor<T>({1}, -spb, spb), trainable);
}

/// Grouped-conv branch pair; both preserve the spatial extent (pad==dilation
/// for a 3x3 kernel).
template <typename T>
std::pair<Var, Var> branch_transforms(Bound<T>& bp, const std::string& prefix, Var x,
                                      const ScanConfig& cfg) {
  Tape<T>& t = bp.tape();
  ConvSpec near{1, 1, 1, cfg.groups};
  ConvSpec wide{1, 2, 2, cfg.groups};
  Var u_tilde = t.conv2d(x, bp(prefix + "branch1.kernel"), bp(prefix + "branch1.bias"), near);
  Var u_hat = t.conv2d(x, bp(prefix + "branch2.kernel"), bp(prefix + "branch2.bias"), wide);
  return {u_tilde, u_hat};
}

template <typename T>
struct ChannelSelectOut {
  Var v;  // fused map
  Var a;  // (N,C) selection weight of branch1
  Var b;  // (N,C) selection weight of branch2, softmax partner of a
};

/// Channel selection from the two branch maps. `u` must be branch1+branch2
/// (passed in so the caller can reuse it for the spatial attention path).
template <typename T>
ChannelSelectOut<T> channel_select_fused(Bound<T>& bp, const std::string& prefix, Var u_tilde,
                                         Var u_hat, Var u, const ScanConfig& cfg) {
  Tape<T>& t = bp.tape();
  Var s = t.global_avg_pool(u);  // (N,C)
  Var pre = t.linear(s, bp(prefix + "fc.weight"), bp(prefix + "fc.bias"));
  Var normed;
  if (bp.training()) {
    normed = t.batch_norm_train(pre, bp(prefix + "bn.gamma"), bp(prefix + "bn.beta"),
                                bp.buffer(prefix + "bn.running_mean"),
                                bp.buffer(prefix + "bn.running_var"), 0.1, 1e-5);
  } else {
    normed = t.batch_norm_eval(pre, bp(prefix + "bn.gamma"), bp(prefix + "bn.beta"),
                               bp.buffer(prefix + "bn.running_mean"),
                               bp.buffer(prefix + "bn.running_var"), 1e-5);
  }
  Var z = t.relu(normed);  // (N,d)
  Var logit_a = t.linear(z, bp(prefix + "A.weight"), bp(prefix + "A.bias"));  // (N,C)
  Var logit_b = t.linear(z, bp(prefix + "B.weight"), bp(prefix + "B.bias"));
  const size_t n = t.val(logit_a).extent(0), c = t.val(logit_a).extent(1);
  // Two-way softmax across the branch axis.
  Var stacked = t.concat_lastdim({t.reshape(logit_a, {n, c, 1}), t.reshape(logit_b, {n, c, 1})});
  Var sel = t.softmax_lastdim(stacked);  // (N,C,2)
  Var a = t.reshape(t.slice_lastdim(sel, 0, 1), {n, c});
  Var b = t.reshape(t.slice_lastdim(sel, 1, 2), {n, c});
  Var v = t.add(t.scale_channels(u_tilde, a), t.scale_channels(u_hat, b));
  return {v, a, b};
}

template <typename T>
ChannelSelectOut<T> channel_select(Bound<T>& bp, const std::string& prefix, Var u_tilde,
                                   Var u_hat, const ScanConfig& cfg) {
  Var u = bp.tape().add(u_tilde, u_hat);
  return channel_select_fused(bp, prefix, u_tilde, u_hat, u, cfg);
}

/// U' = U * sigmoid(conv1x1(U)); the one-channel mask broadcasts over
/// channels.
template <typename T>
Var spatial_attend(Bound<T>& bp, const std::string& prefix, Var u) {
  Tape<T>& t = bp.tape();
  Var m = t.conv2d(u, bp(prefix + "spatial.weight"), bp(prefix + "spatial.bias"), ConvSpec{});
  return t.scale_spatial(u, t.sigmoid(m));
}

template <typename T>
struct ScanOut {
  Var x_out;
  Var a, b;       // selection weights
  Var u_prime, v; // attention and selection maps
};

template <typename T>
ScanOut<T> scan_forward_full(Bound<T>& bp, const std::string& prefix, Var x,
                             const ScanConfig& cfg) {
  Tape<T>& t = bp.tape();
  auto [u_tilde, u_hat] = branch_transforms(bp, prefix, x, cfg);
  Var u = t.add(u_tilde, u_hat);
  auto sel = channel_select_fused(bp, prefix, u_tilde, u_hat, u, cfg);
  Var u_prime = spatial_attend(bp, prefix, u);
  Var x_out = t.add(t.add(x, u_prime), sel.v);
  return {x_out, sel.a, sel.b, u_prime, sel.v};
}

template <typename T>
Var scan_forward(Bound<T>& bp, const std::string& prefix, Var x, const ScanConfig& cfg) {
  return scan_forward_full(bp, prefix, x, cfg).x_out;
}

}  // namespace efcm
