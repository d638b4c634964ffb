#pragma once

#include "efcm/scan.hpp"

// Pre-LN transformer encoder block and the TransScan composition (SCAN
// followed by the encoder). Spatial positions are flattened row-major into
// tokens; no positional embedding is added, so the block is equivariant to
// spatial permutations.

namespace efcm {

struct TransScanConfig {
  size_t dim = 384;
  size_t depth = 3;
  size_t heads = 6;
  size_t mlp_ratio = 4;
  ScanConfig scan;

  void validate() const {
    detail::require(depth >= 1, "transscan: depth must be >= 1");
    detail::require(heads >= 1 && dim % heads == 0, "transscan: dim must be divisible by heads");
    scan.validate(dim);
  }
};

inline std::vector<std::string> transformer_param_names(const std::string& p) {
  return {p + "norm1.gamma",   p + "norm1.beta",   p + "msa.qkv.weight", p + "msa.qkv.bias",
          p + "msa.out.weight", p + "msa.out.bias", p + "norm2.gamma",    p + "norm2.beta",
          p + "mlp.fc1.weight", p + "mlp.fc1.bias", p + "mlp.fc2.weight", p + "mlp.fc2.bias"};
}

template <typename T>
void init_transformer_params(ParamStore<T>& ps, const std::string& prefix, size_t dim,
                             size_t mlp_ratio, Rng& rng, bool trainable) {
  auto lin_init = [&](const std::string& name, size_t out, size_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(name + ".weight", rng.uniform_tensor<T>({out, in}, -bound, bound), trainable);
    ps.add(name + ".bias", rng.uniform_tensor<T>({out}, -bound, bound), trainable);
  };
  ps.add(prefix + "norm1.gamma", Tensor<T>::full({dim}, T(1)), trainable);
  ps.add(prefix + "norm1.beta", Tensor<T>({dim}), trainable);
  lin_init(prefix + "msa.qkv", 3 * dim, dim);
  lin_init(prefix + "msa.out", dim, dim);
  ps.add(prefix + "norm2.gamma", Tensor<T>::full({dim}, T(1)), trainable);
  ps.add(prefix + "norm2.beta", Tensor<T>({dim}), trainable);
  lin_init(prefix + "mlp.fc1", mlp_ratio * dim, dim);
  lin_init(prefix + "mlp.fc2", dim, mlp_ratio * dim);
}

template <typename T>
struct MsaOut {
  Var y;
  std::vector<Var> head_attn;  // per-head (N,T,T) attention matrices
};

/// Scaled dot-product attention over (N,T,C) tokens.
template <typename T>
MsaOut<T> multi_head_self_attention(Bound<T>& bp, const std::string& prefix, Var tokens,
                                    size_t heads) {
  Tape<T>& t = bp.tape();
  const auto& sh = t.val(tokens).shape();
  detail::require(sh.size() == 3, "msa: tokens must be (N,T,C)");
  const size_t n = sh[0], tk = sh[1], c = sh[2];
  detail::require(heads >= 1 && c % heads == 0, "msa: C must be divisible by heads");
  const size_t hd = c / heads;

  Var qkv = t.linear(tokens, bp(prefix + "qkv.weight"), bp(prefix + "qkv.bias"));  // (N,T,3C)
  Var q = t.slice_lastdim(qkv, 0, c);
  Var k = t.slice_lastdim(qkv, c, 2 * c);
  Var v = t.slice_lastdim(qkv, 2 * c, 3 * c);

  MsaOut<T> out;
  std::vector<Var> head_outs;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (size_t h = 0; h < heads; ++h) {
    Var qh = t.slice_lastdim(q, h * hd, (h + 1) * hd);  // (N,T,hd)
    Var kh = t.slice_lastdim(k, h * hd, (h + 1) * hd);
    Var vh = t.slice_lastdim(v, h * hd, (h + 1) * hd);
    Var scores = t.scale(t.bmm(qh, t.transpose_last2(kh)), inv_sqrt);  // (N,T,T)
    Var attn = t.softmax_lastdim(scores);
    out.head_attn.push_back(attn);
    head_outs.push_back(t.bmm(attn, vh));  // (N,T,hd)
  }
  Var merged = heads == 1 ? head_outs[0] : t.concat_lastdim(head_outs);  // (N,T,C)
  out.y = t.linear(merged, bp(prefix + "out.weight"), bp(prefix + "out.bias"));
  (void)n;
  (void)tk;
  return out;
}

/// Pre-LN encoder block on a (N,C,H,W) map; tokens are the H*W positions.
template <typename T>
Var transformer_block(Bound<T>& bp, const std::string& prefix, Var x_map,
                      const TransScanConfig& cfg) {
  Tape<T>& t = bp.tape();
  const auto& sh = t.val(x_map).shape();
  detail::require(sh.size() == 4, "transformer_block: input must be (N,C,H,W)");
  detail::require(sh[1] == cfg.dim, "transformer_block: channel count must equal dim");
  const size_t h = sh[2], w = sh[3];

  Var tokens = t.to_tokens(x_map);  // (N,T,C)
  Var n1 = t.layer_norm(tokens, bp(prefix + "norm1.gamma"), bp(prefix + "norm1.beta"));
  Var attn = multi_head_self_attention(bp, prefix + "msa.", n1, cfg.heads).y;
  Var x2 = t.add(attn, tokens);
  Var n2 = t.layer_norm(x2, bp(prefix + "norm2.gamma"), bp(prefix + "norm2.beta"));
  Var hmid = t.gelu(t.linear(n2, bp(prefix + "mlp.fc1.weight"), bp(prefix + "mlp.fc1.bias")));
  Var mlp = t.linear(hmid, bp(prefix + "mlp.fc2.weight"), bp(prefix + "mlp.fc2.bias"));
  Var x_out = t.add(mlp, x2);
  return t.from_tokens(x_out, h, w);
}

inline std::string transscan_block_prefix(size_t i) { return "block" + std::to_string(i) + "."; }

template <typename T>
void init_transscan_params(ParamStore<T>& ps, const std::string& prefix,
                           const TransScanConfig& cfg, Rng& rng, bool trainable) {
  init_scan_params(ps, prefix + "scan.", cfg.dim, cfg.scan, rng, trainable);
  init_transformer_params(ps, prefix + "tr.", cfg.dim, cfg.mlp_ratio, rng, trainable);
}

/// One TransScan block: SCAN then the encoder.
template <typename T>
Var transscan_forward(Bound<T>& bp, const std::string& prefix, Var x,
                      const TransScanConfig& cfg) {
  Var x_scan = scan_forward(bp, prefix + "scan.", x, cfg.scan);
  return transformer_block(bp, prefix + "tr.", x_scan, cfg);
}

/// Stack of `cfg.depth` TransScan blocks under block{i}. prefixes.
template <typename T>
Var transscan_stack(Bound<T>& bp, const std::string& prefix, Var x, const TransScanConfig& cfg) {
  Var cur = x;
  for (size_t i = 0; i < cfg.depth; ++i)
    cur = transscan_forward(bp, prefix + transscan_block_prefix(i), cur, cfg);
  return cur;
}

}  // namespace efcm
