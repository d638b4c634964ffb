#pragma once

#include "efcm/transformer.hpp"

// Model zoo. A ModelSpec is the declarative description of a student or
// teacher; both the executable network and the static cost model walk the
// same layer enumeration, so parameter and MAC counting cannot drift from
// what actually runs.
//
// Extractors are architecture-shaped stand-ins initialized from the run
// seed (no pretrained weights ship with this repo):
//   fpd     — stem + one bottleneck stage, output 256 x H/4 x W/4, frozen.
//   vfd     — stem + three bottleneck stages, output 1024 x H/16 x W/16,
//             all trainable.
//   teacher — small frozen conv net with pooling producing teacher_dim
//             features; stands in for a pretrained foundation model.

namespace efcm {

struct ModelSpec {
  std::string variant = "fpd";  // fpd | vfd | teacher
  size_t input_ch = 3, input_h = 224, input_w = 224;
  size_t dim = 384;
  size_t depth = 3;
  size_t heads = 0;  // 0 -> dim/64
  size_t mlp_ratio = 4;
  ScanConfig scan;
  size_t teacher_dim = 1024;
  bool extractor_frozen = true;

  size_t resolved_heads() const {
    if (heads > 0) return heads;
    detail::require(dim % 64 == 0, "model: dim not divisible by 64; set heads explicitly");
    return dim / 64;
  }

  TransScanConfig transscan() const {
    TransScanConfig cfg;
    cfg.dim = dim;
    cfg.depth = depth;
    cfg.heads = resolved_heads();
    cfg.mlp_ratio = mlp_ratio;
    cfg.scan = scan;
    return cfg;
  }

  void validate() const {
    detail::require(variant == "fpd" || variant == "vfd" || variant == "teacher",
                    "model: unknown variant " + variant);
    detail::require(input_ch == 3, "model: input must be RGB");
    detail::require(teacher_dim >= 1, "model: teacher_dim must be >= 1");
    if (variant == "fpd") {
      detail::require(input_h % 16 == 0 && input_w % 16 == 0 && input_h >= 16 && input_w >= 16,
                      "model: fpd input extents must be multiples of 16");
      transscan().validate();
    } else if (variant == "vfd") {
      detail::require(input_h % 16 == 0 && input_w % 16 == 0 && input_h >= 32 && input_w >= 32,
                      "model: vfd input extents must be multiples of 16 and >= 32");
    } else {
      detail::require(input_h >= 8 && input_w >= 8, "model: teacher input too small");
    }
  }

  static ModelSpec preset(const std::string& variant) {
    ModelSpec s;
    s.variant = variant;
    s.extractor_frozen = variant != "vfd";
    return s;
  }

  nlohmann::json to_json() const {
    return {{"variant", variant},
            {"input", {input_ch, input_h, input_w}},
            {"dim", dim},
            {"depth", depth},
            {"heads", heads},
            {"mlp_ratio", mlp_ratio},
            {"scan_groups", scan.groups},
            {"scan_reduced_dim", scan.reduced_dim},
            {"teacher_dim", teacher_dim},
            {"extractor_frozen", extractor_frozen}};
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s = preset(j.at("variant").get<std::string>());
    if (j.contains("input")) {
      auto in = j.at("input").get<std::vector<size_t>>();
      detail::require(in.size() == 3, "model: input must be [c,h,w]");
      s.input_ch = in[0];
      s.input_h = in[1];
      s.input_w = in[2];
    }
    s.dim = j.value("dim", s.dim);
    s.depth = j.value("depth", s.depth);
    s.heads = j.value("heads", s.heads);
    s.mlp_ratio = j.value("mlp_ratio", s.mlp_ratio);
    s.scan.groups = j.value("scan_groups", s.scan.groups);
    s.scan.reduced_dim = j.value("scan_reduced_dim", s.scan.reduced_dim);
    s.teacher_dim = j.value("teacher_dim", s.teacher_dim);
    s.extractor_frozen = j.value("extractor_frozen", s.extractor_frozen);
    s.validate();
    return s;
  }
};

// ---- static layer enumeration ---------------------------------------------

struct LayerDesc {
  enum class Kind { conv, linear, norm, attention_core };
  Kind kind = Kind::conv;
  std::string name;
  size_t in_ch = 0, out_ch = 0, k = 1, stride = 1, pad = 0, dilation = 1, groups = 1;
  bool bias = false;
  size_t out_h = 1, out_w = 1;  // conv output positions
  size_t tokens = 1;            // linear row count
  size_t norm_ch = 0;
  size_t attn_tokens = 0, attn_dim = 0;
  size_t in_elems = 0, out_elems = 0;

  size_t params() const {
    switch (kind) {
      case Kind::conv:
        return out_ch * (in_ch / groups) * k * k + (bias ? out_ch : 0);
      case Kind::linear:
        return out_ch * in_ch + (bias ? out_ch : 0);
      case Kind::norm:
        return 2 * norm_ch;
      case Kind::attention_core:
        return 0;
    }
    return 0;
  }

  /// Multiply-accumulate count. Norms and activations count zero; the
  /// attention core is the usual 2*N^2*C for scores plus value aggregation.
  uint64_t macs() const {
    switch (kind) {
      case Kind::conv:
        return static_cast<uint64_t>(out_ch) * (in_ch / groups) * k * k * out_h * out_w;
      case Kind::linear:
        return static_cast<uint64_t>(in_ch) * out_ch * tokens;
      case Kind::norm:
        return 0;
      case Kind::attention_core:
        return 2ull * attn_tokens * attn_tokens * attn_dim;
    }
    return 0;
  }

  /// Rough memory-traffic estimate: activations in and out plus one read of
  /// the parameters, in bytes at 4 bytes/element.
  uint64_t mem_bytes() const {
    return 4ull * (in_elems + out_elems + params());
  }
};

namespace detail {

struct StageSpec {
  size_t blocks, mid, out, stride;
};

inline std::vector<StageSpec> extractor_stages(const std::string& variant) {
  if (variant == "fpd") return {{3, 64, 256, 1}};
  return {{3, 64, 256, 1}, {4, 128, 512, 2}, {6, 256, 1024, 2}};
}

class LayerSink {
 public:
  explicit LayerSink(std::vector<LayerDesc>& out) : out_(&out) {}

  void conv(const std::string& name, size_t in_ch, size_t out_ch, size_t k, size_t stride,
            size_t pad, size_t dil, size_t groups, bool bias, size_t in_h, size_t in_w,
            size_t& out_h, size_t& out_w) {
    out_h = conv_out_extent(in_h, k, stride, pad, dil);
    out_w = conv_out_extent(in_w, k, stride, pad, dil);
    LayerDesc d;
    d.kind = LayerDesc::Kind::conv;
    d.name = name;
    d.in_ch = in_ch;
    d.out_ch = out_ch;
    d.k = k;
    d.stride = stride;
    d.pad = pad;
    d.dilation = dil;
    d.groups = groups;
    d.bias = bias;
    d.out_h = out_h;
    d.out_w = out_w;
    d.in_elems = in_ch * in_h * in_w;
    d.out_elems = out_ch * out_h * out_w;
    out_->push_back(std::move(d));
  }

  void linear(const std::string& name, size_t in, size_t out, size_t tokens) {
    LayerDesc d;
    d.kind = LayerDesc::Kind::linear;
    d.name = name;
    d.in_ch = in;
    d.out_ch = out;
    d.bias = true;
    d.tokens = tokens;
    d.in_elems = in * tokens;
    d.out_elems = out * tokens;
    out_->push_back(std::move(d));
  }

  void norm(const std::string& name, size_t ch, size_t elems) {
    LayerDesc d;
    d.kind = LayerDesc::Kind::norm;
    d.name = name;
    d.norm_ch = ch;
    d.in_elems = elems;
    d.out_elems = elems;
    out_->push_back(std::move(d));
  }

  void attention_core(const std::string& name, size_t tokens, size_t dim) {
    LayerDesc d;
    d.kind = LayerDesc::Kind::attention_core;
    d.name = name;
    d.attn_tokens = tokens;
    d.attn_dim = dim;
    d.in_elems = tokens * dim;
    d.out_elems = tokens * dim;
    out_->push_back(std::move(d));
  }

 private:
  std::vector<LayerDesc>* out_;
};

inline void walk_bottleneck(LayerSink& s, const std::string& prefix, size_t in_ch, size_t mid,
                            size_t out_ch, size_t stride, bool downsample, size_t& h, size_t& w) {
  size_t h1, w1;
  s.conv(prefix + "conv1.kernel", in_ch, mid, 1, 1, 0, 1, 1, false, h, w, h1, w1);
  s.norm(prefix + "bn1", mid, mid * h1 * w1);
  size_t h2, w2;
  s.conv(prefix + "conv2.kernel", mid, mid, 3, stride, 1, 1, 1, false, h1, w1, h2, w2);
  s.norm(prefix + "bn2", mid, mid * h2 * w2);
  size_t h3, w3;
  s.conv(prefix + "conv3.kernel", mid, out_ch, 1, 1, 0, 1, 1, false, h2, w2, h3, w3);
  s.norm(prefix + "bn3", out_ch, out_ch * h3 * w3);
  if (downsample) {
    size_t hd, wd;
    s.conv(prefix + "downsample.conv.kernel", in_ch, out_ch, 1, stride, 0, 1, 1, false, h, w, hd,
           wd);
    s.norm(prefix + "downsample.bn", out_ch, out_ch * hd * wd);
  }
  h = h3;
  w = w3;
}

inline void walk_extractor(LayerSink& s, const std::string& variant, size_t& ch, size_t& h,
                           size_t& w) {
  size_t h1, w1;
  s.conv("extractor.conv1.kernel", ch, 64, 7, 2, 3, 1, 1, false, h, w, h1, w1);
  s.norm("extractor.bn1", 64, 64 * h1 * w1);
  // max pool k3 s2 p1 (no parameters, zero MAC)
  h = conv_out_extent(h1, 3, 2, 1, 1);
  w = conv_out_extent(w1, 3, 2, 1, 1);
  ch = 64;
  const auto stages = extractor_stages(variant);
  for (size_t si = 0; si < stages.size(); ++si) {
    const auto& st = stages[si];
    for (size_t b = 0; b < st.blocks; ++b) {
      const std::string prefix =
          "extractor.layer" + std::to_string(si + 1) + "." + std::to_string(b) + ".";
      const size_t stride = b == 0 ? st.stride : 1;
      walk_bottleneck(s, prefix, ch, st.mid, st.out, stride, b == 0, h, w);
      ch = st.out;
    }
  }
}

inline void walk_transscan_block(LayerSink& s, const std::string& prefix,
                                 const TransScanConfig& cfg, size_t h, size_t w) {
  const size_t dim = cfg.dim, d = cfg.scan.reduced_dim;
  size_t ho, wo;
  s.conv(prefix + "scan.branch1.kernel", dim, dim, 3, 1, 1, 1, cfg.scan.groups, true, h, w, ho, wo);
  s.conv(prefix + "scan.branch2.kernel", dim, dim, 3, 1, 2, 2, cfg.scan.groups, true, h, w, ho, wo);
  s.linear(prefix + "scan.fc", dim, d, 1);
  s.norm(prefix + "scan.bn", d, d);
  s.linear(prefix + "scan.A", d, dim, 1);
  s.linear(prefix + "scan.B", d, dim, 1);
  s.conv(prefix + "scan.spatial.weight", dim, 1, 1, 1, 0, 1, 1, true, h, w, ho, wo);
  const size_t tokens = h * w;
  s.norm(prefix + "tr.norm1", dim, tokens * dim);
  s.linear(prefix + "tr.msa.qkv", dim, 3 * dim, tokens);
  s.attention_core(prefix + "tr.msa.core", tokens, dim);
  s.linear(prefix + "tr.msa.out", dim, dim, tokens);
  s.norm(prefix + "tr.norm2", dim, tokens * dim);
  s.linear(prefix + "tr.mlp.fc1", dim, cfg.mlp_ratio * dim, tokens);
  s.linear(prefix + "tr.mlp.fc2", cfg.mlp_ratio * dim, dim, tokens);
}

}  // namespace detail

/// Ordered layer descriptors of the full model at the spec's input shape.
inline std::vector<LayerDesc> model_layers(const ModelSpec& spec) {
  spec.validate();
  std::vector<LayerDesc> out;
  detail::LayerSink sink(out);
  size_t ch = spec.input_ch, h = spec.input_h, w = spec.input_w;
  if (spec.variant == "teacher") {
    size_t c = ch;
    const size_t widths[3] = {32, 64, 128};
    for (size_t i = 0; i < 3; ++i) {
      size_t ho, wo;
      sink.conv("conv" + std::to_string(i + 1) + ".kernel", c, widths[i], 3, 2, 1, 1, 1, true, h,
                w, ho, wo);
      c = widths[i];
      h = ho;
      w = wo;
    }
    sink.linear("fc", 128, spec.teacher_dim, 1);
    return out;
  }
  detail::walk_extractor(sink, spec.variant, ch, h, w);
  if (spec.variant == "fpd") {
    size_t ho, wo;
    sink.conv("proj.kernel", ch, spec.dim, 4, 4, 0, 1, 1, true, h, w, ho, wo);
    h = ho;
    w = wo;
    const TransScanConfig cfg = spec.transscan();
    for (size_t i = 0; i < cfg.depth; ++i)
      detail::walk_transscan_block(sink, transscan_block_prefix(i), cfg, h, w);
    sink.linear("head", spec.dim, spec.teacher_dim, 1);
  } else {
    sink.linear("head", ch, spec.teacher_dim, 1);
  }
  return out;
}

/// Exact parameter count (frozen parameters included, buffers excluded),
/// closed-form per layer type.
inline size_t count_params(const ModelSpec& spec) {
  size_t n = 0;
  for (const auto& d : model_layers(spec)) n += d.params();
  return n;
}

inline std::vector<std::pair<std::string, size_t>> param_breakdown(const ModelSpec& spec) {
  std::vector<std::pair<std::string, size_t>> out;
  for (const auto& d : model_layers(spec))
    if (d.params() > 0) out.emplace_back(d.name, d.params());
  return out;
}

// ---- executable models -----------------------------------------------------

template <typename T>
struct Model {
  ModelSpec spec;
  ParamStore<T> params;

  static Model init(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    Rng rng = Rng(seed).fork("model-init/" + spec.variant);
    const bool frozen_ext = spec.variant == "teacher" || spec.extractor_frozen;
    if (spec.variant == "teacher") {
      const size_t widths[3] = {32, 64, 128};
      size_t c = spec.input_ch;
      for (size_t i = 0; i < 3; ++i) {
        init_conv(m.params, "conv" + std::to_string(i + 1), c, widths[i], 3, true, false, rng);
        c = widths[i];
      }
      init_linear(m.params, "fc", 128, spec.teacher_dim, false, rng);
      return m;
    }
    init_extractor(m.params, spec.variant, spec.input_ch, !frozen_ext, rng);
    if (spec.variant == "fpd") {
      init_conv(m.params, "proj", 256, spec.dim, 4, true, true, rng);
      const TransScanConfig cfg = spec.transscan();
      for (size_t i = 0; i < cfg.depth; ++i)
        init_transscan_params(m.params, transscan_block_prefix(i), cfg, rng, true);
      init_linear(m.params, "head", spec.dim, spec.teacher_dim, true, rng);
    } else {
      init_linear(m.params, "head", 1024, spec.teacher_dim, true, rng);
    }
    return m;
  }

  /// Feature head: (N,3,H,W) image batch -> (N, teacher_dim) features.
  Var features(Bound<T>& bp, Var x) const {
    Tape<T>& t = bp.tape();
    const auto& sh = t.val(x).shape();
    detail::require(sh.size() == 4 && sh[1] == spec.input_ch && sh[2] == spec.input_h &&
                        sh[3] == spec.input_w,
                    "model: input shape mismatch, expected (N," + std::to_string(spec.input_ch) +
                        "," + std::to_string(spec.input_h) + "," + std::to_string(spec.input_w) +
                        ") got " + shape_str(sh));
    if (spec.variant == "teacher") {
      Var cur = x;
      for (size_t i = 1; i <= 3; ++i) {
        const std::string p = "conv" + std::to_string(i);
        cur = t.relu(t.conv2d(cur, bp(p + ".kernel"), bp(p + ".bias"), ConvSpec{2, 1, 1, 1}));
      }
      return t.linear(t.global_avg_pool(cur), bp("fc.weight"), bp("fc.bias"));
    }
    const bool ext_bn_train = bp.training() && !spec.extractor_frozen;
    Var cur = forward_extractor(bp, spec.variant, x, ext_bn_train);
    if (spec.variant == "fpd") {
      cur = t.conv2d(cur, bp("proj.kernel"), bp("proj.bias"), ConvSpec{4, 0, 1, 1});
      const TransScanConfig cfg = spec.transscan();
      cur = transscan_stack(bp, "", cur, cfg);
      Var pooled = t.mean_tokens(t.to_tokens(cur));  // (N,dim)
      return t.linear(pooled, bp("head.weight"), bp("head.bias"));
    }
    return t.linear(t.global_avg_pool(cur), bp("head.weight"), bp("head.bias"));
  }

  /// Eager convenience for frozen evaluation.
  Tensor<T> features_eval(const Tensor<T>& x) {
    Tape<T> tape;
    Bound<T> bp(tape, params, false);
    Var out = features(bp, tape.input(x, false));
    return tape.val(out);
  }

  ArrayContainer checkpoint() const {
    ArrayContainer c;
    params.to_container(c);
    c.metadata()["model_spec"] = spec.to_json();
    return c;
  }

  static Model from_checkpoint(const ArrayContainer& c) {
    Model m = init(ModelSpec::from_json(c.metadata().at("model_spec")), 0);
    m.params.load_values(ParamStore<T>::from_container(c));
    return m;
  }

 private:
  static void init_conv(ParamStore<T>& ps, const std::string& name, size_t in, size_t out,
                        size_t k, bool trainable, bool bias, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    ps.add(name + ".kernel", rng.uniform_tensor<T>({out, in, k, k}, -bound, bound), trainable);
    if (bias) ps.add(name + ".bias", rng.uniform_tensor<T>({out}, -bound, bound), trainable);
  }

  static void init_linear(ParamStore<T>& ps, const std::string& name, size_t in, size_t out,
                          bool trainable, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(name + ".weight", rng.uniform_tensor<T>({out, in}, -bound, bound), trainable);
    ps.add(name + ".bias", rng.uniform_tensor<T>({out}, -bound, bound), trainable);
  }

  static void init_bn(ParamStore<T>& ps, const std::string& name, size_t ch, bool trainable) {
    ps.add(name + ".gamma", Tensor<T>::full({ch}, T(1)), trainable);
    ps.add(name + ".beta", Tensor<T>({ch}), trainable);
    ps.add(name + ".running_mean", Tensor<T>({ch}), false, true);
    ps.add(name + ".running_var", Tensor<T>::full({ch}, T(1)), false, true);
  }

  static void init_extractor(ParamStore<T>& ps, const std::string& variant, size_t in_ch,
                             bool trainable, Rng& rng) {
    init_conv(ps, "extractor.conv1", in_ch, 64, 7, trainable, false, rng);
    init_bn(ps, "extractor.bn1", 64, trainable);
    size_t ch = 64;
    const auto stages = detail::extractor_stages(variant);
    for (size_t si = 0; si < stages.size(); ++si) {
      const auto& st = stages[si];
      for (size_t b = 0; b < st.blocks; ++b) {
        const std::string p =
            "extractor.layer" + std::to_string(si + 1) + "." + std::to_string(b) + ".";
        init_conv(ps, p + "conv1", ch, st.mid, 1, trainable, false, rng);
        init_bn(ps, p + "bn1", st.mid, trainable);
        init_conv(ps, p + "conv2", st.mid, st.mid, 3, trainable, false, rng);
        init_bn(ps, p + "bn2", st.mid, trainable);
        init_conv(ps, p + "conv3", st.mid, st.out, 1, trainable, false, rng);
        init_bn(ps, p + "bn3", st.out, trainable);
        if (b == 0) {
          init_conv(ps, p + "downsample.conv", ch, st.out, 1, trainable, false, rng);
          init_bn(ps, p + "downsample.bn", st.out, trainable);
        }
        ch = st.out;
      }
    }
  }

  static Var bn(Bound<T>& bp, const std::string& name, Var x, bool train_mode) {
    Tape<T>& t = bp.tape();
    if (train_mode)
      return t.batch_norm_train(x, bp(name + ".gamma"), bp(name + ".beta"),
                                bp.buffer(name + ".running_mean"),
                                bp.buffer(name + ".running_var"), 0.1, 1e-5);
    return t.batch_norm_eval(x, bp(name + ".gamma"), bp(name + ".beta"),
                             bp.buffer(name + ".running_mean"), bp.buffer(name + ".running_var"),
                             1e-5);
  }

  static Var forward_extractor(Bound<T>& bp, const std::string& variant, Var x, bool bn_train) {
    Tape<T>& t = bp.tape();
    Var cur = t.conv2d(x, bp("extractor.conv1.kernel"), Var{}, ConvSpec{2, 3, 1, 1});
    cur = t.relu(bn(bp, "extractor.bn1", cur, bn_train));
    cur = t.max_pool2d(cur, 3, 2, 1);
    size_t ch = 64;
    const auto stages = detail::extractor_stages(variant);
    for (size_t si = 0; si < stages.size(); ++si) {
      const auto& st = stages[si];
      for (size_t b = 0; b < st.blocks; ++b) {
        const std::string p =
            "extractor.layer" + std::to_string(si + 1) + "." + std::to_string(b) + ".";
        const size_t stride = b == 0 ? st.stride : 1;
        Var c1 = t.relu(bn(bp, p + "bn1",
                           t.conv2d(cur, bp(p + "conv1.kernel"), Var{}, ConvSpec{1, 0, 1, 1}),
                           bn_train));
        Var c2 = t.relu(bn(bp, p + "bn2",
                           t.conv2d(c1, bp(p + "conv2.kernel"), Var{}, ConvSpec{stride, 1, 1, 1}),
                           bn_train));
        Var c3 = bn(bp, p + "bn3",
                    t.conv2d(c2, bp(p + "conv3.kernel"), Var{}, ConvSpec{1, 0, 1, 1}), bn_train);
        Var identity = cur;
        if (b == 0) {
          identity = bn(bp, p + "downsample.bn",
                        t.conv2d(cur, bp(p + "downsample.conv.kernel"), Var{},
                                 ConvSpec{stride, 0, 1, 1}),
                        bn_train);
        }
        cur = t.relu(t.add(c3, identity));
        ch = st.out;
      }
    }
    (void)ch;
    return cur;
  }
};

}  // namespace efcm
