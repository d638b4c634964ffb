#include <gtest/gtest.h>

#include <map>

#include "efcm/transformer.hpp"
#include "fd_util.hpp"

using namespace efcm;
using efcm_test::fd_check_params;
using efcm_test::weighted_sum;

namespace {

struct Fixture {
  TransScanConfig cfg;
  ParamStore<double> ps;

  explicit Fixture(size_t dim = 8, size_t heads = 2, size_t depth = 1, uint64_t seed = 1) {
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.depth = depth;
    cfg.mlp_ratio = 4;
    cfg.scan.groups = 4;
    cfg.scan.reduced_dim = 4;
    Rng rng(seed);
    for (size_t i = 0; i < depth; ++i)
      init_transscan_params(ps, transscan_block_prefix(i), cfg, rng, true);
  }

  void zero(const std::string& n) {
    Tensor<double>& t = ps.at(n);
    for (size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
  }

  /// Zero the MSA output projection and the second MLP layer: both residual
  /// branches contribute exactly nothing.
  void make_transformer_identity(size_t block) {
    const std::string p = transscan_block_prefix(block) + "tr.";
    zero(p + "msa.out.weight");
    zero(p + "msa.out.bias");
    zero(p + "mlp.fc2.weight");
    zero(p + "mlp.fc2.bias");
  }

  void make_scan_identity(size_t block) {
    const std::string p = transscan_block_prefix(block) + "scan.";
    const size_t cg = cfg.dim / cfg.scan.groups;
    for (const char* br : {"branch1", "branch2"}) {
      Tensor<double>& k = ps.at(p + br + ".kernel");
      for (size_t i = 0; i < k.size(); ++i) k[i] = 0.0;
      for (size_t oc = 0; oc < cfg.dim; ++oc) k.at4(oc, oc % cg, 1, 1) = 1.0;
      zero(p + br + ".bias");
    }
    for (const char* n : {"A.weight", "A.bias", "B.weight", "B.bias", "spatial.weight",
                          "spatial.bias"})
      zero(p + n);
  }
};

TEST(Msa, SingleTokenAttendsToItself) {
  Fixture f;
  Rng rng(2);
  Tensor<double> tok = rng.uniform_tensor<double>({1, 1, 8}, -1, 1);
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  auto out = multi_head_self_attention(bp, "block0.tr.msa.", t.input(tok), 2);
  ASSERT_EQ(out.head_attn.size(), 2u);
  for (Var a : out.head_attn) EXPECT_DOUBLE_EQ(t.val(a)[0], 1.0);
}

TEST(Msa, ZeroOutputProjectionGivesZero) {
  Fixture f;
  f.zero("block0.tr.msa.out.weight");
  f.zero("block0.tr.msa.out.bias");
  Rng rng(3);
  Tensor<double> tok = rng.uniform_tensor<double>({2, 5, 8}, -1, 1);
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  auto out = multi_head_self_attention(bp, "block0.tr.msa.", t.input(tok), 2);
  for (size_t i = 0; i < t.val(out.y).size(); ++i) EXPECT_DOUBLE_EQ(t.val(out.y)[i], 0.0);
}

TEST(Msa, AttentionRowsSumToOne) {
  Fixture f;
  Rng rng(4);
  Tensor<double> tok = rng.uniform_tensor<double>({2, 6, 8}, -2, 2);
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  auto out = multi_head_self_attention(bp, "block0.tr.msa.", t.input(tok), 2);
  for (Var av : out.head_attn) {
    const Tensor<double>& a = t.val(av);
    for (size_t b = 0; b < 2; ++b)
      for (size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (size_t c = 0; c < 6; ++c) s += a.at3(b, r, c);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(Msa, TokenPermutationEquivariance) {
  // No positional encoding: permuting token order permutes output rows
  // identically.
  Fixture f;
  Rng rng(5);
  Tensor<double> tok = rng.uniform_tensor<double>({1, 5, 8}, -1, 1);
  const size_t perm[5] = {3, 0, 4, 1, 2};
  Tensor<double> ptok({1, 5, 8});
  for (size_t i = 0; i < 5; ++i)
    for (size_t c = 0; c < 8; ++c) ptok.at3(0, i, c) = tok.at3(0, perm[i], c);
  auto run = [&](const Tensor<double>& x) {
    Tape<double> t;
    Bound<double> bp(t, f.ps, false);
    auto out = multi_head_self_attention(bp, "block0.tr.msa.", t.input(x), 2);
    return t.val(out.y);
  };
  Tensor<double> y = run(tok);
  Tensor<double> py = run(ptok);
  for (size_t i = 0; i < 5; ++i)
    for (size_t c = 0; c < 8; ++c)
      EXPECT_NEAR(py.at3(0, i, c), y.at3(0, perm[i], c), 1e-12);
}

TEST(TransformerBlock, ResidualIdentityExact) {
  Fixture f;
  f.make_transformer_identity(0);
  Rng rng(6);
  Tensor<double> x = rng.uniform_tensor<double>({2, 8, 3, 3}, -1, 1);
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  Var y = transformer_block(bp, "block0.tr.", t.input(x), f.cfg);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_EQ(t.val(y)[i], x[i]);
}

TEST(TransformerBlock, SpatialPermutationEquivariance) {
  Fixture f;
  Rng rng(7);
  Tensor<double> x = rng.uniform_tensor<double>({1, 8, 2, 3}, -1, 1);
  // permutation of the 6 spatial positions
  const size_t perm[6] = {5, 2, 0, 4, 1, 3};
  Tensor<double> px(x.shape());
  for (size_t c = 0; c < 8; ++c) {
    const double* src = &x.at4(0, c, 0, 0);
    double* dst = &px.at4(0, c, 0, 0);
    for (size_t i = 0; i < 6; ++i) dst[i] = src[perm[i]];
  }
  auto run = [&](const Tensor<double>& v) {
    Tape<double> t;
    Bound<double> bp(t, f.ps, false);
    return t.val(transformer_block(bp, "block0.tr.", t.input(v), f.cfg));
  };
  Tensor<double> y = run(x);
  Tensor<double> py = run(px);
  for (size_t c = 0; c < 8; ++c)
    for (size_t i = 0; i < 6; ++i)
      EXPECT_NEAR((&py.at4(0, c, 0, 0))[i], (&y.at4(0, c, 0, 0))[perm[i]], 1e-12);
}

TEST(TransformerBlock, GradCheckTwoTokenInstance) {
  // 2-token, dim-8 instance: gradient of a random functional w.r.t. the
  // input map and all block parameters
  for (uint64_t seed : {11, 12, 13}) {
    Fixture f(8, 2, 1, seed);
    Rng rng(20 + seed);
    Tensor<double> x = rng.uniform_tensor<double>({1, 8, 1, 2}, -1, 1);
    Tensor<double> lw = rng.uniform_tensor<double>({1, 8, 1, 2}, -1, 1);
    auto loss_fn = [&]() {
      Tape<double> t;
      Bound<double> bp(t, f.ps, true);
      return t.val(weighted_sum(t, transformer_block(bp, "block0.tr.", t.input(x), f.cfg), lw))[0];
    };
    Tape<double> t;
    Bound<double> bp(t, f.ps, true);
    Var xv = t.input(x, true);
    t.backward(weighted_sum(t, transformer_block(bp, "block0.tr.", xv, f.cfg), lw));
    auto eval_x = [&](const Tensor<double>& xp) {
      Tape<double> t2;
      Bound<double> bp2(t2, f.ps, true);
      return t2.val(
          weighted_sum(t2, transformer_block(bp2, "block0.tr.", t2.input(xp), f.cfg), lw))[0];
    };
    EXPECT_LT(grad_check(eval_x, x, t.grad(xv)).max_rel_err, 1e-4) << "input, seed " << seed;
    std::map<std::string, Tensor<double>> analytic;
    for (const auto& item : f.ps.items())
      if (item.trainable && item.name.rfind("block0.tr.", 0) == 0)
        analytic[item.name] = bp.grad_of(item.name);
    EXPECT_LT(fd_check_params(f.ps, analytic, loss_fn), 1e-4) << "params, seed " << seed;
  }
}

TEST(TransScan, ShapePreservedThroughDepth3Stack) {
  Fixture f(8, 2, 3, 31);
  Rng rng(32);
  Tensor<double> x = rng.uniform_tensor<double>({2, 8, 3, 4}, -1, 1);
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  Var y = transscan_stack(bp, "", t.input(x), f.cfg);
  EXPECT_EQ(t.val(y).shape(), x.shape());
}

TEST(TransScan, IdentityStackScalesByPowersOfThree) {
  // SCAN triples, the transformer contributes nothing: a depth-k stack maps
  // X to 3^k X, exactly on coarse dyadic inputs.
  Fixture f(8, 2, 3, 33);
  for (size_t i = 0; i < 3; ++i) {
    f.make_scan_identity(i);
    f.make_transformer_identity(i);
  }
  Rng rng(34);
  Tensor<double> x({1, 8, 2, 2});
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = (static_cast<double>(rng.index(129)) - 64.0) / 64.0;
  Tape<double> t;
  Bound<double> bp(t, f.ps, false);
  Var y = transscan_stack(bp, "", t.input(x), f.cfg);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_EQ(t.val(y)[i], 27.0 * x[i]);
}

TEST(TransScan, DeterministicForward) {
  auto run = [] {
    Fixture f(8, 2, 2, 77);
    Rng rng(78);
    Tensor<double> x = rng.uniform_tensor<double>({1, 8, 3, 3}, -1, 1);
    Tape<double> t;
    Bound<double> bp(t, f.ps, false);
    return t.val(transscan_stack(bp, "", t.input(x), f.cfg)).content_hash();
  };
  EXPECT_EQ(run(), run());
}

TEST(TransScan, NoDeadParameters) {
  // Every parameterized sub-path must receive nonzero gradient from a
  // generic loss on the stack output.
  Fixture f(8, 2, 1, 41);
  Rng rng(42);
  Tensor<double> x = rng.uniform_tensor<double>({4, 8, 3, 3}, -1, 1);
  Tensor<double> lw = rng.uniform_tensor<double>({4, 8, 3, 3}, -1, 1);
  Tape<double> t;
  Bound<double> bp(t, f.ps, true);
  t.backward(weighted_sum(t, transscan_stack(bp, "", t.input(x), f.cfg), lw));
  for (const auto& item : f.ps.items()) {
    if (!item.trainable) continue;
    const Tensor<double>& g = bp.grad_of(item.name);
    double mx = 0;
    for (size_t i = 0; i < g.size(); ++i) mx = std::max(mx, std::abs(g[i]));
    EXPECT_GT(mx, 0.0) << "dead parameter: " << item.name;
  }
}

TEST(TransScan, FullBlockGradCheck) {
  for (uint64_t seed : {51, 52, 53}) {
    Fixture f(8, 2, 1, seed);
    Rng rng(60 + seed);
    Tensor<double> x = rng.uniform_tensor<double>({2, 8, 2, 2}, -1, 1);
    Tensor<double> lw = rng.uniform_tensor<double>({2, 8, 2, 2}, -1, 1);
    auto loss_fn = [&]() {
      Tape<double> t;
      Bound<double> bp(t, f.ps, true);
      return t.val(weighted_sum(t, transscan_stack(bp, "", t.input(x), f.cfg), lw))[0];
    };
    Tape<double> t;
    Bound<double> bp(t, f.ps, true);
    Var xv = t.input(x, true);
    t.backward(weighted_sum(t, transscan_stack(bp, "", xv, f.cfg), lw));
    std::map<std::string, Tensor<double>> analytic;
    for (const auto& item : f.ps.items())
      if (item.trainable) analytic[item.name] = bp.grad_of(item.name);
    EXPECT_LT(fd_check_params(f.ps, analytic, loss_fn), 1e-4) << "seed " << seed;
  }
}

}  // namespace
