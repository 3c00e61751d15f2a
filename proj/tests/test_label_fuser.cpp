#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "ytune/gradcheck.hpp"
#include "ytune/label_fuser.hpp"

using namespace ytune;

namespace {

EncoderConfig tiny_encoder(std::size_t layers = 2, std::size_t H = 8) {
  EncoderConfig c;
  c.layers = layers;
  c.hidden = H;
  c.heads = 2;
  c.ffn_dim = 2 * H;
  c.vocab_size = 60;
  c.max_len = 16;
  c.seed = 17;
  return c;
}

LayerFeatures random_features(std::size_t layers, std::size_t M, std::size_t H, std::uint64_t seed) {
  Rng rng(seed);
  LayerFeatures f;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor t = Tensor::matrix(M, H);
    for (double& v : t.values()) v = rng.normal();
    f.push_back(t);
  }
  return f;
}

Tensor random_rows(std::size_t R, std::size_t D, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(R, D);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

Tensor run_fuser(LabelFuser& f, const Tensor& rows, const LayerFeatures& feats) {
  Tape t;
  return f.forward(t, t.constant(rows), feats).value();
}

Vocabulary corpus_vocab() {
  return Vocabulary::build({{"good", "bad", "good", "the", "the", "the", "a", "x"},
                            {"the", "good", "a", "y", "bad", "z"}},
                           60);
}

}  // namespace

TEST(InitEmbeddings, RandomUniformRange) {
  FrozenEncoder enc(tiny_encoder());
  LabelSet ls{{"neg", "pos", "neu"}, 2};
  auto e = init_embeddings(ls, InitStrategy::RandomUniform, enc, corpus_vocab(), 5);
  ASSERT_EQ(e.matrix.value.shape(), (Shape{7, 8}));
  for (std::size_t r = 1; r < 7; ++r)
    for (double v : e.matrix.value.row(r)) {
      EXPECT_GE(v, -0.5);
      EXPECT_LE(v, 0.5);
    }
  EXPECT_TRUE(e.matrix.trainable);
}

TEST(InitEmbeddings, TaskRowIsStartToken) {
  FrozenEncoder enc(tiny_encoder());
  LabelSet ls{{"good", "bad"}, 1};
  for (auto s : {InitStrategy::RandomUniform, InitStrategy::SampledVocab, InitStrategy::ClassLabel,
                 InitStrategy::OppositeLabel}) {
    auto e = init_embeddings(ls, s, enc, corpus_vocab(), 1);
    auto want = enc.token_embedding(kTaskTokenId);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(e.matrix.value(0, j), want[j]);
  }
}

TEST(InitEmbeddings, OppositeLabelSwapsClassRows) {
  FrozenEncoder enc(tiny_encoder());
  LabelSet ls{{"good", "bad"}, 1};
  auto cl = init_embeddings(ls, InitStrategy::ClassLabel, enc, corpus_vocab(), 1);
  auto op = init_embeddings(ls, InitStrategy::OppositeLabel, enc, corpus_vocab(), 1);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(cl.matrix.value(1, j), op.matrix.value(2, j));
    EXPECT_EQ(cl.matrix.value(2, j), op.matrix.value(1, j));
  }
  auto good = enc.token_embedding(corpus_vocab().id("good"));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(cl.matrix.value(1, j), good[j]);
}

TEST(InitEmbeddings, ClassLabelAveragesWords) {
  FrozenEncoder enc(tiny_encoder());
  Vocabulary v = corpus_vocab();
  LabelSet ls{{"good bad", "the"}, 1};
  auto e = init_embeddings(ls, InitStrategy::ClassLabel, enc, v, 1);
  auto a = enc.token_embedding(v.id("good")), b = enc.token_embedding(v.id("bad"));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(e.matrix.value(1, j), (a[j] + b[j]) / 2, 1e-15);
}

TEST(InitEmbeddings, ClassLabelReplicasAreJittered) {
  FrozenEncoder enc(tiny_encoder());
  LabelSet ls{{"good", "bad"}, 2};
  auto e = init_embeddings(ls, InitStrategy::ClassLabel, enc, corpus_vocab(), 1);
  auto base = enc.token_embedding(corpus_vocab().id("good"));
  bool differ = false;
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_LE(std::abs(e.matrix.value(1, j) - base[j]), 0.01);
    EXPECT_LE(std::abs(e.matrix.value(2, j) - base[j]), 0.01);
    differ = differ || e.matrix.value(1, j) != e.matrix.value(2, j);
  }
  EXPECT_TRUE(differ);
}

TEST(InitEmbeddings, EmptyClassNameIsInitError) {
  FrozenEncoder enc(tiny_encoder());
  LabelSet ls{{"good", "  "}, 1};
  EXPECT_THROW(init_embeddings(ls, InitStrategy::ClassLabel, enc, corpus_vocab(), 1), InitError);
}

TEST(InitEmbeddings, SampledVocabFollowsFrequencyOrder) {
  FrozenEncoder enc(tiny_encoder());
  std::vector<std::vector<std::string>> corpus{{"good", "bad", "good", "the", "the", "the", "a", "x"},
                                               {"the", "good", "a", "y", "bad", "z"}};
  Vocabulary v = Vocabulary::build(corpus, 60);
  std::map<std::string, int> counts;
  for (const auto& s : corpus)
    for (const auto& t : s) ++counts[t];
  std::vector<std::pair<std::string, int>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](auto& a, auto& b) { return a.second > b.second; });

  LabelSet ls{{"c0", "c1"}, 2};
  auto e = init_embeddings(ls, InitStrategy::SampledVocab, enc, v, 1);
  ASSERT_EQ(e.matrix.value.rows(), 5u);
  for (std::size_t i = 0; i < 4; ++i) {
    auto want = enc.token_embedding(v.id(order[i].first));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(e.matrix.value(1 + i, j), want[j]) << order[i].first;
  }
}

TEST(LabelSetType, Validation) {
  EXPECT_THROW((LabelSet{{"a"}, 1}.validate()), ConfigError);
  EXPECT_THROW((LabelSet{{"a", "a"}, 1}.validate()), ConfigError);
  EXPECT_THROW((LabelSet{{"a", "b"}, 0}.validate()), ConfigError);
}

TEST(LayerMapping, TwentyFourLayers) {
  EXPECT_EQ(layer_mapping(1, 24), 24u);
  EXPECT_EQ(layer_mapping(2, 24), 12u);
  EXPECT_EQ(layer_mapping(3, 24), 8u);
  EXPECT_EQ(layer_mapping(4, 24), 6u);
}

TEST(LayerMapping, FourLayersClampsAtOne) {
  EXPECT_EQ(layer_mapping(1, 4), 4u);
  EXPECT_EQ(layer_mapping(2, 4), 2u);
  EXPECT_EQ(layer_mapping(3, 4), 1u);
  EXPECT_EQ(layer_mapping(4, 4), 1u);
  EXPECT_EQ(layer_mapping(9, 4), 1u);
}

TEST(LayerMapping, FirstDecoderLayerReadsTop) {
  for (std::size_t L = 1; L <= 30; ++L) EXPECT_EQ(layer_mapping(1, L), L);
}

TEST(LayerMapping, ProportionalAlternative) {
  EXPECT_EQ(layer_mapping(1, 4, LayerMap::Proportional, 4), 1u);
  EXPECT_EQ(layer_mapping(4, 4, LayerMap::Proportional, 4), 4u);
  FuserConfig c;
  c.layers = 4;
  EXPECT_EQ(c.layer_mask(4), 0b1011u);
}

TEST(Fuse, SingleFeatureRowCrossAttentionIsProjection) {
  // With one key the cross-attention output for every row is the projected
  // value row; so changing queries cannot change that sublayer's output.
  FuserConfig cfg;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 3);
  auto feats = random_features(1, 1, 8, 4);
  // parameters 12..15 are the cross-attention key and value projections
  Tensor v = kernels::linear(feats[0], f.parameters()[14]->value, f.parameters()[15]->value);
  Tensor probs;
  Tensor q = random_rows(3, 8, 5);
  Tensor out = kernels::attention(q, kernels::linear(feats[0], f.parameters()[12]->value,
                                                     f.parameters()[13]->value),
                                  v, 2, &probs);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out(r, j), v(0, j));
  EXPECT_EQ(run_fuser(f, random_rows(4, 8, 6), feats).shape(), (Shape{4, 8}));
}

TEST(Fuse, OutputShape) {
  for (std::size_t N : {2, 3, 5})
    for (std::size_t k : {1, 2}) {
      FuserConfig cfg;
      cfg.heads = 2;
      LabelFuser f(cfg, 8, 8, 3);
      Tensor out = run_fuser(f, random_rows(1 + N * k, 8, N), random_features(2, 5, 8, 1));
      EXPECT_EQ(out.shape(), (Shape{1 + N * k, 8}));
    }
}

TEST(Fuse, DepthChangesOutput) {
  FuserConfig one, two;
  one.heads = two.heads = 2;
  two.layers = 2;
  LabelFuser f1(one, 8, 8, 3), f2(two, 8, 8, 3);
  auto feats = random_features(2, 5, 8, 1);
  Tensor rows = random_rows(4, 8, 2);
  EXPECT_FALSE(run_fuser(f1, rows, feats).bit_equal(run_fuser(f2, rows, feats)));
}

TEST(Fuse, MissingLayerIsConfigError) {
  FuserConfig cfg;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 3);
  LayerFeatures feats = random_features(2, 5, 8, 1);
  feats[1] = Tensor();
  EXPECT_THROW(run_fuser(f, random_rows(3, 8, 2), feats), ConfigError);
}

TEST(Fuse, DoesNotModifyFeatures) {
  FuserConfig cfg;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 3);
  LayerFeatures feats = random_features(2, 5, 8, 1);
  LayerFeatures copy = feats;
  Tensor rows = random_rows(3, 8, 2);
  Parameter p("rows", rows);
  Tape t;
  Var out = f.forward(t, t.param(p), feats);
  t.backward(ops::sum_squares(out));
  for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(feats[l].bit_equal(copy[l]));
}

TEST(Fuse, EquivariantUnderLabelPermutation) {
  FuserConfig cfg;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 3);
  auto feats = random_features(2, 6, 8, 1);
  Tensor rows = random_rows(5, 8, 2);
  const std::vector<std::size_t> perm{0, 3, 1, 4, 2};
  Tensor permuted = Tensor::matrix(5, 8);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 8; ++j) permuted(r, j) = rows(perm[r], j);
  Tensor a = run_fuser(f, rows, feats), b = run_fuser(f, permuted, feats);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(b(r, j), a(perm[r], j), 1e-12);
  LabelSet ls{{"a", "b", "c", "d"}, 1};
  auto sa = score(a, ls), sb = score(b, ls);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(sb[c], sa[perm[c + 1] - 1], 1e-12);
}

TEST(Score, IdenticalRowScoresOne) {
  Tensor fused = Tensor::from_rows({{1, 2, 3}, {1, 2, 3}, {-1, 0, 0}});
  auto s = score(fused, LabelSet{{"a", "b"}, 1});
  EXPECT_NEAR(s[0], 1.0, 1e-15);
}

TEST(Score, ReplicaLogitsAreSummed) {
  // cosines 0.3 and 0.4 against e0
  auto row = [](double c) { return std::vector<double>{c, std::sqrt(1 - c * c)}; };
  Tensor fused = Tensor::matrix(5, 2);
  fused(0, 0) = 1.0;
  auto put = [&](std::size_t r, std::vector<double> v) { fused(r, 0) = v[0], fused(r, 1) = v[1]; };
  put(1, row(0.3));
  put(2, row(0.4));
  put(3, row(-0.2));
  put(4, row(0.1));
  auto s = score(fused, LabelSet{{"a", "b"}, 2});
  EXPECT_NEAR(s[0], 0.7, 1e-15);
  EXPECT_NEAR(s[1], -0.1, 1e-15);
}

TEST(Score, BoundedByK) {
  for (std::size_t k : {1, 2, 3}) {
    LabelSet ls{{"a", "b", "c"}, k};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto s = score(random_rows(ls.rows(), 6, seed), ls);
      for (double v : s) {
        EXPECT_GE(v, -double(k) - 1e-12);
        EXPECT_LE(v, double(k) + 1e-12);
      }
    }
  }
}

TEST(ParamCount, EmbeddingPart) {
  FuserConfig cfg;
  LabelSet ls{{"a", "b", "c"}, 1};
  EXPECT_EQ(param_count(cfg, ls, 64, 64) - fuser_layer_param_count(64, 64), 256u);
}

TEST(ParamCount, SharedDepthDoesNotChangeCount) {
  LabelSet ls{{"a", "b", "c"}, 2};
  FuserConfig c1, c4;
  c4.layers = 4;
  EXPECT_EQ(param_count(c1, ls, 64, 64), param_count(c4, ls, 64, 64));
}

TEST(ParamCount, MatchesWalkOverTrainableParameters) {
  EncoderConfig ec = tiny_encoder(4, 16);
  FrozenEncoder enc(ec);
  for (std::size_t depth : {1, 2, 4})
    for (bool shared : {true, false}) {
      FuserConfig cfg;
      cfg.layers = depth;
      cfg.weight_shared = shared;
      cfg.heads = 2;
      LabelSet ls{{"a", "b", "c"}, 2};
      auto emb = init_embeddings(ls, InitStrategy::RandomUniform, enc, corpus_vocab(), 1);
      LabelFuser f(cfg, 16, 16, 2);
      std::size_t walked = emb.matrix.trainable ? emb.matrix.size() : 0;
      for (Parameter* p : f.parameters()) walked += p->trainable ? p->size() : 0;
      EXPECT_EQ(walked, param_count(cfg, ls, 16, 16)) << depth << shared;
    }
}

TEST(Fuse, GradientsPassFiniteDifferenceCheck) {
  FrozenEncoder enc(tiny_encoder(2, 8));
  LabelSet ls{{"a", "b", "c"}, 2};
  auto emb = init_embeddings(ls, InitStrategy::RandomUniform, enc, corpus_vocab(), 1);
  FuserConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 4);
  auto feats = random_features(2, 3, 8, 9);
  auto build = [&](Tape& t) {
    Var s = score(f.forward(t, t.param(emb.matrix), feats), ls);
    return ops::triplet_loss(s, 0, 3.0);  // wide margin keeps every hinge active
  };
  std::vector<Parameter*> params{&emb.matrix};
  for (Parameter* p : f.parameters()) params.push_back(p);
  auto report = check_gradients(
      params, [&] { Tape t; return build(t).value()[0]; },
      [&] {
        for (Parameter* p : params) p->zero_grad();
        Tape t;
        t.backward(build(t));
      },
      1e-4);
  EXPECT_TRUE(report.passed) << report.worst_param << " " << report.max_rel_error;
  EXPECT_EQ(report.elements_checked, param_count(cfg, ls, 8, 8));
}

TEST(Fuse, EmbeddingRowFiniteDifferenceMatchesBackward) {
  FrozenEncoder enc(tiny_encoder(2, 8));
  LabelSet ls{{"a", "b"}, 1};
  auto emb = init_embeddings(ls, InitStrategy::SampledVocab, enc, corpus_vocab(), 1);
  FuserConfig cfg;
  cfg.heads = 2;
  LabelFuser f(cfg, 8, 8, 4);
  auto feats = random_features(2, 4, 8, 9);
  auto loss = [&] {
    Tape t;
    return ops::triplet_loss(score(f.forward(t, t.param(emb.matrix), feats), ls), 1, 2.0).value()[0];
  };
  emb.matrix.zero_grad();
  {
    Tape t;
    t.backward(ops::triplet_loss(score(f.forward(t, t.param(emb.matrix), feats), ls), 1, 2.0));
  }
  Tensor numeric = finite_diff_grad(loss, emb.matrix, 1e-5);
  for (std::size_t j = 0; j < 8; ++j)
    EXPECT_LT(grad_relative_error(emb.matrix.grad(1, j), numeric(1, j)), 1e-4);
}

// Counted query-key pairs of the fuser follow L_d * (N'^2 + M N') exactly,
// so the cross term grows linearly in both N and M.
TEST(Fuse, CountedAttentionPairsFollowDecoderCost) {
  auto pairs = [](std::size_t N, std::size_t M, std::size_t depth) {
    FuserConfig cfg;
    cfg.layers = depth;
    cfg.heads = 2;
    LabelFuser f(cfg, 8, 8, 3);
    OpCounts c;
    {
      CountScope scope(c);
      run_fuser(f, random_rows(1 + N, 8, 1), random_features(4, M, 8, 2));
    }
    return c;
  };
  for (std::size_t N : {2, 4})
    for (std::size_t M : {5, 10})
      for (std::size_t depth : {1, 2, 4}) {
        const std::uint64_t n = 1 + N;
        EXPECT_EQ(pairs(N, M, depth).attention_pairs, depth * (n * n + M * n));
      }
  // MACs are affine in M for fixed N: equal increments for equal steps.
  const auto m1 = pairs(3, 4, 2).matmul_macs, m2 = pairs(3, 8, 2).matmul_macs,
             m3 = pairs(3, 12, 2).matmul_macs;
  EXPECT_EQ(m2 - m1, m3 - m2);
}
