#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "ytune/encoder.hpp"
#include "ytune/vocab.hpp"

using namespace ytune;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_config(std::uint64_t seed = 3) {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 50;
  c.max_len = 12;
  c.seed = seed;
  return c;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("ytune_test_encoder_" + name);
}

}  // namespace

TEST(Tokenize, MapsThroughVocabulary) {
  Vocabulary v = Vocabulary::from_tokens({"a", "b"});
  EXPECT_EQ(v.id("a"), 3u);
  EXPECT_EQ(v.id("b"), 4u);
  EXPECT_EQ(tokenize("a a b", v, 64).ids, (std::vector<TokenId>{3, 3, 4}));
}

TEST(Tokenize, OovIsUnk) {
  Vocabulary v = Vocabulary::from_tokens({"a", "b"});
  EXPECT_EQ(tokenize("zzz", v, 64).ids, (std::vector<TokenId>{kUnkId}));
}

TEST(Tokenize, EmptyTextIsInputError) {
  Vocabulary v = Vocabulary::from_tokens({"a"});
  EXPECT_THROW(tokenize("   \t ", v, 64), InputError);
}

TEST(Tokenize, TruncatesAtMaxLen) {
  Vocabulary v = Vocabulary::from_tokens({"a"});
  EXPECT_EQ(tokenize("a a a a a", v, 3).size(), 3u);
}

TEST(Vocabulary, MoreFrequentTokensGetSmallerIds) {
  std::vector<std::vector<std::string>> corpus{{"c", "a", "c", "b"}, {"c", "a", "d"},
                                               {"e", "c", "a"}};
  Vocabulary v = Vocabulary::build(corpus, 100);
  // independent count-then-sort oracle
  std::map<std::string, int> counts;
  for (const auto& s : corpus)
    for (const auto& t : s) ++counts[t];
  std::vector<std::pair<std::string, int>> order(counts.begin(), counts.end());
  std::sort(order.begin(), order.end(), [](const auto& x, const auto& y) {
    return x.second != y.second ? x.second > y.second : x.first < y.first;
  });
  for (std::size_t i = 0; i < order.size(); ++i)
    EXPECT_EQ(v.id(order[i].first), kReservedIds + i) << order[i].first;
  for (std::size_t i = 0; i + 1 < order.size(); ++i)
    EXPECT_LT(v.id(order[i].first), v.id(order[i + 1].first));
}

TEST(Vocabulary, CapacityLimitsKeptTokens) {
  Vocabulary v = Vocabulary::build({{"a", "a", "b", "c"}}, 5);
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.id("c"), kUnkId);
}

TEST(Vocabulary, FileRoundTripSkipsComments) {
  Vocabulary v = Vocabulary::from_tokens({"x", "y", "z"});
  auto p = temp_path("vocab.txt");
  v.save(p);
  Vocabulary w = Vocabulary::load(p);
  EXPECT_EQ(w.tokens(), v.tokens());
  EXPECT_EQ(w.id("z"), 5u);
  fs::remove(p);
}

TEST(Vocabulary, ReservedIds) {
  Vocabulary v;
  EXPECT_EQ(v.id("<pad>"), 0u);
  EXPECT_EQ(v.id("<s>"), 1u);
  EXPECT_EQ(v.id("<unk>"), 2u);
  EXPECT_THROW(Vocabulary::from_tokens({"<s>"}), InputError);
}

TEST(Encoder, SameInputIsBitIdentical) {
  FrozenEncoder enc(small_config());
  TokenSequence s{{5, 9, 3, 7}};
  auto a = enc.encode(s), b = enc.encode(s);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].bit_equal(b[i]));
}

TEST(Encoder, PositionEncodingMakesOrderMatter) {
  FrozenEncoder enc(small_config());
  auto a = enc.encode(TokenSequence{{3, 4}});
  auto b = enc.encode(TokenSequence{{4, 3}});
  EXPECT_FALSE(a.back().bit_equal(b.back()));
  // Without positions, swapping rows would just swap outputs; check that it does not.
  bool swapped = true;
  for (std::size_t j = 0; j < 16; ++j)
    swapped = swapped && std::abs(a.back()(0, j) - b.back()(1, j)) < 1e-12;
  EXPECT_FALSE(swapped);
}

TEST(Encoder, LayerCountAndShapes) {
  EncoderConfig c = small_config();
  c.layers = 3;
  FrozenEncoder enc(c);
  auto f = enc.encode(TokenSequence{{5, 6, 7, 8, 9}});
  ASSERT_EQ(f.size(), 3u);
  for (const Tensor& t : f) {
    EXPECT_EQ(t.shape(), (Shape{5, 16}));
    EXPECT_TRUE(t.all_finite());
  }
}

TEST(Encoder, OverlengthIsInputError) {
  FrozenEncoder enc(small_config());
  TokenSequence s;
  s.ids.assign(13, 5);
  EXPECT_THROW(enc.encode(s), InputError);
  EXPECT_THROW(enc.encode(TokenSequence{{5, 0, 6}}), InputError);
  EXPECT_THROW(enc.encode(TokenSequence{{50}}), InputError);
}

TEST(Encoder, TrailingPadDoesNotAffectRealTokens) {
  FrozenEncoder enc(small_config());
  auto a = enc.encode(TokenSequence{{5, 6, 7}});
  auto b = enc.encode(TokenSequence{{5, 6, 7, 0, 0}});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(a.back()(r, j), b.back()(r, j), 1e-12);
}

TEST(Encoder, ParametersAreFrozenWithoutGradBuffers) {
  FrozenEncoder enc(small_config());
  for (const Parameter* p : enc.parameters()) {
    EXPECT_FALSE(p->trainable) << p->name;
    EXPECT_TRUE(p->grad.empty()) << p->name;
  }
}

TEST(Encoder, WeightsUseSmallGaussianInit) {
  FrozenEncoder enc(small_config());
  for (const Parameter* p : enc.parameters()) {
    if (p->name.find(".wq") == std::string::npos) continue;
    double ss = 0;
    for (double v : p->value.values()) ss += v * v;
    const double sd = std::sqrt(ss / p->size());
    EXPECT_NEAR(sd, 0.02, 0.005) << p->name;
  }
}

TEST(Fingerprint, StableAndSeedSensitive) {
  FrozenEncoder a(small_config(3)), b(small_config(3)), c(small_config(4));
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), c.fingerprint());
  EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
}

TEST(Fingerprint, CoversConfigFields) {
  EncoderConfig c = small_config();
  c.max_len = 13;  // same parameters, different config
  FrozenEncoder a(small_config()), b(c);
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(Encoder, SaveLoadRoundTrip) {
  FrozenEncoder a(small_config(11));
  auto p = temp_path("enc.ytck");
  a.save(p);
  FrozenEncoder b = FrozenEncoder::load(p);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  TokenSequence s{{4, 8, 15, 16}};
  EXPECT_TRUE(a.encode(s).back().bit_equal(b.encode(s).back()));
  fs::remove(p);
}

TEST(Encoder, ParallelEncodingMatchesSerial) {
  FrozenEncoder enc(small_config());
  std::vector<TokenSequence> seqs;
  for (TokenId i = 3; i < 20; ++i) seqs.push_back(TokenSequence{{i, static_cast<TokenId>(i + 1), 7}});
  std::vector<const TokenSequence*> ptrs;
  for (auto& s : seqs) ptrs.push_back(&s);
  auto serial = encode_all(enc, ptrs, 1);
  auto parallel = encode_all(enc, ptrs, 4);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (std::size_t l = 0; l < serial[i].size(); ++l)
      EXPECT_TRUE(serial[i][l].bit_equal(parallel[i][l]));
}

TEST(EncoderConfig, RejectsIndivisibleHeads) {
  EncoderConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(FrozenEncoder{c}, ConfigError);
}

TEST(EncoderConfig, DefaultDeskConfig) {
  EncoderConfig c;
  EXPECT_EQ(c.layers, 4u);
  EXPECT_EQ(c.hidden, 64u);
  EXPECT_EQ(c.heads, 4u);
  EXPECT_EQ(c.ffn_dim, 256u);
  EXPECT_EQ(c.vocab_size, 1000u);
  EXPECT_EQ(c.max_len, 64u);
}
