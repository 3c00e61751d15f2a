#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ytune/autodiff.hpp"
#include "ytune/encoder.hpp"
#include "ytune/rng.hpp"
#include "ytune/vocab.hpp"

namespace ytune {

/// Class names plus the number of embedding rows per class.
struct LabelSet {
  std::vector<std::string> names;
  std::size_t k = 1;

  std::size_t classes() const { return names.size(); }
  /// Task row plus k rows per class.
  std::size_t rows() const { return 1 + names.size() * k; }
  /// Row of replica `r` of class `c`.
  std::size_t row_of(std::size_t c, std::size_t r = 0) const { return 1 + c * k + r; }

  std::size_t index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError("label '" + name + "' not in label set");
    return static_cast<std::size_t>(it - names.begin());
  }

  void validate() const {
    if (names.size() < 2) throw ConfigError("a label set needs at least two classes");
    if (k < 1) throw ConfigError("k (embeddings per label) must be at least 1");
    std::set<std::string> uniq(names.begin(), names.end());
    if (uniq.size() != names.size()) throw ConfigError("label names must be unique");
  }

  bool operator==(const LabelSet&) const = default;
};

enum class InitStrategy { RandomUniform, SampledVocab, ClassLabel, OppositeLabel };

inline const char* to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::RandomUniform: return "random_uniform";
    case InitStrategy::SampledVocab: return "sampled_vocab";
    case InitStrategy::ClassLabel: return "class_label";
    case InitStrategy::OppositeLabel: return "opposite_label";
  }
  return "?";
}

inline InitStrategy parse_init_strategy(const std::string& s) {
  for (auto v : {InitStrategy::RandomUniform, InitStrategy::SampledVocab, InitStrategy::ClassLabel,
                 InitStrategy::OppositeLabel})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown init strategy '" + s + "'");
}

/// psi(Y): row 0 is the task embedding, then k rows per class.
struct LabelEmbeddings {
  LabelSet labels;
  Parameter matrix;
};

inline constexpr const char* kLabelEmbeddingName = "label_embeddings";

/// Builds the trainable label matrix. The task row always starts from the
/// "<s>" token embedding; the remaining rows follow `strategy`.
inline LabelEmbeddings init_embeddings(const LabelSet& labels, InitStrategy strategy,
                                       const FrozenEncoder& encoder, const Vocabulary& vocab,
                                       std::uint64_t seed) {
  labels.validate();
  const std::size_t D = encoder.config().hidden;
  const std::size_t N = labels.classes(), k = labels.k;
  Tensor m = Tensor::matrix(labels.rows(), D);
  Rng rng(seed);
  auto set_row = [&](std::size_t r, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), m.row(r).begin());
  };
  set_row(0, encoder.token_embedding(kTaskTokenId));

  switch (strategy) {
    case InitStrategy::RandomUniform:
      for (std::size_t r = 1; r < labels.rows(); ++r)
        for (double& v : m.row(r)) v = rng.uniform(-0.5, 0.5);
      break;
    case InitStrategy::SampledVocab: {
      // The vocabulary is frequency ordered, so the first N*k regular ids are
      // the most frequent tokens.
      if (vocab.size() < kReservedIds + N * k)
        throw InitError("vocabulary too small to sample " + std::to_string(N * k) + " embeddings");
      for (std::size_t c = 0; c < N; ++c)
        for (std::size_t r = 0; r < k; ++r)
          set_row(labels.row_of(c, r),
                  encoder.token_embedding(static_cast<TokenId>(kReservedIds + c * k + r)));
      break;
    }
    case InitStrategy::ClassLabel:
    case InitStrategy::OppositeLabel: {
      std::vector<std::vector<double>> class_vec(N, std::vector<double>(D, 0.0));
      for (std::size_t c = 0; c < N; ++c) {
        auto words = split_whitespace(labels.names[c]);
        if (words.empty())
          throw InitError("class name '" + labels.names[c] + "' tokenizes to nothing");
        for (const auto& w : words) {
          auto e = encoder.token_embedding(vocab.id(w));
          for (std::size_t j = 0; j < D; ++j) class_vec[c][j] += e[j];
        }
        for (double& v : class_vec[c]) v /= static_cast<double>(words.size());
      }
      for (std::size_t c = 0; c < N; ++c) {
        const std::size_t src = strategy == InitStrategy::ClassLabel ? c : N - 1 - c;
        for (std::size_t r = 0; r < k; ++r) {
          auto row = m.row(labels.row_of(c, r));
          for (std::size_t j = 0; j < D; ++j)
            row[j] = class_vec[src][j] + (k > 1 ? rng.uniform(-0.01, 0.01) : 0.0);
        }
      }
      break;
    }
  }
  return LabelEmbeddings{labels, Parameter(kLabelEmbeddingName, std::move(m), true)};
}

enum class LayerMap {
  FloorDiv,      // decoder layer i reads encoder layer floor(L_e / i)
  Proportional,  // decoder layer i reads encoder layer floor(L_e * i / L_d)
};

inline const char* to_string(LayerMap m) {
  return m == LayerMap::FloorDiv ? "floor_div" : "proportional";
}

inline LayerMap parse_layer_map(const std::string& s) {
  if (s == "floor_div") return LayerMap::FloorDiv;
  if (s == "proportional") return LayerMap::Proportional;
  throw ConfigError("unknown layer_map '" + s + "'");
}

/// 1-based encoder layer read by 1-based decoder layer `i`, clamped to
/// [1, encoder_layers].
inline std::size_t layer_mapping(std::size_t i, std::size_t encoder_layers,
                                 LayerMap map = LayerMap::FloorDiv, std::size_t decoder_layers = 1) {
  if (i == 0) throw UsageError("decoder layers are numbered from 1");
  std::size_t e = map == LayerMap::FloorDiv ? encoder_layers / i
                                            : encoder_layers * i / std::max<std::size_t>(decoder_layers, 1);
  return std::clamp<std::size_t>(e, 1, encoder_layers);
}

struct FuserConfig {
  std::size_t layers = 1;  // L_d
  bool weight_shared = true;
  LayerMap layer_map = LayerMap::FloorDiv;
  std::size_t heads = 4;

  void validate(std::size_t width) const {
    if (layers < 1) throw ConfigError("fuser needs at least one layer");
    if (heads == 0 || width % heads != 0)
      throw ConfigError("fuser width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }

  std::size_t parameter_sets() const { return weight_shared ? 1 : layers; }

  /// Bit (l - 1) set for each encoder layer l some decoder layer reads.
  std::uint64_t layer_mask(std::size_t encoder_layers) const {
    std::uint64_t mask = 0;
    for (std::size_t i = 1; i <= layers; ++i)
      mask |= 1ULL << (layer_mapping(i, encoder_layers, layer_map, layers) - 1);
    return mask;
  }
};

inline Json to_json(const FuserConfig& c) {
  return Json{{"layers", c.layers},
              {"weight_shared", c.weight_shared},
              {"layer_map", to_string(c.layer_map)},
              {"heads", c.heads}};
}

/// Scalars in one fuser layer for width D reading H-wide features.
inline std::size_t fuser_layer_param_count(std::size_t D, std::size_t H) {
  const std::size_t self_attn = 4 * D * D + 4 * D;
  const std::size_t cross_attn = 2 * D * D + 2 * H * D + 4 * D;
  const std::size_t ffn = D * 4 * D + 4 * D + 4 * D * D + D;
  const std::size_t norms = 3 * 2 * D;
  return self_attn + cross_attn + ffn + norms;
}

/// Trainable scalars: label embeddings plus the fuser parameter sets.
inline std::size_t param_count(const FuserConfig& cfg, const LabelSet& labels, std::size_t D,
                               std::size_t H) {
  return labels.rows() * D + cfg.parameter_sets() * fuser_layer_param_count(D, H);
}

/// One transformer-decoder-style block: self-attention over label rows,
/// cross-attention into encoder features, FFN; post-norm residuals.
struct FuserLayer {
  Parameter s_wq, s_bq, s_wk, s_bk, s_wv, s_bv, s_wo, s_bo, ln1_g, ln1_b;
  Parameter c_wq, c_bq, c_wk, c_bk, c_wv, c_bv, c_wo, c_bo, ln2_g, ln2_b;
  Parameter f_w1, f_b1, f_w2, f_b2, ln3_g, ln3_b;

  FuserLayer(const std::string& prefix, std::size_t D, std::size_t H, Rng& rng) {
    auto w = [&](const char* n, std::size_t r, std::size_t c) {
      Tensor t = Tensor::matrix(r, c);
      for (double& v : t.values()) v = rng.normal(0.0, kInitStd);
      return Parameter(prefix + n, std::move(t));
    };
    auto v = [&](const char* n, std::size_t len, double fill) {
      return Parameter(prefix + n, Tensor({len}, fill));
    };
    s_wq = w("self.wq", D, D); s_bq = v("self.bq", D, 0.0);
    s_wk = w("self.wk", D, D); s_bk = v("self.bk", D, 0.0);
    s_wv = w("self.wv", D, D); s_bv = v("self.bv", D, 0.0);
    s_wo = w("self.wo", D, D); s_bo = v("self.bo", D, 0.0);
    ln1_g = v("ln1.g", D, 1.0); ln1_b = v("ln1.b", D, 0.0);
    c_wq = w("cross.wq", D, D); c_bq = v("cross.bq", D, 0.0);
    c_wk = w("cross.wk", H, D); c_bk = v("cross.bk", D, 0.0);
    c_wv = w("cross.wv", H, D); c_bv = v("cross.bv", D, 0.0);
    c_wo = w("cross.wo", D, D); c_bo = v("cross.bo", D, 0.0);
    ln2_g = v("ln2.g", D, 1.0); ln2_b = v("ln2.b", D, 0.0);
    f_w1 = w("ffn.w1", D, 4 * D); f_b1 = v("ffn.b1", 4 * D, 0.0);
    f_w2 = w("ffn.w2", 4 * D, D); f_b2 = v("ffn.b2", D, 0.0);
    ln3_g = v("ln3.g", D, 1.0); ln3_b = v("ln3.b", D, 0.0);
  }

  std::vector<Parameter*> parameters() {
    return {&s_wq, &s_bq, &s_wk, &s_bk, &s_wv, &s_bv, &s_wo, &s_bo, &ln1_g, &ln1_b,
            &c_wq, &c_bq, &c_wk, &c_bk, &c_wv, &c_bv, &c_wo, &c_bo, &ln2_g, &ln2_b,
            &f_w1, &f_b1, &f_w2, &f_b2, &ln3_g, &ln3_b};
  }

  Var apply(Tape& t, const Var& x, const Var& features, std::size_t heads) {
    using namespace ops;
    auto P = [&](Parameter& p) { return t.param(p); };
    Var a = attention(linear(x, P(s_wq), P(s_bq)), linear(x, P(s_wk), P(s_bk)),
                      linear(x, P(s_wv), P(s_bv)), heads);
    Var h = layer_norm(add(x, linear(a, P(s_wo), P(s_bo))), P(ln1_g), P(ln1_b));
    Var c = attention(linear(h, P(c_wq), P(c_bq)), linear(features, P(c_wk), P(c_bk)),
                      linear(features, P(c_wv), P(c_bv)), heads);
    h = layer_norm(add(h, linear(c, P(c_wo), P(c_bo))), P(ln2_g), P(ln2_b));
    Var f = linear(gelu(linear(h, P(f_w1), P(f_b1))), P(f_w2), P(f_b2));
    return layer_norm(add(h, f), P(ln3_g), P(ln3_b));
  }

  static constexpr double kInitStd = 0.02;
};

/// Stack of L_d fuser applications; with weight sharing every application
/// reuses one FuserLayer.
class LabelFuser {
 public:
  LabelFuser(FuserConfig cfg, std::size_t width, std::size_t feature_width, std::uint64_t seed)
      : cfg_(cfg), width_(width), feature_width_(feature_width) {
    cfg_.validate(width_);
    Rng rng(seed);
    for (std::size_t s = 0; s < cfg_.parameter_sets(); ++s)
      layers_.emplace_back("fuser.layer" + std::to_string(s) + ".", width_, feature_width_, rng);
  }

  const FuserConfig& config() const { return cfg_; }
  std::size_t width() const { return width_; }
  std::size_t feature_width() const { return feature_width_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
      for (Parameter* p : l.parameters()) out.push_back(p);
    return out;
  }

  /// Runs the stack. `features` holds one entry per encoder layer (layer l
  /// at index l - 1); only the mapped layers need to be non-empty.
  Var forward(Tape& t, const Var& label_rows, const LayerFeatures& features) {
    const std::size_t L_e = features.size();
    if (L_e == 0) throw ConfigError("fuser received no encoder features");
    std::vector<Var> bound(L_e);
    std::vector<bool> have(L_e, false);
    Var x = label_rows;
    for (std::size_t i = 1; i <= cfg_.layers; ++i) {
      const std::size_t l = layer_mapping(i, L_e, cfg_.layer_map, cfg_.layers);
      if (features[l - 1].empty())
        throw ConfigError("fuser layer " + std::to_string(i) + " needs encoder layer " +
                          std::to_string(l) + " which was not supplied");
      if (features[l - 1].cols() != feature_width_)
        throw DimensionError("encoder features of width " + std::to_string(features[l - 1].cols()) +
                             " for a fuser expecting " + std::to_string(feature_width_));
      if (!have[l - 1]) {
        bound[l - 1] = t.constant(features[l - 1]);
        have[l - 1] = true;
      }
      FuserLayer& layer = layers_[cfg_.weight_shared ? 0 : i - 1];
      x = layer.apply(t, x, bound[l - 1], cfg_.heads);
    }
    return x;
  }

 private:
  FuserConfig cfg_;
  std::size_t width_;
  std::size_t feature_width_;
  std::vector<FuserLayer> layers_;
};

/// Class scores: cosine of each label row against the task row, summed over
/// the k rows of each class.
inline Var score(const Var& fused, const LabelSet& labels) {
  if (fused.value().rows() != labels.rows())
    throw DimensionError("fused matrix has " + std::to_string(fused.value().rows()) +
                         " rows, label set needs " + std::to_string(labels.rows()));
  return ops::group_sum(ops::row_cosines(fused), labels.k);
}

inline std::vector<double> score(const Tensor& fused, const LabelSet& labels) {
  if (fused.rows() != labels.rows())
    throw DimensionError("fused matrix has " + std::to_string(fused.rows()) +
                         " rows, label set needs " + std::to_string(labels.rows()));
  std::vector<double> s(labels.classes(), 0.0);
  for (std::size_t c = 0; c < labels.classes(); ++c)
    for (std::size_t r = 0; r < labels.k; ++r)
      s[c] += kernels::cosine_similarity(fused.row(0), fused.row(labels.row_of(c, r)));
  return s;
}

}  // namespace ytune
