#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "ytune/autodiff.hpp"
#include "ytune/checkpoint.hpp"
#include "ytune/hash.hpp"
#include "ytune/json_util.hpp"
#include "ytune/rng.hpp"
#include "ytune/vocab.hpp"

namespace ytune {

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 1000;
  std::size_t max_len = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 1) throw ConfigError("encoder needs at least one layer");
    if (hidden == 0 || heads == 0 || hidden % heads != 0)
      throw ConfigError("encoder hidden " + std::to_string(hidden) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (ffn_dim == 0) throw ConfigError("encoder ffn_dim must be positive");
    if (vocab_size <= kReservedIds)
      throw ConfigError("encoder vocab_size must exceed the reserved ids");
    if (max_len == 0) throw ConfigError("encoder max_len must be positive");
    if (layers > 64) throw ConfigError("at most 64 encoder layers are supported");
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline Json to_json(const EncoderConfig& c) {
  return Json{{"layers", c.layers},   {"hidden", c.hidden},         {"heads", c.heads},
              {"ffn_dim", c.ffn_dim}, {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
              {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const Json& j) {
  EncoderConfig c;
  StrictObject o(j, "encoder");
  o.get("layers", c.layers);
  o.get("hidden", c.hidden);
  o.get("heads", c.heads);
  o.get("ffn_dim", c.ffn_dim);
  o.get("vocab_size", c.vocab_size);
  o.get("max_len", c.max_len);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

/// Fixed sinusoidal position table, max_len x hidden.
inline Tensor sinusoidal_positions(std::size_t max_len, std::size_t hidden) {
  Tensor pe = Tensor::matrix(max_len, hidden);
  for (std::size_t pos = 0; pos < max_len; ++pos)
    for (std::size_t i = 0; i < hidden; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(hidden));
      pe(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < hidden) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  return pe;
}

/// Per-layer hidden states of one input: element i is the output of encoder
/// layer i + 1, each M x H.
using LayerFeatures = std::vector<Tensor>;

/// Randomly initialized post-norm transformer encoder whose parameters are
/// fixed at construction. Encoding records no gradient information.
class FrozenEncoder {
 public:
  explicit FrozenEncoder(EncoderConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t H = cfg_.hidden, F = cfg_.ffn_dim;
    auto gaussian = [&](const std::string& name, Shape shape, double sd = kInitStd) {
      Tensor t(std::move(shape));
      for (double& v : t.values()) v = rng.normal(0.0, sd);
      return Parameter(name, std::move(t), false);
    };
    auto constant = [](const std::string& name, std::size_t n, double v) {
      return Parameter(name, Tensor({n}, v), false);
    };
    // Token rows have std 1/sqrt(H); after the sqrt(H) input scaling each
    // coordinate is unit scale, on par with the sinusoidal positions.
    embedding_ = gaussian("encoder.embedding", {cfg_.vocab_size, H}, 1.0 / std::sqrt(static_cast<double>(H)));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      Layer L;
      L.wq = gaussian(p + "wq", {H, H});
      L.bq = constant(p + "bq", H, 0.0);
      L.wk = gaussian(p + "wk", {H, H});
      L.bk = constant(p + "bk", H, 0.0);
      L.wv = gaussian(p + "wv", {H, H});
      L.bv = constant(p + "bv", H, 0.0);
      L.wo = gaussian(p + "wo", {H, H});
      L.bo = constant(p + "bo", H, 0.0);
      L.ln1_g = constant(p + "ln1_g", H, 1.0);
      L.ln1_b = constant(p + "ln1_b", H, 0.0);
      L.w1 = gaussian(p + "w1", {H, F});
      L.b1 = constant(p + "b1", F, 0.0);
      L.w2 = gaussian(p + "w2", {F, H});
      L.b2 = constant(p + "b2", H, 0.0);
      L.ln2_g = constant(p + "ln2_g", H, 1.0);
      L.ln2_b = constant(p + "ln2_b", H, 0.0);
      layers_.push_back(std::move(L));
    }
    finish_construction();
  }

  /// Loads parameters written by save(); shapes must match the stored config.
  static FrozenEncoder load(const std::filesystem::path& path) {
    CheckpointData ck = load_checkpoint_file(path);
    Json echo;
    try {
      echo = Json::parse(ck.echo);
    } catch (const Json::exception& e) {
      throw FormatError(std::string("encoder checkpoint echo is not JSON: ") + e.what());
    }
    if (!echo.contains("encoder")) throw FormatError("checkpoint has no encoder config");
    FrozenEncoder enc(encoder_config_from_json(echo.at("encoder")));
    std::string missing;
    for (Parameter* p : enc.mutable_parameters()) {
      const Tensor* t = ck.find(p->name);
      if (!t || t->shape() != p->value.shape()) {
        missing += (missing.empty() ? "" : ", ") + p->name;
        continue;
      }
      p->value = *t;
    }
    if (!missing.empty()) throw ShapeError("encoder checkpoint missing or misshapen: " + missing);
    enc.finish_construction();
    return enc;
  }

  void save(const std::filesystem::path& path) const {
    CheckpointData ck;
    ck.echo = Json{{"encoder", to_json(cfg_)}}.dump();
    for (const Parameter* p : parameters()) ck.tensors.push_back({p->name, p->value});
    save_checkpoint_file(path, ck);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Digest over the config and every parameter byte in canonical order.
  std::uint64_t fingerprint() const { return fingerprint_; }

  /// Digest over parameter bytes alone.
  std::uint64_t parameter_hash() const {
    Fnv1a64 h;
    for (const Parameter* p : parameters()) h.f64s(p->value.values());
    return h.digest();
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out{&embedding_};
    for (const Layer& L : layers_)
      for (const Parameter* p : L.all()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->size();
    return n;
  }

  /// Input embedding of a token before position encoding is added.
  std::vector<double> token_embedding(TokenId id) const {
    if (id >= cfg_.vocab_size) throw InputError("token id outside encoder vocabulary");
    auto row = embedding_.value.row(id);
    std::vector<double> out(row.begin(), row.end());
    for (double& v : out) v *= embed_scale_;
    return out;
  }

  /// Hidden states after every layer. Pad positions are excluded as keys.
  LayerFeatures encode(const TokenSequence& seq) const {
    seq.validate(cfg_.vocab_size, cfg_.max_len);
    const std::size_t M = seq.size(), H = cfg_.hidden;
    Tensor x = Tensor::matrix(M, H);
    std::unique_ptr<bool[]> valid(new bool[M]);
    bool any_pad = false;
    for (std::size_t m = 0; m < M; ++m) {
      auto e = embedding_.value.row(seq.ids[m]);
      auto p = positions_.row(m);
      for (std::size_t j = 0; j < H; ++j) x(m, j) = e[j] * embed_scale_ + p[j];
      valid[m] = seq.ids[m] != kPadId;
      any_pad = any_pad || !valid[m];
    }
    std::span<const bool> mask = any_pad ? std::span<const bool>(valid.get(), M) : std::span<const bool>{};

    LayerFeatures out;
    out.reserve(cfg_.layers);
    for (const Layer& L : layers_) {
      Tensor q = kernels::linear(x, L.wq.value, L.bq.value);
      Tensor k = kernels::linear(x, L.wk.value, L.bk.value);
      Tensor v = kernels::linear(x, L.wv.value, L.bv.value);
      Tensor a = kernels::linear(kernels::attention(q, k, v, cfg_.heads, nullptr, mask), L.wo.value,
                                 L.bo.value);
      a += x;
      x = kernels::layer_norm(a, L.ln1_g.value, L.ln1_b.value);
      Tensor f = kernels::linear(kernels::gelu(kernels::linear(x, L.w1.value, L.b1.value)),
                                 L.w2.value, L.b2.value);
      f += x;
      x = kernels::layer_norm(f, L.ln2_g.value, L.ln2_b.value);
      out.push_back(x);
    }
    return out;
  }

  static constexpr double kInitStd = 0.02;

 private:
  struct Layer {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
    std::vector<const Parameter*> all() const {
      return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b, &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
    }
    std::vector<Parameter*> all() {
      return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b, &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
    }
  };

  std::vector<Parameter*> mutable_parameters() {
    std::vector<Parameter*> out{&embedding_};
    for (Layer& L : layers_)
      for (Parameter* p : L.all()) out.push_back(p);
    return out;
  }

  void finish_construction() {
    embed_scale_ = std::sqrt(static_cast<double>(cfg_.hidden));
    positions_ = sinusoidal_positions(cfg_.max_len, cfg_.hidden);
    Fnv1a64 h;
    h.u64(cfg_.layers);
    h.u64(cfg_.hidden);
    h.u64(cfg_.heads);
    h.u64(cfg_.ffn_dim);
    h.u64(cfg_.vocab_size);
    h.u64(cfg_.max_len);
    h.u64(cfg_.seed);
    for (const Parameter* p : parameters()) {
      h.str(p->name);
      h.f64s(p->value.values());
    }
    fingerprint_ = h.digest();
  }

  EncoderConfig cfg_;
  Parameter embedding_;
  std::vector<Layer> layers_;
  Tensor positions_;
  double embed_scale_ = 1.0;
  std::uint64_t fingerprint_ = 0;
};

/// Worker count from YTUNE_THREADS (positive int), defaulting to 1.
inline std::size_t configured_threads() {
  const char* env = std::getenv("YTUNE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v <= 0) throw ConfigError("YTUNE_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

/// Encodes many sequences with up to `threads` workers; results keep input
/// order.
inline std::vector<LayerFeatures> encode_all(const FrozenEncoder& enc,
                                             const std::vector<const TokenSequence*>& seqs,
                                             std::size_t threads) {
  std::vector<LayerFeatures> out(seqs.size());
  threads = std::max<std::size_t>(1, std::min(threads, seqs.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < seqs.size(); ++i) out[i] = enc.encode(*seqs[i]);
    return out;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < seqs.size(); i += threads) out[i] = enc.encode(*seqs[i]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ytune
