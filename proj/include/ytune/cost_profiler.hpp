#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ytune/datasets.hpp"
#include "ytune/trainer.hpp"

namespace ytune {

enum class Paradigm { FineTuning, FeatureBased, Adapter, Prompt, YTuning };

inline const char* to_string(Paradigm p) {
  switch (p) {
    case Paradigm::FineTuning: return "fine_tuning";
    case Paradigm::FeatureBased: return "feature_based";
    case Paradigm::Adapter: return "adapter";
    case Paradigm::Prompt: return "prompt";
    case Paradigm::YTuning: return "ytuning";
  }
  return "?";
}

inline Paradigm parse_paradigm(const std::string& s) {
  for (auto p : {Paradigm::FineTuning, Paradigm::FeatureBased, Paradigm::Adapter, Paradigm::Prompt,
                 Paradigm::YTuning})
    if (s == to_string(p)) return p;
  if (s == "finetune" || s == "ft") return Paradigm::FineTuning;
  if (s == "feature" || s == "fb") return Paradigm::FeatureBased;
  if (s == "y" || s == "y_tuning" || s == "y-tuning") return Paradigm::YTuning;
  throw ConfigError("unknown paradigm '" + s + "'");
}

inline constexpr Paradigm kAllParadigms[] = {Paradigm::FineTuning, Paradigm::FeatureBased, Paradigm::Adapter,
                                             Paradigm::Prompt, Paradigm::YTuning};

/// Gradients must flow through the encoder unless only a head over frozen
/// features (feature-based) or the label side (Y-tuning) is trained.
inline bool needs_encoder_backward(Paradigm p) {
  return p != Paradigm::FeatureBased && p != Paradigm::YTuning;
}

struct CostQuery {
  Paradigm paradigm = Paradigm::YTuning;
  std::uint64_t L = 4;    // encoder layers
  std::uint64_t M = 16;   // sequence length
  std::uint64_t P = 0;    // prompt length (Prompt only)
  std::uint64_t L_d = 1;  // fuser layers (YTuning only)
  std::uint64_t N = 3;    // classes
  std::uint64_t k = 1;    // embeddings per class

  void validate() const {
    if (L == 0 || M == 0 || N == 0 || k == 0 || L_d == 0)
      throw ConfigError("cost model counts must be positive");
    if (paradigm == Paradigm::Prompt && P == 0) throw ConfigError("prompt paradigm needs P > 0");
  }
};

/// Attention units (query-key pairs scored) for one forward pass.
inline std::uint64_t encoder_attention_cost(const CostQuery& q) {
  q.validate();
  const std::uint64_t m = q.paradigm == Paradigm::Prompt ? q.M + q.P : q.M;
  return q.L * m * m;
}

/// Fuser add-on: self-attention over N' rows and cross-attention into M
/// features, per decoder layer.
inline std::uint64_t fuser_attention_cost(const CostQuery& q) {
  q.validate();
  if (q.paradigm != Paradigm::YTuning) return 0;
  const std::uint64_t n = 1 + q.N * q.k;
  return q.L_d * (n * n + q.M * n);
}

inline std::uint64_t attention_cost(const CostQuery& q) {
  return encoder_attention_cost(q) + fuser_attention_cost(q);
}

inline std::uint64_t attention_cost(Paradigm paradigm, std::uint64_t L, std::uint64_t M, std::uint64_t P,
                                    std::uint64_t L_d, std::uint64_t N, std::uint64_t k = 1) {
  return attention_cost(CostQuery{paradigm, L, M, P, L_d, N, k});
}

struct ParadigmCost {
  Paradigm paradigm;
  std::uint64_t attention_macs = 0;
  std::uint64_t tunable_params = 0;
  bool needs_encoder_backward = true;
};

/// Tunable scalars under each paradigm for an encoder of width H, FFN width
/// F and `encoder_params` total. Adapters use a bottleneck of H / 8 after
/// each sublayer; the feature-based head is one linear layer H x N.
inline ParadigmCost paradigm_cost(const CostQuery& q, std::uint64_t H, std::uint64_t encoder_params) {
  ParadigmCost c{q.paradigm, attention_cost(q), 0, needs_encoder_backward(q.paradigm)};
  switch (q.paradigm) {
    case Paradigm::FineTuning: c.tunable_params = encoder_params + H * q.N + q.N; break;
    case Paradigm::FeatureBased: c.tunable_params = H * q.N + q.N; break;
    case Paradigm::Adapter: {
      const std::uint64_t r = std::max<std::uint64_t>(1, H / 8);
      c.tunable_params = q.L * 2 * (H * r + r + r * H + H) + H * q.N + q.N;
      break;
    }
    case Paradigm::Prompt: c.tunable_params = q.P * H + H * q.N + q.N; break;
    case Paradigm::YTuning: {
      FuserConfig f;
      f.layers = q.L_d;
      LabelSet ls{std::vector<std::string>(q.N), q.k};
      for (std::size_t i = 0; i < q.N; ++i) ls.names[i] = "c" + std::to_string(i);
      c.tunable_params = param_count(f, ls, H, H);
      break;
    }
  }
  return c;
}

/// Plain-text table of every paradigm for one setting.
inline std::string cost_table(const CostQuery& base, std::uint64_t H, std::uint64_t encoder_params) {
  std::ostringstream os;
  os << std::left << std::setw(15) << "paradigm" << std::right << std::setw(14) << "attn_units"
     << std::setw(16) << "tunable_params" << std::setw(18) << "encoder_backward" << '\n';
  for (Paradigm p : kAllParadigms) {
    CostQuery q = base;
    q.paradigm = p;
    if (p == Paradigm::Prompt && q.P == 0) q.P = 1;
    const ParadigmCost c = paradigm_cost(q, H, encoder_params);
    os << std::left << std::setw(15) << to_string(p) << std::right << std::setw(14) << c.attention_macs
       << std::setw(16) << c.tunable_params << std::setw(18) << (c.needs_encoder_backward ? "yes" : "no")
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Instrumented counts

struct MeasuredCost {
  std::uint64_t encoder_pairs = 0;
  std::uint64_t fuser_pairs = 0;
  std::uint64_t encoder_macs = 0;
  std::uint64_t fuser_macs = 0;
  std::uint64_t total_pairs() const { return encoder_pairs + fuser_pairs; }
};

/// Runs one encoder forward (on M + P tokens for Prompt, modelling the
/// prepended prompt positions) and, for YTuning, one fuser forward, counting
/// the attention pairs and matmul MACs each performs.
inline MeasuredCost measured_mac_count(const CostQuery& q, std::size_t hidden = 64, std::size_t heads = 4,
                                       std::uint64_t seed = 0) {
  q.validate();
  EncoderConfig ec;
  ec.layers = q.L;
  ec.hidden = hidden;
  ec.heads = heads;
  ec.ffn_dim = 4 * hidden;
  const std::size_t m = q.paradigm == Paradigm::Prompt ? q.M + q.P : q.M;
  ec.max_len = std::max<std::size_t>(m, 1);
  ec.vocab_size = 64;
  ec.seed = seed;
  FrozenEncoder enc(ec);
  Rng rng(seed + 1);
  TokenSequence seq;
  for (std::size_t i = 0; i < m; ++i) seq.ids.push_back(static_cast<TokenId>(kReservedIds + rng.below(60)));

  MeasuredCost out;
  OpCounts ec_counts;
  LayerFeatures feats;
  {
    CountScope scope(ec_counts);
    feats = enc.encode(seq);
  }
  out.encoder_pairs = ec_counts.attention_pairs;
  out.encoder_macs = ec_counts.matmul_macs;
  if (q.paradigm == Paradigm::YTuning) {
    // The fuser reads the M input positions only.
    if (m != q.M) throw UsageError("unexpected prompt positions for the fuser");
    FuserConfig fc;
    fc.layers = q.L_d;
    fc.heads = heads;
    LabelFuser fuser(fc, hidden, hidden, seed + 2);
    Tensor rows = Tensor::matrix(1 + q.N * q.k, hidden);
    for (double& v : rows.values()) v = rng.uniform(-0.5, 0.5);
    OpCounts fc_counts;
    {
      CountScope scope(fc_counts);
      Tape t;
      fuser.forward(t, t.constant(rows), feats);
    }
    out.fuser_pairs = fc_counts.attention_pairs;
    out.fuser_macs = fc_counts.matmul_macs;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature-reuse benchmark

struct BenchConfig {
  EncoderConfig encoder;  // defaults: L = 4, H = 64
  std::size_t seq_len = 64;
  std::size_t examples = 96;
  std::size_t epochs = 4;
  std::size_t fuser_layers = 1;
  std::size_t classes = 3;
  std::uint64_t seed = 0;
  std::string store_path;  // empty: temporary

  void validate() const {
    if (epochs < 3) throw ConfigError("benchmark needs at least 3 epochs");
    if (examples == 0) throw ConfigError("benchmark needs examples");
    if (seq_len < 6 || seq_len > encoder.max_len) throw ConfigError("benchmark seq_len outside [6, max_len]");
  }
};

struct BenchReport {
  CostQuery query;
  std::uint64_t model_macs = 0;     // analytic attention units per example
  std::uint64_t measured_macs = 0;  // instrumented attention units per example
  std::vector<double> epoch_times_ms_fr;
  std::vector<double> epoch_times_ms_nonfr;
  double median_fr_ms = 0.0;
  double median_nonfr_ms = 0.0;
  double steady_state_ratio = 0.0;
  /// Ratio predicted from matmul MACs of a non-FR epoch over an FR epoch.
  double predicted_ratio = 0.0;
  /// The same prediction restricted to attention units.
  double predicted_ratio_attention = 0.0;
  bool losses_identical = false;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Trains the same fuser twice over identical data and seeds, once
/// re-encoding every epoch and once replaying a feature store filled in
/// epoch 1. Epoch 1 of both runs is warm-up and excluded from the medians.
inline BenchReport bench_feature_reuse(const BenchConfig& cfg) {
  cfg.validate();
  SyntheticSpec spec;
  spec.size = cfg.examples;
  spec.classes = cfg.classes;
  spec.min_len = spec.max_len = cfg.seq_len;
  spec.seed = cfg.seed;
  const RawDataset raw = generate(spec);
  const Vocabulary vocab = Vocabulary::build(corpus_tokens(raw), cfg.encoder.vocab_size);
  const auto names = infer_label_names(raw);
  const auto data = to_examples(raw, vocab, names, cfg.encoder.max_len);
  const FrozenEncoder enc(cfg.encoder);

  auto make_model = [&] {
    LabelSet ls{names, 1};
    FuserConfig fc;
    fc.layers = cfg.fuser_layers;
    return YTuningModel(TaskKind::Classification,
                        init_embeddings(ls, InitStrategy::SampledVocab, enc, vocab, cfg.seed), fc,
                        enc.config().layers, enc.config().hidden, cfg.seed);
  };
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.evaluate_dev = false;
  tc.threads = 1;
  tc.store_path = cfg.store_path;

  BenchReport rep;
  rep.query = CostQuery{Paradigm::YTuning, enc.config().layers, cfg.seq_len, 0, cfg.fuser_layers, cfg.classes, 1};
  rep.model_macs = attention_cost(rep.query);
  rep.measured_macs = measured_mac_count(rep.query, enc.config().hidden, enc.config().heads).total_pairs();

  OpCounts nonfr_counts, fr_counts;
  TrainResult nonfr, fr;
  {
    YTuningModel m = make_model();
    TrainConfig c = tc;
    c.use_feature_store = false;
    CountScope scope(nonfr_counts);
    nonfr = train(c, enc, m, data);
  }
  {
    YTuningModel m = make_model();
    TrainConfig c = tc;
    c.use_feature_store = true;
    CountScope scope(fr_counts);
    fr = train(c, enc, m, data);
  }
  rep.epoch_times_ms_nonfr = nonfr.epoch_ms;
  rep.epoch_times_ms_fr = fr.epoch_ms;
  rep.median_nonfr_ms = median(std::vector<double>(nonfr.epoch_ms.begin() + 1, nonfr.epoch_ms.end()));
  rep.median_fr_ms = median(std::vector<double>(fr.epoch_ms.begin() + 1, fr.epoch_ms.end()));
  rep.steady_state_ratio = rep.median_fr_ms > 0 ? rep.median_nonfr_ms / rep.median_fr_ms : 0.0;

  // Every non-FR epoch does the same work. The FR run's epoch 1 matches a
  // non-FR epoch, so its remaining epochs account for the difference.
  const double E = static_cast<double>(cfg.epochs);
  const double per_nonfr = static_cast<double>(nonfr_counts.matmul_macs) / E;
  const double per_fr = (static_cast<double>(fr_counts.matmul_macs) - per_nonfr) / (E - 1.0);
  rep.predicted_ratio = per_fr > 0 ? per_nonfr / per_fr : 0.0;
  const double fuser_units = static_cast<double>(fuser_attention_cost(rep.query));
  rep.predicted_ratio_attention = static_cast<double>(rep.model_macs) / fuser_units;

  rep.losses_identical = nonfr.history.size() == fr.history.size();
  for (std::size_t i = 0; rep.losses_identical && i < fr.history.size(); ++i)
    rep.losses_identical = std::bit_cast<std::uint64_t>(fr.history[i].train_loss) ==
                           std::bit_cast<std::uint64_t>(nonfr.history[i].train_loss);
  return rep;
}

inline Json to_json(const BenchReport& r) {
  return Json{{"paradigm", to_string(r.query.paradigm)},
              {"L", r.query.L},
              {"M", r.query.M},
              {"P", r.query.P},
              {"N", r.query.N},
              {"L_d", r.query.L_d},
              {"model_macs", r.model_macs},
              {"measured_macs", r.measured_macs},
              {"epoch_times_ms", Json{{"fr", r.epoch_times_ms_fr}, {"non_fr", r.epoch_times_ms_nonfr}}},
              {"steady_state_ratio", r.steady_state_ratio},
              {"predicted_ratio", r.predicted_ratio},
              {"predicted_ratio_attention", r.predicted_ratio_attention},
              {"losses_identical", r.losses_identical}};
}

inline std::string bench_table(const BenchReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "epoch  non_fr_ms      fr_ms\n";
  for (std::size_t e = 0; e < r.epoch_times_ms_fr.size(); ++e)
    os << std::setw(5) << e + 1 << std::setw(11) << r.epoch_times_ms_nonfr.at(e) << std::setw(11)
       << r.epoch_times_ms_fr[e] << (e == 0 ? "  (warm-up)" : "") << '\n';
  os << "median (epochs >= 2): non_fr " << r.median_nonfr_ms << " ms, fr " << r.median_fr_ms << " ms\n";
  os << "steady-state ratio " << r.steady_state_ratio << ", MAC-predicted " << r.predicted_ratio
     << ", attention-unit prediction " << r.predicted_ratio_attention << '\n';
  os << "attention units per example: model " << r.model_macs << ", measured " << r.measured_macs << '\n';
  return os.str();
}

}  // namespace ytune
