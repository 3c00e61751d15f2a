#pragma once

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ytune/cost_profiler.hpp"
#include "ytune/datasets.hpp"
#include "ytune/run_config.hpp"
#include "ytune/trainer.hpp"

namespace ytune {

/// Resolved inputs of a run: encoder, vocabulary, labels, tokenized data.
struct RunInputs {
  std::unique_ptr<FrozenEncoder> encoder;
  Vocabulary vocab;
  std::vector<std::string> labels;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<std::string> warnings;
};

inline std::unique_ptr<FrozenEncoder> make_encoder(const RunConfig& cfg) {
  if (!cfg.encoder_checkpoint.empty())
    return std::make_unique<FrozenEncoder>(FrozenEncoder::load(cfg.encoder_checkpoint));
  return std::make_unique<FrozenEncoder>(cfg.encoder);
}

inline RunInputs load_inputs(const RunConfig& cfg) {
  cfg.validate();
  RunInputs in;
  in.encoder = make_encoder(cfg);
  const BioReadOptions bio{cfg.bio_repair};
  const RawDataset train_raw = read_raw(cfg.task, cfg.train_file, bio);
  if (train_raw.rows.empty()) throw InputError("training file " + cfg.train_file + " has no examples");
  in.warnings = train_raw.warnings;
  in.vocab = cfg.vocab_file.empty() ? Vocabulary::build(corpus_tokens(train_raw), in.encoder->config().vocab_size)
                                    : Vocabulary::load(cfg.vocab_file);
  if (in.vocab.size() > in.encoder->config().vocab_size)
    throw ConfigError("vocabulary of " + std::to_string(in.vocab.size()) + " ids exceeds encoder vocab_size " +
                      std::to_string(in.encoder->config().vocab_size));
  in.labels = infer_label_names(train_raw);
  const std::size_t max_len = in.encoder->config().max_len;
  in.train = to_examples(train_raw, in.vocab, in.labels, max_len);
  if (!cfg.dev_file.empty()) {
    const RawDataset dev_raw = read_raw(cfg.task, cfg.dev_file, bio);
    in.warnings.insert(in.warnings.end(), dev_raw.warnings.begin(), dev_raw.warnings.end());
    in.dev = to_examples(dev_raw, in.vocab, in.labels, max_len);
  }
  return in;
}

inline HeadConfig head_config(const RunConfig& cfg) {
  HeadConfig h;
  h.margin = cfg.train.margin;
  if (cfg.train.softmax_axis) {
    if (cfg.task == TaskKind::SequenceLabeling) h.seq_axis = *cfg.train.softmax_axis;
    if (cfg.task == TaskKind::SpanQA) h.qa_axis = *cfg.train.softmax_axis;
  }
  return h;
}

inline std::unique_ptr<TaskModel> build_model(const RunConfig& cfg, const FrozenEncoder& enc,
                                              const Vocabulary& vocab, const std::vector<std::string>& labels) {
  const std::size_t L = enc.config().layers, H = enc.config().hidden;
  if (cfg.model == ModelKind::LinearProbe)
    return std::make_unique<LinearProbe>(cfg.task, labels, L, H, cfg.train.seed, head_config(cfg));
  FuserConfig fc = cfg.fuser;
  if (cfg.train.layer_map) fc.layer_map = *cfg.train.layer_map;
  LabelSet ls{labels, cfg.label_k};
  return std::make_unique<YTuningModel>(cfg.task, init_embeddings(ls, cfg.init, enc, vocab, cfg.train.seed), fc,
                                        L, H, cfg.train.seed + 1, head_config(cfg));
}

struct RunOutcome {
  TrainResult result;
  Metrics train_metrics;
  std::optional<Metrics> dev_metrics;
  std::size_t trainable_params = 0;
  std::size_t encoder_params = 0;
};

inline Json to_json(const RunOutcome& o) {
  Json j{{"train", to_json(o.train_metrics)},
         {"history", detail::history_json(o.result.history)},
         {"epoch_ms", o.result.epoch_ms},
         {"best_epoch", o.result.best_epoch},
         {"trainable_params", o.trainable_params},
         {"encoder_params", o.encoder_params},
         {"encoder_hash_unchanged", o.result.encoder_hash_before == o.result.encoder_hash_after}};
  j["dev"] = o.dev_metrics ? to_json(*o.dev_metrics) : Json(nullptr);
  return j;
}

inline const char* kConfigEcho = "config.json";
inline const char* kCheckpointFile = "checkpoint.ytck";
inline const char* kMetricsFile = "metrics.json";

/// Trains per `cfg` and writes config.json (the resolved configuration),
/// checkpoint.ytck and metrics.json into cfg.output_dir.
inline RunOutcome run_train(const RunConfig& cfg, std::ostream* log = nullptr) {
  RunInputs in = load_inputs(cfg);
  if (log)
    for (const auto& w : in.warnings) *log << "warning: " << w << '\n';
  std::unique_ptr<TaskModel> model = build_model(cfg, *in.encoder, in.vocab, in.labels);
  if (!cfg.warm_start.empty()) load_parameters(*model, load_checkpoint_file(cfg.warm_start), cfg.warm_start_scope);

  TrainConfig tc = cfg.train;
  if (!cfg.store_path.empty()) tc.store_path = cfg.store_path;
  std::vector<std::string> vocab_tokens;
  for (std::size_t id = kReservedIds; id < in.vocab.size(); ++id)
    vocab_tokens.push_back(in.vocab.token(static_cast<TokenId>(id)));
  const Json echo{{"run", to_json(cfg)}, {"vocab", vocab_tokens}};

  RunOutcome out;
  out.result = train(tc, *in.encoder, *model, in.train, in.dev, echo);
  out.trainable_params = model->trainable_count();
  out.encoder_params = in.encoder->parameter_count();
  FeatureSource plain(*in.encoder, model->layer_mask(), nullptr, tc.threads);
  out.train_metrics = evaluate_model(*model, plain, in.train);
  if (!in.dev.empty()) out.dev_metrics = evaluate_model(*model, plain, in.dev);

  std::filesystem::create_directories(cfg.output_dir);
  const std::filesystem::path dir = cfg.output_dir;
  {
    std::ofstream f(dir / kConfigEcho);
    f << to_json(cfg).dump(2) << '\n';
  }
  save_checkpoint_file(dir / kCheckpointFile, out.result.checkpoint);
  {
    std::ofstream f(dir / kMetricsFile);
    f << to_json(out).dump(2) << '\n';
  }
  if (log) {
    for (const auto& e : out.result.history) {
      *log << "epoch " << e.epoch << " loss " << e.train_loss;
      if (e.dev_metric) *log << " dev " << *e.dev_metric;
      *log << '\n';
    }
    *log << "train " << to_json(out.train_metrics).dump() << '\n';
    if (out.dev_metrics) *log << "dev " << to_json(*out.dev_metrics).dump() << '\n';
  }
  return out;
}

/// Rebuilds the model recorded in a checkpoint and scores `data_file`.
inline Metrics run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_file) {
  const CheckpointData ck = load_checkpoint_file(checkpoint);
  Json echo;
  try {
    echo = Json::parse(ck.echo);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint echo is not JSON: ") + e.what());
  }
  if (!echo.contains("config") || !echo["config"].contains("run") || !echo.contains("labels"))
    throw FormatError("checkpoint echo lacks the run configuration");
  RunConfig cfg = run_config_from_json(echo["config"]["run"]);
  const auto enc = make_encoder(cfg);
  const Vocabulary vocab = Vocabulary::from_tokens(echo["config"]["vocab"].get<std::vector<std::string>>());
  const auto labels = echo["labels"].get<std::vector<std::string>>();
  auto model = build_model(cfg, *enc, vocab, labels);
  load_parameters(*model, ck, LoadScope::All);
  const RawDataset raw = read_raw(cfg.task, data_file, BioReadOptions{cfg.bio_repair});
  const auto data = to_examples(raw, vocab, labels, enc->config().max_len);
  FeatureSource plain(*enc, model->layer_mask(), nullptr, 0);
  return evaluate_model(*model, plain, data);
}

/// Pre-populates the run's feature store for `data_file` (default: the
/// training file). Returns the number of records written.
inline std::size_t run_cache(const RunConfig& cfg, const std::string& data_file = {}) {
  if (cfg.store_path.empty() && cfg.train.store_path.empty()) throw ConfigError("cache needs store_path");
  RunInputs in = load_inputs(cfg);
  auto model = build_model(cfg, *in.encoder, in.vocab, in.labels);
  std::vector<Example> data = in.train;
  if (!data_file.empty())
    data = to_examples(read_raw(cfg.task, data_file), in.vocab, in.labels, in.encoder->config().max_len);
  FeatureStore store =
      FeatureStore::open(cfg.store_path.empty() ? cfg.train.store_path : cfg.store_path, StoreMode::Append);
  FeatureSource src(*in.encoder, model->layer_mask(), &store, cfg.train.threads);
  std::vector<const Example*> all;
  for (const auto& e : data) all.push_back(&e);
  src.fetch(all);
  return src.stats().store_writes;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationConfig {
  std::vector<std::size_t> ks{1, 2, 4};
  std::vector<std::size_t> depths{1, 2, 4};
  std::vector<InitStrategy> inits{InitStrategy::RandomUniform, InitStrategy::SampledVocab,
                                  InitStrategy::ClassLabel, InitStrategy::OppositeLabel};
  EncoderConfig encoder;
  TrainConfig train;
  std::size_t train_size = 500;
  std::size_t dev_size = 200;
  std::uint64_t data_seed = 0;
  /// Optional files; the synthetic keyword task is generated otherwise.
  std::string train_file;
  std::string dev_file;
};

struct AblationRow {
  std::string sweep;  // "k", "depth" or "init"
  std::size_t k = 1;
  std::size_t depth = 1;
  InitStrategy init = InitStrategy::SampledVocab;
  double dev_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t trainable_params = 0;
  double seconds = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::size_t encoder_params = 0;
  double seconds = 0.0;
};

/// Trains one classification model per setting: the full k x depth grid with
/// the default init, then each init strategy at k = 1, depth 1.
inline AblationReport run_ablation(const AblationConfig& cfg, std::ostream* log = nullptr) {
  const auto t_all = std::chrono::steady_clock::now();
  RawDataset train_raw, dev_raw;
  if (!cfg.train_file.empty()) {
    train_raw = read_classification_raw(cfg.train_file);
    if (cfg.dev_file.empty()) throw ConfigError("ablation with a train file needs a dev file");
    dev_raw = read_classification_raw(cfg.dev_file);
  } else {
    SyntheticSpec s;
    s.size = cfg.train_size;
    s.seed = cfg.data_seed;
    train_raw = generate(s);
    s.size = cfg.dev_size;
    s.seed = cfg.data_seed + 1000003;
    dev_raw = generate(s);
  }
  const FrozenEncoder enc(cfg.encoder);
  const Vocabulary vocab = Vocabulary::build(corpus_tokens(train_raw), cfg.encoder.vocab_size);
  const auto labels = infer_label_names(train_raw);
  const auto train_set = to_examples(train_raw, vocab, labels, cfg.encoder.max_len);
  const auto dev_set = to_examples(dev_raw, vocab, labels, cfg.encoder.max_len);

  AblationReport rep;
  rep.encoder_params = enc.parameter_count();
  auto run = [&](const std::string& sweep, std::size_t k, std::size_t depth, InitStrategy init) {
    const auto t0 = std::chrono::steady_clock::now();
    FuserConfig fc;
    fc.layers = depth;
    YTuningModel model(TaskKind::Classification,
                       init_embeddings(LabelSet{labels, k}, init, enc, vocab, cfg.train.seed), fc,
                       enc.config().layers, enc.config().hidden, cfg.train.seed + 1,
                       HeadConfig{cfg.train.margin});
    const TrainResult r = train(cfg.train, enc, model, train_set, dev_set);
    AblationRow row{sweep, k, depth, init, r.best_dev ? r.best_dev->accuracy : 0.0, r.best_epoch,
                    r.history.size(), model.trainable_count(),
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    if (log)
      *log << sweep << " k=" << k << " L_d=" << depth << " init=" << to_string(init) << " dev_acc="
           << row.dev_accuracy << " epochs=" << row.epochs_run << " (" << row.seconds << " s)" << std::endl;
    rep.rows.push_back(row);
  };
  for (std::size_t k : cfg.ks)
    for (std::size_t d : cfg.depths) run("grid", k, d, InitStrategy::SampledVocab);
  for (InitStrategy s : cfg.inits) run("init", 1, 1, s);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_all).count();
  return rep;
}

/// Markdown tables: embeddings per label, init strategy, decoder depth.
inline std::string ablation_markdown(const AblationReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  auto acc = [](double a) { return a * 100.0; };
  auto find = [&](const std::string& sweep, std::size_t k, std::size_t d, InitStrategy s) -> const AblationRow* {
    for (const auto& r : rep.rows)
      if (r.sweep == sweep && r.k == k && r.depth == d && r.init == s) return &r;
    return nullptr;
  };
  std::vector<std::size_t> ks, ds;
  for (const auto& r : rep.rows) {
    if (r.sweep != "grid") continue;
    if (std::find(ks.begin(), ks.end(), r.k) == ks.end()) ks.push_back(r.k);
    if (std::find(ds.begin(), ds.end(), r.depth) == ds.end()) ds.push_back(r.depth);
  }

  os << "# Ablation: keyword classification, dev accuracy (%)\n\n";
  os << "## Embeddings per label (k) by decoder depth (L_d)\n\n| k |";
  for (auto d : ds) os << " L_d=" << d << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < ds.size(); ++i) os << "---|";
  os << '\n';
  for (auto k : ks) {
    os << "| " << k << " |";
    for (auto d : ds) {
      const AblationRow* r = find("grid", k, d, InitStrategy::SampledVocab);
      if (r) os << ' ' << acc(r->dev_accuracy) << " |";
      else os << " - |";
    }
    os << '\n';
  }

  os << "\n## Initialization strategy (k=1, L_d=1)\n\n| init | dev acc | best epoch |\n|---|---|---|\n";
  for (const auto& r : rep.rows)
    if (r.sweep == "init")
      os << "| " << to_string(r.init) << " | " << acc(r.dev_accuracy) << " | " << r.best_epoch << " |\n";

  os << "\n## Decoder depth (k=1, shared weights)\n\n| L_d | dev acc | tunable params | seconds |\n|---|---|---|---|\n";
  for (auto d : ds)
    if (const AblationRow* r = find("grid", ks.empty() ? 1 : ks.front(), d, InitStrategy::SampledVocab))
      os << "| " << d << " | " << acc(r->dev_accuracy) << " | " << r->trainable_params << " | " << r->seconds
         << " |\n";
  os << "\nEncoder parameters: " << rep.encoder_params << ". Total time: " << rep.seconds << " s.\n";
  return os.str();
}

}  // namespace ytune
