#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ytune/checkpoint.hpp"
#include "ytune/feature_store.hpp"
#include "ytune/gradcheck.hpp"
#include "ytune/json_util.hpp"
#include "ytune/model.hpp"
#include "ytune/rng.hpp"

namespace ytune {

enum class OptimizerKind { SGD, Adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 200;
  double margin = 0.1;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool use_feature_store = true;
  /// Store file for feature reuse; empty means a private temporary file.
  std::string store_path;
  std::optional<SoftmaxAxis> softmax_axis;
  std::optional<LayerMap> layer_map;
  /// Epochs without dev improvement before stopping; 0 disables.
  std::size_t patience = 20;
  /// Stop as soon as the dev metric reaches this value.
  std::optional<double> target_metric;
  bool evaluate_dev = true;
  bool shuffle = true;
  /// Encoding workers; 0 defers to YTUNE_THREADS.
  std::size_t threads = 0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(margin >= 0.0)) throw ConfigError("margin must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
      throw ConfigError("Adam betas must lie in [0, 1) and eps must be positive");
  }
};

inline Json to_json(const TrainConfig& c) {
  Json j{{"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"margin", c.margin},
         {"seed", c.seed},
         {"optimizer", to_string(c.optimizer)},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"use_feature_store", c.use_feature_store},
         {"store_path", c.store_path},
         {"patience", c.patience},
         {"evaluate_dev", c.evaluate_dev},
         {"shuffle", c.shuffle},
         {"threads", c.threads}};
  j["softmax_axis"] = c.softmax_axis ? Json(to_string(*c.softmax_axis)) : Json(nullptr);
  j["layer_map"] = c.layer_map ? Json(to_string(*c.layer_map)) : Json(nullptr);
  j["target_metric"] = c.target_metric ? Json(*c.target_metric) : Json(nullptr);
  return j;
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.get("learning_rate", c.learning_rate);
  o.get("batch_size", c.batch_size);
  o.get("epochs", c.epochs);
  o.get("margin", c.margin);
  o.get("seed", c.seed);
  std::string s;
  if (o.get("optimizer", s)) c.optimizer = parse_optimizer(s);
  o.get("beta1", c.beta1);
  o.get("beta2", c.beta2);
  o.get("adam_eps", c.adam_eps);
  o.get("use_feature_store", c.use_feature_store);
  o.get("store_path", c.store_path);
  o.get("patience", c.patience);
  o.get("evaluate_dev", c.evaluate_dev);
  o.get("shuffle", c.shuffle);
  o.get("threads", c.threads);
  std::optional<std::string> axis, map;
  std::optional<double> target;
  if (o.get("softmax_axis", axis) && axis) c.softmax_axis = parse_softmax_axis(*axis);
  if (o.get("layer_map", map) && map) c.layer_map = parse_layer_map(*map);
  if (o.get("target_metric", target)) c.target_metric = target;
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  /// Applies one update to every trainable parameter from its grad buffer.
  void step(const std::vector<Parameter*>& params) {
    ++t_;
    if (cfg_.optimizer == OptimizerKind::SGD) {
      for (Parameter* p : params) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->size(); ++i) p->value[i] -= cfg_.learning_rate * p->grad[i];
      }
      return;
    }
    if (m_.empty()) {
      for (Parameter* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw UsageError("optimizer reused with a different parameter list");
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      if (!p.trainable) continue;
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        p.value[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Feature supply

struct FeatureStats {
  std::size_t encoded = 0;
  std::size_t store_reads = 0;
  std::size_t store_writes = 0;
};

/// Frozen features for the trainer. Without a store every request runs the
/// encoder. With one, the populate phase reads or fills the store and the
/// replay phase reads it exclusively (a miss is an error).
class FeatureSource {
 public:
  FeatureSource(const FrozenEncoder& enc, std::uint64_t layer_mask, FeatureStore* store,
                std::size_t threads)
      : enc_(enc), mask_(layer_mask), store_(store), threads_(threads ? threads : configured_threads()) {
    if (mask_ == 0) throw UsageError("feature source with an empty layer mask");
  }

  void set_replay(bool replay) { replay_ = replay; }
  bool replay() const { return replay_; }
  const FeatureStats& stats() const { return stats_; }

  std::vector<LayerFeatures> fetch(const std::vector<const Example*>& batch) {
    std::vector<LayerFeatures> out(batch.size());
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (store_) {
        const FeatureKey key{enc_.fingerprint(), input_digest(batch[i]->tokens), mask_};
        if (auto rec = store_->get(key)) {
          out[i] = expand_record(*rec, enc_.config().layers);
          ++stats_.store_reads;
          continue;
        }
        if (replay_)
          throw IntegrityError("feature store miss during replay (line " +
                               std::to_string(batch[i]->line) + ")");
      }
      todo.push_back(i);
    }
    if (todo.empty()) return out;
    std::vector<const TokenSequence*> seqs;
    for (std::size_t i : todo) seqs.push_back(&batch[i]->tokens);
    std::vector<LayerFeatures> enc = encode_all(enc_, seqs, threads_);
    stats_.encoded += todo.size();
    for (std::size_t n = 0; n < todo.size(); ++n) {
      FeatureRecord rec = make_record(enc_.fingerprint(), *seqs[n], mask_, enc[n]);
      if (store_) {
        store_->put(rec);
        ++stats_.store_writes;
      }
      out[todo[n]] = expand_record(rec, enc_.config().layers);
    }
    return out;
  }

 private:
  const FrozenEncoder& enc_;
  std::uint64_t mask_;
  FeatureStore* store_;
  std::size_t threads_;
  bool replay_ = false;
  FeatureStats stats_;
};

// ---------------------------------------------------------------------------
// Steps, evaluation, checkpoints

/// Zeroes gradients, accumulates d(mean batch loss) in example order, and
/// applies one optimizer update. Returns the mean batch loss.
inline double train_step(TaskModel& model, Optimizer& opt, const std::vector<const Example*>& batch,
                         const std::vector<LayerFeatures>& features) {
  if (batch.empty()) throw UsageError("empty batch");
  const std::vector<Parameter*> params = model.parameters();
  for (Parameter* p : params) p->zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape t;
    Var loss = ops::scale(model.loss(t, features[i], *batch[i]), inv);
    total += loss.value()[0];
    if (!std::isfinite(total)) return total;
    t.backward(loss);
  }
  opt.step(params);
  return total;
}

inline std::vector<Target> predict_all(TaskModel& model, FeatureSource& source,
                                       const std::vector<Example>& data, std::size_t chunk = 64) {
  std::vector<Target> preds;
  preds.reserve(data.size());
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    std::vector<const Example*> batch;
    for (std::size_t i = s; i < std::min(data.size(), s + chunk); ++i) batch.push_back(&data[i]);
    const auto feats = source.fetch(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) preds.push_back(model.predict(feats[i], *batch[i]));
  }
  return preds;
}

inline Metrics evaluate_model(TaskModel& model, FeatureSource& source, const std::vector<Example>& data) {
  std::vector<Target> gold;
  for (const Example& e : data) gold.push_back(e.target);
  return evaluate(model.kind(), predict_all(model, source, data), gold, model.label_names());
}

inline Json to_json(const Metrics& m) {
  Json j{{"task", to_string(m.kind)}, {"count", m.count}, {"primary", m.primary()}};
  switch (m.kind) {
    case TaskKind::Classification: j["accuracy"] = m.accuracy; break;
    case TaskKind::SequenceLabeling:
      j["precision"] = m.precision;
      j["recall"] = m.recall;
      j["f1"] = m.f1;
      j["token_accuracy"] = m.token_accuracy;
      break;
    case TaskKind::SpanQA:
      j["exact_match"] = m.exact_match;
      j["f1"] = m.f1;
      break;
  }
  return j;
}

/// Parameters as named tensors (never the encoder's: models do not own it).
inline std::vector<NamedTensor> snapshot(TaskModel& model) {
  std::vector<NamedTensor> out;
  for (Parameter* p : model.parameters()) out.push_back({p->name, p->value});
  return out;
}

inline CheckpointData make_checkpoint(TaskModel& model, const Json& echo) {
  return {echo.dump(), snapshot(model)};
}

enum class LoadScope { All, FuserOnly };

/// Copies checkpoint tensors into the model. Every missing or mis-shaped
/// tensor is listed in one ShapeError; nothing is modified in that case.
inline void load_parameters(TaskModel& model, const CheckpointData& ck, LoadScope scope = LoadScope::All) {
  std::vector<std::pair<Parameter*, const Tensor*>> plan;
  std::string problems;
  for (Parameter* p : model.parameters()) {
    if (scope == LoadScope::FuserOnly && p->name.rfind("fuser.", 0) != 0) continue;
    const Tensor* t = ck.find(p->name);
    if (!t) {
      problems += "\n  " + p->name + ": missing from checkpoint (model " + shape_str(p->value.shape()) + ")";
    } else if (t->shape() != p->value.shape()) {
      problems += "\n  " + p->name + ": checkpoint " + shape_str(t->shape()) + " vs model " +
                  shape_str(p->value.shape());
    } else {
      plan.emplace_back(p, t);
    }
  }
  if (!problems.empty()) throw ShapeError("checkpoint does not fit the model:" + problems);
  if (plan.empty()) throw ShapeError("checkpoint holds no tensors for this model");
  for (auto [p, t] : plan) p->value = *t;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> dev_metric;
};

inline Json to_json(const EpochRecord& e) {
  return Json{{"epoch", e.epoch},
              {"train_loss", e.train_loss},
              {"dev_metric", e.dev_metric ? Json(*e.dev_metric) : Json(nullptr)}};
}

struct TrainResult {
  std::vector<EpochRecord> history;
  /// Wall time of each epoch's training pass (feature supply and steps).
  std::vector<double> epoch_ms;
  std::optional<Metrics> best_dev;
  std::size_t best_epoch = 0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
  FeatureStats features;
  CheckpointData checkpoint;
};

/// Training aborted on a non-finite loss; carries the parameters from the
/// last update that produced a finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, CheckpointData last_good, std::size_t epoch)
      : Error(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  const CheckpointData& last_good() const { return last_good_; }
  std::size_t epoch() const { return epoch_; }

 private:
  CheckpointData last_good_;
  std::size_t epoch_;
};

namespace detail {

/// Temporary store file removed when the run ends.
struct ScratchFile {
  std::filesystem::path path;
  explicit ScratchFile(std::uint64_t salt) {
    static std::atomic<std::uint64_t> counter{0};
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = std::filesystem::temp_directory_path() /
           ("ytune-fs-" + std::to_string(static_cast<std::uint64_t>(tick)) + "-" +
            std::to_string(salt) + "-" + std::to_string(counter++) + ".ytfs");
  }
  ~ScratchFile() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
};

inline Json history_json(const std::vector<EpochRecord>& h) {
  Json a = Json::array();
  for (const auto& e : h) a.push_back(to_json(e));
  return a;
}

}  // namespace detail

/// Optimizes `model` on frozen features of `train_set`. `echo` (the resolved
/// run configuration) is embedded in the returned checkpoint alongside the
/// history and the final parameters (the best dev epoch when dev is given).
inline TrainResult train(const TrainConfig& cfg, const FrozenEncoder& encoder, TaskModel& model,
                         const std::vector<Example>& train_set, const std::vector<Example>& dev_set = {},
                         const Json& echo = Json::object()) {
  cfg.validate();
  if (train_set.empty()) throw InputError("training set is empty");
  TrainResult res;
  res.encoder_hash_before = encoder.parameter_hash();

  std::optional<detail::ScratchFile> scratch;
  std::optional<FeatureStore> store;
  if (cfg.use_feature_store) {
    std::filesystem::path p = cfg.store_path;
    if (p.empty()) {
      scratch.emplace(cfg.seed);
      p = scratch->path;
    }
    store.emplace(FeatureStore::open(p, StoreMode::Append));
  }
  FeatureSource source(encoder, model.layer_mask(), store ? &*store : nullptr, cfg.threads);

  const std::vector<Parameter*> params = model.parameters();
  Optimizer opt(cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<NamedTensor> best = snapshot(model);
  std::vector<NamedTensor> last_good = best;
  double best_metric = -1.0;
  std::size_t since_best = 0;
  const bool use_dev = cfg.evaluate_dev && !dev_set.empty();

  auto make_echo = [&]() {
    Json e{{"config", echo},
           {"history", detail::history_json(res.history)},
           {"task", to_string(model.kind())},
           {"labels", model.label_names()},
           {"best_epoch", res.best_epoch}};
    if (res.best_dev) e["best_dev"] = to_json(*res.best_dev);
    return e.dump();
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    source.set_replay(store.has_value() && epoch >= 2);
    if (cfg.shuffle) rng.shuffle(order);
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      const auto feats = source.fetch(batch);
      const double batch_loss = train_step(model, opt, batch, feats);
      if (!std::isfinite(batch_loss))
        throw DivergenceError("loss became non-finite in epoch " + std::to_string(epoch),
                              CheckpointData{make_echo(), last_good}, epoch);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      last_good = snapshot(model);
    }
    res.epoch_ms.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train_set.size()), std::nullopt};

    bool stop = false;
    if (use_dev) {
      const Metrics m = evaluate_model(model, source, dev_set);
      rec.dev_metric = m.primary();
      if (m.primary() > best_metric) {
        best_metric = m.primary();
        res.best_dev = m;
        res.best_epoch = epoch;
        best = snapshot(model);
        since_best = 0;
      } else {
        ++since_best;
      }
      if (cfg.target_metric && m.primary() >= *cfg.target_metric) stop = true;
      if (cfg.patience && since_best >= cfg.patience) stop = true;
    }
    res.history.push_back(rec);
    if (stop) break;
  }

  if (use_dev) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i].value;
  } else {
    res.best_epoch = res.history.size();
  }
  res.features = source.stats();
  res.encoder_hash_after = encoder.parameter_hash();
  res.checkpoint = CheckpointData{make_echo(), snapshot(model)};
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Finite-difference check of every trainable parameter of `model` on one
/// example's loss.
inline GradCheckReport grad_check(TaskModel& model, const LayerFeatures& features, const Example& ex,
                                  double tol = 1e-4, double h = 1e-5) {
  auto loss_fn = [&] {
    Tape t;
    return model.loss(t, features, ex).value()[0];
  };
  auto grad_fn = [&] {
    for (Parameter* p : model.parameters()) p->zero_grad();
    Tape t;
    t.backward(model.loss(t, features, ex));
  };
  return check_gradients(model.parameters(), loss_fn, grad_fn, tol, h);
}

}  // namespace ytune
