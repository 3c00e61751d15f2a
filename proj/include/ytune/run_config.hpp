#pragma once

#include <filesystem>
#include <string>

#include "ytune/encoder.hpp"
#include "ytune/json_util.hpp"
#include "ytune/label_fuser.hpp"
#include "ytune/trainer.hpp"

namespace ytune {

enum class ModelKind { YTuning, LinearProbe };

inline const char* to_string(ModelKind m) { return m == ModelKind::YTuning ? "ytuning" : "linear_probe"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "ytuning") return ModelKind::YTuning;
  if (s == "linear_probe") return ModelKind::LinearProbe;
  throw ConfigError("unknown model '" + s + "'");
}

inline const char* to_string(LoadScope s) { return s == LoadScope::All ? "all" : "fuser"; }

inline LoadScope parse_load_scope(const std::string& s) {
  if (s == "all") return LoadScope::All;
  if (s == "fuser") return LoadScope::FuserOnly;
  throw ConfigError("unknown warm-start scope '" + s + "'");
}

inline FuserConfig fuser_config_from_json(const Json& j) {
  FuserConfig c;
  StrictObject o(j, "fuser");
  o.get("layers", c.layers);
  o.get("weight_shared", c.weight_shared);
  std::string map;
  if (o.get("layer_map", map)) c.layer_map = parse_layer_map(map);
  o.get("heads", c.heads);
  o.finish();
  return c;
}

/// Everything a train or eval run needs. Relative paths resolve against the
/// working directory.
struct RunConfig {
  TaskKind task = TaskKind::Classification;
  std::string train_file;
  std::string dev_file;
  EncoderConfig encoder;
  /// Optional YTCK file with encoder weights; overrides `encoder` when set.
  std::string encoder_checkpoint;
  FuserConfig fuser;
  std::size_t label_k = 1;
  InitStrategy init = InitStrategy::SampledVocab;
  ModelKind model = ModelKind::YTuning;
  TrainConfig train;
  std::string store_path;
  std::string output_dir = "ytune-out";
  /// Optional vocabulary file; otherwise built from the training file.
  std::string vocab_file;
  std::string warm_start;
  LoadScope warm_start_scope = LoadScope::FuserOnly;
  bool bio_repair = false;

  /// Checks values and that every referenced input path exists.
  void validate() const {
    encoder.validate();
    train.validate();
    if (label_k < 1) throw ConfigError("label_k must be at least 1");
    if (task == TaskKind::SpanQA && label_k != 1) throw ConfigError("span QA uses label_k = 1");
    if (model == ModelKind::LinearProbe && task == TaskKind::Classification)
      throw ConfigError("linear_probe is available for token-level tasks only");
    if (train_file.empty()) throw ConfigError("train_file is required");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    auto must_exist = [](const std::string& key, const std::string& p) {
      if (!p.empty() && !std::filesystem::exists(p))
        throw ConfigError(key + " '" + p + "' does not exist");
    };
    must_exist("train_file", train_file);
    must_exist("dev_file", dev_file);
    must_exist("encoder_checkpoint", encoder_checkpoint);
    must_exist("vocab_file", vocab_file);
    must_exist("warm_start", warm_start);
  }
};

inline Json to_json(const RunConfig& c) {
  return Json{{"task", to_string(c.task)},
              {"train_file", c.train_file},
              {"dev_file", c.dev_file},
              {"encoder", to_json(c.encoder)},
              {"encoder_checkpoint", c.encoder_checkpoint},
              {"fuser", to_json(c.fuser)},
              {"label_k", c.label_k},
              {"init", to_string(c.init)},
              {"model", to_string(c.model)},
              {"train", to_json(c.train)},
              {"store_path", c.store_path},
              {"output_dir", c.output_dir},
              {"vocab_file", c.vocab_file},
              {"warm_start", c.warm_start},
              {"warm_start_scope", to_string(c.warm_start_scope)},
              {"bio_repair", c.bio_repair}};
}

/// Strict parse: unknown keys anywhere are errors. Missing keys keep their
/// defaults. Path existence is checked by validate(), not here.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  std::string s;
  if (o.get("task", s)) c.task = parse_task_kind(s);
  o.get("train_file", c.train_file);
  o.get("dev_file", c.dev_file);
  if (const Json* e = o.child("encoder")) c.encoder = encoder_config_from_json(*e);
  o.get("encoder_checkpoint", c.encoder_checkpoint);
  if (const Json* f = o.child("fuser")) c.fuser = fuser_config_from_json(*f);
  o.get("label_k", c.label_k);
  if (o.get("init", s)) c.init = parse_init_strategy(s);
  if (o.get("model", s)) c.model = parse_model_kind(s);
  if (const Json* t = o.child("train")) c.train = train_config_from_json(*t);
  o.get("store_path", c.store_path);
  o.get("output_dir", c.output_dir);
  o.get("vocab_file", c.vocab_file);
  o.get("warm_start", c.warm_start);
  if (o.get("warm_start_scope", s)) c.warm_start_scope = parse_load_scope(s);
  o.get("bio_repair", c.bio_repair);
  o.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace ytune
