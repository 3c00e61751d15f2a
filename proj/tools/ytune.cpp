// ytune command-line entry point.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ytune.hpp"

namespace fs = std::filesystem;
using namespace ytune;

namespace {

struct TrainFlags {
  std::string config;
  std::optional<std::string> task, train_file, dev_file, output_dir, store, init, model, warm_start, warm_scope,
      softmax_axis, layer_map, optimizer, vocab_file, encoder_checkpoint;
  std::optional<double> lr, margin, target;
  std::optional<std::size_t> epochs, batch_size, k, layers, patience, threads;
  std::optional<std::uint64_t> seed;
  bool fr = false, no_fr = false, bio_repair = false;
};

void add_train_flags(CLI::App* c, TrainFlags& f, bool require_config) {
  auto* opt = c->add_option("--config", f.config, "JSON run configuration");
  if (require_config) opt->required()->check(CLI::ExistingFile);
  c->add_option("--task", f.task, "classification | sequence_labeling | span_qa");
  c->add_option("--train-file", f.train_file);
  c->add_option("--dev-file", f.dev_file);
  c->add_option("--output-dir", f.output_dir);
  c->add_option("--store", f.store, "feature store path");
  c->add_option("--init", f.init, "random_uniform | sampled_vocab | class_label | opposite_label");
  c->add_option("--model", f.model, "ytuning | linear_probe");
  c->add_option("--warm-start", f.warm_start, "checkpoint to initialize from");
  c->add_option("--warm-start-scope", f.warm_scope, "fuser | all");
  c->add_option("--softmax-axis", f.softmax_axis, "label | token");
  c->add_option("--layer-map", f.layer_map, "floor_div | proportional");
  c->add_option("--optimizer", f.optimizer, "adam | sgd");
  c->add_option("--vocab-file", f.vocab_file);
  c->add_option("--encoder-checkpoint", f.encoder_checkpoint);
  c->add_option("--lr", f.lr);
  c->add_option("--margin", f.margin);
  c->add_option("--target", f.target, "stop once the dev metric reaches this value");
  c->add_option("--epochs", f.epochs);
  c->add_option("--batch-size", f.batch_size);
  c->add_option("--k", f.k, "embeddings per label");
  c->add_option("--layers", f.layers, "fuser layers (L_d)");
  c->add_option("--patience", f.patience);
  c->add_option("--threads", f.threads);
  c->add_option("--seed", f.seed);
  c->add_flag("--fr", f.fr, "use the feature store");
  c->add_flag("--no-fr", f.no_fr, "re-encode every epoch");
  c->add_flag("--bio-repair", f.bio_repair, "rewrite stray I-X tags as B-X");
}

RunConfig resolve(const TrainFlags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.task) c.task = parse_task_kind(*f.task);
  if (f.train_file) c.train_file = *f.train_file;
  if (f.dev_file) c.dev_file = *f.dev_file;
  if (f.output_dir) c.output_dir = *f.output_dir;
  if (f.store) c.store_path = *f.store;
  if (f.init) c.init = parse_init_strategy(*f.init);
  if (f.model) c.model = parse_model_kind(*f.model);
  if (f.warm_start) c.warm_start = *f.warm_start;
  if (f.warm_scope) c.warm_start_scope = parse_load_scope(*f.warm_scope);
  if (f.softmax_axis) c.train.softmax_axis = parse_softmax_axis(*f.softmax_axis);
  if (f.layer_map) c.train.layer_map = parse_layer_map(*f.layer_map);
  if (f.optimizer) c.train.optimizer = parse_optimizer(*f.optimizer);
  if (f.vocab_file) c.vocab_file = *f.vocab_file;
  if (f.encoder_checkpoint) c.encoder_checkpoint = *f.encoder_checkpoint;
  if (f.lr) c.train.learning_rate = *f.lr;
  if (f.margin) c.train.margin = *f.margin;
  if (f.target) c.train.target_metric = *f.target;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.k) c.label_k = *f.k;
  if (f.layers) c.fuser.layers = *f.layers;
  if (f.patience) c.train.patience = *f.patience;
  if (f.threads) c.train.threads = *f.threads;
  if (f.seed) c.train.seed = *f.seed;
  if (f.fr && f.no_fr) throw ConfigError("--fr and --no-fr are exclusive");
  if (f.fr) c.train.use_feature_store = true;
  if (f.no_fr) c.train.use_feature_store = false;
  if (f.bio_repair) c.bio_repair = true;
  c.validate();
  return c;
}

void print_metrics(const Metrics& m) {
  std::cout << to_json(m).dump() << '\n';
  switch (m.kind) {
    case TaskKind::Classification: std::cout << "accuracy " << m.accuracy << '\n'; break;
    case TaskKind::SequenceLabeling:
      std::cout << "entity_f1 " << m.f1 << " precision " << m.precision << " recall " << m.recall << '\n';
      break;
    case TaskKind::SpanQA: std::cout << "exact_match " << m.exact_match << " f1 " << m.f1 << '\n'; break;
  }
}

std::string extension(TaskKind k) {
  switch (k) {
    case TaskKind::Classification: return ".tsv";
    case TaskKind::SequenceLabeling: return ".bio";
    case TaskKind::SpanQA: return ".jsonl";
  }
  return ".txt";
}

Generator generator_from_flag(const std::string& s) {
  if (s == "kw" || s == "keyword") return Generator::KeywordClassification;
  if (s == "bio" || s == "trigger") return Generator::TriggerBIO;
  if (s == "qa" || s == "sentinel") return Generator::SentinelSpanQA;
  return parse_generator(s);
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(item, &pos);
      if (pos != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad list entry '" + item + "' in '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ytune: label-side tuning over a frozen encoder"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train label embeddings and fuser");
  add_train_flags(train_cmd, train_flags, false);

  std::string ck_path, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "score a data file with a checkpoint");
  eval_cmd->add_option("--checkpoint", ck_path)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data)->required()->check(CLI::ExistingFile);

  TrainFlags cache_flags;
  std::string cache_data;
  auto* cache_cmd = app.add_subcommand("cache", "pre-populate a feature store");
  add_train_flags(cache_cmd, cache_flags, false);
  cache_cmd->add_option("--data", cache_data, "file to encode (default: training file)");

  BenchConfig bench;
  std::string bench_json;
  auto* bench_cmd = app.add_subcommand("bench", "feature-reuse timing benchmark");
  bench_cmd->add_option("--M", bench.seq_len, "sequence length");
  bench_cmd->add_option("--examples", bench.examples);
  bench_cmd->add_option("--epochs", bench.epochs);
  bench_cmd->add_option("--L", bench.encoder.layers, "encoder layers");
  bench_cmd->add_option("--H", bench.encoder.hidden, "encoder width");
  bench_cmd->add_option("--Ld", bench.fuser_layers, "fuser layers");
  bench_cmd->add_option("--seed", bench.seed);
  bench_cmd->add_option("--store", bench.store_path);
  bench_cmd->add_option("--json", bench_json, "write the JSON report here");

  CostQuery fq;
  fq.M = 16;
  std::string paradigm = "ytuning";
  std::size_t flops_H = 64;
  bool flops_table = false, flops_measure = false;
  auto* flops_cmd = app.add_subcommand("flops", "analytic attention cost");
  flops_cmd->add_option("--paradigm", paradigm, "fine_tuning | feature_based | adapter | prompt | ytuning");
  flops_cmd->add_option("--L", fq.L, "encoder layers");
  flops_cmd->add_option("--M", fq.M, "sequence length");
  flops_cmd->add_option("--P", fq.P, "prompt length");
  flops_cmd->add_option("--N", fq.N, "classes");
  flops_cmd->add_option("--k", fq.k, "embeddings per class");
  flops_cmd->add_option("--Ld", fq.L_d, "fuser layers");
  flops_cmd->add_option("--H", flops_H, "width for parameter counts");
  flops_cmd->add_flag("--table", flops_table, "print every paradigm");
  flops_cmd->add_flag("--measure", flops_measure, "also run the instrumented count");

  std::string gen_kind = "keyword_classification", gen_out = ".";
  SyntheticSpec gen_spec;
  std::size_t gen_train = 500, gen_dev = 200;
  auto* gen_cmd = app.add_subcommand("gen", "write synthetic train/dev files");
  gen_cmd->add_option("--generator", gen_kind, "keyword_classification | trigger_bio | sentinel_span_qa");
  gen_cmd->add_option("--out", gen_out, "output directory");
  gen_cmd->add_option("--train", gen_train);
  gen_cmd->add_option("--dev", gen_dev);
  gen_cmd->add_option("--seed", gen_spec.seed);
  gen_cmd->add_option("--noise", gen_spec.noise);
  gen_cmd->add_option("--vocab", gen_spec.vocab_size, "filler words");
  gen_cmd->add_option("--classes", gen_spec.classes);
  gen_cmd->add_option("--min-len", gen_spec.min_len);
  gen_cmd->add_option("--max-len", gen_spec.max_len);

  AblationConfig abl;
  abl.train.patience = 10;
  abl.train.target_metric = 1.0;
  std::string abl_out = "ablation.md", abl_ks = "1,2,4", abl_depths = "1,2,4";
  auto* abl_cmd = app.add_subcommand("ablate", "k / init / depth sweep on keyword classification");
  abl_cmd->add_option("--out", abl_out, "Markdown report path");
  abl_cmd->add_option("--k", abl_ks, "comma-separated k values");
  abl_cmd->add_option("--depths", abl_depths, "comma-separated L_d values");
  abl_cmd->add_option("--epochs", abl.train.epochs);
  abl_cmd->add_option("--patience", abl.train.patience);
  abl_cmd->add_option("--lr", abl.train.learning_rate);
  abl_cmd->add_option("--seed", abl.train.seed);
  abl_cmd->add_option("--data-seed", abl.data_seed);
  abl_cmd->add_option("--train-size", abl.train_size);
  abl_cmd->add_option("--dev-size", abl.dev_size);
  abl_cmd->add_option("--train-file", abl.train_file);
  abl_cmd->add_option("--dev-file", abl.dev_file);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) {
      const RunConfig cfg = resolve(train_flags);
      const RunOutcome out = run_train(cfg, &std::cerr);
      std::cout << "train ";
      print_metrics(out.train_metrics);
      if (out.dev_metrics) {
        std::cout << "dev ";
        print_metrics(*out.dev_metrics);
      }
      std::cout << "wrote " << (fs::path(cfg.output_dir) / kCheckpointFile).string() << '\n';
    } else if (*eval_cmd) {
      print_metrics(run_eval(ck_path, eval_data));
    } else if (*cache_cmd) {
      const RunConfig cfg = resolve(cache_flags);
      const std::size_t n = run_cache(cfg, cache_data);
      std::cout << "cached " << n << " new records in " << cfg.store_path << '\n';
    } else if (*bench_cmd) {
      bench.encoder.max_len = std::max(bench.encoder.max_len, bench.seq_len);
      const BenchReport r = bench_feature_reuse(bench);
      std::cout << bench_table(r);
      if (!bench_json.empty()) {
        std::ofstream f(bench_json);
        f << to_json(r).dump(2) << '\n';
      } else {
        std::cout << to_json(r).dump() << '\n';
      }
    } else if (*flops_cmd) {
      fq.paradigm = parse_paradigm(paradigm);
      const std::uint64_t total = attention_cost(fq);
      std::cout << total << " attention units (encoder " << encoder_attention_cost(fq) << ", fuser "
                << fuser_attention_cost(fq) << ")\n";
      if (flops_measure) {
        const MeasuredCost m = measured_mac_count(fq, flops_H);
        std::cout << "measured " << m.total_pairs() << " (encoder " << m.encoder_pairs << ", fuser "
                  << m.fuser_pairs << ")\n";
      }
      if (flops_table) {
        EncoderConfig ec;
        ec.layers = fq.L;
        ec.hidden = flops_H;
        ec.ffn_dim = 4 * flops_H;
        std::cout << cost_table(fq, flops_H, FrozenEncoder(ec).parameter_count());
      }
    } else if (*gen_cmd) {
      gen_spec.generator = generator_from_flag(gen_kind);
      fs::create_directories(gen_out);
      const std::string ext = extension(task_of(gen_spec.generator));
      SyntheticSpec s = gen_spec;
      const std::uint64_t base = gen_spec.seed;
      s.size = gen_train;
      s.seed = base;
      write_raw(generate(s), fs::path(gen_out) / ("train" + ext));
      s.size = gen_dev;
      s.seed = base + 1000003;
      write_raw(generate(s), fs::path(gen_out) / ("dev" + ext));
      std::cout << "wrote " << gen_train << " train and " << gen_dev << " dev examples to " << gen_out << '\n';
    } else if (*abl_cmd) {
      abl.ks = parse_list(abl_ks);
      abl.depths = parse_list(abl_depths);
      const AblationReport rep = run_ablation(abl, &std::cerr);
      const std::string md = ablation_markdown(rep);
      std::ofstream f(abl_out);
      if (!f) throw InputError("cannot write " + abl_out);
      f << md;
      std::cout << md;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
