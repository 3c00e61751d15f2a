#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ytune/json_util.hpp"
#include "ytune/rng.hpp"
#include "ytune/task_heads.hpp"
#include "ytune/vocab.hpp"

namespace ytune {

/// Separator between QA context and question.
inline constexpr const char* kSepToken = "<sep>";

/// One example before tokenization. Which fields are used depends on the
/// task: `label` (classification), `tags` (BIO), or the QA fields.
struct RawExample {
  std::vector<std::string> tokens;  // text / sentence / QA context
  std::string label;
  std::vector<std::string> tags;
  std::vector<std::string> question;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t line = 0;

  bool operator==(const RawExample&) const = default;
};

struct RawDataset {
  TaskKind kind = TaskKind::Classification;
  std::vector<RawExample> rows;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

inline void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Readers

/// `text<TAB>label` per line; blank lines are skipped.
inline RawDataset read_classification_raw(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  RawDataset ds;
  ds.kind = TaskKind::Classification;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError(path.string() + ": expected text<TAB>label", n);
    RawExample ex;
    ex.tokens = split_whitespace(line.substr(0, tab));
    ex.label = line.substr(tab + 1);
    if (ex.tokens.empty()) throw ParseError(path.string() + ": empty text", n);
    if (ex.label.empty() || ex.label.find_first_of(" \t") != std::string::npos)
      throw ParseError(path.string() + ": malformed label '" + ex.label + "'", n);
    ex.line = n;
    ds.rows.push_back(std::move(ex));
  }
  return ds;
}

struct BioReadOptions {
  /// Rewrite an I-X that does not continue an X chunk as B-X.
  bool repair = false;
};

/// `token<TAB>tag` per line, sentences separated by blank lines.
inline RawDataset read_bio_raw(const std::filesystem::path& path, BioReadOptions opts = {}) {
  auto in = detail::open_input(path);
  RawDataset ds;
  ds.kind = TaskKind::SequenceLabeling;
  RawExample cur;
  auto flush = [&] {
    if (cur.tokens.empty()) return;
    for (std::size_t i = 0; i < cur.tags.size(); ++i) {
      const std::string& t = cur.tags[i];
      if (t.rfind("I-", 0) != 0) continue;
      const std::string type = t.substr(2);
      const bool continues = i > 0 && (cur.tags[i - 1] == "B-" + type || cur.tags[i - 1] == "I-" + type);
      if (continues) continue;
      ds.warnings.push_back(path.string() + ":" + std::to_string(cur.line + i) + ": " + t +
                            " does not follow B-" + type + " or I-" + type +
                            (opts.repair ? " (repaired to B-" + type + ")" : ""));
      if (opts.repair) cur.tags[i] = "B-" + type;
    }
    ds.rows.push_back(std::move(cur));
    cur = RawExample{};
  };
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw ParseError(path.string() + ": expected token<TAB>tag", n);
    std::string tok = line.substr(0, tab), tag = line.substr(tab + 1);
    if (tok.empty() || tag.empty()) throw ParseError(path.string() + ": empty token or tag", n);
    if (tag != "O" && !((tag.rfind("B-", 0) == 0 || tag.rfind("I-", 0) == 0) && tag.size() > 2))
      throw ParseError(path.string() + ": tag '" + tag + "' is not O, B-X or I-X", n);
    if (cur.tokens.empty()) cur.line = n;
    cur.tokens.push_back(std::move(tok));
    cur.tags.push_back(std::move(tag));
  }
  flush();
  return ds;
}

/// One JSON object per line: {context_tokens, question_tokens, begin, end}.
inline RawDataset read_qa_raw(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  RawDataset ds;
  ds.kind = TaskKind::SpanQA;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    RawExample ex;
    ex.line = n;
    try {
      const Json j = Json::parse(line);
      StrictObject o(j, "qa record");
      if (!o.get("context_tokens", ex.tokens) || !o.get("question_tokens", ex.question))
        throw ParseError(path.string() + ": missing context_tokens or question_tokens", n);
      long long b = -1, e = -1;
      if (!o.get("begin", b) || !o.get("end", e))
        throw ParseError(path.string() + ": missing begin or end", n);
      o.finish();
      if (b < 0 || e < 0) throw ValidationError(path.string() + ":" + std::to_string(n) + ": negative span index");
      ex.begin = static_cast<std::size_t>(b);
      ex.end = static_cast<std::size_t>(e);
    } catch (const Json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), n);
    } catch (const ConfigError& e) {
      throw ParseError(path.string() + ": " + e.what(), n);
    }
    if (ex.tokens.empty()) throw ValidationError(path.string() + ":" + std::to_string(n) + ": empty context");
    if (ex.begin > ex.end)
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": span begin after end");
    if (ex.end >= ex.tokens.size())
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": span end " +
                            std::to_string(ex.end) + " beyond context of " +
                            std::to_string(ex.tokens.size()) + " tokens");
    ds.rows.push_back(std::move(ex));
  }
  return ds;
}

inline RawDataset read_raw(TaskKind kind, const std::filesystem::path& path, BioReadOptions bio = {}) {
  switch (kind) {
    case TaskKind::Classification: return read_classification_raw(path);
    case TaskKind::SequenceLabeling: return read_bio_raw(path, bio);
    case TaskKind::SpanQA: return read_qa_raw(path);
  }
  throw ConfigError("unknown task kind");
}

// ---------------------------------------------------------------------------
// Writers

inline void write_raw(const RawDataset& ds, const std::filesystem::path& path) {
  auto out = detail::open_output(path);
  for (const RawExample& ex : ds.rows) {
    switch (ds.kind) {
      case TaskKind::Classification: {
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << (i ? " " : "") << ex.tokens[i];
        out << '\t' << ex.label << '\n';
        break;
      }
      case TaskKind::SequenceLabeling:
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << ex.tokens[i] << '\t' << ex.tags[i] << '\n';
        out << '\n';
        break;
      case TaskKind::SpanQA:
        out << Json{{"context_tokens", ex.tokens},
                    {"question_tokens", ex.question},
                    {"begin", ex.begin},
                    {"end", ex.end}}
                   .dump()
            << '\n';
        break;
    }
  }
  if (!out.flush()) throw InputError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Label sets and tokenization

/// Label names implied by a training set: sorted class names; "O" followed by
/// B-/I- pairs per sorted entity type; BEGIN/END for QA.
inline std::vector<std::string> infer_label_names(const RawDataset& ds) {
  std::vector<std::string> out;
  switch (ds.kind) {
    case TaskKind::Classification: {
      std::set<std::string> s;
      for (const auto& ex : ds.rows) s.insert(ex.label);
      out.assign(s.begin(), s.end());
      break;
    }
    case TaskKind::SequenceLabeling: {
      std::set<std::string> types;
      for (const auto& ex : ds.rows)
        for (const auto& t : ex.tags)
          if (t != "O") types.insert(t.substr(2));
      out.push_back("O");
      for (const auto& t : types) {
        out.push_back("B-" + t);
        out.push_back("I-" + t);
      }
      break;
    }
    case TaskKind::SpanQA: out = {"BEGIN", "END"}; break;
  }
  return out;
}

/// Word sequence fed to the encoder (QA appends the separator and question).
inline std::vector<std::string> encoder_words(TaskKind kind, const RawExample& ex) {
  if (kind != TaskKind::SpanQA) return ex.tokens;
  std::vector<std::string> w = ex.tokens;
  w.push_back(kSepToken);
  w.insert(w.end(), ex.question.begin(), ex.question.end());
  return w;
}

/// Tokenized corpus for vocabulary building.
inline std::vector<std::vector<std::string>> corpus_tokens(const RawDataset& ds) {
  std::vector<std::vector<std::string>> out;
  for (const auto& ex : ds.rows) out.push_back(encoder_words(ds.kind, ex));
  return out;
}

/// Tokenizes and validates against the label set. Tags or labels outside
/// `label_names` are validation errors.
inline std::vector<Example> to_examples(const RawDataset& ds, const Vocabulary& vocab,
                                        const std::vector<std::string>& label_names, std::size_t max_len) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < label_names.size(); ++i) index[label_names[i]] = i;
  auto lookup = [&](const std::string& name, std::size_t line) {
    auto it = index.find(name);
    if (it == index.end())
      throw ValidationError("line " + std::to_string(line) + ": label '" + name + "' is not in the label set");
    return it->second;
  };
  std::vector<Example> out;
  out.reserve(ds.rows.size());
  for (const RawExample& r : ds.rows) {
    Example ex;
    ex.line = r.line;
    const auto words = encoder_words(ds.kind, r);
    if (words.size() > max_len)
      throw ValidationError("line " + std::to_string(r.line) + ": " + std::to_string(words.size()) +
                            " tokens exceed the maximum length " + std::to_string(max_len));
    for (const auto& w : words) ex.tokens.ids.push_back(vocab.id(w));
    ex.context_len = r.tokens.size();
    switch (ds.kind) {
      case TaskKind::Classification: ex.target = lookup(r.label, r.line); break;
      case TaskKind::SequenceLabeling: {
        std::vector<std::size_t> tags;
        for (std::size_t i = 0; i < r.tags.size(); ++i) tags.push_back(lookup(r.tags[i], r.line + i));
        ex.target = std::move(tags);
        break;
      }
      case TaskKind::SpanQA:
        if (r.begin > r.end || r.end >= r.tokens.size())
          throw ValidationError("line " + std::to_string(r.line) + ": answer span beyond the context");
        ex.target = Span{r.begin, r.end};
        break;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<Example> read_classification(const std::filesystem::path& path, const Vocabulary& vocab,
                                                const std::vector<std::string>& labels, std::size_t max_len) {
  return to_examples(read_classification_raw(path), vocab, labels, max_len);
}

inline std::vector<Example> read_bio(const std::filesystem::path& path, const Vocabulary& vocab,
                                     const std::vector<std::string>& tags, std::size_t max_len,
                                     BioReadOptions opts = {}) {
  return to_examples(read_bio_raw(path, opts), vocab, tags, max_len);
}

inline std::vector<Example> read_qa(const std::filesystem::path& path, const Vocabulary& vocab,
                                    std::size_t max_len) {
  return to_examples(read_qa_raw(path), vocab, {"BEGIN", "END"}, max_len);
}

// ---------------------------------------------------------------------------
// Synthetic generators

enum class Generator { KeywordClassification, TriggerBIO, SentinelSpanQA };

inline const char* to_string(Generator g) {
  switch (g) {
    case Generator::KeywordClassification: return "keyword_classification";
    case Generator::TriggerBIO: return "trigger_bio";
    case Generator::SentinelSpanQA: return "sentinel_span_qa";
  }
  return "?";
}

inline Generator parse_generator(const std::string& s) {
  for (auto g : {Generator::KeywordClassification, Generator::TriggerBIO, Generator::SentinelSpanQA})
    if (s == to_string(g)) return g;
  throw ConfigError("unknown generator '" + s + "'");
}

inline TaskKind task_of(Generator g) {
  switch (g) {
    case Generator::KeywordClassification: return TaskKind::Classification;
    case Generator::TriggerBIO: return TaskKind::SequenceLabeling;
    case Generator::SentinelSpanQA: return TaskKind::SpanQA;
  }
  return TaskKind::Classification;
}

struct SyntheticSpec {
  Generator generator = Generator::KeywordClassification;
  std::size_t size = 500;
  /// Number of distinct filler words.
  std::size_t vocab_size = 200;
  double noise = 0.0;
  std::uint64_t seed = 0;
  /// Classes (keyword task) or entity types (BIO, at most 4).
  std::size_t classes = 3;
  std::size_t min_len = 6;
  std::size_t max_len = 16;

  void validate() const {
    if (size == 0) throw ConfigError("synthetic size must be positive");
    if (vocab_size < 4) throw ConfigError("synthetic filler vocabulary needs at least 4 words");
    if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("noise rate must lie in [0, 1)");
    if (classes < 2) throw ConfigError("synthetic tasks need at least two classes");
    if (generator == Generator::TriggerBIO && classes > kEntityTypes.size())
      throw ConfigError("TriggerBIO supports at most 4 entity types");
    if (generator == Generator::KeywordClassification && classes > kClassNames.size())
      throw ConfigError("KeywordClassification supports at most 8 classes");
    if (min_len < 6 || max_len < min_len) throw ConfigError("synthetic lengths need 6 <= min_len <= max_len");
  }

  static constexpr std::array<const char*, 8> kClassNames = {"alpha", "beta",  "gamma", "delta",
                                                             "omega", "sigma", "kappa", "theta"};
  static constexpr std::array<const char*, 4> kEntityTypes = {"LOC", "PER", "ORG", "MISC"};
  static constexpr std::size_t kTriggersPerClass = 4;
  static constexpr std::size_t kEntityWords = 6;
  static constexpr std::size_t kCuesPerType = 2;
};

namespace detail {

inline std::string filler(Rng& rng, std::size_t v) { return "w" + std::to_string(rng.below(v)); }

/// Trigger word j of a class: the class name itself, then name_1, name_2, ...
inline std::string trigger_word(std::size_t cls, std::size_t j) {
  std::string base = SyntheticSpec::kClassNames[cls];
  return j == 0 ? base : base + "_" + std::to_string(j);
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline RawExample gen_keyword(const SyntheticSpec& s, Rng& rng) {
  RawExample ex;
  const std::size_t len = s.min_len + rng.below(s.max_len - s.min_len + 1);
  for (std::size_t i = 0; i < len; ++i) ex.tokens.push_back(filler(rng, s.vocab_size));
  const std::size_t cls = rng.below(s.classes);
  ex.tokens[rng.below(len)] = trigger_word(cls, rng.below(SyntheticSpec::kTriggersPerClass));
  std::size_t label = cls;
  if (rng.uniform() < s.noise) label = (cls + 1 + rng.below(s.classes - 1)) % s.classes;
  ex.label = SyntheticSpec::kClassNames[label];
  return ex;
}

// A sentence holds one cue word naming its entity type, filler, and one to
// three entity runs. Run heads come from the eb* words and continuations
// from ei* words; every run in the sentence carries the cue's type.
inline RawExample gen_bio(const SyntheticSpec& s, Rng& rng) {
  RawExample ex;
  const std::size_t len = s.min_len + rng.below(s.max_len - s.min_len + 1);
  const std::size_t type = rng.below(s.classes);
  ex.tokens.assign(len, "");
  ex.tags.assign(len, "O");
  for (std::size_t i = 0; i < len; ++i) ex.tokens[i] = filler(rng, s.vocab_size);
  std::vector<bool> used(len, false);
  const std::size_t cue = rng.below(len);
  used[cue] = true;
  ex.tokens[cue] = lower(SyntheticSpec::kEntityTypes[type]) + "_cue" +
                   std::to_string(rng.below(SyntheticSpec::kCuesPerType));
  std::vector<std::pair<std::size_t, std::size_t>> placed;
  const std::size_t runs = 1 + rng.below(3);
  for (std::size_t r = 0; r < runs; ++r) {
    const std::size_t rl = 1 + rng.below(3);
    for (int attempt = 0; attempt < 16; ++attempt) {
      const std::size_t start = rng.below(len - rl + 1);
      bool ok = true;
      // Keep a gap so adjacent runs never merge.
      for (std::size_t i = start ? start - 1 : 0; i < std::min(len, start + rl + 1); ++i)
        ok = ok && (!used[i] || (i == cue && (i < start || i >= start + rl)));
      if (!ok) continue;
      for (std::size_t i = start; i < start + rl; ++i) used[i] = true;
      placed.emplace_back(start, rl);
      break;
    }
  }
  if (placed.empty()) {
    const std::size_t pos = cue == 0 ? len - 1 : 0;
    placed.emplace_back(pos, 1);
  }
  std::size_t tag_type = type;
  if (rng.uniform() < s.noise) tag_type = (type + 1 + rng.below(s.classes - 1)) % s.classes;
  const std::string tname = SyntheticSpec::kEntityTypes[tag_type];
  for (auto [start, rl] : placed) {
    ex.tokens[start] = "eb" + std::to_string(rng.below(SyntheticSpec::kEntityWords));
    ex.tags[start] = "B-" + tname;
    for (std::size_t i = start + 1; i < start + rl; ++i) {
      ex.tokens[i] = "ei" + std::to_string(rng.below(SyntheticSpec::kEntityWords));
      ex.tags[i] = "I-" + tname;
    }
  }
  return ex;
}

// Context with one bracketed run per sentinel kind ("qa" and "qb"), each
// run being open sentinel, zero to three filler words, close sentinel. The
// question names a kind; the answer is that run, sentinels included.
inline RawExample gen_qa(const SyntheticSpec& s, Rng& rng) {
  static constexpr const char* kinds[2] = {"qa", "qb"};
  RawExample ex;
  const std::size_t inner[2] = {rng.below(4), rng.below(4)};
  const std::size_t need = inner[0] + inner[1] + 4;
  const std::size_t len = std::max(s.min_len + rng.below(s.max_len - s.min_len + 1), need);
  std::vector<std::string> ctx;
  // Spread the remaining filler over the three gaps around the two runs.
  std::size_t gaps[3] = {0, 0, 0};
  for (std::size_t i = need; i < len; ++i) ++gaps[rng.below(3)];
  const std::size_t first = rng.below(2);
  std::size_t span_begin[2] = {0, 0}, span_end[2] = {0, 0};
  auto put_filler = [&](std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) ctx.push_back(filler(rng, s.vocab_size));
  };
  put_filler(gaps[0]);
  for (std::size_t r = 0; r < 2; ++r) {
    const std::size_t kind = r == 0 ? first : 1 - first;
    span_begin[kind] = ctx.size();
    ctx.push_back(std::string(kinds[kind]) + "_open");
    put_filler(inner[kind]);
    span_end[kind] = ctx.size();
    ctx.push_back(std::string(kinds[kind]) + "_close");
    put_filler(gaps[r + 1]);
  }
  const std::size_t asked = rng.below(2);
  std::size_t answer = asked;
  if (rng.uniform() < s.noise) answer = 1 - asked;
  ex.tokens = std::move(ctx);
  ex.question = {"find", kinds[asked]};
  ex.begin = span_begin[answer];
  ex.end = span_end[answer];
  return ex;
}

}  // namespace detail

/// Deterministic in `spec` (including the seed).
inline RawDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  RawDataset ds;
  ds.kind = task_of(spec.generator);
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < spec.size; ++i) {
    RawExample ex;
    switch (spec.generator) {
      case Generator::KeywordClassification: ex = detail::gen_keyword(spec, rng); break;
      case Generator::TriggerBIO: ex = detail::gen_bio(spec, rng); break;
      case Generator::SentinelSpanQA: ex = detail::gen_qa(spec, rng); break;
    }
    ex.line = i + 1;
    ds.rows.push_back(std::move(ex));
  }
  return ds;
}

inline Json to_json(const SyntheticSpec& s) {
  return Json{{"generator", to_string(s.generator)}, {"size", s.size},       {"vocab_size", s.vocab_size},
              {"noise", s.noise},                    {"seed", s.seed},       {"classes", s.classes},
              {"min_len", s.min_len},                {"max_len", s.max_len}};
}

}  // namespace ytune
