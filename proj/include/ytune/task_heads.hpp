#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "ytune/autodiff.hpp"
#include "ytune/vocab.hpp"

namespace ytune {

enum class TaskKind { Classification, SequenceLabeling, SpanQA };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Classification: return "classification";
    case TaskKind::SequenceLabeling: return "sequence_labeling";
    case TaskKind::SpanQA: return "span_qa";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  for (auto k : {TaskKind::Classification, TaskKind::SequenceLabeling, TaskKind::SpanQA})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown task kind '" + s + "'");
}

/// Inclusive token span.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

/// Class index, per-token tag indices, or an answer span.
using Target = std::variant<std::size_t, std::vector<std::size_t>, Span>;

struct Example {
  TokenSequence tokens;
  Target target;
  /// Positions eligible for token-level outputs (the QA context); equals the
  /// sequence length for the other tasks.
  std::size_t context_len = 0;
  std::size_t line = 0;
};

/// Normalization axis of the token-label matrix.
enum class SoftmaxAxis { Label, Token };

inline const char* to_string(SoftmaxAxis a) { return a == SoftmaxAxis::Label ? "label" : "token"; }

inline SoftmaxAxis parse_softmax_axis(const std::string& s) {
  if (s == "label") return SoftmaxAxis::Label;
  if (s == "token") return SoftmaxAxis::Token;
  throw ConfigError("unknown softmax axis '" + s + "'");
}

/// Matrix axis to normalize along for an M x N token-label matrix.
inline std::size_t matrix_axis(SoftmaxAxis a) { return a == SoftmaxAxis::Label ? 1 : 0; }

// ---------------------------------------------------------------------------
// Classification

inline Var triplet_loss(const Var& scores, std::size_t gold, double margin) {
  return ops::triplet_loss(scores, gold, margin);
}

/// Argmax with ties resolved to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::size_t predict_class(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("predict_class on empty scores");
  return argmax(scores);
}

// ---------------------------------------------------------------------------
// Sequence labeling

/// logits[m][c] = hidden_m . labelrep_c.
inline Var token_label_logits(const Var& hidden, const Var& labelreps) {
  if (hidden.value().cols() != labelreps.value().cols())
    throw ConfigError("hidden width " + std::to_string(hidden.value().cols()) +
                      " differs from label width " + std::to_string(labelreps.value().cols()));
  return ops::matmul_nt(hidden, labelreps);
}

/// Mean over tokens of -log p(tag_m), p normalized along `axis`.
inline Var seq_label_loss(const Var& logits, const std::vector<std::size_t>& tags,
                          SoftmaxAxis axis = SoftmaxAxis::Label) {
  if (tags.size() != logits.value().rows())
    throw UsageError("tag count " + std::to_string(tags.size()) + " differs from " +
                     std::to_string(logits.value().rows()) + " logit rows");
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t m = 0; m < tags.size(); ++m) picks.emplace_back(m, tags[m]);
  return ops::softmax_nll(logits, matrix_axis(axis), std::move(picks));
}

inline std::vector<std::size_t> seq_label_predict(const Tensor& logits,
                                                  SoftmaxAxis axis = SoftmaxAxis::Label) {
  const Tensor p = kernels::softmax(logits, matrix_axis(axis));
  std::vector<std::size_t> tags(p.rows());
  for (std::size_t m = 0; m < p.rows(); ++m) tags[m] = argmax(p.row(m));
  return tags;
}

// ---------------------------------------------------------------------------
// Span QA (labels BEGIN = column 0, END = column 1)

/// Maximizes p_begin(i) * p_end(j) over i <= j; ties prefer the smaller
/// begin, then the smaller end. Linear time via a running prefix maximum.
inline Span qa_predict_span(const Tensor& logits, SoftmaxAxis axis = SoftmaxAxis::Token) {
  kernels::require_matrix(logits, "qa_predict_span");
  if (logits.cols() != 2) throw DimensionError("span logits need exactly two columns");
  const Tensor p = kernels::softmax(logits, matrix_axis(axis));
  const std::size_t M = p.rows();
  Span best{0, 0};
  double best_score = -1.0;
  std::size_t arg_begin = 0;
  for (std::size_t j = 0; j < M; ++j) {
    if (p(j, 0) > p(arg_begin, 0)) arg_begin = j;
    const double s = p(arg_begin, 0) * p(j, 1);
    if (s > best_score ||
        (s == best_score && std::tie(arg_begin, j) < std::tie(best.begin, best.end))) {
      best_score = s;
      best = {arg_begin, j};
    }
  }
  return best;
}

/// Average of -log p_begin(begin) and -log p_end(end).
inline Var qa_loss(const Var& logits, Span span, SoftmaxAxis axis = SoftmaxAxis::Token) {
  const std::size_t M = logits.value().rows();
  if (span.begin > span.end || span.end >= M)
    throw UsageError("answer span (" + std::to_string(span.begin) + ", " +
                     std::to_string(span.end) + ") invalid for " + std::to_string(M) + " tokens");
  return ops::softmax_nll(logits, matrix_axis(axis), {{span.begin, 0}, {span.end, 1}});
}

// ---------------------------------------------------------------------------
// Metrics

struct Entity {
  std::size_t begin;
  std::size_t end;
  std::string type;
  auto operator<=>(const Entity&) const = default;
};

/// Chunks of a BIO tag sequence. An I-X that does not continue an X chunk
/// opens a new one.
inline std::vector<Entity> bio_entities(const std::vector<std::string>& tags) {
  std::vector<Entity> out;
  bool open = false;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::string& t = tags[i];
    const bool is_b = t.rfind("B-", 0) == 0, is_i = t.rfind("I-", 0) == 0;
    if (is_i && open && out.back().type == t.substr(2) && out.back().end + 1 == i) {
      out.back().end = i;
      continue;
    }
    if (is_b || is_i) {
      out.push_back({i, i, t.substr(2)});
      open = true;
    } else {
      open = false;
    }
  }
  return out;
}

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PRF prf(std::size_t tp, std::size_t predicted, std::size_t gold) {
  PRF r;
  r.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
  r.recall = gold ? static_cast<double>(tp) / static_cast<double>(gold) : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  if (predicted == 0 && gold == 0) r = {1.0, 1.0, 1.0};
  return r;
}

/// Token-overlap F1 between two inclusive spans.
inline double span_f1(Span pred, Span gold) {
  const std::size_t lo = std::max(pred.begin, gold.begin), hi = std::min(pred.end, gold.end);
  const std::size_t overlap = lo <= hi ? hi - lo + 1 : 0;
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.end - pred.begin + 1);
  const double r = static_cast<double>(overlap) / static_cast<double>(gold.end - gold.begin + 1);
  return 2 * p * r / (p + r);
}

struct Metrics {
  TaskKind kind = TaskKind::Classification;
  std::size_t count = 0;
  double accuracy = 0.0;        // classification
  double precision = 0.0;       // entity-level, sequence labeling
  double recall = 0.0;
  double f1 = 0.0;              // entity F1 or QA token-overlap F1
  double token_accuracy = 0.0;  // sequence labeling
  double exact_match = 0.0;     // span QA

  /// The number used for model selection.
  double primary() const {
    switch (kind) {
      case TaskKind::Classification: return accuracy;
      case TaskKind::SequenceLabeling: return f1;
      case TaskKind::SpanQA: return exact_match;
    }
    return 0.0;
  }
};

/// `tag_names` maps tag indices to BIO strings for sequence labeling.
inline Metrics evaluate(TaskKind kind, const std::vector<Target>& predictions,
                        const std::vector<Target>& targets,
                        const std::vector<std::string>& tag_names = {}) {
  if (predictions.size() != targets.size())
    throw UsageError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(targets.size()) + " targets");
  Metrics m;
  m.kind = kind;
  m.count = targets.size();
  if (targets.empty()) return m;
  const double n = static_cast<double>(targets.size());
  switch (kind) {
    case TaskKind::Classification: {
      std::size_t correct = 0;
      for (std::size_t i = 0; i < targets.size(); ++i)
        correct += std::get<std::size_t>(predictions[i]) == std::get<std::size_t>(targets[i]);
      m.accuracy = static_cast<double>(correct) / n;
      break;
    }
    case TaskKind::SequenceLabeling: {
      std::size_t tp = 0, npred = 0, ngold = 0, tok_ok = 0, tok = 0;
      auto names = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::string> s;
        for (std::size_t t : idx) s.push_back(tag_names.at(t));
        return s;
      };
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& p = std::get<std::vector<std::size_t>>(predictions[i]);
        const auto& g = std::get<std::vector<std::size_t>>(targets[i]);
        if (p.size() != g.size()) throw UsageError("tag sequence length mismatch in evaluate");
        for (std::size_t t = 0; t < g.size(); ++t) tok_ok += p[t] == g[t];
        tok += g.size();
        auto pe = bio_entities(names(p)), ge = bio_entities(names(g));
        std::set<Entity> gs(ge.begin(), ge.end());
        for (const auto& e : pe) tp += gs.count(e);
        npred += pe.size();
        ngold += ge.size();
      }
      const PRF r = prf(tp, npred, ngold);
      m.precision = r.precision;
      m.recall = r.recall;
      m.f1 = r.f1;
      m.token_accuracy = tok ? static_cast<double>(tok_ok) / static_cast<double>(tok) : 0.0;
      break;
    }
    case TaskKind::SpanQA: {
      double em = 0.0, f1 = 0.0;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const Span p = std::get<Span>(predictions[i]), g = std::get<Span>(targets[i]);
        em += p == g ? 1.0 : 0.0;
        f1 += span_f1(p, g);
      }
      m.exact_match = em / n;
      m.f1 = f1 / n;
      break;
    }
  }
  return m;
}

}  // namespace ytune
