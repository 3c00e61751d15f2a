#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ytune/label_fuser.hpp"
#include "ytune/rng.hpp"
#include "ytune/task_heads.hpp"

namespace ytune {

struct HeadConfig {
  double margin = 0.1;
  SoftmaxAxis seq_axis = SoftmaxAxis::Label;
  SoftmaxAxis qa_axis = SoftmaxAxis::Token;
};

/// Anything the trainer can optimize: a set of parameters, a per-example
/// differentiable loss over frozen features, and a decoder.
class TaskModel {
 public:
  virtual ~TaskModel() = default;
  virtual TaskKind kind() const = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  /// Encoder layers (bit l - 1 for layer l) the model reads.
  virtual std::uint64_t layer_mask() const = 0;
  virtual Var loss(Tape& t, const LayerFeatures& features, const Example& ex) = 0;
  virtual Target predict(const LayerFeatures& features, const Example& ex) = 0;
  /// Output label names (tag strings for sequence labeling).
  virtual std::vector<std::string> label_names() const = 0;

  std::size_t trainable_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters())
      if (p->trainable) n += p->size();
    return n;
  }
};

/// Label embeddings + fuser, with the head chosen by the task kind:
/// cosine scores and triplet loss for classification, label-row dot
/// products against top-layer hidden states for tagging and span QA.
class YTuningModel : public TaskModel {
 public:
  YTuningModel(TaskKind kind, LabelEmbeddings embeddings, FuserConfig fuser_cfg,
               std::size_t encoder_layers, std::size_t feature_width, std::uint64_t seed,
               HeadConfig head = {})
      : kind_(kind),
        emb_(std::move(embeddings)),
        fuser_(fuser_cfg, emb_.matrix.value.cols(), feature_width, seed),
        encoder_layers_(encoder_layers),
        head_(head) {
    emb_.labels.validate();
    if (kind_ == TaskKind::SpanQA &&
        (emb_.labels.names != std::vector<std::string>{"BEGIN", "END"} || emb_.labels.k != 1))
      throw ConfigError("span QA requires the label set {BEGIN, END} with k = 1");
    if (kind_ != TaskKind::Classification && fuser_.width() != feature_width)
      throw ConfigError("token-level heads need label width equal to encoder width");
  }

  TaskKind kind() const override { return kind_; }
  const LabelSet& labels() const { return emb_.labels; }
  std::vector<std::string> label_names() const override { return emb_.labels.names; }
  LabelEmbeddings& embeddings() { return emb_; }
  LabelFuser& fuser() { return fuser_; }
  const HeadConfig& head() const { return head_; }
  std::size_t encoder_layers() const { return encoder_layers_; }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out{&emb_.matrix};
    for (Parameter* p : fuser_.parameters()) out.push_back(p);
    return out;
  }

  std::uint64_t layer_mask() const override {
    std::uint64_t m = fuser_.config().layer_mask(encoder_layers_);
    if (kind_ != TaskKind::Classification) m |= 1ULL << (encoder_layers_ - 1);
    return m;
  }

  Var fuse(Tape& t, const LayerFeatures& features) {
    return fuser_.forward(t, t.param(emb_.matrix), features);
  }

  /// Class scores (classification) or the token-label logit matrix.
  Var output(Tape& t, const LayerFeatures& features, const Example& ex) {
    Var fused = fuse(t, features);
    if (kind_ == TaskKind::Classification) return score(fused, emb_.labels);
    const LabelSet& L = emb_.labels;
    // The task row takes part in fusion but not in token scoring.
    Var reps = ops::group_sum_rows(ops::slice_rows(fused, 1, L.classes() * L.k), L.k);
    const Tensor& top = features.at(encoder_layers_ - 1);
    if (top.empty()) throw ConfigError("token-level head needs the top encoder layer");
    const std::size_t rows = kind_ == TaskKind::SpanQA ? context_rows(ex, top) : top.rows();
    Var hidden = t.constant(rows == top.rows() ? top : slice(top, rows));
    return token_label_logits(hidden, reps);
  }

  Var loss(Tape& t, const LayerFeatures& features, const Example& ex) override {
    Var out = output(t, features, ex);
    switch (kind_) {
      case TaskKind::Classification:
        return triplet_loss(out, std::get<std::size_t>(ex.target), head_.margin);
      case TaskKind::SequenceLabeling:
        return seq_label_loss(out, std::get<std::vector<std::size_t>>(ex.target), head_.seq_axis);
      case TaskKind::SpanQA:
        return qa_loss(out, std::get<Span>(ex.target), head_.qa_axis);
    }
    throw ConfigError("unknown task kind");
  }

  Target predict(const LayerFeatures& features, const Example& ex) override {
    Tape t;
    const Tensor out = output(t, features, ex).value();
    switch (kind_) {
      case TaskKind::Classification: return predict_class(out.values());
      case TaskKind::SequenceLabeling: return seq_label_predict(out, head_.seq_axis);
      case TaskKind::SpanQA: return qa_predict_span(out, head_.qa_axis);
    }
    throw ConfigError("unknown task kind");
  }

 private:
  static std::size_t context_rows(const Example& ex, const Tensor& top) {
    const std::size_t n = ex.context_len ? ex.context_len : top.rows();
    if (n > top.rows()) throw InputError("context longer than the encoded sequence");
    return n;
  }
  static Tensor slice(const Tensor& x, std::size_t rows) {
    std::vector<double> d(x.data(), x.data() + rows * x.cols());
    return Tensor({rows, x.cols()}, std::move(d));
  }

  TaskKind kind_;
  LabelEmbeddings emb_;
  LabelFuser fuser_;
  std::size_t encoder_layers_;
  HeadConfig head_;
};

/// Per-token linear classifier over frozen top-layer features (the
/// feature-based baseline for the token-level tasks).
class LinearProbe : public TaskModel {
 public:
  LinearProbe(TaskKind kind, std::vector<std::string> names, std::size_t encoder_layers,
              std::size_t feature_width, std::uint64_t seed, HeadConfig head = {})
      : kind_(kind), names_(std::move(names)), encoder_layers_(encoder_layers), head_(head) {
    if (kind == TaskKind::Classification)
      throw ConfigError("the linear probe baseline covers token-level tasks only");
    const std::size_t classes = names_.size();
    if (classes == 0) throw ConfigError("linear probe needs at least one label");
    Rng rng(seed);
    Tensor w = Tensor::matrix(feature_width, classes);
    for (double& v : w.values()) v = rng.normal(0.0, 0.02);
    weight_ = Parameter("probe.w", std::move(w));
    bias_ = Parameter("probe.b", Tensor({classes}, 0.0));
  }

  TaskKind kind() const override { return kind_; }
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::vector<std::string> label_names() const override { return names_; }
  std::uint64_t layer_mask() const override { return 1ULL << (encoder_layers_ - 1); }

  Var logits(Tape& t, const LayerFeatures& features, const Example& ex) {
    const Tensor& top = features.at(encoder_layers_ - 1);
    std::size_t rows = top.rows();
    if (kind_ == TaskKind::SpanQA && ex.context_len) rows = ex.context_len;
    Tensor h = top;
    if (rows != top.rows()) h = Tensor({rows, top.cols()}, std::vector<double>(top.data(), top.data() + rows * top.cols()));
    return ops::linear(t.constant(std::move(h)), t.param(weight_), t.param(bias_));
  }

  Var loss(Tape& t, const LayerFeatures& features, const Example& ex) override {
    Var z = logits(t, features, ex);
    if (kind_ == TaskKind::SequenceLabeling)
      return seq_label_loss(z, std::get<std::vector<std::size_t>>(ex.target), head_.seq_axis);
    return qa_loss(z, std::get<Span>(ex.target), head_.qa_axis);
  }

  Target predict(const LayerFeatures& features, const Example& ex) override {
    Tape t;
    const Tensor z = logits(t, features, ex).value();
    if (kind_ == TaskKind::SequenceLabeling) return seq_label_predict(z, head_.seq_axis);
    return qa_predict_span(z, head_.qa_axis);
  }

 private:
  TaskKind kind_;
  std::vector<std::string> names_;
  std::size_t encoder_layers_;
  HeadConfig head_;
  Parameter weight_;
  Parameter bias_;
};

}  // namespace ytune
