#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ytune/tensor.hpp"

namespace ytune {

/// A named tensor with a gradient buffer. Frozen parameters (trainable=false)
/// never receive gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool is_trainable = true)
      : name(std::move(n)), value(std::move(v)), trainable(is_trainable) {
    // Frozen parameters carry no gradient buffer at all.
    if (trainable) grad = Tensor(value.shape());
  }

  void zero_grad() { grad.fill(0.0); }
  std::size_t size() const { return value.size(); }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation for one reverse pass. Nodes live in a deque so
/// references to values stay valid while recording continues.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf bound to a Parameter. Binding the same parameter twice returns the
  /// same node so all uses accumulate into one gradient. The leaf reads
  /// p.value in place, so the parameter must not change while the tape is
  /// still in use.
  Var param(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    nodes_.push_back(Node{Tensor{}, {}, p.trainable, &p, {}});
    bound_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  /// Record an op result. `fn` runs during backward only if some input
  /// requires gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      check_owner(v);
      rg = rg || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(fn) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(const Var& v) const { return nodes_.at(v.id()).current(); }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first access.
  Tensor& grad(const Var& v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.empty()) n.grad = Tensor(n.current().shape());
    return n.grad;
  }

  bool has_grad(const Var& v) const { return !nodes_.at(v.id()).grad.empty(); }

  void accumulate(const Var& v, const Tensor& g) {
    if (!requires_grad(v)) return;
    grad(v) += g;
  }

  /// Reverse pass from a scalar; adds d(loss)/d(param) into Parameter::grad
  /// of every trainable parameter bound on this tape.
  void backward(const Var& loss) {
    check_owner(loss);
    if (value(loss).size() != 1)
      throw UsageError("backward requires a scalar loss, got shape " +
                       shape_str(value(loss).shape()));
    if (consumed_) throw UsageError("backward called twice on the same tape");
    consumed_ = true;
    if (!requires_grad(loss)) return;
    grad(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      // Deque growth during backward leaves references to node i valid.
      n.backward(*this, n.grad);
    }
    for (Node& n : nodes_) {
      if (n.param && n.param->trainable && !n.grad.empty()) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
    const Tensor& current() const { return param ? param->value : value; }
  };

  void check_owner(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw UsageError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

// ---------------------------------------------------------------------------
// Differentiable ops

namespace ops {

inline Tape& tape_of(const Var& a) {
  if (!a.tape()) throw UsageError("unbound variable");
  return *a.tape();
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  return t.record(kernels::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Tensor& g) {
                    if (a.requires_grad()) t.grad(a) += kernels::matmul_nt(g, b.value());
                    if (b.requires_grad()) t.grad(b) += kernels::matmul_tn(a.value(), g);
                  });
}

/// a * b^T.
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  return t.record(kernels::matmul_nt(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Tensor& g) {
                    if (a.requires_grad()) t.grad(a) += kernels::matmul(g, b.value());
                    if (b.requires_grad()) t.grad(b) += kernels::matmul_tn(g, a.value());
                  });
}

/// x * W + b with b broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = tape_of(x);
  return t.record(kernels::linear(x.value(), w.value(), b.value()), {x, w, b},
                  [x, w, b](Tape& t, const Tensor& g) {
                    if (x.requires_grad()) t.grad(x) += kernels::matmul_nt(g, w.value());
                    if (w.requires_grad()) t.grad(w) += kernels::matmul_tn(x.value(), g);
                    if (b.requires_grad()) {
                      Tensor& gb = t.grad(b);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(r, j);
                    }
                  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor y = a.value();
  y += b.value();
  return tape_of(a).record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= s;
  return tape_of(a).record(std::move(y), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return tape_of(a).record(Tensor::vector({s}), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (double& v : ga.values()) v += g[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var sum_squares(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return tape_of(a).record(Tensor::vector({s}), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += 2.0 * av[i] * g[0];
  });
}

inline Var gelu(const Var& a) {
  return tape_of(a).record(kernels::gelu(a.value()), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * kernels::gelu_grad(av[i]);
  });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias,
                      double eps = kernels::kLayerNormEps) {
  auto xhat = std::make_shared<Tensor>();
  auto rstd = std::make_shared<std::vector<double>>();
  Tensor y = kernels::layer_norm(x.value(), gain.value(), bias.value(), eps, xhat.get(), rstd.get());
  return tape_of(x).record(
      std::move(y), {x, gain, bias}, [x, gain, bias, xhat, rstd](Tape& t, const Tensor& g) {
        const std::size_t d = g.shape().back();
        const std::size_t rows = g.size() / d;
        const Tensor& gv = gain.value();
        if (gain.requires_grad() || bias.requires_grad()) {
          Tensor& gg = t.grad(gain);
          Tensor& gb = t.grad(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * (*xhat)[r * d + j];
              gb[j] += g[r * d + j];
            }
        }
        if (!x.requires_grad()) return;
        Tensor& gx = t.grad(x);
        std::vector<double> dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxh[j] = g[r * d + j] * gv[j];
            m1 += dxh[j];
            m2 += dxh[j] * (*xhat)[r * d + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          const double rs = (*rstd)[r];
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += rs * (dxh[j] - m1 - (*xhat)[r * d + j] * m2);
        }
      });
}

/// Non-causal multi-head attention over already-projected q, k, v.
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  auto probs = std::make_shared<Tensor>();
  Tensor out = kernels::attention(q.value(), k.value(), v.value(), heads, probs.get());
  return tape_of(q).record(std::move(out), {q, k, v}, [q, k, v, heads, probs](Tape& t, const Tensor& g) {
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    const std::size_t m = Q.rows(), n = K.rows(), D = Q.cols(), dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor gq = Tensor::matrix(m, D), gk = Tensor::matrix(n, D), gv = Tensor::matrix(n, D);
    std::vector<double> dp(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g.data() + i * D + off;
        const double* P = probs->data() + (h * m + i) * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double* vj = V.data() + j * D + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
          dp[j] = s;
          dot += P[j] * s;
          double* gvj = gv.data() + j * D + off;
          for (std::size_t c = 0; c < dh; ++c) gvj[c] += P[j] * gi[c];
        }
        const double* qi = Q.data() + i * D + off;
        double* gqi = gq.data() + i * D + off;
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = P[j] * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          const double* kj = K.data() + j * D + off;
          double* gkj = gk.data() + j * D + off;
          for (std::size_t c = 0; c < dh; ++c) {
            gqi[c] += ds * kj[c];
            gkj[c] += ds * qi[c];
          }
        }
      }
    }
    count_macs(4ULL * m * n * D);
    t.accumulate(q, gq);
    t.accumulate(k, gk);
    t.accumulate(v, gv);
  });
}

/// Rows [begin, begin + count) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.rows() || count == 0)
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of " + shape_str(xv.shape()));
  const std::size_t d = xv.cols();
  std::vector<double> data(xv.data() + begin * d, xv.data() + (begin + count) * d);
  return tape_of(x).record(Tensor({count, d}, std::move(data)), {x},
                           [x, begin](Tape& t, const Tensor& g) {
                             Tensor& gx = t.grad(x);
                             const std::size_t off = begin * g.cols();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
                           });
}

/// Sums each consecutive group of `k` rows: (G*k) x D -> G x D.
inline Var group_sum_rows(const Var& x, std::size_t k) {
  const Tensor& xv = x.value();
  if (k == 0 || xv.rows() % k != 0)
    throw DimensionError("group_sum_rows: " + std::to_string(xv.rows()) +
                         " rows not divisible into groups of " + std::to_string(k));
  if (k == 1) return x;
  const std::size_t groups = xv.rows() / k, d = xv.cols();
  Tensor y = Tensor::matrix(groups, d);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) y(r / k, j) += xv(r, j);
  return tape_of(x).record(std::move(y), {x}, [x, k](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(r, j) += g(r / k, j);
  });
}

/// Cosine similarity of row 0 against every other row: R x D -> vector(R-1).
inline Var row_cosines(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows();
  if (R < 2) throw DimensionError("row_cosines needs at least two rows");
  std::vector<double> c(R - 1);
  for (std::size_t j = 1; j < R; ++j) c[j - 1] = kernels::cosine_similarity(xv.row(0), xv.row(j));
  return tape_of(x).record(Tensor::vector(std::move(c)), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor& gx = t.grad(x);
    const std::size_t D = xv.cols();
    auto a = xv.row(0);
    double na = 0.0;
    for (double v : a) na += v * v;
    na = std::sqrt(na);
    if (na == 0.0) return;
    for (std::size_t j = 1; j < xv.rows(); ++j) {
      auto b = xv.row(j);
      double nb = 0.0, dot = 0.0;
      for (std::size_t i = 0; i < D; ++i) {
        nb += b[i] * b[i];
        dot += a[i] * b[i];
      }
      nb = std::sqrt(nb);
      if (nb == 0.0) continue;
      const double cj = dot / (na * nb);
      const double gj = g[j - 1];
      for (std::size_t i = 0; i < D; ++i) {
        gx(0, i) += gj * (b[i] / (na * nb) - cj * a[i] / (na * na));
        gx(j, i) += gj * (a[i] / (na * nb) - cj * b[i] / (nb * nb));
      }
    }
  });
}

/// Sums consecutive groups of `k` entries of a vector.
inline Var group_sum(const Var& v, std::size_t k) {
  const Tensor& vv = v.value();
  if (k == 0 || vv.size() % k != 0)
    throw DimensionError("group_sum: " + std::to_string(vv.size()) +
                         " entries not divisible into groups of " + std::to_string(k));
  if (k == 1) return v;
  std::vector<double> s(vv.size() / k, 0.0);
  for (std::size_t i = 0; i < vv.size(); ++i) s[i / k] += vv[i];
  return tape_of(v).record(Tensor::vector(std::move(s)), {v}, [v, k](Tape& t, const Tensor& g) {
    Tensor& gv = t.grad(v);
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i / k];
  });
}

/// Sum over y' != gold of max(s[y'] - s[gold] + margin, 0).
inline Var triplet_loss(const Var& scores, std::size_t gold, double margin) {
  const Tensor& s = scores.value();
  if (gold >= s.size())
    throw UsageError("gold class " + std::to_string(gold) + " out of range for " +
                     std::to_string(s.size()) + " scores");
  if (!(margin >= 0.0)) throw UsageError("triplet margin must be non-negative");
  double loss = 0.0;
  std::vector<char> active(s.size(), 0);
  for (std::size_t y = 0; y < s.size(); ++y) {
    if (y == gold) continue;
    const double h = s[y] - s[gold] + margin;
    if (h > 0.0) {
      loss += h;
      active[y] = 1;
    }
  }
  return tape_of(scores).record(Tensor::vector({loss}), {scores},
                                [scores, gold, active](Tape& t, const Tensor& g) {
                                  Tensor& gs = t.grad(scores);
                                  for (std::size_t y = 0; y < active.size(); ++y) {
                                    if (!active[y]) continue;
                                    gs[y] += g[0];
                                    gs[gold] -= g[0];
                                  }
                                });
}

/// Negative log-likelihood of softmax-normalized logits.
/// logits is a matrix; axis 1 normalizes each row, axis 0 each column.
/// loss = -mean over picks (row, col) of log p[row][col].
inline Var softmax_nll(const Var& logits, std::size_t axis,
                       std::vector<std::pair<std::size_t, std::size_t>> picks) {
  const Tensor& z = logits.value();
  kernels::require_matrix(z, "softmax_nll");
  if (axis > 1) throw DimensionError("softmax_nll axis must be 0 or 1");
  if (picks.empty()) throw UsageError("softmax_nll needs at least one target");
  for (auto [r, c] : picks)
    if (r >= z.rows() || c >= z.cols())
      throw UsageError("softmax_nll target (" + std::to_string(r) + ", " + std::to_string(c) +
                       ") outside " + shape_str(z.shape()));
  auto p = std::make_shared<Tensor>(kernels::softmax(z, axis));
  double loss = 0.0;
  for (auto [r, c] : picks) {
    // log p recomputed with log-sum-exp so saturated slices stay finite.
    const std::size_t n = axis == 1 ? z.cols() : z.rows();
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, axis == 1 ? z(r, j) : z(j, c));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp((axis == 1 ? z(r, j) : z(j, c)) - mx);
    loss -= z(r, c) - mx - std::log(s);
  }
  const double inv = 1.0 / static_cast<double>(picks.size());
  loss *= inv;
  return tape_of(logits).record(
      Tensor::vector({loss}), {logits}, [logits, axis, picks = std::move(picks), p, inv](Tape& t, const Tensor& g) {
        Tensor& gz = t.grad(logits);
        const double w = g[0] * inv;
        for (auto [r, c] : picks) {
          if (axis == 1) {
            for (std::size_t j = 0; j < gz.cols(); ++j) gz(r, j) += w * (*p)(r, j);
          } else {
            for (std::size_t j = 0; j < gz.rows(); ++j) gz(j, c) += w * (*p)(j, c);
          }
          gz(r, c) -= w;
        }
      });
}

}  // namespace ops
}  // namespace ytune
