#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ytune/error.hpp"

namespace ytune {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major float64 array. Rank-1 tensors behave as 1xN row vectors
/// for the matrix accessors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const {
    if (rank() == 1) return 1;
    require_rank2();
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() == 1) return shape_[0];
    require_rank2();
    return shape_[1];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double d) { return std::isfinite(d); });
  }

  /// Exact equality of shape and every bit of every value.
  bool bit_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0);
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_)
      throw DimensionError("cannot add " + shape_str(o.shape_) + " into " + shape_str(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  void require_rank2() const {
    if (rank() != 2)
      throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Instrumentation

/// Work counters. attention_pairs counts one unit per (query, key) pair scored
/// by an attention forward pass; matmul_macs counts every multiply-accumulate
/// of every matrix product, forward and backward.
struct OpCounts {
  std::uint64_t attention_pairs = 0;
  std::uint64_t matmul_macs = 0;

  OpCounts& operator+=(const OpCounts& o) {
    attention_pairs += o.attention_pairs;
    matmul_macs += o.matmul_macs;
    return *this;
  }
};

namespace detail {
inline thread_local OpCounts* active_counts = nullptr;
inline std::atomic<std::uint64_t> zero_norm_cosines{0};
}  // namespace detail

/// Routes kernel counts on the current thread into `sink` while alive.
class CountScope {
 public:
  explicit CountScope(OpCounts& sink) : prev_(detail::active_counts) {
    detail::active_counts = &sink;
  }
  ~CountScope() { detail::active_counts = prev_; }
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

 private:
  OpCounts* prev_;
};

inline void count_macs(std::uint64_t n) {
  if (auto* c = detail::active_counts) c->matmul_macs += n;
}
inline void count_attention_pairs(std::uint64_t n) {
  if (auto* c = detail::active_counts) c->attention_pairs += n;
}

/// Number of cosine evaluations that hit a zero-norm operand since start.
inline std::uint64_t zero_norm_cosine_count() { return detail::zero_norm_cosines.load(); }

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

/// C = A * B.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor c = Tensor::matrix(m, n);
  const double* __restrict A = a.data();
  const double* __restrict B = b.data();
  double* __restrict C = c.data();
  std::size_t i = 0;
  // Four rows of C at a time so each row of B is loaded once per block.
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = C + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
      const double* __restrict bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* __restrict bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  count_macs(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// C = A * B^T (A: m x k, B: n x k).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor c = Tensor::matrix(m, n);
  const double* A = a.data();
  const double* B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  count_macs(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// C = A^T * B (A: k x m, B: k x n).
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul_tn shape mismatch: " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  Tensor c = Tensor::matrix(m, n);
  const double* __restrict A = a.data();
  const double* __restrict B = b.data();
  double* __restrict C = c.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict bp = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = A[p * m + i];
      double* __restrict ci = C + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  count_macs(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// x[r, :] += b for every row.
inline void add_row_bias(Tensor& x, const Tensor& b) {
  const std::size_t n = x.cols();
  if (b.size() != n)
    throw DimensionError("bias of size " + std::to_string(b.size()) + " for rows of width " +
                         std::to_string(n));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < n; ++j) row[j] += b[j];
  }
}

/// Linear layer: x * W + b.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

/// Numerically stable softmax along `axis` for tensors of any rank.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] *= inv;
    }
  }
  return y;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization over the last dimension followed by gain/bias.
/// When `normalized`/`rstd` are given they receive the pre-affine values and
/// the reciprocal standard deviation of each row (used by backward).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps, Tensor* normalized = nullptr,
                         std::vector<double>* rstd = nullptr) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm width " + std::to_string(d) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  const std::size_t rows = x.size() / d;
  Tensor y(x.shape());
  if (normalized) *normalized = Tensor(x.shape());
  if (rstd) rstd->assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    double* yr = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * rs;
      if (normalized) (*normalized)[r * d + j] = xh;
      yr[j] = xh * gain[j] + bias[j];
    }
    if (rstd) (*rstd)[r] = rs;
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

/// Multi-head scaled dot-product attention without any causal mask.
/// q: m x D, k/v: n x D. `probs` (if given) receives heads x m x n weights.
/// `key_valid` (if non-empty) excludes keys flagged false.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        Tensor* probs = nullptr, std::span<const bool> key_valid = {}) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t m = q.rows(), n = k.rows(), D = q.cols();
  if (heads == 0 || D % heads != 0)
    throw ConfigError("attention width " + std::to_string(D) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (k.cols() != D || v.cols() != D || v.rows() != n)
    throw DimensionError("attention shapes q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
  if (!key_valid.empty() && key_valid.size() != n)
    throw DimensionError("attention key mask length mismatch");
  const std::size_t dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::size_t valid = n;
  if (!key_valid.empty()) valid = static_cast<std::size_t>(std::count(key_valid.begin(), key_valid.end(), true));
  if (valid == 0) throw InputError("attention with no valid keys");

  Tensor out = Tensor::matrix(m, D);
  if (probs) *probs = Tensor({heads, m, n});
  std::vector<double> p(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < m; ++i) {
      const double* qi = q.data() + i * D + off;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        if (!key_valid.empty() && !key_valid[j]) {
          p[j] = -INFINITY;
          continue;
        }
        const double* kj = k.data() + j * D + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p[j] = (p[j] == -INFINITY) ? 0.0 : std::exp(p[j] - mx);
        sum += p[j];
      }
      const double inv = 1.0 / sum;
      double* oi = out.data() + i * D + off;
      for (std::size_t j = 0; j < n; ++j) {
        p[j] *= inv;
        if (probs) (*probs)[(h * m + i) * n + j] = p[j];
        if (p[j] == 0.0) continue;
        const double* vj = v.data() + j * D + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  count_attention_pairs(static_cast<std::uint64_t>(m) * valid);
  count_macs(2ULL * m * valid * D);
  return out;
}

/// a.b / (|a||b|). A zero-norm operand yields 0 and bumps the diagnostics
/// counter instead of failing.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("cosine_similarity of vectors with lengths " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    detail::zero_norm_cosines.fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace kernels
}  // namespace ytune
