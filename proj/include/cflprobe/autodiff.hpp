#pragma once

// Small reverse-mode autodiff over dense double tensors. Ops treat a
// tensor as a matrix of rows × (last dimension) unless stated otherwise.
// Operations are recorded only while a Tape is active (TapeScope) and at
// least one input requires a gradient; without a tape everything runs as
// plain inference.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cflprobe/hash.hpp"

namespace cflprobe::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto p = std::make_shared<TensorImpl>();
    p->value.assign(shape_numel(shape), 0.0);
    p->shape = std::move(shape);
    Tensor t(std::move(p));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    auto p = std::make_shared<TensorImpl>();
    p->shape = std::move(shape);
    p->value = std::move(values);
    Tensor t(std::move(p));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  std::size_t ndim() const { return p_->shape.size(); }
  std::size_t numel() const { return p_->value.size(); }
  std::size_t cols() const { return p_->shape.empty() ? 1 : p_->shape.back(); }
  std::size_t rows() const { return cols() ? numel() / cols() : 0; }

  double* data() { return p_->value.data(); }
  const double* data() const { return p_->value.data(); }
  std::vector<double>& values() { return p_->value; }
  const std::vector<double>& values() const { return p_->value; }
  std::vector<double>& grad() { return p_->grad; }
  const std::vector<double>& grad() const { return p_->grad; }
  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return p_->value[0];
  }
  double operator[](std::size_t i) const { return p_->value[i]; }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  void set_requires_grad(bool on) {
    p_->requires_grad = on;
    if (on) p_->grad.assign(numel(), 0.0);
    else p_->grad.clear();
  }
  void zero_grad() {
    if (p_->requires_grad) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
  }

  const std::shared_ptr<TensorImpl>& impl() const { return p_; }

 private:
  std::shared_ptr<TensorImpl> p_;
};

/// Ordered record of differentiable operations. Creation order is a
/// topological order, so backward simply replays the records in reverse.
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) {
    if (consumed_) throw std::logic_error("tape: recording on a consumed tape");
    entries_.push_back(std::move(fn));
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)=1 and runs every record once; the tape is then spent.
  void backward(Tensor& loss) {
    if (consumed_) throw std::logic_error("tape: backward called twice");
    if (loss.numel() != 1) throw ShapeError("backward: loss of shape " + shape_str(loss.shape()) + " is not scalar");
    if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any parameter");
    loss.grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
    consumed_ = true;
  }

  static Tape* active() { return slot(); }

 private:
  friend class TapeScope;
  static Tape*& slot() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<Backward> entries_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::slot()) { Tape::slot() = &tape; }
  ~TapeScope() { Tape::slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> xs) {
  if (!Tape::active()) return false;
  for (const Tensor* x : xs) {
    if (x->requires_grad()) return true;
  }
  return false;
}

inline Tensor result(Shape shape, bool track) { return Tensor::zeros(std::move(shape), track); }

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

using Impl = std::shared_ptr<TensorImpl>;

}  // namespace detail

// ---- elementwise -------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a[i] + b[i];
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (ai->requires_grad) ai->grad[i] += oi->grad[i];
        if (bi->requires_grad) bi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a[i] - b[i];
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (ai->requires_grad) ai->grad[i] += oi->grad[i];
        if (bi->requires_grad) bi->grad[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

/// Elementwise product (⊙).
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a[i] * b[i];
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (ai->requires_grad) ai->grad[i] += oi->grad[i] * bi->value[i];
        if (bi->requires_grad) bi->grad[i] += oi->grad[i] * ai->value[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a[i] * s;
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), s] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

/// a[..., n] + b[n] broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& b) {
  detail::require(b.numel() == a.cols(), "add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(a.shape()));
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result(a.shape(), track);
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) out.data()[r * n + j] = a[r * n + j] + b[j];
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), n] {
      const std::size_t rows = n ? oi->value.size() / n : 0;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = oi->grad[r * n + j];
          if (ai->requires_grad) ai->grad[r * n + j] += g;
          if (bi->requires_grad) bi->grad[j] += g;
        }
      }
    });
  }
  return out;
}

namespace detail {

// Unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  const bool track = tracking({&a});
  Tensor out = result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = f(a[i]);
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), dfdx] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * dfdx(ai->value[i], oi->value[i]);
    });
  }
  return out;
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---- reductions --------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::result({1}, track);
  double s = 0;
  for (double v : a.values()) s += v;
  out.data()[0] = s;
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl()] {
      for (double& g : ai->grad) g += oi->grad[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  detail::require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---- linear algebra ----------------------------------------------------

/// a[..., k] · b[k, n] → [..., n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(b.ndim() == 2 && a.cols() == b.shape()[0],
                  "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t r = a.rows(), k = a.cols(), n = b.shape()[1];
  Shape os = a.shape();
  os.back() = n;
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result(std::move(os), track);
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* orow = O + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), r, k, n] {
      const double* G = oi->grad.data();
      if (ai->requires_grad) {
        // dA = G·Bᵀ as row axpys over a transposed copy (vectorizes)
        std::vector<double> bt(n * k);
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bi->value[p * n + j];
        }
        for (std::size_t i = 0; i < r; ++i) {
          double* arow = ai->grad.data() + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = G[i * n + j];
            if (g == 0.0) continue;
            const double* btrow = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) arow[p] += g * btrow[p];
          }
        }
      }
      if (bi->requires_grad) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ai->value[i * k + p];
            if (av == 0.0) continue;
            double* grow = bi->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) grow[j] += av * G[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

/// Batched product over the leading dimension: a[G,T,K] · b[G,K,S]
/// (or b[G,S,K] transposed when trans_b) → [G,T,S].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
  detail::require(a.ndim() == 3 && b.ndim() == 3 && a.shape()[0] == b.shape()[0],
                  "bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t G = a.shape()[0], T = a.shape()[1], K = a.shape()[2];
  const std::size_t S = trans_b ? b.shape()[1] : b.shape()[2];
  detail::require((trans_b ? b.shape()[2] : b.shape()[1]) == K,
                  "bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::result({G, T, S}, track);
  auto bidx = [=](std::size_t g, std::size_t kk, std::size_t s) {
    return trans_b ? (g * S + s) * K + kk : (g * K + kk) * S + s;
  };
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t s = 0; s < S; ++s) {
        double acc = 0;
        for (std::size_t kk = 0; kk < K; ++kk) acc += a[(g * T + t) * K + kk] * b[bidx(g, kk, s)];
        out.data()[(g * T + t) * S + s] = acc;
      }
    }
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), G, T, K, S, bidx] {
      for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t s = 0; s < S; ++s) {
            const double go = oi->grad[(g * T + t) * S + s];
            if (go == 0.0) continue;
            for (std::size_t kk = 0; kk < K; ++kk) {
              if (ai->requires_grad) ai->grad[(g * T + t) * K + kk] += go * bi->value[bidx(g, kk, s)];
              if (bi->requires_grad) bi->grad[bidx(g, kk, s)] += go * ai->value[(g * T + t) * K + kk];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- softmax and losses ------------------------------------------------

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(a.shape(), track);
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* x = a.data() + r * n;
    double* y = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), n] {
      const std::size_t rows = n ? oi->value.size() / n : 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = oi->value.data() + r * n;
        const double* g = oi->grad.data() + r * n;
        double dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) ai->grad[r * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

enum class Reduction { Mean, Sum };

/// Cross-entropy of row-wise logits against class indices; rows whose
/// target is negative are ignored. Mean is over counted rows (0 if none).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            Reduction reduction = Reduction::Mean) {
  const std::size_t n = logits.cols(), rows = logits.rows();
  detail::require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) +
                                              " targets for logits " + shape_str(logits.shape()));
  const bool track = detail::tracking({&logits});
  Tensor out = detail::result({1}, track);
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    detail::require(static_cast<std::size_t>(targets[r]) < n, "cross_entropy: target out of range");
    const double* x = logits.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += ((*probs)[r * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] /= z;
    total += mx + std::log(z) - x[targets[r]];
    ++count;
  }
  const double denom = reduction == Reduction::Mean && count ? static_cast<double>(count) : 1.0;
  out.data()[0] = total / denom;
  if (track) {
    Tape::active()->record([li = logits.impl(), oi = out.impl(), probs, targets, n, denom] {
      const double g = oi->grad[0] / denom;
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0) continue;
        for (std::size_t j = 0; j < n; ++j) {
          li->grad[r * n + j] += g * ((*probs)[r * n + j] - (static_cast<int>(j) == targets[r] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

/// Mean binary cross-entropy of logits (one per row) against 0/1 labels.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& labels) {
  detail::require(logits.numel() == labels.size() && !labels.empty(),
                  "bce_with_logits: " + std::to_string(labels.size()) + " labels for " + shape_str(logits.shape()));
  const bool track = detail::tracking({&logits});
  Tensor out = detail::result({1}, track);
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double n = static_cast<double>(labels.size());
  out.data()[0] = total / n;
  if (track) {
    Tape::active()->record([li = logits.impl(), oi = out.impl(), labels, n] {
      for (std::size_t i = 0; i < labels.size(); ++i) {
        li->grad[i] += oi->grad[0] * (detail::sigmoid_value(li->value[i]) - labels[i]) / n;
      }
    });
  }
  return out;
}

// ---- structural --------------------------------------------------------

/// Concatenation along the last axis; all parts share the row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total += p.cols();
    track = track || detail::tracking({&p});
  }
  Shape os = parts[0].shape();
  if (os.empty()) os = {1};
  os.back() = total;
  Tensor out = detail::result(std::move(os), track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.data() + r * c, c, out.data() + r * total + off);
    off += c;
  }
  if (track) {
    std::vector<detail::Impl> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::active()->record([impls, oi = out.impl(), rows, total] {
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t c = pi->shape.empty() ? 1 : pi->shape.back();
        if (pi->requires_grad) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) pi->grad[r * c + j] += oi->grad[r * total + off + j];
          }
        }
        off += c;
      }
    });
  }
  return out;
}

/// Columns [start, start+width) of the last axis.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
  const std::size_t n = a.cols();
  detail::require(start + width <= n, "slice_cols: [" + std::to_string(start) + "," + std::to_string(start + width) +
                                          ") outside " + shape_str(a.shape()));
  Shape os = a.shape();
  os.back() = width;
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(std::move(os), track);
  const std::size_t rows = a.rows();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data() + r * n + start, width, out.data() + r * width);
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), rows, n, start, width] {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) ai->grad[r * n + start + j] += oi->grad[r * width + j];
      }
    });
  }
  return out;
}

/// Stacks 2-D blocks with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t rows = 0;
  bool track = false;
  for (const auto& p : parts) {
    detail::require(p.cols() == c, "concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.rows();
    track = track || detail::tracking({&p});
  }
  Tensor out = detail::result({rows, c}, track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + off);
    off += p.numel();
  }
  if (track) {
    std::vector<detail::Impl> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::active()->record([impls, oi = out.impl()] {
      std::size_t off = 0;
      for (const auto& pi : impls) {
        if (pi->requires_grad) {
          for (std::size_t i = 0; i < pi->value.size(); ++i) pi->grad[i] += oi->grad[off + i];
        }
        off += pi->value.size();
      }
    });
  }
  return out;
}

/// Rows [start, start+count) of a 2-D view.
inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t c = a.cols();
  detail::require(start + count <= a.rows(), "slice_rows: rows out of range for " + shape_str(a.shape()));
  const bool track = detail::tracking({&a});
  Tensor out = detail::result({count, c}, track);
  std::copy_n(a.data() + start * c, count * c, out.data());
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), start, c] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[start * c + i] += oi->grad[i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(), "reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(std::move(shape), track);
  std::copy(a.values().begin(), a.values().end(), out.data());
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl()] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

/// Rows of `table` selected by ids → [ids.size(), cols].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::require(table.ndim() == 2, "embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t e = table.cols(), v = table.rows();
  const bool track = detail::tracking({&table});
  Tensor out = detail::result({ids.size(), e}, track);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < v, "embedding: id out of range");
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * e, e, out.data() + i * e);
  }
  if (track) {
    Tape::active()->record([ti = table.impl(), oi = out.impl(), ids, e] {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < e; ++j) ti->grad[static_cast<std::size_t>(ids[i]) * e + j] += oi->grad[i * e + j];
      }
    });
  }
  return out;
}

/// Inverted dropout; the identity when !train or rate == 0.
template <typename Rng>
Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(a.shape(), track);
  auto keep = std::make_shared<std::vector<double>>(a.numel());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    (*keep)[i] = u(rng) >= rate ? s : 0.0;
    out.data()[i] = a[i] * (*keep)[i];
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), keep] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * (*keep)[i];
    });
  }
  return out;
}

/// Entries where mask[i] != 0 are replaced by `value` (no gradient there).
inline Tensor masked_fill(const Tensor& a, const std::vector<char>& mask, double value) {
  detail::require(mask.size() == a.numel(), "masked_fill: mask of " + std::to_string(mask.size()) +
                                               " entries for " + shape_str(a.shape()));
  const bool track = detail::tracking({&a});
  Tensor out = detail::result(a.shape(), track);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = mask[i] ? value : a[i];
  if (track) {
    Tape::active()->record([ai = a.impl(), oi = out.impl(), mask] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (!mask[i]) ai->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

/// Per-row normalization over the last axis, then gamma ⊙ x̂ + beta.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = a.cols(), rows = a.rows();
  detail::require(gamma.numel() == n && beta.numel() == n, "layer_norm: gain/bias width mismatch with " + shape_str(a.shape()));
  const bool track = detail::tracking({&a, &gamma, &beta});
  Tensor out = detail::result(a.shape(), track);
  auto xhat = std::make_shared<std::vector<double>>(a.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * n;
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    (*inv)[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x[j] - mu) * (*inv)[r];
      (*xhat)[r * n + j] = xh;
      out.data()[r * n + j] = gamma[j] * xh + beta[j];
    }
  }
  if (track) {
    Tape::active()->record([ai = a.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(), xhat, inv, n, rows] {
      std::vector<double> dxh(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0, s2 = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const double g = oi->grad[r * n + j];
          const double xh = (*xhat)[r * n + j];
          if (gi->requires_grad) gi->grad[j] += g * xh;
          if (bi->requires_grad) bi->grad[j] += g;
          dxh[j] = g * gi->value[j];
          s1 += dxh[j];
          s2 += dxh[j] * xh;
        }
        if (!ai->requires_grad) continue;
        const double N = static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          ai->grad[r * n + j] += (*inv)[r] / N * (N * dxh[j] - s1 - (*xhat)[r * n + j] * s2);
        }
      }
    });
  }
  return out;
}

/// Time-major rows (t·B + b) × (H·dh) → [B·H, T, dh], for per-head attention.
inline Tensor split_heads(const Tensor& x, std::size_t T, std::size_t B, std::size_t H) {
  detail::require(x.rows() == T * B && x.cols() % H == 0, "split_heads: " + shape_str(x.shape()) + " for T=" +
                                                              std::to_string(T) + " B=" + std::to_string(B) + " H=" + std::to_string(H));
  const std::size_t dh = x.cols() / H, d = x.cols();
  const bool track = detail::tracking({&x});
  Tensor out = detail::result({B * H, T, dh}, track);
  auto src = [=](std::size_t g, std::size_t t, std::size_t j) { return (t * B + g / H) * d + (g % H) * dh + j; };
  for (std::size_t g = 0; g < B * H; ++g) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dh; ++j) out.data()[(g * T + t) * dh + j] = x[src(g, t, j)];
    }
  }
  if (track) {
    Tape::active()->record([xi = x.impl(), oi = out.impl(), src, B, H, T, dh] {
      for (std::size_t g = 0; g < B * H; ++g) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t j = 0; j < dh; ++j) xi->grad[src(g, t, j)] += oi->grad[(g * T + t) * dh + j];
        }
      }
    });
  }
  return out;
}

/// Inverse of split_heads: [B·H, T, dh] → time-major [T·B, H·dh].
inline Tensor merge_heads(const Tensor& x, std::size_t T, std::size_t B, std::size_t H) {
  detail::require(x.ndim() == 3 && x.shape()[0] == B * H && x.shape()[1] == T, "merge_heads: bad shape " + shape_str(x.shape()));
  const std::size_t dh = x.shape()[2], d = H * dh;
  const bool track = detail::tracking({&x});
  Tensor out = detail::result({T * B, d}, track);
  auto dst = [=](std::size_t g, std::size_t t, std::size_t j) { return (t * B + g / H) * d + (g % H) * dh + j; };
  for (std::size_t g = 0; g < B * H; ++g) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dh; ++j) out.data()[dst(g, t, j)] = x[(g * T + t) * dh + j];
    }
  }
  if (track) {
    Tape::active()->record([xi = x.impl(), oi = out.impl(), dst, B, H, T, dh] {
      for (std::size_t g = 0; g < B * H; ++g) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t j = 0; j < dh; ++j) xi->grad[(g * T + t) * dh + j] += oi->grad[dst(g, t, j)];
        }
      }
    });
  }
  return out;
}

// ---- parameters and optimization --------------------------------------

/// Named trainable tensors in registration order.
class ParameterStore {
 public:
  template <typename Rng>
  Tensor add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = u(rng);
    return add(name, Tensor::from(std::move(shape), std::move(v), true));
  }

  Tensor add_constant(const std::string& name, Shape shape, double value) {
    std::vector<double> v(shape_numel(shape), value);
    return add(name, Tensor::from(std::move(shape), std::move(v), true));
  }

  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : items_) {
      if (n == name) throw std::invalid_argument("parameter store: duplicate name " + name);
    }
    if (!t.requires_grad()) t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : items_) out.push_back(t);
    return out;
  }
  Tensor get(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return t;
    }
    throw std::out_of_range("parameter store: no parameter " + name);
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }
  /// FNV-1a over names, shapes and value bytes.
  std::uint64_t digest() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& [n, t] : items_) {
      h = fnv1a(n, h);
      h = fnv1a_values<std::size_t>(std::span<const std::size_t>(t.shape()), h);
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double)), h);
    }
    return h;
  }
  /// Copies values from another store with identical names and shapes.
  void copy_values_from(const ParameterStore& other) {
    if (other.items_.size() != items_.size()) throw std::invalid_argument("parameter store: layout mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const auto& [n, src] = other.items_[i];
      auto& [m, dst] = items_[i];
      if (n != m || src.shape() != dst.shape()) throw std::invalid_argument("parameter store: mismatch at " + m);
      dst.values() = src.values();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction; gradients are zeroed after each step.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& g = p.grad();
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        p.values()[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---- checkpoints -------------------------------------------------------
//
// Binary layout (all integers and doubles little-endian):
//   8 bytes  magic "CFLPCKPT"
//   u32      format version (1)
//   u64      config digest (FNV-1a of the config text)
//   u64      config length, then that many bytes of UTF-8 config text
//   u64      tensor count, then per tensor:
//            u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//            numel × f64 values

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'L', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config;
  std::uint64_t config_digest = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CheckpointError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::string& config, const ParameterStore& store) {
  os.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, fnv1a(config));
  detail::put_le<std::uint64_t>(os, config.size());
  os.write(config.data(), static_cast<std::streamsize>(config.size()));
  detail::put_le<std::uint64_t>(os, store.items().size());
  for (const auto& [name, t] : store.items()) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(os, d);
    for (double v : t.values()) detail::put_le<double>(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("checkpoint: bad magic");
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config_digest = detail::get_le<std::uint64_t>(is);
  const auto len = detail::get_le<std::uint64_t>(is);
  if (len > (1u << 26)) throw CheckpointError("checkpoint: config too large");
  ck.config.resize(len);
  if (!is.read(ck.config.data(), static_cast<std::streamsize>(len))) throw CheckpointError("checkpoint: truncated config");
  if (fnv1a(ck.config) != ck.config_digest) throw CheckpointError("checkpoint: config digest mismatch");
  const auto count = detail::get_le<std::uint64_t>(is);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto nlen = detail::get_le<std::uint32_t>(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw CheckpointError("checkpoint: truncated name");
    const auto ndim = detail::get_le<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(detail::get_le<std::uint64_t>(is));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = detail::get_le<double>(is);
    ck.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const std::string& config, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  write_checkpoint(out, config, store);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  return read_checkpoint(in);
}

/// Copies checkpoint tensors into a store with the same layout.
inline void restore(ParameterStore& store, const Checkpoint& ck) {
  const auto& items = store.items();
  if (items.size() != ck.tensors.size()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& [name, t] = items[i];
    const auto& [cname, ct] = ck.tensors[i];
    if (name != cname || t.shape() != ct.shape()) {
      throw CheckpointError("checkpoint: parameter mismatch at " + name + " (file has " + cname + " " + shape_str(ct.shape()) + ")");
    }
    Tensor dst = t;
    dst.values() = ct.values();
  }
}

// ---- finite-difference checking ---------------------------------------

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;  // "param#index"
};

/// |a − n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
/// from reporting huge ratios for round-off-sized differences.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients of f() with central differences (step h) for
/// the given parameters. `coords_per_param` = 0 checks every coordinate;
/// otherwise that many coordinates are drawn per parameter. f must be
/// deterministic across calls (reset any dropout rng inside f).
template <typename Rng>
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, Rng& rng,
                           double h = 1e-5, std::size_t coords_per_param = 0) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = f();
    }
    tape.backward(loss);
  }
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    std::vector<std::size_t> idx(p.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (coords_per_param && coords_per_param < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(coords_per_param);
    }
    for (std::size_t i : idx) {
      const double orig = p.values()[i];
      p.values()[i] = orig + h;
      const double fp = f().item();
      p.values()[i] = orig - h;
      const double fm = f().item();
      p.values()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double err = relative_error(p.grad()[i], numeric);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = std::to_string(k) + "#" + std::to_string(i);
      }
      ++res.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return res;
}

}  // namespace cflprobe::ad
