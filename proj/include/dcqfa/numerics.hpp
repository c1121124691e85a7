#pragma once

// Dense row-major tensors and a reverse-mode tape.
//
// Storage is BasicTensor<T> (float by default); reductions accumulate in double.
// Broadcasting is limited to adding a bias vector over the last axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcqfa/common.hpp"

namespace dcqfa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor({1}, std::vector<T>{v}); }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return BasicTensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty(); }

  /// Leading extent for rank-2 tensors; 1 for vectors.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  /// Trailing extent.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw std::invalid_argument("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Handle to a value recorded on a tape.
struct Var {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(BasicTape&, std::size_t)>;

  /// Trainable input. Receives a gradient on backward().
  Var leaf(TensorT value) { return push(std::move(value), true, {}); }

  /// Input that never receives or propagates gradient.
  Var constant(TensorT value) { return push(std::move(value), false, {}); }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target; zeros for unreached nodes.
  TensorT grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return TensorT(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    if (nodes_.empty() || !loss.valid() || loss.id >= nodes_.size()) {
      throw std::logic_error("backward called before any forward computation");
    }
    if (nodes_[loss.id].value.size() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                  shape_string(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) n.grad = TensorT();
    nodes_[loss.id].grad = TensorT(nodes_[loss.id].value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // Op-construction interface.

  /// Records an op result. `parents` decide whether the result requires grad;
  /// `fn` is kept only in that case.
  Var record(TensorT value, std::initializer_list<Var> parents, BackwardFn fn, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite output in ") + op);
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const TensorT& value_at(std::size_t id) const { return nodes_[id].value; }
  const TensorT& grad_at(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation buffer for a parent; null when the parent takes no gradient.
  TensorT* grad_sink(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT(n.value.shape());
    return &n.grad;
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(TensorT value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), TensorT(), std::move(fn), requires_grad});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected rank-2 operand, got " + shape_string(t.shape()));
}

}  // namespace detail

template <typename T>
Var matmul(BasicTape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  detail::require(B.dim(0) == k, "matmul: inner extents differ " + shape_string(A.shape()) + " x " +
                                     shape_string(B.shape()));
  BasicTensor<T> C({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const T* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] = static_cast<T>(acc[j]);
  }
  return tape.record(
      std::move(C), {a, b},
      [a, b, m, k, n](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& A = t.value(a);
        const auto& B = t.value(b);
        if (auto* dA = t.grad_sink(a)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(G[i * n + j]) * B[p * n + j];
              (*dA)[i * k + p] += static_cast<T>(s);
            }
          }
        }
        if (auto* dB = t.grad_sink(b)) {
          std::vector<double> acc(k * n, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              double* row = &acc[p * n];
              for (std::size_t j = 0; j < n; ++j) row[j] += aip * G[i * n + j];
            }
          }
          for (std::size_t i = 0; i < k * n; ++i) (*dB)[i] += static_cast<T>(acc[i]);
        }
      },
      "matmul");
}

template <typename T>
Var add(BasicTape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require(A.shape() == B.shape(),
                  "add: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  BasicTensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return tape.record(
      std::move(C), {a, b},
      [a, b](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        for (Var v : {a, b}) {
          if (auto* d = t.grad_sink(v)) {
            for (std::size_t i = 0; i < G.size(); ++i) (*d)[i] += G[i];
          }
        }
      },
      "add");
}

/// x[m, n] + bias[n] broadcast over rows.
template <typename T>
Var add_bias(BasicTape<T>& tape, Var x, Var bias) {
  const auto& X = tape.value(x);
  const auto& b = tape.value(bias);
  detail::require(b.rank() == 1 && b.size() == X.cols(),
                  "add_bias: bias " + shape_string(b.shape()) + " does not match last axis of " +
                      shape_string(X.shape()));
  const std::size_t n = X.cols();
  BasicTensor<T> C = X;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += b[i % n];
  return tape.record(
      std::move(C), {x, bias},
      [x, bias, n](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        if (auto* dx = t.grad_sink(x)) {
          for (std::size_t i = 0; i < G.size(); ++i) (*dx)[i] += G[i];
        }
        if (auto* db = t.grad_sink(bias)) {
          std::vector<double> acc(n, 0.0);
          for (std::size_t i = 0; i < G.size(); ++i) acc[i % n] += G[i];
          for (std::size_t j = 0; j < n; ++j) (*db)[j] += static_cast<T>(acc[j]);
        }
      },
      "add_bias");
}

template <typename T>
Var mul(BasicTape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  detail::require(A.shape() == B.shape(),
                  "mul: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  BasicTensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return tape.record(
      std::move(C), {a, b},
      [a, b](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& A = t.value(a);
        const auto& B = t.value(b);
        if (auto* da = t.grad_sink(a)) {
          for (std::size_t i = 0; i < G.size(); ++i) (*da)[i] += G[i] * B[i];
        }
        if (auto* db = t.grad_sink(b)) {
          for (std::size_t i = 0; i < G.size(); ++i) (*db)[i] += G[i] * A[i];
        }
      },
      "mul");
}

template <typename T>
Var scale(BasicTape<T>& tape, Var a, double factor) {
  BasicTensor<T> C = tape.value(a);
  for (auto& v : C.storage()) v = static_cast<T>(v * factor);
  return tape.record(
      std::move(C), {a},
      [a, factor](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        if (auto* d = t.grad_sink(a)) {
          for (std::size_t i = 0; i < G.size(); ++i) (*d)[i] += static_cast<T>(G[i] * factor);
        }
      },
      "scale");
}

/// Tanh-approximated GELU.
template <typename T>
Var gelu(BasicTape<T>& tape, Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kK = 0.044715;
  BasicTensor<T> C = tape.value(a);
  for (auto& v : C.storage()) {
    const double x = v;
    v = static_cast<T>(0.5 * x * (1.0 + std::tanh(kC * (x + kK * x * x * x))));
  }
  return tape.record(
      std::move(C), {a},
      [a](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& X = t.value(a);
        auto* d = t.grad_sink(a);
        for (std::size_t i = 0; i < G.size(); ++i) {
          const double x = X[i];
          const double th = std::tanh(kC * (x + kK * x * x * x));
          const double dudx = kC * (1.0 + 3.0 * kK * x * x);
          const double dg = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx;
          (*d)[i] += static_cast<T>(G[i] * dg);
        }
      },
      "gelu");
}

/// Softmax of a rank-2 tensor along `axis` (0 or 1).
template <typename T>
Var softmax(BasicTape<T>& tape, Var a, std::size_t axis = 1) {
  const auto& X = tape.value(a);
  detail::require_matrix(X, "softmax");
  detail::require(axis < 2, "softmax: axis must be 0 or 1");
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  // Lines along `axis`: count, length, element stride, line stride.
  const std::size_t lines = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t stride = axis == 1 ? 1 : cols;
  const std::size_t line_step = axis == 1 ? cols : 1;
  BasicTensor<T> Y(X.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_step;
    double mx = X[base];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, static_cast<double>(X[base + j * stride]));
    double sum = 0.0;
    std::vector<double> e(len);
    for (std::size_t j = 0; j < len; ++j) {
      e[j] = std::exp(static_cast<double>(X[base + j * stride]) - mx);
      sum += e[j];
    }
    for (std::size_t j = 0; j < len; ++j) Y[base + j * stride] = static_cast<T>(e[j] / sum);
  }
  return tape.record(
      std::move(Y), {a},
      [a, lines, len, stride, line_step](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& Y = t.value_at(self);
        auto* d = t.grad_sink(a);
        for (std::size_t l = 0; l < lines; ++l) {
          const std::size_t base = l * line_step;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * stride;
            dot += static_cast<double>(G[idx]) * Y[idx];
          }
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * stride;
            (*d)[idx] += static_cast<T>(Y[idx] * (G[idx] - dot));
          }
        }
      },
      "softmax");
}

/// Normalizes each row of x[m, n], then applies gamma[n], beta[n].
template <typename T>
Var layer_norm(BasicTape<T>& tape, Var x, Var gamma, Var beta, double eps = 1e-5) {
  const auto& X = tape.value(x);
  const auto& g = tape.value(gamma);
  const auto& b = tape.value(beta);
  detail::require(eps > 0.0, "layer_norm: eps must be positive");
  const std::size_t n = X.cols();
  const std::size_t m = X.size() / n;
  detail::require(g.size() == n && b.size() == n && g.rank() == 1 && b.rank() == 1,
                  "layer_norm: affine parameters must match last axis of " + shape_string(X.shape()));
  BasicTensor<T> Y(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += X[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = X[i * n + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (X[i * n + j] - mean) * inv_std[i];
      Y[i * n + j] = static_cast<T>(xhat[i * n + j] * g[j] + b[j]);
    }
  }
  return tape.record(
      std::move(Y), {x, gamma, beta},
      [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](BasicTape<T>& t,
                                                                                   std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& g = t.value(gamma);
        if (auto* dx = t.grad_sink(x)) {
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = static_cast<double>(G[i * n + j]) * g[j];
              mean_d += dxh;
              mean_dx += dxh * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = static_cast<double>(G[i * n + j]) * g[j];
              (*dx)[i * n + j] += static_cast<T>(inv_std[i] * (dxh - mean_d - xhat[i * n + j] * mean_dx));
            }
          }
        }
        if (auto* dg = t.grad_sink(gamma)) {
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(G[i * n + j]) * xhat[i * n + j];
            (*dg)[j] += static_cast<T>(s);
          }
        }
        if (auto* db = t.grad_sink(beta)) {
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += G[i * n + j];
            (*db)[j] += static_cast<T>(s);
          }
        }
      },
      "layer_norm");
}

/// Mean of squared differences over all elements. `target` takes no gradient.
template <typename T>
Var mse_loss(BasicTape<T>& tape, Var pred, Var target) {
  const auto& P = tape.value(pred);
  const auto& Q = tape.value(target);
  detail::require(P.shape() == Q.shape(),
                  "mse_loss: shape mismatch " + shape_string(P.shape()) + " vs " + shape_string(Q.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = static_cast<double>(P[i]) - Q[i];
    s += d * d;
  }
  const double count = static_cast<double>(P.size());
  return tape.record(
      BasicTensor<T>::scalar(static_cast<T>(s / count)), {pred},
      [pred, target, count](BasicTape<T>& t, std::size_t self) {
        const double g = t.grad_at(self)[0];
        const auto& P = t.value(pred);
        const auto& Q = t.value(target);
        auto* d = t.grad_sink(pred);
        for (std::size_t i = 0; i < P.size(); ++i) {
          (*d)[i] += static_cast<T>(g * 2.0 * (static_cast<double>(P[i]) - Q[i]) / count);
        }
      },
      "mse_loss");
}

/// Sum of all elements, as a scalar.
template <typename T>
Var sum(BasicTape<T>& tape, Var a) {
  const auto& A = tape.value(a);
  double s = 0.0;
  for (T v : A.data()) s += v;
  return tape.record(
      BasicTensor<T>::scalar(static_cast<T>(s)), {a},
      [a](BasicTape<T>& t, std::size_t self) {
        const T g = t.grad_at(self)[0];
        auto* d = t.grad_sink(a);
        for (auto& v : d->storage()) v += g;
      },
      "sum");
}

/// Same data, new shape.
template <typename T>
Var reshape(BasicTape<T>& tape, Var a, Shape shape) {
  BasicTensor<T> C = tape.value(a).reshaped(std::move(shape));
  return tape.record(
      std::move(C), {a},
      [a](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        auto* d = t.grad_sink(a);
        for (std::size_t i = 0; i < G.size(); ++i) (*d)[i] += G[i];
      },
      "reshape");
}

/// First `n` columns of a matrix.
template <typename T>
Var slice_cols(BasicTape<T>& tape, Var a, std::size_t n) {
  const auto& A = tape.value(a);
  detail::require_matrix(A, "slice_cols");
  const std::size_t rows = A.dim(0), cols = A.dim(1);
  detail::require(n >= 1 && n <= cols, "slice_cols: width out of range");
  if (n == cols) return a;
  BasicTensor<T> C({rows, n});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(&A[i * cols], n, &C[i * n]);
  }
  return tape.record(
      std::move(C), {a},
      [a, rows, cols, n](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        auto* d = t.grad_sink(a);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < n; ++j) (*d)[i * cols + j] += G[i * n + j];
        }
      },
      "slice_cols");
}

/// First `n` rows of a matrix, or first `n` entries of a vector.
template <typename T>
Var slice_rows(BasicTape<T>& tape, Var a, std::size_t n) {
  const auto& A = tape.value(a);
  detail::require(A.rank() == 1 || A.rank() == 2, "slice_rows: expected vector or matrix");
  const std::size_t rows = A.dim(0);
  const std::size_t width = A.rank() == 2 ? A.dim(1) : 1;
  detail::require(n >= 1 && n <= rows, "slice_rows: length out of range");
  if (n == rows) return a;
  Shape shape = A.shape();
  shape[0] = n;
  BasicTensor<T> C(shape, std::vector<T>(A.storage().begin(), A.storage().begin() + n * width));
  return tape.record(
      std::move(C), {a},
      [a](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        auto* d = t.grad_sink(a);
        for (std::size_t i = 0; i < G.size(); ++i) (*d)[i] += G[i];
      },
      "slice_rows");
}

/// x[N*seq, d] -> [N, d], averaging each group of `seq` consecutive rows.
template <typename T>
Var mean_pool(BasicTape<T>& tape, Var x, std::size_t seq) {
  const auto& X = tape.value(x);
  detail::require_matrix(X, "mean_pool");
  detail::require(seq >= 1 && X.dim(0) % seq == 0, "mean_pool: rows not divisible by sequence length");
  const std::size_t groups = X.dim(0) / seq, d = X.dim(1);
  BasicTensor<T> C({groups, d});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < seq; ++i) s += X[(g * seq + i) * d + j];
      C[g * d + j] = static_cast<T>(s / static_cast<double>(seq));
    }
  }
  return tape.record(
      std::move(C), {x},
      [x, groups, seq, d](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        auto* dx = t.grad_sink(x);
        const double inv = 1.0 / static_cast<double>(seq);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t i = 0; i < seq; ++i) {
            for (std::size_t j = 0; j < d; ++j) (*dx)[(g * seq + i) * d + j] += static_cast<T>(G[g * d + j] * inv);
          }
        }
      },
      "mean_pool");
}

/// Multi-head attention layout used by the two ops below: q, k, v are
/// [N*seq, heads*head_dim] with each row holding one token's heads side by side.
struct AttentionShape {
  std::size_t seq = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
};

/// Scaled dot-product scores, [N*heads*seq, seq]; row (n, h, i) holds q_i . k_j / sqrt(head_dim).
template <typename T>
Var attention_scores(BasicTape<T>& tape, Var q, Var k, AttentionShape s) {
  const auto& Q = tape.value(q);
  const auto& K = tape.value(k);
  detail::require_matrix(Q, "attention_scores");
  const std::size_t width = s.heads * s.head_dim;
  detail::require(Q.shape() == K.shape() && Q.dim(1) == width && Q.dim(0) % s.seq == 0,
                  "attention_scores: operand shape " + shape_string(Q.shape()) + " / " +
                      shape_string(K.shape()) + " inconsistent with heads*head_dim");
  const std::size_t batch = Q.dim(0) / s.seq;
  const double inv = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  BasicTensor<T> S({batch * s.heads * s.seq, s.seq});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < s.seq; ++i) {
        const T* qi = &Q[(n * s.seq + i) * width + h * s.head_dim];
        for (std::size_t j = 0; j < s.seq; ++j) {
          const T* kj = &K[(n * s.seq + j) * width + h * s.head_dim];
          double dot = 0.0;
          for (std::size_t e = 0; e < s.head_dim; ++e) dot += static_cast<double>(qi[e]) * kj[e];
          S[((n * s.heads + h) * s.seq + i) * s.seq + j] = static_cast<T>(dot * inv);
        }
      }
    }
  }
  return tape.record(
      std::move(S), {q, k},
      [q, k, s, batch, width, inv](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& Q = t.value(q);
        const auto& K = t.value(k);
        auto* dq = t.grad_sink(q);
        auto* dk = t.grad_sink(k);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t h = 0; h < s.heads; ++h) {
            for (std::size_t i = 0; i < s.seq; ++i) {
              const std::size_t qi = (n * s.seq + i) * width + h * s.head_dim;
              for (std::size_t j = 0; j < s.seq; ++j) {
                const std::size_t kj = (n * s.seq + j) * width + h * s.head_dim;
                const double g = G[((n * s.heads + h) * s.seq + i) * s.seq + j] * inv;
                for (std::size_t e = 0; e < s.head_dim; ++e) {
                  if (dq) (*dq)[qi + e] += static_cast<T>(g * K[kj + e]);
                  if (dk) (*dk)[kj + e] += static_cast<T>(g * Q[qi + e]);
                }
              }
            }
          }
        }
      },
      "attention_scores");
}

/// Mixes values with attention weights p [N*heads*seq, seq]; result [N*seq, heads*head_dim].
template <typename T>
Var attention_mix(BasicTape<T>& tape, Var p, Var v, AttentionShape s) {
  const auto& P = tape.value(p);
  const auto& V = tape.value(v);
  detail::require_matrix(V, "attention_mix");
  const std::size_t width = s.heads * s.head_dim;
  detail::require(V.dim(1) == width && V.dim(0) % s.seq == 0, "attention_mix: value shape mismatch");
  const std::size_t batch = V.dim(0) / s.seq;
  detail::require(P.rank() == 2 && P.dim(0) == batch * s.heads * s.seq && P.dim(1) == s.seq,
                  "attention_mix: weight shape " + shape_string(P.shape()) + " mismatch");
  BasicTensor<T> O({batch * s.seq, width});
  std::vector<double> acc(s.head_dim);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < s.seq; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < s.seq; ++j) {
          const double w = P[((n * s.heads + h) * s.seq + i) * s.seq + j];
          const T* vj = &V[(n * s.seq + j) * width + h * s.head_dim];
          for (std::size_t e = 0; e < s.head_dim; ++e) acc[e] += w * vj[e];
        }
        T* oi = &O[(n * s.seq + i) * width + h * s.head_dim];
        for (std::size_t e = 0; e < s.head_dim; ++e) oi[e] = static_cast<T>(acc[e]);
      }
    }
  }
  return tape.record(
      std::move(O), {p, v},
      [p, v, s, batch, width](BasicTape<T>& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        const auto& P = t.value(p);
        const auto& V = t.value(v);
        auto* dp = t.grad_sink(p);
        auto* dv = t.grad_sink(v);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t h = 0; h < s.heads; ++h) {
            for (std::size_t i = 0; i < s.seq; ++i) {
              const std::size_t gi = (n * s.seq + i) * width + h * s.head_dim;
              for (std::size_t j = 0; j < s.seq; ++j) {
                const std::size_t pij = ((n * s.heads + h) * s.seq + i) * s.seq + j;
                const std::size_t vj = (n * s.seq + j) * width + h * s.head_dim;
                if (dp) {
                  double dot = 0.0;
                  for (std::size_t e = 0; e < s.head_dim; ++e) dot += static_cast<double>(G[gi + e]) * V[vj + e];
                  (*dp)[pij] += static_cast<T>(dot);
                }
                if (dv) {
                  const double w = P[pij];
                  for (std::size_t e = 0; e < s.head_dim; ++e) (*dv)[vj + e] += static_cast<T>(w * G[gi + e]);
                }
              }
            }
          }
        }
      },
      "attention_mix");
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are allocated on the first step.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {
    if (!(config_.lr > 0.0)) throw UserError("adam: learning rate must be positive");
  }

  void step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam: params/grads count mismatch");
    if (m_.empty()) {
      for (const Tensor& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("adam: parameter count changed");
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      const Tensor& g = grads[i];
      if (p.shape() != g.shape() || p.shape() != m_[i].shape()) {
        throw std::invalid_argument("adam: shape mismatch for parameter " + std::to_string(i));
      }
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        const double m = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * gj;
        const double v = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * gj * gj;
        m_[i][j] = static_cast<float>(m);
        v_[i][j] = static_cast<float>(v);
        const double mhat = m / c1;
        const double vhat = v / c2;
        p[j] = static_cast<float>(p[j] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
  }

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::int64_t steps() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  void restore(std::int64_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
    if (m.size() != v.size()) throw UserError("adam: moment buffer count mismatch");
    step_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace dcqfa
