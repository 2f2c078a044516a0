#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sureid/errors.hpp"

namespace sureid {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

/// Dense row-major n-d array with an optional same-shape gradient buffer.
/// Copies are shallow: they share storage. Ops never mutate their inputs.
template <typename T>
class Tensor {
 public:
  using Buffer = std::vector<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Buffer>(shape_numel(t.shape_), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Buffer>(std::move(values));
    return t;
  }

  /// Trainable leaf: gradient buffer allocated, zero-filled, and kept across
  /// tape lifetimes so repeated backward calls accumulate.
  static Tensor param(Shape shape) {
    Tensor t = zeros(std::move(shape));
    t.requires_grad_ = true;
    t.grad_ = std::make_shared<Buffer>(t.numel(), T(0));
    return t;
  }

  static Tensor param_from(Shape shape, std::vector<T> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.requires_grad_ = true;
    t.grad_ = std::make_shared<Buffer>(t.numel(), T(0));
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : *t.data_) v = static_cast<T>(d(rng)) * stddev;
    return t;
  }

  /// Truncated normal: resample outside two standard deviations.
  static Tensor trunc_normal(Shape shape, std::mt19937_64& rng, T stddev) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : *t.data_) {
      double x = d(rng);
      while (std::abs(x) > 2.0) x = d(rng);
      v = static_cast<T>(x) * stddev;
    }
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i < 0 ? rank() + i : i)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T* grad() { return grad_ ? grad_->data() : nullptr; }
  const T* grad() const { return grad_ ? grad_->data() : nullptr; }
  bool requires_grad() const { return requires_grad_; }

  const std::shared_ptr<Buffer>& data_ptr() const { return data_; }
  const std::shared_ptr<Buffer>& grad_ptr() const { return grad_; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  T& at(std::initializer_list<int64_t> idx) { return (*data_)[offset(idx)]; }
  T at(std::initializer_list<int64_t> idx) const { return (*data_)[offset(idx)]; }
  T grad_at(std::initializer_list<int64_t> idx) const { return (*grad_)[offset(idx)]; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  /// View with a new shape over the same storage (and gradient).
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  /// Deep copy of values only (no gradient, no requires_grad).
  Tensor clone_values() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<Buffer>(*data_);
    return t;
  }

  /// Deep copy promoted to a trainable leaf.
  Tensor to_param() const {
    Tensor t = clone_values();
    t.requires_grad_ = true;
    t.grad_ = std::make_shared<Buffer>(t.numel(), T(0));
    return t;
  }

  // Used by op factories; not part of the user-facing API.
  void attach_grad_(std::shared_ptr<Buffer> g, bool needs_grad) {
    grad_ = std::move(g);
    requires_grad_ = needs_grad;
  }

 private:
  size_t offset(std::initializer_list<int64_t> idx) const {
    assert(static_cast<int64_t>(idx.size()) == rank());
    size_t off = 0;
    size_t axis = 0;
    for (int64_t i : idx) {
      assert(i >= 0 && i < shape_[axis]);
      off = off * static_cast<size_t>(shape_[axis]) + static_cast<size_t>(i);
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<Buffer> grad_;
  bool requires_grad_ = false;
};

/// Ordered record of the primitive ops of one forward pass. Nodes are
/// appended as they are produced, so inputs always precede their consumers
/// and one reverse sweep visits every recorded op exactly once. A tape is
/// built per training step and dropped afterwards.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  void track_node(const std::shared_ptr<std::vector<T>>& grad) { node_grads_.push_back(grad); }

  size_t size() const { return ops_.size(); }

  /// Seeds d(root)/d(root) = 1 and sweeps the record in reverse. Gradients
  /// of tensors created on this tape are reset first; leaf gradients are
  /// accumulated into, so repeated calls without an external reset add up.
  void backward(Tensor<T>& root) {
    if (root.numel() != 1)
      throw ContractError("backward requires a scalar root, got shape " +
                          shape_str(root.shape()));
    if (!root.grad_ptr())
      throw ContractError("backward root was not produced on this tape");
    for (auto& g : node_grads_) std::fill(g->begin(), g->end(), T(0));
    (*root.grad_ptr())[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<std::vector<T>>> node_grads_;
};

namespace detail {

/// Allocates the output of an op. When a tape is active and any input needs
/// gradients, the output gets a tracked zero gradient buffer.
template <typename T>
Tensor<T> op_output(Shape shape, bool needs_grad, Tape<T>* tape) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (tape && needs_grad) {
    auto g = std::make_shared<std::vector<T>>(out.numel(), T(0));
    tape->track_node(g);
    out.attach_grad_(g, true);
  }
  return out;
}

template <typename T>
bool recording(Tape<T>* tape, std::initializer_list<bool> reqs) {
  if (!tape) return false;
  for (bool r : reqs)
    if (r) return true;
  return false;
}

/// C[m,n] = (accumulate ? C : 0) + op(A) * op(B), row-major.
/// trans_a reads A as [k,m], trans_b reads B as [n,k].
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (!trans_a && !trans_b) {
    for (int64_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (int64_t p = 0; p < k; ++p) {
        const T aip = arow[p];
        if (aip == T(0)) continue;
        const T* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (int64_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (int64_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (int64_t i = 0; i < m; ++i) {
        const T aip = arow[i];
        if (aip == T(0)) continue;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// a[..., k] x b[k, n] -> [..., n]. Leading dimensions of `a` are treated as
/// stacked rows (the 2-d case is the plain matrix product).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int64_t k = b.dim(0), n = b.dim(1);
  const int64_t m = a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  const bool rec = detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(std::move(out_shape), rec, tape);
  detail::gemm<T>(false, false, m, n, k, a.data(), b.data(), out.data(), false);
  if (rec) {
    auto ad = a.data_ptr(); auto ag = a.grad_ptr();
    auto bd = b.data_ptr(); auto bg = b.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      if (ag) detail::gemm<T>(false, true, m, k, n, og->data(), bd->data(), ag->data(), true);
      if (bg) detail::gemm<T>(true, false, k, n, m, ad->data(), og->data(), bg->data(), true);
    });
  }
  return out;
}

/// Batched product over matching leading dims: a[..., m, k] x b[..., k, n]
/// (or b[..., n, k] when trans_b), scaled by alpha.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false, T alpha = T(1),
              Tape<T>* tape = nullptr) {
  if (a.rank() < 2 || b.rank() != a.rank())
    throw ShapeError("bmm: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  for (int64_t i = 0; i + 2 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("bmm: batch dims differ " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t n = trans_b ? b.dim(-2) : b.dim(-1);
  const int64_t bk = trans_b ? b.dim(-1) : b.dim(-2);
  if (bk != k)
    throw ShapeError("bmm: inner dims differ " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t batches = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool rec = detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(std::move(out_shape), rec, tape);
  for (int64_t bi = 0; bi < batches; ++bi)
    detail::gemm<T>(false, trans_b, m, n, k, a.data() + bi * m * k, b.data() + bi * k * n,
                    out.data() + bi * m * n, false);
  if (alpha != T(1)) {
    T* o = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] *= alpha;
  }
  if (rec) {
    auto ad = a.data_ptr(); auto ag = a.grad_ptr();
    auto bd = b.data_ptr(); auto bg = b.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      std::vector<T> gscaled;
      const T* g = og->data();
      if (alpha != T(1)) {
        gscaled.assign(og->begin(), og->end());
        for (auto& v : gscaled) v *= alpha;
        g = gscaled.data();
      }
      for (int64_t bi = 0; bi < batches; ++bi) {
        const T* gi = g + bi * m * n;
        const T* av = ad->data() + bi * m * k;
        const T* bv = bd->data() + bi * k * n;
        if (!trans_b) {
          // dA += G B^T ; dB += A^T G
          if (ag) detail::gemm<T>(false, true, m, k, n, gi, bv, ag->data() + bi * m * k, true);
          if (bg) detail::gemm<T>(true, false, k, n, m, av, gi, bg->data() + bi * k * n, true);
        } else {
          // out = A B^T: dA += G B ; dB += G^T A
          if (ag) detail::gemm<T>(false, false, m, k, n, gi, bv, ag->data() + bi * m * k, true);
          if (bg) detail::gemm<T>(true, false, n, k, m, gi, av, bg->data() + bi * n * k, true);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(const Tensor<T>& x, Tape<T>* tape, FwdFn fwd, BwdFn dfdx) {
  const bool rec = recording(tape, {x.requires_grad()});
  Tensor<T> out = op_output<T>(x.shape(), rec, tape);
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
  if (rec) {
    auto xd = x.data_ptr(); auto xg = x.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      const T* g = og->data();
      const T* xx = xd->data();
      T* gx = xg->data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * dfdx(xx[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const bool rec = detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(a.shape(), rec, tape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (rec) {
    auto ag = a.grad_ptr(); auto bg = b.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      if (ag) for (int64_t i = 0; i < n; ++i) (*ag)[i] += g[i];
      if (bg) for (int64_t i = 0; i < n; ++i) (*bg)[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const bool rec = detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(a.shape(), rec, tape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (rec) {
    auto ag = a.grad_ptr(); auto bg = b.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      if (ag) for (int64_t i = 0; i < n; ++i) (*ag)[i] += g[i];
      if (bg) for (int64_t i = 0; i < n; ++i) (*bg)[i] -= g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const bool rec = detail::recording(tape, {a.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(a.shape(), rec, tape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (rec) {
    auto ad = a.data_ptr(); auto ag = a.grad_ptr();
    auto bd = b.data_ptr(); auto bg = b.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      if (ag) for (int64_t i = 0; i < n; ++i) (*ag)[i] += g[i] * (*bd)[i];
      if (bg) for (int64_t i = 0; i < n; ++i) (*bg)[i] += g[i] * (*ad)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s, Tape<T>* tape = nullptr) {
  return detail::unary_op(x, tape, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c, Tape<T>* tape = nullptr) {
  return detail::unary_op(x, tape, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return detail::unary_op(x, tape, [](T v) { return std::exp(v); },
                          [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log_elem(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return detail::unary_op(x, tape, [](T v) { return std::log(v); },
                          [](T v) { return T(1) / v; });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto fwd = [](T v) {
    const double u = kC * (static_cast<double>(v) + kA * double(v) * double(v) * double(v));
    return static_cast<T>(0.5 * double(v) * (1.0 + std::tanh(u)));
  };
  auto bwd = [](T v) {
    const double d = static_cast<double>(v);
    const double u = kC * (d + kA * d * d * d);
    const double t = std::tanh(u);
    return static_cast<T>(0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * d * d));
  };
  return detail::unary_op(x, tape, fwd, bwd);
}

/// Forward copy that never propagates gradients.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone_values();
}

/// Forward takes the `hard` values; backward passes gradients to `soft`
/// unchanged (straight-through estimator).
template <typename T>
Tensor<T> straight_through(const Tensor<T>& soft, const std::vector<T>& hard,
                           Tape<T>* tape = nullptr) {
  if (static_cast<int64_t>(hard.size()) != soft.numel())
    throw ShapeError("straight_through: hard value count mismatch");
  const bool rec = detail::recording(tape, {soft.requires_grad()});
  Tensor<T> out = detail::op_output<T>(soft.shape(), rec, tape);
  std::copy(hard.begin(), hard.end(), out.data());
  if (rec) {
    auto sg = soft.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!sg) return;
      for (size_t i = 0; i < og->size(); ++i) (*sg)[i] += (*og)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers used by the transformer
// ---------------------------------------------------------------------------

/// x[..., n] + b[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (b.rank() != 1 || x.dim(-1) != b.dim(0))
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = b.dim(0);
  const int64_t rows = x.numel() / n;
  const bool rec = detail::recording(tape, {x.requires_grad(), b.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out.data()[r * n + j] = x.data()[r * n + j] + b.data()[j];
  if (rec) {
    auto xg = x.grad_ptr(); auto bg = b.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      if (xg) for (int64_t i = 0; i < rows * n; ++i) (*xg)[i] += g[i];
      if (bg)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < n; ++j) (*bg)[j] += g[r * n + j];
    });
  }
  return out;
}

/// Scales each trailing vector of x[..., R, C] by the matching entry of
/// r[..., R]: out[..., i, :] = x[..., i, :] * r[..., i].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& r, Tape<T>* tape = nullptr) {
  if (x.rank() < 2 || r.numel() != x.numel() / x.dim(-1))
    throw ShapeError("scale_rows: " + shape_str(x.shape()) + " vs " + shape_str(r.shape()));
  const int64_t c = x.dim(-1);
  const int64_t rows = r.numel();
  const bool rec = detail::recording(tape, {x.requires_grad(), r.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  for (int64_t i = 0; i < rows; ++i) {
    const T s = r.data()[i];
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * s;
  }
  if (rec) {
    auto xd = x.data_ptr(); auto xg = x.grad_ptr();
    auto rd = r.data_ptr(); auto rg = r.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      for (int64_t i = 0; i < rows; ++i) {
        const T s = (*rd)[i];
        if (xg)
          for (int64_t j = 0; j < c; ++j) (*xg)[i * c + j] += g[i * c + j] * s;
        if (rg) {
          T acc = T(0);
          for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * (*xd)[i * c + j];
          (*rg)[i] += acc;
        }
      }
    });
  }
  return out;
}

/// Multiplies x by a scalar held in a learnable 1-element tensor.
template <typename T>
Tensor<T> scale_tensor(const Tensor<T>& x, const Tensor<T>& s, Tape<T>* tape = nullptr) {
  if (s.numel() != 1) throw ShapeError("scale_tensor: scalar tensor expected");
  const bool rec = detail::recording(tape, {x.requires_grad(), s.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  const T sv = s.data()[0];
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sv;
  if (rec) {
    auto xd = x.data_ptr(); auto xg = x.grad_ptr();
    auto sd = s.data_ptr(); auto sg = s.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      const T* g = og->data();
      if (xg) for (int64_t i = 0; i < n; ++i) (*xg)[i] += g[i] * (*sd)[0];
      if (sg) {
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += g[i] * (*xd)[i];
        (*sg)[0] += acc;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

/// Shared kernel for plain and decision-masked row softmax. `mask` may be
/// null. With a mask, rows follow the renormalization
///   y_ij = exp(a_ij) g_ij / sum_k exp(a_ik) g_ik,  g_ii = 1, g_ij = m_j,
/// which reduces bit-exactly to plain softmax when every m_j = 1.
template <typename T>
void masked_softmax_forward(const T* a, const T* mask, T* y, int64_t matrices, int64_t r,
                            int64_t s, int64_t mask_batches) {
  const int64_t per_batch = mask_batches > 0 ? matrices / mask_batches : 1;
  for (int64_t mi = 0; mi < matrices; ++mi) {
    const T* m = mask ? mask + (mi / per_batch) * s : nullptr;
    const T* am = a + mi * r * s;
    T* ym = y + mi * r * s;
    for (int64_t i = 0; i < r; ++i) {
      const T* row = am + i * s;
      T* yrow = ym + i * s;
      T mx = row[0];
      for (int64_t j = 1; j < s; ++j) mx = std::max(mx, row[j]);
      T denom = T(0);
      for (int64_t j = 0; j < s; ++j) {
        T e = std::exp(row[j] - mx);
        if (m) e *= (i == j ? T(1) : m[j]);
        yrow[j] = e;
        denom += e;
      }
      assert(denom > T(0));
      const T inv = T(1) / denom;
      for (int64_t j = 0; j < s; ++j) yrow[j] *= inv;
    }
  }
}

}  // namespace detail

/// Numerically stabilized softmax over the trailing dimension.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("softmax_rows: empty trailing dim");
  const int64_t s = x.dim(-1);
  const int64_t rows = x.numel() / s;
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  detail::masked_softmax_forward<T>(x.data(), nullptr, out.data(), rows, 1, s, 0);
  if (rec) {
    auto xg = x.grad_ptr(); auto od = out.data_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < rows; ++i) {
        const T* y = od->data() + i * s;
        const T* g = og->data() + i * s;
        T dot = T(0);
        for (int64_t j = 0; j < s; ++j) dot += g[j] * y[j];
        T* gx = xg->data() + i * s;
        for (int64_t j = 0; j < s; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

/// Decision-masked attention softmax over square trailing matrices.
/// a has shape [..., S, S]; keep has shape [B, S] (or [S]) where B divides
/// the number of stacked matrices. Diagonal entries are always kept, so a
/// dropped token still attends to itself but contributes to nobody else.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& a, const Tensor<T>& keep, Tape<T>* tape = nullptr) {
  if (a.rank() < 2 || a.dim(-1) != a.dim(-2))
    throw ShapeError("masked_softmax_rows: trailing dims must be square, got " +
                     shape_str(a.shape()));
  const int64_t s = a.dim(-1);
  const int64_t matrices = a.numel() / (s * s);
  if (keep.dim(-1) != s || matrices % (keep.numel() / s) != 0)
    throw ShapeError("masked_softmax_rows: mask " + shape_str(keep.shape()) +
                     " does not broadcast over " + shape_str(a.shape()));
  const int64_t mask_batches = keep.numel() / s;
  const int64_t per_batch = matrices / mask_batches;
  const bool rec = detail::recording(tape, {a.requires_grad(), keep.requires_grad()});
  Tensor<T> out = detail::op_output<T>(a.shape(), rec, tape);
  detail::masked_softmax_forward<T>(a.data(), keep.data(), out.data(), matrices, s, s,
                                    mask_batches);
  if (rec) {
    auto ad = a.data_ptr(); auto ag = a.grad_ptr();
    auto kd = keep.data_ptr(); auto kg = keep.grad_ptr();
    auto od = out.data_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      std::vector<T> eh(static_cast<size_t>(s));
      for (int64_t mi = 0; mi < matrices; ++mi) {
        const T* m = kd->data() + (mi / per_batch) * s;
        T* gm = kg ? kg->data() + (mi / per_batch) * s : nullptr;
        for (int64_t i = 0; i < s; ++i) {
          const int64_t base = mi * s * s + i * s;
          const T* arow = ad->data() + base;
          const T* y = od->data() + base;
          const T* g = og->data() + base;
          T dot = T(0);
          for (int64_t j = 0; j < s; ++j) dot += g[j] * y[j];
          if (ag) {
            T* gx = ag->data() + base;
            for (int64_t j = 0; j < s; ++j) gx[j] += y[j] * (g[j] - dot);
          }
          if (gm) {
            // d y_ij / d m_j = (exp(a_ij - M_i) / S_i) (delta_jk - y_ik);
            // recompute exp(a - M) / S from the stored outputs.
            T mx = arow[0];
            for (int64_t j = 1; j < s; ++j) mx = std::max(mx, arow[j]);
            T denom = T(0);
            for (int64_t j = 0; j < s; ++j) {
              eh[j] = std::exp(arow[j] - mx);
              denom += eh[j] * (i == j ? T(1) : m[j]);
            }
            const T inv = T(1) / denom;
            for (int64_t j = 0; j < s; ++j) {
              if (i == j) continue;
              gm[j] += eh[j] * inv * (g[j] - dot);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-trailing-slice standardization followed by affine gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                     Tape<T>* tape = nullptr) {
  if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
  const int64_t c = x.dim(-1);
  if (gain.numel() != c || bias.numel() != c)
    throw ShapeError("layer_norm: affine params " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " vs " + shape_str(x.shape()));
  const int64_t rows = x.numel() / c;
  const bool rec =
      detail::recording(tape, {x.requires_grad(), gain.requires_grad(), bias.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  // xhat retained for backward when recording
  std::shared_ptr<std::vector<T>> xhat, inv_std;
  if (rec) {
    xhat = std::make_shared<std::vector<T>>(x.numel());
    inv_std = std::make_shared<std::vector<T>>(rows);
  }
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = out.data() + r * c;
    T mean = T(0);
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mean) * inv;
      if (rec) (*xhat)[r * c + j] = h;
      yr[j] = gain.data()[j] * h + bias.data()[j];
    }
    if (rec) (*inv_std)[r] = inv;
  }
  if (rec) {
    auto xg = x.grad_ptr();
    auto gd = gain.data_ptr(); auto gg = gain.grad_ptr();
    auto bg = bias.grad_ptr();
    auto og = out.grad_ptr();
    tape->record([=]() {
      for (int64_t r = 0; r < rows; ++r) {
        const T* g = og->data() + r * c;
        const T* h = xhat->data() + r * c;
        if (gg)
          for (int64_t j = 0; j < c; ++j) (*gg)[j] += g[j] * h[j];
        if (bg)
          for (int64_t j = 0; j < c; ++j) (*bg)[j] += g[j];
        if (xg) {
          T sum_dh = T(0), sum_dh_h = T(0);
          for (int64_t j = 0; j < c; ++j) {
            const T dh = g[j] * (*gd)[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const T invc = T(1) / static_cast<T>(c);
          T* gx = xg->data() + r * c;
          for (int64_t j = 0; j < c; ++j) {
            const T dh = g[j] * (*gd)[j];
            gx[j] += (*inv_std)[r] * (dh - sum_dh * invc - h[j] * sum_dh_h * invc);
          }
        }
      }
    });
  }
  return out;
}

/// Running statistics of a batch-norm layer (updated in training mode).
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// 1-d batch normalization over x[B, C]. Training mode normalizes with batch
/// statistics and updates the running buffers; eval mode uses the buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training, T momentum = T(0.1),
                     T eps = T(1e-5), Tape<T>* tape = nullptr) {
  if (x.rank() != 2) throw ShapeError("batch_norm: expected [B,C], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c ||
      state.running_var.numel() != c)
    throw ShapeError("batch_norm: parameter size mismatch for " + shape_str(x.shape()));
  const bool rec =
      detail::recording(tape, {x.requires_grad(), gamma.requires_grad(), beta.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);

  std::vector<T> mean(c, T(0)), invstd(c, T(0));
  if (training) {
    for (int64_t j = 0; j < c; ++j) {
      T m = T(0);
      for (int64_t i = 0; i < b; ++i) m += x.data()[i * c + j];
      m /= static_cast<T>(b);
      T v = T(0);
      for (int64_t i = 0; i < b; ++i) {
        const T d = x.data()[i * c + j] - m;
        v += d * d;
      }
      v /= static_cast<T>(b);
      mean[j] = m;
      invstd[j] = T(1) / std::sqrt(v + eps);
      const T unbiased = b > 1 ? v * static_cast<T>(b) / static_cast<T>(b - 1) : v;
      state.running_mean.data()[j] = (T(1) - momentum) * state.running_mean.data()[j] + momentum * m;
      state.running_var.data()[j] =
          (T(1) - momentum) * state.running_var.data()[j] + momentum * unbiased;
    }
  } else {
    for (int64_t j = 0; j < c; ++j) {
      mean[j] = state.running_mean.data()[j];
      invstd[j] = T(1) / std::sqrt(state.running_var.data()[j] + eps);
    }
  }

  std::shared_ptr<std::vector<T>> xhat;
  if (rec) xhat = std::make_shared<std::vector<T>>(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      const T h = (x.data()[i * c + j] - mean[j]) * invstd[j];
      if (rec) (*xhat)[i * c + j] = h;
      out.data()[i * c + j] = gamma.data()[j] * h + beta.data()[j];
    }

  if (rec) {
    auto xg = x.grad_ptr();
    auto gd = gamma.data_ptr(); auto gg = gamma.grad_ptr();
    auto bgr = beta.grad_ptr();
    auto og = out.grad_ptr();
    auto inv = std::make_shared<std::vector<T>>(invstd);
    const bool batch_stats = training;
    tape->record([=]() {
      for (int64_t j = 0; j < c; ++j) {
        T sum_dh = T(0), sum_dh_h = T(0), sum_g = T(0), sum_g_h = T(0);
        for (int64_t i = 0; i < b; ++i) {
          const T g = (*og)[i * c + j];
          const T h = (*xhat)[i * c + j];
          const T dh = g * (*gd)[j];
          sum_dh += dh;
          sum_dh_h += dh * h;
          sum_g += g;
          sum_g_h += g * h;
        }
        if (gg) (*gg)[j] += sum_g_h;
        if (bgr) (*bgr)[j] += sum_g;
        if (xg) {
          const T invb = T(1) / static_cast<T>(b);
          for (int64_t i = 0; i < b; ++i) {
            const T g = (*og)[i * c + j];
            const T h = (*xhat)[i * c + j];
            const T dh = g * (*gd)[j];
            if (batch_stats)
              (*xg)[i * c + j] += (*inv)[j] * (dh - sum_dh * invb - h * sum_dh_h * invb);
            else
              (*xg)[i * c + j] += (*inv)[j] * dh;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>({1}, rec, tape);
  T acc = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    const int64_t n = x.numel();
    tape->record([=]() {
      if (!xg) return;
      const T g = (*og)[0];
      for (int64_t i = 0; i < n; ++i) (*xg)[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return scale(sum_all(x, tape), T(1) / static_cast<T>(x.numel()), tape);
}

/// Mean over the trailing dimension: [..., n] -> [...] (scalar becomes [1]).
template <typename T>
Tensor<T> mean_lastdim(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  const int64_t n = x.dim(-1);
  const int64_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>(std::move(out_shape), rec, tape);
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (int64_t j = 0; j < n; ++j) acc += x.data()[r * n + j];
    out.data()[r] = acc / static_cast<T>(n);
  }
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      const T invn = T(1) / static_cast<T>(n);
      for (int64_t r = 0; r < rows; ++r) {
        const T g = (*og)[r] * invn;
        for (int64_t j = 0; j < n; ++j) (*xg)[r * n + j] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token-sequence rearrangement
// ---------------------------------------------------------------------------

/// x[B, S, C] -> x[B, 1 + S, C] with `tok[C]` broadcast to position 0.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& tok, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || tok.numel() != x.dim(2))
    throw ShapeError("prepend_token: " + shape_str(x.shape()) + " vs " + shape_str(tok.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  const bool rec = detail::recording(tape, {x.requires_grad(), tok.requires_grad()});
  Tensor<T> out = detail::op_output<T>({b, s + 1, c}, rec, tape);
  for (int64_t i = 0; i < b; ++i) {
    std::copy(tok.data(), tok.data() + c, out.data() + i * (s + 1) * c);
    std::copy(x.data() + i * s * c, x.data() + (i + 1) * s * c, out.data() + i * (s + 1) * c + c);
  }
  if (rec) {
    auto xg = x.grad_ptr(); auto tg = tok.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      for (int64_t i = 0; i < b; ++i) {
        const T* g = og->data() + i * (s + 1) * c;
        if (tg)
          for (int64_t j = 0; j < c; ++j) (*tg)[j] += g[j];
        if (xg)
          for (int64_t j = 0; j < s * c; ++j) (*xg)[i * s * c + j] += g[c + j];
      }
    });
  }
  return out;
}

/// x[B, S, C] + pos[S, C] broadcast over the batch.
template <typename T>
Tensor<T> add_pos(const Tensor<T>& x, const Tensor<T>& pos, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || pos.rank() != 2 || pos.dim(0) != x.dim(1) || pos.dim(1) != x.dim(2))
    throw ShapeError("add_pos: " + shape_str(x.shape()) + " vs " + shape_str(pos.shape()));
  const int64_t b = x.dim(0), sc = x.dim(1) * x.dim(2);
  const bool rec = detail::recording(tape, {x.requires_grad(), pos.requires_grad()});
  Tensor<T> out = detail::op_output<T>(x.shape(), rec, tape);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < sc; ++j) out.data()[i * sc + j] = x.data()[i * sc + j] + pos.data()[j];
  if (rec) {
    auto xg = x.grad_ptr(); auto pg = pos.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      for (int64_t i = 0; i < b; ++i) {
        const T* g = og->data() + i * sc;
        if (xg)
          for (int64_t j = 0; j < sc; ++j) (*xg)[i * sc + j] += g[j];
        if (pg)
          for (int64_t j = 0; j < sc; ++j) (*pg)[j] += g[j];
      }
    });
  }
  return out;
}

/// Extracts token `index` from x[B, S, C] -> [B, C].
template <typename T>
Tensor<T> select_token(const Tensor<T>& x, int64_t index, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || index < 0 || index >= x.dim(1))
    throw ShapeError("select_token: index " + std::to_string(index) + " in " +
                     shape_str(x.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>({b, c}, rec, tape);
  for (int64_t i = 0; i < b; ++i)
    std::copy(x.data() + (i * s + index) * c, x.data() + (i * s + index + 1) * c,
              out.data() + i * c);
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < c; ++j) (*xg)[(i * s + index) * c + j] += (*og)[i * c + j];
    });
  }
  return out;
}

/// Token range [from, to) of x[B, S, C] -> [B, to-from, C].
template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, int64_t from, int64_t to, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || from < 0 || to > x.dim(1) || from >= to)
    throw ShapeError("slice_tokens: [" + std::to_string(from) + "," + std::to_string(to) +
                     ") of " + shape_str(x.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2), k = to - from;
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>({b, k, c}, rec, tape);
  for (int64_t i = 0; i < b; ++i)
    std::copy(x.data() + (i * s + from) * c, x.data() + (i * s + to) * c, out.data() + i * k * c);
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < k * c; ++j)
          (*xg)[(i * s + from) * c + j] += (*og)[i * k * c + j];
    });
  }
  return out;
}

/// Fixed-index selection over the trailing dimension: [..., k] -> [...].
template <typename T>
Tensor<T> select_lastdim(const Tensor<T>& x, int64_t index, Tape<T>* tape = nullptr) {
  const int64_t k = x.dim(-1);
  if (index < 0 || index >= k) throw ShapeError("select_lastdim: bad index");
  const int64_t rows = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>(std::move(out_shape), rec, tape);
  for (int64_t r = 0; r < rows; ++r) out.data()[r] = x.data()[r * k + index];
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t r = 0; r < rows; ++r) (*xg)[r * k + index] += (*og)[r];
    });
  }
  return out;
}

/// [B, S, C] -> [B, H, S, C/H]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || x.dim(2) % heads != 0)
    throw ShapeError("split_heads: " + shape_str(x.shape()) + " into " + std::to_string(heads));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2), dh = c / heads;
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>({b, heads, s, dh}, rec, tape);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t t = 0; t < s; ++t)
      for (int64_t h = 0; h < heads; ++h)
        std::copy(x.data() + ((i * s + t) * c + h * dh), x.data() + ((i * s + t) * c + (h + 1) * dh),
                  out.data() + (((i * heads + h) * s + t) * dh));
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t t = 0; t < s; ++t)
          for (int64_t h = 0; h < heads; ++h)
            for (int64_t j = 0; j < dh; ++j)
              (*xg)[(i * s + t) * c + h * dh + j] += (*og)[((i * heads + h) * s + t) * dh + j];
    });
  }
  return out;
}

/// [B, H, S, Dh] -> [B, S, H*Dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  if (x.rank() != 4) throw ShapeError("merge_heads: expected rank 4, got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), dh = x.dim(3), c = heads * dh;
  const bool rec = detail::recording(tape, {x.requires_grad()});
  Tensor<T> out = detail::op_output<T>({b, s, c}, rec, tape);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < s; ++t)
        std::copy(x.data() + ((i * heads + h) * s + t) * dh,
                  x.data() + ((i * heads + h) * s + t + 1) * dh,
                  out.data() + (i * s + t) * c + h * dh);
  if (rec) {
    auto xg = x.grad_ptr(); auto og = out.grad_ptr();
    tape->record([=]() {
      if (!xg) return;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t t = 0; t < s; ++t)
            for (int64_t j = 0; j < dh; ++j)
              (*xg)[((i * heads + h) * s + t) * dh + j] += (*og)[(i * s + t) * c + h * dh + j];
    });
  }
  return out;
}

/// Gathers tokens by per-batch index lists: x[B, S, C] -> [B, K, C].
/// Inference-path data movement; not differentiable.
template <typename T>
Tensor<T> gather_tokens(const Tensor<T>& x, const std::vector<std::vector<int64_t>>& idx) {
  if (x.rank() != 3 || static_cast<int64_t>(idx.size()) != x.dim(0))
    throw ShapeError("gather_tokens: index list count vs " + shape_str(x.shape()));
  const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  const int64_t k = static_cast<int64_t>(idx[0].size());
  for (const auto& v : idx)
    if (static_cast<int64_t>(v.size()) != k)
      throw ShapeError("gather_tokens: ragged index lists");
  Tensor<T> out = Tensor<T>::zeros({b, k, c});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < k; ++j) {
      const int64_t t = idx[static_cast<size_t>(i)][static_cast<size_t>(j)];
      assert(t >= 0 && t < s);
      std::copy(x.data() + (i * s + t) * c, x.data() + (i * s + t + 1) * c,
                out.data() + (i * k + j) * c);
    }
  return out;
}

}  // namespace sureid
