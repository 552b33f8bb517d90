#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "prw/tensor.hpp"

namespace prw {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; invalid after Tape::clear().
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

// Ordered record of operations for reverse-mode differentiation. Node i's inputs
// always have ids < i, so a reverse sweep over the node list is a valid
// topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives gradients.
  Var constant(Tensor t) { return push("constant", {}, std::move(t), false, nullptr, {}); }

  // Leaf bound to an external parameter. When t.requires_grad is set, backward()
  // accumulates into t.grad.
  Var param(Tensor& t) {
    Tensor copy(t.shape, t.data);
    return push("param", {}, std::move(copy), t.requires_grad, t.requires_grad ? &t : nullptr, {});
  }

  // Leaf owned by the tape; its gradient is read back with grad().
  Var input(Tensor t, bool requires_grad = true) {
    return push("input", {}, std::move(t), requires_grad, nullptr, {});
  }

  Var record(const char* op, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
    return push(op, std::move(inputs), std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  void check(const Var& v) const {
    if (v.tape_ != this) throw TapeError("var belongs to a different tape");
    if (v.generation_ != generation_ || v.id_ >= nodes_.size()) {
      throw TapeError("dangling node: tape was cleared or mutated after the forward pass");
    }
  }

  const Tensor& value(const Var& v) const {
    check(v);
    return nodes_[v.id_].value;
  }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient slot of a node, allocated on first use.
  std::vector<double>& grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  // Reverse sweep from `out`. Node gradients are reset first; bound parameter
  // gradients accumulate across calls.
  void backward(const Var& out, const Tensor& seed) {
    check(out);
    const auto& ov = nodes_[out.id_].value;
    if (seed.shape != ov.shape) {
      throw ShapeError("backward: seed shape " + shape_str(seed.shape) + " != output shape " +
                       shape_str(ov.shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    grad_slot(out.id_) = seed.data;
    for (std::size_t i = out.id_ + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.bound) {
        auto& g = n.bound->ensure_grad();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

  void backward(const Var& scalar_out) {
    check(scalar_out);
    if (nodes_[scalar_out.id_].value.size() != 1) {
      throw ShapeError("backward: implicit seed requires a scalar output, got " +
                       shape_str(nodes_[scalar_out.id_].value.shape));
    }
    backward(scalar_out, Tensor(nodes_[scalar_out.id_].value.shape, 1.0));
  }

  // Gradient of the last backward() w.r.t. v (zeros when v was not reached).
  Tensor grad(const Var& v) const {
    check(v);
    const auto& n = nodes_[v.id_];
    Tensor g(n.value.shape, 0.0);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

  void clear() {
    nodes_.clear();
    ++generation_;
  }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    const char* op = "";
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* bound = nullptr;
    BackwardFn backward;
  };

  Var push(const char* op, std::vector<std::size_t> inputs, Tensor value, bool needs, Tensor* bound,
           BackwardFn fn) {
    if (!value.all_finite()) {
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "' with shape " +
                           shape_str(value.shape));
    }
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.needs_grad = needs;
    n.bound = bound;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1, generation_);
  }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw TapeError("use of an empty Var");
  return tape_->value(*this);
}

// Differentiable kernels. All operate on 2D row-major tensors unless stated;
// a rank-1 tensor is treated as a single row.
namespace ad {

namespace detail {

inline Tape& same_tape(std::initializer_list<const Var*> vs) {
  Tape* t = nullptr;
  for (auto* v : vs) {
    if (!v->valid()) throw TapeError("use of an empty Var");
    if (t && v->tape() != t) throw TapeError("operands recorded on different tapes");
    t = v->tape();
    t->check(*v);
  }
  return *t;
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline bool is_matrix(const Shape& s) { return s.size() == 2; }

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

}  // namespace detail

// (m x k) @ (k x n)
inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({&a, &b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!detail::is_matrix(A.shape) || !detail::is_matrix(B.shape) || A.shape[1] != B.shape[0]) {
    detail::shape_fail("matmul", A.shape, B.shape);
  }
  const auto m = static_cast<Eigen::Index>(A.shape[0]), k = static_cast<Eigen::Index>(A.shape[1]),
             n = static_cast<Eigen::Index>(B.shape[1]);
  Tensor C({A.shape[0], B.shape[1]});
  if (m > 0 && n > 0) {
    if (k > 0) {
      detail::MatMap(C.data.data(), m, n).noalias() =
          detail::ConstMatMap(A.data.data(), m, k) * detail::ConstMatMap(B.data.data(), k, n);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", {ia, ib}, std::move(C), [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    if (m == 0 || n == 0 || k == 0) return;
    detail::ConstMatMap G(tp.grad_slot(self).data(), m, n);
    if (tp.needs_grad(ia)) {
      detail::MatMap(tp.grad_slot(ia).data(), m, k).noalias() +=
          G * detail::ConstMatMap(tp.value(ib).data.data(), k, n).transpose();
    }
    if (tp.needs_grad(ib)) {
      detail::MatMap(tp.grad_slot(ib).data(), k, n).noalias() +=
          detail::ConstMatMap(tp.value(ia).data.data(), m, k).transpose() * G;
    }
  });
}

namespace detail {

template <class Fwd, class DA, class DB>
Var binary_same_shape(const char* op, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  Tape& t = same_tape({&a, &b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape) shape_fail(op, A.shape, B.shape);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = fwd(A.data[i], B.data[i]);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(op, {ia, ib}, std::move(C), [ia, ib, da, db](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    const auto& Av = tp.value(ia).data;
    const auto& Bv = tp.value(ib).data;
    if (tp.needs_grad(ia)) {
      auto& g = tp.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * da(Av[i], Bv[i]);
    }
    if (tp.needs_grad(ib)) {
      auto& g = tp.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * db(Av[i], Bv[i]);
    }
  });
}

template <class Fwd, class Deriv>
Var unary(const char* op, const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = same_tape({&a});
  const Tensor& A = a.value();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = fwd(A.data[i]);
  const std::size_t ia = a.id();
  return t.record(op, {ia}, std::move(C), [ia, deriv](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    const auto& Av = tp.value(ia).data;
    const auto& Cv = tp.value(self).data;
    auto& g = tp.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * deriv(Av[i], Cv[i]);
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// ln(1 + e^z), evaluated without overflow.
inline double softplus_value(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid_value(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var softplus(const Var& a) {
  return detail::unary(
      "softplus", a, [](double z) { return softplus_value(z); },
      [](double z, double) { return sigmoid_value(z); });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      "tanh", a, [](double z) { return std::tanh(z); }, [](double, double y) { return 1.0 - y * y; });
}

// Subgradient at zero is 0.
inline Var abs(const Var& a) {
  return detail::unary(
      "abs", a, [](double z) { return std::fabs(z); },
      [](double z, double) { return z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0); });
}

// Row-wise softmax over the last axis.
inline Var softmax_rows(const Var& a) {
  Tape& t = detail::same_tape({&a});
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  const std::size_t m = n == 0 ? 0 : A.size() / n;
  Tensor C(A.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A.data[i * n];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(row[j] - mx);
      C.data[i * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] /= s;
  }
  const std::size_t ia = a.id();
  return t.record("softmax", {ia}, std::move(C), [ia, m, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    const auto& Y = tp.value(self).data;
    auto& g = tp.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += G[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += Y[i * n + j] * (G[i * n + j] - dot);
    }
  });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::same_tape({&a});
  const Tensor& A = a.value();
  if (!detail::is_matrix(A.shape)) throw ShapeError("transpose: expected a matrix, got " + shape_str(A.shape));
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor C({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[j * m + i] = A.data[i * n + j];
  const std::size_t ia = a.id();
  return t.record("transpose", {ia}, std::move(C), [ia, m, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    auto& g = tp.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += G[j * m + i];
  });
}

// Stack matrices with equal column counts (axis 0). Empty segments are allowed.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = detail::same_tape({&parts.front()});
  const std::size_t n = parts.front().value().shape.at(1);
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    detail::same_tape({&parts.front(), &p});
    const auto& s = p.value().shape;
    if (!detail::is_matrix(s) || s[1] != n) detail::shape_fail("concat_rows", parts.front().shape(), s);
    ids.push_back(p.id());
    offsets.push_back(total);
    total += s[0];
  }
  Tensor C({total, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().data;
    std::copy(src.begin(), src.end(), C.data.begin() + static_cast<std::ptrdiff_t>(offsets[k] * n));
  }
  return t.record("concat_rows", ids, std::move(C), [ids, offsets, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      auto& g = tp.grad_slot(ids[k]);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += G[offsets[k] * n + j];
    }
  });
}

// Join matrices with equal row counts (axis 1).
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = detail::same_tape({&parts.front()});
  const std::size_t m = parts.front().value().shape.at(0);
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    detail::same_tape({&parts.front(), &p});
    const auto& s = p.value().shape;
    if (!detail::is_matrix(s) || s[0] != m) detail::shape_fail("concat_cols", parts.front().shape(), s);
    ids.push_back(p.id());
    offsets.push_back(total);
    widths.push_back(s[1]);
    total += s[1];
  }
  Tensor C({m, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().data;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) C.data[i * total + offsets[k] + j] = src[i * widths[k] + j];
  }
  return t.record("concat_cols", ids, std::move(C),
                  [ids, offsets, widths, m, total](Tape& tp, std::size_t self) {
                    const auto& G = tp.grad_slot(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!tp.needs_grad(ids[k])) continue;
                      auto& g = tp.grad_slot(ids[k]);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                          g[i * widths[k] + j] += G[i * total + offsets[k] + j];
                    }
                  });
}

// Rows [begin, end).
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = detail::same_tape({&a});
  const Tensor& A = a.value();
  if (!detail::is_matrix(A.shape) || begin > end || end > A.shape[0]) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(A.shape));
  }
  const std::size_t n = A.shape[1];
  Tensor C({end - begin, n});
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(begin * n),
            A.data.begin() + static_cast<std::ptrdiff_t>(end * n), C.data.begin());
  const std::size_t ia = a.id();
  return t.record("slice_rows", {ia}, std::move(C), [ia, begin, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    auto& g = tp.grad_slot(ia);
    for (std::size_t j = 0; j < G.size(); ++j) g[begin * n + j] += G[j];
  });
}

// Columns [begin, end).
inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = detail::same_tape({&a});
  const Tensor& A = a.value();
  if (!detail::is_matrix(A.shape) || begin > end || end > A.shape[1]) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(A.shape));
  }
  const std::size_t m = A.shape[0], n = A.shape[1], w = end - begin;
  Tensor C({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) C.data[i * w + j] = A.data[i * n + begin + j];
  const std::size_t ia = a.id();
  return t.record("slice_cols", {ia}, std::move(C), [ia, begin, m, n, w](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    auto& g = tp.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += G[i * w + j];
  });
}

// (m x n) + (1 x n) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape({&a, &row});
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (!detail::is_matrix(A.shape) || R.size() != A.shape[1]) detail::shape_fail("add_row", A.shape, R.shape);
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor C = Tensor(A.shape, A.data);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] += R.data[j];
  const std::size_t ia = a.id(), ir = row.id();
  return t.record("add_row", {ia, ir}, std::move(C), [ia, ir, m, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    if (tp.needs_grad(ia)) {
      auto& g = tp.grad_slot(ia);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += G[j];
    }
    if (tp.needs_grad(ir)) {
      auto& g = tp.grad_slot(ir);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j];
    }
  });
}

// Multiply row i of (m x n) by s[i], with s of shape (m x 1).
inline Var scale_rows(const Var& a, const Var& s) {
  Tape& t = detail::same_tape({&a, &s});
  const Tensor& A = a.value();
  const Tensor& S = s.value();
  if (!detail::is_matrix(A.shape) || S.size() != A.shape[0]) detail::shape_fail("scale_rows", A.shape, S.shape);
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor C(A.shape);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] = A.data[i * n + j] * S.data[i];
  const std::size_t ia = a.id(), is = s.id();
  return t.record("scale_rows", {ia, is}, std::move(C), [ia, is, m, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    const auto& Av = tp.value(ia).data;
    const auto& Sv = tp.value(is).data;
    if (tp.needs_grad(ia)) {
      auto& g = tp.grad_slot(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += G[i * n + j] * Sv[i];
    }
    if (tp.needs_grad(is)) {
      auto& g = tp.grad_slot(is);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Av[i * n + j];
        g[i] += acc;
      }
    }
  });
}

// out[i] = a[i, index[i]], shape (m x 1). The indices are constants of the backward pass.
inline Var pick_per_row(const Var& a, std::vector<std::size_t> index) {
  Tape& t = detail::same_tape({&a});
  const Tensor& A = a.value();
  if (!detail::is_matrix(A.shape) || index.size() != A.shape[0]) {
    throw ShapeError("pick_per_row: " + std::to_string(index.size()) + " indices for " + shape_str(A.shape));
  }
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor C({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw ShapeError("pick_per_row: index out of range");
    C.data[i] = A.data[i * n + index[i]];
  }
  const std::size_t ia = a.id();
  return t.record("pick_per_row", {ia}, std::move(C), [ia, index, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    auto& g = tp.grad_slot(ia);
    for (std::size_t i = 0; i < index.size(); ++i) g[i * n + index[i]] += G[i];
  });
}

// Row lookup into an embedding table: out[i] = table[ids[i]].
inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  Tape& t = detail::same_tape({&table});
  const Tensor& T = table.value();
  if (!detail::is_matrix(T.shape)) throw ShapeError("gather_rows: expected a matrix, got " + shape_str(T.shape));
  const std::size_t n = T.shape[1];
  Tensor C({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= T.shape[0]) throw ShapeError("gather_rows: id out of range");
    std::copy_n(&T.data[ids[i] * n], n, &C.data[i * n]);
  }
  const std::size_t it = table.id();
  return t.record("gather_rows", {it}, std::move(C), [it, ids, n](Tape& tp, std::size_t self) {
    const auto& G = tp.grad_slot(self);
    auto& g = tp.grad_slot(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[ids[i] * n + j] += G[i * n + j];
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::same_tape({&a});
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return t.record("sum", {ia}, Tensor({1, 1}, std::vector<double>{s}), [ia](Tape& tp, std::size_t self) {
    const double G = tp.grad_slot(self)[0];
    auto& g = tp.grad_slot(ia);
    for (auto& v : g) v += G;
  });
}

inline Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// Mean squared error over all elements.
inline Var mse(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({&a, &b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape) detail::shape_fail("mse", A.shape, B.shape);
  if (A.size() == 0) throw ShapeError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double d = A.data[i] - B.data[i];
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(A.size());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mse", {ia, ib}, Tensor({1, 1}, std::vector<double>{s * inv}),
                  [ia, ib, inv](Tape& tp, std::size_t self) {
                    const double G = tp.grad_slot(self)[0];
                    const auto& Av = tp.value(ia).data;
                    const auto& Bv = tp.value(ib).data;
                    if (tp.needs_grad(ia)) {
                      auto& g = tp.grad_slot(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G * 2.0 * inv * (Av[i] - Bv[i]);
                    }
                    if (tp.needs_grad(ib)) {
                      auto& g = tp.grad_slot(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= G * 2.0 * inv * (Av[i] - Bv[i]);
                    }
                  });
}

// Multi-head scaled dot-product attention. q: (Lq x d), k, v: (Lk x d).
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads) {
  const auto d = q.cols();
  if (n_heads == 0 || d % n_heads != 0 || k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: head-dimension mismatch (q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()) + ", heads " +
                     std::to_string(n_heads) + ")");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    Var qh = n_heads == 1 ? q : slice_cols(q, hd * dh, (hd + 1) * dh);
    Var kh = n_heads == 1 ? k : slice_cols(k, hd * dh, (hd + 1) * dh);
    Var vh = n_heads == 1 ? v : slice_cols(v, hd * dh, (hd + 1) * dh);
    Var p = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(p, vh));
  }
  return n_heads == 1 ? heads.front() : concat_cols(heads);
}

}  // namespace ad
}  // namespace prw
