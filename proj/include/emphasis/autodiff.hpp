#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation of one forward pass in creation order. Nodes
// are either leaves (constants, tape-owned variables, or references to
// external parameter tensors) or results of an op carrying a backward rule.
// backward() walks the tape once in reverse and, for leaves, adds the
// gradient into the owning Tensor's grad buffer, so repeated passes
// accumulate.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emphasis/tensor.hpp"

namespace emphasis::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(std::span<double> s, std::size_t rows, std::size_t cols) {
  assert(s.size() == rows * cols);
  return MatMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

class Tape;

// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  inline const Tensor& value() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, std::size_t self)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  // Tape-owned leaf that receives gradients.
  Var variable(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.owned.set_requires_grad(true);
    n.requires_grad = true;
    n.leaf = true;
    return push(std::move(n));
  }

  // Leaf referencing an external tensor; it must outlive the tape. Gradients
  // reach param.grad() only if param.requires_grad() is set.
  Var param(Tensor& param) {
    Node n;
    n.external = &param;
    n.requires_grad = param.requires_grad();
    n.leaf = n.requires_grad;
    return push(std::move(n));
  }

  // Records an op result. The node requires grad iff any input does; the
  // backward rule is dropped otherwise.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    for (const Var& in : inputs) {
      check_owned(in);
      n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  const Tensor& value(Var v) const {
    check_owned(v);
    return value(v.id_);
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node during backward; empty when the node does not
  // require grad. Allocated on first touch.
  std::span<double> grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad_view.empty()) {
      if (n.leaf && direct_) {
        n.grad_view = (n.external ? *n.external : n.owned).ensure_grad();
      } else {
        n.grad.assign(value(id).size(), 0.0);
        n.grad_view = n.grad;
      }
    }
    return n.grad_view;
  }

  // Gradient of the last backward pass w.r.t. an intermediate node, or the
  // accumulated gradient of a leaf tensor.
  std::span<const double> grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id_];
    if (n.leaf) return value(v.id_).grad();
    return n.grad_view;
  }

  // Fills gradients of every leaf reachable from loss. With flush=false the
  // leaf gradients stay on the tape until flush_param_grads() is called,
  // which lets a trainer fold per-sentence tapes into shared parameters in a
  // fixed order.
  void backward(Var loss, bool flush = true) {
    if (loss.tape_ != this || loss.id_ >= nodes_.size()) {
      throw ContractError("backward: loss is not recorded on this tape");
    }
    if (value(loss.id_).size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(value(loss.id_).shape()));
    }
    for (Node& n : nodes_) {
      n.grad.clear();
      n.grad_view = {};
    }
    if (!nodes_[loss.id_].requires_grad) return;
    // With an immediate flush, leaves accumulate straight into their tensors.
    direct_ = flush;
    grad(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad_view.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    pending_flush_ = !flush;
  }

  void flush_param_grads() {
    if (!pending_flush_) return;
    for (Node& n : nodes_) {
      if (!n.leaf || n.grad.empty()) continue;
      Tensor& target = n.external ? *n.external : n.owned;
      auto dst = target.ensure_grad();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
    pending_flush_ = false;
  }

 private:
  struct Node {
    Tensor owned;
    Tensor* external = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    Buffer grad;
    std::span<double> grad_view;  // n.grad, or the leaf tensor's own buffer
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool pending_flush_ = false;
  bool direct_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline Tensor make_matrix(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Shared shape for elementwise results: keeps the left operand's shape.
template <typename Fwd, typename Dfn>
Var unary(Var x, Fwd fwd, Dfn dydx_from_xy) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  auto xd = xv.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, dydx_from_xy](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    auto gy = t.grad(self);
    auto xs = t.value(xi).data();
    auto ys = t.value(self).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dydx_from_xy(xs[i], ys[i]);
  });
}

}  // namespace detail

// a[n x k] * b[k x m]
inline Var matmul(Var a, Var b) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Tensor out = detail::make_matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ai);
    const Tensor& B = t.value(bi);
    auto dC = as_mat(t.grad(self), A.rows(), B.cols());
    if (auto ga = t.grad(ai); !ga.empty()) as_mat(ga, A.rows(), A.cols()).noalias() += dC * as_mat(B).transpose();
    if (auto gb = t.grad(bi); !gb.empty()) as_mat(gb, B.rows(), B.cols()).noalias() += as_mat(A).transpose() * dC;
  });
}

inline Var transpose(Var x) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out = detail::make_matrix(xv.cols(), xv.rows());
  as_mat(out) = as_mat(xv).transpose();
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    const Tensor& X = t.value(xi);
    as_mat(gx, X.rows(), X.cols()) += as_mat(t.grad(self), X.cols(), X.rows()).transpose();
  });
}

// Elementwise sum. The right operand may also be a single row matching the
// left operand's width (bias broadcast); nothing else broadcasts.
inline Var add(Var a, Var b) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool broadcast = bv.rows() == 1 && av.rows() != 1 && bv.cols() == av.cols();
  if (!broadcast) detail::require_same_shape("add", av, bv);
  Tensor out(av.shape());
  auto od = out.data();
  auto ad = av.data();
  auto bd = bv.data();
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[broadcast ? i % cols : i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi, broadcast, cols](Tape& t, std::size_t self) {
    auto gy = t.grad(self);
    if (auto ga = t.grad(ai); !ga.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (auto gb = t.grad(bi); !gb.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) gb[broadcast ? i % cols : i] += gy[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape("sub", av, bv);
  Tensor out(av.shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = av[i] - bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    auto gy = t.grad(self);
    if (auto ga = t.grad(ai); !ga.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (auto gb = t.grad(bi); !gb.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape("mul", av, bv);
  Tensor out(av.shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    auto gy = t.grad(self);
    const Tensor& A = t.value(ai);
    const Tensor& B = t.value(bi);
    if (auto ga = t.grad(ai); !ga.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * B[i];
    }
    if (auto gb = t.grad(bi); !gb.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * A[i];
    }
  });
}

inline Var scale(Var x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// Concatenation along the last axis.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& tape = *parts.front().tape();
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().value().shape()) + " vs " +
                           shape_str(v.shape()));
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor out = detail::make_matrix(rows, total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    as_mat(out).middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(widths[k])) =
        as_mat(parts[k].value());
    offset += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return tape.record(std::move(out), parts, [ids, widths, rows, total](Tape& t, std::size_t self) {
    auto gy = as_mat(t.grad(self), rows, total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (auto g = t.grad(ids[k]); !g.empty()) {
        as_mat(g, rows, widths[k]) +=
            gy.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(widths[k]));
      }
      offset += widths[k];
    }
  });
}

// Stacks inputs vertically; all must share the column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& tape = *parts.front().tape();
  const std::size_t cols = parts.front().value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().value().shape()) + " vs " +
                           shape_str(p.value().shape()));
    }
    total += p.value().rows();
  }
  Tensor out = detail::make_matrix(total, cols);
  auto od = out.data();
  std::size_t offset = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    auto src = p.value().data();
    std::copy(src.begin(), src.end(), od.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
    ids.push_back(p.id());
  }
  return tape.record(std::move(out), parts, [ids](Tape& t, std::size_t self) {
    auto gy = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t len = t.value(id).size();
      if (auto g = t.grad(id); !g.empty()) {
        for (std::size_t i = 0; i < len; ++i) g[i] += gy[offset + i];
      }
      offset += len;
    }
  });
}

// out[i] = x[indices[i]]; the embedding lookup. Backward scatter-adds.
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  if (indices.empty()) throw ContractError("gather_rows: empty index list");
  for (auto idx : indices) {
    if (idx >= xv.rows()) {
      throw ContractError("gather_rows: index " + std::to_string(idx) + " out of range for " +
                          shape_str(xv.shape()));
    }
  }
  const std::size_t cols = xv.cols();
  Tensor out = detail::make_matrix(indices.size(), cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = xv.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, indices = std::move(indices), cols](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    auto gy = t.grad(self);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (std::size_t c = 0; c < cols; ++c) gx[indices[i] * cols + c] += gy[i * cols + c];
    }
  });
}

// Columns [begin, end).
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols(), width = end - begin;
  Tensor out = detail::make_matrix(rows, width);
  as_mat(out) = as_mat(xv).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(width));
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, rows, cols, begin, width](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    as_mat(gx, rows, cols).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(width)) +=
        as_mat(t.grad(self), rows, width);
  });
}

namespace detail {

inline void softmax_backward(std::span<const double> y, std::span<const double> gy, std::span<double> gx) {
  double dot = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c) dot += gy[c] * y[c];
  for (std::size_t c = 0; c < y.size(); ++c) gx[c] += y[c] * (gy[c] - dot);
}

}  // namespace detail

// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var x) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, cols](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    const Tensor& y = t.value(self);
    auto gy = t.grad(self);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      detail::softmax_backward(y.row(r), gy.subspan(r * cols, cols), gx.subspan(r * cols, cols));
    }
  });
}

// Softmax of row i restricted to the columns in allowed[i]; every other entry
// of the output is exactly zero.
inline Var masked_softmax_rows(Var x, std::vector<std::vector<std::size_t>> allowed) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  if (allowed.size() != xv.rows()) {
    throw DimensionError("masked_softmax_rows: mask has " + std::to_string(allowed.size()) + " rows, input " +
                         shape_str(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto& idx = allowed[r];
    if (idx.empty()) throw ContractError("masked_softmax_rows: row " + std::to_string(r) + " has an empty mask");
    double mx = -std::numeric_limits<double>::infinity();
    for (auto c : idx) {
      if (c >= cols) throw ContractError("masked_softmax_rows: mask column out of range");
      mx = std::max(mx, xv(r, c));
    }
    double z = 0.0;
    for (auto c : idx) z += (out(r, c) = std::exp(xv(r, c) - mx));
    for (auto c : idx) out(r, c) /= z;
  }
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {x}, [xi, cols, allowed = std::move(allowed)](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    const Tensor& y = t.value(self);
    auto gy = t.grad(self);
    for (std::size_t r = 0; r < allowed.size(); ++r) {
      double dot = 0.0;
      for (auto c : allowed[r]) dot += gy[r * cols + c] * y(r, c);
      for (auto c : allowed[r]) gx[r * cols + c] += y(r, c) * (gy[r * cols + c] - dot);
    }
  });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

// Derivative at exactly zero is the negative-side slope.
inline Var leaky_relu(Var x, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw ContractError("leaky_relu: slope must lie in [0,1)");
  return detail::unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

struct Activation {
  enum class Kind { sigmoid, tanh, leaky_relu };
  Kind kind = Kind::sigmoid;
  double slope = 0.0;
};

inline Var activate(Var x, Activation a) {
  switch (a.kind) {
    case Activation::Kind::sigmoid:
      return sigmoid(x);
    case Activation::Kind::tanh:
      return tanh(x);
    case Activation::Kind::leaky_relu:
      return leaky_relu(x, a.slope);
  }
  throw ContractError("activate: unknown kind");
}

// Elementwise natural log; input must be strictly positive.
inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw ContractError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var sum(Var x) {
  Tape& tape = *x.tape();
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id();
  return tape.record(Tensor::scalar(s), {x}, [xi](Tape& t, std::size_t self) {
    auto gx = t.grad(xi);
    if (gx.empty()) return;
    const double g = t.grad(self)[0];
    for (double& v : gx) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

}  // namespace emphasis::ad
