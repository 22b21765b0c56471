#pragma once

#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "avfuse/tensor.hpp"

namespace avfuse {

template <typename Scalar>
class Tape;

// Handle into a tape. Cheap to copy; owns nothing.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  Index id = -1;

  const Tensor<Scalar>& value() const;
  const Tensor<Scalar>& grad() const;
};

// Reverse-mode gradient tape. Records one op per node; backward() walks the
// record once in reverse. Values are computed with the same kernels used by
// the trace-based forward pass, so both paths agree bit for bit.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  // Registers an input tensor. Its requires_grad flag decides whether the
  // tape accumulates a gradient for it.
  Var<Scalar> leaf(Tensor<Scalar> value) {
    const bool rg = value.requires_grad;
    return push(std::move(value), rg, {});
  }

  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw ContractError("backward: loss var belongs to a different tape");
    if (backward_done_) throw ContractError("backward: already run; call reset() first");
    Node& top = node(loss.id);
    if (top.value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(top.value.shape()));
    }
    backward_done_ = true;
    top.grad[0] = Scalar(1);
    for (Index i = loss.id; i >= 0; --i) {
      Node& n = node(i);
      if (n.requires_grad && n.backprop) n.backprop();
    }
  }

  // Zeroes every accumulated gradient and re-arms backward().
  void reset() {
    for (auto& n : nodes_) {
      if (n.grad.size() > 0) n.grad.flat().setZero();
    }
    backward_done_ = false;
  }

  const Tensor<Scalar>& value(Var<Scalar> v) const { return node_at(v).value; }
  const Tensor<Scalar>& grad(Var<Scalar> v) const { return node_at(v).grad; }
  bool requires_grad(Var<Scalar> v) const { return node_at(v).requires_grad; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // -- op plumbing; used by the free-function ops below ----------------------

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, std::function<void()> backprop) {
    Node n;
    n.grad = Tensor<Scalar>(value.shape());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<Index>(nodes_.size() - 1)};
  }

  void set_backprop(Var<Scalar> v, std::function<void()> fn) { node(v.id).backprop = std::move(fn); }

  Tensor<Scalar>& grad_mut(Var<Scalar> v) { return node(v.id).grad; }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  Node& node(Index id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(Index id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node_at(Var<Scalar> v) const {
    if (v.tape != this || v.id < 0 || v.id >= size()) throw ContractError("var does not belong to this tape");
    return node(v.id);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape->value(*this);
}
template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::grad() const {
  return tape->grad(*this);
}

namespace detail {
template <typename Scalar>
Tape<Scalar>& op_tape(std::initializer_list<Var<Scalar>> vs, const char* op) {
  Tape<Scalar>* t = nullptr;
  for (const auto& v : vs) {
    if (v.tape == nullptr || v.id < 0) throw ContractError(std::string(op) + ": null operand");
    if (t == nullptr) t = v.tape;
    if (v.tape != t) throw ContractError(std::string(op) + ": operands from different tapes");
  }
  return *t;
}
}  // namespace detail

// ---- ops -------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a, b}, "matmul");
  const bool ra = t.requires_grad(a), rb = t.requires_grad(b);
  Var<Scalar> out = t.push(matmul_value(t.value(a), t.value(b)), ra || rb, {});
  if (ra || rb) {
    t.set_backprop(out, [&t, a, b, out, ra, rb] {
      const auto dc = t.grad(out).matrix();
      if (ra) t.grad_mut(a).matrix().noalias() += dc * t.value(b).matrix().transpose();
      if (rb) t.grad_mut(b).matrix().noalias() += t.value(a).matrix().transpose() * dc;
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "transpose");
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(transpose_value(t.value(a)), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out] { t.grad_mut(a).matrix() += t.grad(out).matrix().transpose(); });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a, b}, "add");
  const bool ra = t.requires_grad(a), rb = t.requires_grad(b);
  Var<Scalar> out = t.push(add_value(t.value(a), t.value(b)), ra || rb, {});
  if (ra || rb) {
    t.set_backprop(out, [&t, a, b, out, ra, rb] {
      const auto& dc = t.grad(out);
      if (ra) t.grad_mut(a).flat() += dc.flat();
      if (rb) t.grad_mut(b).flat() += dc.flat();
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar alpha) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "scale");
  Tensor<Scalar> c(t.value(a).shape());
  c.flat() = t.value(a).flat() * alpha;
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(std::move(c), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out, alpha] { t.grad_mut(a).flat() += t.grad(out).flat() * alpha; });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a, b}, "hadamard");
  require_same_shape(t.value(a), t.value(b), "hadamard");
  Tensor<Scalar> c(t.value(a).shape());
  c.flat() = t.value(a).flat() * t.value(b).flat();
  const bool ra = t.requires_grad(a), rb = t.requires_grad(b);
  Var<Scalar> out = t.push(std::move(c), ra || rb, {});
  if (ra || rb) {
    t.set_backprop(out, [&t, a, b, out, ra, rb] {
      const auto& dc = t.grad(out);
      if (ra) t.grad_mut(a).flat() += dc.flat() * t.value(b).flat();
      if (rb) t.grad_mut(b).flat() += dc.flat() * t.value(a).flat();
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> add_bias_rows(Var<Scalar> a, Var<Scalar> bias) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a, bias}, "add_bias_rows");
  const bool ra = t.requires_grad(a), rb = t.requires_grad(bias);
  Var<Scalar> out = t.push(add_bias_rows_value(t.value(a), t.value(bias)), ra || rb, {});
  if (ra || rb) {
    t.set_backprop(out, [&t, a, bias, out, ra, rb] {
      const auto& dc = t.grad(out);
      if (ra) t.grad_mut(a).flat() += dc.flat();
      if (rb) t.grad_mut(bias).flat() += dc.matrix().colwise().sum().transpose().array();
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "softmax_rows");
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(softmax_rows_value(t.value(a)), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out] {
      const auto y = t.value(out).matrix();
      const auto dy = t.grad(out).matrix();
      auto dx = t.grad_mut(a).matrix();
      for (Index r = 0; r < y.rows(); ++r) {
        const Scalar dot = (dy.row(r).array() * y.row(r).array()).sum();
        dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
      }
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                            Scalar eps = Scalar(1e-5)) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({x, gain, bias}, "layer_norm_rows");
  Tensor<Scalar> xhat, istd;
  Tensor<Scalar> y = layer_norm_rows_value(t.value(x), t.value(gain), t.value(bias), eps, &xhat, &istd);
  const bool rx = t.requires_grad(x), rg = t.requires_grad(gain), rb = t.requires_grad(bias);
  Var<Scalar> out = t.push(std::move(y), rx || rg || rb, {});
  if (rx || rg || rb) {
    t.set_backprop(out, [&t, x, gain, bias, out, rx, rg, rb, xhat = std::move(xhat),
                         istd = std::move(istd)] {
      const auto dy = t.grad(out).matrix();
      const auto xh = xhat.matrix();
      const Index n = dy.rows(), d = dy.cols();
      if (rg) t.grad_mut(gain).flat() += (dy.array() * xh.array()).colwise().sum().transpose();
      if (rb) t.grad_mut(bias).flat() += dy.colwise().sum().transpose().array();
      if (rx) {
        const auto g = t.value(gain).flat();
        auto dx = t.grad_mut(x).matrix();
        for (Index r = 0; r < n; ++r) {
          Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat = dy.row(r).array() * g.transpose();
          const Scalar m1 = dxhat.mean();
          const Scalar m2 = (dxhat * xh.row(r).array()).mean();
          dx.row(r).array() += istd[r] * (dxhat - m1 - xh.row(r).array() * m2);
        }
        (void)d;
      }
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "gelu");
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(gelu_value(t.value(a)), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out] {
      const auto& x = t.value(a);
      const auto& dy = t.grad(out);
      auto& dx = t.grad_mut(a);
      for (Index i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_grad_scalar(x[i]);
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "mean_rows");
  const bool ra = t.requires_grad(a);
  const Index n = t.value(a).rows();
  Var<Scalar> out = t.push(mean_rows_value(t.value(a)), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out, n] {
      const auto dc = t.grad(out).matrix();
      auto da = t.grad_mut(a).matrix();
      da.array().rowwise() += dc.row(0).array() / Scalar(n);
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "sum");
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(Tensor<Scalar>::scalar(t.value(a).flat().sum()), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out] { t.grad_mut(a).flat() += t.grad(out)[0]; });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Index first, Index width) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({a}, "slice_cols");
  const Tensor<Scalar>& av = t.value(a);
  if (av.rank() != 2 || first < 0 || width <= 0 || first + width > av.cols()) {
    throw ContractError("slice_cols: [" + std::to_string(first) + ", " +
                        std::to_string(first + width) + ") out of range for " + shape_str(av.shape()));
  }
  Tensor<Scalar> c({av.rows(), width});
  c.matrix() = av.matrix().middleCols(first, width);
  const bool ra = t.requires_grad(a);
  Var<Scalar> out = t.push(std::move(c), ra, {});
  if (ra) {
    t.set_backprop(out, [&t, a, out, first, width] {
      t.grad_mut(a).matrix().middleCols(first, width) += t.grad(out).matrix();
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape<Scalar>* tp = parts[0].tape;
  Index rows = -1, total = 0;
  bool any_rg = false;
  for (const auto& p : parts) {
    detail::op_tape<Scalar>({p}, "concat_cols");
    if (p.tape != tp) throw ContractError("concat_cols: operands from different tapes");
    const Tensor<Scalar>& v = tp->value(p);
    if (v.rank() != 2) throw ContractError("concat_cols: rank-2 required, got " + shape_str(v.shape()));
    if (rows < 0) rows = v.rows();
    if (v.rows() != rows) throw ContractError("concat_cols: row counts differ");
    total += v.cols();
    any_rg = any_rg || tp->requires_grad(p);
  }
  Tensor<Scalar> c({rows, total});
  Index off = 0;
  for (const auto& p : parts) {
    const Tensor<Scalar>& v = tp->value(p);
    c.matrix().middleCols(off, v.cols()) = v.matrix();
    off += v.cols();
  }
  Var<Scalar> out = tp->push(std::move(c), any_rg, {});
  if (any_rg) {
    tp->set_backprop(out, [tp, parts, out] {
      const auto dc = tp->grad(out).matrix();
      Index o = 0;
      for (const auto& p : parts) {
        const Index w = tp->value(p).cols();
        if (tp->requires_grad(p)) tp->grad_mut(p).matrix() += dc.middleCols(o, w);
        o += w;
      }
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  return concat_cols(std::vector<Var<Scalar>>{a, b});
}

// Scalar loss: -log softmax(logits)[label], for a single logit row.
template <typename Scalar>
Var<Scalar> cross_entropy_logits(Var<Scalar> logits, Index label) {
  Tape<Scalar>& t = detail::op_tape<Scalar>({logits}, "cross_entropy_logits");
  Tensor<Scalar> probs;
  const Scalar loss = cross_entropy_value(t.value(logits), label, &probs);
  const bool rl = t.requires_grad(logits);
  Var<Scalar> out = t.push(Tensor<Scalar>::scalar(loss), rl, {});
  if (rl) {
    t.set_backprop(out, [&t, logits, out, label, probs = std::move(probs)] {
      const Scalar dl = t.grad(out)[0];
      auto dx = t.grad_mut(logits).flat();
      dx += dl * probs.flat();
      dx[label] -= dl;
    });
  }
  return out;
}

}  // namespace avfuse
