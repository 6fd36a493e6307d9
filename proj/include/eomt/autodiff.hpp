// Reverse-mode differentiation over a per-forward-pass tape of primitive ops.
//
// Ops execute eagerly on Tensor values. When an operand is attached to a tape
// (a watched leaf or the result of a recorded op), the op appends a node with
// a backward closure. Tape::backward sweeps the record once in reverse
// execution order; leaf gradients accumulate across calls until zeroed.
#pragma once

#include "eomt/tensor.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace eomt {

template <typename S>
class Tape;

namespace detail {

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated on first contribution
  bool is_leaf = false;
  Tape<S>* tape = nullptr;
  std::function<void(const Tensor<S>&)> backprop;
  std::vector<std::shared_ptr<Node>> parents;

  bool has_grad() const { return grad.numel() != 0; }
  void accumulate(const Tensor<S>& g) {
    if (!has_grad()) grad = Tensor<S>(value.shape());
    S* dst = grad.data();
    const S* src = g.data();
    for (std::int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
  }
};

}  // namespace detail

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> v) : n_(std::make_shared<detail::Node<S>>()) {
    n_->value = std::move(v);
  }

  bool defined() const { return n_ != nullptr; }
  bool tracked() const { return n_ && n_->tape != nullptr; }

  const Tensor<S>& value() const { return n_->value; }
  Tensor<S>& value() { return n_->value; }  // parameter updates between passes
  const Tensor<S>& grad() const { return n_->grad; }
  bool has_grad() const { return n_ && n_->has_grad(); }
  void zero_grad() {
    if (n_ && n_->has_grad()) n_->grad.fill(S(0));
  }

  const Shape& shape() const { return n_->value.shape(); }
  int dim(int i) const { return n_->value.dim(i); }
  std::int64_t numel() const { return n_ ? n_->value.numel() : 0; }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<detail::Node<S>> n_;
};

template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { detach_all(); }

  // Mark a leaf whose gradient should be produced by backward().
  void watch(Var<S>& v) {
    check(v.defined(), "watch: undefined variable");
    auto n = v.node();
    if (n->tape == this) return;
    check(n->tape == nullptr, "variable is already attached to another tape");
    n->tape = this;
    n->is_leaf = true;
    leaves_.push_back(n);
  }

  std::size_t num_recorded() const { return ops_.size(); }

  // Populates d(loss)/d(leaf) on every watched leaf. Repeat calls accumulate.
  void backward(const Var<S>& loss) {
    check(loss.defined() && loss.numel() == 1, "backward requires a scalar loss");
    check(loss.node()->tape == this, "loss is not recorded on this tape");
    loss.node()->accumulate(Tensor<S>(loss.value().shape(), S(1)));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      detail::Node<S>& n = **it;
      if (!n.has_grad()) continue;  // not on a path to the loss
      if (n.backprop) n.backprop(n.grad);
      n.grad = Tensor<S>();  // drop intermediate grads; leaves keep theirs
    }
  }

  void record(std::shared_ptr<detail::Node<S>> n) { ops_.push_back(std::move(n)); }

 private:
  void detach_all() {
    for (auto& n : ops_) n->tape = nullptr;
    for (auto& n : leaves_) n->tape = nullptr;
  }

  std::vector<std::shared_ptr<detail::Node<S>>> ops_;
  std::vector<std::shared_ptr<detail::Node<S>>> leaves_;
};

namespace detail {

template <typename S>
Tape<S>* merged_tape(const std::vector<const Var<S>*>& ins) {
  Tape<S>* tape = nullptr;
  for (const Var<S>* v : ins) {
    if (!v->defined() || !v->tracked()) continue;
    Tape<S>* t = v->node()->tape;
    check(tape == nullptr || tape == t, "operands are recorded on different tapes");
    tape = t;
  }
  return tape;
}

template <typename S, typename BW>
Var<S> make_op(Tensor<S> value, const std::vector<const Var<S>*>& ins, BW&& bw) {
  Tape<S>* tape = merged_tape<S>(ins);
  Var<S> out(std::move(value));
  if (!tape) return out;
  auto n = out.node();
  n->tape = tape;
  for (const Var<S>* v : ins)
    if (v->defined()) n->parents.push_back(v->node());
  n->backprop = std::forward<BW>(bw);
  tape->record(n);
  return out;
}

}  // namespace detail

// ---- elementwise ----

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check(a.value().same_shape(b.value()), "add: shape mismatch " +
                                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() + b.value().flat();
  auto an = a.node(), bn = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::make_op<S>(std::move(out), {&a, &b}, [an, bn, ta, tb](const Tensor<S>& g) {
    if (ta) an->accumulate(g);
    if (tb) bn->accumulate(g);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() - b.value().flat();
  auto an = a.node(), bn = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::make_op<S>(std::move(out), {&a, &b}, [an, bn, ta, tb](const Tensor<S>& g) {
    if (ta) an->accumulate(g);
    if (tb) {
      Tensor<S> ng(g.shape());
      ng.flat() = -g.flat();
      bn->accumulate(ng);
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() * b.value().flat();
  auto an = a.node(), bn = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::make_op<S>(std::move(out), {&a, &b}, [an, bn, ta, tb](const Tensor<S>& g) {
    Tensor<S> gg(g.shape());
    if (ta) {
      gg.flat() = g.flat() * bn->value.flat();
      an->accumulate(gg);
    }
    if (tb) {
      gg.flat() = g.flat() * an->value.flat();
      bn->accumulate(gg);
    }
  });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  check(a.value().same_shape(b.value()), "div: shape mismatch");
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() / b.value().flat();
  auto an = a.node(), bn = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::make_op<S>(std::move(out), {&a, &b}, [an, bn, ta, tb](const Tensor<S>& g) {
    Tensor<S> gg(g.shape());
    if (ta) {
      gg.flat() = g.flat() / bn->value.flat();
      an->accumulate(gg);
    }
    if (tb) {
      gg.flat() = -g.flat() * an->value.flat() / (bn->value.flat() * bn->value.flat());
      bn->accumulate(gg);
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() * c;
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta, c](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(g.shape());
    gg.flat() = g.flat() * c;
    an->accumulate(gg);
  });
}

template <typename S>
Var<S> add_const(const Var<S>& a, S c) {
  Tensor<S> out(a.shape());
  out.flat() = a.value().flat() + c;
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta](const Tensor<S>& g) {
    if (ta) an->accumulate(g);
  });
}

// ---- linear algebra ----

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  check(a.value().rank() == 2 && b.value().rank() == 2, "matmul: rank-2 operands required");
  check(a.dim(1) == b.dim(0), "matmul: inner extents differ, " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  Tensor<S> out(Shape{a.dim(0), b.dim(1)});
  out.mat().noalias() = a.value().mat() * b.value().mat();
  auto an = a.node(), bn = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return detail::make_op<S>(std::move(out), {&a, &b}, [an, bn, ta, tb](const Tensor<S>& g) {
    if (ta) {
      Tensor<S> ga(an->value.shape());
      ga.mat().noalias() = g.mat() * bn->value.mat().transpose();
      an->accumulate(ga);
    }
    if (tb) {
      Tensor<S> gb(bn->value.shape());
      gb.mat().noalias() = an->value.mat().transpose() * g.mat();
      bn->accumulate(gb);
    }
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  check(a.value().rank() == 2, "transpose: rank-2 required");
  Tensor<S> out(Shape{a.dim(1), a.dim(0)});
  out.mat() = a.value().mat().transpose();
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    gg.mat() = g.mat().transpose();
    an->accumulate(gg);
  });
}

// row-broadcast bias add: [R x C] + [C]
template <typename S>
Var<S> add_rowvec(const Var<S>& a, const Var<S>& v) {
  check(a.value().rank() == 2 && v.value().rank() == 1, "add_rowvec: [RxC] + [C] required");
  check(a.dim(1) == v.dim(0), "add_rowvec: width mismatch");
  const int r = a.dim(0), c = a.dim(1);
  Tensor<S> out(a.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = a.value().at(i, j) + v.value()[j];
  auto an = a.node(), vn = v.node();
  bool ta = a.tracked(), tv = v.tracked();
  return detail::make_op<S>(std::move(out), {&a, &v}, [an, vn, ta, tv, r, c](const Tensor<S>& g) {
    if (ta) an->accumulate(g);
    if (tv) {
      Tensor<S> gv(vn->value.shape());
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gv[j] += g.at(i, j);
      vn->accumulate(gv);
    }
  });
}

// ---- structure ----

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> out = a.value().reshaped(std::move(shape));
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta](const Tensor<S>& g) {
    if (ta) an->accumulate(g.reshaped(an->value.shape()));
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& a, int r0, int r1) {
  check(a.value().rank() == 2, "slice_rows: rank-2 required");
  check(0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice_rows: bad range");
  const int c = a.dim(1);
  Tensor<S> out(Shape{r1 - r0, c});
  out.mat() = a.value().mat().middleRows(r0, r1 - r0);
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta, r0, r1](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    gg.mat().middleRows(r0, r1 - r0) = g.mat();
    an->accumulate(gg);
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, int c0, int c1) {
  check(a.value().rank() == 2, "slice_cols: rank-2 required");
  check(0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols: bad range");
  Tensor<S> out(Shape{a.dim(0), c1 - c0});
  out.mat() = a.value().mat().middleCols(c0, c1 - c0);
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta, c0, c1](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    gg.mat().middleCols(c0, c1 - c0) = g.mat();
    an->accumulate(gg);
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  check(!parts.empty(), "concat_rows: empty input");
  const int c = parts[0].dim(1);
  int r = 0;
  for (const auto& p : parts) {
    check(p.value().rank() == 2 && p.dim(1) == c, "concat_rows: column mismatch");
    r += p.dim(0);
  }
  Tensor<S> out(Shape{r, c});
  int row = 0;
  std::vector<const Var<S>*> ins;
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  std::vector<char> tracked;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    out.mat().middleRows(row, p.dim(0)) = p.value().mat();
    ins.push_back(&p);
    nodes.push_back(p.node());
    tracked.push_back(p.tracked() ? 1 : 0);
    offsets.push_back(row);
    row += p.dim(0);
  }
  return detail::make_op<S>(std::move(out), ins,
                            [nodes, tracked, offsets](const Tensor<S>& g) {
                              for (std::size_t i = 0; i < nodes.size(); ++i) {
                                if (!tracked[i]) continue;
                                const int n = nodes[i]->value.dim(0);
                                Tensor<S> gg(nodes[i]->value.shape());
                                gg.mat() = g.mat().middleRows(offsets[i], n);
                                nodes[i]->accumulate(gg);
                              }
                            });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  const int r = parts[0].dim(0);
  int c = 0;
  for (const auto& p : parts) {
    check(p.value().rank() == 2 && p.dim(0) == r, "concat_cols: row mismatch");
    c += p.dim(1);
  }
  Tensor<S> out(Shape{r, c});
  int col = 0;
  std::vector<const Var<S>*> ins;
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  std::vector<char> tracked;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    out.mat().middleCols(col, p.dim(1)) = p.value().mat();
    ins.push_back(&p);
    nodes.push_back(p.node());
    tracked.push_back(p.tracked() ? 1 : 0);
    offsets.push_back(col);
    col += p.dim(1);
  }
  return detail::make_op<S>(std::move(out), ins,
                            [nodes, tracked, offsets](const Tensor<S>& g) {
                              for (std::size_t i = 0; i < nodes.size(); ++i) {
                                if (!tracked[i]) continue;
                                const int n = nodes[i]->value.dim(1);
                                Tensor<S> gg(nodes[i]->value.shape());
                                gg.mat() = g.mat().middleCols(offsets[i], n);
                                nodes[i]->accumulate(gg);
                              }
                            });
}

// ---- reductions ----

template <typename S>
Var<S> sum(const Var<S>& a) {
  S acc = S(0);
  const S* p = a.value().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(Tensor<S>::scalar(acc), {&a}, [an, ta](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape(), g[0]);
    an->accumulate(gg);
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

}  // namespace eomt
