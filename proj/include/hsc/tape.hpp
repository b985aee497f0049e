#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsc/tensor.hpp"

namespace hsc {

// Learnable tensor with a persistent gradient accumulator. Gradients are
// summed across backward passes until the optimizer clears them.
template <typename R>
struct ParameterT {
  std::string name;
  TensorT<R> value;
  TensorT<R> grad;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<R> v) : name(std::move(n)), value(std::move(v)) {
    grad = TensorT<R>::zeros(value.shape);
  }

  void zero_grad() {
    for (auto& g : grad.data) g = R(0);
  }
};

using Parameter = ParameterT<float>;

template <typename R>
struct NodeT;

template <typename R>
using VarT = std::shared_ptr<NodeT<R>>;

// One value in the computation graph. `backward_fn` reads this node's grad
// and accumulates into the parents' grads; it is only installed while a tape
// is active and some parent requires gradients.
template <typename R>
struct NodeT {
  TensorT<R> value;
  TensorT<R> grad;  // empty until first accumulation
  bool needs_grad = false;
  ParameterT<R>* param = nullptr;
  std::vector<VarT<R>> parents;
  std::function<void(NodeT<R>&)> backward_fn;

  TensorT<R>& ensure_grad() {
    if (grad.data.empty()) grad = TensorT<R>::zeros(value.shape);
    return grad;
  }
  bool has_grad() const { return !grad.data.empty(); }
};

// Define-by-run tape. Nodes are appended in execution order, which is a
// topological order by construction, so one reverse sweep visits every node
// after all of its consumers.
template <typename R>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT*& current() {
    thread_local TapeT* active = nullptr;
    return active;
  }

  void record(const VarT<R>& n) {
    if (consumed_)
      throw std::runtime_error("tape: recording after backward; start a new forward pass");
    nodes_.push_back(n);
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1, sweeps the tape in reverse, then flushes leaf
  // gradients into their Parameters and drops all intermediates.
  void backward(const VarT<R>& loss) {
    if (consumed_ || nodes_.empty())
      throw std::runtime_error("tape: backward on a stale tape; run a new forward pass first");
    if (!loss || loss->value.numel() != 1)
      throw std::invalid_argument("tape: backward requires a scalar loss node");
    loss->ensure_grad().data[0] = R(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      NodeT<R>& n = **it;
      if (n.backward_fn && n.has_grad()) n.backward_fn(n);
    }
    for (auto& n : nodes_) {
      if (n->param && n->has_grad()) {
        auto& pg = n->param->grad.data;
        const auto& ng = n->grad.data;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += ng[i];
      }
    }
    nodes_.clear();
    consumed_ = true;
  }

  struct Scope {
    explicit Scope(TapeT& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

 private:
  std::vector<VarT<R>> nodes_;
  bool consumed_ = false;
};

using Tape = TapeT<float>;
using Var = VarT<float>;

// Constant / input leaf. Pass needs_grad=true to collect d(loss)/d(input)
// on the returned node (used by the finite-difference harness).
template <typename R>
VarT<R> make_leaf(TensorT<R> v, bool needs_grad = false) {
  auto n = std::make_shared<NodeT<R>>();
  n->value = std::move(v);
  auto* tape = TapeT<R>::current();
  if (tape && needs_grad) {
    n->needs_grad = true;
    tape->record(n);
  }
  return n;
}

// Parameter leaf. The value is snapshotted for this forward pass; gradients
// flow back into the Parameter when the tape is swept.
template <typename R>
VarT<R> use_param(ParameterT<R>& p) {
  auto n = std::make_shared<NodeT<R>>();
  n->value = p.value;
  auto* tape = TapeT<R>::current();
  if (tape) {
    n->needs_grad = true;
    n->param = &p;
    tape->record(n);
  }
  return n;
}

// Builds an op node: when a tape is active and some parent needs gradients,
// the node joins the graph with `fn` as its backward rule; otherwise it is a
// bare value and the parents are released immediately.
template <typename R, typename F>
VarT<R> make_op(TensorT<R> value, std::vector<VarT<R>> parents, F&& fn) {
  auto n = std::make_shared<NodeT<R>>();
  n->value = std::move(value);
  auto* tape = TapeT<R>::current();
  bool ng = false;
  for (const auto& p : parents) ng = ng || (p && p->needs_grad);
  if (tape && ng) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::forward<F>(fn);
    tape->record(n);
  }
  return n;
}

template <typename R>
inline void accumulate(TensorT<R>& dst, const std::vector<R>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst.data[i] += src[i];
}

}  // namespace hsc
