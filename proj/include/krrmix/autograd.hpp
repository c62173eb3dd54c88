#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "krrmix/linalg.hpp"
#include "krrmix/tensor.hpp"

// Define-by-run reverse mode: every op evaluates eagerly and appends one node
// to the tape; backward walks the tape in reverse applying the single rule
// registered for each primitive.
namespace krrmix::autograd {

enum class Primitive {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  ScalarMul,
  MaskedSoftmax,
  Sigmoid,
  Exp,
  Softplus,
  Gelu,
  L2NormalizeRows,
  SolveGeneral,
  SolveLowerTriangular,
  Reshape,
  Permute,
  ReduceSum,
  GatherRows,
  CrossEntropy,
  LayerNorm,
  ConcatLast,
  RowOuter,
  Rope,
};

std::string_view primitive_name(Primitive p);

/// Primitives that carry a backward rule (everything but Leaf/Constant).
const std::vector<Primitive>& differentiable_primitives();

using NodeId = std::size_t;

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Op parameters and values saved for the backward pass.
template <typename T>
struct Attrs {
  T scalar = 0;
  bool trans_a = false;
  bool trans_b = false;
  std::vector<std::size_t> ints;
  std::optional<linalg::Mask> mask;
  std::shared_ptr<const linalg::LuFactors<T>> lu;
  std::vector<std::int32_t> ids;
  std::vector<T> weights;
  Tensor<T> saved;
  Tensor<T> saved2;
};

template <typename T>
struct Node {
  Primitive op = Primitive::Constant;
  std::vector<NodeId> inputs;
  Tensor<T> value;
  bool requires_grad = false;
  Attrs<T> attrs;
};

/// Gradients of leaves reachable from the loss, indexed by node id.
template <typename T>
class GradMap {
 public:
  GradMap() = default;
  explicit GradMap(std::vector<Tensor<T>> grads) : grads_(std::move(grads)) {}

  bool has(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }
  bool has(Var<T> v) const { return has(v.id); }
  const Tensor<T>& operator[](NodeId id) const;
  const Tensor<T>& operator[](Var<T> v) const { return (*this)[v.id]; }
  /// Gradient or zeros of `shape` for unreached leaves.
  Tensor<T> get_or_zeros(Var<T> v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<T>> grads_;
};

/// Deliberate corruption of one rule; lets the check suite prove it can fail.
enum class Fault { None, SolveBackward };

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value);
  Var<T> constant(Tensor<T> value);
  Var<T> record(Primitive op, std::vector<NodeId> inputs, Tensor<T> value,
                Attrs<T> attrs = {});

  const Node<T>& node(NodeId id) const { return nodes_.at(id); }
  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar loss. Read-only over the tape, so calling it
  /// twice yields identical results. Throws NonScalarLoss.
  GradMap<T> backward(Var<T> loss) const;

  void inject_fault(Fault f) { fault_ = f; }
  Fault fault() const { return fault_; }

 private:
  std::vector<Node<T>> nodes_;
  Fault fault_ = Fault::None;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// --- differentiable ops -----------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);
template <typename T>
Var<T> transpose(Var<T> a);
/// Elementwise with numpy-style broadcasting (shapes aligned from the right).
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
template <typename T>
Var<T> masked_softmax(Var<T> scores, const std::optional<linalg::Mask>& mask);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> softplus(Var<T> a);
/// tanh approximation, as in GPT-2.
template <typename T>
Var<T> gelu(Var<T> a);
template <typename T>
Var<T> l2_normalize_rows(Var<T> a);
template <typename T>
Var<T> solve_general(Var<T> a, Var<T> b);
template <typename T>
Var<T> solve_lower_triangular(Var<T> l, Var<T> b);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm);
template <typename T>
Var<T> reduce_sum(Var<T> a);
/// Rows of `table` [V, D] selected by ids -> [ids.size(), D].
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::int32_t> ids);
/// Weighted mean next-token cross-entropy over rows of logits [M, V].
/// Throws TargetOutOfRange.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::int32_t> targets,
                     std::vector<T> weights);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta);
template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b);
/// Per-row outer product: [..., p] x [..., q] -> [..., p*q].
template <typename T>
Var<T> row_outer(Var<T> a, Var<T> b);
/// Rotary position encoding over the [N, d] trailing axes.
template <typename T>
Var<T> rope(Var<T> a);

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

// --- tensor helpers shared with the rules -----------------------------------

/// Broadcast result shape; throws ShapeMismatch when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Sums `grad` down to `target` (the inverse of broadcasting).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& grad, const Shape& target);

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& a, const std::vector<std::size_t>& perm);

}  // namespace krrmix::autograd
