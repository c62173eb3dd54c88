#include "krrmix/autograd.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "krrmix/rope.hpp"

namespace krrmix::autograd {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw ShapeMismatch("variable is not attached to a tape");
  return *a.tape;
}

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ShapeMismatch("variables live on different tapes");
  return tape_of(a);
}

// Left-pads a shape with ones to rank 4 and returns row-major strides, with 0
// on every broadcast axis.
struct Padded {
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  std::array<std::size_t, 4> strides{0, 0, 0, 0};
};

Padded pad(const Shape& s, const std::array<std::size_t, 4>& out_dims) {
  Padded p;
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) p.dims[off + i] = s[i];
  std::size_t stride = 1;
  for (std::size_t i = 4; i-- > 0;) {
    p.strides[i] = (p.dims[i] == 1 && out_dims[i] != 1) ? 0 : stride;
    stride *= p.dims[i];
  }
  return p;
}

std::array<std::size_t, 4> padded_dims(const Shape& s) {
  std::array<std::size_t, 4> d{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) d[off + i] = s[i];
  return d;
}

template <typename T, typename F>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  const auto od = padded_dims(shape);
  const Padded pa = pad(a.shape(), od);
  const Padded pb = pad(b.shape(), od);
  Tensor<T> out(shape);
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < od[0]; ++i0)
    for (std::size_t i1 = 0; i1 < od[1]; ++i1)
      for (std::size_t i2 = 0; i2 < od[2]; ++i2)
        for (std::size_t i3 = 0; i3 < od[3]; ++i3) {
          const std::size_t ia = i0 * pa.strides[0] + i1 * pa.strides[1] +
                                 i2 * pa.strides[2] + i3 * pa.strides[3];
          const std::size_t ib = i0 * pb.strides[0] + i1 * pb.strides[1] +
                                 i2 * pb.strides[2] + i3 * pb.strides[3];
          out[o++] = f(a[ia], b[ib]);
        }
  return out;
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T>
Tensor<T> sum_leading(const Tensor<T>& t, std::size_t keep_rank) {
  if (t.rank() == keep_rank) return t;
  Shape shape(t.shape().end() - static_cast<std::ptrdiff_t>(keep_rank), t.shape().end());
  Tensor<T> out(shape);
  const std::size_t inner = out.size();
  for (std::size_t i = 0; i < t.size(); ++i) out[i % inner] += t[i];
  return out;
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  if (acc.shape() != g.shape()) {
    throw ShapeMismatch("gradient shape " + shape_str(g.shape()) + " vs " +
                        shape_str(acc.shape()));
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

template <typename T>
T gelu_value(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
T softplus_value(T x) {
  // log(1 + e^x) without overflow.
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Keeps only the lower triangle (diagonal included) of every slice.
template <typename T>
Tensor<T> tril(Tensor<T> t) {
  const std::size_t n = t.dim(-1);
  const std::size_t slices = t.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) t[s * n * n + i * n + j] = T(0);
  return t;
}

// The one backward rule per primitive. Returns one gradient per input; an
// empty tensor where the input does not need one.
template <typename T>
std::vector<Tensor<T>> backward_rule(const Tape<T>& tape, const Node<T>& node,
                                     const Tensor<T>& g) {
  const auto in = [&](std::size_t k) -> const Tensor<T>& {
    return tape.value(node.inputs[k]);
  };
  const auto needs = [&](std::size_t k) { return tape.node(node.inputs[k]).requires_grad; };
  const Attrs<T>& at = node.attrs;
  const Tensor<T>& y = node.value;
  std::vector<Tensor<T>> out(node.inputs.size());

  switch (node.op) {
    case Primitive::Leaf:
    case Primitive::Constant:
      break;

    case Primitive::MatMul: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const bool ta = at.trans_a;
      const bool tb = at.trans_b;
      if (needs(0)) {
        if (!ta) {
          out[0] = tb ? linalg::matmul(g, b) : linalg::matmul(g, b, false, true);
        } else {
          out[0] = linalg::transpose(tb ? linalg::matmul(g, b)
                                        : linalg::matmul(g, b, false, true));
        }
      }
      if (needs(1)) {
        Tensor<T> db;
        if (!ta && !tb) db = linalg::matmul(a, g, true, false);
        if (!ta && tb) db = linalg::matmul(g, a, true, false);
        if (ta && !tb) db = linalg::matmul(a, g);
        if (ta && tb) db = linalg::matmul(g, a, true, true);
        out[1] = sum_leading(db, b.rank());
      }
      break;
    }

    case Primitive::Transpose:
      out[0] = linalg::transpose(g);
      break;

    case Primitive::Add:
      if (needs(0)) out[0] = reduce_to(g, in(0).shape());
      if (needs(1)) out[1] = reduce_to(g, in(1).shape());
      break;

    case Primitive::Sub:
      if (needs(0)) out[0] = reduce_to(g, in(0).shape());
      if (needs(1)) {
        out[1] = reduce_to(unary(g, [](T v) { return -v; }), in(1).shape());
      }
      break;

    case Primitive::Mul:
      if (needs(0)) {
        out[0] = reduce_to(broadcast_binary(g, in(1), std::multiplies<T>()), in(0).shape());
      }
      if (needs(1)) {
        out[1] = reduce_to(broadcast_binary(g, in(0), std::multiplies<T>()), in(1).shape());
      }
      break;

    case Primitive::ScalarMul:
      out[0] = unary(g, [s = at.scalar](T v) { return s * v; });
      break;

    case Primitive::MaskedSoftmax:
      out[0] = linalg::softmax_backward(y, g);
      break;

    case Primitive::Sigmoid: {
      out[0] = Tensor<T>(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * y[i] * (T(1) - y[i]);
      break;
    }

    case Primitive::Exp: {
      out[0] = Tensor<T>(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * y[i];
      break;
    }

    case Primitive::Softplus: {
      const Tensor<T>& x = in(0);
      out[0] = Tensor<T>(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * sigmoid_value(x[i]);
      break;
    }

    case Primitive::Gelu: {
      const Tensor<T>& x = in(0);
      out[0] = Tensor<T>(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * gelu_grad(x[i]);
      break;
    }

    case Primitive::L2NormalizeRows: {
      const Tensor<T>& x = in(0);
      const std::size_t d = x.dim(-1);
      const std::size_t rows = d ? x.size() / d : 0;
      out[0] = Tensor<T>(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T sq = 0;
        T yg = 0;
        for (std::size_t c = 0; c < d; ++c) {
          sq += x[r * d + c] * x[r * d + c];
          yg += y[r * d + c] * g[r * d + c];
        }
        const T denom = std::max(std::sqrt(sq), T(linalg::kNormFloor));
        for (std::size_t c = 0; c < d; ++c) {
          out[0][r * d + c] = (g[r * d + c] - y[r * d + c] * yg) / denom;
        }
      }
      break;
    }

    case Primitive::SolveGeneral: {
      // X = A^-1 B:  dB = A^-T G,  dA = -dB X^T.
      Tensor<T> db = linalg::lu_solve(*at.lu, g, /*transpose=*/true);
      if (needs(0)) {
        Tensor<T> da = linalg::matmul(db, y, false, true);
        const T sign = tape.fault() == Fault::SolveBackward ? T(1) : T(-1);
        for (auto& v : da.data()) v *= sign;
        out[0] = std::move(da);
      }
      if (needs(1)) out[1] = std::move(db);
      break;
    }

    case Primitive::SolveLowerTriangular: {
      // Same rule with an upper-triangular (transposed) solve; the strict
      // upper triangle of L is never read, so its gradient is zero.
      Tensor<T> db = linalg::solve_lower_triangular(in(0), g, /*transpose=*/true);
      if (needs(0)) {
        Tensor<T> da = tril(linalg::matmul(db, y, false, true));
        const T sign = tape.fault() == Fault::SolveBackward ? T(1) : T(-1);
        for (auto& v : da.data()) v *= sign;
        out[0] = std::move(da);
      }
      if (needs(1)) out[1] = std::move(db);
      break;
    }

    case Primitive::Reshape:
      out[0] = g.reshaped(in(0).shape());
      break;

    case Primitive::Permute: {
      std::vector<std::size_t> inv(at.ints.size());
      for (std::size_t i = 0; i < at.ints.size(); ++i) inv[at.ints[i]] = i;
      out[0] = permute_tensor(g, inv);
      break;
    }

    case Primitive::ReduceSum:
      out[0] = Tensor<T>(in(0).shape(), g[0]);
      break;

    case Primitive::GatherRows: {
      const Tensor<T>& table = in(0);
      const std::size_t d = table.dim(-1);
      out[0] = Tensor<T>(table.shape());
      for (std::size_t r = 0; r < at.ids.size(); ++r) {
        const std::size_t row = static_cast<std::size_t>(at.ids[r]);
        for (std::size_t c = 0; c < d; ++c) out[0][row * d + c] += g[r * d + c];
      }
      break;
    }

    case Primitive::CrossEntropy: {
      // saved = softmax(logits); scalar() = total weight.
      const Tensor<T>& p = at.saved;
      const std::size_t v = p.dim(-1);
      out[0] = Tensor<T>(p.shape());
      if (at.scalar > T(0)) {
        for (std::size_t r = 0; r < at.ids.size(); ++r) {
          const T w = at.weights[r] * g[0] / at.scalar;
          if (w == T(0)) continue;
          for (std::size_t c = 0; c < v; ++c) out[0][r * v + c] = w * p[r * v + c];
          out[0][r * v + static_cast<std::size_t>(at.ids[r])] -= w;
        }
      }
      break;
    }

    case Primitive::LayerNorm: {
      // saved = x_hat, saved2 = 1/sigma per row.
      const Tensor<T>& xhat = at.saved;
      const Tensor<T>& rstd = at.saved2;
      const Tensor<T>& gamma = in(1);
      const std::size_t d = gamma.size();
      const std::size_t rows = xhat.size() / d;
      Tensor<T> dx(xhat.shape());
      Tensor<T> dgamma(gamma.shape());
      Tensor<T> dbeta(gamma.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dxh = 0;
        T mean_dxh_xh = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const T gi = g[r * d + c];
          const T dxh = gi * gamma[c];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[r * d + c];
          dgamma[c] += gi * xhat[r * d + c];
          dbeta[c] += gi;
        }
        mean_dxh /= static_cast<T>(d);
        mean_dxh_xh /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dxh = g[r * d + c] * gamma[c];
          dx[r * d + c] = rstd[r] * (dxh - mean_dxh - xhat[r * d + c] * mean_dxh_xh);
        }
      }
      out[0] = std::move(dx);
      if (needs(1)) out[1] = std::move(dgamma);
      if (needs(2)) out[2] = std::move(dbeta);
      break;
    }

    case Primitive::ConcatLast: {
      const std::size_t p = in(0).dim(-1);
      const std::size_t q = in(1).dim(-1);
      const std::size_t rows = in(0).size() / std::max<std::size_t>(p, 1);
      Tensor<T> ga(in(0).shape());
      Tensor<T> gb(in(1).shape());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < p; ++c) ga[r * p + c] = g[r * (p + q) + c];
        for (std::size_t c = 0; c < q; ++c) gb[r * q + c] = g[r * (p + q) + p + c];
      }
      if (needs(0)) out[0] = std::move(ga);
      if (needs(1)) out[1] = std::move(gb);
      break;
    }

    case Primitive::RowOuter: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const std::size_t p = a.dim(-1);
      const std::size_t q = b.dim(-1);
      const std::size_t rows = a.size() / std::max<std::size_t>(p, 1);
      Tensor<T> ga(a.shape());
      Tensor<T> gb(b.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g.data().data() + r * p * q;
        for (std::size_t i = 0; i < p; ++i) {
          T acc = 0;
          const T ai = a[r * p + i];
          for (std::size_t j = 0; j < q; ++j) {
            acc += gr[i * q + j] * b[r * q + j];
            gb[r * q + j] += gr[i * q + j] * ai;
          }
          ga[r * p + i] = acc;
        }
      }
      if (needs(0)) out[0] = std::move(ga);
      if (needs(1)) out[1] = std::move(gb);
      break;
    }

    case Primitive::Rope:
      out[0] = rope_apply(g, 0, /*inverse=*/true);
      break;
  }
  return out;
}

}  // namespace

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Leaf: return "leaf";
    case Primitive::Constant: return "constant";
    case Primitive::MatMul: return "matmul";
    case Primitive::Transpose: return "transpose";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::ScalarMul: return "scalar-mul";
    case Primitive::MaskedSoftmax: return "row-softmax-masked";
    case Primitive::Sigmoid: return "sigmoid";
    case Primitive::Exp: return "exp";
    case Primitive::Softplus: return "softplus";
    case Primitive::Gelu: return "gelu";
    case Primitive::L2NormalizeRows: return "l2-normalize-rows";
    case Primitive::SolveGeneral: return "solve-general";
    case Primitive::SolveLowerTriangular: return "solve-lower-triangular";
    case Primitive::Reshape: return "reshape";
    case Primitive::Permute: return "permute";
    case Primitive::ReduceSum: return "reduce-sum";
    case Primitive::GatherRows: return "gather-rows";
    case Primitive::CrossEntropy: return "cross-entropy";
    case Primitive::LayerNorm: return "layer-norm";
    case Primitive::ConcatLast: return "concat-last";
    case Primitive::RowOuter: return "row-outer";
    case Primitive::Rope: return "rope";
  }
  return "unknown";
}

const std::vector<Primitive>& differentiable_primitives() {
  static const std::vector<Primitive> all = {
      Primitive::MatMul,          Primitive::Transpose,
      Primitive::Add,             Primitive::Sub,
      Primitive::Mul,             Primitive::ScalarMul,
      Primitive::MaskedSoftmax,   Primitive::Sigmoid,
      Primitive::Exp,             Primitive::Softplus,
      Primitive::Gelu,            Primitive::L2NormalizeRows,
      Primitive::SolveGeneral,    Primitive::SolveLowerTriangular,
      Primitive::Reshape,         Primitive::Permute,
      Primitive::ReduceSum,       Primitive::GatherRows,
      Primitive::CrossEntropy,    Primitive::LayerNorm,
      Primitive::ConcatLast,      Primitive::RowOuter,
      Primitive::Rope,
  };
  return all;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  const auto od = padded_dims(grad.shape());
  const Padded pt = pad(target, od);
  Tensor<T> out(target);
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < od[0]; ++i0)
    for (std::size_t i1 = 0; i1 < od[1]; ++i1)
      for (std::size_t i2 = 0; i2 < od[2]; ++i2)
        for (std::size_t i3 = 0; i3 < od[3]; ++i3) {
          const std::size_t it = i0 * pt.strides[0] + i1 * pt.strides[1] +
                                 i2 * pt.strides[2] + i3 * pt.strides[3];
          out[it] += grad[o++];
        }
  return out;
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeMismatch("permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeMismatch("invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];

  // Input strides, then reorder them to walk the output in row-major order.
  std::array<std::size_t, 4> in_strides{0, 0, 0, 0};
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = stride;
    stride *= a.shape()[i];
  }
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  std::array<std::size_t, 4> st{0, 0, 0, 0};
  for (std::size_t i = 0; i < r; ++i) {
    dims[4 - r + i] = out_shape[i];
    st[4 - r + i] = in_strides[perm[i]];
  }
  Tensor<T> out(out_shape);
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < dims[0]; ++i0)
    for (std::size_t i1 = 0; i1 < dims[1]; ++i1)
      for (std::size_t i2 = 0; i2 < dims[2]; ++i2)
        for (std::size_t i3 = 0; i3 < dims[3]; ++i3)
          out[o++] = a[i0 * st[0] + i1 * st[1] + i2 * st[2] + i3 * st[3]];
  return out;
}

template <typename T>
const Tensor<T>& GradMap<T>::operator[](NodeId id) const {
  if (!has(id)) throw ShapeMismatch("no gradient recorded for node " + std::to_string(id));
  return grads_[id];
}

template <typename T>
Tensor<T> GradMap<T>::get_or_zeros(Var<T> v) const {
  return has(v.id) ? grads_[v.id] : Tensor<T>(v.shape());
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  nodes_.push_back(Node<T>{Primitive::Leaf, {}, std::move(value), true, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node<T>{Primitive::Constant, {}, std::move(value), false, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Primitive op, std::vector<NodeId> inputs, Tensor<T> value,
                       Attrs<T> attrs) {
  bool needs_grad = false;
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw ShapeMismatch("input node recorded after consumer");
    needs_grad = needs_grad || nodes_[id].requires_grad;
  }
  nodes_.push_back(
      Node<T>{op, std::move(inputs), std::move(value), needs_grad, std::move(attrs)});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
GradMap<T> Tape<T>::backward(Var<T> loss) const {
  if (loss.tape != this) throw ShapeMismatch("loss belongs to another tape");
  const Tensor<T>& lv = value(loss.id);
  if (lv.size() != 1) throw NonScalarLoss("loss has shape " + shape_str(lv.shape()));

  std::vector<Tensor<T>> grads(nodes_.size());
  grads[loss.id] = Tensor<T>(lv.shape(), T(1));
  for (NodeId id = loss.id + 1; id-- > 0;) {
    const Node<T>& n = nodes_[id];
    if (grads[id].empty() || !n.requires_grad) continue;
    if (n.op == Primitive::Leaf) continue;
    std::vector<Tensor<T>> in_grads = backward_rule(*this, n, grads[id]);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const NodeId src = n.inputs[k];
      if (!nodes_[src].requires_grad || in_grads[k].empty()) continue;
      add_into(grads[src], in_grads[k]);
    }
    // Intermediate gradients are not part of the result.
    grads[id] = Tensor<T>();
  }
  return GradMap<T>(std::move(grads));
}

// --- ops --------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  auto& t = tape_of(a, b);
  Attrs<T> at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return t.record(Primitive::MatMul, {a.id, b.id},
                  linalg::matmul(a.value(), b.value(), trans_a, trans_b), std::move(at));
}

template <typename T>
Var<T> transpose(Var<T> a) {
  return tape_of(a).record(Primitive::Transpose, {a.id}, linalg::transpose(a.value()));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return tape_of(a, b).record(Primitive::Add, {a.id, b.id},
                              broadcast_binary(a.value(), b.value(), std::plus<T>()));
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return tape_of(a, b).record(Primitive::Sub, {a.id, b.id},
                              broadcast_binary(a.value(), b.value(), std::minus<T>()));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return tape_of(a, b).record(Primitive::Mul, {a.id, b.id},
                              broadcast_binary(a.value(), b.value(), std::multiplies<T>()));
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Attrs<T> at;
  at.scalar = s;
  return tape_of(a).record(Primitive::ScalarMul, {a.id},
                           unary(a.value(), [s](T v) { return s * v; }), std::move(at));
}

template <typename T>
Var<T> masked_softmax(Var<T> scores, const std::optional<linalg::Mask>& mask) {
  Attrs<T> at;
  at.mask = mask;
  return tape_of(scores).record(Primitive::MaskedSoftmax, {scores.id},
                                linalg::masked_softmax(scores.value(), mask),
                                std::move(at));
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return tape_of(a).record(Primitive::Sigmoid, {a.id},
                           unary(a.value(), [](T v) { return sigmoid_value(v); }));
}

template <typename T>
Var<T> exp(Var<T> a) {
  return tape_of(a).record(Primitive::Exp, {a.id},
                           unary(a.value(), [](T v) { return std::exp(v); }));
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return tape_of(a).record(Primitive::Softplus, {a.id},
                           unary(a.value(), [](T v) { return softplus_value(v); }));
}

template <typename T>
Var<T> gelu(Var<T> a) {
  return tape_of(a).record(Primitive::Gelu, {a.id},
                           unary(a.value(), [](T v) { return gelu_value(v); }));
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
  return tape_of(a).record(Primitive::L2NormalizeRows, {a.id},
                           linalg::l2_normalize_rows(a.value()));
}

template <typename T>
Var<T> solve_general(Var<T> a, Var<T> b) {
  auto& t = tape_of(a, b);
  auto lu = std::make_shared<const linalg::LuFactors<T>>(linalg::lu_factor(a.value()));
  Tensor<T> x = linalg::lu_solve(*lu, b.value());
  Attrs<T> at;
  at.lu = std::move(lu);
  return t.record(Primitive::SolveGeneral, {a.id, b.id}, std::move(x), std::move(at));
}

template <typename T>
Var<T> solve_lower_triangular(Var<T> l, Var<T> b) {
  return tape_of(l, b).record(Primitive::SolveLowerTriangular, {l.id, b.id},
                              linalg::solve_lower_triangular(l.value(), b.value()));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  return tape_of(a).record(Primitive::Reshape, {a.id}, a.value().reshaped(std::move(shape)));
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  Tensor<T> v = permute_tensor(a.value(), perm);
  Attrs<T> at;
  at.ints = std::move(perm);
  return tape_of(a).record(Primitive::Permute, {a.id}, std::move(v), std::move(at));
}

template <typename T>
Var<T> reduce_sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return tape_of(a).record(Primitive::ReduceSum, {a.id}, Tensor<T>::scalar(s));
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::int32_t> ids) {
  const Tensor<T>& tv = table.value();
  if (tv.rank() != 2) throw ShapeMismatch("gather_rows expects [V, D] table");
  const std::size_t rows = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= rows) {
      throw TargetOutOfRange("row id " + std::to_string(ids[r]) + " outside [0, " +
                             std::to_string(rows) + ")");
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Attrs<T> at;
  at.ids = std::move(ids);
  return tape_of(table).record(Primitive::GatherRows, {table.id}, std::move(out),
                               std::move(at));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::int32_t> targets,
                     std::vector<T> weights) {
  const Tensor<T>& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
    throw ShapeMismatch("cross_entropy expects logits [M, V] with M targets, got " +
                        shape_str(lv.shape()));
  }
  if (weights.empty()) weights.assign(targets.size(), T(1));
  if (weights.size() != targets.size()) throw ShapeMismatch("cross_entropy weight count");
  const std::size_t v = lv.dim(1);
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw TargetOutOfRange("target " + std::to_string(t) + " outside [0, " +
                             std::to_string(v) + ")");
    }
  }
  Tensor<T> probs = linalg::masked_softmax(lv, std::nullopt);
  T total_w = 0;
  T loss = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (weights[r] == T(0)) continue;
    const T* row = lv.data().data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T sum = 0;
    for (std::size_t c = 0; c < v; ++c) sum += std::exp(row[c] - mx);
    const T logp = row[targets[r]] - mx - std::log(sum);
    loss -= weights[r] * logp;
    total_w += weights[r];
  }
  if (total_w > T(0)) loss /= total_w;
  Attrs<T> at;
  at.scalar = total_w;
  at.ids = std::move(targets);
  at.weights = std::move(weights);
  at.saved = std::move(probs);
  return tape_of(logits).record(Primitive::CrossEntropy, {logits.id},
                                Tensor<T>::scalar(loss), std::move(at));
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  auto& t = tape_of(x, gamma);
  tape_of(gamma, beta);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  const std::size_t d = xv.dim(-1);
  if (gv.size() != d || bv.size() != d) throw ShapeMismatch("layer_norm gain/bias size");
  const std::size_t rows = xv.size() / d;
  Tensor<T> y(xv.shape());
  Tensor<T> xhat(xv.shape());
  Tensor<T> rstd({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xv[r * d + c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const T z = xv[r * d + c] - mean;
      var += z * z;
    }
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T xh = (xv[r * d + c] - mean) * rs;
      xhat[r * d + c] = xh;
      y[r * d + c] = xh * gv[c] + bv[c];
    }
  }
  Attrs<T> at;
  at.saved = std::move(xhat);
  at.saved2 = std::move(rstd);
  return t.record(Primitive::LayerNorm, {x.id, gamma.id, beta.id}, std::move(y),
                  std::move(at));
}

template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  auto& t = tape_of(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != bv.rank() ||
      !std::equal(av.shape().begin(), av.shape().end() - 1, bv.shape().begin())) {
    throw ShapeMismatch("concat_last " + shape_str(av.shape()) + " with " +
                        shape_str(bv.shape()));
  }
  const std::size_t p = av.dim(-1);
  const std::size_t q = bv.dim(-1);
  Shape shape = av.shape();
  shape.back() = p + q;
  Tensor<T> out(shape);
  const std::size_t rows = av.size() / std::max<std::size_t>(p, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < p; ++c) out[r * (p + q) + c] = av[r * p + c];
    for (std::size_t c = 0; c < q; ++c) out[r * (p + q) + p + c] = bv[r * q + c];
  }
  return t.record(Primitive::ConcatLast, {a.id, b.id}, std::move(out));
}

template <typename T>
Var<T> row_outer(Var<T> a, Var<T> b) {
  auto& t = tape_of(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != bv.rank() ||
      !std::equal(av.shape().begin(), av.shape().end() - 1, bv.shape().begin())) {
    throw ShapeMismatch("row_outer " + shape_str(av.shape()) + " with " +
                        shape_str(bv.shape()));
  }
  const std::size_t p = av.dim(-1);
  const std::size_t q = bv.dim(-1);
  Shape shape = av.shape();
  shape.back() = p * q;
  Tensor<T> out(shape);
  const std::size_t rows = av.size() / std::max<std::size_t>(p, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      const T ai = av[r * p + i];
      for (std::size_t j = 0; j < q; ++j) out[r * p * q + i * q + j] = ai * bv[r * q + j];
    }
  }
  return t.record(Primitive::RowOuter, {a.id, b.id}, std::move(out));
}

template <typename T>
Var<T> rope(Var<T> a) {
  return tape_of(a).record(Primitive::Rope, {a.id}, rope_apply(a.value()));
}

#define KRRMIX_INSTANTIATE(T)                                                        \
  template class GradMap<T>;                                                         \
  template class Tape<T>;                                                            \
  template Tensor<T> reduce_to(const Tensor<T>&, const Shape&);                      \
  template Tensor<T> permute_tensor(const Tensor<T>&, const std::vector<std::size_t>&); \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                \
  template Var<T> transpose(Var<T>);                                                 \
  template Var<T> add(Var<T>, Var<T>);                                               \
  template Var<T> sub(Var<T>, Var<T>);                                               \
  template Var<T> mul(Var<T>, Var<T>);                                               \
  template Var<T> scale(Var<T>, T);                                                  \
  template Var<T> masked_softmax(Var<T>, const std::optional<linalg::Mask>&);        \
  template Var<T> sigmoid(Var<T>);                                                   \
  template Var<T> exp(Var<T>);                                                       \
  template Var<T> softplus(Var<T>);                                                  \
  template Var<T> gelu(Var<T>);                                                      \
  template Var<T> l2_normalize_rows(Var<T>);                                         \
  template Var<T> solve_general(Var<T>, Var<T>);                                     \
  template Var<T> solve_lower_triangular(Var<T>, Var<T>);                            \
  template Var<T> reshape(Var<T>, Shape);                                            \
  template Var<T> permute(Var<T>, std::vector<std::size_t>);                         \
  template Var<T> reduce_sum(Var<T>);                                                \
  template Var<T> gather_rows(Var<T>, std::vector<std::int32_t>);                    \
  template Var<T> cross_entropy(Var<T>, std::vector<std::int32_t>, std::vector<T>);  \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>);                                \
  template Var<T> concat_last(Var<T>, Var<T>);                                       \
  template Var<T> row_outer(Var<T>, Var<T>);                                         \
  template Var<T> rope(Var<T>);

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::autograd
