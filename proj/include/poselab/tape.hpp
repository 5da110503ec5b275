#pragma once

#include <cblas.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "poselab/param_store.hpp"
#include "poselab/tensor.hpp"

namespace poselab {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// non-finite values or domain violations (sqrt of negative, 1/0, ...)
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Op : int {
  kConstant,
  kParam,
  kMatMul,
  kAdd,       // same-shape, or [m,n] + [n] bias broadcast on last axis
  kSub,
  kMul,       // elementwise, same-shape
  kScalarMul, // tensor * rank-0 scalar (scalar lives on the tape)
  kRelu,
  kMaxZero,   // max(x, 0); same math as relu, kept as a distinct kind
  kRowSoftmax,
  kLayerNorm, // last axis, optional gain/bias
  kConcat,    // last axis, 2..3 inputs
  kGatherRows,// constant index list; backward scatter-adds
  kMeanReduce,// axis attr; -1 = full reduce to rank 0
  kSumReduce,
  kSquaredL2, // sum of squares -> rank 0
  kSmoothL1,  // elementwise, beta attr
  kPairwiseSqDist, // [m,d] x [n,d] -> [m,n] squared distances
  kMinReduce, // axis attr; argmin saved, backward scatters
  kTranspose,
  kReshape,
  kExp,
  kSqrt,      // backward clamped to 0 at x == 0
  kRecip,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScalarMul: return "scalar-mul";
    case Op::kRelu: return "relu";
    case Op::kMaxZero: return "max-with-zero";
    case Op::kRowSoftmax: return "row-softmax";
    case Op::kLayerNorm: return "layer-norm";
    case Op::kConcat: return "concat";
    case Op::kGatherRows: return "gather-rows";
    case Op::kMeanReduce: return "mean-reduce";
    case Op::kSumReduce: return "sum-reduce";
    case Op::kSquaredL2: return "squared-l2";
    case Op::kSmoothL1: return "smooth-l1";
    case Op::kPairwiseSqDist: return "pairwise-sq-distances";
    case Op::kMinReduce: return "min-reduce";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kExp: return "exp";
    case Op::kSqrt: return "sqrt";
    case Op::kRecip: return "reciprocal";
  }
  return "?";
}

struct Node {
  Op op = Op::kConstant;
  std::array<int, 3> in{{-1, -1, -1}};
  int n_in = 0;
  Tensor val;
  bool needs_grad = false;
  int axis = -1;               // reductions
  double beta = 0.0;           // smooth-l1
  double eps = 0.0;            // layer-norm
  std::vector<int> idx;        // gather indices / argmin / concat widths
  std::vector<double> saved;   // layer-norm (mean, inv_std) per row
  std::string pname;           // param nodes only
};

class Tape;

struct Value {
  int id = -1;
  Tape* tape = nullptr;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const Shape& shape() const;
  double scalar() const;
};

namespace detail {

// C (m x n) = alpha * op(A) op(B) + beta * C, row-major
inline void gemm(bool ta, bool tb, const Tensor& A, const Tensor& B, Tensor& C,
                 double alpha = 1.0, double beta = 0.0) {
  const int m = ta ? A.shape[1] : A.shape[0];
  const int k = ta ? A.shape[0] : A.shape[1];
  const int n = tb ? B.shape[0] : B.shape[1];
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, A.data.data(),
              A.shape[1], B.data.data(), B.shape[1], beta, C.data.data(),
              C.shape[1]);
}

inline std::string shapes2(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b);
}

}  // namespace detail

// Eager single-use tape: ops evaluate at creation, creation order is the
// topological order, backward() walks it once in reverse.
class Tape {
 public:
  bool debug_checks = true;  // finiteness scan at creation and after every op

  Value constant(Tensor t) {
    Node n;
    n.op = Op::kConstant;
    n.val = std::move(t);
    return emit(std::move(n));
  }

  Value scalar_const(double v) { return constant(Tensor::scalar(v)); }

  // Parameters are snapshotted onto the tape; asking twice for the same name
  // returns the same node, so shared parameters accumulate gradient from all
  // of their uses.
  Value param(const ParamStore& store, const std::string& name) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return Value{it->second, this};
    Node n;
    n.op = Op::kParam;
    n.val = store.at(name).value;
    n.needs_grad = true;
    n.pname = name;
    Value v = emit(std::move(n));
    param_ids_[name] = v.id;
    return v;
  }

  Value emit(Node n) {
    for (int i = 0; i < n.n_in; ++i) {
      if (n.in[i] < 0 || n.in[i] >= static_cast<int>(nodes_.size()))
        throw std::logic_error("tape: input id out of range");
      n.needs_grad = n.needs_grad || nodes_[n.in[i]].needs_grad;
    }
    if (debug_checks && !n.val.all_finite())
      throw NumericalError(std::string("non-finite values produced by op '") +
                           op_name(n.op) + "'");
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1, this};
  }

  const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
  size_t size() const { return nodes_.size(); }

  // Reverse-mode gradient of a rank-0 loss w.r.t. every parameter in the
  // store. Parameters the loss does not reach get exact-zero tensors.
  GradMap gradients(Value loss, const ParamStore& store) {
    if (loss.tape != this) throw std::logic_error("loss from another tape");
    if (node(loss.id).val.rank() != 0)
      throw ShapeError("gradients: loss must be rank-0, got shape " +
                       shape_str(node(loss.id).val.shape));
    std::vector<Tensor> g(static_cast<size_t>(loss.id) + 1);
    g[loss.id] = Tensor::scalar(1.0);
    for (int i = loss.id; i >= 0; --i) {
      if (g[i].unset() || !nodes_[i].needs_grad) continue;
      backprop(i, g);
    }
    GradMap out;
    for (const auto& [name, entry] : store) {
      auto it = param_ids_.find(name);
      if (it != param_ids_.end() && it->second <= loss.id &&
          !g[it->second].unset())
        out[name] = std::move(g[it->second]);
      else
        out[name] = Tensor::zeros(entry.value.shape);
    }
    return out;
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;

  Tensor& slot(std::vector<Tensor>& g, int id) {
    if (g[id].unset()) g[id] = Tensor::zeros(nodes_[id].val.shape);
    return g[id];
  }

  bool wants(int id) const { return nodes_[id].needs_grad; }

  void backprop(int i, std::vector<Tensor>& g) {
    const Node& nd = nodes_[i];
    const Tensor& G = g[i];
    auto in_val = [&](int j) -> const Tensor& { return nodes_[nd.in[j]].val; };
    switch (nd.op) {
      case Op::kConstant:
      case Op::kParam:
        break;
      case Op::kMatMul: {
        if (wants(nd.in[0]))
          detail::gemm(false, true, G, in_val(1), slot(g, nd.in[0]), 1.0, 1.0);
        if (wants(nd.in[1]))
          detail::gemm(true, false, in_val(0), G, slot(g, nd.in[1]), 1.0, 1.0);
        break;
      }
      case Op::kAdd: {
        if (wants(nd.in[0])) {
          Tensor& da = slot(g, nd.in[0]);
          for (std::int64_t k = 0; k < G.size(); ++k) da[k] += G[k];
        }
        if (wants(nd.in[1])) {
          Tensor& db = slot(g, nd.in[1]);
          if (in_val(1).same_shape(nd.val)) {
            for (std::int64_t k = 0; k < G.size(); ++k) db[k] += G[k];
          } else {  // bias broadcast: column sums
            const int m = G.shape[0], n = G.shape[1];
            for (int r = 0; r < m; ++r)
              for (int c = 0; c < n; ++c) db[c] += G.at(r, c);
          }
        }
        break;
      }
      case Op::kSub: {
        if (wants(nd.in[0])) {
          Tensor& da = slot(g, nd.in[0]);
          for (std::int64_t k = 0; k < G.size(); ++k) da[k] += G[k];
        }
        if (wants(nd.in[1])) {
          Tensor& db = slot(g, nd.in[1]);
          for (std::int64_t k = 0; k < G.size(); ++k) db[k] -= G[k];
        }
        break;
      }
      case Op::kMul: {
        const Tensor &a = in_val(0), &b = in_val(1);
        if (wants(nd.in[0])) {
          Tensor& da = slot(g, nd.in[0]);
          for (std::int64_t k = 0; k < G.size(); ++k) da[k] += G[k] * b[k];
        }
        if (wants(nd.in[1])) {
          Tensor& db = slot(g, nd.in[1]);
          for (std::int64_t k = 0; k < G.size(); ++k) db[k] += G[k] * a[k];
        }
        break;
      }
      case Op::kScalarMul: {
        const Tensor& a = in_val(0);
        const double s = in_val(1)[0];
        if (wants(nd.in[0])) {
          Tensor& da = slot(g, nd.in[0]);
          for (std::int64_t k = 0; k < G.size(); ++k) da[k] += s * G[k];
        }
        if (wants(nd.in[1])) {
          double acc = 0.0;
          for (std::int64_t k = 0; k < G.size(); ++k) acc += G[k] * a[k];
          slot(g, nd.in[1])[0] += acc;
        }
        break;
      }
      case Op::kRelu:
      case Op::kMaxZero: {
        if (!wants(nd.in[0])) break;
        const Tensor& x = in_val(0);
        Tensor& da = slot(g, nd.in[0]);
        for (std::int64_t k = 0; k < G.size(); ++k)
          if (x[k] > 0.0) da[k] += G[k];
        break;
      }
      case Op::kRowSoftmax: {
        if (!wants(nd.in[0])) break;
        const Tensor& y = nd.val;
        Tensor& da = slot(g, nd.in[0]);
        const int m = y.shape[0], n = y.shape[1];
        for (int r = 0; r < m; ++r) {
          double dot = 0.0;
          for (int c = 0; c < n; ++c) dot += G.at(r, c) * y.at(r, c);
          for (int c = 0; c < n; ++c)
            da.at(r, c) += y.at(r, c) * (G.at(r, c) - dot);
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& x = in_val(0);
        const bool affine = nd.n_in == 3;
        const int m = x.shape[0], n = x.shape[1];
        for (int r = 0; r < m; ++r) {
          const double mu = nd.saved[2 * r], inv = nd.saved[2 * r + 1];
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          std::vector<double> dxh(n), xh(n);
          for (int c = 0; c < n; ++c) {
            xh[c] = (x.at(r, c) - mu) * inv;
            dxh[c] = affine ? G.at(r, c) * in_val(1)[c] : G.at(r, c);
            mean_dxh += dxh[c];
            mean_dxh_xh += dxh[c] * xh[c];
          }
          mean_dxh /= n;
          mean_dxh_xh /= n;
          if (wants(nd.in[0])) {
            Tensor& da = slot(g, nd.in[0]);
            for (int c = 0; c < n; ++c)
              da.at(r, c) += inv * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
          }
          if (affine) {
            if (wants(nd.in[1])) {
              Tensor& dg = slot(g, nd.in[1]);
              for (int c = 0; c < n; ++c) dg[c] += G.at(r, c) * xh[c];
            }
            if (wants(nd.in[2])) {
              Tensor& db = slot(g, nd.in[2]);
              for (int c = 0; c < n; ++c) db[c] += G.at(r, c);
            }
          }
        }
        break;
      }
      case Op::kConcat: {
        int off = 0;
        for (int j = 0; j < nd.n_in; ++j) {
          const int w = nd.idx[j];
          if (wants(nd.in[j])) {
            Tensor& dj = slot(g, nd.in[j]);
            if (nd.val.rank() == 1) {
              for (int c = 0; c < w; ++c) dj[c] += G[off + c];
            } else {
              const int m = nd.val.shape[0];
              for (int r = 0; r < m; ++r)
                for (int c = 0; c < w; ++c) dj.at(r, c) += G.at(r, off + c);
            }
          }
          off += w;
        }
        break;
      }
      case Op::kGatherRows: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        if (in_val(0).rank() == 1) {
          for (size_t r = 0; r < nd.idx.size(); ++r) da[nd.idx[r]] += G[r];
        } else {
          const int n = in_val(0).shape[1];
          for (size_t r = 0; r < nd.idx.size(); ++r)
            for (int c = 0; c < n; ++c)
              da.at(nd.idx[r], c) += G.at(static_cast<int>(r), c);
        }
        break;
      }
      case Op::kMeanReduce:
      case Op::kSumReduce: {
        if (!wants(nd.in[0])) break;
        const Tensor& x = in_val(0);
        Tensor& da = slot(g, nd.in[0]);
        const bool mean = nd.op == Op::kMeanReduce;
        if (nd.axis == -1) {
          const double w = G[0] / (mean ? static_cast<double>(x.size()) : 1.0);
          for (std::int64_t k = 0; k < x.size(); ++k) da[k] += w;
        } else if (x.rank() == 1) {
          const double w = G[0] / (mean ? static_cast<double>(x.size()) : 1.0);
          for (std::int64_t k = 0; k < x.size(); ++k) da[k] += w;
        } else if (nd.axis == 0) {
          const int m = x.shape[0], n = x.shape[1];
          const double d = mean ? static_cast<double>(m) : 1.0;
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) da.at(r, c) += G[c] / d;
        } else {
          const int m = x.shape[0], n = x.shape[1];
          const double d = mean ? static_cast<double>(n) : 1.0;
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) da.at(r, c) += G[r] / d;
        }
        break;
      }
      case Op::kSquaredL2: {
        if (!wants(nd.in[0])) break;
        const Tensor& x = in_val(0);
        Tensor& da = slot(g, nd.in[0]);
        const double g0 = G[0];
        for (std::int64_t k = 0; k < x.size(); ++k) da[k] += 2.0 * g0 * x[k];
        break;
      }
      case Op::kSmoothL1: {
        const Tensor &x = in_val(0), &t = in_val(1);
        for (std::int64_t k = 0; k < x.size(); ++k) {
          const double d = x[k] - t[k];
          const double w =
              std::fabs(d) <= nd.beta ? d / nd.beta : (d > 0 ? 1.0 : -1.0);
          if (wants(nd.in[0])) slot(g, nd.in[0])[k] += G[k] * w;
          if (wants(nd.in[1])) slot(g, nd.in[1])[k] -= G[k] * w;
        }
        break;
      }
      case Op::kPairwiseSqDist: {
        const Tensor &a = in_val(0), &b = in_val(1);
        const int m = a.shape[0], n = b.shape[0], d = a.shape[1];
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c) {
            const double w = 2.0 * G.at(r, c);
            if (w == 0.0) continue;
            for (int k = 0; k < d; ++k) {
              const double diff = a.at(r, k) - b.at(c, k);
              if (wants(nd.in[0])) slot(g, nd.in[0]).at(r, k) += w * diff;
              if (wants(nd.in[1])) slot(g, nd.in[1]).at(c, k) -= w * diff;
            }
          }
        break;
      }
      case Op::kMinReduce: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        const Tensor& x = in_val(0);
        if (x.rank() == 1) {
          da[nd.idx[0]] += G[0];
        } else if (nd.axis == 1) {
          for (int r = 0; r < x.shape[0]; ++r) da.at(r, nd.idx[r]) += G[r];
        } else {
          for (int c = 0; c < x.shape[1]; ++c) da.at(nd.idx[c], c) += G[c];
        }
        break;
      }
      case Op::kTranspose: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        const int m = nd.val.shape[0], n = nd.val.shape[1];
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c) da.at(c, r) += G.at(r, c);
        break;
      }
      case Op::kReshape: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        for (std::int64_t k = 0; k < G.size(); ++k) da[k] += G[k];
        break;
      }
      case Op::kExp: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        for (std::int64_t k = 0; k < G.size(); ++k) da[k] += G[k] * nd.val[k];
        break;
      }
      case Op::kSqrt: {
        if (!wants(nd.in[0])) break;
        const Tensor& x = in_val(0);
        Tensor& da = slot(g, nd.in[0]);
        for (std::int64_t k = 0; k < G.size(); ++k)
          if (x[k] > 0.0) da[k] += G[k] * 0.5 / nd.val[k];
        break;
      }
      case Op::kRecip: {
        if (!wants(nd.in[0])) break;
        Tensor& da = slot(g, nd.in[0]);
        for (std::int64_t k = 0; k < G.size(); ++k)
          da[k] -= G[k] * nd.val[k] * nd.val[k];
        break;
      }
    }
  }
};

inline const Tensor& Value::tensor() const { return tape->node(id).val; }
inline const Shape& Value::shape() const { return tensor().shape; }
inline double Value::scalar() const { return tensor().scalar_value(); }

namespace detail {

inline void check_same_tape(Value a, Value b, const char* op) {
  if (a.tape != b.tape)
    throw std::logic_error(std::string(op) + ": values from different tapes");
}

inline Value binary(Op op, Value a, Value b, Tensor out) {
  Node n;
  n.op = op;
  n.in = {a.id, b.id, -1};
  n.n_in = 2;
  n.val = std::move(out);
  return a.tape->emit(std::move(n));
}

inline Value unary(Op op, Value a, Tensor out) {
  Node n;
  n.op = op;
  n.in = {a.id, -1, -1};
  n.n_in = 1;
  n.val = std::move(out);
  return a.tape->emit(std::move(n));
}

}  // namespace detail

inline Value matmul(Value a, Value b) {
  detail::check_same_tape(a, b, "matmul");
  const Tensor &A = a.tensor(), &B = b.tensor();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw ShapeError(detail::shapes2("matmul", A.shape, B.shape));
  Tensor C = Tensor::zeros({A.shape[0], B.shape[1]});
  detail::gemm(false, false, A, B, C);
  return detail::binary(Op::kMatMul, a, b, std::move(C));
}

inline Value add(Value a, Value b) {
  detail::check_same_tape(a, b, "add");
  const Tensor &A = a.tensor(), &B = b.tensor();
  Tensor out;
  if (A.same_shape(B)) {
    out = A;
    for (std::int64_t k = 0; k < out.size(); ++k) out[k] += B[k];
  } else if (A.rank() == 2 && B.rank() == 1 && B.shape[0] == A.shape[1]) {
    out = A;  // bias broadcast over rows
    for (int r = 0; r < A.shape[0]; ++r)
      for (int c = 0; c < A.shape[1]; ++c) out.at(r, c) += B[c];
  } else {
    throw ShapeError(detail::shapes2("add", A.shape, B.shape));
  }
  return detail::binary(Op::kAdd, a, b, std::move(out));
}

inline Value sub(Value a, Value b) {
  detail::check_same_tape(a, b, "sub");
  const Tensor &A = a.tensor(), &B = b.tensor();
  if (!A.same_shape(B)) throw ShapeError(detail::shapes2("sub", A.shape, B.shape));
  Tensor out = A;
  for (std::int64_t k = 0; k < out.size(); ++k) out[k] -= B[k];
  return detail::binary(Op::kSub, a, b, std::move(out));
}

inline Value mul(Value a, Value b) {
  detail::check_same_tape(a, b, "mul");
  const Tensor &A = a.tensor(), &B = b.tensor();
  if (!A.same_shape(B)) throw ShapeError(detail::shapes2("mul", A.shape, B.shape));
  Tensor out = A;
  for (std::int64_t k = 0; k < out.size(); ++k) out[k] *= B[k];
  return detail::binary(Op::kMul, a, b, std::move(out));
}

inline Value scalar_mul(Value a, Value s) {
  detail::check_same_tape(a, s, "scalar-mul");
  if (s.tensor().rank() != 0)
    throw ShapeError("scalar-mul: second input must be rank-0, got " +
                     shape_str(s.shape()));
  Tensor out = a.tensor();
  const double sv = s.tensor()[0];
  for (std::int64_t k = 0; k < out.size(); ++k) out[k] *= sv;
  return detail::binary(Op::kScalarMul, a, s, std::move(out));
}

inline Value scalar_mul(Value a, double s) {
  return scalar_mul(a, a.tape->scalar_const(s));
}

inline Value relu(Value a) {
  Tensor out = a.tensor();
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return detail::unary(Op::kRelu, a, std::move(out));
}

inline Value max_with_zero(Value a) {
  Tensor out = a.tensor();
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return detail::unary(Op::kMaxZero, a, std::move(out));
}

inline Value row_softmax(Value a) {
  const Tensor& A = a.tensor();
  if (A.rank() != 2)
    throw ShapeError("row-softmax: need rank-2, got " + shape_str(A.shape));
  Tensor out = A;
  const int m = A.shape[0], n = A.shape[1];
  for (int r = 0; r < m; ++r) {
    double mx = out.at(r, 0);
    for (int c = 1; c < n; ++c) mx = std::max(mx, out.at(r, c));
    double z = 0.0;
    for (int c = 0; c < n; ++c) {
      out.at(r, c) = std::exp(out.at(r, c) - mx);
      z += out.at(r, c);
    }
    for (int c = 0; c < n; ++c) out.at(r, c) /= z;
  }
  return detail::unary(Op::kRowSoftmax, a, std::move(out));
}

inline Value layer_norm(Value x, double eps = 1e-5) {
  const Tensor& X = x.tensor();
  if (X.rank() != 2)
    throw ShapeError("layer-norm: need rank-2, got " + shape_str(X.shape));
  const int m = X.shape[0], n = X.shape[1];
  Node nd;
  nd.op = Op::kLayerNorm;
  nd.in = {x.id, -1, -1};
  nd.n_in = 1;
  nd.eps = eps;
  nd.saved.resize(2 * static_cast<size_t>(m));
  Tensor out = X;
  for (int r = 0; r < m; ++r) {
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += X.at(r, c);
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) var += (X.at(r, c) - mu) * (X.at(r, c) - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    nd.saved[2 * r] = mu;
    nd.saved[2 * r + 1] = inv;
    for (int c = 0; c < n; ++c) out.at(r, c) = (X.at(r, c) - mu) * inv;
  }
  nd.val = std::move(out);
  return x.tape->emit(std::move(nd));
}

inline Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5) {
  detail::check_same_tape(x, gain, "layer-norm");
  detail::check_same_tape(x, bias, "layer-norm");
  const Tensor& X = x.tensor();
  if (X.rank() != 2)
    throw ShapeError("layer-norm: need rank-2, got " + shape_str(X.shape));
  const int m = X.shape[0], n = X.shape[1];
  if (gain.tensor().rank() != 1 || gain.tensor().shape[0] != n ||
      !gain.tensor().same_shape(bias.tensor()))
    throw ShapeError("layer-norm: gain/bias must be [" + std::to_string(n) +
                     "], got " + shape_str(gain.shape()) + " and " +
                     shape_str(bias.shape()));
  Node nd;
  nd.op = Op::kLayerNorm;
  nd.in = {x.id, gain.id, bias.id};
  nd.n_in = 3;
  nd.eps = eps;
  nd.saved.resize(2 * static_cast<size_t>(m));
  Tensor out = X;
  const Tensor &Gn = gain.tensor(), &Bs = bias.tensor();
  for (int r = 0; r < m; ++r) {
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += X.at(r, c);
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) var += (X.at(r, c) - mu) * (X.at(r, c) - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    nd.saved[2 * r] = mu;
    nd.saved[2 * r + 1] = inv;
    for (int c = 0; c < n; ++c)
      out.at(r, c) = (X.at(r, c) - mu) * inv * Gn[c] + Bs[c];
  }
  nd.val = std::move(out);
  return x.tape->emit(std::move(nd));
}

inline Value concat(std::initializer_list<Value> parts) {
  std::vector<Value> vs(parts);
  if (vs.size() < 2 || vs.size() > 3)
    throw ShapeError("concat: supports 2..3 inputs, got " +
                     std::to_string(vs.size()));
  for (size_t i = 1; i < vs.size(); ++i)
    detail::check_same_tape(vs[0], vs[i], "concat");
  const int rank = vs[0].tensor().rank();
  Node nd;
  nd.op = Op::kConcat;
  nd.n_in = static_cast<int>(vs.size());
  int total = 0;
  for (size_t i = 0; i < vs.size(); ++i) {
    const Tensor& T = vs[i].tensor();
    if (T.rank() != rank || (rank == 2 && T.shape[0] != vs[0].tensor().shape[0]))
      throw ShapeError(detail::shapes2("concat", vs[0].tensor().shape, T.shape));
    if (rank != 1 && rank != 2)
      throw ShapeError("concat: need rank 1 or 2, got " + shape_str(T.shape));
    nd.in[i] = vs[i].id;
    const int w = rank == 1 ? T.shape[0] : T.shape[1];
    nd.idx.push_back(w);
    total += w;
  }
  Tensor out;
  if (rank == 1) {
    out = Tensor::zeros({total});
    int off = 0;
    for (auto& v : vs) {
      const Tensor& T = v.tensor();
      for (int c = 0; c < T.shape[0]; ++c) out[off + c] = T[c];
      off += T.shape[0];
    }
  } else {
    const int m = vs[0].tensor().shape[0];
    out = Tensor::zeros({m, total});
    int off = 0;
    for (auto& v : vs) {
      const Tensor& T = v.tensor();
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < T.shape[1]; ++c) out.at(r, off + c) = T.at(r, c);
      off += T.shape[1];
    }
  }
  nd.val = std::move(out);
  return vs[0].tape->emit(std::move(nd));
}

inline Value concat(Value a, Value b) { return concat({a, b}); }

inline Value gather_rows(Value a, std::vector<int> idx) {
  const Tensor& A = a.tensor();
  if (A.rank() != 1 && A.rank() != 2)
    throw ShapeError("gather-rows: need rank 1 or 2, got " + shape_str(A.shape));
  const int m = A.shape[0];
  for (int r : idx)
    if (r < 0 || r >= m)
      throw ShapeError("gather-rows: index " + std::to_string(r) +
                       " out of range for " + shape_str(A.shape));
  Tensor out;
  if (A.rank() == 1) {
    out = Tensor::zeros({static_cast<int>(idx.size())});
    for (size_t r = 0; r < idx.size(); ++r) out[r] = A[idx[r]];
  } else {
    out = Tensor::zeros({static_cast<int>(idx.size()), A.shape[1]});
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < A.shape[1]; ++c)
        out.at(static_cast<int>(r), c) = A.at(idx[r], c);
  }
  Node nd;
  nd.op = Op::kGatherRows;
  nd.in = {a.id, -1, -1};
  nd.n_in = 1;
  nd.idx = std::move(idx);
  nd.val = std::move(out);
  return a.tape->emit(std::move(nd));
}

namespace detail {

inline Value reduce(Op op, Value a, int axis) {
  const Tensor& A = a.tensor();
  const bool mean = op == Op::kMeanReduce;
  Tensor out;
  if (axis == -1 || A.rank() == 1) {
    if (A.rank() == 0) throw ShapeError("reduce: input already rank-0");
    if (axis > 0) throw ShapeError("reduce: axis out of range for rank-1");
    double acc = 0.0;
    for (double v : A.data) acc += v;
    out = Tensor::scalar(mean ? acc / static_cast<double>(A.size()) : acc);
    axis = -1;
  } else {
    if (A.rank() != 2 || (axis != 0 && axis != 1))
      throw ShapeError("reduce: bad axis " + std::to_string(axis) + " for " +
                       shape_str(A.shape));
    const int m = A.shape[0], n = A.shape[1];
    if (axis == 0) {
      out = Tensor::zeros({n});
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[c] += A.at(r, c);
      if (mean)
        for (int c = 0; c < n; ++c) out[c] /= m;
    } else {
      out = Tensor::zeros({m});
      for (int r = 0; r < m; ++r) {
        for (int c = 0; c < n; ++c) out[r] += A.at(r, c);
        if (mean) out[r] /= n;
      }
    }
  }
  Node nd;
  nd.op = op;
  nd.in = {a.id, -1, -1};
  nd.n_in = 1;
  nd.axis = axis;
  nd.val = std::move(out);
  return a.tape->emit(std::move(nd));
}

}  // namespace detail

// axis -1 (default) reduces everything to rank-0
inline Value mean_reduce(Value a, int axis = -1) {
  return detail::reduce(Op::kMeanReduce, a, axis);
}
inline Value sum_reduce(Value a, int axis = -1) {
  return detail::reduce(Op::kSumReduce, a, axis);
}

inline Value squared_l2(Value a) {
  double acc = 0.0;
  for (double v : a.tensor().data) acc += v * v;
  return detail::unary(Op::kSquaredL2, a, Tensor::scalar(acc));
}

inline Value smooth_l1(Value x, Value target, double beta) {
  detail::check_same_tape(x, target, "smooth-l1");
  const Tensor &X = x.tensor(), &T = target.tensor();
  if (!X.same_shape(T))
    throw ShapeError(detail::shapes2("smooth-l1", X.shape, T.shape));
  if (beta <= 0.0) throw std::invalid_argument("smooth-l1: beta must be > 0");
  Tensor out = X;
  for (std::int64_t k = 0; k < out.size(); ++k) {
    const double d = X[k] - T[k];
    out[k] = std::fabs(d) <= beta ? 0.5 * d * d / beta
                                  : std::fabs(d) - 0.5 * beta;
  }
  Node nd;
  nd.op = Op::kSmoothL1;
  nd.in = {x.id, target.id, -1};
  nd.n_in = 2;
  nd.beta = beta;
  nd.val = std::move(out);
  return x.tape->emit(std::move(nd));
}

inline Value pairwise_sq_distances(Value a, Value b) {
  detail::check_same_tape(a, b, "pairwise-sq-distances");
  const Tensor &A = a.tensor(), &B = b.tensor();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
    throw ShapeError(detail::shapes2("pairwise-sq-distances", A.shape, B.shape));
  const int m = A.shape[0], n = B.shape[0], d = A.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = A.at(r, k) - B.at(c, k);
        acc += diff * diff;
      }
      out.at(r, c) = acc;
    }
  return detail::binary(Op::kPairwiseSqDist, a, b, std::move(out));
}

// ties resolve to the lowest index (first minimum wins)
inline Value min_reduce(Value a, int axis = -1) {
  const Tensor& A = a.tensor();
  Node nd;
  nd.op = Op::kMinReduce;
  nd.in = {a.id, -1, -1};
  nd.n_in = 1;
  Tensor out;
  if (A.rank() == 1 || axis == -1) {
    if (A.rank() != 1)
      throw ShapeError("min-reduce: full reduce needs rank-1, got " +
                       shape_str(A.shape));
    int best = 0;
    for (int k = 1; k < A.shape[0]; ++k)
      if (A[k] < A[best]) best = k;
    nd.idx = {best};
    nd.axis = -1;
    out = Tensor::scalar(A[best]);
  } else if (A.rank() == 2 && axis == 1) {
    const int m = A.shape[0], n = A.shape[1];
    out = Tensor::zeros({m});
    nd.idx.resize(m);
    for (int r = 0; r < m; ++r) {
      int best = 0;
      for (int c = 1; c < n; ++c)
        if (A.at(r, c) < A.at(r, best)) best = c;
      nd.idx[r] = best;
      out[r] = A.at(r, best);
    }
    nd.axis = 1;
  } else if (A.rank() == 2 && axis == 0) {
    const int m = A.shape[0], n = A.shape[1];
    out = Tensor::zeros({n});
    nd.idx.resize(n);
    for (int c = 0; c < n; ++c) {
      int best = 0;
      for (int r = 1; r < m; ++r)
        if (A.at(r, c) < A.at(best, c)) best = r;
      nd.idx[c] = best;
      out[c] = A.at(best, c);
    }
    nd.axis = 0;
  } else {
    throw ShapeError("min-reduce: bad axis " + std::to_string(axis) + " for " +
                     shape_str(A.shape));
  }
  nd.val = std::move(out);
  return a.tape->emit(std::move(nd));
}

inline Value transpose(Value a) {
  const Tensor& A = a.tensor();
  if (A.rank() != 2)
    throw ShapeError("transpose: need rank-2, got " + shape_str(A.shape));
  Tensor out = Tensor::zeros({A.shape[1], A.shape[0]});
  for (int r = 0; r < A.shape[0]; ++r)
    for (int c = 0; c < A.shape[1]; ++c) out.at(c, r) = A.at(r, c);
  return detail::unary(Op::kTranspose, a, std::move(out));
}

inline Value reshape(Value a, const Shape& s) {
  const Tensor& A = a.tensor();
  if (shape_numel(s) != A.size())
    throw ShapeError("reshape: " + shape_str(A.shape) + " to " + shape_str(s) +
                     " changes element count");
  Tensor out = Tensor::from(s, A.data);
  return detail::unary(Op::kReshape, a, std::move(out));
}

inline Value exp(Value a) {
  Tensor out = a.tensor();
  for (auto& v : out.data) v = std::exp(v);
  return detail::unary(Op::kExp, a, std::move(out));
}

inline Value sqrt(Value a) {
  const Tensor& A = a.tensor();
  for (double v : A.data)
    if (v < 0.0) throw NumericalError("sqrt: negative input");
  Tensor out = A;
  for (auto& v : out.data) v = std::sqrt(v);
  return detail::unary(Op::kSqrt, a, std::move(out));
}

inline Value reciprocal(Value a) {
  const Tensor& A = a.tensor();
  for (double v : A.data)
    if (v == 0.0) throw NumericalError("reciprocal: zero input");
  Tensor out = A;
  for (auto& v : out.data) v = 1.0 / v;
  return detail::unary(Op::kRecip, a, std::move(out));
}

// --- small composites used across model/loss code ---

inline Value l2_norm(Value a) { return sqrt(squared_l2(a)); }

inline Value dot(Value a, Value b) { return sum_reduce(mul(a, b)); }

// cross product of two length-3 vectors via element gathers
inline Value cross(Value a, Value b) {
  Value a_yzx = gather_rows(a, {1, 2, 0});
  Value a_zxy = gather_rows(a, {2, 0, 1});
  Value b_yzx = gather_rows(b, {1, 2, 0});
  Value b_zxy = gather_rows(b, {2, 0, 1});
  return sub(mul(a_yzx, b_zxy), mul(a_zxy, b_yzx));
}

}  // namespace poselab
