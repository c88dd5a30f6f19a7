#pragma once

#include <cstdint>
#include <vector>

#include "salt/tensor.hpp"

namespace salt {

enum class Op {
  Leaf,
  Const,
  MatMul,
  Add,
  Mul,
  Scale,
  Exp,
  Log,
  Gelu,
  RowLogSoftmax,
  RowSum,
  LayerNorm,
  EmbeddingLookup,
  Slice,
  Concat,
  ReduceMean,
  ReduceSum,
  GatherLogp,
};

struct TapeNode {
  Op op;
  std::vector<int> inputs;
  Tensor value;
  std::vector<std::int64_t> iaux;  // token ids, slice bounds, axis, transpose flags
  std::vector<double> daux;        // layer_norm eps, scale constant
  bool is_param = false;
};

struct ParamGrads {
  std::vector<int> ids;       // param leaf node ids, registration order
  std::vector<Tensor> grads;  // dLoss/dParam, aligned with ids
};

// Append-only record of primitive applications; reverse sweep yields exact
// gradients for every leaf marked as a parameter. Inputs of a node always
// precede it, so a single reverse pass is a valid topological order.
// A tape is single-threaded; distinct tapes are independent.
class Tape {
 public:
  int leaf(Tensor value, bool is_param = false);
  int constant(Tensor value);

  // C = op(A)·op(B) with optional transposes, rank-2 only.
  int matmul(int a, int b, bool trans_a = false, bool trans_b = false);
  // Elementwise; b may be same-shape, a length-cols(a) row vector, or scalar.
  int add(int a, int b);
  int mul(int a, int b);
  int scale(int a, double c);  // multiply by a compile-time constant
  int exp_(int a);
  int log_(int a);  // requires strictly positive input
  int gelu(int a);  // exact erf form
  // Per-row log softmax over the last dimension, rank-2.
  int row_log_softmax(int a);
  int row_sum(int a);                 // [R,C] -> [R,1]
  int layer_norm(int a, double eps);  // per-row standardize, no affine
  // table [V,d], ids in [0,V) -> [ids.size(), d]
  int embedding_lookup(int table, const std::vector<std::uint32_t>& ids);
  int slice(int a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
  int concat(const std::vector<int>& parts, int axis);  // axis 0 or 1, rank-2
  int reduce_mean(int a);  // any rank -> scalar
  int reduce_sum(int a);
  // a [R,C], ids length R -> [R], picks a[r, ids[r]]
  int gather_logp(int a, const std::vector<std::uint32_t>& ids);

  const Tensor& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<int>& param_ids() const { return param_ids_; }

  // Gradients of a scalar loss for every parameter leaf. Deterministic: two
  // calls on the same tape produce bit-identical results.
  ParamGrads backward(int loss_id) const;

 private:
  int push(TapeNode node);
  const Tensor& in(const TapeNode& n, int i) const { return nodes_[n.inputs[i]].value; }

  std::vector<TapeNode> nodes_;
  std::vector<int> param_ids_;
};

}  // namespace salt
