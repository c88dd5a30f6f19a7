#include "salt/tape.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "blas.hpp"

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_rank2(const Tensor& t, const char* who) {
  require(t.rank() == 2, std::string(who) + ": expected rank-2, got shape " + t.shape_str());
}

// broadcast kinds for add/mul
enum class Bcast { Same, RowVec, Scalar };

Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* who) {
  if (a.same_shape(b)) return Bcast::Same;
  if (b.is_scalar()) return Bcast::Scalar;
  if (a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1]) return Bcast::RowVec;
  throw std::invalid_argument(std::string(who) + ": shapes do not conform: " + a.shape_str() +
                              " vs " + b.shape_str());
}

}  // namespace

int Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor value, bool is_param) {
  require(value.all_finite(), "Tape::leaf: non-finite input rejected");
  TapeNode n{Op::Leaf, {}, std::move(value), {}, {}, is_param};
  int id = push(std::move(n));
  if (is_param) param_ids_.push_back(id);
  return id;
}

int Tape::constant(Tensor value) {
  require(value.all_finite(), "Tape::constant: non-finite input rejected");
  return push(TapeNode{Op::Const, {}, std::move(value), {}, {}, false});
}

int Tape::matmul(int a, int b, bool trans_a, bool trans_b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  std::size_t m = trans_a ? A.shape[1] : A.shape[0];
  std::size_t k = trans_a ? A.shape[0] : A.shape[1];
  std::size_t kb = trans_b ? B.shape[1] : B.shape[0];
  std::size_t n = trans_b ? B.shape[0] : B.shape[1];
  require(k == kb, "matmul: inner dimensions disagree: " + A.shape_str() +
                       (trans_a ? "^T" : "") + " x " + B.shape_str() + (trans_b ? "^T" : ""));
  Tensor C = Tensor::zeros({m, n});
  detail::dgemm(trans_a, trans_b, m, n, k, 1.0, A.data.data(), A.shape[1], B.data.data(),
                B.shape[1], 0.0, C.data.data(), n);
  return push(TapeNode{Op::MatMul, {a, b}, std::move(C),
                       {trans_a ? 1 : 0, trans_b ? 1 : 0}, {}, false});
}

int Tape::add(int a, int b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  Bcast kind = bcast_kind(A, B, "add");
  Tensor out = A;
  switch (kind) {
    case Bcast::Same:
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
      break;
    case Bcast::Scalar: {
      double v = B.data[0];
      for (double& x : out.data) x += v;
      break;
    }
    case Bcast::RowVec: {
      std::size_t r = A.shape[0], c = A.shape[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += B.data[j];
      break;
    }
  }
  return push(TapeNode{Op::Add, {a, b}, std::move(out), {static_cast<std::int64_t>(kind)}, {}, false});
}

int Tape::mul(int a, int b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  Bcast kind = bcast_kind(A, B, "mul");
  Tensor out = A;
  switch (kind) {
    case Bcast::Same:
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
      break;
    case Bcast::Scalar: {
      double v = B.data[0];
      for (double& x : out.data) x *= v;
      break;
    }
    case Bcast::RowVec: {
      std::size_t r = A.shape[0], c = A.shape[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] *= B.data[j];
      break;
    }
  }
  return push(TapeNode{Op::Mul, {a, b}, std::move(out), {static_cast<std::int64_t>(kind)}, {}, false});
}

int Tape::scale(int a, double c) {
  require(std::isfinite(c), "scale: non-finite constant rejected");
  Tensor out = nodes_[a].value;
  for (double& x : out.data) x *= c;
  return push(TapeNode{Op::Scale, {a}, std::move(out), {}, {c}, false});
}

int Tape::exp_(int a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.data) x = std::exp(x);
  return push(TapeNode{Op::Exp, {a}, std::move(out), {}, {}, false});
}

int Tape::log_(int a) {
  const Tensor& A = nodes_[a].value;
  Tensor out = A;
  for (double& x : out.data) {
    require(x > 0.0, "log: requires strictly positive input");
    x = std::log(x);
  }
  return push(TapeNode{Op::Log, {a}, std::move(out), {}, {}, false});
}

int Tape::gelu(int a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.data) x = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  return push(TapeNode{Op::Gelu, {a}, std::move(out), {}, {}, false});
}

int Tape::row_log_softmax(int a) {
  const Tensor& A = nodes_[a].value;
  require_rank2(A, "row_log_softmax");
  Tensor out = A;
  std::size_t r = A.shape[0], c = A.shape[1];
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
    double lse = m + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return push(TapeNode{Op::RowLogSoftmax, {a}, std::move(out), {}, {}, false});
}

int Tape::row_sum(int a) {
  const Tensor& A = nodes_[a].value;
  require_rank2(A, "row_sum");
  std::size_t r = A.shape[0], c = A.shape[1];
  Tensor out = Tensor::zeros({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += A.data[i * c + j];
    out.data[i] = s;
  }
  return push(TapeNode{Op::RowSum, {a}, std::move(out), {}, {}, false});
}

int Tape::layer_norm(int a, double eps) {
  const Tensor& A = nodes_[a].value;
  require_rank2(A, "layer_norm");
  require(eps >= 0.0, "layer_norm: eps must be nonnegative");
  std::size_t r = A.shape[0], c = A.shape[1];
  Tensor out = A;
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) row[j] = (row[j] - mean) * inv;
  }
  return push(TapeNode{Op::LayerNorm, {a}, std::move(out), {}, {eps}, false});
}

int Tape::embedding_lookup(int table, const std::vector<std::uint32_t>& ids) {
  const Tensor& E = nodes_[table].value;
  require_rank2(E, "embedding_lookup");
  std::size_t v = E.shape[0], d = E.shape[1];
  Tensor out = Tensor::zeros({ids.size(), d});
  std::vector<std::int64_t> iaux(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    require(ids[t] < v, "embedding_lookup: id out of range");
    iaux[t] = ids[t];
    const double* src = E.data.data() + static_cast<std::size_t>(ids[t]) * d;
    double* dst = out.data.data() + t * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  return push(TapeNode{Op::EmbeddingLookup, {table}, std::move(out), std::move(iaux), {}, false});
}

int Tape::slice(int a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const Tensor& A = nodes_[a].value;
  require_rank2(A, "slice");
  require(r0 < r1 && r1 <= A.shape[0] && c0 < c1 && c1 <= A.shape[1],
          "slice: bounds out of range for shape " + A.shape_str());
  std::size_t c = A.shape[1];
  Tensor out = Tensor::zeros({r1 - r0, c1 - c0});
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = c0; j < c1; ++j)
      out.data[(i - r0) * (c1 - c0) + (j - c0)] = A.data[i * c + j];
  return push(TapeNode{Op::Slice, {a}, std::move(out),
                       {static_cast<std::int64_t>(r0), static_cast<std::int64_t>(r1),
                        static_cast<std::int64_t>(c0), static_cast<std::int64_t>(c1)},
                       {},
                       false});
}

int Tape::concat(const std::vector<int>& parts, int axis) {
  require(!parts.empty(), "concat: needs at least one input");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (int p : parts) require_rank2(nodes_[p].value, "concat");
  std::size_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = nodes_[parts[0]].value.shape[1];
    for (int p : parts) {
      require(nodes_[p].value.shape[1] == cols, "concat: column counts disagree");
      rows += nodes_[p].value.shape[0];
    }
  } else {
    rows = nodes_[parts[0]].value.shape[0];
    for (int p : parts) {
      require(nodes_[p].value.shape[0] == rows, "concat: row counts disagree");
      cols += nodes_[p].value.shape[1];
    }
  }
  Tensor out = Tensor::zeros({rows, cols});
  if (axis == 0) {
    std::size_t r = 0;
    for (int p : parts) {
      const Tensor& P = nodes_[p].value;
      std::copy(P.data.begin(), P.data.end(), out.data.begin() + r * cols);
      r += P.shape[0];
    }
  } else {
    std::size_t c = 0;
    for (int p : parts) {
      const Tensor& P = nodes_[p].value;
      std::size_t pc = P.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < pc; ++j) out.data[i * cols + c + j] = P.data[i * pc + j];
      c += pc;
    }
  }
  TapeNode n{Op::Concat, parts, std::move(out), {axis}, {}, false};
  return push(std::move(n));
}

int Tape::reduce_mean(int a) {
  const Tensor& A = nodes_[a].value;
  require(A.numel() > 0, "reduce_mean: empty tensor");
  double s = 0.0;
  for (double x : A.data) s += x;
  return push(TapeNode{Op::ReduceMean, {a}, Tensor::scalar(s / static_cast<double>(A.numel())),
                       {}, {}, false});
}

int Tape::reduce_sum(int a) {
  const Tensor& A = nodes_[a].value;
  double s = 0.0;
  for (double x : A.data) s += x;
  return push(TapeNode{Op::ReduceSum, {a}, Tensor::scalar(s), {}, {}, false});
}

int Tape::gather_logp(int a, const std::vector<std::uint32_t>& ids) {
  const Tensor& A = nodes_[a].value;
  require_rank2(A, "gather_logp");
  require(ids.size() == A.shape[0], "gather_logp: ids length must equal row count");
  Tensor out = Tensor::zeros({ids.size()});
  std::vector<std::int64_t> iaux(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < A.shape[1], "gather_logp: id out of range");
    iaux[i] = ids[i];
    out.data[i] = A.data[i * A.shape[1] + ids[i]];
  }
  return push(TapeNode{Op::GatherLogp, {a}, std::move(out), std::move(iaux), {}, false});
}

ParamGrads Tape::backward(int loss_id) const {
  require(loss_id >= 0 && loss_id < static_cast<int>(nodes_.size()),
          "backward: loss node out of range");
  require(nodes_[loss_id].value.is_scalar(), "backward: loss node must be scalar-shaped");

  // mark nodes on a path to the loss
  std::vector<char> needed(nodes_.size(), 0);
  needed[loss_id] = 1;
  for (int id = loss_id; id >= 0; --id) {
    if (!needed[id]) continue;
    for (int in_id : nodes_[id].inputs) needed[in_id] = 1;
  }

  std::vector<Tensor> grads(nodes_.size());
  auto grad_of = [&](int id) -> Tensor& {
    if (grads[id].data.empty() && nodes_[id].value.numel() > 0)
      grads[id] = Tensor::zeros(nodes_[id].value.shape);
    return grads[id];
  };
  grad_of(loss_id).data[0] = 1.0;

  for (int id = loss_id; id >= 0; --id) {
    if (!needed[id] || grads[id].data.empty()) continue;
    const TapeNode& n = nodes_[id];
    const Tensor& g = grads[id];
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::MatMul: {
        const Tensor& A = in(n, 0);
        const Tensor& B = in(n, 1);
        bool ta = n.iaux[0] != 0, tb = n.iaux[1] != 0;
        std::size_t m = g.shape[0], nn = g.shape[1];
        std::size_t k = ta ? A.shape[0] : A.shape[1];
        Tensor& dA = grad_of(n.inputs[0]);
        Tensor& dB = grad_of(n.inputs[1]);
        const double* gp = g.data.data();
        if (!ta && !tb) {
          detail::dgemm(false, true, m, k, nn, 1.0, gp, nn, B.data.data(), B.shape[1], 1.0,
                        dA.data.data(), k);
          detail::dgemm(true, false, k, nn, m, 1.0, A.data.data(), A.shape[1], gp, nn, 1.0,
                        dB.data.data(), nn);
        } else if (!ta && tb) {
          detail::dgemm(false, false, m, k, nn, 1.0, gp, nn, B.data.data(), B.shape[1], 1.0,
                        dA.data.data(), k);
          detail::dgemm(true, false, nn, k, m, 1.0, gp, nn, A.data.data(), A.shape[1], 1.0,
                        dB.data.data(), k);
        } else if (ta && !tb) {
          detail::dgemm(false, true, k, m, nn, 1.0, B.data.data(), B.shape[1], gp, nn, 1.0,
                        dA.data.data(), m);
          detail::dgemm(false, false, k, nn, m, 1.0, A.data.data(), A.shape[1], gp, nn, 1.0,
                        dB.data.data(), nn);
        } else {
          detail::dgemm(true, true, k, m, nn, 1.0, B.data.data(), B.shape[1], gp, nn, 1.0,
                        dA.data.data(), m);
          detail::dgemm(true, true, nn, k, m, 1.0, gp, nn, A.data.data(), A.shape[1], 1.0,
                        dB.data.data(), k);
        }
        break;
      }
      case Op::Add: {
        Bcast kind = static_cast<Bcast>(n.iaux[0]);
        Tensor& dA = grad_of(n.inputs[0]);
        Tensor& dB = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i];
        switch (kind) {
          case Bcast::Same:
            for (std::size_t i = 0; i < g.data.size(); ++i) dB.data[i] += g.data[i];
            break;
          case Bcast::Scalar: {
            double s = 0.0;
            for (double x : g.data) s += x;
            dB.data[0] += s;
            break;
          }
          case Bcast::RowVec: {
            std::size_t r = g.shape[0], c = g.shape[1];
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) dB.data[j] += g.data[i * c + j];
            break;
          }
        }
        break;
      }
      case Op::Mul: {
        Bcast kind = static_cast<Bcast>(n.iaux[0]);
        const Tensor& A = in(n, 0);
        const Tensor& B = in(n, 1);
        Tensor& dA = grad_of(n.inputs[0]);
        Tensor& dB = grad_of(n.inputs[1]);
        switch (kind) {
          case Bcast::Same:
            for (std::size_t i = 0; i < g.data.size(); ++i) {
              dA.data[i] += g.data[i] * B.data[i];
              dB.data[i] += g.data[i] * A.data[i];
            }
            break;
          case Bcast::Scalar: {
            double v = B.data[0];
            double s = 0.0;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
              dA.data[i] += g.data[i] * v;
              s += g.data[i] * A.data[i];
            }
            dB.data[0] += s;
            break;
          }
          case Bcast::RowVec: {
            std::size_t r = g.shape[0], c = g.shape[1];
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) {
                dA.data[i * c + j] += g.data[i * c + j] * B.data[j];
                dB.data[j] += g.data[i * c + j] * A.data[i * c + j];
              }
            break;
          }
        }
        break;
      }
      case Op::Scale: {
        Tensor& dA = grad_of(n.inputs[0]);
        double c = n.daux[0];
        for (std::size_t i = 0; i < g.data.size(); ++i) dA.data[i] += c * g.data[i];
        break;
      }
      case Op::Exp: {
        Tensor& dA = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i] * n.value.data[i];
        break;
      }
      case Op::Log: {
        const Tensor& A = in(n, 0);
        Tensor& dA = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) dA.data[i] += g.data[i] / A.data[i];
        break;
      }
      case Op::Gelu: {
        const Tensor& A = in(n, 0);
        Tensor& dA = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          double x = A.data[i];
          double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
          double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
          dA.data[i] += g.data[i] * (cdf + x * phi);
        }
        break;
      }
      case Op::RowLogSoftmax: {
        Tensor& dA = grad_of(n.inputs[0]);
        std::size_t r = g.shape[0], c = g.shape[1];
        for (std::size_t i = 0; i < r; ++i) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += g.data[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            dA.data[i * c + j] += g.data[i * c + j] - std::exp(n.value.data[i * c + j]) * gsum;
        }
        break;
      }
      case Op::RowSum: {
        Tensor& dA = grad_of(n.inputs[0]);
        std::size_t r = dA.shape[0], c = dA.shape[1];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dA.data[i * c + j] += g.data[i];
        break;
      }
      case Op::LayerNorm: {
        const Tensor& A = in(n, 0);
        Tensor& dA = grad_of(n.inputs[0]);
        double eps = n.daux[0];
        std::size_t r = A.shape[0], c = A.shape[1];
        double cf = static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          const double* x = A.data.data() + i * c;
          const double* y = n.value.data.data() + i * c;
          const double* gi = g.data.data() + i * c;
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += x[j];
          mean /= cf;
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            double d = x[j] - mean;
            var += d * d;
          }
          var /= cf;
          double inv = 1.0 / std::sqrt(var + eps);
          double gmean = 0.0, gymean = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            gmean += gi[j];
            gymean += gi[j] * y[j];
          }
          gmean /= cf;
          gymean /= cf;
          for (std::size_t j = 0; j < c; ++j)
            dA.data[i * c + j] += inv * (gi[j] - gmean - y[j] * gymean);
        }
        break;
      }
      case Op::EmbeddingLookup: {
        Tensor& dE = grad_of(n.inputs[0]);
        std::size_t d = dE.shape[1];
        for (std::size_t t = 0; t < n.iaux.size(); ++t) {
          double* dst = dE.data.data() + static_cast<std::size_t>(n.iaux[t]) * d;
          const double* src = g.data.data() + t * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::Slice: {
        Tensor& dA = grad_of(n.inputs[0]);
        std::size_t r0 = n.iaux[0], r1 = n.iaux[1], c0 = n.iaux[2], c1 = n.iaux[3];
        std::size_t c = dA.shape[1], w = c1 - c0;
        for (std::size_t i = r0; i < r1; ++i)
          for (std::size_t j = c0; j < c1; ++j)
            dA.data[i * c + j] += g.data[(i - r0) * w + (j - c0)];
        break;
      }
      case Op::Concat: {
        int axis = static_cast<int>(n.iaux[0]);
        std::size_t cols = g.shape[1];
        if (axis == 0) {
          std::size_t r = 0;
          for (int p : n.inputs) {
            Tensor& dP = grad_of(p);
            std::size_t pr = dP.shape[0];
            for (std::size_t i = 0; i < pr * cols; ++i) dP.data[i] += g.data[r * cols + i];
            r += pr;
          }
        } else {
          std::size_t rows = g.shape[0];
          std::size_t c = 0;
          for (int p : n.inputs) {
            Tensor& dP = grad_of(p);
            std::size_t pc = dP.shape[1];
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < pc; ++j)
                dP.data[i * pc + j] += g.data[i * cols + c + j];
            c += pc;
          }
        }
        break;
      }
      case Op::ReduceMean: {
        Tensor& dA = grad_of(n.inputs[0]);
        double v = g.data[0] / static_cast<double>(dA.numel());
        for (double& x : dA.data) x += v;
        break;
      }
      case Op::ReduceSum: {
        Tensor& dA = grad_of(n.inputs[0]);
        double v = g.data[0];
        for (double& x : dA.data) x += v;
        break;
      }
      case Op::GatherLogp: {
        Tensor& dA = grad_of(n.inputs[0]);
        std::size_t c = dA.shape[1];
        for (std::size_t i = 0; i < n.iaux.size(); ++i)
          dA.data[i * c + static_cast<std::size_t>(n.iaux[i])] += g.data[i];
        break;
      }
    }
    // free this node's gradient once propagated; params keep theirs
    if (!n.is_param && id != loss_id) {
      grads[id].data.clear();
      grads[id].data.shrink_to_fit();
    }
  }

  ParamGrads out;
  out.ids = param_ids_;
  out.grads.reserve(param_ids_.size());
  for (int id : param_ids_) {
    if (grads[id].data.empty()) grads[id] = Tensor::zeros(nodes_[id].value.shape);
    out.grads.push_back(std::move(grads[id]));
  }
  return out;
}

}  // namespace salt
