#include "salt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace salt {

namespace {

constexpr double kTeacherGuard = 1e-12;  // uniform mix before temperature scaling

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void check_rows(const Tensor& logprobs, std::size_t rows, std::size_t V, const char* who) {
  require(logprobs.rank() == 2, std::string(who) + ": log-probs must be rank-2");
  require(logprobs.rows() == rows, std::string(who) + ": expected " + std::to_string(rows) +
                                       " rows, got " + std::to_string(logprobs.rows()));
  if (V != 0)
    require(logprobs.cols() == V, std::string(who) + ": vocabulary width mismatch");
}

Distribution scaled_teacher(const Distribution& t, double rho) {
  return temperature_scale(apply_floor(t, kTeacherGuard), rho);
}

// temperature-scaled teacher rows as one [R,V] constant
Tensor teacher_matrix(const std::vector<Distribution>& teacher, std::size_t V, double rho) {
  Tensor q = Tensor::zeros({teacher.size(), V});
  for (std::size_t t = 0; t < teacher.size(); ++t) {
    require(teacher[t].size() == V, "teacher row has wrong vocabulary size");
    Distribution row = scaled_teacher(teacher[t], rho);
    for (std::size_t v = 0; v < V; ++v) q.at(t, v) = row[v];
  }
  return q;
}

}  // namespace

double ce_loss(const Tensor& student_logprobs, std::span<const std::uint32_t> x) {
  check_rows(student_logprobs, x.size(), 0, "ce_loss");
  require(!x.empty(), "ce_loss: empty sequence");
  double total = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    require(x[t] < student_logprobs.cols(), "ce_loss: token id out of range");
    total -= student_logprobs.at(t, x[t]);
  }
  return total / static_cast<double>(x.size());
}

double kd_loss(const std::vector<Distribution>& teacher, const Tensor& student_logprobs,
               double rho) {
  require(rho > 0.0, "kd_loss: rho must be positive");
  check_rows(student_logprobs, teacher.size(), 0, "kd_loss");
  require(!teacher.empty(), "kd_loss: empty teacher");
  const std::size_t V = student_logprobs.cols();
  double total = 0.0;
  for (std::size_t t = 0; t < teacher.size(); ++t) {
    require(teacher[t].size() == V, "kd_loss: teacher row has wrong vocabulary size");
    Distribution q = scaled_teacher(teacher[t], rho);
    double ce = 0.0;
    for (std::size_t v = 0; v < V; ++v) ce -= q[v] * student_logprobs.at(t, v);
    total += ce;
  }
  return total / static_cast<double>(teacher.size());
}

LossBreakdown combined_loss(std::span<const std::uint32_t> x, const Tensor& student_logprobs,
                            const std::vector<Distribution>& teacher, double omega, double rho) {
  require(omega >= 0.0 && omega <= 1.0, "combined_loss: omega must be in [0,1]");
  require(teacher.size() == x.size(), "combined_loss: teacher length must match sequence");
  check_rows(student_logprobs, x.size(), 0, "combined_loss");

  LossBreakdown out;
  const std::size_t T = x.size();
  const std::size_t V = student_logprobs.cols();
  out.per_token_standard.resize(T);
  out.per_token_distill.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    require(x[t] < V, "combined_loss: token id out of range");
    out.per_token_standard[t] = -student_logprobs.at(t, x[t]);
    Distribution q = scaled_teacher(teacher[t], rho);
    double ce = 0.0;
    for (std::size_t v = 0; v < V; ++v) ce -= q[v] * student_logprobs.at(t, v);
    out.per_token_distill[t] = ce;
    out.standard += out.per_token_standard[t];
    out.distill += out.per_token_distill[t];
  }
  out.standard /= static_cast<double>(T);
  out.distill /= static_cast<double>(T);
  out.combined = (1.0 - omega) * out.standard + omega * out.distill;
  return out;
}

Distribution mixture_dist(std::uint32_t x_t, const Distribution& teacher_scaled, double omega) {
  require(omega >= 0.0 && omega <= 1.0, "mixture_dist: omega must be in [0,1]");
  require(x_t < teacher_scaled.size(), "mixture_dist: token id out of range");
  Distribution out = teacher_scaled;
  for (double& p : out.probs) p *= omega;
  out.probs[x_t] += 1.0 - omega;
  return out;
}

double cross_entropy(const Distribution& d, const Distribution& p) {
  require(d.size() == p.size(), "cross_entropy: size mismatch");
  double ce = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] == 0.0) continue;
    require(p[i] > 0.0, "cross_entropy: zero probability under a supported token");
    ce -= d[i] * std::log(p[i]);
  }
  return ce;
}

std::vector<std::uint32_t> topk_set(const Distribution& d, std::size_t k) {
  require(k >= 1 && k <= d.size(), "topk_set: k out of range");
  std::vector<std::uint32_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (d[a] != d[b]) return d[a] > d[b];
    return a < b;  // ties keep the smaller id
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<double> restrict_renormalize(const Distribution& d,
                                         std::span<const std::uint32_t> ids) {
  double mass = 0.0;
  for (std::uint32_t i : ids) mass += d[i];
  require(mass > 0.0, "restrict_renormalize: restricted mass is zero");
  std::vector<double> out;
  out.reserve(ids.size());
  for (std::uint32_t i : ids) out.push_back(d[i] / mass);
  return out;
}

double topk_kd_loss(const std::vector<Distribution>& teacher, const Tensor& student_logprobs,
                    std::size_t k) {
  check_rows(student_logprobs, teacher.size(), 0, "topk_kd_loss");
  require(!teacher.empty(), "topk_kd_loss: empty teacher");
  const std::size_t V = student_logprobs.cols();
  require(k >= 1 && k <= V, "topk_kd_loss: k out of range");

  double total = 0.0;
  for (std::size_t t = 0; t < teacher.size(); ++t) {
    require(teacher[t].size() == V, "topk_kd_loss: teacher row has wrong vocabulary size");
    std::vector<std::uint32_t> ids = topk_set(teacher[t], k);
    std::vector<double> q = restrict_renormalize(teacher[t], ids);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::uint32_t i : ids) mx = std::max(mx, student_logprobs.at(t, i));
    double z = 0.0;
    for (std::uint32_t i : ids) z += std::exp(student_logprobs.at(t, i) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < ids.size(); ++j)
      total -= q[j] * (student_logprobs.at(t, ids[j]) - lse);
  }
  return total / static_cast<double>(teacher.size());
}

int build_ce_loss(Tape& tape, int logprobs, std::span<const std::uint32_t> targets) {
  check_rows(tape.value(logprobs), targets.size(), 0, "build_ce_loss");
  std::vector<std::uint32_t> ids(targets.begin(), targets.end());
  return tape.scale(tape.reduce_mean(tape.gather_logp(logprobs, ids)), -1.0);
}

int build_kd_loss(Tape& tape, int logprobs, const std::vector<Distribution>& teacher, double rho) {
  require(rho > 0.0, "build_kd_loss: rho must be positive");
  const Tensor& lp = tape.value(logprobs);
  check_rows(lp, teacher.size(), 0, "build_kd_loss");
  int q = tape.constant(teacher_matrix(teacher, lp.cols(), rho));
  const double inv_rows = 1.0 / static_cast<double>(teacher.size());
  return tape.scale(tape.reduce_sum(tape.mul(q, logprobs)), -inv_rows);
}

CombinedLossNodes build_combined_loss(Tape& tape, int logprobs,
                                      std::span<const std::uint32_t> targets,
                                      const std::vector<Distribution>& teacher, double omega,
                                      double rho) {
  require(omega >= 0.0 && omega <= 1.0, "build_combined_loss: omega must be in [0,1]");
  CombinedLossNodes nodes;
  nodes.ce = build_ce_loss(tape, logprobs, targets);
  if (teacher.empty()) {
    require(omega == 0.0, "build_combined_loss: teacher required when omega > 0");
    nodes.combined = nodes.ce;
    return nodes;
  }
  require(teacher.size() == targets.size(), "build_combined_loss: teacher length mismatch");
  nodes.kd = build_kd_loss(tape, logprobs, teacher, rho);
  nodes.combined = tape.add(tape.scale(nodes.ce, 1.0 - omega), tape.scale(nodes.kd, omega));
  return nodes;
}

int build_topk_kd_loss(Tape& tape, int logprobs, const std::vector<Distribution>& teacher,
                       std::size_t k) {
  const Tensor& lp = tape.value(logprobs);
  check_rows(lp, teacher.size(), 0, "build_topk_kd_loss");
  const std::size_t R = teacher.size(), V = lp.cols();
  require(k >= 1 && k <= V, "build_topk_kd_loss: k out of range");

  Tensor neg_q = Tensor::zeros({R, V});  // -restricted teacher on the support
  // per-row shift: -max(support logp) on the support, -1e9 off it, so the
  // off-support terms of the row sum underflow to exactly zero
  Tensor shift = Tensor::full({R, V}, -1e9);
  Tensor max_col = Tensor::zeros({R, 1});
  for (std::size_t t = 0; t < R; ++t) {
    require(teacher[t].size() == V, "build_topk_kd_loss: teacher row has wrong vocabulary size");
    std::vector<std::uint32_t> ids = topk_set(teacher[t], k);
    std::vector<double> q = restrict_renormalize(teacher[t], ids);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::uint32_t i : ids) mx = std::max(mx, lp.at(t, i));
    max_col.at(t, 0) = mx;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      neg_q.at(t, ids[j]) = -q[j];
      shift.at(t, ids[j]) = -mx;
    }
  }
  // loss = (1/R) sum_t [ -sum_{i in support} q_i logp_i + logsumexp_support(logp) ]
  int dot = tape.reduce_sum(tape.mul(tape.constant(std::move(neg_q)), logprobs));
  int subset = tape.row_sum(tape.exp_(tape.add(logprobs, tape.constant(std::move(shift)))));
  int lse = tape.reduce_sum(tape.add(tape.log_(subset), tape.constant(std::move(max_col))));
  return tape.scale(tape.add(dot, lse), 1.0 / static_cast<double>(R));
}

}  // namespace salt
