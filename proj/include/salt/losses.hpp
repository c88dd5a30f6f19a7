#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "salt/lm.hpp"
#include "salt/tape.hpp"
#include "salt/tensor.hpp"

namespace salt {

// Per-sequence training objective split into its two ingredients. The
// combined value interpolates them: combined = (1-omega)*standard +
// omega*distill, and each aggregate is the mean of its per-token vector.
struct LossBreakdown {
  double standard = 0.0;
  double distill = 0.0;
  double combined = 0.0;
  std::vector<double> per_token_standard;
  std::vector<double> per_token_distill;
};

// -(1/T) sum_t log P_student(x_t | x_{<t}) over a [T,V] log-probability matrix.
double ce_loss(const Tensor& student_logprobs, std::span<const std::uint32_t> x);

// (1/T) sum_t CE(temperature_scale(teacher_t, rho), student_t). Teacher rows
// receive a 1e-12 uniform guard before scaling so the power never sees log(0).
double kd_loss(const std::vector<Distribution>& teacher, const Tensor& student_logprobs,
               double rho);

LossBreakdown combined_loss(std::span<const std::uint32_t> x, const Tensor& student_logprobs,
                            const std::vector<Distribution>& teacher, double omega, double rho);

// (1-omega) * onehot(x_t) + omega * teacher_scaled.
Distribution mixture_dist(std::uint32_t x_t, const Distribution& teacher_scaled, double omega);

// -sum_i d_i log p_i, skipping zero-probability d entries.
double cross_entropy(const Distribution& d, const Distribution& p);

// Teacher's top-k token set, ascending ids; probability ties keep the smaller id.
std::vector<std::uint32_t> topk_set(const Distribution& d, std::size_t k);

// d restricted to `ids` and renormalized, aligned with `ids`.
std::vector<double> restrict_renormalize(const Distribution& d, std::span<const std::uint32_t> ids);

// Per position: restrict teacher and student to the teacher's top-k set,
// renormalize both, accumulate CE; mean over positions.
double topk_kd_loss(const std::vector<Distribution>& teacher, const Tensor& student_logprobs,
                    std::size_t k);

// --- tape builders (gradients flow to the student only) ---

struct CombinedLossNodes {
  int ce = -1;
  int kd = -1;        // -1 when no teacher is attached (pure CE training)
  int combined = -1;
};

// logprobs: a [R,V] log-probability node; targets: length R.
int build_ce_loss(Tape& tape, int logprobs, std::span<const std::uint32_t> targets);

// teacher holds one (already floored) distribution per row of logprobs.
int build_kd_loss(Tape& tape, int logprobs, const std::vector<Distribution>& teacher, double rho);

// teacher may be empty iff omega is 0.
CombinedLossNodes build_combined_loss(Tape& tape, int logprobs,
                                      std::span<const std::uint32_t> targets,
                                      const std::vector<Distribution>& teacher, double omega,
                                      double rho);

int build_topk_kd_loss(Tape& tape, int logprobs, const std::vector<Distribution>& teacher,
                       std::size_t k);

}  // namespace salt
