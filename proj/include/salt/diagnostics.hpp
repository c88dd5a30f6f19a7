#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "salt/lm.hpp"
#include "salt/synth.hpp"

namespace salt {

// (1/2) sum_v |p(v) - q(v)|
double tv_distance(const Distribution& p, const Distribution& q);

// Unbiased sample variance via the stable one-pass mean/M2 recurrence;
// algebraically equal to the pairwise form (1/(N(N-1))) sum_{i<j} (f_i-f_j)^2.
double sample_variance(std::span<const double> values);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Inputs shared by the theory probes. The student is evaluated against exact
// source conditionals; when omega > 0 a teacher must be supplied, either as a
// model or as an oracle table whose exact conditionals stand in for teacher
// predictions (at most one of the two). floor_eps > 0 mixes every student row
// toward uniform, which caps per-token losses at log(V / floor_eps). Exact
// enumeration refuses to visit more than node_cap sequences.
struct TheoryEnv {
  const GroundTruthSource* source = nullptr;
  const LmModel* student = nullptr;
  const LmModel* teacher = nullptr;
  const GroundTruthSource* teacher_oracle = nullptr;
  double omega = 0.0;
  double rho = 1.0;
  std::size_t seq_len = 0;  // T
  double floor_eps = 0.0;
  std::size_t node_cap = std::size_t{1} << 20;

  void validate() const;
};

// Teacher-vs-truth divergence: omega * sum_{t<=T} E over length-(t-1)
// prefixes of TV(scaled teacher conditional, true conditional). Exact mode
// enumerates every prefix weighted by its source probability; the MC mode
// averages whole-sequence contributions over sampled sequences.
double divergence_term(const TheoryEnv& env);
McEstimate divergence_term_mc(const TheoryEnv& env, std::size_t n_samples, const Rng& seed);

// Combined loss of one sequence against exact conditionals:
// (1/T) sum_t [(1-omega) * nll(x_t) + omega * CE(scaled teacher row, student)].
double sequence_loss_omega(const TheoryEnv& env, std::span<const std::uint32_t> x);

// Population quantities by exhaustive prefix enumeration.
double population_risk_omega(const TheoryEnv& env);  // E[l^omega]
double population_risk_ce(const TheoryEnv& env);     // E[l], ignores omega
double bayes_risk(const TheoryEnv& env);             // source entropy rate per token

// One-step loss martingale difference: the expected combined loss given the
// first t-1 tokens of x minus the expectation given the first t. Exact mode
// enumerates the suffix tree below x_{<t} (V^(T-t+1) leaves, capped); the MC
// mode samples suffix completions and reports a standard error.
double xi_exact(const TheoryEnv& env, std::span<const std::uint32_t> x, std::size_t t);
McEstimate xi_mc(const TheoryEnv& env, std::span<const std::uint32_t> x, std::size_t t,
                 std::size_t n_samples, const Rng& seed);

// Per-position deviation and variance proxies: c_t bounds |xi_t| and v_t
// bounds E[xi_t^2 | prefix]. The exhaustive form takes true suprema over the
// whole sequence space; the sampled form reports estimates from sampled
// sequences (inner xi values via MC when exact subtrees are out of reach).
struct XiStats {
  std::vector<double> c_t;
  std::vector<double> v_t;
};
XiStats xi_stats_exhaustive(const TheoryEnv& env);
XiStats xi_stats_sampled(const TheoryEnv& env, std::size_t n_sequences, std::size_t mc_samples,
                         const Rng& seed);

// Last-position variance identity: for each omega, the exact conditional
// second moment E[xi_T^2 | prefix] averaged over the given prefixes, next to
// the closed-form reference (1-omega)^2 * Var[(1/T) log P(x_T | prefix)].
struct VarianceReductionRow {
  double omega = 0.0;
  double second_moment = 0.0;
  double reference = 0.0;
  bool agrees = false;  // relative gap within 1e-9
};
struct VarianceReductionTable {
  std::vector<VarianceReductionRow> rows;
  bool non_increasing = false;
};
VarianceReductionTable variance_reduction_check(
    const TheoryEnv& env, std::span<const double> omega_grid,
    const std::vector<std::vector<std::uint32_t>>& prefixes);

// High-probability bound on the population combined risk: empirical risk plus
// a variance term sqrt(2 (sum_t v_t) / N * log(card/delta)), an extreme-value
// term 2c/(3N) * log(card/delta), and the scaled teacher divergence
// (4 m / T) * div. log_card is the caller's log-cardinality proxy for the
// hypothesis class; div is the divergence_term value (already omega-scaled).
struct BoundBreakdown {
  double empirical_risk = 0.0;
  double variance_addend = 0.0;
  double extreme_addend = 0.0;
  double divergence_addend = 0.0;
  double value = 0.0;
};
BoundBreakdown generalization_bound(double empirical_risk, std::span<const double> v_t, double c,
                                    double m, double omega, double div, std::size_t n,
                                    double log_card, double delta);

// Exact two-sided check that mixing the training target moves the population
// risk by at most the scaled divergence: lhs = |E[l] - E[l^omega]| with the
// student floored so per-token losses stay within m; rhs = (4 m omega / T) *
// sum_t E[TV(scaled teacher, truth)].
struct RiskGap {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};
RiskGap risk_gap_check(const TheoryEnv& env, double m);

// Surrogate-to-0/1 calibration: g(eps) = ((1-eps)log(1-eps)+(1+eps)log(1+eps))/2
// on [0,1] (g(1) = log 2 by continuity), with a bisection inverse on
// [0, log 2] resolved to 1e-10.
double calibration_g(double eps);
double calibration_g_inv(double y);

// Per-token greedy error rate under the true distribution:
// (1/T) sum_t E_prefix[1 - D(greedy(prefix) | prefix)], in [0,1].
double zero_one_risk_exact(const TheoryEnv& env);
McEstimate zero_one_risk_mc(const TheoryEnv& env, std::size_t n_samples, const Rng& seed);

// Everything above, assembled over a training corpus. Exact mode is chosen
// when V^T fits node_cap, otherwise the MC estimators run with mc_samples
// draws. The student is floored from m for every bounded-loss quantity.
struct DiagnosticsReport {
  bool exact = true;
  double omega = 0.0;
  double rho = 1.0;
  double m = 0.0;
  double delta = 0.1;
  double log_card = 0.0;
  double div_term = 0.0;
  double div_std_error = 0.0;
  double v_n = 0.0;  // sample variance of per-sequence combined losses
  XiStats per_t;
  double c = 0.0;  // max_t c_t
  BoundBreakdown bound;
  RiskGap risk_gap;
  double risk_gap_lhs_se = 0.0;  // nonzero only in MC mode
  VarianceReductionTable variance_identity;
  double zero_one = 0.0;
  double zero_one_se = 0.0;
  double population_ce = 0.0;
  double bayes = 0.0;
  double excess01_bound = 0.0;  // g_inv of the (clamped) CE gap over bayes
  std::vector<std::string> notes;
};

struct DiagnosticsOptions {
  double m = 0.0;  // per-token loss bound; 0 disables flooring
  double delta = 0.1;
  double log_card = 0.0;
  std::vector<double> omega_grid = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t variance_prefixes = 64;  // corpus prefixes fed to the identity table
  std::size_t mc_samples = 4096;       // sequence draws per MC estimator
  std::size_t xi_sequences = 32;       // sampled mode: sequences for c_t/v_t
  std::size_t xi_mc_samples = 64;      // sampled mode: suffix draws inside xi
  std::uint64_t seed = 0;
};

DiagnosticsReport build_diagnostics_report(const TheoryEnv& env, const Corpus& corpus,
                                           const DiagnosticsOptions& opts);

std::string report_json(const DiagnosticsReport& report);
void write_report_json(const std::string& path, const DiagnosticsReport& report);
void write_variance_csv(const std::string& path, const VarianceReductionTable& table);

}  // namespace salt
