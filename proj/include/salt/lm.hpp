#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "salt/rng.hpp"
#include "salt/tape.hpp"
#include "salt/tensor.hpp"

namespace salt {

// Decoder-only transformer: pre-LN blocks, learned absolute positional
// embeddings, multi-head causal attention, GELU MLP, untied input/output
// embeddings. Position t is predicted from BOS followed by the first t-1
// tokens, so P(x_1) is well defined.
struct LmConfig {
  std::size_t vocab_size = 0;  // V, includes the reserved BOS id
  std::size_t max_len = 0;     // longest supported sequence
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;
  double prob_floor = 0.0;  // epsilon in [0, 0.01]; 0 disables the floor
  double init_std = 0.02;
  std::uint32_t bos_id = 0;

  void validate() const;  // throws std::invalid_argument
  std::size_t head_dim() const { return d_model / n_heads; }
};

struct LmModel {
  LmConfig config;
  std::vector<std::string> param_names;  // canonical order, fixed by config
  std::vector<Tensor> params;            // aligned with param_names

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t param_index(const std::string& name) const;  // throws if unknown
  std::size_t total_params() const;
};

// Length-V probability vector; the currency of losses and divergences.
struct Distribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
  double sum() const;
  std::size_t argmax() const;  // ties broken by smallest index
};

// Canonical parameter shapes for a config, in model order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> param_shapes(const LmConfig& cfg);

// Weights ~ Normal(0, init_std^2), LN gains 1, all biases 0. Each tensor is
// filled from its own stream derived from the seed by parameter name, so the
// draw is independent of every other tensor's size.
LmModel init_model(const LmConfig& cfg, const Rng& seed);

// Records the whole forward pass on the tape and returns the node id of the
// [B*T, V] log-probability matrix, where B = tokens.size() / T and row b*T+t
// is log P(v | x^b_{<=t}) for sequence b. param_ids follow param_names order;
// they may be parameter leaves (training) or constants (evaluation).
int build_forward(Tape& tape, const LmConfig& cfg, const std::vector<int>& param_ids,
                  std::span<const std::uint32_t> tokens, std::size_t T);

// Convenience single-sequence evaluation: [T, V] log-probabilities.
Tensor forward_log_probs(const LmModel& model, std::span<const std::uint32_t> x);

// Distribution over the token following the prefix (empty prefix allowed).
Tensor next_token_log_probs(const LmModel& model, std::span<const std::uint32_t> prefix);

// Pushes every parameter onto the tape, as leaves when train is set.
std::vector<int> push_params(Tape& tape, const LmModel& model, bool train);

// (1-eps) * d + eps * uniform; caps per-token loss at log(V/eps).
Distribution apply_floor(const Distribution& d, double eps);

// Output proportional to d^rho, renormalized; computed in log space.
// Requires rho > 0 and strictly positive d (floor first).
Distribution temperature_scale(const Distribution& d, double rho);

// Arg-max next token after the prefix; ties broken by smallest token id.
std::uint32_t greedy_next(const LmModel& model, std::span<const std::uint32_t> prefix);

// Sum over positions of log P(x_t | x_{<t}); equals -T * ce_loss.
double sequence_log_likelihood(const LmModel& model, std::span<const std::uint32_t> x);

// Rows of a [T, V] log-probability matrix as floored distributions.
std::vector<Distribution> dists_from_logprobs(const Tensor& logprobs, double eps);

}  // namespace salt
