#include "salt/lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace salt {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskedScore = -1e9;

// param_ids layout, mirroring param_shapes order
constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kPerLayer = 12;
enum LayerSlot { kLn1Gain, kLn1Bias, kWq, kWk, kWv, kWo, kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2 };

std::size_t layer_base(std::size_t layer) { return 2 + kPerLayer * layer; }

std::size_t expected_param_count(const LmConfig& cfg) { return layer_base(cfg.n_layers) + 3; }

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// forward over already BOS-shifted input ids; returns [B*T, V] log-probs node
int build_from_inputs(Tape& tape, const LmConfig& cfg, const std::vector<int>& p,
                      const std::vector<std::uint32_t>& input, std::size_t T) {
  const std::size_t B = input.size() / T;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.head_dim();

  std::vector<std::uint32_t> pos(input.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) pos[b * T + t] = static_cast<std::uint32_t>(t);

  int x = tape.add(tape.embedding_lookup(p[kTokEmb], input),
                   tape.embedding_lookup(p[kPosEmb], pos));

  Tensor mask = Tensor::zeros({T, T});
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) mask.at(i, j) = kMaskedScore;
  const int mask_id = tape.constant(std::move(mask));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::size_t base = layer_base(layer);
    int ln1 = tape.add(tape.mul(tape.layer_norm(x, kLnEps), p[base + kLn1Gain]),
                       p[base + kLn1Bias]);
    int q = tape.matmul(ln1, p[base + kWq]);
    int k = tape.matmul(ln1, p[base + kWk]);
    int v = tape.matmul(ln1, p[base + kWv]);

    std::vector<int> seq_outs;
    seq_outs.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<int> head_outs;
      head_outs.reserve(H);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t r0 = b * T, r1 = (b + 1) * T;
        const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
        int qs = tape.slice(q, r0, r1, c0, c1);
        int ks = tape.slice(k, r0, r1, c0, c1);
        int vs = tape.slice(v, r0, r1, c0, c1);
        // masked scores underflow to weight exactly 0 after exp, so row t
        // never mixes in positions past t
        int scores = tape.add(tape.scale(tape.matmul(qs, ks, false, true), inv_sqrt_dh), mask_id);
        int w = tape.exp_(tape.row_log_softmax(scores));
        head_outs.push_back(tape.matmul(w, vs));
      }
      seq_outs.push_back(H == 1 ? head_outs[0] : tape.concat(head_outs, 1));
    }
    int attn = B == 1 ? seq_outs[0] : tape.concat(seq_outs, 0);
    x = tape.add(x, tape.matmul(attn, p[base + kWo]));

    int ln2 = tape.add(tape.mul(tape.layer_norm(x, kLnEps), p[base + kLn2Gain]),
                       p[base + kLn2Bias]);
    int h1 = tape.gelu(tape.add(tape.matmul(ln2, p[base + kW1]), p[base + kB1]));
    int h2 = tape.add(tape.matmul(h1, p[base + kW2]), p[base + kB2]);
    x = tape.add(x, h2);
  }

  const std::size_t fin = layer_base(cfg.n_layers);
  int ln_f = tape.add(tape.mul(tape.layer_norm(x, kLnEps), p[fin]), p[fin + 1]);
  return tape.row_log_softmax(tape.matmul(ln_f, p[fin + 2]));
}

void check_token_ids(std::span<const std::uint32_t> tokens, std::size_t V, const char* who) {
  for (std::uint32_t id : tokens)
    require(id < V, std::string(who) + ": token id " + std::to_string(id) +
                        " out of range for vocabulary of " + std::to_string(V));
}

}  // namespace

void LmConfig::validate() const {
  require(vocab_size >= 2, "LmConfig: vocab_size must be at least 2");
  require(max_len >= 1, "LmConfig: max_len must be positive");
  require(d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_ff >= 1,
          "LmConfig: dimensions must be positive");
  require(d_model % n_heads == 0, "LmConfig: d_model must be divisible by n_heads");
  require(prob_floor >= 0.0 && prob_floor <= 0.01, "LmConfig: prob_floor must be in [0, 0.01]");
  require(init_std >= 0.0, "LmConfig: init_std must be nonnegative");
  require(bos_id < vocab_size, "LmConfig: bos_id must be a vocabulary id");
}

const Tensor& LmModel::param(const std::string& name) const { return params[param_index(name)]; }

Tensor& LmModel::param(const std::string& name) { return params[param_index(name)]; }

std::size_t LmModel::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < param_names.size(); ++i)
    if (param_names[i] == name) return i;
  throw std::invalid_argument("LmModel: unknown parameter " + name);
}

std::size_t LmModel::total_params() const {
  std::size_t n = 0;
  for (const Tensor& p : params) n += p.numel();
  return n;
}

double Distribution::sum() const {
  double s = 0.0;
  for (double p : probs) s += p;
  return s;
}

std::size_t Distribution::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> param_shapes(const LmConfig& cfg) {
  cfg.validate();
  const std::size_t V = cfg.vocab_size, d = cfg.d_model, ff = cfg.d_ff;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.push_back({"tok_emb", {V, d}});
  out.push_back({"pos_emb", {cfg.max_len, d}});
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    out.push_back({prefix + "ln1.gain", {d}});
    out.push_back({prefix + "ln1.bias", {d}});
    out.push_back({prefix + "attn.wq", {d, d}});
    out.push_back({prefix + "attn.wk", {d, d}});
    out.push_back({prefix + "attn.wv", {d, d}});
    out.push_back({prefix + "attn.wo", {d, d}});
    out.push_back({prefix + "ln2.gain", {d}});
    out.push_back({prefix + "ln2.bias", {d}});
    out.push_back({prefix + "mlp.w1", {d, ff}});
    out.push_back({prefix + "mlp.b1", {ff}});
    out.push_back({prefix + "mlp.w2", {ff, d}});
    out.push_back({prefix + "mlp.b2", {d}});
  }
  out.push_back({"final_ln.gain", {d}});
  out.push_back({"final_ln.bias", {d}});
  out.push_back({"head.w", {d, V}});
  return out;
}

LmModel init_model(const LmConfig& cfg, const Rng& seed) {
  LmModel model;
  model.config = cfg;
  for (auto& [name, shape] : param_shapes(cfg)) {
    Tensor t = Tensor::zeros(shape);
    const bool is_gain = name.find(".gain") != std::string::npos;
    const bool is_bias = name.find(".bias") != std::string::npos ||
                         name.ends_with(".b1") || name.ends_with(".b2");
    if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (name == "pos_emb") {
      // learned table, but started at fixed sinusoids so positions are
      // distinguishable even when init_std is zero
      const std::size_t d = cfg.d_model;
      for (std::size_t p = 0; p < cfg.max_len; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
          const double freq = std::pow(10000.0, -2.0 * double(i / 2) / double(d));
          const double angle = double(p) * freq;
          t.data[p * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
      }
    } else if (!is_bias) {
      Rng stream = seed.derive(name);
      for (double& v : t.data) v = cfg.init_std * stream.next_normal();
    }
    model.param_names.push_back(name);
    model.params.push_back(std::move(t));
  }
  return model;
}

int build_forward(Tape& tape, const LmConfig& cfg, const std::vector<int>& param_ids,
                  std::span<const std::uint32_t> tokens, std::size_t T) {
  cfg.validate();
  require(param_ids.size() == expected_param_count(cfg),
          "build_forward: param_ids does not match the config's parameter list");
  require(T >= 1 && T <= cfg.max_len,
          "build_forward: sequence length " + std::to_string(T) + " exceeds max_len " +
              std::to_string(cfg.max_len));
  require(!tokens.empty() && tokens.size() % T == 0,
          "build_forward: token buffer must hold whole sequences");
  check_token_ids(tokens, cfg.vocab_size, "build_forward");

  std::vector<std::uint32_t> input(tokens.size());
  const std::size_t B = tokens.size() / T;
  for (std::size_t b = 0; b < B; ++b) {
    input[b * T] = cfg.bos_id;
    for (std::size_t t = 1; t < T; ++t) input[b * T + t] = tokens[b * T + t - 1];
  }
  return build_from_inputs(tape, cfg, param_ids, input, T);
}

std::vector<int> push_params(Tape& tape, const LmModel& model, bool train) {
  std::vector<int> ids;
  ids.reserve(model.params.size());
  for (const Tensor& p : model.params) ids.push_back(train ? tape.leaf(p, true) : tape.constant(p));
  return ids;
}

Tensor forward_log_probs(const LmModel& model, std::span<const std::uint32_t> x) {
  Tape tape;
  std::vector<int> ids = push_params(tape, model, false);
  return tape.value(build_forward(tape, model.config, ids, x, x.size()));
}

Tensor next_token_log_probs(const LmModel& model, std::span<const std::uint32_t> prefix) {
  const LmConfig& cfg = model.config;
  cfg.validate();
  require(prefix.size() < cfg.max_len, "next_token_log_probs: prefix must be shorter than max_len");
  check_token_ids(prefix, cfg.vocab_size, "next_token_log_probs");

  std::vector<std::uint32_t> input;
  input.reserve(prefix.size() + 1);
  input.push_back(cfg.bos_id);
  input.insert(input.end(), prefix.begin(), prefix.end());

  Tape tape;
  std::vector<int> ids = push_params(tape, model, false);
  const Tensor& all = tape.value(build_from_inputs(tape, cfg, ids, input, input.size()));
  Tensor row = Tensor::zeros({cfg.vocab_size});
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) row.data[v] = all.at(all.rows() - 1, v);
  return row;
}

Distribution apply_floor(const Distribution& d, double eps) {
  require(eps >= 0.0 && eps <= 1.0, "apply_floor: eps must be in [0, 1]");
  if (eps == 0.0) return d;
  const double u = eps / static_cast<double>(d.size());
  Distribution out = d;
  for (double& p : out.probs) p = (1.0 - eps) * p + u;
  return out;
}

Distribution temperature_scale(const Distribution& d, double rho) {
  require(rho > 0.0, "temperature_scale: rho must be positive");
  if (rho == 1.0) {
    // identity power; return the input untouched so callers comparing against
    // the original distribution see exact equality
    for (std::size_t i = 0; i < d.size(); ++i)
      require(d[i] > 0.0, "temperature_scale: distribution must be strictly positive");
    return d;
  }
  Distribution out = d;
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d.size(); ++i) {
    require(d[i] > 0.0, "temperature_scale: distribution must be strictly positive");
    out.probs[i] = rho * std::log(d[i]);
    max_log = std::max(max_log, out.probs[i]);
  }
  double z = 0.0;
  for (double& p : out.probs) {
    p = std::exp(p - max_log);
    z += p;
  }
  for (double& p : out.probs) p /= z;
  return out;
}

std::uint32_t greedy_next(const LmModel& model, std::span<const std::uint32_t> prefix) {
  const Tensor row = next_token_log_probs(model, prefix);
  std::size_t best = 0;
  for (std::size_t v = 1; v < row.numel(); ++v)
    if (row.data[v] > row.data[best]) best = v;
  return static_cast<std::uint32_t>(best);
}

double sequence_log_likelihood(const LmModel& model, std::span<const std::uint32_t> x) {
  const Tensor logp = forward_log_probs(model, x);
  double ll = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) ll += logp.at(t, x[t]);
  return ll;
}

std::vector<Distribution> dists_from_logprobs(const Tensor& logprobs, double eps) {
  std::vector<Distribution> out;
  out.reserve(logprobs.rows());
  for (std::size_t r = 0; r < logprobs.rows(); ++r) {
    Distribution d;
    d.probs.resize(logprobs.cols());
    for (std::size_t c = 0; c < logprobs.cols(); ++c) d.probs[c] = std::exp(logprobs.at(r, c));
    out.push_back(eps > 0.0 ? apply_floor(d, eps) : std::move(d));
  }
  return out;
}

}  // namespace salt
