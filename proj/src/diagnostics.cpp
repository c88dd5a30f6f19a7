#include "salt/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "salt/parallel.hpp"

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// V^T if it stays within cap, otherwise nothing.
bool fits_cap(std::size_t v, std::size_t t, std::size_t cap) {
  std::size_t total = 1;
  for (std::size_t i = 0; i < t; ++i) {
    if (total > cap / v) return false;
    total *= v;
  }
  return total <= cap;
}

std::vector<std::uint32_t> decode_prefix(std::size_t id, std::size_t len, std::size_t v) {
  std::vector<std::uint32_t> p(len);
  for (std::size_t i = len; i-- > 0;) {
    p[i] = static_cast<std::uint32_t>(id % v);
    id /= v;
  }
  return p;
}

// Everything the probes need at one prefix: the true next-token distribution,
// the (optionally floored) student distribution, and when a teacher is in
// play its temperature-scaled row plus the cross entropy against the student.
struct NodeEval {
  Distribution src;
  Distribution stu;
  Distribution teach;
  double kd = 0.0;
};

Distribution student_next(const LmModel& model, std::span<const std::uint32_t> prefix,
                          double floor_eps) {
  Tensor lp = next_token_log_probs(model, prefix);
  Distribution d;
  d.probs.resize(lp.data.size());
  for (std::size_t i = 0; i < lp.data.size(); ++i) d.probs[i] = std::exp(lp.data[i]);
  return floor_eps > 0.0 ? apply_floor(d, floor_eps) : d;
}

Distribution teacher_next(const TheoryEnv& env, std::span<const std::uint32_t> prefix) {
  return env.teacher_oracle != nullptr ? true_conditional(*env.teacher_oracle, prefix)
                                       : student_next(*env.teacher, prefix, 0.0);
}

// Raw (unscaled) teacher rows for every position of x; one batched forward
// when the teacher is a model.
std::vector<Distribution> teacher_rows(const TheoryEnv& env, std::span<const std::uint32_t> x) {
  if (env.teacher_oracle == nullptr)
    return dists_from_logprobs(forward_log_probs(*env.teacher, x), 0.0);
  std::vector<Distribution> rows;
  rows.reserve(x.size());
  for (std::size_t t = 0; t < x.size(); ++t)
    rows.push_back(true_conditional(*env.teacher_oracle, x.first(t)));
  return rows;
}

NodeEval eval_node(const TheoryEnv& env, std::span<const std::uint32_t> prefix,
                   bool with_teacher) {
  NodeEval n;
  n.src = true_conditional(*env.source, prefix);
  n.stu = student_next(*env.student, prefix, env.floor_eps);
  if (with_teacher) {
    n.teach = temperature_scale(teacher_next(env, prefix), env.rho);
    double kd = 0.0;
    for (std::size_t u = 0; u < n.teach.size(); ++u) {
      kd -= n.teach[u] * std::log(n.stu[u]);
    }
    n.kd = kd;
  }
  return n;
}

double node_combined_cost(const NodeEval& node, double omega, std::uint32_t v) {
  return (1.0 - omega) * (-std::log(node.stu[v])) + omega * node.kd;
}

// Expected cost of all positions strictly after the prefix, enumerating the
// whole subtree. Prefix is mutated in place and restored.
double expected_future(const TheoryEnv& env, std::vector<std::uint32_t>& prefix,
                       bool with_teacher) {
  NodeEval node = eval_node(env, prefix, with_teacher);
  const std::size_t v_count = node.src.size();
  double total = 0.0;
  for (std::uint32_t v = 0; v < v_count; ++v) {
    double below = 0.0;
    if (prefix.size() + 1 < env.seq_len) {
      prefix.push_back(v);
      below = expected_future(env, prefix, with_teacher);
      prefix.pop_back();
    }
    total += node.src[v] * (node_combined_cost(node, env.omega, v) + below);
  }
  return total;
}

// Exhaustive pass over every prefix level, weighted by source probability.
// All population quantities fall out of one walk.
struct SweepTotals {
  double ce = 0.0;        // sum_t E[-log P_student(x_t | prefix)]
  double kd = 0.0;        // sum_t E[CE(scaled teacher row, student row)]
  double entropy = 0.0;   // sum_t E[H(D(. | prefix))]
  double tv = 0.0;        // sum_t E[TV(scaled teacher row, D)]
  double zero_one = 0.0;  // sum_t E[1 - D(greedy | prefix)]
};

SweepTotals level_sweep(const TheoryEnv& env, bool with_teacher) {
  const std::size_t v_count = env.source->vocab_size;
  const std::size_t t_len = env.seq_len;
  require(fits_cap(v_count, t_len, env.node_cap),
          "diagnostics: exact enumeration needs V^T <= node_cap (V=" + std::to_string(v_count) +
              ", T=" + std::to_string(t_len) + ", cap=" + std::to_string(env.node_cap) + ")");

  SweepTotals tot;
  std::vector<double> prob{1.0};
  for (std::size_t level = 0; level < t_len; ++level) {
    const std::size_t n_nodes = prob.size();
    const bool expand = level + 1 < t_len;
    struct Part {
      double ce = 0.0, kd = 0.0, entropy = 0.0, tv = 0.0, zero_one = 0.0;
    };
    std::vector<Part> parts(n_nodes);
    std::vector<double> next(expand ? n_nodes * v_count : 0);
    parallel_for(n_nodes, [&](std::size_t id) {
      const std::vector<std::uint32_t> prefix = decode_prefix(id, level, v_count);
      const NodeEval node = eval_node(env, prefix, with_teacher);
      const double p = prob[id];
      double ce = 0.0, entropy = 0.0, tv = 0.0;
      for (std::size_t v = 0; v < v_count; ++v) {
        ce += node.src[v] * (-std::log(node.stu[v]));
        if (node.src[v] > 0.0) entropy -= node.src[v] * std::log(node.src[v]);
        if (with_teacher) tv += 0.5 * std::abs(node.teach[v] - node.src[v]);
      }
      parts[id].ce = p * ce;
      parts[id].kd = p * node.kd;
      parts[id].entropy = p * entropy;
      parts[id].tv = p * tv;
      parts[id].zero_one = p * (1.0 - node.src[node.stu.argmax()]);
      if (expand) {
        for (std::size_t v = 0; v < v_count; ++v) next[id * v_count + v] = p * node.src.probs[v];
      }
    });
    for (const Part& part : parts) {
      tot.ce += part.ce;
      tot.kd += part.kd;
      tot.entropy += part.entropy;
      tot.tv += part.tv;
      tot.zero_one += part.zero_one;
    }
    prob = std::move(next);
  }
  return tot;
}

// Per-token CE and KD components of one sequence, from one forward pass per
// model. Combined loss is (1-omega)*ce + omega*kd.
std::pair<double, double> seq_ce_kd(const TheoryEnv& env, std::span<const std::uint32_t> x,
                                    bool with_teacher) {
  const std::size_t t_len = x.size();
  const Tensor stu_lp = forward_log_probs(*env.student, x);
  const std::vector<Distribution> stu = dists_from_logprobs(stu_lp, env.floor_eps);
  std::vector<Distribution> teach;
  if (with_teacher) {
    teach = teacher_rows(env, x);
    for (Distribution& d : teach) d = temperature_scale(d, env.rho);
  }
  double ce = 0.0;
  double kd = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    ce -= std::log(stu[t][x[t]]);
    if (with_teacher) {
      for (std::size_t u = 0; u < stu[t].size(); ++u) kd -= teach[t][u] * std::log(stu[t][u]);
    }
  }
  return {ce / double(t_len), kd / double(t_len)};
}

// Continuation of x after keep tokens, drawn from the source.
std::vector<std::uint32_t> sample_completion(const GroundTruthSource& source,
                                             std::span<const std::uint32_t> x, std::size_t keep,
                                             std::size_t t_len, Rng& rng) {
  std::vector<std::uint32_t> z(x.begin(), x.begin() + keep);
  z.reserve(t_len);
  while (z.size() < t_len) {
    const Distribution d = true_conditional(source, z);
    z.push_back(sample_from(d, rng.next_double()));
  }
  return z;
}

McEstimate mean_with_se(std::span<const double> values) {
  McEstimate e;
  double sum = 0.0;
  for (double x : values) sum += x;
  e.value = sum / double(values.size());
  if (values.size() > 1) e.std_error = std::sqrt(sample_variance(values) / double(values.size()));
  return e;
}

bool has_teacher(const TheoryEnv& env) {
  return env.teacher != nullptr || env.teacher_oracle != nullptr;
}

bool teacher_in_play(const TheoryEnv& env) { return has_teacher(env) && env.omega > 0.0; }

}  // namespace

void TheoryEnv::validate() const {
  require(source != nullptr, "TheoryEnv: source is required");
  require(student != nullptr, "TheoryEnv: student is required");
  source->validate();
  require(student->config.vocab_size == source->vocab_size,
          "TheoryEnv: student vocab must match the source");
  require(seq_len >= 1, "TheoryEnv: seq_len must be at least 1");
  require(student->config.max_len >= seq_len, "TheoryEnv: student max_len must cover seq_len");
  require(std::isfinite(omega) && omega >= 0.0 && omega <= 1.0,
          "TheoryEnv: omega must be in [0, 1]");
  require(omega == 0.0 || teacher != nullptr || teacher_oracle != nullptr,
          "TheoryEnv: a teacher is required when omega > 0");
  require(teacher == nullptr || teacher_oracle == nullptr,
          "TheoryEnv: supply either a teacher model or a teacher oracle, not both");
  if (teacher != nullptr) {
    require(teacher->config.vocab_size == source->vocab_size,
            "TheoryEnv: teacher vocab must match the source");
    require(teacher->config.max_len >= seq_len, "TheoryEnv: teacher max_len must cover seq_len");
  }
  if (teacher_oracle != nullptr) {
    teacher_oracle->validate();
    require(teacher_oracle->vocab_size == source->vocab_size,
            "TheoryEnv: teacher oracle vocab must match the source");
    for (double p : teacher_oracle->initial)
      require(p > 0.0, "TheoryEnv: teacher oracle rows must be strictly positive");
    for (double p : teacher_oracle->table)
      require(p > 0.0, "TheoryEnv: teacher oracle rows must be strictly positive");
  }
  if (teacher != nullptr || teacher_oracle != nullptr)
    require(std::isfinite(rho) && rho > 0.0, "TheoryEnv: rho must be positive");
  require(std::isfinite(floor_eps) && floor_eps >= 0.0 && floor_eps <= 1.0,
          "TheoryEnv: floor_eps must be in [0, 1]");
  require(node_cap >= 1, "TheoryEnv: node_cap must be positive");
}

double tv_distance(const Distribution& p, const Distribution& q) {
  require(p.size() == q.size() && p.size() > 0, "tv_distance: distributions must match in size");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - q[i]);
  return 0.5 * total;
}

double sample_variance(std::span<const double> values) {
  require(values.size() >= 2, "sample_variance: need at least two values");
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  for (double x : values) {
    require(std::isfinite(x), "sample_variance: values must be finite");
    ++n;
    const double delta = x - mean;
    mean += delta / double(n);
    m2 += delta * (x - mean);
  }
  return m2 / double(n - 1);
}

double divergence_term(const TheoryEnv& env) {
  env.validate();
  if (env.omega == 0.0) return 0.0;
  const SweepTotals tot = level_sweep(env, true);
  return env.omega * tot.tv;
}

McEstimate divergence_term_mc(const TheoryEnv& env, std::size_t n_samples, const Rng& seed) {
  env.validate();
  require(n_samples >= 2, "divergence_term_mc: need at least two samples");
  if (env.omega == 0.0) return {};
  const Corpus draws = sample_corpus(*env.source, n_samples, env.seq_len, seed);
  std::vector<double> per_seq(n_samples);
  parallel_for(n_samples, [&](std::size_t i) {
    const std::span<const std::uint32_t> x = draws.seq(i);
    const std::vector<Distribution> teach = teacher_rows(env, x);
    double total = 0.0;
    for (std::size_t t = 0; t < env.seq_len; ++t) {
      const Distribution scaled = temperature_scale(teach[t], env.rho);
      total += tv_distance(scaled, true_conditional(*env.source, x.subspan(0, t)));
    }
    per_seq[i] = env.omega * total;
  });
  return mean_with_se(per_seq);
}

double sequence_loss_omega(const TheoryEnv& env, std::span<const std::uint32_t> x) {
  env.validate();
  require(x.size() == env.seq_len, "sequence_loss_omega: sequence length must equal seq_len");
  const bool with_teacher = teacher_in_play(env);
  const auto [ce, kd] = seq_ce_kd(env, x, with_teacher);
  return (1.0 - env.omega) * ce + env.omega * kd;
}

double population_risk_omega(const TheoryEnv& env) {
  env.validate();
  const bool with_teacher = teacher_in_play(env);
  const SweepTotals tot = level_sweep(env, with_teacher);
  return ((1.0 - env.omega) * tot.ce + env.omega * tot.kd) / double(env.seq_len);
}

double population_risk_ce(const TheoryEnv& env) {
  env.validate();
  const SweepTotals tot = level_sweep(env, false);
  return tot.ce / double(env.seq_len);
}

double bayes_risk(const TheoryEnv& env) {
  env.validate();
  const SweepTotals tot = level_sweep(env, false);
  return tot.entropy / double(env.seq_len);
}

double xi_exact(const TheoryEnv& env, std::span<const std::uint32_t> x, std::size_t t) {
  env.validate();
  require(x.size() == env.seq_len, "xi_exact: sequence length must equal seq_len");
  require(t >= 1 && t <= env.seq_len, "xi_exact: t must be in [1, T]");
  const std::size_t v_count = env.source->vocab_size;
  require(fits_cap(v_count, env.seq_len - t + 1, env.node_cap),
          "xi_exact: suffix tree exceeds node_cap; use xi_mc");
  for (std::uint32_t tok : x) require(tok < v_count, "xi_exact: token id out of range");

  const bool with_teacher = teacher_in_play(env);
  std::vector<std::uint32_t> prefix(x.begin(), x.begin() + (t - 1));
  const double before = expected_future(env, prefix, with_teacher);

  const NodeEval node = eval_node(env, prefix, with_teacher);
  const double realized_cost = node_combined_cost(node, env.omega, x[t - 1]);
  double after = 0.0;
  if (t < env.seq_len) {
    prefix.push_back(x[t - 1]);
    after = expected_future(env, prefix, with_teacher);
    prefix.pop_back();
  }
  return (before - realized_cost - after) / double(env.seq_len);
}

McEstimate xi_mc(const TheoryEnv& env, std::span<const std::uint32_t> x, std::size_t t,
                 std::size_t n_samples, const Rng& seed) {
  env.validate();
  require(x.size() == env.seq_len, "xi_mc: sequence length must equal seq_len");
  require(t >= 1 && t <= env.seq_len, "xi_mc: t must be in [1, T]");
  require(n_samples >= 2, "xi_mc: need at least two samples");

  std::vector<double> before(n_samples);
  std::vector<double> after(n_samples);
  parallel_for(2 * n_samples, [&](std::size_t j) {
    const bool is_before = j < n_samples;
    const std::size_t i = is_before ? j : j - n_samples;
    Rng rng = seed.derive(is_before ? "before" : "after").derive(i);
    const std::size_t keep = is_before ? t - 1 : t;
    const std::vector<std::uint32_t> z =
        sample_completion(*env.source, x, keep, env.seq_len, rng);
    (is_before ? before[i] : after[i]) = sequence_loss_omega(env, z);
  });
  const McEstimate a = mean_with_se(before);
  const McEstimate b = mean_with_se(after);
  return {a.value - b.value, std::hypot(a.std_error, b.std_error)};
}

XiStats xi_stats_exhaustive(const TheoryEnv& env) {
  env.validate();
  const std::size_t v_count = env.source->vocab_size;
  const std::size_t t_len = env.seq_len;
  require(fits_cap(v_count, t_len, env.node_cap),
          "xi_stats_exhaustive: V^T exceeds node_cap; use xi_stats_sampled");
  const bool with_teacher = teacher_in_play(env);

  // Cache every level's rows, then accumulate expected-future values upward.
  std::vector<std::size_t> width(t_len);  // node count per level
  std::vector<std::vector<double>> src(t_len), nll(t_len), kd(t_len);
  std::size_t n_nodes = 1;
  for (std::size_t level = 0; level < t_len; ++level) {
    width[level] = n_nodes;
    src[level].resize(n_nodes * v_count);
    nll[level].resize(n_nodes * v_count);
    kd[level].assign(n_nodes, 0.0);
    parallel_for(n_nodes, [&](std::size_t id) {
      const std::vector<std::uint32_t> prefix = decode_prefix(id, level, v_count);
      const NodeEval node = eval_node(env, prefix, with_teacher);
      for (std::size_t v = 0; v < v_count; ++v) {
        src[level][id * v_count + v] = node.src[v];
        nll[level][id * v_count + v] = -std::log(node.stu[v]);
      }
      kd[level][id] = node.kd;
    });
    n_nodes *= v_count;
  }

  const double omega = env.omega;
  auto cost = [&](std::size_t level, std::size_t id, std::size_t v) {
    return (1.0 - omega) * nll[level][id * v_count + v] + omega * kd[level][id];
  };

  // future[level][id]: expected cost of positions level+1 .. T
  std::vector<std::vector<double>> future(t_len);
  for (std::size_t level = t_len; level-- > 0;) {
    future[level].resize(width[level]);
    parallel_for(width[level], [&](std::size_t id) {
      double total = 0.0;
      for (std::size_t v = 0; v < v_count; ++v) {
        const double below = level + 1 < t_len ? future[level + 1][id * v_count + v] : 0.0;
        total += src[level][id * v_count + v] * (cost(level, id, v) + below);
      }
      future[level][id] = total;
    });
  }

  XiStats out;
  out.c_t.resize(t_len);
  out.v_t.resize(t_len);
  for (std::size_t t = 1; t <= t_len; ++t) {
    const std::size_t level = t - 1;
    std::vector<double> max_abs(width[level], 0.0);
    std::vector<double> second(width[level], 0.0);
    parallel_for(width[level], [&](std::size_t id) {
      double worst = 0.0;
      double moment = 0.0;
      for (std::size_t v = 0; v < v_count; ++v) {
        const double below = t < t_len ? future[t][id * v_count + v] : 0.0;
        const double xi =
            (future[level][id] - cost(level, id, v) - below) / double(t_len);
        worst = std::max(worst, std::abs(xi));
        moment += src[level][id * v_count + v] * xi * xi;
      }
      max_abs[id] = worst;
      second[id] = moment;
    });
    out.c_t[t - 1] = *std::max_element(max_abs.begin(), max_abs.end());
    out.v_t[t - 1] = *std::max_element(second.begin(), second.end());
  }
  return out;
}

XiStats xi_stats_sampled(const TheoryEnv& env, std::size_t n_sequences, std::size_t mc_samples,
                         const Rng& seed) {
  env.validate();
  require(n_sequences >= 1, "xi_stats_sampled: need at least one sequence");
  const Corpus draws = sample_corpus(*env.source, n_sequences, env.seq_len, seed.derive("seq"));
  XiStats out;
  out.c_t.assign(env.seq_len, 0.0);
  out.v_t.assign(env.seq_len, 0.0);
  for (std::size_t t = 1; t <= env.seq_len; ++t) {
    std::vector<double> xi(n_sequences);
    parallel_for(n_sequences, [&](std::size_t i) {
      xi[i] = xi_mc(env, draws.seq(i), t, mc_samples, seed.derive("mc").derive(i * env.seq_len + t))
                  .value;
    });
    for (double value : xi) {
      out.c_t[t - 1] = std::max(out.c_t[t - 1], std::abs(value));
      out.v_t[t - 1] = std::max(out.v_t[t - 1], value * value);
    }
  }
  return out;
}

VarianceReductionTable variance_reduction_check(
    const TheoryEnv& env, std::span<const double> omega_grid,
    const std::vector<std::vector<std::uint32_t>>& prefixes) {
  env.validate();
  require(!omega_grid.empty(), "variance_reduction_check: omega grid is empty");
  for (std::size_t i = 0; i < omega_grid.size(); ++i) {
    require(omega_grid[i] >= 0.0 && omega_grid[i] <= 1.0,
            "variance_reduction_check: omega must be in [0, 1]");
    require(i == 0 || omega_grid[i] > omega_grid[i - 1],
            "variance_reduction_check: omega grid must be strictly increasing");
    require(omega_grid[i] == 0.0 || has_teacher(env),
            "variance_reduction_check: teacher is required for omega > 0");
  }
  require(!prefixes.empty(), "variance_reduction_check: need at least one prefix");
  const std::size_t v_count = env.source->vocab_size;
  for (const auto& p : prefixes) {
    require(p.size() + 1 == env.seq_len,
            "variance_reduction_check: prefixes must have length T-1");
    for (std::uint32_t tok : p) {
      require(tok < v_count, "variance_reduction_check: token id out of range");
    }
  }

  const bool with_teacher = has_teacher(env);
  const double t_len = double(env.seq_len);
  std::vector<NodeEval> nodes(prefixes.size());
  parallel_for(prefixes.size(), [&](std::size_t i) {
    nodes[i] = eval_node(env, prefixes[i], with_teacher);
  });

  VarianceReductionTable table;
  for (double omega : omega_grid) {
    VarianceReductionRow row;
    row.omega = omega;
    for (const NodeEval& node : nodes) {
      // expected future at the prefix covers only the last position, so the
      // recursion's one-step case applies directly; centered differences keep
      // constant costs at an exact zero
      std::vector<double> cost(v_count);
      double mean_nll = 0.0;
      for (std::size_t v = 0; v < v_count; ++v) {
        const double nll = -std::log(node.stu[v]);
        cost[v] = (1.0 - omega) * nll + omega * node.kd;
        mean_nll += node.src[v] * nll;
      }
      double moment = 0.0;
      double var_nll = 0.0;
      for (std::size_t v = 0; v < v_count; ++v) {
        double xi = 0.0;
        for (std::size_t u = 0; u < v_count; ++u) xi += node.src[u] * (cost[u] - cost[v]);
        xi /= t_len;
        moment += node.src[v] * xi * xi;
        const double centered = -std::log(node.stu[v]) - mean_nll;
        var_nll += node.src[v] * centered * centered;
      }
      row.second_moment += moment;
      row.reference += (1.0 - omega) * (1.0 - omega) * var_nll / (t_len * t_len);
    }
    row.second_moment /= double(prefixes.size());
    row.reference /= double(prefixes.size());
    const double scale = std::max({std::abs(row.second_moment), std::abs(row.reference), 1e-12});
    row.agrees = std::abs(row.second_moment - row.reference) <= 1e-9 * scale;
    table.rows.push_back(row);
  }

  table.non_increasing = true;
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    if (table.rows[i].second_moment > table.rows[i - 1].second_moment + 1e-12) {
      table.non_increasing = false;
    }
  }
  return table;
}

BoundBreakdown generalization_bound(double empirical_risk, std::span<const double> v_t, double c,
                                    double m, double omega, double div, std::size_t n,
                                    double log_card, double delta) {
  require(std::isfinite(empirical_risk), "generalization_bound: empirical risk must be finite");
  require(!v_t.empty(), "generalization_bound: v_t must cover every position");
  double sum_v = 0.0;
  for (double value : v_t) {
    require(std::isfinite(value) && value >= 0.0, "generalization_bound: v_t must be nonnegative");
    sum_v += value;
  }
  require(std::isfinite(c) && c >= 0.0, "generalization_bound: c must be nonnegative");
  require(std::isfinite(m) && m >= 0.0, "generalization_bound: m must be nonnegative");
  require(omega >= 0.0 && omega <= 1.0, "generalization_bound: omega must be in [0, 1]");
  require(std::isfinite(div) && div >= 0.0, "generalization_bound: div must be nonnegative");
  require(n >= 1, "generalization_bound: n must be positive");
  require(std::isfinite(log_card) && log_card >= 0.0,
          "generalization_bound: log_card must be nonnegative");
  require(delta > 0.0 && delta < 1.0, "generalization_bound: delta must be in (0, 1)");

  const double log_term = log_card - std::log(delta);
  BoundBreakdown b;
  b.empirical_risk = empirical_risk;
  b.variance_addend = std::sqrt(2.0 * sum_v * log_term / double(n));
  b.extreme_addend = 2.0 * c * log_term / (3.0 * double(n));
  b.divergence_addend = omega == 0.0 ? 0.0 : 4.0 * m * div / double(v_t.size());
  b.value = b.empirical_risk + b.variance_addend + b.extreme_addend + b.divergence_addend;
  return b;
}

RiskGap risk_gap_check(const TheoryEnv& env, double m) {
  env.validate();
  const std::size_t v_count = env.source->vocab_size;
  require(std::isfinite(m) && m >= std::log(double(v_count)),
          "risk_gap_check: m must be at least log V so the floored loss stays within m");
  TheoryEnv floored = env;
  floored.floor_eps = std::min(1.0, double(v_count) * std::exp(-m));

  const bool with_teacher = teacher_in_play(env);
  const SweepTotals tot = level_sweep(floored, with_teacher);
  const double t_len = double(env.seq_len);
  RiskGap gap;
  // E[l] - E[l^omega] telescopes to omega * (E[ce] - E[kd]) / T
  gap.lhs = std::abs(env.omega * (tot.ce - tot.kd)) / t_len;
  gap.rhs = 4.0 * m * env.omega * tot.tv / t_len;
  gap.holds = gap.lhs <= gap.rhs + 1e-9;
  return gap;
}

double calibration_g(double eps) {
  require(std::isfinite(eps) && eps >= 0.0 && eps <= 1.0, "calibration_g: eps must be in [0, 1]");
  const double lo = eps < 1.0 ? (1.0 - eps) * std::log1p(-eps) : 0.0;
  const double hi = (1.0 + eps) * std::log1p(eps);
  return 0.5 * (lo + hi);
}

double calibration_g_inv(double y) {
  const double top = calibration_g(1.0);  // log 2
  require(std::isfinite(y) && y >= 0.0 && y <= top,
          "calibration_g_inv: y must be in [0, log 2]");
  if (y == 0.0) return 0.0;
  if (y >= top) return 1.0;
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    (calibration_g(mid) < y ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double zero_one_risk_exact(const TheoryEnv& env) {
  env.validate();
  const SweepTotals tot = level_sweep(env, false);
  return tot.zero_one / double(env.seq_len);
}

McEstimate zero_one_risk_mc(const TheoryEnv& env, std::size_t n_samples, const Rng& seed) {
  env.validate();
  require(n_samples >= 2, "zero_one_risk_mc: need at least two samples");
  const Corpus draws = sample_corpus(*env.source, n_samples, env.seq_len, seed);
  std::vector<double> per_seq(n_samples);
  parallel_for(n_samples, [&](std::size_t i) {
    const std::span<const std::uint32_t> x = draws.seq(i);
    const Tensor lp = forward_log_probs(*env.student, x);
    std::size_t misses = 0;
    for (std::size_t t = 0; t < env.seq_len; ++t) {
      std::size_t best = 0;
      for (std::size_t v = 1; v < env.source->vocab_size; ++v) {
        if (lp.at(t, v) > lp.at(t, best)) best = v;
      }
      if (best != x[t]) ++misses;
    }
    per_seq[i] = double(misses) / double(env.seq_len);
  });
  return mean_with_se(per_seq);
}

DiagnosticsReport build_diagnostics_report(const TheoryEnv& env, const Corpus& corpus,
                                           const DiagnosticsOptions& opts) {
  env.validate();
  require(corpus.size() >= 2, "diagnostics report: corpus needs at least two sequences");
  require(corpus.seq_len == env.seq_len, "diagnostics report: corpus seq_len must match the env");
  require(corpus.vocab_size == env.source->vocab_size,
          "diagnostics report: corpus vocab must match the source");
  const std::size_t v_count = env.source->vocab_size;
  require(std::isfinite(opts.m) && opts.m >= std::log(double(v_count)),
          "diagnostics report: m must be at least log V");
  require(opts.delta > 0.0 && opts.delta < 1.0, "diagnostics report: delta must be in (0, 1)");
  require(std::isfinite(opts.log_card) && opts.log_card >= 0.0,
          "diagnostics report: log_card must be nonnegative");
  require(opts.mc_samples >= 2, "diagnostics report: mc_samples must be at least 2");

  DiagnosticsReport rep;
  rep.exact = fits_cap(v_count, env.seq_len, env.node_cap);
  rep.omega = env.omega;
  rep.rho = env.rho;
  rep.m = opts.m;
  rep.delta = opts.delta;
  rep.log_card = opts.log_card;

  TheoryEnv bounded = env;
  bounded.floor_eps = std::min(1.0, double(v_count) * std::exp(-opts.m));
  const Rng rng(opts.seed);

  // empirical combined risk and its sample variance over the corpus
  const std::size_t n = corpus.size();
  const bool with_teacher = teacher_in_play(env);
  std::vector<double> losses(n);
  parallel_for(n, [&](std::size_t i) {
    const auto [ce, kd] = seq_ce_kd(bounded, corpus.seq(i), with_teacher);
    losses[i] = (1.0 - env.omega) * ce + env.omega * kd;
  });
  double empirical = 0.0;
  for (double x : losses) empirical += x;
  empirical /= double(n);
  rep.v_n = sample_variance(losses);

  if (rep.exact) {
    rep.div_term = divergence_term(bounded);
    rep.per_t = xi_stats_exhaustive(bounded);
    rep.risk_gap = risk_gap_check(env, opts.m);
    const SweepTotals plain = level_sweep(env, false);
    rep.zero_one = plain.zero_one / double(env.seq_len);
    rep.population_ce = plain.ce / double(env.seq_len);
    rep.bayes = plain.entropy / double(env.seq_len);
  } else {
    rep.notes.push_back(
        "sequence space exceeds node_cap; divergence, risk gap, zero-one risk, per-position "
        "stats, and population terms are Monte Carlo estimates with standard errors");
    const McEstimate div = divergence_term_mc(bounded, opts.mc_samples, rng.derive("div"));
    rep.div_term = div.value;
    rep.div_std_error = div.std_error;
    rep.per_t = xi_stats_sampled(bounded, opts.xi_sequences, opts.xi_mc_samples, rng.derive("xi"));

    const Corpus draws =
        sample_corpus(*env.source, opts.mc_samples, env.seq_len, rng.derive("population"));
    std::vector<double> gap_terms(opts.mc_samples);
    std::vector<double> ce_terms(opts.mc_samples);
    std::vector<double> entropy_terms(opts.mc_samples);
    std::vector<double> zero_one_terms(opts.mc_samples);
    parallel_for(opts.mc_samples, [&](std::size_t i) {
      const std::span<const std::uint32_t> x = draws.seq(i);
      const auto [ce, kd] = seq_ce_kd(bounded, x, with_teacher);
      gap_terms[i] = env.omega * (ce - kd);
      const Tensor lp = forward_log_probs(*env.student, x);
      const std::vector<Distribution> rows = dists_from_logprobs(lp, env.floor_eps);
      double seq_ce = 0.0;
      double seq_entropy = 0.0;
      std::size_t misses = 0;
      for (std::size_t t = 0; t < env.seq_len; ++t) {
        seq_ce -= std::log(rows[t][x[t]]);
        const Distribution d = true_conditional(*env.source, x.subspan(0, t));
        for (std::size_t v = 0; v < v_count; ++v) {
          if (d[v] > 0.0) seq_entropy -= d[v] * std::log(d[v]);
        }
        if (rows[t].argmax() != x[t]) ++misses;
      }
      ce_terms[i] = seq_ce / double(env.seq_len);
      entropy_terms[i] = seq_entropy / double(env.seq_len);
      zero_one_terms[i] = double(misses) / double(env.seq_len);
    });
    const McEstimate gap_mean = mean_with_se(gap_terms);
    rep.risk_gap.lhs = std::abs(gap_mean.value);
    rep.risk_gap_lhs_se = gap_mean.std_error;
    rep.risk_gap.rhs = 4.0 * opts.m * rep.div_term / double(env.seq_len);
    const double rhs_se = 4.0 * opts.m * rep.div_std_error / double(env.seq_len);
    rep.risk_gap.holds =
        rep.risk_gap.lhs <= rep.risk_gap.rhs + 1e-9 + 3.0 * (gap_mean.std_error + rhs_se);
    rep.notes.push_back("risk gap in MC mode is checked with three standard errors of slack");

    const McEstimate zo = mean_with_se(zero_one_terms);
    rep.zero_one = zo.value;
    rep.zero_one_se = zo.std_error;
    rep.population_ce = mean_with_se(ce_terms).value;
    rep.bayes = mean_with_se(entropy_terms).value;
  }

  rep.c = *std::max_element(rep.per_t.c_t.begin(), rep.per_t.c_t.end());
  rep.bound = generalization_bound(empirical, rep.per_t.v_t, rep.c, opts.m, env.omega,
                                   rep.div_term, n, opts.log_card, opts.delta);

  // last-position variance identity over corpus prefixes
  std::vector<double> grid = opts.omega_grid;
  if (!has_teacher(env)) {
    std::erase_if(grid, [](double w) { return w != 0.0; });
    if (grid.empty()) grid.push_back(0.0);
    rep.notes.push_back("no teacher supplied; variance identity grid reduced to omega = 0");
  }
  const std::size_t n_prefixes = std::min<std::size_t>(std::max<std::size_t>(opts.variance_prefixes, 1), n);
  std::vector<std::vector<std::uint32_t>> prefixes(n_prefixes);
  for (std::size_t i = 0; i < n_prefixes; ++i) {
    const std::span<const std::uint32_t> x = corpus.seq(i);
    prefixes[i].assign(x.begin(), x.end() - 1);
  }
  rep.variance_identity = variance_reduction_check(bounded, grid, prefixes);

  double ce_gap = rep.population_ce - rep.bayes;
  const double top = calibration_g(1.0);
  if (ce_gap < 0.0) {
    ce_gap = 0.0;
  } else if (ce_gap > top) {
    ce_gap = top;
    rep.notes.push_back("cross-entropy gap exceeds log 2; zero-one excess bound clamps to 1");
  }
  rep.excess01_bound = calibration_g_inv(ce_gap);

  rep.notes.push_back(
      "hypothesis-class growth term stays symbolic; log_card is the caller-supplied proxy");
  rep.notes.push_back(
      "the exact last-position recursion reproduces the squared mixing factor (1-omega)^2; a "
      "linear (1-omega) variant of the identity is sometimes quoted, and both shrink with omega");
  return rep;
}

std::string report_json(const DiagnosticsReport& rep) {
  nlohmann::ordered_json j;
  j["mode"] = rep.exact ? "exact" : "mc";
  j["omega"] = rep.omega;
  j["rho"] = rep.rho;
  j["m"] = rep.m;
  j["delta"] = rep.delta;
  j["log_card"] = rep.log_card;
  j["div_term"] = {{"value", rep.div_term}, {"std_error", rep.div_std_error}};
  j["v_n"] = rep.v_n;
  nlohmann::ordered_json per_t = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < rep.per_t.c_t.size(); ++t) {
    per_t.push_back({{"t", t + 1}, {"c_t", rep.per_t.c_t[t]}, {"v_t", rep.per_t.v_t[t]}});
  }
  j["per_position"] = per_t;
  j["c"] = rep.c;
  j["bound"] = {{"empirical_risk", rep.bound.empirical_risk},
                {"variance_addend", rep.bound.variance_addend},
                {"extreme_addend", rep.bound.extreme_addend},
                {"divergence_addend", rep.bound.divergence_addend},
                {"value", rep.bound.value}};
  j["risk_gap"] = {{"lhs", rep.risk_gap.lhs},
                   {"rhs", rep.risk_gap.rhs},
                   {"holds", rep.risk_gap.holds},
                   {"lhs_std_error", rep.risk_gap_lhs_se}};
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const VarianceReductionRow& row : rep.variance_identity.rows) {
    rows.push_back({{"omega", row.omega},
                    {"second_moment", row.second_moment},
                    {"reference", row.reference},
                    {"agrees", row.agrees}});
  }
  j["variance_identity"] = {{"rows", rows},
                            {"non_increasing", rep.variance_identity.non_increasing}};
  j["zero_one"] = {{"value", rep.zero_one}, {"std_error", rep.zero_one_se}};
  j["population_ce"] = rep.population_ce;
  j["bayes_risk"] = rep.bayes;
  j["excess01_bound"] = rep.excess01_bound;
  j["notes"] = rep.notes;
  return j.dump(2);
}

void write_report_json(const std::string& path, const DiagnosticsReport& report) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  require(out.good(), "write_report_json: cannot open " + path);
  out << report_json(report) << '\n';
}

void write_variance_csv(const std::string& path, const VarianceReductionTable& table) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  require(out.good(), "write_variance_csv: cannot open " + path);
  out << "omega,second_moment,reference,agrees\n";
  for (const VarianceReductionRow& row : table.rows) {
    out << format_double(row.omega) << ',' << format_double(row.second_moment) << ','
        << format_double(row.reference) << ',' << (row.agrees ? "true" : "false") << '\n';
  }
}

}  // namespace salt
