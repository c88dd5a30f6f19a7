#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "salt/diagnostics.hpp"
#include "salt/lm.hpp"
#include "salt/synth.hpp"

using namespace salt;

namespace {

LmConfig small_config(std::size_t v, std::size_t max_len, double init_std) {
  LmConfig cfg;
  cfg.vocab_size = v;
  cfg.max_len = max_len;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.init_std = init_std;
  return cfg;
}

// source plus a student/teacher pair over the same vocabulary; env() binds
// them after the struct has landed at its final address
struct Lab {
  GroundTruthSource source;
  LmModel student;
  LmModel teacher;

  TheoryEnv env(double omega, double rho, std::size_t t_len) const {
    TheoryEnv e;
    e.source = &source;
    e.student = &student;
    e.teacher = &teacher;
    e.omega = omega;
    e.rho = rho;
    e.seq_len = t_len;
    return e;
  }
};

Lab make_lab(std::size_t v, std::size_t t_len, std::uint64_t seed) {
  Lab lab;
  lab.source = make_markov_source(1, v, 0.8, Rng(seed));
  lab.student = init_model(small_config(v, t_len + 3, 0.4), Rng(seed + 1));
  lab.teacher = init_model(small_config(v, t_len + 3, 0.5), Rng(seed + 2));
  return lab;
}

GroundTruthSource flat_source(std::size_t v) {
  GroundTruthSource s;
  s.order = 0;
  s.vocab_size = v;
  s.table.assign(v, 1.0 / double(v));
  s.initial = s.table;
  s.source_id = "flat";
  s.validate();
  return s;
}

GroundTruthSource point_source(std::size_t v, std::uint32_t target) {
  GroundTruthSource s;
  s.order = 0;
  s.vocab_size = v;
  s.table.assign(v, 0.0);
  s.table[target] = 1.0;
  s.initial = s.table;
  s.source_id = "point";
  s.validate();
  return s;
}

// model whose every row is exactly uniform: zero weights and a zeroed
// position table leave all logits at zero
LmModel uniform_model(std::size_t v, std::size_t max_len) {
  LmModel m = init_model(small_config(v, max_len, 0.0), Rng(1));
  auto& pos = m.param("pos_emb").data;
  std::fill(pos.begin(), pos.end(), 0.0);
  return m;
}

// model that argmaxes the same token after every prefix
LmModel planted_model(std::size_t v, std::size_t max_len, std::uint32_t target) {
  LmModel m = uniform_model(v, max_len);
  m.param("final_ln.bias").data[0] = 1.0;
  m.param("head.w").data[target] = 5.0;
  return m;
}

// depth-first visit of every prefix of length 0 .. T-1 with its probability
void walk_prefixes(const GroundTruthSource& src, std::size_t t_len,
                   std::vector<std::uint32_t>& pfx, double p,
                   const std::function<void(const std::vector<std::uint32_t>&, double)>& visit) {
  visit(pfx, p);
  if (pfx.size() + 2 > t_len) return;
  const Distribution d = true_conditional(src, pfx);
  for (std::uint32_t v = 0; v < src.vocab_size; ++v) {
    pfx.push_back(v);
    walk_prefixes(src, t_len, pfx, p * d[v], visit);
    pfx.pop_back();
  }
}

// depth-first visit of every complete sequence with its probability
void walk_sequences(const GroundTruthSource& src, std::size_t t_len,
                    std::vector<std::uint32_t>& x, double p,
                    const std::function<void(const std::vector<std::uint32_t>&, double)>& visit) {
  if (x.size() == t_len) {
    visit(x, p);
    return;
  }
  const Distribution d = true_conditional(src, x);
  for (std::uint32_t v = 0; v < src.vocab_size; ++v) {
    x.push_back(v);
    walk_sequences(src, t_len, x, p * d[v], visit);
    x.pop_back();
  }
}

Distribution model_next(const LmModel& m, std::span<const std::uint32_t> prefix) {
  const Tensor lp = next_token_log_probs(m, prefix);
  Distribution d;
  d.probs.resize(lp.data.size());
  for (std::size_t i = 0; i < lp.data.size(); ++i) d.probs[i] = std::exp(lp.data[i]);
  return d;
}

std::size_t encode(std::span<const std::uint32_t> x, std::size_t v) {
  std::size_t id = 0;
  for (std::uint32_t tok : x) id = id * v + tok;
  return id;
}

std::vector<std::uint32_t> decode(std::size_t id, std::size_t len, std::size_t v) {
  std::vector<std::uint32_t> x(len);
  for (std::size_t i = len; i-- > 0;) {
    x[i] = static_cast<std::uint32_t>(id % v);
    id /= v;
  }
  return x;
}

}  // namespace

TEST_CASE("total variation distance on hand vectors") {
  Distribution p{{0.7, 0.3}};
  Distribution q{{0.5, 0.5}};
  CHECK(tv_distance(p, q) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(tv_distance(p, p) == 0.0);

  Distribution a{{1.0, 0.0, 0.0}};
  Distribution b{{0.0, 0.0, 1.0}};
  CHECK(tv_distance(a, b) == 1.0);

  CHECK_THROWS(tv_distance(p, a));
  CHECK_THROWS(tv_distance(Distribution{}, Distribution{}));
}

TEST_CASE("sample variance matches the pairwise definition") {
  const std::vector<double> flat(10, 3.25);
  CHECK(sample_variance(flat) == 0.0);

  const std::vector<double> two{0.0, 2.0};
  CHECK(sample_variance(two) == 2.0);

  Rng rng(33);
  std::vector<double> values(1000);
  for (double& x : values) x = 10.0 * rng.next_double() - 3.0;
  // (1/(N(N-1))) sum_{i<j} (f_i - f_j)^2
  double pairwise = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      const double d = values[i] - values[j];
      pairwise += d * d;
    }
  }
  pairwise /= double(values.size()) * double(values.size() - 1);
  const double streamed = sample_variance(values);
  CHECK(std::abs(streamed - pairwise) <= 1e-9 * std::max(std::abs(streamed), std::abs(pairwise)));

  CHECK_THROWS(sample_variance(std::vector<double>{1.0}));
  CHECK_THROWS(sample_variance(std::vector<double>{1.0, std::nan("")}));
}

TEST_CASE("divergence term against a depth-first oracle") {
  const Lab lab = make_lab(3, 3, 11);
  const TheoryEnv env = lab.env(0.7, 0.25, 3);

  double oracle = 0.0;
  std::vector<std::uint32_t> pfx;
  walk_prefixes(lab.source, 3, pfx, 1.0, [&](const std::vector<std::uint32_t>& p, double prob) {
    const Distribution scaled = temperature_scale(model_next(lab.teacher, p), 0.25);
    oracle += prob * tv_distance(scaled, true_conditional(lab.source, p));
  });
  oracle *= 0.7;

  const double got = divergence_term(env);
  CHECK(got >= 0.0);
  CHECK(std::abs(got - oracle) < 1e-12);

  TheoryEnv off = lab.env(0.0, 0.25, 3);
  CHECK(divergence_term(off) == 0.0);
  off.teacher = nullptr;  // no teacher needed when the mixing weight is zero
  CHECK(divergence_term(off) == 0.0);
}

TEST_CASE("divergence monte carlo brackets the exact value") {
  const Lab lab = make_lab(3, 3, 19);
  const TheoryEnv env = lab.env(0.6, 1.0, 3);
  const double exact = divergence_term(env);
  const McEstimate mc = divergence_term_mc(env, 4000, Rng(5));
  CHECK(mc.std_error > 0.0);
  CHECK(std::abs(mc.value - exact) <= 3.0 * mc.std_error + 1e-12);

  const McEstimate again = divergence_term_mc(env, 4000, Rng(5));
  CHECK(again.value == mc.value);
  CHECK(again.std_error == mc.std_error);
}

TEST_CASE("population risks agree with whole-sequence enumeration") {
  const Lab lab = make_lab(3, 3, 23);
  const TheoryEnv env = lab.env(0.4, 0.5, 3);

  double risk_omega = 0.0;
  double risk_ce = 0.0;
  std::vector<std::uint32_t> x;
  walk_sequences(lab.source, 3, x, 1.0, [&](const std::vector<std::uint32_t>& seq, double p) {
    risk_omega += p * sequence_loss_omega(env, seq);
    TheoryEnv plain = env;
    plain.omega = 0.0;
    risk_ce += p * sequence_loss_omega(plain, seq);
  });

  CHECK(std::abs(population_risk_omega(env) - risk_omega) < 1e-10);
  CHECK(std::abs(population_risk_ce(env) - risk_ce) < 1e-10);

  // entropy rate of a flat source is log V for any prefix
  const GroundTruthSource flat = flat_source(4);
  const LmModel stu = uniform_model(4, 6);
  TheoryEnv fenv;
  fenv.source = &flat;
  fenv.student = &stu;
  fenv.seq_len = 3;
  CHECK(bayes_risk(fenv) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  // a uniform student is exactly calibrated there, so the gap is zero
  CHECK(std::abs(population_risk_ce(fenv) - bayes_risk(fenv)) < 1e-12);
  // and on a generic source the cross entropy can only exceed the entropy
  const TheoryEnv plain = lab.env(0.0, 1.0, 3);
  CHECK(population_risk_ce(plain) >= bayes_risk(plain) - 1e-12);
}

TEST_CASE("sequence loss splits into its cross-entropy and distillation parts") {
  const Lab lab = make_lab(3, 4, 29);
  const std::vector<std::uint32_t> x{2, 0, 1, 2};

  TheoryEnv plain = lab.env(0.0, 1.0, 4);
  const double ce = sequence_loss_omega(plain, x);
  CHECK(std::abs(ce + sequence_log_likelihood(lab.student, x) / 4.0) < 1e-12);

  // hand-assembled combined loss from next-token rows
  const double omega = 0.35;
  const double rho = 0.5;
  double want = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    const std::span<const std::uint32_t> prefix(x.data(), t);
    const Distribution stu = model_next(lab.student, prefix);
    const Distribution teach = temperature_scale(model_next(lab.teacher, prefix), rho);
    double kd = 0.0;
    for (std::size_t v = 0; v < 3; ++v) kd -= teach[v] * std::log(stu[v]);
    want += (1.0 - omega) * (-std::log(stu[x[t]])) + omega * kd;
  }
  want /= 4.0;
  CHECK(std::abs(sequence_loss_omega(lab.env(omega, rho, 4), x) - want) < 1e-10);

  CHECK_THROWS(sequence_loss_omega(plain, std::vector<std::uint32_t>{0, 1}));
}

TEST_CASE("last-position increment matches its closed form") {
  const Lab lab = make_lab(3, 3, 37);
  const TheoryEnv env = lab.env(0.667, 0.25, 3);
  const std::vector<std::uint32_t> x{1, 2, 0};

  const std::span<const std::uint32_t> prefix(x.data(), 2);
  const Tensor lp = next_token_log_probs(lab.student, prefix);
  const Distribution d = true_conditional(lab.source, prefix);
  double mean_nll = 0.0;
  for (std::size_t v = 0; v < 3; ++v) mean_nll += d[v] * (-lp.data[v]);
  const double want = (1.0 - 0.667) * (mean_nll - (-lp.data[x[2]])) / 3.0;

  CHECK(std::abs(xi_exact(env, x, 3) - want) < 1e-12);
}

TEST_CASE("increments are mean zero and telescope to the loss deviation") {
  const Lab lab = make_lab(3, 4, 41);
  const TheoryEnv env = lab.env(0.5, 0.5, 4);
  const std::vector<std::uint32_t> x{0, 2, 1, 0};

  for (std::size_t t = 1; t <= 4; ++t) {
    const std::span<const std::uint32_t> prefix(x.data(), t - 1);
    const Distribution d = true_conditional(lab.source, prefix);
    double mean = 0.0;
    for (std::uint32_t v = 0; v < 3; ++v) {
      std::vector<std::uint32_t> alt = x;
      alt[t - 1] = v;
      mean += d[v] * xi_exact(env, alt, t);
    }
    CHECK(std::abs(mean) < 1e-10);
  }

  double total = 0.0;
  for (std::size_t t = 1; t <= 4; ++t) total += xi_exact(env, x, t);
  const double deviation = population_risk_omega(env) - sequence_loss_omega(env, x);
  CHECK(std::abs(total - deviation) < 1e-10);
}

TEST_CASE("a student with constant rows has zero increments") {
  const Lab lab = make_lab(3, 4, 43);
  const LmModel flat = uniform_model(3, 7);
  TheoryEnv env = lab.env(0.7, 1.0, 4);
  env.student = &flat;
  const std::vector<std::uint32_t> x{2, 2, 0, 1};
  for (std::size_t t = 1; t <= 4; ++t) CHECK(std::abs(xi_exact(env, x, t)) < 1e-13);
}

TEST_CASE("exact increments enforce their caps and input checks") {
  const Lab lab = make_lab(3, 3, 47);
  TheoryEnv env = lab.env(0.5, 1.0, 3);
  const std::vector<std::uint32_t> x{0, 1, 2};

  env.node_cap = 4;  // 3^1 fits, 3^2 does not
  CHECK_NOTHROW(xi_exact(env, x, 3));
  CHECK_THROWS(xi_exact(env, x, 2));

  env.node_cap = std::size_t{1} << 20;
  CHECK_THROWS(xi_exact(env, x, 0));
  CHECK_THROWS(xi_exact(env, x, 4));
  CHECK_THROWS(xi_exact(env, std::vector<std::uint32_t>{0, 1}, 1));
  CHECK_THROWS(xi_exact(env, std::vector<std::uint32_t>{0, 1, 9}, 1));
}

TEST_CASE("monte carlo increments bracket the exact ones") {
  const Lab lab = make_lab(3, 3, 53);
  const TheoryEnv env = lab.env(0.5, 1.0, 3);
  const std::vector<std::uint32_t> x{1, 0, 2};

  for (std::size_t t : {std::size_t{1}, std::size_t{3}}) {
    const double exact = xi_exact(env, x, t);
    const McEstimate mc = xi_mc(env, x, t, 3000, Rng(7));
    CHECK(mc.std_error > 0.0);
    CHECK(std::abs(mc.value - exact) <= 3.0 * mc.std_error + 1e-12);
    const McEstimate again = xi_mc(env, x, t, 3000, Rng(7));
    CHECK(again.value == mc.value);
  }
}

TEST_CASE("exhaustive deviation stats match a brute-force sweep") {
  const Lab lab = make_lab(3, 3, 59);
  const TheoryEnv env = lab.env(0.6, 0.5, 3);
  const XiStats stats = xi_stats_exhaustive(env);
  REQUIRE(stats.c_t.size() == 3);
  REQUIRE(stats.v_t.size() == 3);

  for (std::size_t t = 1; t <= 3; ++t) {
    double c_want = 0.0;
    double v_want = 0.0;
    std::size_t n_prefixes = 1;
    for (std::size_t i = 0; i + 1 < t; ++i) n_prefixes *= 3;
    for (std::size_t id = 0; id < n_prefixes; ++id) {
      const std::vector<std::uint32_t> prefix = decode(id, t - 1, 3);
      const Distribution d = true_conditional(lab.source, prefix);
      double moment = 0.0;
      for (std::uint32_t v = 0; v < 3; ++v) {
        std::vector<std::uint32_t> x = prefix;
        x.push_back(v);
        x.resize(3, 0);  // increments at t ignore everything after position t
        const double xi = xi_exact(env, x, t);
        c_want = std::max(c_want, std::abs(xi));
        moment += d[v] * xi * xi;
      }
      v_want = std::max(v_want, moment);
    }
    CHECK(std::abs(stats.c_t[t - 1] - c_want) < 1e-12);
    CHECK(std::abs(stats.v_t[t - 1] - v_want) < 1e-12);
  }

  // every realized increment respects the bound
  Rng rng(61);
  const Corpus draws = sample_corpus(lab.source, 20, 3, rng);
  for (std::size_t i = 0; i < draws.size(); ++i) {
    for (std::size_t t = 1; t <= 3; ++t) {
      CHECK(std::abs(xi_exact(env, draws.seq(i), t)) <= stats.c_t[t - 1] + 1e-12);
    }
  }
}

TEST_CASE("sampled deviation stats are deterministic and well formed") {
  const Lab lab = make_lab(3, 3, 67);
  const TheoryEnv env = lab.env(0.5, 1.0, 3);
  const XiStats a = xi_stats_sampled(env, 4, 40, Rng(9));
  const XiStats b = xi_stats_sampled(env, 4, 40, Rng(9));
  REQUIRE(a.c_t.size() == 3);
  REQUIRE(a.v_t.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(a.c_t[t] >= 0.0);
    CHECK(a.v_t[t] >= 0.0);
    CHECK(a.c_t[t] == b.c_t[t]);
    CHECK(a.v_t[t] == b.v_t[t]);
    CHECK(a.v_t[t] <= a.c_t[t] * a.c_t[t] + 1e-15);
  }
}

TEST_CASE("variance identity table shows the squared mixing factor") {
  const Lab lab = make_lab(3, 3, 71);
  const TheoryEnv env = lab.env(0.5, 0.5, 3);

  const Corpus draws = sample_corpus(lab.source, 12, 3, Rng(73));
  std::vector<std::vector<std::uint32_t>> prefixes;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const std::span<const std::uint32_t> x = draws.seq(i);
    prefixes.emplace_back(x.begin(), x.end() - 1);
  }

  const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  const VarianceReductionTable table = variance_reduction_check(env, grid, prefixes);
  REQUIRE(table.rows.size() == 5);

  for (const VarianceReductionRow& row : table.rows) CHECK(row.agrees);
  CHECK(table.non_increasing);

  // omega = 1 kills the loss randomness entirely
  CHECK(table.rows[4].second_moment == 0.0);
  CHECK(table.rows[4].reference == 0.0);

  // quartering from omega 0 to omega 0.5
  const double ratio = table.rows[0].second_moment / table.rows[2].second_moment;
  CHECK(std::abs(ratio - 4.0) < 1e-9);

  // reference column against an explicit centered-moment variance
  for (const VarianceReductionRow& row : table.rows) {
    double want = 0.0;
    for (const std::vector<std::uint32_t>& p : prefixes) {
      const Distribution stu = model_next(lab.student, p);
      const Distribution d = true_conditional(lab.source, p);
      double mean = 0.0;
      for (std::size_t v = 0; v < 3; ++v) mean += d[v] * (-std::log(stu[v]));
      double var = 0.0;
      for (std::size_t v = 0; v < 3; ++v) {
        const double c = -std::log(stu[v]) - mean;
        var += d[v] * c * c;
      }
      want += (1.0 - row.omega) * (1.0 - row.omega) * var / 9.0;
    }
    want /= double(prefixes.size());
    CHECK(std::abs(row.reference - want) <=
          1e-9 * std::max({std::abs(row.reference), std::abs(want), 1e-12}));
  }

  // empirical column against the public exact increment at the last position
  const double omega = 0.25;
  double moment_sum = 0.0;
  for (const std::vector<std::uint32_t>& p : prefixes) {
    const Distribution d = true_conditional(lab.source, p);
    TheoryEnv at = lab.env(omega, 0.5, 3);
    double moment = 0.0;
    for (std::uint32_t v = 0; v < 3; ++v) {
      std::vector<std::uint32_t> x = p;
      x.push_back(v);
      const double xi = xi_exact(at, x, 3);
      moment += d[v] * xi * xi;
    }
    moment_sum += moment;
  }
  moment_sum /= double(prefixes.size());
  CHECK(std::abs(table.rows[1].second_moment - moment_sum) < 1e-12);
}

TEST_CASE("variance identity handles degenerate sources and rejects bad input") {
  const GroundTruthSource point = point_source(3, 1);
  const Lab lab = make_lab(3, 3, 79);
  TheoryEnv env = lab.env(0.5, 1.0, 3);
  env.source = &point;

  const std::vector<std::vector<std::uint32_t>> prefixes{{1, 1}, {0, 2}};
  const std::vector<double> grid{0.0, 0.5};
  const VarianceReductionTable table = variance_reduction_check(env, grid, prefixes);
  for (const VarianceReductionRow& row : table.rows) {
    CHECK(row.second_moment == 0.0);  // a deterministic next token leaves nothing to vary
    CHECK(row.reference == 0.0);
    CHECK(row.agrees);
  }

  const TheoryEnv good = lab.env(0.5, 1.0, 3);
  CHECK_THROWS(variance_reduction_check(good, std::vector<double>{0.5, 0.25}, prefixes));
  CHECK_THROWS(variance_reduction_check(good, std::vector<double>{0.5, 0.5}, prefixes));
  CHECK_THROWS(variance_reduction_check(good, std::vector<double>{1.5}, prefixes));
  CHECK_THROWS(variance_reduction_check(good, std::vector<double>{}, prefixes));
  CHECK_THROWS(variance_reduction_check(good, grid, {{0, 1, 2}}));
  CHECK_THROWS(variance_reduction_check(good, grid, {}));

  TheoryEnv no_teacher = lab.env(0.0, 1.0, 3);
  no_teacher.teacher = nullptr;
  CHECK_NOTHROW(variance_reduction_check(no_teacher, std::vector<double>{0.0}, prefixes));
  CHECK_THROWS(variance_reduction_check(no_teacher, grid, prefixes));
}

TEST_CASE("risk bound assembles its addends as documented") {
  const std::vector<double> v_t{0.01, 0.02};
  const double log_term = std::log(8.0) - std::log(0.05);
  const BoundBreakdown b =
      generalization_bound(1.3, v_t, 0.5, 2.0, 0.3, 0.1, 100, std::log(8.0), 0.05);
  CHECK(b.empirical_risk == 1.3);
  CHECK(b.variance_addend == doctest::Approx(std::sqrt(2.0 * 0.03 * log_term / 100.0)).epsilon(1e-15));
  CHECK(b.extreme_addend == doctest::Approx(2.0 * 0.5 * log_term / 300.0).epsilon(1e-15));
  CHECK(b.divergence_addend == doctest::Approx(4.0 * 2.0 * 0.1 / 2.0).epsilon(1e-15));
  CHECK(b.value ==
        b.empirical_risk + b.variance_addend + b.extreme_addend + b.divergence_addend);

  // no mixing, no divergence cost, even when a stale div value is passed in
  const BoundBreakdown plain =
      generalization_bound(1.3, v_t, 0.5, 2.0, 0.0, 0.1, 100, 0.0, 0.05);
  CHECK(plain.divergence_addend == 0.0);

  // zero variance and extremes collapse the bound onto the empirical risk
  const std::vector<double> zero{0.0, 0.0};
  const BoundBreakdown tight = generalization_bound(1.3, zero, 0.0, 2.0, 0.0, 0.0, 100, 0.0, 0.05);
  CHECK(tight.value == 1.3);

  CHECK_THROWS(generalization_bound(1.3, std::vector<double>{}, 0.5, 2.0, 0.3, 0.1, 100, 0.0, 0.05));
  CHECK_THROWS(generalization_bound(1.3, v_t, -0.5, 2.0, 0.3, 0.1, 100, 0.0, 0.05));
  CHECK_THROWS(generalization_bound(1.3, v_t, 0.5, 2.0, 0.3, 0.1, 0, 0.0, 0.05));
  CHECK_THROWS(generalization_bound(1.3, v_t, 0.5, 2.0, 0.3, 0.1, 100, 0.0, 0.0));
  CHECK_THROWS(generalization_bound(1.3, v_t, 0.5, 2.0, 0.3, 0.1, 100, 0.0, 1.0));
  CHECK_THROWS(generalization_bound(1.3, std::vector<double>{-0.1}, 0.5, 2.0, 0.3, 0.1, 100, 0.0, 0.05));
}

TEST_CASE("risk bound covers the population risk across resampled corpora") {
  const Lab lab = make_lab(3, 3, 83);
  const double m = 2.0;
  TheoryEnv env = lab.env(0.5, 1.0, 3);
  env.floor_eps = 3.0 * std::exp(-m);

  // corpus-independent pieces
  const XiStats stats = xi_stats_exhaustive(env);
  const double c = *std::max_element(stats.c_t.begin(), stats.c_t.end());
  const double div = divergence_term(env);
  const double risk_ce = population_risk_ce(env);

  // only 27 sequences exist, so tabulate the loss once
  std::vector<double> loss_by_id(27);
  for (std::size_t id = 0; id < 27; ++id) {
    loss_by_id[id] = sequence_loss_omega(env, decode(id, 3, 3));
  }

  const std::size_t n = 500;
  const std::size_t n_corpora = 200;
  const double delta = 0.1;
  std::size_t violations = 0;
  for (std::size_t r = 0; r < n_corpora; ++r) {
    const Corpus corp = sample_corpus(lab.source, n, 3, Rng(900).derive(r));
    double empirical = 0.0;
    for (std::size_t i = 0; i < n; ++i) empirical += loss_by_id[encode(corp.seq(i), 3)];
    empirical /= double(n);
    const BoundBreakdown b =
        generalization_bound(empirical, stats.v_t, c, m, 0.5, div, n, 0.0, delta);
    if (risk_ce > b.value) ++violations;
  }
  // a delta of 0.1 allows about 20 failures in expectation; three binomial
  // standard deviations on top keeps this stable across seed choices
  CHECK(violations <= 33);
}

TEST_CASE("risk gap stays within the scaled divergence") {
  const Lab lab = make_lab(3, 3, 89);

  TheoryEnv off = lab.env(0.0, 1.0, 3);
  const RiskGap trivially = risk_gap_check(off, 2.0);
  CHECK(trivially.lhs == 0.0);
  CHECK(trivially.rhs == 0.0);
  CHECK(trivially.holds);

  // the shortcut inside the check equals the two-risk difference
  const TheoryEnv mixed = lab.env(0.7, 0.25, 3);
  const double m = 2.5;
  const RiskGap gap = risk_gap_check(mixed, m);
  TheoryEnv floored = mixed;
  floored.floor_eps = 3.0 * std::exp(-m);
  const double direct =
      std::abs(population_risk_ce(floored) - population_risk_omega(floored));
  CHECK(std::abs(gap.lhs - direct) < 1e-12);
  CHECK(gap.holds);

  CHECK_THROWS(risk_gap_check(mixed, 1.0));  // below log V

  for (std::uint64_t s = 0; s < 100; ++s) {
    const Lab trial = make_lab(3, 3, 1000 + s);
    const double omega = 0.05 + 0.009 * double(s);
    const double rho = (s % 2 == 0) ? 0.25 : 1.0;
    const double bound_m = (s % 3 == 0) ? std::log(3.0) : 2.0 + 0.01 * double(s);
    const RiskGap g = risk_gap_check(trial.env(omega, rho, 3), bound_m);
    CHECK(g.lhs <= g.rhs + 1e-9);
    CHECK(g.holds);
  }
}

TEST_CASE("calibration curve and its inverse") {
  CHECK(calibration_g(0.0) == 0.0);
  CHECK(calibration_g(1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  // strictly increasing across a dense grid
  double prev = -1.0;
  for (int i = 0; i <= 10000; ++i) {
    const double g = calibration_g(double(i) / 10000.0);
    CHECK(g > prev);
    prev = g;
  }

  for (double eps : {1e-4, 0.01, 0.3, 0.5, 0.9, 0.999}) {
    CHECK(std::abs(calibration_g_inv(calibration_g(eps)) - eps) < 1e-8);
  }
  CHECK(calibration_g_inv(0.0) == 0.0);
  CHECK(calibration_g_inv(calibration_g(1.0)) == 1.0);

  CHECK_THROWS(calibration_g(-0.1));
  CHECK_THROWS(calibration_g(1.1));
  CHECK_THROWS(calibration_g_inv(-1e-12));
  CHECK_THROWS(calibration_g_inv(std::log(2.0) + 1e-6));
}

TEST_CASE("zero-one risk in closed form and by sampling") {
  // flat source: any guess misses with probability 3/4, exactly
  const GroundTruthSource flat = flat_source(4);
  const LmModel any = init_model(small_config(4, 6, 0.3), Rng(91));
  TheoryEnv fenv;
  fenv.source = &flat;
  fenv.student = &any;
  fenv.seq_len = 3;
  CHECK(zero_one_risk_exact(fenv) == 0.75);

  // deterministic source matched by a student that always argmaxes its token
  const GroundTruthSource point = point_source(4, 2);
  const LmModel matched = planted_model(4, 6, 2);
  TheoryEnv penv;
  penv.source = &point;
  penv.student = &matched;
  penv.seq_len = 3;
  CHECK(zero_one_risk_exact(penv) == 0.0);

  // greedy choice in the oracle comes from the public helper
  const Lab lab = make_lab(3, 2, 97);
  const TheoryEnv env = lab.env(0.0, 1.0, 2);
  double oracle = 0.0;
  std::vector<std::uint32_t> pfx;
  walk_prefixes(lab.source, 2, pfx, 1.0, [&](const std::vector<std::uint32_t>& p, double prob) {
    const Distribution d = true_conditional(lab.source, p);
    oracle += prob * (1.0 - d[greedy_next(lab.student, p)]);
  });
  oracle /= 2.0;
  const double exact = zero_one_risk_exact(env);
  CHECK(std::abs(exact - oracle) < 1e-14);

  const McEstimate mc = zero_one_risk_mc(env, 4000, Rng(13));
  CHECK(std::abs(mc.value - exact) <= 3.0 * mc.std_error + 1e-12);
  const McEstimate again = zero_one_risk_mc(env, 4000, Rng(13));
  CHECK(again.value == mc.value);
}

TEST_CASE("diagnostics report in exact mode") {
  const Lab lab = make_lab(3, 3, 101);
  const TheoryEnv env = lab.env(0.5, 0.5, 3);
  const Corpus corpus = sample_corpus(lab.source, 64, 3, Rng(103));

  DiagnosticsOptions opts;
  opts.m = 2.0;
  opts.delta = 0.1;
  opts.log_card = std::log(4.0);
  opts.seed = 3;
  const DiagnosticsReport rep = build_diagnostics_report(env, corpus, opts);

  CHECK(rep.exact);
  CHECK(rep.div_std_error == 0.0);
  CHECK(rep.div_term >= 0.0);

  // empirical risk equals the mean floored combined loss over the corpus
  TheoryEnv bounded = env;
  bounded.floor_eps = 3.0 * std::exp(-2.0);
  double mean = 0.0;
  std::vector<double> losses;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    losses.push_back(sequence_loss_omega(bounded, corpus.seq(i)));
    mean += losses.back();
  }
  mean /= double(corpus.size());
  CHECK(std::abs(rep.bound.empirical_risk - mean) < 1e-12);
  CHECK(std::abs(rep.v_n - sample_variance(losses)) < 1e-12);
  CHECK(rep.bound.value == rep.bound.empirical_risk + rep.bound.variance_addend +
                               rep.bound.extreme_addend + rep.bound.divergence_addend);

  CHECK(rep.per_t.c_t.size() == 3);
  CHECK(rep.c == *std::max_element(rep.per_t.c_t.begin(), rep.per_t.c_t.end()));
  CHECK(rep.risk_gap.holds);
  CHECK(rep.variance_identity.rows.size() == 5);
  for (const VarianceReductionRow& row : rep.variance_identity.rows) CHECK(row.agrees);
  CHECK(rep.variance_identity.non_increasing);
  CHECK(rep.zero_one >= 0.0);
  CHECK(rep.zero_one <= 1.0);
  CHECK(rep.population_ce >= rep.bayes - 1e-12);
  CHECK(rep.excess01_bound >= 0.0);
  CHECK(rep.excess01_bound <= 1.0);
  CHECK(!rep.notes.empty());

  // serialization parses back with the same fields, and the build is stable
  const std::string json = report_json(rep);
  const nlohmann::json parsed = nlohmann::json::parse(json);
  CHECK(parsed["mode"] == "exact");
  CHECK(parsed["per_position"].size() == 3);
  CHECK(parsed["bound"]["value"].get<double>() == rep.bound.value);
  CHECK(parsed["variance_identity"]["rows"].size() == 5);
  const DiagnosticsReport rep2 = build_diagnostics_report(env, corpus, opts);
  CHECK(report_json(rep2) == json);

  const std::string dir = "build/test_diagnostics/";
  std::filesystem::create_directories(dir);
  write_report_json(dir + "report.json", rep);
  write_variance_csv(dir + "variance.csv", rep.variance_identity);
  std::ifstream csv(dir + "variance.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 6);
  CHECK(lines[0] == "omega,second_moment,reference,agrees");
  std::ifstream back(dir + "report.json");
  std::stringstream buf;
  buf << back.rdbuf();
  CHECK(nlohmann::json::parse(buf.str())["mode"] == "exact");
}

TEST_CASE("diagnostics report falls back to sampling under a tight cap") {
  const Lab lab = make_lab(3, 3, 107);
  TheoryEnv env = lab.env(0.5, 0.5, 3);
  const Corpus corpus = sample_corpus(lab.source, 32, 3, Rng(109));

  DiagnosticsOptions opts;
  opts.m = 2.0;
  opts.log_card = 0.0;
  opts.mc_samples = 512;
  opts.xi_sequences = 3;
  opts.xi_mc_samples = 24;
  opts.variance_prefixes = 8;
  opts.seed = 11;

  const DiagnosticsReport exact_rep = build_diagnostics_report(env, corpus, opts);
  env.node_cap = 8;
  const DiagnosticsReport rep = build_diagnostics_report(env, corpus, opts);

  CHECK(!rep.exact);
  CHECK(rep.div_std_error > 0.0);
  CHECK(std::abs(rep.div_term - exact_rep.div_term) <= 3.0 * rep.div_std_error + 1e-12);
  CHECK(std::abs(rep.zero_one - exact_rep.zero_one) <= 3.0 * rep.zero_one_se + 1e-12);
  CHECK(std::abs(rep.population_ce - exact_rep.population_ce) < 0.25);
  CHECK(std::isfinite(rep.bound.value));
  CHECK(rep.per_t.c_t.size() == 3);
  bool mentions_mc = false;
  for (const std::string& note : rep.notes) {
    if (note.find("Monte Carlo") != std::string::npos) mentions_mc = true;
  }
  CHECK(mentions_mc);
  CHECK(nlohmann::json::parse(report_json(rep))["mode"] == "mc");

  // variance identity rows are exact either way, so the table carries over
  REQUIRE(rep.variance_identity.rows.size() == exact_rep.variance_identity.rows.size());
  for (std::size_t i = 0; i < rep.variance_identity.rows.size(); ++i) {
    CHECK(rep.variance_identity.rows[i].agrees);
  }

  const DiagnosticsReport again = build_diagnostics_report(env, corpus, opts);
  CHECK(report_json(again) == report_json(rep));
}

TEST_CASE("diagnostics report rejects malformed requests") {
  const Lab lab = make_lab(3, 3, 113);
  const TheoryEnv env = lab.env(0.5, 0.5, 3);
  const Corpus corpus = sample_corpus(lab.source, 16, 3, Rng(115));

  DiagnosticsOptions opts;
  opts.m = 1.0;  // below log 3
  CHECK_THROWS(build_diagnostics_report(env, corpus, opts));

  opts.m = 2.0;
  opts.delta = 0.0;
  CHECK_THROWS(build_diagnostics_report(env, corpus, opts));

  opts.delta = 0.1;
  const Corpus wrong = sample_corpus(lab.source, 16, 2, Rng(117));
  CHECK_THROWS(build_diagnostics_report(env, wrong, opts));

  Corpus tiny = corpus;
  tiny.tokens.resize(3);
  CHECK_THROWS(build_diagnostics_report(env, tiny, opts));
}

TEST_CASE("an oracle table can stand in for the teacher") {
  Lab lab = make_lab(3, 3, 131);
  const GroundTruthSource other = make_markov_source(1, 3, 0.9, Rng(137));

  TheoryEnv env = lab.env(0.5, 0.7, 3);
  env.teacher = nullptr;
  env.teacher_oracle = &other;
  env.floor_eps = 0.01;

  // depth-first recomputation with teacher rows read straight from the table
  double want_div = 0.0;
  double want_risk = 0.0;
  std::vector<std::uint32_t> pfx;
  walk_prefixes(lab.source, 3, pfx, 1.0,
                [&](const std::vector<std::uint32_t>& p, double prob) {
                  const Distribution src = true_conditional(lab.source, p);
                  const Distribution stu = apply_floor(model_next(lab.student, p), env.floor_eps);
                  const Distribution teach = temperature_scale(true_conditional(other, p), env.rho);
                  want_div += prob * tv_distance(teach, src);
                  double kd = 0.0;
                  double ce = 0.0;
                  for (std::size_t u = 0; u < 3; ++u) {
                    kd -= teach[u] * std::log(stu[u]);
                    ce -= src[u] * std::log(stu[u]);
                  }
                  want_risk += prob * ((1.0 - env.omega) * ce + env.omega * kd);
                });
  CHECK(std::abs(divergence_term(env) - env.omega * want_div) < 1e-12);
  CHECK(std::abs(population_risk_omega(env) - want_risk / 3.0) < 1e-12);

  // martingale differences still telescope
  const std::vector<std::uint32_t> x{2, 0, 1};
  double sum_xi = 0.0;
  for (std::size_t t = 1; t <= 3; ++t) sum_xi += xi_exact(env, x, t);
  CHECK(std::abs(sum_xi - (population_risk_omega(env) - sequence_loss_omega(env, x))) < 1e-10);

  // variance identity machinery accepts the oracle teacher
  const VarianceReductionTable table =
      variance_reduction_check(env, std::vector<double>{0.0, 0.5, 1.0}, {{0, 1}, {2, 2}});
  for (const auto& row : table.rows) CHECK(row.agrees);
  CHECK(table.non_increasing);
}

TEST_CASE("teacher equal to the source has zero divergence") {
  Lab lab = make_lab(4, 3, 139);
  TheoryEnv env = lab.env(0.667, 1.0, 3);
  env.teacher = nullptr;
  env.teacher_oracle = &lab.source;
  CHECK(divergence_term(env) == 0.0);

  // the scaled-teacher gap bound is then vacuously tight on its left side
  const RiskGap gap = risk_gap_check(env, 3.0);
  CHECK(gap.rhs >= 0.0);
  CHECK(gap.holds);
}

TEST_CASE("teacher configuration is validated") {
  Lab lab = make_lab(3, 3, 149);
  TheoryEnv env = lab.env(0.5, 1.0, 3);
  env.teacher_oracle = &lab.source;  // both teacher kinds set
  CHECK_THROWS(env.validate());

  env.teacher = nullptr;
  CHECK_NOTHROW(env.validate());

  const GroundTruthSource wrong_v = make_markov_source(1, 4, 0.8, Rng(151));
  env.teacher_oracle = &wrong_v;
  CHECK_THROWS(env.validate());

  GroundTruthSource spiked = lab.source;
  spiked.initial.assign(spiked.vocab_size, 0.0);
  spiked.initial[0] = 1.0;
  env.teacher_oracle = &spiked;
  CHECK_THROWS(env.validate());  // zero entries cannot be temperature scaled
}
