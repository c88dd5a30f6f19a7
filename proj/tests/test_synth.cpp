#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "salt/rng.hpp"
#include "salt/synth.hpp"

using salt::Corpus;
using salt::Distribution;
using salt::GroundTruthSource;
using salt::Rng;

namespace {

// deterministic cycle 0 -> 1 -> ... -> V-1 -> 0, starting at `start`
GroundTruthSource cycle_source(std::size_t V, std::uint32_t start) {
  GroundTruthSource s;
  s.order = 1;
  s.vocab_size = V;
  s.table.assign(V * V, 0.0);
  for (std::size_t v = 0; v < V; ++v) s.table[v * V + (v + 1) % V] = 1.0;
  s.initial.assign(V, 0.0);
  s.initial[start] = 1.0;
  s.source_id = "cycle";
  s.validate();
  return s;
}

double tv_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return 0.5 * d;
}

}  // namespace

TEST_CASE("markov sources are deterministic, normalized and capped") {
  GroundTruthSource a = salt::make_markov_source(1, 3, 0.5, Rng(7));
  GroundTruthSource b = salt::make_markov_source(1, 3, 0.5, Rng(7));
  CHECK(a.table == b.table);
  CHECK(a.initial == b.initial);
  a.validate();

  GroundTruthSource c = salt::make_markov_source(1, 3, 0.5, Rng(8));
  CHECK(a.table != c.table);

  // near-infinite concentration flattens every row
  GroundTruthSource flat = salt::make_markov_source(1, 4, 1e6, Rng(9));
  for (double p : flat.table) CHECK(std::abs(p - 0.25) < 1e-2);
  for (double p : flat.initial) CHECK(std::abs(p - 0.25) < 1e-2);

  // order 0 keeps a single shared row
  GroundTruthSource o0 = salt::make_markov_source(0, 5, 1.0, Rng(10));
  CHECK(o0.context_count() == 1);
  CHECK(o0.table.size() == 5);

  CHECK_THROWS_AS(salt::make_markov_source(4, 3, 1.0, Rng(1)), std::invalid_argument);
  CHECK_THROWS_AS(salt::make_markov_source(3, 65, 1.0, Rng(1)), std::invalid_argument);
  CHECK_THROWS_AS(salt::make_markov_source(1, 3, 0.0, Rng(1)), std::invalid_argument);
}

TEST_CASE("true_conditional looks at exactly the last `order` tokens") {
  GroundTruthSource o0 = salt::make_markov_source(0, 4, 1.0, Rng(2));
  std::vector<std::uint32_t> p1 = {1, 2, 3}, p2 = {3, 0};
  CHECK(salt::true_conditional(o0, p1).probs == salt::true_conditional(o0, p2).probs);

  GroundTruthSource cyc = cycle_source(5, 2);
  std::vector<std::uint32_t> empty;
  CHECK(salt::true_conditional(cyc, empty).probs[2] == 1.0);
  std::vector<std::uint32_t> at4 = {2, 3, 4};
  CHECK(salt::true_conditional(cyc, at4).probs[0] == 1.0);

  GroundTruthSource o2 = salt::make_markov_source(2, 3, 0.7, Rng(3));
  for (std::uint32_t a = 0; a < 3; ++a) {
    for (std::uint32_t b = 0; b < 3; ++b) {
      std::vector<std::uint32_t> short_p = {a, b};
      std::vector<std::uint32_t> mid_p = {2, a, b};
      std::vector<std::uint32_t> long_p = {1, 0, 2, a, b};
      auto want = salt::true_conditional(o2, short_p).probs;
      CHECK(salt::true_conditional(o2, mid_p).probs == want);
      CHECK(salt::true_conditional(o2, long_p).probs == want);
    }
  }
  // shorter than the order: initial distribution
  std::vector<std::uint32_t> one = {1};
  CHECK(salt::true_conditional(o2, one).probs == o2.initial);
}

TEST_CASE("sample_from walks the cdf") {
  Distribution d{{0.3, 0.7}};
  CHECK(salt::sample_from(d, 0.0) == 0);
  CHECK(salt::sample_from(d, 0.29) == 0);
  CHECK(salt::sample_from(d, 0.31) == 1);
  CHECK(salt::sample_from(d, 0.999999) == 1);
  Distribution gap{{0.5, 0.0, 0.5}};
  CHECK(salt::sample_from(gap, 0.6) == 2);
  CHECK_THROWS_AS(salt::sample_from(d, 1.0), std::invalid_argument);
}

TEST_CASE("corpora replay by seed and follow deterministic sources") {
  GroundTruthSource cyc = cycle_source(4, 1);
  Corpus c1 = salt::sample_corpus(cyc, 3, 8, Rng(11));
  Corpus c2 = salt::sample_corpus(cyc, 3, 8, Rng(11));
  CHECK(c1.tokens == c2.tokens);
  CHECK(c1.size() == 3);
  CHECK(c1.seq_len == 8);
  for (std::size_t i = 0; i < c1.size(); ++i) {
    auto s = c1.seq(i);
    CHECK(s[0] == 1);
    for (std::size_t t = 1; t < 8; ++t) CHECK(s[t] == (s[t - 1] + 1) % 4);
  }
}

TEST_CASE("empirical transition frequencies converge to the table") {
  GroundTruthSource src = salt::make_markov_source(1, 3, 0.6, Rng(12));
  Corpus corpus = salt::sample_corpus(src, 20000, 16, Rng(13));

  std::vector<std::vector<double>> counts(3, std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto s = corpus.seq(i);
    for (std::size_t t = 1; t < s.size(); ++t) counts[s[t - 1]][s[t]] += 1.0;
  }
  for (std::size_t ctx = 0; ctx < 3; ++ctx) {
    double total = counts[ctx][0] + counts[ctx][1] + counts[ctx][2];
    REQUIRE(total > 0);
    for (double& c : counts[ctx]) c /= total;
    std::vector<double> row(src.table.begin() + ctx * 3, src.table.begin() + ctx * 3 + 3);
    CHECK(tv_distance(counts[ctx], row) < 0.01);
  }
}

TEST_CASE("monte carlo continuations track the exact conditional") {
  GroundTruthSource src = salt::make_markov_source(2, 4, 0.8, Rng(14));
  std::vector<std::uint32_t> prefix = {2, 1};
  Distribution exact = salt::true_conditional(src, prefix);

  Rng rng(15);
  std::vector<double> freq(4, 0.0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) freq[salt::sample_from(exact, rng.next_double())] += 1.0;
  for (double& f : freq) f /= draws;
  CHECK(tv_distance(freq, exact.probs) < 0.02);
}

TEST_CASE("text ingestion chunks bytes deterministically") {
  const std::string path = "build/test_ingest.bin";
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    for (int i = 0; i < 1000; ++i) os.put(static_cast<char>(i % 251));
  }
  Corpus a = salt::ingest_text(path, 100);
  CHECK(a.size() == 10);
  CHECK(a.seq_len == 100);
  CHECK(a.vocab_size == 257);
  CHECK(a.tokens[0] == 0);
  CHECK(a.tokens[300] == 300 % 251);
  Corpus b = salt::ingest_text(path, 100);
  CHECK(a.tokens == b.tokens);
  Corpus partial = salt::ingest_text(path, 300);  // tail of 100 bytes dropped
  CHECK(partial.size() == 3);

  const std::string constant = "build/test_ingest_const.bin";
  {
    std::ofstream os(constant, std::ios::binary | std::ios::trunc);
    for (int i = 0; i < 64; ++i) os.put('\x41');
  }
  Corpus c = salt::ingest_text(constant, 16);
  for (std::uint32_t t : c.tokens) CHECK(t == 0x41);

  const std::string empty = "build/test_ingest_empty.bin";
  { std::ofstream os(empty, std::ios::binary | std::ios::trunc); }
  CHECK_THROWS_AS(salt::ingest_text(empty, 16), std::runtime_error);
}

TEST_CASE("corpus files round-trip bit exactly") {
  GroundTruthSource src = salt::make_markov_source(1, 6, 0.9, Rng(16));
  Corpus corpus = salt::sample_corpus(src, 50, 12, Rng(17));
  const std::string path = "build/test_corpus.bin";
  salt::save_corpus(path, corpus);
  Corpus loaded = salt::load_corpus(path);
  CHECK(loaded.tokens == corpus.tokens);
  CHECK(loaded.vocab_size == corpus.vocab_size);
  CHECK(loaded.seq_len == corpus.seq_len);

  const std::string path2 = "build/test_corpus2.bin";
  salt::save_corpus(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(b1.size() == 8 + 4 + 3 * 8 + 50 * 12 * 4);

  {
    std::ofstream os(path2, std::ios::binary | std::ios::trunc);
    os << "SALTJUNKxxxxxxxxxxxxxxxx";
  }
  CHECK_THROWS_AS(salt::load_corpus(path2), std::runtime_error);
  {
    std::ofstream os(path2, std::ios::binary | std::ios::trunc);
    os.write(b1.data(), static_cast<std::streamsize>(b1.size() - 10));
  }
  CHECK_THROWS_AS(salt::load_corpus(path2), std::runtime_error);
}
