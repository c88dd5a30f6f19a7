#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "salt/lm.hpp"
#include "salt/rng.hpp"

namespace salt {

// Order-m Markov distribution over fixed-length token sequences, with exact
// conditional queries. Contexts are the last m tokens read as a base-V number
// (oldest token most significant); prefixes shorter than m fall back to the
// initial distribution.
struct GroundTruthSource {
  std::size_t order = 0;
  std::size_t vocab_size = 0;
  std::vector<double> table;    // V^order rows of length V, row-major
  std::vector<double> initial;  // length V
  std::string source_id;

  void validate() const;
  std::size_t context_count() const;
  std::size_t context_index(std::span<const std::uint32_t> prefix) const;
  // row for the context ending the prefix, or initial when it is too short
  const double* row_for(std::span<const std::uint32_t> prefix) const;
};

// N fixed-length sequences over one vocabulary, flattened row-major.
struct Corpus {
  std::size_t vocab_size = 0;
  std::size_t seq_len = 0;  // T
  std::vector<std::uint32_t> tokens;
  std::string provenance;  // source id + seed; not serialized

  std::size_t size() const { return seq_len == 0 ? 0 : tokens.size() / seq_len; }
  std::span<const std::uint32_t> seq(std::size_t i) const {
    return {tokens.data() + i * seq_len, seq_len};
  }
};

// Rows drawn i.i.d. from a symmetric Dirichlet(concentration); order in [0,3],
// table capped at 2^24 probabilities.
GroundTruthSource make_markov_source(std::size_t order, std::size_t vocab_size,
                                     double concentration, const Rng& seed);

// Exact D(. | prefix).
Distribution true_conditional(const GroundTruthSource& source,
                              std::span<const std::uint32_t> prefix);

// Inverse-CDF draw from d at uniform variate u.
std::uint32_t sample_from(const Distribution& d, double u);

// N i.i.d. sequences; each sequence consumes its own stream derived from the
// seed by index, so generation order never changes the result.
Corpus sample_corpus(const GroundTruthSource& source, std::size_t n_sequences, std::size_t seq_len,
                     const Rng& seed);

// Byte-level ingestion: vocabulary of 256 byte values plus BOS id 256, file
// chunked into length-T sequences with the tail dropped.
Corpus ingest_text(const std::string& path, std::size_t seq_len);
constexpr std::uint32_t kByteBos = 256;

// Corpus file: magic "SALTCORP", version, V, N, T, then N*T little-endian u32.
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);

}  // namespace salt
