#include "salt/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

constexpr std::size_t kMaxTableEntries = std::size_t{1} << 24;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error(std::string("corpus file truncated reading ") + what);
  return v;
}

std::uint32_t sample_row(const double* row, std::size_t vocab_size, double u) {
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t v = 0; v < vocab_size; ++v) {
    if (row[v] <= 0.0) continue;
    cum += row[v];
    last_positive = v;
    if (u < cum) return static_cast<std::uint32_t>(v);
  }
  return static_cast<std::uint32_t>(last_positive);  // guard against rounding in the total
}

}  // namespace

void GroundTruthSource::validate() const {
  require(vocab_size >= 2, "GroundTruthSource: vocab_size must be at least 2");
  require(order <= 3, "GroundTruthSource: order must be in [0,3]");
  require(table.size() == context_count() * vocab_size, "GroundTruthSource: table size mismatch");
  require(initial.size() == vocab_size, "GroundTruthSource: initial size mismatch");
  auto check_row = [&](const double* row, const std::string& what) {
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab_size; ++v) {
      require(row[v] >= 0.0, what + " has a negative probability");
      sum += row[v];
    }
    require(std::abs(sum - 1.0) <= 1e-12, what + " does not sum to 1");
  };
  check_row(initial.data(), "initial distribution");
  for (std::size_t c = 0; c < context_count(); ++c)
    check_row(table.data() + c * vocab_size, "context row " + std::to_string(c));
}

std::size_t GroundTruthSource::context_count() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < order; ++i) n *= vocab_size;
  return n;
}

std::size_t GroundTruthSource::context_index(std::span<const std::uint32_t> prefix) const {
  require(prefix.size() >= order, "context_index: prefix shorter than the order");
  std::size_t idx = 0;
  for (std::size_t i = prefix.size() - order; i < prefix.size(); ++i) {
    require(prefix[i] < vocab_size, "context_index: token id out of range");
    idx = idx * vocab_size + prefix[i];
  }
  return idx;
}

const double* GroundTruthSource::row_for(std::span<const std::uint32_t> prefix) const {
  if (prefix.size() < order) return initial.data();
  return table.data() + context_index(prefix) * vocab_size;
}

GroundTruthSource make_markov_source(std::size_t order, std::size_t vocab_size,
                                     double concentration, const Rng& seed) {
  require(order <= 3, "make_markov_source: order must be in [0,3]");
  require(vocab_size >= 2, "make_markov_source: vocab_size must be at least 2");
  require(concentration > 0.0, "make_markov_source: concentration must be positive");

  GroundTruthSource s;
  s.order = order;
  s.vocab_size = vocab_size;
  const std::size_t entries = s.context_count() * vocab_size;
  require(entries <= kMaxTableEntries,
          "make_markov_source: table of " + std::to_string(entries) + " probabilities is too large");

  s.table.resize(entries);
  Rng table_stream = seed.derive("table");
  for (std::size_t c = 0; c < s.context_count(); ++c)
    table_stream.next_dirichlet(concentration,
                                std::span<double>(s.table.data() + c * vocab_size, vocab_size));
  s.initial.resize(vocab_size);
  Rng init_stream = seed.derive("initial");
  init_stream.next_dirichlet(concentration, s.initial);
  s.source_id = "markov(order=" + std::to_string(order) + ",V=" + std::to_string(vocab_size) +
                ",seed=" + std::to_string(seed.seed()) + ")";
  return s;
}

Distribution true_conditional(const GroundTruthSource& source,
                              std::span<const std::uint32_t> prefix) {
  const double* row = source.row_for(prefix);
  Distribution d;
  d.probs.assign(row, row + source.vocab_size);
  return d;
}

std::uint32_t sample_from(const Distribution& d, double u) {
  require(u >= 0.0 && u < 1.0, "sample_from: u must lie in [0,1)");
  return sample_row(d.probs.data(), d.size(), u);
}

Corpus sample_corpus(const GroundTruthSource& source, std::size_t n_sequences, std::size_t seq_len,
                     const Rng& seed) {
  require(n_sequences >= 1 && seq_len >= 1, "sample_corpus: N and T must be positive");
  source.validate();

  Corpus corpus;
  corpus.vocab_size = source.vocab_size;
  corpus.seq_len = seq_len;
  corpus.tokens.resize(n_sequences * seq_len);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    Rng stream = seed.derive(i);
    std::uint32_t* x = corpus.tokens.data() + i * seq_len;
    for (std::size_t t = 0; t < seq_len; ++t)
      x[t] = sample_row(source.row_for({x, t}), source.vocab_size, stream.next_double());
  }
  corpus.provenance = source.source_id + ",corpus_seed=" + std::to_string(seed.seed());
  return corpus;
}

Corpus ingest_text(const std::string& path, std::size_t seq_len) {
  require(seq_len >= 1, "ingest_text: seq_len must be positive");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::runtime_error("ingest_text: " + path + " is empty");

  Corpus corpus;
  corpus.vocab_size = 257;  // bytes plus BOS
  corpus.seq_len = seq_len;
  const std::size_t n = bytes.size() / seq_len;  // tail dropped
  corpus.tokens.resize(n * seq_len);
  for (std::size_t i = 0; i < n * seq_len; ++i)
    corpus.tokens[i] = static_cast<unsigned char>(bytes[i]);
  corpus.provenance = "text(" + path + ")";
  return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
  require(corpus.seq_len >= 1, "save_corpus: empty sequence length");
  require(corpus.tokens.size() % corpus.seq_len == 0, "save_corpus: ragged corpus");
  for (std::uint32_t t : corpus.tokens)
    require(t < corpus.vocab_size, "save_corpus: token id out of range");

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os.write("SALTCORP", 8);
    put<std::uint32_t>(os, 1);
    put<std::uint64_t>(os, corpus.vocab_size);
    put<std::uint64_t>(os, corpus.size());
    put<std::uint64_t>(os, corpus.seq_len);
    os.write(reinterpret_cast<const char*>(corpus.tokens.data()),
             static_cast<std::streamsize>(corpus.tokens.size() * sizeof(std::uint32_t)));
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

Corpus load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, "SALTCORP", 8) != 0)
    throw std::runtime_error(path + " is not a corpus file");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != 1)
    throw std::runtime_error("unsupported corpus version " + std::to_string(version));

  Corpus corpus;
  corpus.vocab_size = get<std::uint64_t>(is, "vocab size");
  const auto n = get<std::uint64_t>(is, "sequence count");
  corpus.seq_len = get<std::uint64_t>(is, "sequence length");
  corpus.tokens.resize(n * corpus.seq_len);
  is.read(reinterpret_cast<char*>(corpus.tokens.data()),
          static_cast<std::streamsize>(corpus.tokens.size() * sizeof(std::uint32_t)));
  if (!is) throw std::runtime_error("corpus file truncated reading tokens");
  for (std::uint32_t t : corpus.tokens)
    if (t >= corpus.vocab_size) throw std::runtime_error("corpus token id out of range");
  corpus.provenance = path;
  return corpus;
}

}  // namespace salt
