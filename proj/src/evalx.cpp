#include "salt/evalx.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "salt/tape.hpp"

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

constexpr std::size_t kEvalChunk = 64;  // sequences per forward pass

std::size_t row_argmax(const Tensor& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < m.cols(); ++v)
    if (m.at(r, v) > m.at(r, best)) best = v;
  return best;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

EvalMetrics subset_metrics(const LmModel& model, const Corpus& corpus,
                           std::span<const std::uint32_t> indices) {
  require(!indices.empty(), "subset_metrics: no sequences to evaluate");
  require(corpus.vocab_size == model.config.vocab_size,
          "subset_metrics: corpus/model vocabulary mismatch");
  require(corpus.seq_len <= model.config.max_len,
          "subset_metrics: sequence length exceeds model max_len");
  const std::size_t T = corpus.seq_len;
  for (std::uint32_t i : indices)
    require(i < corpus.size(), "subset_metrics: sequence index out of range");

  double ce_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::uint32_t> tokens;
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const std::size_t stop = std::min(start + kEvalChunk, indices.size());
    tokens.clear();
    for (std::size_t i = start; i < stop; ++i) {
      auto s = corpus.seq(indices[i]);
      tokens.insert(tokens.end(), s.begin(), s.end());
    }
    Tape tape;
    std::vector<int> ids = push_params(tape, model, false);
    int lp = build_forward(tape, model.config, ids, tokens, T);
    const Tensor& vals = tape.value(lp);
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      ce_sum -= vals.at(r, tokens[r]);
      if (row_argmax(vals, r) == tokens[r]) ++correct;
    }
  }
  const std::size_t positions = indices.size() * T;
  EvalMetrics out;
  out.next_token_accuracy = static_cast<double>(correct) / static_cast<double>(positions);
  out.log_perplexity = ce_sum / static_cast<double>(positions);
  out.positions = positions;
  return out;
}

EvalMetrics held_out_metrics(const LmModel& model, const Corpus& corpus) {
  require(corpus.size() > 0, "held_out_metrics: empty corpus");
  std::vector<std::uint32_t> all(corpus.size());
  std::iota(all.begin(), all.end(), 0u);
  return subset_metrics(model, corpus, all);
}

std::string to_string(Bucket bucket) {
  switch (bucket) {
    case Bucket::kEasy: return "easy";
    case Bucket::kMedium: return "medium";
    case Bucket::kHard: return "hard";
  }
  throw std::invalid_argument("to_string: unknown bucket");
}

Bucket bucket_from_string(const std::string& name) {
  if (name == "easy") return Bucket::kEasy;
  if (name == "medium") return Bucket::kMedium;
  if (name == "hard") return Bucket::kHard;
  throw std::invalid_argument("bucket_from_string: unknown bucket '" + name + "'");
}

std::vector<std::uint32_t> BucketAssignment::members(Bucket b) const {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < bucket.size(); ++i) {
    if (bucket[i] == b) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

BucketAssignment bucket_partition(const LmModel& ranker, const Corpus& corpus) {
  const std::size_t n = corpus.size();
  require(n > 0, "bucket_partition: empty corpus");
  require(corpus.vocab_size == ranker.config.vocab_size,
          "bucket_partition: corpus/model vocabulary mismatch");
  require(corpus.seq_len <= ranker.config.max_len,
          "bucket_partition: sequence length exceeds model max_len");
  const std::size_t T = corpus.seq_len;

  BucketAssignment out;
  out.bucket.assign(n, Bucket::kHard);
  out.score.resize(n);
  out.tie_break.resize(n);
  std::vector<std::uint32_t> tokens;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t stop = std::min(start + kEvalChunk, n);
    tokens.clear();
    for (std::size_t i = start; i < stop; ++i) {
      auto s = corpus.seq(i);
      tokens.insert(tokens.end(), s.begin(), s.end());
    }
    Tape tape;
    std::vector<int> ids = push_params(tape, ranker, false);
    int lp = build_forward(tape, ranker.config, ids, tokens, T);
    const Tensor& vals = tape.value(lp);
    for (std::size_t i = start; i < stop; ++i) {
      double ll = 0.0;
      for (std::size_t t = 0; t < T; ++t) ll += vals.at((i - start) * T + t, tokens[(i - start) * T + t]);
      out.tie_break[i] = ll;
      out.score[i] = -ll / static_cast<double>(T);
    }
  }

  // low loss first; on ties the more likely sequence reads as easier, then
  // the earlier index
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (out.score[a] != out.score[b]) return out.score[a] < out.score[b];
    if (out.tie_break[a] != out.tie_break[b]) return out.tie_break[a] > out.tie_break[b];
    return a < b;
  });

  const std::size_t base = n / 3;
  const std::size_t rem = n % 3;
  const std::size_t n_easy = base + (rem >= 1 ? 1 : 0);
  const std::size_t n_medium = base + (rem >= 2 ? 1 : 0);
  for (std::size_t r = 0; r < n; ++r) {
    out.bucket[order[r]] =
        r < n_easy ? Bucket::kEasy : (r < n_easy + n_medium ? Bucket::kMedium : Bucket::kHard);
  }
  return out;
}

BucketMetrics per_bucket_metrics(const LmModel& model, const Corpus& corpus,
                                 const BucketAssignment& buckets) {
  require(buckets.bucket.size() == corpus.size(),
          "per_bucket_metrics: assignment does not cover the corpus");
  BucketMetrics out;
  for (Bucket b : {Bucket::kEasy, Bucket::kMedium, Bucket::kHard}) {
    const std::vector<std::uint32_t> idx = buckets.members(b);
    if (idx.empty()) continue;
    const EvalMetrics m = subset_metrics(model, corpus, idx);
    (b == Bucket::kEasy ? out.easy : b == Bucket::kMedium ? out.medium : out.hard) = m;
  }
  return out;
}

void write_bucket_csv(const std::string& path, const BucketAssignment& buckets) {
  require(buckets.score.size() == buckets.bucket.size(),
          "write_bucket_csv: scores do not cover the assignment");
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  require(out.good(), "write_bucket_csv: cannot open " + path);
  out << "index,score,bucket\n";
  for (std::size_t i = 0; i < buckets.bucket.size(); ++i) {
    out << i << ',' << format_double(buckets.score[i]) << ',' << to_string(buckets.bucket[i])
        << '\n';
  }
}

BucketAssignment read_bucket_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_bucket_csv: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "index,score,bucket",
          "read_bucket_csv: bad header in " + path);
  BucketAssignment out;
  std::size_t expect = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string index_s, score_s, bucket_s;
    require(static_cast<bool>(std::getline(row, index_s, ',')) &&
                static_cast<bool>(std::getline(row, score_s, ',')) &&
                static_cast<bool>(std::getline(row, bucket_s)),
            "read_bucket_csv: malformed row '" + line + "'");
    require(std::stoul(index_s) == expect, "read_bucket_csv: rows must be in index order");
    out.score.push_back(std::stod(score_s));
    out.bucket.push_back(bucket_from_string(bucket_s));
    ++expect;
  }
  return out;
}

}  // namespace salt
