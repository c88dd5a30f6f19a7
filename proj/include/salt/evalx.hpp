#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "salt/lm.hpp"
#include "salt/synth.hpp"

namespace salt {

// Forward-only evaluation over whole sequences. accuracy counts positions
// where the greedy (arg-max, smallest id on ties) prediction equals the
// realized token; log_perplexity is the mean per-token cross entropy.
struct EvalMetrics {
  double next_token_accuracy = 0.0;
  double log_perplexity = 0.0;
  std::size_t positions = 0;
};

EvalMetrics held_out_metrics(const LmModel& model, const Corpus& corpus);

// Same metrics restricted to the given sequence indices, in index order.
// Accumulation order is fixed, so the result never depends on thread count.
EvalMetrics subset_metrics(const LmModel& model, const Corpus& corpus,
                           std::span<const std::uint32_t> indices);

// Difficulty tertiles judged by a reference model: sequences are ranked by
// per-sequence cross entropy ascending (low loss reads as easy), ties broken
// by higher sequence log-likelihood and then by index. Sizes differ by at
// most one, with remainders going to the easier buckets first.
enum class Bucket { kEasy, kMedium, kHard };
std::string to_string(Bucket bucket);
Bucket bucket_from_string(const std::string& name);

struct BucketAssignment {
  std::vector<Bucket> bucket;     // per sequence, aligned with the corpus
  std::vector<double> score;      // per-sequence cross entropy under the ranker
  std::vector<double> tie_break;  // sequence log-likelihood under the ranker

  std::vector<std::uint32_t> members(Bucket b) const;  // ascending indices
};

BucketAssignment bucket_partition(const LmModel& ranker, const Corpus& corpus);

// held_out_metrics restricted to each tertile; empty buckets are absent
struct BucketMetrics {
  std::optional<EvalMetrics> easy;
  std::optional<EvalMetrics> medium;
  std::optional<EvalMetrics> hard;
};
BucketMetrics per_bucket_metrics(const LmModel& model, const Corpus& corpus,
                                 const BucketAssignment& buckets);

// CSV report with header `index,score,bucket`, one row per sequence. The
// tie-break key is not part of the file, so a read-back carries it empty.
void write_bucket_csv(const std::string& path, const BucketAssignment& buckets);
BucketAssignment read_bucket_csv(const std::string& path);

}  // namespace salt
