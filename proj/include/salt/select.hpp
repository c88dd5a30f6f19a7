#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "salt/lm.hpp"
#include "salt/synth.hpp"

namespace salt {

// How positions whose realized token falls outside the teacher's top-k are
// aggregated: dropped from the median (default), or kept as literal zeros.
enum class MaskMode { kExclude, kZero };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& s);

struct SequenceScore {
  std::optional<double> score;  // empty: nothing scoreable
  std::size_t kept_tokens = 0;
};

struct SelectionRecord {
  std::uint32_t index = 0;
  std::optional<double> score;
  std::size_t kept_tokens = 0;
  std::string teacher_ckpt;
};

// Median of per-position teacher losses -log P(x_i | x_<i), restricted to
// positions where x_i is inside the teacher's top-k next tokens (probability
// ties resolved toward the smaller id). Even counts average the middle two.
// Exclude mode with every position masked yields an empty score; zero mode
// follows the indicator formula, so masked positions stay as 0 losses.
SequenceScore score_sequence(const LmModel& teacher, std::span<const std::uint32_t> x,
                             std::size_t k, MaskMode mode = MaskMode::kExclude);

// One record per sequence, in corpus order. Parallel across sequences with a
// fixed-order merge; scores depend only on sequence content.
std::vector<SelectionRecord> score_corpus(const LmModel& teacher, const Corpus& corpus,
                                          std::size_t k, MaskMode mode = MaskMode::kExclude,
                                          const std::string& teacher_ckpt = "");

// Indices of the m highest-scoring records, returned in ascending index
// order. Score ties prefer the smaller sequence index; unscored records are
// never picked, and m beyond the scoreable count is an error.
std::vector<std::uint32_t> select_top_m(const std::vector<SelectionRecord>& records,
                                        std::size_t m);

// New corpus holding the given sequences of the original, in the given order.
Corpus subset_corpus(const Corpus& corpus, std::span<const std::uint32_t> indices);

// CSV round-trip: header "index,score,kept_tokens,teacher_ckpt"; empty scores
// serialize as the string NoScore; doubles keep full precision.
void write_scores_csv(const std::string& path, const std::vector<SelectionRecord>& records);
std::vector<SelectionRecord> read_scores_csv(const std::string& path);

}  // namespace salt
