#include "salt/select.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "salt/parallel.hpp"
#include "salt/tape.hpp"

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double median_of(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  const std::size_t n = vals.size();
  if (n % 2 == 1) return vals[n / 2];
  return 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::kExclude: return "exclude";
    case MaskMode::kZero: return "zero";
  }
  throw std::invalid_argument("to_string: unknown mask mode");
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "exclude") return MaskMode::kExclude;
  if (s == "zero") return MaskMode::kZero;
  throw std::invalid_argument("mask_mode_from_string: unknown mode '" + s + "'");
}

SequenceScore score_sequence(const LmModel& teacher, std::span<const std::uint32_t> x,
                             std::size_t k, MaskMode mode) {
  const std::size_t V = teacher.config.vocab_size;
  require(k >= 1 && k <= V, "score_sequence: k must be in [1, V]");
  require(!x.empty(), "score_sequence: empty sequence");

  Tensor logp = forward_log_probs(teacher, std::vector<std::uint32_t>(x.begin(), x.end()));
  const std::size_t T = x.size();

  SequenceScore out;
  std::vector<double> agg;
  agg.reserve(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double lp_x = logp.at(i, x[i]);
    // kept iff fewer than k tokens rank strictly ahead (ties favor small ids)
    std::size_t ahead = 0;
    for (std::size_t v = 0; v < V; ++v) {
      const double lp_v = logp.at(i, v);
      if (lp_v > lp_x || (lp_v == lp_x && v < x[i])) ++ahead;
    }
    const bool kept = ahead < k;
    if (kept) {
      ++out.kept_tokens;
      agg.push_back(-lp_x);
    } else if (mode == MaskMode::kZero) {
      agg.push_back(0.0);
    }
  }
  if (!agg.empty()) out.score = median_of(agg);
  return out;
}

std::vector<SelectionRecord> score_corpus(const LmModel& teacher, const Corpus& corpus,
                                          std::size_t k, MaskMode mode,
                                          const std::string& teacher_ckpt) {
  require(corpus.size() >= 1, "score_corpus: empty corpus");
  require(corpus.vocab_size == teacher.config.vocab_size,
          "score_corpus: corpus vocabulary does not match the teacher");
  require(corpus.seq_len <= teacher.config.max_len,
          "score_corpus: sequences exceed the teacher's max length");
  const std::size_t n = corpus.size();
  std::vector<SelectionRecord> records(n);
  parallel_for(n, [&](std::size_t i) {
    SequenceScore s = score_sequence(teacher, corpus.seq(i), k, mode);
    records[i] = {static_cast<std::uint32_t>(i), s.score, s.kept_tokens, teacher_ckpt};
  });
  return records;
}

std::vector<std::uint32_t> select_top_m(const std::vector<SelectionRecord>& records,
                                        std::size_t m) {
  std::vector<std::uint32_t> scored;
  for (const SelectionRecord& r : records)
    if (r.score) scored.push_back(r.index);
  if (m > scored.size()) {
    throw std::invalid_argument("select_top_m: requested " + std::to_string(m) +
                                " sequences but only " + std::to_string(scored.size()) + " of " +
                                std::to_string(records.size()) + " have scores");
  }
  // records carry their own indices; build a lookup so callers may reorder them
  std::uint32_t max_index = 0;
  for (const SelectionRecord& r : records) max_index = std::max(max_index, r.index);
  std::vector<const SelectionRecord*> by_index(records.empty() ? 0 : max_index + 1, nullptr);
  for (const SelectionRecord& r : records) by_index[r.index] = &r;

  std::stable_sort(scored.begin(), scored.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double sa = *by_index[a]->score, sb = *by_index[b]->score;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  scored.resize(m);
  std::sort(scored.begin(), scored.end());
  return scored;
}

Corpus subset_corpus(const Corpus& corpus, std::span<const std::uint32_t> indices) {
  Corpus out;
  out.vocab_size = corpus.vocab_size;
  out.seq_len = corpus.seq_len;
  out.provenance = corpus.provenance;
  out.tokens.reserve(indices.size() * corpus.seq_len);
  for (std::uint32_t i : indices) {
    require(i < corpus.size(), "subset_corpus: index out of range");
    auto s = corpus.seq(i);
    out.tokens.insert(out.tokens.end(), s.begin(), s.end());
  }
  return out;
}

void write_scores_csv(const std::string& path, const std::vector<SelectionRecord>& records) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_scores_csv: cannot open " + path);
  out << "index,score,kept_tokens,teacher_ckpt\n";
  for (const SelectionRecord& r : records) {
    out << r.index << ',' << (r.score ? format_double(*r.score) : "NoScore") << ','
        << r.kept_tokens << ',' << r.teacher_ckpt << '\n';
  }
  require(out.good(), "write_scores_csv: write failed for " + path);
}

std::vector<SelectionRecord> read_scores_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_scores_csv: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "read_scores_csv: empty file " + path);
  require(line == "index,score,kept_tokens,teacher_ckpt",
          "read_scores_csv: unexpected header in " + path);
  std::vector<SelectionRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string idx, score, kept, ckpt;
    require(static_cast<bool>(std::getline(ss, idx, ',')) &&
                static_cast<bool>(std::getline(ss, score, ',')) &&
                static_cast<bool>(std::getline(ss, kept, ',')),
            "read_scores_csv: malformed row '" + line + "'");
    std::getline(ss, ckpt);  // may be empty
    SelectionRecord r;
    r.index = static_cast<std::uint32_t>(std::stoul(idx));
    if (score != "NoScore") r.score = std::stod(score);
    r.kept_tokens = std::stoul(kept);
    r.teacher_ckpt = ckpt;
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace salt
