#pragma once

// Diagnostics over position traces and attention maps: per-head position
// spread, chunk pattern classification, and attention mass per context span.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "repo/positioning.hpp"
#include "repo/tasks.hpp"

namespace repo::analysis {

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct HeadRange {
  std::size_t layer = 0;
  std::size_t head = 0;
  double min = 0, max = 0;
  double spread() const { return max - min; }  // d^{k,h}
};

struct Histogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<std::size_t> counts;
};

struct RangeStat {
  std::vector<HeadRange> heads;
  Histogram histogram;
};

// Equal-width bins from 0 to the largest spread (at least 1).
Histogram histogram(std::span<const double> values, std::size_t bins);

// Throws AnalysisError for an empty trace or an empty head vector.
RangeStat range_stats(const PositionTrace& trace, std::size_t bins = 10);

enum class ChunkPattern { Constant, Mono, Hybrid };
std::string to_string(ChunkPattern p);

inline constexpr std::size_t kDefaultChunkSize = 16;
inline constexpr double kDefaultEpsilon = 0.2;

struct ChunkPatternReport {
  std::size_t delta = kDefaultChunkSize;
  double epsilon = kDefaultEpsilon;
  std::vector<ChunkPattern> labels;  // one per full chunk
  double constant_fraction = 0;
  double mono_fraction = 0;
  double hybrid_fraction = 0;

  std::size_t count(ChunkPattern p) const;
};

// One chunk: Constant if every value lies within [mean - eps, mean + eps];
// otherwise Mono if strictly increasing or strictly decreasing; else Hybrid.
ChunkPattern classify_chunk(std::span<const double> chunk, double epsilon);

// Splits z into consecutive chunks of delta values, dropping a shorter tail.
// Throws AnalysisError if delta < 2 or delta > z.size().
ChunkPatternReport classify_chunks(std::span<const double> z, std::size_t delta,
                                   double epsilon);

// Pools the chunk labels of every entry in a trace.
ChunkPatternReport classify_trace(const PositionTrace& trace, std::size_t delta,
                                  double epsilon);

struct AttentionMassReport {
  // Mean per-token probability flowing from a generated token into each span.
  double needle = 0, query = 0, rest = 0;
  std::size_t needle_tokens = 0, query_tokens = 0, rest_tokens = 0;
  // Mean total probability on positions outside the context (earlier
  // generated tokens and the token itself).
  double generated = 0;
  std::size_t generated_rows = 0;
  std::size_t maps = 0;

  // needle*|needle| + query*|query| + rest*|rest| + generated; 1 for
  // row-stochastic attention.
  double reconstructed_total() const {
    return needle * double(needle_tokens) + query * double(query_tokens) +
           rest * double(rest_tokens) + generated;
  }
};

// attention: one [L x L] row-stochastic map per (layer, head). Rows
// generated.begin .. generated.end-1 are averaged; columns are bucketed by
// `spans`, which must partition [0, context_len) where context_len =
// generated.begin. Throws AnalysisError on overlapping spans or bad ranges.
AttentionMassReport attention_mass(
    std::span<const std::vector<double>> attention, std::size_t seq_len,
    const tasks::SpanAnnotation& spans, tasks::Span generated);

// Trace files: {"seq_len": L, "entries": [{"layer", "head", "z"}]}.
nlohmann::json trace_to_json(const PositionTrace& t);
PositionTrace trace_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RangeStat& r);
nlohmann::json to_json(const ChunkPatternReport& r);
nlohmann::json to_json(const AttentionMassReport& r);

std::string range_csv(const RangeStat& r);
std::string patterns_csv(const ChunkPatternReport& r);
std::string mass_csv(const AttentionMassReport& r);

}  // namespace repo::analysis
