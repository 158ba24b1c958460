#pragma once

// Synthetic task generators: sequence reversal and a toy needle-in-a-haystack
// context with span annotations. All generators are pure functions of their
// seed and parameters.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace repo::tasks {

using TokenIds = std::vector<std::int32_t>;

// Closed toy vocabulary shared by every task.
namespace vocab {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kSep = 1;
inline constexpr std::int32_t kEos = 2;
// "Reverse the following words:" as four reserved tokens.
inline constexpr std::int32_t kInstruction[4] = {3, 4, 5, 6};
inline constexpr std::int32_t kKey = 7;  // needle marker
inline constexpr std::int32_t kAsk = 8;  // query marker
inline constexpr std::int32_t kFirstSymbol = 9;
inline constexpr std::size_t kSymbolCount = 26;  // A..Z
inline constexpr std::int32_t kFirstFiller = kFirstSymbol + kSymbolCount;
inline constexpr std::size_t kFillerCount = 10;
inline constexpr std::size_t kSize = kFirstFiller + kFillerCount;

TokenIds symbols();  // the 26 symbol ids
TokenIds fillers();  // the 10 filler ids
std::string token_name(std::int32_t id);
}  // namespace vocab

class TaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ReversalExample {
  TokenIds prompt;  // instruction + x + SEP
  TokenIds target;  // x reversed
  std::size_t length = 0;

  // The x slice of the prompt.
  TokenIds source() const;
};

inline constexpr std::size_t kInstructionLength = 4;

// Tokens a reversal example of length L occupies when trained on:
// prompt + target + EOS.
inline constexpr std::size_t reversal_sequence_length(std::size_t L) {
  return kInstructionLength + 2 * L + 2;
}

ReversalExample make_reversal(std::span<const std::int32_t> x);

// Lengths uniform over [lo, hi], symbols uniform over `symbols`.
// Throws TaskError if lo < 2, lo > hi, symbols is empty, or the longest
// example does not fit max_seq_len.
std::vector<ReversalExample> gen_reversal_split(
    std::uint64_t seed, std::size_t count, std::size_t lo, std::size_t hi,
    std::span<const std::int32_t> symbols, std::size_t max_seq_len);

// Half-open token index range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct SpanAnnotation {
  Span needle;
  Span query;
  std::vector<Span> rest;

  std::vector<Span> all() const;
  // Throws TaskError unless the spans are disjoint, nonempty, and cover
  // [0, context_len) exactly.
  void validate_partition(std::size_t context_len) const;
};

struct NiahExample {
  TokenIds context;
  SpanAnnotation spans;
  TokenIds answer;
};

// Layout: Rest, Needle(payload), Rest, Query(ASK). The needle offset is drawn
// from the seed with at least one filler token on each side. Throws TaskError
// when the payload does not fit or shares tokens with the filler vocabulary.
NiahExample gen_niah(std::uint64_t seed, std::size_t context_len,
                     std::span<const std::int32_t> payload,
                     std::span<const std::int32_t> filler);

// One line of a dataset dump.
struct TaskRecord {
  std::string task;  // "reversal" or "niah"
  TokenIds prompt_ids;
  TokenIds target_ids;
  std::size_t length = 0;  // reversal length, or context length for niah
  std::optional<SpanAnnotation> spans;
};

inline constexpr int kDatasetSchemaVersion = 1;

TaskRecord to_record(const ReversalExample& ex);
TaskRecord to_record(const NiahExample& ex);

nlohmann::json to_json(const TaskRecord& r);
TaskRecord record_from_json(const nlohmann::json& j);

void write_jsonl(std::ostream& os, std::span<const TaskRecord> records);
// Throws TaskError with the 1-based line number on malformed input.
std::vector<TaskRecord> read_jsonl(std::istream& is);
std::vector<TaskRecord> read_jsonl_file(const std::string& path);

}  // namespace repo::tasks
