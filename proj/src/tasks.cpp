#include "repo/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <set>

namespace repo::tasks {

namespace vocab {

TokenIds symbols() {
  TokenIds s(kSymbolCount);
  for (std::size_t i = 0; i < kSymbolCount; ++i) s[i] = kFirstSymbol + std::int32_t(i);
  return s;
}

TokenIds fillers() {
  TokenIds s(kFillerCount);
  for (std::size_t i = 0; i < kFillerCount; ++i) s[i] = kFirstFiller + std::int32_t(i);
  return s;
}

std::string token_name(std::int32_t id) {
  static const char* special[] = {"<pad>", "<sep>", "<eos>", "Reverse",
                                  "the",   "following", "words:", "<key>",
                                  "<ask>"};
  if (id >= 0 && id < kFirstSymbol) return special[id];
  if (id >= kFirstSymbol && id < kFirstFiller)
    return std::string(1, char('A' + (id - kFirstSymbol)));
  if (id >= kFirstFiller && id < std::int32_t(kSize))
    return "f" + std::to_string(id - kFirstFiller);
  return "<" + std::to_string(id) + ">";
}

}  // namespace vocab

TokenIds ReversalExample::source() const {
  return TokenIds(prompt.begin() + kInstructionLength,
                  prompt.begin() + kInstructionLength + length);
}

ReversalExample make_reversal(std::span<const std::int32_t> x) {
  ReversalExample ex;
  ex.length = x.size();
  ex.prompt.assign(std::begin(vocab::kInstruction), std::end(vocab::kInstruction));
  ex.prompt.insert(ex.prompt.end(), x.begin(), x.end());
  ex.prompt.push_back(vocab::kSep);
  ex.target.assign(x.rbegin(), x.rend());
  return ex;
}

std::vector<ReversalExample> gen_reversal_split(
    std::uint64_t seed, std::size_t count, std::size_t lo, std::size_t hi,
    std::span<const std::int32_t> symbols, std::size_t max_seq_len) {
  if (lo < 2) throw TaskError("reversal lengths must start at 2 or more");
  if (lo > hi) throw TaskError("reversal length range is empty");
  if (symbols.empty()) throw TaskError("reversal vocabulary is empty");
  if (reversal_sequence_length(hi) > max_seq_len) {
    throw TaskError("reversal length " + std::to_string(hi) + " needs " +
                    std::to_string(reversal_sequence_length(hi)) +
                    " tokens, over max_seq_len " + std::to_string(max_seq_len));
  }
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> len_dist(lo, hi);
  std::uniform_int_distribution<std::size_t> sym_dist(0, symbols.size() - 1);
  std::vector<ReversalExample> out;
  out.reserve(count);
  TokenIds x;
  for (std::size_t n = 0; n < count; ++n) {
    x.resize(len_dist(gen));
    for (auto& t : x) t = symbols[sym_dist(gen)];
    out.push_back(make_reversal(x));
  }
  return out;
}

std::vector<Span> SpanAnnotation::all() const {
  std::vector<Span> s{needle, query};
  s.insert(s.end(), rest.begin(), rest.end());
  return s;
}

void SpanAnnotation::validate_partition(std::size_t context_len) const {
  auto spans = all();
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin; });
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin >= s.end) throw TaskError("span annotation has an empty span");
    if (s.begin < cursor) throw TaskError("span annotation has overlapping spans");
    if (s.begin > cursor) throw TaskError("span annotation leaves a gap");
    cursor = s.end;
  }
  if (cursor != context_len)
    throw TaskError("span annotation covers " + std::to_string(cursor) +
                    " of " + std::to_string(context_len) + " context tokens");
}

NiahExample gen_niah(std::uint64_t seed, std::size_t context_len,
                     std::span<const std::int32_t> payload,
                     std::span<const std::int32_t> filler) {
  if (payload.empty()) throw TaskError("needle payload is empty");
  if (filler.empty()) throw TaskError("filler vocabulary is empty");
  const std::size_t query_len = 1;
  // At least one filler token before and after the needle.
  if (payload.size() + query_len + 2 > context_len) {
    throw TaskError("needle payload of " + std::to_string(payload.size()) +
                    " tokens does not fit a context of " +
                    std::to_string(context_len));
  }
  const std::set<std::int32_t> filler_set(filler.begin(), filler.end());
  for (auto t : payload) {
    if (filler_set.count(t) || t == vocab::kAsk)
      throw TaskError("needle payload token " + std::to_string(t) +
                      " also appears in the filler vocabulary");
  }
  std::mt19937_64 gen(seed);
  const std::size_t filler_total = context_len - payload.size() - query_len;
  std::uniform_int_distribution<std::size_t> off_dist(1, filler_total - 1);
  const std::size_t needle_begin = off_dist(gen);
  std::uniform_int_distribution<std::size_t> fill_dist(0, filler.size() - 1);

  NiahExample ex;
  ex.context.resize(context_len);
  for (std::size_t i = 0; i < needle_begin; ++i) ex.context[i] = filler[fill_dist(gen)];
  std::copy(payload.begin(), payload.end(), ex.context.begin() + needle_begin);
  const std::size_t needle_end = needle_begin + payload.size();
  const std::size_t query_begin = context_len - query_len;
  for (std::size_t i = needle_end; i < query_begin; ++i) ex.context[i] = filler[fill_dist(gen)];
  ex.context[query_begin] = vocab::kAsk;

  ex.spans.needle = {needle_begin, needle_end};
  ex.spans.query = {query_begin, context_len};
  ex.spans.rest = {{0, needle_begin}, {needle_end, query_begin}};
  ex.answer.assign(payload.begin(), payload.end());
  return ex;
}

TaskRecord to_record(const ReversalExample& ex) {
  return {"reversal", ex.prompt, ex.target, ex.length, std::nullopt};
}

TaskRecord to_record(const NiahExample& ex) {
  return {"niah", ex.context, ex.answer, ex.context.size(), ex.spans};
}

namespace {

nlohmann::json span_json(const Span& s) { return {s.begin, s.end}; }

Span span_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw TaskError("span must be [begin, end]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

}  // namespace

nlohmann::json to_json(const TaskRecord& r) {
  nlohmann::json j = {{"schema_version", kDatasetSchemaVersion},
                      {"task", r.task},
                      {"length", r.length},
                      {"prompt_ids", r.prompt_ids},
                      {"target_ids", r.target_ids}};
  if (r.spans) {
    nlohmann::json rest = nlohmann::json::array();
    for (const auto& s : r.spans->rest) rest.push_back(span_json(s));
    j["spans"] = {{"needle", span_json(r.spans->needle)},
                  {"query", span_json(r.spans->query)},
                  {"rest", rest}};
  }
  return j;
}

TaskRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw TaskError("record must be a JSON object");
  const int version = j.value("schema_version", -1);
  if (version != kDatasetSchemaVersion)
    throw TaskError("unsupported dataset schema_version " + std::to_string(version));
  TaskRecord r;
  r.task = j.at("task").get<std::string>();
  r.prompt_ids = j.at("prompt_ids").get<TokenIds>();
  r.target_ids = j.at("target_ids").get<TokenIds>();
  r.length = j.at("length").get<std::size_t>();
  if (auto it = j.find("spans"); it != j.end()) {
    SpanAnnotation s;
    s.needle = span_from(it->at("needle"));
    s.query = span_from(it->at("query"));
    for (const auto& x : it->at("rest")) s.rest.push_back(span_from(x));
    r.spans = s;
  }
  return r;
}

void write_jsonl(std::ostream& os, std::span<const TaskRecord> records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

std::vector<TaskRecord> read_jsonl(std::istream& is) {
  std::vector<TaskRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw TaskError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<TaskRecord> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TaskError("cannot open dataset '" + path + "'");
  return read_jsonl(in);
}

}  // namespace repo::tasks
