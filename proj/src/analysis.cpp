#include "repo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace repo::analysis {

Histogram histogram(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw AnalysisError("histogram needs at least one bin");
  double hi = 1.0;
  for (double v : values) hi = std::max(hi, v);
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = hi * double(b) / double(bins);
  h.counts.assign(bins, 0);
  for (double v : values) {
    auto b = static_cast<std::size_t>(std::floor(v / hi * double(bins)));
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

RangeStat range_stats(const PositionTrace& trace, std::size_t bins) {
  if (trace.entries.empty()) throw AnalysisError("range_stats: empty trace");
  RangeStat out;
  std::vector<double> spreads;
  for (const auto& e : trace.entries) {
    if (e.z.empty())
      throw AnalysisError("range_stats: empty positions for layer " +
                          std::to_string(e.layer) + " head " + std::to_string(e.head));
    const auto [mn, mx] = std::minmax_element(e.z.begin(), e.z.end());
    out.heads.push_back({e.layer, e.head, *mn, *mx});
    spreads.push_back(*mx - *mn);
  }
  out.histogram = histogram(spreads, bins);
  return out;
}

std::string to_string(ChunkPattern p) {
  switch (p) {
    case ChunkPattern::Constant: return "constant";
    case ChunkPattern::Mono: return "mono";
    case ChunkPattern::Hybrid: return "hybrid";
  }
  return "?";
}

std::size_t ChunkPatternReport::count(ChunkPattern p) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), p));
}

ChunkPattern classify_chunk(std::span<const double> chunk, double epsilon) {
  const double mean =
      std::accumulate(chunk.begin(), chunk.end(), 0.0) / double(chunk.size());
  const bool constant = std::all_of(chunk.begin(), chunk.end(), [&](double z) {
    return z >= mean - epsilon && z <= mean + epsilon;
  });
  if (constant) return ChunkPattern::Constant;
  bool inc = true, dec = true;
  for (std::size_t i = 1; i < chunk.size(); ++i) {
    inc = inc && chunk[i - 1] < chunk[i];
    dec = dec && chunk[i - 1] > chunk[i];
  }
  return (inc || dec) ? ChunkPattern::Mono : ChunkPattern::Hybrid;
}

namespace {

void finish(ChunkPatternReport& r) {
  const double n = double(r.labels.size());
  if (n == 0) return;
  r.constant_fraction = double(r.count(ChunkPattern::Constant)) / n;
  r.mono_fraction = double(r.count(ChunkPattern::Mono)) / n;
  r.hybrid_fraction = double(r.count(ChunkPattern::Hybrid)) / n;
}

void check_chunking(std::size_t delta, std::size_t len) {
  if (delta < 2) throw AnalysisError("chunk size must be at least 2");
  if (delta > len)
    throw AnalysisError("chunk size " + std::to_string(delta) +
                        " exceeds sequence length " + std::to_string(len));
}

}  // namespace

ChunkPatternReport classify_chunks(std::span<const double> z, std::size_t delta,
                                   double epsilon) {
  check_chunking(delta, z.size());
  ChunkPatternReport r;
  r.delta = delta;
  r.epsilon = epsilon;
  for (std::size_t b = 0; b + delta <= z.size(); b += delta)
    r.labels.push_back(classify_chunk(z.subspan(b, delta), epsilon));
  finish(r);
  return r;
}

ChunkPatternReport classify_trace(const PositionTrace& trace, std::size_t delta,
                                  double epsilon) {
  if (trace.entries.empty()) throw AnalysisError("classify_trace: empty trace");
  ChunkPatternReport r;
  r.delta = delta;
  r.epsilon = epsilon;
  for (const auto& e : trace.entries) {
    auto part = classify_chunks(e.z, delta, epsilon);
    r.labels.insert(r.labels.end(), part.labels.begin(), part.labels.end());
  }
  finish(r);
  return r;
}

AttentionMassReport attention_mass(
    std::span<const std::vector<double>> attention, std::size_t seq_len,
    const tasks::SpanAnnotation& spans, tasks::Span generated) {
  const std::size_t context_len = generated.begin;
  try {
    spans.validate_partition(context_len);
  } catch (const tasks::TaskError& e) {
    throw AnalysisError(std::string("attention_mass: ") + e.what());
  }
  if (generated.end <= generated.begin || generated.end > seq_len)
    throw AnalysisError("attention_mass: generated rows out of range");
  if (attention.empty()) throw AnalysisError("attention_mass: no attention maps");
  for (const auto& a : attention)
    if (a.size() != seq_len * seq_len)
      throw AnalysisError("attention_mass: map is not " + std::to_string(seq_len) +
                          "x" + std::to_string(seq_len));

  // Column -> bucket: 0 needle, 1 query, 2 rest, 3 outside the context.
  std::vector<int> bucket(seq_len, 3);
  for (std::size_t c = spans.needle.begin; c < spans.needle.end; ++c) bucket[c] = 0;
  for (std::size_t c = spans.query.begin; c < spans.query.end; ++c) bucket[c] = 1;
  for (const auto& s : spans.rest)
    for (std::size_t c = s.begin; c < s.end; ++c) bucket[c] = 2;

  double totals[4] = {0, 0, 0, 0};
  for (const auto& a : attention)
    for (std::size_t r = generated.begin; r < generated.end; ++r)
      for (std::size_t c = 0; c < seq_len; ++c) totals[bucket[c]] += a[r * seq_len + c];

  AttentionMassReport rep;
  rep.maps = attention.size();
  rep.generated_rows = generated.size();
  const double rows = double(attention.size()) * double(generated.size());
  rep.needle_tokens = spans.needle.size();
  rep.query_tokens = spans.query.size();
  for (const auto& s : spans.rest) rep.rest_tokens += s.size();
  rep.needle = totals[0] / rows / double(rep.needle_tokens);
  rep.query = totals[1] / rows / double(rep.query_tokens);
  rep.rest = totals[2] / rows / double(rep.rest_tokens);
  rep.generated = totals[3] / rows;
  return rep;
}

nlohmann::json trace_to_json(const PositionTrace& t) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : t.entries)
    entries.push_back({{"layer", e.layer}, {"head", e.head}, {"z", e.z}});
  return {{"seq_len", t.seq_len}, {"entries", entries}};
}

PositionTrace trace_from_json(const nlohmann::json& j) {
  PositionTrace t;
  try {
    t.seq_len = j.at("seq_len").get<std::size_t>();
    for (const auto& e : j.at("entries"))
      t.entries.push_back({e.at("layer").get<std::size_t>(), e.at("head").get<std::size_t>(),
                           e.at("z").get<std::vector<double>>()});
  } catch (const nlohmann::json::exception& e) {
    throw AnalysisError(std::string("malformed trace: ") + e.what());
  }
  for (const auto& e : t.entries)
    if (e.z.size() != t.seq_len)
      throw AnalysisError("malformed trace: entry length " + std::to_string(e.z.size()) +
                          " != seq_len " + std::to_string(t.seq_len));
  return t;
}

nlohmann::json to_json(const RangeStat& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.heads)
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"min", h.min},
                     {"max", h.max}, {"d", h.spread()}});
  return {{"heads", heads},
          {"histogram", {{"edges", r.histogram.edges}, {"counts", r.histogram.counts}}}};
}

nlohmann::json to_json(const ChunkPatternReport& r) {
  std::vector<std::string> labels;
  for (auto l : r.labels) labels.push_back(to_string(l));
  return {{"delta", r.delta},
          {"epsilon", r.epsilon},
          {"chunks", r.labels.size()},
          {"fractions",
           {{"constant", r.constant_fraction},
            {"mono", r.mono_fraction},
            {"hybrid", r.hybrid_fraction}}},
          {"labels", labels},
          // Large-model reference fractions, not targets at this scale.
          {"reference", {{"mono", 0.04}, {"constant", 0.22}}}};
}

nlohmann::json to_json(const AttentionMassReport& r) {
  return {{"per_token_mass",
           {{"needle", r.needle}, {"query", r.query}, {"rest", r.rest}}},
          {"tokens",
           {{"needle", r.needle_tokens}, {"query", r.query_tokens}, {"rest", r.rest_tokens}}},
          {"generated_mass", r.generated},
          {"generated_rows", r.generated_rows},
          {"maps", r.maps},
          {"reconstructed_total", r.reconstructed_total()},
          // Per-token needle mass reported for a 1B model, in units of 1e-2.
          {"reference_needle_1e-2", {{"repo", 2.013}, {"rope", 1.754}, {"nope", 1.572}}}};
}

std::string range_csv(const RangeStat& r) {
  std::ostringstream os;
  os << "layer,head,min,max,d\n";
  for (const auto& h : r.heads)
    os << h.layer << ',' << h.head << ',' << h.min << ',' << h.max << ','
       << h.spread() << '\n';
  return os.str();
}

std::string patterns_csv(const ChunkPatternReport& r) {
  std::ostringstream os;
  os << "chunk,label\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i)
    os << i << ',' << to_string(r.labels[i]) << '\n';
  return os.str();
}

std::string mass_csv(const AttentionMassReport& r) {
  std::ostringstream os;
  os << "span,tokens,per_token_mass\n";
  os << "needle," << r.needle_tokens << ',' << r.needle << '\n';
  os << "query," << r.query_tokens << ',' << r.query << '\n';
  os << "rest," << r.rest_tokens << ',' << r.rest << '\n';
  return os.str();
}

}  // namespace repo::analysis
