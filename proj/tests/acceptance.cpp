// Acceptance suite. Prints one PASS/FAIL line per criterion and writes
// supporting artifacts under --out.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "analysis_oracles.hpp"
#include "gradcheck.hpp"
#include "reference_transformer.hpp"
#include "repo/analysis.hpp"
#include "repo/checkpoint.hpp"
#include "repo/manifest.hpp"
#include "repo/ops.hpp"
#include "repo/plot.hpp"
#include "repo/trainer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
namespace an = repo::analysis;
namespace tk = repo::tasks;
using nlohmann::json;
using repo::Model;
using repo::ModelConfig;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  json data = json::object();
};

fs::path g_out;

void save(const std::string& name, const std::string& text) {
  repo::write_text_atomic((g_out / name).string(), text);
}

ModelConfig small(const std::string& schedule, std::size_t vocab = 13) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_p = 4;
  c.max_seq_len = 32;
  c.schedule = repo::named_schedule(schedule, 2, 0);
  return c;
}

void randomize_readouts(Model<double>& m, std::uint64_t seed, double scale) {
  for (std::size_t k = 0; k < m.config().n_layers; ++k)
    if (auto& r = m.layer(k).repo)
      r->readout.value = testutil::random_tensor<double>(r->readout.value.shape(), seed + k, scale);
}

double max_abs(const repo::Tensor<double>& a, const repo::Tensor<double>& b) {
  return testutil::max_abs_diff(a.vec(), b.vec());
}

// ---------------------------------------------------------------- 1

Outcome equivalence_triangle() {
  double worst_linear = 0, worst_learned = 0;
  std::size_t bit_exact = 0;
  const std::size_t seeds = 100;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    std::mt19937_64 gen(s);
    const std::size_t L = 4 + s % 20;
    auto toks = testutil::random_tokens(L, 13, 1000 + s);

    auto lin = Model<double>::build(small("rope"), s);
    reftest::ReferenceTransformer ref_lin(lin);
    worst_linear = std::max(worst_linear, reftest::max_abs_diff(ref_lin.forward(toks).logits,
                                                                lin.forward(toks).logits));

    auto cst = Model<double>::build(small("nope"), s);
    reftest::ReferenceTransformer ref_cst(cst);
    bit_exact += reftest::bit_equal(ref_cst.forward(toks).logits, cst.forward(toks).logits);

    // Learned twin of the Constant model: same weights, W^z = 0, random W^g/W^c.
    auto learned = Model<double>::build(small("repo"), s + 7919);
    for (auto* p : cst.parameters()) *learned.find(p->name) = *p;
    worst_learned = std::max(worst_learned,
                             max_abs(learned.forward(toks).logits, cst.forward(toks).logits));
  }
  Outcome o;
  o.pass = worst_linear <= 1e-6 && bit_exact == seeds && worst_learned <= 1e-6;
  std::ostringstream d;
  d << "linear vs reference max " << worst_linear << ", constant bit-exact " << bit_exact
    << "/" << seeds << ", learned(W^z=0) vs constant max " << worst_learned;
  o.detail = d.str();
  o.data = {{"seeds", seeds},
            {"linear_max_abs", worst_linear},
            {"constant_bit_exact", bit_exact},
            {"learned_zero_readout_max_abs", worst_learned}};
  return o;
}

// ---------------------------------------------------------------- 2

std::string param_class(const std::string& name) {
  if (name == "embed" || name == "unembed") return "embeddings";
  if (name.find(".repo.gate") != std::string::npos) return "W^g";
  if (name.find(".repo.content") != std::string::npos) return "W^c";
  if (name.find(".repo.readout") != std::string::npos) return "W^z";
  for (const char* w : {".wq", ".wk", ".wv", ".wo"})
    if (name.find(w) != std::string::npos) return "attention";
  if (name.find("norm") != std::string::npos) return "norms";
  return "ffn";
}

Outcome gradient_fidelity() {
  std::map<std::string, double> worst;
  json instances = json::array();
  const int n = 6;
  for (int i = 0; i < n; ++i) {
    auto cfg = small("repo");
    cfg.d_model = 8;
    cfg.d_p = 3;
    cfg.init_std = 0.5;
    cfg.position_init_std = 0.5;
    cfg.share_fphi_across_heads = i % 2 == 0;
    auto m = Model<double>::build(cfg, 500 + std::uint64_t(i));
    randomize_readouts(m, 600 + std::uint64_t(10 * i), 2.0);
    auto toks = testutil::random_tokens(6, 13, 700 + std::uint64_t(i));
    std::vector<std::int32_t> next(toks.begin() + 1, toks.end());
    next.push_back(2);
    const std::vector<double> mask(toks.size(), 1.0);
    auto loss = [&](repo::Graph<double>& g) {
      return repo::ops::cross_entropy(m.forward(g, toks), std::span<const std::int32_t>(next),
                                      std::span<const double>(mask));
    };
    // One parameter at a time so each gets its own relative error.
    json per = json::object();
    for (auto* p : m.parameters()) {
      auto r = testutil::gradient_check({p}, loss, 1e-4);
      per[p->name] = r.max_rel_error;
      auto& w = worst[param_class(p->name)];
      w = std::max(w, r.max_rel_error);
    }
    instances.push_back({{"shared_readout", cfg.share_fphi_across_heads}, {"rel_error", per}});
  }
  Outcome o;
  o.pass = true;
  std::ostringstream d;
  d << n << " instances;";
  for (const auto& cls : {"embeddings", "attention", "W^g", "W^c", "W^z", "norms", "ffn"}) {
    const bool seen = worst.count(cls) > 0;
    o.pass = o.pass && seen && worst[cls] < 1e-4;
    d << " " << cls << " " << worst[cls];
  }
  o.detail = d.str();
  o.data = {{"h", 1e-4}, {"tolerance", 1e-4}, {"worst_by_class", worst},
            {"instances", instances}};
  return o;
}

// ---------------------------------------------------------------- 3

// Shift check on one model: attention logits from relative_rotary_logits on
// the model's own positions, plus the model's attention maps and outputs
// under a uniform offset.
double shift_error(const Model<double>& m, std::span<const std::int32_t> toks,
                   std::mt19937_64& gen) {
  std::uniform_real_distribution<double> shift(-1000, 1000);
  const std::size_t dh = m.config().d_head();
  const auto freqs = repo::rope_frequencies(dh, m.config().rope_base);
  auto base = m.forward(toks, {.want_trace = true, .want_attention = true});
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const double c = shift(gen);
    for (const auto& e : base.trace->entries) {
      auto q = testutil::random_tensor({toks.size(), dh}, gen());
      auto k = testutil::random_tensor({toks.size(), dh}, gen());
      std::vector<double> zs = e.z;
      for (auto& z : zs) z += c;
      auto a = repo::relative_rotary_logits<double>(q, k, e.z, e.z, freqs);
      auto b = repo::relative_rotary_logits<double>(q, k, zs, zs, freqs);
      worst = std::max(worst, max_abs(a, b));
    }
    auto shifted =
        m.forward(toks, {.want_trace = true, .want_attention = true, .position_offset = c});
    for (std::size_t i = 0; i < base.attention.size(); ++i)
      worst = std::max(worst, max_abs(base.attention[i], shifted.attention[i]));
    worst = std::max(worst, max_abs(base.logits, shifted.logits));
  }
  return worst;
}

std::vector<tk::TaskRecord> records(std::uint64_t seed, std::size_t n, std::size_t lo,
                                    std::size_t hi);

Outcome shift_invariance(const Model<float>* trained) {
  std::mt19937_64 gen(31);
  double worst = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto cfg = small("repo");
    cfg.n_layers = 3;
    cfg.schedule = repo::schedule_repo(3, s % 2);
    cfg.share_fphi_across_heads = s % 3 != 0;
    auto m = Model<double>::build(cfg, 800 + s);
    randomize_readouts(m, 900 + s, 3.0);
    auto toks = testutil::random_tokens(24, 13, 950 + s);
    worst = std::max(worst, shift_error(m, toks, gen));
  }
  double trained_worst = -1;
  if (trained) {
    auto md = trained->cast<double>();
    auto ex = records(78, 1, 25, 25).front();
    auto seq = ex.prompt_ids;
    seq.insert(seq.end(), ex.target_ids.begin(), ex.target_ids.end());
    trained_worst = shift_error(md, seq, gen);
    worst = std::max(worst, trained_worst);
  }
  Outcome o;
  o.pass = worst <= 1e-6;
  std::ostringstream d;
  d << "max change " << worst << " over 20 random models";
  if (trained) d << " + trained RePo (" << trained_worst << ")";
  o.detail = d.str();
  o.data = {{"max_abs_change", worst}, {"trained_model_max_abs_change", trained_worst}};
  return o;
}

// ---------------------------------------------------------------- 4 and 6

struct RunResult {
  std::string schedule;
  std::uint64_t seed = 0;
  double in_domain = 0, ood = 0, seconds = 0, final_loss = 0;
};

struct ReversalSetup {
  std::size_t steps = 3000;
  std::size_t d_model = 32;
};

ModelConfig reversal_model(const std::string& schedule, const ReversalSetup& s) {
  ModelConfig c;
  c.vocab_size = tk::vocab::kSize;
  c.d_model = s.d_model;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_p = s.d_model / 8;
  c.max_seq_len = tk::reversal_sequence_length(30);
  c.schedule = repo::named_schedule(schedule, 4, 0);
  return c;
}

repo::TrainConfig reversal_train(std::uint64_t seed, const ReversalSetup& s) {
  repo::TrainConfig t;
  t.steps = s.steps;
  t.batch_size = 32;
  t.lr = 3e-3;
  t.warmup_steps = s.steps / 20;
  t.weight_decay = 0.0;
  t.clip_norm = 1.0;
  t.eval_every = s.steps;
  t.seed = seed;
  t.position_lr_scale = 3.0;
  return t;
}

std::vector<tk::TaskRecord> records(std::uint64_t seed, std::size_t n, std::size_t lo,
                                    std::size_t hi) {
  std::vector<tk::TaskRecord> out;
  for (const auto& e : tk::gen_reversal_split(seed, n, lo, hi, tk::vocab::symbols(),
                                              tk::reversal_sequence_length(30)))
    out.push_back(tk::to_record(e));
  return out;
}

Outcome reversal_reproduction(const ReversalSetup& setup, std::optional<Model<float>>& repo0,
                              std::vector<tk::TaskRecord>& eval_set) {
  eval_set = records(999, 1500, 2, 30);
  std::vector<RunResult> runs;
  const auto t_all = std::chrono::steady_clock::now();
  std::ostringstream curves;
  curves << "schedule,seed,step,loss,lr,grad_norm\n";
  for (std::string sched : {"rope", "nope", "repo"}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto t0 = std::chrono::steady_clock::now();
      auto train = records(100 + seed, 10000, 2, 20);
      auto m = Model<float>::build(reversal_model(sched, setup), seed);
      auto res = repo::train(m, train, reversal_train(seed, setup));
      for (const auto& p : res.curve)
        if (p.step % 50 == 0)
          curves << sched << ',' << seed << ',' << p.step << ',' << p.loss << ',' << p.lr
                 << ',' << p.grad_norm << '\n';
      repo::ModelDecoder<float> dec(m);
      auto rep = repo::evaluate_exact(dec, eval_set, 20);
      RunResult r{sched, seed, *rep.in_domain, *rep.out_of_domain,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                  res.curve.empty() ? 0.0 : res.curve.back().loss};
      runs.push_back(r);
      save("reversal_" + sched + "_seed" + std::to_string(seed) + ".json",
           repo::to_json(rep).dump(2) + "\n");
      std::printf("  [4] %-4s seed %llu  in-domain %.3f  ood %.3f  (%.0fs)\n", sched.c_str(),
                  static_cast<unsigned long long>(seed), r.in_domain, r.ood, r.seconds);
      std::fflush(stdout);
      if (sched == "repo" && seed == 0) {
        repo::write_checkpoint((g_out / "repo_seed0.bin").string(),
                               repo::to_checkpoint(m, {{"step", res.final_step}}));
        repo0 = std::move(m);
      }
    }
  }
  save("reversal_curves.csv", curves.str());
  const double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_all).count();

  std::map<std::string, double> ood_mean, in_min;
  for (const auto& r : runs) {
    ood_mean[r.schedule] += r.ood / 3.0;
    in_min.try_emplace(r.schedule, 1.0);
    in_min[r.schedule] = std::min(in_min[r.schedule], r.in_domain);
  }
  bool in_ok = true;
  for (const auto& [_, v] : in_min) in_ok = in_ok && v >= 0.95;
  const bool ood_ok = ood_mean["repo"] > ood_mean["rope"] && ood_mean["repo"] > ood_mean["nope"];
  const bool time_ok = total < 3600.0;

  Outcome o;
  o.pass = in_ok && ood_ok && time_ok;
  std::ostringstream d;
  d.precision(3);
  d << "min in-domain rope " << in_min["rope"] << " nope " << in_min["nope"] << " repo "
    << in_min["repo"] << "; mean OOD rope " << ood_mean["rope"] << " nope "
    << ood_mean["nope"] << " repo " << ood_mean["repo"] << "; " << std::fixed
    << std::setprecision(0) << total << "s";
  o.detail = d.str();
  json jr = json::array();
  for (const auto& r : runs)
    jr.push_back({{"schedule", r.schedule}, {"seed", r.seed}, {"in_domain", r.in_domain},
                  {"out_of_domain", r.ood}, {"seconds", r.seconds},
                  {"final_loss", r.final_loss}});
  o.data = {{"runs", jr},
            {"mean_ood", ood_mean},
            {"min_in_domain", in_min},
            {"seconds", total},
            {"model", repo::to_json(reversal_model("repo", setup))},
            {"train", repo::to_json(reversal_train(0, setup))}};
  return o;
}

Outcome trace_check(const Model<float>& m, const std::vector<tk::TaskRecord>& eval_set) {
  // Longest evaluation example: prompt + target.
  const tk::TaskRecord* longest = &eval_set.front();
  for (const auto& r : eval_set)
    if (r.length > longest->length) longest = &r;
  std::vector<std::int32_t> seq = longest->prompt_ids;
  seq.insert(seq.end(), longest->target_ids.begin(), longest->target_ids.end());
  auto out = m.forward(seq, {.want_trace = true});
  const auto& trace = *out.trace;
  auto rs = an::range_stats(trace);
  auto pats = an::classify_trace(trace, an::kDefaultChunkSize, an::kDefaultEpsilon);
  double max_d = 0;
  for (const auto& h : rs.heads) max_d = std::max(max_d, h.spread());
  const std::size_t non_mono = pats.labels.size() - pats.count(an::ChunkPattern::Mono);

  save("trace_repo_seed0.json", an::trace_to_json(trace).dump() + "\n");
  save("trace_repo_seed0_scatter.svg", repo::plot::position_scatter_svg(trace));
  save("trace_repo_seed0_hist.svg", repo::plot::spread_histogram_svg(rs.histogram));
  save("trace_repo_seed0_ranges.csv", an::range_csv(rs));
  save("trace_repo_seed0_patterns.json", an::to_json(pats).dump(2) + "\n");

  Outcome o;
  o.pass = max_d > 1.0 && non_mono > 0;
  std::ostringstream d;
  d << "max d " << max_d << " over " << rs.heads.size() << " heads; chunks constant "
    << pats.count(an::ChunkPattern::Constant) << " mono " << pats.count(an::ChunkPattern::Mono)
    << " hybrid " << pats.count(an::ChunkPattern::Hybrid);
  o.detail = d.str();
  o.data = {{"max_spread", max_d}, {"non_mono_chunks", non_mono},
            {"chunks", pats.labels.size()}, {"sequence_length", seq.size()}};
  return o;
}

// ---------------------------------------------------------------- 5

Outcome analysis_oracles() {
  std::mt19937_64 gen(5);
  std::size_t agree = 0;
  const std::size_t chunks = 10000;
  for (std::size_t n = 0; n < chunks; ++n) {
    auto z = oracle::random_chunk(gen, 16);
    auto want = oracle::classify(z, 0.2);
    want[0] = char(std::tolower(want[0]));
    agree += an::to_string(an::classify_chunk(z, 0.2)) == want;
  }

  double mass_diff = 0, recon_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t ctx = 24, L = 32;
    auto maps = oracle::random_causal_maps(gen, 6, L);
    const std::size_t b = 1 + gen() % 18;
    tk::SpanAnnotation s{{b, b + 4}, {ctx - 1, ctx}, {{0, b}, {b + 4, ctx - 1}}};
    auto r = an::attention_mass(maps, L, s, {ctx, L});
    auto o = oracle::attention_mass(maps, L, s, ctx, L);
    mass_diff = std::max({mass_diff, std::abs(r.needle - o.needle), std::abs(r.query - o.query),
                          std::abs(r.rest - o.rest), std::abs(r.generated - o.outside)});
    recon_err = std::max(recon_err, std::abs(r.reconstructed_total() - 1.0));
  }
  // Real attention maps from a model on a needle-in-a-haystack context.
  {
    auto cfg = small("repo", tk::vocab::kSize);
    cfg.max_seq_len = 64;
    auto m = Model<double>::build(cfg, 3);
    randomize_readouts(m, 4, 2.0);
    const std::vector<std::int32_t> payload = {tk::vocab::kKey, tk::vocab::kFirstSymbol,
                                               tk::vocab::kFirstSymbol + 5};
    for (std::uint64_t s = 0; s < 10; ++s) {
      auto ex = tk::gen_niah(s, 40, payload, tk::vocab::fillers());
      auto seq = ex.context;
      seq.insert(seq.end(), ex.answer.begin(), ex.answer.end());
      auto out = m.forward(seq, {.want_attention = true});
      std::vector<std::vector<double>> maps;
      for (const auto& t : out.attention) maps.push_back(t.vec());
      auto r = an::attention_mass(maps, seq.size(), ex.spans, {40, seq.size()});
      recon_err = std::max(recon_err, std::abs(r.reconstructed_total() - 1.0));
    }
  }

  std::size_t range_exact = 0, range_total = 0;
  std::normal_distribution<double> nd(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    repo::PositionTrace t;
    t.seq_len = 1 + gen() % 60;
    for (std::size_t e = 0; e < 4; ++e) {
      std::vector<double> z(t.seq_len);
      for (auto& v : z) v = nd(gen);
      t.entries.push_back({e / 2, e % 2, z});
    }
    auto rs = an::range_stats(t);
    for (std::size_t e = 0; e < 4; ++e) {
      double mn = INFINITY, mx = -INFINITY;
      for (double v : t.entries[e].z) {
        if (v < mn) mn = v;
        if (v > mx) mx = v;
      }
      ++range_total;
      range_exact += rs.heads[e].min == mn && rs.heads[e].max == mx &&
                     rs.heads[e].spread() == mx - mn;
    }
  }
  Outcome o;
  o.pass = agree == chunks && mass_diff <= 1e-10 && recon_err <= 1e-4 &&
           range_exact == range_total;
  std::ostringstream d;
  d << "classifier " << agree << "/" << chunks << "; mass vs triple loop " << mass_diff
    << "; reconstruction " << recon_err << "; range_stats exact " << range_exact << "/"
    << range_total;
  o.detail = d.str();
  o.data = {{"classifier_agreement", agree}, {"chunks", chunks}, {"mass_max_diff", mass_diff},
            {"reconstruction_max_err", recon_err}, {"range_exact", range_exact},
            {"range_total", range_total}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_artifacts";
  std::vector<int> only;
  ReversalSetup setup;
  app.add_option("--out", out, "artifact directory");
  app.add_option("--only", only, "run only these criteria (1-6)");
  app.add_option("--steps", setup.steps, "training steps per reversal run");
  CLI11_PARSE(app, argc, argv);
  g_out = out;
  fs::create_directories(g_out);
  auto want = [&](int c) { return only.empty() || std::count(only.begin(), only.end(), c); };

  std::map<int, Outcome> results;
  const std::map<int, std::string> names = {
      {1, "equivalence triangle"},  {2, "gradient fidelity"},
      {3, "shift invariance"},      {4, "reversal length generalization"},
      {5, "analysis oracles"},      {6, "trace non-degeneracy"}};
  auto report = [&](int c, Outcome o) {
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c, names.at(c).c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    results[c] = std::move(o);
  };

  if (want(1)) report(1, equivalence_triangle());
  if (want(2)) report(2, gradient_fidelity());
  if (want(5)) report(5, analysis_oracles());

  std::optional<Model<float>> repo0;
  std::vector<tk::TaskRecord> eval_set;
  if (want(4) || want(6)) {
    auto o = reversal_reproduction(setup, repo0, eval_set);
    if (want(4)) report(4, std::move(o));
  }
  if (want(3)) report(3, shift_invariance(repo0 ? &*repo0 : nullptr));
  if (want(6)) report(6, trace_check(*repo0, eval_set));

  json summary = json::object();
  bool all = true;
  for (const auto& [c, o] : results) {
    summary[std::to_string(c)] = {{"name", names.at(c)}, {"pass", o.pass},
                                  {"detail", o.detail}, {"data", o.data}};
    all = all && o.pass;
  }
  repo::write_text_atomic((g_out / "acceptance.json").string(), summary.dump(2) + "\n");
  return all ? 0 : 1;
}
