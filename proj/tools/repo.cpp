// repo: dataset generation, training, evaluation and trace analysis.
//
// Exit codes: 0 success, 1 domain failure, 2 usage or validation error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "repo/analysis.hpp"
#include "repo/checkpoint.hpp"
#include "repo/kernels.hpp"
#include "repo/manifest.hpp"
#include "repo/plot.hpp"
#include "repo/run_config.hpp"
#include "repo/tasks.hpp"
#include "repo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage and validation problems.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Well-formed requests that cannot be satisfied.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  std::error_code ec;
  if (!p.empty()) fs::create_directories(p, ec);
  if (ec) throw UsageError("cannot create directory " + p.string() + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& text) {
  ensure_parent(path);
  try {
    repo::write_text_atomic(path, text);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot write ") + path + ": " + e.what());
  }
}

std::string manifest_path(const std::string& out) { return out + ".manifest.json"; }

// ---------------------------------------------------------------- gen

struct GenArgs {
  std::string task;
  std::uint64_t seed = 0;
  std::size_t count = 1000;
  std::size_t lo = 2, hi = 20;
  std::size_t context_len = 256;
  std::size_t payload_len = 4;
  std::size_t max_seq_len = 72;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  repo::RunManifest m;
  m.command = "gen " + a.task;
  m.seed = a.seed;
  m.started_at = repo::utc_timestamp();

  std::vector<repo::tasks::TaskRecord> records;
  try {
    if (a.task == "reversal") {
      const auto syms = repo::tasks::vocab::symbols();
      for (const auto& ex : repo::tasks::gen_reversal_split(a.seed, a.count, a.lo, a.hi,
                                                            syms, a.max_seq_len))
        records.push_back(repo::tasks::to_record(ex));
      m.config = {{"task", "reversal"}, {"count", a.count}, {"lo", a.lo},
                  {"hi", a.hi},         {"max_seq_len", a.max_seq_len}};
    } else {
      const auto syms = repo::tasks::vocab::symbols();
      const auto fill = repo::tasks::vocab::fillers();
      std::mt19937_64 rng(a.seed);
      std::uniform_int_distribution<std::size_t> pick(0, syms.size() - 1);
      for (std::size_t i = 0; i < a.count; ++i) {
        repo::tasks::TokenIds payload(a.payload_len);
        for (auto& t : payload) t = syms[pick(rng)];
        records.push_back(
            repo::tasks::to_record(repo::tasks::gen_niah(rng(), a.context_len, payload, fill)));
      }
      m.config = {{"task", "niah"},
                  {"count", a.count},
                  {"context_len", a.context_len},
                  {"payload_len", a.payload_len}};
    }
  } catch (const repo::tasks::TaskError& e) {
    throw DomainError(e.what());
  }

  std::ostringstream os;
  repo::tasks::write_jsonl(os, records);
  write_file(a.out, os.str());
  m.artifacts["dataset"] = a.out;
  m.finished_at = repo::utc_timestamp();
  ensure_parent(manifest_path(a.out));
  repo::write_manifest(manifest_path(a.out), m);
  std::cerr << "wrote " << records.size() << " examples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
};

std::vector<repo::tasks::TaskRecord> load_data(const std::string& path) {
  try {
    return repo::tasks::read_jsonl_file(path);
  } catch (const repo::tasks::TaskError& e) {
    throw UsageError(e.what());
  }
}

repo::CheckpointData load_checkpoint(const std::string& path) {
  try {
    return repo::read_checkpoint(path);
  } catch (const repo::CheckpointError& e) {
    throw UsageError(e.what());
  }
}

repo::Model<float> model_from(const repo::CheckpointData& ck) {
  try {
    return repo::model_from_checkpoint(ck);
  } catch (const repo::CheckpointError& e) {
    throw UsageError(e.what());
  } catch (const repo::ConfigError& e) {
    throw UsageError(std::string("checkpoint config: ") + e.what());
  }
}

int cmd_train(const TrainArgs& a) {
  repo::RunConfig cfg = repo::load_run_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();
  const auto data = load_data(a.data);
  if (data.empty()) throw UsageError("dataset is empty: " + a.data);
  for (const auto& r : data)
    if (r.prompt_ids.size() + r.target_ids.size() > cfg.model.max_seq_len)
      throw UsageError("example longer than model.max_seq_len in " + a.data);
  if (a.dry_run) {
    std::cout << "config ok: " << repo::hex64(repo::config_hash(repo::to_json(cfg)))
              << ", " << data.size() << " examples\n";
    return 0;
  }

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw UsageError("cannot create " + a.out + ": " + ec.message());

  repo::RunManifest m;
  m.command = "train";
  m.config = repo::to_json(cfg);
  m.seed = cfg.train.seed;
  m.started_at = repo::utc_timestamp();

  repo::Model<float> model;
  repo::AdamW opt(cfg.train);
  std::size_t start = 0;
  if (!a.resume.empty()) {
    const auto ck = load_checkpoint(a.resume);
    if (ck.meta.value("model", json()) != repo::to_json(cfg.model))
      throw UsageError("model: resume checkpoint was trained with a different model config");
    model = model_from(ck);
    start = ck.meta.value("step", std::size_t{0});
    opt.load_state(ck.tensors, start);
    m.extra["resumed_from"] = a.resume;
    m.extra["resumed_step"] = start;
  } else {
    model = repo::Model<float>::build(cfg.model, cfg.train.seed);
  }

  const std::string metrics = (fs::path(a.out) / "metrics.csv").string();
  std::ofstream csv(metrics, start > 0 ? std::ios::app : std::ios::trunc);
  if (!csv) throw UsageError("cannot write " + metrics);
  if (start == 0) csv << "step,loss,lr,grad_norm\n";
  csv.precision(9);
  m.artifacts["metrics"] = metrics;

  repo::TrainHooks hooks;
  hooks.on_step = [&](const repo::LossPoint& p) {
    csv << p.step << ',' << p.loss << ',' << p.lr << ',' << p.grad_norm << '\n';
    if (p.step % 100 == 0) csv.flush();
  };
  hooks.on_checkpoint = [&](std::size_t step, const repo::Model<float>& mdl,
                            const repo::AdamW& o) {
    json meta = {{"train", repo::to_json(cfg.train)},
                 {"task", repo::to_json(cfg.task)},
                 {"step", step}};
    auto ck = repo::to_checkpoint(mdl, meta);
    for (auto& [k, v] : o.state()) ck.tensors.emplace(k, v);
    const std::string path =
        (fs::path(a.out) / ("ckpt_step" + std::to_string(step) + ".bin")).string();
    repo::write_checkpoint(path, ck);
    m.artifacts["checkpoint_step" + std::to_string(step)] = path;
    if (step == cfg.train.steps) {
      const std::string fin = (fs::path(a.out) / "final.bin").string();
      repo::write_checkpoint(fin, ck);
      m.artifacts["checkpoint_final"] = fin;
    }
  };

  repo::TrainResult res;
  try {
    res = repo::train(model, data, cfg.train, hooks, &opt, start);
  } catch (const repo::TrainingError& e) {
    csv.flush();
    throw DomainError(e.what());
  }
  csv.flush();
  m.extra["final_step"] = res.final_step;
  if (!res.curve.empty()) m.extra["final_loss"] = res.curve.back().loss;
  m.finished_at = repo::utc_timestamp();
  const std::string mpath = (fs::path(a.out) / "manifest.json").string();
  m.artifacts["manifest"] = mpath;
  repo::write_manifest(mpath, m);
  std::cerr << "trained to step " << res.final_step << "; artifacts in " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, config, out;
  std::optional<std::size_t> train_max_len;
};

repo::Model<float> load_model(const std::string& checkpoint, const std::string& config,
                              repo::CheckpointData* keep = nullptr) {
  auto ck = load_checkpoint(checkpoint);
  if (!config.empty()) ck.meta["model"] = repo::to_json(repo::load_run_config(config).model);
  auto model = model_from(ck);
  if (keep) *keep = std::move(ck);
  return model;
}

int cmd_eval(const EvalArgs& a) {
  repo::CheckpointData ck;
  const auto model = load_model(a.checkpoint, a.config, &ck);
  const auto data = load_data(a.data);
  std::size_t tml = 20;
  if (ck.meta.contains("task")) tml = ck.meta["task"].value("train_hi", tml);
  if (a.train_max_len) tml = *a.train_max_len;

  repo::ModelDecoder<float> dec(model);
  repo::EvalReport rep;
  try {
    rep = repo::evaluate_exact(dec, data, tml);
  } catch (const std::length_error& e) {
    throw UsageError(std::string("dataset does not fit the model: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw UsageError(std::string("dataset does not fit the model: ") + e.what());
  }
  const std::string text = repo::to_json(rep).dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
    return 0;
  }
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw UsageError("cannot create " + a.out + ": " + ec.message());
  repo::RunManifest m;
  m.command = "eval";
  m.config = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"train_max_len", tml}};
  m.started_at = repo::utc_timestamp();
  const std::string jp = (fs::path(a.out) / "eval.json").string();
  const std::string cp = (fs::path(a.out) / "eval.csv").string();
  write_file(jp, text);
  write_file(cp, repo::to_csv(rep));
  m.artifacts = {{"report", jp}, {"report_csv", cp}};
  m.finished_at = repo::utc_timestamp();
  repo::write_manifest((fs::path(a.out) / "manifest.json").string(), m);
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string which, checkpoint, data, config, trace, out;
  std::size_t delta = repo::analysis::kDefaultChunkSize;
  double epsilon = repo::analysis::kDefaultEpsilon;
  std::size_t index = 0;
  std::size_t limit = 1;
  std::size_t bins = 10;
};

std::vector<std::int32_t> full_sequence(const repo::tasks::TaskRecord& r) {
  std::vector<std::int32_t> seq = r.prompt_ids;
  seq.insert(seq.end(), r.target_ids.begin(), r.target_ids.end());
  return seq;
}

int cmd_analyze(const AnalyzeArgs& a) {
  namespace an = repo::analysis;
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw UsageError("cannot create " + a.out + ": " + ec.message());
  const fs::path out(a.out);

  repo::RunManifest m;
  m.command = "analyze " + a.which;
  m.config = {{"which", a.which}, {"delta", a.delta}, {"epsilon", a.epsilon},
              {"index", a.index}, {"limit", a.limit}, {"bins", a.bins}};
  m.started_at = repo::utc_timestamp();

  std::vector<repo::PositionTrace> traces;
  repo::Model<float> model;
  std::vector<repo::tasks::TaskRecord> data;
  const bool from_trace = !a.trace.empty();
  if (from_trace) {
    if (a.which == "mass") throw UsageError("--which mass needs --checkpoint and --data");
    std::ifstream is(a.trace);
    if (!is) throw UsageError("cannot open trace " + a.trace);
    try {
      traces.push_back(an::trace_from_json(json::parse(is)));
    } catch (const json::exception& e) {
      throw UsageError(std::string("invalid trace JSON: ") + e.what());
    }
  } else {
    if (a.checkpoint.empty() || a.data.empty())
      throw UsageError("analyze needs --trace, or --checkpoint with --data");
    model = load_model(a.checkpoint, a.config);
    data = load_data(a.data);
    if (a.index >= data.size())
      throw UsageError("--index " + std::to_string(a.index) + " past end of dataset");
    if (!model.config().any_learned() && a.which != "mass")
      throw UsageError("model has no learned-position layers to trace");
  }

  const std::size_t last = from_trace ? 1 : std::min(data.size(), a.index + a.limit);
  auto trace_of = [&](std::size_t i) {
    if (from_trace) return traces.at(0);
    repo::ForwardOptions opts;
    opts.want_trace = true;
    return *model.forward(full_sequence(data[i]), opts).trace;
  };

  json report;
  try {
    if (a.which == "positions") {
      const auto t = trace_of(from_trace ? 0 : a.index);
      const auto rs = an::range_stats(t, a.bins);
      report = an::to_json(rs);
      write_file((out / "positions.csv").string(), an::range_csv(rs));
      write_file((out / "positions_hist.svg").string(), repo::plot::spread_histogram_svg(rs.histogram));
      write_file((out / "positions_scatter.svg").string(), repo::plot::position_scatter_svg(t));
      write_file((out / "trace.json").string(), an::trace_to_json(t).dump() + "\n");
      m.artifacts["report_csv"] = (out / "positions.csv").string();
      m.artifacts["histogram_svg"] = (out / "positions_hist.svg").string();
      m.artifacts["scatter_svg"] = (out / "positions_scatter.svg").string();
      m.artifacts["trace"] = (out / "trace.json").string();
    } else if (a.which == "patterns") {
      an::ChunkPatternReport pooled;
      pooled.delta = a.delta;
      pooled.epsilon = a.epsilon;
      for (std::size_t i = from_trace ? 0 : a.index; i < last; ++i) {
        const auto r = an::classify_trace(trace_of(i), a.delta, a.epsilon);
        pooled.labels.insert(pooled.labels.end(), r.labels.begin(), r.labels.end());
      }
      const double n = double(pooled.labels.size());
      pooled.constant_fraction = double(pooled.count(an::ChunkPattern::Constant)) / n;
      pooled.mono_fraction = double(pooled.count(an::ChunkPattern::Mono)) / n;
      pooled.hybrid_fraction = double(pooled.count(an::ChunkPattern::Hybrid)) / n;
      report = an::to_json(pooled);
      write_file((out / "patterns.csv").string(), an::patterns_csv(pooled));
      m.artifacts["report_csv"] = (out / "patterns.csv").string();
    } else {
      an::AttentionMassReport sum;
      std::size_t used = 0;
      for (std::size_t i = a.index; i < last; ++i) {
        const auto& r = data[i];
        if (!r.spans)
          throw UsageError("record " + std::to_string(i) + " has no span annotation");
        const auto seq = full_sequence(r);
        repo::ForwardOptions opts;
        opts.want_attention = true;
        const auto fo = model.forward(seq, opts);
        std::vector<std::vector<double>> maps;
        for (const auto& t : fo.attention) maps.emplace_back(t.data(), t.data() + t.size());
        const auto rep = an::attention_mass(maps, seq.size(), *r.spans,
                                            {r.prompt_ids.size(), seq.size()});
        sum.needle += rep.needle;
        sum.query += rep.query;
        sum.rest += rep.rest;
        sum.generated += rep.generated;
        sum.generated_rows += rep.generated_rows;
        sum.maps = rep.maps;
        if (used == 0) {
          sum.needle_tokens = rep.needle_tokens;
          sum.query_tokens = rep.query_tokens;
          sum.rest_tokens = rep.rest_tokens;
        } else if (rep.needle_tokens != sum.needle_tokens ||
                   rep.rest_tokens != sum.rest_tokens ||
                   rep.query_tokens != sum.query_tokens) {
          throw UsageError("records in --limit range have different span sizes");
        }
        ++used;
      }
      sum.needle /= double(used);
      sum.query /= double(used);
      sum.rest /= double(used);
      sum.generated /= double(used);
      report = an::to_json(sum);
      report["records"] = used;
      write_file((out / "mass.csv").string(), an::mass_csv(sum));
      m.artifacts["report_csv"] = (out / "mass.csv").string();
    }
  } catch (const an::AnalysisError& e) {
    throw UsageError(e.what());
  }

  const std::string jp = (out / (a.which + ".json")).string();
  write_file(jp, report.dump(2) + "\n");
  m.artifacts["report"] = jp;
  m.finished_at = repo::utc_timestamp();
  repo::write_manifest((out / "manifest.json").string(), m);
  std::cout << jp << "\n";
  return 0;
}

void apply_thread_cap() {
  const char* env = std::getenv("REPO_ATTN_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("REPO_ATTN_THREADS must be a positive integer");
  repo::kernels::set_num_threads(int(n));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned position assignment for rotary attention: toy experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", repo::kVersion);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a JSONL dataset");
  g->add_option("task", gen.task, "reversal or niah")
      ->required()
      ->check(CLI::IsMember({"reversal", "niah"}));
  g->add_option("--seed", gen.seed);
  g->add_option("--count", gen.count)->check(CLI::PositiveNumber);
  g->add_option("--lo", gen.lo, "reversal: shortest length");
  g->add_option("--hi", gen.hi, "reversal: longest length");
  g->add_option("--max-seq-len", gen.max_seq_len, "reversal: reject longer sequences");
  g->add_option("--context-len", gen.context_len, "niah: context tokens");
  g->add_option("--payload-len", gen.payload_len, "niah: needle tokens");
  g->add_option("--out", gen.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config)->required();
  t->add_option("--data", tr.data)->required();
  t->add_option("--out", tr.out, "output directory");
  t->add_option("--seed", tr.seed, "overrides train.seed");
  t->add_option("--resume", tr.resume, "checkpoint to continue from");
  t->add_flag("--dry-run", tr.dry_run, "validate and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Exact-match accuracy per length");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--config", ev.config, "use this model config instead of the stored one");
  e->add_option("--train-max-len", ev.train_max_len);
  e->add_option("--out", ev.out, "directory for eval.json and eval.csv");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Position and attention diagnostics");
  z->add_option("--which", an.which)
      ->required()
      ->check(CLI::IsMember({"positions", "patterns", "mass"}));
  z->add_option("--checkpoint", an.checkpoint);
  z->add_option("--data", an.data);
  z->add_option("--config", an.config);
  z->add_option("--trace", an.trace, "analyze a saved trace.json instead of a model");
  z->add_option("--delta", an.delta, "chunk size");
  z->add_option("--epsilon", an.epsilon, "constant band half-width");
  z->add_option("--index", an.index, "first record");
  z->add_option("--limit", an.limit, "records to pool")->check(CLI::PositiveNumber);
  z->add_option("--bins", an.bins)->check(CLI::PositiveNumber);
  z->add_option("--out", an.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    apply_thread_cap();
    if (*g) return cmd_gen(gen);
    if (*t) {
      if (!tr.dry_run && tr.out.empty()) throw UsageError("train needs --out");
      return cmd_train(tr);
    }
    if (*e) return cmd_eval(ev);
    return cmd_analyze(an);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const repo::ConfigError& err) {
    std::cerr << "error: invalid config field '" << err.field() << "': " << err.what() << "\n";
    return 2;
  } catch (const DomainError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}
