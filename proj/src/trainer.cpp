#include "repo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "repo/ops.hpp"

namespace repo {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm", "must be positive");
  if (eval_every == 0) throw ConfigError("eval_every", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps", "must be positive");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0))
    throw ConfigError("min_lr_ratio", "must lie in [0, 1]");
  if (!(position_lr_scale > 0.0)) throw ConfigError("position_lr_scale", "must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},           {"batch_size", c.batch_size},
          {"lr", c.lr},                 {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps}, {"clip_norm", c.clip_norm},
          {"eval_every", c.eval_every}, {"seed", c.seed},
          {"beta1", c.beta1},           {"beta2", c.beta2},
          {"eps", c.eps},               {"min_lr_ratio", c.min_lr_ratio},
          {"position_lr_scale", c.position_lr_scale}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train", "must be a JSON object");
  static const std::set<std::string> known = {
      "steps", "batch_size", "lr",    "weight_decay", "warmup_steps", "clip_norm",
      "eval_every", "seed",  "beta1", "beta2",        "eps",          "min_lr_ratio",
      "position_lr_scale"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError(key, "unknown train key");
  TrainConfig c;
  auto read = [&](const char* key, auto& field) {
    auto it = j.find(key);
    if (it == j.end()) return;
    using F = std::decay_t<decltype(field)>;
    if constexpr (std::is_integral_v<F>) {
      if (!it->is_number_integer() || it->get<long long>() < 0)
        throw ConfigError(key, "must be a non-negative integer");
    } else {
      if (!it->is_number()) throw ConfigError(key, "must be a number");
    }
    field = it->get<F>();
  };
  read("steps", c.steps);
  read("batch_size", c.batch_size);
  read("lr", c.lr);
  read("weight_decay", c.weight_decay);
  read("warmup_steps", c.warmup_steps);
  read("clip_norm", c.clip_norm);
  read("eval_every", c.eval_every);
  read("seed", c.seed);
  read("beta1", c.beta1);
  read("beta2", c.beta2);
  read("eps", c.eps);
  read("min_lr_ratio", c.min_lr_ratio);
  read("position_lr_scale", c.position_lr_scale);
  c.validate();
  return c;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps)
    return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
  const double span = double(std::max<std::size_t>(cfg.steps, cfg.warmup_steps + 1) -
                             cfg.warmup_steps);
  const double progress = std::min(1.0, double(step - cfg.warmup_steps) / span);
  const double floor = cfg.lr * cfg.min_lr_ratio;
  return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(const std::vector<Parameter<float>*>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (auto* p : params) {
    auto& m = m_[p->name];
    auto& v = v_[p->name];
    if (!m.same_shape(p->value)) m = Tensor<float>(p->value.shape());
    if (!v.same_shape(p->value)) v = Tensor<float>(p->value.shape());
    const bool positional = p->name.find(".repo.") != std::string::npos;
    const bool decay = p->value.rank() == 2 && cfg_.weight_decay > 0.0 && !positional;
    const double plr = positional ? lr * cfg_.position_lr_scale : lr;
    const float b1 = float(cfg_.beta1), b2 = float(cfg_.beta2);
    const float step_size = float(plr / bc1);
    const float inv_bc2 = float(1.0 / bc2);
    const float wd = float(lr * cfg_.weight_decay);
    const float eps = float(cfg_.eps);
    float* w = p->value.data();
    const float* g = p->grad.data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      if (decay) w[i] -= wd * w[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

std::map<std::string, Tensor<float>> AdamW::state() const {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [k, t] : m_) out.emplace("adam.m." + k, t);
  for (const auto& [k, t] : v_) out.emplace("adam.v." + k, t);
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor<float>>& tensors,
                       std::size_t steps_taken) {
  m_.clear();
  v_.clear();
  for (const auto& [k, t] : tensors) {
    if (k.rfind("adam.m.", 0) == 0) m_.emplace(k.substr(7), t);
    if (k.rfind("adam.v.", 0) == 0) v_.emplace(k.substr(7), t);
  }
  t_ = steps_taken;
}

TrainingSequence make_training_sequence(const tasks::TaskRecord& r) {
  if (r.prompt_ids.empty() || r.target_ids.empty())
    throw std::invalid_argument("training record needs a prompt and a target");
  TrainingSequence s;
  s.input = r.prompt_ids;
  s.input.insert(s.input.end(), r.target_ids.begin(), r.target_ids.end());
  s.next.assign(s.input.begin() + 1, s.input.end());
  s.next.push_back(tasks::vocab::kEos);
  s.mask.assign(s.input.size(), 0.0f);
  for (std::size_t i = r.prompt_ids.size() - 1; i < s.input.size(); ++i) s.mask[i] = 1.0f;
  s.target_tokens = r.target_ids.size() + 1;
  return s;
}

double global_grad_norm(const std::vector<Parameter<float>*>& params) {
  double sq = 0;
  for (const auto* p : params)
    for (float g : p->grad.span()) sq += double(g) * double(g);
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Parameter<float>*>& params,
                      double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const float scale = float(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad.span()) g *= scale;
  }
  return norm;
}

double accumulate_batch_gradients(Model<float>& model,
                                  std::span<const TrainingSequence> batch) {
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  std::size_t total = 0;
  for (const auto& s : batch) total += s.target_tokens;
  double loss = 0;
  for (const auto& s : batch) {
    Graph<float> g;
    auto logits = model.forward(g, s.input);
    auto l = ops::cross_entropy<float>(logits, s.next, s.mask);
    const double w = double(s.target_tokens) / double(total);
    loss += w * double(l.value().item());
    g.backward(l, float(w));
  }
  return loss;
}

std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t step,
                                      std::size_t batch_size,
                                      std::size_t dataset_size) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32),
                    std::uint32_t(step), std::uint32_t(std::uint64_t(step) >> 32)};
  std::mt19937_64 gen(seq);
  std::uniform_int_distribution<std::size_t> dist(0, dataset_size - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = dist(gen);
  return idx;
}

TrainResult train(Model<float>& model, std::span<const tasks::TaskRecord> data,
                  const TrainConfig& cfg, const TrainHooks& hooks,
                  AdamW* optimizer, std::size_t start_step) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  std::vector<TrainingSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& r : data) {
    seqs.push_back(make_training_sequence(r));
    if (seqs.back().input.size() > model.config().max_seq_len)
      throw std::invalid_argument("train: example of " +
                                  std::to_string(seqs.back().input.size()) +
                                  " tokens exceeds max_seq_len");
  }
  AdamW fresh(cfg);
  AdamW& opt = optimizer ? *optimizer : fresh;
  auto params = model.parameters();

  TrainResult result;
  result.final_step = start_step;
  std::vector<TrainingSequence> batch;
  for (std::size_t step = start_step; step < cfg.steps; ++step) {
    batch.clear();
    for (auto i : sample_batch(cfg.seed, step, cfg.batch_size, seqs.size()))
      batch.push_back(seqs[i]);
    const double loss = accumulate_batch_gradients(model, batch);
    if (!std::isfinite(loss)) {
      double sq = 0;
      for (const auto* p : params)
        for (float w : p->value.span()) sq += double(w) * double(w);
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (parameter norm "
         << std::sqrt(sq) << ")";
      throw TrainingError(os.str());
    }
    const double norm = clip_grad_norm(params, cfg.clip_norm);
    const double lr = learning_rate_at(cfg, step);
    opt.step(params, lr);
    LossPoint pt{step + 1, loss, lr, norm};
    result.curve.push_back(pt);
    result.final_step = step + 1;
    if (hooks.on_step) hooks.on_step(pt);
    if (hooks.on_checkpoint &&
        ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps))
      hooks.on_checkpoint(step + 1, model, opt);
  }
  return result;
}

bool SequenceDecoder::reproduces(std::span<const std::int32_t> prompt,
                                 std::span<const std::int32_t> continuation) const {
  auto out = generate(prompt, continuation.size());
  return out.size() == continuation.size() &&
         std::equal(out.begin(), out.end(), continuation.begin());
}

template <typename T>
tasks::TokenIds ModelDecoder<T>::generate(std::span<const std::int32_t> prompt,
                                          std::size_t max_new) const {
  auto res = repo::generate(model_, prompt, max_new);
  return tasks::TokenIds(res.tokens.begin() + prompt.size(), res.tokens.end());
}

template <typename T>
bool ModelDecoder<T>::reproduces(std::span<const std::int32_t> prompt,
                                 std::span<const std::int32_t> continuation) const {
  if (continuation.empty()) return true;
  if (prompt.empty()) return false;
  const std::size_t total = prompt.size() + continuation.size() - 1;
  if (total > model_.config().max_seq_len) return false;
  tasks::TokenIds seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
  auto out = model_.forward(seq);
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const auto row = out.logits.row(prompt.size() - 1 + t);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best != continuation[t]) return false;
  }
  return true;
}

template class ModelDecoder<float>;
template class ModelDecoder<double>;

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : r.buckets)
    buckets.push_back({{"length", b.length},
                       {"correct", b.correct},
                       {"total", b.total},
                       {"accuracy", b.accuracy()}});
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"train_max_len", r.train_max_len},
          {"examples", r.examples},
          {"correct", r.correct},
          {"in_domain", opt(r.in_domain)},
          {"out_of_domain", opt(r.out_of_domain)},
          {"buckets", buckets}};
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "length,correct,total,accuracy\n";
  for (const auto& b : r.buckets)
    os << b.length << ',' << b.correct << ',' << b.total << ',' << b.accuracy() << '\n';
  return os.str();
}

EvalReport evaluate_exact(const SequenceDecoder& decoder,
                          std::span<const tasks::TaskRecord> data,
                          std::size_t train_max_len) {
  std::vector<char> ok(data.size(), 0);
  const auto n = static_cast<std::ptrdiff_t>(data.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& r = data[i];
    tasks::TokenIds cont = r.target_ids;
    cont.push_back(tasks::vocab::kEos);
    ok[i] = decoder.reproduces(r.prompt_ids, cont) ? 1 : 0;
  }
  EvalReport rep;
  rep.train_max_len = train_max_len;
  std::map<std::size_t, BucketAccuracy> buckets;
  std::size_t in_c = 0, in_n = 0, out_c = 0, out_n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& b = buckets[data[i].length];
    b.length = data[i].length;
    b.total += 1;
    b.correct += std::size_t(ok[i]);
    if (data[i].length <= train_max_len) {
      in_n += 1;
      in_c += std::size_t(ok[i]);
    } else {
      out_n += 1;
      out_c += std::size_t(ok[i]);
    }
  }
  for (auto& [_, b] : buckets) rep.buckets.push_back(b);
  rep.examples = data.size();
  rep.correct = in_c + out_c;
  if (in_n) rep.in_domain = double(in_c) / double(in_n);
  if (out_n) rep.out_of_domain = double(out_c) / double(out_n);
  return rep;
}

}  // namespace repo
