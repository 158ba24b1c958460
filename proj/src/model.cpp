#include "repo/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <type_traits>

#include "repo/ops.hpp"

namespace repo {

std::vector<PositionMode> schedule_rope(std::size_t n_layers) {
  return std::vector<PositionMode>(n_layers, PositionMode::Linear);
}

std::vector<PositionMode> schedule_nope(std::size_t n_layers) {
  return std::vector<PositionMode>(n_layers, PositionMode::Constant);
}

std::vector<PositionMode> schedule_r2n1(std::size_t n_layers) {
  std::vector<PositionMode> s(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k)
    s[k] = (k % 3 == 2) ? PositionMode::Constant : PositionMode::Linear;
  return s;
}

std::vector<PositionMode> schedule_n2r1(std::size_t n_layers) {
  std::vector<PositionMode> s(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k)
    s[k] = (k % 3 == 2) ? PositionMode::Linear : PositionMode::Constant;
  return s;
}

std::vector<PositionMode> schedule_repo(std::size_t n_layers,
                                        std::size_t start_layer) {
  std::vector<PositionMode> s(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k)
    s[k] = k < start_layer ? PositionMode::Linear : PositionMode::Learned;
  return s;
}

std::vector<PositionMode> named_schedule(const std::string& name,
                                         std::size_t n_layers,
                                         std::size_t start_layer) {
  if (name == "rope") return schedule_rope(n_layers);
  if (name == "nope") return schedule_nope(n_layers);
  if (name == "r2n1") return schedule_r2n1(n_layers);
  if (name == "n2r1") return schedule_n2r1(n_layers);
  if (name == "repo") return schedule_repo(n_layers, start_layer);
  throw ConfigError("schedule", "unknown preset '" + name +
                                    "' (expected rope, nope, r2n1, n2r1, repo)");
}

std::size_t ModelConfig::ffn_width() const {
  if (ffn_hidden) return ffn_hidden;
  return ((d_model * 8 / 3) + 7) / 8 * 8;
}

bool ModelConfig::any_learned() const {
  return std::find(schedule.begin(), schedule.end(), PositionMode::Learned) !=
         schedule.end();
}

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("vocab_size", "must be positive");
  if (d_model == 0) throw ConfigError("d_model", "must be positive");
  if (n_layers == 0) throw ConfigError("n_layers", "must be positive");
  if (n_heads == 0) throw ConfigError("n_heads", "must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("n_heads", "d_model " + std::to_string(d_model) +
                                     " is not divisible by " +
                                     std::to_string(n_heads) + " heads");
  if (d_head() % 2 != 0)
    throw ConfigError("n_heads", "head width " + std::to_string(d_head()) +
                                     " must be even for rotary encoding");
  if (schedule.size() != n_layers)
    throw ConfigError("schedule", "has " + std::to_string(schedule.size()) +
                                      " entries for " +
                                      std::to_string(n_layers) + " layers");
  if (any_learned()) {
    if (d_p == 0 || d_p >= d_model)
      throw ConfigError("d_p", "must satisfy 0 < d_p < d_model");
    if (repo_start_layer >= n_layers)
      throw ConfigError("repo_start_layer",
                        "must be below n_layers when any layer is learned");
  }
  if (!(rope_base > 0.0)) throw ConfigError("rope_base", "must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len", "must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std", "must be positive");
  if (!(position_init_std >= 0.0))
    throw ConfigError("position_init_std", "must be non-negative");
  if (!std::isfinite(constant_position))
    throw ConfigError("constant_position", "must be finite");
}

ModelConfig ModelConfig::toy_reversal() {
  ModelConfig c;
  c.d_model = 256;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_p = 32;
  c.repo_start_layer = 0;
  c.schedule = schedule_repo(4, 0);
  c.share_fphi_across_heads = true;
  c.rope_base = 10000.0;
  return c;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json sched = nlohmann::json::array();
  for (auto m : cfg.schedule) sched.push_back(to_string(m));
  return {{"vocab_size", cfg.vocab_size},
          {"d_model", cfg.d_model},
          {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},
          {"d_p", cfg.d_p},
          {"ffn_hidden", cfg.ffn_hidden},
          {"repo_start_layer", cfg.repo_start_layer},
          {"schedule", sched},
          {"rope_base", cfg.rope_base},
          {"constant_position", cfg.constant_position},
          {"max_seq_len", cfg.max_seq_len},
          {"share_fphi_across_heads", cfg.share_fphi_across_heads},
          {"init_std", cfg.init_std},
          {"position_init_std", cfg.position_init_std}};
}

namespace {

template <typename V>
V get_field(const nlohmann::json& j, const char* key, V fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    if constexpr (std::is_same_v<V, std::size_t>) {
      if (!it->is_number_integer() || it->get<long long>() < 0)
        throw ConfigError(key, "must be a non-negative integer");
    }
    return it->get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model", "must be a JSON object");
  static const std::set<std::string> known = {
      "vocab_size", "d_model",   "n_layers",         "n_heads",
      "d_p",        "ffn_hidden", "repo_start_layer", "schedule",
      "rope_base",  "constant_position", "max_seq_len",
      "share_fphi_across_heads", "init_std", "position_init_std"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(key, "unknown model key");
  }
  ModelConfig c;
  c.vocab_size = get_field(j, "vocab_size", c.vocab_size);
  c.d_model = get_field(j, "d_model", c.d_model);
  c.n_layers = get_field(j, "n_layers", c.n_layers);
  c.n_heads = get_field(j, "n_heads", c.n_heads);
  c.d_p = get_field(j, "d_p", c.d_model / 8);
  c.ffn_hidden = get_field(j, "ffn_hidden", c.ffn_hidden);
  c.repo_start_layer = get_field(j, "repo_start_layer", c.repo_start_layer);
  c.rope_base = get_field(j, "rope_base", c.rope_base);
  c.constant_position = get_field(j, "constant_position", c.constant_position);
  c.max_seq_len = get_field(j, "max_seq_len", c.max_seq_len);
  c.share_fphi_across_heads =
      get_field(j, "share_fphi_across_heads", c.share_fphi_across_heads);
  c.init_std = get_field(j, "init_std", c.init_std);
  c.position_init_std = get_field(j, "position_init_std", c.position_init_std);

  auto it = j.find("schedule");
  if (it == j.end()) {
    c.schedule = schedule_repo(c.n_layers, c.repo_start_layer);
  } else if (it->is_string()) {
    c.schedule = named_schedule(it->get<std::string>(), c.n_layers,
                                c.repo_start_layer);
  } else if (it->is_array()) {
    c.schedule.clear();
    for (const auto& m : *it) {
      if (!m.is_string()) throw ConfigError("schedule", "entries must be strings");
      try {
        c.schedule.push_back(position_mode_from_string(m.get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError("schedule", e.what());
      }
    }
  } else {
    throw ConfigError("schedule", "must be a preset name or a list of modes");
  }
  c.validate();
  return c;
}

namespace {

template <typename T>
Parameter<T> normal_param(std::string name, Shape shape, double std,
                          std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor<T> t(shape);
  for (auto& x : t.span()) x = T(dist(gen));
  return Parameter<T>(std::move(name), std::move(t));
}

template <typename T>
Parameter<T> filled_param(std::string name, Shape shape, double v) {
  return Parameter<T>(std::move(name), Tensor<T>(std::move(shape), T(v)));
}

}  // namespace

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.freqs_ = rope_frequencies(config.d_head(), config.rope_base).template as<T>();
  std::mt19937_64 gen(seed);
  const std::size_t d = config.d_model, f = config.ffn_width();
  const double s = config.init_std;
  const double s_out = s / std::sqrt(2.0 * double(config.n_layers));
  m.embed_ = normal_param<T>("embed", {config.vocab_size, d}, s, gen);
  m.layers_.resize(config.n_layers);
  for (std::size_t k = 0; k < config.n_layers; ++k) {
    const std::string p = "layers." + std::to_string(k) + ".";
    auto& L = m.layers_[k];
    L.attn_norm = filled_param<T>(p + "attn_norm", {d}, 1.0);
    L.wq = normal_param<T>(p + "wq", {d, d}, s, gen);
    L.wk = normal_param<T>(p + "wk", {d, d}, s, gen);
    L.wv = normal_param<T>(p + "wv", {d, d}, s, gen);
    L.wo = normal_param<T>(p + "wo", {d, d}, s_out, gen);
    L.ffn_norm = filled_param<T>(p + "ffn_norm", {d}, 1.0);
    L.w_gate = normal_param<T>(p + "w_gate", {d, f}, s, gen);
    L.w_up = normal_param<T>(p + "w_up", {d, f}, s, gen);
    L.w_down = normal_param<T>(p + "w_down", {f, d}, s_out, gen);
    if (config.schedule[k] == PositionMode::Learned) {
      const std::size_t zh = config.share_fphi_across_heads ? 1 : config.n_heads;
      const double sp = config.position_init_std > 0.0 ? config.position_init_std
                                                       : 1.0 / std::sqrt(double(d));
      RepoParams<T> r;
      r.gate = normal_param<T>(p + "repo.gate", {d, config.d_p}, sp, gen);
      r.content = normal_param<T>(p + "repo.content", {d, config.d_p}, sp, gen);
      // Zero readout: training starts from constant (NoPE-equivalent) positions.
      r.readout = filled_param<T>(p + "repo.readout", {config.d_p, zh}, 0.0);
      L.repo = std::move(r);
    }
  }
  m.final_norm_ = filled_param<T>("final_norm", {d}, 1.0);
  m.unembed_ = normal_param<T>("unembed", {d, config.vocab_size}, s, gen);
  return m;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out{&embed_};
  for (auto& L : layers_) {
    for (auto* p : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.ffn_norm,
                    &L.w_gate, &L.w_up, &L.w_down})
      out.push_back(p);
    if (L.repo) {
      out.push_back(&L.repo->gate);
      out.push_back(&L.repo->content);
      out.push_back(&L.repo->readout);
    }
  }
  out.push_back(&final_norm_);
  out.push_back(&unembed_);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  auto ps = const_cast<Model*>(this)->parameters();
  return std::vector<const Parameter<T>*>(ps.begin(), ps.end());
}

template <typename T>
Parameter<T>* Model<T>::find(const std::string& name) {
  for (auto* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

template <typename T>
template <typename Self>
Var<T> Model<T>::run(Self& self, Graph<T>& g,
                     std::span<const std::int32_t> tokens,
                     ForwardOutput<T>* extras, const ForwardOptions& opts) {
  const auto& cfg = self.config_;
  const std::size_t L = tokens.size();
  if (L == 0) throw std::invalid_argument("forward: empty token sequence");
  if (L > cfg.max_seq_len)
    throw std::length_error("forward: " + std::to_string(L) +
                            " tokens exceed max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  auto bind = [&g](auto& p) {
    if constexpr (std::is_const_v<Self>) {
      return g.frozen(p.value);
    } else {
      return g.param(p);
    }
  };
  if (extras && opts.want_trace) {
    extras->trace = PositionTrace{};
    extras->trace->seq_len = L;
  }

  Var<T> x = ops::embedding(bind(self.embed_), tokens);
  for (std::size_t k = 0; k < cfg.n_layers; ++k) {
    auto& lw = self.layers_[k];
    const PositionMode mode = cfg.schedule[k];
    Var<T> h = ops::rms_norm(x, bind(lw.attn_norm));
    Var<T> q = ops::matmul(h, bind(lw.wq));
    Var<T> kk = ops::matmul(h, bind(lw.wk));
    Var<T> v = ops::matmul(h, bind(lw.wv));
    Var<T> z;
    if (mode == PositionMode::Learned) {
      Var<T> r = position_representation(h, bind(lw.repo->gate),
                                         bind(lw.repo->content));
      z = assign_positions(r, bind(lw.repo->readout));
      if (opts.position_offset != 0.0)
        z = ops::add(z, g.constant(Tensor<T>(z.shape(), T(opts.position_offset))));
      if (extras && opts.want_trace) {
        const auto& zv = z.value();
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
          PositionTrace::Entry e{k, hd, std::vector<double>(L)};
          const std::size_t col = zv.dim(1) == 1 ? 0 : hd;
          for (std::size_t i = 0; i < L; ++i) e.z[i] = double(zv.at(i, col));
          extras->trace->entries.push_back(std::move(e));
        }
      }
    } else {
      z = g.constant(fixed_positions<T>(mode, L, cfg.constant_position));
    }
    auto att = ops::rotary_attention(q, kk, v, z, cfg.n_heads,
                                     std::span<const T>(self.freqs_));
    if (extras && opts.want_attention) {
      const auto& pr = *att.probs;
      for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
        Tensor<T> a(Shape{L, L});
        std::copy_n(pr.data() + hd * L * L, L * L, a.data());
        extras->attention.push_back(std::move(a));
      }
    }
    x = ops::add(x, ops::matmul(att.out, bind(lw.wo)));
    Var<T> h2 = ops::rms_norm(x, bind(lw.ffn_norm));
    Var<T> ff = ops::mul(ops::swish(ops::matmul(h2, bind(lw.w_gate))),
                         ops::matmul(h2, bind(lw.w_up)));
    x = ops::add(x, ops::matmul(ff, bind(lw.w_down)));
  }
  x = ops::rms_norm(x, bind(self.final_norm_));
  Var<T> logits = ops::matmul(x, bind(self.unembed_));
  if (extras) extras->logits = logits.value();
  return logits;
}

template <typename T>
Var<T> Model<T>::forward(Graph<T>& g, std::span<const std::int32_t> tokens,
                         ForwardOutput<T>* extras, const ForwardOptions& opts) {
  return run(*this, g, tokens, extras, opts);
}

template <typename T>
ForwardOutput<T> Model<T>::forward(std::span<const std::int32_t> tokens,
                                   const ForwardOptions& opts) const {
  Graph<T> g;
  ForwardOutput<T> out;
  run(*this, g, tokens, &out, opts);
  return out;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> m;
  m.config_ = config_;
  m.freqs_ = rope_frequencies(config_.d_head(), config_.rope_base).template as<U>();
  auto conv = [](const Parameter<T>& p) {
    return Parameter<U>(p.name, p.value.template cast<U>());
  };
  m.embed_ = conv(embed_);
  m.layers_.resize(layers_.size());
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& a = layers_[k];
    auto& b = m.layers_[k];
    b.attn_norm = conv(a.attn_norm);
    b.wq = conv(a.wq);
    b.wk = conv(a.wk);
    b.wv = conv(a.wv);
    b.wo = conv(a.wo);
    b.ffn_norm = conv(a.ffn_norm);
    b.w_gate = conv(a.w_gate);
    b.w_up = conv(a.w_up);
    b.w_down = conv(a.w_down);
    if (a.repo) {
      b.repo = RepoParams<U>{conv(a.repo->gate), conv(a.repo->content),
                             conv(a.repo->readout)};
    }
  }
  m.final_norm_ = conv(final_norm_);
  m.unembed_ = conv(unembed_);
  return m;
}

template <typename T>
GenerateResult generate(const Model<T>& model,
                        std::span<const std::int32_t> prompt,
                        std::size_t max_new,
                        std::optional<std::int32_t> stop_token) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  GenerateResult res;
  res.tokens.assign(prompt.begin(), prompt.end());
  const std::size_t limit = model.config().max_seq_len;
  for (std::size_t step = 0; step < max_new; ++step) {
    if (res.tokens.size() >= limit) {
      res.truncated = true;
      break;
    }
    auto out = model.forward(res.tokens);
    const auto last = out.logits.row(out.logits.dim(0) - 1);
    const auto best = std::max_element(last.begin(), last.end()) - last.begin();
    res.tokens.push_back(static_cast<std::int32_t>(best));
    if (stop_token && *stop_token == best) break;
  }
  return res;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template GenerateResult generate<float>(const Model<float>&,
                                        std::span<const std::int32_t>,
                                        std::size_t, std::optional<std::int32_t>);
template GenerateResult generate<double>(const Model<double>&,
                                         std::span<const std::int32_t>,
                                         std::size_t,
                                         std::optional<std::int32_t>);

}  // namespace repo
