#pragma once

// Causal decoder-only transformer with a pluggable position mode per layer.
//
// Block layout (pre-norm):
//   h = rms_norm(x)
//   q, k, v = h Wq, h Wk, h Wv;  z = positions(h) per the layer's mode
//   x += attention(q, k, v, z) Wo
//   x += (swish(rms_norm(x) Wgate) * (rms_norm(x) Wup)) Wdown
// followed by a final rms_norm and an untied output projection.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "repo/autograd.hpp"
#include "repo/positioning.hpp"

namespace repo {

// Raised by ModelConfig::validate() and config parsing; `field` names the
// offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::invalid_argument(field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

std::vector<PositionMode> schedule_rope(std::size_t n_layers);
std::vector<PositionMode> schedule_nope(std::size_t n_layers);
// Every three layers: two linear then one constant.
std::vector<PositionMode> schedule_r2n1(std::size_t n_layers);
// Every three layers: two constant then one linear.
std::vector<PositionMode> schedule_n2r1(std::size_t n_layers);
// Linear below `start_layer`, learned from it upward.
std::vector<PositionMode> schedule_repo(std::size_t n_layers,
                                        std::size_t start_layer);
// Expands "rope", "nope", "r2n1", "n2r1", "repo".
std::vector<PositionMode> named_schedule(const std::string& name,
                                         std::size_t n_layers,
                                         std::size_t start_layer);

struct ModelConfig {
  std::size_t vocab_size = 45;
  std::size_t d_model = 256;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_p = 32;
  std::size_t ffn_hidden = 0;  // 0 selects 8/3 * d_model rounded to 8
  std::size_t repo_start_layer = 0;
  std::vector<PositionMode> schedule = schedule_repo(4, 0);
  double rope_base = 10000.0;
  double constant_position = 0.0;
  std::size_t max_seq_len = 72;
  bool share_fphi_across_heads = true;
  double init_std = 0.02;
  // Std of the position gate and content projections; 0 selects 1/sqrt(d_model).
  double position_init_std = 0.0;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }
  std::size_t ffn_width() const;
  bool any_learned() const;

  // Throws ConfigError naming the first violated field.
  void validate() const;

  // Desk-scale reversal setup: 4 layers, 4 heads, d=256, d_p=32, all layers
  // learned with f_phi shared across heads.
  static ModelConfig toy_reversal();
};

// Strict JSON mapping: unknown keys are ConfigErrors. "schedule" accepts a
// preset name or an explicit per-layer list of mode names.
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct LayerWeights {
  Parameter<T> attn_norm, wq, wk, wv, wo;
  Parameter<T> ffn_norm, w_gate, w_up, w_down;
  std::optional<RepoParams<T>> repo;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;  // [L x vocab]
  std::optional<PositionTrace> trace;
  // Per (layer, head), index layer * n_heads + head; each [L x L].
  std::vector<Tensor<T>> attention;
};

struct ForwardOptions {
  bool want_trace = false;
  bool want_attention = false;
  // Added to every learned position before attention.
  double position_offset = 0.0;
};

template <typename T>
class Model {
 public:
  Model() = default;

  // Deterministic under (config, seed). Throws ConfigError.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::span<const T> freqs() const { return freqs_; }

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>* find(const std::string& name);

  LayerWeights<T>& layer(std::size_t k) { return layers_.at(k); }
  const LayerWeights<T>& layer(std::size_t k) const { return layers_.at(k); }
  Parameter<T>& embedding() { return embed_; }

  // Records the forward pass on `g` with trainable parameters; returns the
  // logits node. Throws std::out_of_range for ids >= vocab_size and
  // std::length_error past max_seq_len.
  Var<T> forward(Graph<T>& g, std::span<const std::int32_t> tokens,
                 ForwardOutput<T>* extras = nullptr,
                 const ForwardOptions& opts = {});

  // Inference forward; parameters are not tracked.
  ForwardOutput<T> forward(std::span<const std::int32_t> tokens,
                           const ForwardOptions& opts = {}) const;

  template <typename U>
  Model<U> cast() const;

 private:
  template <typename U>
  friend class Model;

  template <typename Self>
  static Var<T> run(Self& self, Graph<T>& g,
                    std::span<const std::int32_t> tokens,
                    ForwardOutput<T>* extras, const ForwardOptions& opts);

  ModelConfig config_;
  std::vector<T> freqs_;
  Parameter<T> embed_;
  std::vector<LayerWeights<T>> layers_;
  Parameter<T> final_norm_;
  Parameter<T> unembed_;
};

struct GenerateResult {
  std::vector<std::int32_t> tokens;  // prompt followed by new tokens
  bool truncated = false;            // stopped early at max_seq_len
};

// Greedy decoding with a full forward recompute per step. Stops after
// max_new tokens, at `stop_token` if given, or at max_seq_len (truncated).
template <typename T>
GenerateResult generate(const Model<T>& model,
                        std::span<const std::int32_t> prompt,
                        std::size_t max_new,
                        std::optional<std::int32_t> stop_token = std::nullopt);

}  // namespace repo
