#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "repo/model.hpp"
#include "repo/tasks.hpp"

namespace repo {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 64;
  double lr = 3e-4;
  double weight_decay = 0.1;
  std::size_t warmup_steps = 100;
  double clip_norm = 1.0;
  std::size_t eval_every = 1000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  // Floor of the cosine schedule as a fraction of lr.
  double min_lr_ratio = 0.1;
  // Learning-rate multiplier for the position parameters (names containing
  // ".repo."), which are also exempt from weight decay.
  double position_lr_scale = 1.0;

  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup to lr, then cosine decay to lr * min_lr_ratio at `steps`.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

// Adam with decoupled weight decay. Decay applies to rank-2 weights other
// than the position parameters.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(const std::vector<Parameter<float>*>& params, double lr);

  std::size_t steps_taken() const { return t_; }

  // Moment tensors keyed "adam.m.<param>" / "adam.v.<param>".
  std::map<std::string, Tensor<float>> state() const;
  void load_state(const std::map<std::string, Tensor<float>>& tensors,
                  std::size_t steps_taken);

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

// Next-token view of one record: input = prompt + target, predicting
// target + EOS. Prompt positions carry zero loss weight.
struct TrainingSequence {
  tasks::TokenIds input;
  tasks::TokenIds next;
  std::vector<float> mask;
  std::size_t target_tokens = 0;
};

TrainingSequence make_training_sequence(const tasks::TaskRecord& r);

struct LossPoint {
  std::size_t step = 0;  // completed optimizer steps
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;  // before clipping
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const LossPoint&)> on_step;
  // Called every eval_every steps and after the final step.
  std::function<void(std::size_t step, const Model<float>&, const AdamW&)>
      on_checkpoint;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  std::size_t final_step = 0;
};

// Global L2 norm of all parameter gradients.
double global_grad_norm(const std::vector<Parameter<float>*>& params);
// Rescales gradients so their global norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(const std::vector<Parameter<float>*>& params,
                      double max_norm);

// Accumulates token-weighted cross-entropy gradients of `batch` into the
// model's parameter grads (which are zeroed first). Returns the batch loss.
double accumulate_batch_gradients(Model<float>& model,
                                  std::span<const TrainingSequence> batch);

// Batch indices drawn for `step`; a pure function of (seed, step).
std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t step,
                                      std::size_t batch_size,
                                      std::size_t dataset_size);

// Runs optimizer steps start_step .. cfg.steps-1. Pass the optimizer restored
// from a checkpoint (and its step) to resume; otherwise a fresh one is used.
// Throws TrainingError on a non-finite loss.
TrainResult train(Model<float>& model, std::span<const tasks::TaskRecord> data,
                  const TrainConfig& cfg, const TrainHooks& hooks = {},
                  AdamW* optimizer = nullptr, std::size_t start_step = 0);

// Anything that continues a prompt greedily.
class SequenceDecoder {
 public:
  virtual ~SequenceDecoder() = default;
  virtual tasks::TokenIds generate(std::span<const std::int32_t> prompt,
                                   std::size_t max_new) const = 0;
  // True iff greedy decoding from `prompt` emits exactly `continuation`.
  virtual bool reproduces(std::span<const std::int32_t> prompt,
                          std::span<const std::int32_t> continuation) const;
};

// Decodes with a model. reproduces() uses one teacher-forced forward pass:
// greedy output equals the continuation iff the argmax at every continuation
// position equals the next continuation token.
template <typename T>
class ModelDecoder : public SequenceDecoder {
 public:
  explicit ModelDecoder(const Model<T>& model) : model_(model) {}
  tasks::TokenIds generate(std::span<const std::int32_t> prompt,
                           std::size_t max_new) const override;
  bool reproduces(std::span<const std::int32_t> prompt,
                  std::span<const std::int32_t> continuation) const override;

 private:
  const Model<T>& model_;
};

struct BucketAccuracy {
  std::size_t length = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

struct EvalReport {
  std::size_t train_max_len = 0;
  std::vector<BucketAccuracy> buckets;  // ascending length
  std::optional<double> in_domain;      // over examples with length <= train_max_len
  std::optional<double> out_of_domain;  // over examples with length > train_max_len
  std::size_t examples = 0;
  std::size_t correct = 0;
};

nlohmann::json to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);

// An example is correct iff greedy decoding emits target + EOS exactly.
EvalReport evaluate_exact(const SequenceDecoder& decoder,
                          std::span<const tasks::TaskRecord> data,
                          std::size_t train_max_len);

}  // namespace repo
