#pragma once

// Combined run configuration: {"model": ..., "train": ..., "task": ...}.
// Every section is optional; unknown keys anywhere are errors.

#include <cstddef>
#include <string>

#include "json.hpp"

#include "repo/model.hpp"
#include "repo/trainer.hpp"

namespace repo {

struct TaskConfig {
  std::string kind = "reversal";
  std::size_t train_lo = 2;
  std::size_t train_hi = 20;
  std::size_t eval_lo = 2;
  std::size_t eval_hi = 30;
  std::size_t train_count = 10000;
  std::size_t eval_per_length = 100;

  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const TaskConfig& t);
TaskConfig task_config_from_json(const nlohmann::json& j);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
// Throws ConfigError("config", ...) when the file is missing or not JSON.
RunConfig load_run_config(const std::string& path);

}  // namespace repo
