#include "repo/run_config.hpp"

#include <fstream>
#include <set>

namespace repo {

void TaskConfig::validate() const {
  if (kind != "reversal" && kind != "niah")
    throw ConfigError("kind", "must be \"reversal\" or \"niah\"");
  if (train_lo < 2) throw ConfigError("train_lo", "must be at least 2");
  if (train_hi < train_lo) throw ConfigError("train_hi", "must be >= train_lo");
  if (eval_lo < 2) throw ConfigError("eval_lo", "must be at least 2");
  if (eval_hi < eval_lo) throw ConfigError("eval_hi", "must be >= eval_lo");
  if (train_count == 0) throw ConfigError("train_count", "must be positive");
  if (eval_per_length == 0) throw ConfigError("eval_per_length", "must be positive");
}

nlohmann::json to_json(const TaskConfig& t) {
  return {{"kind", t.kind},         {"train_lo", t.train_lo},
          {"train_hi", t.train_hi}, {"eval_lo", t.eval_lo},
          {"eval_hi", t.eval_hi},   {"train_count", t.train_count},
          {"eval_per_length", t.eval_per_length}};
}

TaskConfig task_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("task", "must be a JSON object");
  static const std::set<std::string> known = {"kind",    "train_lo",    "train_hi",
                                              "eval_lo", "eval_hi",     "train_count",
                                              "eval_per_length"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError(key, "unknown task key");
  TaskConfig t;
  if (auto it = j.find("kind"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("kind", "must be a string");
    t.kind = it->get<std::string>();
  }
  auto read = [&](const char* key, std::size_t& field) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer() || it->get<long long>() < 0)
      throw ConfigError(key, "must be a non-negative integer");
    field = it->get<std::size_t>();
  };
  read("train_lo", t.train_lo);
  read("train_hi", t.train_hi);
  read("eval_lo", t.eval_lo);
  read("eval_hi", t.eval_hi);
  read("train_count", t.train_count);
  read("eval_per_length", t.eval_per_length);
  t.validate();
  return t;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"task", to_json(c.task)}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "model" && key != "train" && key != "task")
      throw ConfigError(key, "unknown config section");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("task")) c.task = task_config_from_json(j.at("task"));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace repo
