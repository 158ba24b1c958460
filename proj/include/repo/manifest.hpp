#pragma once

// Run manifests and small file helpers shared by the command-line tools.

#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"

namespace repo {

inline constexpr const char* kVersion = "0.1.0";

// FNV-1a 64 over the compact dump of `j` (keys sorted by nlohmann::json).
std::uint64_t config_hash(const nlohmann::json& j);
std::string hex64(std::uint64_t v);

// UTC, ISO 8601.
std::string utc_timestamp();

// Writes via <path>.tmp and rename.
void write_text_atomic(const std::string& path, const std::string& text);

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> artifacts;  // role -> path
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& m);
void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace repo
