#include "repo/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace repo {

std::uint64_t config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json to_json(const RunManifest& m) {
  return {{"version", kVersion},
          {"command", m.command},
          {"config", m.config},
          {"config_hash", hex64(config_hash(m.config))},
          {"seed", m.seed},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at},
          {"artifacts", m.artifacts},
          {"extra", m.extra}};
}

void write_manifest(const std::string& path, const RunManifest& m) {
  write_text_atomic(path, to_json(m).dump(2) + "\n");
}

}  // namespace repo
