#include "repo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace repo {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'E', 'P', 'O', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U take(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U)))
    throw CheckpointError("checkpoint truncated");
  return v;
}

std::string take_bytes(std::istream& is, std::uint64_t n) {
  constexpr std::uint64_t kLimit = 1ull << 32;
  if (n > kLimit) throw CheckpointError("checkpoint field length is implausible");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n)))
    throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string meta = data.meta.dump();
    put<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw CheckpointError("short write to '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = take<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  try {
    data.meta = nlohmann::json::parse(take_bytes(is, take<std::uint64_t>(is)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = take<std::uint32_t>(is);
  for (std::uint32_t n = 0; n < count; ++n) {
    std::string name = take_bytes(is, take<std::uint32_t>(is));
    const auto rank = take<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is);
    if (shape_numel(shape) > (1ull << 30))
      throw CheckpointError("tensor '" + name + "' is implausibly large");
    Tensor<float> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float))))
      throw CheckpointError("checkpoint truncated in tensor '" + name + "'");
    data.tensors.emplace(std::move(name), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw CheckpointError("trailing bytes after checkpoint tensors");
  if (!data.meta.contains("model"))
    throw CheckpointError("checkpoint metadata lacks a model config");
  return data;
}

CheckpointData to_checkpoint(const Model<float>& model, nlohmann::json meta) {
  CheckpointData data;
  data.meta = std::move(meta);
  data.meta["model"] = to_json(model.config());
  for (const auto* p : model.parameters()) data.tensors.emplace(p->name, p->value);
  return data;
}

Model<float> model_from_checkpoint(const CheckpointData& data) {
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(data.meta.at("model"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint model config: ") + e.what());
  }
  auto model = Model<float>::build(cfg, 0);
  for (auto* p : model.parameters()) {
    auto it = data.tensors.find(p->name);
    if (it == data.tensors.end())
      throw CheckpointError("checkpoint lacks parameter '" + p->name + "'");
    if (it->second.shape() != p->value.shape())
      throw CheckpointError("parameter '" + p->name + "' has shape " +
                            shape_str(it->second.shape()) + " but config needs " +
                            shape_str(p->value.shape()));
    p->value = it->second;
  }
  return model;
}

}  // namespace repo
