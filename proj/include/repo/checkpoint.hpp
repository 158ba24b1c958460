#pragma once

// Binary checkpoint container.
//
//   magic     8 bytes  "REPOCKPT"
//   version   u32      kCheckpointVersion
//   meta_len  u64      byte length of the JSON block
//   meta      JSON     {"model": <ModelConfig>, ...caller sections}
//   count     u32      number of tensors
//   per tensor:
//     name_len u32, name bytes, rank u32, dims u64[rank],
//     values   f32[prod(dims)] row-major
//
// All integers and floats are little-endian.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "repo/model.hpp"

namespace repo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  nlohmann::json meta;  // always carries "model"
  std::map<std::string, Tensor<float>> tensors;
};

void write_checkpoint(const std::string& path, const CheckpointData& data);
// Throws CheckpointError on I/O failure, bad magic/version, or truncation.
CheckpointData read_checkpoint(const std::string& path);

// Model parameters under their own names plus `meta` (the model config is
// added under "model").
CheckpointData to_checkpoint(const Model<float>& model,
                             nlohmann::json meta = nlohmann::json::object());

// Rebuilds a model from the config echo and checks every parameter's shape
// against it. Extra tensors (e.g. optimizer state) are ignored.
Model<float> model_from_checkpoint(const CheckpointData& data);

}  // namespace repo
