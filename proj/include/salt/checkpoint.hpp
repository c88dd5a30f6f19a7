#pragma once

#include <string>
#include <utility>
#include <vector>

#include "salt/lm.hpp"

namespace salt {

// Binary model snapshot: magic "SALTCKPT", version, config block (including a
// free-form metadata string), then named tensors as (name length, name bytes,
// rank, dims, little-endian 64-bit floats). Model parameters and any extra
// tensors (optimizer state) share one flat list; round-trips are bit-exact.
struct LoadedCheckpoint {
  LmModel model;
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> extra;  // non-parameter tensors
};

void save_checkpoint(const std::string& path, const LmModel& model, const std::string& meta = "",
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace salt
