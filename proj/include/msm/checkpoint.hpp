#pragma once

// Checkpoint container shared by every model: a directory holding
// manifest.json (tensor names, shapes, dtype, byte offsets, free-form meta)
// plus tensors.bin, one raw little-endian float32 blob.

#include <map>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "msm/optim.hpp"
#include "msm/tensor.hpp"

namespace msm {

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::string meta_json;  // manifest "meta" object, serialized

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
};

void save_checkpoint(const std::string& dir, const ParamList& tensors, const std::string& meta_json);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace msm
