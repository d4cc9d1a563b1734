#include "msm/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace msm {

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const std::string& dir, const ParamList& tensors, const std::string& meta_json) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "msm-ckpt-v1";
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  json entries = json::array();

  const fs::path blob_path = fs::path(dir) / "tensors.bin";
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  require(blob.good(), "checkpoint: cannot open " + blob_path.string() + " for writing");
  uint64_t offset = 0;
  for (const auto& p : tensors) {
    const uint64_t nbytes = p.tensor.values().size() * sizeof(float);
    json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["dtype"] = "float32";
    e["offset"] = offset;
    e["nbytes"] = nbytes;
    entries.push_back(e);
    blob.write(reinterpret_cast<const char*>(p.tensor.data()), static_cast<std::streamsize>(nbytes));
    offset += nbytes;
  }
  blob.close();
  require(blob.good(), "checkpoint: write failed for " + blob_path.string());

  manifest["tensors"] = entries;
  manifest["meta"] = meta_json.empty() ? json::object() : json::parse(meta_json);

  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  require(mf.good(), "checkpoint: cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  require(fs::exists(mpath), "checkpoint: no manifest.json under " + dir);
  std::ifstream mf(mpath);
  json manifest = json::parse(mf);
  require(manifest.value("format", "") == "msm-ckpt-v1",
          "checkpoint: unsupported format in " + mpath.string());

  std::ifstream blob(fs::path(dir) / "tensors.bin", std::ios::binary);
  require(blob.good(), "checkpoint: missing tensors.bin under " + dir);

  Checkpoint ckpt;
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const uint64_t offset = e.at("offset").get<uint64_t>();
    const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
    require(nbytes == shape_numel(shape) * sizeof(float),
            "checkpoint: size mismatch for tensor '" + e.at("name").get<std::string>() + "'");
    std::vector<float> vals(nbytes / sizeof(float));
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(nbytes));
    require(blob.good(), "checkpoint: short read in tensors.bin");
    ckpt.tensors.emplace(e.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(vals)));
  }
  ckpt.meta_json = manifest.at("meta").dump();
  return ckpt;
}

}  // namespace msm
