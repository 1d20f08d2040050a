#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coupling_probe/model.hpp"

namespace cprobe {

enum class DType { f32, f64 };

/// A named row-major tensor (rank 1 or 2) held in double precision.
struct NamedTensor {
    std::string name;
    Matrix data;
    bool is_vector = false;  // stored with shape [rows] instead of [rows, cols]
};

/// Tensor bundle: `<path>` is a JSON manifest; the blob lives next to it with the
/// extension replaced by `.bin`. Offsets are 64-byte aligned, scalars little-endian.
void write_bundle(const std::filesystem::path& manifest_path, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& extra = nlohmann::json::object(), DType dtype = DType::f64);

struct Bundle {
    nlohmann::json manifest;
    std::map<std::string, NamedTensor> tensors;
};

/// Throws CorruptCheckpoint on malformed manifests, missing or truncated blobs and shape
/// mismatches. Unknown manifest fields are ignored.
Bundle read_bundle(const std::filesystem::path& manifest_path);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const ModelConfig& config, const ModelWeights& weights, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object(), DType dtype = DType::f64);

struct Checkpoint {
    ModelConfig config;
    ModelWeights weights;
    nlohmann::json manifest;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cprobe
