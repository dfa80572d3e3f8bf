#ifndef RAPSTREAM_CHECKPOINT_HPP
#define RAPSTREAM_CHECKPOINT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rapstream/model.hpp"

namespace rapstream::checkpoint {

/// RAPC container: magic "RAPC", version byte, length-prefixed JSON manifest
/// (kind, config, rng state, tensor table, free-form meta), then the named
/// tensors as little-endian 32-bit floats in manifest order. Model, alignment
/// references ("align." prefix) and the MDM benchmark ("mdm." prefix) share
/// the same container.
struct TensorEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

struct Container {
    std::string kind;         // "model", "mdm", ...
    std::string config_json;  // ModelConfig (kind == "model"), else empty
    std::string meta_json;    // free-form JSON extras ("{}" when unused)
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    std::vector<TensorEntry> tensors;

    const TensorEntry* find(const std::string& name) const;
    bool has_prefix(const std::string& prefix) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

Container pack_model(const model::ModelState& state);
/// Rebuilds a ModelState; every tensor's shape is validated against the
/// manifest and against the shape the config dictates.
model::ModelState unpack_model(const Container& c);

void save_model(const std::string& path, const model::ModelState& state);
model::ModelState load_model(const std::string& path);

std::string model_config_to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace rapstream::checkpoint

#endif
