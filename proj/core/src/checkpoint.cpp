#include "rapstream/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace rapstream::checkpoint {

using nlohmann::json;

namespace {
constexpr char kMagic[4] = {'R', 'A', 'P', 'C'};
constexpr std::uint8_t kVersion = 1;
}  // namespace

const TensorEntry* Container::find(const std::string& name) const {
    for (const TensorEntry& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

bool Container::has_prefix(const std::string& prefix) const {
    for (const TensorEntry& t : tensors) {
        if (t.name.rfind(prefix, 0) == 0) return true;
    }
    return false;
}

std::string model_config_to_json(const model::ModelConfig& cfg) {
    json j;
    j["channel_count"] = cfg.channel_count;
    j["temporal_filters"] = cfg.temporal_filters;
    j["temporal_kernel"] = cfg.temporal_kernel;
    j["depth_multiplier"] = cfg.depth_multiplier;
    j["second_block_filters"] = cfg.second_block_filters;
    j["second_kernel"] = cfg.second_kernel;
    j["activation"] = cfg.activation;
    j["pooling"] = cfg.pooling;
    j["dropout_rate"] = cfg.dropout_rate;
    j["padding_mode"] = model::to_string(cfg.padding_mode);
    j["class_count"] = cfg.class_count;
    j["bn_momentum"] = cfg.bn_momentum;
    j["rap_plan"] = {{"kernel_sizes", cfg.rap_plan.kernel_sizes},
                     {"strides", cfg.rap_plan.strides},
                     {"intermediate_frequency_hz", cfg.rap_plan.intermediate_frequency_hz},
                     {"pooling_layer_count", cfg.rap_plan.pooling_layer_count}};
    return j.dump();
}

model::ModelConfig model_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid model config JSON: ") + e.what(), "<config>", 0);
    }
    model::ModelConfig cfg;
    try {
        cfg.channel_count = j.at("channel_count").get<int>();
        cfg.temporal_filters = j.at("temporal_filters").get<int>();
        cfg.temporal_kernel = j.at("temporal_kernel").get<int>();
        cfg.depth_multiplier = j.at("depth_multiplier").get<int>();
        cfg.second_block_filters = j.at("second_block_filters").get<int>();
        cfg.second_kernel = j.at("second_kernel").get<int>();
        cfg.activation = j.at("activation").get<std::string>();
        cfg.pooling = j.at("pooling").get<std::string>();
        cfg.dropout_rate = j.at("dropout_rate").get<double>();
        cfg.padding_mode = model::padding_mode_from_string(j.at("padding_mode").get<std::string>());
        cfg.class_count = j.at("class_count").get<int>();
        cfg.bn_momentum = j.at("bn_momentum").get<double>();
        const json& plan = j.at("rap_plan");
        cfg.rap_plan.kernel_sizes = plan.at("kernel_sizes").get<std::vector<int>>();
        cfg.rap_plan.strides = plan.at("strides").get<std::vector<int>>();
        cfg.rap_plan.intermediate_frequency_hz = plan.at("intermediate_frequency_hz").get<int>();
        cfg.rap_plan.pooling_layer_count = plan.at("pooling_layer_count").get<int>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config missing field: ") + e.what(), "<config>", 0);
    }
    return cfg;
}

void write_container(const std::string& path, const Container& c) {
    json manifest;
    manifest["kind"] = c.kind;
    manifest["rng_seed"] = c.rng_seed;
    manifest["rng_counter"] = c.rng_counter;
    manifest["config"] = c.config_json.empty() ? json(nullptr) : json::parse(c.config_json);
    manifest["meta"] = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
    manifest["tensors"] = json::array();
    for (const TensorEntry& t : c.tensors) {
        if (t.data.size() !=
            static_cast<std::size_t>(tensor::Tensor<float>::numel(t.shape))) {
            throw ShapeError("tensor '" + t.name + "' data does not match its shape");
        }
        manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    }
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot open checkpoint for writing", path, 0);
    out.write(kMagic, 4);
    out.put(static_cast<char>(kVersion));
    const auto len = static_cast<std::uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const TensorEntry& t : c.tensors) {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw ParseError("short write", path, 0);
}

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint", path, 0);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("bad magic (not a RAPC checkpoint)", path, 0);
    }
    std::uint8_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 1);
    if (!in || version != kVersion) {
        throw ParseError("unsupported checkpoint version", path, 4);
    }
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw ParseError("truncated manifest", path, 9);

    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid manifest JSON: ") + e.what(), path, 9);
    }

    Container c;
    c.kind = manifest.value("kind", "");
    c.rng_seed = manifest.value("rng_seed", std::uint64_t{0});
    c.rng_counter = manifest.value("rng_counter", std::uint64_t{0});
    if (manifest.contains("config") && !manifest["config"].is_null()) {
        c.config_json = manifest["config"].dump();
    }
    if (manifest.contains("meta")) c.meta_json = manifest["meta"].dump();
    std::size_t offset = 9 + len;
    for (const json& tj : manifest.at("tensors")) {
        TensorEntry t;
        t.name = tj.at("name").get<std::string>();
        t.shape = tj.at("shape").get<std::vector<std::int64_t>>();
        const auto numel =
            static_cast<std::size_t>(tensor::Tensor<float>::numel(t.shape));
        t.data.resize(numel);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(numel * sizeof(float))) {
            throw ParseError("tensor '" + t.name + "' truncated", path, offset);
        }
        offset += numel * sizeof(float);
        c.tensors.push_back(std::move(t));
    }
    return c;
}

Container pack_model(const model::ModelState& state) {
    Container c;
    c.kind = "model";
    c.config_json = model_config_to_json(state.config);
    c.rng_seed = state.rng_seed;
    c.rng_counter = state.rng_counter;
    for (const auto& p : state.params) {
        c.tensors.push_back(TensorEntry{p.name, p.t.shape, p.t.v});
    }
    for (const auto& b : state.buffers) {
        c.tensors.push_back(TensorEntry{"buffer." + b.name, b.t.shape, b.t.v});
    }
    return c;
}

model::ModelState unpack_model(const Container& c) {
    if (c.kind != "model") {
        throw ParseError("checkpoint kind '" + c.kind + "' is not a model", "<container>", 0);
    }
    const model::ModelConfig cfg = model_config_from_json(c.config_json);
    model::ModelState state = model::init_model<float>(cfg, c.rng_seed);
    state.rng_counter = c.rng_counter;
    const auto fill = [&](model::NamedTensor<float>& dst, const std::string& stored_name) {
        const TensorEntry* src = c.find(stored_name);
        if (!src) {
            throw ParseError("checkpoint is missing tensor '" + stored_name + "'",
                             "<container>", 0);
        }
        if (src->shape != dst.t.shape) {
            throw ShapeError("tensor '" + stored_name + "' has shape inconsistent with config");
        }
        dst.t.v = src->data;
    };
    for (auto& p : state.params) fill(p, p.name);
    for (auto& b : state.buffers) fill(b, "buffer." + b.name);
    return state;
}

void save_model(const std::string& path, const model::ModelState& state) {
    write_container(path, pack_model(state));
}

model::ModelState load_model(const std::string& path) {
    return unpack_model(read_container(path));
}

}  // namespace rapstream::checkpoint
