#pragma once

// Checkpoint file:
//
//   DFARCKPT 1\n
//   <one-line JSON header>\n
//   <float32 little-endian parameter data, in header order>
//
// The header carries the full TrainConfig, the iteration counter, the data
// order RNG state, the deformable offset layout and, per parameter, its
// `module/submodule/layer/{weight,bias}` name, shape and element offset.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfar/config.hpp"
#include "dfar/deform_conv.hpp"
#include "dfar/nn.hpp"

namespace dfar {

inline constexpr const char* kCheckpointMagic = "DFARCKPT";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
    TrainConfig config;
    long long iteration = 0;
    std::string rng_state;
};

inline nlohmann::json config_to_json(const TrainConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : config_keys()) j[k] = config_value(cfg, k);
    return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    for (const auto& [k, v] : j.items()) set_config_value(cfg, k, v.get<std::string>());
    cfg.validate();
    return cfg;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta, const ParamList<T>& params) {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["config"] = config_to_json(meta.config);
    header["iteration"] = meta.iteration;
    header["rng_state"] = meta.rng_state;
    header["offset_layout"] = kOffsetLayout;
    header["dtype"] = "float32";
    nlohmann::json index = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, v] : params) {
        index.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
        offset += v.value().numel();
    }
    header["parameters"] = index;
    header["numel"] = offset;

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
        out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << header.dump() << '\n';
        std::vector<float> buf;
        for (const auto& [name, v] : params) {
            buf.resize(v.value().numel());
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(v.value()[i]);
            out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!out) throw CheckpointError("short write to " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Header of a checkpoint without touching parameters.
inline nlohmann::json read_checkpoint_header(std::istream& in, const std::string& source) {
    std::string magic_line, header_line;
    if (!std::getline(in, magic_line)) throw CheckpointError(source + ": empty file");
    std::istringstream ms(magic_line);
    std::string magic;
    int version = 0;
    ms >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError(source + ": not a checkpoint");
    if (version != kCheckpointVersion) throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version));
    if (!std::getline(in, header_line)) throw CheckpointError(source + ": missing header");
    try {
        return nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(source + ": bad header: " + e.what());
    }
}

inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    const auto h = read_checkpoint_header(in, path.string());
    if (h.at("offset_layout").get<std::string>() != kOffsetLayout)
        throw CheckpointError(path.string() + ": offset layout differs from this build");
    return {config_from_json(h.at("config")), h.at("iteration").get<long long>(), h.at("rng_state").get<std::string>()};
}

/// Copies stored values into `params`; every name must be present with a matching shape.
template <typename T>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, ParamList<T>& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    const auto h = read_checkpoint_header(in, path.string());
    if (h.at("offset_layout").get<std::string>() != kOffsetLayout)
        throw CheckpointError(path.string() + ": offset layout differs from this build");
    const std::size_t total = h.at("numel").get<std::size_t>();
    std::vector<float> blob(total);
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(total * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != total * sizeof(float)) throw CheckpointError(path.string() + ": truncated parameter data");

    std::map<std::string, std::pair<Shape, std::size_t>> index;
    for (const auto& e : h.at("parameters")) index[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};
    if (index.size() != params.size())
        throw CheckpointError(path.string() + ": holds " + std::to_string(index.size()) + " parameters, model has " +
                              std::to_string(params.size()));
    for (auto& [name, v] : params) {
        auto it = index.find(name);
        if (it == index.end()) throw CheckpointError(path.string() + ": missing parameter " + name);
        if (it->second.first != v.shape())
            throw CheckpointError(path.string() + ": shape of " + name + " is " + shape_str(it->second.first) + ", model expects " +
                                  shape_str(v.shape()));
        auto& dst = v.mutable_value();
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(blob[it->second.second + i]);
    }
    return {config_from_json(h.at("config")), h.at("iteration").get<long long>(), h.at("rng_state").get<std::string>()};
}

}  // namespace dfar
