#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcc/model.hpp"

namespace rcc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

template <class T>
constexpr const char* precision_name() {
    if constexpr (sizeof(T) == 4)
        return "float32";
    else
        return "float64";
}

// Checkpoint layout: one line of JSON (config, parameter names, shapes, byte
// offsets, precision), then the raw IEEE-754 arrays in manifest order.
template <class T>
void save_checkpoint(const RccModel<T>& m, const std::string& path) {
    nlohmann::json manifest;
    manifest["format"] = "rcc-checkpoint";
    manifest["version"] = 1;
    manifest["precision"] = precision_name<T>();
    manifest["config"] = to_json(m.cfg);
    nlohmann::json params = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : m.params) {
        const std::uint64_t nbytes = static_cast<std::uint64_t>(p.tensor.numel()) * sizeof(T);
        params.push_back(nlohmann::json{{"name", p.name},
                                        {"shape", p.tensor.shape()},
                                        {"offset", offset},
                                        {"nbytes", nbytes}});
        offset += nbytes;
    }
    manifest["params"] = std::move(params);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << manifest.dump() << '\n';
    for (const auto& p : m.params)
        out.write(reinterpret_cast<const char*>(p.tensor.data()),
                  static_cast<std::streamsize>(p.tensor.numel() * sizeof(T)));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline nlohmann::json read_checkpoint_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header;
    if (!std::getline(in, header)) throw IoError("checkpoint missing manifest: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "rcc-checkpoint")
        throw IoError("not an rcc checkpoint: " + path);
    return manifest;
}

template <class T>
RccModel<T> load_checkpoint(const std::string& path) {
    nlohmann::json manifest = read_checkpoint_manifest(path);
    if (manifest.value("precision", "") != precision_name<T>())
        throw IoError("checkpoint precision is " + manifest.value("precision", "?") +
                      ", expected " + precision_name<T>());
    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    RccModel<T> m = build_model<T>(cfg, /*seed=*/0);

    const auto& params = manifest.at("params");
    if (params.size() != m.params.size())
        throw IoError("checkpoint parameter count mismatch");

    std::ifstream in(path, std::ios::binary);
    std::string header;
    std::getline(in, header);
    const std::streampos data_start = in.tellg();
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        const auto& spec = params[i];
        auto& p = m.params[i];
        if (spec.at("name").get<std::string>() != p.name)
            throw IoError("checkpoint parameter order mismatch at " + p.name);
        const auto shape = spec.at("shape").get<std::vector<int>>();
        if (shape != p.tensor.shape())
            throw IoError("checkpoint shape mismatch for " + p.name);
        const std::uint64_t nbytes = spec.at("nbytes").get<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(p.tensor.numel()) * sizeof(T))
            throw IoError("checkpoint size mismatch for " + p.name);
        in.seekg(data_start + static_cast<std::streamoff>(spec.at("offset").get<std::uint64_t>()));
        in.read(reinterpret_cast<char*>(p.tensor.data()),
                static_cast<std::streamsize>(nbytes));
        if (!in) throw IoError("checkpoint truncated while reading " + p.name);
    }
    return m;
}

}  // namespace rcc
