// SPDX-License-Identifier: Apache-2.0
#include "genrep/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>

namespace genrep {

void append_params(ParamMap& map, const std::string& prefix, ParamRegistry& reg) {
    for (Parameter* p : reg.all()) {
        map.emplace_back(prefix + p->name, p);
    }
}

void save_checkpoint(const std::string& path, const ParamMap& params,
                     const nlohmann::json& extra) {
    nlohmann::json header;
    header["format"] = "genrep-ckpt-v1";
    header["extra"] = extra;
    nlohmann::json entries = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, p] : params) {
        nlohmann::json e;
        e["shape"] = p->tensor.shape();
        e["offset"] = offset;
        entries[name] = e;
        offset += p->tensor.numel() * sizeof(float);
    }
    header["params"] = entries;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot write checkpoint: " + path);
    }
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : params) {
        (void)name;
        f.write(reinterpret_cast<const char*>(p->tensor.data()),
                static_cast<std::streamsize>(p->tensor.numel() * sizeof(float)));
    }
    if (!f) {
        throw IoError("short write on checkpoint: " + path);
    }
}

nlohmann::json load_checkpoint(const std::string& path, const ParamMap& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint: " + path);
    }
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) {
        throw IoError("truncated checkpoint header: " + path);
    }
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded() || !header.contains("params")) {
        throw IoError("malformed checkpoint header: " + path);
    }
    const std::streampos payload_start = f.tellg();
    for (const auto& [name, p] : params) {
        if (!header["params"].contains(name)) {
            throw ContractError("checkpoint missing parameter: " + name);
        }
        const auto& e = header["params"][name];
        const std::vector<int> shape = e["shape"].get<std::vector<int>>();
        if (shape != p->tensor.shape()) {
            throw DimError("checkpoint shape mismatch for " + name);
        }
        const uint64_t offset = e["offset"].get<uint64_t>();
        f.seekg(payload_start + static_cast<std::streamoff>(offset));
        f.read(reinterpret_cast<char*>(p->tensor.data()),
               static_cast<std::streamsize>(p->tensor.numel() * sizeof(float)));
        if (!f) {
            throw IoError("truncated checkpoint payload: " + path);
        }
    }
    return header.contains("extra") ? header["extra"] : nlohmann::json::object();
}

bool checkpoint_exists(const std::string& path) { return std::filesystem::exists(path); }

} // namespace genrep
