#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefopt/errors.hpp"

namespace prefopt {

// FNV-1a, 64-bit. Plenty for change detection in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hash_file_hex(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for hashing");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

// One manifest per run: the subcommand, the fully resolved config, the seed,
// and a content hash per input and output file. No timestamps, so identical
// invocations produce identical manifests.
inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const nlohmann::json& resolved_config, std::uint64_t seed,
                           const std::vector<std::filesystem::path>& inputs,
                           const std::vector<std::filesystem::path>& outputs) {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = resolved_config;
    j["seed"] = seed;
    nlohmann::json in_hashes = nlohmann::json::object();
    for (const auto& p : inputs) in_hashes[p.string()] = hash_file_hex(p);
    j["inputs"] = in_hashes;
    nlohmann::json out_hashes = nlohmann::json::object();
    for (const auto& p : outputs) out_hashes[p.filename().string()] = hash_file_hex(p);
    j["outputs"] = out_hashes;

    const std::filesystem::path path = dir / "manifest.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace prefopt
