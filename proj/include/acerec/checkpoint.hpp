#pragma once

// Checkpoint layout: magic "ACECKPT1", u32 version, u64 header length, JSON
// header {config, tensors}, then for each tensor a u32 name length, the
// name, u64 rows, u64 cols and rows*cols little-endian f32 values.

#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>

#include <json.hpp>

#include "acerec/binary_io.hpp"
#include "acerec/error.hpp"
#include "acerec/model.hpp"

namespace acerec {

inline const std::string kCheckpointMagic = "ACECKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model<float>& model, std::ostream& os) {
    const auto params = model.named_parameters();
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [n, t] : params) names.push_back(n);
    const auto header = nlohmann::json{{"config", to_json(model.config)}, {"tensors", names}}.dump();
    io::write_bytes(os, kCheckpointMagic);
    io::write_le<std::uint32_t>(os, kCheckpointVersion);
    io::write_le<std::uint64_t>(os, header.size());
    io::write_bytes(os, header);
    for (const auto& [n, t] : params) {
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(n.size()));
        io::write_bytes(os, n);
        io::write_le<std::uint64_t>(os, t->rows());
        io::write_le<std::uint64_t>(os, t->cols());
        os.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    }
    if (!os) throw Error("failed writing checkpoint");
}

inline void save_checkpoint(const Model<float>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    save_checkpoint(model, os);
}

// With `expect` set, a checkpoint whose (m, M) differ is rejected.
inline Model<float> load_checkpoint(std::istream& is, const std::optional<ModelConfig>& expect = std::nullopt) {
    io::expect_magic(is, kCheckpointMagic, "checkpoint");
    const auto version = io::read_le<std::uint32_t>(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint format version " + std::to_string(version) + " not supported");
    const auto len = io::read_le<std::uint64_t>(is, "checkpoint header length");
    ModelConfig cfg;
    try {
        const auto header = nlohmann::json::parse(io::read_bytes(is, len, "checkpoint header"));
        cfg = model_config_from_json(header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    if (expect && (expect->m != cfg.m || expect->M != cfg.M))
        throw ConfigError("checkpoint is incompatible: it has m=" + std::to_string(cfg.m) + ", M=" + std::to_string(cfg.M) +
                          " but m=" + std::to_string(expect->m) + ", M=" + std::to_string(expect->M) + " is required");
    auto model = init_model<float>(cfg, 0);
    for (auto& [name, t] : model.named_parameters()) {
        const auto n = io::read_le<std::uint32_t>(is, "tensor name length");
        const auto got = io::read_bytes(is, n, "tensor name");
        if (got != name) throw FormatError("checkpoint tensor '" + got + "' found where '" + name + "' expected");
        const auto rows = io::read_le<std::uint64_t>(is, "tensor rows");
        const auto cols = io::read_le<std::uint64_t>(is, "tensor cols");
        if (rows != t->rows() || cols != t->cols()) throw FormatError("checkpoint tensor '" + name + "' has wrong shape");
        auto data = t->data();
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!is) throw FormatError("truncated checkpoint tensor '" + name + "'");
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint tensors");
    return model;
}

inline Model<float> load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expect = std::nullopt) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("missing checkpoint: " + path);
    return load_checkpoint(is, expect);
}

}  // namespace acerec
