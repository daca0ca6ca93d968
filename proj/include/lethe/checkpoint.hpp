#pragma once

// LTC1 checkpoint format:
//   bytes 0-3   magic "LTC1"
//   u32 LE      version (1)
//   u64 LE      header length in bytes
//   header      UTF-8 JSON: tensor name -> {shape, dtype:"f32", offset},
//               plus the model config under the key "config"
//   payload     raw little-endian f32 data at the stated offsets
// Offsets are relative to the payload start and assigned in sorted-name
// order, so identical parameters serialize to identical bytes.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "lethe/common.hpp"
#include "lethe/model.hpp"

namespace lethe {

inline constexpr char kCheckpointMagic[4] = {'L', 'T', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"vocab_size", cfg.vocab_size},   {"d_model", cfg.d_model},
                          {"n_heads", cfg.n_heads},         {"n_layers", cfg.n_layers},
                          {"ffn_mult", cfg.ffn_mult},       {"max_context", cfg.max_context},
                          {"init_seed", cfg.init_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.ffn_mult = j.at("ffn_mult").get<std::size_t>();
        cfg.max_context = j.at("max_context").get<std::size_t>();
        cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config in checkpoint header: ") + e.what());
    }
    return cfg;
}

template <class S>
void save_checkpoint(const Parameters<S>& params, const std::string& path) {
    // Sorted-name order fixes payload offsets independent of entry order.
    std::vector<std::size_t> order(params.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return params.entries[a].first < params.entries[b].first;
    });

    nlohmann::json header;
    header["config"] = config_to_json(params.config);
    std::uint64_t offset = 0;
    for (std::size_t idx : order) {
        const auto& [name, t] = params.entries[idx];
        header[name] = {{"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}};
        offset += t.numel() * sizeof(float);
    }
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    std::vector<float> row;
    for (std::size_t idx : order) {
        const auto& t = params.entries[idx].second;
        row.resize(t.numel());
        for (std::size_t i = 0; i < t.numel(); ++i) row[i] = static_cast<float>(t.data[i]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Parameters<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic in " + path);
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (!in || version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (!in) throw FormatError("truncated checkpoint header length");
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw FormatError("truncated checkpoint header");

    nlohmann::json header = nlohmann::json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object() || !header.contains("config")) {
        throw FormatError("malformed checkpoint header JSON");
    }
    const ModelConfig cfg = config_from_json(header["config"]);
    cfg.validate();

    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});

    Parameters<float> params;
    params.config = cfg;
    for (auto& spec : detail::param_layout(cfg)) {
        if (!header.contains(spec.name)) {
            throw FormatError("checkpoint missing tensor '" + spec.name + "'");
        }
        const auto& meta = header[spec.name];
        std::vector<std::size_t> shape;
        std::uint64_t offset = 0;
        std::string dtype;
        try {
            shape = meta.at("shape").get<std::vector<std::size_t>>();
            offset = meta.at("offset").get<std::uint64_t>();
            dtype = meta.at("dtype").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad tensor metadata for '" + spec.name + "': " + e.what());
        }
        if (dtype != "f32") throw FormatError("unsupported dtype '" + dtype + "' for '" + spec.name + "'");
        if (shape != spec.shape) {
            throw FormatError("tensor '" + spec.name + "' has shape " + shape_str(shape) +
                              ", config implies " + shape_str(spec.shape));
        }
        const std::size_t count = Tensor<float>::numel_of(shape);
        if (offset + count * sizeof(float) > payload.size()) {
            throw FormatError("tensor '" + spec.name + "' extends past payload end");
        }
        Tensor<float> t(shape);
        std::memcpy(t.data.data(), payload.data() + offset, count * sizeof(float));
        params.entries.emplace_back(spec.name, std::move(t));
    }
    if (payload.size() != params.total_params() * sizeof(float)) {
        throw FormatError("payload length " + std::to_string(payload.size()) +
                          " does not match declared tensors");
    }
    return params;
}

template <class S>
Parameters<S> load_checkpoint_as(const std::string& path) {
    if constexpr (std::is_same_v<S, float>) {
        return load_checkpoint(path);
    } else {
        return load_checkpoint(path).template cast<S>();
    }
}

} // namespace lethe
