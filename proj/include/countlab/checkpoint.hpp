#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/error.hpp"
#include "countlab/model.hpp"

namespace countlab {

// Layout on disk:
//   8 bytes   magic "CNTLCKPT"
//   uint32 LE format version
//   uint32 LE header length N
//   N bytes   UTF-8 JSON header {format_version, config, seed, step, n_params, tensors[], meta}
//   n_params  float32 LE weights in ParamLayout order (tensors[] lists name/shape/offset)

inline constexpr char kCheckpointMagic[8] = {'C', 'N', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4] = {};
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) {
        throw InputError("truncated checkpoint");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const Transformer<T>& model, std::int64_t step,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["config"] = model.config();
    header["seed"] = model.config().seed;
    header["step"] = step;
    header["n_params"] = model.parameters().size();
    header["meta"] = meta;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    for (const auto& t : model.layout().tensors()) {
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
    }
    const std::string text = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw InputError("cannot write checkpoint " + path);
        }
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        detail::write_u32(out, kCheckpointVersion);
        detail::write_u32(out, static_cast<std::uint32_t>(text.size()));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const T v : model.parameters()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            detail::write_u32(out, bits);
        }
        if (!out) {
            throw InputError("failed writing checkpoint " + path);
        }
    }
    std::rename(tmp.c_str(), path.c_str());
}

inline CheckpointInfo read_checkpoint_header(std::istream& in, const std::string& path) {
    char magic[8] = {};
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw InputError(path + " is not a countlab checkpoint");
    }
    const auto version = detail::read_u32(in);
    if (version != kCheckpointVersion) {
        throw InputError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto len = detail::read_u32(in);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) {
        throw InputError("truncated checkpoint header");
    }
    const auto header = nlohmann::json::parse(text);
    CheckpointInfo info;
    info.config = header.at("config").get<ModelConfig>();
    info.seed = header.value("seed", std::uint64_t{0});
    info.step = header.value("step", std::int64_t{0});
    info.meta = header.value("meta", nlohmann::json::object());
    return info;
}

template <class T = float>
Transformer<T> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open checkpoint " + path);
    }
    const CheckpointInfo info = read_checkpoint_header(in, path);
    Transformer<T> model(info.config);
    for (T& v : model.parameters()) {
        v = static_cast<T>(std::bit_cast<float>(detail::read_u32(in)));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw InputError("trailing bytes in checkpoint " + path);
    }
    if (info_out != nullptr) {
        *info_out = info;
    }
    return model;
}

} // namespace countlab
