#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/tensor.hpp"

// Tensor container format used for the adversarial corpus and checkpoints:
//   magic "ADVT", version 0x01, dtype 0x00 (f32), ndim byte,
//   ndim little-endian u32 extents, row-major little-endian f32 data.
// Round-trips are bit-exact.

namespace advlab {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace detail {
constexpr char kAdvtMagic[4] = {'A', 'D', 'V', 'T'};
constexpr uint8_t kAdvtVersion = 0x01;
constexpr uint8_t kDtypeF32 = 0x00;
constexpr char kCheckpointMagic[4] = {'A', 'D', 'V', 'C'};
constexpr uint8_t kCheckpointVersion = 0x01;

inline void append(std::vector<uint8_t>& buf, const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
}
}  // namespace detail

inline std::vector<uint8_t> advt_encode(const Tensor<float>& t) {
    if (t.ndim() > 255) throw IoError("advt: too many dimensions");
    std::vector<uint8_t> buf;
    buf.reserve(7 + static_cast<size_t>(t.ndim()) * 4 + static_cast<size_t>(t.numel()) * 4);
    detail::append(buf, detail::kAdvtMagic, 4);
    buf.push_back(detail::kAdvtVersion);
    buf.push_back(detail::kDtypeF32);
    buf.push_back(static_cast<uint8_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) {
        const uint32_t e = static_cast<uint32_t>(t.dim(d));
        detail::append(buf, &e, 4);
    }
    detail::append(buf, t.data(), static_cast<size_t>(t.numel()) * 4);
    return buf;
}

inline Tensor<float> advt_decode(const uint8_t* p, size_t n, const std::string& what) {
    auto fail = [&](const std::string& why) -> IoError {
        return IoError(detail::cat("advt decode (", what, "): ", why));
    };
    if (n < 7 || std::memcmp(p, detail::kAdvtMagic, 4) != 0) throw fail("bad magic");
    if (p[4] != detail::kAdvtVersion) throw fail("unsupported version");
    if (p[5] != detail::kDtypeF32) throw fail("unsupported dtype");
    const int nd = p[6];
    size_t off = 7;
    if (n < off + static_cast<size_t>(nd) * 4) throw fail("truncated header");
    std::vector<int> shape(static_cast<size_t>(nd));
    int64_t count = 1;
    for (int d = 0; d < nd; ++d) {
        uint32_t e;
        std::memcpy(&e, p + off, 4);
        off += 4;
        if (e == 0 || e > (1u << 27)) throw fail("bad extent");
        shape[static_cast<size_t>(d)] = static_cast<int>(e);
        count *= e;
    }
    if (n != off + static_cast<size_t>(count) * 4) throw fail("size mismatch");
    std::vector<float> data(static_cast<size_t>(count));
    std::memcpy(data.data(), p + off, static_cast<size_t>(count) * 4);
    return Tensor<float>(std::move(shape), std::move(data));
}

inline Tensor<float> advt_decode(const std::vector<uint8_t>& buf, const std::string& what) {
    return advt_decode(buf.data(), buf.size(), what);
}

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(detail::cat("cannot open ", path.string()));
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(size));
    if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), size))
        throw IoError(detail::cat("short read of ", path.string()));
    return buf;
}

// Atomic write: stage to a temp name in the same directory, then rename.
inline void write_file_bytes(const std::filesystem::path& path, const uint8_t* p, size_t n) {
    std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(detail::cat("cannot create ", tmp.string()));
        if (n > 0) out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out) throw IoError(detail::cat("short write to ", tmp.string()));
    }
    std::filesystem::rename(tmp, path);
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& buf) {
    write_file_bytes(path, buf.data(), buf.size());
}

inline void write_advt_file(const std::filesystem::path& path, const Tensor<float>& t) {
    write_file_bytes(path, advt_encode(t));
}

inline Tensor<float> read_advt_file(const std::filesystem::path& path) {
    return advt_decode(read_file_bytes(path), path.string());
}

inline std::string sha256_hex(const uint8_t* p, size_t n) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(p, n, digest, &len, EVP_sha256(), nullptr))
        throw Error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_hex(const std::vector<uint8_t>& buf) {
    return sha256_hex(buf.data(), buf.size());
}

inline std::string sha256_file(const std::filesystem::path& path) {
    return sha256_hex(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// checkpoints: JSON header (config echo, parameter manifest, scalar state)
// followed by one ADVT blob per named tensor.
// ---------------------------------------------------------------------------

struct CheckpointPayload {
    nlohmann::json header;  // must contain "params": [names...]
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header,
                            const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
    nlohmann::json hdr = header;
    auto names = nlohmann::json::array();
    for (const auto& [name, _] : tensors) names.push_back(name);
    hdr["params"] = std::move(names);
    const std::string js = hdr.dump();

    std::vector<uint8_t> buf;
    detail::append(buf, detail::kCheckpointMagic, 4);
    buf.push_back(detail::kCheckpointVersion);
    const uint32_t jlen = static_cast<uint32_t>(js.size());
    detail::append(buf, &jlen, 4);
    detail::append(buf, js.data(), js.size());
    for (const auto& [_, t] : tensors) {
        auto blob = advt_encode(*t);
        detail::append(buf, blob.data(), blob.size());
    }
    write_file_bytes(path, buf);
}

inline CheckpointPayload load_checkpoint(const std::filesystem::path& path) {
    auto fail = [&](const std::string& why) -> DataError {
        return DataError(detail::cat("checkpoint ", path.string(), ": ", why));
    };
    std::vector<uint8_t> buf;
    try {
        buf = read_file_bytes(path);
    } catch (const IoError& e) {
        throw DataError(e.what());
    }
    if (buf.size() < 9 || std::memcmp(buf.data(), detail::kCheckpointMagic, 4) != 0)
        throw fail("bad magic");
    if (buf[4] != detail::kCheckpointVersion) throw fail("unsupported version");
    uint32_t jlen;
    std::memcpy(&jlen, buf.data() + 5, 4);
    size_t off = 9;
    if (buf.size() < off + jlen) throw fail("truncated header");
    CheckpointPayload out;
    try {
        out.header = nlohmann::json::parse(buf.begin() + static_cast<long>(off),
                                           buf.begin() + static_cast<long>(off + jlen));
    } catch (const nlohmann::json::exception& e) {
        throw fail(detail::cat("bad header json: ", e.what()));
    }
    off += jlen;
    if (!out.header.contains("params") || !out.header["params"].is_array())
        throw fail("missing parameter manifest");
    for (const auto& name : out.header["params"]) {
        // each blob is self-delimiting: parse the header to find its length
        if (buf.size() < off + 7) throw fail("truncated tensor stream");
        const int nd = buf[off + 6];
        size_t hdr = 7 + static_cast<size_t>(nd) * 4;
        if (buf.size() < off + hdr) throw fail("truncated tensor header");
        int64_t count = 1;
        for (int d = 0; d < nd; ++d) {
            uint32_t e;
            std::memcpy(&e, buf.data() + off + 7 + static_cast<size_t>(d) * 4, 4);
            count *= e;
        }
        const size_t total = hdr + static_cast<size_t>(count) * 4;
        if (buf.size() < off + total) throw fail("truncated tensor data");
        Tensor<float> t;
        try {
            t = advt_decode(buf.data() + off, total, name.get<std::string>());
        } catch (const IoError& e) {
            throw fail(e.what());
        }
        out.tensors.emplace_back(name.get<std::string>(), std::move(t));
        off += total;
    }
    if (off != buf.size()) throw fail("trailing bytes");
    return out;
}

}  // namespace advlab
