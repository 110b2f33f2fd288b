#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aimv2/hashing.hpp"
#include "aimv2/tensor.hpp"

namespace aimv2 {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Little-endian binary container:
//   magic "AIMV2CKP" | u32 schema | u32 config_hash | u64 step | u32 count
//   per array: u32 name_len | name | u8 dtype (0 = f64) | u8 rank |
//              u64 dims[rank] | raw data
//   trailing u32 CRC32 over everything before it
struct CheckpointData {
    uint32_t schema_version = 1;
    uint32_t config_hash = 0;
    uint64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : arrays) {
            if (n == name) {
                return &t;
            }
        }
        return nullptr;
    }
};

namespace detail {

constexpr char ckpt_magic[8] = {'A', 'I', 'M', 'V', '2', 'C', 'K', 'P'};
constexpr uint32_t ckpt_schema = 1;

inline void append_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void append_value(std::string& buf, T v) {
    append_bytes(buf, &v, sizeof(T));
}

struct ByteReader {
    const char* p;
    size_t remaining;

    void read(void* out, size_t n) {
        if (n > remaining) {
            throw CheckpointError("checkpoint truncated");
        }
        std::memcpy(out, p, n);
        p += n;
        remaining -= n;
    }

    template <typename T>
    T value() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
};

} // namespace detail

inline void save_checkpoint(const CheckpointData& data, const std::string& path) {
    std::string buf;
    detail::append_bytes(buf, detail::ckpt_magic, sizeof(detail::ckpt_magic));
    detail::append_value<uint32_t>(buf, data.schema_version);
    detail::append_value<uint32_t>(buf, data.config_hash);
    detail::append_value<uint64_t>(buf, data.step);
    detail::append_value<uint32_t>(buf, static_cast<uint32_t>(data.arrays.size()));
    for (const auto& [name, tensor] : data.arrays) {
        detail::append_value<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        detail::append_bytes(buf, name.data(), name.size());
        detail::append_value<uint8_t>(buf, 0); // dtype f64
        detail::append_value<uint8_t>(buf, static_cast<uint8_t>(tensor.rank()));
        for (int64_t i = 0; i < tensor.rank(); ++i) {
            detail::append_value<uint64_t>(buf, static_cast<uint64_t>(tensor.dim(i)));
        }
        detail::append_bytes(buf, tensor.data(),
                             static_cast<size_t>(tensor.numel()) * sizeof(real));
    }
    const uint32_t crc = crc32(buf.data(), buf.size());
    detail::append_value<uint32_t>(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError("cannot write checkpoint '" + path + "'");
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) {
        throw CheckpointError("short write on checkpoint '" + path + "'");
    }
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint '" + path + "'");
    }
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(detail::ckpt_magic) + 16) {
        throw CheckpointError("checkpoint too small");
    }

    const uint32_t stored_crc_offset = static_cast<uint32_t>(buf.size() - 4);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + stored_crc_offset, 4);
    if (crc32(buf.data(), stored_crc_offset) != stored_crc) {
        throw CheckpointError("checkpoint checksum mismatch (corrupt file)");
    }

    detail::ByteReader r{buf.data(), stored_crc_offset};
    char magic[8];
    r.read(magic, 8);
    if (std::memcmp(magic, detail::ckpt_magic, 8) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    CheckpointData data;
    data.schema_version = r.value<uint32_t>();
    if (data.schema_version != detail::ckpt_schema) {
        throw CheckpointError("checkpoint schema version mismatch");
    }
    data.config_hash = r.value<uint32_t>();
    data.step = r.value<uint64_t>();
    const uint32_t count = r.value<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.value<uint32_t>();
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        const uint8_t dtype = r.value<uint8_t>();
        if (dtype != 0) {
            throw CheckpointError("unsupported dtype in checkpoint array " + name);
        }
        const uint8_t rank = r.value<uint8_t>();
        std::vector<int64_t> dims(rank);
        int64_t numel = 1;
        for (uint8_t k = 0; k < rank; ++k) {
            dims[k] = static_cast<int64_t>(r.value<uint64_t>());
            numel *= dims[k];
        }
        Tensor t(dims);
        r.read(t.data(), static_cast<size_t>(numel) * sizeof(real));
        data.arrays.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

} // namespace aimv2
