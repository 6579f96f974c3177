#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/graph.hpp"
#include "repinv/io.hpp"
#include "repinv/tensor.hpp"

namespace repinv {

// Versioned binary container shared by all model kinds:
//   magic "REPINVCKPT", u32 version, length-prefixed UTF-8 key=value
//   descriptor block, then length-prefixed little-endian f64 parameter
//   blobs in declaration order.
inline constexpr char kCheckpointMagic[] = "REPINVCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::map<std::string, std::string> descriptor;
    std::vector<std::vector<double>> blobs;

    const std::string& field(const std::string& key) const {
        auto it = descriptor.find(key);
        require_data(it != descriptor.end(), cat("checkpoint descriptor missing '", key, "'"));
        return it->second;
    }

    std::int64_t field_i64(const std::string& key) const {
        try {
            return std::stoll(field(key));
        } catch (const std::exception&) {
            throw DataError(cat("checkpoint field '", key, "' is not an integer"));
        }
    }

    double field_f64(const std::string& key) const {
        try {
            return std::stod(field(key));
        } catch (const std::exception&) {
            throw DataError(cat("checkpoint field '", key, "' is not a number"));
        }
    }

    void expect(const std::string& key, const std::string& value) const {
        require_data(field(key) == value, cat("checkpoint descriptor mismatch: ", key, "='",
                                              field(key), "', expected '", value, "'"));
    }
};

inline void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32_le(const std::string& bytes, std::size_t offset) {
    require_data(offset + 4 <= bytes.size(), "checkpoint truncated in 32-bit field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

inline void save_checkpoint_file(const std::string& path,
                                 const std::map<std::string, std::string>& descriptor,
                                 std::span<const Tensor> params) {
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    append_u32_le(out, kCheckpointVersion);
    std::string desc;
    for (const auto& [k, v] : descriptor) {
        require_data(k.find('=') == std::string::npos && k.find('\n') == std::string::npos,
                     cat("descriptor key '", k, "' contains reserved characters"));
        require_data(v.find('\n') == std::string::npos,
                     cat("descriptor value for '", k, "' contains a newline"));
        desc += k;
        desc += '=';
        desc += v;
        desc += '\n';
    }
    append_u32_le(out, static_cast<std::uint32_t>(desc.size()));
    out += desc;
    append_u32_le(out, static_cast<std::uint32_t>(params.size()));
    for (const Tensor& p : params) {
        append_u64_le(out, static_cast<std::uint64_t>(p.count()));
        for (double v : p.values) append_f64_le(out, v);
    }
    atomic_write_file(path, out);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    const std::string bytes = read_file(path);
    const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
    require_data(bytes.size() >= magic_len && bytes.compare(0, magic_len, kCheckpointMagic) == 0,
                 cat("'", path, "' is not a checkpoint file (bad magic)"));
    std::size_t off = magic_len;
    const std::uint32_t version = read_u32_le(bytes, off);
    off += 4;
    require_data(version == kCheckpointVersion,
                 cat("'", path, "': checkpoint format version ", version, ", expected ",
                     kCheckpointVersion));
    const std::uint32_t desc_len = read_u32_le(bytes, off);
    off += 4;
    require_data(off + desc_len <= bytes.size(), cat("'", path, "': truncated descriptor"));
    Checkpoint ckpt;
    std::size_t line_start = off;
    const std::size_t desc_end = off + desc_len;
    while (line_start < desc_end) {
        std::size_t nl = bytes.find('\n', line_start);
        require_data(nl != std::string::npos && nl < desc_end,
                     cat("'", path, "': malformed descriptor block"));
        const std::string line = bytes.substr(line_start, nl - line_start);
        const std::size_t eq = line.find('=');
        require_data(eq != std::string::npos, cat("'", path, "': descriptor line without '='"));
        ckpt.descriptor[line.substr(0, eq)] = line.substr(eq + 1);
        line_start = nl + 1;
    }
    off = desc_end;
    const std::uint32_t n_params = read_u32_le(bytes, off);
    off += 4;
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::uint64_t n = read_u64_le(bytes, off);
        off += 8;
        require_data(off + n * 8 <= bytes.size(),
                     cat("'", path, "': truncated parameter blob ", i, " (need ", n * 8,
                         " bytes, have ", bytes.size() - off, ")"));
        std::vector<double> blob(static_cast<std::size_t>(n));
        for (std::uint64_t j = 0; j < n; ++j) blob[j] = read_f64_le(bytes, off + j * 8);
        off += n * 8;
        ckpt.blobs.push_back(std::move(blob));
    }
    require_data(off == bytes.size(), cat("'", path, "': ", bytes.size() - off,
                                          " trailing bytes after parameter blobs"));
    return ckpt;
}

// Fills params (shapes fixed by the rebuilt graph) from checkpoint blobs.
inline std::vector<Tensor> params_from_blobs(const std::vector<ParamSlot>& slots,
                                             const Checkpoint& ckpt, const std::string& origin) {
    require_data(ckpt.blobs.size() == slots.size(),
                 cat("'", origin, "': checkpoint holds ", ckpt.blobs.size(),
                     " parameter blobs, architecture needs ", slots.size()));
    std::vector<Tensor> params;
    params.reserve(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        require_data(static_cast<std::int64_t>(ckpt.blobs[i].size()) == shape_count(slots[i].shape),
                     cat("'", origin, "': blob ", i, " holds ", ckpt.blobs[i].size(),
                         " values, parameter '", slots[i].name, "' needs ",
                         shape_count(slots[i].shape)));
        params.emplace_back(slots[i].shape, ckpt.blobs[i]);
    }
    return params;
}

}  // namespace repinv
