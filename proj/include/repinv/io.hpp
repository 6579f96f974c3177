#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "repinv/common.hpp"

namespace repinv {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require_data(in.good(), cat("cannot open '", path, "'"));
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require_data(!in.bad(), cat("read failed for '", path, "'"));
    return bytes;
}

// Write via temp file + rename so partially written artifacts never appear
// under their final name.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require_data(out.good(), cat("cannot open '", tmp.string(), "' for writing"));
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require_data(out.good(), cat("write failed for '", tmp.string(), "'"));
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    require_data(!ec, cat("rename to '", path, "' failed: ", ec.message()));
}

inline void append_u32_be(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

inline std::uint32_t read_u32_be(const std::string& bytes, std::size_t offset) {
    require_data(offset + 4 <= bytes.size(), "unexpected end of file in 32-bit field");
    const auto b = [&](std::size_t i) {
        return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i]));
    };
    return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const std::string& bytes, std::size_t offset) {
    require_data(offset + 8 <= bytes.size(), "unexpected end of file in 64-bit field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

inline void append_f64_le(std::string& out, double d) {
    std::uint64_t v;
    static_assert(sizeof(v) == sizeof(d));
    __builtin_memcpy(&v, &d, 8);
    append_u64_le(out, v);
}

inline double read_f64_le(const std::string& bytes, std::size_t offset) {
    const std::uint64_t v = read_u64_le(bytes, offset);
    double d;
    __builtin_memcpy(&d, &v, 8);
    return d;
}

}  // namespace repinv
