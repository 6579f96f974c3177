#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/io.hpp"

namespace repinv {

struct PnmImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::int64_t channels = 1;  // 1 = PGM (P5), 3 = PPM (P6)
    std::vector<std::uint8_t> bytes;
};

inline void write_pnm(const std::string& path, const PnmImage& img) {
    require_usage(img.channels == 1 || img.channels == 3, "pnm supports 1 or 3 channels");
    require_usage(static_cast<std::int64_t>(img.bytes.size()) ==
                      img.width * img.height * img.channels,
                  "pnm byte count does not match dimensions");
    std::string out = img.channels == 1 ? "P5\n" : "P6\n";
    out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.bytes.data()), img.bytes.size());
    atomic_write_file(path, out);
}

inline PnmImage read_pnm(const std::string& path) {
    const std::string bytes = read_file(path);
    require_data(bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'),
                 cat("'", path, "' is not a binary PGM/PPM file"));
    PnmImage img;
    img.channels = bytes[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    auto next_int = [&]() -> std::int64_t {
        while (pos < bytes.size() &&
               (bytes[pos] == ' ' || bytes[pos] == '\n' || bytes[pos] == '\t' ||
                bytes[pos] == '\r' || bytes[pos] == '#')) {
            if (bytes[pos] == '#')
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            else
                ++pos;
        }
        std::int64_t v = 0;
        bool any = false;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
            any = true;
        }
        require_data(any, cat("'", path, "': malformed PNM header"));
        return v;
    };
    img.width = next_int();
    img.height = next_int();
    const std::int64_t maxval = next_int();
    require_data(maxval == 255, cat("'", path, "': unsupported maxval ", maxval));
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(img.width * img.height * img.channels);
    require_data(bytes.size() - pos == need, cat("'", path, "': expected ", need,
                                                 " payload bytes, got ", bytes.size() - pos));
    img.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

}  // namespace repinv
