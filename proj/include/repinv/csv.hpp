#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/io.hpp"

namespace repinv {

// Shortest decimal form that round-trips the exact double.
inline std::string fmt_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back;
    std::sscanf(buf, "%lf", &back);
    if (back == v) {
        for (int prec = 1; prec <= 16; ++prec) {
            char shorter[40];
            std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
            std::sscanf(shorter, "%lf", &back);
            if (back == v) return shorter;
        }
    }
    return buf;
}

struct CsvTable {
    std::vector<std::string> comments;  // emitted as leading '# ' lines
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline std::string encode_csv(const CsvTable& table) {
    std::string out;
    for (const std::string& c : table.comments) out += "# " + c + "\n";
    for (std::size_t i = 0; i < table.header.size(); ++i) {
        if (i) out += ",";
        out += table.header[i];
    }
    out += "\n";
    for (const auto& row : table.rows) {
        require_usage(row.size() == table.header.size(),
                      cat("csv row has ", row.size(), " cells, header has ", table.header.size()));
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ",";
            out += row[i];
        }
        out += "\n";
    }
    return out;
}

inline void write_csv(const std::string& path, const CsvTable& table) {
    atomic_write_file(path, encode_csv(table));
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

inline CsvTable parse_csv(const std::string& bytes, const std::string& origin) {
    CsvTable table;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos < bytes.size()) {
        std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) nl = bytes.size();
        const std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        if (line[0] == '#') {
            table.comments.push_back(line.size() > 2 ? line.substr(2) : "");
            continue;
        }
        if (!header_seen) {
            table.header = split_fields(line);
            header_seen = true;
            continue;
        }
        auto fields = split_fields(line);
        require_data(fields.size() == table.header.size(),
                     cat("'", origin, "': row with ", fields.size(), " cells, header has ",
                         table.header.size()));
        table.rows.push_back(std::move(fields));
    }
    require_data(header_seen, cat("'", origin, "': csv has no header row"));
    return table;
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path), path); }

}  // namespace repinv
