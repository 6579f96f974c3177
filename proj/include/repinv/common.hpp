#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace repinv {

// Error taxonomy, mirrored by the CLI exit codes:
//   UsageError -> 1, DataError -> 2, NumericError -> 3.
// GraphError covers shape/structure violations inside a computation graph
// and maps to a usage failure at the CLI boundary.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}

inline void require_usage(bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
}

inline void require_data(bool ok, const std::string& msg) {
    if (!ok) throw DataError(msg);
}

inline void require_graph(bool ok, const std::string& msg) {
    if (!ok) throw GraphError(msg);
}

}  // namespace repinv
