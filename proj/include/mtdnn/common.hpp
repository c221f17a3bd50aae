// Shared error types and check helpers for the mtdnn toolkit.
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtdnn {

// Error taxonomy. The CLI maps these onto process exit codes, so every
// throw site should pick the category the user can act on.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Violated API precondition (caller bug, not bad user input).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define MTDNN_THROW(EXC, MSG)                                                  \
    do {                                                                       \
        std::ostringstream oss_throw_;                                         \
        oss_throw_ << MSG; /* NOLINT */                                        \
        throw EXC(oss_throw_.str());                                           \
    } while (0)

#define MTDNN_CHECK(COND, EXC, MSG)                                            \
    do {                                                                       \
        if (!(COND)) MTDNN_THROW(EXC, MSG);                                    \
    } while (0)

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) oss << "x";
        oss << s[i];
    }
    oss << "]";
    return oss.str();
}

// FNV-1a, used for content hashes and named RNG stream derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace mtdnn
