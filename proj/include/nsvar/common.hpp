#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nsvar {

// Library-wide error type. Messages name the failing operation or node.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// FNV-1a, used for config/artifact hashing in manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 14695981039346656037ull) {
    return fnv1a64(s.data(), s.size(), h);
}

}  // namespace nsvar
