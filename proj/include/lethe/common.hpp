#pragma once

// Shared plumbing: error types, FNV-1a hashing, shortest round-trip float
// formatting, and the LETHE_THREADS environment lookup.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lethe {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension violations (e.g. matmul inner-dimension mismatch).
class ShapeError : public Error {
public:
    using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed file contents (checkpoint, CSV, JSON).
class FormatError : public Error {
public:
    using Error::Error;
};

// Bad corpus input line.
class IngestError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = kFnvOffset) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= kFnvPrime;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// Shortest decimal that round-trips the exact value.
template <class S>
std::string format_float(S value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

template <class S>
S parse_float(std::string_view text) {
    S out{};
    auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw FormatError("not a number: '" + std::string(text) + "'");
    }
    return out;
}

inline long parse_int(std::string_view text) {
    long out{};
    auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw FormatError("not an integer: '" + std::string(text) + "'");
    }
    return out;
}

// LETHE_THREADS, default 1. Kernels are bitwise deterministic for any value.
inline int thread_count() {
    static const int n = [] {
        const char* env = std::getenv("LETHE_THREADS");
        if (env == nullptr) return 1;
        int v = std::atoi(env);
        return v >= 1 ? v : 1;
    }();
    return n;
}

} // namespace lethe
