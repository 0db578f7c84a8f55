#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfg::detail {

// Counter-based generator built on splitmix64 finalization. Every draw is a
// pure function of (seed, stream kind, stream index, counter), so a stream
// never depends on how many other streams exist or on evaluation order.

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Stream kinds keep independent uses of one seed decorrelated.
enum class StreamKind : std::uint64_t {
    brownian = 0xB1,
    initial = 0x1A,
    direction = 0xD4,
    aux = 0xA7,
};

inline std::uint64_t stream_key(std::uint64_t seed, StreamKind kind, std::uint64_t idx) {
    std::uint64_t k = mix64(seed + kGolden * (static_cast<std::uint64_t>(kind) + 1));
    return mix64(k ^ (idx + 1) * kGolden);
}

inline std::uint64_t bits_at(std::uint64_t key, std::uint64_t counter) {
    return mix64(key + counter * kGolden);
}

// Uniform in (0, 1); never returns 0 so log() below is safe.
inline double u01(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

// Standard normal via the Box-Muller map, counter-addressable: draw j consumes
// uniforms 2j and 2j+1 of the stream.
inline double normal_at(std::uint64_t key, std::uint64_t j) {
    const double u1 = u01(bits_at(key, 2 * j));
    const double u2 = u01(bits_at(key, 2 * j + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace mfg::detail
