#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mfg::detail {

// Particle loops are split into fixed-size chunks whose boundaries never
// depend on the worker count. Workers write into per-chunk slots and callers
// fold the slots in chunk order, so results are bit-identical for any number
// of threads.
inline constexpr std::size_t kChunk = 8192;

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

template <class Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
    const std::size_t nc = chunk_count(n);
    if (threads <= 1 || nc <= 1) {
        for (std::size_t c = 0; c < nc; ++c) fn(c, c * kChunk, std::min(n, (c + 1) * kChunk));
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= nc) return;
            fn(c, c * kChunk, std::min(n, (c + 1) * kChunk));
        }
    };
    const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(threads), nc);
    std::vector<std::thread> pool;
    pool.reserve(nw);
    for (std::size_t w = 0; w < nw; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

}  // namespace mfg::detail
