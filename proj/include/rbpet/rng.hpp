#pragma once

#include <cstdint>
#include <random>

namespace rbpet {

// splitmix64, used to derive independent sub-stream seeds from (seed, index)
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(seed, index));
}

}  // namespace rbpet
