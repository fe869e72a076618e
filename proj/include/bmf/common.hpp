#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmf {

using Rng = std::mt19937_64;

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

template <typename... Args>
void check(bool cond, const Args&... args) {
    if (!cond) fail(str(args...));
}

// Extra numeric validation (kl normalization, finiteness sweeps). On by default;
// hot loops may switch it off.
inline bool& strict_checks() {
    static bool on = true;
    return on;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a key path,
// e.g. mix_seed(seed, {subject, odor, parallel, 2}).
inline uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> keys) {
    uint64_t h = splitmix64(seed ^ 0x51a2b3c4d5e6f708ULL);
    for (uint64_t k : keys) h = splitmix64(h ^ k);
    return h;
}

inline Rng make_rng(uint64_t seed, std::initializer_list<uint64_t> keys = {}) {
    return Rng(mix_seed(seed, keys));
}

}  // namespace bmf
