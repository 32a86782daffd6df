#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace a2i {

// Thrown for violated call contracts (bad shapes, out-of-range arguments).
struct argument_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Thrown for inconsistent model/checkpoint configuration.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw argument_error(msg);
}

// Deterministic RNG. mt19937_64 has a standardized output sequence; the
// distributions below are hand-rolled so that (seed -> bytes) is identical
// across platforms and standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : s_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // modulo bias is negligible for n << 2^64 but reject to be exact
        uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= lim);
        return x % n;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // child stream for a subtask; decorrelated from the parent
    Rng fork(uint64_t stream) {
        Rng r(next_u64() ^ (0xd1342543de82ef95ULL * (stream + 1)));
        return r;
    }

private:
    uint64_t s_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
T clamp(T v, T lo, T hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

inline int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

}  // namespace a2i
