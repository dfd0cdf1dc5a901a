#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace nests6 {

// Deterministic, platform-independent RNG. All randomness in the project is
// drawn from one root seed through named streams so that adding a consumer
// does not perturb the draws of existing ones.
//
// Core generator is splitmix64; normal deviates use Box-Muller so results do
// not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {
        // burn a few draws so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    static uint64_t hash_name(std::string_view name) {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
        for (char c : name) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    // Named-stream splitter: stream(root, "noise") is independent of
    // stream(root, "init") for any practical purpose.
    static Rng stream(uint64_t root_seed, std::string_view name) {
        return Rng(root_seed * 0x2545f4914f6cdd1dULL + hash_name(name));
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; one value per call, cache the pair
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace nests6
