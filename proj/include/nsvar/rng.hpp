#pragma once

#include <cmath>
#include <cstdint>

namespace nsvar {

// splitmix64. Self-contained so streams are reproducible across platforms and
// standard-library versions (std distributions make no such guarantee).
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1) with 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // Box-Muller; one draw per call, spare cached
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Derive an independent stream; tag keeps sub-streams of one seed apart.
    static uint64_t mix(uint64_t seed, uint64_t tag) {
        Rng r(seed ^ (0x632be59bd9b4e019ull * (tag + 1)));
        return r.next_u64();
    }

  private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace nsvar
