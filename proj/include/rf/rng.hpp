#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace rf {

// Seedable generator whose full state round-trips through a string, so
// checkpoints can resume bit-exact. Normals use Box-Muller with no cached
// second value, keeping the state entirely inside the engine.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1).
    double uniform_open() {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    double normal();
    std::vector<double> normals(std::size_t n);

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);

    std::string state() const;
    void set_state(const std::string& s);

    // Independent stream derived from this generator's seed material.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

private:
    std::mt19937_64 engine_;
};

}  // namespace rf
