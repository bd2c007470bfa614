#include "rf/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace rf {

double Rng::normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> Rng::normals(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal();
    return out;
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = engine_();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw std::runtime_error("Rng::set_state: malformed state string");
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace rf
