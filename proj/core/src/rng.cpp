#include "tryflow/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tryflow {

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix64(mix64(seed) ^ (stream + 0x632be59bd9b4e019ull));
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    // Box-Muller; u1 nudged away from 0 so log() stays finite.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

int Rng::uniform_int(int n) {
    if (n < 1) throw std::invalid_argument("Rng::uniform_int: n must be >= 1");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % un;
    uint64_t r;
    do {
        r = engine_();
    } while (r >= limit);
    return static_cast<int>(r % un);
}

bool Rng::bernoulli(double p) {
    return uniform() < p;
}

}  // namespace tryflow
