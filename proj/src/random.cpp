#include "stfusion/random.hpp"

namespace stf {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t task_id) {
    // splitmix64 finalizer over the pair
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (task_id + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t task_id) : engine_(mix_seed(seed, task_id)) {}

double Rng::uniform_open() {
    // 53 random bits centred in their bucket: never exactly 0 or 1.
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
}

std::uint64_t Rng::below(std::uint64_t bound) {
    std::uniform_int_distribution<std::uint64_t> dist(0, bound - 1);
    return dist(engine_);
}

}  // namespace stf
