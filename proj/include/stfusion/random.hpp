#pragma once

#include <cstdint>
#include <random>

namespace stf {

// Seeded 64-bit generator. Child streams are derived from (base_seed, task_id)
// so that concurrent tasks never share a stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t task_id = 0);

    std::uint64_t next_u64() { return engine_(); }
    // Uniform on the open interval (0, 1).
    double uniform_open();
    double normal(double mean = 0.0, double stddev = 1.0);
    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t task_id);

}  // namespace stf
