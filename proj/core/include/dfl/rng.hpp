#pragma once

#include <cstdint>
#include <string_view>

namespace dfl {

/// Deterministic SplitMix64 stream: state advances by the 64-bit golden-ratio
/// increment and each output is the SplitMix64 finalizer of the state. Equal
/// seeds give bit-identical streams on every platform. Child streams are
/// derived from the parent *seed* (not the evolving state), so splitting is
/// order-independent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // standard normal via Box-Muller, second draw cached
    Rng split(std::uint64_t index) const;
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t seed_combine(std::uint64_t seed, std::uint64_t key);
std::uint64_t seed_combine(std::uint64_t seed, std::string_view key);
std::uint64_t fnv1a64(const void* data, std::size_t n);

}  // namespace dfl
