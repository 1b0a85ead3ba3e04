#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace smoelab {

/// Seeded generator threaded explicitly through every stochastic operation.
///
/// Draws are derived from raw 64-bit engine output so that sequences do not
/// depend on the standard library's distribution implementations, and the
/// full state round-trips through text for checkpointing.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller; consumes two draws, keeps no spare.
    double normal();

    std::string state() const;
    void set_state(const std::string& text);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

/// Derives an independent seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace smoelab
