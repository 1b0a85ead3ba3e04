#include "smoelab/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "smoelab/errors.hpp"

namespace smoelab {

std::uint64_t Rng::below(std::uint64_t n)
{
    if (n == 0)
        throw ContractError("Rng::below requires n > 0");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit)
        x = engine_();
    return x % n;
}

double Rng::normal()
{
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0)
        u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const
{
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& text)
{
    std::istringstream is(text);
    is >> engine_;
    if (is.fail())
        throw DataError("malformed RNG state");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag)
{
    // splitmix64 finalizer over the combined words
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace smoelab
