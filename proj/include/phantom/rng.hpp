#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "phantom/errors.hpp"

namespace phantom {

/// Seedable generator with platform-independent uniform/normal transforms.
///
/// The engine is std::mt19937_64 (its sequence is fixed by the standard); the
/// std distributions are not, so the transforms are written out here. The
/// normal transform keeps no cached second variate, which makes the full
/// generator state equal to the engine state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Generator for item `index` of a stream rooted at `seed`.
    static Rng derive(std::uint64_t seed, std::uint64_t index)
    {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
        Rng rng;
        rng.engine_.seed(seq);
        return rng;
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1).
    double uniform_open()
    {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer on [0, n).
    std::uint64_t below(std::uint64_t n)
    {
        if (n == 0) throw ContractError("Rng::below(0)");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (cosine branch).
    double normal()
    {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::string state() const
    {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& text)
    {
        std::istringstream is(text);
        std::mt19937_64 engine;
        is >> engine;
        if (is.fail()) throw CorruptionError("malformed RNG state");
        engine_ = engine;
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace phantom
