#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>

namespace abctree {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Independent stream seed for (seed, stream); used to give each worker,
/// replication or sub-task its own reproducible generator.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t state = seed ^ (0x632be59bd9b4e019ULL * (stream + 1));
    splitmix64(state);
    return splitmix64(state);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    return Rng(derive_seed(seed, stream));
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Gamma(shape, 1) by Marsaglia-Tsang squeeze/rejection on ziggurat normals;
/// shapes below 1 use Gamma(shape + 1) * U^(1 / shape).
inline double sample_gamma(Rng& rng, double shape) {
    if (shape < 1.0) return sample_gamma(rng, shape + 1.0) * std::pow(uniform01(rng), 1.0 / shape);
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    boost::random::normal_distribution<double> normal;
    for (;;) {
        double x = 0.0;
        double v = 0.0;
        do {
            x = normal(rng);
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform01(rng);
        const double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
        if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
}

inline double sample_beta(Rng& rng, double alpha, double beta) {
    const double x = sample_gamma(rng, alpha);
    const double y = sample_gamma(rng, beta);
    return x / (x + y);
}

}  // namespace abctree
