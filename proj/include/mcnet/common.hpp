#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mcnet {

// Bad command line or config input. Maps to exit code 1 in the CLI.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or malformed external data: files, manifests, checkpoints,
// or tensors whose shapes do not line up. Exit code 2.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN or infinity produced during computation. Exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic random source. std::uniform_real_distribution and
// std::normal_distribution are implementation-defined, so the
// transformations are done by hand to keep streams stable across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. The sine branch is discarded so the
    // stream consumes exactly two uniforms per call.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Integer in [0, n).
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(gen_() % static_cast<std::uint64_t>(n));
    }

private:
    std::mt19937_64 gen_;
};

constexpr double kPi = 3.14159265358979323846;

}  // namespace mcnet
