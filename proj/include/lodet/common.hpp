#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lodet {

// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch broadly or per condition.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct RankError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct IntegrityError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct CoverageError : Error {
    using Error::Error;
};
struct DependencyError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Deterministic RNG used everywhere seeds matter. mt19937_64 is fully
// specified by the standard; uniform/normal are derived here directly so a
// given seed produces the same stream on any build of this library.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(uniform() * (static_cast<double>(hi) - lo + 1.0));
    }

    // Box-Muller; one normal per pair of uniforms keeps the stream simple.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform() * static_cast<double>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

// Stable 64-bit mix for deriving per-(run, epoch, image, ...) seeds.
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
    return a;
}

// When enabled, every op validates its outputs for NaN/Inf. Loss and
// checkpoint boundaries are validated regardless.
void set_debug_checks(bool on);
bool debug_checks();

}  // namespace lodet
