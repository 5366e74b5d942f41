#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace smf {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor of doubles. All reductions accumulate in 64-bit.
struct Tensor {
    std::vector<long> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<long> s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}
    Tensor(std::vector<long> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<long>(data.size()))
            throw Error("tensor: shape " + shape_str() + " does not match data length " + std::to_string(data.size()));
    }

    static long numel_of(const std::vector<long>& s) {
        long n = 1;
        for (long d : s) {
            if (d < 0) throw Error("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<long> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<long> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    long numel() const { return static_cast<long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    long dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    // Leading dimension (rows for masking); scalars count as one row.
    long rows() const { return shape.empty() ? 1 : shape[0]; }
    long row_width() const { return rows() == 0 ? 0 : numel() / rows(); }
    long last_dim() const { return shape.empty() ? 1 : shape.back(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// Deterministic RNG. mt19937_64 gives bit-exact streams everywhere; the
// gaussian uses an explicit Box-Muller so no libstdc++ distribution details
// leak into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    long randint(long n) {  // [0, n)
        if (n <= 0) throw Error("randint: n must be positive");
        return static_cast<long>(gen_() % static_cast<uint64_t>(n));
    }

    void fill_normal(Tensor& t, double mean, double std) {
        for (double& v : t.data) v = mean + std * normal();
    }
    void fill_uniform(Tensor& t, double lo, double hi) {
        for (double& v : t.data) v = uniform(lo, hi);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {  // Fisher-Yates, stdlib-independent
        for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
            long j = randint(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    std::mt19937_64 gen_;
};

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t seed, const std::string& tag) {
    uint64_t z = seed ^ fnv1a(tag);
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Indices of the k largest values, sorted by descending value; ties broken by
// lower index. Values must not be NaN.
std::vector<long> topk_indices(const double* v, long n, long k);

inline std::vector<long> topk_indices(const std::vector<double>& v, long k) {
    return topk_indices(v.data(), static_cast<long>(v.size()), k);
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace smf
