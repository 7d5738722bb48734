// Shaped row-major tensors and the counter-based random stream used everywhere.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdmj {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + std::to_string(d));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Value-semantic n-d array. `node` links the tensor to the tape that produced
// it (-1 = constant, not part of any recorded graph).
template <class S>
struct Tensor {
    Shape shape;
    std::vector<S> data;
    int node = -1;

    Tensor() = default;
    explicit Tensor(Shape sh) : shape(std::move(sh)), data(numel(shape), S(0)) {}
    Tensor(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

    std::size_t size() const { return data.size(); }

    S item() const {
        if (data.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (!same_shape(a.shape, b.shape))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
}

// Counter-based random stream: draw i is a pure function of (seed, counter+i),
// so disjoint substreams never need coordination.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit RngStream(std::uint64_t s = 0, std::uint64_t c = 0) : seed(s), counter(c) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    std::uint64_t next_u64() {
        std::uint64_t v = mix(mix(seed) + counter);
        ++counter;
        return v;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) {
        if (!(lo < hi)) throw std::invalid_argument("next_uniform: lo must be < hi");
        return lo + (hi - lo) * next_unit();
    }

    // Box-Muller; consumes exactly two counter slots per draw.
    double next_gauss() {
        double u1 = next_unit();
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    RngStream substream(std::uint64_t idx) const { return RngStream(mix(seed ^ mix(idx + 1)), 0); }
};

template <class S>
Tensor<S> gauss_draw(RngStream& rng, Shape shape) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.next_gauss());
    return t;
}

template <class S>
Tensor<S> unif_draw(RngStream& rng, Shape shape, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("unif_draw: lo must be < hi");
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.next_uniform(lo, hi));
    return t;
}

}  // namespace cdmj
