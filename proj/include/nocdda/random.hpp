#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "nocdda/tensor.hpp"

namespace nocdda {

using Rng = std::mt19937_64;

/// Independent child seed for a named sub-stream of `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (std::uint64_t(words[0]) << 32) | words[1];
}

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return n(rng);
}

inline Tensor standard_normal(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : t.values()) v = n(rng);
    return t;
}

inline std::size_t uniform_index(std::size_t n, Rng& rng) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(rng);
}

/// Random permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

}  // namespace nocdda
