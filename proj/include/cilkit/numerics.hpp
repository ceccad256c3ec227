/*
 * Copyright 2026 The cilkit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Plain (non-differentiable) value types, the portable RNG, and the small
// amount of dense linear algebra the statistics code needs.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cilkit/tensor.hpp"

namespace cilkit {

using Vector = std::vector<double>;

/// Row-major dense matrix with value semantics.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_tensor(const Tensor& t);
    Tensor to_tensor(bool requires_grad = false) const;

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    /// Appends a row; the first row fixes the column count of an empty matrix.
    void append_row(std::span<const double> values);

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// xoshiro256** 1.0 (Blackman & Vigna) seeded by expanding a 64-bit seed with
/// splitmix64. Uniform doubles take the top 53 bits; standard normals come
/// from the Box-Muller transform, consuming two uniforms per pair and
/// returning the cosine branch first, then the cached sine branch.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64();
    /// Uniform on [0, 1).
    double uniform();
    /// Uniform integer on [0, n); n > 0.
    std::uint64_t below(std::uint64_t n);
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle driven by below().
    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Derives an independent stream seed from a parent seed and a purpose path,
/// e.g. derive_seed(seed, "session", 3).
std::uint64_t derive_seed(std::uint64_t parent, std::string_view purpose, std::uint64_t index = 0);

/// a.b / (|a||b|). Throws DegenerateInputError on a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);

struct CholeskyResult {
    Matrix lower;
    double jitter_applied = 0.0;
};

/// Multiplicative jitter escalation: 0, then jitter, 10*jitter, ... while the
/// added amount stays <= kJitterCapFactor * max(jitter, 1e-12) * max(1, max|diag|).
inline constexpr double kJitterCapFactor = 1e6;

/// Lower-triangular L with L*L^T = sigma + jitter_applied*I. Tries the
/// unjittered matrix first. A pivot <= 1e-14 * max(1, max|diag|) counts as a
/// failure. Throws NumericalError with the smallest eigenvalue of `sigma` if
/// the cap is reached.
CholeskyResult cholesky(const Matrix& sigma, double jitter);

/// `count` rows drawn i.i.d. from N(mean, L*L^T): row = mean + L*z, z standard
/// normal drawn in row-major order from `rng`.
Matrix sample_gaussian(Rng& rng, std::span<const double> mean, const Matrix& lower,
                       std::size_t count);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Matrix& symmetric);

}  // namespace cilkit
