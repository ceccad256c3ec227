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

#include "cilkit/numerics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cilkit/error.hpp"

namespace cilkit {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw DimensionError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_tensor(const Tensor& t) {
    if (t.rank() == 1) return Matrix(1, t.numel(), t.values());
    if (t.rank() != 2) throw DimensionError("Matrix::from_tensor needs rank <= 2, got " + shape_string(t.shape()));
    return Matrix(t.shape()[0], t.shape()[1], t.values());
}

Tensor Matrix::to_tensor(bool requires_grad) const {
    return Tensor::matrix(rows_, cols_, data_, requires_grad);
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && data_.empty()) cols_ = values.size();
    if (values.size() != cols_) {
        throw DimensionError("append_row: width " + std::to_string(values.size()) + " vs " +
                             std::to_string(cols_));
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    const auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view purpose, std::uint64_t index) {
    // FNV-1a over the purpose tag, mixed with parent and index through splitmix64.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : purpose) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t state = parent ^ h;
    std::uint64_t a = splitmix64(state);
    state = a ^ (index * 0xd1b54a32d192ed03ULL);
    return splitmix64(state);
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("squared_distance: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double d = dot(a, b);
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine_similarity of a zero vector");
    return std::clamp(d / (na * nb), -1.0, 1.0);
}

double min_eigenvalue(const Matrix& symmetric) {
    const std::size_t n = symmetric.rows();
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = symmetric(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
}

namespace {

bool try_cholesky(const Matrix& sigma, double jitter, double pivot_floor, Matrix& lower) {
    const std::size_t n = sigma.rows();
    lower = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = sigma(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) diag -= lower(j, k) * lower(j, k);
        if (!(diag > pivot_floor) || !std::isfinite(diag)) return false;
        const double ljj = std::sqrt(diag);
        lower(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = sigma(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= lower(i, k) * lower(j, k);
            lower(i, j) = s / ljj;
        }
    }
    return true;
}

}  // namespace

CholeskyResult cholesky(const Matrix& sigma, double jitter) {
    const std::size_t n = sigma.rows();
    if (sigma.cols() != n) {
        throw DimensionError("cholesky: matrix is " + std::to_string(n) + "x" + std::to_string(sigma.cols()));
    }
    if (jitter < 0.0) throw ContractError("cholesky: jitter must be >= 0");
    double scale = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(sigma(i, j))) throw DegenerateInputError("cholesky: non-finite entry");
            if (std::abs(sigma(i, j) - sigma(j, i)) > 1e-9 * (1.0 + std::abs(sigma(i, j)))) {
                throw ContractError("cholesky: matrix is not symmetric");
            }
        }
        scale = std::max(scale, std::abs(sigma(i, i)));
    }
    const double pivot_floor = 1e-14 * scale;
    const double cap = kJitterCapFactor * std::max(jitter, 1e-12) * scale;

    CholeskyResult result;
    if (try_cholesky(sigma, 0.0, pivot_floor, result.lower)) return result;
    if (jitter > 0.0) {
        for (double j = jitter; j <= cap; j *= 10.0) {
            if (try_cholesky(sigma, j, pivot_floor, result.lower)) {
                result.jitter_applied = j;
                return result;
            }
        }
    }
    std::ostringstream msg;
    msg << "cholesky failed at jitter cap " << cap << "; smallest eigenvalue estimate "
        << min_eigenvalue(sigma);
    throw NumericalError(msg.str());
}

Matrix sample_gaussian(Rng& rng, std::span<const double> mean, const Matrix& lower,
                       std::size_t count) {
    const std::size_t d = mean.size();
    if (lower.rows() != d || lower.cols() != d) {
        throw DimensionError("sample_gaussian: factor is " + std::to_string(lower.rows()) + "x" +
                             std::to_string(lower.cols()) + " for mean of length " + std::to_string(d));
    }
    for (double v : mean)
        if (!std::isfinite(v)) throw DegenerateInputError("sample_gaussian: non-finite mean");
    for (double v : lower.data())
        if (!std::isfinite(v)) throw DegenerateInputError("sample_gaussian: non-finite covariance factor");

    Matrix out(count, d);
    std::vector<double> z(d);
    for (std::size_t r = 0; r < count; ++r) {
        for (auto& v : z) v = rng.normal();
        auto row = out.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            double s = mean[i];
            for (std::size_t k = 0; k <= i; ++k) s += lower(i, k) * z[k];
            row[i] = s;
        }
    }
    return out;
}

}  // namespace cilkit
