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

#include "cilkit/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "cilkit/error.hpp"

namespace cilkit::ops {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

using detail::make_result;

std::size_t row_count(const Tensor& a) { return a.cols() == 0 ? 0 : a.numel() / a.cols(); }

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

template <class F, class G>
Tensor unary(const Tensor& a, F forward, G derivative) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
    return make_result(a.shape(), std::move(out), {a},
                       [a, derivative](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           const auto x = a.data();
                           auto& ga = *gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(x[i]);
                       });
}

void accumulate(std::vector<double>* dst, std::span<const double> src, double factor = 1.0) {
    if (dst == nullptr) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += factor * src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    std::vector<double> out(m * n);
    Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b},
                       [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           MapC G(g.data(), m, n);
                           if (gin[0]) Map(gin[0]->data(), m, k).noalias() += G * MapC(b.data().data(), k, n).transpose();
                           if (gin[1]) Map(gin[1]->data(), k, n).noalias() += MapC(a.data().data(), m, k).transpose() * G;
                       });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k) {
        throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
    return make_result({m, n}, std::move(out), {a, b},
                       [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           MapC G(g.data(), m, n);
                           if (gin[0]) Map(gin[0]->data(), m, k).noalias() += G * MapC(b.data().data(), n, k);
                           if (gin[1]) Map(gin[1]->data(), n, k).noalias() += G.transpose() * MapC(a.data().data(), m, k);
                       });
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    Map(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
    return make_result({n, m}, std::move(out), {a},
                       [m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           Map(gin[0]->data(), m, n) += MapC(g.data(), n, m).transpose();
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                             shape_string(shape));
    }
    return make_result(std::move(shape), a.values(), {a},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                           accumulate(gin[1], g);
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                           accumulate(gin[1], g, -1.0);
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           const auto x = a.data();
                           const auto y = b.data();
                           if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y[i];
                           if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * x[i];
                       });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= factor;
    return make_result(a.shape(), std::move(out), {a},
                       [factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g, factor);
                       });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.values());
    for (double& v : out) v += value;
    return make_result(a.shape(), std::move(out), {a},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                       });
}

Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x) {
            const double u = c * (x + k * x * x * x);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * k * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor add_row(const Tensor& a, const Tensor& v) {
    const std::size_t n = a.cols();
    if (v.numel() != n) {
        throw DimensionError("add_row: row vector " + shape_string(v.shape()) +
                             " does not match trailing dim of " + shape_string(a.shape()));
    }
    std::vector<double> out(a.values());
    const auto row = v.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += row[i % n];
    return make_result(a.shape(), std::move(out), {a, v},
                       [n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                           if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i];
                       });
}

Tensor mul_row(const Tensor& a, const Tensor& v) {
    const std::size_t n = a.cols();
    if (v.numel() != n) {
        throw DimensionError("mul_row: row vector " + shape_string(v.shape()) +
                             " does not match trailing dim of " + shape_string(a.shape()));
    }
    std::vector<double> out(a.values());
    const auto row = v.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= row[i % n];
    return make_result(a.shape(), std::move(out), {a, v},
                       [a, v, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           const auto x = a.data();
                           const auto row = v.data();
                           if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * row[i % n];
                           if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % n] += g[i] * x[i];
                       });
}

Tensor add_tiled(const Tensor& a, const Tensor& block) {
    const std::size_t bn = block.numel();
    if (block.cols() != a.cols() || bn == 0 || a.numel() % bn != 0) {
        throw DimensionError("add_tiled: block " + shape_string(block.shape()) + " does not tile " +
                             shape_string(a.shape()));
    }
    std::vector<double> out(a.values());
    const auto blk = block.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += blk[i % bn];
    return make_result(a.shape(), std::move(out), {a, block},
                       [bn](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                           if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % bn] += g[i];
                       });
}

Tensor layer_norm(const Tensor& a, double eps) {
    const std::size_t n = a.cols(), m = row_count(a);
    std::vector<double> out(a.numel());
    std::vector<double> inv_std(m);
    const auto x = a.data();
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = x.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (xr[j] - mu) * inv_std[r];
    }
    std::vector<double> normalized = out;
    return make_result(a.shape(), std::move(out), {a},
                       [n, m, normalized = std::move(normalized), inv_std = std::move(inv_std)](
                           std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t r = 0; r < m; ++r) {
                               const double* y = normalized.data() + r * n;
                               const double* gr = g.data() + r * n;
                               double mean_g = 0.0, mean_gy = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   mean_g += gr[j];
                                   mean_gy += gr[j] * y[j];
                               }
                               mean_g /= static_cast<double>(n);
                               mean_gy /= static_cast<double>(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                   ga[r * n + j] += inv_std[r] * (gr[j] - mean_g - y[j] * mean_gy);
                               }
                           }
                       });
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
    const std::size_t n = a.cols(), m = row_count(a);
    std::vector<double> out(a.numel());
    std::vector<double> norms(m);
    const auto x = a.data();
    for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[r * n + j] * x[r * n + j];
        norms[r] = std::max(std::sqrt(s), eps);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / norms[r];
    }
    std::vector<double> unit = out;
    return make_result(a.shape(), std::move(out), {a},
                       [n, m, unit = std::move(unit), norms = std::move(norms)](
                           std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t r = 0; r < m; ++r) {
                               const double* y = unit.data() + r * n;
                               const double* gr = g.data() + r * n;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
                               for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += (gr[j] - y[j] * dot) / norms[r];
                           }
                       });
}

Tensor softmax_rows(const Tensor& a) {
    const std::size_t n = a.cols(), m = row_count(a);
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (out[r * n + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
    }
    std::vector<double> probs = out;
    return make_result(a.shape(), std::move(out), {a},
                       [n, m, probs = std::move(probs)](std::span<const double> g,
                                                        std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t r = 0; r < m; ++r) {
                               const double* p = probs.data() + r * n;
                               const double* gr = g.data() + r * n;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += gr[j] * p[j];
                               for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += p[j] * (gr[j] - dot);
                           }
                       });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({1}, {s}, {a},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           for (double& v : *gin[0]) v += g[0];
                       });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean of empty tensor");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({1}, {s * inv}, {a},
                       [inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           for (double& v : *gin[0]) v += g[0] * inv;
                       });
}

Tensor mean_rows(const Tensor& a) {
    const std::size_t n = a.cols(), m = row_count(a);
    if (m == 0) throw DimensionError("mean_rows of empty tensor");
    std::vector<double> out(n, 0.0);
    const auto x = a.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[r * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (double& v : out) v *= inv;
    return make_result({n}, std::move(out), {a},
                       [n, m, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j] * inv;
                       });
}

Tensor mean_squared_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mean_squared_distance");
    const std::size_t rows = row_count(a);
    if (rows == 0) throw DimensionError("mean_squared_distance of empty tensors");
    return scale(sum(square(sub(a, b))), 1.0 / static_cast<double>(rows));
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<Tensor> inputs;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw DimensionError("concat_rows: trailing dims differ, " +
                                 shape_string(parts.front().shape()) + " vs " + shape_string(p.shape()));
        }
        offsets.push_back(m * n);
        m += row_count(p);
        inputs.push_back(p);
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result({m, n}, std::move(out), std::move(inputs),
                       [offsets](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           for (std::size_t i = 0; i < gin.size(); ++i) {
                               if (!gin[i]) continue;
                               auto& dst = *gin[i];
                               for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[offsets[i] + j];
                           }
                       });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    const std::size_t n = a.cols(), m = row_count(a);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * n);
    const auto x = a.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m) {
            throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                                 shape_string(a.shape()));
        }
        std::copy_n(x.data() + idx[i] * n, n, out.data() + i * n);
    }
    const std::size_t k = idx.size();
    return make_result({k, n}, std::move(out), {a},
                       [n, idx = std::move(idx)](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += g[i * n + j];
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_matrix(logits, "cross_entropy");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (targets.size() != m) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(m) + " rows");
    }
    std::vector<double> probs(m * n);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    const auto x = logits.data();
    double loss = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        if (tgt[r] >= n) throw ContractError("cross_entropy: target index out of range");
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (probs[r * n + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= z;
        loss += std::log(z) + mx - xr[tgt[r]];
    }
    const double inv = 1.0 / static_cast<double>(m);
    return make_result({1}, {loss * inv}, {logits},
                       [n, m, inv, probs = std::move(probs), tgt = std::move(tgt)](
                           std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           const double s = g[0] * inv;
                           for (std::size_t r = 0; r < m; ++r) {
                               for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += s * probs[r * n + j];
                               ga[r * n + tgt[r]] -= s;
                           }
                       });
}

Tensor offset_targets(const Tensor& logits, std::span<const std::size_t> targets, double value) {
    require_matrix(logits, "offset_targets");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (targets.size() != m) throw DimensionError("offset_targets: target count mismatch");
    std::vector<double> out(logits.values());
    for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] >= n) throw ContractError("offset_targets: target index out of range");
        out[r * n + targets[r]] += value;
    }
    return make_result(logits.shape(), std::move(out), {logits},
                       [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                           accumulate(gin[0], g);
                       });
}

Tensor append_tokens(const Tensor& x, std::size_t seq_len, const Tensor& prompts) {
    const std::size_t d = x.cols();
    const std::size_t rows = row_count(x);
    if (seq_len == 0 || rows % seq_len != 0) {
        throw DimensionError("append_tokens: " + std::to_string(rows) + " rows not divisible by seq_len " +
                             std::to_string(seq_len));
    }
    const std::size_t n = row_count(prompts);
    if (n > 0 && prompts.cols() != d) {
        throw DimensionError("append_tokens: prompt width " + shape_string(prompts.shape()) +
                             " vs tokens " + shape_string(x.shape()));
    }
    const std::size_t batch = rows / seq_len, out_len = seq_len + n;
    std::vector<double> out(batch * out_len * d);
    const auto xs = x.data();
    const auto ps = prompts.data();
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(xs.data() + b * seq_len * d, seq_len * d, out.data() + b * out_len * d);
        std::copy_n(ps.data(), n * d, out.data() + (b * out_len + seq_len) * d);
    }
    return make_result({batch * out_len, d}, std::move(out), {x, prompts},
                       [batch, seq_len, out_len, n, d](std::span<const double> g,
                                                      std::span<std::vector<double>* const> gin) {
                           for (std::size_t b = 0; b < batch; ++b) {
                               const double* gb = g.data() + b * out_len * d;
                               if (gin[0])
                                   for (std::size_t j = 0; j < seq_len * d; ++j) (*gin[0])[b * seq_len * d + j] += gb[j];
                               if (gin[1])
                                   for (std::size_t j = 0; j < n * d; ++j) (*gin[1])[j] += gb[seq_len * d + j];
                           }
                       });
}

Tensor keep_tokens(const Tensor& x, std::size_t seq_len, std::size_t count) {
    const std::size_t d = x.cols(), rows = row_count(x);
    if (seq_len == 0 || rows % seq_len != 0 || count > seq_len) {
        throw DimensionError("keep_tokens: invalid seq_len/count for " + shape_string(x.shape()));
    }
    const std::size_t batch = rows / seq_len;
    std::vector<double> out(batch * count * d);
    const auto xs = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(xs.data() + b * seq_len * d, count * d, out.data() + b * count * d);
    return make_result({batch * count, d}, std::move(out), {x},
                       [batch, seq_len, count, d](std::span<const double> g,
                                                  std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t j = 0; j < count * d; ++j) ga[b * seq_len * d + j] += g[b * count * d + j];
                       });
}

Tensor pool_tokens(const Tensor& x, std::size_t seq_len, std::size_t count) {
    const std::size_t d = x.cols(), rows = row_count(x);
    if (seq_len == 0 || rows % seq_len != 0 || count == 0 || count > seq_len) {
        throw DimensionError("pool_tokens: invalid seq_len/count for " + shape_string(x.shape()));
    }
    const std::size_t batch = rows / seq_len;
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<double> out(batch * d, 0.0);
    const auto xs = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < count; ++t)
            for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xs[(b * seq_len + t) * d + j];
    for (double& v : out) v *= inv;
    return make_result({batch, d}, std::move(out), {x},
                       [batch, seq_len, count, d, inv](std::span<const double> g,
                                                       std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t t = 0; t < count; ++t)
                                   for (std::size_t j = 0; j < d; ++j) ga[(b * seq_len + t) * d + j] += g[b * d + j] * inv;
                       });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads) {
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t d = q.cols(), rows = row_count(q);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    if (seq_len == 0 || rows % seq_len != 0) {
        throw DimensionError("attention: rows not divisible by seq_len");
    }
    const std::size_t batch = rows / seq_len, dh = d / heads, S = seq_len;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto Q = q.data(), K = k.data(), V = v.data();

    // probs laid out [batch][head][i][j]
    std::vector<double> probs(batch * heads * S * S);
    std::vector<double> out(rows * d, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs.data() + ((b * heads + h) * S) * S;
            for (std::size_t i = 0; i < S; ++i) {
                const double* qi = Q.data() + (b * S + i) * d + h * dh;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < S; ++j) {
                    const double* kj = K.data() + (b * S + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    P[i * S + j] = s * inv_sqrt;
                    mx = std::max(mx, P[i * S + j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < S; ++j) z += (P[i * S + j] = std::exp(P[i * S + j] - mx));
                double* oi = out.data() + (b * S + i) * d + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                    P[i * S + j] /= z;
                    const double* vj = V.data() + (b * S + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += P[i * S + j] * vj[c];
                }
            }
        }
    }
    return make_result(
        q.shape(), std::move(out), {q, k, v},
        [q, k, v, batch, heads, S, d, dh, inv_sqrt, probs = std::move(probs)](
            std::span<const double> g, std::span<std::vector<double>* const> gin) {
            const auto Q = q.data(), K = k.data(), V = v.data();
            std::vector<double> dP(S), dS(S);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* P = probs.data() + ((b * heads + h) * S) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        const double* gi = g.data() + (b * S + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < S; ++j) {
                            const double* vj = V.data() + (b * S + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                            dP[j] = s;
                            dot += P[i * S + j] * s;
                            if (gin[2]) {
                                double* gv = gin[2]->data() + (b * S + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gv[c] += P[i * S + j] * gi[c];
                            }
                        }
                        for (std::size_t j = 0; j < S; ++j) dS[j] = P[i * S + j] * (dP[j] - dot) * inv_sqrt;
                        const double* qi = Q.data() + (b * S + i) * d + h * dh;
                        for (std::size_t j = 0; j < S; ++j) {
                            const double* kj = K.data() + (b * S + j) * d + h * dh;
                            if (gin[0]) {
                                double* gq = gin[0]->data() + (b * S + i) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gq[c] += dS[j] * kj[c];
                            }
                            if (gin[1]) {
                                double* gk = gin[1]->data() + (b * S + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gk[c] += dS[j] * qi[c];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace cilkit::ops
