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

// Differentiable operations. "Row" ops treat a tensor as a matrix of
// numel/cols rows over its trailing dimension. Token ops view a [B*S x d]
// matrix as B sequences of S tokens.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cilkit/tensor.hpp"

namespace cilkit::ops {

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] * [n x k]^T
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Elementwise (identical shapes)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor square(const Tensor& a);

// Row broadcasting: v has `cols(a)` entries.
Tensor add_row(const Tensor& a, const Tensor& v);
Tensor mul_row(const Tensor& a, const Tensor& v);
/// Adds a [S x d] block to every group of S consecutive rows of `a`.
Tensor add_tiled(const Tensor& a, const Tensor& block);

// Row-wise normalizations
Tensor layer_norm(const Tensor& a, double eps = 1e-6);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor softmax_rows(const Tensor& a);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over axis 0 of a matrix: [m x n] -> [n].
Tensor mean_rows(const Tensor& a);
/// (1/B) * sum_i ||a_i - b_i||^2 over rows.
Tensor mean_squared_distance(const Tensor& a, const Tensor& b);

// Row assembly
Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

// Classification
/// Mean softmax cross-entropy of `logits` [B x C] against class indices.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
/// Adds `value` to logits[i, targets[i]] (additive margin).
Tensor offset_targets(const Tensor& logits, std::span<const std::size_t> targets, double value);

// Token sequences
/// Appends `prompts` [n x d] after the S tokens of every sequence.
Tensor append_tokens(const Tensor& x, std::size_t seq_len, const Tensor& prompts);
/// Keeps the first `count` tokens of every length-`seq_len` sequence.
Tensor keep_tokens(const Tensor& x, std::size_t seq_len, std::size_t count);
/// Mean of the first `count` tokens of every sequence: [B*S x d] -> [B x d].
Tensor pool_tokens(const Tensor& x, std::size_t seq_len, std::size_t count);
/// Multi-head scaled dot-product self-attention within each sequence.
/// q, k, v: [B*S x d]; returns the per-head weighted values, [B*S x d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads);

}  // namespace cilkit::ops
