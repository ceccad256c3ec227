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

// A small pre-norm transformer encoder over token chunks of the input vector,
// with exactly one parameter-efficient tuning attachment.
//
// Block structure (one SSF site after every norm/linear producing width d):
//
//   a  = LN(h)                         site ln1
//   q  = a Wq + bq, k = ..., v = ...   sites q, k, v
//   h  = h + (MHA(q, k, v) Wo + bo)    site attn_proj
//   m  = LN(h)                         site ln2
//   u  = GELU(m W1 + b1) W2 + b2       site mlp_out
//   h  = h + u                         (no adapter)
//   h  = adapter(h) + u                (parallel adapter)
//   h  = adapter(h + u)                (sequential adapter)
//
// Features are the final LayerNorm output mean-pooled over the input tokens
// (prompt tokens are excluded from pooling). Prompts are appended after the
// input tokens: x' = [x, P].

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cilkit/container.hpp"
#include "cilkit/data.hpp"
#include "cilkit/numerics.hpp"
#include "cilkit/tensor.hpp"

namespace cilkit {

struct BackboneConfig {
    std::size_t input_dim = 64;
    std::size_t token_count = 4;
    std::size_t embed_dim = 32;
    std::size_t depth = 2;
    std::size_t mlp_hidden = 64;
    std::size_t heads = 4;

    std::size_t chunk_dim() const { return input_dim / token_count; }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct BlockWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1, fc1_b, fc2, fc2_b;
};

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

/// Backbone weights. Every tensor is flagged non-trainable except inside a
/// FullFineTune attachment or during pretrain().
struct FrozenWeights {
    BackboneConfig config;
    Tensor embed_w, embed_b, pos;
    std::vector<BlockWeights> blocks;
    Tensor final_gamma, final_beta;

    /// Documented initialization: linear weights N(0, 1/fan_in), biases 0,
    /// LayerNorm gains 1 and offsets 0, positional table N(0, 1) so token
    /// position survives mean pooling.
    static FrozenWeights initialize(const BackboneConfig& config, Rng& rng);

    /// Stable, ordered list of every tensor with its serialization name.
    std::vector<NamedParameter> named() const;
    std::size_t parameter_count() const;
    /// Deep copy with every tensor's requires_grad set to `trainable`.
    FrozenWeights clone(bool trainable) const;
    void set_trainable(bool trainable);
    bool bit_equal(const FrozenWeights& other) const;

    Container to_container() const;
    static FrozenWeights from_container(const Container& container);
};

enum class AdapterPlacement { parallel, sequential };

struct AdapterParams {
    std::vector<Tensor> w_down;  // per block, d x bottleneck
    std::vector<Tensor> w_up;    // per block, bottleneck x d
    std::vector<Tensor> b_down;  // empty unless biases are enabled
    std::vector<Tensor> b_up;
    double scale = 1.0;
    AdapterPlacement placement = AdapterPlacement::parallel;

    /// W_down ~ N(0, init_std^2), W_up = 0, biases 0.
    static AdapterParams create(const BackboneConfig& config, std::size_t bottleneck, double scale,
                                AdapterPlacement placement, bool bias, Rng& rng, double init_std = 1e-2);
    std::size_t bottleneck() const { return w_down.empty() ? 0 : w_down.front().cols(); }
};

enum class SsfSite : std::size_t { ln1 = 0, q, k, v, attn_proj, ln2, mlp_out };
inline constexpr std::size_t kSsfSitesPerBlock = 7;
const char* ssf_site_name(SsfSite site);

struct SSFParams {
    std::vector<Tensor> gamma;  // depth * kSsfSitesPerBlock entries, each [d]
    std::vector<Tensor> beta;

    /// gamma = 1, beta = 0 everywhere.
    static SSFParams identity(const BackboneConfig& config);
    const Tensor& gamma_at(std::size_t block, SsfSite site) const {
        return gamma[block * kSsfSitesPerBlock + static_cast<std::size_t>(site)];
    }
    const Tensor& beta_at(std::size_t block, SsfSite site) const {
        return beta[block * kSsfSitesPerBlock + static_cast<std::size_t>(site)];
    }
};

enum class PromptMode { shallow, deep };

struct PromptParams {
    std::vector<Tensor> prompts;  // shallow: 1 entry, deep: one per block; each [n x d]
    std::size_t count = 0;
    PromptMode mode = PromptMode::shallow;

    /// Prompt entries ~ N(0, init_std^2).
    static PromptParams create(const BackboneConfig& config, std::size_t count, PromptMode mode, Rng& rng,
                               double init_std = 0.02);
};

struct NoPet {};

struct FullFineTune {
    FrozenWeights weights;  // trainable copy of the backbone
};

using PetAttachment = std::variant<NoPet, AdapterParams, SSFParams, PromptParams, FullFineTune>;

std::string pet_kind_name(const PetAttachment& pet);
std::vector<NamedParameter> trainable_parameters(const PetAttachment& pet);
std::size_t trainable_parameter_count(const PetAttachment& pet);
/// Deep copy; the copy shares no storage with `pet`.
PetAttachment clone_pet(const PetAttachment& pet);

struct Model {
    FrozenWeights frozen;
    PetAttachment pet;

    /// Copy whose PET tensors are independent of this model's. The frozen
    /// weights are shared (they never change).
    Model snapshot() const;
};

/// out = x + s * relu(x W_down [+ b_down]) W_up [+ b_up]
Tensor adapter_apply(const Tensor& x, const Tensor& w_down, const Tensor& w_up, double scale,
                     const Tensor* b_down = nullptr, const Tensor* b_up = nullptr);
Tensor adapter_apply(const Tensor& x, const AdapterParams& params, std::size_t block);
/// y = gamma (.) x + beta, broadcast over rows.
Tensor ssf_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta);
/// Single sequence [t x d] -> [(t + n) x d], prompts after the input tokens.
Tensor vpt_prepend(const Tensor& x, const Tensor& prompts);

/// Optional instrumentation: the token matrix entering each block.
struct ForwardTrace {
    std::vector<Tensor> block_inputs;
    std::size_t sequence_length = 0;
};

/// batch: [B x input_dim] -> features [B x d].
Tensor forward(const FrozenWeights& frozen, const PetAttachment& pet, const Tensor& batch,
               ForwardTrace* trace = nullptr);
Tensor forward(const Model& model, const Tensor& batch);
/// Untaped feature extraction in chunks of `chunk` rows.
Matrix extract_features(const Model& model, const Matrix& inputs, std::size_t chunk = 256);

struct PretrainSchedule {
    std::size_t epochs = 30;
    double lr = 0.05;
    std::size_t batch_size = 32;
    double momentum = 0.9;
};

struct PretrainResult {
    FrozenWeights weights;
    double train_accuracy = 0.0;
};

/// Trains the whole backbone with a temporary linear head on `base_data`,
/// discards the head and returns frozen weights.
PretrainResult pretrain(const BackboneConfig& config, const LabeledSet& base_data, const PretrainSchedule& schedule,
                        Rng& rng);

}  // namespace cilkit
