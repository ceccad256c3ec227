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

// Per-session optimization: the growing classifier head, the local
// cosine-margin loss, the optional feature-distillation constraint, and the
// diagnostics built on top (parameter sensitivity, linear probing).

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cilkit/backbone.hpp"
#include "cilkit/data.hpp"
#include "cilkit/numerics.hpp"
#include "cilkit/tensor.hpp"

namespace cilkit {

enum class HeadKind { cosine, linear };

/// One weight row per class seen so far, in arrival order.
class ClassifierHead {
public:
    ClassifierHead() = default;
    ClassifierHead(HeadKind kind, std::size_t dim) : kind_(kind), dim_(dim) {}

    HeadKind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return rows_.size(); }
    const std::vector<int>& labels() const { return labels_; }

    /// Appends rows ~ N(0, init_std^2) for every label not yet present.
    void add_classes(std::span<const int> labels, std::size_t session, Rng& rng, double init_std = 0.01);
    bool has(int label) const;
    std::size_t row_of(int label) const;
    std::size_t origin_session(int label) const { return origin_[row_of(label)]; }
    const Tensor& row(int label) const { return rows_[row_of(label)]; }
    const std::vector<Tensor>& rows() const { return rows_; }

    /// Logits of `features` [B x d] against the given labels' rows, [B x k].
    /// Cosine: scale * cos(f, w); linear: f . w (scale ignored).
    Tensor logits(const Tensor& features, std::span<const int> labels, double scale) const;
    /// Argmax label per feature row over every class in the head.
    std::vector<int> predict(const Matrix& features) const;

    /// Deep copy; no storage shared with this head.
    ClassifierHead clone() const;
    /// Copies the rows of `labels` from `source` (adding them if absent).
    void copy_rows_from(const ClassifierHead& source, std::span<const int> labels);
    bool rows_bit_equal(const ClassifierHead& other, std::span<const int> labels) const;

private:
    HeadKind kind_ = HeadKind::cosine;
    std::size_t dim_ = 0;
    std::vector<int> labels_;
    std::vector<Tensor> rows_;  // each [d], requires_grad
    std::vector<std::size_t> origin_;
};

struct LossConfig {
    double scale = 20.0;     // s
    double margin = 0.1;     // m
    double kd_weight = 0.0;  // lambda; 0 = unconstrained

    void validate() const;
};

struct Schedule {
    double lr0 = 0.01;
    std::size_t epochs_first = 20;
    std::size_t epochs_later = 10;
    std::size_t batch_size = 32;
    double momentum = 0.9;

    std::size_t epochs_for(std::size_t session_index) const {
        return session_index <= 1 ? epochs_first : epochs_later;
    }
    void validate() const;
};

/// Local cosine-margin loss over the current session's classes only:
///   L = -(1/N) sum_j log( e^{s(cos_ij - m)} / (e^{s(cos_ij - m)} + sum_{c != i} e^{s cos_cj}) )
/// where c ranges over `session_classes`. Rows of other classes never enter
/// the graph and therefore receive exactly zero gradient. With a linear head
/// the logits are plain dot products and s, m are not applied.
Tensor cosine_margin_loss(const Tensor& features, std::span<const int> labels, const ClassifierHead& head,
                          std::span<const int> session_classes, const LossConfig& cfg);

/// (1/B) sum_i ||f_new_i - f_old_i||^2.
Tensor kd_feature_loss(const Tensor& features_new, const Tensor& features_old);

struct SessionTrainResult {
    std::vector<double> epoch_loss;  // mean batch loss per epoch
};

struct SessionTrainOptions {
    std::size_t session_index = 1;
    std::size_t epochs = 0;
    bool train_pet = true;
    /// Frozen snapshot used by the distillation term when kd_weight > 0.
    const Model* teacher = nullptr;
};

/// Optimizes the PET parameters (if options.train_pet) and the head rows of
/// the session's classes. Nothing else is written.
SessionTrainResult train_session(Model& model, ClassifierHead& head, const Session& session, const LossConfig& cfg,
                                 const Schedule& schedule, const SessionTrainOptions& options, Rng& rng);

struct SensitivityReport {
    std::vector<std::string> groups;
    std::vector<double> values;   // s_i = -eps * sum(g^2) per group, all <= 0
    std::vector<std::size_t> ranking;  // group indices, most sensitive (most negative) first
    std::vector<double> entries;  // -eps * g^2 per trainable entry, concatenated in group order

    std::string most_sensitive() const { return ranking.empty() ? std::string() : groups[ranking.front()]; }
};

/// One-step-update sensitivity of the current PET parameters under the local
/// loss on the full training set of `session`.
SensitivityReport parameter_sensitivity(const Model& model, const ClassifierHead& head, const Session& session,
                                        const LossConfig& cfg, double epsilon);

/// Trains a fresh linear softmax head on `train` features of a frozen model
/// and returns top-1 accuracy on `test`.
double linear_probe(const Model& model, const LabeledSet& train, const LabeledSet& test, const Schedule& schedule,
                    Rng& rng);
/// Same, on precomputed features.
double linear_probe_features(const LabeledSet& train_features, const LabeledSet& test_features,
                             const Schedule& schedule, Rng& rng);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

}  // namespace cilkit
