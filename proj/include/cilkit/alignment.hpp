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

// Unified classifier retraining on features drawn from per-class Gaussians.
//
// Every class c in the store contributes S_n samples V_c ~ N(phi_c, Sigma_c);
// all head rows are then trained jointly with plain cross-entropy over every
// class seen so far. The backbone is never touched.

#pragma once

#include <cstddef>
#include <vector>

#include "cilkit/numerics.hpp"
#include "cilkit/prototypes.hpp"
#include "cilkit/training.hpp"

namespace cilkit {

struct AlignmentConfig {
    std::size_t samples_per_class = 256;  // S_n
    std::size_t epochs = 5;
    double lr = 0.01;  // cosine-annealed per step
    bool normalize = true;
    std::size_t batch_size = 64;
    double momentum = 0.9;
    double jitter = 1e-6;
    /// Logit scale for the normalized cosine head.
    double logit_scale = 20.0;
    /// Optional signed power transform sign(x)|x|^p of the sampled features;
    /// 1 keeps them raw.
    double feature_power = 1.0;

    void validate() const;
};

struct AlignmentResult {
    std::vector<double> epoch_loss;  // mean batch loss per epoch
    std::vector<double> sampled_loss;  // full sampled-set loss before training and after each epoch
};

/// S_n draws per class of `store`, rows grouped by class in label order.
LabeledSet sample_class_features(const PrototypeStore& store, const AlignmentConfig& cfg, Rng& rng);

/// Cross-entropy of `head` over every class on a sampled set (no margin).
double unified_loss(const ClassifierHead& head, const LabeledSet& samples, const AlignmentConfig& cfg);

/// Retrains every row of `head` on features sampled from the (shift
/// compensated) store. The store must cover every class of the head.
AlignmentResult retrain_unified_classifier(ClassifierHead& head, const PrototypeStore& store,
                                           const AlignmentConfig& cfg, Rng& rng);

/// Classifier alignment with stale prototypes: the same routine fed with a
/// store whose old prototypes were never shift-compensated.
AlignmentResult classifier_align_baseline(ClassifierHead& head, const PrototypeStore& store_without_shift,
                                          const AlignmentConfig& cfg, Rng& rng);

}  // namespace cilkit
