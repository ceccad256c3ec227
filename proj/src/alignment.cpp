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

#include "cilkit/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cilkit/error.hpp"
#include "cilkit/ops.hpp"
#include "cilkit/optim.hpp"

namespace cilkit {

namespace {

Tensor gather(const Matrix& m, std::span<const std::size_t> idx) {
    std::vector<double> x;
    x.reserve(idx.size() * m.cols());
    for (std::size_t i : idx) {
        const auto r = m.row(i);
        x.insert(x.end(), r.begin(), r.end());
    }
    return Tensor::matrix(idx.size(), m.cols(), std::move(x));
}

Tensor unified_logits(const ClassifierHead& head, const Tensor& x, const AlignmentConfig& cfg) {
    if (head.kind() == HeadKind::cosine && cfg.normalize) return head.logits(x, head.labels(), cfg.logit_scale);
    // Raw dot products: the linear head always, the cosine head when asked.
    std::vector<Tensor> parts;
    for (int label : head.labels()) parts.push_back(ops::reshape(head.row(label), {1, head.dim()}));
    return ops::matmul_nt(x, ops::concat_rows(parts));
}

std::vector<std::size_t> targets_of(const ClassifierHead& head, const LabeledSet& samples,
                                    std::span<const std::size_t> idx) {
    std::vector<std::size_t> y;
    y.reserve(idx.size());
    for (std::size_t i : idx) y.push_back(head.row_of(samples.labels[i]));
    return y;
}

}  // namespace

void AlignmentConfig::validate() const {
    if (samples_per_class < 1) throw ContractError("alignment: samples_per_class must be >= 1");
    if (!(lr > 0.0)) throw ContractError("alignment: lr must be > 0");
    if (batch_size < 1) throw ContractError("alignment: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("alignment: momentum must lie in [0, 1)");
    if (!(jitter > 0.0)) throw ContractError("alignment: jitter must be > 0");
    if (!(logit_scale > 0.0)) throw ContractError("alignment: logit_scale must be > 0");
    if (!(feature_power > 0.0)) throw ContractError("alignment: feature_power must be > 0");
}

LabeledSet sample_class_features(const PrototypeStore& store, const AlignmentConfig& cfg, Rng& rng) {
    cfg.validate();
    LabeledSet out;
    out.features = Matrix(0, store.dim());
    for (const auto& [label, stats] : store.classes()) {
        CholeskyResult factor;
        try {
            factor = cholesky(stats.covariance, cfg.jitter);
        } catch (const NumericalError& e) {
            throw NumericalError("alignment: covariance of class " + std::to_string(label) + ": " + e.what());
        }
        const Matrix draws = sample_gaussian(rng, stats.prototype, factor.lower, cfg.samples_per_class);
        for (std::size_t i = 0; i < draws.rows(); ++i) out.append(draws.row(i), label);
    }
    if (cfg.feature_power != 1.0) {
        for (auto& v : out.features.data()) v = std::copysign(std::pow(std::abs(v), cfg.feature_power), v);
    }
    return out;
}

double unified_loss(const ClassifierHead& head, const LabeledSet& samples, const AlignmentConfig& cfg) {
    NoGradGuard no_grad;
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < samples.size(); start += 1024) {
        idx.resize(std::min<std::size_t>(1024, samples.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor loss =
            ops::cross_entropy(unified_logits(head, gather(samples.features, idx), cfg), targets_of(head, samples, idx));
        total += loss.item() * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(samples.size());
}

AlignmentResult retrain_unified_classifier(ClassifierHead& head, const PrototypeStore& store,
                                           const AlignmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (store.dim() != head.dim()) throw DimensionError("alignment: store dim differs from head dim");
    for (int label : head.labels()) {
        if (!store.contains(label)) {
            throw ContractError("alignment: store has no statistics for class " + std::to_string(label));
        }
    }
    AlignmentResult result;
    if (cfg.epochs == 0 || head.size() == 0) return result;

    PrototypeStore covered(store.dim(), store.covariance_kind());
    for (int label : head.labels()) covered.insert(label, store.at(label));
    const LabeledSet samples = sample_class_features(covered, cfg, rng);

    Sgd opt(head.rows(), cfg.momentum);
    const std::size_t n = samples.size(), bs = cfg.batch_size;
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;
    CosineAnnealing lr(cfg.lr, cfg.epochs * steps_per_epoch);
    std::vector<std::size_t> order(n);
    std::size_t step = 0;
    result.sampled_loss.push_back(unified_loss(head, samples, cfg));
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
            Tape tape;
            const Tensor loss =
                ops::cross_entropy(unified_logits(head, gather(samples.features, idx), cfg), targets_of(head, samples, idx));
            total += loss.item();
            opt.step(backward(tape, loss), lr.at(step++));
        }
        result.epoch_loss.push_back(total / static_cast<double>(steps_per_epoch));
        result.sampled_loss.push_back(unified_loss(head, samples, cfg));
    }
    return result;
}

AlignmentResult classifier_align_baseline(ClassifierHead& head, const PrototypeStore& store_without_shift,
                                          const AlignmentConfig& cfg, Rng& rng) {
    return retrain_unified_classifier(head, store_without_shift, cfg, rng);
}

}  // namespace cilkit
