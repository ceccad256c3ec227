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

#include "cilkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>

#include "cilkit/error.hpp"
#include "cilkit/ops.hpp"
#include "cilkit/optim.hpp"

namespace cilkit {

namespace {

Tensor rows_to_tensor(const Matrix& m, std::span<const std::size_t> idx) {
    std::vector<double> x;
    x.reserve(idx.size() * m.cols());
    for (std::size_t i : idx) {
        const auto r = m.row(i);
        x.insert(x.end(), r.begin(), r.end());
    }
    return Tensor::matrix(idx.size(), m.cols(), std::move(x));
}

}  // namespace

// ----------------------------------------------------------------------- head

void ClassifierHead::add_classes(std::span<const int> labels, std::size_t session, Rng& rng, double init_std) {
    for (int label : labels) {
        if (has(label)) continue;
        std::vector<double> w(dim_);
        for (auto& v : w) v = rng.normal() * init_std;
        labels_.push_back(label);
        rows_.push_back(Tensor::vector(std::move(w), true));
        origin_.push_back(session);
    }
}

bool ClassifierHead::has(int label) const {
    return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

std::size_t ClassifierHead::row_of(int label) const {
    const auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) throw ContractError("classifier head has no row for label " + std::to_string(label));
    return static_cast<std::size_t>(it - labels_.begin());
}

Tensor ClassifierHead::logits(const Tensor& features, std::span<const int> labels, double scale) const {
    if (features.cols() != dim_) {
        throw DimensionError("head logits: features " + shape_string(features.shape()) + " vs head dim " +
                             std::to_string(dim_));
    }
    std::vector<Tensor> parts;
    parts.reserve(labels.size());
    for (int label : labels) parts.push_back(ops::reshape(row(label), {1, dim_}));
    const Tensor w = ops::concat_rows(parts);
    if (kind_ == HeadKind::linear) return ops::matmul_nt(features, w);
    return ops::scale(ops::matmul_nt(ops::l2_normalize_rows(features), ops::l2_normalize_rows(w)), scale);
}

std::vector<int> ClassifierHead::predict(const Matrix& features) const {
    if (rows_.empty()) throw ContractError("predict on an empty head");
    if (features.cols() != dim_) throw DimensionError("predict: feature width mismatch");
    std::vector<Vector> w;
    for (const auto& r : rows_) {
        Vector v(r.values());
        if (kind_ == HeadKind::cosine) {
            const double n = std::max(norm(v), 1e-12);
            for (auto& x : v) x /= n;
        }
        w.push_back(std::move(v));
    }
    std::vector<int> out(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const auto f = features.row(i);
        std::size_t best = 0;
        double best_score = -INFINITY;
        for (std::size_t c = 0; c < w.size(); ++c) {
            const double s = dot(f, w[c]);  // |f| is common to every class under the cosine head
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        out[i] = labels_[best];
    }
    return out;
}

ClassifierHead ClassifierHead::clone() const {
    ClassifierHead h(kind_, dim_);
    h.labels_ = labels_;
    h.origin_ = origin_;
    for (const auto& r : rows_) h.rows_.push_back(r.clone());
    return h;
}

void ClassifierHead::copy_rows_from(const ClassifierHead& source, std::span<const int> labels) {
    for (int label : labels) {
        const Tensor copy = source.row(label).clone();
        if (has(label)) {
            const std::size_t r = row_of(label);
            rows_[r] = copy;
            origin_[r] = source.origin_session(label);
        } else {
            labels_.push_back(label);
            rows_.push_back(copy);
            origin_.push_back(source.origin_session(label));
        }
    }
}

bool ClassifierHead::rows_bit_equal(const ClassifierHead& other, std::span<const int> labels) const {
    for (int label : labels) {
        const Tensor& a = row(label);
        const Tensor& b = other.row(label);
        if (a.numel() != b.numel() || std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

// ----------------------------------------------------------------------- loss

void LossConfig::validate() const {
    if (!(scale > 0.0)) throw ContractError("loss config: scale must be > 0");
    if (margin < 0.0) throw ContractError("loss config: margin must be >= 0");
    if (kd_weight < 0.0) throw ContractError("loss config: kd_weight must be >= 0");
}

void Schedule::validate() const {
    if (!(lr0 > 0.0)) throw ContractError("schedule: lr0 must be > 0");
    if (batch_size == 0) throw ContractError("schedule: batch_size must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("schedule: momentum must lie in [0, 1)");
}

Tensor cosine_margin_loss(const Tensor& features, std::span<const int> labels, const ClassifierHead& head,
                          std::span<const int> session_classes, const LossConfig& cfg) {
    cfg.validate();
    if (features.rows() != labels.size()) {
        throw DimensionError("cosine_margin_loss: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(features.rows()) + " feature rows");
    }
    std::map<int, std::size_t> column;
    for (std::size_t i = 0; i < session_classes.size(); ++i) column[session_classes[i]] = i;
    std::vector<std::size_t> targets;
    targets.reserve(labels.size());
    for (int label : labels) {
        const auto it = column.find(label);
        if (it == column.end()) {
            throw ContractError("cosine_margin_loss: label " + std::to_string(label) + " is not a current-session class");
        }
        targets.push_back(it->second);
    }
    Tensor logits = head.logits(features, session_classes, cfg.scale);
    if (head.kind() == HeadKind::cosine && cfg.margin != 0.0) {
        logits = ops::offset_targets(logits, targets, -cfg.scale * cfg.margin);
    }
    return ops::cross_entropy(logits, targets);
}

Tensor kd_feature_loss(const Tensor& features_new, const Tensor& features_old) {
    return ops::mean_squared_distance(features_new, features_old);
}

// ------------------------------------------------------------------ sessions

SessionTrainResult train_session(Model& model, ClassifierHead& head, const Session& session, const LossConfig& cfg,
                                 const Schedule& schedule, const SessionTrainOptions& options, Rng& rng) {
    cfg.validate();
    schedule.validate();
    if (session.train.empty()) throw ContractError("train_session: empty session data");
    for (int c : session.classes) {
        if (!head.has(c)) throw ContractError("train_session: head has no row for class " + std::to_string(c));
        if (head.origin_session(c) != options.session_index) {
            throw ContractError("train_session: class " + std::to_string(c) + " belongs to session " +
                                std::to_string(head.origin_session(c)));
        }
    }
    if (cfg.kd_weight > 0.0 && options.teacher == nullptr) {
        throw ContractError("train_session: kd_weight > 0 requires a teacher snapshot");
    }

    std::vector<Tensor> params;
    if (options.train_pet)
        for (auto& p : trainable_parameters(model.pet)) params.push_back(p.tensor);
    for (int c : session.classes) params.push_back(head.row(c));
    Sgd opt(params, schedule.momentum);

    const LabeledSet& data = session.train;
    const std::size_t n = data.size(), bs = schedule.batch_size;
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;
    CosineAnnealing lr(schedule.lr0, options.epochs * steps_per_epoch);
    std::vector<std::size_t> order(n);
    SessionTrainResult result;
    std::size_t step = 0;
    for (std::size_t e = 0; e < options.epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
            const Tensor x = rows_to_tensor(data.features, idx);
            std::vector<int> y;
            for (std::size_t i : idx) y.push_back(data.labels[i]);

            Tape tape;
            const Tensor feats = forward(model, x);
            Tensor loss = cosine_margin_loss(feats, y, head, session.classes, cfg);
            if (cfg.kd_weight > 0.0) {
                Tensor old_feats;
                {
                    NoGradGuard no_grad;
                    old_feats = forward(*options.teacher, x);
                }
                loss = ops::add(loss, ops::scale(kd_feature_loss(feats, old_feats), cfg.kd_weight));
            }
            total += loss.item();
            opt.step(backward(tape, loss), lr.at(step++));
        }
        result.epoch_loss.push_back(total / static_cast<double>(steps_per_epoch));
    }
    return result;
}

SensitivityReport parameter_sensitivity(const Model& model, const ClassifierHead& head, const Session& session,
                                        const LossConfig& cfg, double epsilon) {
    if (!(epsilon > 0.0)) throw ContractError("parameter_sensitivity: epsilon must be > 0");
    if (session.train.empty()) throw ContractError("parameter_sensitivity: empty session data");
    const auto params = trainable_parameters(model.pet);

    // Full-batch gradient of the mean loss, accumulated over chunks.
    std::vector<std::vector<double>> grads;
    for (const auto& p : params) grads.emplace_back(p.tensor.numel(), 0.0);
    const LabeledSet& data = session.train;
    const std::size_t n = data.size(), chunk = 256;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, n - start));
        std::iota(idx.begin(), idx.end(), start);
        std::vector<int> y;
        for (std::size_t i : idx) y.push_back(data.labels[i]);
        Tape tape;
        const Tensor loss = ops::scale(
            cosine_margin_loss(forward(model, rows_to_tensor(data.features, idx)), y, head, session.classes, cfg),
            static_cast<double>(idx.size()) / static_cast<double>(n));
        const Gradients g = backward(tape, loss);
        for (std::size_t k = 0; k < params.size(); ++k) {
            const Tensor gk = g.of(params[k].tensor);
            for (std::size_t j = 0; j < gk.numel(); ++j) grads[k][j] += gk[j];
        }
    }

    SensitivityReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        double s = 0.0;
        for (double g : grads[k]) {
            const double e = -epsilon * g * g;
            report.entries.push_back(e);
            s += e;
        }
        report.groups.push_back(params[k].name);
        report.values.push_back(s);
    }
    report.ranking.resize(params.size());
    std::iota(report.ranking.begin(), report.ranking.end(), 0);
    std::stable_sort(report.ranking.begin(), report.ranking.end(),
                     [&](std::size_t a, std::size_t b) { return report.values[a] < report.values[b]; });
    return report;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size()) throw DimensionError("accuracy: length mismatch");
    if (truth.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double linear_probe_features(const LabeledSet& train, const LabeledSet& test, const Schedule& schedule, Rng& rng) {
    schedule.validate();
    if (train.empty() || test.empty()) throw ContractError("linear_probe: empty data");
    const std::vector<int> classes = train.classes();
    std::map<int, std::size_t> index;
    for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
    const std::size_t d = train.dim(), C = classes.size();

    std::vector<double> init(d * C);
    for (auto& v : init) v = rng.normal() * 0.01;
    Tensor w = Tensor::matrix(d, C, std::move(init), true);
    Tensor b = Tensor::zeros({C}, true);
    Sgd opt({w, b}, schedule.momentum);

    const std::size_t n = train.size(), bs = schedule.batch_size, epochs = schedule.epochs_first;
    CosineAnnealing lr(schedule.lr0, epochs * ((n + bs - 1) / bs));
    std::vector<std::size_t> order(n);
    std::size_t step = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
            std::vector<std::size_t> y;
            for (std::size_t i : idx) y.push_back(index.at(train.labels[i]));
            Tape tape;
            const Tensor loss =
                ops::cross_entropy(ops::add_row(ops::matmul(rows_to_tensor(train.features, idx), w), b), y);
            opt.step(backward(tape, loss), lr.at(step++));
        }
    }

    std::size_t hit = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto f = test.features.row(i);
        std::size_t best = 0;
        double best_score = -INFINITY;
        for (std::size_t c = 0; c < C; ++c) {
            double s = b[c];
            for (std::size_t j = 0; j < d; ++j) s += f[j] * w.at(j, c);
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        hit += classes[best] == test.labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(test.size());
}

double linear_probe(const Model& model, const LabeledSet& train, const LabeledSet& test, const Schedule& schedule,
                    Rng& rng) {
    if (train.empty() || test.empty()) throw ContractError("linear_probe: empty data");
    LabeledSet train_f{extract_features(model, train.features), train.labels};
    LabeledSet test_f{extract_features(model, test.features), test.labels};
    return linear_probe_features(train_f, test_f, schedule, rng);
}

}  // namespace cilkit
