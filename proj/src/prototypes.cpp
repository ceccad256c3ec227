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

#include "cilkit/prototypes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "cilkit/error.hpp"

namespace cilkit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void require_store(const PrototypeStore& store, const char* op) {
    if (store.size() == 0) throw ContractError(std::string(op) + ": old prototype store is empty");
}

void require_pair(const Matrix& a, const Matrix& b, std::size_t dim, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": old/new embeddings differ in shape");
    }
    if (a.cols() != dim) {
        throw DimensionError(std::string(op) + ": embedding width " + std::to_string(a.cols()) + " vs store dim " +
                             std::to_string(dim));
    }
    if (a.rows() == 0) throw ContractError(std::string(op) + ": no samples");
}

}  // namespace

// ---------------------------------------------------------------------- store

const ClassStatistics& PrototypeStore::at(int label) const {
    const auto it = classes_.find(label);
    if (it == classes_.end()) throw ContractError("prototype store has no class " + std::to_string(label));
    return it->second;
}

ClassStatistics& PrototypeStore::at(int label) {
    const auto it = classes_.find(label);
    if (it == classes_.end()) throw ContractError("prototype store has no class " + std::to_string(label));
    return it->second;
}

std::vector<int> PrototypeStore::labels() const {
    std::vector<int> out;
    for (const auto& [label, _] : classes_) out.push_back(label);
    return out;
}

PrototypeMap PrototypeStore::prototypes() const {
    PrototypeMap out;
    for (const auto& [label, stats] : classes_) out[label] = stats.prototype;
    return out;
}

void PrototypeStore::insert(int label, ClassStatistics stats) {
    if (stats.prototype.size() != dim_ || stats.covariance.rows() != dim_ || stats.covariance.cols() != dim_) {
        throw DimensionError("prototype store: class " + std::to_string(label) + " statistics do not match dim " +
                             std::to_string(dim_));
    }
    classes_[label] = std::move(stats);
}

Container PrototypeStore::to_container() const {
    Container c;
    c.config = {static_cast<std::int32_t>(dim_), kind_ == CovarianceKind::full ? 0 : 1,
                static_cast<std::int32_t>(classes_.size())};
    NamedArray index{"index", {classes_.size(), 3}, {}};
    for (const auto& [label, s] : classes_) {
        index.data.push_back(static_cast<double>(label));
        index.data.push_back(static_cast<double>(s.session));
        index.data.push_back(static_cast<double>(s.count));
    }
    c.arrays.push_back(std::move(index));
    for (const auto& [label, s] : classes_) {
        c.arrays.push_back({"proto." + std::to_string(label), {dim_}, s.prototype});
        c.arrays.push_back({"cov." + std::to_string(label), {dim_, dim_}, s.covariance.data()});
    }
    return c;
}

PrototypeStore PrototypeStore::from_container(const Container& c) {
    if (c.config.size() != 3 || c.config[0] <= 0 || (c.config[1] != 0 && c.config[1] != 1) || c.config[2] < 0) {
        throw ParseError("prototype container: config must be (dim > 0, kind in {0,1}, count >= 0)");
    }
    const auto dim = static_cast<std::size_t>(c.config[0]);
    const auto count = static_cast<std::size_t>(c.config[2]);
    PrototypeStore store(dim, c.config[1] == 0 ? CovarianceKind::full : CovarianceKind::diagonal);
    const NamedArray& index = c.get("index");
    if (index.shape != Shape{count, 3}) {
        throw ParseError("prototype container: index has shape " + shape_string(index.shape) + ", expected " +
                         shape_string({count, 3}));
    }
    for (std::size_t r = 0; r < count; ++r) {
        const int label = static_cast<int>(index.data[r * 3]);
        ClassStatistics s;
        s.session = static_cast<std::size_t>(index.data[r * 3 + 1]);
        s.count = static_cast<std::size_t>(index.data[r * 3 + 2]);
        const NamedArray& proto = c.get("proto." + std::to_string(label));
        const NamedArray& cov = c.get("cov." + std::to_string(label));
        if (proto.shape != Shape{dim} || cov.shape != Shape{dim, dim}) {
            throw ParseError("prototype container: class " + std::to_string(label) + " arrays have wrong shape");
        }
        s.prototype = proto.data;
        s.covariance = Matrix(dim, dim, cov.data);
        store.insert(label, std::move(s));
    }
    if (c.arrays.size() != 1 + 2 * count) throw ParseError("prototype container: unexpected extra arrays");
    return store;
}

// ---------------------------------------------------------------- prototypes

std::map<int, ClassStatistics> compute_prototypes(const Matrix& features, const std::vector<int>& labels,
                                                  const std::vector<int>& classes, CovarianceKind kind,
                                                  std::size_t session) {
    if (features.rows() != labels.size()) throw DimensionError("compute_prototypes: label count mismatch");
    const std::size_t d = features.cols();
    std::map<int, ClassStatistics> out;
    for (int c : classes) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) idx.push_back(i);
        if (idx.empty()) throw ContractError("compute_prototypes: class " + std::to_string(c) + " has no samples");

        ClassStatistics s;
        s.session = session;
        s.count = idx.size();
        s.prototype.assign(d, 0.0);
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < d; ++j) s.prototype[j] += features(i, j);
        for (auto& v : s.prototype) v /= static_cast<double>(idx.size());

        s.covariance = Matrix(d, d);
        if (idx.size() > 1) {
            Vector centered(d);
            for (std::size_t i : idx) {
                for (std::size_t j = 0; j < d; ++j) centered[j] = features(i, j) - s.prototype[j];
                for (std::size_t a = 0; a < d; ++a) {
                    if (kind == CovarianceKind::diagonal) {
                        s.covariance(a, a) += centered[a] * centered[a];
                        continue;
                    }
                    for (std::size_t b = a; b < d; ++b) s.covariance(a, b) += centered[a] * centered[b];
                }
            }
            const double denom = static_cast<double>(idx.size() - 1);
            for (std::size_t a = 0; a < d; ++a) {
                for (std::size_t b = a; b < d; ++b) {
                    s.covariance(a, b) /= denom;
                    s.covariance(b, a) = s.covariance(a, b);
                }
            }
        }
        out.emplace(c, std::move(s));
    }
    return out;
}

std::map<int, ClassStatistics> compute_prototypes(const Model& model, const LabeledSet& data,
                                                  const std::vector<int>& classes, CovarianceKind kind,
                                                  std::size_t session) {
    return compute_prototypes(extract_features(model, data.features), data.labels, classes, kind, session);
}

PrototypeMap class_means(const Matrix& features, const std::vector<int>& labels, const std::vector<int>& classes) {
    if (features.rows() != labels.size()) throw DimensionError("class_means: label count mismatch");
    const std::size_t d = features.cols();
    std::map<int, std::size_t> counts;
    PrototypeMap sums;
    for (int c : classes) {
        sums[c].assign(d, 0.0);
        counts[c] = 0;
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto it = sums.find(labels[i]);
        if (it == sums.end()) continue;
        const auto row = features.row(i);
        for (std::size_t j = 0; j < d; ++j) it->second[j] += row[j];
        ++counts[labels[i]];
    }
    for (auto& [c, sum] : sums) {
        if (counts[c] == 0) throw ContractError("class_means: class " + std::to_string(c) + " has no samples");
        for (auto& v : sum) v /= static_cast<double>(counts[c]);
    }
    return sums;
}

// -------------------------------------------------------------- estimators

ShiftReport estimate_shift_prototype(const PrototypeStore& old_store, const PrototypeMap& new_protos_old_model,
                                     const PrototypeMap& new_protos_new_model, bool clamp_negative_weights) {
    const auto start = Clock::now();
    require_store(old_store, "estimate_shift_prototype");
    if (new_protos_old_model.empty()) throw ContractError("estimate_shift_prototype: no new classes");
    if (new_protos_old_model.size() != new_protos_new_model.size()) {
        throw ContractError("estimate_shift_prototype: new-class prototypes missing under one of the models");
    }
    const std::size_t d = old_store.dim();

    ShiftReport report;
    report.old_labels = old_store.labels();
    for (const auto& [label, before] : new_protos_old_model) {
        const auto it = new_protos_new_model.find(label);
        if (it == new_protos_new_model.end()) {
            throw ContractError("estimate_shift_prototype: class " + std::to_string(label) + " missing under new model");
        }
        if (before.size() != d || it->second.size() != d) {
            throw DimensionError("estimate_shift_prototype: prototype width differs from store dim " + std::to_string(d));
        }
        Vector drift(d);
        for (std::size_t j = 0; j < d; ++j) drift[j] = it->second[j] - before[j];
        report.new_labels.push_back(label);
        report.drift.emplace(label, std::move(drift));
    }

    report.weights = Matrix(report.old_labels.size(), report.new_labels.size());
    for (std::size_t r = 0; r < report.old_labels.size(); ++r) {
        const Vector& phi = old_store.at(report.old_labels[r]).prototype;
        double total = 0.0;
        Vector shift(d, 0.0);
        for (std::size_t c = 0; c < report.new_labels.size(); ++c) {
            const int label = report.new_labels[c];
            double alpha = cosine_similarity(new_protos_old_model.at(label), phi);
            if (clamp_negative_weights) alpha = std::max(alpha, 0.0);
            report.weights(r, c) = alpha;
            total += alpha;
            const Vector& drift = report.drift.at(label);
            for (std::size_t j = 0; j < d; ++j) shift[j] += alpha * drift[j];
        }
        if (total != 0.0) {
            for (auto& v : shift) v /= total;
        } else {
            std::fill(shift.begin(), shift.end(), 0.0);
        }
        report.shift.emplace(report.old_labels[r], std::move(shift));
    }
    report.seconds = seconds_since(start);
    return report;
}

ShiftReport estimate_shift_sample(const PrototypeStore& old_store, const Matrix& embeddings_old,
                                  const Matrix& embeddings_new, double bandwidth) {
    const auto start = Clock::now();
    if (!(bandwidth > 0.0)) throw ContractError("estimate_shift_sample: bandwidth must be > 0");
    require_store(old_store, "estimate_shift_sample");
    const std::size_t d = old_store.dim(), n = embeddings_old.rows();
    require_pair(embeddings_old, embeddings_new, d, "estimate_shift_sample");

    Matrix delta(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) delta(i, j) = embeddings_new(i, j) - embeddings_old(i, j);

    ShiftReport report;
    report.old_labels = old_store.labels();
    const double inv_two_var = 1.0 / (2.0 * bandwidth * bandwidth);
    std::vector<double> dist(n);
    for (int label : report.old_labels) {
        const Vector& phi = old_store.at(label).prototype;
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = squared_distance(embeddings_old.row(i), phi);
            nearest = std::min(nearest, dist[i]);
        }
        Vector shift(d, 0.0);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = std::exp(-(dist[i] - nearest) * inv_two_var);
            total += w;
            const auto row = delta.row(i);
            for (std::size_t j = 0; j < d; ++j) shift[j] += w * row[j];
        }
        for (auto& v : shift) v /= total;
        report.shift.emplace(label, std::move(shift));
    }
    report.seconds = seconds_since(start);
    return report;
}

double median_pairwise_distance(const Matrix& embeddings, std::size_t max_samples) {
    const std::size_t n = std::min(embeddings.rows(), max_samples);
    if (n < 2) throw ContractError("median_pairwise_distance: need at least two samples");
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            dists.push_back(std::sqrt(squared_distance(embeddings.row(i), embeddings.row(j))));
    const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    const double median = *mid;
    if (!(median > 0.0)) throw DegenerateInputError("median_pairwise_distance: all embeddings coincide");
    return median;
}

ShiftReport estimate_shift_knearest(const PrototypeStore& old_store, const Matrix& embeddings_old,
                                    const Matrix& embeddings_new, std::size_t k) {
    const auto start = Clock::now();
    require_store(old_store, "estimate_shift_knearest");
    const std::size_t d = old_store.dim(), n = embeddings_old.rows();
    require_pair(embeddings_old, embeddings_new, d, "estimate_shift_knearest");
    if (k < 1 || k > n) {
        throw ContractError("estimate_shift_knearest: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }

    ShiftReport report;
    report.old_labels = old_store.labels();
    std::vector<std::pair<double, std::size_t>> ranked(n);
    for (int label : report.old_labels) {
        const Vector& phi = old_store.at(label).prototype;
        for (std::size_t i = 0; i < n; ++i) ranked[i] = {squared_distance(embeddings_old.row(i), phi), i};
        std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end());
        Vector shift(d, 0.0);
        for (std::size_t r = 0; r < k; ++r) {
            const std::size_t i = ranked[r].second;
            for (std::size_t j = 0; j < d; ++j) shift[j] += embeddings_new(i, j) - embeddings_old(i, j);
        }
        for (auto& v : shift) v /= static_cast<double>(k);
        report.shift.emplace(label, std::move(shift));
    }
    report.seconds = seconds_since(start);
    return report;
}

void update_prototypes(PrototypeStore& store, const ShiftReport& report,
                       const std::map<int, ClassStatistics>& new_classes) {
    for (int label : store.labels()) {
        if (new_classes.count(label)) continue;  // freshly recomputed below
        const auto it = report.shift.find(label);
        if (it == report.shift.end()) {
            throw ContractError("update_prototypes: shift report does not cover class " + std::to_string(label));
        }
        if (it->second.size() != store.dim()) throw DimensionError("update_prototypes: shift width mismatch");
        Vector& phi = store.at(label).prototype;
        for (std::size_t j = 0; j < phi.size(); ++j) phi[j] += it->second[j];
    }
    for (const auto& [label, stats] : new_classes) store.insert(label, stats);
}

OracleShift oracle_true_shift(const std::map<int, Matrix>& embeddings_old, const std::map<int, Matrix>& embeddings_new) {
    OracleShift out;
    for (const auto& [label, before] : embeddings_old) {
        const Matrix& after = embeddings_new.at(label);
        if (before.rows() == 0 || before.rows() != after.rows() || before.cols() != after.cols()) {
            throw DimensionError("oracle_true_shift: class " + std::to_string(label) + " embeddings mismatch");
        }
        const std::size_t d = before.cols();
        Vector mean_old(d, 0.0), mean_new(d, 0.0);
        for (std::size_t i = 0; i < before.rows(); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                mean_old[j] += before(i, j);
                mean_new[j] += after(i, j);
            }
        }
        Vector shift(d);
        for (std::size_t j = 0; j < d; ++j) {
            mean_old[j] /= static_cast<double>(before.rows());
            mean_new[j] /= static_cast<double>(before.rows());
            shift[j] = mean_new[j] - mean_old[j];
        }
        out.shift.emplace(label, std::move(shift));
        out.prototype.emplace(label, std::move(mean_new));
    }
    return out;
}

OracleShift oracle_true_shift(const std::map<int, Matrix>& retained, const Model& old_model, const Model& new_model) {
    std::map<int, Matrix> before, after;
    for (const auto& [label, inputs] : retained) {
        before.emplace(label, extract_features(old_model, inputs));
        after.emplace(label, extract_features(new_model, inputs));
    }
    return oracle_true_shift(before, after);
}

}  // namespace cilkit
