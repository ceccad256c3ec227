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

// Per-class prototype/covariance store and estimators of how old-class
// prototypes move when the backbone is tuned on a new session.
//
// The prototype-based estimator only looks at new-class prototypes computed
// under the previous and the current model:
//
//   drift_i   = phi_i(new model) - phi_i(old model)            for new class i
//   alpha_ci  = max(0, cos(phi_i(old model), phi_c))           for old class c
//   shift_c   = sum_i alpha_ci drift_i / sum_i alpha_ci         (0 if the sum is 0)
//
// The sample-based (Gaussian kernel) and k-nearest estimators use per-sample
// embeddings under both models instead; oracle_true_shift needs retained old
// samples and exists for evaluation only.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <vector>

#include "cilkit/backbone.hpp"
#include "cilkit/container.hpp"
#include "cilkit/numerics.hpp"

namespace cilkit {

enum class CovarianceKind { full, diagonal };

struct ClassStatistics {
    Vector prototype;
    Matrix covariance;  // d x d; off-diagonal entries are zero for the diagonal kind
    std::size_t session = 0;
    std::size_t count = 0;
};

using PrototypeMap = std::map<int, Vector>;

class PrototypeStore {
public:
    PrototypeStore() = default;
    PrototypeStore(std::size_t dim, CovarianceKind kind) : dim_(dim), kind_(kind) {}

    std::size_t dim() const { return dim_; }
    CovarianceKind covariance_kind() const { return kind_; }
    std::size_t size() const { return classes_.size(); }
    bool contains(int label) const { return classes_.count(label) != 0; }
    const ClassStatistics& at(int label) const;
    ClassStatistics& at(int label);
    std::vector<int> labels() const;
    const std::map<int, ClassStatistics>& classes() const { return classes_; }
    PrototypeMap prototypes() const;

    void insert(int label, ClassStatistics stats);

    /// Arrays `proto.<label>` [d], `cov.<label>` [d x d] and `index` [C x 3]
    /// holding (label, session, count) rows; config = (dim, covariance kind, C).
    Container to_container() const;
    static PrototypeStore from_container(const Container& container);

private:
    std::size_t dim_ = 0;
    CovarianceKind kind_ = CovarianceKind::full;
    std::map<int, ClassStatistics> classes_;
};

/// Mean and sample covariance (denominator N-1; zero when N = 1) of the
/// feature rows of every class in `classes`. Throws ContractError for a class
/// without samples.
std::map<int, ClassStatistics> compute_prototypes(const Matrix& features, const std::vector<int>& labels,
                                                  const std::vector<int>& classes, CovarianceKind kind,
                                                  std::size_t session);
/// Embeds `data` with `model` first.
std::map<int, ClassStatistics> compute_prototypes(const Model& model, const LabeledSet& data,
                                                  const std::vector<int>& classes, CovarianceKind kind,
                                                  std::size_t session);

/// Class means only (no covariance), one per entry of `classes`.
PrototypeMap class_means(const Matrix& features, const std::vector<int>& labels, const std::vector<int>& classes);

struct ShiftReport {
    std::vector<int> old_labels;
    std::vector<int> new_labels;
    PrototypeMap shift;  // per old class
    PrototypeMap drift;  // per new class (prototype-based estimator only)
    Matrix weights;      // old x new (prototype-based estimator only)
    double seconds = 0.0;
};

ShiftReport estimate_shift_prototype(const PrototypeStore& old_store, const PrototypeMap& new_protos_old_model,
                                     const PrototypeMap& new_protos_new_model, bool clamp_negative_weights = true);

/// Gaussian-kernel weighted mean of per-sample drifts,
/// w_i = exp(-|e_i_old - phi_c|^2 / (2 sigma^2)). Weights are normalized
/// relative to the nearest sample, so the result never underflows to 0/0.
ShiftReport estimate_shift_sample(const PrototypeStore& old_store, const Matrix& embeddings_old,
                                  const Matrix& embeddings_new, double bandwidth);

/// Median Euclidean distance over pairs of the first `max_samples` rows.
double median_pairwise_distance(const Matrix& embeddings, std::size_t max_samples = 1000);

/// Unweighted mean drift of the k samples whose old embeddings are nearest to
/// each old prototype (ties broken by sample index).
ShiftReport estimate_shift_knearest(const PrototypeStore& old_store, const Matrix& embeddings_old,
                                    const Matrix& embeddings_new, std::size_t k);

/// Old classes: phi_c += shift_c (covariances untouched). New classes are
/// inserted with their fresh statistics.
void update_prototypes(PrototypeStore& store, const ShiftReport& report,
                       const std::map<int, ClassStatistics>& new_classes);

struct OracleShift {
    PrototypeMap shift;      // phi_c(new model) - phi_c(old model)
    PrototypeMap prototype;  // phi_c(new model)
};

/// Ground-truth shift from retained samples (label -> input rows).
OracleShift oracle_true_shift(const std::map<int, Matrix>& retained, const Model& old_model, const Model& new_model);
/// Same on precomputed embeddings (label -> rows under each model).
OracleShift oracle_true_shift(const std::map<int, Matrix>& embeddings_old, const std::map<int, Matrix>& embeddings_new);

}  // namespace cilkit
