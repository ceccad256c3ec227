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

// Labeled sets, synthetic class-incremental streams, session splitting,
// few-shot subsampling and the embedding CSV format.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cilkit/numerics.hpp"

namespace cilkit {

struct LabeledSet {
    Matrix features;  // one sample per row
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::size_t dim() const { return features.cols(); }

    void append(std::span<const double> row, int label);
    void append(const LabeledSet& other);
    LabeledSet subset(std::span<const std::size_t> indices) const;
    /// Samples whose label is in `classes`, in original order.
    LabeledSet restricted_to(const std::set<int>& classes) const;
    /// Sorted distinct labels.
    std::vector<int> classes() const;
    std::vector<std::size_t> indices_of(int label) const;

    bool operator==(const LabeledSet&) const = default;
};

struct SyntheticSpec {
    std::size_t base_classes = 10;
    std::size_t cil_classes = 40;
    std::size_t input_dim = 64;
    std::size_t clusters_per_class = 2;
    double cluster_std = 1.0;
    /// Spread of class means relative to cluster_std.
    double separation = 7.0;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 50;
    /// Rotation of incremental-class means away from the base subspace, in
    /// [0, 1]: 0 keeps them in the base subspace, 1 puts them entirely in the
    /// complementary "novel" subspace.
    double drift_intensity = 0.6;
    /// Rank of the base and novel mean subspaces.
    std::size_t subspace_rank = 8;
    /// Extra noise the base classes carry along the novel subspace, so the
    /// pre-trained backbone learns to ignore those directions.
    double nuisance_std = 1.0;

    void validate() const;
};

struct ClusterTruth {
    int label = 0;
    Matrix means;  // clusters_per_class x input_dim
};

struct SyntheticData {
    LabeledSet base_train;
    LabeledSet base_test;
    LabeledSet cil_train;
    LabeledSet cil_test;
    std::vector<ClusterTruth> truth;  // base classes first, then incremental classes
};

/// Base labels are 0..base_classes-1; incremental labels follow. Pure
/// function of (spec, seed).
SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct Session {
    std::size_t index = 1;  // 1-based
    std::vector<int> classes;  // sorted
    LabeledSet train;
    LabeledSet test;

    bool operator==(const Session&) const = default;
};

struct SessionStream {
    std::vector<Session> sessions;
    std::uint64_t class_order_seed = 0;

    std::size_t size() const { return sessions.size(); }
    /// Union of test sets of sessions 1..t (1-based), in session order.
    LabeledSet cumulative_test(std::size_t t) const;
    LabeledSet all_train() const;
    std::vector<int> classes_through(std::size_t t) const;
    std::size_t dim() const;
    /// Throws ContractError if two sessions share a label.
    void validate() const;

    bool operator==(const SessionStream&) const = default;
};

/// Permutes the incremental labels with `class_order_seed` and assigns
/// contiguous chunks to T sessions. When K % T != 0 the first K % T sessions
/// take one extra class.
SessionStream split_cil(const LabeledSet& train, const LabeledSet& test, std::size_t sessions,
                        std::uint64_t class_order_seed);

/// Keeps exactly `shots` training samples per class in sessions with 1-based
/// index >= from_session; selection is a seeded shuffle per class, the kept
/// samples retain their original relative order.
SessionStream fewshot_subsample(const SessionStream& stream, std::size_t shots,
                                std::size_t from_session, std::uint64_t seed);

/// Embedding CSV: header `session,split,label,f0,...,f{d-1}`, one sample per
/// row, split in {train,test}. Doubles are written in shortest round-trip form.
void write_embeddings(std::ostream& out, const SessionStream& stream);
void export_embeddings(const std::filesystem::path& path, const SessionStream& stream);
SessionStream parse_embeddings(std::istream& in);
SessionStream ingest_embeddings(const std::filesystem::path& path);

/// 1-nearest-neighbour (Euclidean) accuracy of `test` against `train`.
double nearest_neighbor_accuracy(const LabeledSet& train, const LabeledSet& test);

}  // namespace cilkit
