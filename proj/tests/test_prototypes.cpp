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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cilkit/backbone.hpp"
#include "cilkit/container.hpp"
#include "cilkit/error.hpp"
#include "cilkit/prototypes.hpp"
#include "cilkit/training.hpp"

using namespace cilkit;

namespace {

Vector random_vector(Rng& rng, std::size_t d, double offset = 0.0) {
    Vector v(d);
    for (auto& x : v) x = offset + rng.normal();
    return v;
}

// Store of `n` old classes (labels 0..n-1) with random prototypes.
PrototypeStore random_store(Rng& rng, std::size_t n, std::size_t d) {
    PrototypeStore store(d, CovarianceKind::full);
    for (std::size_t c = 0; c < n; ++c) {
        ClassStatistics s;
        s.prototype = random_vector(rng, d, 0.5);
        s.covariance = Matrix::identity(d);
        s.session = 1;
        s.count = 10;
        store.insert(static_cast<int>(c), std::move(s));
    }
    return store;
}

PrototypeMap random_protos(Rng& rng, int first, std::size_t n, std::size_t d) {
    PrototypeMap out;
    for (std::size_t i = 0; i < n; ++i) out[first + static_cast<int>(i)] = random_vector(rng, d, 0.5);
    return out;
}

double max_abs(const Vector& a, const Vector& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double distance(const Vector& a, const Vector& b) { return std::sqrt(squared_distance(a, b)); }

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double offset = 0.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = offset + rng.normal();
    return m;
}

}  // namespace

TEST_CASE("prototype examples") {
    const Matrix f(2, 2, {0.0, 0.0, 2.0, 2.0});
    const auto stats = compute_prototypes(f, {5, 5}, {5}, CovarianceKind::full, 1);
    CHECK(stats.at(5).prototype == Vector{1.0, 1.0});
    CHECK(stats.at(5).count == 2);

    const Matrix one(1, 3, {1.0, -2.0, 3.0});
    const auto single = compute_prototypes(one, {0}, {0}, CovarianceKind::full, 2);
    CHECK(single.at(0).prototype == Vector{1.0, -2.0, 3.0});
    for (double v : single.at(0).covariance.data()) CHECK(v == 0.0);
    CHECK(single.at(0).session == 2);

    CHECK_THROWS_AS(compute_prototypes(one, {0}, {0, 1}, CovarianceKind::full, 1), ContractError);
}

TEST_CASE("prototype and covariance match a two-pass recomputation") {
    Rng rng(1);
    const std::size_t n = 50, d = 6;
    Matrix f = random_matrix(rng, n, d, 3.0);
    std::vector<int> labels(n, 4);
    for (auto kind : {CovarianceKind::full, CovarianceKind::diagonal}) {
        const ClassStatistics s = compute_prototypes(f, labels, {4}, kind, 1).at(4);
        Vector mean(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) mean[j] += f(i, j) / n;
        CHECK(max_abs(s.prototype, mean) < 1e-10);
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) {
                double c = 0.0;
                for (std::size_t i = 0; i < n; ++i) c += (f(i, a) - mean[a]) * (f(i, b) - mean[b]);
                c /= static_cast<double>(n - 1);
                if (kind == CovarianceKind::diagonal && a != b) c = 0.0;
                CHECK(std::abs(s.covariance(a, b) - c) < 1e-10);
                CHECK(s.covariance(a, b) == s.covariance(b, a));
            }
            CHECK(s.covariance(a, a) >= 0.0);
        }
    }
}

TEST_CASE("prototype shift analytics") {
    Rng rng(2);
    const std::size_t d = 8;
    const PrototypeStore store = random_store(rng, 6, d);
    const PrototypeMap old_new = random_protos(rng, 100, 4, d);

    SUBCASE("no drift gives exactly zero shift") {
        const ShiftReport r = estimate_shift_prototype(store, old_new, old_new);
        REQUIRE(r.shift.size() == 6);
        for (const auto& [c, s] : r.shift)
            for (double v : s) CHECK(v == 0.0);
    }
    SUBCASE("one positively similar new class passes its drift through") {
        PrototypeMap a, b;
        a[100] = Vector(d, 1.0);
        b[100] = random_vector(rng, d);
        // Nonnegative old prototypes keep every cosine with a[100] positive.
        PrototypeStore positive(d, CovarianceKind::full);
        for (int c = 0; c < 5; ++c) {
            Vector p = random_vector(rng, d);
            for (auto& v : p) v = std::abs(v);
            positive.insert(c, {p, Matrix::identity(d), 1, 1});
        }
        const ShiftReport r = estimate_shift_prototype(positive, a, b);
        REQUIRE(r.shift.size() == 5);
        Vector drift(d);
        for (std::size_t j = 0; j < d; ++j) drift[j] = b[100][j] - a[100][j];
        for (const auto& [c, s] : r.shift) CHECK(max_abs(s, drift) <= 1e-12);
    }
    SUBCASE("all weights clamped away leaves the old class in place") {
        PrototypeMap a, b;
        a[100] = Vector(d, -1.0);
        b[100] = random_vector(rng, d);
        PrototypeStore positive(d, CovarianceKind::full);
        positive.insert(0, {Vector(d, 1.0), Matrix::identity(d), 1, 1});
        const ShiftReport r = estimate_shift_prototype(positive, a, b, true);
        for (double v : r.shift.at(0)) CHECK(v == 0.0);
    }
    SUBCASE("shift is a convex combination of drifts") {
        const PrototypeMap now = random_protos(rng, 100, 4, d);
        const ShiftReport r = estimate_shift_prototype(store, old_new, now);
        REQUIRE(r.weights.rows() == 6);
        REQUIRE(r.weights.cols() == 4);
        for (std::size_t c = 0; c < 6; ++c) {
            double total = 0.0;
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(r.weights(c, i) >= 0.0);
                total += r.weights(c, i);
            }
            if (total == 0.0) continue;
            Vector expect(d, 0.0);
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < d; ++j) expect[j] += r.weights(c, i) / total * r.drift.at(100 + i)[j];
            CHECK(max_abs(r.shift.at(static_cast<int>(c)), expect) < 1e-12);
        }
    }
    SUBCASE("dimension mismatch") {
        PrototypeMap bad = old_new;
        bad[100].push_back(0.0);
        CHECK_THROWS_AS(estimate_shift_prototype(store, bad, bad), DimensionError);
    }
}

TEST_CASE("prototype estimator properties") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(300 + seed);
        const std::size_t d = 10;
        const PrototypeStore store = random_store(rng, 8, d);
        const PrototypeMap before = random_protos(rng, 50, 5, d);
        const PrototypeMap after = random_protos(rng, 50, 5, d);
        const ShiftReport base = estimate_shift_prototype(store, before, after);

        // Weight locality: new-model prototypes move the drifts, never alpha.
        const PrototypeMap other = random_protos(rng, 50, 5, d);
        CHECK(estimate_shift_prototype(store, before, other).weights == base.weights);

        // Relabelling the new classes (their order in the map) changes nothing.
        PrototypeMap pb, pa;
        const std::vector<int> perm{3, 0, 4, 1, 2};
        for (int i = 0; i < 5; ++i) {
            pb[200 + perm[i]] = before.at(50 + i);
            pa[200 + perm[i]] = after.at(50 + i);
        }
        const ShiftReport permuted = estimate_shift_prototype(store, pb, pa);
        for (const auto& [c, s] : base.shift) CHECK(max_abs(permuted.shift.at(c), s) < 1e-12);

        // Drifts scaled by lambda scale every shift by lambda.
        const double lambda = 0.25 + 3.0 * rng.uniform();
        PrototypeMap scaled;
        for (const auto& [i, b] : before) {
            Vector v = b;
            for (std::size_t j = 0; j < d; ++j) v[j] += lambda * (after.at(i)[j] - b[j]);
            scaled[i] = v;
        }
        const ShiftReport s2 = estimate_shift_prototype(store, before, scaled);
        for (const auto& [c, s] : base.shift) {
            Vector expect = s;
            for (auto& v : expect) v *= lambda;
            CHECK(max_abs(s2.shift.at(c), expect) < 1e-12);
        }
    }
}

TEST_CASE("sample and k-nearest estimator examples") {
    Rng rng(4);
    const std::size_t d = 5, n = 30;
    const PrototypeStore store = random_store(rng, 4, d);
    const Matrix e_old = random_matrix(rng, n, d);
    const Matrix e_new = random_matrix(rng, n, d);

    for (const auto& [c, s] : estimate_shift_sample(store, e_old, e_old, 1.0).shift)
        for (double v : s) CHECK(v == 0.0);

    const Matrix one_old(1, d, random_vector(rng, d)), one_new(1, d, random_vector(rng, d));
    Vector delta(d);
    for (std::size_t j = 0; j < d; ++j) delta[j] = one_new(0, j) - one_old(0, j);
    for (double bw : {1e-3, 1.0, 1e3})
        for (const auto& [c, s] : estimate_shift_sample(store, one_old, one_new, bw).shift)
            CHECK(max_abs(s, delta) < 1e-12);
    CHECK_THROWS_AS(estimate_shift_sample(store, e_old, e_new, 0.0), ContractError);

    Vector mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += (e_new(i, j) - e_old(i, j)) / n;
    for (const auto& [c, s] : estimate_shift_knearest(store, e_old, e_new, n).shift) CHECK(max_abs(s, mean) < 1e-12);

    const ShiftReport k1 = estimate_shift_knearest(store, e_old, e_new, 1);
    for (const auto& [c, s] : k1.shift) {
        const Vector& p = store.at(c).prototype;
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (squared_distance(e_old.row(i), p) < squared_distance(e_old.row(best), p)) best = i;
        Vector expect(d);
        for (std::size_t j = 0; j < d; ++j) expect[j] = e_new(best, j) - e_old(best, j);
        CHECK(max_abs(s, expect) < 1e-12);
    }
    CHECK_THROWS_AS(estimate_shift_knearest(store, e_old, e_new, 0), ContractError);
    CHECK_THROWS_AS(estimate_shift_knearest(store, e_old, e_new, n + 1), ContractError);

    // Median heuristic on three collinear points: distances 1, 2, 3.
    CHECK(median_pairwise_distance(Matrix(3, 1, {0.0, 1.0, 3.0})) == 2.0);
}

TEST_CASE("prototype updates") {
    Rng rng(5);
    const std::size_t d = 6;
    PrototypeStore store = random_store(rng, 5, d);
    const PrototypeStore original = store;
    const ShiftReport r = estimate_shift_prototype(store, random_protos(rng, 10, 3, d), random_protos(rng, 10, 3, d));

    ShiftReport zero = r;
    for (auto& [c, s] : zero.shift) std::fill(s.begin(), s.end(), 0.0);
    update_prototypes(store, zero, {});
    CHECK(store.prototypes() == original.prototypes());

    update_prototypes(store, r, {});
    ShiftReport negated = r;
    for (auto& [c, s] : negated.shift)
        for (auto& v : s) v = -v;
    update_prototypes(store, negated, {});
    for (int c : original.labels()) {
        CHECK(max_abs(store.at(c).prototype, original.at(c).prototype) <= 1e-12);
        CHECK(store.at(c).covariance == original.at(c).covariance);
    }

    const Matrix f = random_matrix(rng, 12, d);
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) labels.push_back(10 + i % 3);
    const auto fresh = compute_prototypes(f, labels, {10, 11, 12}, CovarianceKind::full, 2);
    update_prototypes(store, r, fresh);
    CHECK(store.size() == 5 + 3);
    for (int c : {10, 11, 12}) CHECK(store.at(c).prototype == fresh.at(c).prototype);

    ShiftReport missing = r;
    missing.shift.erase(0);
    CHECK_THROWS_AS(update_prototypes(store, missing, {}), ContractError);
}

TEST_CASE("oracle examples") {
    Rng rng(6);
    const BackboneConfig cfg{16, 4, 8, 1, 16, 2};
    Model model{FrozenWeights::initialize(cfg, rng), NoPet{}};
    model.pet = AdapterParams::create(cfg, 4, 1.0, AdapterPlacement::parallel, false, rng, 0.1);
    std::map<int, Matrix> retained{{0, random_matrix(rng, 5, 16)}, {1, random_matrix(rng, 1, 16)}};

    for (const auto& [c, s] : oracle_true_shift(retained, model, model.snapshot()).shift)
        for (double v : s) CHECK(v == 0.0);

    Model moved = model.snapshot();
    for (auto& w : std::get<AdapterParams>(moved.pet).w_up)
        for (double& v : w.mutable_data()) v = 0.3 * rng.normal();
    const OracleShift o = oracle_true_shift(retained, model, moved);
    const Matrix before = extract_features(model, retained.at(1));
    const Matrix after = extract_features(moved, retained.at(1));
    Vector drift(8);
    for (std::size_t j = 0; j < 8; ++j) drift[j] = after(0, j) - before(0, j);
    CHECK(max_abs(o.shift.at(1), drift) < 1e-12);
    CHECK(max_abs(o.prototype.at(1), Vector(after.row(0).begin(), after.row(0).end())) == 0.0);
}

TEST_CASE("estimators beat stale prototypes on a trained session") {
    // 10 old and 5 new classes in 16 dimensions; the adapter is tuned on the
    // new classes and old-class samples are retained only for the oracle.
    Rng rng(7);
    const BackboneConfig cfg{16, 4, 16, 1, 32, 2};
    Model model{FrozenWeights::initialize(cfg, rng), NoPet{}};
    model.pet = AdapterParams::create(cfg, 8, 1.0, AdapterPlacement::parallel, false, rng, 0.1);

    std::vector<Vector> means;
    for (int c = 0; c < 15; ++c) means.push_back(random_vector(rng, 16));
    auto sample = [&](int c, std::size_t n) {
        Matrix m(n, 16);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < 16; ++j) m(i, j) = 2.5 * means[c][j] + rng.normal();
        return m;
    };
    std::map<int, Matrix> retained;
    for (int c = 0; c < 10; ++c) retained[c] = sample(c, 40);

    Session session;
    session.index = 2;
    for (int c = 10; c < 15; ++c) {
        session.classes.push_back(c);
        const Matrix m = sample(c, 40);
        for (std::size_t i = 0; i < m.rows(); ++i) session.train.append(m.row(i), c);
    }

    PrototypeStore store(16, CovarianceKind::full);
    for (const auto& [c, x] : retained) {
        std::vector<int> labels(x.rows(), c);
        store.insert(c, compute_prototypes(extract_features(model, x), labels, {c}, CovarianceKind::full, 1).at(c));
    }
    const Model old_model = model.snapshot();
    const Matrix e_old = extract_features(old_model, session.train.features);

    ClassifierHead head(HeadKind::cosine, 16);
    head.add_classes(session.classes, 2, rng);
    SessionTrainOptions opt;
    opt.session_index = 2;
    opt.epochs = 10;
    train_session(model, head, session, {}, Schedule{0.05, 10, 10, 16, 0.9}, opt, rng);
    const Matrix e_new = extract_features(model, session.train.features);

    const OracleShift truth = oracle_true_shift(retained, old_model, model);
    auto error_with = [&](const ShiftReport& r) {
        double total = 0.0;
        for (const auto& [c, s] : store.classes()) {
            Vector moved = s.prototype;
            for (std::size_t j = 0; j < moved.size(); ++j) moved[j] += r.shift.at(c)[j];
            total += distance(moved, truth.prototype.at(c));
        }
        return total / static_cast<double>(store.size());
    };
    double stale = 0.0;
    for (const auto& [c, s] : store.classes()) stale += distance(s.prototype, truth.prototype.at(c));
    stale /= static_cast<double>(store.size());

    const double proto = error_with(estimate_shift_prototype(store, class_means(e_old, session.train.labels, session.classes),
                                                             class_means(e_new, session.train.labels, session.classes)));
    const double sample_based = error_with(estimate_shift_sample(store, e_old, e_new, median_pairwise_distance(e_old)));
    MESSAGE("stale " << stale << ", prototype " << proto << ", sample " << sample_based);
    CHECK(stale > 0.0);
    CHECK(proto < stale);
    CHECK(sample_based < stale);

    const std::size_t n = e_old.rows();
    for (std::size_t k : {n / 10, n / 2, n})
        MESSAGE("k-nearest k=" << k << ": " << error_with(estimate_shift_knearest(store, e_old, e_new, k)));
}

TEST_CASE("prototype store container round-trip") {
    Rng rng(8);
    for (auto kind : {CovarianceKind::full, CovarianceKind::diagonal}) {
        PrototypeStore store(4, kind);
        for (int c : {3, -1, 17}) {
            const Matrix f = random_matrix(rng, 6, 4);
            store.insert(c, compute_prototypes(f, std::vector<int>(6, c), {c}, kind, static_cast<std::size_t>(c + 2)).at(c));
        }
        std::stringstream buffer;
        write_container(buffer, store.to_container());
        const PrototypeStore back = PrototypeStore::from_container(read_container(buffer));
        CHECK(back.covariance_kind() == kind);
        CHECK(back.labels() == store.labels());
        for (int c : store.labels()) {
            CHECK(back.at(c).prototype == store.at(c).prototype);
            CHECK(back.at(c).covariance == store.at(c).covariance);
            CHECK(back.at(c).session == store.at(c).session);
            CHECK(back.at(c).count == store.at(c).count);
        }
    }
}

TEST_CASE("prototype store rejects malformed containers") {
    Rng rng(9);
    PrototypeStore store(3, CovarianceKind::full);
    store.insert(0, compute_prototypes(random_matrix(rng, 4, 3), {0, 0, 0, 0}, {0}, CovarianceKind::full, 1).at(0));
    const Container good = store.to_container();

    Container missing = good;
    missing.arrays.erase(std::remove_if(missing.arrays.begin(), missing.arrays.end(),
                                        [](const NamedArray& a) { return a.name == "cov.0"; }),
                         missing.arrays.end());
    CHECK_THROWS_AS(PrototypeStore::from_container(missing), ParseError);

    Container config = good;
    config.config.pop_back();
    CHECK_THROWS_AS(PrototypeStore::from_container(config), ParseError);

    Container shape = good;
    for (auto& a : shape.arrays)
        if (a.name == "proto.0") a.shape = {2}, a.data.resize(2);
    CHECK_THROWS_AS(PrototypeStore::from_container(shape), ParseError);

    std::stringstream truncated;
    write_container(truncated, good);
    std::string bytes = truncated.str();
    bytes.resize(bytes.size() - 5);
    std::stringstream in(bytes);
    try {
        read_container(in);
        FAIL("truncated container accepted");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("at byte") != std::string::npos);
    }
}
