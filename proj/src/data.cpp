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

#include "cilkit/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>

#include "cilkit/error.hpp"

namespace cilkit {

// ---------------------------------------------------------------- LabeledSet

void LabeledSet::append(std::span<const double> row, int label) {
    features.append_row(row);
    labels.push_back(label);
}

void LabeledSet::append(const LabeledSet& other) {
    for (std::size_t i = 0; i < other.size(); ++i) append(other.features.row(i), other.labels[i]);
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
    LabeledSet out;
    for (std::size_t i : indices) {
        if (i >= size()) throw ContractError("LabeledSet::subset index out of range");
        out.append(features.row(i), labels[i]);
    }
    if (out.empty()) out.features = Matrix(0, dim());
    return out;
}

LabeledSet LabeledSet::restricted_to(const std::set<int>& classes) const {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < size(); ++i)
        if (classes.count(labels[i])) keep.push_back(i);
    return subset(keep);
}

std::vector<int> LabeledSet::classes() const {
    std::vector<int> out(labels);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<std::size_t> LabeledSet::indices_of(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (labels[i] == label) out.push_back(i);
    return out;
}

// ----------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
    if (separation <= 0.0) throw ContractError("synthetic spec: separation must be > 0");
    if (cluster_std <= 0.0) throw ContractError("synthetic spec: cluster_std must be > 0");
    if (input_dim == 0 || cil_classes == 0 || clusters_per_class == 0 || train_per_class == 0 ||
        test_per_class == 0) {
        throw ContractError("synthetic spec: counts must be positive");
    }
    if (drift_intensity < 0.0 || drift_intensity > 1.0) {
        throw ContractError("synthetic spec: drift_intensity must lie in [0, 1]");
    }
    if (subspace_rank == 0 || 2 * subspace_rank > input_dim) {
        throw ContractError("synthetic spec: need 0 < 2*subspace_rank <= input_dim");
    }
    if (nuisance_std < 0.0) throw ContractError("synthetic spec: nuisance_std must be >= 0");
}

namespace {

// Columns of a random orthonormal input_dim x cols basis (Gram-Schmidt).
std::vector<Vector> random_orthonormal(Rng& rng, std::size_t dim, std::size_t cols) {
    std::vector<Vector> basis;
    while (basis.size() < cols) {
        Vector v(dim);
        for (auto& x : v) x = rng.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double p = dot(v, b);
                for (std::size_t i = 0; i < dim; ++i) v[i] -= p * b[i];
            }
        }
        const double n = norm(v);
        if (n < 1e-8) continue;
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

Vector combine(const std::vector<Vector>& basis, std::size_t first, std::span<const double> coeffs,
               std::size_t dim) {
    Vector out(dim, 0.0);
    for (std::size_t k = 0; k < coeffs.size(); ++k)
        for (std::size_t i = 0; i < dim; ++i) out[i] += coeffs[k] * basis[first + k][i];
    return out;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const std::size_t dim = spec.input_dim, rank = spec.subspace_rank;
    const auto basis = random_orthonormal(rng, dim, 2 * rank);  // [0, rank) base, [rank, 2*rank) novel
    const double theta = spec.drift_intensity * std::numbers::pi / 2.0;
    const double spread = spec.separation * spec.cluster_std / std::sqrt(static_cast<double>(rank));

    SyntheticData out;
    const std::size_t total = spec.base_classes + spec.cil_classes;
    Vector z(rank), w(rank), noise(dim);
    for (std::size_t c = 0; c < total; ++c) {
        const bool is_base = c < spec.base_classes;
        ClusterTruth truth;
        truth.label = static_cast<int>(c);
        for (std::size_t k = 0; k < spec.clusters_per_class; ++k) {
            for (auto& v : z) v = rng.normal() * spread;
            for (auto& v : w) v = rng.normal() * spread;
            Vector mean = combine(basis, 0, z, dim);
            if (!is_base) {
                const Vector novel = combine(basis, rank, w, dim);
                for (std::size_t i = 0; i < dim; ++i)
                    mean[i] = std::cos(theta) * mean[i] + std::sin(theta) * novel[i];
            }
            truth.means.append_row(mean);
        }

        LabeledSet& train = is_base ? out.base_train : out.cil_train;
        LabeledSet& test = is_base ? out.base_test : out.cil_test;
        const std::size_t n = spec.train_per_class + spec.test_per_class;
        for (std::size_t s = 0; s < n; ++s) {
            const auto mean = truth.means.row(s % spec.clusters_per_class);
            for (std::size_t i = 0; i < dim; ++i) noise[i] = mean[i] + spec.cluster_std * rng.normal();
            if (is_base && spec.nuisance_std > 0.0) {
                for (std::size_t k = 0; k < rank; ++k) w[k] = rng.normal() * spec.nuisance_std;
                const Vector nuisance = combine(basis, rank, w, dim);
                for (std::size_t i = 0; i < dim; ++i) noise[i] += nuisance[i];
            }
            (s < spec.train_per_class ? train : test).append(noise, truth.label);
        }
        out.truth.push_back(std::move(truth));
    }
    return out;
}

// ------------------------------------------------------------------- streams

LabeledSet SessionStream::cumulative_test(std::size_t t) const {
    if (t == 0 || t > sessions.size()) throw ContractError("cumulative_test: session index out of range");
    LabeledSet out;
    for (std::size_t i = 0; i < t; ++i) out.append(sessions[i].test);
    return out;
}

LabeledSet SessionStream::all_train() const {
    LabeledSet out;
    for (const auto& s : sessions) out.append(s.train);
    return out;
}

std::vector<int> SessionStream::classes_through(std::size_t t) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < t && i < sessions.size(); ++i)
        out.insert(out.end(), sessions[i].classes.begin(), sessions[i].classes.end());
    return out;
}

std::size_t SessionStream::dim() const {
    for (const auto& s : sessions)
        if (!s.train.empty()) return s.train.dim();
    return 0;
}

void SessionStream::validate() const {
    std::map<int, std::size_t> owner;
    for (const auto& s : sessions) {
        const std::set<int> declared(s.classes.begin(), s.classes.end());
        for (int c : s.classes) {
            auto [it, inserted] = owner.emplace(c, s.index);
            if (!inserted) {
                throw ContractError("label " + std::to_string(c) + " appears in sessions " +
                                    std::to_string(it->second) + " and " + std::to_string(s.index));
            }
        }
        for (const LabeledSet* set : {&s.train, &s.test})
            for (int label : set->labels)
                if (!declared.count(label)) {
                    throw ContractError("session " + std::to_string(s.index) + " holds a sample of undeclared label " +
                                        std::to_string(label));
                }
    }
}

SessionStream split_cil(const LabeledSet& train, const LabeledSet& test, std::size_t sessions,
                        std::uint64_t class_order_seed) {
    std::vector<int> order = train.classes();
    const std::size_t k = order.size();
    if (sessions == 0) throw ContractError("split_cil: need at least one session");
    if (sessions > k) {
        throw ContractError("split_cil: " + std::to_string(sessions) + " sessions for " + std::to_string(k) +
                            " classes");
    }
    Rng rng(class_order_seed);
    rng.shuffle(order);

    SessionStream stream;
    stream.class_order_seed = class_order_seed;
    const std::size_t base = k / sessions, extra = k % sessions;
    std::size_t cursor = 0;
    for (std::size_t t = 0; t < sessions; ++t) {
        const std::size_t n = base + (t < extra ? 1 : 0);
        Session s;
        s.index = t + 1;
        s.classes.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                         order.begin() + static_cast<std::ptrdiff_t>(cursor + n));
        std::sort(s.classes.begin(), s.classes.end());
        const std::set<int> members(s.classes.begin(), s.classes.end());
        s.train = train.restricted_to(members);
        s.test = test.restricted_to(members);
        stream.sessions.push_back(std::move(s));
        cursor += n;
    }
    stream.validate();
    return stream;
}

SessionStream fewshot_subsample(const SessionStream& stream, std::size_t shots, std::size_t from_session,
                                std::uint64_t seed) {
    if (shots == 0) throw ContractError("fewshot_subsample: shots must be >= 1");
    if (from_session < 2) throw ContractError("fewshot_subsample: from_session must be >= 2");
    SessionStream out = stream;
    for (auto& s : out.sessions) {
        if (s.index < from_session) continue;
        std::vector<std::size_t> keep;
        for (int c : s.classes) {
            auto idx = s.train.indices_of(c);
            if (shots > idx.size()) {
                throw ContractError("fewshot_subsample: class " + std::to_string(c) + " has " +
                                    std::to_string(idx.size()) + " training samples, " + std::to_string(shots) +
                                    " requested");
            }
            Rng rng(derive_seed(seed, "fewshot", static_cast<std::uint64_t>(c)));
            rng.shuffle(idx);
            keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
        }
        std::sort(keep.begin(), keep.end());
        s.train = s.train.subset(keep);
    }
    return out;
}

// --------------------------------------------------------------- CSV format

namespace {

void append_double(std::string& line, double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    line.append(buf, ptr);
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

template <class T>
T parse_number(std::string_view field, std::size_t line, const std::string& column) {
    T value{};
    const char* first = field.data();
    const char* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || field.empty()) {
        throw ParseError("column '" + column + "': cannot parse '" + std::string(field) + "'", line);
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(value)) throw ParseError("column '" + column + "': non-finite value", line);
    }
    return value;
}

}  // namespace

void write_embeddings(std::ostream& out, const SessionStream& stream) {
    const std::size_t d = stream.dim();
    std::string line = "session,split,label";
    for (std::size_t j = 0; j < d; ++j) line += ",f" + std::to_string(j);
    out << line << '\n';
    for (const auto& s : stream.sessions) {
        for (const auto* split : {"train", "test"}) {
            const LabeledSet& set = std::string_view(split) == "train" ? s.train : s.test;
            for (std::size_t i = 0; i < set.size(); ++i) {
                line = std::to_string(s.index) + "," + split + "," + std::to_string(set.labels[i]);
                for (double v : set.features.row(i)) {
                    line += ',';
                    append_double(line, v);
                }
                out << line << '\n';
            }
        }
    }
    if (!out) throw Error("write_embeddings: write failed");
}

void export_embeddings(const std::filesystem::path& path, const SessionStream& stream) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_embeddings(out, stream);
}

SessionStream parse_embeddings(std::istream& in) {
    std::string raw;
    std::size_t line_no = 0;
    if (!std::getline(in, raw)) throw ParseError("empty embedding file", 1);
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const auto header = split_fields(raw);
    if (header.size() < 4 || header[0] != "session" || header[1] != "split" || header[2] != "label") {
        throw ParseError("header must start with 'session,split,label' and name at least one feature", line_no);
    }
    const std::size_t d = header.size() - 3;
    for (std::size_t j = 0; j < d; ++j) {
        if (header[3 + j] != "f" + std::to_string(j)) {
            throw ParseError("header column " + std::to_string(4 + j) + " must be 'f" + std::to_string(j) + "', got '" +
                             std::string(header[3 + j]) + "'",
                             line_no);
        }
    }

    std::map<std::size_t, Session> by_session;
    Vector row(d);
    while (std::getline(in, raw)) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (raw.empty()) continue;
        const auto fields = split_fields(raw);
        if (fields.size() != 3 + d) {
            throw ParseError("expected " + std::to_string(3 + d) + " fields, got " + std::to_string(fields.size()),
                             line_no);
        }
        const auto session = parse_number<std::size_t>(fields[0], line_no, "session");
        const bool is_train = fields[1] == "train";
        if (!is_train && fields[1] != "test") {
            throw ParseError("column 'split': expected train or test, got '" + std::string(fields[1]) + "'", line_no);
        }
        const int label = parse_number<int>(fields[2], line_no, "label");
        for (std::size_t j = 0; j < d; ++j) row[j] = parse_number<double>(fields[3 + j], line_no, "f" + std::to_string(j));
        Session& s = by_session[session];
        (is_train ? s.train : s.test).append(row, label);
    }

    SessionStream stream;
    std::size_t index = 0;
    for (auto& [id, s] : by_session) {
        s.index = ++index;
        std::vector<int> classes = s.train.classes();
        for (int c : s.test.classes()) classes.push_back(c);
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
        s.classes = std::move(classes);
        if (s.train.empty()) s.train.features = Matrix(0, d);
        if (s.test.empty()) s.test.features = Matrix(0, d);
        stream.sessions.push_back(std::move(s));
    }
    if (stream.sessions.empty()) throw ParseError("embedding file has no data rows", line_no);
    stream.validate();
    return stream;
}

SessionStream ingest_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    return parse_embeddings(in);
}

double nearest_neighbor_accuracy(const LabeledSet& train, const LabeledSet& test) {
    if (train.empty() || test.empty()) throw ContractError("nearest_neighbor_accuracy: empty set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        int label = -1;
        for (std::size_t j = 0; j < train.size(); ++j) {
            const double d = squared_distance(test.features.row(i), train.features.row(j));
            if (d < best) {
                best = d;
                label = train.labels[j];
            }
        }
        if (label == test.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace cilkit
