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

#include "cilkit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cilkit/container.hpp"
#include "cilkit/error.hpp"
#include "cilkit/ops.hpp"
#include "cilkit/optim.hpp"

namespace cilkit {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Strict reader over one JSON object: every key must be consumed.
class Section {
public:
    Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) throw ParseError("config: " + where() + " must be an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!node_.contains(key)) return;
        seen_.insert(key);
        const json& v = node_.at(key);
        const std::string name = path_.empty() ? key : path_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ParseError("config: " + name + " must be a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ParseError("config: " + name + " must be a string");
            out = v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ParseError("config: " + name + " must be a number");
            out = v.get<double>();
        } else {
            static_assert(std::is_unsigned_v<T>);
            if (!v.is_number_unsigned()) throw ParseError("config: " + name + " must be a non-negative integer");
            out = v.get<T>();
        }
    }

    void read_path(const char* key, std::filesystem::path& out) {
        std::string s = out.string();
        read(key, s);
        out = s;
    }

    std::optional<Section> child(const char* key) {
        if (!node_.contains(key)) return std::nullopt;
        seen_.insert(key);
        return Section(node_.at(key), path_.empty() ? key : path_ + "." + key);
    }

    const json* raw(const char* key) {
        if (!node_.contains(key)) return nullptr;
        seen_.insert(key);
        return &node_.at(key);
    }

    void finish() const {
        for (const auto& [key, _] : node_.items()) {
            if (!seen_.count(key)) {
                throw ParseError("config: unknown key '" + (path_.empty() ? key : path_ + "." + key) + "'");
            }
        }
    }

private:
    std::string where() const { return path_.empty() ? "top level" : "'" + path_ + "'"; }

    const json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_schedule(Section s, Schedule& out) {
    s.read("lr0", out.lr0);
    s.read("epochs_first", out.epochs_first);
    s.read("epochs_later", out.epochs_later);
    s.read("batch_size", out.batch_size);
    s.read("momentum", out.momentum);
    s.finish();
}

json schedule_json(const Schedule& s) {
    return {{"lr0", s.lr0},
            {"epochs_first", s.epochs_first},
            {"epochs_later", s.epochs_later},
            {"batch_size", s.batch_size},
            {"momentum", s.momentum}};
}

HeadKind parse_head(const std::string& s) {
    if (s == "cosine") return HeadKind::cosine;
    if (s == "linear") return HeadKind::linear;
    throw ParseError("config: head must be cosine or linear, got '" + s + "'");
}

const char* head_name(HeadKind k) { return k == HeadKind::cosine ? "cosine" : "linear"; }

Tensor gather(const Matrix& m, std::span<const std::size_t> idx) {
    std::vector<double> x;
    x.reserve(idx.size() * m.cols());
    for (std::size_t i : idx) {
        const auto r = m.row(i);
        x.insert(x.end(), r.begin(), r.end());
    }
    return Tensor::matrix(idx.size(), m.cols(), std::move(x));
}

}  // namespace

// ------------------------------------------------------------------ enums

const char* align_mode_name(AlignMode mode) {
    switch (mode) {
        case AlignMode::none: return "none";
        case AlignMode::ca: return "ca";
        case AlignMode::ssca: return "ssca";
    }
    return "?";
}

const char* shift_estimator_name(ShiftEstimator e) {
    switch (e) {
        case ShiftEstimator::prototype: return "prototype";
        case ShiftEstimator::sample: return "sample";
        case ShiftEstimator::knearest: return "knearest";
        case ShiftEstimator::oracle: return "oracle";
    }
    return "?";
}

const char* regime_name(Regime r) {
    switch (r) {
        case Regime::none: return "none";
        case Regime::first_session: return "first_session";
        case Regime::all_sessions: return "all_sessions";
    }
    return "?";
}

AlignMode parse_align_mode(const std::string& s) {
    if (s == "none") return AlignMode::none;
    if (s == "ca") return AlignMode::ca;
    if (s == "ssca") return AlignMode::ssca;
    throw ParseError("alignment mode must be none, ca or ssca, got '" + s + "'");
}

ShiftEstimator parse_shift_estimator(const std::string& s) {
    if (s == "prototype") return ShiftEstimator::prototype;
    if (s == "sample") return ShiftEstimator::sample;
    if (s == "knearest") return ShiftEstimator::knearest;
    if (s == "oracle") return ShiftEstimator::oracle;
    throw ParseError("shift estimator must be prototype, sample, knearest or oracle, got '" + s + "'");
}

Regime parse_regime(const std::string& s) {
    if (s == "none") return Regime::none;
    if (s == "first_session") return Regime::first_session;
    if (s == "all_sessions") return Regime::all_sessions;
    throw ParseError("regime must be none, first_session or all_sessions, got '" + s + "'");
}

// ------------------------------------------------------------------ config

void ExperimentConfig::validate() const {
    static const std::set<std::string> kinds{"none", "adapter", "ssf", "vpt-shallow", "vpt-deep", "full"};
    if (!kinds.count(pet.kind)) throw ContractError("config: unknown pet kind '" + pet.kind + "'");
    if (data.source != "synthetic" && data.source != "file") {
        throw ContractError("config: data.source must be synthetic or file");
    }
    if (data.source == "file" && data.path.empty()) throw ContractError("config: data.path required for file source");
    if (data.source == "synthetic") {
        data.synthetic.validate();
        if (data.bypass_backbone) throw ContractError("config: bypass_backbone needs an embedding file source");
        if (data.synthetic.input_dim != backbone.input_dim) {
            throw ContractError("config: backbone.input_dim must equal data.synthetic.input_dim");
        }
    }
    if (data.sessions < 1) throw ContractError("config: data.sessions must be >= 1");
    if (data.fewshot_shots > 0 && data.fewshot_from < 2) throw ContractError("config: fewshot.from_session must be >= 2");
    if (!data.bypass_backbone) backbone.validate();
    if (pet.kind == "adapter" && (pet.bottleneck == 0 || pet.bottleneck >= backbone.embed_dim)) {
        throw ContractError("config: adapter bottleneck must lie in (0, embed_dim)");
    }
    loss.validate();
    schedule.validate();
    probe.validate();
    alignment.validate();
    if (shift.k_fraction <= 0.0 || shift.k_fraction > 1.0) throw ContractError("config: shift.k_fraction must lie in (0, 1]");
    if (shift.bandwidth < 0.0) throw ContractError("config: shift.bandwidth must be >= 0");
    if (!(sensitivity_epsilon > 0.0)) throw ContractError("config: sensitivity.epsilon must be > 0");
    if (seeds.empty()) throw ContractError("config: at least one seed required");
}

ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    ExperimentConfig cfg;
    Section top(root, "");

    if (auto s = top.child("data")) {
        s->read("source", cfg.data.source);
        s->read_path("path", cfg.data.path);
        s->read("seed", cfg.data.seed);
        s->read("sessions", cfg.data.sessions);
        s->read("bypass_backbone", cfg.data.bypass_backbone);
        if (auto f = s->child("fewshot")) {
            f->read("shots", cfg.data.fewshot_shots);
            f->read("from_session", cfg.data.fewshot_from);
            f->finish();
        }
        if (auto g = s->child("synthetic")) {
            SyntheticSpec& sp = cfg.data.synthetic;
            g->read("base_classes", sp.base_classes);
            g->read("cil_classes", sp.cil_classes);
            g->read("input_dim", sp.input_dim);
            g->read("clusters_per_class", sp.clusters_per_class);
            g->read("cluster_std", sp.cluster_std);
            g->read("separation", sp.separation);
            g->read("train_per_class", sp.train_per_class);
            g->read("test_per_class", sp.test_per_class);
            g->read("drift_intensity", sp.drift_intensity);
            g->read("subspace_rank", sp.subspace_rank);
            g->read("nuisance_std", sp.nuisance_std);
            g->finish();
        }
        s->finish();
    }
    if (auto s = top.child("backbone")) {
        s->read("input_dim", cfg.backbone.input_dim);
        s->read("token_count", cfg.backbone.token_count);
        s->read("embed_dim", cfg.backbone.embed_dim);
        s->read("depth", cfg.backbone.depth);
        s->read("mlp_hidden", cfg.backbone.mlp_hidden);
        s->read("heads", cfg.backbone.heads);
        s->finish();
    }
    if (auto s = top.child("pretrain")) {
        s->read("epochs", cfg.pretrain.schedule.epochs);
        s->read("lr", cfg.pretrain.schedule.lr);
        s->read("batch_size", cfg.pretrain.schedule.batch_size);
        s->read("momentum", cfg.pretrain.schedule.momentum);
        s->read("seed", cfg.pretrain.seed);
        s->read_path("weights", cfg.pretrain.weights);
        s->finish();
    }
    if (auto s = top.child("pet")) {
        s->read("kind", cfg.pet.kind);
        s->read("bottleneck", cfg.pet.bottleneck);
        s->read("scale", cfg.pet.adapter_scale);
        std::string placement = cfg.pet.placement == AdapterPlacement::parallel ? "parallel" : "sequential";
        s->read("placement", placement);
        if (placement == "parallel") {
            cfg.pet.placement = AdapterPlacement::parallel;
        } else if (placement == "sequential") {
            cfg.pet.placement = AdapterPlacement::sequential;
        } else {
            throw ParseError("config: pet.placement must be parallel or sequential");
        }
        s->read("bias", cfg.pet.adapter_bias);
        s->read("init_std", cfg.pet.adapter_init_std);
        s->read("prompts", cfg.pet.prompts);
        s->read("prompt_init_std", cfg.pet.prompt_init_std);
        s->finish();
    }
    {
        std::string head = head_name(cfg.head);
        top.read("head", head);
        cfg.head = parse_head(head);
    }
    if (auto s = top.child("loss")) {
        s->read("scale", cfg.loss.scale);
        s->read("margin", cfg.loss.margin);
        s->read("kd_weight", cfg.loss.kd_weight);
        s->finish();
    }
    if (auto s = top.child("schedule")) read_schedule(*s, cfg.schedule);
    if (auto s = top.child("probe")) read_schedule(*s, cfg.probe);
    if (auto s = top.child("alignment")) {
        std::string mode = align_mode_name(cfg.mode);
        s->read("mode", mode);
        cfg.mode = parse_align_mode(mode);
        s->read("samples_per_class", cfg.alignment.samples_per_class);
        s->read("epochs", cfg.alignment.epochs);
        s->read("lr", cfg.alignment.lr);
        s->read("normalize", cfg.alignment.normalize);
        s->read("batch_size", cfg.alignment.batch_size);
        s->read("momentum", cfg.alignment.momentum);
        s->read("jitter", cfg.alignment.jitter);
        s->read("feature_power", cfg.alignment.feature_power);
        s->finish();
    }
    if (auto s = top.child("shift")) {
        std::string est = shift_estimator_name(cfg.shift.estimator);
        s->read("estimator", est);
        cfg.shift.estimator = parse_shift_estimator(est);
        s->read("clamp_negative_weights", cfg.shift.clamp_negative_weights);
        s->read("bandwidth", cfg.shift.bandwidth);
        s->read("k", cfg.shift.k);
        s->read("k_fraction", cfg.shift.k_fraction);
        s->finish();
    }
    {
        std::string cov = cfg.covariance == CovarianceKind::full ? "full" : "diagonal";
        top.read("covariance", cov);
        if (cov == "full") {
            cfg.covariance = CovarianceKind::full;
        } else if (cov == "diagonal") {
            cfg.covariance = CovarianceKind::diagonal;
        } else {
            throw ParseError("config: covariance must be full or diagonal");
        }
    }
    {
        std::string regime = regime_name(cfg.regime);
        top.read("regime", regime);
        cfg.regime = parse_regime(regime);
    }
    if (auto s = top.child("sensitivity")) {
        s->read("epsilon", cfg.sensitivity_epsilon);
        s->finish();
    }
    if (const json* seeds = top.raw("seeds")) {
        if (!seeds->is_array()) throw ParseError("config: seeds must be an array of non-negative integers");
        cfg.seeds.clear();
        for (const auto& v : *seeds) {
            if (!v.is_number_unsigned()) throw ParseError("config: seeds must be an array of non-negative integers");
            cfg.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    top.read_path("output", cfg.output);
    if (auto s = top.child("report")) {
        std::string timings = cfg.wall_timings ? "wall" : "off";
        s->read("timings", timings);
        if (timings != "off" && timings != "wall") throw ParseError("config: report.timings must be off or wall");
        cfg.wall_timings = timings == "wall";
        s->finish();
    }
    top.finish();
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config: cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

std::string dump_config(const ExperimentConfig& c) {
    const SyntheticSpec& sp = c.data.synthetic;
    json j = {
        {"data",
         {{"source", c.data.source},
          {"path", c.data.path.string()},
          {"seed", c.data.seed},
          {"sessions", c.data.sessions},
          {"bypass_backbone", c.data.bypass_backbone},
          {"fewshot", {{"shots", c.data.fewshot_shots}, {"from_session", c.data.fewshot_from}}},
          {"synthetic",
           {{"base_classes", sp.base_classes},
            {"cil_classes", sp.cil_classes},
            {"input_dim", sp.input_dim},
            {"clusters_per_class", sp.clusters_per_class},
            {"cluster_std", sp.cluster_std},
            {"separation", sp.separation},
            {"train_per_class", sp.train_per_class},
            {"test_per_class", sp.test_per_class},
            {"drift_intensity", sp.drift_intensity},
            {"subspace_rank", sp.subspace_rank},
            {"nuisance_std", sp.nuisance_std}}}}},
        {"backbone",
         {{"input_dim", c.backbone.input_dim},
          {"token_count", c.backbone.token_count},
          {"embed_dim", c.backbone.embed_dim},
          {"depth", c.backbone.depth},
          {"mlp_hidden", c.backbone.mlp_hidden},
          {"heads", c.backbone.heads}}},
        {"pretrain",
         {{"epochs", c.pretrain.schedule.epochs},
          {"lr", c.pretrain.schedule.lr},
          {"batch_size", c.pretrain.schedule.batch_size},
          {"momentum", c.pretrain.schedule.momentum},
          {"seed", c.pretrain.seed},
          {"weights", c.pretrain.weights.string()}}},
        {"pet",
         {{"kind", c.pet.kind},
          {"bottleneck", c.pet.bottleneck},
          {"scale", c.pet.adapter_scale},
          {"placement", c.pet.placement == AdapterPlacement::parallel ? "parallel" : "sequential"},
          {"bias", c.pet.adapter_bias},
          {"init_std", c.pet.adapter_init_std},
          {"prompts", c.pet.prompts},
          {"prompt_init_std", c.pet.prompt_init_std}}},
        {"head", head_name(c.head)},
        {"loss", {{"scale", c.loss.scale}, {"margin", c.loss.margin}, {"kd_weight", c.loss.kd_weight}}},
        {"schedule", schedule_json(c.schedule)},
        {"probe", schedule_json(c.probe)},
        {"alignment",
         {{"mode", align_mode_name(c.mode)},
          {"samples_per_class", c.alignment.samples_per_class},
          {"epochs", c.alignment.epochs},
          {"lr", c.alignment.lr},
          {"normalize", c.alignment.normalize},
          {"batch_size", c.alignment.batch_size},
          {"momentum", c.alignment.momentum},
          {"jitter", c.alignment.jitter},
          {"feature_power", c.alignment.feature_power}}},
        {"shift",
         {{"estimator", shift_estimator_name(c.shift.estimator)},
          {"clamp_negative_weights", c.shift.clamp_negative_weights},
          {"bandwidth", c.shift.bandwidth},
          {"k", c.shift.k},
          {"k_fraction", c.shift.k_fraction}}},
        {"covariance", c.covariance == CovarianceKind::full ? "full" : "diagonal"},
        {"regime", regime_name(c.regime)},
        {"sensitivity", {{"epsilon", c.sensitivity_epsilon}}},
        {"seeds", c.seeds},
        {"output", c.output.string()},
        {"report", {{"timings", c.wall_timings ? "wall" : "off"}}},
    };
    return j.dump(2);
}

// ------------------------------------------------------------------ setup

std::string VariantSpec::id() const {
    std::string out = align_mode_name(mode);
    if (mode != AlignMode::ssca) return out;
    out += std::string("-") + shift_estimator_name(shift.estimator);
    if (shift.estimator == ShiftEstimator::knearest) {
        if (shift.k > 0) {
            out += "-k" + std::to_string(shift.k);
        } else {
            std::ostringstream f;
            f << shift.k_fraction;
            out += "-f" + f.str();
        }
    }
    return out;
}

Workbench prepare(const ExperimentConfig& cfg) {
    cfg.validate();
    Workbench bench;
    if (cfg.data.source == "synthetic") {
        SyntheticData data = generate_synthetic(cfg.data.synthetic, cfg.data.seed);
        bench.base_train = std::move(data.base_train);
        bench.cil_train = std::move(data.cil_train);
        bench.cil_test = std::move(data.cil_test);
    } else {
        bench.fixed_stream = ingest_embeddings(cfg.data.path);
        if (cfg.data.bypass_backbone) return bench;
        if (bench.fixed_stream->dim() != cfg.backbone.input_dim) {
            throw ContractError("config: embedding width differs from backbone.input_dim");
        }
    }
    if (!cfg.pretrain.weights.empty()) {
        bench.weights = FrozenWeights::from_container(load_container(cfg.pretrain.weights));
        if (!(bench.weights.config == cfg.backbone)) {
            throw ContractError("pretrained weights do not match the configured backbone");
        }
    } else if (!bench.base_train.empty()) {
        Rng rng(cfg.pretrain.seed);
        PretrainResult pre = pretrain(cfg.backbone, bench.base_train, cfg.pretrain.schedule, rng);
        bench.weights = std::move(pre.weights);
        bench.pretrain_accuracy = pre.train_accuracy;
    } else {
        Rng rng(cfg.pretrain.seed);
        bench.weights = FrozenWeights::initialize(cfg.backbone, rng);
    }
    bench.weights.set_trainable(false);
    return bench;
}

SessionStream make_stream(const ExperimentConfig& cfg, const Workbench& bench, std::uint64_t seed) {
    SessionStream stream = bench.fixed_stream
                               ? *bench.fixed_stream
                               : split_cil(bench.cil_train, bench.cil_test, cfg.data.sessions,
                                           derive_seed(seed, "class_order"));
    if (cfg.data.fewshot_shots > 0) {
        stream = fewshot_subsample(stream, cfg.data.fewshot_shots, cfg.data.fewshot_from, derive_seed(seed, "fewshot"));
    }
    return stream;
}

Model make_model(const ExperimentConfig& cfg, const FrozenWeights& weights, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "pet_init"));
    const std::string& kind = cfg.pet.kind;
    Model model{weights, NoPet{}};
    if (kind == "adapter") {
        model.pet = AdapterParams::create(weights.config, cfg.pet.bottleneck, cfg.pet.adapter_scale, cfg.pet.placement,
                                          cfg.pet.adapter_bias, rng, cfg.pet.adapter_init_std);
    } else if (kind == "ssf") {
        model.pet = SSFParams::identity(weights.config);
    } else if (kind == "vpt-shallow" || kind == "vpt-deep") {
        model.pet = PromptParams::create(weights.config, cfg.pet.prompts,
                                         kind == "vpt-deep" ? PromptMode::deep : PromptMode::shallow, rng,
                                         cfg.pet.prompt_init_std);
    } else if (kind == "full") {
        model.pet = FullFineTune{weights.clone(true)};
    }
    return model;
}

// ------------------------------------------------------------------ the loop

namespace {

struct VariantState {
    VariantSpec spec;
    ClassifierHead head;
    PrototypeStore store;
    SeedRun run;
};

// Head-only session training on fixed features (embedding-file bypass).
void train_head_only(ClassifierHead& head, const Session& session, const LossConfig& cfg, const Schedule& schedule,
                     std::size_t epochs, Rng& rng) {
    std::vector<Tensor> params;
    for (int c : session.classes) params.push_back(head.row(c));
    Sgd opt(params, schedule.momentum);
    const LabeledSet& data = session.train;
    const std::size_t n = data.size(), bs = schedule.batch_size;
    CosineAnnealing lr(schedule.lr0, epochs * ((n + bs - 1) / bs));
    std::vector<std::size_t> order(n);
    std::size_t step = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
            std::vector<int> y;
            for (std::size_t i : idx) y.push_back(data.labels[i]);
            Tape tape;
            const Tensor loss = cosine_margin_loss(gather(data.features, idx), y, head, session.classes, cfg);
            opt.step(backward(tape, loss), lr.at(step++));
        }
    }
}

ShiftReport estimate(const VariantSpec& spec, const PrototypeStore& store, const Matrix& old_emb,
                     const Matrix& new_emb, const std::vector<int>& labels, const std::vector<int>& classes,
                     const OracleShift* oracle) {
    switch (spec.shift.estimator) {
        case ShiftEstimator::prototype: {
            const auto start = Clock::now();
            const PrototypeMap before = class_means(old_emb, labels, classes);
            const PrototypeMap after = class_means(new_emb, labels, classes);
            ShiftReport r = estimate_shift_prototype(store, before, after, spec.shift.clamp_negative_weights);
            r.seconds = seconds_since(start);
            return r;
        }
        case ShiftEstimator::sample: {
            const auto start = Clock::now();
            const double bw = spec.shift.bandwidth > 0.0 ? spec.shift.bandwidth : median_pairwise_distance(old_emb);
            ShiftReport r = estimate_shift_sample(store, old_emb, new_emb, bw);
            r.seconds = seconds_since(start);
            return r;
        }
        case ShiftEstimator::knearest: {
            const std::size_t n = old_emb.rows();
            std::size_t k = spec.shift.k;
            if (k == 0) {
                k = static_cast<std::size_t>(std::llround(spec.shift.k_fraction * static_cast<double>(n)));
            }
            return estimate_shift_knearest(store, old_emb, new_emb, std::clamp<std::size_t>(k, 1, n));
        }
        case ShiftEstimator::oracle: {
            ShiftReport r;
            r.old_labels = store.labels();
            for (int c : r.old_labels) r.shift[c] = oracle->shift.at(c);
            return r;
        }
    }
    throw ContractError("unknown shift estimator");
}

ShiftDiagnostics diagnose(const PrototypeStore& store, const ShiftReport& report, const OracleShift& oracle) {
    ShiftDiagnostics d;
    std::size_t cos_count = 0;
    for (int c : store.labels()) {
        const Vector& phi = store.at(c).prototype;
        const Vector& shift = report.shift.at(c);
        const Vector& truth = oracle.prototype.at(c);
        Vector moved(phi.size());
        for (std::size_t j = 0; j < phi.size(); ++j) moved[j] = phi[j] + shift[j];
        d.stale_error += std::sqrt(squared_distance(phi, truth));
        d.compensated_error += std::sqrt(squared_distance(moved, truth));
        const Vector& true_shift = oracle.shift.at(c);
        if (norm(shift) > 0.0 && norm(true_shift) > 0.0) {
            d.mean_cosine += cosine_similarity(shift, true_shift);
            ++cos_count;
        }
        ++d.old_classes;
    }
    if (d.old_classes > 0) {
        d.stale_error /= static_cast<double>(d.old_classes);
        d.compensated_error /= static_cast<double>(d.old_classes);
    }
    if (cos_count > 0) d.mean_cosine /= static_cast<double>(cos_count);
    return d;
}

SessionMetrics evaluate(const ClassifierHead& head, const Matrix& features, const LabeledSet& test,
                        const Session& session) {
    SessionMetrics m;
    m.session = session.index;
    m.classes = test.classes();
    std::map<int, std::size_t> pos;
    for (std::size_t i = 0; i < m.classes.size(); ++i) pos[m.classes[i]] = i;
    m.confusion.assign(m.classes.size(), std::vector<std::size_t>(m.classes.size(), 0));
    const std::vector<int> predicted = head.predict(features);
    const std::set<int> current(session.classes.begin(), session.classes.end());
    std::size_t hit = 0, hit_new = 0, n_new = 0, hit_old = 0, n_old = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const int truth = test.labels[i];
        const bool ok = predicted[i] == truth;
        m.confusion[pos.at(truth)][pos.at(predicted[i])] += 1;
        hit += ok;
        if (current.count(truth)) {
            ++n_new;
            hit_new += ok;
        } else {
            ++n_old;
            hit_old += ok;
        }
    }
    m.acc = static_cast<double>(hit) / static_cast<double>(test.size());
    m.acc_new = n_new ? static_cast<double>(hit_new) / static_cast<double>(n_new) : 0.0;
    if (n_old) m.acc_old = static_cast<double>(hit_old) / static_cast<double>(n_old);
    return m;
}

double entry_cosine(const SensitivityReport& a, const SensitivityReport& b) {
    if (a.entries.size() != b.entries.size() || norm(a.entries) == 0.0 || norm(b.entries) == 0.0) return 0.0;
    return cosine_similarity(a.entries, b.entries);
}

struct SeedOutcome {
    std::vector<SeedRun> runs;  // one per variant
    std::optional<double> probe;
    SensitivityTrace sensitivity;
};

SeedOutcome run_seed(const ExperimentConfig& cfg, const Workbench& bench, const std::vector<VariantSpec>& variants,
                     std::uint64_t seed, const RunOptions& options) {
    const SessionStream stream = make_stream(cfg, bench, seed);
    const bool bypass = cfg.data.bypass_backbone;
    Model model = bypass ? Model{} : make_model(cfg, bench.weights, seed);
    const std::size_t dim = bypass ? stream.dim() : cfg.backbone.embed_dim;
    const auto embed = [&](const Model& m, const Matrix& x) { return bypass ? x : extract_features(m, x); };

    AlignmentConfig align = cfg.alignment;
    align.logit_scale = cfg.loss.scale;

    bool any_ssca = false, any_oracle = false;
    for (const auto& v : variants) {
        any_ssca |= v.mode == AlignMode::ssca;
        any_oracle |= v.mode == AlignMode::ssca;  // diagnostics need the oracle for every shift variant
    }

    ClassifierHead train_head(cfg.head, dim);
    Rng head_rng(derive_seed(seed, "head_init"));
    std::vector<VariantState> states;
    for (const auto& v : variants) {
        states.push_back({v, ClassifierHead(cfg.head, dim), PrototypeStore(dim, cfg.covariance), SeedRun{}});
        states.back().run.seed = seed;
    }
    std::map<int, Matrix> retained;  // evaluation-only copy of old training inputs
    SeedOutcome outcome;
    outcome.sensitivity.seed = seed;

    for (const Session& session : stream.sessions) {
        const std::size_t t = session.index;
        try {
            train_head.add_classes(session.classes, t, head_rng);
            const Model old_model = bypass ? Model{} : model.snapshot();
            const bool shifting = any_ssca && t >= 2;
            Matrix old_emb;
            if (shifting) old_emb = embed(old_model, session.train.features);

            if (options.collect_sensitivity && !bypass) {
                outcome.sensitivity.sessions.push_back(
                    parameter_sensitivity(model, train_head, session, cfg.loss, cfg.sensitivity_epsilon));
            }

            const bool train_pet = cfg.regime == Regime::all_sessions || (cfg.regime == Regime::first_session && t == 1);
            Rng train_rng(derive_seed(seed, "train", t));
            const auto train_start = Clock::now();
            double last_loss = 0.0;
            if (bypass) {
                train_head_only(train_head, session, cfg.loss, cfg.schedule, cfg.schedule.epochs_for(t), train_rng);
            } else {
                SessionTrainOptions opts;
                opts.session_index = t;
                opts.epochs = cfg.schedule.epochs_for(t);
                opts.train_pet = train_pet;
                opts.teacher = &old_model;
                const SessionTrainResult r =
                    train_session(model, train_head, session, cfg.loss, cfg.schedule, opts, train_rng);
                if (!r.epoch_loss.empty()) last_loss = r.epoch_loss.back();
            }
            const double train_s = seconds_since(train_start);

            const Matrix new_emb = embed(model, session.train.features);
            const auto new_stats = compute_prototypes(new_emb, session.train.labels, session.classes, cfg.covariance, t);

            std::optional<OracleShift> oracle;
            if (shifting && any_oracle) {
                std::map<int, Matrix> before, after;
                for (const auto& [label, inputs] : retained) {
                    before.emplace(label, embed(old_model, inputs));
                    after.emplace(label, embed(model, inputs));
                }
                oracle = oracle_true_shift(before, after);
            }

            const LabeledSet test = stream.cumulative_test(t);
            const Matrix test_emb = embed(model, test.features);

            for (VariantState& st : states) {
                st.head.copy_rows_from(train_head, session.classes);
                Timings timings;
                timings.train_s = train_s;
                std::optional<ShiftDiagnostics> diag;
                if (st.spec.mode == AlignMode::ssca && t >= 2) {
                    const ShiftReport report = estimate(st.spec, st.store, old_emb, new_emb, session.train.labels,
                                                        session.classes, oracle ? &*oracle : nullptr);
                    timings.shift_s = report.seconds;
                    if (oracle) diag = diagnose(st.store, report, *oracle);
                    update_prototypes(st.store, report, new_stats);
                } else {
                    for (const auto& [label, stats] : new_stats) st.store.insert(label, stats);
                }
                if (st.spec.mode != AlignMode::none && t >= 2) {
                    Rng align_rng(derive_seed(seed, "align", t));
                    const auto align_start = Clock::now();
                    retrain_unified_classifier(st.head, st.store, align, align_rng);
                    timings.align_s = seconds_since(align_start);
                }
                SessionMetrics m = evaluate(st.head, test_emb, test, session);
                m.timings = timings;
                m.shift = diag;
                st.run.sessions.push_back(std::move(m));
                st.run.train_loss.push_back(last_loss);
            }

            for (int c : session.classes) {
                Matrix rows(0, session.train.dim());
                for (std::size_t i : session.train.indices_of(c)) rows.append_row(session.train.features.row(i));
                retained.emplace(c, std::move(rows));
            }
        } catch (const Error& e) {
            throw Error("seed " + std::to_string(seed) + ", session " + std::to_string(t) + ": " + e.what());
        }
    }

    for (VariantState& st : states) {
        std::vector<double> accs;
        for (const auto& m : st.run.sessions) accs.push_back(m.acc);
        st.run.a_last = accs.back();
        st.run.a_avg = mean_of(accs);
        outcome.runs.push_back(std::move(st.run));
    }
    if (options.linear_probe) {
        Rng probe_rng(derive_seed(seed, "probe"));
        const LabeledSet train = stream.all_train();
        const LabeledSet test = stream.cumulative_test(stream.size());
        outcome.probe = bypass ? linear_probe_features(train, test, cfg.probe, probe_rng)
                               : linear_probe(model, train, test, cfg.probe, probe_rng);
    }
    const auto& sens = outcome.sensitivity.sessions;
    for (std::size_t i = 1; i < sens.size(); ++i) {
        outcome.sensitivity.consecutive_cosine.push_back(entry_cosine(sens[i - 1], sens[i]));
    }
    return outcome;
}

}  // namespace

ExperimentReport run_variants(const ExperimentConfig& cfg, const Workbench& bench,
                              const std::vector<VariantSpec>& variants, const RunOptions& options,
                              std::vector<SensitivityTrace>* sensitivity) {
    cfg.validate();
    if (variants.empty()) throw ContractError("run_variants: no variants");
    ExperimentReport report;
    report.pretrain_accuracy = bench.pretrain_accuracy;
    for (const auto& v : variants) {
        VariantReport vr;
        vr.variant = v;
        vr.run_id = cfg.pet.kind + "-" + head_name(cfg.head) + "-" + regime_name(cfg.regime) + "-" + v.id();
        report.variants.push_back(std::move(vr));
    }
    for (std::uint64_t seed : cfg.seeds) {
        SeedOutcome out = run_seed(cfg, bench, variants, seed, options);
        for (std::size_t i = 0; i < variants.size(); ++i) report.variants[i].runs.push_back(std::move(out.runs[i]));
        if (out.probe) report.probe_accuracy.push_back(*out.probe);
        if (sensitivity) sensitivity->push_back(std::move(out.sensitivity));
    }
    for (auto& vr : report.variants) {
        std::vector<double> last, avg;
        for (const auto& r : vr.runs) {
            last.push_back(r.a_last);
            avg.push_back(r.a_avg);
        }
        vr.a_last_mean = mean_of(last);
        vr.a_last_std = std_of(last);
        vr.a_avg_mean = mean_of(avg);
        vr.a_avg_std = std_of(avg);
    }
    return report;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const Workbench& bench) {
    return run_variants(cfg, bench, {VariantSpec{cfg.mode, cfg.shift}});
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, prepare(cfg)); }

// ------------------------------------------------------------------ output

std::string jsonl_lines(const VariantReport& variant, bool wall_timings) {
    std::string out;
    for (const auto& run : variant.runs) {
        for (const auto& m : run.sessions) {
            json line;
            line["run_id"] = variant.run_id;
            line["seed"] = run.seed;
            line["session"] = m.session;
            line["acc"] = m.acc;
            line["acc_new"] = m.acc_new;
            line["acc_old"] = m.acc_old ? json(*m.acc_old) : json(nullptr);
            line["a_last"] = run.a_last;
            line["a_avg"] = run.a_avg;
            const Timings t = wall_timings ? m.timings : Timings{};
            line["timings"] = {{"train_s", t.train_s}, {"shift_s", t.shift_s}, {"align_s", t.align_s}};
            if (m.shift) {
                line["shift"] = {{"old_classes", m.shift->old_classes},
                                 {"stale_error", m.shift->stale_error},
                                 {"compensated_error", m.shift->compensated_error},
                                 {"mean_cosine", m.shift->mean_cosine}};
            }
            out += line.dump();
            out += '\n';
        }
    }
    return out;
}

void write_report(const ExperimentReport& report, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json summary;
    summary["pretrain_accuracy"] = report.pretrain_accuracy;
    if (!report.probe_accuracy.empty()) summary["probe_accuracy"] = report.probe_accuracy;
    std::ofstream timings(dir / "timings.jsonl");
    for (const auto& vr : report.variants) {
        std::ofstream(dir / (vr.run_id + ".jsonl")) << jsonl_lines(vr, cfg.wall_timings);
        summary["runs"].push_back({{"run_id", vr.run_id},
                                   {"a_last_mean", vr.a_last_mean},
                                   {"a_last_std", vr.a_last_std},
                                   {"a_avg_mean", vr.a_avg_mean},
                                   {"a_avg_std", vr.a_avg_std}});
        for (const auto& run : vr.runs) {
            const auto cdir = dir / vr.run_id / ("seed" + std::to_string(run.seed));
            std::filesystem::create_directories(cdir);
            for (const auto& m : run.sessions) {
                std::ofstream csv(cdir / ("confusion_s" + std::to_string(m.session) + ".csv"));
                csv << "true\\pred";
                for (int c : m.classes) csv << ',' << c;
                csv << '\n';
                for (std::size_t r = 0; r < m.classes.size(); ++r) {
                    csv << m.classes[r];
                    for (std::size_t v : m.confusion[r]) csv << ',' << v;
                    csv << '\n';
                }
                timings << json{{"run_id", vr.run_id},
                                {"seed", run.seed},
                                {"session", m.session},
                                {"train_s", m.timings.train_s},
                                {"shift_s", m.timings.shift_s},
                                {"align_s", m.timings.align_s}}
                               .dump()
                        << '\n';
            }
        }
    }
    std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
}

// ------------------------------------------------------------------ suites

std::vector<ShiftBenchSize> default_shift_bench_sizes() {
    return {{1000, 100, 10, 64}, {2000, 100, 10, 64}, {5000, 100, 10, 64}, {10000, 100, 10, 64}};
}

std::vector<ShiftBenchRow> shift_bench(const std::vector<ShiftBenchSize>& sizes, std::uint64_t seed,
                                       std::size_t repeats) {
    std::vector<ShiftBenchRow> rows;
    for (const auto& size : sizes) {
        if (size.n == 0 || size.old_classes == 0 || size.new_classes == 0 || size.dim == 0) {
            throw ContractError("shift_bench: sizes must be positive");
        }
        if (size.n < size.new_classes) throw ContractError("shift_bench: need at least one sample per new class");
        Rng rng(derive_seed(seed, "shift_bench", rows.size()));
        Matrix old_emb(size.n, size.dim), new_emb(size.n, size.dim);
        std::vector<int> labels(size.n);
        std::vector<int> classes(size.new_classes);
        std::iota(classes.begin(), classes.end(), static_cast<int>(size.old_classes));
        for (std::size_t i = 0; i < size.n; ++i) {
            labels[i] = classes[i % size.new_classes];
            for (std::size_t j = 0; j < size.dim; ++j) {
                old_emb(i, j) = rng.normal();
                new_emb(i, j) = old_emb(i, j) + 0.1 * rng.normal();
            }
        }
        PrototypeStore store(size.dim, CovarianceKind::diagonal);
        for (std::size_t c = 0; c < size.old_classes; ++c) {
            ClassStatistics s;
            s.prototype.resize(size.dim);
            for (auto& v : s.prototype) v = rng.normal();
            s.covariance = Matrix(size.dim, size.dim);
            s.count = 1;
            store.insert(static_cast<int>(c), std::move(s));
        }
        const double bandwidth = median_pairwise_distance(old_emb);

        ShiftBenchRow row;
        row.size = size;
        row.prototype_s = row.sample_s = INFINITY;
        for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
            auto start = Clock::now();
            const PrototypeMap before = class_means(old_emb, labels, classes);
            const PrototypeMap after = class_means(new_emb, labels, classes);
            (void)estimate_shift_prototype(store, before, after);
            row.prototype_s = std::min(row.prototype_s, seconds_since(start));

            start = Clock::now();
            (void)estimate_shift_sample(store, old_emb, new_emb, bandwidth);
            row.sample_s = std::min(row.sample_s, seconds_since(start));
        }
        row.speedup = row.sample_s / row.prototype_s;
        row.asserted = size.n >= 1000 && size.old_classes >= 50;
        row.passed = !row.asserted || row.prototype_s * 5.0 <= row.sample_s;
        rows.push_back(row);
    }
    return rows;
}

const AblationCell& AblationReport::find(const std::string& table, const std::string& name) const {
    for (const auto& c : cells)
        if (c.table == table && c.name == name) return c;
    throw ContractError("ablation report has no cell " + table + "/" + name);
}

namespace {

AblationCell cell_of(const std::string& table, const std::string& name, const VariantReport& vr) {
    AblationCell c;
    c.table = table;
    c.name = name;
    c.a_avg_mean = vr.a_avg_mean;
    c.a_avg_std = vr.a_avg_std;
    c.a_last_mean = vr.a_last_mean;
    c.a_last_std = vr.a_last_std;
    std::vector<double> errors;
    for (const auto& run : vr.runs)
        for (const auto& m : run.sessions)
            if (m.shift) errors.push_back(m.shift->compensated_error);
    if (!errors.empty()) c.oracle_error = mean_of(errors);
    return c;
}

}  // namespace

AblationReport pet_comparison(const ExperimentConfig& cfg, const Workbench& bench) {
    AblationReport out;
    for (const char* kind : {"adapter", "ssf", "vpt-shallow", "vpt-deep"}) {
        ExperimentConfig c = cfg;
        c.pet.kind = kind;
        const ExperimentReport r = run_experiment(c, bench);
        out.cells.push_back(cell_of("pet", kind, r.variants.front()));
    }
    return out;
}

AblationReport classifier_ablation(const ExperimentConfig& cfg, const Workbench& bench) {
    AblationReport out;
    const std::vector<VariantSpec> variants{{AlignMode::none, cfg.shift}, {AlignMode::ca, cfg.shift},
                                            {AlignMode::ssca, cfg.shift}};
    for (HeadKind head : {HeadKind::linear, HeadKind::cosine}) {
        ExperimentConfig c = cfg;
        c.head = head;
        const ExperimentReport r = run_variants(c, bench, variants);
        for (const auto& vr : r.variants) {
            out.cells.push_back(
                cell_of("classifier", std::string(head_name(head)) + "/" + align_mode_name(vr.variant.mode), vr));
        }
    }
    return out;
}

AblationReport regime_probe(const ExperimentConfig& cfg, const Workbench& bench) {
    AblationReport out;
    for (Regime regime : {Regime::none, Regime::first_session, Regime::all_sessions}) {
        ExperimentConfig c = cfg;
        c.regime = regime;
        RunOptions options;
        options.linear_probe = true;
        const ExperimentReport r = run_variants(c, bench, {VariantSpec{c.mode, c.shift}}, options);
        AblationCell cell = cell_of("regime", regime_name(regime), r.variants.front());
        cell.probe_mean = mean_of(r.probe_accuracy);
        out.cells.push_back(cell);
    }
    return out;
}

AblationReport shift_comparison(const ExperimentConfig& cfg, const Workbench& bench) {
    std::vector<VariantSpec> variants;
    const auto add = [&](ShiftEstimator e, double fraction) {
        VariantSpec v{AlignMode::ssca, cfg.shift};
        v.shift.estimator = e;
        v.shift.k = 0;
        v.shift.k_fraction = fraction;
        variants.push_back(v);
    };
    add(ShiftEstimator::prototype, 0.1);
    add(ShiftEstimator::sample, 0.1);
    add(ShiftEstimator::knearest, 0.1);
    add(ShiftEstimator::knearest, 0.5);
    add(ShiftEstimator::knearest, 1.0);
    add(ShiftEstimator::oracle, 0.1);
    const ExperimentReport r = run_variants(cfg, bench, variants);
    AblationReport out;
    for (const auto& vr : r.variants) out.cells.push_back(cell_of("shift", vr.variant.id(), vr));
    return out;
}

AblationReport ablation_suite(const ExperimentConfig& cfg) {
    const Workbench bench = prepare(cfg);
    AblationReport out;
    for (auto part : {pet_comparison(cfg, bench), classifier_ablation(cfg, bench), regime_probe(cfg, bench),
                      shift_comparison(cfg, bench)}) {
        out.cells.insert(out.cells.end(), part.cells.begin(), part.cells.end());
    }
    return out;
}

std::string ablation_json(const AblationReport& report) {
    json cells = json::array();
    for (const auto& c : report.cells) {
        json j = {{"table", c.table},
                  {"name", c.name},
                  {"a_avg_mean", c.a_avg_mean},
                  {"a_avg_std", c.a_avg_std},
                  {"a_last_mean", c.a_last_mean},
                  {"a_last_std", c.a_last_std}};
        if (c.probe_mean) j["probe_mean"] = *c.probe_mean;
        if (c.oracle_error) j["oracle_error"] = *c.oracle_error;
        cells.push_back(j);
    }
    return json{{"cells", cells}}.dump(2);
}

std::vector<SensitivityTrace> sensitivity_report(const ExperimentConfig& cfg, const Workbench& bench) {
    if (cfg.data.sessions < 2 && !bench.fixed_stream) throw ContractError("sensitivity_report: needs >= 2 sessions");
    if (cfg.data.bypass_backbone) throw ContractError("sensitivity_report: needs a backbone");
    RunOptions options;
    options.collect_sensitivity = true;
    std::vector<SensitivityTrace> traces;
    run_variants(cfg, bench, {VariantSpec{AlignMode::none, cfg.shift}}, options, &traces);
    if (traces.front().sessions.size() < 2) throw ContractError("sensitivity_report: needs >= 2 sessions");
    return traces;
}

std::string sensitivity_json(const std::vector<SensitivityTrace>& traces) {
    json out = json::array();
    for (const auto& tr : traces) {
        json sessions = json::array();
        for (std::size_t i = 0; i < tr.sessions.size(); ++i) {
            const auto& s = tr.sessions[i];
            json groups = json::array();
            for (std::size_t g = 0; g < s.groups.size(); ++g) groups.push_back({{"group", s.groups[g]}, {"s", s.values[g]}});
            sessions.push_back({{"session", i + 1}, {"groups", groups}, {"most_sensitive", s.most_sensitive()}});
        }
        out.push_back({{"seed", tr.seed}, {"sessions", sessions}, {"consecutive_cosine", tr.consecutive_cosine}});
    }
    return out.dump(2);
}

}  // namespace cilkit
