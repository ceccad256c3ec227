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

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. The default benchmark is prepared once and
// shared by the experiment-level criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "cilkit/alignment.hpp"
#include "cilkit/container.hpp"
#include "cilkit/error.hpp"
#include "cilkit/harness.hpp"
#include "gradcheck.hpp"
#include "op_catalog.hpp"

using namespace cilkit;
using namespace cilkit::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------------ criteria

Outcome gradient_oracle() {
    const auto start = Clock::now();
    Rng rng(2026);
    std::size_t ops = 0, instances = 0, failures = 0;
    double worst = 0.0;
    std::string first;
    for (const auto& entry : op_catalog()) {
        ++ops;
        for (int i = 0; i < 20; ++i) {
            const OpCase c = entry.make(rng);
            const GradCheck r = check_gradients(c.f, c.inputs, 1e-5, 1e-4);
            ++instances;
            worst = std::max(worst, r.worst);
            if (!r.ok && failures++ == 0) first = entry.name + ": " + r.detail;
        }
    }
    const double secs = seconds_since(start);
    Outcome o;
    o.pass = failures == 0 && secs < 60.0;
    o.detail = fmt("%zu ops x 20 instances, %zu failures, worst ratio %.3g, %.1f s", ops, failures, worst, secs);
    if (!first.empty()) o.detail += "; first: " + first;
    return o;
}

Outcome pet_identity(const ExperimentConfig& cfg, const Workbench& bench) {
    const BackboneConfig& c = cfg.backbone;
    const FrozenWeights& w = bench.weights;
    Rng rng(11);
    Matrix xm(16, c.input_dim);
    for (auto& v : xm.data()) v = rng.normal();
    const Tensor x = xm.to_tensor();
    const Tensor base = forward(w, NoPet{}, x);
    double worst = 0.0;
    const auto diff = [&](const PetAttachment& pet) {
        worst = std::max(worst, max_abs_diff(forward(w, pet, x).data(), base.data()));
    };
    diff(AdapterParams::create(c, cfg.pet.bottleneck, 1.0, AdapterPlacement::parallel, false, rng));
    diff(AdapterParams::create(c, cfg.pet.bottleneck, 1.0, AdapterPlacement::sequential, true, rng));
    diff(SSFParams::identity(c));
    diff(PromptParams::create(c, 0, PromptMode::shallow, rng));
    diff(PromptParams::create(c, 0, PromptMode::deep, rng));

    // One training session per PET kind on the default stream.
    const SessionStream stream = make_stream(cfg, bench, 1);
    const FrozenWeights before = w.clone(false);
    bool frozen_ok = true;
    for (const char* kind : {"adapter", "ssf", "vpt-shallow", "vpt-deep"}) {
        ExperimentConfig k = cfg;
        k.pet.kind = kind;
        Model model = make_model(k, w, 1);
        ClassifierHead head(HeadKind::cosine, c.embed_dim);
        head.add_classes(stream.sessions[0].classes, 1, rng);
        SessionTrainOptions opt;
        opt.epochs = 1;
        train_session(model, head, stream.sessions[0], cfg.loss, cfg.schedule, opt, rng);
        frozen_ok = frozen_ok && model.frozen.bit_equal(before) && w.bit_equal(before);
    }
    return {worst <= 1e-12 && frozen_ok,
            fmt("max |PET - frozen| = %.3g over 5 identity PETs; frozen bytes %s after adapter/ssf/vpt sessions", worst,
                frozen_ok ? "identical" : "CHANGED")};
}

Outcome local_masking() {
    std::size_t checked = 0, nonzero = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (HeadKind kind : {HeadKind::cosine, HeadKind::linear}) {
            Rng rng(500 + seed);
            ClassifierHead head(kind, 8);
            head.add_classes(std::vector<int>{0, 1, 2, 3}, 1, rng, 1.0);
            head.add_classes(std::vector<int>{4, 5, 6}, 2, rng, 1.0);
            const Tensor f = random_tensor(rng, {6, 8});
            std::vector<int> y;
            for (int i = 0; i < 6; ++i) y.push_back(4 + static_cast<int>(rng.below(3)));
            Tape tape;
            const Gradients g = backward(tape, cosine_margin_loss(f, y, head, std::vector<int>{4, 5, 6}, {}));
            for (int old = 0; old < 4; ++old) {
                const Tensor gr = g.of(head.row(old));
                for (double v : gr.data()) {
                    ++checked;
                    nonzero += v != 0.0;
                }
            }
        }
    }
    return {nonzero == 0, fmt("%zu old-row gradient entries over 40 instances, %zu nonzero", checked, nonzero)};
}

Outcome shift_analytics() {
    Rng rng(77);
    const std::size_t d = 16;
    PrototypeStore store(d, CovarianceKind::full);
    for (int c = 0; c < 12; ++c) {
        Vector p(d);
        for (auto& v : p) v = std::abs(rng.normal()) + 0.1;
        store.insert(c, {p, Matrix::identity(d), 1, 10});
    }
    PrototypeMap before, after;
    for (int i = 0; i < 6; ++i) {
        Vector a(d), b(d);
        for (auto& v : a) v = rng.normal() + 0.5;
        for (auto& v : b) v = rng.normal() + 0.5;
        before[100 + i] = a;
        after[100 + i] = b;
    }

    double zero = 0.0;
    for (const auto& [c, s] : estimate_shift_prototype(store, before, before).shift)
        for (double v : s) zero = std::max(zero, std::abs(v));

    PrototypeMap one_before{{100, Vector(d, 1.0)}}, one_after{{100, after.at(100)}};
    Vector drift(d);
    for (std::size_t j = 0; j < d; ++j) drift[j] = one_after[100][j] - one_before[100][j];
    double single = 0.0;
    for (const auto& [c, s] : estimate_shift_prototype(store, one_before, one_after).shift)
        single = std::max(single, max_abs_diff(s, drift));

    const ShiftReport base = estimate_shift_prototype(store, before, after);
    PrototypeMap pb, pa;
    const int perm[] = {4, 2, 5, 0, 3, 1};
    for (int i = 0; i < 6; ++i) {
        pb[200 + perm[i]] = before.at(100 + i);
        pa[200 + perm[i]] = after.at(100 + i);
    }
    double permuted = 0.0;
    for (const auto& [c, s] : estimate_shift_prototype(store, pb, pa).shift)
        permuted = std::max(permuted, max_abs_diff(s, base.shift.at(c)));

    return {zero == 0.0 && single <= 1e-12 && permuted <= 1e-12,
            fmt("no drift max|shift| = %g; single class max err %.3g; permutation max diff %.3g", zero, single,
                permuted)};
}

Outcome shift_oracle(const ExperimentConfig& base, const Workbench& bench, double prepare_s) {
    const auto start = Clock::now();
    ExperimentConfig cfg = base;
    cfg.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    cfg.mode = AlignMode::ssca;
    cfg.shift.estimator = ShiftEstimator::prototype;
    const ExperimentReport r = run_experiment(cfg, bench);
    const double secs = seconds_since(start) + prepare_s;
    std::size_t wins = 0;
    std::string per_seed;
    for (const SeedRun& run : r.variants.front().runs) {
        double stale = 0.0, comp = 0.0, n = 0.0;
        for (const auto& m : run.sessions) {
            if (!m.shift) continue;
            const double k = static_cast<double>(m.shift->old_classes);
            stale += k * m.shift->stale_error;
            comp += k * m.shift->compensated_error;
            n += k;
        }
        stale /= n;
        comp /= n;
        wins += comp < stale;
        per_seed += fmt(" %.3f/%.3f", comp, stale);
    }
    return {wins >= 8 && secs < 300.0,
            fmt("%zu/10 seeds compensated < stale, %.1f s (incl. pretraining); per seed compensated/stale:", wins,
                secs) +
                per_seed};
}

Outcome classifier_ordering(const ExperimentConfig& base, const Workbench& bench) {
    ExperimentConfig cfg = base;
    cfg.seeds = {1, 2, 3, 4, 5};
    const AblationReport r = classifier_ablation(cfg, bench);
    const auto a = [&](const char* name) { return r.find("classifier", name).a_avg_mean; };
    const bool cosine = a("cosine/ssca") >= a("cosine/ca") && a("cosine/ca") >= a("cosine/none") &&
                        a("cosine/ssca") - a("cosine/none") >= 0.01;
    const bool linear = a("linear/ssca") >= a("linear/ca") && a("linear/ca") >= a("linear/none");
    return {cosine && linear, fmt("A_avg cosine none/ca/ssca = %.2f/%.2f/%.2f, linear = %.2f/%.2f/%.2f",
                                  100 * a("cosine/none"), 100 * a("cosine/ca"), 100 * a("cosine/ssca"),
                                  100 * a("linear/none"), 100 * a("linear/ca"), 100 * a("linear/ssca"))};
}

Outcome probe_ordering(const ExperimentConfig& cfg, const Workbench& bench) {
    const AblationReport r = regime_probe(cfg, bench);
    const double none = *r.find("regime", "none").probe_mean;
    const double first = *r.find("regime", "first_session").probe_mean;
    const double all = *r.find("regime", "all_sessions").probe_mean;
    const double band = 0.005;
    return {all - first >= -band && first - none >= -band,
            fmt("probe accuracy none/first/all = %.2f/%.2f/%.2f over %zu seeds", 100 * none, 100 * first, 100 * all,
                cfg.seeds.size())};
}

Outcome pet_ordering(const ExperimentConfig& cfg, const Workbench& bench) {
    const AblationReport r = pet_comparison(cfg, bench);
    const double adapter = r.find("pet", "adapter").a_avg_mean;
    bool top = true;
    std::string detail = "A_avg";
    for (const auto& c : r.cells) {
        detail += fmt(" %s=%.2f", c.name.c_str(), 100 * c.a_avg_mean);
        if (c.name != "adapter" && c.a_avg_mean > adapter) top = false;
    }
    return {top, detail + fmt(" over %zu seeds", cfg.seeds.size())};
}

Outcome shift_timing() {
    const auto rows = shift_bench(default_shift_bench_sizes());
    bool ok = rows.size() == 4;
    bool at5000 = false;
    std::string detail;
    for (const auto& r : rows) {
        detail += fmt(" [N=%zu: %.2g s vs %.2g s, %.1fx]", r.size.n, r.prototype_s, r.sample_s, r.speedup);
        ok = ok && r.passed;
        if (r.size.n == 5000 && r.size.old_classes == 100 && r.size.new_classes == 10 && r.size.dim == 64)
            at5000 = r.speedup >= 5.0;
    }
    return {ok && at5000, "prototype vs sample:" + detail};
}

Outcome sensitivity_contract(const ExperimentConfig& base, const Workbench& bench) {
    ExperimentConfig cfg = base;
    cfg.seeds = {1};
    const auto one = sensitivity_report(cfg, bench);
    cfg.sensitivity_epsilon *= 2.0;
    const auto two = sensitivity_report(cfg, bench);
    bool nonpositive = true;
    double worst = 0.0;
    for (std::size_t t = 0; t < one[0].sessions.size(); ++t) {
        const auto& a = one[0].sessions[t];
        const auto& b = two[0].sessions[t];
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            nonpositive = nonpositive && a.values[i] <= 0.0 && b.values[i] <= 0.0;
            const double expect = 2.0 * a.values[i];
            if (expect != 0.0) worst = std::max(worst, std::abs(b.values[i] - expect) / std::abs(expect));
        }
    }
    const bool pairs = one[0].consecutive_cosine.size() + 1 == one[0].sessions.size();
    std::string cosines;
    for (double c : one[0].consecutive_cosine) cosines += fmt(" %.3f", c);
    return {nonpositive && worst <= 1e-9 && pairs,
            fmt("all s_i <= 0: %s; eps-doubling max rel err %.2g; %zu consecutive cosines:", nonpositive ? "yes" : "no",
                worst, one[0].consecutive_cosine.size()) +
                cosines};
}

Outcome sampling_statistics() {
    const std::size_t d = 8, n = 10000;
    Rng rng(31);
    PrototypeStore store(d, CovarianceKind::full);
    for (int c = 0; c < 4; ++c) {
        Matrix a(d, d), sigma(d, d);
        for (auto& v : a.data()) v = rng.normal() * 0.6;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                for (std::size_t k = 0; k < d; ++k) sigma(i, j) += a(i, k) * a(j, k);
                if (i == j) sigma(i, j) += 0.05;
            }
        Vector mean(d);
        for (auto& v : mean) v = rng.normal() * 2.0;
        store.insert(c, {mean, sigma, 1, 100});
    }
    AlignmentConfig cfg;
    cfg.samples_per_class = n;
    Rng draw(32);
    const LabeledSet s = sample_class_features(store, cfg, draw);
    double mean_ratio = 0.0, cov_ratio = 0.0;  // worst |error| / allowed
    for (int c = 0; c < 4; ++c) {
        const auto& truth = store.at(c);
        const auto idx = s.indices_of(c);
        Vector mean(d, 0.0);
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < d; ++j) mean[j] += s.features(i, j) / static_cast<double>(idx.size());
        double sigma_max = 0.0, frob = 0.0;
        for (std::size_t j = 0; j < d; ++j) sigma_max = std::max(sigma_max, std::sqrt(truth.covariance(j, j)));
        for (double v : truth.covariance.data()) frob += v * v;
        frob = std::sqrt(frob);
        for (std::size_t j = 0; j < d; ++j)
            mean_ratio = std::max(mean_ratio, std::abs(mean[j] - truth.prototype[j]) / (4.0 * sigma_max / std::sqrt(n)));
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) {
                double cov = 0.0;
                for (std::size_t i : idx) cov += (s.features(i, a) - mean[a]) * (s.features(i, b) - mean[b]);
                cov /= static_cast<double>(idx.size() - 1);
                cov_ratio = std::max(cov_ratio, std::abs(cov - truth.covariance(a, b)) / (5.0 * frob / std::sqrt(n)));
            }
    }
    return {mean_ratio <= 1.0 && cov_ratio <= 1.0,
            fmt("S_n=%zu, d=%zu, 4 classes: worst mean error %.2f of bound, worst covariance error %.2f of bound", n, d,
                mean_ratio, cov_ratio)};
}

Outcome cli_determinism(const ExperimentConfig& base) {
    const fs::path dir = fs::temp_directory_path() / "cilkit_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    ExperimentConfig cfg = base;
    cfg.seeds = {1, 2};
    std::ofstream(dir / "config.json") << dump_config(cfg);
    std::string outputs[2];
    int codes[2];
    for (int i = 0; i < 2; ++i) {
        const fs::path out = dir / ("run" + std::to_string(i));
        const std::string cmd = std::string(CILKIT_CLI) + " run --config " + (dir / "config.json").string() +
                                " --out " + out.string() + " >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        codes[i] = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        for (const auto& e : fs::directory_iterator(out))
            if (e.path().extension() == ".jsonl" && e.path().filename() != "timings.jsonl") outputs[i] += slurp(e.path());
    }
    fs::remove_all(dir);
    const bool same = !outputs[0].empty() && outputs[0] == outputs[1];
    return {codes[0] == 0 && codes[1] == 0 && same,
            fmt("two `run` invocations (seeds 1,2): exit %d/%d, %zu JSONL bytes, %s", codes[0], codes[1],
                outputs[0].size(), same ? "byte-identical" : "DIFFERENT")};
}

Outcome format_round_trips(const ExperimentConfig& cfg, const Workbench& bench) {
    std::vector<std::string> problems;
    const auto expect = [&](bool ok, const std::string& what) {
        if (!ok) problems.push_back(what);
    };

    std::stringstream weights;
    write_container(weights, bench.weights.to_container());
    const std::string bytes = weights.str();
    expect(FrozenWeights::from_container(read_container(weights)).bit_equal(bench.weights), "weights round-trip");

    const SessionStream stream = make_stream(cfg, bench, 1);
    const Model model = make_model(cfg, bench.weights, 1);
    PrototypeStore store(cfg.backbone.embed_dim, CovarianceKind::full);
    for (auto& [c, s] : compute_prototypes(model, stream.sessions[0].train, stream.sessions[0].classes,
                                           CovarianceKind::full, 1))
        store.insert(c, s);
    std::stringstream protos;
    write_container(protos, store.to_container());
    const PrototypeStore back = PrototypeStore::from_container(read_container(protos));
    bool same = back.labels() == store.labels();
    for (int c : store.labels())
        same = same && back.at(c).prototype == store.at(c).prototype && back.at(c).covariance == store.at(c).covariance;
    expect(same, "prototype store round-trip");

    std::stringstream csv;
    write_embeddings(csv, stream);
    expect(parse_embeddings(csv).sessions == stream.sessions, "embedding CSV round-trip");

    // Diagnostics must name where parsing failed.
    const auto message = [](const std::function<void()>& f) -> std::string {
        try {
            f();
        } catch (const ParseError& e) {
            return e.what();
        }
        return "";
    };
    std::string truncated = bytes.substr(0, bytes.size() / 2);
    const std::string m1 = message([&] {
        std::stringstream in(truncated);
        read_container(in);
    });
    expect(m1.find("at byte") != std::string::npos, "truncated container diagnostic: '" + m1 + "'");
    const std::string m2 = message([] {
        std::istringstream in("session,split,label,f0\n1,train,0,0.5\n1,train,0,x\n");
        parse_embeddings(in);
    });
    expect(m2.find("line 3") != std::string::npos && m2.find("f0") != std::string::npos,
           "CSV diagnostic: '" + m2 + "'");
    const std::string m3 = message([] { parse_config(R"({"alignment": {"epoch": 3}})"); });
    expect(m3.find("alignment.epoch") != std::string::npos, "config diagnostic: '" + m3 + "'");

    std::string detail = fmt("weights %zu bytes, %zu prototypes, %zu-session CSV round-tripped; diagnostics: \"%s\"",
                             bytes.size(), store.size(), stream.size(), m2.c_str());
    for (const auto& p : problems) detail += "; FAILED " + p;
    return {problems.empty(), detail};
}

}  // namespace

int main() {
    const ExperimentConfig cfg;  // the shipped default benchmark
    int failed = 0;
    const auto report = [&](int n, const std::function<Outcome()>& check) {
        const auto start = Clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %d: %s (%s) [%.1f s]\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                    seconds_since(start));
        std::fflush(stdout);
    };

    const auto prep_start = Clock::now();
    const Workbench bench = prepare(cfg);
    const double prepare_s = seconds_since(prep_start);
    std::printf("prepared default benchmark in %.1f s (base train accuracy %.3f)\n", prepare_s,
                bench.pretrain_accuracy);

    report(1, gradient_oracle);
    report(2, [&] { return pet_identity(cfg, bench); });
    report(3, local_masking);
    report(4, shift_analytics);
    report(5, [&] { return shift_oracle(cfg, bench, prepare_s); });
    report(6, [&] { return classifier_ordering(cfg, bench); });
    report(7, [&] { return probe_ordering(cfg, bench); });
    report(8, [&] { return pet_ordering(cfg, bench); });
    report(9, shift_timing);
    report(10, [&] { return sensitivity_contract(cfg, bench); });
    report(11, sampling_statistics);
    report(12, [&] { return cli_determinism(cfg); });
    report(13, [&] { return format_round_trips(cfg, bench); });

    std::printf("%d of 13 criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
