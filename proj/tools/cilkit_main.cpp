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

// Command-line front end. Every subcommand takes an optional JSON config;
// flags override the matching config entries.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cilkit/container.hpp"
#include "cilkit/data.hpp"
#include "cilkit/error.hpp"
#include "cilkit/harness.hpp"

using namespace cilkit;

namespace {

struct Common {
    std::string config;
    std::string seeds;
    std::string out;
    std::string mode;
    std::string pet;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON config file");
    app->add_option("--seed", c.seeds, "comma-separated seeds, e.g. 1,2,3");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--mode", c.mode, "alignment mode")->check(CLI::IsMember({"none", "ca", "ssca"}));
    app->add_option("--pet", c.pet, "PET kind")
        ->check(CLI::IsMember({"adapter", "ssf", "vpt-shallow", "vpt-deep", "none", "full"}));
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (!c.seeds.empty()) {
        cfg.seeds.clear();
        std::stringstream ss(c.seeds);
        std::string item;
        while (std::getline(ss, item, ',')) {
            std::size_t used = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(item, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != item.size()) throw ParseError("--seed: '" + item + "' is not a non-negative integer");
            cfg.seeds.push_back(v);
        }
    }
    if (!c.out.empty()) cfg.output = c.out;
    if (!c.mode.empty()) cfg.mode = parse_align_mode(c.mode);
    if (!c.pet.empty()) cfg.pet.kind = c.pet;
    cfg.validate();
    return cfg;
}

void print_cells(const AblationReport& report) {
    std::printf("%-12s %-22s %10s %10s %10s\n", "table", "cell", "A_avg", "A_last", "probe");
    for (const auto& c : report.cells) {
        std::printf("%-12s %-22s %6.2f±%-4.2f %6.2f±%-4.2f", c.table.c_str(), c.name.c_str(), 100 * c.a_avg_mean,
                    100 * c.a_avg_std, 100 * c.a_last_mean, 100 * c.a_last_std);
        if (c.probe_mean) std::printf(" %6.2f", 100 * *c.probe_mean);
        std::printf("\n");
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream(path) << text << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cilkit: prototype-compensated class-incremental learning on a desk-scale transformer"};
    app.require_subcommand(1);
    Common common;

    auto* pre = app.add_subcommand("pretrain", "pretrain the backbone on the base classes and save it");
    auto* run = app.add_subcommand("run", "run the incremental loop and write JSONL reports");
    auto* ablate = app.add_subcommand("ablate", "PET, classifier, regime and shift-estimator comparisons");
    auto* probe = app.add_subcommand("probe", "linear probing after none / first-session / all-session adaptation");
    auto* sens = app.add_subcommand("sensitivity", "per-session parameter sensitivity");
    auto* bench = app.add_subcommand("shift-bench", "time prototype- vs sample-based shift estimation");
    auto* gen = app.add_subcommand("gen-data", "export a synthetic stream as an embedding CSV");
    auto* ingest = app.add_subcommand("ingest-check", "validate an embedding CSV");
    for (auto* sub : {pre, run, ablate, probe, sens, bench, gen}) add_common(sub, common);
    std::string ingest_path;
    ingest->add_option("path", ingest_path, "embedding CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*ingest) {
            const SessionStream s = ingest_embeddings(ingest_path);
            std::printf("ok: %zu sessions, dim %zu\n", s.size(), s.dim());
            for (const auto& session : s.sessions) {
                std::printf("  session %zu: %zu classes, %zu train, %zu test\n", session.index, session.classes.size(),
                            session.train.size(), session.test.size());
            }
            return 0;
        }
        const ExperimentConfig cfg = resolve(common);
        if (*gen) {
            const SyntheticData data = generate_synthetic(cfg.data.synthetic, cfg.data.seed);
            const SessionStream stream =
                split_cil(data.cil_train, data.cil_test, cfg.data.sessions, derive_seed(cfg.seeds.front(), "class_order"));
            const auto path = cfg.output / "stream.csv";
            std::filesystem::create_directories(cfg.output);
            export_embeddings(path, stream);
            std::printf("wrote %s\n", path.string().c_str());
            return 0;
        }
        if (*bench) {
            const auto rows = shift_bench(default_shift_bench_sizes());
            bool ok = true;
            std::printf("%7s %6s %6s %4s %12s %12s %8s\n", "N", "C_old", "C_new", "d", "prototype_s", "sample_s",
                        "speedup");
            for (const auto& r : rows) {
                std::printf("%7zu %6zu %6zu %4zu %12.6f %12.6f %8.1f%s\n", r.size.n, r.size.old_classes,
                            r.size.new_classes, r.size.dim, r.prototype_s, r.sample_s, r.speedup,
                            r.passed ? "" : "  FAIL (< 5x)");
                ok &= r.passed;
            }
            return ok ? 0 : 1;
        }
        const Workbench wb = prepare(cfg);
        if (*pre) {
            const auto path = cfg.output / "backbone.cilb";
            std::filesystem::create_directories(cfg.output);
            save_container(path, wb.weights.to_container());
            std::printf("base train accuracy %.4f, wrote %s\n", wb.pretrain_accuracy, path.string().c_str());
        } else if (*run) {
            const ExperimentReport report = run_experiment(cfg, wb);
            write_report(report, cfg, cfg.output);
            for (const auto& v : report.variants) {
                std::printf("%s: A_last %.2f±%.2f  A_avg %.2f±%.2f\n", v.run_id.c_str(), 100 * v.a_last_mean,
                            100 * v.a_last_std, 100 * v.a_avg_mean, 100 * v.a_avg_std);
            }
        } else if (*ablate) {
            AblationReport report;
            for (auto part : {pet_comparison(cfg, wb), classifier_ablation(cfg, wb), regime_probe(cfg, wb),
                              shift_comparison(cfg, wb)}) {
                report.cells.insert(report.cells.end(), part.cells.begin(), part.cells.end());
            }
            write_text(cfg.output / "ablation.json", ablation_json(report));
            print_cells(report);
        } else if (*probe) {
            const AblationReport report = regime_probe(cfg, wb);
            write_text(cfg.output / "probe.json", ablation_json(report));
            print_cells(report);
        } else if (*sens) {
            const auto traces = sensitivity_report(cfg, wb);
            write_text(cfg.output / "sensitivity.json", sensitivity_json(traces));
            for (const auto& tr : traces) {
                std::printf("seed %llu:", static_cast<unsigned long long>(tr.seed));
                for (std::size_t i = 0; i < tr.sessions.size(); ++i) {
                    std::printf(" s%zu=%s", i + 1, tr.sessions[i].most_sensitive().c_str());
                }
                for (double c : tr.consecutive_cosine) std::printf(" cos=%.3f", c);
                std::printf("\n");
            }
        }
        return 0;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
