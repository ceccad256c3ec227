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

// Experiment runner: configuration, the full incremental loop, metrics,
// reports and the comparative suites built on top of it.
//
// One seed runs a single backbone/PET trajectory. Because the session loss
// only touches the PET and the current session's head rows, alignment
// variants (none / stale-prototype alignment / shift-compensated alignment
// with any estimator) can share that trajectory: each variant keeps its own
// head and prototype store and consumes its own RNG streams, so results are
// identical to running the variant alone.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cilkit/alignment.hpp"
#include "cilkit/backbone.hpp"
#include "cilkit/data.hpp"
#include "cilkit/prototypes.hpp"
#include "cilkit/training.hpp"

namespace cilkit {

enum class AlignMode { none, ca, ssca };
enum class ShiftEstimator { prototype, sample, knearest, oracle };
enum class Regime { none, first_session, all_sessions };

const char* align_mode_name(AlignMode mode);
const char* shift_estimator_name(ShiftEstimator estimator);
const char* regime_name(Regime regime);
AlignMode parse_align_mode(const std::string& text);
ShiftEstimator parse_shift_estimator(const std::string& text);
Regime parse_regime(const std::string& text);

struct PetConfig {
    std::string kind = "adapter";  // none | adapter | ssf | vpt-shallow | vpt-deep | full
    std::size_t bottleneck = 8;
    double adapter_scale = 1.0;
    AdapterPlacement placement = AdapterPlacement::parallel;
    bool adapter_bias = false;
    double adapter_init_std = 1e-2;
    std::size_t prompts = 4;
    double prompt_init_std = 0.02;
};

struct ShiftConfig {
    ShiftEstimator estimator = ShiftEstimator::prototype;
    bool clamp_negative_weights = true;
    double bandwidth = 0.0;  // sample estimator; 0 = median pairwise distance
    std::size_t k = 0;       // knearest; 0 = use k_fraction
    double k_fraction = 0.1;
};

struct DataConfig {
    std::string source = "synthetic";  // synthetic | file
    std::filesystem::path path;        // embedding CSV when source = file
    SyntheticSpec synthetic;
    std::uint64_t seed = 2024;
    std::size_t sessions = 5;
    std::size_t fewshot_shots = 0;  // 0 = off
    std::size_t fewshot_from = 2;
    bool bypass_backbone = false;
};

struct PretrainConfig {
    PretrainSchedule schedule;
    std::uint64_t seed = 7;
    std::filesystem::path weights;  // load instead of training when set
};

struct ExperimentConfig {
    DataConfig data;
    BackboneConfig backbone;
    PretrainConfig pretrain;
    PetConfig pet;
    HeadKind head = HeadKind::cosine;
    LossConfig loss;
    Schedule schedule;
    AlignmentConfig alignment;
    AlignMode mode = AlignMode::ssca;
    ShiftConfig shift;
    CovarianceKind covariance = CovarianceKind::full;
    Regime regime = Regime::all_sessions;
    Schedule probe{0.1, 30, 30, 64, 0.9};
    double sensitivity_epsilon = 1e-3;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::filesystem::path output = "out";
    bool wall_timings = false;  // write wall-clock timings into the JSONL reports

    void validate() const;
};

/// Strict parse: unknown keys and type mismatches raise ParseError naming the
/// offending key path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);

// --------------------------------------------------------------------- report

struct Timings {
    double train_s = 0.0;
    double shift_s = 0.0;
    double align_s = 0.0;
};

struct ShiftDiagnostics {
    std::size_t old_classes = 0;
    double stale_error = 0.0;        // mean |phi_c - phi_c_true|
    double compensated_error = 0.0;  // mean |phi_c + shift_c - phi_c_true|
    double mean_cosine = 0.0;        // mean cos(shift_c, true shift_c); 0 when undefined
};

struct SessionMetrics {
    std::size_t session = 0;
    double acc = 0.0;
    double acc_new = 0.0;
    std::optional<double> acc_old;  // absent in the first session
    std::vector<int> classes;                      // confusion row/column order
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    Timings timings;
    std::optional<ShiftDiagnostics> shift;  // SSCA variants from session 2 on
};

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<SessionMetrics> sessions;
    double a_last = 0.0;
    double a_avg = 0.0;
    std::vector<double> train_loss;  // last epoch loss per session
};

struct VariantSpec {
    AlignMode mode = AlignMode::ssca;
    ShiftConfig shift;
    std::string id() const;
};

struct VariantReport {
    std::string run_id;
    VariantSpec variant;
    std::vector<SeedRun> runs;
    double a_last_mean = 0.0, a_last_std = 0.0;
    double a_avg_mean = 0.0, a_avg_std = 0.0;
};

struct ExperimentReport {
    std::vector<VariantReport> variants;
    double pretrain_accuracy = 0.0;
    /// Linear-probe accuracy of the final model per seed (when requested).
    std::vector<double> probe_accuracy;
};

/// Prepared inputs shared across seeds: the base data, the CIL pool and the
/// pretrained backbone.
struct Workbench {
    LabeledSet base_train;
    LabeledSet cil_train;
    LabeledSet cil_test;
    std::optional<SessionStream> fixed_stream;  // file source
    FrozenWeights weights;
    double pretrain_accuracy = 0.0;
};

Workbench prepare(const ExperimentConfig& cfg);
SessionStream make_stream(const ExperimentConfig& cfg, const Workbench& bench, std::uint64_t seed);
Model make_model(const ExperimentConfig& cfg, const FrozenWeights& weights, std::uint64_t seed);

struct RunOptions {
    bool linear_probe = false;
    bool collect_sensitivity = false;
};

struct SensitivityTrace {
    std::uint64_t seed = 0;
    std::vector<SensitivityReport> sessions;  // one per session, computed before training
    std::vector<double> consecutive_cosine;   // cos(s_t, s_{t+1}) over entries
};

/// Runs every variant over every seed of `cfg` on shared trajectories.
ExperimentReport run_variants(const ExperimentConfig& cfg, const Workbench& bench,
                              const std::vector<VariantSpec>& variants, const RunOptions& options = {},
                              std::vector<SensitivityTrace>* sensitivity = nullptr);
/// The variant named by cfg.mode and cfg.shift.
ExperimentReport run_experiment(const ExperimentConfig& cfg);
ExperimentReport run_experiment(const ExperimentConfig& cfg, const Workbench& bench);

/// One JSONL file per variant (`<run_id>.jsonl`), confusion matrices under
/// `<run_id>/seed<seed>/confusion_s<t>.csv`, `summary.json`, and a wall-clock
/// sidecar `timings.jsonl`.
void write_report(const ExperimentReport& report, const ExperimentConfig& cfg, const std::filesystem::path& dir);
std::string jsonl_lines(const VariantReport& variant, bool wall_timings);

// --------------------------------------------------------------------- suites

struct ShiftBenchSize {
    std::size_t n = 0, old_classes = 0, new_classes = 0, dim = 0;
};

struct ShiftBenchRow {
    ShiftBenchSize size;
    double prototype_s = 0.0;
    double sample_s = 0.0;
    double speedup = 0.0;
    bool asserted = false;  // N >= 1000 and |C_old| >= 50
    bool passed = true;
};

std::vector<ShiftBenchSize> default_shift_bench_sizes();
/// Wall-clock per estimator per size (minimum over `repeats`). The
/// prototype-based timing includes computing the new-class means under both
/// models; embedding extraction is excluded for both estimators.
std::vector<ShiftBenchRow> shift_bench(const std::vector<ShiftBenchSize>& sizes, std::uint64_t seed = 1,
                                       std::size_t repeats = 5);

struct AblationCell {
    std::string table;  // pet | classifier | regime | shift
    std::string name;
    double a_avg_mean = 0.0, a_avg_std = 0.0;
    double a_last_mean = 0.0, a_last_std = 0.0;
    std::optional<double> probe_mean;
    std::optional<double> oracle_error;  // mean compensated error over sessions and seeds
};

struct AblationReport {
    std::vector<AblationCell> cells;
    const AblationCell& find(const std::string& table, const std::string& name) const;
};

AblationReport pet_comparison(const ExperimentConfig& cfg, const Workbench& bench);
AblationReport classifier_ablation(const ExperimentConfig& cfg, const Workbench& bench);
AblationReport regime_probe(const ExperimentConfig& cfg, const Workbench& bench);
AblationReport shift_comparison(const ExperimentConfig& cfg, const Workbench& bench);
AblationReport ablation_suite(const ExperimentConfig& cfg);
std::string ablation_json(const AblationReport& report);

std::vector<SensitivityTrace> sensitivity_report(const ExperimentConfig& cfg, const Workbench& bench);
std::string sensitivity_json(const std::vector<SensitivityTrace>& traces);

}  // namespace cilkit
