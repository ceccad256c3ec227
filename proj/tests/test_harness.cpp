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

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "cilkit/error.hpp"
#include "cilkit/harness.hpp"

using namespace cilkit;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// A few seconds end to end: 8 incremental classes, 16-d inputs, tiny model.
ExperimentConfig tiny_config() {
    ExperimentConfig c;
    auto& s = c.data.synthetic;
    s.base_classes = 4;
    s.cil_classes = 8;
    s.input_dim = 16;
    s.subspace_rank = 4;
    s.train_per_class = 24;
    s.test_per_class = 10;
    c.data.sessions = 2;
    c.backbone = BackboneConfig{16, 4, 8, 1, 16, 2};
    c.pretrain.schedule.epochs = 3;
    c.schedule = Schedule{0.01, 2, 1, 16, 0.9};
    c.alignment.samples_per_class = 16;
    c.alignment.epochs = 2;
    c.probe = Schedule{0.1, 3, 3, 32, 0.9};
    c.seeds = {1, 2};
    c.pet.bottleneck = 4;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cilkit_test_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CILKIT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string parse_error(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ParseError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("config parsing is strict") {
    CHECK(parse_error(R"({"data": {"sessions": 3}})").empty());
    CHECK(parse_config(R"({"data": {"sessions": 3}, "pet": {"kind": "ssf"}})").pet.kind == "ssf");

    CHECK(parse_error(R"({"colour": 1})").find("colour") != std::string::npos);
    CHECK(parse_error(R"({"data": {"synthetic": {"sepration": 2}}})").find("data.synthetic.sepration") !=
          std::string::npos);
    CHECK(parse_error(R"({"data": {"sessions": "five"}})").find("data.sessions") != std::string::npos);
    CHECK_FALSE(parse_error(R"({"alignment": {"mode": "sometimes"}})").empty());
    CHECK_FALSE(parse_error(R"({"seeds": [1, -2]})").empty());
    CHECK_FALSE(parse_error("{not json").empty());

    const ExperimentConfig c = tiny_config();
    CHECK(dump_config(parse_config(dump_config(c))) == dump_config(c));
}

TEST_CASE("config validation") {
    ExperimentConfig c = tiny_config();
    c.pet.kind = "lora";
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = tiny_config();
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("single-session runs") {
    ExperimentConfig c = tiny_config();
    c.data.sessions = 1;
    c.seeds = {3};
    const ExperimentReport r = run_experiment(c);
    REQUIRE(r.variants.size() == 1);
    const SeedRun& run = r.variants[0].runs.at(0);
    REQUIRE(run.sessions.size() == 1);
    CHECK(run.a_last == run.sessions[0].acc);
    CHECK(run.a_avg == run.sessions[0].acc);
    CHECK_FALSE(run.sessions[0].acc_old.has_value());
}

TEST_CASE("report invariants") {
    ExperimentConfig c = tiny_config();
    c.data.sessions = 3;
    const Workbench bench = prepare(c);
    const ExperimentReport r = run_experiment(c, bench);
    const VariantReport& v = r.variants.at(0);
    CHECK(v.run_id == "adapter-cosine-all_sessions-ssca-prototype");
    for (const SeedRun& run : v.runs) {
        REQUIRE(run.sessions.size() == 3);
        const SessionStream stream = make_stream(c, bench, run.seed);
        double sum = 0.0;
        for (const SessionMetrics& m : run.sessions) {
            sum += m.acc;
            for (double a : {m.acc, m.acc_new, m.acc_old.value_or(0.0)}) {
                CHECK(a >= 0.0);
                CHECK(a <= 1.0);
            }
            CHECK(m.acc_old.has_value() == (m.session > 1));
            CHECK(m.shift.has_value() == (m.session > 1));

            // Confusion rows sum to the per-class test counts of the cumulative set.
            const LabeledSet test = stream.cumulative_test(m.session);
            REQUIRE(m.classes.size() == m.confusion.size());
            std::size_t hits = 0, total = 0;
            for (std::size_t i = 0; i < m.classes.size(); ++i) {
                std::size_t row = 0;
                for (std::size_t n : m.confusion[i]) row += n;
                CHECK(row == test.indices_of(m.classes[i]).size());
                hits += m.confusion[i][i];
                total += row;
            }
            CHECK(static_cast<double>(hits) / static_cast<double>(total) == doctest::Approx(m.acc).epsilon(1e-12));
        }
        CHECK(std::abs(run.a_avg - sum / 3.0) <= 1e-12);
        CHECK(run.a_last == run.sessions.back().acc);
    }

    // JSON lines carry the documented fields and recompute A_avg.
    std::istringstream lines(jsonl_lines(v, false));
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) {
        const json j = json::parse(line);
        for (const char* key : {"run_id", "seed", "session", "acc", "acc_new", "acc_old", "a_last", "a_avg", "timings"})
            CHECK_MESSAGE(j.contains(key), key);
        CHECK(j["timings"].contains("train_s"));
        CHECK(j["timings"].contains("shift_s"));
        CHECK(j["timings"].contains("align_s"));
        CHECK(j["acc_old"].is_null() == (j["session"].get<int>() == 1));
        ++count;
    }
    CHECK(count == 2 * 3);
}

TEST_CASE("runs are reproducible") {
    const ExperimentConfig c = tiny_config();
    const ExperimentReport a = run_experiment(c);
    const ExperimentReport b = run_experiment(c);
    CHECK(jsonl_lines(a.variants[0], false) == jsonl_lines(b.variants[0], false));

    const fs::path dir = scratch("report");
    write_report(a, c, dir);
    const std::string id = a.variants[0].run_id;
    CHECK(fs::exists(dir / (id + ".jsonl")));
    CHECK(fs::exists(dir / "summary.json"));
    CHECK(fs::exists(dir / "timings.jsonl"));
    const fs::path csv = dir / id / "seed1" / "confusion_s2.csv";
    REQUIRE(fs::exists(csv));
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK_FALSE(header.empty());
    fs::remove_all(dir);
}

TEST_CASE("variants share a trajectory without interfering") {
    const ExperimentConfig c = tiny_config();
    const Workbench bench = prepare(c);
    ShiftConfig sample;
    sample.estimator = ShiftEstimator::sample;
    const ExperimentReport together = run_variants(
        c, bench, {{AlignMode::none, {}}, {AlignMode::ca, {}}, {AlignMode::ssca, {}}, {AlignMode::ssca, sample}});
    REQUIRE(together.variants.size() == 4);
    ExperimentConfig alone = c;
    alone.mode = AlignMode::ca;
    CHECK(jsonl_lines(run_experiment(alone, bench).variants[0], false) == jsonl_lines(together.variants[1], false));
    alone.mode = AlignMode::ssca;
    alone.shift = sample;
    CHECK(jsonl_lines(run_experiment(alone, bench).variants[0], false) == jsonl_lines(together.variants[3], false));
}

TEST_CASE("without drift, shift-compensated and stale alignment agree") {
    // A PET that never trains leaves every prototype in place, so the
    // compensated store equals the stale one.
    ExperimentConfig c = tiny_config();
    c.data.sessions = 3;
    c.regime = Regime::none;
    c.seeds = {1, 2, 3, 4, 5};
    const ExperimentReport r = run_variants(c, prepare(c), {{AlignMode::ca, {}}, {AlignMode::ssca, {}}});
    for (std::size_t s = 0; s < 5; ++s) {
        const double diff = r.variants[1].runs[s].a_avg - r.variants[0].runs[s].a_avg;
        CHECK(std::abs(diff) <= 0.01);
        for (const auto& m : r.variants[1].runs[s].sessions)
            if (m.shift) CHECK(m.shift->compensated_error == doctest::Approx(m.shift->stale_error).epsilon(1e-9));
    }
}

TEST_CASE("sensitivity traces") {
    ExperimentConfig c = tiny_config();
    c.data.sessions = 3;
    c.seeds = {1};
    const Workbench bench = prepare(c);
    const auto one = sensitivity_report(c, bench);
    c.sensitivity_epsilon *= 2.0;
    const auto two = sensitivity_report(c, bench);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0].sessions.size() == 3);
    CHECK(one[0].consecutive_cosine.size() == 2);
    for (std::size_t t = 0; t < 3; ++t) {
        const auto& a = one[0].sessions[t];
        const auto& b = two[0].sessions[t];
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            CHECK(a.values[i] <= 0.0);
            CHECK(b.values[i] == doctest::Approx(2.0 * a.values[i]).epsilon(1e-9));
        }
    }
    CHECK(json::parse(sensitivity_json(one)).is_array());
}

TEST_CASE("shift bench") {
    const auto rows = shift_bench({{10, 5, 10, 8}, {200, 20, 5, 8}}, 1, 2);
    REQUIRE(rows.size() == 2);
    CHECK_FALSE(rows[0].asserted);
    CHECK(rows[0].passed);
    CHECK(rows[0].prototype_s > 0.0);
    CHECK(rows[0].sample_s > 0.0);
    CHECK_FALSE(rows[1].asserted);
    CHECK(default_shift_bench_sizes().size() == 4);
}

TEST_CASE("command line exit codes") {
    const fs::path dir = scratch("cli");
    ExperimentConfig c = tiny_config();
    c.seeds = {1};
    c.output = dir / "out";
    std::ofstream(dir / "good.json") << dump_config(c);
    std::ofstream(dir / "unknown.json") << R"({"data": {"sesions": 3}})";
    std::ofstream(dir / "bad.csv") << "session,split,label,f0\n1,train,0,oops\n";
    std::ofstream(dir / "good.csv") << "session,split,label,f0\n1,train,0,1.5\n1,test,0,1\n";
    const std::string good = (dir / "good.json").string();

    CHECK(run_cli("run --config " + good) == 0);
    CHECK(fs::exists(dir / "out" / "summary.json"));
    CHECK(run_cli("run --config " + (dir / "unknown.json").string()) == 2);
    CHECK(run_cli("run --config " + good + " --seed 1,x") == 2);
    CHECK(run_cli("run --config " + good + " --mode sometimes") != 0);
    CHECK(run_cli("run --config " + good + " --pet lora") != 0);
    CHECK(run_cli("ingest-check " + (dir / "bad.csv").string()) == 2);
    CHECK(run_cli("ingest-check " + (dir / "good.csv").string()) == 0);
    CHECK(run_cli("ingest-check " + (dir / "missing.csv").string()) == 2);
    CHECK(run_cli("frobnicate") != 0);
    fs::remove_all(dir);
}
