#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

#include "nocdda/pipeline.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
}

// Runs the CLI with `args`; `env` is prepended verbatim (e.g. "NOCDDA_SEED=3").
Result run(const std::string& args, const std::string& env = "env -u NOCDDA_SEED") {
    static int counter = 0;
    const auto err_path = fs::temp_directory_path() / ("nocdda_cli_stderr_" + std::to_string(counter++));
    const std::string cmd = env + " " + NOCDDA_CLI_PATH + " " + args + " 2>" + err_path.string();
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (fgets(buf.data(), int(buf.size()), pipe)) r.out += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err_path);
    fs::remove(err_path);
    return r;
}

// Small pipeline so adapt/ablate finish quickly.
fs::path write_fast_config(const fs::path& dir) {
    nocdda::PipelineConfig c;
    c.dataset.n_per_domain = 200;
    c.classifier_hidden = {16, 16};
    c.epsilon_hidden = {32, 32};
    c.discriminator_hidden = {16};
    c.T = 50;
    c.active_steps = 10;
    c.pretrain.epochs = 20;
    c.adversarial_rounds = 20;
    c.unified.epochs = 5;
    c.epsilon.epochs = 10;
    c.finetune.epochs = 5;
    c.samples_per_class = 10;
    const auto path = dir / "fast.json";
    std::ofstream(path) << nocdda::to_json(c).dump(2);
    return path;
}

}  // namespace

TEST(Cli, GenDataWritesCsvSidecarAndConfig) {
    const auto dir = nocdda::testing::temp_dir("cli_gen");
    const auto r = run("gen-data --n 50 --rotation 45 --seed 3 --name moons --out-dir " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(trim(r.out), (dir / "moons.csv").string());
    EXPECT_TRUE(fs::exists(dir / "moons.json"));
    EXPECT_TRUE(fs::exists(dir / "moons.config.json"));
    const auto bundle = nocdda::load_csv((dir / "moons.csv").string());
    EXPECT_EQ(bundle, nocdda::gen_two_moons_shift(50, 45, 0.1, 3));
}

TEST(Cli, AdaptReportsAccuracyInUnitInterval) {
    const auto dir = nocdda::testing::temp_dir("cli_adapt");
    const auto cfg = write_fast_config(dir);
    const auto r = run("adapt --config " + cfg.string() + " --seed 1 --trajectories --out-dir " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path report_path = trim(r.out);
    ASSERT_TRUE(fs::exists(report_path));
    EXPECT_EQ(report_path.parent_path().filename().string().rfind("run-", 0), 0u);
    const auto report = nlohmann::json::parse(slurp(report_path));
    EXPECT_EQ(report["status"], "ok");
    const double acc = report["target_accuracy"];
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    EXPECT_EQ(report["seed"], 1);

    const auto run_dir = report_path.parent_path();
    const auto s = run("sample --run-dir " + run_dir.string() + " --n 5 --out-dir " + (dir / "s").string());
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(nlohmann::json::parse(s.out)["generated"], 10);
    const auto e = run("eval --config " + cfg.string() + " --seed 1 --classifier " + (run_dir / "classifier.json").string() +
                       " --out-dir " + (dir / "e").string());
    ASSERT_EQ(e.code, 0) << e.err;
    EXPECT_EQ(nlohmann::json::parse(e.out)["target_accuracy"].get<double>(), acc);
    const auto p = run("plot --trajectories " + (run_dir / "trajectories.csv").string() + " --out-dir " + dir.string());
    ASSERT_EQ(p.code, 0) << p.err;
    const auto svg = slurp(dir / "trajectories.svg");
    std::size_t lines = 0;
    for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++lines;
    EXPECT_EQ(lines, 20u);
}

TEST(Cli, ParseErrorsExitWithTwoAndShowHelp) {
    const auto r = run("adapt --no-such-flag");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--no-such-flag"), std::string::npos);
    EXPECT_NE(r.err.find("--guidance-scale"), std::string::npos);
    EXPECT_EQ(run("gen-data --n many").code, 2);
    EXPECT_EQ(run("sample").code, 2);
}

TEST(Cli, StageFailureExitsWithOneAndNamesTheStage) {
    const auto dir = nocdda::testing::temp_dir("cli_fail");
    const auto r = run("adapt --rotation 200 --out-dir " + dir.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("error: [data]"), std::string::npos) << r.err;
    bool found = false;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto report = nlohmann::json::parse(slurp(entry.path() / "report.json"));
        EXPECT_EQ(report["status"], "failed");
        EXPECT_EQ(report["failed_stage"], "data");
        found = true;
    }
    EXPECT_TRUE(found);
    const auto bad = run("adapt --config " + (dir / "missing.json").string());
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("[config]"), std::string::npos);
}

TEST(Cli, SeedFallsBackToEnvironmentButFlagWins) {
    const auto dir = nocdda::testing::temp_dir("cli_seed");
    const auto cfg = write_fast_config(dir);
    const auto from_env =
        run("train-source --config " + cfg.string() + " --out-dir " + (dir / "a").string(), "NOCDDA_SEED=7");
    ASSERT_EQ(from_env.code, 0) << from_env.err;
    EXPECT_EQ(nlohmann::json::parse(from_env.out)["seed"], 7);
    const auto from_flag =
        run("train-source --config " + cfg.string() + " --seed 2 --out-dir " + (dir / "b").string(), "NOCDDA_SEED=7");
    EXPECT_EQ(nlohmann::json::parse(from_flag.out)["seed"], 2);
    const auto neither = run("train-source --config " + cfg.string() + " --out-dir " + (dir / "c").string());
    EXPECT_EQ(nlohmann::json::parse(neither.out)["seed"], 0);
    EXPECT_EQ(run("train-source --out-dir " + (dir / "d").string(), "NOCDDA_SEED=abc").code, 1);
}

TEST(Cli, AblateIsByteIdenticalAcrossRuns) {
    const auto dir = nocdda::testing::temp_dir("cli_ablate");
    const auto cfg = write_fast_config(dir);
    const std::string args = "ablate --config " + cfg.string() +
                             " --tds-list 1 --gen-list 10 --variants baseline,NOCDDA --n-seeds 2 --out-dir ";
    const auto a = run(args + (dir / "a").string());
    const auto b = run(args + (dir / "b").string());
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    const fs::path ga = trim(a.out), gb = trim(b.out);
    EXPECT_EQ(ga.parent_path().filename(), gb.parent_path().filename());
    EXPECT_EQ(slurp(ga), slurp(gb));
    EXPECT_EQ(slurp(ga.parent_path() / "cells.csv"), slurp(gb.parent_path() / "cells.csv"));
    EXPECT_EQ(slurp(ga).substr(0, slurp(ga).find('\n')), "tds,baseline@0,NOCDDA@10");
    EXPECT_EQ(run("ablate --variants G,nope --out-dir " + (dir / "c").string()).code, 1);
}

TEST(Cli, PlotOfEmptyFileIsAValidSvgWithAxesOnly) {
    const auto dir = nocdda::testing::temp_dir("cli_plot_empty");
    std::ofstream(dir / "t.csv").close();
    const auto r = run("plot --trajectories " + (dir / "t.csv").string() + " --out-dir " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto svg = slurp(dir / "trajectories.svg");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find("class=\"axes\""), std::string::npos);
    EXPECT_EQ(svg.find("polyline"), std::string::npos);
}

TEST(Cli, PlotRejectsHighDimensionsUnlessCoordinatesArePicked) {
    const auto dir = nocdda::testing::temp_dir("cli_plot_3d");
    std::ofstream(dir / "t.csv") << "class_id,sample,t,x_0,x_1,x_2\n0,0,10,1,2,3\n0,0,0,0,0,0\n";
    const auto r = run("plot --trajectories " + (dir / "t.csv").string() + " --out-dir " + dir.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("--dims"), std::string::npos);
    EXPECT_EQ(run("plot --trajectories " + (dir / "t.csv").string() + " --dims 0,2 --out-dir " + dir.string()).code, 0);
    EXPECT_EQ(run("plot --trajectories " + (dir / "t.csv").string() + " --dims 0,5 --out-dir " + dir.string()).code, 1);
}

TEST(Cli, SingleTrajectoryHasDistinctStartAndEnd) {
    const auto dir = nocdda::testing::temp_dir("cli_plot_line");
    std::ofstream(dir / "t.csv") << "class_id,sample,t,x_0,x_1\n1,0,10,-1,2\n1,0,5,0,1\n1,0,0,1,-1\n";
    ASSERT_EQ(run("plot --trajectories " + (dir / "t.csv").string() + " --out-dir " + dir.string()).code, 0);
    const auto svg = slurp(dir / "trajectories.svg");
    const std::regex start(R"re(<circle class="start" cx="([^"]+)" cy="([^"]+)")re");
    const std::regex end(R"re(<circle class="end" cx="([^"]+)" cy="([^"]+)")re");
    std::smatch ms, me;
    ASSERT_TRUE(std::regex_search(svg, ms, start));
    ASSERT_TRUE(std::regex_search(svg, me, end));
    EXPECT_TRUE(ms[1] != me[1] || ms[2] != me[2]);
    EXPECT_NE(svg.find("data-class=\"1\""), std::string::npos);
}
