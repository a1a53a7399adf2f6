#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nocdda/pipeline.hpp"
#include "test_support.hpp"

using namespace nocdda;

namespace {

PipelineConfig fast_config(std::uint64_t seed = 0) {
    PipelineConfig c;
    c.dataset.n_per_domain = 200;
    c.classifier_hidden = {16, 16};
    c.epsilon_hidden = {32, 32};
    c.discriminator_hidden = {16};
    c.T = 50;
    c.active_steps = 10;
    c.jump = 5;
    c.pretrain.epochs = 20;
    c.adversarial_rounds = 30;
    c.unified.epochs = 8;
    c.epsilon.epochs = 20;
    c.finetune.epochs = 8;
    c.samples_per_class = 20;
    c.seed = seed;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> stage_names(const RunReport& r) {
    std::vector<std::string> out;
    for (const auto& s : r.stages) out.push_back(s.name);
    return out;
}

}  // namespace

TEST(Config, JsonRoundTripPreservesEveryField) {
    auto c = fast_config(17);
    c.dataset.generator = "gaussian-blobs";
    c.dataset.translation = {1.0, -2.0};
    c.dataset.seed = 99;
    c.selection = SelectionRule::threshold(0.2, 3);
    c.unified_loss = ClassifierLoss::squared_error;
    c.classifier_activation = Activation::tanh;
    c.epsilon_data = "joint";
    c.noise_optimization = false;
    c.realign_after_augmentation = true;
    c.adversarial_opt.adversarial_weight = 0.3;
    const auto j = to_json(c);
    const auto back = config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.dataset.seed, std::optional<std::uint64_t>(99));
    EXPECT_EQ(back.selection.mode, SelectionRule::Mode::threshold);
    EXPECT_EQ(back.unified_loss, ClassifierLoss::squared_error);
}

TEST(Config, PartialJsonOverridesOnlyNamedFields) {
    const auto c = config_from_json(nlohmann::json::parse(R"({"T": 100, "epsilon": {"epochs": 7}})"));
    EXPECT_EQ(c.T, 100u);
    EXPECT_EQ(c.epsilon.epochs, 7u);
    EXPECT_EQ(c.epsilon.batch, PipelineConfig{}.epsilon.batch);
    EXPECT_EQ(c.active_steps, 200u);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"guidance": 2})")), InvalidArgument);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"selection": {"quantile": 0.3}})")), InvalidArgument);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"pretrain": {"lr": 0.1}})")), InvalidArgument);
    auto c = fast_config();
    c.tds_fraction = 0.0;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c = fast_config();
    c.active_steps = 11;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Pipeline, AllStagesOffEqualsSourceOnlyTraining) {
    const auto cfg = apply_variant(fast_config(3), Variant::baseline, 50);
    RunArtifacts art;
    const auto report = run_nocdda(cfg, &art);
    const auto bundle = load_dataset(cfg.dataset, cfg.dataset_seed());
    const auto clf = train_source_classifier(cfg, bundle);
    ASSERT_TRUE(art.classifier.has_value());
    EXPECT_EQ(art.classifier->net, clf.net);
    EXPECT_EQ(*report.target_accuracy, evaluate_target_accuracy(clf, bundle));
    EXPECT_EQ(*report.target_accuracy, *report.pretrain_target_accuracy);
    EXPECT_EQ(report.generated, 0u);
    EXPECT_EQ(stage_names(report), (std::vector<std::string>{"data", "pretrain", "pseudo_label", "select", "evaluate"}));
}

TEST(Pipeline, FullRunVisitsEveryStageAndIsDeterministic) {
    const auto cfg = fast_config(5);
    RunArtifacts art;
    const auto a = run_nocdda(cfg, &art, true);
    const auto b = run_nocdda(cfg);
    EXPECT_EQ(a.to_json(false), b.to_json(false));
    EXPECT_EQ(stage_names(a), (std::vector<std::string>{"data", "pretrain", "pseudo_label", "adversarial", "select",
                                                        "unified", "epsilon", "generate", "augment", "evaluate"}));
    EXPECT_EQ(a.generated, 40u);
    ASSERT_TRUE(a.purity.has_value());
    EXPECT_GE(*a.purity, 0.0);
    EXPECT_LE(a.generated_kept, a.generated);
    EXPECT_EQ(art.trajectories.size(), a.generated);
    EXPECT_EQ(art.adversarial_log.size(), 30u);
    EXPECT_EQ(a.priors.size(), 2u);
    for (const auto& p : a.priors) EXPECT_EQ(p["sigma_scale"], 0.5);
    EXPECT_TRUE(a.to_json(true).contains("timing_seconds"));
    EXPECT_FALSE(a.to_json(false).contains("timing_seconds"));
}

TEST(Pipeline, WithoutUnificationGuidanceUsesASeparateClassifier) {
    const auto cfg = apply_variant(fast_config(2), Variant::G, 20);
    const auto r = run_nocdda(cfg);
    const auto names = stage_names(r);
    EXPECT_NE(std::find(names.begin(), names.end(), "guidance_classifier"), names.end());
    EXPECT_EQ(std::find(names.begin(), names.end(), "unified"), names.end());
    EXPECT_EQ(r.config["noise_optimization"], false);
}

TEST(Pipeline, TdsFractionSubsamplesThePool) {
    auto cfg = apply_variant(fast_config(1), Variant::baseline, 0);
    cfg.tds_fraction = 0.25;
    const auto r = run_nocdda(cfg);
    EXPECT_EQ(r.stages[0].metrics["target_pool"], 40);
}

TEST(Pipeline, FailuresCarryStageAndPartialReport) {
    auto cfg = fast_config();
    cfg.dataset.rotation_degrees = 200;
    try {
        run_nocdda(cfg);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "data");
        EXPECT_EQ(e.partial().status, "failed");
        EXPECT_TRUE(e.partial().stages.empty());
    }
    cfg = fast_config();
    cfg.epsilon.learning_rate = 1e12;
    cfg.epsilon.clip_norm = 0.0;
    try {
        run_nocdda(cfg);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "epsilon");
        EXPECT_EQ(e.partial().failed_stage, "epsilon");
        EXPECT_TRUE(e.partial().source_accuracy.has_value());
        EXPECT_EQ(stage_names(e.partial()).back(), "unified");
    }
}

TEST(Pipeline, TargetLabelsOnlyAffectTheReportedAccuracy) {
    const auto dir = nocdda::testing::temp_dir("labels");
    const auto bundle = gen_two_moons_shift(200, 30, 0.1, 4);
    save_csv(bundle, (dir / "a.csv").string());
    // Same rows with every target label flipped.
    std::ifstream in(dir / "a.csv");
    std::ofstream out(dir / "b.csv");
    std::string line;
    std::getline(in, line);
    out << line << '\n';
    while (std::getline(in, line)) {
        auto f = detail::split_fields(line);
        if (f[3] == "target") f[2] = f[2] == "0" ? "1" : "0";
        for (std::size_t k = 0; k < f.size(); ++k) out << (k ? "," : "") << f[k];
        out << '\n';
    }
    out.close();
    std::filesystem::copy_file(dir / "a.json", dir / "b.json");

    auto cfg = fast_config(8);
    cfg.dataset.generator = "csv";
    RunArtifacts aa, ab;
    cfg.dataset.path = (dir / "a.csv").string();
    const auto ra = run_nocdda(cfg, &aa);
    cfg.dataset.path = (dir / "b.csv").string();
    const auto rb = run_nocdda(cfg, &ab);
    EXPECT_EQ(aa.classifier->net, ab.classifier->net);
    EXPECT_EQ(aa.epsilon->net, ab.epsilon->net);
    ASSERT_EQ(aa.generated.size(), ab.generated.size());
    for (std::size_t i = 0; i < aa.generated.size(); ++i) EXPECT_EQ(aa.generated[i].features, ab.generated[i].features);
    EXPECT_EQ(ra.hcpl_census, rb.hcpl_census);
    EXPECT_EQ(ra.purity, rb.purity);
    EXPECT_NEAR(*ra.target_accuracy + *rb.target_accuracy, 1.0, 1e-12);
}

TEST(Pipeline, RunDirectoryNameHashesConfigWithoutSeed) {
    auto a = fast_config(1), b = fast_config(2);
    const auto na = run_directory_name(a), nb = run_directory_name(b);
    EXPECT_EQ(na.substr(0, na.size() - 3), nb.substr(0, nb.size() - 3));
    EXPECT_EQ(na.substr(na.size() - 3), "-s1");
    b.guidance_scale = 2.0;
    EXPECT_NE(run_directory_name(b).substr(0, 20), nb.substr(0, 20));
}

TEST(Pipeline, RunDirectoryContainsArtifacts) {
    const auto cfg = fast_config(4);
    RunArtifacts art;
    const auto report = run_nocdda(cfg, &art, true);
    const auto dir = nocdda::testing::temp_dir("rundir");
    write_run_directory(dir, report, art, cfg);
    for (const char* f : {"report.json", "config.json", "schedule.json", "classifier.json", "epsilon.json", "hcpl.csv",
                          "generated.csv", "trajectories.csv", "adversarial.csv"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    const auto clf = classifier_from_json(nlohmann::json::parse(slurp(dir / "classifier.json")));
    EXPECT_EQ(clf.net, art.classifier->net);
    EXPECT_EQ(load_hcpl_csv((dir / "hcpl.csv").string()).size(), art.hcpl->size());
}

TEST(Variants, ToggleTheExpectedStages) {
    const auto base = fast_config();
    const auto b = apply_variant(base, Variant::baseline, 30);
    EXPECT_FALSE(b.adversarial || b.classifier_unification || b.noise_optimization);
    EXPECT_EQ(b.samples_per_class, 0u);
    const auto g = apply_variant(base, Variant::G, 30);
    EXPECT_TRUE(g.adversarial);
    EXPECT_FALSE(g.classifier_unification || g.noise_optimization);
    EXPECT_EQ(g.samples_per_class, 30u);
    const auto gcu = apply_variant(base, Variant::G_CU, 30);
    EXPECT_TRUE(gcu.classifier_unification);
    EXPECT_FALSE(gcu.noise_optimization);
    const auto full = apply_variant(base, Variant::NOCDDA, 30);
    EXPECT_TRUE(full.classifier_unification && full.noise_optimization);
    EXPECT_EQ(parse_variant("G+CU"), Variant::G_CU);
    EXPECT_FALSE(parse_variant("g+cu").has_value());
}

TEST(Grid, SingleCellMatchesDirectRun) {
    const auto base = fast_config();
    const auto grid = run_ablation_grid(base, {0.5}, {20}, {Variant::NOCDDA}, {6});
    ASSERT_EQ(grid.cells.size(), 1u);
    auto cfg = apply_variant(base, Variant::NOCDDA, 20);
    cfg.tds_fraction = 0.5;
    cfg.seed = 6;
    EXPECT_EQ(grid.cells[0].report.to_json(false), run_nocdda(cfg).to_json(false));
    EXPECT_EQ(grid.median_accuracy(0.5, Variant::NOCDDA, 20), *grid.cells[0].report.target_accuracy);
}

TEST(Grid, BaselineRunsOncePerSeedAndFailuresBecomeNA) {
    auto base = fast_config();
    base.dataset.rotation_degrees = 200;
    const auto grid = run_ablation_grid(base, {1.0}, {0, 20}, {Variant::baseline, Variant::G}, {0, 1});
    EXPECT_EQ(grid.cells.size(), 2u + 4u);
    for (const auto& c : grid.cells) EXPECT_TRUE(c.failed);
    const auto dir = nocdda::testing::temp_dir("grid");
    save_grid_csv(grid, (dir / "grid.csv").string());
    EXPECT_EQ(slurp(dir / "grid.csv"), "tds,baseline@0,G@0,G@20\n1,NA,NA,NA\n");
    save_cells_csv(grid, (dir / "cells.csv").string());
    EXPECT_NE(slurp(dir / "cells.csv").find("1,baseline,0,0,failed,NA"), std::string::npos);
    EXPECT_THROW(run_ablation_grid(base, {}, {0}, {Variant::G}, {0}), InvalidArgument);
}

TEST(Grid, MedianHandlesEvenAndOddCounts) {
    EXPECT_EQ(AblationGrid::median({3, 1, 2}), 2.0);
    EXPECT_EQ(AblationGrid::median({4, 1, 2, 3}), 2.5);
    EXPECT_TRUE(std::isnan(AblationGrid::median({})));
}
