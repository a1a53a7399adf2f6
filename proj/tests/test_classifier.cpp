#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nocdda/classifier.hpp"
#include "test_support.hpp"

using namespace nocdda;

namespace {

// Linear classifier whose logits equal the input coordinates (d == C).
TimeAwareClassifier identity_classifier(std::size_t C, std::size_t T = 10) {
    auto clf = make_classifier(C, C, {}, TimeEmbedding{4, T, 10.0}, 0);
    auto& w = clf.net.layers[0].weight;
    for (auto& v : w.values()) v = 0.0;
    for (std::size_t c = 0; c < C; ++c) w.at(c, c) = 1.0;
    return clf;
}

double softmax_entropy(std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double v : z) s += std::exp(v - m);
    double h = 0;
    for (double v : z) {
        const double p = std::exp(v - m) / s;
        h -= p * std::log(p);
    }
    return h;
}

TimeAwareClassifier small_classifier(std::size_t d, std::size_t C, std::size_t T, std::uint64_t seed) {
    const std::size_t hidden[2] = {16, 16};
    return make_classifier(d, C, hidden, TimeEmbedding{16, T, 100.0}, seed);
}

}  // namespace

TEST(Entropy, KnownDistributions) {
    const std::vector<double> uniform(4, 0.25);
    EXPECT_NEAR(entropy(uniform), std::log(4.0), 1e-15);
    EXPECT_EQ(entropy(std::vector<double>{0, 1, 0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.9, 0.1}), -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)), 1e-15);
    EXPECT_THROW(entropy(std::vector<double>{0.5, 0.6}), InvalidArgument);
    EXPECT_THROW(entropy(std::vector<double>{-0.1, 1.1}), InvalidArgument);
}

TEST(Classifier, PredictShapesAndNormalisation) {
    const auto clf = small_classifier(2, 3, 20, 1);
    Rng rng(0);
    const auto x = standard_normal({5, 2}, rng);
    for (std::size_t t : {0u, 7u, 20u}) {
        const auto p = predict(clf, x, t);
        ASSERT_EQ(p.rows(), 5u);
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0;
            for (double v : p.row(i)) s += v;
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
    EXPECT_EQ(predict(clf, Tensor::vector({0.1, 0.2}), 3).rank(), 1u);
    EXPECT_THROW(predict(clf, Tensor({2, 3}), 0), InvalidArgument);
    EXPECT_THROW(predict(clf, x, 21), InvalidArgument);
    EXPECT_THROW(make_classifier(2, 1, {}, TimeEmbedding{}, 0), InvalidArgument);
}

TEST(Selection, QuantileKeepsLowestEntropyMembers) {
    const auto clf = identity_classifier(3);
    Rng rng(4);
    const auto pool = nocdda::testing::random_tensor({40, 3}, rng, 2.0);
    const auto set = select_hcpl(clf, pool, SelectionRule::quantile(0.3, 0));

    std::vector<double> h(40);
    for (std::size_t i = 0; i < 40; ++i) h[i] = softmax_entropy(pool.row(i));
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return h[a] < h[b]; });

    ASSERT_EQ(set.size(), 12u);
    for (std::size_t k = 0; k < 12; ++k) {
        EXPECT_EQ(set.pool_indices[k], order[k]);
        EXPECT_NEAR(*set.samples[k].entropy, h[order[k]], 1e-12);
        EXPECT_EQ(*set.samples[k].label, int(argmax(pool.row(order[k]))));
        EXPECT_EQ(set.samples[k].domain, Domain::target);
    }
    EXPECT_NEAR(set.cutoff, h[order[11]], 1e-12);
    for (std::size_t k = 12; k < 40; ++k) EXPECT_GE(h[order[k]], set.cutoff);
}

TEST(Selection, TiesAreBrokenByPoolIndex) {
    const auto clf = identity_classifier(2);
    const auto pool = Tensor::matrix(4, 2, {0, 3, 3, 0, 0, 3, 3, 0});
    const auto set = select_hcpl(clf, pool, SelectionRule::quantile(0.5, 0));
    ASSERT_EQ(set.size(), 2u);
    EXPECT_EQ(set.pool_indices, (std::vector<std::size_t>{0, 1}));
}

TEST(Selection, ThresholdModeUsesEntropyBound) {
    const auto clf = identity_classifier(2);
    const auto pool = Tensor::matrix(3, 2, {0, 5, 0, 0.1, 4, 0});
    const double eta = 0.5 * (softmax_entropy(pool.row(0)) + softmax_entropy(pool.row(1)));
    const auto set = select_hcpl(clf, pool, SelectionRule::threshold(eta, 0));
    EXPECT_EQ(set.size(), 2u);
    EXPECT_FALSE(set.pool_selected[1]);
    EXPECT_EQ(set.rule_cutoff, eta);
}

TEST(Selection, PerClassMinimumTopsUpMissingClasses) {
    const auto clf = identity_classifier(3);
    // Class 2 only appears with low confidence.
    const auto pool = Tensor::matrix(6, 3, {5, 0, 0, 0, 5, 0, 6, 0, 0, 0, 6, 0, 0.1, 0, 0.3, 0, 0.1, 0.2});
    const auto without = select_hcpl(clf, pool, SelectionRule::quantile(0.5, 0));
    EXPECT_EQ(without.class_counts(3)[2], 0u);
    const auto with = select_hcpl(clf, pool, SelectionRule::quantile(0.5, 1));
    ASSERT_EQ(with.size(), 4u);
    EXPECT_EQ(with.class_counts(3)[2], 1u);
    const double h4 = softmax_entropy(pool.row(4)), h5 = softmax_entropy(pool.row(5));
    const std::size_t expect = h4 < h5 ? 4 : 5;
    EXPECT_EQ(with.pool_indices.back(), expect);
    EXPECT_TRUE(with.by_quota.back());
    EXPECT_GE(with.cutoff, with.rule_cutoff);
}

TEST(Selection, EmptySelectionIsFlagged) {
    const auto clf = identity_classifier(2);
    const auto set = select_hcpl(clf, Tensor::matrix(2, 2, {1, 0, 0, 1}), SelectionRule::quantile(0.0, 0));
    EXPECT_TRUE(set.empty());
    EXPECT_TRUE(set.empty_warning);
    EXPECT_THROW(select_hcpl(clf, Tensor(), SelectionRule{}), InvalidArgument);
    EXPECT_THROW(select_hcpl(clf, Tensor::matrix(1, 2, {1, 0}), SelectionRule::quantile(1.5)), InvalidArgument);
}

TEST(Selection, CsvRoundTripKeepsSelectedRows) {
    const auto clf = identity_classifier(3);
    Rng rng(9);
    const auto pool = nocdda::testing::random_tensor({20, 3}, rng);
    const auto set = select_hcpl(clf, pool, SelectionRule::quantile(0.3));
    const auto path = (nocdda::testing::temp_dir("hcpl") / "hcpl.csv").string();
    save_hcpl_csv(set, pool, path);
    const auto back = load_hcpl_csv(path);
    ASSERT_EQ(back.size(), set.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        if (!set.pool_selected[i]) continue;
        EXPECT_EQ(back[k].features, row_vector(pool, i));
        EXPECT_EQ(*back[k].label, set.pool_pseudo_labels[i]);
        ++k;
    }
}

TEST(Training, SupervisedFitSeparatesBlobs) {
    const auto b = gen_gaussian_blobs_shift(3, 2, {}, 1.0, 2, 80, 6.0);
    auto clf = small_classifier(2, 3, 10, 3);
    Rng rng(1);
    const auto trace = train_supervised(clf, b.source_train, TrainConfig{40, 32, 0.05, 0.9, 5.0}, rng);
    EXPECT_LT(trace.back(), trace.front());
    EXPECT_GE(evaluate_accuracy(clf, b.source_test), 0.95);
}

TEST(Training, UnifiedObjectiveReportsAllFourTerms) {
    const auto b = gen_two_moons_shift(200, 0.0, 0.1, 5);
    auto clf = small_classifier(2, 2, 50, 7);
    const auto sched = make_linear_schedule(50);
    auto hcpl = b.source_test;
    for (auto& s : hcpl) s.domain = Domain::target;
    Rng rng(2);
    UnifiedConfig cfg{TrainConfig{20, 32, 0.05, 0.9, 5.0}};
    const auto tr = train_unified(clf, b.source_train, hcpl, sched, cfg, rng);
    ASSERT_EQ(tr.total.size(), 20u);
    for (std::size_t e = 0; e < 20; ++e) {
        EXPECT_GT(tr.clean_hcpl[e], 0.0);
        EXPECT_GT(tr.noised_hcpl[e], 0.0);
        EXPECT_NEAR(tr.total[e], tr.clean_source[e] + tr.clean_hcpl[e] + tr.noised_source[e] + tr.noised_hcpl[e],
                    1e-9);
    }
    EXPECT_LT(tr.clean_source.back(), tr.clean_source.front());
    EXPECT_GE(evaluate_accuracy(clf, b.source_test), 0.9);

    UnifiedConfig clean_only{TrainConfig{2, 32, 0.05, 0.9, 5.0}, ClassifierLoss::cross_entropy, true, false};
    const auto tr2 = train_unified(clf, b.source_train, {}, sched, clean_only, rng);
    EXPECT_EQ(tr2.noised_source[0], 0.0);
    EXPECT_EQ(tr2.clean_hcpl[0], 0.0);
    UnifiedConfig none{TrainConfig{}, ClassifierLoss::cross_entropy, false, false};
    EXPECT_THROW(train_unified(clf, b.source_train, {}, sched, none, rng), InvalidArgument);
}

TEST(Training, SquaredErrorLossAlsoFits) {
    const auto b = gen_gaussian_blobs_shift(2, 2, {}, 1.0, 4, 60, 6.0);
    auto clf = small_classifier(2, 2, 10, 3);
    Rng rng(3);
    train_supervised(clf, b.source_train, TrainConfig{40, 32, 0.05, 0.9, 5.0}, rng, ClassifierLoss::squared_error);
    EXPECT_GE(evaluate_accuracy(clf, b.source_test), 0.95);
}

TEST(InputGradient, MatchesFiniteDifferencesOfLogProb) {
    const auto clf = small_classifier(2, 3, 30, 11);
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const auto x = nocdda::testing::random_tensor({2}, rng);
        const std::size_t t = 1 + std::size_t(trial) * 7;
        const int c = trial % 3;
        const auto g = log_prob_input_grad(clf, x, t, c);
        EXPECT_FALSE(g.clamped);
        for (std::size_t j = 0; j < 2; ++j) {
            auto up = x, down = x;
            up[j] += 1e-6;
            down[j] -= 1e-6;
            const double fd = (log_prob(clf, up, t, c) - log_prob(clf, down, t, c)) / 2e-6;
            EXPECT_LT(nocdda::testing::relative_error(g.grad[j], fd), 1e-5);
        }
    }
}

TEST(InputGradient, UnderflowedProbabilityIsClamped) {
    const auto clf = identity_classifier(2);
    const auto g = log_prob_input_grad(clf, Tensor::vector({2000.0, 0.0}), 0, 1);
    EXPECT_TRUE(g.clamped);
    EXPECT_EQ(g.grad, Tensor({2}, 0.0));
    EXPECT_EQ(log_prob(clf, Tensor::vector({2000.0, 0.0}), 0, 1), log_prob_floor);
    EXPECT_THROW(log_prob_input_grad(clf, Tensor::vector({0.0, 0.0}), 0, 2), InvalidArgument);
}

TEST(Evaluation, AccuracyMatchesHandCount) {
    const auto clf = identity_classifier(2);
    std::vector<LabeledSample> test{{{1, 0}, 0, Domain::source, {}},
                                    {{0, 1}, 1, Domain::source, {}},
                                    {{2, 1}, 1, Domain::source, {}},
                                    {{0, 3}, 0, Domain::source, {}}};
    EXPECT_DOUBLE_EQ(evaluate_accuracy(clf, test), 0.5);
    EXPECT_THROW(evaluate_accuracy(clf, {}), InvalidArgument);
}

TEST(Evaluation, TargetAccuracyReadsHeldOutLabels) {
    const auto clf = identity_classifier(2);
    std::vector<LabeledSample> src{{{1, 0}, 0, Domain::source, {}}};
    std::vector<LabeledSample> tgt{{{1, 0}, 0, Domain::target, {}}, {{1, 0}, 1, Domain::target, {}},
                                   {{0, 1}, 1, Domain::target, {}}, {{0, 1}, 1, Domain::target, {}}};
    const auto b = DatasetBundle::assemble(src, src, {}, tgt, 2, 2, {});
    for (const auto& s : b.target_test) EXPECT_FALSE(s.label.has_value());
    EXPECT_DOUBLE_EQ(evaluate_target_accuracy(clf, b), 0.75);
}

TEST(Classifier, JsonRoundTrip) {
    const auto clf = small_classifier(2, 3, 30, 4);
    const auto back = classifier_from_json(nlohmann::json::parse(classifier_to_json(clf).dump()));
    EXPECT_EQ(back.net, clf.net);
    EXPECT_EQ(back.num_classes, 3u);
    EXPECT_EQ(back.embedding.T, 30u);
}
