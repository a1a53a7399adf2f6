#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "nocdda/data.hpp"
#include "test_support.hpp"

using namespace nocdda;

namespace {

std::string write_file(const std::string& name, const std::string& body) {
    const auto path = (nocdda::testing::temp_dir("data_" + name) / (name + ".csv")).string();
    std::ofstream(path) << body;
    return path;
}

std::string error_of(const std::string& path) {
    try {
        load_csv(path);
    } catch (const InvalidArgument& e) {
        return e.what();
    }
    return "";
}

// Distance of p from the noiseless moon of its class.
double moon_residual(double x, double y, int label) {
    return label == 0 ? std::abs(std::hypot(x, y) - 1.0) : std::abs(std::hypot(x - 1.0, y - 0.5) - 1.0);
}

std::vector<CsvRow> rows_with_labels(const DatasetBundle& b, const std::string& name) {
    const auto path = (nocdda::testing::temp_dir(name) / "b.csv").string();
    save_csv(b, path);
    std::size_t dim = 0;
    return read_csv_rows(path, dim);
}

}  // namespace

TEST(TwoMoons, SplitSizesAndHiddenTargetLabels) {
    const auto b = gen_two_moons_shift(100, 30, 0.1, 1);
    EXPECT_EQ(b.num_classes, 2u);
    EXPECT_EQ(b.dim, 2u);
    EXPECT_EQ(b.source_train.size(), 80u);
    EXPECT_EQ(b.source_test.size(), 20u);
    EXPECT_EQ(b.target_train.size(), 80u);
    EXPECT_EQ(b.target_test.size(), 20u);
    for (const auto& s : b.source_train) EXPECT_TRUE(s.label.has_value());
    for (const auto& s : b.target_train) {
        EXPECT_FALSE(s.label.has_value());
        EXPECT_EQ(s.domain, Domain::target);
    }
    EXPECT_TRUE(b.target_test_labelled());
    EXPECT_EQ(b.shift.generator, "two-moons");
}

TEST(TwoMoons, ClassesAreBalancedWithinOne) {
    for (std::size_t n : {9u, 100u, 101u}) {
        const auto rows = rows_with_labels(gen_two_moons_shift(n, 45, 0.1, 2), "balance");
        int src[2] = {0, 0}, tgt[2] = {0, 0};
        for (const auto& r : rows) (r.sample.domain == Domain::source ? src : tgt)[*r.sample.label]++;
        EXPECT_LE(std::abs(src[0] - src[1]), 1);
        EXPECT_LE(std::abs(tgt[0] - tgt[1]), 1);
        EXPECT_EQ(std::size_t(src[0] + src[1]), n);
    }
}

TEST(TwoMoons, NoiselessPointsLieOnRotatedMoons) {
    const double deg = 90.0, rad = deg * std::numbers::pi / 180.0;
    for (const auto& r : rows_with_labels(gen_two_moons_shift(200, deg, 0.0, 3), "moons")) {
        double x = r.sample.features[0], y = r.sample.features[1];
        if (r.sample.domain == Domain::target) {
            const double dx = x - 0.5, dy = y - 0.25;
            x = 0.5 + std::cos(-rad) * dx - std::sin(-rad) * dy;
            y = 0.25 + std::sin(-rad) * dx + std::cos(-rad) * dy;
        }
        EXPECT_LT(moon_residual(x, y, *r.sample.label), 1e-12);
    }
}

TEST(TwoMoons, DeterministicPerSeedAndValidated) {
    EXPECT_EQ(gen_two_moons_shift(50, 30, 0.1, 7), gen_two_moons_shift(50, 30, 0.1, 7));
    EXPECT_NE(gen_two_moons_shift(50, 30, 0.1, 7), gen_two_moons_shift(50, 30, 0.1, 8));
    EXPECT_THROW(gen_two_moons_shift(3, 30, 0.1, 0), InvalidArgument);
    EXPECT_THROW(gen_two_moons_shift(50, 180, 0.1, 0), InvalidArgument);
    EXPECT_THROW(gen_two_moons_shift(50, -1, 0.1, 0), InvalidArgument);
    EXPECT_THROW(gen_two_moons_shift(50, 30, -0.1, 0), InvalidArgument);
}

TEST(Blobs, NearestShiftedMeanClassifiesAlmostEverything) {
    const std::vector<double> shift{1.5, -0.5, 2.0};
    const auto b = gen_gaussian_blobs_shift(4, 3, shift, 1.0, 5, 200, 6.0);
    const auto means = blob_means(4, 3, 6.0);
    for (std::size_t c = 0; c + 1 < 4; ++c)
        EXPECT_NEAR(std::hypot(means[c][0] - means[c + 1][0], means[c][1] - means[c + 1][1]), 6.0, 1e-12);
    std::size_t correct = 0, total = 0;
    for (const auto& r : rows_with_labels(b, "blobs")) {
        const bool tgt = r.sample.domain == Domain::target;
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < 4; ++c) {
            double d2 = 0;
            for (std::size_t j = 0; j < 3; ++j) {
                const double m = means[c][j] + (tgt ? shift[j] : 0.0);
                d2 += (r.sample.features[j] - m) * (r.sample.features[j] - m);
            }
            if (d2 < best_d) best_d = d2, best = c;
        }
        correct += int(best) == *r.sample.label;
        ++total;
    }
    EXPECT_EQ(total, 1600u);
    EXPECT_GE(double(correct) / double(total), 0.99);
    EXPECT_THROW(gen_gaussian_blobs_shift(1, 2, {}, 1.0, 0), InvalidArgument);
    EXPECT_THROW(gen_gaussian_blobs_shift(2, 2, {1.0}, 1.0, 0), InvalidArgument);
}

TEST(Csv, RoundTripOfAThousandSamplesIsExact) {
    const auto b = gen_two_moons_shift(500, 30, 0.1, 9);
    const auto path = (nocdda::testing::temp_dir("roundtrip") / "moons.csv").string();
    save_csv(b, path);
    std::vector<std::string> warnings;
    const auto back = load_csv(path, &warnings);
    EXPECT_TRUE(warnings.empty());
    EXPECT_EQ(back.source_train.size() + back.source_test.size() + back.target_train.size() + back.target_test.size(),
              1000u);
    EXPECT_EQ(back, b);
}

TEST(Csv, HeaderOnlyFileWarns) {
    const auto path = write_file("header", "feature_0,feature_1,label,domain,split\n");
    std::vector<std::string> warnings;
    const auto b = load_csv(path, &warnings);
    EXPECT_TRUE(b.empty());
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("header only"), std::string::npos);
}

TEST(Csv, TargetRowsMayOmitLabels) {
    const auto path = write_file("nolabel",
                                 "feature_0,feature_1,label,domain,split\n"
                                 "0.5,1,1,source,train\n"
                                 "0.25,2,0,source,test\n"
                                 "3,4,,target,train\n"
                                 "5,6,,target,test\n");
    const auto b = load_csv(path);
    EXPECT_EQ(b.num_classes, 2u);
    ASSERT_EQ(b.target_train.size(), 1u);
    EXPECT_EQ(b.target_train[0].features, (std::vector<double>{3, 4}));
    EXPECT_FALSE(b.target_test_labelled());
}

TEST(Csv, ErrorsNameTheOffendingLine) {
    const std::string header = "feature_0,feature_1,label,domain,split\n";
    EXPECT_NE(error_of(write_file("badval", header + "1,2,0,source,train\n1,x,0,source,train\n")).find(":3: malformed value"),
              std::string::npos);
    EXPECT_NE(error_of(write_file("baddom", header + "1,2,0,elsewhere,train\n")).find(":2: unknown domain tag"),
              std::string::npos);
    EXPECT_NE(error_of(write_file("nosrclabel", header + "1,2,,source,train\n")).find(":2: label required"),
              std::string::npos);
    EXPECT_NE(error_of(write_file("fields", header + "1,2,0,source\n")).find(":2: expected 5 fields"),
              std::string::npos);
    EXPECT_NE(error_of(write_file("split", header + "1,2,0,source,dev\n")).find(":2: split"), std::string::npos);
    EXPECT_NE(error_of(write_file("hdr", "x,y,label,domain,split\n")).find(":1:"), std::string::npos);
    EXPECT_NE(error_of(write_file("gen", header + "1,2,0,generated,train\n")).find("generated rows"), std::string::npos);
    EXPECT_NE(error_of(write_file("nan", header + "nan,2,0,source,train\n")).find(":2: malformed value"),
              std::string::npos);
}

TEST(Csv, SidecarCarriesGeneratorMetadata) {
    const auto b = gen_gaussian_blobs_shift(3, 2, {1, 1}, 0.5, 4, 10);
    const auto path = (nocdda::testing::temp_dir("sidecar") / "blobs.csv").string();
    save_csv(b, path);
    std::ifstream in(detail::sidecar_path(path));
    const auto meta = nlohmann::json::parse(in);
    EXPECT_EQ(meta["generator"], "gaussian-blobs");
    EXPECT_EQ(meta["C"], 3);
    EXPECT_EQ(meta["seed"], 4);
    EXPECT_EQ(load_csv(path).shift, b.shift);
}

TEST(Bundle, AssembleChecksInvariants) {
    const std::vector<LabeledSample> src{{{1, 2}, 0, Domain::source, {}}};
    EXPECT_THROW(DatasetBundle::assemble({{{1, 2}, 0, Domain::target, {}}}, {}, {}, {}, 2, 2, {}), InvalidArgument);
    EXPECT_THROW(DatasetBundle::assemble({{{1}, 0, Domain::source, {}}}, {}, {}, {}, 2, 2, {}), InvalidArgument);
    EXPECT_THROW(DatasetBundle::assemble({{{1, 2}, 5, Domain::source, {}}}, {}, {}, {}, 2, 2, {}), InvalidArgument);
    EXPECT_THROW(DatasetBundle::assemble({{{1, 2}, std::nullopt, Domain::source, {}}}, {}, {}, {}, 2, 2, {}),
                 InvalidArgument);
    const auto b = DatasetBundle::assemble(src, {}, {}, {}, 2, 2, {});
    EXPECT_EQ(features_matrix(b.source_train), Tensor::matrix(1, 2, {1, 2}));
    EXPECT_EQ(labels_of(b.source_train), std::vector<int>{0});
}
