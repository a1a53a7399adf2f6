#pragma once

// Labeled samples, domain-shift bundles, synthetic generators and CSV I/O.
//
// Target-domain ground truth never sits on a LabeledSample: DatasetBundle
// keeps it in a private store that only the evaluation routine and the CSV
// writer can reach.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocdda/random.hpp"
#include "nocdda/tensor.hpp"

namespace nocdda {

enum class Domain { source, target, generated };

inline const char* domain_name(Domain d) {
    switch (d) {
        case Domain::source: return "source";
        case Domain::target: return "target";
        case Domain::generated: return "generated";
    }
    return "?";
}

inline std::optional<Domain> parse_domain(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    if (s == "generated") return Domain::generated;
    return std::nullopt;
}

struct LabeledSample {
    std::vector<double> features;
    std::optional<int> label;
    Domain domain = Domain::source;
    std::optional<double> entropy;

    friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct ShiftDescriptor {
    std::string generator;
    nlohmann::json params = nlohmann::json::object();
    std::uint64_t seed = 0;

    friend bool operator==(const ShiftDescriptor&, const ShiftDescriptor&) = default;
};

struct TimeAwareClassifier;
class DatasetBundle;
inline double evaluate_target_accuracy(const TimeAwareClassifier& clf, const DatasetBundle& bundle);
inline void save_csv(const DatasetBundle& bundle, const std::string& path);

class DatasetBundle {
public:
    std::vector<LabeledSample> source_train, source_test;
    std::vector<LabeledSample> target_train, target_test;  // labels always absent
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    ShiftDescriptor shift;

    /// Builds a bundle; labels found on target samples are moved into the
    /// held-out store. Checks the split invariants.
    static DatasetBundle assemble(std::vector<LabeledSample> source_train, std::vector<LabeledSample> source_test,
                                  std::vector<LabeledSample> target_train, std::vector<LabeledSample> target_test,
                                  std::size_t num_classes, std::size_t dim, ShiftDescriptor shift) {
        DatasetBundle b;
        b.num_classes = num_classes;
        b.dim = dim;
        b.shift = std::move(shift);
        auto check = [&](std::vector<LabeledSample>& v, Domain want, const char* name) {
            for (auto& s : v) {
                if (s.domain != want) throw InvalidArgument(std::string("bundle: wrong domain tag in ") + name);
                if (s.features.size() != dim) throw InvalidArgument(std::string("bundle: dimension mismatch in ") + name);
                if (s.label && (*s.label < 0 || std::size_t(*s.label) >= num_classes))
                    throw InvalidArgument(std::string("bundle: label out of range in ") + name);
                if (want == Domain::source && !s.label) throw InvalidArgument("bundle: source sample without label");
            }
        };
        check(source_train, Domain::source, "source_train");
        check(source_test, Domain::source, "source_test");
        check(target_train, Domain::target, "target_train");
        check(target_test, Domain::target, "target_test");
        auto strip = [](std::vector<LabeledSample>& v, std::vector<std::optional<int>>& truth) {
            truth.clear();
            for (auto& s : v) {
                truth.push_back(s.label);
                s.label.reset();
            }
        };
        strip(target_train, b.target_train_truth_);
        strip(target_test, b.target_test_truth_);
        b.source_train = std::move(source_train);
        b.source_test = std::move(source_test);
        b.target_train = std::move(target_train);
        b.target_test = std::move(target_test);
        return b;
    }

    bool empty() const { return source_train.empty() && source_test.empty() && target_train.empty() && target_test.empty(); }

    /// True when every target test sample has a held-out label.
    bool target_test_labelled() const {
        return !target_test_truth_.empty() &&
               std::all_of(target_test_truth_.begin(), target_test_truth_.end(), [](auto& l) { return l.has_value(); });
    }

    friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;

private:
    std::vector<std::optional<int>> target_train_truth_;
    std::vector<std::optional<int>> target_test_truth_;

    friend double evaluate_target_accuracy(const TimeAwareClassifier&, const DatasetBundle&);
    friend void save_csv(const DatasetBundle&, const std::string&);
};

inline Tensor features_matrix(const std::vector<LabeledSample>& samples) {
    if (samples.empty()) throw InvalidArgument("features_matrix: no samples");
    const std::size_t d = samples.front().features.size();
    std::vector<double> flat;
    flat.reserve(samples.size() * d);
    for (const auto& s : samples) {
        if (s.features.size() != d) throw InvalidArgument("features_matrix: ragged samples");
        flat.insert(flat.end(), s.features.begin(), s.features.end());
    }
    return Tensor::matrix(samples.size(), d, std::move(flat));
}

inline std::vector<int> labels_of(const std::vector<LabeledSample>& samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.label) throw InvalidArgument("labels_of: sample without label");
        out.push_back(*s.label);
    }
    return out;
}

namespace detail {

/// Per-class split: each class is shuffled and its first `train_fraction` goes to train.
inline void stratified_split(const std::vector<LabeledSample>& all, std::size_t num_classes, double train_fraction,
                             Rng& rng, std::vector<LabeledSample>& train, std::vector<LabeledSample>& test) {
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<const LabeledSample*> members;
        for (const auto& s : all)
            if (s.label && std::size_t(*s.label) == c) members.push_back(&s);
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(members.size())));
        for (std::size_t i = 0; i < members.size(); ++i) (i < n_train ? train : test).push_back(*members[i]);
    }
}

inline std::vector<LabeledSample> two_moons(std::size_t n, double noise_sd, double rotation_deg, Domain domain, Rng& rng) {
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::normal_distribution<double> noise(0.0, noise_sd > 0 ? noise_sd : 1.0);
    const double rad = rotation_deg * std::numbers::pi / 180.0;
    const double cx = 0.5, cy = 0.25;  // centroid of the noiseless moons
    const double cr = std::cos(rad), sr = std::sin(rad);
    std::vector<LabeledSample> out;
    const std::size_t n0 = (n + 1) / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = i < n0 ? 0 : 1;
        const double th = angle(rng);
        double x = label == 0 ? std::cos(th) : 1.0 - std::cos(th);
        double y = label == 0 ? std::sin(th) : 0.5 - std::sin(th);
        if (noise_sd > 0) {
            x += noise(rng);
            y += noise(rng);
        }
        const double dx = x - cx, dy = y - cy;
        out.push_back({{cx + cr * dx - sr * dy, cy + sr * dx + cr * dy}, label, domain, std::nullopt});
    }
    return out;
}

}  // namespace detail

/// Source is the standard two-moons problem; target is the same generator
/// rotated about the moons' centroid.
inline DatasetBundle gen_two_moons_shift(std::size_t n_per_domain, double rotation_degrees, double noise_sd,
                                         std::uint64_t seed) {
    if (n_per_domain < 4) throw InvalidArgument("two-moons: need at least 4 samples per domain");
    if (!(rotation_degrees >= 0.0 && rotation_degrees < 180.0)) throw InvalidArgument("two-moons: rotation must be in [0, 180)");
    if (!(noise_sd >= 0.0)) throw InvalidArgument("two-moons: noise_sd must be >= 0");
    Rng src_rng(derive_seed(seed, 1)), tgt_rng(derive_seed(seed, 2)), split_rng(derive_seed(seed, 3));
    const auto src = detail::two_moons(n_per_domain, noise_sd, 0.0, Domain::source, src_rng);
    const auto tgt = detail::two_moons(n_per_domain, noise_sd, rotation_degrees, Domain::target, tgt_rng);
    std::vector<LabeledSample> s_train, s_test, t_train, t_test;
    detail::stratified_split(src, 2, 0.8, split_rng, s_train, s_test);
    detail::stratified_split(tgt, 2, 0.8, split_rng, t_train, t_test);
    ShiftDescriptor shift{"two-moons",
                          {{"n_per_domain", n_per_domain}, {"rotation_degrees", rotation_degrees}, {"noise_sd", noise_sd}},
                          seed};
    return DatasetBundle::assemble(std::move(s_train), std::move(s_test), std::move(t_train), std::move(t_test), 2, 2,
                                   std::move(shift));
}

/// Class means of the blob generator: evenly spaced on a circle in the first
/// two coordinates so that neighbouring means are `separation` apart.
inline std::vector<std::vector<double>> blob_means(std::size_t num_classes, std::size_t dim, double separation) {
    const double radius = separation / (2.0 * std::sin(std::numbers::pi / double(num_classes)));
    std::vector<std::vector<double>> means;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<double> m(dim, 0.0);
        const double a = 2.0 * std::numbers::pi * double(c) / double(num_classes);
        m[0] = radius * std::cos(a);
        m[1] = radius * std::sin(a);
        means.push_back(std::move(m));
    }
    return means;
}

inline DatasetBundle gen_gaussian_blobs_shift(std::size_t num_classes, std::size_t dim, std::vector<double> translation,
                                              double scale, std::uint64_t seed, std::size_t n_per_class = 100,
                                              double separation = 6.0) {
    if (num_classes < 2 || dim < 2) throw InvalidArgument("blobs: need C >= 2 and d >= 2");
    if (translation.empty()) translation.assign(dim, 0.0);
    if (translation.size() != dim) throw InvalidArgument("blobs: translation must have d entries");
    if (!(scale > 0.0) || !(separation > 0.0) || n_per_class < 2) throw InvalidArgument("blobs: invalid scale/separation/count");
    const auto means = blob_means(num_classes, dim, separation);
    auto draw = [&](Domain domain, const std::vector<double>& shift, Rng& rng) {
        std::normal_distribution<double> noise(0.0, scale);
        std::vector<LabeledSample> out;
        for (std::size_t c = 0; c < num_classes; ++c)
            for (std::size_t i = 0; i < n_per_class; ++i) {
                std::vector<double> x(dim);
                for (std::size_t j = 0; j < dim; ++j) x[j] = means[c][j] + shift[j] + noise(rng);
                out.push_back({std::move(x), int(c), domain, std::nullopt});
            }
        return out;
    };
    Rng src_rng(derive_seed(seed, 1)), tgt_rng(derive_seed(seed, 2)), split_rng(derive_seed(seed, 3));
    const auto src = draw(Domain::source, std::vector<double>(dim, 0.0), src_rng);
    const auto tgt = draw(Domain::target, translation, tgt_rng);
    std::vector<LabeledSample> s_train, s_test, t_train, t_test;
    detail::stratified_split(src, num_classes, 0.8, split_rng, s_train, s_test);
    detail::stratified_split(tgt, num_classes, 0.8, split_rng, t_train, t_test);
    ShiftDescriptor shift{"gaussian-blobs",
                          {{"num_classes", num_classes},
                           {"dim", dim},
                           {"translation", translation},
                           {"scale", scale},
                           {"n_per_class", n_per_class},
                           {"separation", separation}},
                          seed};
    return DatasetBundle::assemble(std::move(s_train), std::move(s_test), std::move(t_train), std::move(t_test),
                                   num_classes, dim, std::move(shift));
}

// ---------------------------------------------------------------------------
// CSV: feature_0..feature_{d-1},label,domain,split

namespace detail {

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_header(std::ostream& out, std::size_t dim) {
    for (std::size_t j = 0; j < dim; ++j) out << "feature_" << j << ',';
    out << "label,domain,split\n";
}

inline void write_row(std::ostream& out, const LabeledSample& s, std::optional<int> label, const char* split) {
    for (double v : s.features) out << format_real(v) << ',';
    if (label) out << *label;
    out << ',' << domain_name(s.domain) << ',' << split << '\n';
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::string sidecar_path(const std::string& csv_path) {
    return std::filesystem::path(csv_path).replace_extension(".json").string();
}

}  // namespace detail

inline nlohmann::json bundle_metadata(const DatasetBundle& b) {
    return {{"generator", b.shift.generator},
            {"params", b.shift.params},
            {"seed", b.shift.seed},
            {"C", b.num_classes},
            {"d", b.dim}};
}

/// Writes the CSV plus a JSON sidecar (same stem, .json) with generator
/// metadata. Target labels are written from the held-out store.
inline void save_csv(const DatasetBundle& b, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    detail::write_header(out, b.dim);
    for (const auto& s : b.source_train) detail::write_row(out, s, s.label, "train");
    for (const auto& s : b.source_test) detail::write_row(out, s, s.label, "test");
    for (std::size_t i = 0; i < b.target_train.size(); ++i)
        detail::write_row(out, b.target_train[i], b.target_train_truth_[i], "train");
    for (std::size_t i = 0; i < b.target_test.size(); ++i)
        detail::write_row(out, b.target_test[i], b.target_test_truth_[i], "test");
    std::ofstream side(detail::sidecar_path(path));
    if (!side) throw InvalidArgument("cannot write sidecar for " + path);
    side << bundle_metadata(b).dump(2) << '\n';
}

/// Writes loose samples (e.g. generated ones) in the bundle CSV schema.
inline void save_samples_csv(const std::vector<LabeledSample>& samples, std::size_t dim, const std::string& path,
                             const char* split = "train") {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    detail::write_header(out, dim);
    for (const auto& s : samples) detail::write_row(out, s, s.label, split);
}

struct CsvRow {
    LabeledSample sample;
    bool test = false;
};

/// Parses a bundle-schema CSV. Errors name the 1-based line number.
inline std::vector<CsvRow> read_csv_rows(const std::string& path, std::size_t& dim) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw InvalidArgument(path + ": missing header");
    const auto header = detail::split_fields(line);
    if (header.size() < 4) throw InvalidArgument(path + ":1: header needs feature columns, label, domain, split");
    dim = header.size() - 3;
    for (std::size_t j = 0; j < dim; ++j)
        if (header[j] != "feature_" + std::to_string(j))
            throw InvalidArgument(path + ":1: expected column feature_" + std::to_string(j) + ", got '" + header[j] + "'");
    if (header[dim] != "label" || header[dim + 1] != "domain" || header[dim + 2] != "split")
        throw InvalidArgument(path + ":1: trailing columns must be label,domain,split");
    std::vector<CsvRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto where = path + ":" + std::to_string(line_no) + ": ";
        const auto f = detail::split_fields(line);
        if (f.size() != dim + 3) throw InvalidArgument(where + "expected " + std::to_string(dim + 3) + " fields");
        CsvRow row;
        for (std::size_t j = 0; j < dim; ++j) {
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(f[j], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != f[j].size() || !std::isfinite(v))
                throw InvalidArgument(where + "malformed value '" + f[j] + "'");
            row.sample.features.push_back(v);
        }
        const auto domain = parse_domain(f[dim + 1]);
        if (!domain) throw InvalidArgument(where + "unknown domain tag '" + f[dim + 1] + "'");
        row.sample.domain = *domain;
        if (!f[dim].empty()) {
            std::size_t used = 0;
            int label = -1;
            try {
                label = std::stoi(f[dim], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != f[dim].size() || label < 0) throw InvalidArgument(where + "malformed label '" + f[dim] + "'");
            row.sample.label = label;
        } else if (*domain != Domain::target) {
            throw InvalidArgument(where + "label required for " + f[dim + 1] + " rows");
        }
        if (f[dim + 2] != "train" && f[dim + 2] != "test") throw InvalidArgument(where + "split must be train or test");
        row.test = f[dim + 2] == "test";
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Loads a bundle. Metadata comes from the JSON sidecar when present,
/// otherwise C is inferred from the largest label. Generated rows are
/// rejected here; use read_csv_rows for loose sample files.
inline DatasetBundle load_csv(const std::string& path, std::vector<std::string>* warnings = nullptr) {
    std::size_t dim = 0;
    auto rows = read_csv_rows(path, dim);
    std::vector<LabeledSample> s_train, s_test, t_train, t_test;
    std::size_t num_classes = 0;
    for (auto& r : rows) {
        if (r.sample.domain == Domain::generated)
            throw InvalidArgument(path + ": generated rows cannot be loaded into a dataset bundle");
        if (r.sample.label) num_classes = std::max(num_classes, std::size_t(*r.sample.label) + 1);
        auto& dst = r.sample.domain == Domain::source ? (r.test ? s_test : s_train) : (r.test ? t_test : t_train);
        dst.push_back(std::move(r.sample));
    }
    ShiftDescriptor shift{"csv", {{"path", path}}, 0};
    const auto side = detail::sidecar_path(path);
    if (std::filesystem::exists(side)) {
        std::ifstream in(side);
        const auto meta = nlohmann::json::parse(in);
        shift.generator = meta.at("generator").get<std::string>();
        shift.params = meta.at("params");
        shift.seed = meta.at("seed").get<std::uint64_t>();
        const auto c = meta.at("C").get<std::size_t>();
        if (c < num_classes) throw InvalidArgument(side + ": C smaller than largest label");
        num_classes = c;
        if (meta.at("d").get<std::size_t>() != dim) throw InvalidArgument(side + ": d disagrees with CSV header");
    }
    if (rows.empty() && warnings) warnings->push_back(path + ": no samples (header only)");
    return DatasetBundle::assemble(std::move(s_train), std::move(s_test), std::move(t_train), std::move(t_test),
                                   num_classes, dim, std::move(shift));
}

}  // namespace nocdda
