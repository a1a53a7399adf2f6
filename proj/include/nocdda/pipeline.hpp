#pragma once

// End-to-end adaptation run: source pretraining, pseudo-labeling,
// conditional adversarial alignment, high-confidence selection, unified
// noised-classifier and epsilon-net training, class-prior guided generation,
// augmentation and evaluation. Also the ablation grid over these stages.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocdda/alignment.hpp"
#include "nocdda/classifier.hpp"
#include "nocdda/data.hpp"
#include "nocdda/diffusion.hpp"
#include "nocdda/sampler.hpp"

namespace nocdda {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSpec {
    std::string generator = "two-moons";  // two-moons | gaussian-blobs | csv
    std::size_t n_per_domain = 1000;
    double rotation_degrees = 30.0;
    double noise_sd = 0.1;
    std::size_t num_classes = 3;
    std::size_t dim = 2;
    std::vector<double> translation;
    double scale = 1.0;
    std::size_t n_per_class = 100;
    double separation = 6.0;
    std::string path;
    std::optional<std::uint64_t> seed;  // defaults to the run seed
};

struct PipelineConfig {
    DatasetSpec dataset;

    std::vector<std::size_t> classifier_hidden{32, 32};
    Activation classifier_activation = Activation::relu;
    std::size_t embedding_dim = 16;
    std::vector<std::size_t> epsilon_hidden{64, 64};
    std::vector<std::size_t> discriminator_hidden{32};

    std::size_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    TrainConfig pretrain{60, 32, 0.05, 0.9, 5.0};
    SelectionRule selection;
    std::size_t adversarial_rounds = 200;
    std::size_t adversarial_batch = 32;
    AdversarialConfig adversarial_opt;
    TrainConfig unified{60, 32, 0.01, 0.9, 5.0};
    ClassifierLoss unified_loss = ClassifierLoss::cross_entropy;
    TrainConfig epsilon{300, 64, 0.01, 0.9, 5.0};
    std::string epsilon_data = "target_pool";  // target_pool | hcpl | joint

    std::size_t active_steps = 200;
    std::size_t jump = 5;
    double guidance_scale = 1.0;
    std::size_t n_noisings = 8;
    std::size_t samples_per_class = 100;

    std::string augmentation = "finetune";  // finetune | none
    TrainConfig finetune{50, 32, 0.01, 0.9, 5.0};
    bool purity_filter = true;
    bool realign_after_augmentation = false;

    bool adversarial = true;
    bool classifier_unification = true;
    bool noise_optimization = true;

    std::size_t refresh_rounds = 1;
    double tds_fraction = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(tds_fraction > 0.0 && tds_fraction <= 1.0)) throw InvalidArgument("config: tds_fraction must be in (0, 1]");
        if (refresh_rounds < 1) throw InvalidArgument("config: refresh_rounds must be >= 1");
        if (n_noisings < 1) throw InvalidArgument("config: n_noisings must be >= 1");
        if (augmentation != "finetune" && augmentation != "none")
            throw InvalidArgument("config: augmentation must be finetune or none");
        if (epsilon_data != "target_pool" && epsilon_data != "hcpl" && epsilon_data != "joint")
            throw InvalidArgument("config: epsilon_data must be target_pool, hcpl or joint");
        if (!(guidance_scale >= 0.0)) throw InvalidArgument("config: guidance_scale must be >= 0");
        sampler().validate();
    }

    SamplerConfig sampler() const {
        SamplerConfig s;
        s.total_T = T;
        s.active_steps = active_steps;
        s.jump = jump;
        s.guidance_scale = guidance_scale;
        s.seed = derive_seed(seed, 600);
        s.init = noise_optimization ? TerminalInit::class_prior : TerminalInit::standard_normal;
        return s;
    }

    std::uint64_t dataset_seed() const { return dataset.seed.value_or(seed); }
};

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw InvalidArgument(where + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw InvalidArgument(where + ": unknown key '" + k + "'");
    }
}

inline json train_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs}, {"batch", t.batch}, {"learning_rate", t.learning_rate}, {"momentum", t.momentum},
            {"clip_norm", t.clip_norm}};
}

inline TrainConfig train_from_json(const json& j, TrainConfig d, const std::string& where) {
    reject_unknown_keys(j, {"epochs", "batch", "learning_rate", "momentum", "clip_norm"}, where);
    d.epochs = j.value("epochs", d.epochs);
    d.batch = j.value("batch", d.batch);
    d.learning_rate = j.value("learning_rate", d.learning_rate);
    d.momentum = j.value("momentum", d.momentum);
    d.clip_norm = j.value("clip_norm", d.clip_norm);
    return d;
}

}  // namespace detail

inline json to_json(const DatasetSpec& d) {
    json j = {{"generator", d.generator},
              {"n_per_domain", d.n_per_domain},
              {"rotation_degrees", d.rotation_degrees},
              {"noise_sd", d.noise_sd},
              {"num_classes", d.num_classes},
              {"dim", d.dim},
              {"translation", d.translation},
              {"scale", d.scale},
              {"n_per_class", d.n_per_class},
              {"separation", d.separation},
              {"path", d.path}};
    j["seed"] = d.seed ? json(*d.seed) : json(nullptr);
    return j;
}

inline DatasetSpec dataset_from_json(const json& j, DatasetSpec d = {}) {
    detail::reject_unknown_keys(j,
                                {"generator", "n_per_domain", "rotation_degrees", "noise_sd", "num_classes", "dim",
                                 "translation", "scale", "n_per_class", "separation", "path", "seed"},
                                "config.dataset");
    d.generator = j.value("generator", d.generator);
    d.n_per_domain = j.value("n_per_domain", d.n_per_domain);
    d.rotation_degrees = j.value("rotation_degrees", d.rotation_degrees);
    d.noise_sd = j.value("noise_sd", d.noise_sd);
    d.num_classes = j.value("num_classes", d.num_classes);
    d.dim = j.value("dim", d.dim);
    d.translation = j.value("translation", d.translation);
    d.scale = j.value("scale", d.scale);
    d.n_per_class = j.value("n_per_class", d.n_per_class);
    d.separation = j.value("separation", d.separation);
    d.path = j.value("path", d.path);
    if (j.contains("seed")) d.seed = j["seed"].is_null() ? std::nullopt : std::optional(j["seed"].get<std::uint64_t>());
    return d;
}

inline json to_json(const PipelineConfig& c) {
    return {{"dataset", to_json(c.dataset)},
            {"classifier_hidden", c.classifier_hidden},
            {"classifier_activation", c.classifier_activation == Activation::relu ? "relu" : "tanh"},
            {"embedding_dim", c.embedding_dim},
            {"epsilon_hidden", c.epsilon_hidden},
            {"discriminator_hidden", c.discriminator_hidden},
            {"T", c.T},
            {"beta_start", c.beta_start},
            {"beta_end", c.beta_end},
            {"pretrain", detail::train_to_json(c.pretrain)},
            {"selection",
             {{"mode", c.selection.mode == SelectionRule::Mode::quantile ? "quantile" : "threshold"},
              {"value", c.selection.value},
              {"per_class_min", c.selection.per_class_min}}},
            {"adversarial_rounds", c.adversarial_rounds},
            {"adversarial_batch", c.adversarial_batch},
            {"adversarial_opt",
             {{"lr_generator", c.adversarial_opt.lr_generator},
              {"lr_discriminator", c.adversarial_opt.lr_discriminator},
              {"momentum", c.adversarial_opt.momentum},
              {"adversarial_weight", c.adversarial_opt.adversarial_weight},
              {"clip_norm", c.adversarial_opt.clip_norm}}},
            {"unified", detail::train_to_json(c.unified)},
            {"unified_loss", c.unified_loss == ClassifierLoss::cross_entropy ? "cross_entropy" : "squared_error"},
            {"epsilon", detail::train_to_json(c.epsilon)},
            {"epsilon_data", c.epsilon_data},
            {"active_steps", c.active_steps},
            {"jump", c.jump},
            {"guidance_scale", c.guidance_scale},
            {"n_noisings", c.n_noisings},
            {"samples_per_class", c.samples_per_class},
            {"augmentation", c.augmentation},
            {"finetune", detail::train_to_json(c.finetune)},
            {"purity_filter", c.purity_filter},
            {"realign_after_augmentation", c.realign_after_augmentation},
            {"adversarial", c.adversarial},
            {"classifier_unification", c.classifier_unification},
            {"noise_optimization", c.noise_optimization},
            {"refresh_rounds", c.refresh_rounds},
            {"tds_fraction", c.tds_fraction},
            {"seed", c.seed}};
}

/// Missing keys keep the values of `base`; unknown keys are rejected.
inline PipelineConfig config_from_json(const json& j, PipelineConfig c = {}) {
    detail::reject_unknown_keys(
        j,
        {"dataset", "classifier_hidden", "classifier_activation", "embedding_dim", "epsilon_hidden",
         "discriminator_hidden", "T", "beta_start", "beta_end", "pretrain", "selection", "adversarial_rounds",
         "adversarial_batch", "adversarial_opt", "unified", "unified_loss", "epsilon", "epsilon_data", "active_steps",
         "jump", "guidance_scale", "n_noisings", "samples_per_class", "augmentation", "finetune", "purity_filter",
         "realign_after_augmentation", "adversarial", "classifier_unification", "noise_optimization", "refresh_rounds",
         "tds_fraction", "seed"},
        "config");
    if (j.contains("dataset")) c.dataset = dataset_from_json(j["dataset"], c.dataset);
    c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
    if (j.contains("classifier_activation")) {
        const auto a = j["classifier_activation"].get<std::string>();
        if (a != "relu" && a != "tanh") throw InvalidArgument("config: classifier_activation must be relu or tanh");
        c.classifier_activation = a == "relu" ? Activation::relu : Activation::tanh;
    }
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.epsilon_hidden = j.value("epsilon_hidden", c.epsilon_hidden);
    c.discriminator_hidden = j.value("discriminator_hidden", c.discriminator_hidden);
    c.T = j.value("T", c.T);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    if (j.contains("pretrain")) c.pretrain = detail::train_from_json(j["pretrain"], c.pretrain, "config.pretrain");
    if (j.contains("selection")) {
        const auto& s = j["selection"];
        detail::reject_unknown_keys(s, {"mode", "value", "per_class_min"}, "config.selection");
        const auto mode = s.value("mode", std::string(c.selection.mode == SelectionRule::Mode::quantile ? "quantile"
                                                                                                        : "threshold"));
        if (mode != "quantile" && mode != "threshold") throw InvalidArgument("config.selection: unknown mode " + mode);
        c.selection.mode = mode == "quantile" ? SelectionRule::Mode::quantile : SelectionRule::Mode::threshold;
        c.selection.value = s.value("value", c.selection.value);
        c.selection.per_class_min = s.value("per_class_min", c.selection.per_class_min);
    }
    c.adversarial_rounds = j.value("adversarial_rounds", c.adversarial_rounds);
    c.adversarial_batch = j.value("adversarial_batch", c.adversarial_batch);
    if (j.contains("adversarial_opt")) {
        const auto& a = j["adversarial_opt"];
        detail::reject_unknown_keys(
            a, {"lr_generator", "lr_discriminator", "momentum", "adversarial_weight", "clip_norm"}, "config.adversarial_opt");
        c.adversarial_opt.lr_generator = a.value("lr_generator", c.adversarial_opt.lr_generator);
        c.adversarial_opt.lr_discriminator = a.value("lr_discriminator", c.adversarial_opt.lr_discriminator);
        c.adversarial_opt.momentum = a.value("momentum", c.adversarial_opt.momentum);
        c.adversarial_opt.adversarial_weight = a.value("adversarial_weight", c.adversarial_opt.adversarial_weight);
        c.adversarial_opt.clip_norm = a.value("clip_norm", c.adversarial_opt.clip_norm);
    }
    if (j.contains("unified")) c.unified = detail::train_from_json(j["unified"], c.unified, "config.unified");
    if (j.contains("unified_loss")) {
        const auto l = j["unified_loss"].get<std::string>();
        if (l != "cross_entropy" && l != "squared_error")
            throw InvalidArgument("config: unified_loss must be cross_entropy or squared_error");
        c.unified_loss = l == "cross_entropy" ? ClassifierLoss::cross_entropy : ClassifierLoss::squared_error;
    }
    if (j.contains("epsilon")) c.epsilon = detail::train_from_json(j["epsilon"], c.epsilon, "config.epsilon");
    c.epsilon_data = j.value("epsilon_data", c.epsilon_data);
    c.active_steps = j.value("active_steps", c.active_steps);
    c.jump = j.value("jump", c.jump);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.n_noisings = j.value("n_noisings", c.n_noisings);
    c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
    c.augmentation = j.value("augmentation", c.augmentation);
    if (j.contains("finetune")) c.finetune = detail::train_from_json(j["finetune"], c.finetune, "config.finetune");
    c.purity_filter = j.value("purity_filter", c.purity_filter);
    c.realign_after_augmentation = j.value("realign_after_augmentation", c.realign_after_augmentation);
    c.adversarial = j.value("adversarial", c.adversarial);
    c.classifier_unification = j.value("classifier_unification", c.classifier_unification);
    c.noise_optimization = j.value("noise_optimization", c.noise_optimization);
    c.refresh_rounds = j.value("refresh_rounds", c.refresh_rounds);
    c.tds_fraction = j.value("tds_fraction", c.tds_fraction);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline DatasetBundle load_dataset(const DatasetSpec& d, std::uint64_t seed, std::vector<std::string>* warnings = nullptr) {
    if (d.generator == "two-moons") return gen_two_moons_shift(d.n_per_domain, d.rotation_degrees, d.noise_sd, seed);
    if (d.generator == "gaussian-blobs")
        return gen_gaussian_blobs_shift(d.num_classes, d.dim, d.translation, d.scale, seed, d.n_per_class, d.separation);
    if (d.generator == "csv") {
        if (d.path.empty()) throw InvalidArgument("dataset: csv generator needs a path");
        return load_csv(d.path, warnings);
    }
    throw InvalidArgument("dataset: unknown generator '" + d.generator + "'");
}

// ---------------------------------------------------------------------------
// Reports

struct StageRecord {
    std::string name;
    double seconds = 0.0;
    json metrics = json::object();
};

struct RunReport {
    std::uint64_t seed = 0;
    json config = json::object();
    std::vector<StageRecord> stages;
    std::vector<std::size_t> hcpl_census;  // selected samples per pseudo-class
    json priors = json::array();
    std::optional<double> purity;          // generated samples whose t = 0 argmax is the requested class
    std::size_t generated = 0;
    std::size_t generated_kept = 0;
    std::optional<double> source_accuracy;
    std::optional<double> pretrain_target_accuracy;
    std::optional<double> target_accuracy;
    std::vector<std::string> warnings;
    std::string status = "ok";
    std::string failed_stage;
    std::string error;

    json to_json(bool include_timing = true) const {
        auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
        json stage_list = json::array();
        json timing = json::object();
        for (const auto& s : stages) {
            stage_list.push_back({{"name", s.name}, {"metrics", s.metrics}});
            timing[s.name] = s.seconds;
        }
        json j = {{"seed", seed},
                  {"status", status},
                  {"failed_stage", failed_stage},
                  {"error", error},
                  {"source_accuracy", opt(source_accuracy)},
                  {"pretrain_target_accuracy", opt(pretrain_target_accuracy)},
                  {"target_accuracy", opt(target_accuracy)},
                  {"hcpl_census", hcpl_census},
                  {"priors", priors},
                  {"purity", opt(purity)},
                  {"generated", generated},
                  {"generated_kept", generated_kept},
                  {"stages", stage_list},
                  {"warnings", warnings},
                  {"config", config}};
        if (include_timing) j["timing_seconds"] = timing;
        return j;
    }
};

class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what, RunReport partial)
        : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)), partial_(std::move(partial)) {}
    const std::string& stage() const { return stage_; }
    const RunReport& partial() const { return partial_; }

private:
    std::string stage_;
    RunReport partial_;
};

/// Everything a run produced besides the report, for export.
struct RunArtifacts {
    std::optional<TimeAwareClassifier> classifier;
    std::optional<EpsilonNet> epsilon;
    std::optional<PseudoLabeledSet> hcpl;
    Tensor target_pool;
    std::vector<ClassPrior> priors;
    std::vector<LabeledSample> generated;
    std::vector<Trajectory> trajectories;
    std::vector<AdversarialLosses> adversarial_log;
};

// ---------------------------------------------------------------------------
// Run

namespace detail {

/// Stable 64-bit FNV-1a, used to name run directories.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::vector<LabeledSample> concat(std::vector<LabeledSample> a, const std::vector<LabeledSample>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

inline double last_or_nan(const std::vector<double>& v) { return v.empty() ? std::nan("") : v.back(); }

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace detail

/// run-<hash of config without seed>-s<seed>
inline std::string run_directory_name(const PipelineConfig& cfg) {
    json j = to_json(cfg);
    j.erase("seed");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(j.dump())));
    return std::string("run-") + buf + "-s" + std::to_string(cfg.seed);
}

/// Stage 1 alone: the source-only classifier a run starts from.
inline TimeAwareClassifier train_source_classifier(const PipelineConfig& cfg, const DatasetBundle& bundle) {
    const TimeEmbedding emb{cfg.embedding_dim, cfg.T, 100.0};
    auto clf = make_classifier(bundle.dim, bundle.num_classes, cfg.classifier_hidden, emb, derive_seed(cfg.seed, 10),
                               cfg.classifier_activation);
    Rng rng(derive_seed(cfg.seed, 100));
    train_supervised(clf, bundle.source_train, cfg.pretrain, rng);
    return clf;
}

inline RunReport run_nocdda(const PipelineConfig& cfg, RunArtifacts* artifacts = nullptr,
                            bool record_trajectories = false) {
    RunReport report;
    report.seed = cfg.seed;
    report.config = to_json(cfg);
    RunArtifacts local;
    RunArtifacts& art = artifacts ? *artifacts : local;

    std::string stage = "config";
    auto clock_start = std::chrono::steady_clock::now();
    auto begin = [&](std::string name) {
        stage = std::move(name);
        clock_start = std::chrono::steady_clock::now();
    };
    auto finish = [&](json metrics) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
        report.stages.push_back({stage, s, std::move(metrics)});
    };

    try {
        cfg.validate();
        begin("data");
        const auto bundle = load_dataset(cfg.dataset, cfg.dataset_seed(), &report.warnings);
        if (bundle.source_train.empty() || bundle.target_train.empty() || bundle.source_test.empty())
            throw InvalidArgument("dataset needs source train/test and target train samples");
        Tensor pool = features_matrix(bundle.target_train);
        if (cfg.tds_fraction < 1.0) {
            Rng rng(derive_seed(cfg.seed, 7));
            const auto order = permutation(pool.rows(), rng);
            const std::size_t keep = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::ceil(cfg.tds_fraction * double(pool.rows()))));
            std::vector<std::size_t> idx(order.begin(), order.begin() + keep);
            std::sort(idx.begin(), idx.end());
            pool = detail::gather_rows(pool, idx);
        }
        art.target_pool = pool;
        finish({{"source_train", bundle.source_train.size()},
                {"target_pool", pool.rows()},
                {"num_classes", bundle.num_classes},
                {"dim", bundle.dim}});

        const auto sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
        const std::size_t C = bundle.num_classes;

        begin("pretrain");
        auto clf = train_source_classifier(cfg, bundle);
        report.source_accuracy = evaluate_accuracy(clf, bundle.source_test);
        if (bundle.target_test_labelled()) report.pretrain_target_accuracy = evaluate_target_accuracy(clf, bundle);
        finish({{"source_accuracy", *report.source_accuracy}});

        std::optional<DomainDiscriminator> disc;
        if (cfg.adversarial)
            disc = make_discriminator(feature_dim(clf), C, cfg.discriminator_hidden, derive_seed(cfg.seed, 20));
        const auto source_x = features_matrix(bundle.source_train);
        const auto source_y = labels_of(bundle.source_train);

        auto align = [&](std::uint64_t stream) {
            AdversarialTrainer trainer(clf, *disc, cfg.adversarial_opt);
            Rng rng(derive_seed(cfg.seed, stream));
            json m = json::object();
            AdversarialLosses last;
            for (std::size_t r = 0; r < cfg.adversarial_rounds; ++r) {
                const std::size_t bs = std::min(cfg.adversarial_batch, source_x.rows());
                const std::size_t bt = std::min(cfg.adversarial_batch, pool.rows());
                std::vector<std::size_t> si(bs), ti(bt);
                std::vector<int> sy(bs);
                for (std::size_t k = 0; k < bs; ++k) {
                    si[k] = uniform_index(source_x.rows(), rng);
                    sy[k] = source_y[si[k]];
                }
                for (auto& k : ti) k = uniform_index(pool.rows(), rng);
                last = trainer.round(detail::gather_rows(source_x, si), sy, detail::gather_rows(pool, ti));
                art.adversarial_log.push_back(last);
            }
            if (trainer.saturated()) report.warnings.push_back("discriminator saturated during alignment");
            return json{{"rounds", cfg.adversarial_rounds},
                        {"final_sup_loss", last.supervised},
                        {"final_d_loss", last.discriminator},
                        {"final_confusion", last.confusion},
                        {"saturated", trainer.saturated()}};
        };

        for (std::size_t round = 0; round < cfg.refresh_rounds; ++round) {
            const std::string suffix = cfg.refresh_rounds > 1 ? "#" + std::to_string(round) : "";
            const std::uint64_t base = 1000 * (round + 1);

            begin("pseudo_label" + suffix);
            {
                const Tensor probs = predict(clf, pool, 0);
                std::vector<std::size_t> census(C, 0);
                double mean_entropy = 0.0;
                for (std::size_t i = 0; i < pool.rows(); ++i) {
                    ++census[argmax(probs.row(i))];
                    mean_entropy += entropy(probs.row(i));
                }
                finish({{"predicted_census", census}, {"mean_entropy", mean_entropy / double(pool.rows())}});
            }

            if (cfg.adversarial && cfg.adversarial_rounds > 0) {
                begin("adversarial" + suffix);
                finish(align(base + 3));
            }

            begin("select" + suffix);
            auto hcpl = select_hcpl(clf, pool, cfg.selection);
            if (hcpl.empty_warning) report.warnings.push_back("selection kept no target samples");
            report.hcpl_census = hcpl.class_counts(C);
            finish({{"selected", hcpl.size()},
                    {"census", report.hcpl_census},
                    {"rule_cutoff", hcpl.rule_cutoff},
                    {"cutoff", hcpl.cutoff},
                    {"quota_added", std::count(hcpl.by_quota.begin(), hcpl.by_quota.end(), true)}});

            // With unification the adapted classifier is also the guidance
            // classifier. Without it, guidance comes from a separately
            // initialised classifier trained on the same objective.
            std::optional<TimeAwareClassifier> guide;
            auto unify = [&](TimeAwareClassifier& target, const char* name) {
                begin(name + suffix);
                Rng rng(derive_seed(cfg.seed, base + 5));
                UnifiedConfig ucfg{cfg.unified, cfg.unified_loss, true, true};
                const auto tr = train_unified(target, bundle.source_train, hcpl.samples, sched, ucfg, rng);
                finish({{"final_total", detail::nullable(detail::last_or_nan(tr.total))},
                        {"final_clean_source", detail::nullable(detail::last_or_nan(tr.clean_source))},
                        {"final_clean_hcpl", detail::nullable(detail::last_or_nan(tr.clean_hcpl))},
                        {"final_noised_source", detail::nullable(detail::last_or_nan(tr.noised_source))},
                        {"final_noised_hcpl", detail::nullable(detail::last_or_nan(tr.noised_hcpl))}});
            };
            if (cfg.classifier_unification) {
                unify(clf, "unified");
            } else if (cfg.samples_per_class > 0) {
                guide = make_classifier(bundle.dim, C, cfg.classifier_hidden, clf.embedding, derive_seed(cfg.seed, 11),
                                        cfg.classifier_activation);
                unify(*guide, "guidance_classifier");
            }

            std::vector<LabeledSample> generated;
            if (cfg.samples_per_class > 0) {
                begin("epsilon" + suffix);
                Tensor eps_data = pool;
                if (cfg.epsilon_data == "hcpl") {
                    if (hcpl.empty()) throw InvalidArgument("no selected samples to train the epsilon net on");
                    eps_data = features_matrix(hcpl.samples);
                } else if (cfg.epsilon_data == "joint") {
                    eps_data = Tensor({source_x.rows() + pool.rows(), pool.cols()});
                    std::copy(source_x.values().begin(), source_x.values().end(), eps_data.values().begin());
                    std::copy(pool.values().begin(), pool.values().end(),
                              eps_data.values().begin() + source_x.size());
                }
                auto eps = make_epsilon_net(bundle.dim, cfg.epsilon_hidden, clf.embedding, derive_seed(cfg.seed, 30));
                Rng rng(derive_seed(cfg.seed, base + 6));
                const auto trace = train_epsilon(eps_data, sched, eps, cfg.epsilon, rng);
                finish({{"final_loss", detail::last_or_nan(trace)}, {"samples", eps_data.rows()}});

                begin("generate" + suffix);
                Rng prior_rng(derive_seed(cfg.seed, base + 7));
                std::vector<ClassPrior> priors;
                std::vector<int> skipped;
                report.priors = json::array();
                for (std::size_t c = 0; c < C; ++c) {
                    const auto members = hcpl.members_of(int(c));
                    if (members.empty()) {
                        skipped.push_back(int(c));
                        continue;
                    }
                    priors.push_back(estimate_class_prior(members, int(c), C, sched, cfg.n_noisings, prior_rng));
                    const auto& p = priors.back();
                    report.priors.push_back({{"class_id", p.class_id},
                                             {"mu", p.mu.data()},
                                             {"sigma_scale", p.sigma_scale},
                                             {"empirical_variance", p.empirical_variance},
                                             {"support_count", p.support_count}});
                }
                if (!skipped.empty())
                    report.warnings.push_back("no selected samples for classes " + json(skipped).dump() +
                                              "; nothing generated for them");
                auto scfg = cfg.sampler();
                scfg.seed = derive_seed(cfg.seed, base + 8);
                auto gen = generate(eps, guide ? *guide : clf, sched, priors, scfg, cfg.samples_per_class,
                                    record_trajectories);
                if (gen.aborted > 0)
                    report.warnings.push_back(std::to_string(gen.aborted) + " generated samples went non-finite");
                if (gen.clamped) report.warnings.push_back("guidance log-probability underflowed for some samples");
                report.generated = gen.samples.size();
                report.purity = gen.samples.empty() ? std::optional<double>() : class_purity(clf, gen.samples);
                for (auto& s : gen.samples) {
                    if (cfg.purity_filter) {
                        const Tensor p = predict(clf, Tensor({bundle.dim}, s.features), 0);
                        if (int(argmax(p.values())) != *s.label) continue;
                    }
                    generated.push_back(s);
                }
                report.generated_kept = generated.size();
                finish({{"generated", report.generated},
                        {"kept", report.generated_kept},
                        {"purity", report.purity ? json(*report.purity) : json(nullptr)},
                        {"aborted", gen.aborted}});
                art.epsilon = std::move(eps);
                art.priors = priors;
                art.trajectories = std::move(gen.trajectories);
            }

            // Zero generated samples means there is nothing to augment with.
            if (cfg.augmentation == "finetune" && !generated.empty()) {
                begin("augment" + suffix);
                Rng rng(derive_seed(cfg.seed, base + 9));
                UnifiedConfig fcfg{cfg.finetune, cfg.unified_loss, true, false};
                const auto tr =
                    train_unified(clf, bundle.source_train, detail::concat(hcpl.samples, generated), sched, fcfg, rng);
                finish({{"final_total", detail::last_or_nan(tr.total)},
                        {"pool", hcpl.size() + generated.size()}});
                if (cfg.adversarial && cfg.realign_after_augmentation && cfg.adversarial_rounds > 0) {
                    begin("realign" + suffix);
                    finish(align(base + 10));
                }
            }
            art.generated = std::move(generated);
            art.hcpl = std::move(hcpl);
        }

        begin("evaluate");
        report.source_accuracy = evaluate_accuracy(clf, bundle.source_test);
        if (bundle.target_test_labelled()) {
            report.target_accuracy = evaluate_target_accuracy(clf, bundle);
        } else {
            report.warnings.push_back("target test labels unavailable; target accuracy not computed");
        }
        finish({{"source_accuracy", *report.source_accuracy},
                {"target_accuracy", report.target_accuracy ? json(*report.target_accuracy) : json(nullptr)}});
        art.classifier = std::move(clf);
    } catch (const std::exception& e) {
        report.status = "failed";
        report.failed_stage = stage;
        report.error = e.what();
        throw StageError(stage, e.what(), report);
    }
    return report;
}

inline void write_json(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Writes report.json, config.json and whatever artifacts exist into `dir`.
inline void write_run_directory(const std::filesystem::path& dir, const RunReport& report, const RunArtifacts& art,
                                const PipelineConfig& cfg) {
    std::filesystem::create_directories(dir);
    write_json(report.to_json(), dir / "report.json");
    write_json(to_json(cfg), dir / "config.json");
    write_json(schedule_to_json(make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end), cfg.seed),
               dir / "schedule.json");
    if (art.classifier) write_json(classifier_to_json(*art.classifier), dir / "classifier.json");
    if (art.epsilon) write_json(epsilon_net_to_json(*art.epsilon), dir / "epsilon.json");
    if (art.hcpl) save_hcpl_csv(*art.hcpl, art.target_pool, (dir / "hcpl.csv").string());
    if (!art.generated.empty() || art.epsilon)
        save_samples_csv(art.generated, art.target_pool.cols(), (dir / "generated.csv").string());
    if (!art.trajectories.empty()) save_trajectories_csv(art.trajectories, (dir / "trajectories.csv").string());
    if (!art.adversarial_log.empty()) save_adversarial_log(art.adversarial_log, (dir / "adversarial.csv").string());
}

// ---------------------------------------------------------------------------
// Ablation grid

enum class Variant { baseline, G, G_CU, NOCDDA };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::G: return "G";
        case Variant::G_CU: return "G+CU";
        case Variant::NOCDDA: return "NOCDDA";
    }
    return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
    for (auto v : {Variant::baseline, Variant::G, Variant::G_CU, Variant::NOCDDA})
        if (s == variant_name(v)) return v;
    return std::nullopt;
}

/// Stage toggles of a variant. The baseline switches everything off and
/// generates nothing; the others keep the base adversarial setting.
inline PipelineConfig apply_variant(PipelineConfig cfg, Variant v, std::size_t gen_count) {
    cfg.samples_per_class = gen_count;
    switch (v) {
        case Variant::baseline:
            cfg.adversarial = false;
            cfg.classifier_unification = false;
            cfg.noise_optimization = false;
            cfg.samples_per_class = 0;
            break;
        case Variant::G:
            cfg.classifier_unification = false;
            cfg.noise_optimization = false;
            break;
        case Variant::G_CU:
            cfg.classifier_unification = true;
            cfg.noise_optimization = false;
            break;
        case Variant::NOCDDA:
            cfg.classifier_unification = true;
            cfg.noise_optimization = true;
            break;
    }
    return cfg;
}

struct GridCell {
    double tds_fraction = 1.0;
    Variant variant = Variant::NOCDDA;
    std::size_t gen_count = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    RunReport report;
};

struct AblationGrid {
    std::vector<double> tds_fractions;
    std::vector<std::size_t> gen_counts;
    std::vector<Variant> variants;
    std::vector<std::uint64_t> seeds;
    std::vector<GridCell> cells;

    /// Median target accuracy over the successful seeds of one cell, NaN if none.
    double median_accuracy(double tds, Variant v, std::size_t gen) const {
        std::vector<double> acc;
        for (const auto& c : cells)
            if (!c.failed && c.tds_fraction == tds && c.variant == v && c.gen_count == gen && c.report.target_accuracy)
                acc.push_back(*c.report.target_accuracy);
        return median(acc);
    }

    static double median(std::vector<double> v) {
        if (v.empty()) return std::nan("");
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
};

/// Runs the Cartesian product of the axes. The baseline variant ignores the
/// generation axis and is run once per (tds, seed).
inline AblationGrid run_ablation_grid(const PipelineConfig& base, std::vector<double> tds_fractions,
                                      std::vector<std::size_t> gen_counts, std::vector<Variant> variants,
                                      std::vector<std::uint64_t> seeds,
                                      const std::function<void(const GridCell&)>& on_cell = {}) {
    if (tds_fractions.empty() || gen_counts.empty() || variants.empty() || seeds.empty())
        throw InvalidArgument("ablation grid: every axis needs at least one value");
    AblationGrid grid{tds_fractions, gen_counts, variants, seeds, {}};
    for (double tds : tds_fractions)
        for (Variant v : variants)
            for (std::size_t gen : gen_counts) {
                if (v == Variant::baseline && gen != gen_counts.front()) continue;
                for (auto seed : seeds) {
                    PipelineConfig cfg = apply_variant(base, v, gen);
                    cfg.tds_fraction = tds;
                    cfg.seed = seed;
                    GridCell cell{tds, v, v == Variant::baseline ? 0 : gen, seed, false, "", {}};
                    try {
                        cell.report = run_nocdda(cfg);
                    } catch (const StageError& e) {
                        cell.failed = true;
                        cell.error = e.what();
                        cell.report = e.partial();
                    }
                    if (on_cell) on_cell(cell);
                    grid.cells.push_back(std::move(cell));
                }
            }
    return grid;
}

/// Rows are TDS fractions, columns variant x gen_count, entries median target
/// accuracy over seeds ("NA" when every seed failed).
inline void save_grid_csv(const AblationGrid& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    std::vector<std::pair<Variant, std::size_t>> cols;
    for (Variant v : grid.variants) {
        if (v == Variant::baseline) {
            cols.emplace_back(v, 0);
            continue;
        }
        for (auto g : grid.gen_counts) cols.emplace_back(v, g);
    }
    out << "tds";
    for (auto& [v, g] : cols) out << ',' << variant_name(v) << '@' << g;
    out << '\n';
    for (double tds : grid.tds_fractions) {
        out << detail::format_real(tds);
        for (auto& [v, g] : cols) {
            const double m = grid.median_accuracy(tds, v, g);
            out << ',' << (std::isnan(m) ? std::string("NA") : detail::format_real(m));
        }
        out << '\n';
    }
}

/// One line per run.
inline void save_cells_csv(const AblationGrid& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    out << "tds,variant,gen_count,seed,status,target_accuracy,source_accuracy,purity,generated_kept\n";
    auto opt = [](const std::optional<double>& v) { return v ? detail::format_real(*v) : std::string("NA"); };
    for (const auto& c : grid.cells) {
        out << detail::format_real(c.tds_fraction) << ',' << variant_name(c.variant) << ',' << c.gen_count << ','
            << c.seed << ',' << (c.failed ? "failed" : "ok") << ',' << opt(c.report.target_accuracy) << ','
            << opt(c.report.source_accuracy) << ',' << opt(c.report.purity) << ',' << c.report.generated_kept << '\n';
    }
}

}  // namespace nocdda
