// nocdda: command-line front end for dataset generation, adaptation runs,
// sampling, evaluation, ablation grids and trajectory plots.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nocdda/pipeline.hpp"
#include "nocdda/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nocdda;

namespace {

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::string config_path;
};

/// Thrown for failures outside a pipeline run; reported as "[tag] message".
struct TaggedError : std::runtime_error {
    TaggedError(const std::string& tag, const std::string& what) : std::runtime_error("[" + tag + "] " + what) {}
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_config) {
    cmd->add_option("--seed", f.seed, "Seed (falls back to $NOCDDA_SEED, then the config, then 0)");
    cmd->add_option("--out-dir", f.out_dir, "Directory for artifacts")->capture_default_str();
    if (with_config) cmd->add_option("--config", f.config_path, "PipelineConfig JSON; flags override its fields");
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("NOCDDA_SEED");
    if (!v || !*v) return std::nullopt;
    try {
        std::size_t used = 0;
        const auto s = std::stoull(v, &used);
        if (used != std::string(v).size()) throw std::invalid_argument(v);
        return s;
    } catch (const std::exception&) {
        throw TaggedError("config", std::string("NOCDDA_SEED is not an unsigned integer: ") + v);
    }
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TaggedError("config", "cannot read " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw TaggedError("config", path + ": " + e.what());
    }
}

PipelineConfig load_config(const CommonFlags& f) {
    PipelineConfig cfg;
    try {
        if (!f.config_path.empty()) cfg = config_from_json(read_json_file(f.config_path));
    } catch (const InvalidArgument& e) {
        throw TaggedError("config", e.what());
    } catch (const json::exception& e) {
        throw TaggedError("config", e.what());
    }
    if (f.seed) {
        cfg.seed = *f.seed;
    } else if (auto s = env_seed()) {
        cfg.seed = *s;
    }
    return cfg;
}

std::uint64_t resolve_seed(const CommonFlags& f) {
    if (f.seed) return *f.seed;
    if (auto s = env_seed()) return *s;
    return 0;
}

fs::path ensure_dir(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw TaggedError("io", "cannot create " + dir + ": " + ec.message());
    return p;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::istringstream is(item);
        T v;
        if (!(is >> v) || !is.eof()) throw TaggedError("config", std::string("bad ") + what + " list entry '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw TaggedError("config", std::string("empty ") + what + " list");
    return out;
}

// ---------------------------------------------------------------------------

struct GenDataFlags {
    CommonFlags common;
    std::string generator = "two-moons";
    std::size_t n = 1000;
    double rotation = 30.0;
    double noise = 0.1;
    std::size_t classes = 3;
    std::size_t dim = 2;
    std::vector<double> translation;
    double scale = 1.0;
    std::size_t n_per_class = 100;
    double separation = 6.0;
    std::string name = "data";
};

int run_gen_data(const GenDataFlags& f) {
    DatasetSpec spec;
    spec.generator = f.generator;
    spec.n_per_domain = f.n;
    spec.rotation_degrees = f.rotation;
    spec.noise_sd = f.noise;
    spec.num_classes = f.classes;
    spec.dim = f.dim;
    spec.translation = f.translation;
    spec.scale = f.scale;
    spec.n_per_class = f.n_per_class;
    spec.separation = f.separation;
    const auto seed = resolve_seed(f.common);
    spec.seed = seed;
    DatasetBundle bundle;
    try {
        bundle = load_dataset(spec, seed);
    } catch (const InvalidArgument& e) {
        throw TaggedError("gen-data", e.what());
    }
    const auto dir = ensure_dir(f.common.out_dir);
    const auto csv = dir / (f.name + ".csv");
    save_csv(bundle, csv.string());
    write_json({{"command", "gen-data"}, {"dataset", to_json(spec)}}, dir / (f.name + ".config.json"));
    std::cout << csv.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct PipelineFlags {
    CommonFlags common;
    std::string data;
    std::optional<double> rotation;
    std::optional<double> guidance_scale;
    std::optional<std::size_t> samples_per_class;
    std::optional<double> tds;
    std::optional<std::size_t> T;
    std::optional<std::size_t> active_steps;
    std::optional<std::size_t> adversarial_rounds;
    bool no_adversarial = false;
    bool no_cu = false;
    bool no_noise_opt = false;
    bool trajectories = false;
};

void add_pipeline_overrides(CLI::App* cmd, PipelineFlags& f) {
    cmd->add_option("--data", f.data, "Bundle CSV to use instead of the configured generator");
    cmd->add_option("--rotation", f.rotation, "Two-moons target rotation in degrees");
    cmd->add_option("--guidance-scale", f.guidance_scale, "Classifier guidance scale (>= 0)");
    cmd->add_option("--samples-per-class", f.samples_per_class, "Generated samples per class");
    cmd->add_option("--tds", f.tds, "Fraction of the target pool kept before selection");
    cmd->add_option("--diffusion-steps", f.T, "Diffusion length T");
    cmd->add_option("--active-steps", f.active_steps, "Reverse steps visited while sampling");
    cmd->add_option("--adversarial-rounds", f.adversarial_rounds, "Alignment rounds");
    cmd->add_flag("--no-adversarial", f.no_adversarial, "Disable adversarial alignment");
    cmd->add_flag("--no-cu", f.no_cu, "Disable classifier unification");
    cmd->add_flag("--no-noise-opt", f.no_noise_opt, "Start reverse sampling from N(0, I)");
}

PipelineConfig effective_config(const PipelineFlags& f) {
    auto cfg = load_config(f.common);
    if (!f.data.empty()) {
        cfg.dataset.generator = "csv";
        cfg.dataset.path = f.data;
    }
    if (f.rotation) cfg.dataset.rotation_degrees = *f.rotation;
    if (f.guidance_scale) cfg.guidance_scale = *f.guidance_scale;
    if (f.samples_per_class) cfg.samples_per_class = *f.samples_per_class;
    if (f.tds) cfg.tds_fraction = *f.tds;
    if (f.T) cfg.T = *f.T;
    if (f.active_steps) cfg.active_steps = *f.active_steps;
    if (f.adversarial_rounds) cfg.adversarial_rounds = *f.adversarial_rounds;
    if (f.no_adversarial) cfg.adversarial = false;
    if (f.no_cu) cfg.classifier_unification = false;
    if (f.no_noise_opt) cfg.noise_optimization = false;
    try {
        cfg.validate();
    } catch (const InvalidArgument& e) {
        throw TaggedError("config", e.what());
    }
    return cfg;
}

int run_train_source(const PipelineFlags& f) {
    const auto cfg = effective_config(f);
    const auto dir = ensure_dir(f.common.out_dir);
    write_json(to_json(cfg), dir / "config.json");
    DatasetBundle bundle;
    try {
        bundle = load_dataset(cfg.dataset, cfg.dataset_seed());
    } catch (const std::exception& e) {
        throw TaggedError("data", e.what());
    }
    try {
        const auto clf = train_source_classifier(cfg, bundle);
        json metrics = {{"source_accuracy", evaluate_accuracy(clf, bundle.source_test)}, {"seed", cfg.seed}};
        metrics["target_accuracy"] = bundle.target_test_labelled() ? json(evaluate_target_accuracy(clf, bundle)) : json(nullptr);
        write_json(classifier_to_json(clf), dir / "classifier.json");
        write_json(metrics, dir / "metrics.json");
        std::cout << metrics.dump() << '\n';
    } catch (const std::exception& e) {
        throw TaggedError("pretrain", e.what());
    }
    return 0;
}

int run_adapt(const PipelineFlags& f) {
    const auto cfg = effective_config(f);
    const auto dir = ensure_dir(f.common.out_dir) / run_directory_name(cfg);
    fs::create_directories(dir);
    write_json(to_json(cfg), dir / "config.json");
    RunArtifacts art;
    try {
        const auto report = run_nocdda(cfg, &art, f.trajectories);
        write_run_directory(dir, report, art, cfg);
        std::cout << (dir / "report.json").string() << '\n';
        return 0;
    } catch (const StageError& e) {
        write_json(e.partial().to_json(), dir / "report.json");
        throw;
    }
}

// ---------------------------------------------------------------------------

struct SampleFlags {
    CommonFlags common;
    std::string run_dir;
    std::size_t n = 50;
    std::optional<double> guidance_scale;
    std::string init = "class-prior";
    std::optional<std::size_t> n_noisings;
};

int run_sample(const SampleFlags& f) {
    const fs::path run(f.run_dir);
    PipelineConfig cfg;
    TimeAwareClassifier clf;
    EpsilonNet eps;
    std::vector<LabeledSample> hcpl;
    try {
        cfg = config_from_json(read_json_file((run / "config.json").string()));
        clf = classifier_from_json(read_json_file((run / "classifier.json").string()));
        eps = epsilon_net_from_json(read_json_file((run / "epsilon.json").string()));
        hcpl = load_hcpl_csv((run / "hcpl.csv").string());
    } catch (const TaggedError&) {
        throw;
    } catch (const std::exception& e) {
        throw TaggedError("load", e.what());
    }
    if (f.init != "class-prior" && f.init != "standard-normal")
        throw TaggedError("config", "--init must be class-prior or standard-normal");
    const auto seed = f.common.seed ? *f.common.seed : env_seed().value_or(cfg.seed);
    const auto sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    try {
        Rng rng(derive_seed(seed, 1));
        std::vector<ClassPrior> priors;
        json prior_log = json::array();
        for (std::size_t c = 0; c < clf.num_classes; ++c) {
            std::vector<LabeledSample> members;
            for (const auto& s : hcpl)
                if (s.label == int(c)) members.push_back(s);
            if (members.empty()) {
                std::cerr << "warning: no selected samples for class " << c << "; skipped\n";
                continue;
            }
            priors.push_back(estimate_class_prior(members, int(c), clf.num_classes, sched,
                                                  f.n_noisings.value_or(cfg.n_noisings), rng));
            prior_log.push_back({{"class_id", c},
                                 {"mu", priors.back().mu.data()},
                                 {"sigma_scale", priors.back().sigma_scale},
                                 {"empirical_variance", priors.back().empirical_variance},
                                 {"support_count", priors.back().support_count}});
        }
        auto scfg = cfg.sampler();
        scfg.seed = derive_seed(seed, 2);
        if (f.guidance_scale) scfg.guidance_scale = *f.guidance_scale;
        scfg.init = f.init == "class-prior" ? TerminalInit::class_prior : TerminalInit::standard_normal;
        const auto gen = generate(eps, clf, sched, priors, scfg, f.n, true);
        const auto dir = ensure_dir(f.common.out_dir);
        save_samples_csv(gen.samples, clf.data_dim, (dir / "generated.csv").string());
        save_trajectories_csv(gen.trajectories, (dir / "trajectories.csv").string());
        const json summary = {{"seed", seed},
                              {"guidance_scale", scfg.guidance_scale},
                              {"init", f.init},
                              {"generated", gen.samples.size()},
                              {"aborted", gen.aborted},
                              {"purity", gen.samples.empty() ? json(nullptr) : json(class_purity(clf, gen.samples))},
                              {"priors", prior_log},
                              {"run_dir", f.run_dir}};
        write_json(summary, dir / "sample.json");
        std::cout << summary.dump() << '\n';
    } catch (const std::exception& e) {
        throw TaggedError("generate", e.what());
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalFlags {
    PipelineFlags pipeline;
    std::string classifier;
};

int run_eval(const EvalFlags& f) {
    const auto cfg = effective_config(f.pipeline);
    TimeAwareClassifier clf;
    DatasetBundle bundle;
    try {
        clf = classifier_from_json(read_json_file(f.classifier));
        bundle = load_dataset(cfg.dataset, cfg.dataset_seed());
    } catch (const TaggedError&) {
        throw;
    } catch (const std::exception& e) {
        throw TaggedError("load", e.what());
    }
    try {
        json out = {{"classifier", f.classifier}, {"dataset", to_json(cfg.dataset)}, {"seed", cfg.seed}};
        out["source_accuracy"] = bundle.source_test.empty() ? json(nullptr) : json(evaluate_accuracy(clf, bundle.source_test));
        out["target_accuracy"] = bundle.target_test_labelled() ? json(evaluate_target_accuracy(clf, bundle)) : json(nullptr);
        const auto dir = ensure_dir(f.pipeline.common.out_dir);
        write_json(out, dir / "eval.json");
        std::cout << out.dump() << '\n';
    } catch (const std::exception& e) {
        throw TaggedError("evaluate", e.what());
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct AblateFlags {
    PipelineFlags pipeline;
    std::string tds = "0.5,1";
    std::string gen = "0,100";
    std::string variants = "baseline,G,G+CU,NOCDDA";
    std::string seeds;
    std::size_t n_seeds = 5;
};

int run_ablate(const AblateFlags& f) {
    const auto cfg = effective_config(f.pipeline);
    const auto tds = parse_list<double>(f.tds, "tds");
    const auto gen = parse_list<std::size_t>(f.gen, "gen");
    std::vector<Variant> variants;
    for (const auto& name : parse_list<std::string>(f.variants, "variant")) {
        const auto v = parse_variant(name);
        if (!v) throw TaggedError("config", "unknown variant '" + name + "' (baseline, G, G+CU, NOCDDA)");
        variants.push_back(*v);
    }
    std::vector<std::uint64_t> seeds;
    if (!f.seeds.empty()) {
        seeds = parse_list<std::uint64_t>(f.seeds, "seed");
    } else {
        for (std::size_t k = 0; k < f.n_seeds; ++k) seeds.push_back(cfg.seed + k);
    }
    const json echo = {{"base", to_json(cfg)}, {"tds", tds}, {"gen", gen}, {"variants", f.variants}, {"seeds", seeds}};
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(detail::fnv1a(echo.dump())));
    const auto dir = ensure_dir(f.pipeline.common.out_dir) / (std::string("ablation-") + hash);
    fs::create_directories(dir);
    write_json(echo, dir / "config.json");
    const auto grid = run_ablation_grid(cfg, tds, gen, variants, seeds, [](const GridCell& c) {
        std::cerr << variant_name(c.variant) << " tds=" << c.tds_fraction << " gen=" << c.gen_count << " seed=" << c.seed
                  << ' ' << (c.failed ? "failed: " + c.error
                                      : "acc=" + (c.report.target_accuracy ? std::to_string(*c.report.target_accuracy)
                                                                           : std::string("NA")))
                  << '\n';
    });
    save_grid_csv(grid, (dir / "grid.csv").string());
    save_cells_csv(grid, (dir / "cells.csv").string());
    std::cout << (dir / "grid.csv").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct PlotFlags {
    CommonFlags common;
    std::string trajectories;
    std::string out = "trajectories.svg";
    std::string dims;
};

int run_plot(const PlotFlags& f) {
    PlotOptions opt;
    if (!f.dims.empty()) {
        const auto d = parse_list<std::size_t>(f.dims, "dims");
        if (d.size() != 2) throw TaggedError("config", "--dims takes two coordinates, e.g. 0,1");
        opt.dim_x = d[0];
        opt.dim_y = d[1];
        opt.allow_projection = true;
    }
    const auto dir = ensure_dir(f.common.out_dir);
    const auto out = fs::path(f.out).is_absolute() ? fs::path(f.out) : dir / f.out;
    try {
        plot_trajectories(f.trajectories, out.string(), opt);
    } catch (const std::exception& e) {
        throw TaggedError("plot", e.what());
    }
    std::cout << out.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-augmented domain adaptation toolkit"};
    app.require_subcommand(1);

    GenDataFlags gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic domain-shift bundle (CSV + JSON sidecar)");
    add_common(gen_cmd, gen.common, false);
    gen_cmd->add_option("--generator", gen.generator, "two-moons | gaussian-blobs")
        ->check(CLI::IsMember({"two-moons", "gaussian-blobs"}))
        ->capture_default_str();
    gen_cmd->add_option("--n", gen.n, "Two-moons samples per domain")->capture_default_str();
    gen_cmd->add_option("--rotation", gen.rotation, "Two-moons target rotation (degrees)")->capture_default_str();
    gen_cmd->add_option("--noise", gen.noise, "Two-moons noise standard deviation")->capture_default_str();
    gen_cmd->add_option("--classes", gen.classes, "Blob classes")->capture_default_str();
    gen_cmd->add_option("--dim", gen.dim, "Blob dimension")->capture_default_str();
    gen_cmd->add_option("--translation", gen.translation, "Blob target translation (d values)")->delimiter(',');
    gen_cmd->add_option("--scale", gen.scale, "Blob standard deviation")->capture_default_str();
    gen_cmd->add_option("--n-per-class", gen.n_per_class, "Blob samples per class and domain")->capture_default_str();
    gen_cmd->add_option("--separation", gen.separation, "Distance between neighbouring blob means")->capture_default_str();
    gen_cmd->add_option("--name", gen.name, "Output file stem")->capture_default_str();

    PipelineFlags train;
    auto* train_cmd = app.add_subcommand("train-source", "Train the source-only classifier");
    add_common(train_cmd, train.common, true);
    add_pipeline_overrides(train_cmd, train);

    PipelineFlags adapt;
    auto* adapt_cmd = app.add_subcommand("adapt", "Run the full adaptation pipeline into a run directory");
    add_common(adapt_cmd, adapt.common, true);
    add_pipeline_overrides(adapt_cmd, adapt);
    adapt_cmd->add_flag("--trajectories", adapt.trajectories, "Record reverse-sampling trajectories");

    SampleFlags sample;
    auto* sample_cmd = app.add_subcommand("sample", "Generate samples from the networks of an adapt run directory");
    add_common(sample_cmd, sample.common, false);
    sample_cmd->add_option("--run-dir", sample.run_dir, "Directory written by adapt")->required();
    sample_cmd->add_option("--n", sample.n, "Samples per class")->capture_default_str();
    sample_cmd->add_option("--guidance-scale", sample.guidance_scale, "Override the run's guidance scale");
    sample_cmd->add_option("--init", sample.init, "class-prior | standard-normal")
        ->check(CLI::IsMember({"class-prior", "standard-normal"}))
        ->capture_default_str();
    sample_cmd->add_option("--n-noisings", sample.n_noisings, "Noisings per selected sample for the class prior");

    EvalFlags eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a classifier checkpoint on a dataset");
    add_common(eval_cmd, eval.pipeline.common, true);
    add_pipeline_overrides(eval_cmd, eval.pipeline);
    eval_cmd->add_option("--classifier", eval.classifier, "classifier.json checkpoint")->required();

    AblateFlags ablate;
    auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation grid (tds x variant x gen_count x seed)");
    add_common(ablate_cmd, ablate.pipeline.common, true);
    add_pipeline_overrides(ablate_cmd, ablate.pipeline);
    ablate_cmd->add_option("--tds-list", ablate.tds, "Comma-separated TDS fractions")->capture_default_str();
    ablate_cmd->add_option("--gen-list", ablate.gen, "Comma-separated samples-per-class counts")->capture_default_str();
    ablate_cmd->add_option("--variants", ablate.variants, "Comma-separated variants")->capture_default_str();
    ablate_cmd->add_option("--seeds", ablate.seeds, "Comma-separated seeds (default: seed .. seed+n-seeds-1)");
    ablate_cmd->add_option("--n-seeds", ablate.n_seeds, "Number of consecutive seeds")->capture_default_str();

    PlotFlags plot;
    auto* plot_cmd = app.add_subcommand("plot", "Render a trajectory CSV as SVG");
    add_common(plot_cmd, plot.common, false);
    plot_cmd->add_option("--trajectories", plot.trajectories, "CSV written by adapt --trajectories or sample")->required();
    plot_cmd->add_option("--out", plot.out, "SVG path (relative to --out-dir)")->capture_default_str();
    plot_cmd->add_option("--dims", plot.dims, "Two coordinates to draw for d > 2, e.g. 0,1");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help();
        return 2;
    }

    try {
        if (*gen_cmd) return run_gen_data(gen);
        if (*train_cmd) return run_train_source(train);
        if (*adapt_cmd) return run_adapt(adapt);
        if (*sample_cmd) return run_sample(sample);
        if (*eval_cmd) return run_eval(eval);
        if (*ablate_cmd) return run_ablate(ablate);
        if (*plot_cmd) return run_plot(plot);
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const TaggedError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: [internal] " << e.what() << '\n';
        return 1;
    }
    return 2;
}
