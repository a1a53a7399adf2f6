#pragma once

// Class-prior initialised, classifier-guided deterministic DDIM sampling.
//
//   x_T       = mu_c + sqrt(1/C) z
//   eps_hat   = eps(x_t, t) - s * sqrt(1 - abar_t) * grad_x log p(c | x_t, t)
//   x_{t'}    = sqrt(abar_t') * (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
//             + sqrt(1 - abar_t') * eps_hat

#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nocdda/classifier.hpp"
#include "nocdda/data.hpp"
#include "nocdda/diffusion.hpp"
#include "nocdda/random.hpp"

namespace nocdda {

struct ClassPrior {
    int class_id = 0;
    Tensor mu;                  // mean of forward-diffused class members at step T
    double sigma_scale = 1.0;   // covariance used for sampling is sigma_scale * I
    std::size_t support_count = 0;
    double empirical_variance = 0.0;  // mean per-coordinate variance of the noised members (diagnostic only)

    void validate() const {
        if (mu.empty() || !mu.all_finite()) throw InvalidArgument("class prior: mean must be finite");
        if (support_count < 1) throw InvalidArgument("class prior: no supporting samples");
        if (!(sigma_scale > 0.0)) throw InvalidArgument("class prior: sigma_scale must be positive");
    }
};

/// Forward-diffuses every member to step T `n_noisings` times; mu is the grand
/// mean and the sampling covariance is fixed to (1/C) I.
inline ClassPrior estimate_class_prior(const Tensor& members, int class_id, std::size_t num_classes,
                                       const NoiseSchedule& sched, std::size_t n_noisings, Rng& rng) {
    if (members.empty()) throw InvalidArgument("class prior: class " + std::to_string(class_id) + " has no members");
    if (n_noisings == 0) throw InvalidArgument("class prior: n_noisings must be positive");
    if (num_classes < 1) throw InvalidArgument("class prior: num_classes must be positive");
    const std::size_t n = members.rows(), d = members.cols(), T = sched.T();
    const double a = std::sqrt(sched.alpha_bar(T)), s = std::sqrt(1.0 - sched.alpha_bar(T));
    std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n_noisings; ++k)
            for (std::size_t j = 0; j < d; ++j) {
                const double v = a * members.at(i, j) + s * standard_normal(rng);
                sum[j] += v;
                sum_sq[j] += v * v;
            }
    const double count = double(n * n_noisings);
    ClassPrior p;
    p.class_id = class_id;
    p.mu = Tensor({d});
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        p.mu[j] = sum[j] / count;
        var += count > 1 ? (sum_sq[j] - count * p.mu[j] * p.mu[j]) / (count - 1) : 0.0;
    }
    p.empirical_variance = var / double(d);
    p.sigma_scale = 1.0 / double(num_classes);
    p.support_count = n;
    return p;
}

inline ClassPrior estimate_class_prior(const std::vector<LabeledSample>& members, int class_id, std::size_t num_classes,
                                       const NoiseSchedule& sched, std::size_t n_noisings, Rng& rng) {
    if (members.empty()) throw InvalidArgument("class prior: class " + std::to_string(class_id) + " has no members");
    return estimate_class_prior(features_matrix(members), class_id, num_classes, sched, n_noisings, rng);
}

/// mu + sqrt(sigma_scale) z for an explicit standard-normal draw z.
inline Tensor init_terminal(const ClassPrior& prior, const Tensor& z) {
    prior.validate();
    if (z.cols() != prior.mu.size()) throw InvalidArgument("init_terminal: noise dimension mismatch");
    Tensor x = z;
    const double s = std::sqrt(prior.sigma_scale);
    const std::size_t d = prior.mu.size();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = prior.mu[i % d] + s * z[i];
    return x;
}

inline Tensor init_terminal(const ClassPrior& prior, Rng& rng) {
    return init_terminal(prior, standard_normal({prior.mu.size()}, rng));
}

enum class TerminalInit { class_prior, standard_normal };

struct SamplerConfig {
    std::size_t total_T = 1000;
    std::size_t active_steps = 200;
    std::size_t jump = 5;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
    TerminalInit init = TerminalInit::class_prior;

    void validate() const {
        if (total_T < 1 || active_steps < 1 || jump < 1) throw InvalidArgument("sampler: steps must be positive");
        if (active_steps * jump > total_T) throw InvalidArgument("sampler: active_steps * jump exceeds total_T");
        if (!(guidance_scale >= 0.0)) throw InvalidArgument("sampler: guidance_scale must be >= 0");
    }

    /// T, T - jump, ..., T - (active_steps - 1) * jump, then 0.
    std::vector<std::size_t> visited_steps() const {
        validate();
        std::vector<std::size_t> steps;
        for (std::size_t k = 0; k < active_steps; ++k) steps.push_back(total_T - k * jump);
        if (steps.back() != 0) steps.push_back(0);
        return steps;
    }
};

struct GuidedEpsilon {
    Tensor eps;
    bool clamped = false;
};

/// Noise prediction steered toward class c for every row of x_t.
inline GuidedEpsilon guided_epsilon(const EpsilonNet& eps_net, const TimeAwareClassifier& clf, const NoiseSchedule& sched,
                                    const Tensor& x_t, std::size_t t, int c, double guidance_scale) {
    if (t < 1 || t > sched.T()) throw InvalidArgument("guided_epsilon: step must be in [1, T]");
    GuidedEpsilon out{eps_net.predict(x_t, t), false};
    if (guidance_scale == 0.0) return out;
    const auto g = log_prob_input_grad(clf, x_t, t, c);
    out.clamped = g.clamped;
    const double w = guidance_scale * std::sqrt(1.0 - sched.alpha_bar(t));
    for (std::size_t i = 0; i < out.eps.size(); ++i) out.eps[i] -= w * g.grad[i];
    return out;
}

/// Deterministic DDIM update from step t to t_prev < t (abar_0 = 1).
inline Tensor ddim_step(const Tensor& x_t, std::size_t t, std::size_t t_prev, const Tensor& eps_hat,
                        const NoiseSchedule& sched) {
    if (!(t_prev < t)) throw InvalidArgument("ddim_step: t_prev must be smaller than t");
    if (eps_hat.shape() != x_t.shape()) throw InvalidArgument("ddim_step: eps_hat shape differs from x_t");
    const double ab_t = sched.alpha_bar(t), ab_p = sched.alpha_bar(t_prev);
    const double sq_t = std::sqrt(ab_t), sq_1t = std::sqrt(1.0 - ab_t);
    const double sq_p = std::sqrt(ab_p), sq_1p = std::sqrt(1.0 - ab_p);
    Tensor out = x_t;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = (x_t[i] - sq_1t * eps_hat[i]) / sq_t;
        out[i] = sq_p * x0 + sq_1p * eps_hat[i];
    }
    return out;
}

struct Trajectory {
    int class_id = 0;
    std::vector<std::pair<std::size_t, std::vector<double>>> states;  // (t, x), t strictly decreasing T..0
    int terminal_label = -1;  // classifier argmax at t = 0
};

struct ReverseResult {
    Tensor x;               // [n x d] final states
    bool clamped = false;
    std::vector<std::vector<std::vector<double>>> history;  // per visited step, per row (when recorded)
};

/// Walks `steps` (strictly decreasing) starting from rows of `x`, applying
/// guided DDIM updates toward class c.
inline ReverseResult reverse_pass(const EpsilonNet& eps_net, const TimeAwareClassifier& clf, const NoiseSchedule& sched,
                                  Tensor x, std::span<const std::size_t> steps, int c, double guidance_scale,
                                  bool record = false) {
    ReverseResult out;
    auto snapshot = [&](const Tensor& m) {
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(row_vector(m, i));
        out.history.push_back(std::move(rows));
    };
    if (record) snapshot(x);
    for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
        const auto ge = guided_epsilon(eps_net, clf, sched, x, steps[k], c, guidance_scale);
        out.clamped = out.clamped || ge.clamped;
        x = ddim_step(x, steps[k], steps[k + 1], ge.eps, sched);
        if (record) snapshot(x);
    }
    out.x = std::move(x);
    return out;
}

struct GenerationResult {
    std::vector<LabeledSample> samples;  // domain = generated, label = requested class
    std::vector<Trajectory> trajectories;
    std::size_t aborted = 0;  // samples dropped because their state went non-finite
    bool clamped = false;     // log-probability floor was hit during guidance
};

/// n samples for each prior's class. Each class uses its own RNG stream
/// derived from cfg.seed, so classes are independent of one another.
inline GenerationResult generate(const EpsilonNet& eps_net, const TimeAwareClassifier& clf, const NoiseSchedule& sched,
                                 std::span<const ClassPrior> priors, const SamplerConfig& cfg, std::size_t n,
                                 bool record_trajectories = false) {
    cfg.validate();
    if (cfg.total_T != sched.T()) throw InvalidArgument("generate: sampler total_T differs from schedule T");
    GenerationResult out;
    if (n == 0) return out;
    const auto steps = cfg.visited_steps();
    for (const auto& prior : priors) {
        prior.validate();
        const std::size_t d = prior.mu.size();
        if (d != eps_net.data_dim || d != clf.data_dim) throw InvalidArgument("generate: prior dimension mismatch");
        Rng rng(derive_seed(cfg.seed, std::uint64_t(prior.class_id)));
        const Tensor z = standard_normal({n, d}, rng);
        const Tensor x_T = cfg.init == TerminalInit::class_prior ? init_terminal(prior, z) : z;
        auto res = reverse_pass(eps_net, clf, sched, x_T, steps, prior.class_id, cfg.guidance_scale, record_trajectories);
        out.clamped = out.clamped || res.clamped;
        const Tensor probs = predict(clf, res.x, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = res.x.row(i);
            bool finite = true;
            for (double v : row) finite = finite && std::isfinite(v);
            if (!finite) {
                ++out.aborted;
                continue;
            }
            out.samples.push_back({row_vector(res.x, i), prior.class_id, Domain::generated, std::nullopt});
            if (record_trajectories) {
                Trajectory tr;
                tr.class_id = prior.class_id;
                for (std::size_t k = 0; k < steps.size(); ++k) tr.states.emplace_back(steps[k], res.history[k][i]);
                tr.terminal_label = int(argmax(probs.row(i)));
                out.trajectories.push_back(std::move(tr));
            }
        }
    }
    return out;
}

/// Purity: share of samples whose t = 0 argmax equals the requested class.
inline double class_purity(const TimeAwareClassifier& clf, const std::vector<LabeledSample>& generated) {
    if (generated.empty()) return 0.0;
    return evaluate_accuracy(clf, generated);
}

/// class_id,sample,t,x_0,...,x_{d-1}
inline void save_trajectories_csv(const std::vector<Trajectory>& trajectories, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    const std::size_t d = trajectories.empty() || trajectories.front().states.empty()
                              ? 2
                              : trajectories.front().states.front().second.size();
    out << "class_id,sample,t";
    for (std::size_t j = 0; j < d; ++j) out << ",x_" << j;
    out << '\n';
    for (std::size_t s = 0; s < trajectories.size(); ++s)
        for (const auto& [t, x] : trajectories[s].states) {
            out << trajectories[s].class_id << ',' << s << ',' << t;
            for (double v : x) out << ',' << detail::format_real(v);
            out << '\n';
        }
}

inline std::vector<Trajectory> load_trajectories_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read " + path);
    std::string line;
    std::vector<Trajectory> out;
    if (!std::getline(in, line)) return out;
    const auto header = detail::split_fields(line);
    if (header.size() < 4 || header[0] != "class_id" || header[1] != "sample" || header[2] != "t")
        throw InvalidArgument(path + ":1: expected class_id,sample,t,x_0,...");
    const std::size_t d = header.size() - 3;
    std::size_t line_no = 1;
    long current = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_fields(line);
        if (f.size() != d + 3) throw InvalidArgument(path + ":" + std::to_string(line_no) + ": wrong field count");
        try {
            const long sample = std::stol(f[1]);
            if (sample != current) {
                out.push_back({});
                out.back().class_id = std::stoi(f[0]);
                current = sample;
            }
            std::vector<double> x;
            for (std::size_t j = 0; j < d; ++j) x.push_back(std::stod(f[3 + j]));
            out.back().states.emplace_back(std::stoul(f[2]), std::move(x));
        } catch (const std::logic_error&) {
            throw InvalidArgument(path + ":" + std::to_string(line_no) + ": malformed number");
        }
    }
    return out;
}

}  // namespace nocdda
