#pragma once

// Linear-beta noise schedule, closed-form forward diffusion and the
// epsilon-matching (denoising score matching) objective.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocdda/autodiff.hpp"
#include "nocdda/mlp.hpp"
#include "nocdda/random.hpp"
#include "nocdda/tensor.hpp"

namespace nocdda {

/// Thrown when a training loop produces a non-finite loss. Carries the
/// per-epoch losses recorded before the failure.
class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, std::vector<double> trace)
        : NumericalError(what), trace_(std::move(trace)) {}
    const std::vector<double>& trace() const { return trace_; }

private:
    std::vector<double> trace_;
};

/// Steps are numbered 1..T; step 0 denotes clean data with alpha_bar(0) = 1.
class NoiseSchedule {
public:
    NoiseSchedule(std::size_t T, double beta_start, double beta_end) : beta_start_(beta_start), beta_end_(beta_end) {
        if (T < 2) throw InvalidArgument("schedule: T must be >= 2");
        if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
            throw InvalidArgument("schedule: need 0 < beta_start < beta_end < 1");
        betas_.resize(T);
        alphas_.resize(T);
        alpha_bars_.resize(T);
        double running = 1.0;
        for (std::size_t i = 0; i < T; ++i) {
            betas_[i] = beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
            if (i > 0 && !(betas_[i] > betas_[i - 1]))
                throw InvalidArgument("schedule: betas are not strictly increasing at this resolution");
            alphas_[i] = 1.0 - betas_[i];
            running *= alphas_[i];
            alpha_bars_[i] = running;
        }
        betas_.back() = beta_end;
        alphas_.back() = 1.0 - beta_end;
        alpha_bars_.back() = alpha_bars_[T - 2] * alphas_.back();
        if (!(betas_[T - 1] > betas_[T - 2]))
            throw InvalidArgument("schedule: betas are not strictly increasing at this resolution");
        if (!(alpha_bars_.back() > 0.0)) throw InvalidArgument("schedule: alpha_bar underflows to zero");
    }

    std::size_t T() const { return betas_.size(); }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    double beta(std::size_t t) const { return betas_.at(check(t, 1) - 1); }
    double alpha(std::size_t t) const { return alphas_.at(check(t, 1) - 1); }
    double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(check(t, 0) - 1); }

    std::span<const double> betas() const { return betas_; }
    std::span<const double> alphas() const { return alphas_; }
    std::span<const double> alpha_bars() const { return alpha_bars_; }

private:
    std::size_t check(std::size_t t, std::size_t lo) const {
        if (t < lo || t > T()) throw InvalidArgument("schedule: step " + std::to_string(t) + " outside [" +
                                                     std::to_string(lo) + ", " + std::to_string(T()) + "]");
        return t;
    }

    double beta_start_;
    double beta_end_;
    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 0.02) {
    return NoiseSchedule(T, beta_start, beta_end);
}

/// Only the generating parameters are stored; derived arrays are rebuilt on load.
inline nlohmann::json schedule_to_json(const NoiseSchedule& s, std::uint64_t seed) {
    return {{"T", s.T()}, {"beta_start", s.beta_start()}, {"beta_end", s.beta_end()}, {"seed", seed}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    return make_linear_schedule(j.at("T").get<std::size_t>(), j.at("beta_start").get<double>(),
                                j.at("beta_end").get<double>());
}

/// Sinusoidal features of the normalised step s = t/T, laid out as
/// (sin w0 s, cos w0 s, sin w1 s, cos w1 s, ...) with w_i geometric in
/// [1, max_frequency]. Since w0 = 1 and s is in [0,1], distinct steps give
/// distinct embeddings.
struct TimeEmbedding {
    std::size_t dim = 16;
    std::size_t T = 1000;
    double max_frequency = 100.0;

    void validate() const {
        if (dim == 0 || dim % 2 != 0) throw InvalidArgument("time embedding: dim must be positive and even");
        if (T == 0) throw InvalidArgument("time embedding: T must be positive");
    }

    double frequency(std::size_t i) const {
        const std::size_t half = dim / 2;
        if (half == 1) return 1.0;
        return std::pow(max_frequency, double(i) / double(half - 1));
    }

    void encode_into(std::size_t t, std::span<double> out) const {
        const double s = double(t) / double(T);
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double a = s * frequency(i);
            out[2 * i] = std::sin(a);
            out[2 * i + 1] = std::cos(a);
        }
    }

    std::vector<double> encode(std::size_t t) const {
        validate();
        if (t > T) throw InvalidArgument("time embedding: step beyond T");
        std::vector<double> e(dim);
        encode_into(t, e);
        return e;
    }
};

/// [x | embedding(t_i)] for each row i.
inline Tensor with_time_columns(const Tensor& x, std::span<const std::size_t> steps, const TimeEmbedding& emb) {
    const std::size_t n = x.rows(), d = x.cols();
    if (steps.size() != n && steps.size() != 1) throw InvalidArgument("time columns: step count mismatch");
    for (auto t : steps)
        if (t > emb.T) throw InvalidArgument("time columns: step " + std::to_string(t) + " beyond T");
    Tensor out({n, d + emb.dim});
    for (std::size_t i = 0; i < n; ++i) {
        auto r = out.row(i);
        std::copy_n(x.values().begin() + i * d, d, r.begin());
        emb.encode_into(steps.size() == 1 ? steps[0] : steps[i], r.subspan(d));
    }
    return out;
}

inline Tensor with_time_columns(const Tensor& x, std::size_t t, const TimeEmbedding& emb) {
    const std::size_t steps[1] = {t};
    return with_time_columns(x, std::span<const std::size_t>(steps, 1), emb);
}

/// Noise predictor eps(x, t) with identity head; conditioned on time only.
struct EpsilonNet {
    MlpParams net;
    TimeEmbedding embedding;
    std::size_t data_dim = 0;

    void validate() const {
        net.validate();
        embedding.validate();
        if (net.in_dim() != data_dim + embedding.dim || net.out_dim() != data_dim || net.head != OutputHead::identity)
            throw InvalidArgument("epsilon net: expects (x, emb) -> x-shaped identity output");
    }

    /// Batch prediction, rows of `x` share the step `t`.
    Tensor predict(const Tensor& x, std::size_t t) const {
        if (x.cols() != data_dim) throw InvalidArgument("epsilon net: data dimension mismatch");
        Tensor out = forward_mlp(net, with_time_columns(x, t, embedding));
        return x.rank() == 1 ? out.reshaped({data_dim}) : out;
    }
};

inline EpsilonNet make_epsilon_net(std::size_t data_dim, std::span<const std::size_t> hidden, TimeEmbedding emb,
                                   std::uint64_t seed, Activation act = Activation::relu,
                                   bool zero_output_layer = false) {
    std::vector<std::size_t> widths{data_dim + emb.dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(data_dim);
    EpsilonNet e{make_mlp(widths, act, OutputHead::identity, seed, zero_output_layer), emb, data_dim};
    e.validate();
    return e;
}

inline nlohmann::json embedding_to_json(const TimeEmbedding& e) {
    return {{"dim", e.dim}, {"T", e.T}, {"max_frequency", e.max_frequency}};
}

inline TimeEmbedding embedding_from_json(const nlohmann::json& j) {
    TimeEmbedding e{j.at("dim").get<std::size_t>(), j.at("T").get<std::size_t>(), j.at("max_frequency").get<double>()};
    e.validate();
    return e;
}

inline nlohmann::json epsilon_net_to_json(const EpsilonNet& e) {
    return {{"kind", "epsilon_net"}, {"data_dim", e.data_dim}, {"embedding", embedding_to_json(e.embedding)},
            {"net", mlp_to_json(e.net)}};
}

inline EpsilonNet epsilon_net_from_json(const nlohmann::json& j) {
    EpsilonNet e{mlp_from_json(j.at("net")), embedding_from_json(j.at("embedding")), j.at("data_dim").get<std::size_t>()};
    e.validate();
    return e;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z. Step 0 returns x0.
inline Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& z, const NoiseSchedule& sched) {
    if (z.shape() != x0.shape()) throw InvalidArgument("forward_diffuse: noise shape differs from x0");
    if (t > sched.T()) throw InvalidArgument("forward_diffuse: step " + std::to_string(t) + " beyond T");
    if (t == 0) return x0;
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = std::sqrt(1.0 - sched.alpha_bar(t));
    Tensor out = x0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + s * z[i];
    return out;
}

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch = 64;
    double learning_rate = 0.02;
    double momentum = 0.5;
    double clip_norm = 0.0;
};

/// Minimises E || z - eps(x_t, t) ||^2 with t ~ U{1..T} drawn per sample.
/// Returns the per-epoch mean losses.
inline std::vector<double> train_epsilon(const Tensor& data, const NoiseSchedule& sched, EpsilonNet& net,
                                         const TrainConfig& cfg, Rng& rng) {
    if (data.empty() || data.rank() != 2) throw InvalidArgument("train_epsilon: data must be a non-empty [n x d] matrix");
    if (data.cols() != net.data_dim) throw InvalidArgument("train_epsilon: data dimension mismatch");
    if (net.embedding.T != sched.T()) throw InvalidArgument("train_epsilon: embedding T differs from schedule T");
    net.validate();
    const std::size_t n = data.rows(), d = data.cols();
    const std::size_t batch = std::max<std::size_t>(1, std::min(cfg.batch, n));
    SgdMomentum opt(cfg.learning_rate, cfg.momentum, cfg.clip_norm);
    std::uniform_int_distribution<std::size_t> step_dist(1, sched.T());
    std::vector<double> trace;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = permutation(n, rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t m = std::min(batch, n - start);
            Tensor xt({m, d}), z({m, d});
            std::vector<std::size_t> steps(m);
            for (std::size_t i = 0; i < m; ++i) {
                steps[i] = step_dist(rng);
                const double a = std::sqrt(sched.alpha_bar(steps[i]));
                const double s = std::sqrt(1.0 - sched.alpha_bar(steps[i]));
                for (std::size_t j = 0; j < d; ++j) {
                    z.at(i, j) = standard_normal(rng);
                    xt.at(i, j) = a * data.at(order[start + i], j) + s * z.at(i, j);
                }
            }
            Tape tape;
            const Var in = tape.leaf(with_time_columns(xt, steps, net.embedding), false);
            const auto g = record_mlp(tape, net.net, in);
            const Var loss = tape.sq_err_mean(g.output, z);
            const double value = tape.scalar(loss);
            if (!std::isfinite(value)) throw DivergenceError("train_epsilon: non-finite loss", trace);
            auto grads = tape.backward(loss, g.params);
            opt.step(net.net, grads.values);
            total += value;
            ++batches;
        }
        trace.push_back(total / double(batches));
    }
    return trace;
}

}  // namespace nocdda
