#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocdda/autodiff.hpp"
#include "nocdda/random.hpp"
#include "nocdda/tensor.hpp"

namespace nocdda {

enum class Activation { relu, tanh };
enum class OutputHead { softmax, identity };

struct Layer {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]

    friend bool operator==(const Layer&, const Layer&) = default;
};

struct MlpParams {
    std::vector<Layer> layers;
    Activation activation = Activation::relu;
    OutputHead head = OutputHead::identity;
    std::uint64_t seed = 0;  // initialisation provenance

    std::size_t in_dim() const { return layers.front().weight.shape()[1]; }
    std::size_t out_dim() const { return layers.back().weight.shape()[0]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    void validate() const {
        if (layers.empty()) throw InvalidArgument("mlp: no layers");
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& l = layers[k];
            if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.weight.shape()[0])
                throw InvalidArgument("mlp: layer " + std::to_string(k) + " has inconsistent shapes");
            if (k + 1 < layers.size() && layers[k + 1].weight.shape()[1] != l.weight.shape()[0])
                throw InvalidArgument("mlp: layer " + std::to_string(k) + " output does not feed layer " +
                                      std::to_string(k + 1));
        }
    }

    friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
/// `widths` lists every layer width including input and output.
inline MlpParams make_mlp(std::span<const std::size_t> widths, Activation act, OutputHead head,
                          std::uint64_t seed, bool zero_output_layer = false) {
    if (widths.size() < 2) throw InvalidArgument("make_mlp: need at least input and output width");
    MlpParams p;
    p.activation = act;
    p.head = head;
    p.seed = seed;
    Rng rng(seed);
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        const std::size_t in = widths[k], out = widths[k + 1];
        Layer l{Tensor({out, in}), Tensor({out})};
        const bool last = k + 2 == widths.size();
        if (!(last && zero_output_layer)) {
            const double bound = std::sqrt(6.0 / double(in + out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (auto& w : l.weight.values()) w = u(rng);
        }
        p.layers.push_back(std::move(l));
    }
    return p;
}

inline MlpParams make_mlp(std::initializer_list<std::size_t> widths, Activation act, OutputHead head,
                          std::uint64_t seed, bool zero_output_layer = false) {
    return make_mlp(std::span<const std::size_t>(widths.begin(), widths.size()), act, head, seed,
                    zero_output_layer);
}

namespace detail {
inline void activate(Tensor& t, Activation a) {
    if (a == Activation::relu)
        for (auto& v : t.values()) v = v > 0.0 ? v : 0.0;
    else
        for (auto& v : t.values()) v = std::tanh(v);
}
}  // namespace detail

/// Value-only forward pass. `input` is one sample [in] or a batch [B x in];
/// the result has matching rank.
inline Tensor forward_mlp(const MlpParams& params, const Tensor& input) {
    params.validate();
    if (input.cols() != params.in_dim())
        throw InvalidArgument("forward_mlp: input width " + std::to_string(input.cols()) + ", network expects " +
                              std::to_string(params.in_dim()));
    Tensor h = input;
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        Tensor next;
        kernels::affine(h, params.layers[k].weight, params.layers[k].bias, next);
        if (k + 1 < params.layers.size()) detail::activate(next, params.activation);
        h = std::move(next);
    }
    if (params.head == OutputHead::softmax) {
        Tensor p;
        kernels::softmax_rows(h, p);
        h = std::move(p);
    }
    if (input.rank() == 1) h = h.reshaped({h.size()});
    return h;
}

/// Nodes produced by recording a network on a tape.
struct MlpGraph {
    std::vector<Var> params;  // W0, b0, W1, b1, ...
    Var input;
    Var features;  // last hidden activation (the input itself for one-layer nets)
    Var logits;    // pre-head output
    Var output;    // softmax(logits) or logits
};

inline MlpGraph record_mlp(Tape& tape, const MlpParams& params, Var input, bool params_require_grad = true) {
    params.validate();
    if (tape.value(input).cols() != params.in_dim())
        throw InvalidArgument("record_mlp: input width " + std::to_string(tape.value(input).cols()) +
                              ", network expects " + std::to_string(params.in_dim()));
    MlpGraph g;
    g.input = input;
    Var h = input;
    g.features = input;
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        const Var w = tape.leaf(params.layers[k].weight, params_require_grad);
        const Var b = tape.leaf(params.layers[k].bias, params_require_grad);
        g.params.push_back(w);
        g.params.push_back(b);
        h = tape.affine(h, w, b);
        if (k + 1 < params.layers.size()) {
            h = params.activation == Activation::relu ? tape.relu(h) : tape.tanh(h);
            g.features = h;
        }
    }
    g.logits = h;
    g.output = params.head == OutputHead::softmax ? tape.softmax(h) : h;
    return g;
}

/// Per-parameter gradients in the order W0, b0, W1, b1, ...
using MlpGrads = std::vector<Tensor>;

/// SGD with heavy-ball momentum: v <- momentum * v + g ; p <- p - lr * v.
class SgdMomentum {
public:
    SgdMomentum(double learning_rate, double momentum, double clip_norm = 0.0)
        : lr_(learning_rate), momentum_(momentum), clip_norm_(clip_norm) {
        if (!(learning_rate > 0.0)) throw InvalidArgument("sgd: learning rate must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("sgd: momentum must be in [0, 1)");
    }

    /// Rejects the whole step (parameters untouched) if any gradient is
    /// non-finite, naming the first offending layer.
    void step(MlpParams& params, const MlpGrads& grads) {
        if (grads.size() != 2 * params.layers.size()) throw InvalidArgument("sgd: gradient count mismatch");
        double norm2 = 0.0;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const auto& target = i % 2 == 0 ? params.layers[i / 2].weight : params.layers[i / 2].bias;
            if (grads[i].size() != target.size())
                throw InvalidArgument("sgd: gradient shape mismatch at layer " + std::to_string(i / 2));
            if (!grads[i].all_finite())
                throw NumericalError("sgd: non-finite gradient in layer " + std::to_string(i / 2));
            norm2 += squared_norm(grads[i].values());
        }
        double factor = 1.0;
        if (clip_norm_ > 0.0 && norm2 > clip_norm_ * clip_norm_) factor = clip_norm_ / std::sqrt(norm2);
        if (velocity_.empty())
            for (const auto& g : grads) velocity_.emplace_back(g.shape(), 0.0);
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& target = i % 2 == 0 ? params.layers[i / 2].weight : params.layers[i / 2].bias;
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < target.size(); ++j) {
                v[j] = momentum_ * v[j] + factor * grads[i][j];
                target[j] -= lr_ * v[j];
            }
        }
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    double lr_;
    double momentum_;
    double clip_norm_;
    std::vector<Tensor> velocity_;
};

/// Stateless single step; `velocity` is created on first use.
inline MlpParams sgd_step(MlpParams params, const MlpGrads& grads, double learning_rate, double momentum,
                          SgdMomentum* state = nullptr) {
    if (state) {
        state->step(params, grads);
    } else {
        SgdMomentum fresh(learning_rate, momentum);
        fresh.step(params, grads);
    }
    return params;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"values", t.data()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

inline nlohmann::json mlp_to_json(const MlpParams& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : p.layers) layers.push_back({{"weight", tensor_to_json(l.weight)}, {"bias", tensor_to_json(l.bias)}});
    return {{"activation", p.activation == Activation::relu ? "relu" : "tanh"},
            {"head", p.head == OutputHead::softmax ? "softmax" : "identity"},
            {"seed", p.seed},
            {"layers", layers}};
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
    MlpParams p;
    const auto act = j.at("activation").get<std::string>();
    const auto head = j.at("head").get<std::string>();
    if (act != "relu" && act != "tanh") throw InvalidArgument("checkpoint: unknown activation " + act);
    if (head != "softmax" && head != "identity") throw InvalidArgument("checkpoint: unknown head " + head);
    p.activation = act == "relu" ? Activation::relu : Activation::tanh;
    p.head = head == "softmax" ? OutputHead::softmax : OutputHead::identity;
    p.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers"))
        p.layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
    p.validate();
    return p;
}

inline void save_checkpoint(const MlpParams& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write checkpoint " + path);
    out << mlp_to_json(p).dump(1) << '\n';
}

inline MlpParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read checkpoint " + path);
    return mlp_from_json(nlohmann::json::parse(in));
}

}  // namespace nocdda
