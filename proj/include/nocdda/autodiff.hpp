#pragma once

// Tape-based reverse-mode differentiation over row-major batches.
//
// Every operation appends one node to the tape. A node records its value,
// the ids of its parents (always smaller than its own id, so the graph is
// acyclic by construction) and the rule used to propagate gradients.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nocdda/tensor.hpp"

namespace nocdda {

enum class Rule : std::uint8_t {
    leaf,
    affine,        // x[B x in] * W^T[in x out] + b[out]
    relu,
    tanh,
    concat_cols,   // [B x p] | [B x q] -> [B x (p+q)]
    log_softmax,   // row-wise
    softmax,       // row-wise
    nll_mean,      // -sum_i w_i logp[i, y_i], w_i = 1/B unless given
    pick_sum,      // sum_i logp[i, y_i]
    sq_err_mean,   // sum_i w_i sum_j (a[i,j] - target[i,j])^2, w_i = 1/B unless given
    sum_squares,   // sum a^2
    outer_rows,    // row-wise f y^T flattened row-major
    bce_logits,    // sum_i w_i [softplus(z_i) - y_i z_i], w_i = 1/B unless given
    add,
    scale,
};

inline const char* rule_name(Rule r) {
    switch (r) {
        case Rule::leaf: return "leaf";
        case Rule::affine: return "affine";
        case Rule::relu: return "relu";
        case Rule::tanh: return "tanh";
        case Rule::concat_cols: return "concat_cols";
        case Rule::log_softmax: return "log_softmax";
        case Rule::softmax: return "softmax";
        case Rule::nll_mean: return "nll_mean";
        case Rule::pick_sum: return "pick_sum";
        case Rule::sq_err_mean: return "sq_err_mean";
        case Rule::sum_squares: return "sum_squares";
        case Rule::outer_rows: return "outer_rows";
        case Rule::bce_logits: return "bce_logits";
        case Rule::add: return "add";
        case Rule::scale: return "scale";
    }
    return "?";
}

/// Handle to a node on a tape.
struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

namespace kernels {

inline void affine(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
    const std::size_t batch = x.rows(), in = x.cols(), o = w.shape()[0];
    if (w.shape()[1] != in || b.size() != o)
        throw InvalidArgument("affine: input width " + std::to_string(in) + " vs weight " +
                              shape_string(w.shape()));
    out = Tensor({batch, o});
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = x.values().data() + i * in;
        for (std::size_t k = 0; k < o; ++k) {
            const double* wk = w.values().data() + k * in;
            double s = b[k];
            for (std::size_t j = 0; j < in; ++j) s += wk[j] * xi[j];
            out[i * o + k] = s;
        }
    }
}

inline void log_softmax_rows(const Tensor& a, Tensor& out) {
    out = Tensor(a.shape());
    const std::size_t n = a.rows(), c = a.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, a[i * c + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(a[i * c + j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] - lse;
    }
}

inline void softmax_rows(const Tensor& a, Tensor& out) {
    log_softmax_rows(a, out);
    for (auto& v : out.values()) v = std::exp(v);
    // renormalise so each row sums to one to rounding
    const std::size_t n = out.rows(), c = out.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += out[i * c + j];
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
    }
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace kernels

/// Result of a backward pass for an explicit list of leaves.
struct Gradients {
    std::vector<Tensor> values;
    /// Set when at least one requested leaf had no path to the loss or was
    /// recorded without requires_grad; its gradient is reported as zeros.
    bool detached_leaf = false;
};

class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = true) {
        Node n;
        n.rule = Rule::leaf;
        n.requires_grad = requires_grad;
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// Same value as `v` but cut from the graph.
    Var detach(Var v) { return leaf(value(v), false); }

    Var affine(Var x, Var w, Var b) { return record(Rule::affine, {x, w, b}); }
    Var relu(Var a) { return record(Rule::relu, {a}); }
    Var tanh(Var a) { return record(Rule::tanh, {a}); }
    Var concat_cols(Var a, Var b) { return record(Rule::concat_cols, {a, b}); }
    Var log_softmax(Var a) { return record(Rule::log_softmax, {a}); }
    Var softmax(Var a) { return record(Rule::softmax, {a}); }
    Var add(Var a, Var b) { return record(Rule::add, {a, b}); }
    Var sum_squares(Var a) { return record(Rule::sum_squares, {a}); }
    Var outer_rows(Var f, Var y) { return record(Rule::outer_rows, {f, y}); }

    Var scale(Var a, double s) {
        Node n = make(Rule::scale, {a});
        n.scalar = s;
        return finish(std::move(n));
    }
    Var nll_mean(Var logp, std::vector<int> labels, std::vector<double> row_weights = {}) {
        Node n = make(Rule::nll_mean, {logp});
        n.labels = std::move(labels);
        n.weights = std::move(row_weights);
        return finish(std::move(n));
    }
    Var pick_sum(Var logp, std::vector<int> labels) {
        Node n = make(Rule::pick_sum, {logp});
        n.labels = std::move(labels);
        return finish(std::move(n));
    }
    Var sq_err_mean(Var a, Tensor target, std::vector<double> row_weights = {}) {
        Node n = make(Rule::sq_err_mean, {a});
        n.aux = std::move(target);
        n.weights = std::move(row_weights);
        return finish(std::move(n));
    }
    Var bce_logits(Var logits, double target) {
        return bce_logits(logits, Tensor(value(logits).shape(), target));
    }
    Var bce_logits(Var logits, Tensor targets, std::vector<double> row_weights = {}) {
        Node n = make(Rule::bce_logits, {logits});
        n.aux = std::move(targets);
        n.weights = std::move(row_weights);
        return finish(std::move(n));
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    double scalar(Var v) const {
        const auto& t = value(v);
        if (t.size() != 1) throw InvalidArgument("tape: node is not scalar");
        return t[0];
    }
    Rule rule(Var v) const { return nodes_.at(v.id).rule; }
    std::span<const Var> parents(Var v) const {
        const auto& n = nodes_.at(v.id);
        return {n.parents.data(), n.n_parents};
    }
    std::size_t size() const { return nodes_.size(); }

    /// Replaces a leaf value; call replay() afterwards to refresh dependents.
    void set_leaf(Var v, Tensor value) {
        auto& n = nodes_.at(v.id);
        if (n.rule != Rule::leaf) throw InvalidArgument("tape: set_leaf on non-leaf");
        n.value = std::move(value);
    }

    /// Recomputes every non-leaf node in recording order.
    void replay() {
        for (auto& n : nodes_)
            if (n.rule != Rule::leaf) compute(n);
    }

    /// Reverse sweep from a scalar loss. Returns the gradient for each leaf in
    /// `wrt`, shaped like that leaf.
    Gradients backward(Var loss, std::span<const Var> wrt) {
        if (value(loss).size() != 1) throw InvalidArgument("backward: loss is not scalar");
        for (auto& n : nodes_) n.grad = Tensor();
        nodes_[loss.id].grad = Tensor(value(loss).shape(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.grad.empty() || n.rule == Rule::leaf) continue;
            propagate(n);
        }
        Gradients out;
        for (auto v : wrt) {
            const auto& n = nodes_.at(v.id);
            if (n.grad.empty() || !n.requires_grad) {
                out.detached_leaf = true;
                out.values.emplace_back(n.value.shape(), 0.0);
            } else {
                out.values.push_back(n.grad);
            }
        }
        return out;
    }

private:
    struct Node {
        Rule rule = Rule::leaf;
        std::array<Var, 3> parents{};
        std::uint8_t n_parents = 0;
        bool requires_grad = true;
        Tensor value;
        Tensor grad;
        Tensor aux;
        std::vector<int> labels;
        std::vector<double> weights;
        double scalar = 0.0;

        double row_weight(std::size_t i, std::size_t rows) const {
            return weights.empty() ? 1.0 / double(rows) : weights[i];
        }
    };

    Node make(Rule r, std::initializer_list<Var> ps) const {
        Node n;
        n.rule = r;
        for (auto p : ps) {
            if (!p.valid() || p.id >= nodes_.size()) throw InvalidArgument("tape: dangling parent");
            n.parents[n.n_parents++] = p;
        }
        return n;
    }
    Var record(Rule r, std::initializer_list<Var> ps) { return finish(make(r, ps)); }
    Var finish(Node n) {
        compute(n);
        return push(std::move(n));
    }
    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    const Tensor& pv(const Node& n, int k) const { return nodes_[n.parents[k].id].value; }

    Tensor& pg(const Node& n, int k) {
        auto& p = nodes_[n.parents[k].id];
        if (p.grad.empty()) p.grad = Tensor(p.value.shape(), 0.0);
        return p.grad;
    }

    void compute(Node& n) {
        switch (n.rule) {
            case Rule::leaf: return;
            case Rule::affine: {
                kernels::affine(pv(n, 0), pv(n, 1), pv(n, 2), n.value);
                return;
            }
            case Rule::relu:
            case Rule::tanh: {
                n.value = pv(n, 0);
                if (n.rule == Rule::relu)
                    for (auto& v : n.value.values()) v = v > 0.0 ? v : 0.0;
                else
                    for (auto& v : n.value.values()) v = std::tanh(v);
                return;
            }
            case Rule::concat_cols: {
                const auto& a = pv(n, 0);
                const auto& b = pv(n, 1);
                if (a.rows() != b.rows()) throw InvalidArgument("concat_cols: row mismatch");
                const std::size_t p = a.cols(), q = b.cols();
                n.value = Tensor({a.rows(), p + q});
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    std::copy_n(a.row(i).begin(), p, n.value.row(i).begin());
                    std::copy_n(b.row(i).begin(), q, n.value.row(i).begin() + p);
                }
                return;
            }
            case Rule::log_softmax: kernels::log_softmax_rows(pv(n, 0), n.value); return;
            case Rule::softmax: kernels::softmax_rows(pv(n, 0), n.value); return;
            case Rule::nll_mean:
            case Rule::pick_sum: {
                const auto& lp = pv(n, 0);
                const std::size_t rows = lp.rows(), c = lp.cols();
                if (n.labels.size() != rows) throw InvalidArgument("nll: label count mismatch");
                if (!n.weights.empty() && n.weights.size() != rows) throw InvalidArgument("nll: weight count mismatch");
                double s = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    const int y = n.labels[i];
                    if (y < 0 || static_cast<std::size_t>(y) >= c) throw InvalidArgument("nll: label out of range");
                    s += n.rule == Rule::nll_mean ? -n.row_weight(i, rows) * lp[i * c + y] : lp[i * c + y];
                }
                n.value = Tensor({1}, s);
                return;
            }
            case Rule::sq_err_mean: {
                const auto& a = pv(n, 0);
                if (a.size() != n.aux.size()) throw InvalidArgument("sq_err_mean: target shape mismatch");
                const std::size_t rows = a.rows(), c = a.cols();
                if (!n.weights.empty() && n.weights.size() != rows) throw InvalidArgument("sq_err_mean: weight count mismatch");
                double s = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    double r = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = a[i * c + j] - n.aux[i * c + j];
                        r += d * d;
                    }
                    s += n.row_weight(i, rows) * r;
                }
                n.value = Tensor({1}, s);
                return;
            }
            case Rule::sum_squares: n.value = Tensor({1}, squared_norm(pv(n, 0).values())); return;
            case Rule::outer_rows: {
                const auto& f = pv(n, 0);
                const auto& y = pv(n, 1);
                if (f.rows() != y.rows()) throw InvalidArgument("outer_rows: row mismatch");
                const std::size_t p = f.cols(), q = y.cols();
                n.value = Tensor({f.rows(), p * q});
                for (std::size_t r = 0; r < f.rows(); ++r)
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < q; ++j) n.value.at(r, i * q + j) = f.at(r, i) * y.at(r, j);
                return;
            }
            case Rule::bce_logits: {
                const auto& z = pv(n, 0);
                if (z.size() != n.aux.size()) throw InvalidArgument("bce_logits: one logit per target required");
                if (!n.weights.empty() && n.weights.size() != z.size()) throw InvalidArgument("bce_logits: weight count mismatch");
                double s = 0.0;
                for (std::size_t i = 0; i < z.size(); ++i)
                    s += n.row_weight(i, z.size()) * (kernels::softplus(z[i]) - n.aux[i] * z[i]);
                n.value = Tensor({1}, s);
                return;
            }
            case Rule::add: {
                if (pv(n, 0).size() != pv(n, 1).size()) throw InvalidArgument("add: shape mismatch");
                n.value = pv(n, 0);
                const auto& b = pv(n, 1);
                for (std::size_t i = 0; i < b.size(); ++i) n.value[i] += b[i];
                return;
            }
            case Rule::scale: {
                n.value = pv(n, 0);
                for (auto& v : n.value.values()) v *= n.scalar;
                return;
            }
        }
    }

    void propagate(const Node& n) {
        const Tensor& g = n.grad;
        switch (n.rule) {
            case Rule::leaf: return;
            case Rule::affine: {
                const auto& x = pv(n, 0);
                const auto& w = pv(n, 1);
                const std::size_t batch = x.rows(), in = x.cols(), o = w.shape()[0];
                auto& gx = pg(n, 0);
                auto& gw = pg(n, 1);
                auto& gb = pg(n, 2);
                for (std::size_t i = 0; i < batch; ++i) {
                    const double* xi = x.values().data() + i * in;
                    double* gxi = gx.values().data() + i * in;
                    for (std::size_t k = 0; k < o; ++k) {
                        const double gik = g[i * o + k];
                        if (gik == 0.0) continue;
                        gb[k] += gik;
                        const double* wk = w.values().data() + k * in;
                        double* gwk = gw.values().data() + k * in;
                        for (std::size_t j = 0; j < in; ++j) {
                            gwk[j] += gik * xi[j];
                            gxi[j] += gik * wk[j];
                        }
                    }
                }
                return;
            }
            case Rule::relu: {
                const auto& a = pv(n, 0);
                auto& ga = pg(n, 0);
                for (std::size_t i = 0; i < a.size(); ++i)
                    if (a[i] > 0.0) ga[i] += g[i];
                return;
            }
            case Rule::tanh: {
                auto& ga = pg(n, 0);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
                return;
            }
            case Rule::concat_cols: {
                const std::size_t p = pv(n, 0).cols();
                const std::size_t q = pv(n, 1).cols();
                auto& ga = pg(n, 0);
                auto& gb = pg(n, 1);
                for (std::size_t i = 0; i < n.value.rows(); ++i) {
                    for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
                    for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
                }
                return;
            }
            case Rule::log_softmax: {
                // d/da_j = g_j - softmax_j * sum_k g_k
                auto& ga = pg(n, 0);
                const std::size_t rows = n.value.rows(), c = n.value.cols();
                for (std::size_t i = 0; i < rows; ++i) {
                    double gs = 0.0;
                    for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        ga[i * c + j] += g[i * c + j] - std::exp(n.value[i * c + j]) * gs;
                }
                return;
            }
            case Rule::softmax: {
                auto& ga = pg(n, 0);
                const std::size_t rows = n.value.rows(), c = n.value.cols();
                for (std::size_t i = 0; i < rows; ++i) {
                    double gp = 0.0;
                    for (std::size_t j = 0; j < c; ++j) gp += g[i * c + j] * n.value[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        ga[i * c + j] += n.value[i * c + j] * (g[i * c + j] - gp);
                }
                return;
            }
            case Rule::nll_mean:
            case Rule::pick_sum: {
                auto& ga = pg(n, 0);
                const std::size_t rows = pv(n, 0).rows(), c = pv(n, 0).cols();
                for (std::size_t i = 0; i < rows; ++i)
                    ga[i * c + n.labels[i]] += n.rule == Rule::nll_mean ? -g[0] * n.row_weight(i, rows) : g[0];
                return;
            }
            case Rule::sq_err_mean: {
                const auto& a = pv(n, 0);
                auto& ga = pg(n, 0);
                const std::size_t rows = a.rows(), c = a.cols();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double w = 2.0 * g[0] * n.row_weight(i, rows);
                    for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += w * (a[i * c + j] - n.aux[i * c + j]);
                }
                return;
            }
            case Rule::sum_squares: {
                const auto& a = pv(n, 0);
                auto& ga = pg(n, 0);
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += 2.0 * g[0] * a[i];
                return;
            }
            case Rule::outer_rows: {
                const auto& f = pv(n, 0);
                const auto& y = pv(n, 1);
                const std::size_t p = f.cols(), q = y.cols();
                auto& gf = pg(n, 0);
                auto& gy = pg(n, 1);
                for (std::size_t r = 0; r < f.rows(); ++r)
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < q; ++j) {
                            const double gij = g[r * p * q + i * q + j];
                            gf[r * p + i] += gij * y.at(r, j);
                            gy[r * q + j] += gij * f.at(r, i);
                        }
                return;
            }
            case Rule::bce_logits: {
                const auto& z = pv(n, 0);
                auto& gz = pg(n, 0);
                for (std::size_t i = 0; i < z.size(); ++i)
                    gz[i] += g[0] * n.row_weight(i, z.size()) * (kernels::sigmoid(z[i]) - n.aux[i]);
                return;
            }
            case Rule::add: {
                auto& ga = pg(n, 0);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                auto& gb = pg(n, 1);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                return;
            }
            case Rule::scale: {
                auto& ga = pg(n, 0);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
                return;
            }
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace nocdda
