#pragma once

// The time-aware classifier f(x, t). One parameter set serves clean-sample
// decisions (t = 0) and noisy-sample decisions during guided sampling (t > 0).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nocdda/autodiff.hpp"
#include "nocdda/data.hpp"
#include "nocdda/diffusion.hpp"
#include "nocdda/mlp.hpp"
#include "nocdda/random.hpp"

namespace nocdda {

struct TimeAwareClassifier {
    MlpParams net;  // (x, embedding(t)) -> C logits, softmax head
    TimeEmbedding embedding;
    std::size_t data_dim = 0;
    std::size_t num_classes = 0;

    void validate() const {
        net.validate();
        embedding.validate();
        if (net.head != OutputHead::softmax) throw InvalidArgument("classifier: softmax head required");
        if (net.in_dim() != data_dim + embedding.dim || net.out_dim() != num_classes)
            throw InvalidArgument("classifier: network shape does not match (d + emb) -> C");
    }
};

inline nlohmann::json classifier_to_json(const TimeAwareClassifier& c) {
    return {{"kind", "classifier"}, {"data_dim", c.data_dim}, {"num_classes", c.num_classes},
            {"embedding", embedding_to_json(c.embedding)}, {"net", mlp_to_json(c.net)}};
}

inline TimeAwareClassifier classifier_from_json(const nlohmann::json& j) {
    TimeAwareClassifier c{mlp_from_json(j.at("net")), embedding_from_json(j.at("embedding")),
                          j.at("data_dim").get<std::size_t>(), j.at("num_classes").get<std::size_t>()};
    c.validate();
    return c;
}

inline TimeAwareClassifier make_classifier(std::size_t data_dim, std::size_t num_classes,
                                           std::span<const std::size_t> hidden, TimeEmbedding emb, std::uint64_t seed,
                                           Activation act = Activation::relu, bool zero_output_layer = false) {
    if (num_classes < 2) throw InvalidArgument("classifier: need at least two classes");
    std::vector<std::size_t> widths{data_dim + emb.dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(num_classes);
    TimeAwareClassifier c{make_mlp(widths, act, OutputHead::softmax, seed, zero_output_layer), emb, data_dim, num_classes};
    c.validate();
    return c;
}

/// Class probabilities at step t for one sample [d] or a batch [n x d].
inline Tensor predict(const TimeAwareClassifier& clf, const Tensor& x, std::size_t t) {
    if (x.cols() != clf.data_dim)
        throw InvalidArgument("predict: input dimension " + std::to_string(x.cols()) + ", classifier expects " +
                              std::to_string(clf.data_dim));
    if (t > clf.embedding.T) throw InvalidArgument("predict: step beyond T");
    Tensor p = forward_mlp(clf.net, with_time_columns(x, t, clf.embedding));
    return x.rank() == 1 ? p.reshaped({clf.num_classes}) : p;
}

inline std::size_t argmax(std::span<const double> p) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
    double sum = 0.0, h = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("entropy: negative or non-finite probability");
        sum += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InvalidArgument("entropy: probabilities sum to " + std::to_string(sum));
    return std::max(0.0, h);
}

// ---------------------------------------------------------------------------
// High-confidence pseudo-label selection

struct SelectionRule {
    enum class Mode { quantile, threshold };
    Mode mode = Mode::quantile;
    double value = 0.3;             // quantile fraction q, or entropy threshold in nats
    std::size_t per_class_min = 1;  // top-up so every predicted class keeps this many members

    static SelectionRule quantile(double q, std::size_t per_class_min = 1) { return {Mode::quantile, q, per_class_min}; }
    static SelectionRule threshold(double eta, std::size_t per_class_min = 1) { return {Mode::threshold, eta, per_class_min}; }
};

struct PseudoLabeledSet {
    std::vector<LabeledSample> samples;      // ascending entropy, target domain, label = pseudo-label
    std::vector<std::size_t> pool_indices;   // pool index of each member (parallel to samples)
    std::vector<bool> by_quota;              // member was added by the per-class minimum
    SelectionRule rule;
    double rule_cutoff = 0.0;  // entropy bound implied by the rule alone
    double cutoff = 0.0;       // largest member entropy (>= rule_cutoff when top-ups occurred)
    bool empty_warning = false;

    // Whole-pool diagnostics for export.
    std::vector<int> pool_pseudo_labels;
    std::vector<double> pool_entropy;
    std::vector<bool> pool_selected;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    std::vector<std::size_t> class_counts(std::size_t num_classes) const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto& s : samples) ++counts[std::size_t(*s.label)];
        return counts;
    }

    std::vector<LabeledSample> members_of(int c) const {
        std::vector<LabeledSample> out;
        for (const auto& s : samples)
            if (s.label == c) out.push_back(s);
        return out;
    }
};

/// Scores the pool at t = 0, ranks by (entropy, pool index) and keeps the
/// lowest-entropy members under `rule`.
inline PseudoLabeledSet select_hcpl(const TimeAwareClassifier& clf, const Tensor& pool, const SelectionRule& rule) {
    if (pool.empty() || pool.rank() != 2) throw InvalidArgument("select_hcpl: empty target pool");
    if (rule.mode == SelectionRule::Mode::quantile && !(rule.value >= 0.0 && rule.value <= 1.0))
        throw InvalidArgument("select_hcpl: quantile must be in [0, 1]");
    const std::size_t n = pool.rows();
    const Tensor probs = predict(clf, pool, 0);

    PseudoLabeledSet out;
    out.rule = rule;
    out.pool_entropy.resize(n);
    out.pool_pseudo_labels.resize(n);
    out.pool_selected.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        out.pool_entropy[i] = entropy(probs.row(i));
        out.pool_pseudo_labels[i] = int(argmax(probs.row(i)));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return out.pool_entropy[a] < out.pool_entropy[b]; });

    std::size_t keep = 0;
    if (rule.mode == SelectionRule::Mode::quantile) {
        keep = static_cast<std::size_t>(std::llround(rule.value * double(n)));
        out.rule_cutoff = keep > 0 ? out.pool_entropy[order[keep - 1]] : 0.0;
    } else {
        while (keep < n && out.pool_entropy[order[keep]] <= rule.value) ++keep;
        out.rule_cutoff = rule.value;
    }
    std::vector<std::size_t> chosen(order.begin(), order.begin() + keep);
    std::vector<bool> quota(keep, false);
    for (auto i : chosen) out.pool_selected[i] = true;

    if (rule.per_class_min > 0) {
        std::vector<std::size_t> counts(clf.num_classes, 0);
        for (auto i : chosen) ++counts[out.pool_pseudo_labels[i]];
        for (std::size_t r = keep; r < n; ++r) {
            const auto i = order[r];
            auto& cnt = counts[out.pool_pseudo_labels[i]];
            if (cnt < rule.per_class_min) {
                ++cnt;
                chosen.push_back(i);
                quota.push_back(true);
                out.pool_selected[i] = true;
            }
        }
    }
    std::vector<std::size_t> idx(chosen.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double ea = out.pool_entropy[chosen[a]], eb = out.pool_entropy[chosen[b]];
        return ea < eb || (ea == eb && chosen[a] < chosen[b]);
    });
    for (auto k : idx) {
        const auto i = chosen[k];
        out.samples.push_back({row_vector(pool, i), out.pool_pseudo_labels[i], Domain::target, out.pool_entropy[i]});
        out.pool_indices.push_back(i);
        out.by_quota.push_back(quota[k]);
        out.cutoff = std::max(out.cutoff, out.pool_entropy[i]);
    }
    out.empty_warning = out.samples.empty();
    return out;
}

inline PseudoLabeledSet select_hcpl(const TimeAwareClassifier& clf, const std::vector<LabeledSample>& pool,
                                    const SelectionRule& rule) {
    if (pool.empty()) throw InvalidArgument("select_hcpl: empty target pool");
    return select_hcpl(clf, features_matrix(pool), rule);
}

/// Whole pool with its pseudo-label, entropy and selection flag.
inline void save_hcpl_csv(const PseudoLabeledSet& set, const Tensor& pool, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    for (std::size_t j = 0; j < pool.cols(); ++j) out << "feature_" << j << ',';
    out << "pseudo_label,entropy,selected\n";
    for (std::size_t i = 0; i < pool.rows(); ++i) {
        for (std::size_t j = 0; j < pool.cols(); ++j) out << detail::format_real(pool.at(i, j)) << ',';
        out << set.pool_pseudo_labels[i] << ',' << detail::format_real(set.pool_entropy[i]) << ','
            << (set.pool_selected[i] ? 1 : 0) << '\n';
    }
}

/// Selected members of a file written by save_hcpl_csv, labeled with their
/// pseudo-labels.
inline std::vector<LabeledSample> load_hcpl_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw InvalidArgument(path + ": missing header");
    const auto header = detail::split_fields(line);
    if (header.size() < 4 || header[header.size() - 3] != "pseudo_label" || header.back() != "selected")
        throw InvalidArgument(path + ":1: expected feature columns then pseudo_label,entropy,selected");
    const std::size_t d = header.size() - 3;
    std::vector<LabeledSample> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_fields(line);
        if (f.size() != d + 3) throw InvalidArgument(path + ":" + std::to_string(line_no) + ": wrong field count");
        try {
            if (f[d + 2] != "1") continue;
            LabeledSample s;
            for (std::size_t j = 0; j < d; ++j) s.features.push_back(std::stod(f[j]));
            s.label = std::stoi(f[d]);
            s.entropy = std::stod(f[d + 1]);
            s.domain = Domain::target;
            out.push_back(std::move(s));
        } catch (const std::logic_error&) {
            throw InvalidArgument(path + ":" + std::to_string(line_no) + ": malformed number");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

enum class ClassifierLoss { cross_entropy, squared_error };

struct UnifiedConfig {
    TrainConfig train;
    ClassifierLoss loss = ClassifierLoss::cross_entropy;
    bool clean_terms = true;   // f(x, 0) on source and hcpl
    bool noised_terms = true;  // f(x_t, t) on source and hcpl, t ~ U{1..T}
};

struct UnifiedTrace {
    std::vector<double> total;  // per-epoch mean of the summed objective
    std::vector<double> clean_source, clean_hcpl, noised_source, noised_hcpl;
};

namespace detail {

/// Stacks several labeled groups into one batch; each group contributes the
/// mean of its rows (row weight 1/|group|).
struct StackedBatch {
    std::vector<double> x;
    std::vector<std::size_t> steps;
    std::vector<int> labels;
    std::vector<double> weights;
    std::vector<std::pair<std::size_t, std::size_t>> groups;  // [begin, end) rows

    void add_group(const Tensor& xs, std::span<const int> ys, std::size_t t) {
        const std::size_t begin = labels.size();
        const double w = 1.0 / double(xs.rows());
        x.insert(x.end(), xs.values().begin(), xs.values().end());
        for (std::size_t i = 0; i < xs.rows(); ++i) {
            steps.push_back(t);
            labels.push_back(ys[i]);
            weights.push_back(w);
        }
        groups.emplace_back(begin, labels.size());
    }
};

/// Records one stacked forward pass and returns per-group loss values with
/// the gradient of their sum.
inline std::pair<std::vector<double>, MlpGrads> stacked_loss(const TimeAwareClassifier& clf, const StackedBatch& b,
                                                             ClassifierLoss mode) {
    const std::size_t rows = b.labels.size(), d = clf.data_dim, C = clf.num_classes;
    const Tensor xs({rows, d}, b.x);
    Tape tape;
    const Var in = tape.leaf(with_time_columns(xs, b.steps, clf.embedding), false);
    const auto g = record_mlp(tape, clf.net, in);
    Var loss;
    std::vector<double> group_values(b.groups.size(), 0.0);
    if (mode == ClassifierLoss::cross_entropy) {
        const Var lp = tape.log_softmax(g.logits);
        loss = tape.nll_mean(lp, b.labels, b.weights);
        const auto& v = tape.value(lp);
        for (std::size_t k = 0; k < b.groups.size(); ++k)
            for (std::size_t i = b.groups[k].first; i < b.groups[k].second; ++i)
                group_values[k] -= b.weights[i] * v[i * C + b.labels[i]];
    } else {
        Tensor onehot({rows, C});
        for (std::size_t i = 0; i < rows; ++i) onehot[i * C + b.labels[i]] = 1.0;
        loss = tape.sq_err_mean(g.output, onehot, b.weights);
        const auto& v = tape.value(g.output);
        for (std::size_t k = 0; k < b.groups.size(); ++k)
            for (std::size_t i = b.groups[k].first; i < b.groups[k].second; ++i)
                for (std::size_t j = 0; j < C; ++j) {
                    const double e = v[i * C + j] - onehot[i * C + j];
                    group_values[k] += b.weights[i] * e * e;
                }
    }
    if (!std::isfinite(tape.scalar(loss))) return {group_values, {}};
    return {group_values, tape.backward(loss, g.params).values};
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
    Tensor out({idx.size(), m.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.row(idx[i]).begin(), m.cols(), out.row(i).begin());
    return out;
}

inline Tensor diffuse_rows(const Tensor& x0, std::size_t t, const NoiseSchedule& sched, Rng& rng) {
    const Tensor z = standard_normal(x0.shape(), rng);
    return forward_diffuse(x0, t, z, sched);
}

}  // namespace detail

/// Joint clean/noised training on source and pseudo-labeled target samples.
/// Each batch draws one shared t ~ U{1..T}. With `hcpl` empty only the
/// source terms apply.
inline UnifiedTrace train_unified(TimeAwareClassifier& clf, const std::vector<LabeledSample>& source,
                                  const std::vector<LabeledSample>& hcpl, const NoiseSchedule& sched,
                                  const UnifiedConfig& cfg, Rng& rng) {
    if (source.empty()) throw InvalidArgument("train_unified: empty source set");
    if (!cfg.clean_terms && !cfg.noised_terms) throw InvalidArgument("train_unified: no loss terms enabled");
    if (clf.embedding.T != sched.T()) throw InvalidArgument("train_unified: embedding T differs from schedule T");
    clf.validate();
    const Tensor xs = features_matrix(source);
    const auto ys = labels_of(source);
    const Tensor xh = hcpl.empty() ? Tensor() : features_matrix(hcpl);
    const auto yh = hcpl.empty() ? std::vector<int>{} : labels_of(hcpl);
    for (int y : ys)
        if (y < 0 || std::size_t(y) >= clf.num_classes) throw InvalidArgument("train_unified: source label out of range");
    for (int y : yh)
        if (y < 0 || std::size_t(y) >= clf.num_classes) throw InvalidArgument("train_unified: pseudo-label out of range");

    const std::size_t n = xs.rows(), nh = yh.size();
    const std::size_t batch = std::max<std::size_t>(1, std::min(cfg.train.batch, n));
    SgdMomentum opt(cfg.train.learning_rate, cfg.train.momentum, cfg.train.clip_norm);
    std::uniform_int_distribution<std::size_t> step_dist(1, sched.T());
    UnifiedTrace trace;
    std::vector<std::size_t> hcpl_order;
    std::size_t hcpl_cursor = 0;

    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        const auto order = permutation(n, rng);
        double sums[5] = {0, 0, 0, 0, 0};
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t m = std::min(batch, n - start);
            const std::span<const std::size_t> src_idx(order.data() + start, m);
            std::vector<std::size_t> h_idx;
            for (std::size_t k = 0; k < std::min(m, nh); ++k) {
                if (hcpl_cursor == hcpl_order.size()) {
                    hcpl_order = permutation(nh, rng);
                    hcpl_cursor = 0;
                }
                h_idx.push_back(hcpl_order[hcpl_cursor++]);
            }
            const Tensor bs = detail::gather_rows(xs, src_idx);
            std::vector<int> bys;
            for (auto i : src_idx) bys.push_back(ys[i]);
            Tensor bh;
            std::vector<int> byh;
            if (!h_idx.empty()) {
                bh = detail::gather_rows(xh, h_idx);
                for (auto i : h_idx) byh.push_back(yh[i]);
            }

            detail::StackedBatch sb;
            int slot[4] = {-1, -1, -1, -1};
            auto add = [&](int term, const Tensor& x, const std::vector<int>& y, std::size_t t) {
                slot[term] = int(sb.groups.size());
                sb.add_group(x, y, t);
            };
            if (cfg.clean_terms) {
                add(0, bs, bys, 0);
                if (!h_idx.empty()) add(1, bh, byh, 0);
            }
            if (cfg.noised_terms) {
                const std::size_t t = step_dist(rng);
                add(2, detail::diffuse_rows(bs, t, sched, rng), bys, t);
                if (!h_idx.empty()) add(3, detail::diffuse_rows(bh, t, sched, rng), byh, t);
            }
            auto [values, grads] = detail::stacked_loss(clf, sb, cfg.loss);
            double total = 0.0;
            for (double v : values) total += v;
            if (!std::isfinite(total) || grads.empty())
                throw DivergenceError("train_unified: non-finite loss", trace.total);
            opt.step(clf.net, grads);
            sums[4] += total;
            for (int k = 0; k < 4; ++k)
                if (slot[k] >= 0) sums[k] += values[slot[k]];
            ++batches;
        }
        const double nb = double(batches);
        trace.total.push_back(sums[4] / nb);
        trace.clean_source.push_back(sums[0] / nb);
        trace.clean_hcpl.push_back(sums[1] / nb);
        trace.noised_source.push_back(sums[2] / nb);
        trace.noised_hcpl.push_back(sums[3] / nb);
    }
    return trace;
}

/// Plain supervised training at t = 0 on labeled samples.
inline std::vector<double> train_supervised(TimeAwareClassifier& clf, const std::vector<LabeledSample>& samples,
                                            const TrainConfig& train, Rng& rng,
                                            ClassifierLoss loss = ClassifierLoss::cross_entropy) {
    NoiseSchedule dummy(std::max<std::size_t>(clf.embedding.T, 2), 1e-4, 0.02);
    UnifiedConfig cfg{train, loss, true, false};
    return train_unified(clf, samples, {}, dummy, cfg, rng).total;
}

// ---------------------------------------------------------------------------
// Input gradients and evaluation

inline constexpr double log_prob_floor = -27.631021115928547;  // log(1e-12)

struct InputGradient {
    Tensor grad;          // shaped like x
    bool clamped = false; // some p(y|x) underflowed to 0; those rows get a zero gradient
};

/// d log p(y_i | x_i, t) / d x_i for one sample [d] or every row of a batch.
inline InputGradient log_prob_input_grad(const TimeAwareClassifier& clf, const Tensor& x, std::size_t t,
                                         std::span<const int> labels) {
    if (x.cols() != clf.data_dim) throw InvalidArgument("log_prob_input_grad: input dimension mismatch");
    if (t > clf.embedding.T) throw InvalidArgument("log_prob_input_grad: step beyond T");
    const std::size_t rows = x.rows();
    if (labels.size() != rows) throw InvalidArgument("log_prob_input_grad: one label per row required");
    for (int y : labels)
        if (y < 0 || std::size_t(y) >= clf.num_classes) throw InvalidArgument("log_prob_input_grad: class out of range");

    Tape tape;
    const Var xin = tape.leaf(x.rank() == 2 ? x : x.reshaped({1, x.size()}), true);
    const std::size_t steps[1] = {t};
    Tensor emb_cols({rows, clf.embedding.dim});
    for (std::size_t i = 0; i < rows; ++i) clf.embedding.encode_into(steps[0], emb_cols.row(i));
    const Var ein = tape.leaf(std::move(emb_cols), false);
    const auto g = record_mlp(tape, clf.net, tape.concat_cols(xin, ein), false);
    const Var lp = tape.log_softmax(g.logits);
    const Var total = tape.pick_sum(lp, std::vector<int>(labels.begin(), labels.end()));
    const Var leaves[1] = {xin};
    InputGradient out{tape.backward(total, leaves).values[0], false};
    const auto& lpv = tape.value(lp);
    for (std::size_t i = 0; i < rows; ++i) {
        if (std::exp(lpv[i * clf.num_classes + labels[i]]) == 0.0) {
            out.clamped = true;
            for (auto& v : out.grad.row(i)) v = 0.0;
        }
    }
    if (x.rank() == 1) out.grad = out.grad.reshaped({x.size()});
    return out;
}

inline InputGradient log_prob_input_grad(const TimeAwareClassifier& clf, const Tensor& x, std::size_t t, int label) {
    const std::vector<int> labels(x.rows(), label);
    return log_prob_input_grad(clf, x, t, labels);
}

/// log p(y | x, t) with the floor log(1e-12) applied when p underflows.
inline double log_prob(const TimeAwareClassifier& clf, const Tensor& x, std::size_t t, int label) {
    const Tensor p = predict(clf, x, t);
    return p[std::size_t(label)] > 0.0 ? std::log(p[std::size_t(label)]) : log_prob_floor;
}

/// Fraction of samples whose t = 0 argmax equals their label.
inline double evaluate_accuracy(const TimeAwareClassifier& clf, const std::vector<LabeledSample>& test) {
    if (test.empty()) throw InvalidArgument("evaluate_accuracy: empty test set");
    const auto labels = labels_of(test);
    const Tensor p = predict(clf, features_matrix(test), 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (int(argmax(p.row(i))) == labels[i]) ++correct;
    return double(correct) / double(labels.size());
}

/// The only reader of held-out target labels.
inline double evaluate_target_accuracy(const TimeAwareClassifier& clf, const DatasetBundle& bundle) {
    if (bundle.target_test.empty()) throw InvalidArgument("evaluate_target_accuracy: empty target test set");
    if (!bundle.target_test_labelled()) throw InvalidArgument("evaluate_target_accuracy: target test labels missing");
    std::vector<LabeledSample> labelled = bundle.target_test;
    for (std::size_t i = 0; i < labelled.size(); ++i) labelled[i].label = bundle.target_test_truth_[i];
    return evaluate_accuracy(clf, labelled);
}

}  // namespace nocdda
