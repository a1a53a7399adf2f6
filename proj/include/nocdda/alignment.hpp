#pragma once

// Conditional adversarial alignment: a domain discriminator sees the
// multilinear map f (x) y of the classifier's penultimate features and its
// class probabilities, both taken at t = 0.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "nocdda/autodiff.hpp"
#include "nocdda/classifier.hpp"
#include "nocdda/mlp.hpp"

namespace nocdda {

struct DomainDiscriminator {
    MlpParams net;  // (d_f * C) -> 1 logit, identity head
    std::size_t feature_dim = 0;
    std::size_t num_classes = 0;

    void validate() const {
        net.validate();
        if (net.in_dim() != feature_dim * num_classes || net.out_dim() != 1 || net.head != OutputHead::identity)
            throw InvalidArgument("discriminator: expects (d_f * C) -> 1 logit");
    }

    /// P(source | joint feature) per row.
    std::vector<double> source_probability(const Tensor& joint) const {
        const Tensor logits = forward_mlp(net, joint);
        std::vector<double> out(logits.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(logits[i]);
        return out;
    }
};

/// Width of the classifier's penultimate layer.
inline std::size_t feature_dim(const TimeAwareClassifier& clf) {
    if (clf.net.layers.size() < 2) throw InvalidArgument("alignment: classifier needs a hidden layer for features");
    return clf.net.layers[clf.net.layers.size() - 2].weight.shape()[0];
}

inline DomainDiscriminator make_discriminator(std::size_t feature_dim, std::size_t num_classes,
                                              std::span<const std::size_t> hidden, std::uint64_t seed,
                                              bool zero_output_layer = false) {
    std::vector<std::size_t> widths{feature_dim * num_classes};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    DomainDiscriminator d{make_mlp(widths, Activation::relu, OutputHead::identity, seed, zero_output_layer), feature_dim,
                          num_classes};
    d.validate();
    return d;
}

/// Outer product f y^T flattened row-major: entry (i, j) at i * C + j.
inline Tensor multilinear_map(std::span<const double> f, std::span<const double> y, std::size_t expect_f = 0,
                              std::size_t expect_c = 0) {
    if ((expect_f && f.size() != expect_f) || (expect_c && y.size() != expect_c) || f.empty() || y.empty())
        throw InvalidArgument("multilinear_map: dimension mismatch");
    Tensor out({f.size() * y.size()});
    for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j) out[i * y.size() + j] = f[i] * y[j];
    return out;
}

/// Joint features f (x) y at t = 0 for each row of `x`.
inline Tensor joint_features(const TimeAwareClassifier& clf, const Tensor& x) {
    Tape tape;
    const Var in = tape.leaf(with_time_columns(x, 0, clf.embedding), false);
    const auto g = record_mlp(tape, clf.net, in, false);
    return tape.value(tape.outer_rows(g.features, g.output));
}

/// Balanced accuracy of thresholding D at 1/2 (source = positive class).
/// 0.5 means the domains are indistinguishable to D.
inline double domain_confusion_score(const DomainDiscriminator& disc, const Tensor& source_joint,
                                     const Tensor& target_joint) {
    if (source_joint.empty() || target_joint.empty()) throw InvalidArgument("confusion score: empty feature set");
    if (source_joint.cols() != disc.net.in_dim() || target_joint.cols() != disc.net.in_dim())
        throw InvalidArgument("confusion score: feature width mismatch");
    const auto ps = disc.source_probability(source_joint);
    const auto pt = disc.source_probability(target_joint);
    double hit_s = 0, hit_t = 0;
    for (double p : ps) hit_s += p > 0.5 ? 1 : 0;
    for (double p : pt) hit_t += p > 0.5 ? 0 : 1;
    return 0.5 * (hit_s / double(ps.size()) + hit_t / double(pt.size()));
}

struct AdversarialConfig {
    double lr_generator = 0.02;
    double lr_discriminator = 0.02;
    double momentum = 0.5;
    double adversarial_weight = 1.0;
    double clip_norm = 5.0;
};

struct AdversarialLosses {
    double supervised = 0.0;  // cross-entropy on the labeled source batch
    double discriminator = 0.0;  // -[mean log D(S) + mean log(1 - D(T))] before the D update
    double generator_adversarial = 0.0;  // negated discrimination loss seen by G after the D update
    double confusion = 0.5;  // D balanced accuracy on this round's batches
};

/// Alternating min-max: one discriminator step on detached joint features,
/// then one generator step on the supervised term plus the reversed
/// discrimination term.
class AdversarialTrainer {
public:
    AdversarialTrainer(TimeAwareClassifier& generator, DomainDiscriminator& disc, AdversarialConfig cfg)
        : gen_(generator),
          disc_(disc),
          cfg_(cfg),
          opt_g_(cfg.lr_generator, cfg.momentum, cfg.clip_norm),
          opt_d_(cfg.lr_discriminator, cfg.momentum, cfg.clip_norm) {
        gen_.validate();
        disc_.validate();
        if (feature_dim(gen_) != disc_.feature_dim || gen_.num_classes != disc_.num_classes)
            throw InvalidArgument("adversarial: discriminator width does not match classifier features");
    }

    AdversarialLosses round(const Tensor& source_x, std::span<const int> source_y, const Tensor& target_x) {
        if (source_x.empty() || target_x.empty()) throw InvalidArgument("adversarial_round: empty batch");
        if (source_y.size() != source_x.rows()) throw InvalidArgument("adversarial_round: one label per source row");
        const std::size_t ns = source_x.rows(), nt = target_x.rows(), n = ns + nt;
        Tensor both({n, gen_.data_dim});
        std::copy(source_x.values().begin(), source_x.values().end(), both.values().begin());
        std::copy(target_x.values().begin(), target_x.values().end(), both.values().begin() + ns * gen_.data_dim);
        Tensor domain_targets({n}, 0.0);
        std::vector<double> domain_weights(n);
        for (std::size_t i = 0; i < n; ++i) {
            domain_targets[i] = i < ns ? 1.0 : 0.0;
            domain_weights[i] = i < ns ? 1.0 / double(ns) : 1.0 / double(nt);
        }
        AdversarialLosses out;

        // (a) discriminator ascent on log D(S) + log(1 - D(T)), features detached
        {
            const Tensor joint = joint_features(gen_, both);
            Tape tape;
            const auto d = record_mlp(tape, disc_.net, tape.leaf(joint, false));
            const Var loss = tape.bce_logits(d.logits, domain_targets, domain_weights);
            out.discriminator = tape.scalar(loss);
            const auto& z = tape.value(d.logits);
            double hs = 0, ht = 0;
            for (std::size_t i = 0; i < n; ++i) (i < ns ? hs : ht) += (z[i] > 0.0) == (i < ns) ? 1.0 : 0.0;
            out.confusion = 0.5 * (hs / double(ns) + ht / double(nt));
            opt_d_.step(disc_.net, tape.backward(loss, d.params).values);
        }

        // (b) generator descent on supervised CE minus the discrimination loss
        {
            Tape tape;
            const Var in = tape.leaf(with_time_columns(both, 0, gen_.embedding), false);
            const auto g = record_mlp(tape, gen_.net, in);
            std::vector<int> labels(n, 0);
            std::vector<double> sup_weights(n, 0.0);
            for (std::size_t i = 0; i < ns; ++i) {
                labels[i] = source_y[i];
                sup_weights[i] = 1.0 / double(ns);
            }
            const Var sup = tape.nll_mean(tape.log_softmax(g.logits), labels, sup_weights);
            const Var joint = tape.outer_rows(g.features, g.output);
            const auto d = record_mlp(tape, disc_.net, joint, false);
            const Var disc_loss = tape.bce_logits(d.logits, domain_targets, domain_weights);
            const Var adv = tape.scale(disc_loss, -1.0);
            const Var total = tape.add(sup, tape.scale(adv, cfg_.adversarial_weight));
            out.supervised = tape.scalar(sup);
            out.generator_adversarial = tape.scalar(adv);
            if (!std::isfinite(tape.scalar(total))) throw NumericalError("adversarial_round: non-finite generator loss");
            opt_g_.step(gen_.net, tape.backward(total, g.params).values);
        }

        saturated_streak_ = out.discriminator < 1e-6 ? saturated_streak_ + 1 : 0;
        if (saturated_streak_ >= 10) saturation_flag_ = true;
        return out;
    }

    /// Discriminator loss stayed below 1e-6 for 10 consecutive rounds at some point.
    bool saturated() const { return saturation_flag_; }

private:
    TimeAwareClassifier& gen_;
    DomainDiscriminator& disc_;
    AdversarialConfig cfg_;
    SgdMomentum opt_g_;
    SgdMomentum opt_d_;
    int saturated_streak_ = 0;
    bool saturation_flag_ = false;
};

/// One round with fresh optimiser state.
inline AdversarialLosses adversarial_round(TimeAwareClassifier& generator, DomainDiscriminator& disc,
                                           const Tensor& source_x, std::span<const int> source_y,
                                           const Tensor& target_x, double lr_generator, double lr_discriminator) {
    AdversarialConfig cfg;
    cfg.lr_generator = lr_generator;
    cfg.lr_discriminator = lr_discriminator;
    AdversarialTrainer trainer(generator, disc, cfg);
    return trainer.round(source_x, source_y, target_x);
}

/// Trains a fresh discriminator on fixed joint features and reports its
/// confusion score on held-out joint features. Measures how separable two
/// domains are in the classifier's joint representation.
inline double probe_domain_separability(const Tensor& train_source, const Tensor& train_target,
                                        const Tensor& test_source, const Tensor& test_target,
                                        std::span<const std::size_t> hidden, std::size_t steps, std::uint64_t seed,
                                        double lr = 0.05) {
    const std::size_t width = train_source.cols();
    std::vector<std::size_t> widths{width};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    DomainDiscriminator probe{make_mlp(widths, Activation::relu, OutputHead::identity, seed), width, 1};
    const std::size_t ns = train_source.rows(), nt = train_target.rows();
    Tensor both({ns + nt, width});
    std::copy(train_source.values().begin(), train_source.values().end(), both.values().begin());
    std::copy(train_target.values().begin(), train_target.values().end(), both.values().begin() + ns * width);
    Tensor targets({ns + nt}, 0.0);
    std::vector<double> weights(ns + nt);
    for (std::size_t i = 0; i < ns + nt; ++i) {
        targets[i] = i < ns ? 1.0 : 0.0;
        weights[i] = i < ns ? 1.0 / double(ns) : 1.0 / double(nt);
    }
    SgdMomentum opt(lr, 0.9, 5.0);
    for (std::size_t s = 0; s < steps; ++s) {
        Tape tape;
        const auto d = record_mlp(tape, probe.net, tape.leaf(both, false));
        const Var loss = tape.bce_logits(d.logits, targets, weights);
        opt.step(probe.net, tape.backward(loss, d.params).values);
    }
    return domain_confusion_score(probe, test_source, test_target);
}

/// round,sup_loss,d_loss,g_adv_loss,confusion_score
inline void save_adversarial_log(const std::vector<AdversarialLosses>& rounds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    out << "round,sup_loss,d_loss,g_adv_loss,confusion_score\n";
    for (std::size_t r = 0; r < rounds.size(); ++r)
        out << r << ',' << detail::format_real(rounds[r].supervised) << ',' << detail::format_real(rounds[r].discriminator)
            << ',' << detail::format_real(rounds[r].generator_adversarial) << ','
            << detail::format_real(rounds[r].confusion) << '\n';
}

}  // namespace nocdda
