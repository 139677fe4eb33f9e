#pragma once

#include <cmath>
#include <iostream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "awmp/distributions.hpp"
#include "awmp/networks.hpp"
#include "awmp/replay.hpp"

namespace awmp {

/// Softmax network over mixture components, trained by advantage-weighted
/// mutual-information maximization with a perturbation-KL regularizer.
struct PriorNet {
    MlpParams net;          // (s,a) -> weights over components, softmax head
    double noise_scale = 0.04;
    double mi_coeff = 0.1;

    std::size_t components() const { return net.output_dim(); }

    static PriorNet make(std::size_t state_dim, std::size_t action_dim, std::size_t components,
                         const std::vector<std::size_t>& hidden, Rng& rng,
                         double noise_scale = 0.04, double mi_coeff = 0.1) {
        PriorNet p;
        p.net = MlpParams::make("prior", state_dim + action_dim, hidden, components,
                                Head::softmax, rng);
        p.noise_scale = noise_scale;
        p.mi_coeff = mi_coeff;
        return p;
    }

    /// Component weights h = P(.|s,a) for a single pair.
    CategoricalDist weights(std::span<const double> state, std::span<const double> action) const {
        std::vector<double> x(state.begin(), state.end());
        x.insert(x.end(), action.begin(), action.end());
        return CategoricalDist{net.forward1(x)};
    }
};

/// Normalized advantage-weighted importance weights over one batch.
struct AdvantageWeights {
    std::vector<double> w;  // nonnegative, sums to 1
};

/// w_i proportional to exp(A_i - log mu_i), normalized over the batch. The
/// shift by the batch max keeps the exponentials in range; any common
/// constant in the advantages cancels.
inline AdvantageWeights normalized_importance_weights(std::span<const double> advantages,
                                                      std::span<const double> behavior_log_probs) {
    if (advantages.empty() || advantages.size() != behavior_log_probs.size())
        throw std::invalid_argument("importance weights: empty or mismatched batch");
    const std::size_t n = advantages.size();
    std::vector<double> logw(n);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(advantages[i]) || !std::isfinite(behavior_log_probs[i]))
            throw std::invalid_argument("importance weights: non-finite input");
        logw[i] = advantages[i] - behavior_log_probs[i];
        m = std::max(m, logw[i]);
    }
    if (!std::isfinite(m)) throw std::invalid_argument("importance weights: degenerate batch");
    AdvantageWeights out;
    out.w.resize(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out.w[i] = std::exp(logw[i] - m);
        sum += out.w[i];
    }
    for (std::size_t i = 0; i < n; ++i) out.w[i] /= sum;
    return out;
}

/// P_hat(h) = sum_i w_i P(h | s_i, a_i): weighted average of the per-sample
/// component distributions.
inline CategoricalDist estimate_marginal(const std::vector<CategoricalDist>& h_dists,
                                         const AdvantageWeights& weights) {
    if (h_dists.empty() || h_dists.size() != weights.w.size())
        throw std::invalid_argument("estimate_marginal: batch mismatch");
    CategoricalDist m;
    m.probs.assign(h_dists[0].probs.size(), 0.0);
    for (std::size_t i = 0; i < h_dists.size(); ++i)
        for (std::size_t k = 0; k < m.probs.size(); ++k)
            m.probs[k] += weights.w[i] * h_dists[i].probs[k];
    return m;
}

/// I(h; (s,a)) = H(marginal) - sum_i w_i H(P(.|s_i,a_i)), with 0 log 0 = 0.
inline double mi_estimate(const std::vector<CategoricalDist>& h_dists,
                          const AdvantageWeights& weights) {
    const CategoricalDist marginal = estimate_marginal(h_dists, weights);
    double cond = 0.0;
    for (std::size_t i = 0; i < h_dists.size(); ++i) cond += weights.w[i] * h_dists[i].entropy();
    return marginal.entropy() - cond;
}

/// Mean KL between the output at a Gaussian-perturbed input and at the clean
/// input. Zero when noise_scale is zero or the network output is constant.
inline double kl_regularizer(const PriorNet& prior, const Tensor& inputs, Rng& rng) {
    const std::size_t B = inputs.shape()[0], D = inputs.shape()[1];
    Tensor perturbed = inputs;
    for (std::size_t i = 0; i < B * D; ++i)
        perturbed[i] += prior.noise_scale * rng.normal();
    const Tensor p_clean = prior.net.forward(inputs);
    const Tensor p_pert = prior.net.forward(perturbed);
    const std::size_t O = p_clean.shape()[1];
    double total = 0.0;
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t k = 0; k < O; ++k) {
            const double pt = p_pert(r, k);
            if (pt > 0.0) total += pt * (std::log(pt) - std::log(p_clean(r, k)));
        }
    return total / static_cast<double>(B);
}

struct PriorLosses {
    double objective = 0.0;   // J = reg - zeta * mi
    double mi = 0.0;
    double regularizer = 0.0;
};

namespace detail {

/// Builds J_eta = l(eta) - zeta * I(h,(s,a)) on a tape. Inputs, the
/// perturbation noise and the importance weights are constants; gradients
/// flow only into the prior parameters.
struct PriorObjective {
    ad::Var loss;
    ad::Var mi;
    ad::Var reg;
    std::vector<ad::Var> leaves;
};

inline PriorObjective build_prior_objective(ad::Tape& tape, const PriorNet& prior,
                                            const Tensor& inputs, const Tensor& noise,
                                            const AdvantageWeights& weights, double zeta) {
    const std::size_t B = inputs.shape()[0];
    PriorObjective po;
    po.leaves = prior.net.register_leaves(tape);

    ad::Var x = tape.constant(inputs);
    Tensor pert_in = inputs;
    for (std::size_t i = 0; i < pert_in.size(); ++i) pert_in[i] += noise[i];
    ad::Var x_pert = tape.constant(pert_in);

    ad::Var log_p = tape.log_softmax_rows(prior.net.forward_tape_raw(tape, po.leaves, x));
    ad::Var log_p_pert =
        tape.log_softmax_rows(prior.net.forward_tape_raw(tape, po.leaves, x_pert));
    ad::Var p = tape.exp(log_p);
    ad::Var p_pert = tape.exp(log_p_pert);

    // perturbation KL, mean over the batch
    ad::Var kl_rows = tape.row_sum(tape.mul(p_pert, tape.sub(log_p_pert, log_p)));
    po.reg = tape.mean(kl_rows);

    Tensor wcol = Tensor::zeros({B, 1});
    for (std::size_t i = 0; i < B; ++i) wcol[i] = weights.w[i];
    ad::Var w = tape.constant(wcol);

    // marginal entropy
    ad::Var marginal = tape.col_sum(tape.mul(p, w));  // [1, O], strictly positive
    ad::Var h_marginal = tape.neg(tape.sum(tape.mul(marginal, tape.log(marginal))));

    // conditional entropy: -sum_i w_i sum_k P log P
    ad::Var h_cond = tape.neg(tape.sum(tape.mul(tape.row_sum(tape.mul(p, log_p)), w)));

    po.mi = tape.sub(h_marginal, h_cond);
    po.loss = tape.sub(po.reg, tape.scale(po.mi, zeta));
    return po;
}

}  // namespace detail

/// One Adam step on J_eta for a prepared batch: inputs are the concatenated
/// (s,a) rows, `noise` the frozen perturbation draw (same shape as inputs).
inline PriorLosses prior_train_step(PriorNet& prior, AdamState& opt, const Tensor& inputs,
                                    const Tensor& noise, const AdvantageWeights& weights) {
    ad::Tape tape;
    detail::PriorObjective po =
        detail::build_prior_objective(tape, prior, inputs, noise, weights, prior.mi_coeff);
    tape.backward(po.loss);
    adam_step(opt, prior.net, prior.net.collect_grads(tape, po.leaves));
    return {tape.value(po.loss).item(), tape.value(po.mi).item(), tape.value(po.reg).item()};
}

/// Advantage A = min(Q1, Q2)(s,a) - V(s) from the current critics.
inline std::vector<double> batch_advantages(const std::vector<const Transition*>& batch,
                                            const MlpParams& q1, const MlpParams& q2,
                                            const MlpParams& v) {
    const std::size_t B = batch.size();
    const std::size_t ds = batch[0]->state.size(), da = batch[0]->action.size();
    Tensor sa = Tensor::zeros({B, ds + da});
    Tensor s = Tensor::zeros({B, ds});
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < ds; ++j) {
            sa(i, j) = batch[i]->state[j];
            s(i, j) = batch[i]->state[j];
        }
        for (std::size_t j = 0; j < da; ++j) sa(i, ds + j) = batch[i]->action[j];
    }
    const Tensor tq1 = q1.forward(sa);
    const Tensor tq2 = q2.forward(sa);
    const Tensor tv = v.forward(s);
    std::vector<double> adv(B);
    for (std::size_t i = 0; i < B; ++i) adv[i] = std::min(tq1[i], tq2[i]) - tv[i];
    return adv;
}

/// Full prior update from a recent-window batch: advantages from the current
/// critics, behavior densities from the stored transitions, one Adam step.
/// Returns nullopt (with a warning) if the batch is empty.
inline std::optional<PriorLosses> prior_update(PriorNet& prior, AdamState& opt,
                                               const std::vector<const Transition*>& batch,
                                               const MlpParams& q1, const MlpParams& q2,
                                               const MlpParams& v, Rng& rng) {
    if (batch.empty()) {
        std::cerr << "[prior] warning: empty recent window, skipping update\n";
        return std::nullopt;
    }
    const std::size_t B = batch.size();
    const std::size_t ds = batch[0]->state.size(), da = batch[0]->action.size();
    Tensor inputs = Tensor::zeros({B, ds + da});
    std::vector<double> log_mu(B);
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < ds; ++j) inputs(i, j) = batch[i]->state[j];
        for (std::size_t j = 0; j < da; ++j) inputs(i, ds + j) = batch[i]->action[j];
        log_mu[i] = batch[i]->behavior_log_prob;
    }
    const std::vector<double> adv = batch_advantages(batch, q1, q2, v);
    const AdvantageWeights w = normalized_importance_weights(adv, log_mu);
    Tensor noise = Tensor::zeros(inputs.shape());
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = prior.noise_scale * rng.normal();
    return prior_train_step(prior, opt, inputs, noise, w);
}

}  // namespace awmp
