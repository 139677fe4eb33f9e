#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "awmp/autodiff.hpp"
#include "awmp/distributions.hpp"
#include "awmp/envs.hpp"
#include "awmp/networks.hpp"
#include "awmp/prior.hpp"
#include "awmp/replay.hpp"
#include "awmp/rng.hpp"
#include "awmp/tensor.hpp"

namespace awmp {

/// Hyperparameters for both the mixture agent and the single-component
/// reference. `batch_policy` of zero means batch_critic * components.
struct AgentConfig {
    std::size_t components = 4;        // O
    double alpha_pi = 0.2;             // policy entropy temperature
    double alpha_g = 0.001;            // gating entropy temperature
    double gamma = 0.99;
    double tau_v = 0.005;
    double tau_q = 0.001;
    double lr = 3e-4;
    std::size_t batch_critic = 100;
    std::size_t batch_policy = 0;
    std::size_t batch_prior = 50;
    std::size_t recent_window = 5000;  // M
    std::size_t replay_capacity = 1000000;
    std::size_t n_mc = 4;              // samples per component for value/option estimates
    std::size_t warmup_steps = 1000;   // uniform-random collection before updates
    std::vector<std::size_t> hidden = {400, 400};
    double prior_noise = 0.04;         // sigma_reg
    double mi_coeff = 0.1;             // zeta

    std::size_t policy_batch() const {
        return batch_policy ? batch_policy : batch_critic * components;
    }

    void validate() const {
        if (components < 1) throw std::invalid_argument("AgentConfig: components must be >= 1");
        if (alpha_pi < 0.0 || alpha_g < 0.0)
            throw std::invalid_argument("AgentConfig: temperatures must be >= 0");
        if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("AgentConfig: gamma not in [0,1)");
        if (tau_v <= 0.0 || tau_v > 1.0 || tau_q <= 0.0 || tau_q > 1.0)
            throw std::invalid_argument("AgentConfig: tau not in (0,1]");
        if (n_mc < 1) throw std::invalid_argument("AgentConfig: n_mc must be >= 1");
        if (replay_capacity < std::max(batch_critic, policy_batch()))
            throw std::invalid_argument("AgentConfig: replay capacity below batch size");
    }
};

/// Gaussian mixture policy: one trunk, O mean/log-std head pairs. Column
/// layout of the trunk output: [mean_0 .. mean_{O-1} | logstd_0 .. logstd_{O-1}],
/// each block action_dim wide.
struct MixturePolicy {
    MlpParams net;
    std::size_t action_dim = 0;
    std::size_t components = 0;

    static MixturePolicy make(std::size_t state_dim, std::size_t action_dim,
                              std::size_t components, const std::vector<std::size_t>& hidden,
                              Rng& rng) {
        MixturePolicy p;
        p.action_dim = action_dim;
        p.components = components;
        p.net = MlpParams::make("policy", state_dim, hidden, 2 * components * action_dim,
                                Head::gaussian, rng, 1e-2);
        return p;
    }

    double mean_at(const Tensor& out, std::size_t row, std::size_t g, std::size_t d) const {
        return out(row, g * action_dim + d);
    }
    double log_std_at(const Tensor& out, std::size_t row, std::size_t g, std::size_t d) const {
        return out(row, (components + g) * action_dim + d);
    }

    /// All component heads for a single state.
    std::vector<GaussianHead> heads(std::span<const double> state) const {
        const std::vector<double> out = net.forward1(state);
        std::vector<GaussianHead> hs(components);
        for (std::size_t g = 0; g < components; ++g) {
            hs[g].mean.assign(out.begin() + g * action_dim, out.begin() + (g + 1) * action_dim);
            hs[g].log_std.assign(out.begin() + (components + g) * action_dim,
                                 out.begin() + (components + g + 1) * action_dim);
        }
        return hs;
    }
};

/// Twin soft action-value networks, the soft state-value network and the two
/// target copies.
struct CriticSet {
    MlpParams q1, q2, v, v_target, q_target;

    static CriticSet make(std::size_t state_dim, std::size_t action_dim,
                          const std::vector<std::size_t>& hidden, std::uint64_t seed) {
        CriticSet c;
        Rng rq1 = Rng::substream(seed, "init.q1");
        Rng rq2 = Rng::substream(seed, "init.q2");
        Rng rv = Rng::substream(seed, "init.v");
        c.q1 = MlpParams::make("q1", state_dim + action_dim, hidden, 1, Head::linear, rq1);
        c.q2 = MlpParams::make("q2", state_dim + action_dim, hidden, 1, Head::linear, rq2);
        c.v = MlpParams::make("v", state_dim, hidden, 1, Head::linear, rv);
        c.v_target = c.v;
        c.v_target.name = "v_target";
        c.q_target = c.q1;  // the gating target tracks the first twin
        c.q_target.name = "q_target";
        return c;
    }
};

// ---------------------------------------------------------------------------
// Monte-Carlo machinery shared by gating, value targets and both agents.
// Noise is always consumed in (sample row: state, component, draw; then
// action dim) order so the single-component agent and the mixture agent with
// O = 1 read identical streams.

namespace detail {

struct ComponentSamples {
    Tensor q_inputs;               // [B*O*n_mc, ds+da], rows (i, g, j)
    std::vector<double> log_probs; // squashed log-density of each row's action
    std::size_t batch = 0, components = 0, n_mc = 0;

    std::size_t row(std::size_t i, std::size_t g, std::size_t j) const {
        return (i * components + g) * n_mc + j;
    }
};

inline ComponentSamples draw_component_samples(const Tensor& states, const MixturePolicy& policy,
                                               const Tensor& head_out, std::size_t n_mc,
                                               Rng& rng) {
    const std::size_t B = states.shape()[0];
    const std::size_t ds = states.shape()[1];
    const std::size_t da = policy.action_dim;
    const std::size_t O = policy.components;
    ComponentSamples cs;
    cs.batch = B;
    cs.components = O;
    cs.n_mc = n_mc;
    cs.q_inputs = Tensor::zeros({B * O * n_mc, ds + da});
    cs.log_probs.assign(B * O * n_mc, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t g = 0; g < O; ++g)
            for (std::size_t j = 0; j < n_mc; ++j) {
                const std::size_t r = cs.row(i, g, j);
                double lp = 0.0;
                for (std::size_t d = 0; d < da; ++d) {
                    const double eps = rng.normal();
                    const double mean = policy.mean_at(head_out, i, g, d);
                    const double ls = policy.log_std_at(head_out, i, g, d);
                    const double u = mean + std::exp(ls) * eps;
                    lp += -0.5 * eps * eps - ls - kHalfLog2Pi - log_one_minus_tanh_sq(u);
                    cs.q_inputs(r, ds + d) = std::tanh(u);
                }
                for (std::size_t d = 0; d < ds; ++d) cs.q_inputs(r, d) = states(i, d);
                cs.log_probs[r] = lp;
            }
    return cs;
}

}  // namespace detail

/// Per-component soft option values for a batch of states, estimated with
/// n_mc reparameterized draws against the given (target) action-value
/// network:  Q_G(s, g) = E_a~pi_g [ Q(s,a) - alpha_pi log pi_g(a|s) ].
inline Tensor option_values_batch(const Tensor& states, const MixturePolicy& policy,
                                  const MlpParams& q_net, double alpha_pi, std::size_t n_mc,
                                  Rng& rng) {
    const Tensor head_out = policy.net.forward(states);
    const detail::ComponentSamples cs =
        detail::draw_component_samples(states, policy, head_out, n_mc, rng);
    const Tensor q = q_net.forward(cs.q_inputs);
    const std::size_t B = states.shape()[0], O = policy.components;
    Tensor out = Tensor::zeros({B, O});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t g = 0; g < O; ++g) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n_mc; ++j) {
                const std::size_t r = cs.row(i, g, j);
                acc += q[r] - alpha_pi * cs.log_probs[r];
            }
            out(i, g) = acc / static_cast<double>(n_mc);
        }
    return out;
}

/// Softmax gating over option values, max-shifted.
inline CategoricalDist gating_policy(std::span<const double> option_values) {
    CategoricalDist d;
    d.probs.assign(option_values.begin(), option_values.end());
    for (double v : d.probs)
        if (!std::isfinite(v)) throw std::invalid_argument("gating_policy: non-finite option value");
    softmax_rows_inplace(d.probs.data(), 1, d.probs.size());
    return d;
}

struct ValueTargets {
    std::vector<double> v_hat;   // per state
    Tensor rho;                  // [B, O] gating used for the targets
    double mean_gate_entropy = 0.0;
};

/// Soft state-value targets
///   V_hat(s) = sum_g rho(g|s) E_j[ min(Q1,Q2)(s, a_gj) - alpha_pi log pi_g(a_gj|s) ]
///            + alpha_g H(rho(.|s)),
/// with rho computed from the target action-value network on the same
/// component samples. With one component this is exactly the single-policy
/// soft value target (rho = 1, gating entropy 0) and the gating network is
/// never evaluated.
inline ValueTargets compute_value_targets(const Tensor& states, const MixturePolicy& policy,
                                          const CriticSet& critics, double alpha_pi,
                                          double alpha_g, std::size_t n_mc, Rng& rng) {
    const std::size_t B = states.shape()[0], O = policy.components;
    const Tensor head_out = policy.net.forward(states);
    const detail::ComponentSamples cs =
        detail::draw_component_samples(states, policy, head_out, n_mc, rng);
    const Tensor q1 = critics.q1.forward(cs.q_inputs);
    const Tensor q2 = critics.q2.forward(cs.q_inputs);

    ValueTargets out;
    out.v_hat.assign(B, 0.0);
    out.rho = Tensor::full({B, O}, 1.0);
    if (O > 1) {
        const Tensor qt = critics.q_target.forward(cs.q_inputs);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t g = 0; g < O; ++g) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n_mc; ++j) {
                    const std::size_t r = cs.row(i, g, j);
                    acc += qt[r] - alpha_pi * cs.log_probs[r];
                }
                out.rho(i, g) = acc / static_cast<double>(n_mc);
            }
        }
        softmax_rows_inplace(out.rho.data(), B, O);
    }

    double ent_sum = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        double v = 0.0, ent = 0.0;
        for (std::size_t g = 0; g < O; ++g) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n_mc; ++j) {
                const std::size_t r = cs.row(i, g, j);
                acc += std::min(q1[r], q2[r]) - alpha_pi * cs.log_probs[r];
            }
            const double rho = out.rho(i, g);
            v += rho * (acc / static_cast<double>(n_mc));
            if (rho > 0.0) ent -= rho * std::log(rho);
        }
        out.v_hat[i] = v + alpha_g * ent;
        ent_sum += ent;
    }
    out.mean_gate_entropy = ent_sum / static_cast<double>(B);
    return out;
}

// ---------------------------------------------------------------------------
// Loss builders. Policy losses come in two forms that coincide for O = 1:
// the single-component form scores the sample from its pre-squash value
// (numerically exact), the mixture form goes through the inverse squash of
// the weighted action. The O = 1 reduction is routed to the former.

namespace detail {

inline Tensor draw_normal(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

/// Squashed log-density terms for a reparameterized tape sample:
/// log N(pre; mean, std) - sum log(1 - tanh(pre)^2), per row -> [B,1].
inline ad::Var tape_squashed_log_prob(ad::Tape& tape, ad::Var pre, ad::Var mean, ad::Var log_std,
                                      std::size_t action_dim) {
    ad::Var z = tape.mul(tape.sub(pre, mean), tape.exp(tape.neg(log_std)));
    ad::Var log_n = tape.neg(tape.add(
        tape.scale(tape.row_sum(tape.square(z)), 0.5),
        tape.add_const(tape.row_sum(log_std),
                       static_cast<double>(action_dim) * kHalfLog2Pi)));
    // log(1 - tanh(pre)^2) = 2 (log 2 - pre - softplus(-2 pre))
    ad::Var sp = tape.softplus(tape.scale(pre, -2.0));
    ad::Var jac = tape.row_sum(
        tape.scale(tape.add_const(tape.neg(tape.add(pre, sp)), std::numbers::ln2), 2.0));
    return tape.sub(log_n, jac);
}

struct PolicyLoss {
    ad::Var loss;
    std::vector<ad::Var> leaves;
};

/// Single-component SAC policy loss: mean[ alpha log pi(a|s) - min Q(s,a) ]
/// with a = tanh(mean + std * eps).
inline PolicyLoss sac_policy_loss(ad::Tape& tape, const MixturePolicy& policy,
                                  const Tensor& states, const Tensor& eps, const MlpParams& q1,
                                  const MlpParams& q2, double alpha_pi) {
    const std::size_t da = policy.action_dim;
    PolicyLoss pl;
    pl.leaves = policy.net.register_leaves(tape);
    ad::Var x = tape.constant(states);
    ad::Var out = policy.net.forward_tape(tape, pl.leaves, x);
    ad::Var mean = tape.slice_cols(out, 0, da);
    ad::Var log_std = tape.slice_cols(out, da, 2 * da);
    ad::Var pre = tape.add(mean, tape.mul(tape.exp(log_std), tape.constant(eps)));
    ad::Var action = tape.tanh(pre);
    ad::Var log_pi = tape_squashed_log_prob(tape, pre, mean, log_std, da);

    std::vector<ad::Var> q1_leaves = q1.register_leaves(tape, false);
    std::vector<ad::Var> q2_leaves = q2.register_leaves(tape, false);
    ad::Var q_in = tape.concat_cols({x, action});
    ad::Var q_min = tape.min(q1.forward_tape(tape, q1_leaves, q_in),
                             q2.forward_tape(tape, q2_leaves, q_in));
    pl.loss = tape.mean(tape.sub(tape.scale(log_pi, alpha_pi), q_min));
    return pl;
}

/// Mixture policy loss. Per state: component draws f_g = tanh(mean_g +
/// std_g eps_g), the prior-weighted action a = sum_g h_g f_g, scored under
/// the rho-weighted mixture density:
///   mean[ alpha log pi(a|s) - min Q(s,a) ].
/// h and rho enter as constants; gradients flow through the action path and
/// the component densities.
inline PolicyLoss awmp_policy_loss(ad::Tape& tape, const MixturePolicy& policy,
                                   const Tensor& states, const std::vector<Tensor>& eps_per_comp,
                                   const Tensor& h, const Tensor& rho, const MlpParams& q1,
                                   const MlpParams& q2, double alpha_pi) {
    const std::size_t B = states.shape()[0];
    const std::size_t da = policy.action_dim;
    const std::size_t O = policy.components;
    PolicyLoss pl;
    pl.leaves = policy.net.register_leaves(tape);
    ad::Var x = tape.constant(states);
    ad::Var out = policy.net.forward_tape(tape, pl.leaves, x);

    std::vector<ad::Var> means(O), log_stds(O), samples(O);
    ad::Var a_mix;
    for (std::size_t g = 0; g < O; ++g) {
        means[g] = tape.slice_cols(out, g * da, (g + 1) * da);
        log_stds[g] = tape.slice_cols(out, (O + g) * da, (O + g + 1) * da);
        ad::Var pre = tape.add(means[g],
                               tape.mul(tape.exp(log_stds[g]), tape.constant(eps_per_comp[g])));
        samples[g] = tape.tanh(pre);
        Tensor h_col = Tensor::zeros({B, 1});
        for (std::size_t i = 0; i < B; ++i) h_col[i] = h(i, g);
        ad::Var weighted = tape.mul(samples[g], tape.constant(h_col));
        a_mix = (g == 0) ? weighted : tape.add(a_mix, weighted);
    }
    a_mix = tape.clamp(a_mix, -kActionAtanhClamp, kActionAtanhClamp);
    ad::Var u_mix = tape.atanh(a_mix);

    // mixture density: logsumexp_g [log rho_g + log N_g(u)] - sum log(1 - a^2)
    std::vector<ad::Var> cols(O);
    for (std::size_t g = 0; g < O; ++g) {
        ad::Var z = tape.mul(tape.sub(u_mix, means[g]), tape.exp(tape.neg(log_stds[g])));
        ad::Var log_n = tape.neg(tape.add(
            tape.scale(tape.row_sum(tape.square(z)), 0.5),
            tape.add_const(tape.row_sum(log_stds[g]),
                           static_cast<double>(da) * kHalfLog2Pi)));
        Tensor log_rho = Tensor::zeros({B, 1});
        for (std::size_t i = 0; i < B; ++i)
            log_rho[i] = std::log(std::max(rho(i, g), 1e-300));
        cols[g] = tape.add(log_n, tape.constant(log_rho));
    }
    ad::Var mix = tape.logsumexp_rows(tape.concat_cols(cols));
    ad::Var jac = tape.row_sum(tape.add(tape.log1p(tape.neg(a_mix)), tape.log1p(a_mix)));
    ad::Var log_pi = tape.sub(mix, jac);

    std::vector<ad::Var> q1_leaves = q1.register_leaves(tape, false);
    std::vector<ad::Var> q2_leaves = q2.register_leaves(tape, false);
    ad::Var q_in = tape.concat_cols({x, a_mix});
    ad::Var q_min = tape.min(q1.forward_tape(tape, q1_leaves, q_in),
                             q2.forward_tape(tape, q2_leaves, q_in));
    pl.loss = tape.mean(tape.sub(tape.scale(log_pi, alpha_pi), q_min));
    return pl;
}

/// One Adam step on mean[ 0.5 (net(x) - target)^2 ].
inline double half_mse_step(MlpParams& net, AdamState& opt, const Tensor& inputs,
                            const std::vector<double>& targets) {
    ad::Tape tape;
    std::vector<ad::Var> leaves = net.register_leaves(tape);
    ad::Var pred = net.forward_tape(tape, leaves, tape.constant(inputs));
    Tensor tcol = Tensor::zeros({targets.size(), 1});
    for (std::size_t i = 0; i < targets.size(); ++i) tcol[i] = targets[i];
    ad::Var loss = tape.scale(tape.mean(tape.square(tape.sub(pred, tape.constant(tcol)))), 0.5);
    const double value = tape.value(loss).item();
    if (!std::isfinite(value))
        throw std::runtime_error("non-finite critic loss in network '" + net.name + "'");
    tape.backward(loss);
    adam_step(opt, net, net.collect_grads(tape, leaves));
    return value;
}

}  // namespace detail

/// Per-gradient-step diagnostics; `updated` is false during warmup.
struct UpdateStats {
    bool updated = false;
    double j_v = 0.0, j_q1 = 0.0, j_q2 = 0.0, j_pi = 0.0, j_eta = 0.0;
    double mi = 0.0;
    double gate_entropy = 0.0;
};

// ---------------------------------------------------------------------------

/// SAC-AWMP learner. With components = 1 it degenerates exactly to the SAC
/// reference: identical random streams, identical arithmetic.
class AwmpAgent {
public:
    AwmpAgent(std::size_t state_dim, std::size_t action_dim, AgentConfig cfg, std::uint64_t seed)
        : cfg_(std::move(cfg)),
          state_dim_(state_dim),
          action_dim_(action_dim),
          replay_(cfg_.replay_capacity),
          reset_rng_(Rng::substream(seed, "reset")),
          warmup_rng_(Rng::substream(seed, "warmup")),
          action_rng_(Rng::substream(seed, "action")),
          gate_choice_rng_(Rng::substream(seed, "gate.choice")),
          gate_mc_rng_(Rng::substream(seed, "gate.mc")),
          target_mc_rng_(Rng::substream(seed, "target.mc")),
          policy_noise_rng_(Rng::substream(seed, "policy.noise")),
          batch_critic_rng_(Rng::substream(seed, "batch.critic")),
          batch_policy_rng_(Rng::substream(seed, "batch.policy")),
          batch_prior_rng_(Rng::substream(seed, "batch.prior")),
          prior_noise_rng_(Rng::substream(seed, "prior.noise")) {
        cfg_.validate();
        Rng init_policy = Rng::substream(seed, "init.policy");
        policy_ = MixturePolicy::make(state_dim, action_dim, cfg_.components, cfg_.hidden,
                                      init_policy);
        critics_ = CriticSet::make(state_dim, action_dim, cfg_.hidden, seed);
        Rng init_prior = Rng::substream(seed, "init.prior");
        prior_ = PriorNet::make(state_dim, action_dim, cfg_.components, cfg_.hidden, init_prior,
                                cfg_.prior_noise, cfg_.mi_coeff);
        opt_policy_ = AdamState::make(policy_.net, cfg_.lr);
        opt_q1_ = AdamState::make(critics_.q1, cfg_.lr);
        opt_q2_ = AdamState::make(critics_.q2, cfg_.lr);
        opt_v_ = AdamState::make(critics_.v, cfg_.lr);
        opt_prior_ = AdamState::make(prior_.net, cfg_.lr);
    }

    const AgentConfig& config() const { return cfg_; }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_dim() const { return action_dim_; }
    Rng& reset_rng() { return reset_rng_; }
    const ReplayBuffer& replay() const { return replay_; }
    const MixturePolicy& policy() const { return policy_; }
    const CriticSet& critics() const { return critics_; }
    const PriorNet& prior() const { return prior_; }
    std::uint64_t env_steps() const { return env_steps_; }
    std::uint64_t gradient_steps() const { return gradient_steps_; }

    /// Exploration gating rho(.|s) from the target action-value network.
    CategoricalDist gating(std::span<const double> state) {
        if (cfg_.components == 1) return CategoricalDist{{1.0}};
        Tensor s = Tensor::zeros({1, state_dim_});
        std::copy(state.begin(), state.end(), s.data());
        const Tensor q_g = option_values_batch(s, policy_, critics_.q_target, cfg_.alpha_pi,
                                               cfg_.n_mc, gate_mc_rng_);
        return gating_policy(q_g.span());
    }

    /// Soft option values at one state (target critic, MC estimate).
    std::vector<double> option_values(std::span<const double> state) {
        Tensor s = Tensor::zeros({1, state_dim_});
        std::copy(state.begin(), state.end(), s.data());
        const Tensor q_g = option_values_batch(s, policy_, critics_.q_target, cfg_.alpha_pi,
                                               cfg_.n_mc, gate_mc_rng_);
        return std::vector<double>(q_g.data(), q_g.data() + q_g.size());
    }

    /// Soft state-value target at one state (consumes the target MC stream).
    double value_target(std::span<const double> state) {
        Tensor s = Tensor::zeros({1, state_dim_});
        std::copy(state.begin(), state.end(), s.data());
        return compute_value_targets(s, policy_, critics_, cfg_.alpha_pi, cfg_.alpha_g, cfg_.n_mc,
                                     target_mc_rng_)
            .v_hat[0];
    }

    /// Collection-time action. During warmup: uniform in [-1,1]^da. After:
    /// sample g ~ rho(.|s), then a ~ squashed pi_g; the recorded density is
    /// the full mixture's.
    std::pair<std::vector<double>, double> act_collect(std::span<const double> state) {
        if (env_steps_ < cfg_.warmup_steps) {
            std::vector<double> a(action_dim_);
            for (double& x : a) x = warmup_rng_.uniform(-1.0, 1.0);
            return {a, -static_cast<double>(action_dim_) * std::numbers::ln2};
        }
        const std::vector<GaussianHead> heads = policy_.heads(state);
        if (cfg_.components == 1) {
            SquashedSample s = sample_squashed(heads[0], action_rng_);
            return {s.action, s.log_prob};
        }
        const CategoricalDist rho = gating(state);
        const std::size_t g = sample_categorical(rho, gate_choice_rng_);
        SquashedSample s = sample_squashed(heads[g], action_rng_);
        const double log_prob = mixture_log_prob(heads, rho.probs, s.action);
        return {s.action, log_prob};
    }

    /// Deterministic action: argmax of the plug-in gating estimate (each
    /// component evaluated at its mean action), then tanh of that mean.
    std::vector<double> act_eval(std::span<const double> state) const {
        const std::vector<GaussianHead> heads = policy_.heads(state);
        std::size_t best = 0;
        if (cfg_.components > 1) {
            double best_val = -std::numeric_limits<double>::infinity();
            for (std::size_t g = 0; g < cfg_.components; ++g) {
                std::vector<double> sa(state.begin(), state.end());
                double lp = 0.0;
                for (std::size_t d = 0; d < action_dim_; ++d) {
                    const double u = heads[g].mean[d];
                    sa.push_back(std::tanh(u));
                    lp += -heads[g].log_std[d] - kHalfLog2Pi - log_one_minus_tanh_sq(u);
                }
                const double val = critics_.q_target.forward1(sa)[0] - cfg_.alpha_pi * lp;
                if (val > best_val) {
                    best_val = val;
                    best = g;
                }
            }
        }
        std::vector<double> a(action_dim_);
        for (std::size_t d = 0; d < action_dim_; ++d) a[d] = std::tanh(heads[best].mean[d]);
        return a;
    }

    void observe(Transition t) {
        replay_.push(std::move(t));
        ++env_steps_;
    }

    /// One full gradient step (prior, critics, policy, target tracking) when
    /// past warmup and the replay holds a full batch.
    UpdateStats maybe_update() {
        UpdateStats st;
        if (env_steps_ <= cfg_.warmup_steps) return st;
        if (replay_.size() < std::max(cfg_.batch_critic, cfg_.policy_batch())) return st;
        st.updated = true;

        // prior network on the semi off-policy window
        const std::vector<const Transition*> prior_batch =
            replay_.sample_recent(cfg_.recent_window, cfg_.batch_prior, batch_prior_rng_);
        if (std::optional<PriorLosses> pl = prior_update(prior_, opt_prior_, prior_batch,
                                                         critics_.q1, critics_.q2, critics_.v,
                                                         prior_noise_rng_)) {
            st.j_eta = pl->objective;
            st.mi = pl->mi;
        }

        critic_update(st);
        policy_update(st);

        polyak_update(critics_.v, critics_.v_target, cfg_.tau_v);
        polyak_update(critics_.q1, critics_.q_target, cfg_.tau_q);
        ++gradient_steps_;
        return st;
    }

    void save(const std::string& path) const {
        save_checkpoint(path, {&policy_.net, &critics_.q1, &critics_.q2, &critics_.v,
                               &critics_.v_target, &critics_.q_target, &prior_.net});
    }

    void load(const std::string& path) {
        std::vector<MlpParams> nets = load_checkpoint(path);
        for (MlpParams& n : nets) {
            if (n.name == "policy") policy_.net = std::move(n);
            else if (n.name == "q1") critics_.q1 = std::move(n);
            else if (n.name == "q2") critics_.q2 = std::move(n);
            else if (n.name == "v") critics_.v = std::move(n);
            else if (n.name == "v_target") critics_.v_target = std::move(n);
            else if (n.name == "q_target") critics_.q_target = std::move(n);
            else if (n.name == "prior") prior_.net = std::move(n);
        }
    }

private:
    void critic_update(UpdateStats& st) {
        const std::vector<const Transition*> batch =
            replay_.sample_uniform(cfg_.batch_critic, batch_critic_rng_);
        const std::size_t B = batch.size();
        Tensor states = Tensor::zeros({B, state_dim_});
        Tensor next_states = Tensor::zeros({B, state_dim_});
        Tensor state_actions = Tensor::zeros({B, state_dim_ + action_dim_});
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t d = 0; d < state_dim_; ++d) {
                states(i, d) = batch[i]->state[d];
                next_states(i, d) = batch[i]->next_state[d];
                state_actions(i, d) = batch[i]->state[d];
            }
            for (std::size_t d = 0; d < action_dim_; ++d)
                state_actions(i, state_dim_ + d) = batch[i]->action[d];
        }

        const ValueTargets vt = compute_value_targets(states, policy_, critics_, cfg_.alpha_pi,
                                                      cfg_.alpha_g, cfg_.n_mc, target_mc_rng_);
        const Tensor v_next = critics_.v_target.forward(next_states);
        std::vector<double> q_hat(B);
        for (std::size_t i = 0; i < B; ++i) {
            const double bootstrap = batch[i]->done ? 0.0 : cfg_.gamma * v_next[i];
            q_hat[i] = batch[i]->reward + bootstrap;
        }

        st.j_v = detail::half_mse_step(critics_.v, opt_v_, states, vt.v_hat);
        st.j_q1 = detail::half_mse_step(critics_.q1, opt_q1_, state_actions, q_hat);
        st.j_q2 = detail::half_mse_step(critics_.q2, opt_q2_, state_actions, q_hat);
    }

    void policy_update(UpdateStats& st) {
        const std::vector<const Transition*> batch =
            replay_.sample_uniform(cfg_.policy_batch(), batch_policy_rng_);
        const std::size_t B = batch.size();
        Tensor states = Tensor::zeros({B, state_dim_});
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t d = 0; d < state_dim_; ++d) states(i, d) = batch[i]->state[d];

        if (cfg_.components == 1) {
            const Tensor eps = detail::draw_normal(B, action_dim_, policy_noise_rng_);
            ad::Tape tape;
            detail::PolicyLoss pl = detail::sac_policy_loss(tape, policy_, states, eps,
                                                            critics_.q1, critics_.q2,
                                                            cfg_.alpha_pi);
            finish_policy_step(tape, pl, st);
            st.gate_entropy = 0.0;
            return;
        }

        const std::size_t O = cfg_.components;
        const Tensor head_out = policy_.net.forward(states);
        const Tensor q_g = option_values_batch(states, policy_, critics_.q_target, cfg_.alpha_pi,
                                               cfg_.n_mc, gate_mc_rng_);
        Tensor rho = q_g;
        softmax_rows_inplace(rho.data(), B, O);

        // component noise, row-major (state, component, dim)
        std::vector<Tensor> eps_per_comp(O, Tensor::zeros({B, action_dim_}));
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t g = 0; g < O; ++g)
                for (std::size_t d = 0; d < action_dim_; ++d)
                    eps_per_comp[g](i, d) = policy_noise_rng_.normal();

        // h queried at the executed-style sample: g* ~ rho, a* = f_{g*}
        Tensor prior_in = Tensor::zeros({B, state_dim_ + action_dim_});
        double gate_entropy = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            const double* rrow = rho.data() + i * O;
            const std::size_t g = sample_categorical(std::span(rrow, O), gate_choice_rng_);
            for (std::size_t d = 0; d < state_dim_; ++d) prior_in(i, d) = states(i, d);
            for (std::size_t d = 0; d < action_dim_; ++d) {
                const double mean = policy_.mean_at(head_out, i, g, d);
                const double ls = policy_.log_std_at(head_out, i, g, d);
                prior_in(i, state_dim_ + d) =
                    std::tanh(mean + std::exp(ls) * eps_per_comp[g](i, d));
            }
            for (std::size_t k = 0; k < O; ++k)
                if (rrow[k] > 0.0) gate_entropy -= rrow[k] * std::log(rrow[k]);
        }
        st.gate_entropy = gate_entropy / static_cast<double>(B);
        const Tensor h = prior_.net.forward(prior_in);

        ad::Tape tape;
        detail::PolicyLoss pl = detail::awmp_policy_loss(tape, policy_, states, eps_per_comp, h,
                                                         rho, critics_.q1, critics_.q2,
                                                         cfg_.alpha_pi);
        finish_policy_step(tape, pl, st);
    }

    void finish_policy_step(ad::Tape& tape, detail::PolicyLoss& pl, UpdateStats& st) {
        st.j_pi = tape.value(pl.loss).item();
        if (!std::isfinite(st.j_pi)) throw std::runtime_error("non-finite policy loss");
        tape.backward(pl.loss);
        adam_step(opt_policy_, policy_.net, policy_.net.collect_grads(tape, pl.leaves));
    }

    AgentConfig cfg_;
    std::size_t state_dim_, action_dim_;
    MixturePolicy policy_;
    CriticSet critics_;
    PriorNet prior_;
    AdamState opt_policy_, opt_q1_, opt_q2_, opt_v_, opt_prior_;
    ReplayBuffer replay_;
    Rng reset_rng_, warmup_rng_, action_rng_, gate_choice_rng_, gate_mc_rng_, target_mc_rng_,
        policy_noise_rng_, batch_critic_rng_, batch_policy_rng_, batch_prior_rng_,
        prior_noise_rng_;
    std::uint64_t env_steps_ = 0;
    std::uint64_t gradient_steps_ = 0;
};

// ---------------------------------------------------------------------------

/// Plain SAC with the state-value network formulation: the reference the
/// mixture agent must reproduce at O = 1. Shares every numeric helper with
/// AwmpAgent and consumes the same random streams.
class SacAgent {
public:
    SacAgent(std::size_t state_dim, std::size_t action_dim, AgentConfig cfg, std::uint64_t seed)
        : cfg_(std::move(cfg)),
          state_dim_(state_dim),
          action_dim_(action_dim),
          replay_(cfg_.replay_capacity),
          reset_rng_(Rng::substream(seed, "reset")),
          warmup_rng_(Rng::substream(seed, "warmup")),
          action_rng_(Rng::substream(seed, "action")),
          target_mc_rng_(Rng::substream(seed, "target.mc")),
          policy_noise_rng_(Rng::substream(seed, "policy.noise")),
          batch_critic_rng_(Rng::substream(seed, "batch.critic")),
          batch_policy_rng_(Rng::substream(seed, "batch.policy")) {
        cfg_.components = 1;
        cfg_.validate();
        Rng init_policy = Rng::substream(seed, "init.policy");
        policy_ = MixturePolicy::make(state_dim, action_dim, 1, cfg_.hidden, init_policy);
        critics_ = CriticSet::make(state_dim, action_dim, cfg_.hidden, seed);
        opt_policy_ = AdamState::make(policy_.net, cfg_.lr);
        opt_q1_ = AdamState::make(critics_.q1, cfg_.lr);
        opt_q2_ = AdamState::make(critics_.q2, cfg_.lr);
        opt_v_ = AdamState::make(critics_.v, cfg_.lr);
    }

    const AgentConfig& config() const { return cfg_; }
    Rng& reset_rng() { return reset_rng_; }
    const ReplayBuffer& replay() const { return replay_; }
    const MixturePolicy& policy() const { return policy_; }
    const CriticSet& critics() const { return critics_; }
    std::uint64_t env_steps() const { return env_steps_; }

    std::pair<std::vector<double>, double> act_collect(std::span<const double> state) {
        if (env_steps_ < cfg_.warmup_steps) {
            std::vector<double> a(action_dim_);
            for (double& x : a) x = warmup_rng_.uniform(-1.0, 1.0);
            return {a, -static_cast<double>(action_dim_) * std::numbers::ln2};
        }
        const std::vector<GaussianHead> heads = policy_.heads(state);
        SquashedSample s = sample_squashed(heads[0], action_rng_);
        return {s.action, s.log_prob};
    }

    std::vector<double> act_eval(std::span<const double> state) const {
        const std::vector<GaussianHead> heads = policy_.heads(state);
        std::vector<double> a(action_dim_);
        for (std::size_t d = 0; d < action_dim_; ++d) a[d] = std::tanh(heads[0].mean[d]);
        return a;
    }

    void observe(Transition t) {
        replay_.push(std::move(t));
        ++env_steps_;
    }

    UpdateStats maybe_update() {
        UpdateStats st;
        if (env_steps_ <= cfg_.warmup_steps) return st;
        if (replay_.size() < std::max(cfg_.batch_critic, cfg_.policy_batch())) return st;
        st.updated = true;

        critic_update(st);
        policy_update(st);
        polyak_update(critics_.v, critics_.v_target, cfg_.tau_v);
        polyak_update(critics_.q1, critics_.q_target, cfg_.tau_q);
        return st;
    }

    void save(const std::string& path) const {
        save_checkpoint(path, {&policy_.net, &critics_.q1, &critics_.q2, &critics_.v,
                               &critics_.v_target});
    }

private:
    void critic_update(UpdateStats& st) {
        const std::vector<const Transition*> batch =
            replay_.sample_uniform(cfg_.batch_critic, batch_critic_rng_);
        const std::size_t B = batch.size();
        Tensor states = Tensor::zeros({B, state_dim_});
        Tensor next_states = Tensor::zeros({B, state_dim_});
        Tensor state_actions = Tensor::zeros({B, state_dim_ + action_dim_});
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t d = 0; d < state_dim_; ++d) {
                states(i, d) = batch[i]->state[d];
                next_states(i, d) = batch[i]->next_state[d];
                state_actions(i, d) = batch[i]->state[d];
            }
            for (std::size_t d = 0; d < action_dim_; ++d)
                state_actions(i, state_dim_ + d) = batch[i]->action[d];
        }
        const ValueTargets vt = compute_value_targets(states, policy_, critics_, cfg_.alpha_pi,
                                                      cfg_.alpha_g, cfg_.n_mc, target_mc_rng_);
        const Tensor v_next = critics_.v_target.forward(next_states);
        std::vector<double> q_hat(B);
        for (std::size_t i = 0; i < B; ++i) {
            const double bootstrap = batch[i]->done ? 0.0 : cfg_.gamma * v_next[i];
            q_hat[i] = batch[i]->reward + bootstrap;
        }
        st.j_v = detail::half_mse_step(critics_.v, opt_v_, states, vt.v_hat);
        st.j_q1 = detail::half_mse_step(critics_.q1, opt_q1_, state_actions, q_hat);
        st.j_q2 = detail::half_mse_step(critics_.q2, opt_q2_, state_actions, q_hat);
    }

    void policy_update(UpdateStats& st) {
        const std::vector<const Transition*> batch =
            replay_.sample_uniform(cfg_.policy_batch(), batch_policy_rng_);
        const std::size_t B = batch.size();
        Tensor states = Tensor::zeros({B, state_dim_});
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t d = 0; d < state_dim_; ++d) states(i, d) = batch[i]->state[d];
        const Tensor eps = detail::draw_normal(B, action_dim_, policy_noise_rng_);
        ad::Tape tape;
        detail::PolicyLoss pl = detail::sac_policy_loss(tape, policy_, states, eps, critics_.q1,
                                                        critics_.q2, cfg_.alpha_pi);
        st.j_pi = tape.value(pl.loss).item();
        if (!std::isfinite(st.j_pi)) throw std::runtime_error("non-finite policy loss");
        tape.backward(pl.loss);
        adam_step(opt_policy_, policy_.net, policy_.net.collect_grads(tape, pl.leaves));
    }

    AgentConfig cfg_;
    std::size_t state_dim_, action_dim_;
    MixturePolicy policy_;
    CriticSet critics_;
    AdamState opt_policy_, opt_q1_, opt_q2_, opt_v_;
    ReplayBuffer replay_;
    Rng reset_rng_, warmup_rng_, action_rng_, target_mc_rng_, policy_noise_rng_,
        batch_critic_rng_, batch_policy_rng_;
    std::uint64_t env_steps_ = 0;
};

// ---------------------------------------------------------------------------

/// Environment-step loop: collect, store, update. Timeouts are not stored as
/// terminals, only true terminal transitions mask the bootstrap.
template <class Agent, class Hook>
void run_training(Agent& agent, ToyEnv& env, std::size_t total_steps, Hook&& per_step) {
    std::vector<double> s = env.reset(agent.reset_rng());
    std::size_t ep_len = 0;
    for (std::size_t step = 1; step <= total_steps; ++step) {
        auto [a, log_prob] = agent.act_collect(s);
        StepResult r = env.step(a);
        ++ep_len;
        agent.observe(Transition{s, a, r.reward, r.next_state, r.done, log_prob});
        if (r.done || ep_len >= env.horizon()) {
            s = env.reset(agent.reset_rng());
            ep_len = 0;
        } else {
            s = r.next_state;
        }
        UpdateStats st = agent.maybe_update();
        per_step(step, st);
    }
}

}  // namespace awmp
