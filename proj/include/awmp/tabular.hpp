#pragma once

#include <cmath>
#include <istream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "awmp/rng.hpp"
#include "awmp/tensor.hpp"

namespace awmp::tab {

/// Finite MDP with dense transition tensor. Indexing: T(s, a, s'), R(s, a).
struct FiniteMDP {
    std::size_t num_states = 0;
    std::size_t num_actions = 0;
    double gamma = 0.99;
    std::vector<double> transitions;  // [S * A * S]
    std::vector<double> rewards;      // [S * A]
    std::vector<double> initial_dist; // [S], uniform unless set

    double t(std::size_t s, std::size_t a, std::size_t s2) const {
        return transitions[(s * num_actions + a) * num_states + s2];
    }
    double& t(std::size_t s, std::size_t a, std::size_t s2) {
        return transitions[(s * num_actions + a) * num_states + s2];
    }
    double r(std::size_t s, std::size_t a) const { return rewards[s * num_actions + a]; }
    double& r(std::size_t s, std::size_t a) { return rewards[s * num_actions + a]; }

    static FiniteMDP empty(std::size_t S, std::size_t A, double gamma) {
        FiniteMDP m;
        m.num_states = S;
        m.num_actions = A;
        m.gamma = gamma;
        m.transitions.assign(S * A * S, 0.0);
        m.rewards.assign(S * A, 0.0);
        m.initial_dist.assign(S, 1.0 / static_cast<double>(S));
        return m;
    }

    void validate() const {
        if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("FiniteMDP: gamma not in [0,1)");
        for (std::size_t s = 0; s < num_states; ++s)
            for (std::size_t a = 0; a < num_actions; ++a) {
                double sum = 0.0;
                for (std::size_t s2 = 0; s2 < num_states; ++s2) {
                    const double p = t(s, a, s2);
                    if (p < 0.0) throw std::invalid_argument("FiniteMDP: negative transition prob");
                    sum += p;
                }
                if (std::fabs(sum - 1.0) > 1e-9)
                    throw std::invalid_argument("FiniteMDP: transition row does not sum to 1");
                if (!std::isfinite(r(s, a))) throw std::invalid_argument("FiniteMDP: non-finite reward");
            }
    }

    static FiniteMDP random(std::size_t S, std::size_t A, double gamma, Rng& rng) {
        FiniteMDP m = empty(S, A, gamma);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t a = 0; a < A; ++a) {
                double sum = 0.0;
                for (std::size_t s2 = 0; s2 < S; ++s2) {
                    const double p = -std::log(1.0 - rng.uniform());  // Exp(1) -> Dirichlet(1)
                    m.t(s, a, s2) = p;
                    sum += p;
                }
                for (std::size_t s2 = 0; s2 < S; ++s2) m.t(s, a, s2) /= sum;
                m.r(s, a) = rng.uniform(-1.0, 1.0);
            }
        return m;
    }
};

/// Stochastic tabular policy with its entropy temperature.
struct TabularPolicy {
    std::size_t num_states = 0;
    std::size_t num_actions = 0;
    double temperature = 1.0;  // alpha > 0
    std::vector<double> probs; // [S * A]

    double p(std::size_t s, std::size_t a) const { return probs[s * num_actions + a]; }
    double& p(std::size_t s, std::size_t a) { return probs[s * num_actions + a]; }

    static TabularPolicy uniform(std::size_t S, std::size_t A, double alpha) {
        TabularPolicy pi;
        pi.num_states = S;
        pi.num_actions = A;
        pi.temperature = alpha;
        pi.probs.assign(S * A, 1.0 / static_cast<double>(A));
        return pi;
    }

    static TabularPolicy random(std::size_t S, std::size_t A, double alpha, Rng& rng) {
        TabularPolicy pi = uniform(S, A, alpha);
        for (std::size_t s = 0; s < S; ++s) {
            double sum = 0.0;
            for (std::size_t a = 0; a < A; ++a) {
                pi.p(s, a) = -std::log(1.0 - rng.uniform());
                sum += pi.p(s, a);
            }
            for (std::size_t a = 0; a < A; ++a) pi.p(s, a) /= sum;
        }
        return pi;
    }

    void validate() const {
        if (temperature <= 0.0) throw std::invalid_argument("TabularPolicy: alpha must be > 0");
        for (std::size_t s = 0; s < num_states; ++s) {
            double sum = 0.0;
            for (std::size_t a = 0; a < num_actions; ++a) {
                if (p(s, a) < 0.0) throw std::invalid_argument("TabularPolicy: negative probability");
                sum += p(s, a);
            }
            if (std::fabs(sum - 1.0) > 1e-9)
                throw std::invalid_argument("TabularPolicy: row does not sum to 1");
        }
    }

    /// Entropy of the action distribution at s, with 0 log 0 = 0.
    double entropy(std::size_t s) const {
        double h = 0.0;
        for (std::size_t a = 0; a < num_actions; ++a)
            if (p(s, a) > 0.0) h -= p(s, a) * std::log(p(s, a));
        return h;
    }
};

struct SoftValues {
    std::size_t num_states = 0;
    std::size_t num_actions = 0;
    std::vector<double> q;  // [S * A]
    std::vector<double> v;  // [S]
    std::size_t iterations = 0;

    double qv(std::size_t s, std::size_t a) const { return q[s * num_actions + a]; }
    double& qv(std::size_t s, std::size_t a) { return q[s * num_actions + a]; }
};

/// V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s)), zero-probability
/// actions contribute nothing.
inline void soft_state_values(const TabularPolicy& pi, const std::vector<double>& q,
                              std::vector<double>& v) {
    for (std::size_t s = 0; s < pi.num_states; ++s) {
        double val = 0.0;
        for (std::size_t a = 0; a < pi.num_actions; ++a) {
            const double p = pi.p(s, a);
            if (p > 0.0) val += p * (q[s * pi.num_actions + a] - pi.temperature * std::log(p));
        }
        v[s] = val;
    }
}

/// Fixed point of the soft Bellman backup for a fixed policy. The backup is
/// a gamma-contraction in sup norm, so plain iteration to `tol` suffices.
/// Returns Q, the induced V, and the sweep count.
inline SoftValues soft_policy_evaluation(const FiniteMDP& mdp, const TabularPolicy& pi,
                                         double tol = 1e-10,
                                         const std::vector<double>* q_init = nullptr) {
    if (tol <= 0.0) throw std::invalid_argument("soft_policy_evaluation: tol must be > 0");
    pi.validate();
    const std::size_t S = mdp.num_states, A = mdp.num_actions;
    SoftValues out;
    out.num_states = S;
    out.num_actions = A;
    out.q = q_init ? *q_init : std::vector<double>(S * A, 0.0);
    out.v.assign(S, 0.0);

    std::vector<double> next(S * A, 0.0);
    const std::size_t max_sweeps = 1u << 22;
    for (out.iterations = 1; out.iterations <= max_sweeps; ++out.iterations) {
        soft_state_values(pi, out.q, out.v);
        double residual = 0.0;
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t a = 0; a < A; ++a) {
                double ev = 0.0;
                for (std::size_t s2 = 0; s2 < S; ++s2) ev += mdp.t(s, a, s2) * out.v[s2];
                const double q_new = mdp.r(s, a) + mdp.gamma * ev;
                residual = std::max(residual, std::fabs(q_new - out.q[s * A + a]));
                next[s * A + a] = q_new;
            }
        out.q.swap(next);
        if (residual < tol) break;
    }
    soft_state_values(pi, out.q, out.v);
    return out;
}

/// Exact KL minimizer over unrestricted simplex policies:
/// pi'(a|s) = exp(Q(s,a)/alpha) / sum_b exp(Q(s,b)/alpha), max-shifted.
inline TabularPolicy soft_policy_improvement(const SoftValues& values, double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("soft_policy_improvement: alpha must be > 0");
    TabularPolicy pi = TabularPolicy::uniform(values.num_states, values.num_actions, alpha);
    for (std::size_t s = 0; s < values.num_states; ++s) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < values.num_actions; ++a) m = std::max(m, values.qv(s, a));
        double sum = 0.0;
        for (std::size_t a = 0; a < values.num_actions; ++a) {
            pi.p(s, a) = std::exp((values.qv(s, a) - m) / alpha);
            sum += pi.p(s, a);
        }
        for (std::size_t a = 0; a < values.num_actions; ++a) pi.p(s, a) /= sum;
    }
    return pi;
}

struct SoftIterationResult {
    TabularPolicy policy;
    SoftValues values;
    std::size_t improvement_rounds = 0;
};

/// Alternates exact evaluation and Boltzmann improvement until the Q table
/// stops moving. Independent of the initial policy up to tol.
inline SoftIterationResult soft_policy_iteration(const FiniteMDP& mdp, double alpha,
                                                 double tol = 1e-10,
                                                 const TabularPolicy* init = nullptr) {
    mdp.validate();
    TabularPolicy pi = init ? *init
                            : TabularPolicy::uniform(mdp.num_states, mdp.num_actions, alpha);
    pi.temperature = alpha;
    SoftValues vals = soft_policy_evaluation(mdp, pi, tol);
    SoftIterationResult res;
    const std::size_t max_rounds = 100000;
    for (std::size_t k = 0; k < max_rounds; ++k) {
        TabularPolicy next = soft_policy_improvement(vals, alpha);
        SoftValues next_vals = soft_policy_evaluation(mdp, next, tol, &vals.q);
        double delta = 0.0;
        for (std::size_t i = 0; i < vals.q.size(); ++i)
            delta = std::max(delta, std::fabs(next_vals.q[i] - vals.q[i]));
        pi = std::move(next);
        vals = std::move(next_vals);
        res.improvement_rounds = k + 1;
        if (delta < tol) break;
    }
    res.policy = std::move(pi);
    res.values = std::move(vals);
    return res;
}

// --- text format ---------------------------------------------------------------
//
// Header line: "|S| |A| gamma", then S*A reward rows in s-major order is a
// single table of S rows with A columns, then S*A transition rows (one per
// (s,a) pair, s-major then a) each with S probabilities. Whitespace-separated
// decimals; blank lines and lines starting with '#' are skipped.

inline FiniteMDP parse_mdp(std::istream& is) {
    std::vector<std::pair<int, std::string>> lines;  // (line number, content)
    std::string raw;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        std::size_t h = raw.find('#');
        std::string body = h == std::string::npos ? raw : raw.substr(0, h);
        bool blank = body.find_first_not_of(" \t\r") == std::string::npos;
        if (!blank) lines.emplace_back(lineno, body);
    }
    auto fail = [](int ln, const std::string& msg) -> std::runtime_error {
        return std::runtime_error("mdp parse error at line " + std::to_string(ln) + ": " + msg);
    };
    if (lines.empty()) throw std::runtime_error("mdp parse error: empty file");

    std::size_t cursor = 0;
    auto parse_row = [&](std::size_t expected, const char* what) {
        if (cursor >= lines.size())
            throw fail(lines.back().first, std::string("missing ") + what);
        auto [ln, text] = lines[cursor++];
        std::istringstream ss(text);
        std::vector<double> vals;
        double v;
        while (ss >> v) vals.push_back(v);
        if (!ss.eof()) throw fail(ln, std::string("malformed number in ") + what);
        if (vals.size() != expected)
            throw fail(ln, std::string(what) + ": expected " + std::to_string(expected) +
                               " values, found " + std::to_string(vals.size()));
        return std::make_pair(ln, vals);
    };

    auto [hline, header] = parse_row(3, "header '|S| |A| gamma'");
    const double sd = header[0], ad = header[1];
    if (sd < 1 || sd != std::floor(sd) || ad < 1 || ad != std::floor(ad))
        throw fail(hline, "state/action counts must be positive integers");
    FiniteMDP mdp = FiniteMDP::empty(static_cast<std::size_t>(sd), static_cast<std::size_t>(ad),
                                     header[2]);
    if (mdp.gamma < 0.0 || mdp.gamma >= 1.0) throw fail(hline, "gamma must be in [0,1)");

    for (std::size_t s = 0; s < mdp.num_states; ++s) {
        auto [ln, vals] = parse_row(mdp.num_actions, "reward row");
        (void)ln;
        for (std::size_t a = 0; a < mdp.num_actions; ++a) mdp.r(s, a) = vals[a];
    }
    for (std::size_t s = 0; s < mdp.num_states; ++s)
        for (std::size_t a = 0; a < mdp.num_actions; ++a) {
            auto [ln, vals] = parse_row(mdp.num_states, "transition row");
            double sum = 0.0;
            for (double p : vals) sum += p;
            if (std::fabs(sum - 1.0) > 1e-6)
                throw fail(ln, "transition row sums to " + std::to_string(sum));
            for (std::size_t s2 = 0; s2 < mdp.num_states; ++s2) mdp.t(s, a, s2) = vals[s2];
        }
    if (cursor != lines.size())
        throw fail(lines[cursor].first, "unexpected trailing content");
    mdp.validate();
    return mdp;
}

inline void render_mdp(std::ostream& os, const FiniteMDP& mdp) {
    os << mdp.num_states << ' ' << mdp.num_actions << ' ' << mdp.gamma << '\n';
    for (std::size_t s = 0; s < mdp.num_states; ++s) {
        for (std::size_t a = 0; a < mdp.num_actions; ++a) os << (a ? " " : "") << mdp.r(s, a);
        os << '\n';
    }
    for (std::size_t s = 0; s < mdp.num_states; ++s)
        for (std::size_t a = 0; a < mdp.num_actions; ++a) {
            for (std::size_t s2 = 0; s2 < mdp.num_states; ++s2)
                os << (s2 ? " " : "") << mdp.t(s, a, s2);
            os << '\n';
        }
}

}  // namespace awmp::tab
