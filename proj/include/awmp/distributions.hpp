#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "awmp/rng.hpp"
#include "awmp/tensor.hpp"

namespace awmp {

constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;  // 0.5*log(2*pi)

/// Diagonal Gaussian over the pre-squash space.
struct GaussianHead {
    std::vector<double> mean;
    std::vector<double> log_std;

    std::size_t dim() const { return mean.size(); }
};

/// One reparameterized draw pushed through tanh, with its exact density.
struct SquashedSample {
    std::vector<double> u;       // pre-squash value, mean + std * eps
    std::vector<double> action;  // tanh(u), strictly inside (-1, 1)
    std::vector<double> eps;     // the noise draw used
    double log_prob = 0.0;       // density of the action (Jacobian-corrected)
};

/// log N(u; mean, diag(std^2)) in the pre-squash space.
inline double gaussian_log_prob(const GaussianHead& head, std::span<const double> u) {
    double lp = 0.0;
    for (std::size_t i = 0; i < head.dim(); ++i) {
        const double inv_std = std::exp(-head.log_std[i]);
        const double z = (u[i] - head.mean[i]) * inv_std;
        lp -= 0.5 * z * z + head.log_std[i] + kHalfLog2Pi;
    }
    return lp;
}

/// log(1 - tanh(u)^2) in the form 2*(log 2 - u - softplus(-2u)); the naive
/// expression underflows past |u| ~ 19.
inline double log_one_minus_tanh_sq(double u) {
    return 2.0 * (std::numbers::ln2 - u - stable_softplus(-2.0 * u));
}

/// Density of a = tanh(u) under the squashed Gaussian, evaluated from the
/// pre-squash point.
inline double squashed_log_prob(const GaussianHead& head, std::span<const double> u) {
    double lp = gaussian_log_prob(head, u);
    for (std::size_t i = 0; i < head.dim(); ++i) lp -= log_one_minus_tanh_sq(u[i]);
    return lp;
}

/// u = mean + std * eps, a = tanh(u). The caller supplies the noise so that
/// the same draw can feed a differentiable path elsewhere.
inline SquashedSample sample_squashed(const GaussianHead& head, std::span<const double> eps) {
    if (eps.size() != head.dim())
        throw std::invalid_argument("sample_squashed: noise dimension mismatch");
    SquashedSample s;
    s.eps.assign(eps.begin(), eps.end());
    s.u.resize(head.dim());
    s.action.resize(head.dim());
    for (std::size_t i = 0; i < head.dim(); ++i) {
        s.u[i] = head.mean[i] + std::exp(head.log_std[i]) * eps[i];
        s.action[i] = std::tanh(s.u[i]);
    }
    s.log_prob = squashed_log_prob(head, s.u);
    return s;
}

inline SquashedSample sample_squashed(const GaussianHead& head, Rng& rng) {
    std::vector<double> eps(head.dim());
    for (double& e : eps) e = rng.normal();
    return sample_squashed(head, eps);
}

/// Keeps atanh well-defined when a convex combination of tanh values rounds
/// to exactly +-1.
constexpr double kActionAtanhClamp = 1.0 - 1e-12;

/// Mixture density at a given action in (-1,1)^d:
///   log sum_g w_g N(atanh(a); mean_g, std_g) - sum_i log(1 - a_i^2)
/// The Jacobian term is shared by all components, so it factors out of the
/// log-sum-exp.
inline double mixture_log_prob(std::span<const GaussianHead> components,
                               std::span<const double> weights, std::span<const double> action) {
    if (components.empty() || components.size() != weights.size())
        throw std::invalid_argument("mixture_log_prob: component/weight mismatch");
    for (double a : action)
        if (!(a > -1.0 && a < 1.0))
            throw std::invalid_argument("mixture_log_prob: action outside (-1,1)");

    std::vector<double> u(action.size());
    double jac = 0.0;
    for (std::size_t i = 0; i < action.size(); ++i) {
        const double a = std::min(std::max(action[i], -kActionAtanhClamp), kActionAtanhClamp);
        u[i] = std::atanh(a);
        jac += std::log1p(-a) + std::log1p(a);  // log(1 - a^2)
    }
    std::vector<double> terms(components.size());
    for (std::size_t g = 0; g < components.size(); ++g) {
        const double lw = weights[g] > 0.0 ? std::log(weights[g])
                                           : -std::numeric_limits<double>::infinity();
        terms[g] = lw + gaussian_log_prob(components[g], u);
    }
    return logsumexp(terms) - jac;
}

/// Probability vector over a small set of outcomes.
struct CategoricalDist {
    std::vector<double> probs;

    bool valid(double tol = 1e-12) const {
        double s = 0.0;
        for (double p : probs) {
            if (p < 0.0) return false;
            s += p;
        }
        return std::fabs(s - 1.0) <= tol;
    }

    double entropy() const {
        double h = 0.0;
        for (double p : probs)
            if (p > 0.0) h -= p * std::log(p);
        return h;
    }

    std::size_t argmax() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < probs.size(); ++i)
            if (probs[i] > probs[best]) best = i;
        return best;
    }
};

/// Inverse-CDF draw. Consumes exactly one uniform.
inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;  // u landed in rounding slack
}

inline std::size_t sample_categorical(const CategoricalDist& d, Rng& rng) {
    return sample_categorical(d.probs, rng);
}

}  // namespace awmp
