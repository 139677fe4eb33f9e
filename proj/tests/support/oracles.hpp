#pragma once

// Test-side oracles, independent of the library's computation paths:
// quadrature over densities written from first principles, and a brute-force
// search over tabular policy simplices.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

/// Composite Simpson on [a, b] with n subintervals (n made even).
inline double simpson(const std::function<double(double)>& f, double a, double b, std::size_t n) {
    if (n % 2) ++n;
    const double h = (b - a) / static_cast<double>(n);
    double acc = f(a) + f(b);
    for (std::size_t i = 1; i < n; ++i) acc += f(a + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

inline double normal_pdf(double x, double mean, double std) {
    const double z = (x - mean) / std;
    return std::exp(-0.5 * z * z) / (std * 2.5066282746310005024157652848110);  // sqrt(2 pi)
}

/// Density of a = tanh(u), u ~ N(mean, std^2), written directly from the
/// change of variables: p(a) = N(atanh(a)) / (1 - a^2).
inline double squashed_normal_pdf(double a, double mean, double std) {
    const double u = std::atanh(a);
    return normal_pdf(u, mean, std) / (1.0 - a * a);
}

/// Two-component squashed mixture density.
inline double squashed_mixture_pdf(double a, double m0, double s0, double m1, double s1,
                                   double w0, double w1) {
    return w0 * squashed_normal_pdf(a, m0, s0) + w1 * squashed_normal_pdf(a, m1, s1);
}

/// Integral of a squashed density over the open interval (-1, 1).
inline double integrate_action_density(const std::function<double(double)>& pdf,
                                       std::size_t nodes = 10000) {
    const double edge = 1.0 - 1e-9;
    return simpson(pdf, -edge, edge, nodes);
}

// --- exact 2-state 2-action soft objective --------------------------------------
//
// A policy is (p0, p1) = P(a=0 | s) for the two states. Soft evaluation has a
// closed linear form: V = r_pi + alpha H(pi) + gamma P_pi V, solved exactly
// for two states.

struct TwoStateMdp {
    // r[s][a], t[s][a][s2]
    double r[2][2];
    double t[2][2][2];
    double gamma;
};

struct TwoStateEval {
    double v[2];
    double q[2][2];
};

inline TwoStateEval soft_evaluate_2x2(const TwoStateMdp& m, double p0, double p1, double alpha) {
    const double p[2] = {p0, p1};
    double rp[2], pp[2][2];
    for (int s = 0; s < 2; ++s) {
        const double pa0 = p[s], pa1 = 1.0 - p[s];
        double ent = 0.0;
        if (pa0 > 0.0) ent -= pa0 * std::log(pa0);
        if (pa1 > 0.0) ent -= pa1 * std::log(pa1);
        rp[s] = pa0 * m.r[s][0] + pa1 * m.r[s][1] + alpha * ent;
        for (int s2 = 0; s2 < 2; ++s2) pp[s][s2] = pa0 * m.t[s][0][s2] + pa1 * m.t[s][1][s2];
    }
    // solve (I - gamma P) V = rp
    const double g = m.gamma;
    const double a11 = 1.0 - g * pp[0][0], a12 = -g * pp[0][1];
    const double a21 = -g * pp[1][0], a22 = 1.0 - g * pp[1][1];
    const double det = a11 * a22 - a12 * a21;
    TwoStateEval e;
    e.v[0] = (rp[0] * a22 - a12 * rp[1]) / det;
    e.v[1] = (a11 * rp[1] - rp[0] * a21) / det;
    for (int s = 0; s < 2; ++s)
        for (int a = 0; a < 2; ++a) {
            double ev = 0.0;
            for (int s2 = 0; s2 < 2; ++s2) ev += m.t[s][a][s2] * e.v[s2];
            e.q[s][a] = m.r[s][a] + g * ev;
        }
    return e;
}

struct TwoStateOptimum {
    double p0, p1;
    TwoStateEval eval;
};

/// Grid search over the two simplex coordinates (step 1e-3), then two local
/// refinement passes an order of magnitude finer each.
inline TwoStateOptimum brute_force_soft_optimum(const TwoStateMdp& m, double alpha) {
    auto objective = [&](double p0, double p1) {
        const TwoStateEval e = soft_evaluate_2x2(m, p0, p1, alpha);
        return e.v[0] + e.v[1];
    };
    double best0 = 0.5, best1 = 0.5, best = objective(best0, best1);
    auto scan = [&](double c0, double c1, double half_width, double step) {
        const double lo0 = std::max(0.0, c0 - half_width), hi0 = std::min(1.0, c0 + half_width);
        const double lo1 = std::max(0.0, c1 - half_width), hi1 = std::min(1.0, c1 + half_width);
        for (double p0 = lo0; p0 <= hi0 + step / 2; p0 += step)
            for (double p1 = lo1; p1 <= hi1 + step / 2; p1 += step) {
                const double v = objective(std::min(p0, 1.0), std::min(p1, 1.0));
                if (v > best) {
                    best = v;
                    best0 = std::min(p0, 1.0);
                    best1 = std::min(p1, 1.0);
                }
            }
    };
    scan(0.5, 0.5, 0.5, 1e-3);
    scan(best0, best1, 2e-3, 1e-4);
    scan(best0, best1, 2e-4, 1e-5);
    TwoStateOptimum opt;
    opt.p0 = best0;
    opt.p1 = best1;
    opt.eval = soft_evaluate_2x2(m, best0, best1, alpha);
    return opt;
}

}  // namespace oracle
