#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "awmp/rng.hpp"

namespace awmp {

struct StepResult {
    double reward = 0.0;
    std::vector<double> next_state;
    bool done = false;
};

/// Small deterministic continuous-control environments. Dynamics are exact
/// given state and action; only reset() draws randomness.
///
///   bang1d      double integrator, reward -(|p| + 0.1 a^2), horizon 200.
///               The optimal law is bang-bang across the switching curve
///               p + v|v|/2 = 0.
///   pointmass2d 2-D double integrator to the origin,
///               reward -dist - 0.01 |a|^2, horizon 300.
///   mountain1d  underpowered hill climb, -0.01 a^2 per step plus a sparse
///               +100 bonus at the goal (terminal), horizon 500.
class ToyEnv {
public:
    enum class Kind { bang1d, pointmass2d, mountain1d };

    static ToyEnv make(const std::string& id) {
        if (id == "bang1d") return ToyEnv(Kind::bang1d, 2, 1, 200);
        if (id == "pointmass2d") return ToyEnv(Kind::pointmass2d, 4, 2, 300);
        if (id == "mountain1d") return ToyEnv(Kind::mountain1d, 2, 1, 500);
        throw std::invalid_argument("unknown environment id: " + id);
    }

    const std::string& id() const { return id_; }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_dim() const { return action_dim_; }
    std::size_t horizon() const { return horizon_; }
    const std::vector<double>& state() const { return state_; }

    // integration step for the integrator tasks
    static constexpr double kDt = 0.1;

    std::vector<double> reset(Rng& rng) {
        switch (kind_) {
            case Kind::bang1d:
                state_ = {rng.uniform(-1.0, 1.0), 0.0};
                break;
            case Kind::pointmass2d:
                state_ = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0, 0.0};
                break;
            case Kind::mountain1d:
                state_ = {rng.uniform(-0.6, -0.4), 0.0};
                break;
        }
        return state_;
    }

    /// Actions outside [-1,1] are clipped with a one-time warning.
    StepResult step(std::span<const double> action) {
        if (action.size() != action_dim_)
            throw std::invalid_argument(id_ + ": action dimension mismatch");
        std::vector<double> a(action.begin(), action.end());
        for (double& v : a) {
            if (v < -1.0 || v > 1.0) {
                if (!clip_warned_) {
                    std::cerr << "[" << id_ << "] warning: action clipped to [-1,1]\n";
                    clip_warned_ = true;
                }
                v = std::min(std::max(v, -1.0), 1.0);
            }
        }
        StepResult res;
        switch (kind_) {
            case Kind::bang1d: {
                double p = state_[0], v = state_[1];
                v = clampd(v + a[0] * kDt, -2.0, 2.0);
                p = clampd(p + v * kDt, -3.0, 3.0);
                state_ = {p, v};
                res.reward = -(std::fabs(p) + 0.1 * a[0] * a[0]);
                res.done = false;
                break;
            }
            case Kind::pointmass2d: {
                double px = state_[0], py = state_[1], vx = state_[2], vy = state_[3];
                vx = clampd(vx + a[0] * kDt, -2.0, 2.0);
                vy = clampd(vy + a[1] * kDt, -2.0, 2.0);
                px = clampd(px + vx * kDt, -3.0, 3.0);
                py = clampd(py + vy * kDt, -3.0, 3.0);
                state_ = {px, py, vx, vy};
                const double dist = std::sqrt(px * px + py * py);
                res.reward = -(dist + 0.01 * (a[0] * a[0] + a[1] * a[1]));
                res.done = false;
                break;
            }
            case Kind::mountain1d: {
                double p = state_[0], v = state_[1];
                v = clampd(v + 0.0015 * a[0] - 0.0025 * std::cos(3.0 * p), -0.07, 0.07);
                p = p + v;
                if (p < -1.2) {
                    p = -1.2;
                    v = 0.0;
                }
                p = std::min(p, 0.6);
                state_ = {p, v};
                res.done = p >= 0.45;
                res.reward = -0.01 * a[0] * a[0] + (res.done ? 100.0 : 0.0);
                break;
            }
        }
        res.next_state = state_;
        return res;
    }

private:
    ToyEnv(Kind kind, std::size_t sd, std::size_t ad, std::size_t horizon)
        : kind_(kind), state_dim_(sd), action_dim_(ad), horizon_(horizon) {
        switch (kind) {
            case Kind::bang1d: id_ = "bang1d"; break;
            case Kind::pointmass2d: id_ = "pointmass2d"; break;
            case Kind::mountain1d: id_ = "mountain1d"; break;
        }
        state_.assign(state_dim_, 0.0);
    }

    static double clampd(double x, double lo, double hi) {
        return std::min(std::max(x, lo), hi);
    }

    Kind kind_;
    std::string id_;
    std::size_t state_dim_, action_dim_, horizon_;
    std::vector<double> state_;
    bool clip_warned_ = false;
};

/// Time-optimal switching law for the double integrator, with a deadbeat
/// layer near the surface so the discrete-time controller settles instead
/// of chattering (which would pay the 0.1 a^2 cost forever).
inline double bang_bang_action(double p, double v, double dt = ToyEnv::kDt) {
    const double surface = p + v * std::fabs(v) / 2.0;
    if (std::fabs(surface) > 0.02) return surface > 0.0 ? -1.0 : 1.0;
    const double a = -(p + v * dt) / (dt * dt);  // drive p' to 0, then v follows
    return std::min(std::max(a, -1.0), 1.0);
}

struct TrajectoryStep {
    std::size_t t = 0;
    std::vector<double> state;
    std::vector<double> action;
    double reward = 0.0;
};

struct EpisodeResult {
    double episode_return = 0.0;  // undiscounted sum of rewards
    std::size_t steps = 0;
    std::vector<TrajectoryStep> trajectory;
};

/// Rolls one episode. The policy sees the state and returns an action; the
/// episode ends at a terminal step or at the horizon.
inline EpisodeResult run_episode(
    ToyEnv& env, const std::function<std::vector<double>(std::span<const double>)>& action_fn,
    Rng& rng, bool record_trajectory = true) {
    EpisodeResult out;
    std::vector<double> s = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon(); ++t) {
        std::vector<double> a = action_fn(s);
        StepResult r = env.step(a);
        if (record_trajectory)
            out.trajectory.push_back({t, s, a, r.reward});
        out.episode_return += r.reward;
        out.steps = t + 1;
        s = r.next_state;
        if (r.done) break;
    }
    return out;
}

/// One step per line: t, state components, action components, reward.
inline void write_trajectory(std::ostream& os, const std::vector<TrajectoryStep>& traj) {
    os.precision(17);
    for (const TrajectoryStep& ts : traj) {
        os << ts.t;
        for (double v : ts.state) os << '\t' << v;
        for (double v : ts.action) os << '\t' << v;
        os << '\t' << ts.reward << '\n';
    }
}

}  // namespace awmp
