#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "awmp/agent.hpp"
#include "awmp/envs.hpp"
#include "awmp/tabular.hpp"

namespace awmp {

/// One experiment: algorithm, environment, agent hyperparameters, schedule
/// and seed list. Serialized as "[section]" headers with "key = value" lines.
struct ExperimentConfig {
    std::string algorithm = "sac-awmp";  // sac | sac-awmp | oracle
    std::string env_id = "bang1d";
    AgentConfig agent;
    std::size_t total_steps = 100000;
    std::size_t eval_interval = 1000;
    std::size_t eval_episodes = 10;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string out_dir = "runs";
    std::size_t jobs = 1;  // parallel seed workers

    void validate() const {
        if (algorithm != "sac" && algorithm != "sac-awmp" && algorithm != "oracle")
            throw std::invalid_argument("config: unknown algorithm '" + algorithm + "'");
        if (eval_interval == 0) throw std::invalid_argument("config: eval_interval must be > 0");
        if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
        agent.validate();
    }

    bool operator==(const ExperimentConfig& o) const {
        const AgentConfig& a = agent;
        const AgentConfig& b = o.agent;
        return algorithm == o.algorithm && env_id == o.env_id && total_steps == o.total_steps &&
               eval_interval == o.eval_interval && eval_episodes == o.eval_episodes &&
               seeds == o.seeds && out_dir == o.out_dir && jobs == o.jobs &&
               a.components == b.components && a.alpha_pi == b.alpha_pi &&
               a.alpha_g == b.alpha_g && a.gamma == b.gamma && a.tau_v == b.tau_v &&
               a.tau_q == b.tau_q && a.lr == b.lr && a.batch_critic == b.batch_critic &&
               a.batch_policy == b.batch_policy && a.batch_prior == b.batch_prior &&
               a.recent_window == b.recent_window && a.replay_capacity == b.replay_capacity &&
               a.n_mc == b.n_mc && a.warmup_steps == b.warmup_steps && a.hidden == b.hidden &&
               a.prior_noise == b.prior_noise && a.mi_coeff == b.mi_coeff;
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
inline std::string fmt_list(const std::vector<T>& xs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    return os.str();
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string render_experiment_config(const ExperimentConfig& c) {
    using detail::fmt_double;
    std::ostringstream os;
    os << "[experiment]\n";
    os << "algorithm = " << c.algorithm << '\n';
    os << "env = " << c.env_id << '\n';
    os << "total_steps = " << c.total_steps << '\n';
    os << "eval_interval = " << c.eval_interval << '\n';
    os << "eval_episodes = " << c.eval_episodes << '\n';
    os << "seeds = " << detail::fmt_list(c.seeds) << '\n';
    os << "out_dir = " << c.out_dir << '\n';
    os << "jobs = " << c.jobs << '\n';
    os << "\n[agent]\n";
    os << "components = " << c.agent.components << '\n';
    os << "alpha_pi = " << fmt_double(c.agent.alpha_pi) << '\n';
    os << "alpha_g = " << fmt_double(c.agent.alpha_g) << '\n';
    os << "gamma = " << fmt_double(c.agent.gamma) << '\n';
    os << "tau_v = " << fmt_double(c.agent.tau_v) << '\n';
    os << "tau_q = " << fmt_double(c.agent.tau_q) << '\n';
    os << "lr = " << fmt_double(c.agent.lr) << '\n';
    os << "batch_critic = " << c.agent.batch_critic << '\n';
    os << "batch_policy = " << c.agent.batch_policy << '\n';
    os << "batch_prior = " << c.agent.batch_prior << '\n';
    os << "recent_window = " << c.agent.recent_window << '\n';
    os << "replay_capacity = " << c.agent.replay_capacity << '\n';
    os << "n_mc = " << c.agent.n_mc << '\n';
    os << "warmup_steps = " << c.agent.warmup_steps << '\n';
    os << "hidden = " << detail::fmt_list(c.agent.hidden) << '\n';
    os << "prior_noise = " << fmt_double(c.agent.prior_noise) << '\n';
    os << "mi_coeff = " << fmt_double(c.agent.mi_coeff) << '\n';
    return os.str();
}

/// Parses the bracketed-section key = value format. Unknown keys and
/// malformed lines are reported with their line number.
inline ExperimentConfig parse_experiment_config(std::istream& is) {
    ExperimentConfig c;
    std::string line, section;
    int lineno = 0;
    auto fail = [&](const std::string& msg) -> std::runtime_error {
        return std::runtime_error("config parse error at line " + std::to_string(lineno) + ": " +
                                  msg);
    };
    auto to_u64 = [&](const std::string& v) -> std::uint64_t {
        try {
            return std::stoull(v);
        } catch (...) {
            throw fail("expected integer, got '" + v + "'");
        }
    };
    auto to_f64 = [&](const std::string& v) -> double {
        try {
            return std::stod(v);
        } catch (...) {
            throw fail("expected number, got '" + v + "'");
        }
    };

    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw fail("unterminated section header");
            section = line.substr(1, line.size() - 2);
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw fail("expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const std::string skey = section + "." + key;

        if (skey == "experiment.algorithm") c.algorithm = value;
        else if (skey == "experiment.env") c.env_id = value;
        else if (skey == "experiment.total_steps") c.total_steps = to_u64(value);
        else if (skey == "experiment.eval_interval") c.eval_interval = to_u64(value);
        else if (skey == "experiment.eval_episodes") c.eval_episodes = to_u64(value);
        else if (skey == "experiment.seeds") {
            c.seeds.clear();
            for (const std::string& tok : detail::split(value, ','))
                c.seeds.push_back(to_u64(detail::trim(tok)));
        } else if (skey == "experiment.out_dir") c.out_dir = value;
        else if (skey == "experiment.jobs") c.jobs = to_u64(value);
        else if (skey == "agent.components") c.agent.components = to_u64(value);
        else if (skey == "agent.alpha_pi") c.agent.alpha_pi = to_f64(value);
        else if (skey == "agent.alpha_g") c.agent.alpha_g = to_f64(value);
        else if (skey == "agent.gamma") c.agent.gamma = to_f64(value);
        else if (skey == "agent.tau_v") c.agent.tau_v = to_f64(value);
        else if (skey == "agent.tau_q") c.agent.tau_q = to_f64(value);
        else if (skey == "agent.lr") c.agent.lr = to_f64(value);
        else if (skey == "agent.batch_critic") c.agent.batch_critic = to_u64(value);
        else if (skey == "agent.batch_policy") c.agent.batch_policy = to_u64(value);
        else if (skey == "agent.batch_prior") c.agent.batch_prior = to_u64(value);
        else if (skey == "agent.recent_window") c.agent.recent_window = to_u64(value);
        else if (skey == "agent.replay_capacity") c.agent.replay_capacity = to_u64(value);
        else if (skey == "agent.n_mc") c.agent.n_mc = to_u64(value);
        else if (skey == "agent.warmup_steps") c.agent.warmup_steps = to_u64(value);
        else if (skey == "agent.hidden") {
            c.agent.hidden.clear();
            for (const std::string& tok : detail::split(value, ','))
                c.agent.hidden.push_back(to_u64(detail::trim(tok)));
        } else if (skey == "agent.prior_noise") c.agent.prior_noise = to_f64(value);
        else if (skey == "agent.mi_coeff") c.agent.mi_coeff = to_f64(value);
        else throw fail("unknown key '" + skey + "'");
    }
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    return parse_experiment_config(is);
}

/// Environment variables AWMP_<SECTION>_<KEY> (upper case) override config
/// keys, e.g. AWMP_AGENT_ALPHA_PI=0.1 or AWMP_EXPERIMENT_TOTAL_STEPS=2000.
inline void apply_env_overrides(ExperimentConfig& c) {
    auto get = [](const std::string& skey) -> std::optional<std::string> {
        std::string name = "AWMP_" + skey;
        for (char& ch : name) {
            if (ch == '.') ch = '_';
            ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        }
        const char* v = std::getenv(name.c_str());
        if (!v) return std::nullopt;
        return std::string(v);
    };
    std::ostringstream text;
    bool any = false;
    auto add = [&](const char* section, const char* key) {
        if (std::optional<std::string> v = get(std::string(section) + "." + key)) {
            text << '[' << section << "]\n" << key << " = " << *v << '\n';
            any = true;
        }
    };
    for (const char* k : {"algorithm", "env", "total_steps", "eval_interval", "eval_episodes",
                          "seeds", "out_dir", "jobs"})
        add("experiment", k);
    for (const char* k : {"components", "alpha_pi", "alpha_g", "gamma", "tau_v", "tau_q", "lr",
                          "batch_critic", "batch_policy", "batch_prior", "recent_window",
                          "replay_capacity", "n_mc", "warmup_steps", "hidden", "prior_noise",
                          "mi_coeff"})
        add("agent", k);
    if (!any) return;
    // replay the current config plus the override snippet through the parser
    std::ostringstream full;
    full << render_experiment_config(c) << '\n' << text.str();
    std::istringstream all(full.str());
    c = parse_experiment_config(all);
}

// --- metrics ------------------------------------------------------------------

/// One evaluation row. Wall-clock is kept in memory and written to the
/// sidecar run log, never to the metrics file, which must be byte-identical
/// across reruns.
struct MetricsRow {
    std::size_t step = 0;
    double mean_return = 0.0;
    std::vector<double> episode_returns;
    double j_v = 0.0, j_q1 = 0.0, j_q2 = 0.0, j_pi = 0.0, j_eta = 0.0;
    double mi = 0.0;
    double gate_entropy = 0.0;
    double wall_seconds = 0.0;
};

inline void write_metrics_header(std::ostream& os, std::size_t eval_episodes) {
    os << "step\tmean_return";
    for (std::size_t e = 0; e < eval_episodes; ++e) os << "\tret" << e;
    os << "\tj_v\tj_q1\tj_q2\tj_pi\tj_eta\tmi\tgate_entropy\n";
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
    using detail::fmt_double;
    os << r.step << '\t' << fmt_double(r.mean_return);
    for (double ret : r.episode_returns) os << '\t' << fmt_double(ret);
    os << '\t' << fmt_double(r.j_v) << '\t' << fmt_double(r.j_q1) << '\t' << fmt_double(r.j_q2)
       << '\t' << fmt_double(r.j_pi) << '\t' << fmt_double(r.j_eta) << '\t' << fmt_double(r.mi)
       << '\t' << fmt_double(r.gate_entropy) << '\n';
}

// --- experiment driver ----------------------------------------------------------

struct SeedRunResult {
    std::uint64_t seed = 0;
    std::string metrics_path;
    std::string checkpoint_path;
    std::vector<MetricsRow> rows;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

template <class Agent>
SeedRunResult run_one_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    namespace fs = std::filesystem;
    SeedRunResult res;
    res.seed = seed;
    fs::create_directories(cfg.out_dir);
    const std::string prefix =
        cfg.out_dir + "/" + cfg.algorithm + "_" + cfg.env_id + "_seed" + std::to_string(seed);
    res.metrics_path = prefix + ".tsv";
    res.checkpoint_path = prefix + ".ckpt";

    std::ofstream metrics(res.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open " + res.metrics_path);
    std::ofstream log(prefix + ".log", std::ios::trunc);
    write_metrics_header(metrics, cfg.eval_episodes);
    metrics.flush();

    ToyEnv env = ToyEnv::make(cfg.env_id);
    ToyEnv eval_env = ToyEnv::make(cfg.env_id);
    Agent agent(env.state_dim(), env.action_dim(), cfg.agent, seed);
    Rng eval_rng = Rng::substream(seed, "eval");

    const auto t0 = std::chrono::steady_clock::now();
    double acc_jv = 0, acc_jq1 = 0, acc_jq2 = 0, acc_jpi = 0, acc_jeta = 0, acc_mi = 0,
           acc_gate = 0;
    std::size_t acc_n = 0;

    try {
        run_training(agent, env, cfg.total_steps, [&](std::size_t step, const UpdateStats& st) {
            if (st.updated) {
                acc_jv += st.j_v;
                acc_jq1 += st.j_q1;
                acc_jq2 += st.j_q2;
                acc_jpi += st.j_pi;
                acc_jeta += st.j_eta;
                acc_mi += st.mi;
                acc_gate += st.gate_entropy;
                ++acc_n;
            }
            if (step % cfg.eval_interval != 0) return;
            MetricsRow row;
            row.step = step;
            for (std::size_t e = 0; e < cfg.eval_episodes; ++e) {
                EpisodeResult er = run_episode(
                    eval_env,
                    [&](std::span<const double> s) { return agent.act_eval(s); }, eval_rng,
                    /*record_trajectory=*/false);
                row.episode_returns.push_back(er.episode_return);
                row.mean_return += er.episode_return;
            }
            row.mean_return /= static_cast<double>(cfg.eval_episodes);
            const double inv = acc_n ? 1.0 / static_cast<double>(acc_n) : 0.0;
            row.j_v = acc_jv * inv;
            row.j_q1 = acc_jq1 * inv;
            row.j_q2 = acc_jq2 * inv;
            row.j_pi = acc_jpi * inv;
            row.j_eta = acc_jeta * inv;
            row.mi = acc_mi * inv;
            row.gate_entropy = acc_gate * inv;
            acc_jv = acc_jq1 = acc_jq2 = acc_jpi = acc_jeta = acc_mi = acc_gate = 0;
            acc_n = 0;
            row.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            write_metrics_row(metrics, row);
            metrics.flush();
            log << "step " << step << " mean_return " << row.mean_return << " wall "
                << row.wall_seconds << "s\n";
            log.flush();
            res.rows.push_back(std::move(row));
        });
    } catch (const std::exception& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        log << "aborted at env step " << agent.env_steps() << ": " << e.what() << '\n';
        return res;  // partial metrics remain valid
    }

    agent.save(res.checkpoint_path);
    std::ofstream cfg_out(res.checkpoint_path + ".cfg");
    cfg_out << render_experiment_config(cfg);
    log << "done in "
        << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "s\n";
    return res;
}

}  // namespace detail

/// Trains every seed in the config (optionally in parallel worker threads;
/// seeds are fully independent) and returns the per-seed results.
inline std::vector<SeedRunResult> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.algorithm == "oracle")
        throw std::invalid_argument("algorithm 'oracle' runs through the oracle subcommand");
    std::vector<SeedRunResult> results(cfg.seeds.size());
    const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, cfg.seeds.size()));

    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&]() {
        for (;;) {
            std::size_t idx;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= cfg.seeds.size()) return;
                idx = next++;
            }
            const std::uint64_t seed = cfg.seeds[idx];
            results[idx] = cfg.algorithm == "sac"
                               ? detail::run_one_seed<SacAgent>(cfg, seed)
                               : detail::run_one_seed<AwmpAgent>(cfg, seed);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    return results;
}

// --- aggregation -----------------------------------------------------------------

struct AggregateRow {
    std::size_t step = 0;
    double mean = 0.0, lo = 0.0, hi = 0.0;
};

/// Mean across seeds with a mean +- 0.5 * std band (sample std, n-1; zero
/// width for a single file). Steps must align across files.
inline std::vector<AggregateRow> aggregate_metrics(const std::vector<std::string>& paths) {
    if (paths.empty()) throw std::invalid_argument("aggregate: no input files");
    std::vector<std::vector<std::pair<std::size_t, double>>> series;
    for (const std::string& p : paths) {
        std::ifstream is(p);
        if (!is) throw std::runtime_error("aggregate: cannot open " + p);
        std::vector<std::pair<std::size_t, double>> s;
        std::string line;
        bool header_skipped = false;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            if (!header_skipped) {
                header_skipped = true;  // column header
                continue;
            }
            std::istringstream ls(line);
            std::size_t step;
            double mean_ret;
            if (!(ls >> step >> mean_ret))
                throw std::runtime_error("aggregate: malformed row in " + p);
            s.emplace_back(step, mean_ret);
        }
        series.push_back(std::move(s));
    }
    for (std::size_t i = 1; i < series.size(); ++i) {
        if (series[i].size() != series[0].size())
            throw std::runtime_error("aggregate: misaligned step grids: " + paths[0] + " has " +
                                     std::to_string(series[0].size()) + " rows, " + paths[i] +
                                     " has " + std::to_string(series[i].size()));
        for (std::size_t r = 0; r < series[0].size(); ++r)
            if (series[i][r].first != series[0][r].first)
                throw std::runtime_error("aggregate: misaligned step grids between " + paths[0] +
                                         " and " + paths[i]);
    }
    std::vector<AggregateRow> rows;
    const double n = static_cast<double>(series.size());
    for (std::size_t r = 0; r < series[0].size(); ++r) {
        AggregateRow row;
        row.step = series[0][r].first;
        for (const auto& s : series) row.mean += s[r].second;
        row.mean /= n;
        double var = 0.0;
        if (series.size() > 1) {
            for (const auto& s : series) {
                const double d = s[r].second - row.mean;
                var += d * d;
            }
            var /= (n - 1.0);
        }
        const double half_std = 0.5 * std::sqrt(var);
        row.lo = row.mean - half_std;
        row.hi = row.mean + half_std;
        rows.push_back(row);
    }
    return rows;
}

inline void write_aggregate(std::ostream& os, const std::vector<AggregateRow>& rows) {
    os << "# band: mean +- 0.5 * sample standard deviation (n-1 convention)\n";
    os << "step\tmean\tlo\thi\n";
    for (const AggregateRow& r : rows)
        os << r.step << '\t' << detail::fmt_double(r.mean) << '\t' << detail::fmt_double(r.lo)
           << '\t' << detail::fmt_double(r.hi) << '\n';
}

// --- oracle report ------------------------------------------------------------------

/// Solves the MDP by soft policy iteration and prints the result together
/// with contraction and improvement certificates.
inline bool oracle_report(const tab::FiniteMDP& mdp, double alpha, std::ostream& os) {
    using namespace tab;
    os.precision(12);
    os << "soft policy iteration: |S|=" << mdp.num_states << " |A|=" << mdp.num_actions
       << " gamma=" << mdp.gamma << " alpha=" << alpha << "\n";

    const SoftIterationResult res = soft_policy_iteration(mdp, alpha);
    os << "converged after " << res.improvement_rounds << " improvement rounds ("
       << res.values.iterations << " evaluation sweeps in the last round)\n";
    os << "Q*:\n";
    for (std::size_t s = 0; s < mdp.num_states; ++s) {
        os << "  s" << s << ":";
        for (std::size_t a = 0; a < mdp.num_actions; ++a) os << ' ' << res.values.qv(s, a);
        os << '\n';
    }
    os << "pi*:\n";
    for (std::size_t s = 0; s < mdp.num_states; ++s) {
        os << "  s" << s << ":";
        for (std::size_t a = 0; a < mdp.num_actions; ++a) os << ' ' << res.policy.p(s, a);
        os << '\n';
    }

    // contraction certificate: successive sup-norm distances shrink by <= gamma
    bool contraction_ok = true;
    {
        TabularPolicy pi = TabularPolicy::uniform(mdp.num_states, mdp.num_actions, alpha);
        std::vector<double> q(mdp.num_states * mdp.num_actions, 0.0), v(mdp.num_states, 0.0);
        double prev_dist = -1.0;
        for (int sweep = 0; sweep < 60; ++sweep) {
            soft_state_values(pi, q, v);
            std::vector<double> next(q.size());
            double dist = 0.0;
            for (std::size_t s = 0; s < mdp.num_states; ++s)
                for (std::size_t a = 0; a < mdp.num_actions; ++a) {
                    double ev = 0.0;
                    for (std::size_t s2 = 0; s2 < mdp.num_states; ++s2)
                        ev += mdp.t(s, a, s2) * v[s2];
                    next[s * mdp.num_actions + a] = mdp.r(s, a) + mdp.gamma * ev;
                    dist = std::max(dist,
                                    std::fabs(next[s * mdp.num_actions + a] - q[s * mdp.num_actions + a]));
                }
            if (prev_dist >= 0.0 && dist > mdp.gamma * prev_dist + 1e-12) contraction_ok = false;
            if (dist < 1e-13) break;
            prev_dist = dist;
            q.swap(next);
        }
    }
    os << "evaluation contraction certificate (factor <= gamma per sweep): "
       << (contraction_ok ? "PASS" : "FAIL") << '\n';

    // improvement certificate: Boltzmann step never lowers any Q entry
    bool improve_ok = true;
    {
        TabularPolicy pi = TabularPolicy::uniform(mdp.num_states, mdp.num_actions, alpha);
        SoftValues vals = soft_policy_evaluation(mdp, pi);
        for (int round = 0; round < 5; ++round) {
            TabularPolicy next = soft_policy_improvement(vals, alpha);
            SoftValues next_vals = soft_policy_evaluation(mdp, next);
            for (std::size_t i = 0; i < vals.q.size(); ++i)
                if (next_vals.q[i] < vals.q[i] - 1e-9) improve_ok = false;
            vals = std::move(next_vals);
        }
    }
    os << "improvement monotonicity certificate (Q never decreases): "
       << (improve_ok ? "PASS" : "FAIL") << '\n';

    double gap = 0.0;
    for (std::size_t s = 0; s < mdp.num_states; ++s) {
        double mx = 0.0, mn = 1.0;
        for (std::size_t a = 0; a < mdp.num_actions; ++a) {
            mx = std::max(mx, res.policy.p(s, a));
            mn = std::min(mn, res.policy.p(s, a));
        }
        gap = std::max(gap, mx - mn);
    }
    os << "pi* max-min row gap: " << gap << '\n';
    return contraction_ok && improve_ok;
}

}  // namespace awmp
