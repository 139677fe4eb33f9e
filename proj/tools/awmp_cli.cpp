// Command-line front end: train / eval / aggregate / oracle.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "awmp/harness.hpp"

namespace {

int cmd_train(const std::string& config_path, long seed_override, const std::string& out_override) {
    awmp::ExperimentConfig cfg = awmp::load_experiment_config(config_path);
    awmp::apply_env_overrides(cfg);
    if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
    if (!out_override.empty()) cfg.out_dir = out_override;
    cfg.validate();

    std::cout << "training " << cfg.algorithm << " on " << cfg.env_id << ", "
              << cfg.seeds.size() << " seed(s), " << cfg.total_steps << " steps\n";
    const std::vector<awmp::SeedRunResult> results = awmp::run_experiment(cfg);
    int rc = 0;
    for (const awmp::SeedRunResult& r : results) {
        if (r.aborted) {
            std::cout << "seed " << r.seed << " ABORTED: " << r.abort_reason << " (partial metrics in "
                      << r.metrics_path << ")\n";
            rc = 1;
        } else {
            const double final_mean = r.rows.empty() ? 0.0 : r.rows.back().mean_return;
            std::cout << "seed " << r.seed << " final mean return " << final_mean << " -> "
                      << r.metrics_path << '\n';
        }
    }
    return rc;
}

int cmd_eval(const std::string& checkpoint, std::size_t episodes, std::uint64_t seed,
             const std::string& dump_path) {
    awmp::ExperimentConfig cfg = awmp::load_experiment_config(checkpoint + ".cfg");
    awmp::ToyEnv env = awmp::ToyEnv::make(cfg.env_id);
    awmp::AwmpAgent agent(env.state_dim(), env.action_dim(), cfg.agent, seed);
    agent.load(checkpoint);

    awmp::Rng rng = awmp::Rng::substream(seed, "eval.cli");
    std::ofstream dump;
    if (!dump_path.empty()) dump.open(dump_path, std::ios::trunc);
    double total = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
        awmp::EpisodeResult er = awmp::run_episode(
            env, [&](std::span<const double> s) { return agent.act_eval(s); }, rng,
            /*record_trajectory=*/!dump_path.empty());
        std::cout << "episode " << e << " return " << er.episode_return << " steps " << er.steps
                  << '\n';
        total += er.episode_return;
        if (dump.is_open()) awmp::write_trajectory(dump, er.trajectory);
    }
    std::cout << "mean return over " << episodes << " episodes: "
              << total / static_cast<double>(episodes) << '\n';
    return 0;
}

int cmd_aggregate(const std::vector<std::string>& inputs, const std::string& out_path) {
    const std::vector<awmp::AggregateRow> rows = awmp::aggregate_metrics(inputs);
    if (out_path.empty() || out_path == "-") {
        awmp::write_aggregate(std::cout, rows);
    } else {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + out_path);
        awmp::write_aggregate(os, rows);
        std::cout << "wrote " << rows.size() << " rows to " << out_path << '\n';
    }
    return 0;
}

int cmd_oracle(const std::string& mdp_path, double alpha) {
    std::ifstream is(mdp_path);
    if (!is) throw std::runtime_error("cannot open " + mdp_path);
    const awmp::tab::FiniteMDP mdp = awmp::tab::parse_mdp(is);
    return awmp::oracle_report(mdp, alpha, std::cout) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"soft actor-critic with advantage-weighted mixture policies"};
    app.require_subcommand(1);

    std::string config_path, out_override, checkpoint, dump_path, agg_out, mdp_path;
    long seed_override = -1;
    std::uint64_t eval_seed = 0;
    std::size_t episodes = 10;
    std::vector<std::string> agg_inputs;
    double alpha = 1.0;

    CLI::App* train = app.add_subcommand("train", "train an agent from a config file");
    train->add_option("--config", config_path, "experiment config file")->required();
    train->add_option("--seed", seed_override, "run only this seed");
    train->add_option("--out", out_override, "override the output directory");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path (expects <path>.cfg beside it)")
        ->required();
    eval->add_option("--episodes", episodes, "number of evaluation episodes");
    eval->add_option("--seed", eval_seed, "evaluation reset seed");
    eval->add_option("--dump", dump_path, "write trajectories to this file");

    CLI::App* agg = app.add_subcommand("aggregate", "merge per-seed metrics into a plot file");
    agg->add_option("--in", agg_inputs, "metrics files")->required()->expected(-1);
    agg->add_option("--out", agg_out, "output path ('-' for stdout)");

    CLI::App* oracle = app.add_subcommand("oracle", "solve a finite MDP by soft policy iteration");
    oracle->add_option("--mdp", mdp_path, "MDP text file")->required();
    oracle->add_option("--alpha", alpha, "entropy temperature");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, seed_override, out_override);
        if (eval->parsed()) return cmd_eval(checkpoint, episodes, eval_seed, dump_path);
        if (agg->parsed()) return cmd_aggregate(agg_inputs, agg_out);
        if (oracle->parsed()) return cmd_oracle(mdp_path, alpha);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
