// Command line front end: experiment presets, JSON configs, artifact emission.

#include "esmot/io.hpp"
#include "esmot/run.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

namespace {

std::vector<int> parse_n_list(const std::string& text)
{
    std::vector<int> out;
    std::string token;
    std::istringstream ss(text);
    while (std::getline(ss, token, ',')) {
        if (token.empty())
            continue;
        out.push_back(std::stoi(token));
    }
    return out;
}

esmot::ProblemConfig resolve_config(const std::string& preset_name, const std::string& config_path)
{
    if (!preset_name.empty() && !config_path.empty())
        throw std::invalid_argument("give either --preset or --config, not both");
    if (!preset_name.empty())
        return esmot::preset(preset_name);
    if (!config_path.empty()) {
        const esmot::json j = esmot::load_json_file(config_path);
        if (j.contains("problem"))
            return esmot::problem_config_from_json(j["problem"]);
        if (j.contains("preset"))
            return esmot::preset(j["preset"].get<std::string>());
        return esmot::problem_config_from_json(j);
    }
    throw std::invalid_argument("one of --preset or --config is required");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app { "Discrete entropic semi-martingale optimal transport solver" };
    app.require_subcommand(1);

    std::string preset_name, config_path, n_text, out_dir = "out";
    int threads = 1;
    double tol = -1.0;
    int max_cycles = -1;

    auto* run_cmd = app.add_subcommand("run", "solve one or more instances and write artifacts");
    run_cmd->add_option("--preset", preset_name, "built-in experiment name");
    run_cmd->add_option("--config", config_path, "JSON problem configuration");
    run_cmd->add_option("--N", n_text, "comma-separated list of time step counts");
    run_cmd->add_option("--out", out_dir, "output directory");
    run_cmd->add_option("--threads", threads, "worker threads for per-node loops");
    run_cmd->add_option("--tol", tol, "override stopping tolerance (relative L-inf change)");
    run_cmd->add_option("--max-cycles", max_cycles, "override the cycle budget");

    auto* presets_cmd = app.add_subcommand("presets", "list built-in experiments");

    std::string validate_path;
    auto* validate_cmd = app.add_subcommand("validate", "parse and check a JSON configuration");
    validate_cmd->add_option("--config", validate_path, "JSON problem configuration")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (presets_cmd->parsed()) {
            for (const auto& name : esmot::preset_names()) {
                const esmot::ProblemConfig cfg = esmot::preset(name);
                std::printf("%-18s gamma=%g K=%d sigma_bar_max=%g domain=[%g,%g]\n", name.c_str(),
                            cfg.gamma, cfg.K, cfg.sigma_bar.max_sigma(), cfg.x_lo, cfg.x_hi);
            }
            return 0;
        }

        if (validate_cmd->parsed()) {
            const esmot::ProblemConfig cfg = resolve_config("", validate_path);
            const esmot::ProblemSpec p = esmot::build_problem(cfg);
            std::printf("ok: name=%s N=%d n_x=%d dx=%s mass(rho0)=%s mass(rho1)=%s\n",
                        cfg.name.c_str(), p.time.N, p.space.n_x,
                        esmot::fmt_double(p.space.dx).c_str(), esmot::fmt_double(p.rho0.sum()).c_str(),
                        esmot::fmt_double(p.rho1.sum()).c_str());
            return 0;
        }

        esmot::RunConfig rc;
        rc.problem = resolve_config(preset_name, config_path);
        rc.N_list = n_text.empty() ? std::vector<int> { rc.problem.N } : parse_n_list(n_text);
        rc.out_dir = out_dir;
        rc.problem.solver.threads = threads;
        if (tol >= 0.0)
            rc.problem.solver.stop_tol = tol;
        if (max_cycles > 0)
            rc.problem.solver.max_cycles = max_cycles;

        const esmot::RunOutcome outcome = esmot::run(rc);
        for (const auto& row : outcome.runtime)
            std::printf("N=%d n_x=%d cycles=%d converged=%d solve_seconds=%s\n", row.N, row.n_x,
                        row.cycles, row.converged ? 1 : 0,
                        esmot::fmt_double(row.solve_seconds).c_str());
        if (outcome.exit_code != 0)
            std::fprintf(stderr, "warning: at least one run did not converge\n");
        return outcome.exit_code;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
