#pragma once

#include "esmot/coupling.hpp"
#include "esmot/io.hpp"
#include "esmot/problem.hpp"
#include "esmot/sinkhorn.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace esmot {

struct RunConfig {
    ProblemConfig problem;
    std::vector<int> N_list;
    std::string out_dir = "out";
    bool emit_surfaces = true;
    bool emit_trace = true;
    bool emit_entropy = true;
    // Transition matrices are retained only up to this many banded entries.
    std::int64_t keep_transitions_limit = 30'000'000;

    void validate() const
    {
        if (N_list.empty())
            throw std::invalid_argument("RunConfig: N list must be nonempty");
        for (int n : N_list)
            if (n < 2)
                throw std::invalid_argument("RunConfig: every N must be >= 2");
    }
};

struct RuntimeRow {
    int N = 0;
    int n_x = 0;
    int cycles = 0;
    bool converged = false;
    double solve_seconds = 0.0; // solve() only, excludes IO and extraction
};

struct RunOutcome {
    int exit_code = 0; // 0 ok, 1 solver non-convergence
    std::vector<RuntimeRow> runtime;
};

struct ScalingFit {
    double slope = 0.0;
    double residual = 0.0; // max abs log-residual of the fit
};

/// Least-squares slope of log(time) against log(N).
inline ScalingFit scaling_report(const std::vector<RuntimeRow>& rows)
{
    if (rows.size() < 3)
        throw std::invalid_argument("scaling_report: need at least 3 sweep points");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double n = static_cast<double>(rows.size());
    for (const auto& r : rows) {
        const double x = std::log(static_cast<double>(r.N));
        const double y = std::log(r.solve_seconds);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double denom = n * sxx - sx * sx;
    if (std::abs(denom) < 1e-12)
        throw std::invalid_argument("scaling_report: degenerate sweep (all N equal)");
    ScalingFit fit;
    fit.slope = (n * sxy - sx * sy) / denom;
    const double intercept = (sy - fit.slope * sx) / n;
    for (const auto& r : rows) {
        const double pred = intercept + fit.slope * std::log(static_cast<double>(r.N));
        fit.residual = std::max(fit.residual, std::abs(std::log(r.solve_seconds) - pred));
    }
    return fit;
}

struct SingleRunResult {
    ProblemSpec problem;
    SolveResult solved;
    ChainSolution chain;
    EntropyReport entropy;
    double solve_seconds = 0.0;
};

/// Solve one instance and reconstruct its chain (transitions retained only
/// when they fit the configured memory budget).
inline SingleRunResult run_single(const ProblemConfig& cfg, std::int64_t keep_limit = 30'000'000)
{
    SingleRunResult out;
    out.problem = build_problem(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    out.solved = solve(out.problem);
    out.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::int64_t entries = 0;
    for (int i = 0; i < out.problem.time.N; ++i)
        entries += static_cast<std::int64_t>(out.problem.space.n_x)
            * (2 * band_halfwidth(out.problem.sigma_bar.max_sigma_at(out.problem.time.t(i)),
                                  out.problem.time.h, out.problem.space.dx, out.problem.space.n_x)
               + 1);
    const bool keep = entries <= keep_limit;
    out.chain = extract_chain(out.solved.potentials, out.solved.messages, out.problem, keep);
    out.entropy = entropy_report_from_objective(out.chain, out.problem, 1e-9);
    return out;
}

namespace detail {

    inline std::string surface_csv(const ArrayXXdR& s, const ProblemSpec& p, int first_slice,
                                   const std::vector<ArrayXd>* mask, double floor)
    {
        std::ostringstream os;
        write_surface_csv(os, s, p, first_slice, mask, floor);
        return os.str();
    }

} // namespace detail

/// Write the artifact set of one solved instance into `dir`.
inline void write_artifacts(const std::string& dir, const ProblemConfig& cfg,
                            const SingleRunResult& r, const RunConfig& rc)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const ProblemSpec& p = r.problem;
    const double floor = p.solver.mass_floor_rel;

    if (rc.emit_surfaces) {
        std::ostringstream ms;
        write_marginals_csv(ms, r.chain.marginals, p);
        write_file(dir + "/marginals.csv", ms.str());
        write_file(dir + "/vol.csv",
                   detail::surface_csv(r.chain.vol, p, 0, &r.chain.marginals, floor));
        write_file(dir + "/vol_corrected.csv",
                   detail::surface_csv(r.chain.vol_corrected, p, 0, &r.chain.marginals, floor));
        write_file(dir + "/drift.csv",
                   detail::surface_csv(r.chain.drift, p, 0, &r.chain.marginals, floor));
        write_file(dir + "/kurtosis.csv",
                   detail::surface_csv(r.chain.kurtosis, p, 0, &r.chain.marginals, floor));
    }
    if (rc.emit_trace) {
        std::ostringstream ts;
        for (const auto& c : r.solved.trace.cycles)
            ts << to_json(c).dump() << '\n';
        write_file(dir + "/trace.jsonl", ts.str());
    }

    json summary;
    summary["schema_version"] = k_schema_version;
    summary["config"] = to_json(cfg);
    summary["grid"] = json::object({ { "N", p.time.N }, { "h", p.time.h }, { "dx", p.space.dx },
                                     { "n_x", p.space.n_x }, { "x_lo", p.space.x_lo },
                                     { "x_hi", p.space.x_hi() } });
    summary["converged"] = r.solved.converged;
    summary["cycles"] = r.solved.trace.cycles.size();
    summary["objective"] = to_json(r.chain.objective);
    summary["wall_time_seconds"] = r.solve_seconds;
    if (rc.emit_entropy)
        summary["entropy_report"] = to_json(r.entropy);
    write_file(dir + "/summary.json", summary.dump(2) + "\n");
}

/// Execute a (possibly multi-N) run: solve, write artifacts, and emit the
/// runtime sweep with its fitted scaling exponent when enough points exist.
inline RunOutcome run(const RunConfig& rc)
{
    rc.validate();
    namespace fs = std::filesystem;
    fs::create_directories(rc.out_dir);
    RunOutcome out;

    for (int N : rc.N_list) {
        ProblemConfig cfg = rc.problem;
        cfg.N = N;
        SingleRunResult r = run_single(cfg, rc.keep_transitions_limit);
        const std::string dir = rc.out_dir + "/" + cfg.name + "_N" + std::to_string(N);
        write_artifacts(dir, cfg, r, rc);
        out.runtime.push_back({ N, r.problem.space.n_x,
                                static_cast<int>(r.solved.trace.cycles.size()),
                                r.solved.converged, r.solve_seconds });
        if (!r.solved.converged)
            out.exit_code = 1;
    }

    std::ostringstream csv;
    csv << "N,n_x,cycles,converged,solve_seconds\n";
    for (const auto& row : out.runtime)
        csv << row.N << ',' << row.n_x << ',' << row.cycles << ',' << (row.converged ? 1 : 0)
            << ',' << fmt_double(row.solve_seconds) << '\n';
    write_file(rc.out_dir + "/runtime.csv", csv.str());

    int distinct = 0;
    {
        std::vector<int> seen;
        for (const auto& row : out.runtime)
            if (std::find(seen.begin(), seen.end(), row.N) == seen.end())
                seen.push_back(row.N);
        distinct = static_cast<int>(seen.size());
    }
    if (distinct >= 3) {
        const ScalingFit fit = scaling_report(out.runtime);
        json js { { "schema_version", k_schema_version },
                  { "slope", fit.slope },
                  { "max_log_residual", fit.residual } };
        write_file(rc.out_dir + "/scaling.json", js.dump(2) + "\n");
    }
    return out;
}

} // namespace esmot
