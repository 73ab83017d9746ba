// Acceptance suite: one pass/fail line per criterion, nonzero exit on failure.

#include "esmot/coupling.hpp"
#include "esmot/entropy.hpp"
#include "esmot/io.hpp"
#include "esmot/oracle.hpp"
#include "esmot/run.hpp"
#include "esmot/sinkhorn.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace esmot;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, bool pass, const std::string& label, const std::string& detail)
{
    std::printf("[%s] criterion %d: %s  (%s)\n", pass ? "PASS" : "FAIL", id, label.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass)
        ++g_failures;
}

std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

ProblemConfig acceptance_config(const std::string& name, int N)
{
    ProblemConfig cfg = preset(name);
    cfg.N = N;
    cfg.solver.stop_tol = 1e-6;
    cfg.solver.marginal_tol = 1e-6;
    cfg.solver.max_cycles = 4000;
    return cfg;
}

// Gaussian mass vector used by the tiny random instances.
ArrayXd gauss_mass(const SpaceGrid& g, double mean, double sd, double floor)
{
    ArrayXd m(g.n_x);
    for (int j = 0; j < g.n_x; ++j)
        m[j] = normal_pdf(g.x(j), mean, sd) + floor;
    return m / m.sum();
}

// Tiny instances with mild drift demands (close means, gamma <= ~300):
// heavily forced drift under a stiff penalty makes the coordinate ascent
// crawl without adding coverage.
ProblemSpec random_tiny(std::mt19937& rng)
{
    std::uniform_int_distribution<int> pick_nx(8, 15), pick_N(1, 3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n_x = pick_nx(rng);
    const int N = pick_N(rng);
    const double dx = 0.1;
    const double width = (n_x - 1) * dx;
    const double sigma = (0.25 + 0.2 * u(rng)) * width * std::sqrt(static_cast<double>(N));
    const double gamma = std::pow(10.0, 1.0 + 1.5 * u(rng));
    SpaceGrid sg(0.0, dx, n_x);
    ProblemSpec p;
    p.time = TimeGrid(N);
    p.space = sg;
    p.payoff = QuadraticPayoff(gamma);
    p.sigma_bar = ReferenceVolSchedule::make_constant(sigma);
    const double mean0 = 0.35 + 0.3 * u(rng);
    p.rho0 = gauss_mass(sg, width * mean0, width * (0.1 + 0.2 * u(rng)), 1e-3);
    p.rho1 = gauss_mass(sg, width * (mean0 + 0.16 * (u(rng) - 0.5)),
                        width * (0.1 + 0.2 * u(rng)), 1e-3);
    p.solver.stop_tol = 1e-12;
    p.solver.marginal_tol = 1e-9;
    p.solver.max_cycles = 30000;
    return p;
}

std::string slurp(const fs::path& path)
{
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string trace_without_walltime(const fs::path& path)
{
    std::istringstream in(slurp(path));
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        json j = json::parse(line);
        j.erase("wall_seconds");
        out << j.dump() << '\n';
    }
    return out.str();
}

} // namespace

int main()
{
    std::printf("running acceptance suite (this performs full solver sweeps; expect ~1h on one core)\n");

    // Shared converged sweep of the convex-order Gaussian experiment.
    const std::vector<int> sweep_N { 17, 33, 65, 129 };
    std::vector<SingleRunResult> sweep;
    for (int N : sweep_N) {
        std::printf("  solving gauss_convex N=%d ...\n", N);
        std::fflush(stdout);
        sweep.push_back(run_single(acceptance_config("gauss_convex", N)));
        std::printf("    cycles=%zu converged=%d solve=%.1fs\n",
                    sweep.back().solved.trace.cycles.size(),
                    sweep.back().solved.converged ? 1 : 0, sweep.back().solve_seconds);
        std::fflush(stdout);
    }

    // ------------------------------------------------------------------ 1
    {
        const SingleRunResult& r = sweep.back(); // N = 129
        const ProblemSpec& p = r.problem;
        long charged = 0, good = 0;
        for (int i = 0; i < p.time.N; ++i) {
            const double t = p.time.t(i);
            if (t < 0.1 || t > 0.9)
                continue;
            const double floor = 1e-6 * r.chain.marginals[i].maxCoeff();
            for (int j = 0; j < p.space.n_x; ++j) {
                if (r.chain.marginals[i][j] < floor)
                    continue;
                ++charged;
                if (std::abs(r.chain.vol(i, j) - 0.0075) / 0.0075 <= 0.05)
                    ++good;
            }
        }
        const double frac = charged > 0 ? static_cast<double>(good) / charged : 0.0;
        report(1, r.solved.converged && frac >= 0.95, "convex-order Gaussian volatility recovery",
               "|vol-0.0075|/0.0075 <= 5% at " + fmt(100.0 * frac) + "% of " + std::to_string(charged)
                   + " charged nodes, converged=" + std::to_string(r.solved.converged));
    }

    // ------------------------------------------------------------------ 2
    {
        bool monotone = true;
        bool slack_ok = true;
        std::string gaps;
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < sweep.size(); ++q) {
            const EntropyReport& er = sweep[q].entropy;
            const double agap = std::abs(er.gap);
            monotone = monotone && agap < prev;
            prev = agap;
            slack_ok = slack_ok && er.gap >= -1e-9;
            gaps += (q ? ", " : "") + std::string("N") + std::to_string(sweep_N[q]) + ": "
                + fmt(er.gap);
        }
        report(2, monotone && slack_ok, "entropy vs specific entropy convergence",
               "gaps [" + gaps + "]; |gap| monotone=" + std::to_string(monotone)
                   + " slack>=-1e-9=" + std::to_string(slack_ok));
    }

    // ------------------------------------------------------------------ 3
    {
        // Per-cycle algorithmic cost scaling at a fixed cycle budget and warm
        // cache (one discarded warm-up run).
        {
            ProblemConfig warm = acceptance_config("gauss_convex", 17);
            warm.solver.stop_tol = 0.0;
            warm.solver.max_cycles = 5;
            run_single(warm);
        }
        std::vector<RuntimeRow> rows;
        for (int N : { 17, 33, 65, 129, 257 }) {
            ProblemConfig cfg = acceptance_config("gauss_convex", N);
            cfg.solver.stop_tol = 0.0;
            cfg.solver.max_cycles = 60;
            const ProblemSpec p = build_problem(cfg);
            const auto t0 = std::chrono::steady_clock::now();
            const SolveResult res = solve(p);
            const double secs
                = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            // log-domain safety: all potentials and messages stay finite
            bool finite = res.potentials.phi00.isFinite().all()
                && res.potentials.phi0N.isFinite().all();
            for (const auto& v : res.potentials.phi1)
                finite = finite && v.isFinite().all();
            for (int i = 1; i <= p.time.N; ++i)
                finite = finite && !res.messages.logD[i].hasNaN();
            if (!finite)
                std::printf("    warning: non-finite state at N=%d\n", N);
            rows.push_back({ N, p.space.n_x, 60, false, secs });
            std::printf("    scaling N=%d solve=%.2fs\n", N, secs);
            std::fflush(stdout);
        }
        const ScalingFit fit = scaling_report(rows);
        report(3, fit.slope >= 1.3 && fit.slope <= 1.7, "runtime scaling O(N^1.5)",
               "log-log slope " + fmt(fit.slope) + " over N in {17..257} at 60 cycles, max residual "
                   + fmt(fit.residual));
    }

    // ------------------------------------------------------------------ 8
    // (run before 4 so its residuals join the converged-run pool)
    std::vector<std::pair<std::string, const SingleRunResult*>> converged_pool;
    for (std::size_t q = 0; q < sweep.size(); ++q)
        converged_pool.push_back({ "gauss_convex_N" + std::to_string(sweep_N[q]), &sweep[q] });

    SingleRunResult nonconvex;
    {
        std::printf("  solving nonconvex_order N=33 ...\n");
        std::fflush(stdout);
        nonconvex = run_single(acceptance_config("nonconvex_order", 33));
        converged_pool.push_back({ "nonconvex_order_N33", &nonconvex });
        const ProblemSpec& p = nonconvex.problem;
        const double abar = 0.15 * 0.15;
        double mass_l = 0.0, mass_r = 0.0, babs_l = 0.0, babs_r = 0.0, a_l = 0.0;
        for (int i = 0; i < p.time.N; ++i)
            for (int j = 0; j < p.space.n_x; ++j) {
                const double pj = nonconvex.chain.marginals[i][j];
                if (pj == 0.0)
                    continue;
                if (p.space.x(j) < 0.5) {
                    mass_l += pj;
                    babs_l += pj * std::abs(nonconvex.chain.drift(i, j));
                    a_l += pj * nonconvex.chain.second_moment(i, j);
                } else if (p.space.x(j) > 0.5) {
                    mass_r += pj;
                    babs_r += pj * std::abs(nonconvex.chain.drift(i, j));
                }
            }
        const double mean_bl = babs_l / mass_l;
        const double mean_br = babs_r / mass_r;
        const double mean_al = a_l / mass_l;
        const bool pass = nonconvex.solved.converged && mean_br >= 3.0 * mean_bl && mean_al > abar;
        report(8, pass, "non-convex-order drift/diffusion split",
               "converged=" + std::to_string(nonconvex.solved.converged) + " mean|b| right/left = "
                   + fmt(mean_br) + "/" + fmt(mean_bl) + " = " + fmt(mean_br / mean_bl)
                   + "x, mean a (left) = " + fmt(mean_al) + " vs abar = " + fmt(abar));
    }

    // ------------------------------------------------------------------ 4
    {
        bool ok = true;
        std::string detail;
        for (const auto& [name, r] : converged_pool) {
            const bool conv = r->solved.converged;
            const double r0 = r->chain.objective.residual_rho0;
            const double r1 = r->chain.objective.residual_rho1;
            const bool this_ok = conv && r0 <= 1e-8 && r1 <= 1e-6;
            ok = ok && this_ok;
            detail += name + ": conv=" + std::to_string(conv) + " r0=" + fmt(r0) + " r1=" + fmt(r1)
                + "; ";
        }
        report(4, ok, "hard marginal constraints on every converged run", detail);
    }

    // ------------------------------------------------------------------ 5
    {
        std::printf("  running primal-dual sandwich on 10 tiny instances ...\n");
        std::fflush(stdout);
        std::mt19937 rng(20240801);
        bool ok = true;
        double worst_spread = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const ProblemSpec p = random_tiny(rng);
            const SolveResult res = solve(p);
            const ChainSolution chain = extract_chain(res.potentials, res.messages, p, true);
            const double dual = dual_objective(res.potentials, p);
            const double primal = chain.objective.primal_value();
            const BruteForceResult oracle = brute_force_primal(p);
            const bool this_ok = res.converged && dual <= oracle.value + 1e-4
                && oracle.value <= primal + 1e-4 && std::abs(primal - dual) <= 1e-4
                && std::abs(oracle.value - primal) <= 1e-4 && std::abs(oracle.value - dual) <= 1e-4;
            worst_spread = std::max({ worst_spread, std::abs(primal - dual),
                                      std::abs(oracle.value - primal) });
            ok = ok && this_ok;
        }
        report(5, ok, "primal-dual sandwich against the dense oracle",
               "10 randomized tiny instances, worst spread " + fmt(worst_spread));
    }

    // ------------------------------------------------------------------ 6
    {
        std::printf("  monitoring per-update dual objective at N=33 ...\n");
        std::fflush(stdout);
        ProblemConfig cfg = acceptance_config("gauss_convex", 33);
        cfg.solver.monitor_updates = true;
        cfg.solver.stop_tol = 0.0;
        cfg.solver.max_cycles = 40;
        const ProblemSpec p = build_problem(cfg);
        const SolveResult res = solve(p);
        bool ok = true;
        double worst = 0.0;
        double prev = -std::numeric_limits<double>::infinity();
        long updates = 0;
        for (const auto& cyc : res.trace.cycles)
            for (double jv : cyc.update_objectives) {
                worst = std::max(worst, prev - jv);
                ok = ok && jv >= prev - 1e-9;
                prev = jv;
                ++updates;
            }
        report(6, ok, "dual objective nondecreasing per coordinate update",
               std::to_string(updates) + " updates over 40 cycles, worst decrease " + fmt(worst));
    }

    // ------------------------------------------------------------------ 7
    {
        bool ok = true;
        std::string detail;

        // S_I properties on a 1000-point log-spaced grid
        {
            bool props = true;
            const int n = 1000;
            for (int i = 0; i < n; ++i) {
                const double a = std::pow(10.0, -4.0 + 8.0 * i / (n - 1));
                const double s = sre_integrand(a, 1.0);
                props = props && s >= 0.0 && (a == 1.0 || s > 0.0);
                props = props
                    && std::abs(sre_integrand(7.0 * a, 7.0) - s) <= 1e-12 * (1.0 + s);
                const double d = 1e-4 * a;
                if (a > 2e-4)
                    props = props
                        && sre_integrand(a + d, 1.0) - 2.0 * s + sre_integrand(a - d, 1.0) > 0.0;
            }
            ok = ok && props;
            detail += std::string("S_I properties=") + (props ? "ok" : "violated");
        }

        // closed form vs discrete chain entropy, 20 random (mu, v) tables;
        // tolerance 2e-5 pinned from a fine-grid convergence study
        {
            const double sb = 0.02;
            auto [tg, sg] = build_grids(16, 64, sb, 0.0, 1.0);
            ProblemSpec p;
            p.time = tg;
            p.space = sg;
            p.payoff = QuadraticPayoff(1e6);
            p.sigma_bar = ReferenceVolSchedule::make_constant(sb);
            p.rho0 = gauss_mass(sg, 0.5, 0.05, 0.0);
            p.rho1 = gauss_mass(sg, 0.5, 0.07, 0.0);
            const double abar = sb * sb;
            const int W = band_halfwidth(sb, tg.h, sg.dx, sg.n_x);
            std::mt19937 rng(7);
            std::uniform_real_distribution<double> uv(0.75, 1.3), um(-1.0, 1.0);
            double worst = 0.0;
            for (int trial = 0; trial < 20; ++trial) {
                std::vector<BandedMatrix> ts;
                std::vector<ArrayXd> mus, vs;
                for (int i = 0; i < p.time.N; ++i) {
                    ArrayXd mu(sg.n_x), v(sg.n_x);
                    for (int j = 0; j < sg.n_x; ++j) {
                        mu[j] = 0.3 * (sb / std::sqrt(tg.h)) * um(rng);
                        v[j] = uv(rng) * abar;
                    }
                    BandedMatrix T(sg.n_x, W);
                    for (int j = 0; j < sg.n_x; ++j) {
                        double s = 0.0;
                        for (int k = T.k_lo(j); k <= T.k_hi(j); ++k) {
                            const double d = (k - j) * sg.dx;
                            const double w = std::exp(-(d - tg.h * mu[j]) * (d - tg.h * mu[j])
                                                      / (2.0 * tg.h * v[j]));
                            T.at(j, k) = w;
                            s += w;
                        }
                        for (int k = T.k_lo(j); k <= T.k_hi(j); ++k)
                            T.at(j, k) /= s;
                    }
                    ts.push_back(std::move(T));
                    mus.push_back(std::move(mu));
                    vs.push_back(std::move(v));
                }
                ChainSolution chain;
                chain.marginals = marginal_flow(ts, p.rho0);
                const MomentSurfaces m = chain_moments(ts, p);
                chain.drift = m.drift;
                chain.second_moment = m.second_moment;
                chain.vol = m.vol;
                chain.vol_corrected = m.vol_corrected;
                chain.kurtosis = chain_kurtosis(ts, p, 0.0);
                chain.transitions = std::move(ts);
                const double lhs = tg.h * chain_relative_entropy(chain, p);
                const double rhs = gaussian_chain_entropy(mus, vs, chain.marginals, p);
                worst = std::max(worst, std::abs(lhs - rhs));
            }
            ok = ok && worst <= 2e-5;
            detail += ", closed-form match worst |diff| = " + fmt(worst) + " (tol 2e-5)";
        }
        report(7, ok, "entropy identity suite", detail);
    }

    // ------------------------------------------------------------------ 9
    {
        std::printf("  determinism: three identical N=17 runs ...\n");
        std::fflush(stdout);
        const ProblemConfig cfg = acceptance_config("gauss_convex", 17);
        RunConfig rc;
        rc.problem = cfg;
        rc.N_list = { 17 };
        std::vector<fs::path> dirs;
        for (int rep = 0; rep < 3; ++rep) {
            const SingleRunResult r = run_single(cfg);
            const fs::path dir = fs::temp_directory_path() / ("esmot_acc9_" + std::to_string(rep));
            fs::remove_all(dir);
            rc.out_dir = dir.string();
            write_artifacts((dir / "run").string(), cfg, r, rc);
            dirs.push_back(dir / "run");
        }
        bool ok = true;
        for (int rep = 1; rep < 3; ++rep) {
            for (const char* f :
                 { "marginals.csv", "vol.csv", "vol_corrected.csv", "drift.csv", "kurtosis.csv" })
                ok = ok && slurp(dirs[0] / f) == slurp(dirs[static_cast<std::size_t>(rep)] / f);
            ok = ok
                && trace_without_walltime(dirs[0] / "trace.jsonl")
                == trace_without_walltime(dirs[static_cast<std::size_t>(rep)] / "trace.jsonl");
        }
        report(9, ok, "bitwise determinism across three identical runs",
               ok ? "all surfaces and traces identical" : "artifact mismatch");
    }

    std::printf("%d criterion(s) failed\n", g_failures);
    return g_failures;
}
