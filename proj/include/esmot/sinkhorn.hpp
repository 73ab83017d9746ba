#pragma once

#include "esmot/errors.hpp"
#include "esmot/numerics.hpp"
#include "esmot/payoff.hpp"
#include "esmot/problem.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

namespace esmot {

/// Dual potentials.  phi00 and phi0N enter the coupling as exp(phi/h); each
/// phi1_i tilts step i as exp((x_{i+1}-x_i) phi1_i(x_i) / h^2).  Zero-mass
/// marginal nodes carry the finite sentinel h*k_log_zero instead of -inf.
struct Potentials {
    ArrayXd phi00;
    std::vector<ArrayXd> phi1; // slices 0..N-1
    ArrayXd phi0N;

    static Potentials zero(const ProblemSpec& p)
    {
        Potentials out;
        out.phi00 = ArrayXd::Zero(p.space.n_x);
        out.phi1.assign(p.time.N, ArrayXd::Zero(p.space.n_x));
        out.phi0N = ArrayXd::Zero(p.space.n_x);
        return out;
    }
};

/// Log-domain upward/downward messages, indexed by slice.
///   logD[N] = phi0N/h; logD[i] for i = N-1..1 by the downward recursion
///   (each carrying its slice's exp(F*(-phi1_i/h)) factor); logD[0] unused.
///   logU[0] = phi00/h; logU[i] for 1 <= i <= N-1 by the upward recursion;
///   logU[N] is the final propagation (no payoff factor exists at slice N),
///   so the slice-N coupling marginal is exp(logU[N] + phi0N/h).
struct Messages {
    std::vector<ArrayXd> logU;
    std::vector<ArrayXd> logD;
};

struct CycleStats {
    int cycle = 0;
    double rel_linf_change = 0.0;
    double dual_objective = 0.0;
    double residual_rho0 = 0.0; // L1 gap of the pre-update slice-0 marginal
    double residual_rho1 = 0.0; // L1 gap of the pre-update slice-N marginal
    double wall_seconds = 0.0;
    std::vector<double> update_objectives; // monitor mode: one value per coordinate update
};

struct SolveTrace {
    std::vector<CycleStats> cycles;
};

struct SolveResult {
    Potentials potentials;
    Messages messages;
    SolveTrace trace;
    bool converged = false;
};

struct TiltMoments {
    double logm0 = k_log_zero; // log of the tilted band mass against the kernel row
    double mean = 0.0;         // tilted conditional displacement mean / h (the b-moment)
    double var = 0.0;          // tilted displacement variance / h (abar-scale)
};

namespace detail {

    struct Workspace {
        ArrayXd arg;   // band scratch
        ArrayXd wexp;  // band scratch
        ArrayXd ebase; // prepared untilted weights for the node solves
        explicit Workspace(int max_bw)
            : arg(max_bw)
            , wexp(max_bw)
            , ebase(max_bw)
        {
        }
    };

    inline int max_band_width(const KernelCache& kc)
    {
        int bw = 1;
        for (const auto& s : kc.slices)
            bw = std::max(bw, 2 * s.halfwidth + 1);
        return bw;
    }

    // Shifted tilted band sums at source node j with tilt slope c = phi/h^2:
    // arg_m = logG(m) + logD_next(j+m) + c*m*dx over the clamped band.
    struct BandSums {
        double shift = k_log_zero;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0; // sum of e^(arg-shift) * (m dx)^p
    };

    struct BandRange {
        int lo, hi, len, off;
    };

    inline BandRange band_range(int n_x, int j, int W)
    {
        BandRange r;
        r.lo = std::max(0, j - W);
        r.hi = std::min(n_x - 1, j + W);
        r.len = r.hi - r.lo + 1;
        r.off = r.lo - (j - W);
        return r;
    }

    // arg into ws.arg, returning its max (single fused pass).
    inline double fill_band_arg(const SliceKernel& sk, const BandRange& r, int j, double slope,
                                const ArrayXd& logD_next, Workspace& ws)
    {
        const double* prof = sk.space_const ? sk.log_profile.data() + r.off
                                            : sk.log_profile_x.data() + j * sk.log_profile_x.cols() + r.off;
        const double* disp = sk.disp.data() + r.off;
        const double* logd = logD_next.data() + r.lo;
        double* arg = ws.arg.data();
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < r.len; ++c) {
            const double v = prof[c] + logd[c] + slope * disp[c];
            arg[c] = v;
            mx = v > mx ? v : mx;
        }
        return mx;
    }

    // log of the tilted band mass (no moments): two passes over the band.
    inline double band_lse(const SliceKernel& sk, int n_x, int j, double slope,
                           const ArrayXd& logD_next, Workspace& ws)
    {
        const BandRange r = band_range(n_x, j, sk.halfwidth);
        const double shift = fill_band_arg(sk, r, j, slope, logD_next, ws);
        if (is_log_zero(shift) || !std::isfinite(shift))
            return k_log_zero;
        const double s0 = (ws.arg.head(r.len) - shift).exp().sum();
        return shift + std::log(s0);
    }

    inline BandSums band_sums(const SliceKernel& sk, int n_x, int j, double slope,
                              const ArrayXd& logD_next, Workspace& ws)
    {
        const BandRange r = band_range(n_x, j, sk.halfwidth);
        BandSums out;
        out.shift = fill_band_arg(sk, r, j, slope, logD_next, ws);
        if (is_log_zero(out.shift) || !std::isfinite(out.shift)) {
            out.shift = k_log_zero;
            return out;
        }
        auto w = ws.wexp.head(r.len);
        w = (ws.arg.head(r.len) - out.shift).exp();
        const double* wd = ws.wexp.data();
        const double* disp = sk.disp.data() + r.off;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < r.len; ++c) {
            const double wv = wd[c];
            const double d = disp[c];
            s0 += wv;
            s1 += wv * d;
            s2 += wv * d * d;
        }
        out.s0 = s0;
        out.s1 = s1;
        out.s2 = s2;
        return out;
    }

    inline TiltMoments moments_from_sums(const BandSums& bs, double rownorm, double h)
    {
        if (bs.s0 <= 0.0 || is_log_zero(bs.shift))
            throw MessageCollapseError("tilted band carries no mass");
        TiltMoments tm;
        tm.logm0 = bs.shift + std::log(bs.s0) - rownorm;
        const double m1 = bs.s1 / bs.s0;
        const double m2 = bs.s2 / bs.s0;
        tm.mean = m1 / h;
        tm.var = (m2 - m1 * m1) / h;
        return tm;
    }

} // namespace detail

/// Moments of the reference row at (slice i, node j) tilted by
/// exp((x_k - x_j) phi / h^2) and weighted by exp(logD_next).
inline TiltMoments tilt_moments(int i, int j, double phi, const ArrayXd& logD_next,
                                const ProblemSpec& problem)
{
    const SliceKernel sk = build_slice_kernel(problem, i);
    detail::Workspace ws(2 * sk.halfwidth + 1);
    const auto bs = detail::band_sums(sk, problem.space.n_x, j, phi / (problem.time.h * problem.time.h),
                                      logD_next, ws);
    return detail::moments_from_sums(bs, sk.log_rownorm[j], problem.time.h);
}

namespace detail {

    inline ArrayXd fstar_array(const ArrayXd& phi1_i, const ProblemSpec& p)
    {
        // F*(-phi/h) = phi^2 / (4 gamma h^2); even in phi.
        return (phi1_i / p.time.h).square() / (4.0 * p.payoff.gamma);
    }

    // Downward recursion logD[N..1].  logD[i] = F*(-phi1_i/h) + log integral of
    // the tilted kernel against D_{i+1}.
    inline void compute_logD_impl(const Potentials& phi, const ProblemSpec& p,
                                  const KernelCache& kc, Messages& msg)
    {
        const int N = p.time.N;
        const int n_x = p.space.n_x;
        const double h = p.time.h;
        msg.logD.assign(N + 1, ArrayXd());
        msg.logD[N] = phi.phi0N / h;
        const int bw = max_band_width(kc);
        for (int i = N - 1; i >= 1; --i) {
            const SliceKernel& sk = kc.slices[i];
            const ArrayXd& next = msg.logD[i + 1];
            ArrayXd cur(n_x);
            const ArrayXd fs = fstar_array(phi.phi1[i], p);
            parallel_for(n_x, p.solver.threads, [&](std::int64_t j0) {
                thread_local Workspace ws(1);
                if (ws.arg.size() < bw)
                    ws = Workspace(bw);
                const int j = static_cast<int>(j0);
                const double slope = phi.phi1[i][j] / (h * h);
                const double lse = band_lse(sk, n_x, j, slope, next, ws);
                cur[j] = is_log_zero(lse) ? k_log_zero : fs[j] + lse - sk.log_rownorm[j];
            });
            if ((cur <= 0.5 * k_log_zero).all())
                throw MessageCollapseError("downward message collapsed at slice " + std::to_string(i));
            msg.logD[i] = std::move(cur);
        }
        msg.logD[0] = ArrayXd();
    }

    // One upward propagation step: from logU at slice i to the integral at
    // slice i+1 (before the slice-(i+1) payoff factor).  Uses kernel columns.
    inline ArrayXd propagate_up(const ArrayXd& logU_i, const ArrayXd& phi1_i, const SliceKernel& sk,
                                const ProblemSpec& p)
    {
        const int n_x = p.space.n_x;
        const double h = p.time.h;
        const int W = sk.halfwidth;
        const int bw = 2 * W + 1;
        ArrayXd out(n_x);
        const ArrayXd A = logU_i - sk.log_rownorm; // per-source combined weight
        const ArrayXd B = phi1_i / (h * h);        // per-source tilt slope
        parallel_for(n_x, p.solver.threads, [&](std::int64_t k0) {
            thread_local Workspace ws(1);
            if (ws.arg.size() < bw)
                ws = Workspace(bw);
            const int k = static_cast<int>(k0);
            const BandRange r = band_range(n_x, k, W);
            double* arg = ws.arg.data();
            double shift = -std::numeric_limits<double>::infinity();
            if (sk.space_const) {
                // band offset m = j - k; the Gaussian profile is even in m
                const double* a = A.data() + r.lo;
                const double* prof = sk.log_profile.data() + r.off;
                const double* disp = sk.disp.data() + r.off;
                const double* b = B.data() + r.lo;
                for (int c = 0; c < r.len; ++c) {
                    const double v = a[c] + prof[c] - disp[c] * b[c];
                    arg[c] = v;
                    shift = v > shift ? v : shift;
                }
            } else {
                for (int m = r.lo - k; m <= r.hi - k; ++m) {
                    const int j = k + m;
                    const double v = A[j] + sk.log_profile_x(j, -m + W) - m * p.space.dx * B[j];
                    arg[m - (r.lo - k)] = v;
                    shift = v > shift ? v : shift;
                }
            }
            if (is_log_zero(shift) || !std::isfinite(shift)) {
                out[k] = k_log_zero;
                return;
            }
            out[k] = shift + std::log((ws.arg.head(r.len) - shift).exp().sum());
        });
        return out;
    }

    inline void compute_logU_impl(const Potentials& phi, const ProblemSpec& p,
                                  const KernelCache& kc, Messages& msg)
    {
        const int N = p.time.N;
        msg.logU.assign(N + 1, ArrayXd());
        msg.logU[0] = phi.phi00 / p.time.h;
        for (int i = 0; i < N; ++i) {
            ArrayXd up = propagate_up(msg.logU[i], phi.phi1[i], kc.slices[i], p);
            if (i + 1 <= N - 1)
                up += fstar_array(phi.phi1[i + 1], p);
            if ((up <= 0.5 * k_log_zero).all())
                throw MessageCollapseError("upward message collapsed at slice " + std::to_string(i + 1));
            msg.logU[i + 1] = std::move(up);
        }
    }

} // namespace detail

/// Downward messages from the current potentials.
inline Messages compute_logD(const Potentials& phi, const ProblemSpec& p)
{
    const KernelCache kc = build_kernel_cache(p);
    Messages msg;
    detail::compute_logD_impl(phi, p, kc, msg);
    return msg;
}

/// Upward messages from the current potentials.
inline Messages compute_logU(const Potentials& phi, const ProblemSpec& p)
{
    const KernelCache kc = build_kernel_cache(p);
    Messages msg;
    detail::compute_logU_impl(phi, p, kc, msg);
    return msg;
}

namespace detail {

    // Dual objective
    //   J = E_rho0[phi00 - h log rho0] - h E_rho0[F*(-phi1_0/h)] + E_rho1[phi0N] - h (Z - 1)
    // with Z the total coupling mass computed through the upward recursion.
    // The -h log rho0 term converts the potentials (which absorb the starting
    // density of the reference chain) back to the normalization in which the
    // dual optimum equals the primal cost.
    inline double dual_objective_terms(const Potentials& phi, const ProblemSpec& p,
                                       const ArrayXd& logU_N)
    {
        const double h = p.time.h;
        double j_val = 0.0;
        for (int j = 0; j < p.space.n_x; ++j) {
            if (p.rho0[j] > 0.0)
                j_val += p.rho0[j]
                    * (phi.phi00[j] - h * std::log(p.rho0[j])
                       - h * p.payoff.conjugate(-phi.phi1[0][j] / h));
            if (p.rho1[j] > 0.0)
                j_val += p.rho1[j] * phi.phi0N[j];
        }
        const double logZ = log_sum_exp(logU_N + phi.phi0N / h);
        j_val -= h * std::expm1(logZ);
        return j_val;
    }

    inline double dual_objective_impl(const Potentials& phi, const ProblemSpec& p,
                                      const KernelCache& kc)
    {
        Messages msg;
        compute_logU_impl(phi, p, kc, msg);
        return dual_objective_terms(phi, p, msg.logU[p.time.N]);
    }

} // namespace detail

inline double dual_objective(const Potentials& phi, const ProblemSpec& p)
{
    return detail::dual_objective_impl(phi, p, build_kernel_cache(p));
}

namespace detail {

    struct BoundaryUpdate {
        ArrayXd new_phi;
        ArrayXd logm; // per-node log band mass (the matching denominator)
        double residual = 0.0;
    };

    // phi00 <- h (log rho0 - log m0), where m0 is the tilted band mass against
    // D_1 at the pre-update phi1_0.  Also reports the pre-update slice-0
    // marginal residual.  Zero-mass nodes and nodes the messages cannot reach
    // get the finite sentinel; unreachable marginal mass stays in the residual.
    inline BoundaryUpdate update_phi00_impl(const Potentials& phi, const Messages& msg,
                                            const ProblemSpec& p, const KernelCache& kc)
    {
        const int n_x = p.space.n_x;
        const double h = p.time.h;
        const SliceKernel& sk = kc.slices[0];
        const int bw = max_band_width(kc);
        BoundaryUpdate out;
        out.new_phi.resize(n_x);
        out.logm.resize(n_x);
        parallel_for(n_x, p.solver.threads, [&](std::int64_t j0) {
            thread_local Workspace ws(1);
            if (ws.arg.size() < bw)
                ws = Workspace(bw);
            const int j = static_cast<int>(j0);
            const double slope = phi.phi1[0][j] / (h * h);
            const auto bs = band_sums(sk, n_x, j, slope, msg.logD[1], ws);
            out.logm[j] = bs.s0 > 0.0 && !is_log_zero(bs.shift)
                ? bs.shift + std::log(bs.s0) - sk.log_rownorm[j]
                : k_log_zero;
            out.new_phi[j] = p.rho0[j] > 0.0 && !is_log_zero(out.logm[j])
                ? h * (std::log(p.rho0[j]) - out.logm[j])
                : h * k_log_zero;
        });
        for (int j = 0; j < n_x; ++j)
            out.residual += std::abs(std::exp(phi.phi00[j] / h + out.logm[j]) - p.rho0[j]);
        return out;
    }

    // phi0N <- h (log rho1 - logU[N]); reports the pre-update slice-N residual.
    inline BoundaryUpdate update_phi0N_impl(const Potentials& phi, const Messages& msg,
                                            const ProblemSpec& p)
    {
        const int n_x = p.space.n_x;
        const double h = p.time.h;
        BoundaryUpdate out;
        out.new_phi.resize(n_x);
        out.logm = msg.logU[p.time.N];
        for (int j = 0; j < n_x; ++j) {
            out.residual += std::abs(std::exp(phi.phi0N[j] / h + out.logm[j]) - p.rho1[j]);
            out.new_phi[j] = p.rho1[j] > 0.0 && !is_log_zero(out.logm[j])
                ? h * (std::log(p.rho1[j]) - out.logm[j])
                : h * k_log_zero;
        }
        return out;
    }

    // Stationarity residual of the per-node drift-potential solve.  The
    // coordinate maximizer solves g(phi) = 0 with
    //   g(phi) = dF*(-phi/h) - mean_tilt(phi)                (interior slices)
    //   g(phi) = dF*(-phi/h) - e^{logc} m1(phi) / h          (slice 0)
    // where slice 0 keeps the matching denominator fixed at the pre-update
    // band mass (logc = -logm0_fix); both versions are strictly decreasing.
    //
    // The untilted band weights are prepared once per node; each evaluation
    // then applies the tilt as a running geometric factor (one scalar exp),
    // falling back to the straight log-sum-exp path for extreme tilts.
    struct NodeSolve {
        const SliceKernel& sk;
        const ArrayXd& logD_next;
        const ProblemSpec& p;
        Workspace& ws;
        int j = 0;
        bool fixed_denominator = false;
        double log_denom = 0.0; // logm0_fix + rownorm (shift-comparable scale)

        BandRange r {};
        double base_shift = k_log_zero;
        double abs_disp_max = 0.0;
        bool collapsed = false;

        void prepare()
        {
            r = band_range(p.space.n_x, j, sk.halfwidth);
            base_shift = fill_band_arg(sk, r, j, 0.0, logD_next, ws);
            if (is_log_zero(base_shift) || !std::isfinite(base_shift)) {
                collapsed = true;
                return;
            }
            ws.ebase.head(r.len) = (ws.arg.head(r.len) - base_shift).exp();
            abs_disp_max = std::max(std::abs(sk.disp[r.off]), std::abs(sk.disp[r.off + r.len - 1]));
        }

        BandSums tilted_sums(double slope) const
        {
            if (std::abs(slope) * abs_disp_max > 300.0 || !std::isfinite(slope))
                return band_sums(sk, p.space.n_x, j, slope, logD_next, ws); // stable slow path
            BandSums out;
            out.shift = base_shift;
            const double* e = ws.ebase.data();
            const double* disp = sk.disp.data() + r.off;
            const double ratio = std::exp(slope * p.space.dx);
            double rm = std::exp(slope * disp[0]);
            double s0 = 0.0, s1 = 0.0, s2 = 0.0;
            for (int c = 0; c < r.len; ++c) {
                const double term = e[c] * rm;
                const double d = disp[c];
                s0 += term;
                s1 += term * d;
                s2 += term * d * d;
                rm *= ratio;
            }
            out.s0 = s0;
            out.s1 = s1;
            out.s2 = s2;
            return out;
        }

        // Returns g and g' at phi.
        std::pair<double, double> eval(double phi) const
        {
            const double h = p.time.h;
            const double gamma = p.payoff.gamma;
            const auto bs = tilted_sums(phi / (h * h));
            if (bs.s0 <= 0.0 || is_log_zero(bs.shift))
                throw MessageCollapseError("drift solve: band carries no mass");
            const double g_pay = -phi / (2.0 * gamma * h); // dF*(-phi/h)
            if (!fixed_denominator) {
                const double m1 = bs.s1 / bs.s0;
                const double m2 = bs.s2 / bs.s0;
                const double g = g_pay - m1 / h;
                const double gp = -1.0 / (2.0 * gamma * h) - (m2 - m1 * m1) / (h * h * h);
                return { g, gp };
            }
            // slice 0: scale = exp(shift - log_denom), term = scale * s1 / h
            const double scale = std::exp(std::min(700.0, bs.shift - log_denom));
            const double g = g_pay - scale * bs.s1 / h;
            const double gp = -1.0 / (2.0 * gamma * h) - scale * bs.s2 / (h * h * h);
            return { g, gp };
        }
    };

    // Safeguarded Newton: g is strictly decreasing, so evaluated signs build a
    // bracket (g(lo) > 0 > g(hi)) as a side effect.  Newton steps are taken
    // whenever they stay inside the known region; otherwise the bracket is
    // grown geometrically from +-h^2*bracket_guess (or bisected once closed).
    inline double solve_node(const NodeSolve& f, double guess, const SolverParams& sp, int slice)
    {
        double lo = -std::numeric_limits<double>::infinity();
        double hi = std::numeric_limits<double>::infinity();
        const double h2 = f.p.time.h * f.p.time.h;
        double grow_step = std::max(h2 * sp.bracket_guess, 1e-12 * std::max(1.0, std::abs(guess)));
        int expansions = 0;

        double x = guess;
        auto [g, gp] = f.eval(x);
        for (int it = 0; it < sp.newton_max_iter; ++it) {
            if (std::abs(g) <= sp.newton_tol)
                return x;
            (g > 0.0 ? lo : hi) = x;
            double xn = gp < 0.0 ? x - g / gp : std::numeric_limits<double>::quiet_NaN();
            const bool bracketed = std::isfinite(lo) && std::isfinite(hi);
            if (!std::isfinite(xn) || xn <= lo || xn >= hi) {
                if (bracketed) {
                    xn = 0.5 * (lo + hi);
                } else {
                    if (++expansions > sp.bracket_expansions)
                        throw SliceSolveError(slice, f.j, "bracket not found within expansion limit");
                    xn = x + (g > 0.0 ? grow_step : -grow_step);
                    grow_step *= 2.0;
                }
            }
            if (xn == x)
                return x; // interval exhausted at machine precision
            x = xn;
            std::tie(g, gp) = f.eval(x);
        }
        // Pure bisection once Newton's budget is spent.
        while (true) {
            if (std::abs(g) <= sp.newton_tol)
                return x;
            (g > 0.0 ? lo : hi) = x;
            if (!std::isfinite(lo) || !std::isfinite(hi)) {
                if (++expansions > sp.bracket_expansions)
                    throw SliceSolveError(slice, f.j, "bracket not found within expansion limit");
                x += g > 0.0 ? grow_step : -grow_step;
                grow_step *= 2.0;
            } else {
                const double mid = 0.5 * (lo + hi);
                if (mid <= lo || mid >= hi)
                    return mid;
                x = mid;
            }
            g = f.eval(x).first;
        }
    }

    // Per-node drift-potential solves for one slice.  logm0_fix is the
    // slice-0 matching denominator (empty for interior slices).
    inline ArrayXd update_phi1_slice_impl(int i, const Potentials& phi, const Messages& msg,
                                          const ProblemSpec& p, const KernelCache& kc,
                                          const ArrayXd* logm0_fix)
    {
        const int n_x = p.space.n_x;
        const SliceKernel& sk = kc.slices[i];
        const int bw = max_band_width(kc);
        ArrayXd out(n_x);
        parallel_for(n_x, p.solver.threads, [&](std::int64_t j0) {
            thread_local Workspace ws(1);
            if (ws.arg.size() < bw)
                ws = Workspace(bw);
            const int j = static_cast<int>(j0);
            if (logm0_fix != nullptr && (p.rho0[j] == 0.0 || is_log_zero((*logm0_fix)[j]))) {
                out[j] = phi.phi1[i][j]; // unweighted node, objective is flat here
                return;
            }
            NodeSolve f { sk, msg.logD[i + 1], p, ws, j, logm0_fix != nullptr,
                          logm0_fix != nullptr ? (*logm0_fix)[j] + sk.log_rownorm[j] : 0.0 };
            f.prepare();
            if (f.collapsed) {
                out[j] = phi.phi1[i][j]; // downstream carries no mass: flat coordinate
                return;
            }
            out[j] = solve_node(f, phi.phi1[i][j], p.solver, i);
        });
        return out;
    }

} // namespace detail

/// Explicit boundary update phi00 = h (log rho0 - log m0) given current logD.
inline ArrayXd update_phi00(const Potentials& phi, const Messages& msg, const ProblemSpec& p)
{
    return detail::update_phi00_impl(phi, msg, p, build_kernel_cache(p)).new_phi;
}

/// Explicit boundary update phi0N = h (log rho1 - logU_N) given current logU.
inline ArrayXd update_phi0N(const Potentials& phi, const Messages& msg, const ProblemSpec& p)
{
    return detail::update_phi0N_impl(phi, msg, p).new_phi;
}

/// Implicit per-node solve for the slice-i drift potential.  For i = 0 the
/// phi00 update must have run first (its matching mass is the fixed
/// denominator of the slice-0 stationarity equation).
inline ArrayXd update_phi1_slice(int i, const Potentials& phi, const Messages& msg,
                                 const ProblemSpec& p)
{
    const KernelCache kc = build_kernel_cache(p);
    if (i == 0) {
        // Reconstruct the fixed denominator from phi00: logm0 = log rho0 - phi00/h.
        ArrayXd logm0(p.space.n_x);
        for (int j = 0; j < p.space.n_x; ++j)
            logm0[j] = p.rho0[j] > 0.0 ? std::log(p.rho0[j]) - phi.phi00[j] / p.time.h : 0.0;
        return detail::update_phi1_slice_impl(0, phi, msg, p, kc, &logm0);
    }
    return detail::update_phi1_slice_impl(i, phi, msg, p, kc, nullptr);
}

namespace detail {

    // Sentinel-valued boundary potentials (zero-mass or unreachable nodes)
    // never move and would swamp the norms; exclude them.
    inline bool is_sentinel_phi(double v, double h) { return v <= 0.25 * k_log_zero * h; }

    // Node masks for the convergence metric.  Potentials at nodes whose
    // coupling mass is below 1e-30 of the slice maximum cannot influence any
    // output at double precision, yet their values keep chasing message
    // tails; the relative L-inf change is measured over the effectively
    // charged nodes only.
    struct NormMask {
        std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> phi1; // per slice
        Eigen::Array<bool, Eigen::Dynamic, 1> rho0_charged;
        Eigen::Array<bool, Eigen::Dynamic, 1> rho1_charged;
    };

    inline NormMask build_norm_mask(const Messages& msg, const ProblemSpec& p)
    {
        constexpr double k_log_window = 35.0; // mass within ~1e-15 of the slice max
        const int N = p.time.N;
        const int n_x = p.space.n_x;
        NormMask mask;
        mask.phi1.resize(N);

        const auto charged = [&](const ArrayXd& rho) {
            const double floor = std::exp(-k_log_window) * rho.maxCoeff();
            return (rho > floor).eval();
        };
        mask.rho0_charged = charged(p.rho0);
        mask.rho1_charged = charged(p.rho1);
        mask.phi1[0] = mask.rho0_charged;

        for (int i = 1; i < N; ++i) {
            // log coupling mass at slice i, up to a common constant
            ArrayXd logm = msg.logU[i] + msg.logD[i];
            const double mx = logm.maxCoeff();
            mask.phi1[i] = (logm > mx - k_log_window).eval();
        }
        return mask;
    }

    inline double masked_linf(const Potentials& a, const ProblemSpec& p, const NormMask& mask)
    {
        double m = 0.0;
        for (int j = 0; j < p.space.n_x; ++j) {
            if (mask.rho0_charged[j] && !is_sentinel_phi(a.phi00[j], p.time.h))
                m = std::max(m, std::abs(a.phi00[j]));
            if (mask.rho1_charged[j] && !is_sentinel_phi(a.phi0N[j], p.time.h))
                m = std::max(m, std::abs(a.phi0N[j]));
        }
        for (std::size_t i = 0; i < a.phi1.size(); ++i)
            for (int j = 0; j < p.space.n_x; ++j)
                if (mask.phi1[i][j])
                    m = std::max(m, std::abs(a.phi1[i][j]));
        return m;
    }

    inline double masked_linf_diff(const Potentials& a, const Potentials& b, const ProblemSpec& p,
                                   const NormMask& mask)
    {
        double m = 0.0;
        for (int j = 0; j < p.space.n_x; ++j) {
            if (mask.rho0_charged[j] && !is_sentinel_phi(a.phi00[j], p.time.h)
                && !is_sentinel_phi(b.phi00[j], p.time.h))
                m = std::max(m, std::abs(a.phi00[j] - b.phi00[j]));
            if (mask.rho1_charged[j] && !is_sentinel_phi(a.phi0N[j], p.time.h)
                && !is_sentinel_phi(b.phi0N[j], p.time.h))
                m = std::max(m, std::abs(a.phi0N[j] - b.phi0N[j]));
        }
        for (std::size_t i = 0; i < a.phi1.size(); ++i)
            for (int j = 0; j < p.space.n_x; ++j)
                if (mask.phi1[i][j])
                    m = std::max(m, std::abs(a.phi1[i][j] - b.phi1[i][j]));
        return m;
    }

} // namespace detail

/// One Gauss-Seidel cycle: phi00, then phi1_0 .. phi1_{N-1}, then phi0N.
/// logD is computed once at cycle start (slice i only reads D_{i+1}, which
/// depends on potentials the sweep has not touched yet); the upward messages
/// are rebuilt from the freshly updated potentials for the phi0N update.
inline CycleStats sinkhorn_cycle(Potentials& phi, Messages& msg, const ProblemSpec& p,
                                 const KernelCache& kc)
{
    const auto t0 = std::chrono::steady_clock::now();
    const Potentials before = phi;
    CycleStats st;
    const bool monitor = p.solver.monitor_updates;
    const auto record = [&] {
        if (monitor)
            st.update_objectives.push_back(detail::dual_objective_impl(phi, p, kc));
    };

    detail::compute_logD_impl(phi, p, kc, msg);

    auto b0 = detail::update_phi00_impl(phi, msg, p, kc);
    phi.phi00 = std::move(b0.new_phi);
    st.residual_rho0 = b0.residual;
    record();

    for (int i = 0; i < p.time.N; ++i) {
        phi.phi1[i] = detail::update_phi1_slice_impl(i, phi, msg, p, kc,
                                                     i == 0 ? &b0.logm : nullptr);
        record();
    }

    detail::compute_logU_impl(phi, p, kc, msg);
    auto bN = detail::update_phi0N_impl(phi, msg, p);
    phi.phi0N = std::move(bN.new_phi);
    st.residual_rho1 = bN.residual;
    record();

    st.dual_objective = monitor ? st.update_objectives.back()
                                : detail::dual_objective_terms(phi, p, msg.logU[p.time.N]);

    const detail::NormMask mask = detail::build_norm_mask(msg, p);
    const double den = detail::masked_linf(before, p, mask);
    const double num = detail::masked_linf_diff(phi, before, p, mask);
    st.rel_linf_change = den > 0.0 ? num / den : (num > 0.0 ? 1e300 : 0.0);
    st.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return st;
}

/// Full dual ascent.  Stops when the relative L-inf potential change drops to
/// stop_tol and both pre-update marginal residuals are below marginal_tol
/// (the stopping metric alone can stall on far-tail dynamics while the
/// marginals still move, and vice versa), or at max_cycles.  An infinite
/// stop_tol returns after a single cycle; an exact fixed point of the
/// iteration also stops early.
inline SolveResult solve(const ProblemSpec& p)
{
    p.validate();
    const KernelCache kc = build_kernel_cache(p);
    SolveResult res;
    res.potentials = Potentials::zero(p);
    Messages msg;

    for (int cycle = 0; cycle < p.solver.max_cycles; ++cycle) {
        CycleStats st = sinkhorn_cycle(res.potentials, msg, p, kc);
        st.cycle = cycle;
        res.trace.cycles.push_back(std::move(st));
        const CycleStats& last = res.trace.cycles.back();
        const bool marginals_ok
            = std::max(last.residual_rho0, last.residual_rho1) <= p.solver.marginal_tol;
        if (!std::isfinite(p.solver.stop_tol)) {
            res.converged = marginals_ok;
            break;
        }
        if ((last.rel_linf_change <= p.solver.stop_tol && marginals_ok)
            || last.rel_linf_change == 0.0) {
            res.converged = marginals_ok;
            break;
        }
    }

    // Leave messages consistent with the final potentials.
    detail::compute_logD_impl(res.potentials, p, kc, res.messages);
    detail::compute_logU_impl(res.potentials, p, kc, res.messages);
    return res;
}

} // namespace esmot
