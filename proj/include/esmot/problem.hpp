#pragma once

#include "esmot/density.hpp"
#include "esmot/grid.hpp"
#include "esmot/numerics.hpp"
#include "esmot/payoff.hpp"
#include "esmot/volatility.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace esmot {

struct SolverParams {
    int max_cycles = 2000;
    double stop_tol = 1e-8;      // relative L-inf change of the potentials
    double marginal_tol = 1e-6;  // L1 marginal residual required to flag convergence
    double newton_tol = 1e-10;   // |g| tolerance of the per-node scalar solves
    int newton_max_iter = 50;
    int bracket_expansions = 200;
    double bracket_guess = 1.0;  // drift-scale seed for bracket growth (times h^2)
    int threads = 1;
    double mass_floor_rel = 1e-12; // surface mask: report where P_i >= floor*max
    bool monitor_updates = false;  // record dual objective after every coordinate update
};

/// Full problem data for one solve.
struct ProblemSpec {
    TimeGrid time;
    SpaceGrid space;
    QuadraticPayoff payoff;
    ReferenceVolSchedule sigma_bar;
    ArrayXd rho0;
    ArrayXd rho1;
    SolverParams solver;
    double kurtosis_alpha = 0.0;

    void validate() const
    {
        if (rho0.size() != space.n_x || rho1.size() != space.n_x)
            throw std::invalid_argument("ProblemSpec: marginal size mismatch");
        if ((rho0 < 0.0).any() || (rho1 < 0.0).any())
            throw std::invalid_argument("ProblemSpec: marginals must be nonnegative");
        if (std::abs(rho0.sum() - 1.0) > 1e-9 || std::abs(rho1.sum() - 1.0) > 1e-9)
            throw std::invalid_argument("ProblemSpec: marginals must sum to 1");
        if (kurtosis_alpha < 0.0)
            throw std::invalid_argument("ProblemSpec: kurtosis_alpha must be >= 0");
    }
};

/// Banded row-stochastic matrix: row j holds masses for targets
/// k = j - halfwidth .. j + halfwidth, clamped to the grid; out-of-band and
/// out-of-grid cells are zero.
struct BandedMatrix {
    int n = 0;
    int halfwidth = 0;
    ArrayXXdR rows; // n x (2*halfwidth+1)

    BandedMatrix() = default;
    BandedMatrix(int size, int hw)
        : n(size)
        , halfwidth(hw)
        , rows(ArrayXXdR::Zero(size, 2 * hw + 1))
    {
    }

    int band_width() const { return 2 * halfwidth + 1; }
    int k_lo(int j) const { return std::max(0, j - halfwidth); }
    int k_hi(int j) const { return std::min(n - 1, j + halfwidth); }

    double operator()(int j, int k) const
    {
        const int c = k - j + halfwidth;
        if (c < 0 || c >= band_width())
            return 0.0;
        return rows(j, c);
    }

    double& at(int j, int k) { return rows(j, k - j + halfwidth); }

    /// y = x^T * M (forward marginal push).
    ArrayXd push_forward(const Eigen::Ref<const ArrayXd>& x) const
    {
        ArrayXd y = ArrayXd::Zero(n);
        for (int j = 0; j < n; ++j) {
            const double mj = x[j];
            if (mj == 0.0)
                continue;
            for (int k = k_lo(j); k <= k_hi(j); ++k)
                y[k] += mj * rows(j, k - j + halfwidth);
        }
        return y;
    }
};

/// Per-slice kernel geometry cached for the hot loops: unnormalized Gaussian
/// log-profile over band offsets and per-row log-normalizers (boundary rows
/// lose tail mass and get renormalized).
struct SliceKernel {
    int halfwidth = 0;
    bool space_const = true;
    double abar_const = 0.0;
    ArrayXd abar_x;       // per-node abar when !space_const
    ArrayXd log_profile;  // offset m = -W..W, only when space_const
    ArrayXXdR log_profile_x; // per-node profiles when !space_const
    ArrayXd log_rownorm;  // per node j
    ArrayXd disp;         // m*dx, m = -W..W

    double log_kernel(int j, int m) const
    {
        return (space_const ? log_profile[m + halfwidth] : log_profile_x(j, m + halfwidth))
            - log_rownorm[j];
    }
};

struct KernelCache {
    std::vector<SliceKernel> slices; // one per step i = 0..N-1
    double h = 0.0;
    double dx = 0.0;
    int n_x = 0;
};

inline SliceKernel build_slice_kernel(const ProblemSpec& p, int i)
{
    const double h = p.time.h;
    const double dx = p.space.dx;
    const int n_x = p.space.n_x;
    const double t = p.time.t(i);

    SliceKernel sk;
    sk.space_const = p.sigma_bar.space_constant();
    sk.halfwidth = band_halfwidth(p.sigma_bar.max_sigma_at(t), h, dx, n_x);
    const int W = sk.halfwidth;
    const int bw = 2 * W + 1;

    sk.disp.resize(bw);
    for (int m = -W; m <= W; ++m)
        sk.disp[m + W] = m * dx;

    if (sk.space_const) {
        sk.abar_const = p.sigma_bar.abar(t, 0.0);
        sk.log_profile.resize(bw);
        for (int m = -W; m <= W; ++m)
            sk.log_profile[m + W] = -(m * dx) * (m * dx) / (2.0 * h * sk.abar_const);
    } else {
        sk.abar_x.resize(n_x);
        sk.log_profile_x.resize(n_x, bw);
        for (int j = 0; j < n_x; ++j) {
            sk.abar_x[j] = p.sigma_bar.abar(t, p.space.x(j));
            for (int m = -W; m <= W; ++m)
                sk.log_profile_x(j, m + W) = -(m * dx) * (m * dx) / (2.0 * h * sk.abar_x[j]);
        }
    }

    sk.log_rownorm.resize(n_x);
    double interior = 0.0;
    bool have_interior = false;
    for (int j = 0; j < n_x; ++j) {
        const int lo = std::max(0, j - W);
        const int hi = std::min(n_x - 1, j + W);
        if (sk.space_const && lo == j - W && hi == j + W) {
            if (!have_interior) {
                interior = log_sum_exp(sk.log_profile);
                have_interior = true;
            }
            sk.log_rownorm[j] = interior;
            continue;
        }
        const int len = hi - lo + 1;
        const int off = lo - j + W;
        if (sk.space_const)
            sk.log_rownorm[j] = log_sum_exp(sk.log_profile.segment(off, len));
        else
            sk.log_rownorm[j] = log_sum_exp(sk.log_profile_x.row(j).segment(off, len).transpose());
    }
    return sk;
}

inline KernelCache build_kernel_cache(const ProblemSpec& p)
{
    KernelCache kc;
    kc.h = p.time.h;
    kc.dx = p.space.dx;
    kc.n_x = p.space.n_x;
    kc.slices.reserve(p.time.N);
    for (int i = 0; i < p.time.N; ++i)
        kc.slices.push_back(build_slice_kernel(p, i));
    return kc;
}

/// Reference transition kernel for step i -> i+1: row j proportional to
/// exp(-(x_k - x_j)^2 / (2 h abar_i(x_j))) on the band, renormalized to sum 1.
inline BandedMatrix reference_kernel(int i, const ProblemSpec& p)
{
    if (i < 0 || i >= p.time.N)
        throw std::invalid_argument("reference_kernel: slice index out of range");
    const SliceKernel sk = build_slice_kernel(p, i);
    BandedMatrix K(p.space.n_x, sk.halfwidth);
    for (int j = 0; j < K.n; ++j)
        for (int k = K.k_lo(j); k <= K.k_hi(j); ++k)
            K.at(j, k) = std::exp(sk.log_kernel(j, k - j));
    return K;
}

// ---------------------------------------------------------------------------
// Declarative problem configuration (what presets and JSON configs carry).
// ---------------------------------------------------------------------------

struct ProblemConfig {
    std::string name = "custom";
    int N = 129;
    int K = 64;
    double x_lo = 0.0;
    double x_hi = 1.0;
    double gamma = 1e6;
    double kurtosis_alpha = 0.0;
    ReferenceVolSchedule sigma_bar;
    DensitySpec rho0;
    DensitySpec rho1;
    SolverParams solver;
};

inline ProblemSpec build_problem(const ProblemConfig& cfg)
{
    auto [tg, sg] = build_grids(cfg.N, cfg.K, cfg.sigma_bar.max_sigma(), cfg.x_lo, cfg.x_hi);
    ProblemSpec p;
    p.time = tg;
    p.space = sg;
    p.payoff = QuadraticPayoff(cfg.gamma);
    p.sigma_bar = cfg.sigma_bar;
    p.rho0 = discretize_density(cfg.rho0, sg);
    p.rho1 = discretize_density(cfg.rho1, sg);
    p.solver = cfg.solver;
    p.kurtosis_alpha = cfg.kurtosis_alpha;
    p.validate();
    return p;
}

// Marginal length scale shared by the Gaussian experiments.  The bridging
// diffusion coefficient of the convex-order pair is (0.1 s)^2 - (0.05 s)^2 =
// 0.0075^2 with s = sqrt(0.0075), i.e. the recovered constant volatility is
// exactly 0.0075, sitting just under the reference sigma_bar = 0.009.
inline constexpr double k_gauss_scale = 0.08660254037844387; // sqrt(0.0075)
inline constexpr double k_mixture_offset = 0.15 * k_gauss_scale;

inline std::vector<std::string> preset_names()
{
    return { "gauss_convex", "gauss_mixture", "mixture_voljump", "nonconvex_order" };
}

/// Built-in experiment configurations.
inline ProblemConfig preset(const std::string& name)
{
    ProblemConfig cfg;
    cfg.name = name;
    cfg.N = 129;
    cfg.K = 64;
    cfg.gamma = 1e6;

    const double s = k_gauss_scale;
    if (name == "gauss_convex") {
        cfg.sigma_bar = ReferenceVolSchedule::make_constant(0.009);
        cfg.rho0 = DensitySpec::gaussian(0.5, 0.05 * s);
        cfg.rho1 = DensitySpec::gaussian(0.5, 0.1 * s);
        return cfg;
    }
    if (name == "gauss_mixture" || name == "mixture_voljump") {
        if (name == "gauss_mixture") {
            cfg.sigma_bar = ReferenceVolSchedule::make_constant(0.009);
        } else {
            cfg.sigma_bar = ReferenceVolSchedule::make_time_table(
                { { 0.3, 0.7, 0.03 } }, 0.01);
        }
        cfg.rho0 = DensitySpec::gaussian(0.5, 0.05 * s);
        const double p_center = 0.6;
        DensitySpec mix;
        mix.components.push_back({ p_center, 0.5, 0.1 * s, std::nullopt });
        mix.components.push_back({ 0.5 * (1.0 - p_center), 0.5 - k_mixture_offset, 0.05 * s, std::nullopt });
        mix.components.push_back({ 0.5 * (1.0 - p_center), 0.5 + k_mixture_offset, 0.05 * s, std::nullopt });
        cfg.rho1 = mix;
        return cfg;
    }
    if (name == "nonconvex_order") {
        // The forced-drift experiment: gamma large enough that drift stays a
        // last resort but small enough that the coordinate ascent converges;
        // the left domain bound balances the truncated means so no spurious
        // bulk drift appears.
        cfg.gamma = 1000.0;
        cfg.x_lo = 0.177;
        cfg.sigma_bar = ReferenceVolSchedule::make_constant(0.07);
        DensitySpec r0;
        r0.components.push_back({ 1.0, 0.5, 0.1, GaussianComponent::Branch { true, 0.5 } });
        r0.components.push_back({ 1.0, 0.5, 0.3, GaussianComponent::Branch { false, 0.5 } });
        DensitySpec r1;
        r1.components.push_back({ 1.0, 0.5, 0.5, GaussianComponent::Branch { true, 0.5 } });
        r1.components.push_back({ 1.0, 0.5, 0.2, GaussianComponent::Branch { false, 0.5 } });
        cfg.rho0 = r0;
        cfg.rho1 = r1;
        return cfg;
    }
    throw std::invalid_argument("unknown preset '" + name + "'; valid presets: gauss_convex, "
                                "gauss_mixture, mixture_voljump, nonconvex_order");
}

} // namespace esmot
