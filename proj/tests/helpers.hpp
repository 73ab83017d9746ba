#pragma once

#include "esmot/problem.hpp"

#include <random>

namespace esmot::test {

/// Problem assembled from raw pieces (grids not derived from the meshing rule).
inline ProblemSpec make_problem(int N, int n_x, double dx, const ReferenceVolSchedule& sb,
                                double gamma, ArrayXd rho0, ArrayXd rho1, double x_lo = 0.0)
{
    ProblemSpec p;
    p.time = TimeGrid(N);
    p.space = SpaceGrid(x_lo, dx, n_x);
    p.payoff = QuadraticPayoff(gamma);
    p.sigma_bar = sb;
    p.rho0 = std::move(rho0);
    p.rho1 = std::move(rho1);
    return p;
}

inline ArrayXd gaussian_mass(const SpaceGrid& g, double mean, double std_dev, double floor = 0.0)
{
    ArrayXd m(g.n_x);
    for (int j = 0; j < g.n_x; ++j)
        m[j] = normal_pdf(g.x(j), mean, std_dev) + floor;
    return m / m.sum();
}

/// Random tiny instance for oracle cross-checks: n_x <= 15, N <= 3, full
/// supports, reference band wide enough to connect everything.  Drift
/// demands are kept mild (close means, gamma <= ~300): heavily forced drift
/// under a stiff penalty makes the coordinate ascent crawl.
inline ProblemSpec random_tiny_problem(std::mt19937& rng)
{
    std::uniform_int_distribution<int> pick_nx(8, 15), pick_N(1, 3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n_x = pick_nx(rng);
    const int N = pick_N(rng);
    const double dx = 0.1;
    const double width = (n_x - 1) * dx;
    const double h = 1.0 / N;
    // band covers the whole grid: 5 sigma sqrt(h) >= width
    const double sigma = (0.25 + 0.2 * u(rng)) * width / std::sqrt(h);
    const double gamma = std::pow(10.0, 1.0 + 1.5 * u(rng));

    SpaceGrid sg(0.0, dx, n_x);
    const double mean0 = 0.35 + 0.3 * u(rng);
    ArrayXd r0 = gaussian_mass(sg, width * mean0, width * (0.1 + 0.2 * u(rng)), 1e-3);
    ArrayXd r1 = gaussian_mass(sg, width * (mean0 + 0.16 * (u(rng) - 0.5)),
                               width * (0.1 + 0.2 * u(rng)), 1e-3);

    ProblemSpec p = make_problem(N, n_x, dx, ReferenceVolSchedule::make_constant(sigma), gamma,
                                 std::move(r0), std::move(r1));
    p.solver.stop_tol = 1e-12;
    p.solver.marginal_tol = 1e-9;
    p.solver.max_cycles = 30000;
    return p;
}

} // namespace esmot::test
