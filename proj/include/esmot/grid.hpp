#pragma once

#include "esmot/numerics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace esmot {

/// Uniform time grid on [0,1]: t_i = i*h, i = 0..N, h = 1/N.
struct TimeGrid {
    int N = 0;
    double h = 0.0;

    TimeGrid() = default;
    explicit TimeGrid(int steps)
        : N(steps)
        , h(1.0 / steps)
    {
        if (steps < 1)
            throw std::invalid_argument("TimeGrid: N must be >= 1");
    }

    double t(int i) const { return i * h; }
};

/// Uniform spatial lattice x_j = x_lo + j*dx, j = 0..n_x-1.
struct SpaceGrid {
    double x_lo = 0.0;
    double dx = 0.0;
    int n_x = 0;

    SpaceGrid() = default;
    SpaceGrid(double lo, double spacing, int nodes)
        : x_lo(lo)
        , dx(spacing)
        , n_x(nodes)
    {
        if (!(spacing > 0.0))
            throw std::invalid_argument("SpaceGrid: dx must be positive");
        if (nodes < 3)
            throw std::invalid_argument("SpaceGrid: need at least 3 nodes");
    }

    double x(int j) const { return x_lo + j * dx; }
    double x_hi() const { return x(n_x - 1); }

    ArrayXd nodes() const
    {
        ArrayXd out(n_x);
        for (int j = 0; j < n_x; ++j)
            out[j] = x(j);
        return out;
    }
};

/// Per-slice one-sided kernel support in grid points.
struct BandSpec {
    std::vector<int> halfwidth;
};

/// Meshing rule: dx = 10*sigma_bar_max*sqrt(h)/K, so a Gaussian step of the
/// largest reference width spans about K lattice points at +-5 standard
/// deviations.  Nodes start exactly at x_lo.
inline std::pair<TimeGrid, SpaceGrid>
build_grids(int N, int K, double sigma_bar_max, double x_lo, double x_hi)
{
    if (N < 2)
        throw std::invalid_argument("build_grids: N must be >= 2");
    if (K < 4)
        throw std::invalid_argument("build_grids: K must be >= 4");
    if (!(sigma_bar_max > 0.0))
        throw std::invalid_argument("build_grids: sigma_bar_max must be positive");
    if (!(x_hi > x_lo))
        throw std::invalid_argument("build_grids: empty spatial domain");

    TimeGrid tg(N);
    const double dx = 10.0 * sigma_bar_max * std::sqrt(tg.h) / K;
    const int n_x = static_cast<int>(std::floor((x_hi - x_lo) / dx)) + 1;
    if (n_x < 2 * K)
        throw std::invalid_argument(
            "build_grids: n_x = " + std::to_string(n_x) + " < 2*K = " + std::to_string(2 * K)
            + "; truncation too aggressive for this domain");
    return { tg, SpaceGrid(x_lo, dx, n_x) };
}

/// Kernel halfwidth covering +-5 standard deviations of a step N(0, sigma^2 h),
/// clamped to [1, (n_x-1)/2].  The tiny relative slack keeps exact multiples
/// (e.g. K/2 under the meshing rule) from rounding up through fp noise.
inline int band_halfwidth(double sigma, double h, double dx, int n_x)
{
    if (!(sigma > 0.0) || !(h > 0.0) || !(dx > 0.0))
        throw std::invalid_argument("band_halfwidth: arguments must be positive");
    const double q = 5.0 * sigma * std::sqrt(h) / dx;
    int w = static_cast<int>(std::ceil(q * (1.0 - 1e-12)));
    w = std::max(w, 1);
    w = std::min(w, std::max(1, (n_x - 1) / 2));
    return w;
}

} // namespace esmot
