#pragma once

#include "esmot/grid.hpp"
#include "esmot/numerics.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace esmot {

/// One Gaussian mixture component, optionally restricted to a half line
/// (x <= cut or x > cut) for piecewise-Gaussian densities.
struct GaussianComponent {
    double weight = 1.0;
    double mean = 0.0;
    double std_dev = 1.0;

    struct Branch {
        bool left_of_cut = true; // true: active on x <= cut, false: x > cut
        double cut = 0.0;
    };
    std::optional<Branch> branch;

    bool active_at(double x) const
    {
        if (!branch)
            return true;
        return branch->left_of_cut ? (x <= branch->cut) : (x > branch->cut);
    }
};

/// Finite mixture of (possibly branch-restricted) Gaussians.
struct DensitySpec {
    std::vector<GaussianComponent> components;

    double eval(double x) const
    {
        double v = 0.0;
        for (const auto& c : components)
            if (c.active_at(x))
                v += c.weight * normal_pdf(x, c.mean, c.std_dev);
        return v;
    }

    void validate() const
    {
        if (components.empty())
            throw std::invalid_argument("DensitySpec: at least one component required");
        for (const auto& c : components) {
            if (!(c.weight > 0.0))
                throw std::invalid_argument("DensitySpec: weights must be positive");
            if (!(c.std_dev > 0.0))
                throw std::invalid_argument("DensitySpec: std deviations must be positive");
        }
    }

    static DensitySpec gaussian(double mean, double std_dev)
    {
        DensitySpec d;
        d.components.push_back({ 1.0, mean, std_dev, std::nullopt });
        return d;
    }
};

/// Node-wise evaluation times dx, clipped at zero and renormalized to a
/// probability mass vector.
inline ArrayXd discretize_density(const DensitySpec& spec, const SpaceGrid& grid)
{
    spec.validate();
    ArrayXd mass(grid.n_x);
    for (int j = 0; j < grid.n_x; ++j)
        mass[j] = std::max(0.0, spec.eval(grid.x(j))) * grid.dx;
    const double total = mass.sum();
    if (total < 1e-12)
        throw std::domain_error("discretize_density: density mass below 1e-12 on this domain");
    return mass / total;
}

} // namespace esmot
