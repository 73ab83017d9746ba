#pragma once

#include <stdexcept>

namespace esmot {

/// Quadratic drift payoff F(b) = gamma*b^2 with its convex conjugate
/// F*(p) = p^2/(4*gamma) and conjugate gradient dF*(p) = p/(2*gamma).
struct QuadraticPayoff {
    double gamma = 1e6;

    QuadraticPayoff() = default;
    explicit QuadraticPayoff(double g)
        : gamma(g)
    {
        if (!(g > 0.0))
            throw std::invalid_argument("QuadraticPayoff: gamma must be positive");
    }

    double value(double b) const { return gamma * b * b; }
    double conjugate(double p) const { return p * p / (4.0 * gamma); }
    double conjugate_grad(double p) const { return p / (2.0 * gamma); }
};

/// The payoff object itself is the triple of evaluable maps (F, F*, dF*).
inline QuadraticPayoff payoff_eval(const QuadraticPayoff& p)
{
    if (!(p.gamma > 0.0))
        throw std::invalid_argument("payoff_eval: gamma must be positive");
    return p;
}

} // namespace esmot
