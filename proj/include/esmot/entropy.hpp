#pragma once

#include "esmot/chain.hpp"
#include "esmot/errors.hpp"
#include "esmot/numerics.hpp"
#include "esmot/problem.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace esmot {

/// Specific relative entropy integrand S_I(a | abar) = a/abar - 1 - log(a/abar).
/// Nonnegative, zero iff a == abar, a barrier as a -> 0.
inline double sre_integrand(double a, double abar)
{
    if (!(a > 0.0) || !(abar > 0.0))
        throw std::domain_error("sre_integrand: arguments must be positive");
    const double r = a / abar;
    return r - 1.0 - std::log(r);
}

/// KL divergence between 1-D Gaussians:
/// KL(N(mu1,v1) || N(mu0,v0)) = S_I(v1|v0)/2 + (mu1-mu0)^2/(2 v0).
inline double gaussian_kl(double mu1, double v1, double mu0, double v0)
{
    if (!(v1 > 0.0) || !(v0 > 0.0))
        throw std::domain_error("gaussian_kl: variances must be positive");
    return 0.5 * sre_integrand(v1, v0) + (mu1 - mu0) * (mu1 - mu0) / (2.0 * v0);
}

/// KL between two mass vectors on the same support, 0*log(0) = 0.  Mass on a
/// zero-reference cell is an absolute-continuity failure, not an overflow.
inline double discrete_kl(const Eigen::Ref<const ArrayXd>& p, const Eigen::Ref<const ArrayXd>& q)
{
    if (p.size() != q.size())
        throw std::invalid_argument("discrete_kl: size mismatch");
    double kl = 0.0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        if (p[k] == 0.0)
            continue;
        if (q[k] == 0.0)
            throw AbsoluteContinuityError("discrete_kl: mass on zero-reference support");
        kl += p[k] * std::log(p[k] / q[k]);
    }
    return kl;
}

/// Unscaled relative entropy H(P | Pbar) of a Markov chain against the
/// reference chain started at rho0:
/// H = H(P_0 | rho0) + sum_i sum_j P_i(j) KL(row_ij || reference row_ij).
inline double chain_relative_entropy(const ChainSolution& chain, const ProblemSpec& problem)
{
    if (!chain.has_transitions())
        throw std::logic_error("chain_relative_entropy: transitions were not retained");
    const int N = problem.time.N;
    if (static_cast<int>(chain.transitions.size()) != N
        || static_cast<int>(chain.marginals.size()) != N + 1)
        throw std::invalid_argument("chain_relative_entropy: chain/problem size mismatch");

    double H = discrete_kl(chain.marginals[0], problem.rho0);
    for (int i = 0; i < N; ++i) {
        const BandedMatrix ref = reference_kernel(i, problem);
        const BandedMatrix& T = chain.transitions[i];
        for (int j = 0; j < problem.space.n_x; ++j) {
            const double pj = chain.marginals[i][j];
            if (pj == 0.0)
                continue;
            double kl = 0.0;
            for (int k = T.k_lo(j); k <= T.k_hi(j); ++k) {
                const double t = T(j, k);
                if (t == 0.0)
                    continue;
                const double r = ref(j, k);
                if (r == 0.0)
                    throw AbsoluteContinuityError(
                        "chain_relative_entropy: transition mass outside reference band");
                kl += t * std::log(t / r);
            }
            H += pj * kl;
        }
    }
    return H;
}

/// Closed form of the scaled relative entropy of a Gaussian-transition chain
/// (transitions N(x + h mu, h v) against N(x, h abar)):
/// h H = h H(P_0|rho0) + (h/2) sum_i E[ S_I(v_i|abar) + (h/abar) mu_i^2 ].
inline double gaussian_chain_entropy(const std::vector<ArrayXd>& mu, const std::vector<ArrayXd>& v,
                                     const std::vector<ArrayXd>& marginals,
                                     const ProblemSpec& problem)
{
    const int N = problem.time.N;
    if (static_cast<int>(mu.size()) != N || static_cast<int>(v.size()) != N
        || static_cast<int>(marginals.size()) < N)
        throw std::invalid_argument("gaussian_chain_entropy: table size mismatch");
    const double h = problem.time.h;

    double acc = discrete_kl(marginals[0], problem.rho0); // H(P_0 | rho0)
    for (int i = 0; i < N; ++i) {
        const double t = problem.time.t(i);
        double s = 0.0;
        for (int j = 0; j < problem.space.n_x; ++j) {
            const double pj = marginals[i][j];
            if (pj == 0.0)
                continue;
            const double abar = problem.sigma_bar.abar(t, problem.space.x(j));
            if (!(v[i][j] > 0.0))
                throw std::domain_error("gaussian_chain_entropy: nonpositive variance at charged node");
            s += pj * (sre_integrand(v[i][j], abar) + (h / abar) * mu[i][j] * mu[i][j]);
        }
        acc += 0.5 * s;
    }
    return h * acc;
}

/// Discrete specific relative entropy (h/2) sum_i E[S_I(a_i | abar_i)] using
/// the raw scaled second moments a_i of the chain.
inline double discrete_sre(const ChainSolution& chain, const ProblemSpec& problem)
{
    const int N = problem.time.N;
    if (chain.second_moment.rows() != N || chain.second_moment.cols() != problem.space.n_x)
        throw std::invalid_argument("discrete_sre: surface size mismatch");
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
        const double t = problem.time.t(i);
        for (int j = 0; j < problem.space.n_x; ++j) {
            const double pj = chain.marginals[i][j];
            if (pj == 0.0)
                continue;
            const double a = chain.second_moment(i, j);
            if (!(a > 0.0))
                throw std::domain_error("discrete_sre: zero conditional second moment at charged node");
            acc += pj * sre_integrand(a, problem.sigma_bar.abar(t, problem.space.x(j)));
        }
    }
    return 0.5 * problem.time.h * acc;
}

/// Evaluates both sides of h H(P|Pbar) >= h H(P_0|rho0) + discrete SRE and
/// flags a violation beyond the given slack (reported, not thrown).
inline EntropyReport check_dual_spec_inequality(const ChainSolution& chain,
                                                const ProblemSpec& problem, double slack)
{
    EntropyReport r;
    r.scaled_relative_entropy = problem.time.h * chain_relative_entropy(chain, problem);
    r.discrete_sre = discrete_sre(chain, problem);
    r.initial_term = problem.time.h * discrete_kl(chain.marginals[0], problem.rho0);
    r.gap = r.scaled_relative_entropy - r.initial_term - r.discrete_sre;
    r.slack = slack;
    r.satisfied = r.gap >= -slack;
    return r;
}

} // namespace esmot
