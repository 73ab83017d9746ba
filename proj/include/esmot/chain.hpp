#pragma once

#include "esmot/numerics.hpp"
#include "esmot/problem.hpp"

#include <vector>

namespace esmot {

/// Decomposition of the primal cost: kinetic part h*sum E[F(b)], entropic
/// part h*H(P|Pbar), discrete specific entropy, and L1 marginal residuals
/// (hard constraints are reported, not added as penalties).
struct ObjectiveDecomposition {
    double kinetic = 0.0;
    double entropic = 0.0; // h * H(P | Pbar)
    double sre = 0.0;      // (h/2) * sum_i E[S_I(a_i | abar_i)]
    double residual_rho0 = 0.0;
    double residual_rho1 = 0.0;

    double primal_value() const { return kinetic + entropic; }
};

/// Both sides of the scaled relative entropy lower bound
/// h H(P|Pbar) >= h H(P_0|rho0) + (h/2) sum_i E[S_I(a_i|abar)].
struct EntropyReport {
    double scaled_relative_entropy = 0.0; // h * H(P | Pbar)
    double discrete_sre = 0.0;
    double initial_term = 0.0; // h * H(P_0 | rho0)
    double gap = 0.0;          // lhs - rhs
    double slack = 0.0;
    bool satisfied = true;
};

/// Reconstructed optimal Markov chain: marginal flow, per-step banded
/// transition matrices (optionally retained; large runs stream them), and the
/// moment surfaces.  Surfaces are stored unmasked; the mass-floor mask is
/// applied when exporting.
struct ChainSolution {
    std::vector<ArrayXd> marginals;        // N+1 vectors
    std::vector<BandedMatrix> transitions; // N matrices, may be empty
    ArrayXXdR drift;                       // b_i(x_j), N x n_x
    ArrayXXdR second_moment;               // a_i(x_j) = (1/h) E[(dx)^2]
    ArrayXXdR vol;                         // sqrt(a), canonical plotted surface
    ArrayXXdR vol_corrected;               // sqrt(max(a - h b^2, 0))
    ArrayXXdR kurtosis;                    // c_i(x_j)
    ObjectiveDecomposition objective;

    bool has_transitions() const { return !transitions.empty(); }
};

} // namespace esmot
