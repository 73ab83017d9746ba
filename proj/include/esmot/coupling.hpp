#pragma once

#include "esmot/chain.hpp"
#include "esmot/entropy.hpp"
#include "esmot/errors.hpp"
#include "esmot/numerics.hpp"
#include "esmot/problem.hpp"
#include "esmot/sinkhorn.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace esmot {

/// Transition rows for step i -> i+1 from converged potentials: row j is
/// proportional to exp((x_k-x_j) phi1_i(x_j)/h^2) * Pbar_row_j(k) * D_{i+1}(k),
/// renormalized to a conditional probability.  A row whose band carries no
/// mass is a hard error at a charged source node; at unweighted nodes it
/// degenerates to a self point mass (the row never moves any mass).
inline BandedMatrix extract_transition_slice(int i, const Potentials& phi, const Messages& msg,
                                             const ProblemSpec& p, const SliceKernel& sk,
                                             const ArrayXd* source_marginal = nullptr)
{
    const int n_x = p.space.n_x;
    const double h = p.time.h;
    const int W = sk.halfwidth;
    BandedMatrix T(n_x, W);
    const ArrayXd& logD_next = msg.logD[i + 1];
    detail::Workspace ws(2 * W + 1);
    for (int j = 0; j < n_x; ++j) {
        const int lo = std::max(0, j - W);
        const int hi = std::min(n_x - 1, j + W);
        const int len = hi - lo + 1;
        const int off = lo - (j - W);
        auto arg = ws.arg.head(len);
        const double slope = phi.phi1[i][j] / (h * h);
        if (sk.space_const)
            arg = sk.log_profile.segment(off, len) + logD_next.segment(lo, len)
                + slope * sk.disp.segment(off, len);
        else
            arg = sk.log_profile_x.row(j).segment(off, len).transpose()
                + logD_next.segment(lo, len) + slope * sk.disp.segment(off, len);
        const double shift = arg.maxCoeff();
        if (is_log_zero(shift) || !std::isfinite(shift)) {
            if (source_marginal != nullptr && (*source_marginal)[j] > 0.0)
                throw MessageCollapseError("extract_transitions: non-normalizable row at slice "
                                           + std::to_string(i) + ", node " + std::to_string(j));
            T.at(j, j) = 1.0;
            continue;
        }
        auto w = ws.wexp.head(len);
        w = (arg - shift).exp();
        const double s0 = w.sum();
        T.rows.row(j).segment(off, len) = (w / s0).transpose();
    }
    return T;
}

inline std::vector<BandedMatrix> extract_transitions(const Potentials& phi, const Messages& msg,
                                                     const ProblemSpec& p)
{
    const KernelCache kc = build_kernel_cache(p);
    std::vector<BandedMatrix> out;
    out.reserve(p.time.N);
    ArrayXd flow = p.rho0;
    for (int i = 0; i < p.time.N; ++i) {
        out.push_back(extract_transition_slice(i, phi, msg, p, kc.slices[i], &flow));
        flow = out.back().push_forward(flow);
    }
    return out;
}

/// P_0 = rho0, P_{i+1} = P_i * T_i.
inline std::vector<ArrayXd> marginal_flow(const std::vector<BandedMatrix>& transitions,
                                          const ArrayXd& rho0)
{
    std::vector<ArrayXd> flow;
    flow.reserve(transitions.size() + 1);
    flow.push_back(rho0);
    for (const auto& T : transitions)
        flow.push_back(T.push_forward(flow.back()));
    return flow;
}

struct MomentSurfaces {
    ArrayXXdR drift;         // b_i(x_j) = (1/h) E[X_{i+1} - x_j]
    ArrayXXdR second_moment; // a_i(x_j) = (1/h) E[(X_{i+1} - x_j)^2]
    ArrayXXdR vol;           // sqrt(a), the plotted volatility
    ArrayXXdR vol_corrected; // sqrt(max(a - h b^2, 0))
};

inline void row_moments(const BandedMatrix& T, int j, double dx, double h, double& b, double& a)
{
    double m1 = 0.0, m2 = 0.0;
    for (int k = T.k_lo(j); k <= T.k_hi(j); ++k) {
        const double w = T(j, k);
        const double d = (k - j) * dx;
        m1 += w * d;
        m2 += w * d * d;
    }
    b = m1 / h;
    a = m2 / h;
}

inline MomentSurfaces chain_moments(const std::vector<BandedMatrix>& transitions,
                                    const ProblemSpec& p)
{
    const int N = static_cast<int>(transitions.size());
    const int n_x = p.space.n_x;
    MomentSurfaces s;
    s.drift.resize(N, n_x);
    s.second_moment.resize(N, n_x);
    s.vol.resize(N, n_x);
    s.vol_corrected.resize(N, n_x);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < n_x; ++j) {
            double b = 0.0, a = 0.0;
            row_moments(transitions[i], j, p.space.dx, p.time.h, b, a);
            s.drift(i, j) = b;
            s.second_moment(i, j) = a;
            s.vol(i, j) = std::sqrt(a);
            s.vol_corrected(i, j) = std::sqrt(std::max(0.0, a - p.time.h * b * b));
        }
    }
    return s;
}

/// Scaled conditional moment of order 4 + 2*alpha (diagnostic only):
/// c_i(x_j) = h^{-(2+alpha)} E[|X_{i+1} - x_j|^{4+2 alpha}].
inline ArrayXXdR chain_kurtosis(const std::vector<BandedMatrix>& transitions,
                                const ProblemSpec& p, double alpha)
{
    if (alpha < 0.0)
        throw std::invalid_argument("chain_kurtosis: alpha must be >= 0");
    const int N = static_cast<int>(transitions.size());
    const int n_x = p.space.n_x;
    const double expo = 4.0 + 2.0 * alpha;
    const double scale = std::pow(p.time.h, -(2.0 + alpha));
    ArrayXXdR c(N, n_x);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < n_x; ++j) {
            double m = 0.0;
            const auto& T = transitions[i];
            for (int k = T.k_lo(j); k <= T.k_hi(j); ++k)
                m += T(j, k) * std::pow(std::abs((k - j) * p.space.dx), expo);
            c(i, j) = scale * m;
        }
    }
    return c;
}

/// Primal decomposition of a chain: kinetic h sum E[F(b)], entropic h H(P|Pbar),
/// discrete SRE, and L1 marginal residuals.
inline ObjectiveDecomposition primal_objective(const ChainSolution& chain, const ProblemSpec& p)
{
    ObjectiveDecomposition o;
    const int N = p.time.N;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < p.space.n_x; ++j)
            o.kinetic += chain.marginals[i][j] * p.payoff.value(chain.drift(i, j));
    o.kinetic *= p.time.h;
    o.entropic = p.time.h * chain_relative_entropy(chain, p);
    o.sre = discrete_sre(chain, p);
    o.residual_rho0 = (chain.marginals[0] - p.rho0).abs().sum();
    o.residual_rho1 = (chain.marginals[N] - p.rho1).abs().sum();
    return o;
}

/// Reconstruct the full chain in one streaming pass: marginal flow, moment
/// surfaces, kurtosis, and the objective decomposition.  Transition matrices
/// are retained only when requested (they dominate memory on fine grids).
inline ChainSolution extract_chain(const Potentials& phi, const Messages& msg,
                                   const ProblemSpec& p, bool keep_transitions)
{
    const KernelCache kc = build_kernel_cache(p);
    const int N = p.time.N;
    const int n_x = p.space.n_x;
    const double h = p.time.h;
    const double dx = p.space.dx;
    const double kexpo = 4.0 + 2.0 * p.kurtosis_alpha;
    const double kscale = std::pow(h, -(2.0 + p.kurtosis_alpha));

    ChainSolution chain;
    chain.marginals.reserve(N + 1);
    chain.marginals.push_back(p.rho0);
    chain.drift.resize(N, n_x);
    chain.second_moment.resize(N, n_x);
    chain.vol.resize(N, n_x);
    chain.vol_corrected.resize(N, n_x);
    chain.kurtosis.resize(N, n_x);
    if (keep_transitions)
        chain.transitions.reserve(N);

    double kinetic = 0.0;
    double rel_entropy = discrete_kl(chain.marginals[0], p.rho0); // 0 by construction
    double sre_acc = 0.0;

    ArrayXd kl_row(n_x);
    for (int i = 0; i < N; ++i) {
        const SliceKernel& sk = kc.slices[i];
        const int W = sk.halfwidth;
        const int bw = 2 * W + 1;
        BandedMatrix T(n_x, W);
        const ArrayXd& logD_next = msg.logD[i + 1];
        const ArrayXd& P_i = chain.marginals[i];
        const double t_i = p.time.t(i);

        parallel_for(n_x, p.solver.threads, [&](std::int64_t j0) {
            thread_local detail::Workspace ws(1);
            if (ws.arg.size() < bw)
                ws = detail::Workspace(bw);
            const int j = static_cast<int>(j0);
            const int lo = std::max(0, j - W);
            const int hi = std::min(n_x - 1, j + W);
            const int len = hi - lo + 1;
            const int off = lo - (j - W);
            const double slope = phi.phi1[i][j] / (h * h);
            auto arg = ws.arg.head(len);
            if (sk.space_const)
                arg = sk.log_profile.segment(off, len) + logD_next.segment(lo, len)
                    + slope * sk.disp.segment(off, len);
            else
                arg = sk.log_profile_x.row(j).segment(off, len).transpose()
                    + logD_next.segment(lo, len) + slope * sk.disp.segment(off, len);
            const double shift = arg.maxCoeff();
            if (is_log_zero(shift) || !std::isfinite(shift)) {
                if (P_i[j] > 0.0)
                    throw MessageCollapseError("extract_chain: non-normalizable row at slice "
                                               + std::to_string(i) + ", node " + std::to_string(j));
                T.rows.row(j).setZero();
                T.at(j, j) = 1.0;
                chain.drift(i, j) = 0.0;
                chain.second_moment(i, j) = 0.0;
                chain.vol(i, j) = 0.0;
                chain.vol_corrected(i, j) = 0.0;
                chain.kurtosis(i, j) = 0.0;
                kl_row[j] = 0.0;
                return;
            }
            auto w = ws.wexp.head(len);
            w = (arg - shift).exp();
            const double s0 = w.sum();
            T.rows.row(j).segment(off, len) = (w / s0).transpose();

            double m1 = 0.0, m2 = 0.0, mk = 0.0, kl = 0.0;
            const double log_s0 = std::log(s0);
            for (int c = 0; c < len; ++c) {
                const double tw = w[c] / s0;
                const double d = sk.disp[off + c];
                m1 += tw * d;
                m2 += tw * d * d;
                mk += tw * std::pow(std::abs(d), kexpo);
                if (tw > 0.0) {
                    // log(T/ref) = tilt + logD - shift - log s0 + rownorm
                    kl += tw * (slope * d + logD_next[lo + c] - shift - log_s0 + sk.log_rownorm[j]);
                }
            }
            chain.drift(i, j) = m1 / h;
            chain.second_moment(i, j) = m2 / h;
            chain.vol(i, j) = std::sqrt(m2 / h);
            chain.vol_corrected(i, j) = std::sqrt(std::max(0.0, (m2 - m1 * m1) / h));
            chain.kurtosis(i, j) = kscale * mk;
            kl_row[j] = kl;
        });

        for (int j = 0; j < n_x; ++j) {
            const double pj = P_i[j];
            if (pj == 0.0)
                continue;
            kinetic += pj * p.payoff.value(chain.drift(i, j));
            rel_entropy += pj * kl_row[j];
            const double a = chain.second_moment(i, j);
            if (!(a > 0.0))
                throw std::domain_error("extract_chain: zero conditional second moment at charged node");
            sre_acc += pj * sre_integrand(a, p.sigma_bar.abar(t_i, p.space.x(j)));
        }

        chain.marginals.push_back(T.push_forward(P_i));
        if (keep_transitions)
            chain.transitions.push_back(std::move(T));
    }

    chain.objective.kinetic = h * kinetic;
    chain.objective.entropic = h * rel_entropy;
    chain.objective.sre = 0.5 * h * sre_acc;
    chain.objective.residual_rho0 = (chain.marginals[0] - p.rho0).abs().sum();
    chain.objective.residual_rho1 = (chain.marginals[N] - p.rho1).abs().sum();
    return chain;
}

/// Entropy report of an extracted chain without needing retained transitions.
inline EntropyReport entropy_report_from_objective(const ChainSolution& chain,
                                                   const ProblemSpec& p, double slack)
{
    EntropyReport r;
    r.scaled_relative_entropy = chain.objective.entropic;
    r.discrete_sre = chain.objective.sre;
    r.initial_term = p.time.h * discrete_kl(chain.marginals[0], p.rho0);
    r.gap = r.scaled_relative_entropy - r.initial_term - r.discrete_sre;
    r.slack = slack;
    r.satisfied = r.gap >= -slack;
    return r;
}

} // namespace esmot
