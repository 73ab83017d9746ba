#pragma once

#include "esmot/entropy.hpp"
#include "esmot/errors.hpp"
#include "esmot/numerics.hpp"
#include "esmot/problem.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace esmot {

/// Explicit joint probability tensor over all N+1 slices of a tiny instance.
struct DenseJoint {
    int n_x = 0;
    int N = 0;
    ArrayXd mass; // n_x^(N+1) entries, slice-0 index slowest

    DenseJoint() = default;
    DenseJoint(int nodes, int steps)
        : n_x(nodes)
        , N(steps)
    {
        std::int64_t size = 1;
        for (int i = 0; i <= steps; ++i)
            size *= nodes;
        mass = ArrayXd::Zero(size);
    }

    std::int64_t paths() const { return mass.size(); }

    int node_at(std::int64_t path, int slice) const
    {
        std::int64_t p = path;
        for (int i = N; i > slice; --i)
            p /= n_x;
        return static_cast<int>(p % n_x);
    }
};

struct BruteForceResult {
    DenseJoint joint;
    double value = 0.0;
    int steps = 0;
    double kkt_residual = 0.0;
};

namespace oracle_detail {

    struct PathDecode {
        std::vector<int> node; // per slice
    };

    inline void decode(std::int64_t path, int n_x, int N, std::vector<int>& out)
    {
        out.resize(N + 1);
        for (int i = N; i >= 0; --i) {
            out[i] = static_cast<int>(path % n_x);
            path /= n_x;
        }
    }

    // Slice marginals and first displacement moments, both linear in P.
    struct SliceStats {
        std::vector<ArrayXd> P;  // N entries + final: marginal mass per slice
        std::vector<ArrayXd> M1; // per slice i: sum over paths of mass * (x_{i+1}-x_i)
    };

    inline SliceStats slice_stats(const DenseJoint& J, const ProblemSpec& p)
    {
        SliceStats s;
        s.P.assign(J.N + 1, ArrayXd::Zero(J.n_x));
        s.M1.assign(J.N, ArrayXd::Zero(J.n_x));
        std::vector<int> nd;
        for (std::int64_t path = 0; path < J.paths(); ++path) {
            const double m = J.mass[path];
            if (m == 0.0)
                continue;
            decode(path, J.n_x, J.N, nd);
            for (int i = 0; i <= J.N; ++i)
                s.P[i][nd[i]] += m;
            for (int i = 0; i < J.N; ++i)
                s.M1[i][nd[i]] += m * (nd[i + 1] - nd[i]) * p.space.dx;
        }
        return s;
    }

    // Exact discrete objective: perspective form of the kinetic term plus the
    // scaled relative entropy against the reference chain tensor.
    inline double objective(const DenseJoint& J, const ArrayXd& log_ref, const ProblemSpec& p)
    {
        const SliceStats s = slice_stats(J, p);
        const double h = p.time.h;
        double kin = 0.0;
        for (int i = 0; i < J.N; ++i)
            for (int j = 0; j < J.n_x; ++j)
                if (s.P[i][j] > 0.0)
                    kin += s.M1[i][j] * s.M1[i][j] / s.P[i][j];
        kin *= p.payoff.gamma / h;
        double ent = 0.0;
        for (std::int64_t path = 0; path < J.paths(); ++path) {
            const double m = J.mass[path];
            if (m == 0.0)
                continue;
            if (is_log_zero(log_ref[path]))
                throw AbsoluteContinuityError("oracle: mass outside reference support");
            ent += m * (std::log(m) - log_ref[path]);
        }
        return kin + h * ent;
    }

    // Gradient of the kinetic (perspective) part alone.
    inline void kinetic_gradient(const DenseJoint& J, const ArrayXd& log_ref, const ProblemSpec& p,
                                 ArrayXd& grad)
    {
        const SliceStats s = slice_stats(J, p);
        const double h = p.time.h;
        const double gamma = p.payoff.gamma;
        grad.resize(J.paths());
        std::vector<int> nd;
        for (std::int64_t path = 0; path < J.paths(); ++path) {
            if (is_log_zero(log_ref[path])) {
                grad[path] = 0.0;
                continue;
            }
            decode(path, J.n_x, J.N, nd);
            double g = 0.0;
            for (int i = 0; i < J.N; ++i) {
                const int j = nd[i];
                if (s.P[i][j] <= 0.0)
                    continue;
                const double b = s.M1[i][j] / (h * s.P[i][j]);
                const double d = (nd[i + 1] - j) * p.space.dx;
                g += gamma * (2.0 * b * d - h * b * b);
            }
            grad[path] = g;
        }
    }

    // Full objective gradient: kinetic part plus h (log(P/Pbar) + 1).
    inline void gradient(const DenseJoint& J, const ArrayXd& log_ref, const ProblemSpec& p,
                         ArrayXd& grad)
    {
        kinetic_gradient(J, log_ref, p, grad);
        const double h = p.time.h;
        for (std::int64_t path = 0; path < J.paths(); ++path) {
            if (is_log_zero(log_ref[path]))
                continue;
            grad[path] += h * (std::log(std::max(J.mass[path], 1e-300)) - log_ref[path] + 1.0);
        }
    }

    // Iterative proportional fitting of the slice-0 and slice-N marginals.
    inline void project_marginals(DenseJoint& J, const ProblemSpec& p, double tol = 1e-13,
                                  int max_rounds = 400)
    {
        std::vector<int> nd;
        for (int round = 0; round < max_rounds; ++round) {
            SliceStats s = slice_stats(J, p);
            double r0 = (s.P[0] - p.rho0).abs().sum();
            double r1 = (s.P[J.N] - p.rho1).abs().sum();
            if (r0 < tol && r1 < tol)
                return;
            ArrayXd scale0(J.n_x), scale1(J.n_x);
            for (int j = 0; j < J.n_x; ++j)
                scale0[j] = s.P[0][j] > 0.0 ? p.rho0[j] / s.P[0][j] : 0.0;
            for (std::int64_t path = 0; path < J.paths(); ++path)
                if (J.mass[path] != 0.0)
                    J.mass[path] *= scale0[J.node_at(path, 0)];
            s = slice_stats(J, p);
            for (int j = 0; j < J.n_x; ++j)
                scale1[j] = s.P[J.N][j] > 0.0 ? p.rho1[j] / s.P[J.N][j] : 0.0;
            for (std::int64_t path = 0; path < J.paths(); ++path)
                if (J.mass[path] != 0.0)
                    J.mass[path] *= scale1[J.node_at(path, J.N)];
        }
        throw NonConvergenceError("oracle: marginal projection stalled (disconnected supports?)");
    }

    // Deviation of the gradient from an additive alpha(x_0) + beta(x_N) fit
    // over effectively charged paths, normalized by the gradient scale; zero
    // at a KKT point of the hard-constrained problem.  The fit solves the
    // (mass-weighted) normal equations exactly; the 2n x 2n system is tiny.
    inline double kkt_residual(const DenseJoint& J, const ArrayXd& grad, double mass_floor)
    {
        const int n = J.n_x;
        std::vector<std::int64_t> sel;
        for (std::int64_t path = 0; path < J.paths(); ++path)
            if (J.mass[path] > mass_floor)
                sel.push_back(path);
        if (sel.empty())
            return 0.0;

        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n, 2 * n);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(2 * n);
        std::vector<int> n0(sel.size()), nN(sel.size());
        std::vector<double> w(sel.size());
        for (std::size_t q = 0; q < sel.size(); ++q) {
            const std::int64_t path = sel[q];
            n0[q] = J.node_at(path, 0);
            nN[q] = J.node_at(path, J.N);
            w[q] = J.mass[path];
            const double r = grad[path];
            A(n0[q], n0[q]) += w[q];
            A(n + nN[q], n + nN[q]) += w[q];
            A(n0[q], n + nN[q]) += w[q];
            A(n + nN[q], n0[q]) += w[q];
            b[n0[q]] += w[q] * r;
            b[n + nN[q]] += w[q] * r;
        }
        A.diagonal().array() += 1e-14; // constant-shift gauge
        const Eigen::VectorXd ab = A.ldlt().solve(b);
        double resid = 0.0;
        double scale = 0.0;
        for (std::size_t q = 0; q < sel.size(); ++q) {
            resid = std::max(resid, std::abs(grad[sel[q]] - ab[n0[q]] - ab[n + nN[q]]));
            scale = std::max(scale, std::abs(grad[sel[q]]));
        }
        return resid / (1.0 + scale);
    }

} // namespace oracle_detail

/// Dense brute-force minimization of the discrete objective over the joint
/// simplex by entropic mirror descent with marginal projections.  Independent
/// of the message-passing solver; used to certify it on tiny instances.
inline BruteForceResult brute_force_primal(const ProblemSpec& p, double obj_tol = 1e-12,
                                           double kkt_tol = 1e-8, int max_steps = 5000)
{
    p.validate();
    if (p.space.n_x > 15 || p.time.N > 3)
        throw std::invalid_argument("brute_force_primal: instance too large (need n_x <= 15, N <= 3)");

    DenseJoint J(p.space.n_x, p.time.N);
    ArrayXd log_ref(J.paths());
    {
        std::vector<BandedMatrix> K;
        for (int i = 0; i < p.time.N; ++i)
            K.push_back(reference_kernel(i, p));
        std::vector<int> nd;
        for (std::int64_t path = 0; path < J.paths(); ++path) {
            oracle_detail::decode(path, J.n_x, J.N, nd);
            double lr = p.rho0[nd[0]] > 0.0 ? std::log(p.rho0[nd[0]]) : k_log_zero;
            for (int i = 0; i < J.N && !is_log_zero(lr); ++i) {
                const double kv = K[i](nd[i], nd[i + 1]);
                lr = kv > 0.0 ? lr + std::log(kv) : k_log_zero;
            }
            log_ref[path] = lr;
            J.mass[path] = is_log_zero(lr) ? 0.0 : std::exp(lr);
        }
    }
    oracle_detail::project_marginals(J, p);

    double value = oracle_detail::objective(J, log_ref, p);
    ArrayXd kin_grad, grad;
    BruteForceResult res;
    // Stationarity is certified on paths carrying at least 1e-6 of the peak
    // mass; lighter paths equilibrate last and move the objective by less
    // than their mass times a bounded gradient.
    const auto kkt_now = [&] {
        oracle_detail::gradient(J, log_ref, p, grad);
        return oracle_detail::kkt_residual(J, grad, 1e-6 * J.mass.maxCoeff());
    };

    // Prox-linear mirror steps: linearize the kinetic term, solve the
    // entropic part exactly (target Q ~ Pbar exp(-kin_grad/h)), project the
    // marginals, and damp by geometric mixing when the full step overshoots.
    double theta = 1.0;
    for (int step = 0; step < max_steps; ++step) {
        oracle_detail::kinetic_gradient(J, log_ref, p, kin_grad);
        const double h = p.time.h;

        DenseJoint trial = J;
        double new_value = value;
        bool accepted = false;
        for (int bt = 0; bt < 50; ++bt) {
            // damped target: log Q = (1-theta) log P + theta (log Pbar - kin_grad/h)
            double shift = -std::numeric_limits<double>::infinity();
            for (std::int64_t path = 0; path < J.paths(); ++path) {
                if (J.mass[path] <= 0.0) {
                    trial.mass[path] = k_log_zero;
                    continue;
                }
                const double lq = (1.0 - theta) * std::log(J.mass[path])
                    + theta * (log_ref[path] - kin_grad[path] / h);
                trial.mass[path] = lq;
                shift = std::max(shift, lq);
            }
            for (std::int64_t path = 0; path < J.paths(); ++path)
                trial.mass[path] = J.mass[path] > 0.0 && !is_log_zero(trial.mass[path])
                    ? std::exp(trial.mass[path] - shift)
                    : 0.0;
            bool projected = true;
            try {
                oracle_detail::project_marginals(trial, p);
            } catch (const NonConvergenceError&) {
                projected = false; // step too violent, damp further
            }
            if (projected) {
                new_value = oracle_detail::objective(trial, log_ref, p);
                if (new_value <= value + 1e-14 * (1.0 + std::abs(value))) {
                    accepted = true;
                    theta = std::min(1.0, theta * 2.0);
                    break;
                }
            }
            theta *= 0.5;
        }
        double decrease = 0.0;
        if (accepted) {
            decrease = value - new_value;
            J = std::move(trial);
            value = new_value;
            res.steps = step + 1;
        }
        if (!accepted || decrease < obj_tol) {
            // Progress per step is at or below the double-precision noise of
            // the objective; finish with an ungated damped fixed-point polish
            // that drives the slow light-mass modes to stationarity.
            res.kkt_residual = kkt_now();
            double theta_p = 0.25;
            for (int polish = 0; polish < 200 && res.kkt_residual >= kkt_tol; ++polish) {
                oracle_detail::kinetic_gradient(J, log_ref, p, kin_grad);
                DenseJoint next = J;
                double shift = -std::numeric_limits<double>::infinity();
                for (std::int64_t path = 0; path < J.paths(); ++path) {
                    if (J.mass[path] <= 0.0) {
                        next.mass[path] = k_log_zero;
                        continue;
                    }
                    const double lq = (1.0 - theta_p) * std::log(J.mass[path])
                        + theta_p * (log_ref[path] - kin_grad[path] / p.time.h);
                    next.mass[path] = lq;
                    shift = std::max(shift, lq);
                }
                for (std::int64_t path = 0; path < J.paths(); ++path)
                    next.mass[path] = J.mass[path] > 0.0 && !is_log_zero(next.mass[path])
                        ? std::exp(next.mass[path] - shift)
                        : 0.0;
                try {
                    oracle_detail::project_marginals(next, p);
                } catch (const NonConvergenceError&) {
                    theta_p *= 0.5;
                    continue;
                }
                const double trial_value = oracle_detail::objective(next, log_ref, p);
                if (trial_value > value + 1e-9 * (1.0 + std::abs(value))) {
                    theta_p *= 0.5; // overshooting the fixed point
                    continue;
                }
                J = std::move(next);
                value = trial_value;
                ++res.steps;
                if (polish % 10 == 9) {
                    const double k = kkt_now();
                    if (k > res.kkt_residual)
                        theta_p *= 0.5;
                    res.kkt_residual = k;
                }
            }
            res.kkt_residual = kkt_now();
            if (res.kkt_residual < kkt_tol)
                break;
            throw NonConvergenceError("brute_force_primal: stalled with KKT residual "
                                      + std::to_string(res.kkt_residual));
        }
        if (step == max_steps - 1)
            throw NonConvergenceError("brute_force_primal: no convergence, KKT residual "
                                      + std::to_string(kkt_now()) + ", last decrease "
                                      + std::to_string(decrease));
    }
    res.joint = std::move(J);
    res.value = value;
    return res;
}

struct TwoMarginalResult {
    ArrayXXdR coupling; // dense (tiny grids only)
    ArrayXd logu;
    ArrayXd logv;
    int iterations = 0;
};

/// Classical two-marginal Sinkhorn scaling against a banded kernel, run to
/// 1e-12 L1 marginal residuals.
inline TwoMarginalResult two_marginal_sinkhorn(const ArrayXd& rho0, const ArrayXd& rho1,
                                               const BandedMatrix& K, double tol = 1e-12,
                                               int max_iters = 200000)
{
    const int n = K.n;
    if (rho0.size() != n || rho1.size() != n)
        throw std::invalid_argument("two_marginal_sinkhorn: size mismatch");
    ArrayXXdR logK = ArrayXXdR::Constant(n, n, k_log_zero);
    for (int j = 0; j < n; ++j)
        for (int k = K.k_lo(j); k <= K.k_hi(j); ++k)
            if (K(j, k) > 0.0)
                logK(j, k) = std::log(K(j, k));

    ArrayXd logu = ArrayXd::Zero(n), logv = ArrayXd::Zero(n);
    TwoMarginalResult res;
    for (int it = 0; it < max_iters; ++it) {
        for (int j = 0; j < n; ++j) {
            const double lse = log_sum_exp(logK.row(j).transpose() + logv);
            if (rho0[j] > 0.0 && is_log_zero(lse))
                throw AbsoluteContinuityError("two_marginal_sinkhorn: disconnected supports");
            logu[j] = rho0[j] > 0.0 ? std::log(rho0[j]) - lse : k_log_zero;
        }
        double r1 = 0.0;
        ArrayXd col(n);
        for (int k = 0; k < n; ++k) {
            col[k] = log_sum_exp(logK.col(k) + logu);
            r1 += std::abs(std::exp(col[k] + logv[k]) - rho1[k]);
        }
        for (int k = 0; k < n; ++k) {
            if (rho1[k] > 0.0 && is_log_zero(col[k]))
                throw AbsoluteContinuityError("two_marginal_sinkhorn: disconnected supports");
            logv[k] = rho1[k] > 0.0 ? std::log(rho1[k]) - col[k] : k_log_zero;
        }
        // After the v update the column marginal is exact; check the row side.
        double r0 = 0.0;
        for (int j = 0; j < n; ++j)
            r0 += std::abs(std::exp(log_sum_exp(logK.row(j).transpose() + logv) + logu[j]) - rho0[j]);
        res.iterations = it + 1;
        if (r0 < tol && r1 < tol)
            break;
        if (it == max_iters - 1)
            throw NonConvergenceError("two_marginal_sinkhorn: no convergence, residual "
                                      + std::to_string(r0));
    }
    res.coupling.resize(n, n);
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
            const double lg = logK(j, k);
            res.coupling(j, k) = is_log_zero(lg) ? 0.0 : std::exp(logu[j] + lg + logv[k]);
        }
    res.logu = std::move(logu);
    res.logv = std::move(logv);
    return res;
}

} // namespace esmot
