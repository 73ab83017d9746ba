#include "esmot/density.hpp"
#include "esmot/payoff.hpp"
#include "esmot/problem.hpp"
#include "helpers.hpp"

#include <catch2/catch.hpp>

#include <cmath>
#include <cstring>
#include <random>

using namespace esmot;

TEST_CASE("discretized Gaussian is centered")
{
    auto [tg, sg] = build_grids(65, 64, 0.009, 0.0, 1.0);
    const ArrayXd m = discretize_density(DensitySpec::gaussian(0.5, 0.05), sg);
    CHECK(m.sum() == Approx(1.0).epsilon(1e-13));
    double mean = 0.0;
    for (int j = 0; j < sg.n_x; ++j)
        mean += m[j] * sg.x(j);
    CHECK(mean == Approx(0.5).margin(1e-6));
}

TEST_CASE("mixture preset weights are recovered by component fit")
{
    const ProblemConfig cfg = preset("gauss_mixture");
    auto [tg, sg] = build_grids(129, cfg.K, cfg.sigma_bar.max_sigma(), cfg.x_lo, cfg.x_hi);
    const ArrayXd m = discretize_density(cfg.rho1, sg);

    // Fit the three known component shapes to the discretized vector.
    Eigen::MatrixXd A(sg.n_x, 3);
    for (int c = 0; c < 3; ++c) {
        const auto& comp = cfg.rho1.components[static_cast<std::size_t>(c)];
        for (int j = 0; j < sg.n_x; ++j)
            A(j, c) = normal_pdf(sg.x(j), comp.mean, comp.std_dev) * sg.dx;
    }
    const Eigen::VectorXd w = A.colPivHouseholderQr().solve(m.matrix());
    CHECK(w[0] == Approx(0.6).margin(1e-6));
    CHECK(w[1] == Approx(0.2).margin(1e-6));
    CHECK(w[2] == Approx(0.2).margin(1e-6));
}

TEST_CASE("near-uniform density smoke test")
{
    auto [tg, sg] = build_grids(17, 32, 0.02, 0.0, 1.0);
    const ArrayXd m = discretize_density(DensitySpec::gaussian(0.5, 1e3), sg);
    CHECK(m.maxCoeff() / m.minCoeff() == Approx(1.0).margin(1e-5));
}

TEST_CASE("density entirely outside the domain is rejected")
{
    auto [tg, sg] = build_grids(17, 32, 0.02, 0.0, 1.0);
    CHECK_THROWS_AS(discretize_density(DensitySpec::gaussian(1e6, 1e-3), sg), std::domain_error);
}

TEST_CASE("kernel rows are stochastic with correct moments")
{
    const double sb = 0.011;
    auto [tg, sg] = build_grids(33, 64, sb, 0.0, 1.0);
    ProblemSpec p = test::make_problem(tg.N, sg.n_x, sg.dx, ReferenceVolSchedule::make_constant(sb),
                                       1e6, ArrayXd::Zero(sg.n_x), ArrayXd::Zero(sg.n_x));
    const BandedMatrix K = reference_kernel(3, p);
    const double habar = tg.h * sb * sb;
    const double step_std = std::sqrt(habar);

    // truncated-Gaussian variance by error-function quadrature at the actual cut
    const double c = K.halfwidth * sg.dx / step_std;
    const double phi_c = normal_pdf(c, 0.0, 1.0);
    const double z = 2.0 * normal_cdf(c, 0.0, 1.0) - 1.0;
    const double trunc_var = habar * (1.0 - 2.0 * c * phi_c / z);

    for (int j : { 0, 1, sg.n_x / 2, sg.n_x - 1 }) {
        double s = 0.0;
        for (int k = K.k_lo(j); k <= K.k_hi(j); ++k)
            s += K(j, k);
        CHECK(s == Approx(1.0).epsilon(1e-12));
    }
    for (int j : { sg.n_x / 3, sg.n_x / 2, 2 * sg.n_x / 3 }) {
        double m1 = 0.0, m2 = 0.0;
        for (int k = K.k_lo(j); k <= K.k_hi(j); ++k) {
            m1 += K(j, k) * (k - j) * sg.dx;
            m2 += K(j, k) * (k - j) * sg.dx * (k - j) * sg.dx;
        }
        CHECK(std::abs(m1) < 1e-8 * step_std);
        CHECK(m2 == Approx(habar).epsilon(5e-3));
        // lattice-sampling edge effect at the 5-sigma cut is ~5e-6 relative
        CHECK(m2 == Approx(trunc_var).epsilon(1e-5));
    }
}

TEST_CASE("payoff conjugacy")
{
    const QuadraticPayoff f = payoff_eval(QuadraticPayoff(2.5));
    CHECK(f.conjugate(0.0) == 0.0);
    CHECK(f.conjugate_grad(0.0) == 0.0);
    CHECK(f.conjugate(2.0 * f.gamma) == Approx(f.gamma).epsilon(1e-14));

    // sup_b (p b - F(b)) by scanning a fine b grid
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> pick(-10.0, 10.0);
    for (int trial = 0; trial < 100; ++trial) {
        const double pv = pick(rng);
        double best = -1e300;
        for (int i = 0; i <= 40000; ++i) {
            const double b = -4.0 + 8.0 * i / 40000.0;
            best = std::max(best, pv * b - f.value(b));
        }
        CHECK(f.conjugate(pv) == Approx(best).margin(1e-6));
        const double bstar = f.conjugate_grad(pv);
        CHECK(pv * bstar - f.value(bstar) == Approx(f.conjugate(pv)).margin(1e-12));
    }
}

TEST_CASE("presets are deterministic and carry the documented parameters")
{
    for (const auto& name : preset_names()) {
        const ProblemConfig a = preset(name);
        const ProblemConfig b = preset(name);
        const ProblemSpec pa = build_problem(a);
        const ProblemSpec pb = build_problem(b);
        REQUIRE(pa.rho0.size() == pb.rho0.size());
        CHECK(std::memcmp(pa.rho0.data(), pb.rho0.data(), sizeof(double) * pa.rho0.size()) == 0);
        CHECK(std::memcmp(pa.rho1.data(), pb.rho1.data(), sizeof(double) * pa.rho1.size()) == 0);
        CHECK(pa.payoff.gamma == pb.payoff.gamma);
        CHECK(pa.space.dx == pb.space.dx);
    }

    const ProblemConfig g = preset("gauss_convex");
    CHECK(g.gamma == 1e6);
    CHECK(g.K == 64);
    const double s0 = g.rho0.components[0].std_dev;
    const double s1 = g.rho1.components[0].std_dev;
    CHECK(std::sqrt(s1 * s1 - s0 * s0) == Approx(0.0075).epsilon(1e-12));
    CHECK(g.sigma_bar.max_sigma() == 0.009);
    CHECK(g.sigma_bar.max_sigma() > std::sqrt(s1 * s1 - s0 * s0));

    const ProblemConfig vj = preset("mixture_voljump");
    CHECK(vj.sigma_bar.sigma(0.5, 0.0) == 0.03);
    CHECK(vj.sigma_bar.sigma(0.05, 0.0) == 0.01);
    CHECK(vj.sigma_bar.sigma(0.3, 0.0) == 0.03);
    CHECK(vj.sigma_bar.sigma(0.71, 0.0) == 0.01);

    const ProblemConfig nc = preset("nonconvex_order");
    REQUIRE(nc.rho0.components.size() == 2);
    CHECK(nc.rho0.components[0].std_dev == 0.1);
    CHECK(nc.rho0.components[0].branch->left_of_cut);
    CHECK(nc.rho0.components[1].std_dev == 0.3);
    CHECK(nc.rho1.components[0].std_dev == 0.5);
    CHECK(nc.rho1.components[1].std_dev == 0.2);

    CHECK_THROWS_AS(preset("not_a_preset"), std::invalid_argument);
}
