#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <thread>
#include <vector>

namespace esmot {

using Eigen::ArrayXd;
using Eigen::ArrayXi;
// Row-major so that per-slice / per-row segments are contiguous.
using ArrayXXdR = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Finite stand-in for log(0). Large enough that exp() underflows to exactly 0,
// small enough that sums of a few of them stay finite.
inline constexpr double k_log_zero = -1e30;

inline bool is_log_zero(double v) { return v <= 0.5 * k_log_zero; }

// log(sum(exp(a))) with the usual max shift; every exponentiated argument is <= 0.
inline double log_sum_exp(const Eigen::Ref<const ArrayXd>& a)
{
    const double m = a.maxCoeff();
    if (is_log_zero(m) || !std::isfinite(m))
        return k_log_zero;
    return m + std::log((a - m).exp().sum());
}

// Stabilized moments of a discrete tilted family.  Given log-weights a and
// displacements d, computes s_p = sum_k exp(a_k - max(a)) * d_k^p for p=0,1,2
// plus the shift itself.  Ratios s1/s0, s2/s0 are shift-independent.
struct ShiftedMoments {
    double shift = k_log_zero; // max of a
    double s0 = 0.0;
    double s1 = 0.0;
    double s2 = 0.0;
};

inline ShiftedMoments shifted_moments(const Eigen::Ref<const ArrayXd>& a,
                                      const Eigen::Ref<const ArrayXd>& d,
                                      Eigen::Ref<ArrayXd> work)
{
    ShiftedMoments out;
    out.shift = a.maxCoeff();
    if (is_log_zero(out.shift) || !std::isfinite(out.shift))
        return out;
    auto w = work.head(a.size());
    w = (a - out.shift).exp();
    out.s0 = w.sum();
    out.s1 = (w * d).sum();
    out.s2 = (w * d * d).sum();
    return out;
}

// Static-chunk parallel loop over [0, n).  Chunk layout depends only on
// (n, threads), and chunks never share output indices, so results are
// reproducible for a fixed thread count.  The first exception (in chunk
// order) is rethrown on the calling thread.
template <class F>
void parallel_for(std::int64_t n, int threads, F&& body)
{
    if (threads <= 1 || n < 2 * threads) {
        for (std::int64_t i = 0; i < n; ++i)
            body(i);
        return;
    }
    const std::int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi)
            break;
        pool.emplace_back([&body, &err = errors[static_cast<std::size_t>(t)], lo, hi] {
            try {
                for (std::int64_t i = lo; i < hi; ++i)
                    body(i);
            } catch (...) {
                err = std::current_exception();
            }
        });
    }
    for (auto& th : pool)
        th.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

inline double normal_pdf(double x, double mean, double std_dev)
{
    const double z = (x - mean) / std_dev;
    return std::exp(-0.5 * z * z) / (std_dev * std::sqrt(2.0 * M_PI));
}

inline double normal_cdf(double x, double mean, double std_dev)
{
    return 0.5 * std::erfc(-(x - mean) / (std_dev * std::sqrt(2.0)));
}

} // namespace esmot
