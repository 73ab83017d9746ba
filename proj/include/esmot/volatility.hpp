#pragma once

#include "esmot/numerics.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace esmot {

/// Reference volatility sigma_bar as a function of (t, x).  Three
/// representations: a constant, a piecewise-constant-in-time table, or a
/// piecewise-constant (t, x) lookup table.  The reference diffusion
/// coefficient is abar = sigma_bar^2.
struct ReferenceVolSchedule {
    enum class Kind { Constant, TimeTable, TxTable };

    struct TimeInterval {
        double t_lo = 0.0;
        double t_hi = 0.0; // closed interval [t_lo, t_hi]
        double value = 0.0;
    };

    Kind kind = Kind::Constant;
    double constant = 0.0;

    // TimeTable: first matching interval wins, otherwise default_value.
    std::vector<TimeInterval> intervals;
    double default_value = 0.0;

    // TxTable: cell (it, ix) covers [t_breaks[it], t_breaks[it+1]) x
    // [x_breaks[ix], x_breaks[ix+1]); last cells extend to +inf.
    std::vector<double> t_breaks;
    std::vector<double> x_breaks;
    std::vector<std::vector<double>> values; // values[it][ix]

    static ReferenceVolSchedule make_constant(double sigma)
    {
        if (!(sigma > 0.0))
            throw std::invalid_argument("ReferenceVolSchedule: sigma_bar must be positive");
        ReferenceVolSchedule s;
        s.kind = Kind::Constant;
        s.constant = sigma;
        return s;
    }

    static ReferenceVolSchedule make_time_table(std::vector<TimeInterval> ivals, double fallback)
    {
        if (!(fallback > 0.0))
            throw std::invalid_argument("ReferenceVolSchedule: fallback must be positive");
        for (const auto& iv : ivals)
            if (!(iv.value > 0.0))
                throw std::invalid_argument("ReferenceVolSchedule: interval value must be positive");
        ReferenceVolSchedule s;
        s.kind = Kind::TimeTable;
        s.intervals = std::move(ivals);
        s.default_value = fallback;
        return s;
    }

    static ReferenceVolSchedule make_tx_table(std::vector<double> tb, std::vector<double> xb,
                                              std::vector<std::vector<double>> vals)
    {
        if (tb.empty() || xb.empty() || vals.size() != tb.size())
            throw std::invalid_argument("ReferenceVolSchedule: inconsistent tx table");
        for (const auto& row : vals) {
            if (row.size() != xb.size())
                throw std::invalid_argument("ReferenceVolSchedule: inconsistent tx table row");
            for (double v : row)
                if (!(v > 0.0))
                    throw std::invalid_argument("ReferenceVolSchedule: tx value must be positive");
        }
        ReferenceVolSchedule s;
        s.kind = Kind::TxTable;
        s.t_breaks = std::move(tb);
        s.x_breaks = std::move(xb);
        s.values = std::move(vals);
        return s;
    }

    bool space_constant() const { return kind != Kind::TxTable; }

    double sigma(double t, double x) const
    {
        switch (kind) {
        case Kind::Constant:
            return constant;
        case Kind::TimeTable:
            for (const auto& iv : intervals)
                if (t >= iv.t_lo && t <= iv.t_hi)
                    return iv.value;
            return default_value;
        case Kind::TxTable: {
            const auto cell = [](const std::vector<double>& breaks, double v) {
                auto it = std::upper_bound(breaks.begin(), breaks.end(), v);
                return static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - breaks.begin()) - 1));
            };
            return values[cell(t_breaks, t)][cell(x_breaks, x)];
        }
        }
        return constant;
    }

    double abar(double t, double x) const
    {
        const double s = sigma(t, x);
        return s * s;
    }

    /// Largest sigma over the whole schedule (drives the meshing rule).
    double max_sigma() const
    {
        switch (kind) {
        case Kind::Constant:
            return constant;
        case Kind::TimeTable: {
            double m = default_value;
            for (const auto& iv : intervals)
                m = std::max(m, iv.value);
            return m;
        }
        case Kind::TxTable: {
            double m = 0.0;
            for (const auto& row : values)
                for (double v : row)
                    m = std::max(m, v);
            return m;
        }
        }
        return constant;
    }

    /// Largest sigma over x at a fixed time (drives the per-slice band).
    double max_sigma_at(double t) const
    {
        if (kind != Kind::TxTable)
            return sigma(t, 0.0);
        double m = 0.0;
        const auto it = [&] {
            auto u = std::upper_bound(t_breaks.begin(), t_breaks.end(), t);
            return static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (u - t_breaks.begin()) - 1));
        }();
        for (double v : values[it])
            m = std::max(m, v);
        return m;
    }
};

} // namespace esmot
