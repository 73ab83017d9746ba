#pragma once

#include "esmot/chain.hpp"
#include "esmot/problem.hpp"
#include "esmot/sinkhorn.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace esmot {

using nlohmann::json;

inline constexpr int k_schema_version = 1;

// Shortest round-trip decimal representation.
inline std::string fmt_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// JSON conversions
// ---------------------------------------------------------------------------

inline json to_json(const ReferenceVolSchedule& s)
{
    switch (s.kind) {
    case ReferenceVolSchedule::Kind::Constant:
        return json { { "type", "constant" }, { "value", s.constant } };
    case ReferenceVolSchedule::Kind::TimeTable: {
        json ivals = json::array();
        for (const auto& iv : s.intervals)
            ivals.push_back({ { "t_lo", iv.t_lo }, { "t_hi", iv.t_hi }, { "value", iv.value } });
        return json { { "type", "time_table" }, { "intervals", ivals }, { "default", s.default_value } };
    }
    case ReferenceVolSchedule::Kind::TxTable:
        return json { { "type", "tx_table" },
                      { "t_breaks", s.t_breaks },
                      { "x_breaks", s.x_breaks },
                      { "values", s.values } };
    }
    throw std::logic_error("unreachable");
}

inline ReferenceVolSchedule vol_schedule_from_json(const json& j)
{
    const std::string type = j.at("type").get<std::string>();
    if (type == "constant")
        return ReferenceVolSchedule::make_constant(j.at("value").get<double>());
    if (type == "time_table") {
        std::vector<ReferenceVolSchedule::TimeInterval> ivals;
        for (const auto& iv : j.at("intervals"))
            ivals.push_back({ iv.at("t_lo").get<double>(), iv.at("t_hi").get<double>(),
                              iv.at("value").get<double>() });
        return ReferenceVolSchedule::make_time_table(std::move(ivals), j.at("default").get<double>());
    }
    if (type == "tx_table")
        return ReferenceVolSchedule::make_tx_table(j.at("t_breaks").get<std::vector<double>>(),
                                                   j.at("x_breaks").get<std::vector<double>>(),
                                                   j.at("values").get<std::vector<std::vector<double>>>());
    throw std::invalid_argument("sigma_bar: unknown type '" + type + "'");
}

inline json to_json(const DensitySpec& d)
{
    json comps = json::array();
    for (const auto& c : d.components) {
        json jc { { "weight", c.weight }, { "mean", c.mean }, { "std", c.std_dev } };
        if (c.branch)
            jc["branch"] = { { "side", c.branch->left_of_cut ? "le" : "gt" }, { "cut", c.branch->cut } };
        comps.push_back(jc);
    }
    return json { { "components", comps } };
}

inline DensitySpec density_from_json(const json& j)
{
    DensitySpec d;
    for (const auto& jc : j.at("components")) {
        GaussianComponent c;
        c.weight = jc.at("weight").get<double>();
        c.mean = jc.at("mean").get<double>();
        c.std_dev = jc.at("std").get<double>();
        if (jc.contains("branch")) {
            const std::string side = jc["branch"].at("side").get<std::string>();
            if (side != "le" && side != "gt")
                throw std::invalid_argument("density branch side must be 'le' or 'gt'");
            c.branch = GaussianComponent::Branch { side == "le", jc["branch"].at("cut").get<double>() };
        }
        d.components.push_back(c);
    }
    d.validate();
    return d;
}

inline json to_json(const SolverParams& s)
{
    return json { { "max_cycles", s.max_cycles },
                  { "stop_tol", s.stop_tol },
                  { "marginal_tol", s.marginal_tol },
                  { "newton_tol", s.newton_tol },
                  { "newton_max_iter", s.newton_max_iter },
                  { "bracket_expansions", s.bracket_expansions },
                  { "bracket_guess", s.bracket_guess },
                  { "threads", s.threads },
                  { "mass_floor_rel", s.mass_floor_rel } };
}

inline SolverParams solver_params_from_json(const json& j)
{
    SolverParams s;
    if (j.contains("max_cycles"))
        s.max_cycles = j["max_cycles"].get<int>();
    if (j.contains("stop_tol"))
        s.stop_tol = j["stop_tol"].get<double>();
    if (j.contains("marginal_tol"))
        s.marginal_tol = j["marginal_tol"].get<double>();
    if (j.contains("newton_tol"))
        s.newton_tol = j["newton_tol"].get<double>();
    if (j.contains("newton_max_iter"))
        s.newton_max_iter = j["newton_max_iter"].get<int>();
    if (j.contains("bracket_expansions"))
        s.bracket_expansions = j["bracket_expansions"].get<int>();
    if (j.contains("bracket_guess"))
        s.bracket_guess = j["bracket_guess"].get<double>();
    if (j.contains("threads"))
        s.threads = j["threads"].get<int>();
    if (j.contains("mass_floor_rel"))
        s.mass_floor_rel = j["mass_floor_rel"].get<double>();
    return s;
}

inline json to_json(const ProblemConfig& c)
{
    return json { { "schema_version", k_schema_version },
                  { "name", c.name },
                  { "N", c.N },
                  { "K", c.K },
                  { "domain", { c.x_lo, c.x_hi } },
                  { "gamma", c.gamma },
                  { "kurtosis_alpha", c.kurtosis_alpha },
                  { "sigma_bar", to_json(c.sigma_bar) },
                  { "rho0", to_json(c.rho0) },
                  { "rho1", to_json(c.rho1) },
                  { "solver", to_json(c.solver) } };
}

inline ProblemConfig problem_config_from_json(const json& j)
{
    ProblemConfig c;
    if (j.contains("name"))
        c.name = j["name"].get<std::string>();
    c.N = j.at("N").get<int>();
    if (j.contains("K"))
        c.K = j["K"].get<int>();
    if (j.contains("domain")) {
        c.x_lo = j["domain"].at(0).get<double>();
        c.x_hi = j["domain"].at(1).get<double>();
    }
    if (j.contains("gamma"))
        c.gamma = j["gamma"].get<double>();
    if (j.contains("kurtosis_alpha"))
        c.kurtosis_alpha = j["kurtosis_alpha"].get<double>();
    c.sigma_bar = vol_schedule_from_json(j.at("sigma_bar"));
    c.rho0 = density_from_json(j.at("rho0"));
    c.rho1 = density_from_json(j.at("rho1"));
    if (j.contains("solver"))
        c.solver = solver_params_from_json(j["solver"]);
    return c;
}

inline json to_json(const ObjectiveDecomposition& o)
{
    return json { { "kinetic", o.kinetic },
                  { "entropic", o.entropic },
                  { "sre", o.sre },
                  { "residual_rho0", o.residual_rho0 },
                  { "residual_rho1", o.residual_rho1 } };
}

inline json to_json(const EntropyReport& r)
{
    return json { { "scaled_relative_entropy", r.scaled_relative_entropy },
                  { "discrete_sre", r.discrete_sre },
                  { "initial_term", r.initial_term },
                  { "gap", r.gap },
                  { "slack", r.slack },
                  { "satisfied", r.satisfied } };
}

/// One trace line (line-delimited JSON for live monitoring).
inline json to_json(const CycleStats& c)
{
    json j { { "cycle", c.cycle },
             { "rel_change", c.rel_linf_change },
             { "dual_objective", c.dual_objective },
             { "residual_rho0", c.residual_rho0 },
             { "residual_rho1", c.residual_rho1 },
             { "wall_seconds", c.wall_seconds } };
    if (!c.update_objectives.empty())
        j["update_objectives"] = c.update_objectives;
    return j;
}

// ---------------------------------------------------------------------------
// CSV surfaces: first row = node coordinates, first column = slice times.
// ---------------------------------------------------------------------------

inline void write_surface_csv(std::ostream& os, const ArrayXXdR& surface,
                              const ProblemSpec& p, int first_slice,
                              const std::vector<ArrayXd>* mask_marginals = nullptr,
                              double mass_floor_rel = 0.0)
{
    const int n_x = p.space.n_x;
    os << "t";
    for (int j = 0; j < n_x; ++j)
        os << ',' << fmt_double(p.space.x(j));
    os << '\n';
    for (int i = 0; i < surface.rows(); ++i) {
        os << fmt_double(p.time.t(first_slice + i));
        double floor = 0.0;
        if (mask_marginals != nullptr) {
            const ArrayXd& m = (*mask_marginals)[static_cast<std::size_t>(first_slice + i)];
            floor = mass_floor_rel * m.maxCoeff();
        }
        for (int j = 0; j < n_x; ++j) {
            const bool masked = mask_marginals != nullptr
                && (*mask_marginals)[static_cast<std::size_t>(first_slice + i)][j] < floor;
            os << ',' << (masked ? "nan" : fmt_double(surface(i, j)));
        }
        os << '\n';
    }
}

inline void write_marginals_csv(std::ostream& os, const std::vector<ArrayXd>& marginals,
                                const ProblemSpec& p)
{
    const int n_x = p.space.n_x;
    os << "t";
    for (int j = 0; j < n_x; ++j)
        os << ',' << fmt_double(p.space.x(j));
    os << '\n';
    for (std::size_t i = 0; i < marginals.size(); ++i) {
        os << fmt_double(p.time.t(static_cast<int>(i)));
        for (int j = 0; j < n_x; ++j)
            os << ',' << fmt_double(marginals[i][j]);
        os << '\n';
    }
}

inline void write_file(const std::string& path, const std::string& content)
{
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot open '" + path + "' for writing");
    f << content;
}

/// Parse JSON with 1-based line diagnostics on failure.
inline json parse_json_text(const std::string& text, const std::string& origin)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1;
        for (std::size_t i = 0; i < std::min(e.byte, text.size()); ++i)
            if (text[i] == '\n')
                ++line;
        throw std::invalid_argument(origin + ":" + std::to_string(line) + ": " + e.what());
    }
}

inline json load_json_file(const std::string& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::invalid_argument("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_json_text(ss.str(), path);
}

} // namespace esmot
