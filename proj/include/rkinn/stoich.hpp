#pragma once

// Mean-field microkinetic models: xdot = M (exp(p) o psi(x)) with mass-action
// power-law rates whose orders are read off the reactant (negative) entries
// of the stoichiometry matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"

namespace rkinn {

class ReactionNetwork {
public:
    struct Reactant {
        std::size_t species;
        int order;
    };

    ReactionNetwork() = default;

    ReactionNetwork(std::vector<std::string> species, std::vector<bool> latent, Matrix M,
                    std::vector<std::string> reactions)
        : species_(std::move(species)),
          latent_(std::move(latent)),
          M_(std::move(M)),
          reactions_(std::move(reactions)) {
        validate();
        build_orders();
    }

    std::size_t n_species() const noexcept { return species_.size(); }
    std::size_t n_reactions() const noexcept { return M_.cols(); }

    const std::vector<std::string>& species() const noexcept { return species_; }
    const std::vector<bool>& latent_mask() const noexcept { return latent_; }
    const std::vector<std::string>& reactions() const noexcept { return reactions_; }
    const Matrix& stoichiometry() const noexcept { return M_; }
    const std::vector<std::vector<Reactant>>& reactants() const noexcept { return reactants_; }

    std::vector<std::size_t> observable_indices() const { return indices(false); }
    std::vector<std::size_t> latent_indices() const { return indices(true); }

    /// psi_j = prod_i x_i^{max(-M_ij, 0)}, with 0^0 = 1.
    Vector psi(std::span<const double> x) const {
        check_state(x);
        Vector out(n_reactions());
        psi_into(x, out);
        return out;
    }

    /// M (exp(p) o psi(x)).
    Vector rhs(std::span<const double> x, std::span<const double> p) const {
        check_state(x);
        check_params(p);
        Vector k(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) k[j] = std::exp(p[j]);
        Vector out(n_species());
        rhs_k(x, k, out);
        return out;
    }

    /// d rhs / d x  (n x n).
    Matrix jac_x(std::span<const double> x, std::span<const double> p) const {
        check_state(x);
        check_params(p);
        Matrix J(n_species(), n_species());
        for (std::size_t j = 0; j < n_reactions(); ++j) {
            const double kj = std::exp(p[j]);
            const auto& rs = reactants_[j];
            for (std::size_t a = 0; a < rs.size(); ++a) {
                // d psi_j / d x_{rs[a]}
                double d = rs[a].order * int_pow(x[rs[a].species], rs[a].order - 1);
                for (std::size_t b = 0; b < rs.size(); ++b)
                    if (b != a) d *= int_pow(x[rs[b].species], rs[b].order);
                d *= kj;
                if (d == 0.0) continue;
                for (std::size_t i = 0; i < n_species(); ++i) J(i, rs[a].species) += M_(i, j) * d;
            }
        }
        return J;
    }

    /// d rhs / d p = M diag(exp(p) o psi(x))  (n x m).
    Matrix jac_p(std::span<const double> x, std::span<const double> p) const {
        check_state(x);
        check_params(p);
        Vector ps(n_reactions());
        psi_into(x, ps);
        Matrix J(n_species(), n_reactions());
        for (std::size_t j = 0; j < n_reactions(); ++j) {
            const double r = std::exp(p[j]) * ps[j];
            for (std::size_t i = 0; i < n_species(); ++i) J(i, j) = M_(i, j) * r;
        }
        return J;
    }

    // Unchecked kernels for inner loops; k are rate constants, not logs.
    void psi_into(std::span<const double> x, std::span<double> out) const noexcept {
        for (std::size_t j = 0; j < reactants_.size(); ++j) {
            double v = 1.0;
            for (const auto& r : reactants_[j]) v *= int_pow(x[r.species], r.order);
            out[j] = v;
        }
    }
    void rhs_k(std::span<const double> x, std::span<const double> k, std::span<double> out) const noexcept {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t j = 0; j < reactants_.size(); ++j) {
            double v = k[j];
            for (const auto& r : reactants_[j]) v *= int_pow(x[r.species], r.order);
            if (v == 0.0) continue;
            for (const auto& [i, s] : columns_[j]) out[i] += s * v;
        }
    }

    /// Vector-Jacobian products: gx += jac_x^T h and gp += jac_p^T h, for
    /// rate constants k (not logs).
    void vjp_k(std::span<const double> x, std::span<const double> k, std::span<const double> h,
               std::span<double> gx, std::span<double> gp) const noexcept {
        for (std::size_t j = 0; j < reactants_.size(); ++j) {
            double mh = 0.0;
            for (const auto& [i, s] : columns_[j]) mh += s * h[i];
            if (mh == 0.0) continue;
            const auto& rs = reactants_[j];
            const double w = k[j] * mh;
            double psi = 1.0;
            for (const auto& r : rs) psi *= int_pow(x[r.species], r.order);
            gp[j] += w * psi;
            for (std::size_t a = 0; a < rs.size(); ++a) {
                double d = rs[a].order * int_pow(x[rs[a].species], rs[a].order - 1);
                for (std::size_t b = 0; b < rs.size(); ++b)
                    if (b != a) d *= int_pow(x[rs[b].species], rs[b].order);
                gx[rs[a].species] += w * d;
            }
        }
    }

    /// Nonzero stoichiometric entries of column j as (species, coefficient).
    const std::vector<std::pair<std::size_t, double>>& column_entries(std::size_t j) const {
        return columns_[j];
    }

    static double int_pow(double x, int e) noexcept {
        double r = 1.0;
        for (int i = 0; i < e; ++i) r *= x;
        return r;
    }

    void check_state(std::span<const double> x) const {
        if (x.size() != n_species())
            throw std::invalid_argument("state has length " + std::to_string(x.size()) + ", expected " +
                                        std::to_string(n_species()));
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!std::isfinite(x[i]))
                throw std::invalid_argument("non-finite state entry for species '" + species_[i] + "'");
    }
    void check_params(std::span<const double> p) const {
        if (p.size() != n_reactions())
            throw std::invalid_argument("parameter vector has length " + std::to_string(p.size()) +
                                        ", expected " + std::to_string(n_reactions()));
        for (double v : p)
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite log rate constant");
    }

private:
    void validate() const {
        const std::size_t n = species_.size();
        if (n < 2) throw ConfigError("network needs at least 2 species");
        if (latent_.size() != n) throw ConfigError("latent mask length does not match species count");
        if (M_.rows() != n) throw ConfigError("stoichiometry matrix row count does not match species count");
        if (M_.cols() < 1) throw ConfigError("network needs at least 1 reaction");
        if (reactions_.size() != M_.cols())
            throw ConfigError("reaction label count does not match stoichiometry columns");
        for (std::size_t j = 0; j < M_.cols(); ++j) {
            bool consumes = false;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = M_(i, j);
                if (v != std::round(v)) throw ConfigError("stoichiometric coefficients must be integers");
                consumes = consumes || v < 0;
            }
            if (!consumes) throw ConfigError("reaction '" + reactions_[j] + "' consumes no species");
        }
    }

    void build_orders() {
        reactants_.assign(M_.cols(), {});
        columns_.assign(M_.cols(), {});
        for (std::size_t j = 0; j < M_.cols(); ++j)
            for (std::size_t i = 0; i < M_.rows(); ++i) {
                const double v = M_(i, j);
                if (v < 0) reactants_[j].push_back({i, static_cast<int>(-v)});
                if (v != 0) columns_[j].emplace_back(i, v);
            }
    }

    std::vector<std::size_t> indices(bool latent) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < latent_.size(); ++i)
            if (latent_[i] == latent) idx.push_back(i);
        return idx;
    }

    std::vector<std::string> species_;
    std::vector<bool> latent_;
    Matrix M_;
    std::vector<std::string> reactions_;
    std::vector<std::vector<Reactant>> reactants_;
    std::vector<std::vector<std::pair<std::size_t, double>>> columns_;
};

/// A network file plus the optional reference rate constants it carries.
struct NetworkFile {
    ReactionNetwork network;
    std::string name;
    Vector rate_constants;  // empty when the file has none
    Vector ln_k0;           // as tabulated in the file (may be rounded)

    /// Log rate constants used as ground truth: ln(rate_constants) when
    /// present, otherwise ln_k0.
    Vector true_log_k() const {
        if (!rate_constants.empty()) {
            Vector p(rate_constants.size());
            for (std::size_t j = 0; j < p.size(); ++j) p[j] = std::log(rate_constants[j]);
            return p;
        }
        return ln_k0;
    }
};

inline NetworkFile network_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"schema", "name",        "species", "latent",
                                                   "M",      "reactions",   "rate_constants", "ln_k0"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("network file: unknown key '" + key + "'");
    for (const char* req : {"species", "latent", "M", "reactions"})
        if (!j.contains(req)) throw ConfigError(std::string("network file: missing key '") + req + "'");
    try {
        auto species = j.at("species").get<std::vector<std::string>>();
        auto latent = j.at("latent").get<std::vector<bool>>();
        auto rows = j.at("M").get<std::vector<std::vector<int>>>();
        auto reactions = j.at("reactions").get<std::vector<std::string>>();
        Matrix M(rows.size(), rows.empty() ? 0 : rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != M.cols()) throw ConfigError("network file: ragged M");
            for (std::size_t k = 0; k < M.cols(); ++k) M(i, k) = rows[i][k];
        }
        NetworkFile f{ReactionNetwork(std::move(species), std::move(latent), std::move(M), std::move(reactions)),
                      j.value("name", std::string{}), {}, {}};
        if (j.contains("rate_constants")) f.rate_constants = j.at("rate_constants").get<Vector>();
        if (j.contains("ln_k0")) f.ln_k0 = j.at("ln_k0").get<Vector>();
        const std::size_t m = f.network.n_reactions();
        if (!f.rate_constants.empty() && f.rate_constants.size() != m)
            throw ConfigError("network file: rate_constants length mismatch");
        if (!f.ln_k0.empty() && f.ln_k0.size() != m) throw ConfigError("network file: ln_k0 length mismatch");
        for (double k : f.rate_constants)
            if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("network file: rate constants must be positive");
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("network file: ") + e.what());
    }
}

inline nlohmann::json network_to_json(const NetworkFile& f) {
    const auto& net = f.network;
    std::vector<std::vector<int>> rows(net.n_species(), std::vector<int>(net.n_reactions()));
    for (std::size_t i = 0; i < net.n_species(); ++i)
        for (std::size_t j = 0; j < net.n_reactions(); ++j)
            rows[i][j] = static_cast<int>(net.stoichiometry()(i, j));
    nlohmann::json j;
    j["schema"] = "rkinn-network/1";
    if (!f.name.empty()) j["name"] = f.name;
    j["species"] = net.species();
    j["latent"] = net.latent_mask();
    j["M"] = rows;
    j["reactions"] = net.reactions();
    if (!f.rate_constants.empty()) j["rate_constants"] = f.rate_constants;
    if (!f.ln_k0.empty()) j["ln_k0"] = f.ln_k0;
    return j;
}

inline NetworkFile load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open network file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("network file '" + path + "': " + e.what());
    }
    return network_from_json(j);
}

}  // namespace rkinn
