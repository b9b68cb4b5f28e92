#pragma once

// Range/nullspace preconditioning built from the SVD of the stoichiometry
// matrix. Model derivatives live in span(U_R); conserved quantities are the
// nullspace coordinates z_N = U_N^T x, constant along any trajectory.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "json.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/stoich.hpp"

namespace rkinn {

struct ZState {
    Vector z_R;
    Vector z_N;
};

struct RangeNullBases {
    double tol = 0.0;  // relative rank cutoff used for M and the nested blocks
    std::size_t n = 0;
    std::size_t r = 0;
    Vector singular_values;
    Matrix U_R;  // n x r
    Matrix U_N;  // n x (n - r)

    std::vector<std::size_t> observable;
    std::vector<std::size_t> latent;
    Matrix Uo_R, Us_R, Uo_N, Us_N;  // row blocks

    Matrix Us_R_null;  // r x q_R, orthonormal basis of null(Us_R)
    Matrix Us_N_null;  // (n-r) x q_N, orthonormal basis of null(Us_N)
    Matrix Us_R_pinv;  // r x n_latent
    Matrix Us_N_pinv;  // (n-r) x n_latent

    std::size_t n_null() const noexcept { return n - r; }
    std::size_t n_latent() const noexcept { return latent.size(); }
    std::size_t n_observable() const noexcept { return observable.size(); }
};

/// Orthonormal range/nullspace bases of M with observable/latent row blocks
/// and the nested bases of the latent blocks. tol < 0 selects the default
/// rank cutoff max(n, m) * eps relative to the largest singular value.
inline RangeNullBases build_bases(const ReactionNetwork& net, double tol = -1.0) {
    const Matrix& M = net.stoichiometry();
    RangeNullBases b;
    b.tol = tol < 0 ? default_rank_tol(M) : tol;
    b.n = net.n_species();
    const SVDResult s = svd(M);
    b.singular_values = s.S;
    b.r = rank_of(s, b.tol);
    b.U_R = s.U.select_cols(0, b.r);
    b.U_N = s.U.select_cols(b.r, b.n - b.r);

    b.observable = net.observable_indices();
    b.latent = net.latent_indices();
    b.Uo_R = b.U_R.select_rows(b.observable);
    b.Us_R = b.U_R.select_rows(b.latent);
    b.Uo_N = b.U_N.select_rows(b.observable);
    b.Us_N = b.U_N.select_rows(b.latent);

    if (!b.latent.empty() && b.r > 0 && max_abs(b.Us_R) < b.tol)
        throw ConfigError("latent species have no range component; nested range basis is degenerate");

    b.Us_R_null = nullspace(b.Us_R, b.tol);
    b.Us_N_null = nullspace(b.Us_N, b.tol);
    b.Us_R_pinv = pinv(b.Us_R, b.tol);
    b.Us_N_pinv = pinv(b.Us_N, b.tol);
    return b;
}

inline ZState project(std::span<const double> v, const RangeNullBases& b) {
    detail::require(v.size() == b.n, "project: vector length does not match basis");
    return {matTvec(b.U_R, v), matTvec(b.U_N, v)};
}

inline Vector reconstruct(const ZState& z, const RangeNullBases& b) {
    Vector x = matvec(b.U_R, z.z_R);
    const Vector xn = matvec(b.U_N, z.z_N);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += xn[i];
    return x;
}

/// A-priori nullspace coordinates: mean over observations of U_N^T x.
inline Vector estimate_zN(std::span<const Vector> observations, const RangeNullBases& b) {
    if (observations.empty()) throw std::invalid_argument("estimate_zN: no observations");
    Vector z(b.n_null(), 0.0);
    for (const auto& x : observations) {
        const Vector zi = matTvec(b.U_N, x);
        for (std::size_t k = 0; k < z.size(); ++k) z[k] += zi[k];
    }
    for (double& v : z) v /= static_cast<double>(observations.size());
    return z;
}

/// U_R^T Sigma U_R, symmetrized.
inline Matrix project_covariance(const Matrix& sigma, const RangeNullBases& b) {
    detail::require(sigma.rows() == b.n && sigma.cols() == b.n, "project_covariance: shape mismatch");
    return symmetrize(congruence(b.U_R, sigma));
}

/// max_i |U_N^T xdot_i|; zero for any derivative produced by the kinetic model.
inline double nullspace_invariance_residual(std::span<const Vector> derivatives, const RangeNullBases& b) {
    double worst = 0.0;
    for (const auto& d : derivatives) worst = std::max(worst, max_abs(matTvec(b.U_N, d)));
    return worst;
}

/// Direction in nullspace coordinates along which the latent block sums to
/// one, when the site balance is a conservation law of the network; empty
/// otherwise.
inline Vector site_balance_direction(const RangeNullBases& b) {
    if (b.latent.empty()) return {};
    Vector e(b.n, 0.0);
    for (std::size_t i : b.latent) e[i] = 1.0;
    const Vector en = matTvec(b.U_N, e);
    // e must lie entirely in span(U_N)
    if (std::abs(dot(en, en) - static_cast<double>(b.latent.size())) > 1e-9) return {};
    return en;
}

/// Shift z_N along the site-balance direction so the latent block of
/// U_N z_N sums to exactly one. No-op when the network has no site balance.
inline Vector normalize_site_balance(Vector z_N, const RangeNullBases& b) {
    const Vector en = site_balance_direction(b);
    if (en.empty()) return z_N;
    const double total = dot(en, z_N);
    const double shift = (1.0 - total) / dot(en, en);
    for (std::size_t k = 0; k < z_N.size(); ++k) z_N[k] += shift * en[k];
    return z_N;
}

namespace detail {
inline nlohmann::json matrix_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}
}  // namespace detail

/// Debug dump (row-major matrices, tolerance recorded).
inline nlohmann::json bases_to_json(const RangeNullBases& b) {
    return {
        {"schema", "rkinn-bases/1"},
        {"tol", b.tol},
        {"n", b.n},
        {"rank", b.r},
        {"singular_values", b.singular_values},
        {"observable", b.observable},
        {"latent", b.latent},
        {"U_R", detail::matrix_json(b.U_R)},
        {"U_N", detail::matrix_json(b.U_N)},
        {"latent_range_null", detail::matrix_json(b.Us_R_null)},
        {"latent_null_null", detail::matrix_json(b.Us_N_null)},
    };
}

}  // namespace rkinn
