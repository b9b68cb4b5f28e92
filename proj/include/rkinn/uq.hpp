#pragma once

// Post-training uncertainty: Hessian of the rKINN loss over the kinetic
// parameters (optionally jointly with calibration factors), asymptotic and
// conditional covariances, 2-sigma bars, and the first-order optimality
// residuals of the likelihood.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/mle.hpp"
#include "rkinn/surrogate.hpp"

namespace rkinn {

/// g(x) -> gradient written into the span.
using GradientFn = std::function<void(std::span<const double>, std::span<double>)>;

struct HessianResult {
    Matrix H;                 // symmetrized
    double asymmetry = 0.0;   // ||H - H^T||_F / ||H||_F before symmetrization
    Vector steps;             // step actually used per coordinate
};

/// Central differences of the gradient, one column per coordinate, with step
/// h_rel * (1 + |x_k|). A non-finite gradient halves the step (x0.1) up to
/// `max_shrink` times before giving up.
inline HessianResult hessian(const GradientFn& grad, std::span<const double> x0, double h_rel = 1e-4,
                             int max_shrink = 4) {
    detail::require(h_rel > 0, "hessian: step must be positive");
    const std::size_t n = x0.size();
    HessianResult out{Matrix(n, n), 0.0, Vector(n, 0.0)};
    Vector x(x0.begin(), x0.end()), gp(n), gm(n);
    auto eval = [&](Vector& g) {
        try {
            grad(x, g);
        } catch (const NumericalError&) {
            std::fill(g.begin(), g.end(), std::numeric_limits<double>::quiet_NaN());
        }
        return all_finite(g);
    };
    for (std::size_t k = 0; k < n; ++k) {
        double h = h_rel * (1.0 + std::abs(x0[k]));
        bool ok = false;
        for (int s = 0; s <= max_shrink && !ok; ++s, h *= 0.1) {
            x[k] = x0[k] + h;
            const bool a = eval(gp);
            x[k] = x0[k] - h;
            const bool b = eval(gm);
            x[k] = x0[k];
            if (a && b) {
                ok = true;
                out.steps[k] = h;
                for (std::size_t i = 0; i < n; ++i) out.H(i, k) = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        if (!ok) throw NumericalError("hessian: non-finite gradient around coordinate " + std::to_string(k));
    }
    const double nrm = frobenius(out.H);
    out.asymmetry = nrm > 0 ? frobenius(out.H - out.H.transpose()) / nrm : 0.0;
    out.H = symmetrize(out.H);
    return out;
}

struct AsymptoticCovariance {
    Matrix Sigma;
    double jitter = 0.0;
    bool indefinite = false;            // Hessian had non-positive curvature
    std::vector<bool> undetermined;     // coordinates loading on non-positive directions
    Vector eigenvalues;                 // of the Hessian, descending
};

/// Sigma = (1/n) H^{-1}. Cholesky (with the jitter ladder) first; an
/// indefinite Hessian falls back to the inverse on its positive eigenspace
/// and marks coordinates touched by the remaining directions as undetermined.
inline AsymptoticCovariance asymptotic_covariance(const Matrix& H, std::size_t n_points) {
    detail::require(H.rows() == H.cols(), "asymptotic_covariance: Hessian must be square");
    detail::require(n_points > 0, "asymptotic_covariance: need at least one point");
    const std::size_t m = H.rows();
    AsymptoticCovariance out;
    out.undetermined.assign(m, false);
    const EigResult e = eig_sym(symmetrize(H));
    out.eigenvalues = e.values;
    const double inv_n = 1.0 / static_cast<double>(n_points);
    try {
        const auto c = cholesky(H);
        out.jitter = c.jitter;
        out.Sigma = c.inverse() * inv_n;
        return out;
    } catch (const NumericalError&) {
    }
    out.indefinite = true;
    warn_once("uq.indefinite", "uq: Hessian is not positive definite; some parameters are undetermined");
    const double lmax = m ? std::max(e.values.front(), 0.0) : 0.0;
    const double tol = static_cast<double>(m) * std::numeric_limits<double>::epsilon() * lmax;
    out.Sigma = Matrix(m, m);
    for (std::size_t k = 0; k < m; ++k) {
        const Vector v = e.vectors.col(k);
        if (e.values[k] > tol) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) out.Sigma(i, j) += v[i] * v[j] / e.values[k] * inv_n;
        } else {
            for (std::size_t i = 0; i < m; ++i)
                if (v[i] * v[i] > 1e-6) out.undetermined[i] = true;
        }
    }
    return out;
}

struct CovarianceBlocks {
    Matrix pp, pg, gg;
};

inline CovarianceBlocks split_blocks(const Matrix& Sigma, std::size_t n_p) {
    detail::require(n_p <= Sigma.rows() && Sigma.rows() == Sigma.cols(), "split_blocks: bad block size");
    const std::size_t ng = Sigma.rows() - n_p;
    CovarianceBlocks b{Matrix(n_p, n_p), Matrix(n_p, ng), Matrix(ng, ng)};
    for (std::size_t i = 0; i < Sigma.rows(); ++i)
        for (std::size_t j = 0; j < Sigma.cols(); ++j) {
            if (i < n_p && j < n_p) b.pp(i, j) = Sigma(i, j);
            else if (i < n_p) b.pg(i, j - n_p) = Sigma(i, j);
            else if (j >= n_p) b.gg(i - n_p, j - n_p) = Sigma(i, j);
        }
    return b;
}

struct ConditionalSigmaP {
    Matrix printed;  // Sigma_pp + Sigma_pg Sigma_gg^{-1} Sigma_gp
    Matrix schur;    // Sigma_pp - Sigma_pg Sigma_gg^{-1} Sigma_gp
    bool used_pinv = false;
};

inline ConditionalSigmaP conditional_sigma_p(const CovarianceBlocks& b) {
    ConditionalSigmaP out{b.pp, b.pp, false};
    if (b.gg.rows() == 0) return out;
    Matrix W;  // Sigma_gg^{-1} Sigma_gp
    try {
        W = cholesky(b.gg, 0).solve(b.pg.transpose());
    } catch (const NumericalError&) {
        warn_once("uq.sigma_gg", "uq: Sigma_gamma_gamma is singular; using its pseudo-inverse");
        out.used_pinv = true;
        W = pinv(b.gg) * b.pg.transpose();
    }
    const Matrix C = b.pg * W;
    out.printed = symmetrize(b.pp + C);
    out.schur = symmetrize(b.pp - C);
    return out;
}

struct OptimalityReport {
    Vector condx;    // <eps_x>
    Vector conddx;   // <(J_x^T)^+ eps_dx>
    Vector condp;    // <V_p V_p^T Omega_p (J_p^T)^+ eps_dx>
    double condx_inf = 0.0;
    double conddx_norm = 0.0;
    double condp_norm = 0.0;
};

/// Averages of the three first-order conditions over all points. Omega_p is
/// the pseudo-inverse of Sigma_p; V_p spans the row space of J_p per point.
inline OptimalityReport optimality_diagnostics(const ResidualSet& r, const Matrix& sigma_p) {
    const std::size_t N = r.size();
    detail::require(N > 0, "optimality_diagnostics: no residuals");
    const std::size_t n = r.eps_x.cols(), m = r.eps_p.cols();
    detail::require(sigma_p.rows() == m, "optimality_diagnostics: Sigma_p has wrong size");
    const Matrix omega_p = pinv(sigma_p);
    OptimalityReport o{Vector(n, 0.0), Vector(n, 0.0), Vector(m, 0.0)};
    for (std::size_t i = 0; i < N; ++i) {
        const auto ex = r.eps_x.row(i);
        const auto ed = r.eps_dx.row(i);
        for (std::size_t s = 0; s < n; ++s) o.condx[s] += ex[s];
        const Vector a = matTvec(pinv(r.jac_x[i]), ed);  // (J_x^T)^+ = (J_x^+)^T
        for (std::size_t s = 0; s < n; ++s) o.conddx[s] += a[s];

        const SVDResult sv = svd(r.jac_p[i]);
        const std::size_t rk = rank_of(sv, default_rank_tol(r.jac_p[i]));
        // (J_p^T)^+ ed = sum_k v_k (u_k . ed) / s_k
        Vector w(m, 0.0);
        for (std::size_t k = 0; k < rk; ++k) {
            double c = 0.0;
            for (std::size_t s = 0; s < n; ++s) c += sv.U(s, k) * ed[s];
            c /= sv.S[k];
            for (std::size_t j = 0; j < m; ++j) w[j] += c * sv.V(j, k);
        }
        const Vector ow = matvec(omega_p, w);
        for (std::size_t k = 0; k < rk; ++k) {
            double c = 0.0;
            for (std::size_t j = 0; j < m; ++j) c += sv.V(j, k) * ow[j];
            for (std::size_t j = 0; j < m; ++j) o.condp[j] += c * sv.V(j, k);
        }
    }
    const double inv = 1.0 / static_cast<double>(N);
    for (double& v : o.condx) v *= inv;
    for (double& v : o.conddx) v *= inv;
    for (double& v : o.condp) v *= inv;
    o.condx_inf = max_abs(o.condx);
    o.conddx_norm = norm2(o.conddx);
    o.condp_norm = norm2(o.condp);
    return o;
}

/// Calibration context for the joint (p, gamma) mode: latent columns of the
/// training data are signal o gamma.
struct GammaContext {
    Vector gamma;                       // point estimate
    std::vector<Matrix> latent_signals; // per experiment, d_e x n_latent
};

struct UQOptions {
    double h_rel = 1e-4;
    double gamma_fd_step = 1e-5;  // relative step for the gamma gradient
};

struct UQReport {
    Vector p_hat, gamma_hat;
    std::size_t n_points = 0;
    HessianResult hessian;
    AsymptoticCovariance asymptotic;
    ConditionalSigmaP conditional;
    Vector sd_p;        // from the Schur variant; NaN where undetermined
    Vector bar2_p;      // 2 * sd_p
    Vector sd_gamma;
    OptimalityReport optimality;
    bool stabilization_removed = true;
};

namespace detail {

inline TrainData with_gamma(const TrainData& data, const ReactionNetwork& net, const GammaContext& g,
                            std::span<const double> gamma) {
    const auto lat = net.latent_indices();
    detail::require(g.latent_signals.size() == data.n_experiments(), "uq: one signal block per experiment required");
    detail::require(gamma.size() == lat.size(), "uq: gamma length mismatch");
    std::vector<Experiment> ex = data.experiments();
    for (std::size_t e = 0; e < ex.size(); ++e) {
        const Matrix& y = g.latent_signals[e];
        detail::require(y.rows() == ex[e].states.rows() && y.cols() == lat.size(), "uq: signal block shape mismatch");
        for (std::size_t i = 0; i < y.rows(); ++i)
            for (std::size_t a = 0; a < lat.size(); ++a) ex[e].states(i, lat[a]) = y(i, a) * gamma[a];
    }
    return TrainData(std::move(ex));
}

}  // namespace detail

/// Full UQ at the current model. Covariances are re-estimated from the
/// residuals without stabilization and held fixed while differentiating.
inline UQReport run_uq(const SurrogateModel& model, const TrainData& data, const UQOptions& opt = {},
                       const GammaContext* gamma = nullptr) {
    UQReport rep;
    const std::size_t m = model.network().n_reactions();
    const std::size_t off = model.p_offset();
    rep.p_hat.assign(model.p().begin(), model.p().end());
    rep.n_points = data.n_points();

    const ResidualSet r0 = residuals(model, data);
    const CovarianceSet cov = refresh_covariances(r0, model.bases(), false);
    rep.optimality = optimality_diagnostics(r0, cov.Sigma_p);

    SurrogateModel work = model;
    Vector full(model.n_params());

    auto p_gradient = [&](const TrainData& d, std::span<const double> p, std::span<double> g) {
        work.set_p(p);
        LossEvaluator ev(work, d);
        ev.rkinn(work, cov, full);
        std::copy(full.begin() + static_cast<std::ptrdiff_t>(off),
                  full.begin() + static_cast<std::ptrdiff_t>(off + m), g.begin());
    };

    if (!gamma) {
        const GradientFn gf = [&](std::span<const double> p, std::span<double> g) { p_gradient(data, p, g); };
        rep.hessian = hessian(gf, rep.p_hat, opt.h_rel);
    } else {
        rep.gamma_hat = gamma->gamma;
        const std::size_t ng = gamma->gamma.size();
        auto loss_at = [&](std::span<const double> p, std::span<const double> gm) {
            const TrainData d = detail::with_gamma(data, model.network(), *gamma, gm);
            work.set_p(p);
            work.set_z_N(d.nullspace_estimates(model.bases()));
            LossEvaluator ev(work, d);
            return ev.rkinn(work, cov, {}).total;
        };
        const GradientFn gf = [&](std::span<const double> x, std::span<double> g) {
            const std::span<const double> p = x.subspan(0, m);
            Vector gm(x.begin() + static_cast<std::ptrdiff_t>(m), x.end());
            {
                const TrainData d = detail::with_gamma(data, model.network(), *gamma, gm);
                work.set_z_N(d.nullspace_estimates(model.bases()));
                p_gradient(d, p, g.subspan(0, m));
            }
            for (std::size_t a = 0; a < ng; ++a) {
                const double h = opt.gamma_fd_step * (1.0 + std::abs(gm[a]));
                const double g0 = gm[a];
                gm[a] = g0 + h;
                const double lp = loss_at(p, gm);
                gm[a] = g0 - h;
                const double lm = loss_at(p, gm);
                gm[a] = g0;
                g[m + a] = (lp - lm) / (2.0 * h);
            }
        };
        Vector x0 = rep.p_hat;
        x0.insert(x0.end(), gamma->gamma.begin(), gamma->gamma.end());
        rep.hessian = hessian(gf, x0, opt.h_rel);
    }

    rep.asymptotic = asymptotic_covariance(rep.hessian.H, rep.n_points);
    rep.conditional = conditional_sigma_p(split_blocks(rep.asymptotic.Sigma, m));
    rep.sd_p.assign(m, 0.0);
    rep.bar2_p.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        const double v = rep.conditional.schur(j, j);
        const bool bad = rep.asymptotic.undetermined[j] || !(v >= 0);
        rep.sd_p[j] = bad ? std::numeric_limits<double>::quiet_NaN() : std::sqrt(v);
        rep.bar2_p[j] = 2.0 * rep.sd_p[j];
    }
    for (std::size_t a = m; a < rep.asymptotic.Sigma.rows(); ++a) {
        const double v = rep.asymptotic.Sigma(a, a);
        rep.sd_gamma.push_back(rep.asymptotic.undetermined[a] || !(v >= 0) ? std::numeric_limits<double>::quiet_NaN()
                                                                           : std::sqrt(v));
    }
    return rep;
}

inline nlohmann::json uq_to_json(const UQReport& r, const std::vector<std::string>& names = {}) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t j = 0; j < r.p_hat.size(); ++j) {
        nlohmann::json e;
        e["name"] = j < names.size() ? names[j] : "p" + std::to_string(j);
        e["estimate"] = r.p_hat[j];
        e["sd"] = num(r.sd_p[j]);
        e["bar_2sd"] = num(r.bar2_p[j]);
        e["undetermined"] = static_cast<bool>(r.asymptotic.undetermined[j]);
        e["var_printed"] = r.conditional.printed(j, j);
        e["var_schur"] = r.conditional.schur(j, j);
        params.push_back(e);
    }
    nlohmann::json j;
    j["parameters"] = params;
    j["n_points"] = r.n_points;
    j["bars_from"] = "schur";
    j["hessian_asymmetry"] = r.hessian.asymmetry;
    j["hessian_eigenvalues"] = r.asymptotic.eigenvalues;
    j["hessian_indefinite"] = r.asymptotic.indefinite;
    j["cholesky_jitter"] = r.asymptotic.jitter;
    j["gamma"] = r.gamma_hat;
    nlohmann::json sg = nlohmann::json::array();
    for (double v : r.sd_gamma) sg.push_back(num(v));
    j["gamma_sd"] = sg;
    j["conditional_used_pinv"] = r.conditional.used_pinv;
    j["stabilization_removed"] = r.stabilization_removed;
    j["optimality"] = {{"condx", r.optimality.condx},
                       {"conddx", r.optimality.conddx},
                       {"condp", r.optimality.condp},
                       {"condx_inf", r.optimality.condx_inf},
                       {"conddx_norm", r.optimality.conddx_norm},
                       {"condp_norm", r.optimality.condp_norm}};
    return j;
}

}  // namespace rkinn
