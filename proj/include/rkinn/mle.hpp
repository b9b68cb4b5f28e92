#pragma once

// Residuals, covariance estimation and propagation, the naive and robust
// losses with their gradients, Adam, and the training loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rkinn/decomp.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/parallel.hpp"
#include "rkinn/stoich.hpp"
#include "rkinn/surrogate.hpp"

namespace rkinn {

// ---------------------------------------------------------------------------
// Data

struct Experiment {
    std::string name;
    Vector times;  // d, strictly increasing
    Matrix states; // d x n observed (calibrated) states
};

class TrainData {
public:
    struct Point {
        std::size_t exp;
        std::size_t row;
        double t;
    };

    TrainData() = default;
    explicit TrainData(std::vector<Experiment> experiments) : exps_(std::move(experiments)) {
        if (exps_.empty()) throw std::invalid_argument("training data: no experiments");
        n_ = exps_[0].states.cols();
        for (std::size_t e = 0; e < exps_.size(); ++e) {
            const auto& ex = exps_[e];
            detail::require(ex.states.cols() == n_, "training data: species count differs between experiments");
            detail::require(ex.states.rows() == ex.times.size(), "training data: times and states differ in length");
            detail::require(!ex.times.empty(), "training data: experiment '" + ex.name + "' has no points");
            for (std::size_t i = 0; i < ex.times.size(); ++i) {
                detail::require(ex.times[i] > 0, "training data: times must be positive");
                detail::require(i == 0 || ex.times[i] > ex.times[i - 1], "training data: times must increase");
                points_.push_back({e, i, ex.times[i]});
            }
            detail::require(all_finite(ex.states.storage()), "training data: non-finite state");
        }
    }

    std::size_t n_points() const noexcept { return points_.size(); }
    std::size_t n_species() const noexcept { return n_; }
    std::size_t n_experiments() const noexcept { return exps_.size(); }
    const std::vector<Experiment>& experiments() const noexcept { return exps_; }
    const Point& point(std::size_t i) const { return points_[i]; }
    std::span<const double> target(std::size_t i) const {
        return exps_[points_[i].exp].states.row(points_[i].row);
    }

    double t_min() const {
        double t = exps_[0].times.front();
        for (const auto& e : exps_) t = std::min(t, e.times.front());
        return t;
    }
    double t_max() const {
        double t = exps_[0].times.back();
        for (const auto& e : exps_) t = std::max(t, e.times.back());
        return t;
    }

    /// Mean over species of the pooled per-species sample variance.
    double data_variance() const {
        const std::size_t N = n_points();
        if (N < 2) return 1.0;
        double total = 0.0;
        for (std::size_t s = 0; s < n_; ++s) {
            double mean = 0.0;
            for (std::size_t i = 0; i < N; ++i) mean += target(i)[s];
            mean /= static_cast<double>(N);
            double var = 0.0;
            for (std::size_t i = 0; i < N; ++i) var += (target(i)[s] - mean) * (target(i)[s] - mean);
            total += var / static_cast<double>(N - 1);
        }
        return total / static_cast<double>(n_);
    }

    /// Per-experiment a-priori nullspace coordinates: mean of U_N^T x over its points.
    std::vector<Vector> nullspace_estimates(const RangeNullBases& b) const {
        std::vector<Vector> out;
        for (const auto& ex : exps_) {
            std::vector<Vector> obs;
            for (std::size_t i = 0; i < ex.states.rows(); ++i) obs.emplace_back(ex.states.row(i).begin(), ex.states.row(i).end());
            out.push_back(estimate_zN(obs, b));
        }
        return out;
    }

private:
    std::vector<Experiment> exps_;
    std::vector<Point> points_;
    std::size_t n_ = 0;
};

// ---------------------------------------------------------------------------
// Residuals and covariances

struct ResidualSet {
    Matrix x, xdot;          // surrogate states and derivatives, N x n
    Matrix eps_x, eps_dx;    // N x n
    Matrix eps_z_R, eps_dz_R;  // N x r
    Matrix eps_p;            // N x m
    std::vector<Matrix> jac_x, jac_p;

    std::size_t size() const noexcept { return eps_x.rows(); }
};

namespace detail {

inline Vector column_means(const Matrix& A) {
    Vector m(A.cols(), 0.0);
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) m[j] += A(i, j);
    if (A.rows()) for (double& v : m) v /= static_cast<double>(A.rows());
    return m;
}

// Row-wise projection A U (N x r).
inline Matrix project_rows(const Matrix& A, const Matrix& U) { return A * U; }

}  // namespace detail

/// Least-squares parameter-error sample for one point:
/// eps_p = (J_p)^+ (eps_dx - J_x eps_x). J_p is usually rank deficient
/// (more reactions than independent directions), so the pseudo-inverse
/// path is always taken; a warning is emitted once when that happens.
inline Vector estimate_eps_p(std::span<const double> eps_x, std::span<const double> eps_dx, const Matrix& jac_x,
                             const Matrix& jac_p, double rcond = -1.0) {
    detail::require(eps_x.size() == jac_x.cols() && eps_dx.size() == jac_x.rows() && jac_p.rows() == jac_x.rows(),
                    "estimate_eps_p: shape mismatch");
    Vector rhs = matvec(jac_x, eps_x);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = eps_dx[i] - rhs[i];
    const SVDResult s = svd(jac_p);
    const std::size_t r = rank_of(s, rcond < 0 ? default_rank_tol(jac_p) : rcond);
    if (r < jac_p.cols())
        warn_once("eps_p_rank", "parameter Jacobian is rank deficient; using the pseudo-inverse for eps_p");
    Vector out(jac_p.cols(), 0.0);
    for (std::size_t k = 0; k < r; ++k) {
        double c = 0.0;
        for (std::size_t i = 0; i < rhs.size(); ++i) c += s.U(i, k) * rhs[i];
        c /= s.S[k];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += c * s.V(j, k);
    }
    return out;
}

/// Surrogate residuals at every data point, projected residuals and
/// parameter-error samples.
inline ResidualSet residuals(const SurrogateModel& model, const TrainData& data, double eps_p_rcond = -1.0) {
    const auto& net = model.network();
    const auto& b = model.bases();
    detail::require(data.n_species() == net.n_species(), "residuals: data species count does not match network");
    detail::require(data.n_experiments() == model.config().n_experiments,
                    "residuals: data experiment count does not match surrogate");
    const std::size_t N = data.n_points(), n = net.n_species(), m = net.n_reactions();
    ResidualSet r{Matrix(N, n), Matrix(N, n), Matrix(N, n), Matrix(N, n), {}, {}, Matrix(N, m), {}, {}};
    r.jac_x.resize(N);
    r.jac_p.resize(N);
    const Vector p(model.p().begin(), model.p().end());
    auto ws = model.make_workspace();
    for (std::size_t i = 0; i < N; ++i) {
        const auto& pt = data.point(i);
        model.eval_into(pt.t, pt.exp, ws, r.x.row(i), r.xdot.row(i));
        const auto xi = r.x.row(i);
        const Vector f = net.rhs(xi, p);
        const auto tgt = data.target(i);
        for (std::size_t s = 0; s < n; ++s) {
            r.eps_x(i, s) = xi[s] - tgt[s];
            r.eps_dx(i, s) = r.xdot(i, s) - f[s];
        }
        r.jac_x[i] = net.jac_x(xi, p);
        r.jac_p[i] = net.jac_p(xi, p);
        const Vector ep = estimate_eps_p(r.eps_x.row(i), r.eps_dx.row(i), r.jac_x[i], r.jac_p[i], eps_p_rcond);
        std::copy(ep.begin(), ep.end(), r.eps_p.row(i).begin());
    }
    r.eps_z_R = detail::project_rows(r.eps_x, b.U_R);
    r.eps_dz_R = detail::project_rows(r.eps_dx, b.U_R);
    return r;
}

/// Recentered sample covariance over rows: <(e - <e>)(e - <e>)^T>.
inline Matrix sample_covariance(const Matrix& eps) {
    const std::size_t N = eps.rows(), n = eps.cols();
    Matrix S(n, n);
    if (N < 2) {
        warn_once("cov_single_point", "covariance from a single point is zero");
        return S;
    }
    const Vector mu = detail::column_means(eps);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t a = 0; a < n; ++a) {
            const double da = eps(i, a) - mu[a];
            if (da == 0.0) continue;
            for (std::size_t c = 0; c < n; ++c) S(a, c) += da * (eps(i, c) - mu[c]);
        }
    S *= 1.0 / static_cast<double>(N);
    return symmetrize(S);
}

inline Matrix estimate_sigma_x(const Matrix& eps_x) { return sample_covariance(eps_x); }
inline Matrix estimate_sigma_p(const Matrix& eps_p) { return sample_covariance(eps_p); }

/// J_x Sigma_x J_x^T + J_p Sigma_p J_p^T.
inline Matrix propagate_sigma_dx(const Matrix& sigma_x, const Matrix& sigma_p, const Matrix& jac_x,
                                 const Matrix& jac_p) {
    detail::require(sigma_x.rows() == jac_x.cols() && sigma_p.rows() == jac_p.cols(),
                    "propagate_sigma_dx: shape mismatch");
    Matrix S = jac_x * sigma_x * jac_x.transpose();
    S += jac_p * sigma_p * jac_p.transpose();
    return symmetrize(S);
}

/// Sigma + diag(|<eps_x>|).
inline Matrix stabilize(Matrix sigma, std::span<const double> mean_eps_x) {
    detail::require(sigma.rows() == mean_eps_x.size(), "stabilize: shape mismatch");
    for (std::size_t i = 0; i < mean_eps_x.size(); ++i) sigma(i, i) += std::abs(mean_eps_x[i]);
    return sigma;
}

struct CovarianceSet {
    Matrix Sigma_x, Sigma_p;
    std::vector<Matrix> Sigma_dx;   // per point, n x n
    Matrix Sigma_z;                 // projected, r x r
    std::vector<Matrix> Sigma_dz;   // projected, r x r
    Matrix Omega_z;
    std::vector<Matrix> Omega_dz;
    Vector stabilization;           // diagonal added to Sigma_x and Sigma_dx (empty if none)
    double max_jitter = 0.0;        // largest Cholesky jitter used

    std::size_t size() const noexcept { return Omega_dz.size(); }
};

/// Projects covariances onto the range basis and inverts them.
inline CovarianceSet assemble_covariances(Matrix sigma_x, Matrix sigma_p, const std::vector<Matrix>& jac_x,
                                          const std::vector<Matrix>& jac_p, const RangeNullBases& b,
                                          const Vector& stabilization) {
    CovarianceSet c;
    c.stabilization = stabilization;
    c.Sigma_p = std::move(sigma_p);
    const std::size_t N = jac_x.size();
    c.Sigma_dx.resize(N);
    c.Sigma_dz.resize(N);
    c.Omega_dz.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        Matrix S = propagate_sigma_dx(sigma_x, c.Sigma_p, jac_x[i], jac_p[i]);
        if (!stabilization.empty()) S = stabilize(std::move(S), stabilization);
        c.Sigma_dz[i] = project_covariance(S, b);
        c.Sigma_dx[i] = std::move(S);
    }
    if (!stabilization.empty()) sigma_x = stabilize(std::move(sigma_x), stabilization);
    c.Sigma_z = project_covariance(sigma_x, b);
    c.Sigma_x = std::move(sigma_x);

    const auto chol = cholesky(c.Sigma_z);
    c.max_jitter = chol.jitter;
    c.Omega_z = chol.inverse();
    for (std::size_t i = 0; i < N; ++i) {
        try {
            const auto ci = cholesky(c.Sigma_dz[i]);
            c.max_jitter = std::max(c.max_jitter, ci.jitter);
            c.Omega_dz[i] = ci.inverse();
        } catch (const NumericalError& e) {
            throw NumericalError("derivative covariance at point " + std::to_string(i) + ": " + e.what());
        }
    }
    return c;
}

/// Re-estimate all covariances from residuals (optionally stabilized).
inline CovarianceSet refresh_covariances(const ResidualSet& r, const RangeNullBases& b, bool stabilized = true) {
    Vector stab;
    if (stabilized) {
        stab = detail::column_means(r.eps_x);
        for (double& v : stab) v = std::abs(v);
    }
    return assemble_covariances(estimate_sigma_x(r.eps_x), estimate_sigma_p(r.eps_p), r.jac_x, r.jac_p, b, stab);
}

/// Starting covariances before any residual information: Sigma_x = var(data) I,
/// Sigma_p = sigma_p0 I, propagated through the Jacobians at the current surrogate.
inline CovarianceSet initial_covariances(const SurrogateModel& model, const TrainData& data, double sigma_p0 = 1e-2) {
    const auto r = residuals(model, data);
    const std::size_t n = model.network().n_species(), m = model.network().n_reactions();
    return assemble_covariances(Matrix::identity(n) * data.data_variance(), Matrix::identity(m) * sigma_p0, r.jac_x,
                                r.jac_p, model.bases(), {});
}

// ---------------------------------------------------------------------------
// Losses

struct LossParts {
    double total = 0.0;
    double ell_x = 0.0;   // interpolation term
    double ell_dx = 0.0;  // model term
};

/// (1/d) sum eps_dx^T eps_dx + alpha (1/d) sum eps_x^T eps_x.
inline LossParts loss_naive(const ResidualSet& r, double alpha) {
    LossParts l;
    const double N = static_cast<double>(r.size());
    if (r.size() == 0) return l;
    for (double v : r.eps_x.storage()) l.ell_x += v * v;
    for (double v : r.eps_dx.storage()) l.ell_dx += v * v;
    l.ell_x /= N;
    l.ell_dx /= N;
    l.total = l.ell_dx + alpha * l.ell_x;
    return l;
}

/// (1/d) sum (eps_dz^T Omega_dz_i eps_dz + eps_z^T Omega_z eps_z).
inline LossParts loss_rkinn(const ResidualSet& r, const CovarianceSet& c) {
    const std::size_t d = r.eps_z_R.rows();
    detail::require(c.size() == d && r.eps_dz_R.rows() == d, "loss_rkinn: covariance set does not match residuals");
    LossParts l;
    const double N = static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const auto ez = r.eps_z_R.row(i), edz = r.eps_dz_R.row(i);
        l.ell_x += dot(ez, matvec(c.Omega_z, ez));
        l.ell_dx += dot(edz, matvec(c.Omega_dz[i], edz));
    }
    l.ell_x /= N;
    l.ell_dx /= N;
    l.total = l.ell_x + l.ell_dx;
    return l;
}

/// Loss and gradient over the full parameter vector of a surrogate, evaluated
/// point-parallel with a fixed chunked reduction order.
class LossEvaluator {
public:
    static constexpr std::size_t kChunk = 16;

    LossEvaluator(const SurrogateModel& model, const TrainData& data) : data_(&data) {
        detail::require(data.n_species() == model.network().n_species(),
                        "loss: data species count does not match network");
        detail::require(data.n_experiments() == model.config().n_experiments,
                        "loss: data experiment count does not match surrogate");
        workers_ = worker_count();
        n_chunks_ = (data.n_points() + kChunk - 1) / kChunk;
        for (std::size_t w = 0; w < std::min(workers_, std::max<std::size_t>(1, n_chunks_)); ++w)
            scratch_.push_back(make_scratch(model));
        chunk_grad_.assign(n_chunks_, Vector(model.n_params(), 0.0));
        chunk_parts_.assign(n_chunks_, LossParts{});
    }

    LossParts rkinn(const SurrogateModel& model, const CovarianceSet& cov, std::span<double> grad) {
        detail::require(cov.size() == data_->n_points(), "loss: covariance set does not match data");
        return run(model, grad, [&](std::size_t i, Scratch& s, Vector* g, LossParts& lp) {
            point_rkinn(model, cov, i, s, g, lp);
        });
    }

    LossParts naive(const SurrogateModel& model, double alpha, std::span<double> grad) {
        LossParts l = run(model, grad, [&](std::size_t i, Scratch& s, Vector* g, LossParts& lp) {
            point_naive(model, alpha, i, s, g, lp);
        });
        l.total = l.ell_dx + alpha * l.ell_x;
        return l;
    }

private:
    struct Scratch {
        SurrogateModel::Workspace ws;
        Vector x, xd, f, ex, ed, ez, edz, a, bz, gx, h, negh, k;
    };

    Scratch make_scratch(const SurrogateModel& model) const {
        Scratch s;
        s.ws = model.make_workspace();
        const std::size_t n = model.network().n_species(), r = model.bases().r;
        for (Vector* v : {&s.x, &s.xd, &s.f, &s.ex, &s.ed, &s.gx, &s.h, &s.negh}) v->assign(n, 0.0);
        for (Vector* v : {&s.ez, &s.edz, &s.a, &s.bz}) v->assign(r, 0.0);
        s.k.assign(model.network().n_reactions(), 0.0);
        return s;
    }

    template <class PointFn>
    LossParts run(const SurrogateModel& model, std::span<double> grad, PointFn&& fn) {
        const bool want_grad = !grad.empty();
        if (want_grad) detail::require(grad.size() == model.n_params(), "loss: gradient buffer has wrong size");
        const auto p = model.p();
        for (auto& s : scratch_)
            for (std::size_t j = 0; j < p.size(); ++j) s.k[j] = std::exp(p[j]);
        const std::size_t N = data_->n_points();
        parallel_chunks(n_chunks_, workers_, [&](std::size_t c, std::size_t w) {
            Vector* g = want_grad ? &chunk_grad_[c] : nullptr;
            if (g) std::fill(g->begin(), g->end(), 0.0);
            LossParts lp;
            for (std::size_t i = c * kChunk; i < std::min(N, (c + 1) * kChunk); ++i) fn(i, scratch_[w], g, lp);
            chunk_parts_[c] = lp;
        });
        LossParts total;
        if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t c = 0; c < n_chunks_; ++c) {
            total.ell_x += chunk_parts_[c].ell_x;
            total.ell_dx += chunk_parts_[c].ell_dx;
            if (want_grad)
                for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += chunk_grad_[c][k];
        }
        total.total = total.ell_x + total.ell_dx;
        if (want_grad) model.check_gradient(grad);
        return total;
    }

    void residual_point(const SurrogateModel& model, std::size_t i, Scratch& s) const {
        const auto& pt = data_->point(i);
        model.eval_into(pt.t, pt.exp, s.ws, s.x, s.xd);
        model.network().rhs_k(s.x, s.k, s.f);
        const auto tgt = data_->target(i);
        for (std::size_t a = 0; a < s.x.size(); ++a) {
            s.ex[a] = s.x[a] - tgt[a];
            s.ed[a] = s.xd[a] - s.f[a];
        }
    }

    void point_rkinn(const SurrogateModel& model, const CovarianceSet& cov, std::size_t i, Scratch& s, Vector* g,
                     LossParts& lp) const {
        residual_point(model, i, s);
        const Matrix& U = model.bases().U_R;
        const std::size_t n = s.x.size(), r = U.cols();
        for (std::size_t k = 0; k < r; ++k) {
            double a = 0.0, b = 0.0;
            for (std::size_t q = 0; q < n; ++q) {
                a += U(q, k) * s.ex[q];
                b += U(q, k) * s.ed[q];
            }
            s.ez[k] = a;
            s.edz[k] = b;
        }
        const Matrix& Oz = cov.Omega_z;
        const Matrix& Od = cov.Omega_dz[i];
        double qx = 0.0, qd = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
            double a = 0.0, b = 0.0;
            for (std::size_t l = 0; l < r; ++l) {
                a += Oz(k, l) * s.ez[l];
                b += Od(k, l) * s.edz[l];
            }
            s.a[k] = a;
            s.bz[k] = b;
            qx += s.ez[k] * a;
            qd += s.edz[k] * b;
        }
        const double invN = 1.0 / static_cast<double>(data_->n_points());
        lp.ell_x += qx * invN;
        lp.ell_dx += qd * invN;
        if (!g) return;
        for (std::size_t q = 0; q < n; ++q) {
            double gx = 0.0, h = 0.0;
            for (std::size_t k = 0; k < r; ++k) {
                gx += U(q, k) * s.a[k];
                h += U(q, k) * s.bz[k];
            }
            s.gx[q] = 2.0 * invN * gx;
            s.h[q] = 2.0 * invN * h;
            s.negh[q] = -s.h[q];
        }
        finish_gradient(model, i, s, *g);
    }

    void point_naive(const SurrogateModel& model, double alpha, std::size_t i, Scratch& s, Vector* g,
                     LossParts& lp) const {
        residual_point(model, i, s);
        const double invN = 1.0 / static_cast<double>(data_->n_points());
        lp.ell_x += dot(s.ex, s.ex) * invN;
        lp.ell_dx += dot(s.ed, s.ed) * invN;
        if (!g) return;
        for (std::size_t q = 0; q < s.x.size(); ++q) {
            s.gx[q] = 2.0 * alpha * invN * s.ex[q];
            s.h[q] = 2.0 * invN * s.ed[q];
            s.negh[q] = -s.h[q];
        }
        finish_gradient(model, i, s, *g);
    }

    // eps_dx = xdot - f(x, p): dL/dx gains -J_x^T h, dL/dp = -J_p^T h.
    void finish_gradient(const SurrogateModel& model, std::size_t i, Scratch& s, Vector& g) const {
        const std::size_t m = model.network().n_reactions();
        model.network().vjp_k(s.x, s.k, s.negh, s.gx, std::span<double>(g.data() + model.p_offset(), m));
        model.backprop(data_->point(i).exp, s.ws, s.gx, s.h, g);
    }

    const TrainData* data_;
    std::size_t workers_ = 1, n_chunks_ = 0;
    std::vector<Scratch> scratch_;
    std::vector<Vector> chunk_grad_;
    std::vector<LossParts> chunk_parts_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vector m, v;
    std::uint64_t t = 0;
};

inline void adam_step(std::span<double> theta, std::span<const double> g, AdamState& st, const AdamConfig& cfg) {
    detail::require(theta.size() == g.size(), "adam_step: gradient size mismatch");
    detail::require(cfg.lr > 0, "adam_step: learning rate must be positive");
    if (st.m.size() != theta.size()) {
        st.m.assign(theta.size(), 0.0);
        st.v.assign(theta.size(), 0.0);
        st.t = 0;
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t k = 0; k < theta.size(); ++k) {
        st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g[k];
        st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        const double mh = st.m[k] / c1, vh = st.v[k] / c2;
        theta[k] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    AdamConfig adam;
    std::size_t iterations_per_epoch = 100;
    std::size_t max_epochs = 300;
    double loss_tolerance = 1e-4;   // relative change per epoch
    std::size_t patience = 10;      // consecutive epochs below tolerance
    std::size_t covariance_update_period = 1;
    bool stabilize = true;
    double sigma_p0 = 1e-2;
    double eps_p_rcond = -1.0;      // relative singular-value cutoff for eps_p; < 0 = machine default
    double lr_decay = 1.0;          // lr multiplier applied per completed epoch
};

struct EpochRecord {
    std::size_t epoch = 0;
    double ell_t = 0.0, ell_x = 0.0, ell_dx = 0.0;
    Vector p;
    double seconds = 0.0;
};

/// Resumable loop state.
struct TrainState {
    AdamState adam;
    std::size_t epoch = 0;        // epochs completed
    std::size_t quiet_epochs = 0; // consecutive epochs below tolerance
    double last_loss = 0.0;
    bool has_last = false;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    CovarianceSet covariances;   // last refresh (stabilized as configured)
    TrainState state;
    bool converged = false;
};

/// Called after each epoch; returning false stops training.
using EpochHook = std::function<bool(const EpochRecord&, const SurrogateModel&, const TrainState&)>;

namespace detail {

inline void check_train_config(const TrainConfig& c) {
    if (!(c.adam.lr > 0)) throw ConfigError("train: learning rate must be positive");
    if (c.iterations_per_epoch < 1) throw ConfigError("train: iterations_per_epoch must be >= 1");
    if (c.covariance_update_period < 1) throw ConfigError("train: covariance_update_period must be >= 1");
    if (!(c.loss_tolerance >= 0)) throw ConfigError("train: loss_tolerance must be non-negative");
    if (!(c.lr_decay > 0 && c.lr_decay <= 1)) throw ConfigError("train: lr_decay must be in (0, 1]");
}

inline AdamConfig epoch_adam(const TrainConfig& c, std::size_t epoch) {
    AdamConfig a = c.adam;
    a.lr *= std::pow(c.lr_decay, static_cast<double>(epoch));
    return a;
}

inline bool update_stopping(TrainState& st, double loss, const TrainConfig& cfg) {
    if (st.has_last) {
        const double rel = std::abs(loss - st.last_loss) / std::max(std::abs(st.last_loss), 1e-300);
        st.quiet_epochs = rel < cfg.loss_tolerance ? st.quiet_epochs + 1 : 0;
    }
    st.last_loss = loss;
    st.has_last = true;
    return cfg.patience > 0 && st.quiet_epochs >= cfg.patience;
}

}  // namespace detail

/// Robust training: Adam on the rKINN loss with precision matrices frozen
/// inside each epoch and refreshed from residuals between epochs. Epoch 0 in
/// the history is the starting point. Pass a non-empty `resume` to continue
/// a checkpointed run.
inline TrainResult train_rkinn(SurrogateModel& model, const TrainData& data, const TrainConfig& cfg,
                               const EpochHook& hook = {}, const TrainState* resume = nullptr) {
    detail::check_train_config(cfg);
    using clock = std::chrono::steady_clock;
    TrainResult out;
    LossEvaluator eval(model, data);
    Vector grad(model.n_params());
    auto record = [&](std::size_t epoch, const LossParts& l, double secs) {
        EpochRecord rec{epoch, l.total, l.ell_x, l.ell_dx, Vector(model.p().begin(), model.p().end()), secs};
        out.history.push_back(rec);
        return rec;
    };

    CovarianceSet cov;
    if (resume) {
        out.state = *resume;
        cov = refresh_covariances(residuals(model, data, cfg.eps_p_rcond), model.bases(), cfg.stabilize);
    } else {
        cov = initial_covariances(model, data, cfg.sigma_p0);
        const auto t0 = clock::now();
        const LossParts l0 = eval.rkinn(model, cov, {});
        const auto rec = record(0, l0, std::chrono::duration<double>(clock::now() - t0).count());
        detail::update_stopping(out.state, l0.total, cfg);
        out.state.quiet_epochs = 0;
        if (hook && !hook(rec, model, out.state)) {
            out.covariances = std::move(cov);
            return out;
        }
    }

    while (out.state.epoch < cfg.max_epochs) {
        const auto t0 = clock::now();
        const AdamConfig adam = detail::epoch_adam(cfg, out.state.epoch);
        for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
            eval.rkinn(model, cov, grad);
            adam_step(model.theta(), grad, out.state.adam, adam);
        }
        ++out.state.epoch;
        LossParts l;
        if (out.state.epoch % cfg.covariance_update_period == 0 || out.state.epoch == cfg.max_epochs) {
            const auto r = residuals(model, data, cfg.eps_p_rcond);
            cov = refresh_covariances(r, model.bases(), cfg.stabilize);
            l = loss_rkinn(r, cov);
        } else {
            l = eval.rkinn(model, cov, {});
        }
        if (!std::isfinite(l.total)) throw NumericalError("rKINN loss became non-finite at epoch " + std::to_string(out.state.epoch));
        const auto rec = record(out.state.epoch, l, std::chrono::duration<double>(clock::now() - t0).count());
        const bool stop = detail::update_stopping(out.state, l.total, cfg);
        if (hook && !hook(rec, model, out.state)) break;
        if (stop) {
            out.converged = true;
            break;
        }
    }
    out.covariances = std::move(cov);
    return out;
}

/// Naive training with the alpha-weighted MSE loss. ell_x / ell_dx in the
/// history are the interpolation and model MSEs.
inline TrainResult train_naive(SurrogateModel& model, const TrainData& data, double alpha, const TrainConfig& cfg,
                               const EpochHook& hook = {}, const TrainState* resume = nullptr) {
    detail::check_train_config(cfg);
    if (!(alpha >= 0) || !std::isfinite(alpha)) throw ConfigError("naive training: alpha must be non-negative");
    using clock = std::chrono::steady_clock;
    TrainResult out;
    LossEvaluator eval(model, data);
    Vector grad(model.n_params());
    auto record = [&](std::size_t epoch, const LossParts& l, double secs) {
        EpochRecord rec{epoch, l.total, l.ell_x, l.ell_dx, Vector(model.p().begin(), model.p().end()), secs};
        out.history.push_back(rec);
        return rec;
    };
    if (resume) {
        out.state = *resume;
    } else {
        const LossParts l0 = eval.naive(model, alpha, {});
        const auto rec = record(0, l0, 0.0);
        detail::update_stopping(out.state, l0.total, cfg);
        if (hook && !hook(rec, model, out.state)) return out;
    }
    while (out.state.epoch < cfg.max_epochs) {
        const auto t0 = clock::now();
        const AdamConfig adam = detail::epoch_adam(cfg, out.state.epoch);
        for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
            eval.naive(model, alpha, grad);
            adam_step(model.theta(), grad, out.state.adam, adam);
        }
        ++out.state.epoch;
        const LossParts l = eval.naive(model, alpha, {});
        if (!std::isfinite(l.total)) throw NumericalError("naive loss became non-finite at epoch " + std::to_string(out.state.epoch));
        const auto rec = record(out.state.epoch, l, std::chrono::duration<double>(clock::now() - t0).count());
        const bool stop = detail::update_stopping(out.state, l.total, cfg);
        if (hook && !hook(rec, model, out.state)) break;
        if (stop) {
            out.converged = true;
            break;
        }
    }
    return out;
}

struct WarmStartConfig {
    std::size_t epochs = 50;        // interpolation-only pre-fit; 0 skips it
    double alpha = 1e6;             // naive weight used for the pre-fit
    double k_floor = 1e-2;          // rate constants below this are clamped before taking logs
};

/// Rate constants from derivative matching on the current surrogate: the
/// model is linear in k, so U_R^T xdot = U_R^T M diag(psi(x)) k is solved in
/// least squares over all samples (columns equilibrated, pseudo-inverse).
inline Vector derivative_matching_log_k(const SurrogateModel& model, const TrainData& data, double k_floor) {
    detail::require(k_floor > 0, "derivative_matching_log_k: k_floor must be positive");
    const ReactionNetwork& net = model.network();
    const Matrix& UR = model.bases().U_R;
    const Matrix& M = net.stoichiometry();
    const std::size_t nr = net.n_reactions(), R = UR.cols();
    const Matrix B = matTmat(UR, M);  // r x m
    Matrix AtA(nr, nr);
    Vector Atb(nr, 0.0);
    for (std::size_t i = 0; i < data.n_points(); ++i) {
        const auto pt = data.point(i);
        const SAEval s = model.eval(pt.t, pt.exp);
        const Vector ps = net.psi(s.x);
        Matrix A(R, nr);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < nr; ++j) A(r, j) = B(r, j) * ps[j];
        AtA += matTmat(A, A);
        const Vector ab = matTvec(A, matTvec(UR, s.xdot));
        for (std::size_t j = 0; j < nr; ++j) Atb[j] += ab[j];
    }
    Vector sc(nr, 1.0);
    for (std::size_t j = 0; j < nr; ++j)
        if (AtA(j, j) > 0) sc[j] = 1.0 / std::sqrt(AtA(j, j));
    for (std::size_t i = 0; i < nr; ++i) {
        Atb[i] *= sc[i];
        for (std::size_t j = 0; j < nr; ++j) AtA(i, j) *= sc[i] * sc[j];
    }
    Vector k = matvec(pinv(symmetrize(AtA), 1e-10), Atb);
    Vector p(nr);
    for (std::size_t j = 0; j < nr; ++j) p[j] = std::log(std::max(k[j] * sc[j], k_floor));
    return p;
}

/// Fits the surrogate to the data alone, then sets p from derivative
/// matching. Returns the new p.
inline Vector warm_start(SurrogateModel& model, const TrainData& data, const WarmStartConfig& w,
                         const TrainConfig& base = {}) {
    if (w.epochs > 0) {
        TrainConfig c = base;
        c.max_epochs = w.epochs;
        c.patience = 0;
        train_naive(model, data, w.alpha, c);
    }
    const Vector p = derivative_matching_log_k(model, data, w.k_floor);
    model.set_p(p);
    return p;
}

/// Geometric schedule from lo to hi inclusive.
inline Vector geometric_schedule(double lo, double hi, std::size_t n) {
    detail::require(lo > 0 && hi >= lo && n >= 1, "geometric_schedule: need 0 < lo <= hi and n >= 1");
    if (n == 1) return {lo};
    Vector a(n);
    for (std::size_t i = 0; i < n; ++i)
        a[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * static_cast<double>(i) / static_cast<double>(n - 1));
    a.front() = lo;
    a.back() = hi;
    return a;
}

struct SweepRow {
    std::string direction;  // "tightening" or "relaxation"
    double alpha = 0.0;
    double mse_x = 0.0, mse_dx = 0.0;
    Vector p;
    std::size_t epochs = 0;
};

/// Naive-loss sweep: increasing alpha (tightening) then decreasing back
/// (relaxation), each stage warm-started from the previous one. Adam
/// moments are reset at each alpha.
inline std::vector<SweepRow> alpha_sweep(SurrogateModel& model, const TrainData& data, const TrainConfig& cfg,
                                         const Vector& schedule,
                                         const std::function<void(const SweepRow&)>& on_row = {}) {
    detail::require(!schedule.empty(), "alpha_sweep: empty schedule");
    std::vector<SweepRow> rows;
    auto stage = [&](const std::string& dir, double alpha) {
        const auto res = train_naive(model, data, alpha, cfg);
        const auto& last = res.history.back();
        SweepRow row{dir, alpha, last.ell_x, last.ell_dx, last.p, res.state.epoch};
        rows.push_back(row);
        if (on_row) on_row(row);
    };
    for (double a : schedule) stage("tightening", a);
    for (std::size_t k = schedule.size(); k-- > 1;) stage("relaxation", schedule[k - 1]);
    return rows;
}

}  // namespace rkinn
