#pragma once

// Latent-state reconstruction from semi-quantitative signals. Coverages are
// x_* = y o gamma; gamma is pinned by coverage normalization (sum = 1 at every
// sample) up to the weakly determined eigen-directions of sum y y^T, and the
// remaining freedom beta is fixed by the nullspace invariance of M between
// every pair of samples of the same experiment.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rkinn/decomp.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"

namespace rkinn {

enum class CutoffMode { relative, absolute };

/// One experiment: bulk observations and latent signals on the same samples.
struct CalibrationBlock {
    Matrix observed_bulk;   // d x n_o
    Matrix latent_signals;  // d x n_*
};

struct CalibrationProblem {
    std::vector<CalibrationBlock> blocks;
    RangeNullBases bases;
    double eigen_cutoff = 5e-3;
    CutoffMode cutoff_mode = CutoffMode::relative;

    std::size_t n_latent() const noexcept { return bases.n_latent(); }
    std::size_t n_points() const noexcept {
        std::size_t n = 0;
        for (const auto& b : blocks) n += b.latent_signals.rows();
        return n;
    }
    std::size_t n_pairs() const noexcept {
        std::size_t n = 0;
        for (const auto& b : blocks) {
            const std::size_t d = b.latent_signals.rows();
            n += d * (d - (d > 0 ? 1 : 0)) / 2;
        }
        return n;
    }
    /// All latent signals stacked over blocks.
    Matrix stacked_signals() const {
        Matrix Y(n_points(), n_latent());
        std::size_t r = 0;
        for (const auto& b : blocks)
            for (std::size_t i = 0; i < b.latent_signals.rows(); ++i, ++r)
                std::copy(b.latent_signals.row(i).begin(), b.latent_signals.row(i).end(), Y.row(r).begin());
        return Y;
    }
};

struct GammaParticular {
    Vector gamma_R;
    Matrix U_N_gamma;   // n_* x q, possibly q = 0
    Vector eigenvalues; // of sum y y^T, descending
    double threshold = 0.0;
};

struct PairTerm {
    std::size_t block = 0, i = 0, j = 0;  // j < i
    Vector v;   // (U_o^N)^T (x_o(t_i) - x_o(t_j))
    Matrix V;   // (U_*^N)^T diag(y(t_i) - y(t_j))
};

/// Pair sums of the nullspace objective sum |v + V gamma|^2 = gamma^T G gamma + 2 h^T gamma + c.
struct PairMoments {
    Matrix G;
    Vector h;
    double c = 0.0;
    std::size_t n_pairs = 0;
};

struct CalibrationResult {
    Vector gamma;
    Vector gamma_particular;
    Vector beta;
    Matrix U_N_gamma;
    Vector eigenvalues;
    double threshold = 0.0;
    std::size_t n_pairs = 0;
    double pair_residual_rms = 0.0;
    double pair_residual_max = 0.0;
    double normalization_mean = 0.0;     // mean of sum(x_*) over samples
    double normalization_max_dev = 0.0;  // max |sum(x_*) - 1|
    std::vector<std::size_t> negative;   // indices with gamma <= 0
};

namespace detail {

inline void check_calibration_problem(const CalibrationProblem& p) {
    if (p.blocks.empty()) throw ConfigError("calibration: no data blocks");
    if (!(p.eigen_cutoff >= 0) || !std::isfinite(p.eigen_cutoff))
        throw ConfigError("calibration: eigen_cutoff must be finite and non-negative");
    const std::size_t no = p.bases.n_observable(), ns = p.bases.n_latent();
    if (ns == 0) throw ConfigError("calibration: network has no latent species");
    for (const auto& b : p.blocks) {
        if (b.latent_signals.cols() != ns)
            throw ConfigError("calibration: latent signal columns do not match the network's latent species");
        if (b.observed_bulk.cols() != no)
            throw ConfigError("calibration: bulk columns do not match the network's observable species");
        if (b.observed_bulk.rows() != b.latent_signals.rows())
            throw ConfigError("calibration: bulk and latent blocks have different sample counts");
        if (!all_finite(b.latent_signals.storage()) || !all_finite(b.observed_bulk.storage()))
            throw ConfigError("calibration: non-finite data");
    }
}

// d * sum_i (a_i - abar)(b_i - bbar)^T over the rows of A, B equals the
// asymmetric pair sum sum_{j<i} (a_i - a_j)(b_i - b_j)^T.
inline Matrix pair_cross_moment(const Matrix& A, const Matrix& B) {
    const std::size_t d = A.rows();
    Vector ma(A.cols(), 0.0), mb(B.cols(), 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t a = 0; a < A.cols(); ++a) ma[a] += A(i, a);
        for (std::size_t b = 0; b < B.cols(); ++b) mb[b] += B(i, b);
    }
    for (double& v : ma) v /= static_cast<double>(d);
    for (double& v : mb) v /= static_cast<double>(d);
    Matrix K(A.cols(), B.cols());
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t a = 0; a < A.cols(); ++a) {
            const double da = A(i, a) - ma[a];
            for (std::size_t b = 0; b < B.cols(); ++b) K(a, b) += da * (B(i, b) - mb[b]);
        }
    K *= static_cast<double>(d);
    return K;
}

}  // namespace detail

/// Minimum-norm solution of the normalization conditions y_i^T gamma = 1,
/// with eigen-directions of sum y y^T below the cutoff left free (U_N_gamma).
inline GammaParticular gamma_particular(const Matrix& signals, double cutoff = 5e-3,
                                        CutoffMode mode = CutoffMode::relative) {
    detail::require(signals.rows() > 0 && signals.cols() > 0, "gamma_particular: empty signals");
    if (!all_finite(signals.storage())) throw ConfigError("gamma_particular: non-finite signals");
    if (!(cutoff >= 0)) throw ConfigError("gamma_particular: cutoff must be non-negative");
    if (max_abs(signals) == 0.0) throw ConfigError("gamma_particular: all latent signals are zero");
    const std::size_t m = signals.cols();
    Matrix S(m, m);
    Vector s1(m, 0.0);
    for (std::size_t i = 0; i < signals.rows(); ++i) {
        const auto y = signals.row(i);
        for (std::size_t a = 0; a < m; ++a) {
            s1[a] += y[a];
            for (std::size_t b = 0; b < m; ++b) S(a, b) += y[a] * y[b];
        }
    }
    const EigResult e = eig_sym(S);
    GammaParticular g;
    g.eigenvalues = e.values;
    const double lmax = e.values.front();
    g.threshold = mode == CutoffMode::relative ? cutoff * lmax : cutoff;
    // exact zeros always belong to the nullspace, whatever the cutoff
    const double floor = static_cast<double>(m) * 1e-15 * lmax;
    std::vector<std::size_t> keep, drop;
    for (std::size_t k = 0; k < m; ++k) (e.values[k] > std::max(g.threshold, floor) ? keep : drop).push_back(k);
    g.gamma_R.assign(m, 0.0);
    for (std::size_t k : keep) {
        const Vector v = e.vectors.col(k);
        const double c = dot(v, s1) / e.values[k];
        for (std::size_t a = 0; a < m; ++a) g.gamma_R[a] += c * v[a];
    }
    g.U_N_gamma = Matrix(m, drop.size());
    for (std::size_t q = 0; q < drop.size(); ++q) g.U_N_gamma.set_col(q, e.vectors.col(drop[q]));
    return g;
}

/// Explicit per-pair terms (j < i within each block). Quadratic in the
/// sample count; the solver itself uses accumulate_pairs.
inline std::vector<PairTerm> build_pair_system(const CalibrationProblem& p) {
    detail::check_calibration_problem(p);
    const Matrix& Uo = p.bases.Uo_N;
    const Matrix& Us = p.bases.Us_N;
    const std::size_t q = p.bases.n_null(), ns = p.n_latent();
    std::vector<PairTerm> out;
    out.reserve(p.n_pairs());
    for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
        const auto& b = p.blocks[bi];
        for (std::size_t i = 0; i < b.latent_signals.rows(); ++i)
            for (std::size_t j = 0; j < i; ++j) {
                PairTerm t{bi, i, j, Vector(q, 0.0), Matrix(q, ns)};
                for (std::size_t a = 0; a < Uo.rows(); ++a) {
                    const double dx = b.observed_bulk(i, a) - b.observed_bulk(j, a);
                    for (std::size_t k = 0; k < q; ++k) t.v[k] += Uo(a, k) * dx;
                }
                for (std::size_t a = 0; a < ns; ++a) {
                    const double dy = b.latent_signals(i, a) - b.latent_signals(j, a);
                    for (std::size_t k = 0; k < q; ++k) t.V(k, a) = Us(a, k) * dy;
                }
                out.push_back(std::move(t));
            }
    }
    return out;
}

/// Pair sums G = sum V^T V, h = sum V^T v, c = sum v^T v in O(d) per block.
inline PairMoments accumulate_pairs(const CalibrationProblem& p) {
    detail::check_calibration_problem(p);
    const Matrix& Uo = p.bases.Uo_N;
    const Matrix& Us = p.bases.Us_N;
    const std::size_t ns = p.n_latent();
    const Matrix WtW = Us * Us.transpose();   // n_* x n_*
    const Matrix C = Us * Uo.transpose();     // n_* x n_o
    const Matrix UoUo = Uo * Uo.transpose();  // n_o x n_o
    PairMoments pm{Matrix(ns, ns), Vector(ns, 0.0), 0.0, p.n_pairs()};
    for (const auto& b : p.blocks) {
        if (b.latent_signals.rows() < 2) continue;
        const Matrix Kyy = detail::pair_cross_moment(b.latent_signals, b.latent_signals);
        const Matrix Kyx = detail::pair_cross_moment(b.latent_signals, b.observed_bulk);
        const Matrix Kxx = detail::pair_cross_moment(b.observed_bulk, b.observed_bulk);
        for (std::size_t a = 0; a < ns; ++a) {
            for (std::size_t c = 0; c < ns; ++c) pm.G(a, c) += WtW(a, c) * Kyy(a, c);
            for (std::size_t o = 0; o < C.cols(); ++o) pm.h[a] += C(a, o) * Kyx(a, o);
        }
        for (std::size_t a = 0; a < UoUo.rows(); ++a)
            for (std::size_t c = 0; c < UoUo.cols(); ++c) pm.c += UoUo(a, c) * Kxx(a, c);
    }
    pm.G = symmetrize(pm.G);
    return pm;
}

/// Elementwise product of each signal row with gamma.
inline Matrix apply_calibration(const Matrix& signals, std::span<const double> gamma) {
    detail::require(signals.cols() == gamma.size(), "apply_calibration: gamma length mismatch");
    Matrix x = signals;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t a = 0; a < x.cols(); ++a) x(i, a) *= gamma[a];
    return x;
}

/// Largest |v + V gamma| over all pairs, streamed without storing pairs.
inline double max_pair_residual(const CalibrationProblem& p, std::span<const double> gamma) {
    const Matrix& Uo = p.bases.Uo_N;
    const Matrix& Us = p.bases.Us_N;
    const std::size_t q = p.bases.n_null();
    double worst = 0.0;
    std::vector<Vector> zb;
    for (const auto& b : p.blocks) {
        // v + V gamma for pair (i, j) is w_i - w_j with w = Uo^T x_o + Us^T (y o gamma)
        zb.assign(b.latent_signals.rows(), Vector(q, 0.0));
        for (std::size_t i = 0; i < b.latent_signals.rows(); ++i) {
            for (std::size_t a = 0; a < Uo.rows(); ++a)
                for (std::size_t k = 0; k < q; ++k) zb[i][k] += Uo(a, k) * b.observed_bulk(i, a);
            for (std::size_t a = 0; a < Us.rows(); ++a)
                for (std::size_t k = 0; k < q; ++k) zb[i][k] += Us(a, k) * b.latent_signals(i, a) * gamma[a];
        }
        for (std::size_t i = 0; i < zb.size(); ++i)
            for (std::size_t j = 0; j < i; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < q; ++k) s += (zb[i][k] - zb[j][k]) * (zb[i][k] - zb[j][k]);
                worst = std::max(worst, std::sqrt(s));
            }
    }
    return worst;
}

/// Closed-form calibration: gamma = gamma_R + U_N_gamma beta with beta
/// minimizing the pair nullspace residuals.
inline CalibrationResult solve_gamma(const CalibrationProblem& p) {
    detail::check_calibration_problem(p);
    if (p.n_pairs() == 0) throw ConfigError("solve_gamma: need at least two samples in one block (no pairs)");
    const Matrix Y = p.stacked_signals();
    const GammaParticular gp = gamma_particular(Y, p.eigen_cutoff, p.cutoff_mode);
    const PairMoments pm = accumulate_pairs(p);

    CalibrationResult r;
    r.gamma_particular = gp.gamma_R;
    r.U_N_gamma = gp.U_N_gamma;
    r.eigenvalues = gp.eigenvalues;
    r.threshold = gp.threshold;
    r.n_pairs = pm.n_pairs;
    r.gamma = gp.gamma_R;
    const std::size_t ns = p.n_latent();
    if (gp.U_N_gamma.cols() == 0) {
        warn_once("calibrate.no_null", "calibration: no eigenvalues below the cutoff; gamma is the normalization solution only");
    } else {
        const Matrix& U = gp.U_N_gamma;
        const Matrix A = congruence(U, pm.G);
        Vector g = matvec(pm.G, gp.gamma_R);
        for (std::size_t a = 0; a < ns; ++a) g[a] += pm.h[a];
        const Vector rhs = matTvec(U, g);
        r.beta = matvec(pinv(symmetrize(A)), rhs);
        for (double& b : r.beta) b = -b;
        const Vector shift = matvec(U, r.beta);
        for (std::size_t a = 0; a < ns; ++a) r.gamma[a] += shift[a];
    }
    if (!all_finite(r.gamma)) throw NumericalError("solve_gamma: non-finite calibration factors");

    const Vector Gg = matvec(pm.G, r.gamma);
    const double f = dot(r.gamma, Gg) + 2.0 * dot(pm.h, r.gamma) + pm.c;
    r.pair_residual_rms = std::sqrt(std::max(f, 0.0) / static_cast<double>(pm.n_pairs));
    r.pair_residual_max = max_pair_residual(p, r.gamma);
    double sum = 0.0;
    for (std::size_t i = 0; i < Y.rows(); ++i) {
        const double s = dot(Y.row(i), r.gamma);
        sum += s;
        r.normalization_max_dev = std::max(r.normalization_max_dev, std::abs(s - 1.0));
    }
    r.normalization_mean = sum / static_cast<double>(Y.rows());
    for (std::size_t a = 0; a < ns; ++a)
        if (!(r.gamma[a] > 0)) r.negative.push_back(a);
    if (!r.negative.empty()) {
        std::ostringstream os;
        os << "calibration: " << r.negative.size() << " non-positive calibration factor(s)";
        warn_once("calibrate.negative", os.str());
    }
    return r;
}

inline nlohmann::json calibration_diagnostics(const CalibrationResult& r, const CalibrationProblem& p) {
    nlohmann::json j;
    j["eigenvalues"] = r.eigenvalues;
    j["eigen_cutoff"] = p.eigen_cutoff;
    j["cutoff_mode"] = p.cutoff_mode == CutoffMode::relative ? "relative" : "absolute";
    j["threshold"] = r.threshold;
    j["nullspace_dim"] = r.U_N_gamma.cols();
    j["n_pairs"] = r.n_pairs;
    j["gamma"] = r.gamma;
    j["gamma_particular"] = r.gamma_particular;
    j["beta"] = r.beta;
    j["pair_residual_rms"] = r.pair_residual_rms;
    j["pair_residual_max"] = r.pair_residual_max;
    j["normalization_mean"] = r.normalization_mean;
    j["normalization_max_dev"] = r.normalization_max_dev;
    j["non_positive"] = r.negative;
    return j;
}

}  // namespace rkinn
