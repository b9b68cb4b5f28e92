#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rkinn/bundled.hpp"
#include "rkinn/calibrate.hpp"
#include "rkinn/integrate.hpp"
#include "rkinn/rng.hpp"

using namespace rkinn;

namespace {

const std::vector<Vector> kIcs = {{0.6, 0.4, 0.0, 0, 0, 0, 0, 0, 0, 1.0}, {0.2, 0.3, 0.5, 0, 0, 0, 0, 0, 0, 1.0}};

Vector hidden_gamma(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    Vector g(n);
    for (double& v : g) v = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    return g;
}

CalibrationProblem dcs_problem(const Vector& gamma, double sigma, std::size_t n_points = 100) {
    const auto nf = bundled_dcs_network();
    CalibrationProblem p;
    p.bases = build_bases(nf.network);
    for (std::size_t e = 0; e < kIcs.size(); ++e) {
        ExperimentSpec s;
        s.x0 = kIcs[e];
        s.noise_sigma = sigma;
        s.n_points = n_points;
        if (n_points == 1) s.t_max = s.t_min;
        s.seed = 7 + e;
        s.hidden_gamma = gamma;
        const auto d = generate_synthetic(s, nf.network, nf.true_log_k());
        p.blocks.push_back({d.observed_bulk, d.latent_signal});
    }
    return p;
}

// Direct least squares over beta on the stacked pair rows.
Vector oracle_gamma(const CalibrationProblem& p, const GammaParticular& gp) {
    const auto pairs = build_pair_system(p);
    const std::size_t q = p.bases.n_null(), nb = gp.U_N_gamma.cols();
    Matrix A(pairs.size() * q, nb);
    Vector rhs(pairs.size() * q);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const Matrix VU = pairs[k].V * gp.U_N_gamma;
        const Vector Vg = matvec(pairs[k].V, gp.gamma_R);
        for (std::size_t r = 0; r < q; ++r) {
            for (std::size_t c = 0; c < nb; ++c) A(k * q + r, c) = VU(r, c);
            rhs[k * q + r] = -(pairs[k].v[r] + Vg[r]);
        }
    }
    // modified Gram-Schmidt QR; A is tall and thin
    Matrix Q = A;
    Matrix R(nb, nb);
    for (std::size_t c = 0; c < nb; ++c) {
        for (std::size_t k = 0; k < c; ++k) {
            double d = 0.0;
            for (std::size_t i = 0; i < Q.rows(); ++i) d += Q(i, k) * Q(i, c);
            R(k, c) = d;
            for (std::size_t i = 0; i < Q.rows(); ++i) Q(i, c) -= d * Q(i, k);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < Q.rows(); ++i) nrm += Q(i, c) * Q(i, c);
        R(c, c) = std::sqrt(nrm);
        for (std::size_t i = 0; i < Q.rows(); ++i) Q(i, c) /= R(c, c);
    }
    Vector beta = matTvec(Q, rhs);
    for (std::size_t c = nb; c-- > 0;) {
        for (std::size_t k = c + 1; k < nb; ++k) beta[c] -= R(c, k) * beta[k];
        beta[c] /= R(c, c);
    }
    Vector g = gp.gamma_R;
    const Vector s = matvec(gp.U_N_gamma, beta);
    for (std::size_t a = 0; a < g.size(); ++a) g[a] += s[a];
    return g;
}

double max_rel(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::abs(b[i]));
    return m;
}

}  // namespace

TEST(GammaParticular, ConstantScalarSignal) {
    Matrix y(20, 1, 2.0);
    const auto g = gamma_particular(y);
    ASSERT_EQ(g.gamma_R.size(), 1u);
    EXPECT_NEAR(g.gamma_R[0], 0.5, 1e-14);
    EXPECT_EQ(g.U_N_gamma.cols(), 0u);
}

TEST(GammaParticular, ZeroCutoffOnlyExactZeros) {
    Matrix y{{1.0, 0.5, 0.0}, {0.2, 0.9, 0.0}, {0.4, 0.1, 0.0}};
    const auto g = gamma_particular(y, 0.0);
    ASSERT_EQ(g.U_N_gamma.cols(), 1u);
    EXPECT_NEAR(std::abs(g.U_N_gamma(2, 0)), 1.0, 1e-12);
    Matrix full{{1.0, 0.5}, {0.2, 0.9}, {0.4, 0.1}};
    EXPECT_EQ(gamma_particular(full, 0.0).U_N_gamma.cols(), 0u);
}

TEST(GammaParticular, AllZeroRejected) {
    EXPECT_THROW(gamma_particular(Matrix(5, 3, 0.0)), ConfigError);
}

TEST(GammaParticular, IdentityCalibrationRecovered) {
    // coverages already normalized: gamma_R + U beta* = 1 for the best beta
    auto p = dcs_problem(Vector(7, 1.0), 0.0);
    const auto gp = gamma_particular(p.stacked_signals(), p.eigen_cutoff);
    const Vector g = oracle_gamma(p, gp);
    for (double v : g) EXPECT_NEAR(v, 1.0, 1e-8);
}

TEST(PairSystem, CountsAndShapes) {
    const auto nf = bundled_dcs_network();
    CalibrationProblem p;
    p.bases = build_bases(nf.network);
    Matrix xo{{0.6, 0.4, 0.0}, {0.5, 0.4, 0.1}};
    Matrix ys{{0.1, 0, 0, 0, 0, 0, 0.9}, {0.2, 0, 0, 0, 0, 0, 0.8}};
    p.blocks.push_back({xo, ys});
    const auto pairs = build_pair_system(p);
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].V.rows(), 3u);
    EXPECT_EQ(pairs[0].V.cols(), 7u);
    EXPECT_EQ(pairs[0].v.size(), 3u);

    p.blocks[0].observed_bulk = Matrix{{0.6, 0.4, 0.0}, {0.6, 0.4, 0.0}};
    p.blocks[0].latent_signals = Matrix{{0.1, 0, 0, 0, 0, 0, 0.9}, {0.1, 0, 0, 0, 0, 0, 0.9}};
    const auto zero = build_pair_system(p);
    EXPECT_EQ(max_abs(zero[0].V), 0.0);
    EXPECT_EQ(max_abs(zero[0].v), 0.0);
}

TEST(PairSystem, PairCountIsTriangular) {
    auto p = dcs_problem(Vector(7, 1.0), 0.0, 12);
    EXPECT_EQ(build_pair_system(p).size(), 2u * 12 * 11 / 2);
    EXPECT_EQ(p.n_pairs(), 2u * 12 * 11 / 2);
}

TEST(PairSystem, NoiseFreeResidualVanishesAtTrueGamma) {
    const Vector g = hidden_gamma(3, 7);
    auto p = dcs_problem(g, 0.0, 30);
    for (const auto& t : build_pair_system(p)) {
        Vector r = matvec(t.V, g);
        for (std::size_t k = 0; k < r.size(); ++k) r[k] += t.v[k];
        EXPECT_LT(norm2(r), 1e-10);
    }
}

TEST(PairSystem, MomentsMatchExplicitSums) {
    auto p = dcs_problem(hidden_gamma(4, 7), 0.025, 25);
    const auto pm = accumulate_pairs(p);
    Matrix G(7, 7);
    Vector h(7, 0.0);
    double c = 0.0;
    for (const auto& t : build_pair_system(p)) {
        G += matTmat(t.V, t.V);
        const Vector vh = matTvec(t.V, t.v);
        for (std::size_t a = 0; a < 7; ++a) h[a] += vh[a];
        c += dot(t.v, t.v);
    }
    EXPECT_LT(frobenius(G - pm.G), 1e-10 * frobenius(G));
    for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(pm.h[a], h[a], 1e-10 * (1 + norm2(h)));
    EXPECT_NEAR(pm.c, c, 1e-10 * (1 + c));
}

TEST(SolveGamma, NoiseFreeRecovery) {
    const Vector g = hidden_gamma(11, 7);
    auto p = dcs_problem(g, 0.0);
    const auto r = solve_gamma(p);
    EXPECT_LT(max_rel(r.gamma, g), 1e-6);
    EXPECT_GT(r.U_N_gamma.cols(), 0u);
    EXPECT_TRUE(r.negative.empty());
    const Matrix x = apply_calibration(p.stacked_signals(), r.gamma);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row(i)) s += v;
        EXPECT_NEAR(s, 1.0, 1e-8);
    }
}

TEST(SolveGamma, ClosedFormMatchesDirectLeastSquares) {
    for (double sigma : {0.0, 0.025}) {
        auto p = dcs_problem(hidden_gamma(12, 7), sigma);
        const auto r = solve_gamma(p);
        const auto gp = gamma_particular(p.stacked_signals(), p.eigen_cutoff);
        const Vector o = oracle_gamma(p, gp);
        for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(r.gamma[a], o[a], 1e-8) << "sigma " << sigma;
    }
}

TEST(SolveGamma, SingleSampleRejected) {
    auto p = dcs_problem(Vector(7, 1.0), 0.0, 1);
    EXPECT_THROW(solve_gamma(p), ConfigError);
}

TEST(SolveGamma, ShapeErrors) {
    auto p = dcs_problem(Vector(7, 1.0), 0.0, 5);
    p.blocks[0].latent_signals = Matrix(5, 6, 1.0);
    EXPECT_THROW(solve_gamma(p), ConfigError);
    p = dcs_problem(Vector(7, 1.0), 0.0, 5);
    p.blocks[1].observed_bulk = Matrix(4, 3);
    EXPECT_THROW(solve_gamma(p), ConfigError);
    p = dcs_problem(Vector(7, 1.0), 0.0, 5);
    p.blocks[0].latent_signals(0, 0) = std::nan("");
    EXPECT_THROW(solve_gamma(p), ConfigError);
}

TEST(SolveGamma, ScaleEquivariance) {
    auto p = dcs_problem(hidden_gamma(14, 7), 0.025);
    const auto r1 = solve_gamma(p);
    auto q = p;
    for (auto& b : q.blocks) b.latent_signals *= 3.7;
    const auto r2 = solve_gamma(q);
    for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(r2.gamma[a] * 3.7, r1.gamma[a], 1e-10 * std::abs(r1.gamma[a]));
    const Matrix x1 = apply_calibration(p.stacked_signals(), r1.gamma);
    const Matrix x2 = apply_calibration(q.stacked_signals(), r2.gamma);
    EXPECT_LT(max_abs(x1 - x2), 1e-10);
}

TEST(SolveGamma, PairOrderInvariance) {
    auto p = dcs_problem(hidden_gamma(15, 7), 0.025, 40);
    const auto r1 = solve_gamma(p);
    auto q = p;
    Rng rng(99);
    for (auto& b : q.blocks) {
        std::vector<std::size_t> perm(b.latent_signals.rows());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (std::size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform() * static_cast<double>(i))]);
        b.latent_signals = b.latent_signals.select_rows(perm);
        b.observed_bulk = b.observed_bulk.select_rows(perm);
    }
    const auto r2 = solve_gamma(q);
    for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(r1.gamma[a], r2.gamma[a], 1e-10);
}

TEST(SolveGamma, CutoffLimits) {
    auto p = dcs_problem(hidden_gamma(16, 7), 0.025, 30);
    p.eigen_cutoff = 0.0;
    const auto r0 = solve_gamma(p);  // pure normalization
    EXPECT_EQ(r0.U_N_gamma.cols(), 0u);
    EXPECT_TRUE(r0.beta.empty());
    p.eigen_cutoff = 1.0 + 1e-12;  // every direction free: pure nullspace fit
    const auto r1 = solve_gamma(p);
    EXPECT_EQ(r1.U_N_gamma.cols(), 7u);
    EXPECT_TRUE(all_finite(r1.gamma));
}

TEST(SolveGamma, AbsoluteCutoffMode) {
    auto p = dcs_problem(hidden_gamma(17, 7), 0.0, 30);
    const auto rel = solve_gamma(p);
    p.cutoff_mode = CutoffMode::absolute;
    p.eigen_cutoff = rel.threshold;
    const auto ab = solve_gamma(p);
    EXPECT_EQ(ab.U_N_gamma.cols(), rel.U_N_gamma.cols());
    for (std::size_t a = 0; a < 7; ++a) EXPECT_NEAR(ab.gamma[a], rel.gamma[a], 1e-12);
}

TEST(ApplyCalibration, Products) {
    Matrix y{{1.0, 2.0}, {3.0, 4.0}};
    EXPECT_EQ(max_abs(apply_calibration(y, Vector{1.0, 1.0}) - y), 0.0);
    EXPECT_EQ(max_abs(apply_calibration(y, Vector{0.0, 0.0})), 0.0);
    const Matrix x = apply_calibration(y, Vector{0.5, 2.0});
    EXPECT_DOUBLE_EQ(x(1, 0), 1.5);
    EXPECT_DOUBLE_EQ(x(1, 1), 8.0);
    EXPECT_THROW(apply_calibration(y, Vector{1.0}), std::invalid_argument);
}

TEST(Diagnostics, JsonFields) {
    auto p = dcs_problem(hidden_gamma(18, 7), 0.025, 20);
    const auto r = solve_gamma(p);
    const auto j = calibration_diagnostics(r, p);
    EXPECT_EQ(j["n_pairs"].get<std::size_t>(), 2u * 20 * 19 / 2);
    EXPECT_EQ(j["eigenvalues"].size(), 7u);
    EXPECT_GE(j["pair_residual_max"].get<double>(), j["pair_residual_rms"].get<double>() * 0.0);
    EXPECT_EQ(j["cutoff_mode"], "relative");
}
