#include <gtest/gtest.h>

#include <cmath>

#include "rkinn/bundled.hpp"
#include "rkinn/integrate.hpp"
#include "rkinn/mle.hpp"

using namespace rkinn;

namespace {

NetworkFile load_ab() { return load_network(std::string(RKINN_DATA_DIR) + "/ab_network.json"); }

TrainData make_data(const NetworkFile& nf, const std::vector<Vector>& x0s, std::size_t n_points, double sigma,
                    double t_min = 1e-4, double t_max = 10.0) {
    std::vector<Experiment> ex;
    for (std::size_t e = 0; e < x0s.size(); ++e) {
        ExperimentSpec s;
        s.name = "ic" + std::to_string(e + 1);
        s.x0 = x0s[e];
        s.t_min = t_min;
        s.t_max = t_max;
        s.n_points = n_points;
        s.noise_sigma = sigma;
        s.seed = 42 + e;
        const auto d = generate_synthetic(s, nf.network, nf.true_log_k());
        Matrix states = d.clean.states;
        if (sigma > 0) {
            const auto obs = nf.network.observable_indices();
            const auto lat = nf.network.latent_indices();
            for (std::size_t i = 0; i < states.rows(); ++i) {
                for (std::size_t a = 0; a < obs.size(); ++a) states(i, obs[a]) = d.observed_bulk(i, a);
                for (std::size_t a = 0; a < lat.size(); ++a) states(i, lat[a]) = d.latent_signal(i, a);
            }
        }
        ex.push_back({s.name, d.clean.times, states});
    }
    return TrainData(std::move(ex));
}

SurrogateModel make_model(const NetworkFile& nf, const RangeNullBases& b, const TrainData& data, SurrogateConfig cfg,
                          std::uint64_t seed = 3) {
    cfg.n_experiments = data.n_experiments();
    cfg.t_min = data.t_min();
    cfg.t_max = data.t_max();
    SurrogateModel m(nf.network, b, cfg, data.nullspace_estimates(b));
    Rng rng(seed);
    m.init_weights(rng);
    return m;
}

}  // namespace

TEST(Loss, NaiveHandCase) {
    ResidualSet r;
    r.eps_x = Matrix{{0.0, 2.0}};
    r.eps_dx = Matrix{{1.0, 0.0}};
    const auto l = loss_naive(r, 0.5);
    EXPECT_DOUBLE_EQ(l.total, 3.0);
    EXPECT_DOUBLE_EQ(loss_naive(r, 0.0).total, 1.0);
    ResidualSet z;
    z.eps_x = Matrix(4, 2);
    z.eps_dx = Matrix(4, 2);
    EXPECT_EQ(loss_naive(z, 10.0).total, 0.0);
}

TEST(Loss, RkinnHandCase) {
    ResidualSet r;
    r.eps_z_R = Matrix{{1.0, 2.0}, {-1.0, 0.5}};
    r.eps_dz_R = Matrix{{0.0, 1.0}, {3.0, -1.0}};
    CovarianceSet c;
    c.Omega_z = Matrix::diag(Vector{2.0, 0.5});
    c.Omega_dz = {Matrix::diag(Vector{1.0, 4.0}), Matrix::diag(Vector{0.1, 1.0})};
    // point 1: 2*1 + 0.5*4 = 4 ; 4*1 = 4
    // point 2: 2*1 + 0.5*0.25 = 2.125 ; 0.1*9 + 1 = 1.9
    const auto l = loss_rkinn(r, c);
    EXPECT_DOUBLE_EQ(l.ell_x, (4.0 + 2.125) / 2);
    EXPECT_DOUBLE_EQ(l.ell_dx, (4.0 + 1.9) / 2);
    EXPECT_DOUBLE_EQ(l.total, l.ell_x + l.ell_dx);

    CovarianceSet c3 = c;
    c3.Omega_z *= 3.0;
    for (auto& o : c3.Omega_dz) o *= 3.0;
    EXPECT_NEAR(loss_rkinn(r, c3).total, 3.0 * l.total, 1e-14);

    CovarianceSet id;
    id.Omega_z = Matrix::identity(2);
    id.Omega_dz = {Matrix::identity(2), Matrix::identity(2)};
    EXPECT_DOUBLE_EQ(loss_rkinn(r, id).total, (1 + 4 + 1 + 0.25 + 0 + 1 + 9 + 1) / 2.0);
}

TEST(Covariance, SigmaXCases) {
    Matrix c(5, 2);
    for (std::size_t i = 0; i < 5; ++i) {
        c(i, 0) = 0.3;
        c(i, 1) = -1.0;
    }
    EXPECT_EQ(max_abs(estimate_sigma_x(c)), 0.0);
    EXPECT_EQ(max_abs(estimate_sigma_x(Matrix{{1.0, 2.0}})), 0.0);

    Rng rng(5);
    const double sigma = 0.3;
    Matrix e(10000, 3);
    for (double& v : e.storage()) v = sigma * rng.normal();
    const Matrix S = estimate_sigma_x(e);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(S(i, i), sigma * sigma, 0.05 * sigma * sigma);
}

TEST(Covariance, EpsPRecoversConsistentPerturbation) {
    const auto nf = bundled_dcs_network();
    const auto& net = nf.network;
    Rng rng(8);
    Vector x(10), p = nf.true_log_k();
    for (double& v : x) v = rng.uniform(0.05, 0.5);
    const Matrix Jx = net.jac_x(x, p), Jp = net.jac_p(x, p);
    // a delta p inside the row space of Jp is identifiable
    Vector w(10);
    for (double& v : w) v = rng.normal();
    const Vector dp = matTvec(Jp, w);
    const Vector edx = matvec(Jp, dp);
    const Vector zero(10, 0.0);
    const Vector got = estimate_eps_p(zero, edx, Jx, Jp);
    for (std::size_t j = 0; j < dp.size(); ++j) EXPECT_NEAR(got[j], dp[j], 1e-8 * (1 + max_abs(dp)));

    EXPECT_EQ(max_abs(estimate_eps_p(zero, zero, Jx, Jp)), 0.0);

    // a residual orthogonal to range(Jp) gives zero
    const Matrix N = nullspace(Jp.transpose());
    ASSERT_GT(N.cols(), 0u);
    const Vector orth = N.col(0);
    EXPECT_LT(max_abs(estimate_eps_p(zero, orth, Jx, Jp)), 1e-10);
}

TEST(Covariance, PropagationCases) {
    const Matrix Z(3, 3);
    const Matrix I = Matrix::identity(3);
    EXPECT_EQ(max_abs(propagate_sigma_dx(Z, Z, I, I)), 0.0);
    Matrix Sx{{2.0, 0.1, 0.0}, {0.1, 1.0, 0.0}, {0.0, 0.0, 0.5}};
    Matrix Sp{{1.0, 0.0, 0.2}, {0.0, 3.0, 0.0}, {0.2, 0.0, 1.0}};
    EXPECT_LT(max_abs(propagate_sigma_dx(Sx, Sp, I, I) - (Sx + Sp)), 1e-15);
}

TEST(Covariance, PropagationMatchesMonteCarlo) {
    const auto nf = bundled_dcs_network();
    const auto& net = nf.network;
    const std::size_t n = net.n_species(), m = net.n_reactions();
    Rng rng(21);
    Vector x(n);
    for (double& v : x) v = rng.uniform(0.05, 0.6);
    const Vector p = nf.true_log_k();
    const Matrix Jx = net.jac_x(x, p), Jp = net.jac_p(x, p);

    auto random_spd = [&](std::size_t k, double scale) {
        Matrix A(k, k);
        for (double& v : A.storage()) v = rng.normal();
        Matrix S = A * A.transpose();
        S *= scale / static_cast<double>(k);
        for (std::size_t i = 0; i < k; ++i) S(i, i) += 0.1 * scale;
        return S;
    };
    const Matrix Sx = random_spd(n, 1e-4), Sp = random_spd(m, 1e-2);
    const Matrix Lx = cholesky(Sx).L, Lp = cholesky(Sp).L;
    const Matrix S = propagate_sigma_dx(Sx, Sp, Jx, Jp);

    const std::size_t N = 100000;
    Matrix samples(N, n);
    Vector zx(n), zp(m);
    for (std::size_t s = 0; s < N; ++s) {
        for (double& v : zx) v = rng.normal();
        for (double& v : zp) v = rng.normal();
        const Vector dx = matvec(Lx, zx), dp = matvec(Lp, zp);
        const Vector a = matvec(Jx, dx), c = matvec(Jp, dp);
        for (std::size_t i = 0; i < n; ++i) samples(s, i) = -a[i] - c[i];
    }
    const Matrix mc = sample_covariance(samples);
    EXPECT_LT(frobenius(mc - S) / frobenius(S), 0.05);
}

TEST(Covariance, Stabilize) {
    const Matrix S{{1.0, 0.2}, {0.2, 2.0}};
    EXPECT_EQ(stabilize(S, Vector{0.0, 0.0}).storage(), S.storage());
    const Matrix T = stabilize(S, Vector{0.1, 0.0});
    EXPECT_DOUBLE_EQ(T(0, 0), 1.1);
    EXPECT_DOUBLE_EQ(T(1, 1), 2.0);
    Rng rng(4);
    for (int k = 0; k < 20; ++k) {
        Matrix A(4, 4);
        for (double& v : A.storage()) v = rng.normal();
        const Matrix P = A * A.transpose();
        Vector mu(4);
        for (double& v : mu) v = rng.normal();
        EXPECT_GE(eig_sym(stabilize(P, mu)).values.back(), eig_sym(P).values.back() - 1e-12);
    }
}

TEST(Covariance, PrecisionConsistency) {
    const auto nf = bundled_dcs_network();
    const auto b = build_bases(nf.network);
    const auto data = make_data(nf, {{0.6, 0.4, 0, 0, 0, 0, 0, 0, 0, 1}}, 20, 0.025);
    auto m = make_model(nf, b, data, {});
    m.set_p(nf.true_log_k());
    const auto r = residuals(m, data);
    // projection invariant
    const Matrix ez = r.eps_x * b.U_R;
    EXPECT_LT(max_abs(ez - r.eps_z_R), 1e-12);
    const auto c = refresh_covariances(r, b);
    EXPECT_LT(max_abs(c.Omega_z * c.Sigma_z - Matrix::identity(b.r)), 1e-6);
    for (std::size_t i = 0; i < c.size(); ++i)
        EXPECT_LT(max_abs(c.Omega_dz[i] * c.Sigma_dz[i] - Matrix::identity(b.r)), 1e-6);
    for (const auto& S : c.Sigma_dz) EXPECT_EQ(max_abs(S - S.transpose()), 0.0);
}

TEST(Residuals, ShiftedParameters) {
    const auto nf = bundled_dcs_network();
    const auto b = build_bases(nf.network);
    const auto data = make_data(nf, {{0.6, 0.4, 0, 0, 0, 0, 0, 0, 0, 1}}, 10, 0.0);
    auto m = make_model(nf, b, data, {});
    Vector p = nf.true_log_k();
    for (double& v : p) v += 0.1;
    m.set_p(p);
    const auto r = residuals(m, data);
    for (std::size_t i = 0; i < r.size(); ++i) {
        const Vector f = nf.network.rhs(r.x.row(i), p);
        for (std::size_t s = 0; s < 10; ++s) EXPECT_NEAR(r.eps_dx(i, s), r.xdot(i, s) - f[s], 1e-14);
    }
    // nullspace residual constant in time
    const Matrix en = r.eps_x * b.U_N;
    for (std::size_t i = 1; i < en.rows(); ++i)
        for (std::size_t k = 0; k < en.cols(); ++k) EXPECT_NEAR(en(i, k), en(0, k), 1e-12);
}

TEST(Residuals, RejectsMismatchedData) {
    const auto nf = bundled_dcs_network();
    const auto ab = load_ab();
    const auto b = build_bases(nf.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 5, 0.0);
    SurrogateModel m(nf.network, b, {}, {Vector(b.n_null(), 0.0)});
    EXPECT_THROW(residuals(m, data), std::invalid_argument);
    EXPECT_THROW(TrainData(std::vector<Experiment>{}), std::invalid_argument);
}

TEST(Adam, Steps) {
    AdamConfig cfg;
    AdamState st;
    Vector th{1.0, -2.0};
    adam_step(th, Vector{0.0, 0.0}, st, cfg);
    EXPECT_EQ(th, (Vector{1.0, -2.0}));

    AdamState s2;
    Vector one{0.0};
    adam_step(one, Vector{1.0}, s2, cfg);
    // bias-corrected first step: lr * 1 / (1 + eps)
    EXPECT_NEAR(one[0], -1e-3 / (1.0 + 1e-8), 1e-18);
    EXPECT_NEAR(one[0], -9.99999e-4, 1e-9);

    AdamState s3;
    Vector w{0.0};
    double prev = w[0];
    for (int k = 0; k < 1000; ++k) {
        adam_step(w, Vector{0.7}, s3, cfg);
        EXPECT_LT(w[0], prev);
        prev = w[0];
    }
    EXPECT_THROW(adam_step(w, Vector{1.0, 2.0}, s3, cfg), std::invalid_argument);
}

namespace {

// central-difference check of the evaluator gradient along random directions
void check_loss_gradient(bool robust, OutputMap map) {
    const auto nf = bundled_dcs_network();
    const auto b = build_bases(nf.network);
    const auto data = make_data(nf, {{0.6, 0.4, 0, 0, 0, 0, 0, 0, 0, 1}, {0.3, 0.5, 0.2, 0, 0, 0, 0, 0, 0, 1}}, 5, 0.025);
    SurrogateConfig cfg;
    cfg.output_map = map;
    auto m = make_model(nf, b, data, cfg);
    Vector p = nf.true_log_k();
    Rng rng(13);
    for (double& v : p) v += 0.3 * rng.normal();
    m.set_p(p);
    const auto cov = refresh_covariances(residuals(m, data), b);
    LossEvaluator ev(m, data);
    auto loss = [&](const SurrogateModel& mm) {
        return robust ? ev.rkinn(mm, cov, {}).total : ev.naive(mm, 2.5, {}).total;
    };
    Vector g(m.n_params());
    const double l0 = robust ? ev.rkinn(m, cov, g).total : ev.naive(m, 2.5, g).total;
    EXPECT_NEAR(l0, loss(m), 1e-12 * std::abs(l0));
    if (robust) EXPECT_NEAR(l0, loss_rkinn(residuals(m, data), cov).total, 1e-10 * l0);
    else EXPECT_NEAR(l0, loss_naive(residuals(m, data), 2.5).total, 1e-10 * l0);

    for (int dir = 0; dir < 20; ++dir) {
        Vector d(m.n_params());
        for (double& v : d) v = rng.normal();
        const double h = 1e-6;
        SurrogateModel a = m, c = m;
        for (std::size_t k = 0; k < d.size(); ++k) {
            a.theta()[k] += h * d[k];
            c.theta()[k] -= h * d[k];
        }
        const double fd = (loss(a) - loss(c)) / (2 * h);
        const double an = dot(g, d);
        EXPECT_LT(std::abs(fd - an) / std::abs(an), 1e-4) << "direction " << dir;
    }
    // p block alone
    Vector gp(g.begin() + static_cast<std::ptrdiff_t>(m.p_offset()), g.begin() + static_cast<std::ptrdiff_t>(m.zn_offset()));
    EXPECT_GT(max_abs(gp), 0.0);
}

}  // namespace

TEST(LossGradient, RkinnStructured) { check_loss_gradient(true, OutputMap::structured); }
TEST(LossGradient, RkinnDirect) { check_loss_gradient(true, OutputMap::direct); }
TEST(LossGradient, NaiveStructured) { check_loss_gradient(false, OutputMap::structured); }

TEST(LossGradient, ThreadCountDoesNotChangeResult) {
    const auto nf = bundled_dcs_network();
    const auto b = build_bases(nf.network);
    const auto data = make_data(nf, {{0.6, 0.4, 0, 0, 0, 0, 0, 0, 0, 1}}, 40, 0.025);
    auto m = make_model(nf, b, data, {});
    m.set_p(nf.true_log_k());
    const auto cov = initial_covariances(m, data);
    Vector g1(m.n_params()), g3(m.n_params());
    ::setenv("RKINN_THREADS", "1", 1);
    LossEvaluator e1(m, data);
    const double l1 = e1.rkinn(m, cov, g1).total;
    ::setenv("RKINN_THREADS", "3", 1);
    LossEvaluator e3(m, data);
    const double l3 = e3.rkinn(m, cov, g3).total;
    ::unsetenv("RKINN_THREADS");
    EXPECT_EQ(l1, l3);
    EXPECT_EQ(g1, g3);
}

TEST(Training, ConfigValidation) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 10, 0.0);
    auto m = make_model(ab, b, data, {});
    TrainConfig cfg;
    cfg.adam.lr = 0.0;
    EXPECT_THROW(train_rkinn(m, data, cfg), ConfigError);
    cfg.adam.lr = 1e-3;
    cfg.iterations_per_epoch = 0;
    EXPECT_THROW(train_rkinn(m, data, cfg), ConfigError);
}

TEST(Training, HistoryAndHook) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 20, 0.0);
    auto m = make_model(ab, b, data, {});
    TrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.iterations_per_epoch = 10;
    std::size_t calls = 0;
    const auto res = train_rkinn(m, data, cfg, [&](const EpochRecord& r, const SurrogateModel&, const TrainState&) {
        EXPECT_EQ(r.epoch, calls);
        ++calls;
        return r.epoch < 3;
    });
    EXPECT_EQ(calls, 4u);
    ASSERT_EQ(res.history.size(), 4u);
    EXPECT_EQ(res.history[0].epoch, 0u);
    EXPECT_EQ(res.state.epoch, 3u);
}

TEST(Training, ResumeMatchesUninterrupted) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 20, 0.01);
    TrainConfig cfg;
    cfg.iterations_per_epoch = 10;
    cfg.max_epochs = 4;
    cfg.patience = 0;
    auto full = make_model(ab, b, data, {});
    train_rkinn(full, data, cfg);

    auto part = make_model(ab, b, data, {});
    TrainConfig half = cfg;
    half.max_epochs = 2;
    auto r1 = train_rkinn(part, data, half);
    auto r2 = train_rkinn(part, data, cfg, {}, &r1.state);
    EXPECT_EQ(r2.state.epoch, 4u);
    EXPECT_EQ(part.theta(), full.theta());
}

TEST(Training, ToyInverseProblem) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 50, 0.0);
    auto m = make_model(ab, b, data, {});
    TrainConfig cfg;
    cfg.max_epochs = 200;
    const auto res = train_rkinn(m, data, cfg);
    const Vector truth = ab.true_log_k();
    for (std::size_t j = 0; j < truth.size(); ++j) EXPECT_NEAR(m.p()[j], truth[j], 1e-2) << "reaction " << j;
    EXPECT_LE(res.state.epoch, 200u);
}

TEST(WarmStart, DerivativeMatchingNearTruth) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 50, 0.0);
    auto m = make_model(ab, b, data, {});
    WarmStartConfig w;
    w.epochs = 100;
    const Vector p = warm_start(m, data, w);
    const Vector truth = ab.true_log_k();
    for (std::size_t j = 0; j < truth.size(); ++j) {
        EXPECT_EQ(m.p()[j], p[j]);
        EXPECT_NEAR(p[j], truth[j], 0.1) << "reaction " << j;
    }
}

TEST(WarmStart, FloorClampsNegativeRates) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 20, 0.0);
    auto m = make_model(ab, b, data, {});
    const Vector p = derivative_matching_log_k(m, data, 1e3);
    for (double v : p) EXPECT_GE(v, std::log(1e3) - 1e-12);
    EXPECT_THROW(derivative_matching_log_k(m, data, 0.0), std::invalid_argument);
}

TEST(Training, LearningRateDecay) {
    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 20, 0.01);
    TrainConfig cfg;
    cfg.iterations_per_epoch = 5;
    cfg.max_epochs = 3;
    cfg.lr_decay = 0.0;
    auto m = make_model(ab, b, data, {});
    EXPECT_THROW(train_rkinn(m, data, cfg), ConfigError);
    cfg.lr_decay = 1.5;
    EXPECT_THROW(train_rkinn(m, data, cfg), ConfigError);
    // a tiny decay freezes the parameters after the first epoch
    cfg.lr_decay = 1e-12;
    std::vector<Vector> ps;
    train_rkinn(m, data, cfg, [&](const EpochRecord& r, const SurrogateModel&, const TrainState&) {
        ps.push_back(r.p);
        return true;
    });
    ASSERT_EQ(ps.size(), 4u);
    EXPECT_GT(std::abs(ps[1][0] - ps[0][0]), 1e-6);
    EXPECT_LT(std::abs(ps[3][0] - ps[2][0]), 1e-12);
}

TEST(Sweep, ScheduleAndSingleAlpha) {
    const Vector a = geometric_schedule(1e-4, 1e4, 17);
    ASSERT_EQ(a.size(), 17u);
    EXPECT_EQ(a.front(), 1e-4);
    EXPECT_EQ(a.back(), 1e4);
    EXPECT_NEAR(a[8], 1.0, 1e-12);

    const auto ab = load_ab();
    const auto b = build_bases(ab.network);
    const auto data = make_data(ab, {{1.0, 0.0}}, 20, 0.01);
    TrainConfig cfg;
    cfg.iterations_per_epoch = 10;
    cfg.max_epochs = 3;
    auto m1 = make_model(ab, b, data, {});
    const auto rows = alpha_sweep(m1, data, cfg, {2.0});
    ASSERT_EQ(rows.size(), 1u);
    auto m2 = make_model(ab, b, data, {});
    const auto res = train_naive(m2, data, 2.0, cfg);
    EXPECT_EQ(rows[0].mse_x, res.history.back().ell_x);
    EXPECT_EQ(rows[0].p, res.history.back().p);

    auto m3 = make_model(ab, b, data, {});
    const auto both = alpha_sweep(m3, data, cfg, {0.1, 1.0, 10.0});
    ASSERT_EQ(both.size(), 5u);
    EXPECT_EQ(both[3].direction, "relaxation");
    EXPECT_EQ(both[3].alpha, 1.0);
    EXPECT_EQ(both[4].alpha, 0.1);
}
