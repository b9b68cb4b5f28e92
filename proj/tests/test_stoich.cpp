#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "rkinn/bundled.hpp"
#include "rkinn/decomp.hpp"
#include "rkinn/rng.hpp"
#include "rkinn/stoich.hpp"

using namespace rkinn;

namespace {

ReactionNetwork a_to_b() {
    return ReactionNetwork({"A", "B"}, {false, false}, Matrix{{-1}, {1}}, {"A -> B"});
}

std::size_t reaction_index(const ReactionNetwork& net, const std::string& label) {
    const auto& r = net.reactions();
    return static_cast<std::size_t>(std::find(r.begin(), r.end(), label) - r.begin());
}

Vector random_state(Rng& rng, std::size_t n) {
    Vector x(n);
    for (double& v : x) v = rng.uniform(0.05, 1.0);
    return x;
}

Vector ic1() { return {0.6, 0.4, 0.0, 0, 0, 0, 0, 0, 0, 1.0}; }

}  // namespace

TEST(Psi, AdsorptionTerm) {
    const auto f = bundled_dcs_network();
    Vector x(10, 0.3);
    x[0] = 0.6;
    x[9] = 1.0;
    const auto psi = f.network.psi(x);
    EXPECT_DOUBLE_EQ(psi[reaction_index(f.network, "A + * -> A*")], 0.6);
}

TEST(Psi, AllOnes) {
    const auto f = bundled_dcs_network();
    for (double v : f.network.psi(Vector(10, 1.0))) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Psi, SecondOrderSurfaceStep) {
    const auto f = bundled_dcs_network();
    Vector x(10, 0.7);
    x[6] = 0.5;  // D*
    const auto psi = f.network.psi(x);
    EXPECT_DOUBLE_EQ(psi[reaction_index(f.network, "2 D* -> A* + *")], 0.25);
}

TEST(Psi, RejectsNonFinite) {
    const auto f = bundled_dcs_network();
    Vector x(10, 0.1);
    x[3] = NAN;
    EXPECT_THROW(f.network.psi(x), std::invalid_argument);
}

TEST(Rhs, ZeroRateLimit) {
    const auto f = bundled_dcs_network();
    const Vector rhs = f.network.rhs(Vector(10, 0.5), Vector(14, -800.0));
    for (double v : rhs) EXPECT_EQ(v, 0.0);
}

TEST(Rhs, DetailedBalanceEquilibrium) {
    // A <-> B with k_f = 2, k_r = 1 balances at x_B / x_A = 2
    const ReactionNetwork net({"A", "B"}, {false, false}, Matrix{{-1, 1}, {1, -1}}, {"A -> B", "B -> A"});
    const Vector x{1.0 / 3.0, 2.0 / 3.0};
    const Vector rhs = net.rhs(x, Vector{std::log(2.0), 0.0});
    EXPECT_NEAR(rhs[0], 0.0, 1e-15);
    EXPECT_NEAR(rhs[1], 0.0, 1e-15);
}

TEST(Rhs, InitialStateAdsorptionRate) {
    const auto f = bundled_dcs_network();
    const Vector rhs = f.network.rhs(ic1(), f.true_log_k());
    EXPECT_NEAR(rhs[0], -12.0, 1e-12);
}

TEST(Rhs, DimensionMismatch) {
    const auto f = bundled_dcs_network();
    EXPECT_THROW(f.network.rhs(Vector(9, 0.1), Vector(14, 0.0)), std::invalid_argument);
    EXPECT_THROW(f.network.rhs(Vector(10, 0.1), Vector(13, 0.0)), std::invalid_argument);
}

TEST(Rhs, HomogeneousInRateScale) {
    const auto f = bundled_dcs_network();
    Rng rng(2);
    const Vector x = random_state(rng, 10);
    Vector p = f.true_log_k();
    const Vector r0 = f.network.rhs(x, p);
    for (double& v : p) v += 0.7;
    const Vector r1 = f.network.rhs(x, p);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(r1[i], std::exp(0.7) * r0[i], 1e-12 * (1 + std::abs(r1[i])));
}

TEST(Rhs, LeftNullVectorsAnnihilate) {
    const auto f = bundled_dcs_network();
    const Matrix L = nullspace(f.network.stoichiometry().transpose());
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const Vector x = random_state(rng, 10);
        Vector p(14);
        for (double& v : p) v = rng.uniform(-2, 6);
        const Vector r = f.network.rhs(x, p);
        const double scale = std::max(1.0, max_abs(r));
        for (double v : matTvec(L, r)) ASSERT_LT(std::abs(v), 1e-12 * scale);
    }
}

TEST(JacX, LinearReaction) {
    const auto net = a_to_b();
    const Matrix J = net.jac_x(Vector{0.3, 0.9}, Vector{0.0});
    EXPECT_EQ(J, (Matrix{{-1, 0}, {1, 0}}));
}

TEST(JacX, MatchesFiniteDifferences) {
    const auto f = bundled_dcs_network();
    const auto& net = f.network;
    Rng rng(6);
    const Vector p = f.true_log_k();
    for (int trial = 0; trial < 5; ++trial) {
        const Vector x = random_state(rng, 10);
        const Matrix J = net.jac_x(x, p);
        const double h = 1e-6;
        for (std::size_t k = 0; k < 10; ++k) {
            Vector xp = x, xm = x;
            xp[k] += h;
            xm[k] -= h;
            const Vector rp = net.rhs(xp, p), rm = net.rhs(xm, p);
            for (std::size_t i = 0; i < 10; ++i) {
                const double fd = (rp[i] - rm[i]) / (2 * h);
                ASSERT_LT(std::abs(J(i, k) - fd), 1e-6 * std::max(1.0, std::abs(fd)));
            }
        }
    }
}

TEST(JacX, ZeroStateKillsBimolecularColumns) {
    const auto f = bundled_dcs_network();
    const auto& net = f.network;
    const Vector p = f.true_log_k();
    const Matrix J = net.jac_x(Vector(10, 0.0), p);
    // only first-order steps (desorption) survive at the origin
    Matrix expected(10, 10);
    for (std::size_t j = 0; j < net.n_reactions(); ++j) {
        const auto& rs = net.reactants()[j];
        if (rs.size() != 1 || rs[0].order != 1) continue;
        for (std::size_t i = 0; i < 10; ++i) expected(i, rs[0].species) += net.stoichiometry()(i, j) * std::exp(p[j]);
    }
    EXPECT_LT(max_abs(J - expected), 1e-12);
    std::size_t bimolecular = 0;
    for (const auto& rs : net.reactants()) {
        int order = 0;
        for (const auto& r : rs) order += r.order;
        bimolecular += order >= 2;
    }
    EXPECT_GT(bimolecular, 0u);
}

TEST(JacP, ZeroPsi) {
    const auto f = bundled_dcs_network();
    EXPECT_EQ(max_abs(f.network.jac_p(Vector(10, 0.0), f.true_log_k())), 0.0);
}

TEST(JacP, LinearReaction) {
    const Matrix J = a_to_b().jac_p(Vector{1.0, 0.0}, Vector{0.0});
    EXPECT_EQ(J, (Matrix{{-1}, {1}}));
}

TEST(JacP, MatchesFiniteDifferences) {
    const auto f = bundled_dcs_network();
    Rng rng(8);
    const Vector x = random_state(rng, 10);
    const Vector p = f.true_log_k();
    const Matrix J = f.network.jac_p(x, p);
    const double h = 1e-6;
    for (std::size_t k = 0; k < 14; ++k) {
        Vector pp = p, pm = p;
        pp[k] += h;
        pm[k] -= h;
        const Vector rp = f.network.rhs(x, pp), rm = f.network.rhs(x, pm);
        for (std::size_t i = 0; i < 10; ++i) {
            const double fd = (rp[i] - rm[i]) / (2 * h);
            ASSERT_LT(std::abs(J(i, k) - fd), 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(JacP, FirstOrderErrorDecaysQuadratically) {
    const auto f = bundled_dcs_network();
    Rng rng(10);
    const Vector x = random_state(rng, 10);
    const Vector p = f.true_log_k();
    Vector dir(14);
    for (double& v : dir) v = rng.normal();
    const Matrix J = f.network.jac_p(x, p);
    auto err = [&](double s) {
        Vector pp = p;
        for (std::size_t k = 0; k < 14; ++k) pp[k] += s * dir[k];
        const Vector r1 = f.network.rhs(x, pp), r0 = f.network.rhs(x, p);
        Vector lin = matvec(J, dir);
        double e = 0;
        for (std::size_t i = 0; i < 10; ++i) e = std::max(e, std::abs(r1[i] - r0[i] - s * lin[i]));
        return e;
    };
    const double e1 = err(1e-3), e2 = err(5e-4);
    EXPECT_NEAR(e1 / e2, 4.0, 0.2);
}

TEST(Network, RejectsReactionWithoutReactants) {
    EXPECT_THROW(ReactionNetwork({"A", "B"}, {false, false}, Matrix{{1}, {1}}, {"-> A + B"}), ConfigError);
}

TEST(Network, RejectsShapeMismatch) {
    EXPECT_THROW(ReactionNetwork({"A", "B"}, {false}, Matrix{{-1}, {1}}, {"A -> B"}), ConfigError);
    EXPECT_THROW(ReactionNetwork({"A"}, {false}, Matrix{{-1}}, {"A ->"}), ConfigError);
}

TEST(NetworkFile, RejectsUnknownKeys) {
    auto j = network_to_json(bundled_dcs_network());
    j["colour"] = "blue";
    EXPECT_THROW(network_from_json(j), ConfigError);
}

TEST(NetworkFile, RoundTrip) {
    const auto f = bundled_dcs_network();
    const auto g = network_from_json(network_to_json(f));
    EXPECT_EQ(g.network.stoichiometry(), f.network.stoichiometry());
    EXPECT_EQ(g.network.species(), f.network.species());
    EXPECT_EQ(g.ln_k0, f.ln_k0);
}

TEST(BundledNetwork, MatchesShippedDataFile) {
    const auto disk = load_network(std::string(RKINN_DATA_DIR) + "/dcs_network.json");
    const auto mem = bundled_dcs_network();
    EXPECT_EQ(disk.network.stoichiometry(), mem.network.stoichiometry());
    EXPECT_EQ(disk.rate_constants, mem.rate_constants);
    EXPECT_EQ(disk.ln_k0, mem.ln_k0);
}

TEST(BundledNetwork, Checksum) {
    // frozen fingerprint of M and ln k0; any edit to the dataset must update it
    const auto f = bundled_dcs_network();
    const Matrix& M = f.network.stoichiometry();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < M.rows(); ++i)
        for (std::size_t j = 0; j < M.cols(); ++j) {
            h ^= static_cast<std::uint64_t>(static_cast<int>(M(i, j)) + 3) & 0xff;
            h *= 0x100000001b3ULL;
        }
    EXPECT_EQ(M.rows(), 10u);
    EXPECT_EQ(M.cols(), 14u);
    EXPECT_EQ(h, 0xdf5d048ac857d2cdULL);
    double sum = 0;
    for (double v : f.ln_k0) sum += v;
    EXPECT_NEAR(sum, 63.34, 1e-9);
    for (std::size_t j = 0; j < 14; ++j) EXPECT_NEAR(f.ln_k0[j], std::round(std::log(f.rate_constants[j]) * 100) / 100, 1e-12);
}

TEST(BundledNetwork, EntriesWithinTwo) {
    const auto& M = bundled_dcs_network().network.stoichiometry();
    for (double v : M.storage()) EXPECT_LE(std::abs(v), 2.0);
}
