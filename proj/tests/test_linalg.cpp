#include <gtest/gtest.h>

#include <cmath>

#include "rkinn/bundled.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/rng.hpp"

using namespace rkinn;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix A(r, c);
    for (double& v : A.storage()) v = rng.normal();
    return A;
}

double orthogonality_defect(const Matrix& Q) {
    return max_abs(matTmat(Q, Q) - Matrix::identity(Q.cols()));
}

Matrix reconstruct(const SVDResult& s, std::size_t r, std::size_t c) {
    Matrix A(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t k = 0; k < s.S.size(); ++k) A(i, j) += s.U(i, k) * s.S[k] * s.V(j, k);
    return A;
}

}  // namespace

TEST(Svd, Identity) {
    const auto s = svd(Matrix::identity(3));
    for (double v : s.S) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(Svd, Permutation) {
    const auto s = svd(Matrix{{0, 1}, {1, 0}});
    EXPECT_NEAR(s.S[0], 1.0, 1e-14);
    EXPECT_NEAR(s.S[1], 1.0, 1e-14);
}

TEST(Svd, BundledStoichiometryHasSevenNonzero) {
    const auto f = bundled_dcs_network();
    const Matrix& M = f.network.stoichiometry();
    const auto s = svd(M);
    ASSERT_EQ(s.S.size(), 10u);
    EXPECT_EQ(rank_of(s, default_rank_tol(M)), 7u);
    EXPECT_EQ(nullspace(M.transpose()).cols(), 3u);
}

TEST(Svd, RandomReconstruction) {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t r = 1 + rng.next_u64() % 20, c = 1 + rng.next_u64() % 20;
        const Matrix A = random_matrix(rng, r, c);
        const auto s = svd(A);
        ASSERT_LT(orthogonality_defect(s.U), 1e-10);
        ASSERT_LT(orthogonality_defect(s.V), 1e-10);
        for (std::size_t k = 1; k < s.S.size(); ++k) ASSERT_GE(s.S[k - 1], s.S[k]);
        ASSERT_LT(max_abs(reconstruct(s, r, c) - A), 1e-10 * std::max(1.0, s.S[0]));
    }
}

TEST(Svd, RankDeficientBasisStillOrthogonal) {
    Rng rng(3);
    const Matrix B = random_matrix(rng, 8, 2);
    const Matrix A = B * random_matrix(rng, 2, 6);
    const auto s = svd(A);
    EXPECT_LT(orthogonality_defect(s.U), 1e-10);
    EXPECT_EQ(rank(A), 2u);
    const Matrix N = nullspace(A);
    EXPECT_EQ(N.cols(), 4u);
    EXPECT_LT(max_abs(A * N), 1e-10 * s.S[0]);
    EXPECT_LT(orthogonality_defect(N), 1e-10);
}

TEST(Svd, SignConventionDeterministic) {
    Rng rng(5);
    const Matrix A = random_matrix(rng, 6, 4);
    const auto s = svd(A);
    for (std::size_t k = 0; k < 4; ++k) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < 6; ++i)
            if (std::abs(s.U(i, k)) > std::abs(s.U(arg, k))) arg = i;
        EXPECT_GT(s.U(arg, k), 0.0);
    }
    EXPECT_EQ(svd(A).U, s.U);
}

TEST(Svd, RejectsNonFinite) {
    Matrix A{{1, NAN}, {0, 1}};
    EXPECT_THROW(svd(A), std::invalid_argument);
}

TEST(EigSym, Diagonal) {
    const auto e = eig_sym(Matrix{{1, 0}, {0, 3}});
    EXPECT_DOUBLE_EQ(e.values[0], 3.0);
    EXPECT_DOUBLE_EQ(e.values[1], 1.0);
    EXPECT_NEAR(std::abs(e.vectors(1, 0)), 1.0, 1e-15);
    EXPECT_NEAR(std::abs(e.vectors(0, 1)), 1.0, 1e-15);
}

TEST(EigSym, TwoByTwo) {
    const auto e = eig_sym(Matrix{{2, 1}, {1, 2}});
    EXPECT_NEAR(e.values[0], 3.0, 1e-14);
    EXPECT_NEAR(e.values[1], 1.0, 1e-14);
}

TEST(EigSym, RandomSymmetricReconstruction) {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.next_u64() % 15;
        const Matrix G = random_matrix(rng, n, n);
        const Matrix A = G + G.transpose();
        const auto e = eig_sym(A);
        const double scale = std::max(1.0, std::abs(e.values[0]));
        for (std::size_t k = 0; k < n; ++k) {
            const Vector v = e.vectors.col(k);
            Vector r = matvec(A, v);
            for (std::size_t i = 0; i < n; ++i) r[i] -= e.values[k] * v[i];
            ASSERT_LT(norm2(r), 1e-9 * scale);
        }
        const Matrix back = e.vectors * Matrix::diag(e.values) * e.vectors.transpose();
        ASSERT_LT(max_abs(back - A), 1e-9 * scale);
    }
}

TEST(EigSym, GramianNonNegative) {
    Rng rng(19);
    const Matrix G = random_matrix(rng, 9, 4);
    const auto e = eig_sym(G * G.transpose());
    for (double v : e.values) EXPECT_GE(v, -1e-10);
}

TEST(EigSym, RejectsAsymmetric) {
    EXPECT_THROW(eig_sym(Matrix{{1, 2}, {2.1, 1}}), std::invalid_argument);
}

TEST(Cholesky, Identity) {
    const Matrix B{{1, 2}, {3, 4}};
    EXPECT_EQ(cholesky_solve(Matrix::identity(2), B), B);
}

TEST(Cholesky, Scalar) {
    const Matrix X = cholesky_solve(Matrix{{4}}, Matrix{{2}});
    EXPECT_DOUBLE_EQ(X(0, 0), 0.5);
}

TEST(Cholesky, RandomSpdResidual) {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.next_u64() % 12;
        const Matrix G = random_matrix(rng, n, n);
        const Matrix A = G * G.transpose() + Matrix::identity(n) * 1e-3;
        const Matrix B = random_matrix(rng, n, 3);
        const Matrix X = cholesky_solve(A, B);
        ASSERT_LT(max_abs(A * X - B), 1e-8 * max_abs(B) * std::max(1.0, max_abs(A) * max_abs(X)));
    }
}

TEST(Cholesky, JitterRescuesSemidefinite) {
    const Matrix A{{1, 1}, {1, 1}};
    const auto c = cholesky(A);
    EXPECT_GT(c.jitter, 0.0);
}

TEST(Cholesky, IndefiniteThrows) {
    EXPECT_THROW(cholesky(Matrix{{1, 0}, {0, -1}}), NumericalError);
}

TEST(Pinv, InvertibleIsInverse) {
    const Matrix A{{2, 1}, {1, 3}};
    const Matrix P = pinv(A);
    EXPECT_LT(max_abs(A * P - Matrix::identity(2)), 1e-14);
}

TEST(Pinv, ZeroMatrix) {
    EXPECT_EQ(pinv(Matrix(3, 2)), Matrix(2, 3));
}

TEST(Pinv, RankOneOuterProduct) {
    const Vector u{1, 2, -1}, v{0.5, 3};
    const Matrix A = outer(u, v);
    const double s = dot(u, u) * dot(v, v);
    const Matrix expected = outer(v, u) * (1.0 / s);
    EXPECT_LT(max_abs(pinv(A) - expected), 1e-14);
}

TEST(Pinv, PenroseConditions) {
    Rng rng(29);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t r = 2 + rng.next_u64() % 8, c = 2 + rng.next_u64() % 8;
        const std::size_t k = 1 + rng.next_u64() % std::min(r, c);
        const Matrix A = random_matrix(rng, r, k) * random_matrix(rng, k, c);
        const Matrix P = pinv(A);
        const Matrix AP = A * P, PA = P * A;
        ASSERT_LT(max_abs(AP * A - A), 1e-8);
        ASSERT_LT(max_abs(PA * P - P), 1e-8);
        ASSERT_LT(max_abs(AP - AP.transpose()), 1e-8);
        ASSERT_LT(max_abs(PA - PA.transpose()), 1e-8);
    }
}

TEST(Pinv, DoublePinvFullRank) {
    Rng rng(31);
    const Matrix A = random_matrix(rng, 7, 4);
    EXPECT_LT(max_abs(pinv(pinv(A)) - A), 1e-8);
}

TEST(SVD, StallingRotationRegression) {
    // parameter Jacobian with entries spanning 13 decades; once stalled on a
    // pair whose coupling sat just above eps
    const Matrix J{
        {0, 0.012576300802707576, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0},
        {0, 0, 0, 8.5619468109186803e-13, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0},
        {0, 0, 0, 0, 0, 2.6453111378304595, 0, 0, 0, 0, 0, 0, 0, 0},
        {0, -0.012576300802707576, 0, 0, 0, 0, 0, 0.55893462374017144, 0, 0, 0, 0, 0, 0},
        {0, 0, 0, -8.5619468109186803e-13, 0, 0, 0, 0, 0, 1.0644985427342337e-06, 0, 0, 0, 0},
        {0, 0, 0, 0, 0, -2.6453111378304595, 0, 0, 0, 0, 0, 0, 1.2525277351950753e-06, 0},
        {0, 0, 0, 0, 0, 0, 0, -1.1178692474803429, 0, 0, -7.0168787729811705e-10, 0, 0, 0},
        {0, 0, 0, 0, 0, 0, 0, 0, 0, -2.1289970854684674e-06, -7.0168787729811705e-10, 0, -1.2525277351950753e-06, 0},
        {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 7.0168787729811705e-10, 0, -1.2525277351950753e-06, 0},
        {0, 0.012576300802707576, 0, 8.5619468109186803e-13, 0, 2.6453111378304595, 0, 0.55893462374017144, 0, 1.0644985427342337e-06, 7.0168787729811705e-10, 0, 1.2525277351950753e-06, 0}};
    const SVDResult s = svd(J);
    Matrix S(J.rows(), J.cols());
    for (std::size_t k = 0; k < s.S.size(); ++k) S(k, k) = s.S[k];
    EXPECT_LT(max_abs(s.U * S * s.V.transpose() - J), 1e-14);
}
