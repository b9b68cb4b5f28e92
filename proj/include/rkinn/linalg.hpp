#pragma once

// Small dense linear algebra: row-major matrices, one-sided Jacobi SVD,
// cyclic Jacobi symmetric eigendecomposition, Cholesky with a jitter ladder,
// pseudo-inverse and nullspace extraction. Sized for matrices up to ~100x100.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rkinn/error.hpp"

namespace rkinn {

using Vector = std::vector<double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            detail::require(row.size() == cols_, "Matrix: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix I(n, n);
        for (std::size_t i = 0; i < n; ++i) I(i, i) = 1.0;
        return I;
    }
    static Matrix diag(std::span<const double> d) {
        Matrix D(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) D(i, i) = d[i];
        return D;
    }
    /// Column matrix from a vector.
    static Matrix column(std::span<const double> v) {
        Matrix C(v.size(), 1);
        std::copy(v.begin(), v.end(), C.data_.begin());
        return C;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept {
        return {data_.data() + i * cols_, cols_};
    }
    Vector col(std::size_t j) const {
        Vector c(rows_);
        for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
        return c;
    }
    void set_col(std::size_t j, std::span<const double> v) {
        for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
    }

    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Matrix transpose() const {
        Matrix T(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) T(j, i) = (*this)(i, j);
        return T;
    }

    /// Rows/cols selected by index lists.
    Matrix select_rows(std::span<const std::size_t> idx) const {
        Matrix S(idx.size(), cols_);
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy_n(row(idx[k]).begin(), cols_, S.row(k).begin());
        return S;
    }
    Matrix select_cols(std::size_t first, std::size_t count) const {
        Matrix S(rows_, count);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < count; ++j) S(i, j) = (*this)(i, first + j);
        return S;
    }

    Matrix& operator+=(const Matrix& o) {
        detail::require(rows_ == o.rows_ && cols_ == o.cols_, "Matrix +=: shape mismatch");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        detail::require(rows_ == o.rows_ && cols_ == o.cols_, "Matrix -=: shape mismatch");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix operator*(const Matrix& a, const Matrix& b) {
    detail::require(a.cols() == b.rows(), "Matrix *: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

/// y = A x
inline Vector matvec(const Matrix& a, std::span<const double> x) {
    detail::require(a.cols() == x.size(), "matvec: dimension mismatch");
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        const auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) s += r[j] * x[j];
        y[i] = s;
    }
    return y;
}

/// y = A^T x
inline Vector matTvec(const Matrix& a, std::span<const double> x) {
    detail::require(a.rows() == x.size(), "matTvec: dimension mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) y[j] += r[j] * xi;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}
inline double max_abs(const Matrix& a) { return max_abs(a.storage()); }

inline double frobenius(const Matrix& a) { return norm2(a.storage()); }

inline double trace(const Matrix& a) {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
    return t;
}

inline Matrix outer(std::span<const double> a, std::span<const double> b) {
    Matrix o(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) o(i, j) = a[i] * b[j];
    return o;
}

/// A^T B without forming the transpose.
inline Matrix matTmat(const Matrix& a, const Matrix& b) {
    detail::require(a.rows() == b.rows(), "matTmat: dimension mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
        }
    return c;
}

/// B^T A B for square A (congruence; used for covariance projection).
inline Matrix congruence(const Matrix& b, const Matrix& a) { return matTmat(b, a * b); }

inline Matrix symmetrize(const Matrix& a) {
    Matrix s = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            const double v = 0.5 * (a(i, j) + a(j, i));
            s(i, j) = v;
            s(j, i) = v;
        }
    return s;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Decompositions

struct SVDResult {
    Matrix U;  // n x n
    Vector S;  // min(n, m), descending
    Matrix V;  // m x m
};

namespace detail {

// Largest-magnitude entry of each column made positive; `partner` columns
// (same index, if present) flipped along.
inline void fix_signs(Matrix& U, Matrix* partner, std::size_t paired) {
    for (std::size_t j = 0; j < U.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < U.rows(); ++i) {
            // ties resolved toward the first index; 1e-12 guard keeps
            // numerically-equal entries from flipping between platforms
            if (std::abs(U(i, j)) > best + 1e-12) {
                best = std::abs(U(i, j));
                arg = i;
            }
        }
        if (U(arg, j) < 0.0) {
            for (std::size_t i = 0; i < U.rows(); ++i) U(i, j) = -U(i, j);
            if (partner && j < paired)
                for (std::size_t i = 0; i < partner->rows(); ++i) (*partner)(i, j) = -(*partner)(i, j);
        }
    }
}

// Fill columns [first, n) of Q with an orthonormal completion of the first
// `first` columns, via twice-iterated Gram-Schmidt over the canonical basis.
inline void complete_basis(Matrix& Q, std::size_t first) {
    const std::size_t n = Q.rows();
    std::size_t filled = first;
    for (std::size_t e = 0; e < n && filled < Q.cols(); ++e) {
        Vector v(n, 0.0);
        v[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t j = 0; j < filled; ++j) {
                double d = 0.0;
                for (std::size_t i = 0; i < n; ++i) d += Q(i, j) * v[i];
                for (std::size_t i = 0; i < n; ++i) v[i] -= d * Q(i, j);
            }
        const double nv = norm2(v);
        if (nv < 1e-8) continue;
        for (std::size_t i = 0; i < n; ++i) Q(i, filled) = v[i] / nv;
        ++filled;
    }
    if (filled != Q.cols()) throw NumericalError("complete_basis: failed to complete orthonormal basis");
}

// One-sided Jacobi for n >= m.
inline SVDResult svd_tall(const Matrix& A, int max_sweeps) {
    const std::size_t n = A.rows(), m = A.cols();
    // column-major working copy
    std::vector<Vector> W(m, Vector(n));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i) W[j][i] = A(i, j);
    std::vector<Vector> Vc(m, Vector(m, 0.0));
    for (std::size_t j = 0; j < m; ++j) Vc[j][j] = 1.0;

    constexpr double eps = std::numeric_limits<double>::epsilon();
    // columns below this squared norm are numerically zero and left alone
    const double tiny = std::pow(eps * frobenius(A), 2);
    // pairs coupled below this are rounding noise at the scale of A
    const double tiny_coupling = std::pow(static_cast<double>(std::max(n, m)) * eps * frobenius(A), 2);
    // below eps itself a rotation can stall on its own rounding
    const double rot_tol = std::sqrt(static_cast<double>(n)) * eps;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < m; ++p)
            for (std::size_t q = p + 1; q < m; ++q) {
                const double alpha = dot(W[p], W[p]);
                const double beta = dot(W[q], W[q]);
                const double gamma = dot(W[p], W[q]);
                if (alpha <= tiny || beta <= tiny) continue;
                if (std::abs(gamma) <= std::max(rot_tol * std::sqrt(alpha * beta), tiny_coupling)) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double wp = W[p][i], wq = W[q][i];
                    W[p][i] = c * wp - s * wq;
                    W[q][i] = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = Vc[p][i], vq = Vc[q][i];
                    Vc[p][i] = c * vp - s * vq;
                    Vc[q][i] = s * vp + c * vq;
                }
            }
    }
    if (!converged)
        throw NumericalError("svd: one-sided Jacobi did not converge after " +
                             std::to_string(max_sweeps) + " sweeps");

    Vector sv(m);
    for (std::size_t j = 0; j < m; ++j) sv[j] = norm2(W[j]);
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sv[a] > sv[b]; });

    SVDResult r{Matrix(n, n), Vector(m), Matrix(m, m)};
    const double s0 = m ? sv[order[0]] : 0.0;
    const double cut = static_cast<double>(std::max(n, m)) * eps * s0;
    std::size_t nonzero = 0;
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t j = order[k];
        r.S[k] = sv[j];
        for (std::size_t i = 0; i < m; ++i) r.V(i, k) = Vc[j][i];
        if (sv[j] > cut && sv[j] > 0.0) {
            for (std::size_t i = 0; i < n; ++i) r.U(i, k) = W[j][i] / sv[j];
            ++nonzero;
        }
    }
    complete_basis(r.U, nonzero);
    fix_signs(r.U, &r.V, m);
    return r;
}

}  // namespace detail

/// Full SVD A = U diag(S) V^T with U (n x n), V (m x m), S descending.
inline SVDResult svd(const Matrix& A, int max_sweeps = 100) {
    detail::require(all_finite(A.storage()), "svd: non-finite input");
    if (A.rows() >= A.cols()) return detail::svd_tall(A, max_sweeps);
    SVDResult t = detail::svd_tall(A.transpose(), max_sweeps);
    SVDResult r{std::move(t.V), std::move(t.S), std::move(t.U)};
    detail::fix_signs(r.U, &r.V, r.S.size());
    return r;
}

/// Default rank cutoff relative to the largest singular value.
inline double default_rank_tol(const Matrix& A) {
    return static_cast<double>(std::max(A.rows(), A.cols())) * std::numeric_limits<double>::epsilon();
}

inline std::size_t rank_of(const SVDResult& s, double rel_tol) {
    if (s.S.empty() || s.S[0] == 0.0) return 0;
    const double cut = rel_tol * s.S[0];
    return static_cast<std::size_t>(
        std::count_if(s.S.begin(), s.S.end(), [cut](double v) { return v > cut; }));
}

inline std::size_t rank(const Matrix& A, double rel_tol = -1.0) {
    return rank_of(svd(A), rel_tol < 0 ? default_rank_tol(A) : rel_tol);
}

/// Orthonormal basis of {v : A v = 0} as columns.
inline Matrix nullspace(const Matrix& A, double rel_tol = -1.0) {
    if (A.rows() == 0) return Matrix::identity(A.cols());
    const SVDResult s = svd(A);
    const std::size_t r = rank_of(s, rel_tol < 0 ? default_rank_tol(A) : rel_tol);
    return s.V.select_cols(r, A.cols() - r);
}

/// Moore-Penrose pseudo-inverse; singular values below rel_tol * S0 dropped.
inline Matrix pinv(const Matrix& A, double rel_tol = -1.0) {
    Matrix P(A.cols(), A.rows());
    if (A.rows() == 0 || A.cols() == 0) return P;
    const SVDResult s = svd(A);
    const std::size_t r = rank_of(s, rel_tol < 0 ? default_rank_tol(A) : rel_tol);
    for (std::size_t k = 0; k < r; ++k) {
        const double inv = 1.0 / s.S[k];
        for (std::size_t i = 0; i < A.cols(); ++i) {
            const double vik = s.V(i, k) * inv;
            if (vik == 0.0) continue;
            for (std::size_t j = 0; j < A.rows(); ++j) P(i, j) += vik * s.U(j, k);
        }
    }
    return P;
}

struct EigResult {
    Vector values;   // descending
    Matrix vectors;  // columns
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline EigResult eig_sym(const Matrix& A, int max_sweeps = 100) {
    detail::require(A.rows() == A.cols(), "eig_sym: matrix must be square");
    detail::require(all_finite(A.storage()), "eig_sym: non-finite input");
    const std::size_t n = A.rows();
    const double scale = std::max(1.0, max_abs(A));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(A(i, j) - A(j, i)) > 1e-12 * scale)
                throw std::invalid_argument("eig_sym: matrix is not symmetric");

    Matrix a = symmetrize(A);
    Matrix v = Matrix::identity(n);
    bool converged = n < 2;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        double off = 0.0, diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diag += a(i, i) * a(i, i);
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        }
        if (off == 0.0 || off <= 1e-32 * diag) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }
    if (!converged)
        throw NumericalError("eig_sym: Jacobi iteration did not converge after " +
                             std::to_string(max_sweeps) + " sweeps");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return a(x, x) > a(y, y); });
    EigResult r{Vector(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        r.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) r.vectors(i, k) = v(i, order[k]);
    }
    detail::fix_signs(r.vectors, nullptr, 0);
    return r;
}

/// Lower-triangular Cholesky factor, plus the diagonal jitter that was needed.
struct Cholesky {
    Matrix L;
    double jitter = 0.0;

    Vector solve(std::span<const double> b) const {
        const std::size_t n = L.rows();
        Vector y(b.begin(), b.end());
        for (std::size_t i = 0; i < n; ++i) {
            double s = y[i];
            for (std::size_t k = 0; k < i; ++k) s -= L(i, k) * y[k];
            y[i] = s / L(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= L(k, ii) * y[k];
            y[ii] = s / L(ii, ii);
        }
        return y;
    }

    Matrix solve(const Matrix& B) const {
        Matrix X(B.rows(), B.cols());
        for (std::size_t j = 0; j < B.cols(); ++j) X.set_col(j, solve(B.col(j)));
        return X;
    }

    Matrix inverse() const { return symmetrize(solve(Matrix::identity(L.rows()))); }
};

namespace detail {

inline bool try_cholesky(const Matrix& A, double jitter, Matrix& L) {
    const std::size_t n = A.rows();
    L = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = A(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) d -= L(j, k) * L(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        L(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = 0.5 * (A(i, j) + A(j, i));
            for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
            L(i, j) = s / L(j, j);
        }
    }
    return true;
}

}  // namespace detail

/// Cholesky factorization; on failure retries with diagonal jitter starting at
/// 1e-12 * trace/n and growing x10 per retry, at most `max_retries` times.
inline Cholesky cholesky(const Matrix& A, int max_retries = 6) {
    detail::require(A.rows() == A.cols(), "cholesky: matrix must be square");
    Cholesky c;
    if (A.rows() == 0) return c;
    if (detail::try_cholesky(A, 0.0, c.L)) return c;
    const double n = static_cast<double>(A.rows());
    double base = std::abs(trace(A)) / n;
    if (!(base > 0.0)) base = 1.0;
    double jitter = 1e-12 * base;
    for (int k = 0; k < max_retries; ++k, jitter *= 10.0) {
        if (detail::try_cholesky(A, jitter, c.L)) {
            c.jitter = jitter;
            return c;
        }
    }
    throw NumericalError("cholesky: matrix is not positive definite even with jitter " +
                         std::to_string(jitter / 10.0));
}

/// Solve A X = B for symmetric positive-definite A.
inline Matrix cholesky_solve(const Matrix& A, const Matrix& B) { return cholesky(A).solve(B); }

}  // namespace rkinn
