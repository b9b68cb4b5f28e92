#pragma once

// Forward-mode dual numbers carrying one tangent. Nesting Dual<Dual<double>>
// gives mixed second derivatives.

#include <cmath>

namespace rkinn {

template <class T>
struct Dual {
    T v{};  // value
    T d{};  // tangent

    constexpr Dual() = default;
    constexpr Dual(T value) : v(value), d{} {}  // NOLINT(google-explicit-constructor)
    constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

    Dual& operator+=(const Dual& o) {
        v += o.v;
        d += o.d;
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        d -= o.d;
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        d = d * o.v + v * o.d;
        v *= o.v;
        return *this;
    }
};

template <class T> Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <class T> Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <class T> Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <class T> Dual<T> operator-(const Dual<T>& a) { return {-a.v, -a.d}; }
template <class T> Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
    const T inv = T(1.0) / b.v;
    return {a.v * inv, (a.d - a.v * inv * b.d) * inv};
}

template <class T> Dual<T> operator*(const Dual<T>& a, double s) { return {a.v * s, a.d * s}; }
template <class T> Dual<T> operator*(double s, const Dual<T>& a) { return {a.v * s, a.d * s}; }
template <class T> Dual<T> operator+(const Dual<T>& a, double s) { return {a.v + s, a.d}; }
template <class T> Dual<T> operator+(double s, const Dual<T>& a) { return {a.v + s, a.d}; }
template <class T> Dual<T> operator-(double s, const Dual<T>& a) { return {s - a.v, -a.d}; }
template <class T> Dual<T> operator-(const Dual<T>& a, double s) { return {a.v - s, a.d}; }

template <class T> Dual<T> exp(const Dual<T>& a) {
    using std::exp;
    const T e = exp(a.v);
    return {e, e * a.d};
}
template <class T> Dual<T> log(const Dual<T>& a) {
    using std::log;
    return {log(a.v), a.d / a.v};
}
template <class T> Dual<T> tanh(const Dual<T>& a) {
    using std::tanh;
    const T t = tanh(a.v);
    return {t, (T(1.0) - t * t) * a.d};
}

/// Logistic sigmoid, stable for large |x|.
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

template <class T> Dual<T> sigmoid(const Dual<T>& a) {
    const T s = sigmoid(a.v);
    return {s, s * (T(1.0) - s) * a.d};
}

}  // namespace rkinn
