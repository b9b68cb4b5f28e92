#pragma once

// Adaptive Dormand-Prince 5(4) integration and the synthetic-data pipeline
// (log-spaced sampling, additive Gaussian noise, hidden latent calibration).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/rng.hpp"
#include "rkinn/stoich.hpp"

namespace rkinn {

struct Trajectory {
    Vector times;
    Matrix states;       // d x n
    Matrix derivatives;  // d x n, may be empty
};

struct OdeOptions {
    double rtol = 1e-8;
    double atol = 1e-10;
    std::size_t max_steps = 5'000'000;
};

/// Right-hand side signature: f(t, x, dxdt).
using OdeRhs = std::function<void(double, std::span<const double>, std::span<double>)>;

namespace detail {

struct Dopri5Tableau {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                            b6 = 11.0 / 84;
    // b - b_hat
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

/// Integrates x' = f(t, x) from (t0, x0) and reports the state exactly at
/// each requested time (steps are clipped to land on them). Times must be
/// non-decreasing and >= t0.
inline Trajectory integrate_ode(const OdeRhs& f, double t0, std::span<const double> x0,
                                std::span<const double> times, const OdeOptions& opt = {}) {
    detail::require(opt.rtol > 0 && opt.atol > 0, "integrate_ode: tolerances must be positive");
    detail::require(all_finite(x0), "integrate_ode: non-finite initial state");
    for (std::size_t i = 0; i < times.size(); ++i) {
        detail::require(times[i] >= t0, "integrate_ode: requested time precedes t0");
        detail::require(i == 0 || times[i] >= times[i - 1], "integrate_ode: times must be increasing");
    }
    using T = detail::Dopri5Tableau;
    const std::size_t n = x0.size();
    Trajectory out{Vector(times.begin(), times.end()), Matrix(times.size(), n), Matrix(times.size(), n)};

    Vector y(x0.begin(), x0.end()), ynew(n), ytmp(n), err(n);
    std::vector<Vector> k(7, Vector(n));
    double t = t0;
    f(t, y, k[0]);

    auto scaled_norm = [&](std::span<const double> e, std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double sc = opt.atol + opt.rtol * std::max(std::abs(a[i]), std::abs(b[i]));
            s += (e[i] / sc) * (e[i] / sc);
        }
        return n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
    };

    // initial step (Hairer-Wanner heuristic)
    double h;
    {
        const double d0 = scaled_norm(y, y, y), d1 = scaled_norm(k[0], y, y);
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        if (!times.empty() && times.back() > t0) h0 = std::min(h0, times.back() - t0);
        for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h0 * k[0][i];
        f(t + h0, ytmp, k[1]);
        for (std::size_t i = 0; i < n; ++i) err[i] = k[1][i] - k[0][i];
        const double d2 = scaled_norm(err, y, y) / h0;
        const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                    : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
        h = std::min(100 * h0, h1);
    }

    constexpr double safety = 0.9, facmin = 0.2, facmax = 10.0, beta = 0.04;
    const double expo = 0.2 - beta * 0.75;
    double err_old = 1e-4;
    std::size_t steps = 0;

    for (std::size_t out_i = 0; out_i < times.size(); ++out_i) {
        const double target = times[out_i];
        while (t < target) {
            if (++steps > opt.max_steps) {
                std::ostringstream os;
                os << "integrate_ode: step limit exceeded at t=" << t;
                throw NumericalError(os.str());
            }
            const bool clipped = t + h >= target;
            const double hs = clipped ? target - t : h;
            if (hs < 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t)) && !clipped) {
                std::ostringstream os;
                os << "integrate_ode: step size underflow at t=" << t << " (problem too stiff?)";
                throw NumericalError(os.str());
            }
            auto stage = [&](std::size_t dst, double c, std::initializer_list<double> a) {
                for (std::size_t i = 0; i < n; ++i) {
                    double s = 0.0;
                    std::size_t j = 0;
                    for (double aj : a) s += aj * k[j++][i];
                    ytmp[i] = y[i] + hs * s;
                }
                f(t + c * hs, ytmp, k[dst]);
            };
            stage(1, T::c2, {T::a21});
            stage(2, T::c3, {T::a31, T::a32});
            stage(3, T::c4, {T::a41, T::a42, T::a43});
            stage(4, T::c5, {T::a51, T::a52, T::a53, T::a54});
            stage(5, 1.0, {T::a61, T::a62, T::a63, T::a64, T::a65});
            for (std::size_t i = 0; i < n; ++i)
                ynew[i] = y[i] + hs * (T::b1 * k[0][i] + T::b3 * k[2][i] + T::b4 * k[3][i] + T::b5 * k[4][i] +
                                       T::b6 * k[5][i]);
            f(t + hs, ynew, k[6]);
            for (std::size_t i = 0; i < n; ++i)
                err[i] = hs * (T::e1 * k[0][i] + T::e3 * k[2][i] + T::e4 * k[3][i] + T::e5 * k[4][i] +
                               T::e6 * k[5][i] + T::e7 * k[6][i]);
            double e = scaled_norm(err, y, ynew);
            if (!std::isfinite(e)) e = 1e10;

            if (e <= 1.0) {
                // accept; PI control
                const double fac = std::pow(e, expo) / std::pow(err_old, beta) / safety;
                const double hnew = hs / std::clamp(fac, 1.0 / facmax, 1.0 / facmin);
                err_old = std::max(e, 1e-4);
                t = clipped ? target : t + hs;
                y.swap(ynew);
                k[0].swap(k[6]);
                if (!clipped) h = hnew;
                else h = std::max(h, hnew);
            } else {
                const double fac = std::pow(e, expo) / safety;
                h = hs / std::min(fac, 1.0 / facmin);
            }
        }
        std::copy(y.begin(), y.end(), out.states.row(out_i).begin());
        std::copy(k[0].begin(), k[0].end(), out.derivatives.row(out_i).begin());
        if (!all_finite(y)) {
            std::ostringstream os;
            os << "integrate_ode: non-finite state at t=" << t;
            throw NumericalError(os.str());
        }
    }
    return out;
}

/// Kinetic model trajectory from x0 at t0, reported at `times`.
inline Trajectory solve_ivp(const ReactionNetwork& net, std::span<const double> p, std::span<const double> x0,
                            std::span<const double> times, double rtol = 1e-8, double atol = 1e-10,
                            double t0 = 0.0) {
    net.check_params(p);
    net.check_state(x0);
    Vector k(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) k[j] = std::exp(p[j]);
    const OdeRhs f = [&](double, std::span<const double> x, std::span<double> dx) { net.rhs_k(x, k, dx); };
    return integrate_ode(f, t0, x0, times, {rtol, atol});
}

/// n geometrically spaced times from t_min to t_max inclusive.
inline Vector log_time_grid(double t_min, double t_max, std::size_t n) {
    detail::require(n >= 1, "log_time_grid: need at least one point");
    detail::require(t_min > 0 && t_max >= t_min, "log_time_grid: need 0 < t_min <= t_max");
    if (n == 1) {
        detail::require(t_min == t_max, "log_time_grid: a single point requires t_min == t_max");
        return {t_min};
    }
    Vector t(n);
    const double a = std::log(t_min), b = std::log(t_max);
    for (std::size_t i = 0; i < n; ++i)
        t[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
    t.front() = t_min;
    t.back() = t_max;
    return t;
}

struct ExperimentSpec {
    std::string name;
    Vector x0;
    double t_min = 1e-4;
    double t_max = 10.0;
    std::size_t n_points = 100;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    Vector hidden_gamma;  // one entry per latent species; empty means unit
};

struct SyntheticData {
    Trajectory clean;
    Matrix observed_bulk;   // d x n_observable
    Matrix latent_signal;   // d x n_latent
};

/// Integrates the model, adds i.i.d. N(0, sigma^2) noise to every state
/// entry (seeded), then divides latent entries by the hidden calibration
/// factors so that latent coverage = signal o gamma.
inline SyntheticData generate_synthetic(const ExperimentSpec& spec, const ReactionNetwork& net,
                                        std::span<const double> p, const OdeOptions& opt = {}) {
    net.check_state(spec.x0);
    for (double v : spec.x0)
        if (v < 0) throw std::invalid_argument("generate_synthetic: negative initial state");
    detail::require(spec.noise_sigma >= 0, "generate_synthetic: noise sigma must be non-negative");
    const auto obs = net.observable_indices();
    const auto lat = net.latent_indices();
    Vector gamma = spec.hidden_gamma.empty() ? Vector(lat.size(), 1.0) : spec.hidden_gamma;
    detail::require(gamma.size() == lat.size(), "generate_synthetic: hidden_gamma length mismatch");
    for (double g : gamma)
        detail::require(g > 0 && std::isfinite(g), "generate_synthetic: hidden_gamma entries must be positive");

    SyntheticData d;
    const Vector times = log_time_grid(spec.t_min, spec.t_max, spec.n_points);
    d.clean = solve_ivp(net, p, spec.x0, times, opt.rtol, opt.atol);

    const std::size_t n = net.n_species();
    Matrix noisy = d.clean.states;
    if (spec.noise_sigma > 0) {
        Rng rng = Rng(spec.seed).split("noise");
        for (std::size_t i = 0; i < times.size(); ++i)
            for (std::size_t s = 0; s < n; ++s) noisy(i, s) += spec.noise_sigma * rng.normal();
    }
    d.observed_bulk = Matrix(times.size(), obs.size());
    d.latent_signal = Matrix(times.size(), lat.size());
    for (std::size_t i = 0; i < times.size(); ++i) {
        for (std::size_t a = 0; a < obs.size(); ++a) d.observed_bulk(i, a) = noisy(i, obs[a]);
        for (std::size_t a = 0; a < lat.size(); ++a) d.latent_signal(i, a) = noisy(i, lat[a]) / gamma[a];
    }
    return d;
}

}  // namespace rkinn
