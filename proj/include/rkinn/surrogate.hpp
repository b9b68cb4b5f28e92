#pragma once

// Surrogate approximator: a dense feed-forward network in log-time, the
// sigmoid stick-breaking normalization C_N, and the structured output map
// that assembles states from range and nullspace coordinates. Time
// derivatives are carried forward as dual tangents; weight gradients are
// back-propagated by hand through both value and tangent channels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rkinn/decomp.hpp"
#include "rkinn/dual.hpp"
#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"
#include "rkinn/rng.hpp"
#include "rkinn/stoich.hpp"

namespace rkinn {

enum class Activation { tanh, swish, rbf };

inline Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "swish") return Activation::swish;
    if (s == "rbf") return Activation::rbf;
    throw ConfigError("unknown activation '" + s + "' (expected tanh, swish or rbf)");
}

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::swish: return "swish";
        case Activation::rbf: return "rbf";
    }
    return "?";
}

/// f, f', f'' at x.
struct ActEval {
    double f, f1, f2;
};

inline ActEval activate(Activation a, double x) {
    switch (a) {
        case Activation::tanh: {
            const double f = std::tanh(x), f1 = 1.0 - f * f;
            return {f, f1, -2.0 * f * f1};
        }
        case Activation::swish: {
            const double s = sigmoid(x), ds = s * (1.0 - s);
            return {x * s, s + x * ds, ds * (2.0 + x * (1.0 - 2.0 * s))};
        }
        case Activation::rbf: {
            const double f = std::exp(-x * x);
            return {f, -2.0 * x * f, (4.0 * x * x - 2.0) * f};
        }
    }
    return {0, 0, 0};
}

// ---------------------------------------------------------------------------
// Normalization operator

/// Stick-breaking map R^{p-1} -> open simplex in R^p:
/// out_i = (1 - s(u_i)) prod_{j<i} s(u_j), out_{p-1} = prod_j s(u_j).
template <class T>
void cn_normalize(std::span<const T> u, std::span<T> out) {
    T prod(1.0);
    for (std::size_t i = 0; i < u.size(); ++i) {
        out[i] = sigmoid(-u[i]) * prod;  // 1 - s(u) without cancellation
        prod = prod * sigmoid(u[i]);
    }
    out[u.size()] = prod;
}

inline Vector cn_normalize(std::span<const double> u) {
    for (double v : u)
        if (!std::isfinite(v)) throw std::invalid_argument("cn_normalize: non-finite input");
    Vector out(u.size() + 1);
    cn_normalize<double>(u, out);
    return out;
}

/// Reverse pass of the dual-valued C_N: given adjoints of the output value
/// and tangent, accumulate adjoints of the input value and tangent.
inline void cn_reverse(std::span<const double> uv, std::span<const double> ud, std::span<const double> cbar_v,
                       std::span<const double> cbar_d, std::span<double> ubar_v, std::span<double> ubar_d) {
    using DD = Dual<Dual<double>>;
    const std::size_t P = uv.size();
    std::vector<DD> u(P), c(P + 1);
    for (std::size_t k = 0; k < P; ++k) {
        for (std::size_t i = 0; i < P; ++i) u[i] = DD(Dual<double>(uv[i], i == k ? 1.0 : 0.0), Dual<double>(ud[i]));
        cn_normalize<DD>(u, c);
        double gv = 0.0, gd = 0.0;
        for (std::size_t j = 0; j <= P; ++j) {
            gv += cbar_v[j] * c[j].v.d + cbar_d[j] * c[j].d.d;
            gd += cbar_d[j] * c[j].v.d;
        }
        ubar_v[k] += gv;
        ubar_d[k] += gd;
    }
}

// ---------------------------------------------------------------------------
// Feed-forward network on (value, tangent) pairs

class MLP {
public:
    struct Layer {
        std::size_t in, out, w_off, b_off;
    };

    /// Per-point forward cache and scratch space.
    struct Cache {
        std::vector<Vector> hv, hd;  // layer inputs (hv[0] = network input)
        std::vector<Vector> ad, f1, f2;
        Vector gv, gd, tv, td;
    };

    MLP() = default;
    MLP(std::vector<std::size_t> sizes, std::vector<Activation> acts) : sizes_(std::move(sizes)), acts_(std::move(acts)) {
        if (sizes_.size() < 2) throw ConfigError("network needs input and output layers");
        if (acts_.size() != sizes_.size() - 2)
            throw ConfigError("need one activation per hidden layer (" + std::to_string(sizes_.size() - 2) +
                              "), got " + std::to_string(acts_.size()));
        for (std::size_t s : sizes_)
            if (s == 0) throw ConfigError("layer sizes must be positive");
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            Layer L{sizes_[l], sizes_[l + 1], off, off + sizes_[l] * sizes_[l + 1]};
            off = L.b_off + L.out;
            layers_.push_back(L);
        }
        n_params_ = off;
    }

    std::size_t n_params() const noexcept { return n_params_; }
    std::size_t n_layers() const noexcept { return layers_.size(); }
    std::size_t input_dim() const noexcept { return sizes_.front(); }
    std::size_t output_dim() const noexcept { return sizes_.back(); }
    const std::vector<std::size_t>& sizes() const noexcept { return sizes_; }
    const std::vector<Activation>& activations() const noexcept { return acts_; }
    const Layer& layer(std::size_t l) const { return layers_[l]; }

    /// Glorot-uniform weights, zero biases.
    void init(std::span<double> w, Rng& rng) const {
        for (const auto& L : layers_) {
            const double a = std::sqrt(6.0 / static_cast<double>(L.in + L.out));
            for (std::size_t k = 0; k < L.in * L.out; ++k) w[L.w_off + k] = rng.uniform(-a, a);
            for (std::size_t k = 0; k < L.out; ++k) w[L.b_off + k] = 0.0;
        }
    }

    Cache make_cache() const {
        Cache c;
        c.hv.resize(layers_.size() + 1);
        c.hd.resize(layers_.size() + 1);
        for (std::size_t l = 0; l <= layers_.size(); ++l) {
            c.hv[l].assign(sizes_[l], 0.0);
            c.hd[l].assign(sizes_[l], 0.0);
        }
        c.ad.resize(layers_.size());
        c.f1.resize(layers_.size());
        c.f2.resize(layers_.size());
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            c.ad[l].assign(layers_[l].out, 0.0);
            c.f1[l].assign(layers_[l].out, 0.0);
            c.f2[l].assign(layers_[l].out, 0.0);
        }
        const std::size_t widest = *std::max_element(sizes_.begin(), sizes_.end());
        c.gv.assign(widest, 0.0);
        c.gd.assign(widest, 0.0);
        c.tv.assign(widest, 0.0);
        c.td.assign(widest, 0.0);
        return c;
    }

    /// Forward pass; input must already be in c.hv[0], c.hd[0]. The output
    /// ends up in c.hv.back(), c.hd.back().
    void forward(std::span<const double> w, Cache& c) const {
        const std::size_t L = layers_.size();
        for (std::size_t l = 0; l < L; ++l) {
            const auto& ly = layers_[l];
            const Vector& xv = c.hv[l];
            const Vector& xd = c.hd[l];
            Vector& yv = c.hv[l + 1];
            Vector& yd = c.hd[l + 1];
            for (std::size_t o = 0; o < ly.out; ++o) {
                const double* row = w.data() + ly.w_off + o * ly.in;
                double sv = w[ly.b_off + o], sd = 0.0;
                for (std::size_t i = 0; i < ly.in; ++i) {
                    sv += row[i] * xv[i];
                    sd += row[i] * xd[i];
                }
                if (l + 1 < L) {
                    const ActEval a = activate(acts_[l], sv);
                    c.ad[l][o] = sd;
                    c.f1[l][o] = a.f1;
                    c.f2[l][o] = a.f2;
                    yv[o] = a.f;
                    yd[o] = a.f1 * sd;
                } else {
                    yv[o] = sv;
                    yd[o] = sd;
                }
            }
        }
    }

    /// Reverse pass after forward(): given adjoints of the output value and
    /// tangent, accumulate parameter adjoints into g.
    void backward(std::span<const double> w, Cache& c, std::span<const double> out_bar_v,
                  std::span<const double> out_bar_d, std::span<double> g) const {
        const std::size_t L = layers_.size();
        std::copy(out_bar_v.begin(), out_bar_v.end(), c.gv.begin());
        std::copy(out_bar_d.begin(), out_bar_d.end(), c.gd.begin());
        for (std::size_t l = L; l-- > 0;) {
            const auto& ly = layers_[l];
            if (l + 1 < L) {
                // through the activation: h.v = f(a.v), h.d = f'(a.v) a.d
                for (std::size_t o = 0; o < ly.out; ++o) {
                    const double bv = c.gv[o], bd = c.gd[o];
                    c.gv[o] = bv * c.f1[l][o] + bd * c.f2[l][o] * c.ad[l][o];
                    c.gd[o] = bd * c.f1[l][o];
                }
            }
            const Vector& xv = c.hv[l];
            const Vector& xd = c.hd[l];
            for (std::size_t o = 0; o < ly.out; ++o) {
                const double av = c.gv[o], ad = c.gd[o];
                double* grow = g.data() + ly.w_off + o * ly.in;
                for (std::size_t i = 0; i < ly.in; ++i) grow[i] += av * xv[i] + ad * xd[i];
                g[ly.b_off + o] += av;
            }
            if (l == 0) break;
            std::fill_n(c.tv.begin(), ly.in, 0.0);
            std::fill_n(c.td.begin(), ly.in, 0.0);
            for (std::size_t o = 0; o < ly.out; ++o) {
                const double* row = w.data() + ly.w_off + o * ly.in;
                const double av = c.gv[o], ad = c.gd[o];
                for (std::size_t i = 0; i < ly.in; ++i) {
                    c.tv[i] += row[i] * av;
                    c.td[i] += row[i] * ad;
                }
            }
            std::copy_n(c.tv.begin(), ly.in, c.gv.begin());
            std::copy_n(c.td.begin(), ly.in, c.gd.begin());
        }
    }

    /// Index of the layer owning parameter k.
    std::size_t layer_of(std::size_t k) const {
        for (std::size_t l = 0; l < layers_.size(); ++l)
            if (k < layers_[l].b_off + layers_[l].out) return l;
        return layers_.size();
    }

private:
    std::vector<std::size_t> sizes_;
    std::vector<Activation> acts_;
    std::vector<Layer> layers_;
    std::size_t n_params_ = 0;
};

// ---------------------------------------------------------------------------
// Surrogate model

enum class OutputMap { structured, direct };

inline OutputMap parse_output_map(const std::string& s) {
    if (s == "structured") return OutputMap::structured;
    if (s == "direct") return OutputMap::direct;
    throw ConfigError("unknown output map '" + s + "' (expected structured or direct)");
}
inline std::string to_string(OutputMap m) { return m == OutputMap::structured ? "structured" : "direct"; }

struct SurrogateConfig {
    std::vector<std::size_t> hidden{20, 20, 20};
    std::vector<Activation> activations{Activation::tanh, Activation::swish, Activation::tanh};
    OutputMap output_map = OutputMap::structured;
    bool trainable_nullspace = false;
    double t_min = 1e-4;
    double t_max = 10.0;
    std::size_t n_experiments = 1;
};

struct SAEval {
    Vector x;     // state
    Vector xdot;  // d x / d t
    Vector z_R;   // range coordinates (structured map only)
};

class SurrogateModel {
public:
    /// Per-point scratch; one per worker thread.
    struct Workspace {
        MLP::Cache mlp;
        Vector zRv, zRd, cv, cd, wv, gzv, gzd, gcv, gcd, guv, gud, gov, god;
        std::vector<Dual<double>> u, c;
    };

    SurrogateModel() = default;

    /// z_N holds one nullspace-coordinate vector per experiment.
    SurrogateModel(const ReactionNetwork& net, const RangeNullBases& bases, SurrogateConfig cfg,
                   std::vector<Vector> z_N)
        : net_(net), bases_(bases), cfg_(std::move(cfg)), z_N_(std::move(z_N)) {
        if (cfg_.n_experiments == 0) throw ConfigError("surrogate needs at least one experiment");
        if (z_N_.size() != cfg_.n_experiments)
            throw ConfigError("surrogate: need one z_N vector per experiment");
        for (const auto& z : z_N_)
            if (z.size() != bases_.n_null()) throw ConfigError("surrogate: z_N has wrong length");
        if (!(cfg_.t_min > 0 && cfg_.t_max > cfg_.t_min)) throw ConfigError("surrogate: need 0 < t_min < t_max");
        if (cfg_.hidden.size() != cfg_.activations.size())
            throw ConfigError("surrogate: one activation per hidden layer required");

        n_lat_ = bases_.n_latent();
        n_obs_ = bases_.n_observable();
        if (cfg_.output_map == OutputMap::structured) {
            q_ = n_lat_ > 0 ? bases_.Us_R_null.cols() : bases_.r;
            out_dim_ = q_ + (n_lat_ > 0 ? n_lat_ - 1 : 0);
            if (n_lat_ > 0) site_dir_ = site_balance_direction(bases_);
            for (auto& z : z_N_) z = normalize_site_balance(z, bases_);
            if (n_lat_ > 0) Us_R_pinv_Us_N_ = bases_.Us_R_pinv * bases_.Us_N;
        } else {
            q_ = n_obs_;
            out_dim_ = n_obs_ + (n_lat_ > 0 ? n_lat_ - 1 : 0);
        }
        if (out_dim_ == 0) throw ConfigError("surrogate: output head would be empty");

        std::vector<std::size_t> sizes;
        sizes.push_back(1 + (cfg_.n_experiments > 1 ? cfg_.n_experiments : 0));
        sizes.insert(sizes.end(), cfg_.hidden.begin(), cfg_.hidden.end());
        sizes.push_back(out_dim_);
        mlp_ = MLP(sizes, cfg_.activations);

        n_weights_ = mlp_.n_params();
        p_off_ = n_weights_;
        zn_off_ = p_off_ + net_.n_reactions();
        const std::size_t nz = cfg_.trainable_nullspace ? cfg_.n_experiments * bases_.n_null() : 0;
        theta_.assign(zn_off_ + nz, 0.0);
        if (cfg_.trainable_nullspace)
            for (std::size_t e = 0; e < cfg_.n_experiments; ++e)
                std::copy(z_N_[e].begin(), z_N_[e].end(), theta_.begin() + zn_off_ + e * bases_.n_null());
        log_ratio_ = std::log(cfg_.t_max / cfg_.t_min);
    }

    const ReactionNetwork& network() const noexcept { return net_; }
    const RangeNullBases& bases() const noexcept { return bases_; }
    const SurrogateConfig& config() const noexcept { return cfg_; }
    const MLP& mlp() const noexcept { return mlp_; }

    /// Flat parameter vector [weights | p | z_N blocks (trainable mode)].
    std::vector<double>& theta() noexcept { return theta_; }
    const std::vector<double>& theta() const noexcept { return theta_; }
    std::size_t n_params() const noexcept { return theta_.size(); }
    std::size_t n_weights() const noexcept { return n_weights_; }
    std::size_t p_offset() const noexcept { return p_off_; }
    std::size_t zn_offset() const noexcept { return zn_off_; }

    std::span<const double> weights() const { return {theta_.data(), n_weights_}; }
    std::span<const double> p() const { return {theta_.data() + p_off_, net_.n_reactions()}; }
    void set_p(std::span<const double> p) {
        net_.check_params(p);
        std::copy(p.begin(), p.end(), theta_.begin() + p_off_);
    }

    Vector z_N(std::size_t e) const {
        if (!cfg_.trainable_nullspace) return z_N_.at(e);
        const std::size_t k = bases_.n_null();
        return Vector(theta_.begin() + zn_off_ + e * k, theta_.begin() + zn_off_ + (e + 1) * k);
    }

    /// Replaces the a-priori nullspace coordinates (fixed mode only).
    void set_z_N(std::vector<Vector> z_N) {
        if (cfg_.trainable_nullspace) throw ConfigError("surrogate: z_N is trainable; edit theta instead");
        if (z_N.size() != cfg_.n_experiments) throw ConfigError("surrogate: need one z_N vector per experiment");
        for (auto& z : z_N) {
            if (z.size() != bases_.n_null()) throw ConfigError("surrogate: z_N has wrong length");
            if (cfg_.output_map == OutputMap::structured) z = normalize_site_balance(z, bases_);
        }
        z_N_ = std::move(z_N);
    }

    void init_weights(Rng& rng) { mlp_.init(std::span<double>(theta_.data(), n_weights_), rng); }

    Workspace make_workspace() const {
        Workspace w;
        w.mlp = mlp_.make_cache();
        const std::size_t r = bases_.r, P = n_lat_ > 0 ? n_lat_ - 1 : 0;
        for (Vector* v : {&w.zRv, &w.zRd, &w.gzv, &w.gzd}) v->assign(r, 0.0);
        for (Vector* v : {&w.cv, &w.cd, &w.wv, &w.gcv, &w.gcd}) v->assign(n_lat_, 0.0);
        for (Vector* v : {&w.guv, &w.gud}) v->assign(P, 0.0);
        for (Vector* v : {&w.gov, &w.god}) v->assign(out_dim_, 0.0);
        w.u.resize(P);
        w.c.resize(n_lat_);
        return w;
    }

    /// Normalized log-time input s in [-1, 1] over the window, and ds/dt.
    double time_input(double t) const { return 2.0 * std::log(t / cfg_.t_min) / log_ratio_ - 1.0; }
    double time_input_rate(double t) const { return 2.0 / (t * log_ratio_); }

    /// State and time derivative of the surrogate at t for experiment e.
    SAEval eval(double t, std::size_t e) const {
        Workspace w = make_workspace();
        SAEval out{Vector(bases_.n), Vector(bases_.n), {}};
        eval_into(t, e, w, out.x, out.xdot);
        if (cfg_.output_map == OutputMap::structured) out.z_R = w.zRv;
        return out;
    }

    /// Allocation-free evaluation for inner loops.
    void eval_into(double t, std::size_t e, Workspace& w, std::span<double> x, std::span<double> xdot) const {
        if (!(t > 0) || !std::isfinite(t)) throw std::invalid_argument("surrogate: time must be positive and finite");
        if (e >= cfg_.n_experiments) throw std::invalid_argument("surrogate: experiment index out of range");
        auto& c = w.mlp;
        c.hv[0][0] = time_input(t);
        c.hd[0][0] = time_input_rate(t);
        if (cfg_.n_experiments > 1)
            for (std::size_t k = 0; k < cfg_.n_experiments; ++k) {
                c.hv[0][1 + k] = k == e ? 1.0 : 0.0;
                c.hd[0][1 + k] = 0.0;
            }
        mlp_.forward(weights(), c);
        const Vector& ov = c.hv.back();
        const Vector& od = c.hd.back();
        for (double v : ov)
            if (!std::isfinite(v)) throw NumericalError("surrogate: non-finite network output");

        const std::size_t n = bases_.n;
        if (cfg_.output_map == OutputMap::direct) {
            for (std::size_t a = 0; a < n_obs_; ++a) {
                x[bases_.observable[a]] = ov[a];
                xdot[bases_.observable[a]] = od[a];
            }
            if (n_lat_ > 0) {
                normalize_latent(ov, od, n_obs_, w);
                for (std::size_t a = 0; a < n_lat_; ++a) {
                    x[bases_.latent[a]] = w.c[a].v;
                    xdot[bases_.latent[a]] = w.c[a].d;
                }
            }
            return;
        }

        const std::size_t r = bases_.r;
        const Vector zN = z_N(e);
        if (n_lat_ == 0) {
            std::copy_n(ov.begin(), r, w.zRv.begin());
            std::copy_n(od.begin(), r, w.zRd.begin());
        } else {
            normalize_latent(ov, od, q_, w);
            const Vector sN = matvec(bases_.Us_N, zN);
            for (std::size_t a = 0; a < n_lat_; ++a) {
                w.cv[a] = w.c[a].v;
                w.cd[a] = w.c[a].d;
                w.wv[a] = w.c[a].v - sN[a];
            }
            for (std::size_t i = 0; i < r; ++i) {
                double sv = 0.0, sd = 0.0;
                for (std::size_t a = 0; a < n_lat_; ++a) {
                    sv += bases_.Us_R_pinv(i, a) * w.wv[a];
                    sd += bases_.Us_R_pinv(i, a) * w.cd[a];
                }
                for (std::size_t k = 0; k < q_; ++k) {
                    sv += bases_.Us_R_null(i, k) * ov[k];
                    sd += bases_.Us_R_null(i, k) * od[k];
                }
                w.zRv[i] = sv;
                w.zRd[i] = sd;
            }
        }
        for (std::size_t s = 0; s < n; ++s) {
            double xv = 0.0, xd = 0.0;
            for (std::size_t i = 0; i < r; ++i) {
                xv += bases_.U_R(s, i) * w.zRv[i];
                xd += bases_.U_R(s, i) * w.zRd[i];
            }
            for (std::size_t k = 0; k < zN.size(); ++k) xv += bases_.U_N(s, k) * zN[k];
            x[s] = xv;
            xdot[s] = xd;
        }
    }

    /// After eval_into(t, e, w, ...), accumulate into grad the parameter
    /// adjoints for a loss with dL/dx = gx and dL/dxdot = gxd. The p block
    /// is left untouched (it enters only through the kinetic model).
    void backprop(std::size_t e, Workspace& w, std::span<const double> gx, std::span<const double> gxd,
                  std::span<double> grad) const {
        std::fill(w.gov.begin(), w.gov.end(), 0.0);
        std::fill(w.god.begin(), w.god.end(), 0.0);
        if (cfg_.output_map == OutputMap::direct) {
            for (std::size_t a = 0; a < n_obs_; ++a) {
                w.gov[a] = gx[bases_.observable[a]];
                w.god[a] = gxd[bases_.observable[a]];
            }
            if (n_lat_ > 0) {
                for (std::size_t a = 0; a < n_lat_; ++a) {
                    w.gcv[a] = gx[bases_.latent[a]];
                    w.gcd[a] = gxd[bases_.latent[a]];
                }
                latent_reverse(n_obs_, w);
            }
        } else {
            const std::size_t r = bases_.r;
            for (std::size_t i = 0; i < r; ++i) {
                double sv = 0.0, sd = 0.0;
                for (std::size_t s = 0; s < bases_.n; ++s) {
                    sv += bases_.U_R(s, i) * gx[s];
                    sd += bases_.U_R(s, i) * gxd[s];
                }
                w.gzv[i] = sv;
                w.gzd[i] = sd;
            }
            if (n_lat_ == 0) {
                std::copy_n(w.gzv.begin(), r, w.gov.begin());
                std::copy_n(w.gzd.begin(), r, w.god.begin());
            } else {
                for (std::size_t k = 0; k < q_; ++k) {
                    double sv = 0.0, sd = 0.0;
                    for (std::size_t i = 0; i < r; ++i) {
                        sv += bases_.Us_R_null(i, k) * w.gzv[i];
                        sd += bases_.Us_R_null(i, k) * w.gzd[i];
                    }
                    w.gov[k] = sv;
                    w.god[k] = sd;
                }
                for (std::size_t a = 0; a < n_lat_; ++a) {
                    double sv = 0.0, sd = 0.0;
                    for (std::size_t i = 0; i < r; ++i) {
                        sv += bases_.Us_R_pinv(i, a) * w.gzv[i];
                        sd += bases_.Us_R_pinv(i, a) * w.gzd[i];
                    }
                    w.gcv[a] = sv;
                    w.gcd[a] = sd;
                }
                latent_reverse(q_, w);
            }
            if (cfg_.trainable_nullspace) {
                // x = U_R z_R(z_N) + U_N z_N with z_R depending on z_N through -Us_R^+ Us_N z_N
                const std::size_t k = bases_.n_null();
                Vector gz = matTvec(bases_.U_N, gx);
                if (n_lat_ > 0) {
                    const Vector back = matTvec(Us_R_pinv_Us_N_, w.gzv);
                    for (std::size_t j = 0; j < k; ++j) gz[j] -= back[j];
                }
                if (!site_dir_.empty()) {
                    // keep the latent site balance fixed
                    const double s = dot(gz, site_dir_) / dot(site_dir_, site_dir_);
                    for (std::size_t j = 0; j < k; ++j) gz[j] -= s * site_dir_[j];
                }
                for (std::size_t j = 0; j < k; ++j) grad[zn_off_ + e * k + j] += gz[j];
            }
        }
        mlp_.backward(weights(), w.mlp, w.gov, w.god, grad.subspan(0, n_weights_));
    }

    /// Throws NumericalError naming the first layer with a non-finite partial.
    void check_gradient(std::span<const double> grad) const {
        for (std::size_t k = 0; k < grad.size(); ++k) {
            if (std::isfinite(grad[k])) continue;
            if (k < n_weights_)
                throw NumericalError("non-finite gradient in network layer " + std::to_string(mlp_.layer_of(k)));
            if (k < zn_off_) throw NumericalError("non-finite gradient in kinetic parameter " + std::to_string(k - p_off_));
            throw NumericalError("non-finite gradient in nullspace coordinates");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema"] = "rkinn-checkpoint/1";
        j["layer_sizes"] = mlp_.sizes();
        std::vector<std::string> acts;
        for (auto a : mlp_.activations()) acts.push_back(to_string(a));
        j["activations"] = acts;
        j["output_map"] = to_string(cfg_.output_map);
        j["trainable_nullspace"] = cfg_.trainable_nullspace;
        j["t_min"] = cfg_.t_min;
        j["t_max"] = cfg_.t_max;
        j["n_experiments"] = cfg_.n_experiments;
        j["z_N"] = z_N_;
        j["theta"] = theta_;
        j["n_weights"] = n_weights_;
        return j;
    }

    /// Restore parameters from a checkpoint written by to_json(); the
    /// architecture must match this model.
    void load_json(const nlohmann::json& j) {
        try {
            if (j.at("layer_sizes").get<std::vector<std::size_t>>() != mlp_.sizes())
                throw ConfigError("checkpoint layer sizes do not match the configured network");
            std::vector<std::string> acts;
            for (auto a : mlp_.activations()) acts.push_back(to_string(a));
            if (j.at("activations").get<std::vector<std::string>>() != acts)
                throw ConfigError("checkpoint activations do not match the configured network");
            if (j.at("output_map").get<std::string>() != to_string(cfg_.output_map) ||
                j.at("trainable_nullspace").get<bool>() != cfg_.trainable_nullspace)
                throw ConfigError("checkpoint output map does not match the configured network");
            auto theta = j.at("theta").get<std::vector<double>>();
            if (theta.size() != theta_.size()) throw ConfigError("checkpoint parameter count mismatch");
            theta_ = std::move(theta);
            z_N_ = j.at("z_N").get<std::vector<Vector>>();
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError(std::string("checkpoint: ") + ex.what());
        }
    }

private:
    // C_N on the dual head outputs starting at index `first`.
    void normalize_latent(const Vector& ov, const Vector& od, std::size_t first, Workspace& w) const {
        for (std::size_t a = 0; a + 1 < n_lat_; ++a) w.u[a] = Dual<double>(ov[first + a], od[first + a]);
        cn_normalize<Dual<double>>(w.u, w.c);
    }

    void latent_reverse(std::size_t first, Workspace& w) const {
        const std::size_t P = n_lat_ - 1;
        if (P == 0) return;
        const auto& ov = w.mlp.hv.back();
        const auto& od = w.mlp.hd.back();
        std::fill(w.guv.begin(), w.guv.end(), 0.0);
        std::fill(w.gud.begin(), w.gud.end(), 0.0);
        cn_reverse(std::span<const double>(ov.data() + first, P), std::span<const double>(od.data() + first, P),
                   w.gcv, w.gcd, w.guv, w.gud);
        for (std::size_t a = 0; a < P; ++a) {
            w.gov[first + a] += w.guv[a];
            w.god[first + a] += w.gud[a];
        }
    }

    ReactionNetwork net_;
    RangeNullBases bases_;
    SurrogateConfig cfg_;
    std::vector<Vector> z_N_;
    MLP mlp_;
    std::size_t n_lat_ = 0, n_obs_ = 0, q_ = 0, out_dim_ = 0;
    std::size_t n_weights_ = 0, p_off_ = 0, zn_off_ = 0;
    std::vector<double> theta_;
    Vector site_dir_;
    Matrix Us_R_pinv_Us_N_;
    double log_ratio_ = 1.0;
};

}  // namespace rkinn
