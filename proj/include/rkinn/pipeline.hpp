#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "rkinn/bundled.hpp"
#include "rkinn/calibrate.hpp"
#include "rkinn/decomp.hpp"
#include "rkinn/integrate.hpp"
#include "rkinn/io.hpp"
#include "rkinn/mle.hpp"
#include "rkinn/rng.hpp"
#include "rkinn/stoich.hpp"
#include "rkinn/surrogate.hpp"
#include "rkinn/svg.hpp"
#include "rkinn/uq.hpp"

namespace rkinn::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.3.0";
inline constexpr const char* kConfigSchema = "rkinn-config/1";
inline constexpr const char* kManifestSchema = "rkinn-manifest/1";

/// Numerical failure with the path of the state dump written before exit.
struct NumericalFailure : NumericalError {
    fs::path dump;
    NumericalFailure(const std::string& what, fs::path d) : NumericalError(what), dump(std::move(d)) {}
};

// ---------------------------------------------------------------------------
// Configuration

enum class Mode { rkinn, naive, sweep };

inline Mode parse_mode(const std::string& s) {
    if (s == "rkinn") return Mode::rkinn;
    if (s == "naive") return Mode::naive;
    if (s == "sweep") return Mode::sweep;
    throw ConfigError("mode must be rkinn, naive or sweep (got '" + s + "')");
}
inline std::string to_string(Mode m) { return m == Mode::rkinn ? "rkinn" : m == Mode::naive ? "naive" : "sweep"; }

struct ExperimentConfig {
    std::string name;
    Vector x0;
    double t_min = 1e-4, t_max = 10.0;
    std::size_t n_points = 100;
    double noise_sigma = 0.0;
    std::optional<std::uint64_t> seed;  // derived from the root seed when absent
};

struct HiddenGamma {
    Vector values;                // explicit factors
    double lo = 0.0, hi = 0.0;    // log-uniform draw when values is empty and hi > 0
    bool active() const { return !values.empty() || hi > 0; }
};

struct InitConfig {
    std::string p_kind = "value";  // value | array | truth
    double p_value = 0.0;
    Vector p_array;
    bool warm_start = true;
    WarmStartConfig warm;
};

struct SweepConfig {
    double alpha_min = 1e-4, alpha_max = 1e4;
    std::size_t n_alpha = 17;
    std::size_t epochs_per_alpha = 50;
    std::size_t patience = 0;
};

struct UQConfig {
    bool enabled = true;
    double h_rel = 1e-4;
    std::size_t perturbation_trials = 20;
    double perturbation_scale = 0.05;
};

struct RunConfig {
    std::uint64_t seed = 0;
    NetworkFile network;
    std::vector<ExperimentConfig> experiments;
    HiddenGamma hidden_gamma;
    bool calibrate = false;
    double eigen_cutoff = 5e-3;
    CutoffMode cutoff_mode = CutoffMode::relative;
    SurrogateConfig surrogate;
    std::optional<std::uint64_t> weight_seed;
    Mode mode = Mode::rkinn;
    TrainConfig train;
    double naive_alpha = 1.0;
    InitConfig init;
    SweepConfig sweep;
    UQConfig uq;
    double rtol = 1e-8, atol = 1e-10;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
    }
}

template <class T>
T get_or(const json& j, const char* key, T def, const std::string& where) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline double positive(double v, const std::string& what) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(what + " must be positive");
    return v;
}

inline std::uint64_t get_seed(const json& j, const std::string& where) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
        throw ConfigError(where + ": seed must be a non-negative integer");
    return j.get<std::uint64_t>();
}

inline void check_name(const std::string& s, const std::string& what) {
    static const std::regex ok("[A-Za-z0-9_.-]+");
    if (!std::regex_match(s, ok)) throw ConfigError(what + " '" + s + "' must match [A-Za-z0-9_.-]+");
}

inline NetworkFile resolve_network(const json& j, const fs::path& base) {
    if (j.is_object()) return network_from_json(j);
    if (!j.is_string()) throw ConfigError("network: expected a path, 'bundled:dcs' or an inline object");
    const std::string s = j.get<std::string>();
    if (s == "bundled:dcs") return bundled_dcs_network();
    fs::path p(s);
    if (p.is_relative() && !fs::exists(p) && !base.empty()) p = base / p;
    if (!fs::exists(p)) throw ConfigError("network file '" + s + "' does not exist");
    return load_network(p.string());
}

}  // namespace detail

/// Parses and validates a config document. `base` resolves relative
/// network paths. A run manifest is accepted in place of a config.
inline RunConfig parse_config(const json& doc, const fs::path& base = {}) {
    using detail::get_or;
    const json& j = doc.contains("schema") && doc.at("schema") == kManifestSchema ? doc.at("config") : doc;
    detail::check_keys(j, {"schema", "seed", "network", "experiments", "hidden_gamma", "calibration", "surrogate",
                           "mode", "train", "init", "sweep", "uq", "integrate"},
                       "config");
    if (!j.contains("schema") || j.at("schema") != kConfigSchema)
        throw ConfigError(std::string("config: schema must be \"") + kConfigSchema + "\"");
    for (const char* k : {"seed", "network", "experiments"})
        if (!j.contains(k)) throw ConfigError(std::string("config: missing required key '") + k + "'");

    RunConfig c;
    c.seed = detail::get_seed(j.at("seed"), "config.seed");
    c.network = detail::resolve_network(j.at("network"), base);
    const auto& net = c.network.network;

    const json& exps = j.at("experiments");
    if (!exps.is_array() || exps.empty()) throw ConfigError("config.experiments: need a non-empty array");
    std::set<std::string> names;
    for (std::size_t e = 0; e < exps.size(); ++e) {
        const std::string where = "config.experiments[" + std::to_string(e) + "]";
        const json& x = exps[e];
        detail::check_keys(x, {"name", "x0", "t_min", "t_max", "n_points", "noise_sigma", "seed"}, where);
        ExperimentConfig ec;
        ec.name = get_or<std::string>(x, "name", "exp" + std::to_string(e + 1), where);
        detail::check_name(ec.name, where + ".name");
        if (!names.insert(ec.name).second) throw ConfigError(where + ": duplicate experiment name '" + ec.name + "'");
        if (!x.contains("x0")) throw ConfigError(where + ": missing x0");
        const json& x0 = x.at("x0");
        ec.x0.assign(net.n_species(), 0.0);
        if (x0.is_array()) {
            if (x0.size() != net.n_species()) throw ConfigError(where + ".x0: length differs from species count");
            ec.x0 = x0.get<Vector>();
        } else if (x0.is_object()) {
            for (const auto& [sp, v] : x0.items()) {
                const auto& sps = net.species();
                const auto it = std::find(sps.begin(), sps.end(), sp);
                if (it == sps.end()) throw ConfigError(where + ".x0: unknown species '" + sp + "'");
                ec.x0[static_cast<std::size_t>(it - sps.begin())] = v.get<double>();
            }
        } else {
            throw ConfigError(where + ".x0: expected an array or a species map");
        }
        for (double v : ec.x0)
            if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(where + ".x0: entries must be finite and >= 0");
        ec.t_min = get_or(x, "t_min", 1e-4, where);
        ec.t_max = get_or(x, "t_max", 10.0, where);
        ec.n_points = get_or<std::size_t>(x, "n_points", 100, where);
        ec.noise_sigma = get_or(x, "noise_sigma", 0.0, where);
        if (!(ec.t_min > 0 && ec.t_max > ec.t_min)) throw ConfigError(where + ": need 0 < t_min < t_max");
        if (ec.n_points < 2) throw ConfigError(where + ": n_points must be >= 2");
        if (!(ec.noise_sigma >= 0)) throw ConfigError(where + ": noise_sigma must be >= 0");
        if (x.contains("seed")) ec.seed = detail::get_seed(x.at("seed"), where + ".seed");
        c.experiments.push_back(std::move(ec));
    }

    if (j.contains("hidden_gamma") && !j.at("hidden_gamma").is_null()) {
        const json& g = j.at("hidden_gamma");
        if (g.is_array()) {
            c.hidden_gamma.values = g.get<Vector>();
            if (c.hidden_gamma.values.size() != net.latent_indices().size())
                throw ConfigError("config.hidden_gamma: one factor per latent species required");
            for (double v : c.hidden_gamma.values) detail::positive(v, "config.hidden_gamma entries");
        } else {
            detail::check_keys(g, {"loguniform"}, "config.hidden_gamma");
            const auto r = get_or<Vector>(g, "loguniform", {}, "config.hidden_gamma");
            if (r.size() != 2 || !(r[0] > 0 && r[1] >= r[0]))
                throw ConfigError("config.hidden_gamma.loguniform: need [lo, hi] with 0 < lo <= hi");
            c.hidden_gamma.lo = r[0];
            c.hidden_gamma.hi = r[1];
        }
    }

    if (j.contains("calibration")) {
        const json& k = j.at("calibration");
        const std::string w = "config.calibration";
        detail::check_keys(k, {"enabled", "eigen_cutoff", "cutoff_mode"}, w);
        c.calibrate = get_or(k, "enabled", false, w);
        c.eigen_cutoff = get_or(k, "eigen_cutoff", 5e-3, w);
        const auto mode = get_or<std::string>(k, "cutoff_mode", "relative", w);
        if (mode == "relative") c.cutoff_mode = CutoffMode::relative;
        else if (mode == "absolute") c.cutoff_mode = CutoffMode::absolute;
        else throw ConfigError(w + ".cutoff_mode must be relative or absolute");
        if (!(c.eigen_cutoff >= 0)) throw ConfigError(w + ".eigen_cutoff must be >= 0");
    }
    if (c.calibrate && net.latent_indices().empty())
        throw ConfigError("config.calibration: network has no latent species to calibrate");

    if (j.contains("surrogate")) {
        const json& s = j.at("surrogate");
        const std::string w = "config.surrogate";
        detail::check_keys(s, {"hidden", "activations", "output_map", "trainable_nullspace", "seed"}, w);
        c.surrogate.hidden = get_or(s, "hidden", c.surrogate.hidden, w);
        if (s.contains("activations")) {
            c.surrogate.activations.clear();
            for (const auto& a : get_or<std::vector<std::string>>(s, "activations", {}, w))
                c.surrogate.activations.push_back(parse_activation(a));
        }
        c.surrogate.output_map = parse_output_map(get_or<std::string>(s, "output_map", "structured", w));
        c.surrogate.trainable_nullspace = get_or(s, "trainable_nullspace", false, w);
        if (s.contains("seed")) c.weight_seed = detail::get_seed(s.at("seed"), w + ".seed");
        if (c.surrogate.hidden.size() != c.surrogate.activations.size())
            throw ConfigError(w + ": one activation per hidden layer required");
        for (auto h : c.surrogate.hidden)
            if (h == 0) throw ConfigError(w + ".hidden: layer widths must be >= 1");
    }
    c.surrogate.n_experiments = c.experiments.size();
    c.surrogate.t_min = c.experiments[0].t_min;
    c.surrogate.t_max = c.experiments[0].t_max;
    for (const auto& e : c.experiments) {
        c.surrogate.t_min = std::min(c.surrogate.t_min, e.t_min);
        c.surrogate.t_max = std::max(c.surrogate.t_max, e.t_max);
    }

    c.mode = parse_mode(get_or<std::string>(j, "mode", "rkinn", "config"));

    if (j.contains("train")) {
        const json& t = j.at("train");
        const std::string w = "config.train";
        detail::check_keys(t, {"lr", "beta1", "beta2", "adam_eps", "iterations_per_epoch", "max_epochs",
                               "loss_tolerance", "patience", "covariance_update_period", "stabilize", "sigma_p0",
                               "eps_p_rcond", "lr_decay", "naive_alpha"},
                           w);
        auto& tc = c.train;
        tc.adam.lr = get_or(t, "lr", tc.adam.lr, w);
        tc.adam.beta1 = get_or(t, "beta1", tc.adam.beta1, w);
        tc.adam.beta2 = get_or(t, "beta2", tc.adam.beta2, w);
        tc.adam.eps = get_or(t, "adam_eps", tc.adam.eps, w);
        tc.iterations_per_epoch = get_or(t, "iterations_per_epoch", tc.iterations_per_epoch, w);
        tc.max_epochs = get_or(t, "max_epochs", tc.max_epochs, w);
        tc.loss_tolerance = get_or(t, "loss_tolerance", tc.loss_tolerance, w);
        tc.patience = get_or(t, "patience", tc.patience, w);
        tc.covariance_update_period = get_or(t, "covariance_update_period", tc.covariance_update_period, w);
        tc.stabilize = get_or(t, "stabilize", tc.stabilize, w);
        tc.sigma_p0 = get_or(t, "sigma_p0", tc.sigma_p0, w);
        tc.eps_p_rcond = get_or(t, "eps_p_rcond", tc.eps_p_rcond, w);
        tc.lr_decay = get_or(t, "lr_decay", tc.lr_decay, w);
        c.naive_alpha = get_or(t, "naive_alpha", c.naive_alpha, w);
        if (!(c.naive_alpha >= 0)) throw ConfigError(w + ".naive_alpha must be >= 0");
        if (!(tc.adam.beta1 >= 0 && tc.adam.beta1 < 1 && tc.adam.beta2 >= 0 && tc.adam.beta2 < 1))
            throw ConfigError(w + ": Adam betas must lie in [0, 1)");
        detail::positive(tc.adam.eps, w + ".adam_eps");
        detail::positive(tc.sigma_p0, w + ".sigma_p0");
    }
    rkinn::detail::check_train_config(c.train);

    const std::size_t m = net.n_reactions();
    if (j.contains("init")) {
        const json& i = j.at("init");
        const std::string w = "config.init";
        detail::check_keys(i, {"p", "warm_start"}, w);
        if (i.contains("p")) {
            const json& p = i.at("p");
            if (p.is_number()) {
                c.init.p_kind = "value";
                c.init.p_value = p.get<double>();
            } else if (p.is_array()) {
                c.init.p_kind = "array";
                c.init.p_array = p.get<Vector>();
                if (c.init.p_array.size() != m) throw ConfigError(w + ".p: one entry per reaction required");
            } else if (p == "truth") {
                if (c.network.true_log_k().empty())
                    throw ConfigError(w + ".p: 'truth' needs rate constants in the network file");
                c.init.p_kind = "truth";
            } else {
                throw ConfigError(w + ".p: expected a number, an array or \"truth\"");
            }
        }
        if (i.contains("warm_start")) {
            const json& ws = i.at("warm_start");
            if (ws.is_boolean()) {
                c.init.warm_start = ws.get<bool>();
            } else {
                detail::check_keys(ws, {"enabled", "epochs", "alpha", "k_floor"}, w + ".warm_start");
                c.init.warm_start = get_or(ws, "enabled", true, w);
                c.init.warm.epochs = get_or(ws, "epochs", c.init.warm.epochs, w);
                c.init.warm.alpha = get_or(ws, "alpha", c.init.warm.alpha, w);
                c.init.warm.k_floor = get_or(ws, "k_floor", c.init.warm.k_floor, w);
                detail::positive(c.init.warm.k_floor, w + ".warm_start.k_floor");
            }
        }
    }

    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        const std::string w = "config.sweep";
        detail::check_keys(s, {"alpha_min", "alpha_max", "n_alpha", "epochs_per_alpha", "patience"}, w);
        c.sweep.alpha_min = get_or(s, "alpha_min", c.sweep.alpha_min, w);
        c.sweep.alpha_max = get_or(s, "alpha_max", c.sweep.alpha_max, w);
        c.sweep.n_alpha = get_or(s, "n_alpha", c.sweep.n_alpha, w);
        c.sweep.epochs_per_alpha = get_or(s, "epochs_per_alpha", c.sweep.epochs_per_alpha, w);
        c.sweep.patience = get_or(s, "patience", c.sweep.patience, w);
        if (!(c.sweep.alpha_min > 0 && c.sweep.alpha_max >= c.sweep.alpha_min) || c.sweep.n_alpha < 1)
            throw ConfigError(w + ": need 0 < alpha_min <= alpha_max and n_alpha >= 1");
    }
    if (j.contains("uq")) {
        const json& u = j.at("uq");
        const std::string w = "config.uq";
        detail::check_keys(u, {"enabled", "h_rel", "perturbation_trials", "perturbation_scale"}, w);
        c.uq.enabled = get_or(u, "enabled", c.uq.enabled, w);
        c.uq.h_rel = detail::positive(get_or(u, "h_rel", c.uq.h_rel, w), w + ".h_rel");
        c.uq.perturbation_trials = get_or(u, "perturbation_trials", c.uq.perturbation_trials, w);
        c.uq.perturbation_scale = detail::positive(get_or(u, "perturbation_scale", c.uq.perturbation_scale, w),
                                                   w + ".perturbation_scale");
    }
    if (j.contains("integrate")) {
        const json& g = j.at("integrate");
        detail::check_keys(g, {"rtol", "atol"}, "config.integrate");
        c.rtol = detail::positive(get_or(g, "rtol", c.rtol, "config.integrate"), "config.integrate.rtol");
        c.atol = detail::positive(get_or(g, "atol", c.atol, "config.integrate"), "config.integrate.atol");
    }
    return c;
}

/// Fully expanded config with every default written out and the network
/// inlined, so the snapshot alone reproduces the run.
inline json config_to_json(const RunConfig& c) {
    json j;
    j["schema"] = kConfigSchema;
    j["seed"] = c.seed;
    j["network"] = network_to_json(c.network);
    json exps = json::array();
    for (const auto& e : c.experiments) {
        json x{{"name", e.name}, {"x0", e.x0},           {"t_min", e.t_min},
               {"t_max", e.t_max}, {"n_points", e.n_points}, {"noise_sigma", e.noise_sigma}};
        if (e.seed) x["seed"] = *e.seed;
        exps.push_back(x);
    }
    j["experiments"] = exps;
    if (!c.hidden_gamma.values.empty()) j["hidden_gamma"] = c.hidden_gamma.values;
    else if (c.hidden_gamma.hi > 0) j["hidden_gamma"] = {{"loguniform", {c.hidden_gamma.lo, c.hidden_gamma.hi}}};
    else j["hidden_gamma"] = nullptr;
    j["calibration"] = {{"enabled", c.calibrate},
                        {"eigen_cutoff", c.eigen_cutoff},
                        {"cutoff_mode", c.cutoff_mode == CutoffMode::relative ? "relative" : "absolute"}};
    std::vector<std::string> acts;
    for (auto a : c.surrogate.activations) acts.push_back(rkinn::to_string(a));
    j["surrogate"] = {{"hidden", c.surrogate.hidden},
                      {"activations", acts},
                      {"output_map", rkinn::to_string(c.surrogate.output_map)},
                      {"trainable_nullspace", c.surrogate.trainable_nullspace}};
    if (c.weight_seed) j["surrogate"]["seed"] = *c.weight_seed;
    j["mode"] = to_string(c.mode);
    const auto& t = c.train;
    j["train"] = {{"lr", t.adam.lr},
                  {"beta1", t.adam.beta1},
                  {"beta2", t.adam.beta2},
                  {"adam_eps", t.adam.eps},
                  {"iterations_per_epoch", t.iterations_per_epoch},
                  {"max_epochs", t.max_epochs},
                  {"loss_tolerance", t.loss_tolerance},
                  {"patience", t.patience},
                  {"covariance_update_period", t.covariance_update_period},
                  {"stabilize", t.stabilize},
                  {"sigma_p0", t.sigma_p0},
                  {"eps_p_rcond", t.eps_p_rcond},
                  {"lr_decay", t.lr_decay},
                  {"naive_alpha", c.naive_alpha}};
    json p;
    if (c.init.p_kind == "array") p = c.init.p_array;
    else if (c.init.p_kind == "truth") p = "truth";
    else p = c.init.p_value;
    j["init"] = {{"p", p},
                 {"warm_start",
                  {{"enabled", c.init.warm_start},
                   {"epochs", c.init.warm.epochs},
                   {"alpha", c.init.warm.alpha},
                   {"k_floor", c.init.warm.k_floor}}}};
    j["sweep"] = {{"alpha_min", c.sweep.alpha_min},
                  {"alpha_max", c.sweep.alpha_max},
                  {"n_alpha", c.sweep.n_alpha},
                  {"epochs_per_alpha", c.sweep.epochs_per_alpha},
                  {"patience", c.sweep.patience}};
    j["uq"] = {{"enabled", c.uq.enabled},
               {"h_rel", c.uq.h_rel},
               {"perturbation_trials", c.uq.perturbation_trials},
               {"perturbation_scale", c.uq.perturbation_scale}};
    j["integrate"] = {{"rtol", c.rtol}, {"atol", c.atol}};
    return j;
}

/// Seed, hidden factors and noise seeds as used by `generate`.
inline std::uint64_t experiment_seed(const RunConfig& c, std::size_t e) {
    const auto& ec = c.experiments[e];
    if (ec.seed) return *ec.seed;
    return Rng(c.seed).split("experiment").split(ec.name).next_u64();
}

inline Vector resolved_hidden_gamma(const RunConfig& c) {
    const std::size_t nl = c.network.network.latent_indices().size();
    if (!c.hidden_gamma.values.empty()) return c.hidden_gamma.values;
    Vector g(nl, 1.0);
    if (c.hidden_gamma.hi > 0) {
        Rng rng = Rng(c.seed).split("hidden_gamma");
        const double a = std::log(c.hidden_gamma.lo), b = std::log(c.hidden_gamma.hi);
        for (double& v : g) v = std::exp(rng.uniform(a, b));
    }
    return g;
}

inline std::uint64_t weight_seed(const RunConfig& c) {
    return c.weight_seed ? *c.weight_seed : Rng(c.seed).split("weights").next_u64();
}

inline std::string p_name(std::size_t j) { return "p_" + std::to_string(j + 1); }

// ---------------------------------------------------------------------------
// Run context

struct Options {
    std::string config;                // empty: take the config from <out>/manifest.json
    std::string out = "run";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    bool resume = false;
    std::ostream* log = &std::cerr;    // nullptr silences progress output
};

inline json apply_overrides(json doc, const Options& o) {
    json& j = doc.contains("schema") && doc.at("schema") == kManifestSchema ? doc.at("config") : doc;
    if (o.seed) j["seed"] = *o.seed;
    if (o.epochs) {
        j["train"]["max_epochs"] = *o.epochs;
        j["sweep"]["epochs_per_alpha"] = *o.epochs;
    }
    return doc;
}

class Context {
public:
    Context(RunConfig cfg, fs::path out, std::ostream* log) : cfg_(std::move(cfg)), out_(std::move(out)), log_(log) {
        bases_ = build_bases(cfg_.network.network);
        const fs::path mf = out_ / "manifest.json";
        if (fs::exists(mf)) manifest_ = io::read_json(mf);
        if (!manifest_.is_object()) manifest_ = json::object();
    }

    const RunConfig& cfg() const { return cfg_; }
    const ReactionNetwork& net() const { return cfg_.network.network; }
    const RangeNullBases& bases() const { return bases_; }
    const fs::path& out() const { return out_; }
    json& manifest() { return manifest_; }

    fs::path path(const std::string& rel) const { return out_ / rel; }
    bool has(const std::string& rel) const { return fs::exists(out_ / rel); }

    void write(const std::string& rel, std::string_view content) {
        io::write_file(out_ / rel, content);
        written_.insert(rel);
    }
    void write_json(const std::string& rel, const json& j) { write(rel, j.dump(2) + "\n"); }
    void write_csv(const std::string& rel, const io::Table& t) { write(rel, io::to_csv(t)); }

    template <class... A>
    void say(const A&... a) {
        if (!log_) return;
        (*log_ << ... << a) << '\n';
        log_->flush();
    }

    /// Records checksums for everything written and the command timing.
    void finish(const std::string& command, double seconds) {
        manifest_["schema"] = kManifestSchema;
        manifest_["version"] = kVersion;
        manifest_["config"] = config_to_json(cfg_);
        manifest_["timings"][command] = seconds;
        json& files = manifest_["files"];
        if (!files.is_object()) files = json::object();
        for (const auto& rel : written_) files[rel] = io::sha256_file(out_ / rel);
        std::vector<std::string> gone;
        for (const auto& [rel, _] : files.items())
            if (!fs::exists(out_ / rel)) gone.push_back(rel);
        for (const auto& rel : gone) files.erase(rel);
        written_.clear();
        io::write_json(out_ / "manifest.json", manifest_);
    }

private:
    RunConfig cfg_;
    fs::path out_;
    std::ostream* log_;
    RangeNullBases bases_;
    json manifest_;
    std::set<std::string> written_;
};

// ---------------------------------------------------------------------------
// Stored data

struct StoredExperiment {
    std::string name;
    Vector times;
    Matrix clean, bulk, latent;  // d x n, d x n_o, d x n_*
};

namespace detail {

inline std::vector<std::string> pick(const std::vector<std::string>& all, const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

inline io::Table time_table(const Vector& t, const Matrix& v, const std::vector<std::string>& cols) {
    io::Table tab;
    tab.header = {"t"};
    tab.header.insert(tab.header.end(), cols.begin(), cols.end());
    tab.values = Matrix(t.size(), cols.size() + 1);
    for (std::size_t i = 0; i < t.size(); ++i) {
        tab.values(i, 0) = t[i];
        for (std::size_t k = 0; k < cols.size(); ++k) tab.values(i, k + 1) = v(i, k);
    }
    return tab;
}

inline Matrix strip_time(const io::Table& t, const std::vector<std::string>& cols, const std::string& what) {
    if (t.header.size() != cols.size() + 1 || t.header[0] != "t")
        throw ConfigError(what + ": unexpected header");
    for (std::size_t k = 0; k < cols.size(); ++k)
        if (t.header[k + 1] != cols[k]) throw ConfigError(what + ": column '" + t.header[k + 1] + "' unexpected");
    Matrix m(t.values.rows(), cols.size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t k = 0; k < cols.size(); ++k) m(i, k) = t.values(i, k + 1);
    return m;
}

}  // namespace detail

inline int cmd_generate(Context& ctx);
inline int cmd_calibrate(Context& ctx);

inline std::vector<StoredExperiment> load_data(Context& ctx) {
    const auto& net = ctx.net();
    for (const auto& e : ctx.cfg().experiments)
        if (!ctx.has("data/" + e.name + "_observed.csv") || !ctx.has("data/" + e.name + "_latent.csv")) {
            ctx.say("[data] no stored data for '", e.name, "', running generate");
            cmd_generate(ctx);
            break;
        }
    const auto obs = detail::pick(net.species(), net.observable_indices());
    const auto lat = detail::pick(net.species(), net.latent_indices());
    std::vector<StoredExperiment> out;
    for (const auto& e : ctx.cfg().experiments) {
        StoredExperiment s;
        s.name = e.name;
        const auto c = io::read_csv(ctx.path("data/" + e.name + "_clean.csv"));
        const auto o = io::read_csv(ctx.path("data/" + e.name + "_observed.csv"));
        const auto l = io::read_csv(ctx.path("data/" + e.name + "_latent.csv"));
        s.times = o.col("t");
        s.clean = detail::strip_time(c, net.species(), e.name + "_clean.csv");
        s.bulk = detail::strip_time(o, obs, e.name + "_observed.csv");
        s.latent = detail::strip_time(l, lat, e.name + "_latent.csv");
        if (s.latent.rows() != s.times.size() || s.clean.rows() != s.times.size())
            throw ConfigError("stored data for '" + e.name + "' has inconsistent lengths");
        out.push_back(std::move(s));
    }
    return out;
}

/// Calibration factors used for training: the stored calibration when
/// enabled, otherwise unit factors.
inline Vector training_gamma(Context& ctx) {
    const auto& net = ctx.net();
    const std::size_t nl = net.latent_indices().size();
    if (!ctx.cfg().calibrate) return Vector(nl, 1.0);
    if (!ctx.has("calibration/gamma.csv")) {
        ctx.say("[data] no stored calibration, running calibrate");
        cmd_calibrate(ctx);
    }
    const auto t = io::read_csv(ctx.path("calibration/gamma.csv"));
    if (t.values.rows() < 1 || t.header.size() != nl) throw ConfigError("calibration/gamma.csv: unexpected shape");
    return Vector(t.values.row(0).begin(), t.values.row(0).end());
}

inline TrainData assemble_training_data(const Context& ctx, const std::vector<StoredExperiment>& data,
                                        const Vector& gamma) {
    const auto& net = ctx.net();
    const auto obs = net.observable_indices();
    const auto lat = net.latent_indices();
    std::vector<Experiment> ex;
    for (const auto& s : data) {
        Matrix st(s.times.size(), net.n_species());
        for (std::size_t i = 0; i < st.rows(); ++i) {
            for (std::size_t a = 0; a < obs.size(); ++a) st(i, obs[a]) = s.bulk(i, a);
            for (std::size_t a = 0; a < lat.size(); ++a) st(i, lat[a]) = s.latent(i, a) * gamma[a];
        }
        ex.push_back({s.name, s.times, std::move(st)});
    }
    return TrainData(std::move(ex));
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_generate(Context& ctx) {
    const auto& c = ctx.cfg();
    const auto& net = ctx.net();
    const Vector p = c.network.true_log_k();
    if (p.empty()) throw ConfigError("generate: the network file carries no rate constants");
    const Vector gamma = resolved_hidden_gamma(c);
    const auto obs = detail::pick(net.species(), net.observable_indices());
    const auto lat = detail::pick(net.species(), net.latent_indices());
    for (std::size_t e = 0; e < c.experiments.size(); ++e) {
        const auto& ec = c.experiments[e];
        ExperimentSpec spec{ec.name, ec.x0, ec.t_min, ec.t_max, ec.n_points, ec.noise_sigma, experiment_seed(c, e),
                            gamma};
        const SyntheticData d = generate_synthetic(spec, net, p, {c.rtol, c.atol});
        const std::string stem = "data/" + ec.name;
        ctx.write_csv(stem + "_clean.csv", detail::time_table(d.clean.times, d.clean.states, net.species()));
        ctx.write_csv(stem + "_observed.csv", detail::time_table(d.clean.times, d.observed_bulk, obs));
        ctx.write_csv(stem + "_latent.csv", detail::time_table(d.clean.times, d.latent_signal, lat));
        json side{{"schema", "rkinn-data/1"},
                  {"experiment", ec.name},
                  {"seed", spec.seed},
                  {"noise_sigma", ec.noise_sigma},
                  {"hidden_gamma", gamma},
                  {"latent_species", lat},
                  {"observable_species", obs},
                  {"x0", ec.x0},
                  {"window", {{"t_min", ec.t_min}, {"t_max", ec.t_max}, {"n_points", ec.n_points}, {"spacing", "log"}}},
                  {"true_log_k", p},
                  {"integrator", {{"method", "dopri5"}, {"rtol", c.rtol}, {"atol", c.atol}}}};
        ctx.write_json(stem + ".json", side);
        ctx.say("[generate] ", ec.name, ": ", ec.n_points, " points, sigma ", ec.noise_sigma);
    }
    return 0;
}

inline int cmd_calibrate(Context& ctx) {
    const auto& net = ctx.net();
    const auto data = load_data(ctx);
    CalibrationProblem prob;
    prob.bases = ctx.bases();
    prob.eigen_cutoff = ctx.cfg().eigen_cutoff;
    prob.cutoff_mode = ctx.cfg().cutoff_mode;
    for (const auto& s : data) prob.blocks.push_back({s.bulk, s.latent});
    const CalibrationResult r = solve_gamma(prob);
    const auto lat = detail::pick(net.species(), net.latent_indices());

    io::Table g;
    g.header = lat;
    g.values = Matrix(1, lat.size());
    for (std::size_t a = 0; a < lat.size(); ++a) g.values(0, a) = r.gamma[a];
    ctx.write_csv("calibration/gamma.csv", g);
    for (const auto& s : data)
        ctx.write_csv("calibration/" + s.name + "_coverage.csv",
                      detail::time_table(s.times, apply_calibration(s.latent, r.gamma), lat));
    json diag = calibration_diagnostics(r, prob);
    diag["latent_species"] = lat;
    ctx.write_json("calibration/diagnostics.json", diag);
    ctx.say("[calibrate] ", r.n_pairs, " pairs, max pair residual ", r.pair_residual_max);
    return 0;
}

inline int cmd_decompose(Context& ctx) {
    const auto& net = ctx.net();
    const auto& b = ctx.bases();
    const auto data = load_data(ctx);
    const TrainData td = assemble_training_data(ctx, data, training_gamma(ctx));
    ctx.write_json("decomposition/bases.json", bases_to_json(b));
    std::vector<std::string> cols;
    for (std::size_t k = 0; k < b.r; ++k) cols.push_back("zR_" + std::to_string(k + 1));
    for (std::size_t k = 0; k < b.n_null(); ++k) cols.push_back("zN_" + std::to_string(k + 1));
    json inv = json::object();
    for (std::size_t e = 0; e < td.n_experiments(); ++e) {
        const auto& ex = td.experiments()[e];
        Matrix z(ex.times.size(), cols.size());
        for (std::size_t i = 0; i < z.rows(); ++i) {
            const ZState zs = project(ex.states.row(i), b);
            std::copy(zs.z_R.begin(), zs.z_R.end(), z.row(i).begin());
            std::copy(zs.z_N.begin(), zs.z_N.end(), z.row(i).begin() + static_cast<std::ptrdiff_t>(b.r));
        }
        ctx.write_csv("decomposition/" + ex.name + "_z.csv", detail::time_table(ex.times, z, cols));
        // drift of the invariants along the clean trajectory
        double drift = 0.0;
        const auto& cl = data[e].clean;
        const ZState z0 = project(cl.row(0), b);
        for (std::size_t i = 1; i < cl.rows(); ++i) {
            const ZState zi = project(cl.row(i), b);
            for (std::size_t k = 0; k < zi.z_N.size(); ++k) drift = std::max(drift, std::abs(zi.z_N[k] - z0.z_N[k]));
        }
        inv[ex.name] = drift;
    }
    ctx.write_json("decomposition/summary.json", {{"rank", b.r},
                                                  {"n_null", b.n_null()},
                                                  {"singular_values", b.singular_values},
                                                  {"species", net.species()},
                                                  {"clean_invariant_drift", inv}});
    ctx.say("[decompose] rank ", b.r, ", nullspace dimension ", b.n_null());
    return 0;
}

namespace detail {

inline SurrogateModel make_model(const Context& ctx, const TrainData& data) {
    SurrogateModel m(ctx.net(), ctx.bases(), ctx.cfg().surrogate, data.nullspace_estimates(ctx.bases()));
    Rng rng(weight_seed(ctx.cfg()));
    m.init_weights(rng);
    const auto& init = ctx.cfg().init;
    const std::size_t nr = ctx.net().n_reactions();
    Vector p(nr, init.p_value);
    if (init.p_kind == "array") p = init.p_array;
    if (init.p_kind == "truth") p = ctx.cfg().network.true_log_k();
    m.set_p(p);
    return m;
}

inline json state_to_json(const TrainState& s) {
    return {{"epoch", s.epoch},
            {"quiet_epochs", s.quiet_epochs},
            {"last_loss", s.last_loss},
            {"has_last", s.has_last},
            {"adam", {{"t", s.adam.t}, {"m", s.adam.m}, {"v", s.adam.v}}}};
}

inline TrainState state_from_json(const json& j) {
    try {
        TrainState s;
        s.epoch = j.at("epoch").get<std::size_t>();
        s.quiet_epochs = j.at("quiet_epochs").get<std::size_t>();
        s.last_loss = j.at("last_loss").get<double>();
        s.has_last = j.at("has_last").get<bool>();
        s.adam.t = j.at("adam").at("t").get<std::uint64_t>();
        s.adam.m = j.at("adam").at("m").get<Vector>();
        s.adam.v = j.at("adam").at("v").get<Vector>();
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint train_state: ") + e.what());
    }
}

inline json checkpoint_json(const Context& ctx, const SurrogateModel& m, const TrainState& s, const std::string& mode) {
    json j = m.to_json();
    j["seed"] = weight_seed(ctx.cfg());
    j["mode"] = mode;
    j["train_state"] = state_to_json(s);
    return j;
}

inline std::vector<std::string> metrics_header(std::size_t m) {
    std::vector<std::string> h{"epoch", "ell_t", "ell_x", "ell_dx"};
    for (std::size_t j = 0; j < m; ++j) h.push_back(p_name(j));
    return h;
}

inline std::string metrics_row(const EpochRecord& r) {
    Vector v{static_cast<double>(r.epoch), r.ell_t, r.ell_x, r.ell_dx};
    v.insert(v.end(), r.p.begin(), r.p.end());
    return io::csv_row(v);
}

/// Integrated-model check from SA-estimated initial conditions.
struct IntegratedCheck {
    std::vector<Matrix> states;      // per experiment; empty when integration failed
    std::vector<Vector> rmse;        // per experiment, per species
    std::vector<std::string> errors;
};

inline IntegratedCheck integrate_from_sa(const Context& ctx, const SurrogateModel& m, const TrainData& data) {
    IntegratedCheck out;
    const Vector p(m.p().begin(), m.p().end());
    for (std::size_t e = 0; e < data.n_experiments(); ++e) {
        const auto& ex = data.experiments()[e];
        Vector x0 = m.eval(ex.times[0], e).x;
        for (double& v : x0) v = std::max(v, 0.0);
        try {
            const Trajectory tr = solve_ivp(ctx.net(), p, x0, ex.times, ctx.cfg().rtol, ctx.cfg().atol, ex.times[0]);
            Vector r(ctx.net().n_species(), 0.0);
            for (std::size_t s = 0; s < r.size(); ++s) {
                double ss = 0;
                for (std::size_t i = 0; i < ex.times.size(); ++i) {
                    const double d = tr.states(i, s) - ex.states(i, s);
                    ss += d * d;
                }
                r[s] = std::sqrt(ss / static_cast<double>(ex.times.size()));
            }
            out.states.push_back(tr.states);
            out.rmse.push_back(r);
            out.errors.emplace_back();
        } catch (const std::exception& err) {
            out.states.emplace_back();
            out.rmse.push_back(Vector(ctx.net().n_species(), std::numeric_limits<double>::quiet_NaN()));
            out.errors.emplace_back(err.what());
        }
    }
    return out;
}

inline std::optional<GammaContext> gamma_context(const Context& ctx, const std::vector<StoredExperiment>& data,
                                                 const Vector& gamma) {
    if (!ctx.cfg().calibrate) return std::nullopt;
    GammaContext g;
    g.gamma = gamma;
    for (const auto& s : data) g.latent_signals.push_back(s.latent);
    return g;
}

/// Fraction of 5% log-parameter perturbations that raise the condp norm.
inline json perturbation_test(const Context& ctx, const SurrogateModel& m, const TrainData& data) {
    const auto r0 = residuals(m, data);
    const auto cov = refresh_covariances(r0, m.bases(), false);
    const double base = optimality_diagnostics(r0, cov.Sigma_p).condp_norm;
    Rng rng = Rng(ctx.cfg().seed).split("perturbation");
    const Vector p(m.p().begin(), m.p().end());
    std::size_t up = 0;
    json norms = json::array();
    const std::size_t n = ctx.cfg().uq.perturbation_trials;
    for (std::size_t k = 0; k < n; ++k) {
        SurrogateModel w = m;
        Vector q = p;
        for (double& v : q) v *= 1.0 + ctx.cfg().uq.perturbation_scale * rng.normal();
        w.set_p(q);
        const double c = optimality_diagnostics(residuals(w, data), cov.Sigma_p).condp_norm;
        norms.push_back(c);
        up += c > base ? 1 : 0;
    }
    return {{"scale", ctx.cfg().uq.perturbation_scale},
            {"trials", n},
            {"baseline_condp_norm", base},
            {"perturbed_condp_norm", norms},
            {"increased", up}};
}

inline std::vector<std::string> param_names(const Context& ctx) {
    std::vector<std::string> n;
    for (std::size_t j = 0; j < ctx.net().n_reactions(); ++j) n.push_back(p_name(j));
    return n;
}

/// SA, target, integrated and parity CSVs for a trained model.
inline void write_products(Context& ctx, const SurrogateModel& m, const TrainData& data, const UQReport* uq,
                           json& summary) {
    const auto& net = ctx.net();
    const auto& b = ctx.bases();
    const std::size_t n = net.n_species(), nr = net.n_reactions();
    const Vector p(m.p().begin(), m.p().end());

    for (std::size_t e = 0; e < data.n_experiments(); ++e) {
        const auto& ex = data.experiments()[e];
        Matrix sa(ex.times.size(), n);
        for (std::size_t i = 0; i < ex.times.size(); ++i) {
            const auto v = m.eval(ex.times[i], e).x;
            std::copy(v.begin(), v.end(), sa.row(i).begin());
        }
        ctx.write_csv("train/" + ex.name + "_target.csv", time_table(ex.times, ex.states, net.species()));
        ctx.write_csv("train/" + ex.name + "_sa.csv", time_table(ex.times, sa, net.species()));
    }
    const IntegratedCheck ic = integrate_from_sa(ctx, m, data);
    json rmse = json::object();
    for (std::size_t e = 0; e < data.n_experiments(); ++e) {
        const auto& ex = data.experiments()[e];
        const std::string rel = "train/" + ex.name + "_integrated.csv";
        if (!ic.errors[e].empty()) {
            warn_once("pipeline.integrate." + ex.name, "integration of the recovered model failed for '" + ex.name +
                                                           "': " + ic.errors[e]);
            rmse[ex.name] = {{"error", ic.errors[e]}};
            std::error_code ec;
            fs::remove(ctx.path(rel), ec);
            continue;
        }
        ctx.write_csv(rel, time_table(ex.times, ic.states[e], net.species()));
        json r = json::object();
        for (std::size_t s = 0; s < n; ++s) r[net.species()[s]] = ic.rmse[e][s];
        rmse[ex.name] = r;
    }
    summary["integrated_rmse"] = rmse;

    // standardized derivative parity in range coordinates
    io::Table dx;
    dx.header = {"exp", "t", "component", "sa", "model"};
    std::vector<Vector> rows;
    Vector sq(b.r, 0.0);
    for (std::size_t i = 0; i < data.n_points(); ++i) {
        const auto& pt = data.point(i);
        const SAEval s = m.eval(pt.t, pt.exp);
        const Vector a = matTvec(b.U_R, s.xdot);
        const Vector f = matTvec(b.U_R, net.rhs(s.x, p));
        for (std::size_t k = 0; k < b.r; ++k) {
            rows.push_back({static_cast<double>(pt.exp), pt.t, static_cast<double>(k + 1), a[k], f[k]});
            sq[k] += a[k] * a[k];
        }
    }
    for (double& v : sq) v = std::sqrt(v / static_cast<double>(data.n_points()));
    dx.values = Matrix(rows.size(), 5);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto k = static_cast<std::size_t>(rows[i][2]) - 1;
        const double sd = sq[k] > 0 ? sq[k] : 1.0;
        rows[i][3] /= sd;
        rows[i][4] /= sd;
        std::copy(rows[i].begin(), rows[i].end(), dx.values.row(i).begin());
    }
    ctx.write_csv("train/parity_dx.csv", dx);

    io::Table pp;
    pp.header = {"param", "true", "estimate", "bar2"};
    pp.values = Matrix(nr, 4);
    const Vector truth = ctx.cfg().network.true_log_k();
    for (std::size_t j = 0; j < nr; ++j) {
        pp.values(j, 0) = static_cast<double>(j + 1);
        pp.values(j, 1) = truth.empty() ? std::numeric_limits<double>::quiet_NaN() : truth[j];
        pp.values(j, 2) = p[j];
        pp.values(j, 3) = uq ? uq->bar2_p[j] : std::numeric_limits<double>::quiet_NaN();
    }
    ctx.write_csv("train/parity_p.csv", pp);
    summary["final_p"] = p;
    if (!truth.empty()) {
        double err = 0;
        for (std::size_t j = 0; j < nr; ++j) err = std::max(err, std::abs(p[j] - truth[j]));
        summary["max_abs_error_p"] = err;
    }
}

inline json run_uq_json(Context& ctx, const SurrogateModel& m, const TrainData& data,
                        const std::vector<StoredExperiment>& stored, const Vector& gamma, UQReport& rep) {
    const auto g = gamma_context(ctx, stored, gamma);
    UQOptions o;
    o.h_rel = ctx.cfg().uq.h_rel;
    rep = run_uq(m, data, o, g ? &*g : nullptr);
    json j = uq_to_json(rep, param_names(ctx));
    j["schema"] = "rkinn-uq/1";
    const Vector truth = ctx.cfg().network.true_log_k();
    if (!truth.empty()) {
        std::size_t covered = 0;
        for (std::size_t k = 0; k < truth.size(); ++k) {
            const double err = std::abs(rep.p_hat[k] - truth[k]);
            const bool in_bar = std::isfinite(rep.bar2_p[k]) && err <= rep.bar2_p[k];
            j["parameters"][k]["true"] = truth[k];
            j["parameters"][k]["within_2sd"] = in_bar;
            j["parameters"][k]["within_0.3"] = err <= 0.3;
            covered += (in_bar || err <= 0.3) ? 1 : 0;
        }
        j["covered"] = covered;
    }
    return j;
}

inline std::string dump_state(Context& ctx, const SurrogateModel& m, const TrainState& s, const std::string& mode,
                              const std::string& what) {
    json j = checkpoint_json(ctx, m, s, mode);
    j["error"] = what;
    const fs::path p = ctx.path("train/state_dump.json");
    io::write_json(p, j);
    return p.string();
}

}  // namespace detail

inline int cmd_sweep(Context& ctx);

inline int cmd_train(Context& ctx, bool resume) {
    const auto& c = ctx.cfg();
    if (c.mode == Mode::sweep) return cmd_sweep(ctx);
    const auto stored = load_data(ctx);
    const Vector gamma = training_gamma(ctx);
    const TrainData data = assemble_training_data(ctx, stored, gamma);
    SurrogateModel model = detail::make_model(ctx, data);
    const std::string mode = to_string(c.mode);
    const std::size_t nr = ctx.net().n_reactions();
    if (!c.calibrate && c.hidden_gamma.active())
        warn_once("pipeline.uncalibrated", "hidden calibration factors are set but calibration is disabled; "
                                           "training on raw latent signals");

    std::string metrics = io::csv_header(detail::metrics_header(nr));
    std::optional<TrainState> resume_state;
    if (resume) {
        if (!ctx.has("train/checkpoint.json")) throw ConfigError("train --resume: no checkpoint in " + ctx.out().string());
        const json ck = io::read_json(ctx.path("train/checkpoint.json"));
        if (ck.value("mode", std::string{}) != mode)
            throw ConfigError("train --resume: checkpoint was written in a different mode");
        model.load_json(ck);
        resume_state = detail::state_from_json(ck.at("train_state"));
        // keep metric rows up to the checkpointed epoch
        const auto old = io::read_csv(ctx.path("train/metrics.csv"));
        for (std::size_t i = 0; i < old.values.rows(); ++i)
            if (old.values(i, 0) <= static_cast<double>(resume_state->epoch)) metrics += io::csv_row(old.values.row(i));
        ctx.say("[train] resuming at epoch ", resume_state->epoch);
    } else if (c.init.warm_start) {
        const Vector p = warm_start(model, data, c.init.warm, c.train);
        ctx.say("[train] warm start done (", c.init.warm.epochs, " pre-fit epochs)");
        ctx.manifest()["warm_start_p"] = p;
    }

    TrainState live;
    auto save = [&](const TrainState& s) {
        ctx.write("train/metrics.csv", metrics);
        ctx.write_json("train/checkpoint.json", detail::checkpoint_json(ctx, model, s, mode));
    };
    const EpochHook hook = [&](const EpochRecord& r, const SurrogateModel&, const TrainState& s) {
        metrics += detail::metrics_row(r);
        live = s;
        save(s);
        if (r.epoch % 10 == 0) ctx.say("[train] epoch ", r.epoch, " ell_t ", r.ell_t);
        return true;
    };

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    try {
        res = c.mode == Mode::rkinn
                  ? train_rkinn(model, data, c.train, hook, resume_state ? &*resume_state : nullptr)
                  : train_naive(model, data, c.naive_alpha, c.train, hook, resume_state ? &*resume_state : nullptr);
    } catch (const NumericalError& e) {
        const std::string p = detail::dump_state(ctx, model, live, mode, e.what());
        throw NumericalFailure(e.what(), p);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save(res.state);

    json summary{{"schema", "rkinn-train-summary/1"},
                 {"mode", mode},
                 {"epochs", res.state.epoch},
                 {"converged", res.converged}};
    std::optional<UQReport> uq;
    if (c.mode == Mode::rkinn && c.uq.enabled) {
        UQReport rep;
        ctx.write_json("train/uq.json", detail::run_uq_json(ctx, model, data, stored, gamma, rep));
        uq = rep;
        ctx.manifest()["uq"] = "train/uq.json";
    }
    detail::write_products(ctx, model, data, uq ? &*uq : nullptr, summary);
    ctx.write_json("train/summary.json", summary);
    ctx.manifest()["metrics"] = "train/metrics.csv";
    ctx.manifest()["checkpoint"] = "train/checkpoint.json";
    ctx.manifest()["final_p"] = summary["final_p"];
    if (uq) ctx.manifest()["final_p_bar2"] = uq_to_json(*uq)["parameters"];
    ctx.manifest()["train_seconds"] = secs;
    ctx.say("[train] ", res.state.epoch, " epochs", res.converged ? " (converged)" : "");
    return 0;
}

inline int cmd_sweep(Context& ctx) {
    const auto& c = ctx.cfg();
    const auto stored = load_data(ctx);
    const TrainData data = assemble_training_data(ctx, stored, training_gamma(ctx));
    SurrogateModel model = detail::make_model(ctx, data);
    TrainConfig tc = c.train;
    tc.max_epochs = c.sweep.epochs_per_alpha;
    tc.patience = c.sweep.patience;
    const Vector sched = geometric_schedule(c.sweep.alpha_min, c.sweep.alpha_max, c.sweep.n_alpha);
    const std::size_t nr = ctx.net().n_reactions();
    std::vector<std::string> h{"stage", "direction", "alpha", "mse_x", "mse_dx", "epochs"};
    for (std::size_t j = 0; j < nr; ++j) h.push_back(p_name(j));
    std::string csv = io::csv_header(h);
    std::size_t stage = 0;
    std::vector<SweepRow> rows;
    try {
        rows = alpha_sweep(model, data, tc, sched, [&](const SweepRow& r) {
            Vector v{static_cast<double>(++stage), r.direction == "tightening" ? 1.0 : -1.0, r.alpha, r.mse_x,
                     r.mse_dx, static_cast<double>(r.epochs)};
            v.insert(v.end(), r.p.begin(), r.p.end());
            csv += io::csv_row(v);
            ctx.write("sweep/pareto.csv", csv);
            ctx.say("[sweep] ", r.direction, " alpha ", r.alpha, " mse_x ", r.mse_x, " mse_dx ", r.mse_dx);
        });
    } catch (const NumericalError& e) {
        const std::string p = detail::dump_state(ctx, model, {}, "sweep", e.what());
        throw NumericalFailure(e.what(), p);
    }
    // monotonicity along the tightening leg (5% per-step tolerance)
    std::size_t viol_x = 0, viol_dx = 0;
    for (std::size_t k = 1; k < sched.size(); ++k) {
        if (rows[k].mse_x > 1.05 * rows[k - 1].mse_x) ++viol_x;
        if (rows[k].mse_dx < rows[k - 1].mse_dx / 1.05) ++viol_dx;
    }
    ctx.write_json("sweep/summary.json", {{"schema", "rkinn-sweep/1"},
                                          {"schedule", sched},
                                          {"epochs_per_alpha", tc.max_epochs},
                                          {"mse_x_increases", viol_x},
                                          {"mse_dx_decreases", viol_dx},
                                          {"tolerance", 0.05}});
    ctx.manifest()["sweep"] = "sweep/pareto.csv";
    return 0;
}

inline int cmd_diagnose(Context& ctx) {
    if (!ctx.has("train/checkpoint.json")) throw ConfigError("diagnose: no checkpoint; run train first");
    const auto stored = load_data(ctx);
    const Vector gamma = training_gamma(ctx);
    const TrainData data = assemble_training_data(ctx, stored, gamma);
    SurrogateModel model = detail::make_model(ctx, data);
    model.load_json(io::read_json(ctx.path("train/checkpoint.json")));
    UQReport rep;
    json j = detail::run_uq_json(ctx, model, data, stored, gamma, rep);
    j["schema"] = "rkinn-diagnostics/1";
    j["perturbation"] = detail::perturbation_test(ctx, model, data);
    double sigma = 0;
    for (const auto& e : ctx.cfg().experiments) sigma = std::max(sigma, e.noise_sigma);
    const double bound = 3.0 * sigma / std::sqrt(static_cast<double>(data.n_points() / data.n_experiments()));
    j["condx_bound"] = bound;
    const auto r = residuals(model, data);
    Vector dz;
    for (std::size_t i = 0; i < r.size(); ++i) dz.push_back(norm2(matTvec(ctx.bases().U_N, r.eps_dx.row(i))));
    j["nullspace_residual_max"] = dz.empty() ? 0.0 : *std::max_element(dz.begin(), dz.end());
    const auto ic = detail::integrate_from_sa(ctx, model, data);
    json rm = json::object();
    for (std::size_t e = 0; e < data.n_experiments(); ++e) rm[data.experiments()[e].name] = ic.rmse[e];
    j["integrated_rmse"] = rm;
    ctx.write_json("diagnose/diagnostics.json", j);
    ctx.say("[diagnose] condx_inf ", rep.optimality.condx_inf, " (bound ", bound, "), condp up in ",
            j["perturbation"]["increased"].get<std::size_t>(), "/", ctx.cfg().uq.perturbation_trials);
    return 0;
}

// ---------------------------------------------------------------------------
// Report (reads stored CSVs only)

namespace detail {

inline svg::Plot trajectory_plot(const std::string& title, const io::Table& target, const io::Table& sa,
                                 const io::Table* integ, const std::vector<std::string>& species) {
    svg::Plot p;
    p.title = title;
    p.xlabel = "t";
    p.ylabel = "state";
    p.logx = true;
    const Vector t = target.col("t");
    for (std::size_t k = 0; k < species.size(); ++k) {
        const std::string col = svg::detail::palette(k);
        p.series.push_back(svg::scatter(species[k], t, target.col(species[k]), col));
        p.series.push_back(svg::line("", sa.col("t"), sa.col(species[k]), false, col));
        if (integ) p.series.push_back(svg::line("", integ->col("t"), integ->col(species[k]), true, col));
    }
    return p;
}

}  // namespace detail

inline int cmd_report(Context& ctx) {
    if (!ctx.has("train/metrics.csv")) throw ConfigError("report: no training metrics in '" + ctx.out().string() + "'");
    const auto& net = ctx.net();
    const auto metrics = io::read_csv(ctx.path("train/metrics.csv"));
    const Vector ep = metrics.col("epoch");

    svg::Plot loss{"Loss", "epoch", "loss", false, false, false, 640, 420, {}};
    for (const char* k : {"ell_t", "ell_x", "ell_dx"}) loss.series.push_back(svg::line(k, ep, metrics.col(k)));
    ctx.write("report/loss.svg", svg::render(loss));

    svg::Plot traj{"Kinetic parameters", "epoch", "ln k", false, false, false, 640, 420, {}};
    for (std::size_t j = 0; j < net.n_reactions(); ++j) traj.series.push_back(svg::line(p_name(j), ep, metrics.col(p_name(j))));
    ctx.write("report/params.svg", svg::render(traj));

    json index = json::object();
    index["loss.svg"] = json::array({"train/metrics.csv"});
    index["params.svg"] = json::array({"train/metrics.csv"});
    if (ctx.has("train/parity_p.csv")) {
        const auto pp = io::read_csv(ctx.path("train/parity_p.csv"));
        svg::Plot p{"Parity: ln k", "true", "estimate", false, false, true, 640, 420, {}};
        p.series.push_back(svg::scatter("estimate", pp.col("true"), pp.col("estimate")));
        Vector lo = pp.col("estimate"), hi = lo, tr = pp.col("true"), bar = pp.col("bar2");
        for (std::size_t j = 0; j < lo.size(); ++j) {
            Vector x{tr[j], tr[j]}, y{lo[j] - bar[j], hi[j] + bar[j]};
            if (std::isfinite(bar[j])) p.series.push_back(svg::line("", x, y, false, "#1f77b4"));
        }
        ctx.write("report/parity_p.svg", svg::render(p));
        index["parity_p.svg"] = json::array({"train/parity_p.csv"});
    }
    if (ctx.has("train/parity_dx.csv")) {
        const auto d = io::read_csv(ctx.path("train/parity_dx.csv"));
        svg::Plot p{"Parity: standardized range derivatives", "kinetic model", "surrogate", false, false, true, 640,
                    420, {}};
        const Vector comp = d.col("component"), sa = d.col("sa"), mo = d.col("model");
        const auto nc = static_cast<std::size_t>(*std::max_element(comp.begin(), comp.end()));
        for (std::size_t k = 1; k <= nc; ++k) {
            svg::Series s = svg::scatter("z_R " + std::to_string(k), {}, {});
            for (std::size_t i = 0; i < comp.size(); ++i)
                if (static_cast<std::size_t>(comp[i]) == k) {
                    s.x.push_back(mo[i]);
                    s.y.push_back(sa[i]);
                }
            p.series.push_back(std::move(s));
        }
        ctx.write("report/parity_dx.svg", svg::render(p));
        index["parity_dx.svg"] = json::array({"train/parity_dx.csv"});
    }
    const auto obs = detail::pick(net.species(), net.observable_indices());
    const auto lat = detail::pick(net.species(), net.latent_indices());
    for (const auto& e : ctx.cfg().experiments) {
        const std::string tg = "train/" + e.name + "_target.csv", sa = "train/" + e.name + "_sa.csv",
                          in = "train/" + e.name + "_integrated.csv";
        if (!ctx.has(tg) || !ctx.has(sa)) continue;
        const auto T = io::read_csv(ctx.path(tg));
        const auto S = io::read_csv(ctx.path(sa));
        std::optional<io::Table> I;
        if (ctx.has(in)) I = io::read_csv(ctx.path(in));
        json src = json::array({tg, sa});
        if (I) src.push_back(in);
        for (const auto& [group, names] : {std::pair{"bulk", obs}, std::pair{"latent", lat}}) {
            if (names.empty()) continue;
            const std::string f = e.name + "_" + group + ".svg";
            ctx.write("report/" + f, svg::render(detail::trajectory_plot(e.name + " (" + group + "): data, surrogate, integrated",
                                                                         T, S, I ? &*I : nullptr, names)));
            index[f] = src;
        }
    }
    if (ctx.has("sweep/pareto.csv")) {
        const auto sw = io::read_csv(ctx.path("sweep/pareto.csv"));
        svg::Plot p{"Naive alpha sweep", "MSE x", "MSE dx", true, true, false, 640, 420, {}};
        svg::Series up = svg::line("tightening", {}, {}), down = svg::line("relaxation", {}, {}, true);
        const Vector dir = sw.col("direction"), mx = sw.col("mse_x"), md = sw.col("mse_dx");
        for (std::size_t i = 0; i < dir.size(); ++i) {
            auto& s = dir[i] > 0 ? up : down;
            s.x.push_back(mx[i]);
            s.y.push_back(md[i]);
        }
        p.series = {up, down};
        ctx.write("report/sweep.svg", svg::render(p));
        index["sweep.svg"] = json::array({"sweep/pareto.csv"});
    }
    ctx.write_json("report/index.json", index);
    ctx.say("[report] wrote ", index.size(), " plots to ", (ctx.out() / "report").string());
    return 0;
}

// ---------------------------------------------------------------------------
// Verify

struct VerifyResult {
    std::size_t checked = 0;
    std::vector<std::string> missing, mismatched;
    bool ok() const { return missing.empty() && mismatched.empty(); }
};

inline VerifyResult verify_run(const fs::path& out) {
    const fs::path mf = out / "manifest.json";
    if (!fs::exists(mf)) throw ConfigError("verify: no manifest in '" + out.string() + "'");
    const json m = io::read_json(mf);
    if (m.value("schema", std::string{}) != kManifestSchema) throw ConfigError("verify: not a run manifest");
    VerifyResult r;
    for (const auto& [rel, sum] : m.at("files").items()) {
        ++r.checked;
        if (!fs::exists(out / rel)) r.missing.push_back(rel);
        else if (io::sha256_file(out / rel) != sum.get<std::string>()) r.mismatched.push_back(rel);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Entry point

inline const std::vector<std::string>& commands() {
    static const std::vector<std::string> c{"generate", "calibrate", "decompose", "train",
                                            "sweep",    "diagnose",  "report",    "verify"};
    return c;
}

/// Runs one command. Throws ConfigError / NumericalFailure; see main() for
/// the exit-code mapping.
inline int run(const std::string& command, const Options& o) {
    const fs::path out(o.out);
    if (command == "verify") {
        const VerifyResult r = verify_run(out);
        for (const auto& f : r.missing) std::cout << "MISSING  " << f << '\n';
        for (const auto& f : r.mismatched) std::cout << "MISMATCH " << f << '\n';
        std::cout << (r.ok() ? "OK " : "FAILED ") << r.checked << " files\n";
        return r.ok() ? 0 : 1;
    }
    if (std::find(commands().begin(), commands().end(), command) == commands().end())
        throw ConfigError("unknown command '" + command + "'");

    json doc;
    fs::path base;
    if (!o.config.empty()) {
        doc = io::read_json(o.config);
        base = fs::path(o.config).parent_path();
    } else if (fs::exists(out / "manifest.json")) {
        doc = io::read_json(out / "manifest.json");
    } else {
        throw ConfigError(command == "report" ? "report: '" + out.string() + "' holds no run"
                                              : command + ": --config is required for a new run directory");
    }
    RunConfig cfg = parse_config(apply_overrides(std::move(doc), o), base);

    io::DirLock lock(out);
    Context ctx(std::move(cfg), out, o.log);
    const auto t0 = std::chrono::steady_clock::now();
    int rc = 0;
    try {
        if (command == "generate") rc = cmd_generate(ctx);
        else if (command == "calibrate") rc = cmd_calibrate(ctx);
        else if (command == "decompose") rc = cmd_decompose(ctx);
        else if (command == "train") rc = cmd_train(ctx, o.resume);
        else if (command == "sweep") rc = cmd_sweep(ctx);
        else if (command == "diagnose") rc = cmd_diagnose(ctx);
        else if (command == "report") rc = cmd_report(ctx);
    } catch (const NumericalFailure&) {
        throw;
    } catch (const NumericalError& e) {
        const fs::path dump = out / "state_dump.json";
        io::write_json(dump, {{"command", command}, {"error", e.what()}, {"config", config_to_json(ctx.cfg())}});
        throw NumericalFailure(e.what(), dump);
    }
    ctx.finish(command, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return rc;
}

/// run() with the exit-code convention: 0 ok, 1 other failure,
/// 2 config error, 3 numerical failure.
inline int run_guarded(const std::string& command, const Options& o, std::ostream& err = std::cerr) {
    try {
        return run(command, o);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalFailure& e) {
        err << "numerical failure: " << e.what() << "\nstate dump: " << e.dump.string() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace rkinn::pipeline
