#include <cstdint>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"

#include "rkinn/pipeline.hpp"

namespace {

struct Flags {
    std::string config, out = "run";
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    bool resume = false, quiet = false;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rkinn: robust kinetics-informed neural network pipeline"};
    app.require_subcommand(1);
    std::map<std::string, Flags> flags;
    std::map<std::string, CLI::App*> subs;

    const std::map<std::string, std::string> help = {
        {"generate", "synthesize clean, observed and latent trajectories"},
        {"calibrate", "recover latent calibration factors"},
        {"decompose", "range/nullspace bases and z-space projections"},
        {"train", "train the surrogate (mode from config) and run UQ"},
        {"sweep", "naive alpha sweep (tightening then relaxation)"},
        {"diagnose", "optimality conditions and error bars at the checkpoint"},
        {"report", "render SVG plots from stored CSVs"},
        {"verify", "recompute checksums of every manifest entry"}};

    for (const auto& name : rkinn::pipeline::commands()) {
        auto* s = app.add_subcommand(name, help.at(name));
        auto& f = flags[name];
        s->add_option("--out", f.out, "run directory")->capture_default_str();
        if (name != "verify") {
            s->add_option("--config", f.config, "config JSON (or a run manifest)");
            s->add_option("--seed", f.seed, "override the root seed");
            s->add_option("--epochs", f.epochs, "override max epochs (train) and epochs per alpha (sweep)");
            s->add_flag("--quiet,-q", f.quiet, "suppress progress output");
        }
        if (name == "train") s->add_flag("--resume", f.resume, "continue from the stored checkpoint");
        subs[name] = s;
    }

    CLI11_PARSE(app, argc, argv);

    for (const auto& [name, s] : subs) {
        if (!s->parsed()) continue;
        const auto& f = flags[name];
        rkinn::pipeline::Options o;
        o.config = f.config;
        o.out = f.out;
        if (name != "verify") {
            if (s->count("--seed")) o.seed = f.seed;
            if (s->count("--epochs")) o.epochs = f.epochs;
        }
        o.resume = f.resume;
        o.log = f.quiet ? nullptr : &std::cerr;
        const int rc = rkinn::pipeline::run_guarded(name, o);
        if (rc == 0 && name != "verify" && !f.quiet) std::cerr << "done: " << f.out << "/manifest.json\n";
        return rc;
    }
    return 1;
}
