// A <-> B from 50 noise-free points: train rKINN from random weights and
// p = 0, then print the recovered ln k with 2-sd bars.

#include <cmath>
#include <cstdio>

#include "rkinn/decomp.hpp"
#include "rkinn/integrate.hpp"
#include "rkinn/mle.hpp"
#include "rkinn/uq.hpp"

using namespace rkinn;

int main(int argc, char** argv) {
    const std::string path = argc > 1 ? argv[1] : std::string(RKINN_DATA_DIR) + "/ab_network.json";
    const auto ab = load_network(path);
    const auto b = build_bases(ab.network);

    ExperimentSpec s;
    s.x0 = {1.0, 0.0};
    s.n_points = 50;
    const auto d = generate_synthetic(s, ab.network, ab.true_log_k());
    const TrainData data({{"ab", d.clean.times, d.clean.states}});

    SurrogateConfig cfg;
    cfg.t_min = data.t_min();
    cfg.t_max = data.t_max();
    SurrogateModel m(ab.network, b, cfg, data.nullspace_estimates(b));
    Rng rng(3);
    m.init_weights(rng);

    TrainConfig tc;
    tc.max_epochs = 200;
    train_rkinn(m, data, tc, [](const EpochRecord& r, const SurrogateModel&, const TrainState&) {
        if (r.epoch % 25 == 0) std::printf("epoch %3zu  ell_t %9.4f  p = (%.4f, %.4f)\n", r.epoch, r.ell_t, r.p[0], r.p[1]);
        return true;
    });

    const auto uq = run_uq(m, data);
    const Vector truth = ab.true_log_k();
    std::printf("\n%-10s %9s %9s %9s\n", "reaction", "true", "fit", "2sd");
    for (std::size_t j = 0; j < truth.size(); ++j)
        std::printf("%-10s %9.4f %9.4f %9.2g\n", ab.network.reactions()[j].c_str(), truth[j], m.p()[j], uq.bar2_p[j]);
}
