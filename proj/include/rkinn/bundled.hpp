#pragma once

// Bundled copy of data/dcs_network.json (kept in sync by test_stoich).

#include <string_view>

#include "rkinn/stoich.hpp"

namespace rkinn {

inline constexpr std::string_view kBundledDcsNetwork = R"json(
{
  "schema": "rkinn-network/1",
  "name": "dcs",
  "species": ["A", "B", "C", "A*", "B*", "C*", "D*", "E*", "F*", "*"],
  "latent": [false, false, false, true, true, true, true, true, true, true],
  "reactions": [
    "A + * -> A*", "A* -> A + *",
    "B + * -> B*", "B* -> B + *",
    "C + * -> C*", "C* -> C + *",
    "A* + * -> 2 D*", "2 D* -> A* + *",
    "B* + * -> 2 E*", "2 E* -> B* + *",
    "D* + E* -> F* + *", "F* + * -> D* + E*",
    "F* + E* -> C* + *", "C* + * -> F* + E*"
  ],
  "M": [
    [-1,  1,  0,  0,  0,  0,  0,  0,  0,  0,  0,  0,  0,  0],
    [ 0,  0, -1,  1,  0,  0,  0,  0,  0,  0,  0,  0,  0,  0],
    [ 0,  0,  0,  0, -1,  1,  0,  0,  0,  0,  0,  0,  0,  0],
    [ 1, -1,  0,  0,  0,  0, -1,  1,  0,  0,  0,  0,  0,  0],
    [ 0,  0,  1, -1,  0,  0,  0,  0, -1,  1,  0,  0,  0,  0],
    [ 0,  0,  0,  0,  1, -1,  0,  0,  0,  0,  0,  0,  1, -1],
    [ 0,  0,  0,  0,  0,  0,  2, -2,  0,  0, -1,  1,  0,  0],
    [ 0,  0,  0,  0,  0,  0,  0,  0,  2, -2, -1,  1, -1,  1],
    [ 0,  0,  0,  0,  0,  0,  0,  0,  0,  0,  1, -1, -1,  1],
    [-1,  1, -1,  1, -1,  1, -1,  1, -1,  1,  1, -1,  1, -1]
  ],
  "rate_constants": [20, 8, 24, 12, 16, 40, 640, 960, 160, 80, 640, 240, 560, 160],
  "ln_k0": [3.00, 2.08, 3.18, 2.48, 2.77, 3.69, 6.46, 6.87, 5.08, 4.38, 6.46, 5.48, 6.33, 5.08]
}
)json";

/// The dcs network shipped with the library (10 species, 14 reactions).
inline NetworkFile bundled_dcs_network() {
    return network_from_json(nlohmann::json::parse(kBundledDcsNetwork));
}

}  // namespace rkinn
