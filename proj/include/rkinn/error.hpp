#pragma once

#include <iostream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>

namespace rkinn {

/// Bad input: malformed config, missing file, inconsistent dimensions.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A numerical procedure failed (non-convergence, indefinite matrix, NaN).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

/// Prints a warning to stderr the first time `key` is seen in this process.
inline void warn_once(const std::string& key, const std::string& msg) {
    static std::mutex mu;
    static std::set<std::string> seen;
    std::lock_guard<std::mutex> lock(mu);
    if (seen.insert(key).second) std::cerr << "warning: " << msg << '\n';
}

}  // namespace rkinn
