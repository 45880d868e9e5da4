#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <unistd.h>
#include <string>
#include <vector>

#include "aerolite/autograd.hpp"

namespace testsupport {

/// Small seeded generator for property tests.
struct Gen {
    std::mt19937_64 rng;

    explicit Gen(std::uint64_t seed) : rng(seed) {}

    int int_in(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
    double normal() { return std::normal_distribution<double>()(rng); }
    bool coin(double p = 0.5) { return uniform() < p; }

    template <class V>
    const typename V::value_type& pick(const V& v) {
        return v[index(v.size())];
    }

    std::vector<std::string> words(const std::vector<std::string>& alphabet, int lo, int hi) {
        std::vector<std::string> out(static_cast<std::size_t>(int_in(lo, hi)));
        for (auto& w : out) w = pick(alphabet);
        return out;
    }

    template <class T>
    aerolite::ag::Matrix<T> matrix(int rows, int cols, double scale = 1.0) {
        aerolite::ag::Matrix<T> m(rows, cols);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) m(i, j) = static_cast<T>(scale * normal());
        }
        return m;
    }
};

inline std::string join(const std::vector<std::string>& w) {
    std::string out;
    for (std::size_t i = 0; i < w.size(); ++i) out += (i ? " " : "") + w[i];
    return out;
}

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).
inline double rel_error(const aerolite::ag::Matrix<double>& analytic, const aerolite::ag::Matrix<double>& numeric,
                        double floor = 1e-10) {
    const double denom = std::max({analytic.norm(), numeric.norm(), floor});
    return (analytic - numeric).norm() / denom;
}

/// Central finite differences of `loss` with respect to every entry of `p`.
inline aerolite::ag::Matrix<double> numeric_grad(aerolite::ag::Parameter<double>& p,
                                                 const std::function<double()>& loss, double h = 1e-6) {
    aerolite::ag::Matrix<double> g(p.value.rows(), p.value.cols());
    for (aerolite::ag::Index i = 0; i < p.value.size(); ++i) {
        const double orig = p.value.data()[i];
        p.value.data()[i] = orig + h;
        const double up = loss();
        p.value.data()[i] = orig - h;
        const double down = loss();
        p.value.data()[i] = orig;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

/// Runs `build` once with backward to collect analytic grads, then compares
/// each listed parameter against finite differences. Returns the worst
/// relative error.
inline double gradient_check(const std::vector<aerolite::ag::Parameter<double>*>& params,
                             const std::function<aerolite::ag::Var<double>()>& build, double h = 1e-6) {
    for (auto* p : params) p->zero_grad();
    aerolite::ag::backward(build());
    double worst = 0.0;
    for (auto* p : params) {
        const auto analytic = p->grad;
        auto numeric = numeric_grad(*p, [&] { return build().scalar(); }, h);
        worst = std::max(worst, rel_error(analytic, numeric));
    }
    return worst;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("aerolite_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testsupport
