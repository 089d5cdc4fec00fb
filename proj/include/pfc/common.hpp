// Small shared utilities: 2D vector helpers, deterministic RNG, formatting.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfc {

using Vec2 = Eigen::Vector2d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Rotate by +90 degrees: (x, y) -> (-y, x).  This is the paper-wide "perp".
inline Vec2 perp(const Vec2& v) { return Vec2(-v.y(), v.x()); }

inline Eigen::Matrix2d rot2(double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    Eigen::Matrix2d R;
    R << c, -s, s, c;
    return R;
}

// Deterministic RNG used by tests and synthesis seeding.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    double uniform(double a, double b) {
        std::uniform_real_distribution<double> d(a, b);
        return d(eng_);
    }
    double normal() {
        std::normal_distribution<double> d(0.0, 1.0);
        return d(eng_);
    }
    VecX normal_vec(int n) {
        VecX v(n);
        for (int i = 0; i < n; ++i) v[i] = normal();
        return v;
    }
private:
    std::mt19937_64 eng_;
};

// Shortest-round-trip double formatting; fixed format => byte-stable reports.
inline std::string fmt_g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

struct PfcError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw PfcError(msg);
}

}  // namespace pfc
