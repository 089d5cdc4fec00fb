// Regularized point-vortex cloud: blob kernels, RK4 transport, boundary
// enforcement (outflow removal, zero entering vorticity, near-body
// reflection), and the log-Lipschitz velocity diagnostic.
#pragma once

#include "pfc/geometry.hpp"

#include <functional>

namespace pfc {

struct VortexCloud {
    std::vector<Vec2> pos;
    std::vector<double> strength;  // circulation per particle
    double delta_blob = 0.1;       // Lamb-Oseen blob radius
    double r_omega = 0.0;          // declared sup |omega| bound (diagnostic)

    int size() const { return static_cast<int>(pos.size()); }
    bool empty() const { return pos.empty(); }
    double total_circulation() const {
        double s = 0.0;
        for (double g : strength) s += g;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Lamb-Oseen blob kernels.  Stream of a unit-strength blob at the origin:
//   psi(r) = (1/2pi)(ln r + E1(r^2/delta^2)/2),   u_theta = (1/2pi r)(1-e^{-r^2/delta^2}).
// delta <= 0 degenerates to the point vortex.
// ---------------------------------------------------------------------------

inline double blob_stream(const Vec2& d, double delta) {
    const double r2 = d.squaredNorm();
    if (delta <= 0.0) return std::log(r2) / (4.0 * kPi);
    const double z = r2 / (delta * delta);
    if (z < 1e-14) {
        // ln r + E1(z)/2 -> (ln delta - gamma/2) as r -> 0.
        constexpr double kEulerGamma = 0.57721566490153286;
        return (std::log(delta) - 0.5 * kEulerGamma) / (2.0 * kPi);
    }
    const double e1 = -std::expint(-z);
    return (0.5 * std::log(r2) + 0.5 * e1) / (2.0 * kPi);
}

inline Vec2 blob_stream_grad(const Vec2& d, double delta) {
    const double r2 = d.squaredNorm();
    if (delta <= 0.0) return d / (2.0 * kPi * r2);
    if (r2 < 1e-300) return Vec2::Zero();
    const double z = r2 / (delta * delta);
    const double f = (z < 1e-8) ? (1.0 / (delta * delta)) * (1.0 - 0.5 * z)
                                : (1.0 - std::exp(-z)) / r2;
    return d * (f / (2.0 * kPi));
}

// Velocity induced at x by a unit blob at p: perp(grad psi).
inline Vec2 blob_velocity(const Vec2& x, const Vec2& p, double delta) {
    return perp(blob_stream_grad(x - p, delta));
}

// Vorticity of the blob (for |omega| diagnostics).
inline double blob_vorticity(const Vec2& d, double delta) {
    if (delta <= 0.0) return 0.0;
    const double z = d.squaredNorm() / (delta * delta);
    return std::exp(-z) / (kPi * delta * delta);
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

// Velocity of the full particle system state: given all positions, return all
// velocities.  This signature supports both frozen external fields and
// self-induced dynamics inside one classical RK4 step.
using CloudVelocityFn =
    std::function<std::vector<Vec2>(const std::vector<Vec2>&)>;

inline VortexCloud advect(const VortexCloud& cloud, const CloudVelocityFn& vel,
                          double dt) {
    require(dt > 0.0, "advect: dt must be positive");
    const int n = cloud.size();
    if (n == 0) return cloud;
    const auto k1 = vel(cloud.pos);
    std::vector<Vec2> tmp(n);
    for (int i = 0; i < n; ++i) tmp[i] = cloud.pos[i] + 0.5 * dt * k1[i];
    const auto k2 = vel(tmp);
    for (int i = 0; i < n; ++i) tmp[i] = cloud.pos[i] + 0.5 * dt * k2[i];
    const auto k3 = vel(tmp);
    for (int i = 0; i < n; ++i) tmp[i] = cloud.pos[i] + dt * k3[i];
    const auto k4 = vel(tmp);
    VortexCloud out = cloud;
    for (int i = 0; i < n; ++i)
        out.pos[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return out;
}

// Removal at outflow / impermeability enforcement.  Particles that left Omega
// are removed (outflow through Sigma; entering vorticity is never created).
// Particles within delta_blob of a body are reflected along the local normal.
inline VortexCloud enforce_boundary(const VortexCloud& cloud,
                                    const DomainSpec& domain,
                                    const std::vector<std::vector<Vec2>>& bodies) {
    VortexCloud out;
    out.delta_blob = cloud.delta_blob;
    out.r_omega = cloud.r_omega;
    for (int i = 0; i < cloud.size(); ++i) {
        Vec2 x = cloud.pos[i];
        if (!point_in_polygon(x, domain.outer)) continue;  // crossed d(Omega)
        bool dropped = false;
        for (const auto& body : bodies) {
            // Nearest boundary point and outward (into-fluid) normal.
            double best = std::numeric_limits<double>::max();
            Vec2 cp = Vec2::Zero();
            const size_t m = body.size();
            for (size_t j = 0; j < m; ++j) {
                const Vec2& a = body[j];
                const Vec2& b = body[(j + 1) % m];
                const Vec2 e = b - a;
                double t = e.squaredNorm() > 0 ? (x - a).dot(e) / e.squaredNorm() : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                const Vec2 p = a + t * e;
                const double d = (x - p).norm();
                if (d < best) {
                    best = d;
                    cp = p;
                }
            }
            const bool inside = point_in_polygon(x, body);
            const double sd = inside ? -best : best;  // signed distance to body
            if (sd < cloud.delta_blob) {
                if (best < 1e-12) {
                    dropped = true;  // exactly on the boundary: treat as removed
                    break;
                }
                const Vec2 nf = inside ? (cp - x).normalized() : (x - cp).normalized();
                x = cp + (2.0 * cloud.delta_blob - sd) * nf;  // reflect off offset surface
                if (!point_in_polygon(x, domain.outer) || point_in_polygon(x, body)) {
                    dropped = true;
                    break;
                }
            }
        }
        if (dropped) continue;
        out.pos.push_back(x);
        out.strength.push_back(cloud.strength[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Log-Lipschitz diagnostic:  max over probe pairs of
//   |u(x)-u(y)| / (|x-y| (1 + max(0, -ln|x-y|))).
// ---------------------------------------------------------------------------

inline double lipschitz_diagnostic(
    const std::function<Vec2(const Vec2&)>& u,
    const std::vector<std::pair<Vec2, Vec2>>& probe_pairs) {
    double worst = 0.0;
    for (const auto& [x, y] : probe_pairs) {
        const double d = (x - y).norm();
        if (d <= 0.0) continue;
        const double denom = d * (1.0 + std::max(0.0, -std::log(d)));
        worst = std::max(worst, (u(x) - u(y)).norm() / denom);
    }
    return worst;
}

}  // namespace pfc
