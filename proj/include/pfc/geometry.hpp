// Domain, body shapes, rigid placement, collision margins, panel meshes.
//
// Conventions:
//   - Body boundary curves are counterclockwise; the outer boundary is stored
//     counterclockwise but traversed clockwise when panelled, so that on every
//     component n = perp(tau) points out of the fluid (into the body / out of
//     the outer domain).
//   - Generalized coordinates q in R^{3N} are laid out per body as
//     (h_x, h_y, theta).
#pragma once

#include "pfc/common.hpp"

#include <algorithm>
#include <limits>
#include <optional>

namespace pfc {

// ---------------------------------------------------------------------------
// Shapes and domain
// ---------------------------------------------------------------------------

struct BodyShape {
    std::vector<Vec2> boundary;  // simple closed polyline, CCW, last != first
    double mass = 1.0;
    double inertia = 1.0;
    Vec2 ref_center = Vec2::Zero();  // h_{kappa,0}
};

inline double polygon_signed_area(const std::vector<Vec2>& v) {
    double a = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        const Vec2& p = v[i];
        const Vec2& q = v[(i + 1) % v.size()];
        a += p.x() * q.y() - q.x() * p.y();
    }
    return 0.5 * a;
}

inline Vec2 polygon_centroid(const std::vector<Vec2>& v) {
    double a = 0.0;
    Vec2 c = Vec2::Zero();
    for (size_t i = 0; i < v.size(); ++i) {
        const Vec2& p = v[i];
        const Vec2& q = v[(i + 1) % v.size()];
        const double w = p.x() * q.y() - q.x() * p.y();
        a += w;
        c += w * (p + q);
    }
    return c / (3.0 * a);
}

inline bool point_in_polygon(const Vec2& x, const std::vector<Vec2>& poly) {
    // Even-odd crossing test.
    bool inside = false;
    for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y() > x.y()) != (b.y() > x.y())) {
            const double t = (x.y() - a.y()) / (b.y() - a.y());
            if (a.x() + t * (b.x() - a.x()) > x.x()) inside = !inside;
        }
    }
    return inside;
}

// max/min distance from centroid; used for the non-disk check.
inline double disk_likeness_ratio(const std::vector<Vec2>& poly) {
    const Vec2 c = polygon_centroid(poly);
    double lo = std::numeric_limits<double>::max(), hi = 0.0;
    for (const Vec2& p : poly) {
        const double d = (p - c).norm();
        lo = std::min(lo, d);
        hi = std::max(hi, d);
    }
    return hi / lo;
}

inline void validate_shape(const BodyShape& s) {
    require(s.boundary.size() >= 8, "body boundary needs >= 8 vertices");
    require(s.mass > 0.0 && s.inertia > 0.0, "mass and inertia must be positive");
    require(polygon_signed_area(s.boundary) > 0.0, "body boundary must be CCW");
    require(disk_likeness_ratio(s.boundary) > 1.0 + 1e-6,
            "body shape must not be a disk");
}

inline BodyShape make_ellipse(double a, double b, int nv, double mass,
                              double inertia) {
    BodyShape s;
    s.boundary.reserve(nv);
    for (int i = 0; i < nv; ++i) {
        const double t = 2.0 * kPi * i / nv;
        s.boundary.emplace_back(a * std::cos(t), b * std::sin(t));
    }
    s.mass = mass;
    s.inertia = inertia;
    s.ref_center = Vec2::Zero();
    return s;
}

struct DomainSpec {
    std::vector<Vec2> outer;   // CCW polygon of the outer boundary
    double sigma_begin = 0.0;  // control arc endpoints, as arclength fractions
    double sigma_end = 0.5;    // in [0,1), measured CCW from vertex 0
};

inline DomainSpec make_circle_domain(double radius, int nv, double s0, double s1) {
    DomainSpec d;
    d.outer.reserve(nv);
    for (int i = 0; i < nv; ++i) {
        const double t = 2.0 * kPi * i / nv;
        d.outer.emplace_back(radius * std::cos(t), radius * std::sin(t));
    }
    d.sigma_begin = s0;
    d.sigma_end = s1;
    return d;
}

inline void validate_domain(const DomainSpec& d) {
    require(d.outer.size() >= 16, "outer boundary needs >= 16 vertices");
    require(polygon_signed_area(d.outer) > 0.0, "outer boundary must be CCW");
    require(d.sigma_begin >= 0.0 && d.sigma_begin < 1.0, "sigma_begin in [0,1)");
    require(d.sigma_end > d.sigma_begin && d.sigma_end <= 1.0,
            "sigma must be a nonempty forward arc");
    require(d.sigma_end - d.sigma_begin < 1.0, "sigma strictly contained in boundary");
}

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

inline int num_bodies(const VecX& q) { return static_cast<int>(q.size()) / 3; }
inline Vec2 body_center(const VecX& q, int k) { return Vec2(q[3 * k], q[3 * k + 1]); }
inline double body_angle(const VecX& q, int k) { return q[3 * k + 2]; }

inline std::vector<std::vector<Vec2>> place_bodies(
    const std::vector<BodyShape>& shapes, const VecX& q) {
    require(static_cast<int>(q.size()) == 3 * static_cast<int>(shapes.size()),
            "pose dimension mismatch");
    std::vector<std::vector<Vec2>> out(shapes.size());
    for (size_t k = 0; k < shapes.size(); ++k) {
        const Eigen::Matrix2d R = rot2(body_angle(q, static_cast<int>(k)));
        const Vec2 h = body_center(q, static_cast<int>(k));
        out[k].reserve(shapes[k].boundary.size());
        for (const Vec2& v : shapes[k].boundary)
            out[k].push_back(R * (v - shapes[k].ref_center) + h);
    }
    return out;
}

inline double segment_distance(const Vec2& a, const Vec2& b, const Vec2& c,
                               const Vec2& d) {
    auto point_seg = [](const Vec2& p, const Vec2& u, const Vec2& v) {
        const Vec2 e = v - u;
        const double L2 = e.squaredNorm();
        double t = L2 > 0.0 ? (p - u).dot(e) / L2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        return (p - (u + t * e)).norm();
    };
    auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
        return (q.x() - p.x()) * (r.y() - p.y()) - (q.y() - p.y()) * (r.x() - p.x());
    };
    const double o1 = orient(a, b, c), o2 = orient(a, b, d);
    const double o3 = orient(c, d, a), o4 = orient(c, d, b);
    if (((o1 > 0) != (o2 > 0)) && ((o3 > 0) != (o4 > 0))) return 0.0;  // crossing
    return std::min(std::min(point_seg(a, c, d), point_seg(b, c, d)),
                    std::min(point_seg(c, a, b), point_seg(d, a, b)));
}

inline double polyline_distance(const std::vector<Vec2>& p,
                                const std::vector<Vec2>& r) {
    double best = std::numeric_limits<double>::max();
    for (size_t i = 0; i < p.size(); ++i) {
        const Vec2& a = p[i];
        const Vec2& b = p[(i + 1) % p.size()];
        for (size_t j = 0; j < r.size(); ++j) {
            best = std::min(best, segment_distance(a, b, r[j], r[(j + 1) % r.size()]));
        }
    }
    return best;
}

// Minimum separation between bodies and between each body and the outer wall.
// Negative when any overlap is detected (penetration depth estimate).
inline double min_separation(const DomainSpec& domain,
                             const std::vector<BodyShape>& shapes, const VecX& q) {
    const auto placed = place_bodies(shapes, q);
    double sep = std::numeric_limits<double>::max();
    bool overlap = false;
    double depth = 0.0;
    for (size_t i = 0; i < placed.size(); ++i) {
        // Body vs outer wall.
        const double dw = polyline_distance(placed[i], domain.outer);
        bool outside = false;
        for (const Vec2& v : placed[i])
            if (!point_in_polygon(v, domain.outer)) outside = true;
        if (outside) {
            overlap = true;
            depth = std::max(depth, dw);
        }
        sep = std::min(sep, dw);
        // Body vs body.
        for (size_t j = i + 1; j < placed.size(); ++j) {
            const double db = polyline_distance(placed[i], placed[j]);
            bool inter = point_in_polygon(placed[i][0], placed[j]) ||
                         point_in_polygon(placed[j][0], placed[i]);
            for (size_t a = 0; a < placed[i].size() && !inter; a += 7)
                if (point_in_polygon(placed[i][a], placed[j])) inter = true;
            if (db == 0.0 || inter) {
                overlap = true;
                depth = std::max(depth, std::max(db, 1e-12));
            }
            sep = std::min(sep, db);
        }
    }
    if (overlap) return -std::max(depth, 1e-12);
    return sep;
}

// ---------------------------------------------------------------------------
// Panel mesh
// ---------------------------------------------------------------------------

struct Panel {
    Vec2 a, b;    // endpoints, traversed a -> b along tau
    Vec2 mid;     // arclength midpoint on the refined polyline
    Vec2 tau;     // unit tangent at mid
    Vec2 n;       // unit normal = perp(tau), points out of the fluid
    double len = 0.0;    // arclength of the refined polyline
    double kappa = 0.0;  // signed turning rate along tau (CCW positive)
    int comp = 0;        // 0..N-1: body index; N: outer boundary
    bool on_sigma = false;
    // Refined geometry: the panel as an open polyline a -> b following the
    // source boundary.  Near-field influence integrals run over these
    // sub-segments; empty or two points means a flat panel.
    std::vector<Vec2> fine;
};

struct PanelMesh {
    std::vector<Panel> panels;
    int n_bodies = 0;
    std::vector<std::pair<int, int>> comp_range;  // [begin, end) per component
    std::vector<Vec2> body_center;                // h_kappa at this pose
    std::vector<int> sigma_panels;                // indices of Sigma panels

    int size() const { return static_cast<int>(panels.size()); }
    int outer_comp() const { return n_bodies; }
    bool is_body_panel(int i) const { return panels[i].comp < n_bodies; }
};

namespace detail {

// Resample a closed polyline into `count` equal-arclength panels, each carried
// as a refined sub-polyline of `subdiv` segments, with panel endpoints forced
// at the arclength fractions in `breaks`.  Panels are returned in traversal
// order of `poly` (CCW for our conventions).
inline std::vector<std::vector<Vec2>> resample_panels(
    const std::vector<Vec2>& poly, int count, const std::vector<double>& breaks,
    int subdiv) {
    const size_t nv = poly.size();
    std::vector<double> cum(nv + 1, 0.0);
    for (size_t i = 0; i < nv; ++i)
        cum[i + 1] = cum[i] + (poly[(i + 1) % nv] - poly[i]).norm();
    const double per = cum[nv];
    auto point_at = [&](double s) {
        s = std::fmod(s, per);
        if (s < 0) s += per;
        const auto it = std::upper_bound(cum.begin(), cum.end(), s);
        size_t i = static_cast<size_t>(std::max<std::ptrdiff_t>(
            0, std::distance(cum.begin(), it) - 1));
        if (i >= nv) i = nv - 1;
        const double t = (s - cum[i]) / (cum[i + 1] - cum[i]);
        return Vec2(poly[i] + t * (poly[(i + 1) % nv] - poly[i]));
    };
    // Arc segments between successive breaks (fractions of perimeter).
    std::vector<double> bk = breaks;
    std::sort(bk.begin(), bk.end());
    bk.erase(std::unique(bk.begin(), bk.end(),
                         [](double a, double b) { return std::abs(a - b) < 1e-12; }),
             bk.end());
    if (bk.empty()) bk.push_back(0.0);
    std::vector<std::vector<Vec2>> panels;
    panels.reserve(count + static_cast<int>(bk.size()));
    const size_t nb = bk.size();
    for (size_t s = 0; s < nb; ++s) {
        const double f0 = bk[s];
        const double f1 = (s + 1 < nb) ? bk[s + 1] : bk[0] + 1.0;
        const double frac = f1 - f0;
        const int m = std::max(1, static_cast<int>(std::lround(frac * count)));
        for (int i = 0; i < m; ++i) {
            std::vector<Vec2> fine;
            fine.reserve(subdiv + 1);
            for (int j = 0; j <= subdiv; ++j)
                fine.push_back(point_at(
                    (f0 + frac * (i + static_cast<double>(j) / subdiv) / m) * per));
            panels.push_back(std::move(fine));
        }
    }
    return panels;
}

inline Panel make_panel(std::vector<Vec2> fine, int comp) {
    Panel p;
    require(fine.size() >= 2, "panel polyline needs >= 2 points");
    p.a = fine.front();
    p.b = fine.back();
    p.len = 0.0;
    for (size_t k = 0; k + 1 < fine.size(); ++k)
        p.len += (fine[k + 1] - fine[k]).norm();
    require(p.len > 0.0, "degenerate zero-length panel");
    // Arclength midpoint and the tangent of the sub-segment carrying it.
    double s = 0.0;
    p.mid = 0.5 * (p.a + p.b);
    p.tau = (p.b - p.a).normalized();
    for (size_t k = 0; k + 1 < fine.size(); ++k) {
        const double l = (fine[k + 1] - fine[k]).norm();
        if (s + l >= 0.5 * p.len) {
            const double t = (0.5 * p.len - s) / l;
            p.mid = fine[k] + t * (fine[k + 1] - fine[k]);
            p.tau = (fine[k + 1] - fine[k]) / l;
            break;
        }
        s += l;
    }
    p.n = perp(p.tau);
    p.comp = comp;
    p.fine = std::move(fine);
    return p;
}

inline void append_component(PanelMesh& mesh,
                             std::vector<std::vector<Vec2>> panel_polys,
                             bool reverse, int comp) {
    const int begin = mesh.size();
    const int m = static_cast<int>(panel_polys.size());
    for (int i = 0; i < m; ++i) {
        std::vector<Vec2> fine =
            reverse ? panel_polys[m - 1 - i] : panel_polys[i];
        if (reverse) std::reverse(fine.begin(), fine.end());
        mesh.panels.push_back(make_panel(std::move(fine), comp));
    }
    mesh.comp_range.emplace_back(begin, mesh.size());
    // Signed curvature estimate from the turning angles at both joints.
    for (int i = begin; i < mesh.size(); ++i) {
        const int prev = (i == begin) ? mesh.size() - 1 : i - 1;
        const int next = (i + 1 == mesh.size()) ? begin : i + 1;
        auto turn = [](const Vec2& t0, const Vec2& t1) {
            return std::atan2(t0.x() * t1.y() - t0.y() * t1.x(), t0.dot(t1));
        };
        const double psi0 = turn(mesh.panels[prev].tau, mesh.panels[i].tau);
        const double psi1 = turn(mesh.panels[i].tau, mesh.panels[next].tau);
        mesh.panels[i].kappa = 0.5 * (psi0 + psi1) / mesh.panels[i].len;
    }
}

}  // namespace detail

struct MeshParams {
    double resolution = 6.0;   // panels per unit length
    int min_panels = 16;       // per component
    int sigma_min_panels = 0;  // lower bound on panels inside Sigma
    double delta = 0.0;        // collision margin to enforce (0 = skip check)
    int subdiv = 5;            // sub-segments per panel (odd keeps the
                               // collocation point off sub-segment joints)
    // When non-empty: panel count per component (bodies then outer), used by
    // FD shape derivatives so shifted meshes stay index-aligned.
    std::vector<int> fixed_counts;
};

inline double polyline_perimeter(const std::vector<Vec2>& poly) {
    double per = 0.0;
    for (size_t i = 0; i < poly.size(); ++i)
        per += (poly[(i + 1) % poly.size()] - poly[i]).norm();
    return per;
}

inline PanelMesh build_mesh(const DomainSpec& domain,
                            const std::vector<BodyShape>& shapes, const VecX& q,
                            const MeshParams& prm) {
    require(prm.resolution > 0.0, "resolution must be positive");
    if (prm.delta > 0.0)
        require(min_separation(domain, shapes, q) >= prm.delta,
                "collision margin violated");
    PanelMesh mesh;
    mesh.n_bodies = static_cast<int>(shapes.size());
    const auto placed = place_bodies(shapes, q);
    for (int k = 0; k < mesh.n_bodies; ++k) {
        const double per = polyline_perimeter(placed[k]);
        const int m =
            static_cast<int>(prm.fixed_counts.size()) > k
                ? prm.fixed_counts[k]
                : std::max(prm.min_panels,
                           static_cast<int>(std::ceil(per * prm.resolution)));
        auto polys = detail::resample_panels(placed[k], m, {0.0}, prm.subdiv);
        detail::append_component(mesh, std::move(polys), /*reverse=*/false, k);
        mesh.body_center.push_back(body_center(q, k));
    }
    // Outer boundary: traverse clockwise; align breaks with Sigma endpoints.
    {
        const double per = polyline_perimeter(domain.outer);
        const double sig_frac = domain.sigma_end - domain.sigma_begin;
        int m = std::max(prm.min_panels,
                         static_cast<int>(std::ceil(per * prm.resolution)));
        if (prm.sigma_min_panels > 0)
            m = std::max(m, static_cast<int>(std::ceil(prm.sigma_min_panels / sig_frac)));
        if (static_cast<int>(prm.fixed_counts.size()) > mesh.n_bodies)
            m = prm.fixed_counts[mesh.n_bodies];
        auto polys = detail::resample_panels(
            domain.outer, m,
            {std::fmod(domain.sigma_begin, 1.0), std::fmod(domain.sigma_end, 1.0)},
            prm.subdiv);
        detail::append_component(mesh, std::move(polys), /*reverse=*/true,
                                 mesh.n_bodies);
    }
    // Tag Sigma panels by arclength fraction of their midpoint along the CCW
    // outer polyline.
    {
        const auto& poly = domain.outer;
        const size_t nv = poly.size();
        std::vector<double> cum(nv + 1, 0.0);
        for (size_t i = 0; i < nv; ++i)
            cum[i + 1] = cum[i] + (poly[(i + 1) % nv] - poly[i]).norm();
        const double per = cum[nv];
        auto frac_of = [&](const Vec2& x) {
            // Project x onto the polyline, return arclength fraction.
            double best = std::numeric_limits<double>::max(), bs = 0.0;
            for (size_t i = 0; i < nv; ++i) {
                const Vec2& a = poly[i];
                const Vec2& b = poly[(i + 1) % nv];
                const Vec2 e = b - a;
                double t = e.squaredNorm() > 0 ? (x - a).dot(e) / e.squaredNorm() : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                const double d = (x - (a + t * e)).norm();
                if (d < best) {
                    best = d;
                    bs = (cum[i] + t * (cum[i + 1] - cum[i])) / per;
                }
            }
            return bs;
        };
        const auto [ob, oe] = mesh.comp_range[mesh.n_bodies];
        for (int i = ob; i < oe; ++i) {
            const double f = frac_of(mesh.panels[i].mid);
            if (f >= domain.sigma_begin && f < domain.sigma_end) {
                mesh.panels[i].on_sigma = true;
                mesh.sigma_panels.push_back(i);
            }
        }
    }
    return mesh;
}

}  // namespace pfc
