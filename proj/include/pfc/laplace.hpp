// Boundary-element solvers for the Laplace problems of the model: Kirchhoff
// potentials, circulation stream functions, hydrodynamic stream function,
// control potentials, velocity evaluation, and FD shape derivatives.
//
// Discretization: piecewise-constant single-layer densities with analytic
// panel integration of the kernel (1/2pi) ln|x-y|, collocation at midpoints.
// All normal derivatives are fluid-side limits (n points out of the fluid).
#pragma once

#include "pfc/geometry.hpp"
#include "pfc/vorticity.hpp"

#include <Eigen/LU>
#include <memory>

namespace pfc {

// ---------------------------------------------------------------------------
// Analytic panel influence (unit density)
// ---------------------------------------------------------------------------

struct PanelInfluence {
    double value;  // S(x) = int_panel (1/2pi) ln|x-y| ds(y)
    Vec2 grad;     // grad_x S(x); PV (zero normal part) when x is on the panel
};

inline PanelInfluence segment_influence(const Vec2& A, const Vec2& B,
                                        const Vec2& x) {
    const Vec2 e = B - A;
    const double len = e.norm();
    if (len <= 0.0) return {0.0, Vec2::Zero()};
    const Vec2 tau = e / len;
    const Vec2 nrm = perp(tau);
    const Vec2 w = x - A;
    const double xi = w.dot(tau);
    double eta = w.dot(nrm);
    // Collinear points take the principal-value branch; without the snap a
    // roundoff-sized eta of random sign turns the PV into a +-1/2 jump.
    if (std::abs(eta) < 1e-12 * len) eta = 0.0;
    const double u1 = -xi, u2 = len - xi;
    const double r1sq = u1 * u1 + eta * eta;
    const double r2sq = u2 * u2 + eta * eta;
    auto xlnr2 = [](double u, double r2) { return r2 > 0.0 ? u * std::log(r2) : 0.0; };
    double at1 = 0.0, at2 = 0.0;
    if (eta != 0.0) {
        const double s = eta > 0.0 ? 1.0 : -1.0;
        at1 = std::atan2(u1 * s, std::abs(eta));
        at2 = std::atan2(u2 * s, std::abs(eta));
    }
    PanelInfluence out;
    out.value = (xlnr2(u2, r2sq) - xlnr2(u1, r1sq) - 2.0 * (u2 - u1) +
                 2.0 * eta * (at2 - at1)) /
                (4.0 * kPi);
    const double gt = (r1sq > 0.0 && r2sq > 0.0)
                          ? std::log(r1sq / r2sq) / (4.0 * kPi)
                          : 0.0;
    const double gn = (at2 - at1) / (2.0 * kPi);
    out.grad = gt * tau + gn * nrm;
    return out;
}

// Influence of a panel carrying unit density per unit arclength.  Near the
// panel the integral runs over the refined sub-segments (this also yields the
// correct curved-boundary principal values at the panel's own collocation
// point); in the far field the flat chord with charge-preserving rescaling is
// accurate to higher order.
inline PanelInfluence panel_influence(const Panel& p, const Vec2& x) {
    const size_t nf = p.fine.size();
    if (nf <= 2 || (x - p.mid).squaredNorm() > 9.0 * p.len * p.len) {
        PanelInfluence out = segment_influence(p.a, p.b, x);
        const double chord = (p.b - p.a).norm();
        const double s = chord > 0.0 ? p.len / chord : 1.0;
        out.value *= s;
        out.grad *= s;
        return out;
    }
    PanelInfluence out{0.0, Vec2::Zero()};
    for (size_t k = 0; k + 1 < nf; ++k) {
        const PanelInfluence part = segment_influence(p.fine[k], p.fine[k + 1], x);
        out.value += part.value;
        out.grad += part.grad;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Harmonic fields
// ---------------------------------------------------------------------------

struct HarmonicField {
    std::shared_ptr<const PanelMesh> mesh;
    VecX sigma;       // single-layer density per panel
    double c0 = 0.0;  // additive constant
    // Cached boundary traces at panel midpoints (total field, fluid side):
    VecX bvals;   // values
    VecX nderiv;  // normal derivatives
    VecX tderiv;  // tangential derivatives
    // Optional particular vortex part (blob stream):
    std::vector<Vec2> blob_pos;
    std::vector<double> blob_strength;
    double blob_delta = 0.0;

    double value(const Vec2& x) const {
        double v = c0;
        for (int j = 0; j < mesh->size(); ++j)
            v += sigma[j] * panel_influence(mesh->panels[j], x).value;
        for (size_t b = 0; b < blob_pos.size(); ++b)
            v += blob_strength[b] * blob_stream(x - blob_pos[b], blob_delta);
        return v;
    }
    Vec2 grad(const Vec2& x) const {
        Vec2 g = Vec2::Zero();
        for (int j = 0; j < mesh->size(); ++j)
            g += sigma[j] * panel_influence(mesh->panels[j], x).grad;
        for (size_t b = 0; b < blob_pos.size(); ++b)
            g += blob_strength[b] * blob_stream_grad(x - blob_pos[b], blob_delta);
        return g;
    }
};

// Panel average of the normal flux of a vector field, integrated exactly over
// the refined sub-segments (midpoint rule per straight sub-segment).  For
// fields with zero divergence in the enclosed region these averages telescope
// to an exactly zero total flux over a closed component.
template <class F>
double panel_mean_flux(const Panel& p, F&& field) {
    double s = 0.0;
    auto add = [&](const Vec2& A, const Vec2& B) {
        s += perp(B - A).dot(field(Vec2(0.5 * (A + B))));
    };
    if (p.fine.size() >= 2) {
        for (size_t k = 0; k + 1 < p.fine.size(); ++k) add(p.fine[k], p.fine[k + 1]);
    } else {
        add(p.a, p.b);
    }
    return s / p.len;
}

// Neumann data for the 3N Kirchhoff potentials: columns k = 3*kappa + j with
// data e_j . n (j=0,1) and (x - h_kappa)^perp . n (j=2) on body kappa, as
// sub-segment-exact panel averages.
inline MatX kirchhoff_data(const PanelMesh& mesh) {
    MatX K = MatX::Zero(mesh.size(), 3 * mesh.n_bodies);
    for (int i = 0; i < mesh.size(); ++i) {
        const Panel& p = mesh.panels[i];
        if (p.comp >= mesh.n_bodies) continue;
        const int k = 3 * p.comp;
        const Vec2 h = mesh.body_center[p.comp];
        K(i, k) = panel_mean_flux(p, [](const Vec2&) { return Vec2(1, 0); });
        K(i, k + 1) = panel_mean_flux(p, [](const Vec2&) { return Vec2(0, 1); });
        K(i, k + 2) = panel_mean_flux(p, [&](const Vec2& x) { return perp(x - h); });
    }
    return K;
}

// Tangential derivative of a boundary trace by nonuniform 3-point circular
// differences of the midpoint values within each component.
inline VecX tangential_derivative(const PanelMesh& mesh, const VecX& bvals) {
    VecX out(mesh.size());
    for (const auto& [b, e] : mesh.comp_range) {
        const int m = e - b;
        for (int i = b; i < e; ++i) {
            const int ip = b + (i - b + 1) % m;
            const int im = b + (i - b + m - 1) % m;
            const double d1 = 0.5 * (mesh.panels[im].len + mesh.panels[i].len);
            const double d2 = 0.5 * (mesh.panels[i].len + mesh.panels[ip].len);
            out[i] = (bvals[ip] * d1 * d1 - bvals[im] * d2 * d2 +
                      bvals[i] * (d2 * d2 - d1 * d1)) /
                     (d1 * d2 * (d1 + d2));
        }
    }
    return out;
}

struct KirchhoffSet {
    std::vector<HarmonicField> phi;  // 3N potentials
    MatX K;                          // P x 3N Neumann data
    MatX added_mass;                 // 3N x 3N: sum bvals_i K_j len
};

struct CirculationStreams {
    std::vector<HarmonicField> psi;  // N stream functions
    MatX C;                          // N x N boundary constants C(kappa -> nu)
};

// ---------------------------------------------------------------------------
// Workspace: influence matrices + factorizations for one mesh
// ---------------------------------------------------------------------------

class BemWorkspace {
public:
    // with_dirichlet = false skips the Dirichlet factorization (used by FD
    // shape-derivative solves, which only need Neumann problems).
    explicit BemWorkspace(PanelMesh m, bool with_dirichlet = true)
        : mesh_(std::make_shared<const PanelMesh>(std::move(m))) {
        const PanelMesh& mesh = *mesh_;
        const int P = mesh.size();
        Dn_.resize(P, P);
        Vb_.resize(P, P);
        Tt_.resize(P, P);
        len_.resize(P);
        for (int j = 0; j < P; ++j) len_[j] = mesh.panels[j].len;
        for (int i = 0; i < P; ++i) {
            const Panel& pi = mesh.panels[i];
            for (int j = 0; j < P; ++j) {
                const PanelInfluence inf = panel_influence(mesh.panels[j], pi.mid);
                Vb_(i, j) = inf.value;
                // Principal values on the own panel come out of the refined
                // sub-segment integration; only the density jump is added.
                Dn_(i, j) = pi.n.dot(inf.grad) - (i == j ? 0.5 : 0.0);
                Tt_(i, j) = pi.tau.dot(inf.grad);
            }
        }
        // Neumann system: rank-one deflation of the 1-dim null pair.  The
        // continuum operator annihilates the length weights on the left, so
        // A = Dn + u u^T (u = normalized lengths) is nonsingular and returns
        // the exact solution for compatible data.
        uhat_ = len_ / len_.norm();
        neumann_lu_.compute(Dn_ + uhat_ * uhat_.transpose());
        if (!with_dirichlet) return;
        has_dirichlet_ = true;
        // Dirichlet system with per-body constants, a global constant, and
        // per-body flux rows + zero-total-charge row.
        const int N = mesh.n_bodies;
        MatX A = MatX::Zero(P + N + 1, P + N + 1);
        A.topLeftCorner(P, P) = Vb_;
        for (int i = 0; i < P; ++i) {
            if (mesh.is_body_panel(i)) A(i, P + mesh.panels[i].comp) = -1.0;
            A(i, P + N) = 1.0;  // global constant c0
        }
        for (int nu = 0; nu < N; ++nu) {
            const auto [b, e] = mesh.comp_range[nu];
            for (int j = b; j < e; ++j) A(P + nu, j) = -len_[j];
        }
        for (int j = 0; j < P; ++j) A(P + N, j) = len_[j];
        dirichlet_lu_.compute(A);
    }

    const PanelMesh& mesh() const { return *mesh_; }
    std::shared_ptr<const PanelMesh> mesh_ptr() const { return mesh_; }
    const MatX& Dn() const { return Dn_; }
    const MatX& Vb() const { return Vb_; }
    const MatX& Tt() const { return Tt_; }
    const VecX& len() const { return len_; }

    // ---- Neumann problems -------------------------------------------------
    VecX solve_neumann_density(const VecX& data) const {
        const double flux = len_.dot(data);
        const double scale = len_.dot(data.cwiseAbs());
        require(std::abs(flux) <= 1e-10 * std::max(1.0, scale),
                "Neumann data violates zero-total-flux compatibility");
        return neumann_lu_.solve(data);
    }

    HarmonicField solve_neumann(const VecX& data) const {
        HarmonicField f;
        f.mesh = mesh_;
        f.sigma = solve_neumann_density(data);
        f.bvals = Vb_ * f.sigma;
        f.c0 = -len_.dot(f.bvals) / len_.sum();  // zero boundary mean
        f.bvals.array() += f.c0;
        f.nderiv = Dn_ * f.sigma;
        f.tderiv = tangential_derivative(*mesh_, f.bvals);
        return f;
    }

    // ---- Dirichlet problems ----------------------------------------------
    // value_rhs: desired boundary value minus the per-body unknown constant
    // (i.e. the value rows read  S[sigma] + c0 - C_comp = value_rhs).
    // flux_rhs: desired flux of the (single-layer) field through each body.
    struct DirichletSolution {
        VecX sigma;
        VecX body_consts;
        double c0 = 0.0;
    };
    DirichletSolution solve_dirichlet(const VecX& value_rhs,
                                      const VecX& flux_rhs) const {
        require(has_dirichlet_, "workspace built without the Dirichlet system");
        const int P = mesh_->size();
        const int N = mesh_->n_bodies;
        VecX rhs(P + N + 1);
        rhs.head(P) = value_rhs;
        rhs.segment(P, N) = flux_rhs;
        rhs[P + N] = 0.0;
        const VecX sol = dirichlet_lu_.solve(rhs);
        DirichletSolution out;
        out.sigma = sol.head(P);
        out.body_consts = sol.segment(P, N);
        out.c0 = sol[P + N];
        return out;
    }

    // ---- Named solves ------------------------------------------------------
    KirchhoffSet kirchhoff() const {
        KirchhoffSet set;
        set.K = kirchhoff_data(*mesh_);
        const int nk = static_cast<int>(set.K.cols());
        set.phi.reserve(nk);
        for (int k = 0; k < nk; ++k) set.phi.push_back(solve_neumann(set.K.col(k)));
        set.added_mass.resize(nk, nk);
        for (int i = 0; i < nk; ++i)
            for (int j = 0; j < nk; ++j)
                set.added_mass(i, j) =
                    (set.phi[i].bvals.array() * set.K.col(j).array() * len_.array())
                        .sum();
        return set;
    }

    CirculationStreams circulation_streams() const {
        const int N = mesh_->n_bodies;
        CirculationStreams out;
        out.C.resize(N, N);
        for (int kappa = 0; kappa < N; ++kappa) {
            VecX flux = VecX::Zero(N);
            // Normalization: flux of psi_kappa through body nu is -delta_{kn};
            // the flux row computes -charge_nu, so the target is -delta.
            flux[kappa] = -1.0;
            const DirichletSolution sol =
                solve_dirichlet(VecX::Zero(mesh_->size()), flux);
            HarmonicField f;
            f.mesh = mesh_;
            f.sigma = sol.sigma;
            f.c0 = sol.c0;
            f.bvals = Vb_ * f.sigma;
            f.bvals.array() += f.c0;
            f.nderiv = Dn_ * f.sigma;
            f.tderiv = tangential_derivative(*mesh_, f.bvals);
            for (int nu = 0; nu < N; ++nu) out.C(kappa, nu) = sol.body_consts[nu];
            out.psi.push_back(std::move(f));
        }
        return out;
    }

    HarmonicField hydro_stream(const VortexCloud& cloud) const {
        const int P = mesh_->size();
        const int N = mesh_->n_bodies;
        VecX pv = VecX::Zero(P);   // particular values at midpoints
        VecX pn = VecX::Zero(P);   // particular normal derivatives
        VecX pt = VecX::Zero(P);   // particular tangential derivatives
        for (int i = 0; i < P; ++i) {
            const Panel& p = mesh_->panels[i];
            for (int b = 0; b < cloud.size(); ++b) {
                const Vec2 d = p.mid - cloud.pos[b];
                pv[i] += cloud.strength[b] * blob_stream(d, cloud.delta_blob);
                const Vec2 g =
                    cloud.strength[b] * blob_stream_grad(d, cloud.delta_blob);
                pn[i] += p.n.dot(g);
                pt[i] += p.tau.dot(g);
            }
        }
        VecX flux = VecX::Zero(N);
        for (int nu = 0; nu < N; ++nu) {
            const auto [b, e] = mesh_->comp_range[nu];
            for (int j = b; j < e; ++j) flux[nu] -= pn[j] * len_[j];
        }
        const DirichletSolution sol = solve_dirichlet(-pv, flux);
        HarmonicField f;
        f.mesh = mesh_;
        f.sigma = sol.sigma;
        f.c0 = sol.c0;
        f.blob_pos = cloud.pos;
        f.blob_strength = cloud.strength;
        f.blob_delta = cloud.delta_blob;
        f.bvals = Vb_ * f.sigma + pv;
        f.bvals.array() += f.c0;
        f.nderiv = Dn_ * f.sigma + pn;
        f.tderiv = tangential_derivative(*mesh_, f.bvals);
        return f;
    }

private:
    std::shared_ptr<const PanelMesh> mesh_;
    MatX Dn_, Vb_, Tt_;
    VecX len_, uhat_;
    bool has_dirichlet_ = false;
    Eigen::PartialPivLU<MatX> neumann_lu_;
    Eigen::PartialPivLU<MatX> dirichlet_lu_;
};

// ---------------------------------------------------------------------------
// Full velocity field  u = sum grad(phi_k) q'_k + perp(grad psi_{omega,gamma})
//                        + grad alpha
// ---------------------------------------------------------------------------

class VelocityField {
public:
    VelocityField(std::shared_ptr<const PanelMesh> mesh, VecX grad_density,
                  VecX stream_density, std::vector<Vec2> blob_pos,
                  std::vector<double> blob_strength, double blob_delta)
        : mesh_(std::move(mesh)),
          gd_(std::move(grad_density)),
          sd_(std::move(stream_density)),
          bp_(std::move(blob_pos)),
          bs_(std::move(blob_strength)),
          bdelta_(blob_delta) {}

    Vec2 operator()(const Vec2& x) const {
        Vec2 g = Vec2::Zero(), s = Vec2::Zero();
        for (int j = 0; j < mesh_->size(); ++j) {
            const Vec2 pg = panel_influence(mesh_->panels[j], x).grad;
            g += gd_[j] * pg;
            s += sd_[j] * pg;
        }
        for (size_t b = 0; b < bp_.size(); ++b)
            s += bs_[b] * blob_stream_grad(x - bp_[b], bdelta_);
        return g + perp(s);
    }

private:
    std::shared_ptr<const PanelMesh> mesh_;
    VecX gd_, sd_;
    std::vector<Vec2> bp_;
    std::vector<double> bs_;
    double bdelta_;
};

// Assemble the decomposed velocity field from solved components.  alpha may be
// null (no control).
inline VelocityField eval_velocity(const BemWorkspace& ws, const KirchhoffSet& kir,
                                   const VecX& qdot,
                                   const CirculationStreams& streams,
                                   const VecX& gamma, const HarmonicField& psi_omega,
                                   const HarmonicField* alpha) {
    const int P = ws.mesh().size();
    VecX gd = VecX::Zero(P), sd = VecX::Zero(P);
    for (int k = 0; k < static_cast<int>(kir.phi.size()); ++k)
        gd += qdot[k] * kir.phi[k].sigma;
    for (int nu = 0; nu < static_cast<int>(streams.psi.size()); ++nu)
        sd += gamma[nu] * streams.psi[nu].sigma;
    sd += psi_omega.sigma;
    if (alpha) gd += alpha->sigma;
    return VelocityField(ws.mesh_ptr(), std::move(gd), std::move(sd),
                         psi_omega.blob_pos, psi_omega.blob_strength,
                         psi_omega.blob_delta);
}

// ---------------------------------------------------------------------------
// Interior quadrature grid clipped to the fluid domain (for volume-integral
// property tests).  Cell weight = cell area x covered fraction (4x4 subsample).
// ---------------------------------------------------------------------------

struct QuadPoint {
    Vec2 x;
    double w;
};

inline std::vector<QuadPoint> interior_grid(
    const DomainSpec& domain, const std::vector<std::vector<Vec2>>& bodies,
    double cell) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const Vec2& v : domain.outer) {
        x0 = std::min(x0, v.x());
        x1 = std::max(x1, v.x());
        y0 = std::min(y0, v.y());
        y1 = std::max(y1, v.y());
    }
    auto in_fluid = [&](const Vec2& p) {
        if (!point_in_polygon(p, domain.outer)) return false;
        for (const auto& b : bodies)
            if (point_in_polygon(p, b)) return false;
        return true;
    };
    std::vector<QuadPoint> out;
    const int nx = static_cast<int>(std::ceil((x1 - x0) / cell));
    const int ny = static_cast<int>(std::ceil((y1 - y0) / cell));
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            const Vec2 c(x0 + (ix + 0.5) * cell, y0 + (iy + 0.5) * cell);
            int hit = 0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx) {
                    const Vec2 s(x0 + (ix + (sx + 0.5) / 4.0) * cell,
                                 y0 + (iy + (sy + 0.5) / 4.0) * cell);
                    if (in_fluid(s)) ++hit;
                }
            if (hit == 0) continue;
            Vec2 rep = c;
            if (!in_fluid(rep)) {
                // Move the representative point to a covered subsample.
                for (int sy = 0; sy < 4 && !in_fluid(rep); ++sy)
                    for (int sx = 0; sx < 4; ++sx) {
                        const Vec2 s(x0 + (ix + (sx + 0.5) / 4.0) * cell,
                                     y0 + (iy + (sy + 0.5) / 4.0) * cell);
                        if (in_fluid(s)) {
                            rep = s;
                            break;
                        }
                    }
            }
            out.push_back({rep, cell * cell * hit / 16.0});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// FD shape derivative of grad(phi_k) in a pose direction, at fixed probes.
// ---------------------------------------------------------------------------

inline std::vector<Vec2> shape_gradient_kirchhoff(
    const DomainSpec& domain, const std::vector<BodyShape>& shapes, const VecX& q,
    int k, const VecX& direction, const std::vector<Vec2>& probes,
    const MeshParams& prm, double h) {
    const VecX qp = q + h * direction;
    const VecX qm = q - h * direction;
    require(min_separation(domain, shapes, qp) > 0 &&
                min_separation(domain, shapes, qm) > 0,
            "shape_gradient_kirchhoff: FD step leaves the admissible set");
    const BemWorkspace wp(build_mesh(domain, shapes, qp, prm));
    const BemWorkspace wm(build_mesh(domain, shapes, qm, prm));
    const KirchhoffSet kp = wp.kirchhoff();
    const KirchhoffSet km = wm.kirchhoff();
    std::vector<Vec2> out;
    out.reserve(probes.size());
    for (const Vec2& x : probes)
        out.push_back((kp.phi[k].grad(x) - km.phi[k].grad(x)) / (2.0 * h));
    return out;
}

}  // namespace pfc
