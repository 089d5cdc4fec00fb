// Reformulated solid equations: the quadratic control operator Q, the linear
// operator L, the force functional F with its added-mass decomposition, and
// the generalized mass matrices.
//
// Sign conventions of this code base (fixed by the exact momentum balance
//   Mg q''.p* + int (d_t u + grad|u|^2/2 + w u^perp) . grad(phi.p*) dx = 0
// and verified against energy conservation and pressure-force oracles):
//   - uncontrolled motion:  q'' = -Mtot^{-1} Ftilde
//   - control equation:     Q[g] + L[g] = F = Mtot q'' + Ftilde
//   - closed loop:          q'' = Mtot^{-1} (Q[g] + L[g] - Ftilde)
//
// Every volume integral reduces exactly to boundary quadratures plus particle
// sums; no interior grid is used here.
#pragma once

#include "pfc/laplace.hpp"

namespace pfc {

// ---------------------------------------------------------------------------
// Mass matrices
// ---------------------------------------------------------------------------

struct GeneralizedMass {
    MatX Mg;    // diagonal genuine mass: blocks diag(m, m, J) per body
    MatX Madd;  // symmetrized added mass
    MatX Mtot;  // Mg + Madd, symmetric positive definite
};

inline GeneralizedMass generalized_mass(const std::vector<BodyShape>& shapes,
                                        const KirchhoffSet& kir) {
    const int n = 3 * static_cast<int>(shapes.size());
    GeneralizedMass gm;
    gm.Mg = MatX::Zero(n, n);
    for (size_t k = 0; k < shapes.size(); ++k) {
        gm.Mg(3 * k, 3 * k) = shapes[k].mass;
        gm.Mg(3 * k + 1, 3 * k + 1) = shapes[k].mass;
        gm.Mg(3 * k + 2, 3 * k + 2) = shapes[k].inertia;
    }
    // The energy form is symmetric; the raw collocation quadrature carries an
    // O(h^2) asymmetry which is removed here.
    gm.Madd = 0.5 * (kir.added_mass + kir.added_mass.transpose());
    gm.Mtot = gm.Mg + gm.Madd;
    return gm;
}

// ---------------------------------------------------------------------------
// Stage context: all per-pose solves and cached boundary traces
// ---------------------------------------------------------------------------

enum class ShapeFdMode {
    kPerCoordinate,  // 2*3N shifted solves; exactly linear in q'
    kDirectional,    // 2 shifted solves along q'/|q'|; used by the simulator
};

struct StageOptions {
    double fd_step = 1e-4;  // pose-space FD step for shape derivatives
    ShapeFdMode fd_mode = ShapeFdMode::kPerCoordinate;
};

struct StageContext {
    // Inputs.
    DomainSpec domain;
    std::vector<BodyShape> shapes;
    VecX q, qdot, gamma;
    VortexCloud cloud;
    MeshParams prm;
    StageOptions opts;
    // Solves at pose q.
    std::shared_ptr<BemWorkspace> ws;
    KirchhoffSet kir;
    CirculationStreams cs;
    HarmonicField psi;  // total stream psi_omega + sum_k gamma_k psi_k
    GeneralizedMass mass;
    // Cached panel traces.
    VecX len;        // panel lengths
    MatX tphi;       // P x 3N tangential derivatives of phi_k
    VecX Kqdot;      // u_f . n on bodies (K qdot)
    VecX u_tau;      // u_f . tau
    MatX dphi_qdot;  // P x 3N: sum_m q'_m d_{q_m} phi_k at panel midpoints
                     // (material-corrected on moving bodies)
    VecX beta;       // q''-free part of d_t(phi . q') on body panels
    // Cached particle data.
    std::vector<Vec2> part_uf;               // u_f at particle positions
    std::vector<std::vector<Vec2>> part_gphi;  // grad phi_k at particles

    int n_coords() const { return static_cast<int>(q.size()); }
};

namespace detail {

// Velocity field of generalized coordinate m restricted to its body boundary.
inline Vec2 coord_velocity(const PanelMesh& mesh, int i, int m) {
    const Panel& p = mesh.panels[i];
    if (p.comp != m / 3) return Vec2::Zero();
    switch (m % 3) {
        case 0: return Vec2(1, 0);
        case 1: return Vec2(0, 1);
        default: return perp(p.mid - mesh.body_center[p.comp]);
    }
}

// Boundary values of all Kirchhoff potentials at a shifted pose, index-aligned
// with the base mesh (fixed panel counts, rigid transport of body panels).
inline MatX shifted_kirchhoff_bvals(const StageContext& ctx, const VecX& qs) {
    MeshParams prm = ctx.prm;
    prm.fixed_counts.clear();
    for (const auto& [b, e] : ctx.ws->mesh().comp_range)
        prm.fixed_counts.push_back(e - b);
    prm.delta = 0.0;  // margin was checked at the base pose
    const BemWorkspace ws(build_mesh(ctx.domain, ctx.shapes, qs, prm),
                          /*with_dirichlet=*/false);
    const MatX K = kirchhoff_data(ws.mesh());
    const int nk = static_cast<int>(K.cols());
    MatX bv(ws.mesh().size(), nk);
    for (int k = 0; k < nk; ++k) bv.col(k) = ws.solve_neumann(K.col(k)).bvals;
    return bv;
}

// Material shape derivative sum_m dir_m d_{q_m} phi_k at panel midpoints:
// co-moving FD of boundary values minus the transport term on body panels.
inline MatX shape_derivative_values(const StageContext& ctx, const VecX& dir,
                                    double h) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int P = mesh.size();
    const int nk = ctx.n_coords();
    const MatX bp = shifted_kirchhoff_bvals(ctx, ctx.q + h * dir);
    const MatX bm = shifted_kirchhoff_bvals(ctx, ctx.q - h * dir);
    MatX out = (bp - bm) / (2.0 * h);
    for (int i = 0; i < P; ++i) {
        if (!mesh.is_body_panel(i)) continue;
        Vec2 v = Vec2::Zero();
        for (int m = 0; m < nk; ++m)
            if (dir[m] != 0.0) v += dir[m] * coord_velocity(mesh, i, m);
        const Panel& p = mesh.panels[i];
        const double vn = v.dot(p.n), vt = v.dot(p.tau);
        for (int k = 0; k < nk; ++k)
            out(i, k) -= vn * ctx.kir.K(i, k) + vt * ctx.tphi(i, k);
    }
    return out;
}

}  // namespace detail

inline StageContext make_stage_context(const DomainSpec& domain,
                                       const std::vector<BodyShape>& shapes,
                                       const VecX& q, const VecX& qdot,
                                       const VecX& gamma, const VortexCloud& cloud,
                                       const MeshParams& prm,
                                       const StageOptions& opts = {}) {
    StageContext ctx;
    ctx.domain = domain;
    ctx.shapes = shapes;
    ctx.q = q;
    ctx.qdot = qdot;
    ctx.gamma = gamma;
    ctx.cloud = cloud;
    ctx.prm = prm;
    ctx.opts = opts;
    ctx.ws = std::make_shared<BemWorkspace>(build_mesh(domain, shapes, q, prm));
    const BemWorkspace& ws = *ctx.ws;
    const PanelMesh& mesh = ws.mesh();
    const int P = mesh.size();
    const int nk = static_cast<int>(q.size());
    const int N = mesh.n_bodies;
    require(static_cast<int>(gamma.size()) == N, "gamma dimension mismatch");

    ctx.kir = ws.kirchhoff();
    ctx.cs = ws.circulation_streams();
    ctx.mass = generalized_mass(shapes, ctx.kir);
    ctx.len = ws.len();

    // Total stream function psi_{omega,gamma}.
    ctx.psi = ws.hydro_stream(cloud);
    for (int nu = 0; nu < N; ++nu) {
        ctx.psi.sigma += gamma[nu] * ctx.cs.psi[nu].sigma;
        ctx.psi.c0 += gamma[nu] * ctx.cs.psi[nu].c0;
        ctx.psi.bvals += gamma[nu] * ctx.cs.psi[nu].bvals;
        ctx.psi.nderiv += gamma[nu] * ctx.cs.psi[nu].nderiv;
        ctx.psi.tderiv += gamma[nu] * ctx.cs.psi[nu].tderiv;
    }

    ctx.tphi.resize(P, nk);
    for (int k = 0; k < nk; ++k) ctx.tphi.col(k) = ctx.kir.phi[k].tderiv;
    ctx.Kqdot = ctx.kir.K * qdot;
    // u_f . tau; the stream contributes perp(grad psi) . tau = -d_n psi.
    ctx.u_tau = ctx.tphi * qdot - ctx.psi.nderiv;

    // Shape derivatives of the Kirchhoff values.
    const double h = opts.fd_step;
    if (opts.fd_mode == ShapeFdMode::kPerCoordinate) {
        ctx.dphi_qdot = MatX::Zero(P, nk);
        for (int m = 0; m < nk; ++m) {
            if (qdot[m] == 0.0) continue;
            VecX em = VecX::Zero(nk);
            em[m] = 1.0;
            ctx.dphi_qdot += qdot[m] * detail::shape_derivative_values(ctx, em, h);
        }
    } else {
        const double speed = qdot.norm();
        if (speed > 0.0) {
            ctx.dphi_qdot =
                speed * detail::shape_derivative_values(ctx, qdot / speed, h);
        } else {
            ctx.dphi_qdot = MatX::Zero(P, nk);
        }
    }
    ctx.beta = VecX::Zero(P);
    for (int i = 0; i < P; ++i)
        if (mesh.is_body_panel(i)) ctx.beta[i] = ctx.dphi_qdot.row(i).dot(qdot);

    // Particle caches.
    ctx.part_uf.resize(cloud.size());
    ctx.part_gphi.resize(cloud.size());
    for (int p = 0; p < cloud.size(); ++p) {
        ctx.part_gphi[p].resize(nk);
        Vec2 uf = perp(ctx.psi.grad(cloud.pos[p]));
        for (int k = 0; k < nk; ++k) {
            ctx.part_gphi[p][k] = ctx.kir.phi[k].grad(cloud.pos[p]);
            uf += qdot[k] * ctx.part_gphi[p][k];
        }
        ctx.part_uf[p] = uf;
    }
    return ctx;
}

// Control potential A[q,g] for g given at the Sigma panels (piecewise constant,
// ordered as mesh.sigma_panels).  g must have zero total flux.
inline HarmonicField control_potential(const StageContext& ctx,
                                       const VecX& g_sigma) {
    const PanelMesh& mesh = ctx.ws->mesh();
    require(static_cast<int>(g_sigma.size()) ==
                static_cast<int>(mesh.sigma_panels.size()),
            "control trace dimension mismatch");
    VecX data = VecX::Zero(mesh.size());
    for (size_t j = 0; j < mesh.sigma_panels.size(); ++j)
        data[mesh.sigma_panels[j]] = g_sigma[j];
    return ctx.ws->solve_neumann(data);
}

// ---------------------------------------------------------------------------
// Assemblies (all boundary quadratures + particle sums)
// ---------------------------------------------------------------------------

// Q(q)[g] = -1/2 (oint |grad alpha|^2 d_n phi_k)_k.  On bodies d_n alpha = 0,
// so |grad alpha|^2 = (tangential derivative)^2 there.
inline VecX assemble_Q(const StageContext& ctx, const HarmonicField& alpha) {
    const VecX w =
        alpha.tderiv.array().square() * ctx.len.array();
    return -0.5 * ctx.kir.K.transpose() * w;
}

// Polarized cross term: Q[a+b] - Q[a] - Q[b] = -(oint (grad a . grad b)
// d_n phi_k)_k; exposed for the polarization oracle.
inline VecX assemble_Q_cross(const StageContext& ctx, const HarmonicField& a,
                             const HarmonicField& b) {
    const VecX w = a.tderiv.array() * b.tderiv.array() * ctx.len.array();
    return -ctx.kir.K.transpose() * w;
}

// L(q,q',gamma,omega)[g]: linear in g and separately in (q', gamma, strengths).
inline VecX assemble_L(const StageContext& ctx, const HarmonicField& alpha) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int nk = ctx.n_coords();
    VecX out = VecX::Zero(nk);
    // Control-flux coupling to the shape derivative of phi on Sigma.
    for (int i : mesh.sigma_panels)
        out += alpha.nderiv[i] * ctx.len[i] * ctx.dphi_qdot.row(i).transpose();
    // Body boundary terms.
    for (int i = 0; i < mesh.size(); ++i) {
        if (!mesh.is_body_panel(i)) continue;
        const double ta = alpha.tderiv[i];
        const double wl = ctx.len[i];
        out += (ta * ctx.Kqdot[i] * wl) * ctx.tphi.row(i).transpose();
        out -= (ta * ctx.u_tau[i] * wl) * ctx.kir.K.row(i).transpose();
    }
    // Vorticity coupling (particle sum).
    for (int p = 0; p < ctx.cloud.size(); ++p) {
        const Vec2 ga_perp = perp(alpha.grad(ctx.cloud.pos[p]));
        for (int k = 0; k < nk; ++k)
            out[k] -= ctx.cloud.strength[p] * ga_perp.dot(ctx.part_gphi[p][k]);
    }
    return out;
}

// Ftilde(q,q',gamma,omega): the q''-free part of the fluid force functional.
inline VecX assemble_Ftilde(const StageContext& ctx) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int nk = ctx.n_coords();
    VecX out = VecX::Zero(nk);
    for (int i = 0; i < mesh.size(); ++i) {
        if (!mesh.is_body_panel(i)) continue;
        const double wl = ctx.len[i];
        // beta d_n phi_k
        out += (ctx.beta[i] * wl) * ctx.kir.K.row(i).transpose();
        // -(grad^perp psi . grad phi_k)(K.q') with grad^perp psi = -d_n psi tau
        out += (ctx.psi.nderiv[i] * ctx.Kqdot[i] * wl) * ctx.tphi.row(i).transpose();
        // +1/2 |u_f|^2 K_k
        const double usq =
            ctx.u_tau[i] * ctx.u_tau[i] + ctx.Kqdot[i] * ctx.Kqdot[i];
        out += (0.5 * usq * wl) * ctx.kir.K.row(i).transpose();
    }
    // Vortex force (particle sum).
    for (int p = 0; p < ctx.cloud.size(); ++p) {
        const Vec2 uperp = perp(ctx.part_uf[p]);
        for (int k = 0; k < nk; ++k)
            out[k] += ctx.cloud.strength[p] * uperp.dot(ctx.part_gphi[p][k]);
    }
    return out;
}

// F = Mtot q'' + Ftilde (the right-hand side of the control equation).
inline VecX assemble_F(const StageContext& ctx, const VecX& qddot) {
    return ctx.mass.Mtot * qddot + assemble_Ftilde(ctx);
}

// Uncontrolled acceleration.
inline VecX uncontrolled_acceleration(const StageContext& ctx) {
    return ctx.mass.Mtot.ldlt().solve(-assemble_Ftilde(ctx));
}

// Full fluid velocity field of the stage (optionally with a control field).
inline VelocityField stage_velocity(const StageContext& ctx,
                                    const HarmonicField* alpha = nullptr) {
    // ctx.psi already contains the gamma-weighted circulation streams.
    return eval_velocity(*ctx.ws, ctx.kir, ctx.qdot, ctx.cs,
                         VecX::Zero(ctx.gamma.size()), ctx.psi, alpha);
}

}  // namespace pfc
