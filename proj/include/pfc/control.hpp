// Feedback-law synthesis: constrained control basis on Sigma, Gram
// concentration, Caratheodory weights, the nontrivial zero X_bar, the
// corrected right inverse, and the scaling solver for Q + L = y.
//
// Sign conventions.  The dynamics module assembles the control equation as
//   assemble_Q(g) + assemble_L(g) = F := Mtot q'' + Ftilde,
// with assemble_Q(g) = -1/2 (oint |grad a|^2 dn phi_k)_k.  The synthesis
// below works with the positively-signed Gram
//   G_{ij,k} = +oint grad a_i . grad a_j dn phi_k ds = -assemble_Q_cross,
// whose quadratic map Qp(X) = 1/2 X^T G X has the concentrated structure
// G_{ij,.} ~ delta_ij e_i needed for the nontrivial zero.  The equation
// handed to the scaling solver is therefore  Qp(X) - Lm(X) = -F  where
// Lm(X)_k = assemble_L(sum X_i g_i).
#pragma once

#include "pfc/dynamics.hpp"

#include <Eigen/SVD>
#include <map>

namespace pfc {

// ---------------------------------------------------------------------------
// Phase-1 simplex (Bland's rule): find lambda >= 0 with W lambda = t.
// Returns an empty vector when infeasible.  Small dense problems only.
// ---------------------------------------------------------------------------

inline VecX simplex_feasible(const MatX& W, const VecX& t) {
    const int d = static_cast<int>(W.rows());
    const int n = static_cast<int>(W.cols());
    // Tableau over [lambda | artificials | rhs], artificial basis start.
    MatX T(d, n + d + 1);
    T.leftCols(n) = W;
    T.middleCols(n, d).setIdentity();
    T.col(n + d) = t;
    for (int r = 0; r < d; ++r)
        if (T(r, n + d) < 0.0) T.row(r) = -T.row(r);
    std::vector<int> basis(d);
    for (int r = 0; r < d; ++r) basis[r] = n + r;
    // Reduced costs for objective = sum of artificials.
    VecX cost = VecX::Zero(n + d);
    cost.tail(d).setOnes();
    const double tol = 1e-11;
    for (int iter = 0; iter < 20000; ++iter) {
        // Reduced cost of column j: c_j - sum_r c_{basis r} T(r,j).
        int enter = -1;
        for (int j = 0; j < n + d; ++j) {
            double red = cost[j];
            for (int r = 0; r < d; ++r) red -= cost[basis[r]] * T(r, j);
            if (red < -tol) {
                enter = j;  // Bland: first improving index
                break;
            }
        }
        if (enter < 0) break;
        int leave = -1;
        double best = 0.0;
        for (int r = 0; r < d; ++r) {
            if (T(r, enter) <= tol) continue;
            const double ratio = T(r, n + d) / T(r, enter);
            if (leave < 0 || ratio < best - tol ||
                (ratio < best + tol && basis[r] < basis[leave])) {
                leave = r;
                best = ratio;
            }
        }
        if (leave < 0) break;  // unbounded (cannot happen in phase 1)
        T.row(leave) /= T(leave, enter);
        for (int r = 0; r < d; ++r)
            if (r != leave) T.row(r) -= T(r, enter) * T.row(leave);
        basis[leave] = enter;
    }
    double obj = 0.0;
    for (int r = 0; r < d; ++r)
        if (basis[r] >= n) obj += T(r, n + d);
    if (obj > 1e-9) return VecX();
    VecX lam = VecX::Zero(n);
    for (int r = 0; r < d; ++r)
        if (basis[r] < n) lam[basis[r]] = std::max(0.0, T(r, n + d));
    return lam;
}

// ---------------------------------------------------------------------------
// Raw control basis on Sigma: sine modes in arclength, flux-corrected.
// ---------------------------------------------------------------------------

struct ControlParams {
    int basis_size = 0;        // 0 -> 4 (3N+1)^2
    double nu = 0.2;           // concentration target (angou)
    double tol = 1e-8;         // quadratic-equation residual tolerance
    double eps0 = 0.5;         // initial scaling parameter
    double cache_threshold = 0.01;  // pose distance triggering re-synthesis
    int gn_max_iter = 200;
    int reduced_rank = 0;         // GN working dims; 0 -> min(Kc, 2 (3N+1)^2)
    std::uint64_t seed = 1;
};

// Columns are mode values at the Sigma panel midpoints; every column has
// exactly zero discrete flux sum_j g_j L_j (membership in C).
inline MatX build_raw_basis(const PanelMesh& mesh, int K) {
    const auto& sp = mesh.sigma_panels;
    const int m = static_cast<int>(sp.size());
    require(m >= K, "build_raw_basis: Sigma has fewer panels than modes");
    double total = 0.0;
    for (int i : sp) total += mesh.panels[i].len;
    VecX s(m), len(m), w(m);
    double acc = 0.0;
    for (int j = 0; j < m; ++j) {
        len[j] = mesh.panels[sp[j]].len;
        s[j] = (acc + 0.5 * len[j]) / total;
        w[j] = std::sin(kPi * s[j]) * std::sin(kPi * s[j]);
        acc += len[j];
    }
    const double wflux = w.dot(len);
    MatX raw(m, K);
    for (int k = 0; k < K; ++k) {
        VecX g(m);
        for (int j = 0; j < m; ++j) g[j] = std::sin((k + 1) * kPi * s[j]);
        g -= (g.dot(len) / wflux) * w;  // exact discrete zero flux
        raw.col(k) = g;
    }
    return raw;
}

// Boundary data of the basis potentials A[q, raw_k]: values and tangential
// derivatives on every panel (columns follow raw's columns).
struct BasisPotentials {
    MatX bval;  // P x K
    MatX tval;  // P x K
    MatX sig;   // P x K single-layer densities (for off-boundary evaluation)
};

inline BasisPotentials basis_potentials(const StageContext& ctx,
                                        const MatX& raw) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int K = static_cast<int>(raw.cols());
    BasisPotentials out;
    out.bval.resize(mesh.size(), K);
    out.tval.resize(mesh.size(), K);
    out.sig.resize(mesh.size(), K);
    for (int k = 0; k < K; ++k) {
        const HarmonicField a = control_potential(ctx, raw.col(k));
        out.bval.col(k) = a.bvals;
        out.tval.col(k) = a.tderiv;
        out.sig.col(k) = a.sigma;
    }
    return out;
}

// ---------------------------------------------------------------------------
// C_b(q) projection: the 3N constraints oint A[q,g] dn phi_k ds = 0.
// ---------------------------------------------------------------------------

struct CbProjection {
    MatX constraints;  // 3N x K
    MatX null_basis;   // K x (K - 3N), orthonormal columns
};

inline CbProjection project_cb(const StageContext& ctx,
                               const BasisPotentials& pots) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int K = static_cast<int>(pots.bval.cols());
    const int nc = ctx.n_coords();
    MatX C = MatX::Zero(nc, K);
    for (int i = 0; i < mesh.size(); ++i) {
        if (!mesh.is_body_panel(i)) continue;
        const double L = mesh.panels[i].len;
        C += (ctx.kir.K.row(i).transpose() * pots.bval.row(i)) * L;
    }
    Eigen::JacobiSVD<MatX> svd(C, Eigen::ComputeFullV);
    const double smax = svd.singularValues()[0];
    int rank = 0;
    for (int i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()[i] > 1e-12 * smax) ++rank;
    require(rank == nc, "project_cb: unexpected constraint rank");
    CbProjection out;
    out.constraints = C;
    out.null_basis = svd.matrixV().rightCols(K - rank);
    return out;
}

// ---------------------------------------------------------------------------
// Caratheodory data (Lemma lem:muireg): boundary points x_i^kappa, weights
// lambda_i > 0, inscribed radius r, and the closures mu_i(q, v).
// ---------------------------------------------------------------------------

struct ConcentrationData {
    VecX q0;                             // synthesis pose
    double r = 0.0;                      // inscribed radius of the LP
    VecX lam;                            // M positive Caratheodory weights
    std::vector<std::vector<Vec2>> pts;  // pts[i][kappa], body frame
    MatX e0;                             // 3N x M target vectors at q0
    int n_bodies = 0;

    int m() const { return static_cast<int>(lam.size()); }
};

namespace detail {

// dn phi contributions of one boundary point of body kappa: (n, (x-h)^perp.n).
inline Eigen::Vector3d point_data(const Vec2& x, const Vec2& n, const Vec2& h) {
    return Eigen::Vector3d(n.x(), n.y(), perp(x - h).dot(n));
}

}  // namespace detail

// e_i(q): the stacked dn phi values of the transported points x_i^kappa(q).
inline MatX concentration_targets(const ConcentrationData& cd, const VecX& q) {
    const int N = cd.n_bodies;
    MatX e = MatX::Zero(3 * N, cd.m());
    for (int i = 0; i < cd.m(); ++i) {
        for (int k = 0; k < N; ++k) {
            const Eigen::Matrix2d R = rot2(body_angle(q, k));
            const Eigen::Matrix2d R0 = rot2(body_angle(cd.q0, k));
            // Body-frame point and normal, transported rigidly.
            const Vec2 xb = cd.pts[i][k];
            // Body-frame normal was stored in e0 at q0; rebuild from e0.
            Vec2 n0(cd.e0(3 * k, i), cd.e0(3 * k + 1, i));
            const Vec2 n = R * (R0.transpose() * n0);
            const Vec2 x = R * xb + body_center(q, k);
            e.block<3, 1>(3 * k, i) =
                detail::point_data(x, n, body_center(q, k));
        }
    }
    return e;
}

// mu_i(q, v) = (1/r) lam_i lambda_{l(i)}(R_rel^{-1} v), smooth and positive.
inline VecX concentration_mu(const ConcentrationData& cd, const VecX& q,
                             const VecX& v) {
    const int N = cd.n_bodies;
    const int nl = 3 * N + 1;
    VecX u(3 * N);
    for (int k = 0; k < N; ++k) {
        const Eigen::Matrix2d Rrel =
            rot2(body_angle(q, k) - body_angle(cd.q0, k));
        u.segment<2>(3 * k) = Rrel.transpose() * v.segment<2>(3 * k);
        u[3 * k + 2] = v[3 * k + 2];
    }
    const double s = std::sqrt(1.0 + u.squaredNorm());
    VecX mu(cd.m());
    for (int i = 0; i < cd.m(); ++i) {
        const int l = i / nl;  // group index, 0-based
        const double lam_l = (l < 3 * N) ? (u[l] + s) : s;
        mu[i] = cd.lam[i] * lam_l / cd.r;
    }
    return mu;
}

inline ConcentrationData caratheodory(const StageContext& ctx) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int N = mesh.n_bodies;
    const int nl = 3 * N + 1;
    require(N >= 1, "caratheodory: no bodies");

    // Candidate points per body: panel midpoints with their dn phi data.
    std::vector<std::vector<int>> cand(N);
    for (int i = 0; i < mesh.size(); ++i)
        if (mesh.is_body_panel(i)) cand[mesh.panels[i].comp].push_back(i);
    // Joint candidates: product over bodies, subsampled to keep the LP small.
    int stride = 1;
    auto joint_count = [&](int st) {
        double c = 1.0;
        for (int k = 0; k < N; ++k)
            c *= std::ceil(cand[k].size() / double(st));
        return c;
    };
    while (joint_count(stride) > 4000.0) ++stride;
    std::vector<std::vector<int>> joint;  // panel index per body
    std::vector<int> idx(N, 0);
    for (;;) {
        std::vector<int> pick(N);
        for (int k = 0; k < N; ++k) pick[k] = cand[k][idx[k] * stride];
        joint.push_back(pick);
        int k = N - 1;
        while (k >= 0 && (idx[k] + 1) * stride >=
                             static_cast<int>(cand[k].size()))
            idx[k--] = 0;
        if (k < 0) break;
        ++idx[k];
    }
    const int S = static_cast<int>(joint.size());
    MatX W(3 * N, S);
    for (int j = 0; j < S; ++j)
        for (int k = 0; k < N; ++k) {
            const Panel& p = mesh.panels[joint[j][k]];
            W.block<3, 1>(3 * k, j) =
                detail::point_data(p.mid, p.n, mesh.body_center[k]);
        }

    // Inscribed radius: r_hat = min over sampled directions of the support
    // function, then a safety factor; the per-direction LPs re-verify it.
    Rng rng(977);
    double rhat = std::numeric_limits<double>::max();
    for (int it = 0; it < 4000; ++it) {
        VecX dvec = rng.normal_vec(3 * N);
        dvec /= dvec.norm();
        rhat = std::min(rhat, (W.transpose() * dvec).maxCoeff());
    }
    require(rhat > 1e-6,
            "caratheodory: inscribed radius not positive (disk-like body?)");
    double r = 0.8 * rhat;

    // One convex-combination LP per direction b_l; simplex returns a basic
    // solution with at most 3N+1 support points.  The sampled rhat can
    // overestimate the true inscribed radius when the hull is thin in a
    // direction the sampling missed (near-disk bodies): on infeasibility
    // shrink r and retry the whole direction set.
    ConcentrationData cd;
    MatX A(3 * N + 1, S);
    A.topRows(3 * N) = W;
    A.bottomRows(1).setOnes();
    const int M = nl * nl;
    bool feasible = false;
    for (int attempt = 0; attempt < 24 && !feasible; ++attempt) {
        if (attempt > 0) r *= 0.5;
        feasible = true;
        cd = ConcentrationData{};
        cd.q0 = ctx.q;
        cd.r = r;
        cd.n_bodies = N;
        cd.lam = VecX::Zero(M);
        cd.pts.assign(M, std::vector<Vec2>(N));
        cd.e0 = MatX::Zero(3 * N, M);
        for (int l = 0; l < nl && feasible; ++l) {
        VecX b = VecX::Zero(3 * N);
        if (l < 3 * N)
            b[l] = 1.0;
        else
            b.setConstant(-1.0);
        VecX t(3 * N + 1);
        t.head(3 * N) = r * b;
        t[3 * N] = 1.0;
        const VecX lam = simplex_feasible(A, t);
        if (lam.size() == 0) {
            feasible = false;
            break;
        }
        // Collect the basic support and its weights.
        std::vector<int> sup;
        std::vector<double> wts;
        for (int j = 0; j < S; ++j)
            if (lam[j] > 1e-10) {
                sup.push_back(j);
                wts.push_back(lam[j]);
            }
        require(static_cast<int>(sup.size()) <= nl,
                "caratheodory: simplex returned a non-basic solution");
        // Pad to exactly 3N+1 points, preferring distinct far-away candidates
        // with re-solved positive weights; fall back to the paper's
        // weight-splitting when positivity cannot be kept.
        while (static_cast<int>(sup.size()) < nl) {
            int best = -1;
            double bestd = -1.0;
            for (int j = 0; j < S; ++j) {
                double dmin = std::numeric_limits<double>::max();
                for (int u2 : sup)
                    dmin = std::min(dmin, (W.col(j) - W.col(u2)).norm());
                if (dmin > bestd) {
                    bestd = dmin;
                    best = j;
                }
            }
            const int ns = static_cast<int>(sup.size()) + 1;
            MatX As(3 * N + 1, ns);
            for (int j = 0; j + 1 < ns; ++j) As.col(j) = A.col(sup[j]);
            As.col(ns - 1) = A.col(best);
            VecX w0(ns);
            for (int j = 0; j + 1 < ns; ++j) w0[j] = wts[j];
            w0[ns - 1] = 1e-3;
            const VecX corr = As.transpose() *
                              (As * As.transpose()).ldlt().solve(t - As * w0);
            const VecX w = w0 + corr;
            if (w.minCoeff() > 0.0 && (As * w - t).norm() < 1e-9) {
                sup.push_back(best);
                wts.assign(w.data(), w.data() + ns);
            } else {
                int jmax = 0;
                for (size_t j = 1; j < wts.size(); ++j)
                    if (wts[j] > wts[jmax]) jmax = static_cast<int>(j);
                sup.push_back(sup[jmax]);
                wts[jmax] *= 0.5;
                wts.push_back(wts[jmax]);
            }
        }

        for (int j = 0; j < nl; ++j) {
            const int i = l * nl + j;
            cd.lam[i] = wts[j];
            for (int k = 0; k < N; ++k) {
                const Panel& p = mesh.panels[joint[sup[j]][k]];
                const Eigen::Matrix2d R0 = rot2(body_angle(ctx.q, k));
                cd.pts[i][k] =
                    R0.transpose() * (p.mid - mesh.body_center[k]);
                cd.e0.block<3, 1>(3 * k, i) =
                    detail::point_data(p.mid, p.n, mesh.body_center[k]);
            }
        }
        }
    }
    require(feasible, "caratheodory: LP infeasible at every radius");
    require(cd.lam.minCoeff() > 0.0, "caratheodory: zero weight survived");
    return cd;
}

// ---------------------------------------------------------------------------
// Gram concentration (angou): find M functions in the C_b-constrained span
// with |G_{ij,.} - delta_ij e_i| <= nu componentwise.
// ---------------------------------------------------------------------------

struct ControlBasis {
    MatX coef;           // K x M coefficients in the raw basis
    MatX sval;           // n_sigma x M boundary controls
    MatX bval;           // P x M potential boundary values
    MatX tval;           // P x M tangential derivatives
    MatX sig;            // P x M single-layer densities
    MatX nval;           // P x M solver-reconstructed normal derivatives
    std::vector<MatX> G;  // 3N Gram slices, M x M, paper sign (+)
    double achieved_nu = 0.0;
};

namespace detail {

// Re-solve each basis column through the exact operator path the dynamics
// module uses (control_potential), so every cached trace is bitwise the one
// a verification solve of the same column reproduces.  The per-mode
// superposition pots * coef agrees only to solver roundoff amplified by the
// coefficient magnitudes, which is not good enough at large amplitudes.
inline void resolve_columns(const StageContext& ctx, ControlBasis& out) {
    const int P = ctx.ws->mesh().size();
    const int M = static_cast<int>(out.sval.cols());
    out.bval.resize(P, M);
    out.tval.resize(P, M);
    out.sig.resize(P, M);
    out.nval.resize(P, M);
    for (int i = 0; i < M; ++i) {
        const HarmonicField f = control_potential(ctx, out.sval.col(i));
        out.bval.col(i) = f.bvals;
        out.tval.col(i) = f.tderiv;
        out.sig.col(i) = f.sigma;
        out.nval.col(i) = f.nderiv;
    }
}

}  // namespace detail

namespace detail {

// Gram slices G_k(i,j) = sum_{body panels} t_i t_j K(:,k) L from trace mats.
inline std::vector<MatX> gram_slices(const StageContext& ctx, const MatX& tval) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int nc = ctx.n_coords();
    std::vector<MatX> G(nc);
    for (int k = 0; k < nc; ++k) {
        VecX w = VecX::Zero(mesh.size());
        for (int i = 0; i < mesh.size(); ++i)
            if (mesh.is_body_panel(i))
                w[i] = ctx.kir.K(i, k) * mesh.panels[i].len;
        G[k] = tval.transpose() * w.asDiagonal() * tval;
    }
    return G;
}

}  // namespace detail

// warm (optional): raw coefficients of a previously concentrated basis at a
// nearby pose; used to initialize the Gauss-Newton iteration, which then
// typically converges in a handful of steps instead of a full continuation.
inline ControlBasis concentrate(const StageContext& ctx, const MatX& raw,
                                const BasisPotentials& pots,
                                const CbProjection& cb,
                                const ConcentrationData& cd,
                                const ControlParams& prm,
                                const MatX* warm = nullptr) {
    const PanelMesh& mesh = ctx.ws->mesh();
    const int nc = ctx.n_coords();
    const int M = cd.m();
    const int Kc = static_cast<int>(cb.null_basis.cols());
    require(Kc >= M, "concentrate: constrained basis smaller than M");

    // Constrained trace space: tval_c = tval * null_basis (P x Kc).  The
    // body traces of Sigma modes decay exponentially with mode frequency, so
    // the trace map is severely ill conditioned; optimize in a whitened
    // reduced space spanned by the top right-singular directions of the
    // body-trace matrix, each rescaled to unit trace norm.  Whitening is
    // essential: without it Levenberg damping freezes the weak directions
    // and the achievable residual saturates far above nu.
    const MatX tc0 = pots.tval * cb.null_basis;
    MatX tbody(mesh.size(), tc0.cols());
    int nbody = 0;
    for (int i = 0; i < mesh.size(); ++i)
        if (mesh.is_body_panel(i)) tbody.row(nbody++) = tc0.row(i);
    Eigen::JacobiSVD<MatX> tsvd(tbody.topRows(nbody), Eigen::ComputeFullV);
    int R = prm.reduced_rank > 0 ? prm.reduced_rank : 2 * M;
    R = std::min<int>({R, Kc, nbody});
    const double smax = tsvd.singularValues()[0];
    MatX basisW = cb.null_basis * tsvd.matrixV().leftCols(R);
    VecX wamp(R);  // coefficient amplitude cost of each whitened direction
    for (int j = 0; j < R; ++j) {
        const double s = std::max(tsvd.singularValues()[j], 1e-14 * smax);
        basisW.col(j) /= s;
        wamp[j] = 1.0 / s;
    }
    const MatX tc = pots.tval * basisW;
    std::vector<MatX> S(nc);
    for (int k = 0; k < nc; ++k) {
        VecX w = VecX::Zero(mesh.size());
        for (int i = 0; i < mesh.size(); ++i)
            if (mesh.is_body_panel(i))
                w[i] = ctx.kir.K(i, k) * mesh.panels[i].len;
        S[k] = tc.transpose() * w.asDiagonal() * tc;
    }
    const MatX e = concentration_targets(cd, ctx.q);

    // Initialization: for each target, a generalized eigenvector of the
    // locally-windowed trace energy; repeated targets take deeper modes.
    MatX B = MatX::Zero(R, R);
    for (int i = 0; i < mesh.size(); ++i)
        if (mesh.is_body_panel(i))
            B += mesh.panels[i].len * tc.row(i).transpose() * tc.row(i);
    B += 1e-10 * B.trace() / R * MatX::Identity(R, R);

    MatX C(R, M);
    std::map<std::string, int> seen;  // target key -> multiplicity so far
    for (int i = 0; i < M; ++i) {
        // Window around the transported points of target i (all bodies).
        VecX w = VecX::Zero(mesh.size());
        std::string key;
        for (int k = 0; k < cd.n_bodies; ++k) {
            const Vec2 x = rot2(body_angle(ctx.q, k)) * cd.pts[i][k] +
                           body_center(ctx.q, k);
            key += std::to_string(std::lround(1e7 * x.x())) + "," +
                   std::to_string(std::lround(1e7 * x.y())) + ";";
            double per = 0.0;
            for (int p = 0; p < mesh.size(); ++p)
                if (mesh.panels[p].comp == k && mesh.is_body_panel(p))
                    per += mesh.panels[p].len;
            const double sw = per / (3.0 * (3 * cd.n_bodies + 1));
            for (int p = 0; p < mesh.size(); ++p) {
                if (!mesh.is_body_panel(p) || mesh.panels[p].comp != k)
                    continue;
                const double dist = (mesh.panels[p].mid - x).norm();
                w[p] += std::exp(-0.5 * dist * dist / (sw * sw)) *
                        mesh.panels[p].len;
            }
        }
        MatX Aw = MatX::Zero(R, R);
        for (int p = 0; p < mesh.size(); ++p)
            if (w[p] > 0.0) Aw += w[p] * tc.row(p).transpose() * tc.row(p);
        Eigen::GeneralizedSelfAdjointEigenSolver<MatX> ges(Aw, B);
        const int depth = seen[key]++;
        VecX c = ges.eigenvectors().col(R - 1 - depth);
        // Scale so the diagonal Gram aligns with e_i in magnitude.
        double num = 0.0;
        for (int k = 0; k < nc; ++k) num += e(k, i) * c.dot(S[k] * c);
        const double den = e.col(i).squaredNorm();
        const double s2 = std::abs(num) / std::max(den, 1e-30);
        C.col(i) = c / std::sqrt(std::max(s2, 1e-30));
    }

    // Levenberg-damped Gauss-Newton on the stacked residual r_{ij,k} =
    // c_i^T S_k c_j - delta_ij e_{k,i} over all i <= j, plus an amplitude
    // penalty sum_j (wamp_j c_j)^2 charging the weak (high-amplitude)
    // directions.  The penalty weight is relaxed by continuation until the
    // residual clears 0.75 nu: this yields the smallest-amplitude basis
    // within the target, keeping the physical control g moderate.
    const int npair = M * (M + 1) / 2;
    auto residual = [&](const MatX& Cm) {
        VecX rres(npair * nc);
        int row = 0;
        for (int i = 0; i < M; ++i)
            for (int j = i; j < M; ++j)
                for (int k = 0; k < nc; ++k, ++row)
                    rres[row] = Cm.col(i).dot(S[k] * Cm.col(j)) -
                                (i == j ? e(k, i) : 0.0);
        return rres;
    };
    auto penalty = [&](const MatX& Cm) {
        double p = 0.0;
        for (int i = 0; i < M; ++i)
            p += (wamp.array() * Cm.col(i).array()).matrix().squaredNorm();
        return p;
    };
    if (warm) {
        // Express the warm raw coefficients in the whitened coordinates:
        // coef = basisW C  =>  C = diag(s) V_R^T null_basis^T coef.
        const MatX z = tsvd.matrixV().leftCols(R).transpose() *
                       (cb.null_basis.transpose() * (*warm));
        MatX Cw(R, M);
        for (int j = 0; j < R; ++j)
            Cw.row(j) =
                std::max(tsvd.singularValues()[j], 1e-14 * smax) * z.row(j);
        if (std::getenv("PFC_DEBUG_CONC"))
            std::fprintf(stderr, "[conc] warm %g cold %g\n",
                         residual(Cw).lpNorm<Eigen::Infinity>(),
                         residual(C).lpNorm<Eigen::Infinity>());
        if (residual(Cw).squaredNorm() < residual(C).squaredNorm()) C = Cw;
    }
    VecX rcur = residual(C);
    // Above ~1500 unknowns the dense Gauss-Newton Hessian solve becomes the
    // bottleneck (O((RM)^3) per iteration).  The Jacobian row for pair
    // (i,j,k) only touches column blocks i and j, through SC_k = S_k C, so
    // J x and J^T r cost O(M^2 nc R); compute the damped Gauss-Newton step
    // with Jacobi-preconditioned CG on the normal equations instead.
    const bool use_cg = R * M > 1500;
    std::vector<MatX> SC(nc);
    auto refresh_sc = [&]() {
        for (int k = 0; k < nc; ++k) SC[k] = S[k] * C;
    };
    // Dead-zone residual: the concentration condition only demands
    // |G_k(i,j)| <= nu off the diagonal, so off-diagonal rows enter the
    // least-squares objective through a soft-shrink that vanishes inside a
    // margin.  This matters for N >= 2: the numerically usable whitened
    // rank (~70 directions in double precision) is far below the count of
    // off-diagonal pairs, and forcing them all to zero floors the residual
    // near 0.7; letting the inactive rows drop out leaves the (few)
    // diagonal equalities hugely underdetermined and solvable.
    const double dz = 0.45 * prm.nu;
    auto shrink = [dz](double v) {
        return v > dz ? v - dz : (v < -dz ? v + dz : 0.0);
    };
    auto residual_dz = [&](const MatX& Cm) {
        VecX rres(npair * nc);
        int row = 0;
        for (int i = 0; i < M; ++i)
            for (int j = i; j < M; ++j)
                for (int k = 0; k < nc; ++k, ++row) {
                    const double g = Cm.col(i).dot(S[k] * Cm.col(j));
                    rres[row] = i == j ? g - e(k, i) : shrink(g);
                }
        return rres;
    };
    // J x stacked over rows (i<=j, k): SC_k(:,j).x(:,i) + SC_k(:,i).x(:,j),
    // masked to the active (nonzero dead-zone residual) rows.
    auto jmul = [&](const MatX& x, const VecX& act) -> VecX {
        VecX y(npair * nc);
        int row = 0;
        for (int i = 0; i < M; ++i)
            for (int j = i; j < M; ++j)
                for (int k = 0; k < nc; ++k, ++row)
                    y[row] = act[row] == 0.0
                                 ? 0.0
                                 : SC[k].col(j).dot(x.col(i)) +
                                       SC[k].col(i).dot(x.col(j));
        return y;
    };
    auto jtmul = [&](const VecX& y) -> MatX {
        MatX g = MatX::Zero(R, M);
        int row = 0;
        for (int i = 0; i < M; ++i)
            for (int j = i; j < M; ++j)
                for (int k = 0; k < nc; ++k, ++row) {
                    if (y[row] == 0.0) continue;
                    g.col(i) += y[row] * SC[k].col(j);
                    g.col(j) += y[row] * SC[k].col(i);
                }
        return g;
    };
    for (double lam_amp = 1e-10; lam_amp > 1e-22; lam_amp /= 30.0) {
        if (rcur.lpNorm<Eigen::Infinity>() <= 0.75 * prm.nu) break;
        if (use_cg) {
            double lm = 1e-6;
            int iters = 0;
            refresh_sc();
            VecX rz = residual_dz(C);
            for (int iter = 0; iter < prm.gn_max_iter; ++iter, ++iters) {
                // Active rows: diagonal equalities plus off-diagonal rows
                // outside the dead zone; frozen during the inner CG solve.
                VecX act(npair * nc);
                {
                    int row = 0;
                    for (int i = 0; i < M; ++i)
                        for (int j = i; j < M; ++j)
                            for (int k = 0; k < nc; ++k, ++row)
                                act[row] =
                                    (i == j || rz[row] != 0.0) ? 1.0 : 0.0;
                }
                // Damping diagonal and gradient of the penalized objective.
                MatX dampd(R, M), grad = jtmul(rz);
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < R; ++j) {
                        const double pw = lam_amp * wamp[j] * wamp[j];
                        dampd(j, i) = lm + pw;
                        grad(j, i) += pw * C(j, i);
                    }
                // Jacobi preconditioner: diag(J^T J) from the SC columns.
                MatX prec(R, M);
                {
                    double avg = 0.0;
                    for (int k = 0; k < nc; ++k) avg += SC[k].squaredNorm();
                    avg /= M;
                    for (int i = 0; i < M; ++i)
                        for (int j = 0; j < R; ++j) {
                            double d = 0.0;
                            for (int k = 0; k < nc; ++k)
                                d += SC[k].row(j).squaredNorm() +
                                     3.0 * SC[k](j, i) * SC[k](j, i);
                            prec(j, i) = d + dampd(j, i) + 1e-12 * avg;
                        }
                }
                // PCG on (J^T J + D) step = grad.
                MatX step = MatX::Zero(R, M);
                MatX res = grad;
                MatX z = res.cwiseQuotient(prec);
                MatX p = z;
                double rzs = (res.array() * z.array()).sum();
                const double tol2 =
                    1e-6 * (grad.array() * grad.array()).sum();
                for (int cg = 0; cg < 400; ++cg) {
                    if ((res.array() * res.array()).sum() <= tol2) break;
                    MatX Ap = jtmul(jmul(p, act)) + dampd.cwiseProduct(p);
                    const double pAp = (p.array() * Ap.array()).sum();
                    if (pAp <= 0.0) break;
                    const double a = rzs / pAp;
                    step += a * p;
                    res -= a * Ap;
                    z = res.cwiseQuotient(prec);
                    const double rz2 = (res.array() * z.array()).sum();
                    p = z + (rz2 / rzs) * p;
                    rzs = rz2;
                }
                const MatX Cnew = C - step;
                const VecX rznew = residual_dz(Cnew);
                const double obj_new =
                    rznew.squaredNorm() + lam_amp * penalty(Cnew);
                const double obj_cur =
                    rz.squaredNorm() + lam_amp * penalty(C);
                if (obj_new < obj_cur) {
                    C = Cnew;
                    rz = rznew;
                    rcur = residual(C);
                    refresh_sc();
                    lm = std::max(lm * 0.3, 1e-13);
                    if (rcur.lpNorm<Eigen::Infinity>() <= 0.75 * prm.nu) break;
                    if (obj_cur - obj_new < 1e-8 * obj_cur) break;
                } else {
                    lm *= 10.0;
                    if (lm > 1e8) break;
                }
            }
            if (std::getenv("PFC_DEBUG_CONC"))
                std::fprintf(stderr, "[conc] cg lam %g iters %d res %g\n",
                             lam_amp, iters, rcur.lpNorm<Eigen::Infinity>());
            if (rcur.lpNorm<Eigen::Infinity>() <= 0.75 * prm.nu) break;
            continue;
        }
        double lm = 1e-6;
        int iters = 0;
        for (int iter = 0; iter < prm.gn_max_iter; ++iter, ++iters) {
            // Jacobian w.r.t. vec(C), column-major blocks of size R.
            MatX J = MatX::Zero(npair * nc, R * M);
            int row = 0;
            for (int i = 0; i < M; ++i)
                for (int j = i; j < M; ++j)
                    for (int k = 0; k < nc; ++k, ++row) {
                        const VecX si = S[k] * C.col(i);
                        const VecX sj = S[k] * C.col(j);
                        J.block(row, R * i, 1, R) += sj.transpose();
                        J.block(row, R * j, 1, R) += si.transpose();
                    }
            MatX H = J.transpose() * J;
            VecX g = J.transpose() * rcur;
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < R; ++j) {
                    const double pw = lam_amp * wamp[j] * wamp[j];
                    H(R * i + j, R * i + j) += lm + pw;
                    g[R * i + j] += pw * C(j, i);
                }
            const VecX step = H.ldlt().solve(g);
            MatX Cnew = C;
            for (int i = 0; i < M; ++i) Cnew.col(i) -= step.segment(R * i, R);
            const VecX rnew = residual(Cnew);
            const double obj_new = rnew.squaredNorm() + lam_amp * penalty(Cnew);
            const double obj_cur = rcur.squaredNorm() + lam_amp * penalty(C);
            if (obj_new < obj_cur) {
                C = Cnew;
                rcur = rnew;
                lm = std::max(lm * 0.3, 1e-13);
                // Done: residual clears the target with margin.
                if (rcur.lpNorm<Eigen::Infinity>() <= 0.75 * prm.nu) break;
                // Stagnation: converged for this penalty weight.
                if (obj_cur - obj_new < 1e-8 * obj_cur) break;
            } else {
                lm *= 10.0;
                if (lm > 1e8) break;
            }
        }
        if (std::getenv("PFC_DEBUG_CONC"))
            std::fprintf(stderr, "[conc] lam %g iters %d res %g\n", lam_amp,
                         iters, rcur.lpNorm<Eigen::Infinity>());
        if (rcur.lpNorm<Eigen::Infinity>() <= 0.75 * prm.nu) break;
    }

    // Joint zero refinement (large problems): the nontrivial-zero Newton
    // needs T2(v) = X(v)^T G X(v) to actually vanish somewhere, which the
    // nu bound guarantees only when nu is small against the Caratheodory
    // radius.  When the usable rank pins the dead-zone floor near nu, the
    // zero may not exist; manufacture it by alternating a Levenberg fit of
    // v with Gauss-Newton steps on C that append the nc rows w_t T2_k(v)
    // (with T2_k = (C X)^T S_k (C X), a rank-one touch per column) to the
    // dead-zone system.
    if (use_cg) {
        refresh_sc();
        const double wt = 3.0;
        VecX v = VecX::Zero(nc);
        auto t2_of = [&](const MatX& Cm, const VecX& vv) -> VecX {
            const VecX mu = concentration_mu(cd, ctx.q, vv);
            VecX t(nc);
            if (mu.minCoeff() < 0.0) {
                t.setConstant(std::numeric_limits<double>::infinity());
                return t;
            }
            const VecX w = Cm * mu.cwiseSqrt();
            for (int k = 0; k < nc; ++k) t[k] = w.dot(S[k] * w);
            return t;
        };
        // Keep v inside a moderate ball: mu stays positive for every v by
        // construction, but along -e_l directions lambda_l -> 0 as |v|
        // grows, so unconstrained fitting escapes to a degenerate far-field
        // zero that is useless to the scaling solver.  |v| <= 1 keeps all
        // lambda_l within [sqrt(2)-1, sqrt(2)+1].
        const double vmax = 1.0;
        auto fit_v = [&]() {
            double lmv = 1e-8;
            VecX t = t2_of(C, v);
            for (int it = 0; it < 60 && t.norm() > 1e-14; ++it) {
                MatX Jv(nc, nc);
                const double h = 1e-6;
                for (int m2 = 0; m2 < nc; ++m2) {
                    VecX vp = v, vm = v;
                    vp[m2] += h;
                    vm[m2] -= h;
                    const VecX tp = t2_of(C, vp), tm = t2_of(C, vm);
                    if (!tp.allFinite() || !tm.allFinite()) {
                        Jv.col(m2).setZero();
                        continue;
                    }
                    Jv.col(m2) = (tp - tm) / (2.0 * h);
                }
                bool improved = false;
                for (int tr = 0; tr < 12; ++tr) {
                    MatX H2 = Jv.transpose() * Jv;
                    H2.diagonal().array() += lmv;
                    VecX vn = v - H2.ldlt().solve(Jv.transpose() * t);
                    if (vn.norm() > vmax) vn *= vmax / vn.norm();
                    const VecX tn = t2_of(C, vn);
                    if (tn.allFinite() && tn.norm() < t.norm()) {
                        v = vn;
                        t = tn;
                        lmv = std::max(lmv * 0.25, 1e-12);
                        improved = true;
                        break;
                    }
                    lmv *= 8.0;
                }
                if (!improved) break;
            }
            return t;
        };
        double lm = 1e-8;
        VecX rz = residual_dz(C);
        VecX t2 = fit_v();
        const double lam_amp = 1e-18;
        for (int outer = 0; outer < 40; ++outer) {
            if (t2.norm() < 1e-13 &&
                rcur.lpNorm<Eigen::Infinity>() <= prm.nu)
                break;
            VecX act(npair * nc);
            {
                int row = 0;
                for (int i = 0; i < M; ++i)
                    for (int j = i; j < M; ++j)
                        for (int k = 0; k < nc; ++k, ++row)
                            act[row] = (i == j || rz[row] != 0.0) ? 1.0 : 0.0;
            }
            const VecX X = concentration_mu(cd, ctx.q, v).cwiseSqrt();
            const VecX w = C * X;
            std::vector<VecX> uk(nc);
            for (int k = 0; k < nc; ++k) uk[k] = S[k] * w;
            // Extended operators: dead-zone rows plus wt * T2 rows, where
            // dT2_k/dC.col(a) = 2 X_a u_k.
            auto jmul2 = [&](const MatX& x) -> VecX {
                VecX y(npair * nc + nc);
                y.head(npair * nc) = jmul(x, act);
                const VecX xw = x * X;
                for (int k = 0; k < nc; ++k)
                    y[npair * nc + k] = wt * 2.0 * uk[k].dot(xw);
                return y;
            };
            auto jtmul2 = [&](const VecX& y) -> MatX {
                MatX g = jtmul(y.head(npair * nc));
                for (int k = 0; k < nc; ++k) {
                    const double yk = wt * 2.0 * y[npair * nc + k];
                    if (yk != 0.0) g += yk * uk[k] * X.transpose();
                }
                return g;
            };
            VecX rfull(npair * nc + nc);
            rfull.head(npair * nc) = rz;
            rfull.tail(nc) = wt * t2;
            MatX dampd(R, M), grad = jtmul2(rfull);
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < R; ++j) {
                    const double pw = lam_amp * wamp[j] * wamp[j];
                    dampd(j, i) = lm + pw;
                    grad(j, i) += pw * C(j, i);
                }
            MatX prec(R, M);
            {
                double avg = 0.0;
                for (int k = 0; k < nc; ++k) avg += SC[k].squaredNorm();
                avg /= M;
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < R; ++j) {
                        double d = 0.0;
                        for (int k = 0; k < nc; ++k)
                            d += SC[k].row(j).squaredNorm() +
                                 3.0 * SC[k](j, i) * SC[k](j, i) +
                                 4.0 * wt * wt * uk[k][j] * uk[k][j] * X[i] *
                                     X[i];
                        prec(j, i) = d + dampd(j, i) + 1e-12 * avg;
                    }
            }
            MatX step = MatX::Zero(R, M);
            MatX res = grad;
            MatX z = res.cwiseQuotient(prec);
            MatX p = z;
            double rzs = (res.array() * z.array()).sum();
            const double tol2 = 1e-8 * (grad.array() * grad.array()).sum();
            for (int cg = 0; cg < 400; ++cg) {
                if ((res.array() * res.array()).sum() <= tol2) break;
                MatX Ap = jtmul2(jmul2(p)) + dampd.cwiseProduct(p);
                const double pAp = (p.array() * Ap.array()).sum();
                if (pAp <= 0.0) break;
                const double a = rzs / pAp;
                step += a * p;
                res -= a * Ap;
                z = res.cwiseQuotient(prec);
                const double rz2 = (res.array() * z.array()).sum();
                p = z + (rz2 / rzs) * p;
                rzs = rz2;
            }
            const MatX Cnew = C - step;
            const VecX rznew = residual_dz(Cnew);
            const VecX t2new = t2_of(Cnew, v);
            const double obj_new = rznew.squaredNorm() +
                                   wt * wt * t2new.squaredNorm() +
                                   lam_amp * penalty(Cnew);
            const double obj_cur = rz.squaredNorm() +
                                   wt * wt * t2.squaredNorm() +
                                   lam_amp * penalty(C);
            const double inf_cap =
                std::max(prm.nu, rcur.lpNorm<Eigen::Infinity>());
            if (t2new.allFinite() && obj_new < obj_cur &&
                residual(Cnew).lpNorm<Eigen::Infinity>() <= inf_cap) {
                C = Cnew;
                rz = rznew;
                rcur = residual(C);
                refresh_sc();
                lm = std::max(lm * 0.3, 1e-13);
                t2 = fit_v();
            } else {
                lm *= 10.0;
                if (lm > 1e8) break;
            }
        }
        if (std::getenv("PFC_DEBUG_CONC"))
            std::fprintf(stderr, "[conc] zero-refine res %g |T2| %g |v| %g\n",
                         rcur.lpNorm<Eigen::Infinity>(), t2.norm(), v.norm());
    }

    ControlBasis out;
    out.coef = basisW * C;
    out.sval = raw * out.coef;
    detail::resolve_columns(ctx, out);
    out.G = detail::gram_slices(ctx, out.tval);
    double worst = 0.0;
    for (int i = 0; i < M; ++i)
        for (int j = i; j < M; ++j)
            for (int k = 0; k < nc; ++k)
                worst = std::max(worst, std::abs(out.G[k](i, j) -
                                                 (i == j ? e(k, i) : 0.0)));
    out.achieved_nu = worst;
    return out;
}

// ---------------------------------------------------------------------------
// Nontrivial zero (DefXBar): Newton on T2(v) = 2 Qp(sqrt(mu(q,v))) = 0.
// ---------------------------------------------------------------------------

inline VecX quadratic_eval(const std::vector<MatX>& G, const VecX& X) {
    VecX y(G.size());
    for (size_t k = 0; k < G.size(); ++k) y[k] = 0.5 * X.dot(G[k] * X);
    return y;
}

inline VecX nontrivial_zero(const ConcentrationData& cd,
                            const std::vector<MatX>& G, const VecX& q) {
    const int nc = static_cast<int>(G.size());
    auto T2 = [&](const VecX& v) -> VecX {
        const VecX X = concentration_mu(cd, q, v).cwiseSqrt();
        return 2.0 * quadratic_eval(G, X);
    };
    // Levenberg-damped least squares with deterministic restarts: plain
    // Newton with backtracking occasionally stalls in shallow local minima
    // when the Gram is at the loose end of the concentration target.
    Rng rng(17);
    VecX vbest = VecX::Zero(nc);
    double fbest = std::numeric_limits<double>::max();
    for (int trial = 0; trial < 6; ++trial) {
        VecX v = trial == 0 ? VecX::Zero(nc)
                            : VecX(0.02 * cd.r * rng.normal_vec(nc));
        VecX f = T2(v);
        double lm = 1e-10;
        for (int iter = 0; iter < 80 && f.norm() > 1e-14; ++iter) {
            MatX Jm(nc, nc);
            const double h = 1e-6;
            for (int m = 0; m < nc; ++m) {
                VecX vp = v, vm = v;
                vp[m] += h;
                vm[m] -= h;
                Jm.col(m) = (T2(vp) - T2(vm)) / (2.0 * h);
            }
            const MatX H =
                Jm.transpose() * Jm + lm * MatX::Identity(nc, nc);
            const VecX dv = H.ldlt().solve(Jm.transpose() * f);
            const VecX fn = T2(v - dv);
            if (fn.norm() < f.norm()) {
                v -= dv;
                f = fn;
                lm = std::max(lm * 0.25, 1e-12);
            } else {
                lm *= 10.0;
                if (lm > 1e12) break;
            }
        }
        if (f.norm() < fbest) {
            fbest = f.norm();
            vbest = v;
        }
        if (fbest < 1e-13) break;
    }
    require(fbest < 1e-10, "nontrivial_zero: Newton did not converge");
    VecX X = concentration_mu(cd, q, vbest).cwiseSqrt();
    return X / X.norm();
}

// ---------------------------------------------------------------------------
// Corrected right inverse of DQ(X_bar): the linear part of the paper's
// A_q(v)_i = mu_i(q,v)/X_bar_i, fixed up by a direct solve of Id + E.
// ---------------------------------------------------------------------------

inline MatX right_inverse(const ConcentrationData& cd,
                          const std::vector<MatX>& G, const VecX& Xbar,
                          const VecX& q) {
    const int nc = static_cast<int>(G.size());
    const int M = cd.m();
    const int nl = 3 * cd.n_bodies + 1;
    // D = DQ(Xbar): D(k, j) = Xbar^T G_k e_j.
    MatX D(nc, M);
    for (int k = 0; k < nc; ++k) D.row(k) = (G[k] * Xbar).transpose();
    // Linear part of A: A(v)_i = lam_i (Rrel^{-1} v)_{l(i)} / (r Xbar_i),
    // zero on the last group (whose lambda_l is the pure sqrt term).
    MatX A = MatX::Zero(M, nc);
    for (int i = 0; i < M; ++i) {
        const int l = i / nl;
        if (l >= nc) continue;
        A(i, l) = cd.lam[i] / (cd.r * Xbar[i]);
    }
    // Map v -> Rrel^{-1} v as a matrix (block rotations).
    MatX Rinv = MatX::Identity(nc, nc);
    for (int k = 0; k < cd.n_bodies; ++k) {
        const Eigen::Matrix2d Rr =
            rot2(body_angle(q, k) - body_angle(cd.q0, k));
        Rinv.block<2, 2>(3 * k, 3 * k) = Rr.transpose();
    }
    A = A * Rinv;
    const MatX DA = D * A;  // Id + E
    require((DA - MatX::Identity(nc, nc)).norm() < 1.0,
            "right_inverse: ||E|| >= 1 (concentration too loose)");
    const MatX Phi = A * DA.partialPivLu().solve(MatX::Identity(nc, nc));
    require((D * Phi - MatX::Identity(nc, nc)).norm() < 1e-8,
            "right_inverse: correction failed");
    return Phi;
}

// ---------------------------------------------------------------------------
// Scaling solver (Prop lem:geoalg): solve Qp(X) + L(X) = y with
// Qp(X) = 1/2 X^T G X, L given as a matrix, using the epsilon scaling and
// the contraction iteration of Lemma repl.
// ---------------------------------------------------------------------------

struct ScalingInfo {
    double eps = 0.0;
    int iterations = 0;
    double residual = 0.0;
};

inline VecX scaling_solve(const std::vector<MatX>& G, const MatX& Lmat,
                          const VecX& Xbar, const MatX& Phi, const VecX& y,
                          const ControlParams& prm, ScalingInfo* info = nullptr) {
    const int nc = static_cast<int>(G.size());
    // Contraction modulus of Df: Df(x1)-Df(x2) = (x1-x2)^T Phi^T G_k Phi.
    double clip = 0.0;
    {
        double s = 0.0;
        for (int k = 0; k < nc; ++k) {
            const MatX H = Phi.transpose() * G[k] * Phi;
            s += H.squaredNorm();
        }
        clip = std::sqrt(s);
    }
    // Start eps below the scale where the linear term eps*Lmat would swamp
    // DQ(Xbar)Phi = Id; the basis amplitudes make ||Lmat|| potentially huge.
    double eps0 = std::min(
        prm.eps0, 0.5 / std::max((Lmat * Phi).operatorNorm(), 1e-30));
    for (int attempt = 0; attempt <= 60; ++attempt, eps0 *= 0.5) {
        // Estimate the solvable ball radius at eps0, then pick eps(y).
        auto radius = [&](double eps) {
            const MatX Cm = [&] {
                MatX D(nc, (int)Xbar.size());
                for (int k = 0; k < nc; ++k)
                    D.row(k) = (G[k] * Xbar).transpose();
                return MatX((D + eps * Lmat) * Phi);
            }();
            Eigen::JacobiSVD<MatX> svd(Cm);
            const double smin = svd.singularValues().minCoeff();
            if (smin <= 0.0) return std::pair<double, MatX>(0.0, Cm);
            const double Mc = 1.0 / smin;
            const double rx = 1.0 / (2.0 * Mc * std::max(clip, 1e-30));
            return std::pair<double, MatX>(rx / (2.0 * Mc), Cm);
        };
        double eps = eps0;
        double rhat = radius(eps).first;
        if (rhat <= 0.0) continue;
        // eps(y) per the paper, then refresh rhat at the chosen eps.
        for (int pass = 0; pass < 3; ++pass) {
            const double eps_y = std::min(
                eps0, std::sqrt(rhat) / std::pow(1.0 + y.squaredNorm(), 0.25));
            eps = eps_y;
            rhat = radius(eps).first;
            if (rhat <= 0.0) break;
        }
        if (rhat <= 0.0) continue;
        const auto [rh, Cm] = radius(eps);
        const Eigen::PartialPivLU<MatX> lu(Cm);
        auto f = [&](const VecX& x) {
            const VecX X = Xbar + Phi * x;
            return VecX(quadratic_eval(G, X) + eps * (Lmat * X));
        };
        const VecX target = eps * eps * y;
        VecX x = VecX::Zero(nc);
        const double tol_in = prm.tol * (1.0 + y.norm()) * eps * eps;
        bool ok = false;
        int it = 0;
        VecX resid = target - f(x);
        for (; it < 400; ++it) {
            if (resid.norm() <= tol_in) {
                ok = true;
                break;
            }
            x += lu.solve(resid);
            const VecX rnew = target - f(x);
            if (rnew.norm() > 1e6 * (1.0 + target.norm())) break;  // diverged
            resid = rnew;
        }
        if (!ok) continue;
        if (info) {
            info->eps = eps;
            info->iterations = it;
            info->residual = resid.norm() / (eps * eps);
        }
        return (Xbar + Phi * x) / eps;
    }
    throw std::runtime_error("scaling_solve: contraction failed at all eps0");
}

// ---------------------------------------------------------------------------
// FeedbackLaw: pose-keyed cache of synthesis data and the control map.
// ---------------------------------------------------------------------------

inline void require_spd(const MatX& A, const char* name) {
    require((A - A.transpose()).norm() < 1e-12 * (1.0 + A.norm()),
            std::string(name) + " must be symmetric");
    Eigen::LDLT<MatX> ldlt(A);
    require(ldlt.isPositive(), std::string(name) + " must be SPD");
}

struct FeedbackInfo {
    double residual = 0.0;   // ||Qm(g) + Lm(g) - F||
    VecX qres;               // the residual vector itself (force units)
    double gnorm = 0.0;      // L2 norm of g on Sigma
    double eps = 0.0;
    double achieved_nu = 0.0;
    bool cache_hit = false;
};

class FeedbackLaw {
  public:
    explicit FeedbackLaw(ControlParams prm = {}) : prm_(prm) {}

    const ControlParams& params() const { return prm_; }

    // Control g (values on Sigma panels) with
    //   assemble_Q(g) + assemble_L(g) = Mtot qddot_target + Ftilde.
    VecX feedback(const StageContext& ctx, const VecX& qddot_target,
                  FeedbackInfo* info = nullptr) const {
        const PoseData& pd = pose_data(ctx, info);
        const int M = pd.cdata.m();
        const int nc = ctx.n_coords();
        // Potentials of the basis at the *current* context (bval/tval are
        // pose-exact because pose_data re-solves on cache reuse).
        // Lm(X)_k = assemble_L(sum X_i g_i): linear -> columns per basis fn.
        MatX Lm(nc, M);
        for (int i = 0; i < M; ++i) {
            HarmonicField a;
            a.mesh = ctx.ws->mesh_ptr();
            a.sigma = pd.basis.sig.col(i);
            a.bvals = pd.basis.bval.col(i);
            a.tderiv = pd.basis.tval.col(i);
            a.nderiv = pd.basis.nval.col(i);
            Lm.col(i) = assemble_L(ctx, a);
        }
        const VecX F = assemble_F(ctx, qddot_target);
        // Solver-side equation: Qp(X) + (-Lm)(X) = -F.
        ScalingInfo sinfo;
        const VecX X = scaling_solve(pd.basis.G, MatX(-Lm), pd.Xbar, pd.Phi,
                                     VecX(-F), prm_, &sinfo);
        const VecX g = pd.basis.sval * X;
        if (info) {
            // Report the dynamics-side residual of (pasproto).
            const VecX qres =
                -quadratic_eval(pd.basis.G, X) + Lm * X - F;
            info->qres = qres;
            info->residual = qres.norm();
            info->eps = sinfo.eps;
            info->achieved_nu = pd.basis.achieved_nu;
            double g2 = 0.0;
            const auto& sp = ctx.ws->mesh().sigma_panels;
            for (size_t j = 0; j < sp.size(); ++j)
                g2 += g[j] * g[j] * ctx.ws->mesh().panels[sp[j]].len;
            info->gnorm = std::sqrt(g2);
        }
        return g;
    }

    // PD-stabilized variant (mixe-stab).
    VecX pd_feedback(const StageContext& ctx, const VecX& q_ref,
                     const VecX& qdot_ref, const VecX& qddot_ref,
                     const MatX& KP, const MatX& KD,
                     FeedbackInfo* info = nullptr) const {
        require_spd(KP, "K_P");
        require_spd(KD, "K_D");
        const VecX qdd = qddot_ref + KP * (q_ref - ctx.q) +
                         KD * (qdot_ref - ctx.qdot);
        return feedback(ctx, qdd, info);
    }

    struct PoseData {
        VecX q0;       // pose of the current evaluation state
        VecX q_synth;  // pose where the basis was synthesized
        MatX raw;
        MatX coef0;    // synthesis coefficients (refresh projection source)
        ConcentrationData cdata;
        ControlBasis basis;
        VecX Xbar;
        MatX Phi;
    };

    // Exposed for tests: synthesis at the context's pose (no cache).
    PoseData synthesize(const StageContext& ctx,
                        const MatX* warm = nullptr) const {
        PoseData pd;
        pd.q0 = ctx.q;
        pd.q_synth = ctx.q;
        const int M = (ctx.n_coords() + 1) * (ctx.n_coords() + 1);
        const int K = prm_.basis_size > 0 ? prm_.basis_size : 4 * M;
        pd.raw = build_raw_basis(ctx.ws->mesh(), K);
        const BasisPotentials pots = basis_potentials(ctx, pd.raw);
        const CbProjection cb = project_cb(ctx, pots);
        pd.cdata = caratheodory(ctx);
        // A loose (but in-target) Gram occasionally leaves the downstream
        // Newton without a zero; tighten the concentration target and retry.
        ControlParams cp = prm_;
        for (int attempt = 0;; ++attempt) {
            pd.basis = concentrate(ctx, pd.raw, pots, cb, pd.cdata, cp, warm);
            if (warm && pd.basis.achieved_nu > cp.nu)  // bad warm start
                pd.basis = concentrate(ctx, pd.raw, pots, cb, pd.cdata, cp);
            if (pd.basis.achieved_nu > prm_.nu)
                throw std::runtime_error(
                    "concentrate: target nu unreachable, best residual " +
                    std::to_string(pd.basis.achieved_nu));
            try {
                pd.Xbar = nontrivial_zero(pd.cdata, pd.basis.G, ctx.q);
                pd.Phi = right_inverse(pd.cdata, pd.basis.G, pd.Xbar, ctx.q);
                break;
            } catch (const std::exception&) {
                if (attempt >= 2) throw;
                cp.nu *= 0.5;
            }
        }
        pd.coef0 = pd.basis.coef;
        return pd;
    }

  private:
    static VecX scatter_sigma(const StageContext& ctx, const VecX& g) {
        const PanelMesh& mesh = ctx.ws->mesh();
        VecX full = VecX::Zero(mesh.size());
        const auto& sp = mesh.sigma_panels;
        for (size_t j = 0; j < sp.size(); ++j) full[sp[j]] = g[j];
        return full;
    }

    // Cache with nearest-pose reuse: coefficients are kept, every
    // pose-dependent quantity is recomputed exactly at the current pose.
    const PoseData& pose_data(const StageContext& ctx,
                              FeedbackInfo* info) const {
        for (size_t e = 0; e < cache_.size(); ++e) {
            auto& entry = cache_[e];
            if ((entry->q_synth - ctx.q).norm() > prm_.cache_threshold) continue;
            if ((entry->q0 - ctx.q).norm() > 0.0) {
                try {
                    refresh(*entry, ctx);
                } catch (const std::exception& ex) {
                    // Projection quality collapsed: drop and resynthesize.
                    if (std::getenv("PFC_DEBUG_SYNTH"))
                        std::fprintf(stderr, "[cache] refresh failed: %s\n",
                                     ex.what());
                    cache_.erase(cache_.begin() + e);
                    break;
                }
            }
            if (info) info->cache_hit = true;
            return *entry;
        }
        // Warm-start from the nearest cached basis, if any.
        const MatX* warm = nullptr;
        double best = std::numeric_limits<double>::max();
        for (const auto& entry : cache_) {
            const double d = (entry->q_synth - ctx.q).norm();
            if (d < best) {
                best = d;
                warm = &entry->coef0;
            }
        }
        if (std::getenv("PFC_DEBUG_SYNTH"))
            std::fprintf(stderr, "[cache] synthesize at |q|drift %g\n", best);
        auto pd = std::make_shared<PoseData>(synthesize(ctx, warm));
        cache_.push_back(pd);
        if (cache_.size() > 64) cache_.erase(cache_.begin());
        if (info) info->cache_hit = false;
        return *cache_.back();
    }

    // Re-evaluate the cached coefficients at a nearby pose: re-solve the
    // basis potentials, re-project onto C_b(q), rebuild Gram, Xbar, Phi.
    void refresh(PoseData& pd, const StageContext& ctx) const {
        const BasisPotentials pots = basis_potentials(ctx, pd.raw);
        const CbProjection cb = project_cb(ctx, pots);
        // Orthogonal projection of the synthesis coefficients onto the new
        // nullspace (always from coef0 so errors do not compound).
        const MatX C = cb.null_basis.transpose() * pd.coef0;
        pd.basis.coef = cb.null_basis * C;
        pd.basis.sval = pd.raw * pd.basis.coef;
        detail::resolve_columns(ctx, pd.basis);
        pd.basis.G = detail::gram_slices(ctx, pd.basis.tval);
        const MatX e = concentration_targets(pd.cdata, ctx.q);
        double worst = 0.0;
        const int M = pd.cdata.m();
        for (int i = 0; i < M; ++i)
            for (int j = i; j < M; ++j)
                for (int k = 0; k < ctx.n_coords(); ++k)
                    worst = std::max(
                        worst, std::abs(pd.basis.G[k](i, j) -
                                        (i == j ? e(k, i) : 0.0)));
        pd.basis.achieved_nu = worst;
        pd.Xbar = nontrivial_zero(pd.cdata, pd.basis.G, ctx.q);
        pd.Phi = right_inverse(pd.cdata, pd.basis.G, pd.Xbar, ctx.q);
        pd.q0 = ctx.q;
    }

    ControlParams prm_;
    mutable std::vector<std::shared_ptr<PoseData>> cache_;
};

}  // namespace pfc
