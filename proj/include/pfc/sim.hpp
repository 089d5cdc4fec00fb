// Closed-loop and uncontrolled time integration: C^2 spline targets, RK4 on
// the coupled body/vortex state with per-stage control evaluation, and the
// tracking report (CSV columns in the fixed order
//   t, err_pos, err_vel, ctrl_residual, ctrl_norm, gamma_1..gamma_N,
//   energy, lipschitz_diag, particles).
#pragma once

#include "pfc/control.hpp"
#include "pfc/vorticity.hpp"

#include <ostream>
#include <sstream>

namespace pfc {

// ---------------------------------------------------------------------------
// Target trajectory: clamped cubic splines through waypoints (C^2 on [0, T])
// ---------------------------------------------------------------------------

class TargetTrajectory {
  public:
    TargetTrajectory() = default;

    // times strictly increasing starting at 0; one pose per knot.  Endpoint
    // velocities default to zero (bodies start and end at rest).
    static TargetTrajectory from_waypoints(const std::vector<double>& times,
                                           const std::vector<VecX>& poses,
                                           const VecX& gamma,
                                           const VecX* v_begin = nullptr,
                                           const VecX* v_end = nullptr) {
        const int n = static_cast<int>(times.size());
        require(n >= 1, "target: need at least one waypoint");
        require(poses.size() == times.size(), "target: times/poses mismatch");
        for (int i = 1; i < n; ++i)
            require(times[i] > times[i - 1], "target: times must be increasing");
        const int nc = static_cast<int>(poses[0].size());
        for (const VecX& p : poses)
            require(static_cast<int>(p.size()) == nc,
                    "target: waypoint dimension mismatch");

        TargetTrajectory tt;
        tt.t_ = times;
        tt.y_ = poses;
        tt.gamma_ = gamma;
        tt.m_.assign(n, VecX::Zero(nc));
        if (n == 1) return tt;

        const VecX v0 = v_begin ? *v_begin : VecX::Zero(nc);
        const VecX vn = v_end ? *v_end : VecX::Zero(nc);
        // Second derivatives M_i from the clamped tridiagonal system; the
        // matrix is shared across coordinates, so solve with a matrix RHS.
        MatX rhs(n, nc);
        VecX dl(n), dd(n), du(n);  // sub/main/super diagonals
        const auto h = [&](int i) { return t_safe(tt.t_, i + 1) - tt.t_[i]; };
        dd[0] = 2.0 * h(0);
        du[0] = h(0);
        rhs.row(0) = (6.0 * ((tt.y_[1] - tt.y_[0]) / h(0) - v0)).transpose();
        for (int i = 1; i < n - 1; ++i) {
            dl[i] = h(i - 1);
            dd[i] = 2.0 * (h(i - 1) + h(i));
            du[i] = h(i);
            rhs.row(i) = (6.0 * ((tt.y_[i + 1] - tt.y_[i]) / h(i) -
                                 (tt.y_[i] - tt.y_[i - 1]) / h(i - 1)))
                             .transpose();
        }
        dl[n - 1] = h(n - 2);
        dd[n - 1] = 2.0 * h(n - 2);
        rhs.row(n - 1) =
            (6.0 * (vn - (tt.y_[n - 1] - tt.y_[n - 2]) / h(n - 2))).transpose();
        // Thomas algorithm.
        for (int i = 1; i < n; ++i) {
            const double w = dl[i] / dd[i - 1];
            dd[i] -= w * du[i - 1];
            rhs.row(i) -= w * rhs.row(i - 1);
        }
        tt.m_[n - 1] = rhs.row(n - 1).transpose() / dd[n - 1];
        for (int i = n - 2; i >= 0; --i)
            tt.m_[i] =
                (rhs.row(i).transpose() - du[i] * tt.m_[i + 1]) / dd[i];
        return tt;
    }

    void eval(double t, VecX* q, VecX* qd = nullptr, VecX* qdd = nullptr) const {
        const int n = static_cast<int>(t_.size());
        const int nc = static_cast<int>(y_[0].size());
        if (n == 1) {
            if (q) *q = y_[0];
            if (qd) *qd = VecX::Zero(nc);
            if (qdd) *qdd = VecX::Zero(nc);
            return;
        }
        const double tc = std::clamp(t, t_.front(), t_.back());
        int i = static_cast<int>(std::upper_bound(t_.begin(), t_.end(), tc) -
                                 t_.begin()) -
                1;
        i = std::clamp(i, 0, n - 2);
        const double h = t_[i + 1] - t_[i];
        const double s = tc - t_[i];
        const VecX b =
            (y_[i + 1] - y_[i]) / h - h * (2.0 * m_[i] + m_[i + 1]) / 6.0;
        const VecX dm = (m_[i + 1] - m_[i]) / h;
        if (q) *q = y_[i] + s * b + 0.5 * s * s * m_[i] + (s * s * s / 6.0) * dm;
        if (qd) *qd = b + s * m_[i] + 0.5 * s * s * dm;
        if (qdd) *qdd = m_[i] + s * dm;
    }

    double horizon() const { return t_.size() > 1 ? t_.back() - t_.front() : 0.0; }
    double t_begin() const { return t_.front(); }
    const VecX& gamma() const { return gamma_; }
    int n_coords() const { return static_cast<int>(y_[0].size()); }

  private:
    static double t_safe(const std::vector<double>& t, int i) {
        return t[std::min<size_t>(i, t.size() - 1)];
    }
    std::vector<double> t_;
    std::vector<VecX> y_;
    std::vector<VecX> m_;  // knot second derivatives
    VecX gamma_;
};

// ---------------------------------------------------------------------------
// Scenario, state, report
// ---------------------------------------------------------------------------

enum class ControlMode { kExact, kPd };

struct SimScenario {
    DomainSpec domain;
    std::vector<BodyShape> shapes;
    VecX q0, qdot0;
    TargetTrajectory target;
    VortexCloud cloud0;
    MeshParams mesh;
    ControlParams control;
    double dt = 0.0;     // 0 -> horizon / 2000
    double delta = 0.05;  // collision margin (abort below)
    MatX KP, KD;          // pd-mode gains (SPD)
    std::uint64_t seed = 1;
};

struct SimState {
    double t = 0.0;
    VecX q, qdot;
    VortexCloud cloud;
};

struct ReportRow {
    double t = 0.0;
    double err_pos = 0.0, err_vel = 0.0;
    double ctrl_residual = 0.0, ctrl_norm = 0.0;
    VecX gamma_meas;  // measured circulations, one per body
    double energy = 0.0, lipschitz_diag = 0.0;
    int particles = 0;
};

struct TrackingReport {
    std::vector<ReportRow> rows;
    double max_err_pos = 0.0, max_err_vel = 0.0;
    double max_ctrl_residual = 0.0;
    double fitted_decay = 0.0;  // PD runs: least-squares rate of log err_pos
    bool aborted = false;
    int abort_step = -1;
    std::string abort_reason;
};

// Per accepted step, for force/control dumps.
struct StepRecord {
    double t = 0.0;
    VecX g;        // control trace on Sigma (empty when uncontrolled)
    VecX qdd_cmd;  // commanded acceleration
    FeedbackInfo info;
};
using StepObserver = std::function<void(const StepRecord&)>;

// ---------------------------------------------------------------------------
// Stage evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline StageContext sim_context(const SimScenario& sc, const VecX& q,
                                const VecX& qdot, const VortexCloud& cloud) {
    StageOptions so;
    so.fd_mode = ShapeFdMode::kDirectional;
    MeshParams prm = sc.mesh;
    prm.delta = 0.0;  // the margin is checked per accepted step, not per stage
    return make_stage_context(sc.domain, sc.shapes, q, qdot, sc.target.gamma(),
                              cloud, prm, so);
}

// Measured circulation oint u . tau per body (Kelvin diagnostic).
inline VecX measured_circulations(const StageContext& ctx,
                                  const HarmonicField* alpha) {
    const PanelMesh& mesh = ctx.ws->mesh();
    VecX out = VecX::Zero(mesh.n_bodies);
    for (int i = 0; i < mesh.size(); ++i) {
        if (!mesh.is_body_panel(i)) continue;
        double ut = ctx.u_tau[i];
        if (alpha) ut += alpha->tderiv[i];
        out[mesh.panels[i].comp] += ut * ctx.len[i];
    }
    return out;
}

// Fixed probe pairs inside the fluid at the current pose (deterministic).
inline double stage_lipschitz(const SimScenario& sc, const StageContext& ctx,
                              const VelocityField& u) {
    Rng rng(sc.seed ^ 0x9e3779b97f4a7c15ull);
    const auto placed = place_bodies(sc.shapes, ctx.q);
    double lo = std::numeric_limits<double>::max(), hi = -lo;
    for (const Vec2& v : sc.domain.outer) {
        lo = std::min({lo, v.x(), v.y()});
        hi = std::max({hi, v.x(), v.y()});
    }
    std::vector<Vec2> pts;
    for (int tries = 0; tries < 4000 && pts.size() < 24; ++tries) {
        const Vec2 x(rng.uniform(lo, hi), rng.uniform(lo, hi));
        if (!point_in_polygon(x, sc.domain.outer)) continue;
        bool ok = true;
        for (const auto& body : placed)
            if (point_in_polygon(x, body)) ok = false;
        if (ok) pts.push_back(x);
    }
    std::vector<std::pair<Vec2, Vec2>> pairs;
    for (size_t i = 0; i + 1 < pts.size(); i += 2)
        pairs.emplace_back(pts[i], pts[i + 1]);
    return lipschitz_diagnostic([&](const Vec2& x) { return u(x); }, pairs);
}

struct StageEval {
    VecX qdd;
    std::vector<Vec2> uvel;  // particle velocities
    VecX g;                  // empty when uncontrolled
    FeedbackInfo info;
};

// One derivative evaluation of the coupled system.  law == nullptr means
// uncontrolled (g = 0).  When row != nullptr the step-start diagnostics are
// filled in (energy, circulations, Lipschitz, particle count).
inline StageEval eval_stage(const SimScenario& sc, double t, const VecX& q,
                            const VecX& qdot, const VortexCloud& cloud,
                            const FeedbackLaw* law, ControlMode mode,
                            ReportRow* row) {
    const StageContext ctx = sim_context(sc, q, qdot, cloud);
    StageEval ev;
    HarmonicField alpha;
    const HarmonicField* ap = nullptr;
    if (law) {
        VecX qr, qdr, qddr;
        sc.target.eval(t, &qr, &qdr, &qddr);
        VecX qdd_cmd = qddr;
        if (mode == ControlMode::kPd)
            qdd_cmd += sc.KP * (qr - q) + sc.KD * (qdr - qdot);
        ev.g = law->feedback(ctx, qdd_cmd, &ev.info);
        alpha = control_potential(ctx, ev.g);
        ap = &alpha;
        // Exact-mode identity: Q[g]+L[g]-Ftilde = Mtot qdd_cmd + qres, so the
        // realized acceleration is the command plus Mtot^{-1} of the residual.
        ev.qdd = qdd_cmd + ctx.mass.Mtot.ldlt().solve(ev.info.qres);
    } else {
        ev.qdd = uncontrolled_acceleration(ctx);
    }
    if (cloud.size() > 0 || row) {
        const VelocityField u = stage_velocity(ctx, ap);
        ev.uvel.resize(cloud.size());
        for (int p = 0; p < cloud.size(); ++p) ev.uvel[p] = u(cloud.pos[p]);
        if (row) {
            row->t = t;
            row->ctrl_residual = law ? ev.info.residual : 0.0;
            row->ctrl_norm = law ? ev.g.norm() : 0.0;
            row->gamma_meas = measured_circulations(ctx, ap);
            row->energy = 0.5 * qdot.dot(ctx.mass.Mtot * qdot);
            row->lipschitz_diag = stage_lipschitz(sc, ctx, u);
            row->particles = cloud.size();
        }
    }
    return ev;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

namespace detail {

// Classical RK4 on the combined (q, q', particle positions) state; the
// control (or the control-free force) is re-evaluated at every stage.
inline SimState rk4_step(const SimScenario& sc, const SimState& s, double dt,
                         const FeedbackLaw* law, ControlMode mode,
                         ReportRow* row, StepRecord* rec) {
    const int np = s.cloud.size();
    const auto at = [&](double h, const VecX& q, const VecX& qd,
                        const std::vector<Vec2>& pos, ReportRow* rw) {
        VortexCloud c = s.cloud;
        c.pos = pos;
        return eval_stage(sc, s.t + h, q, qd, c, law, mode, rw);
    };
    const auto advp = [&](const std::vector<Vec2>& u, double h) {
        std::vector<Vec2> p(np);
        for (int i = 0; i < np; ++i) p[i] = s.cloud.pos[i] + h * u[i];
        return p;
    };

    const StageEval k1 = at(0.0, s.q, s.qdot, s.cloud.pos, row);
    if (rec) {
        rec->t = s.t;
        rec->g = k1.g;
        rec->info = k1.info;
    }
    const double h2 = 0.5 * dt;
    const StageEval k2 = at(h2, s.q + h2 * s.qdot, s.qdot + h2 * k1.qdd,
                            advp(k1.uvel, h2), nullptr);
    const StageEval k3 =
        at(h2, s.q + h2 * (s.qdot + h2 * k1.qdd), s.qdot + h2 * k2.qdd,
           advp(k2.uvel, h2), nullptr);
    const StageEval k4 =
        at(dt, s.q + dt * (s.qdot + h2 * k2.qdd), s.qdot + dt * k3.qdd,
           advp(k3.uvel, dt), nullptr);

    SimState out = s;
    out.t = s.t + dt;
    // dq/dt = q' evaluated at the stage states.
    const VecX qd1 = s.qdot, qd2 = s.qdot + h2 * k1.qdd,
               qd3 = s.qdot + h2 * k2.qdd, qd4 = s.qdot + dt * k3.qdd;
    out.q = s.q + (dt / 6.0) * (qd1 + 2.0 * qd2 + 2.0 * qd3 + qd4);
    out.qdot =
        s.qdot + (dt / 6.0) * (k1.qdd + 2.0 * k2.qdd + 2.0 * k3.qdd + k4.qdd);
    for (int i = 0; i < np; ++i)
        out.cloud.pos[i] += (dt / 6.0) * (k1.uvel[i] + 2.0 * k2.uvel[i] +
                                          2.0 * k3.uvel[i] + k4.uvel[i]);
    return out;
}

inline void post_step(const SimScenario& sc, SimState& s) {
    s.cloud = enforce_boundary(s.cloud, sc.domain, place_bodies(sc.shapes, s.q));
    require(min_separation(sc.domain, sc.shapes, s.q) >= sc.delta,
            "collision margin breached");
}

}  // namespace detail

// One uncontrolled RK4 step (g = 0): Mtot q'' = -Ftilde, cloud advected with
// the control-free field.  Throws when the collision margin is breached.
inline SimState uncontrolled_step(const SimScenario& sc, const SimState& s,
                                  double dt, ReportRow* row = nullptr) {
    SimState out = detail::rk4_step(sc, s, dt, nullptr, ControlMode::kExact,
                                    row, nullptr);
    detail::post_step(sc, out);
    return out;
}

// One closed-loop RK4 step with per-stage control.  Control synthesis failure
// rejects the step and retries with dt/2, at most 4 halvings, then rethrows.
inline SimState closed_loop_step(const SimScenario& sc, const SimState& s,
                                 const FeedbackLaw& law, ControlMode mode,
                                 double dt, ReportRow* row = nullptr,
                                 StepRecord* rec = nullptr, int depth = 0) {
    try {
        SimState out = detail::rk4_step(sc, s, dt, &law, mode, row, rec);
        detail::post_step(sc, out);
        return out;
    } catch (const std::runtime_error& e) {
        if (depth >= 4 ||
            std::string(e.what()).find("collision") != std::string::npos)
            throw;
        const SimState mid =
            closed_loop_step(sc, s, law, mode, 0.5 * dt, row, rec, depth + 1);
        return closed_loop_step(sc, mid, law, mode, 0.5 * dt, nullptr, nullptr,
                                depth + 1);
    }
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

// Least-squares slope of log(err_pos) over t in [t0, t1]; returns the decay
// rate lambda (err ~ e^{-lambda t} gives lambda > 0).
inline double fit_decay_rate(const TrackingReport& rep, double t0, double t1) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (const ReportRow& r : rep.rows) {
        if (r.t < t0 || r.t > t1 || r.err_pos <= 0.0) continue;
        const double y = std::log(r.err_pos);
        sx += r.t;
        sy += y;
        sxx += r.t * r.t;
        sxy += r.t * y;
        ++n;
    }
    if (n < 2) return 0.0;
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) return 0.0;
    return -(n * sxy - sx * sy) / denom;
}

inline void finish_report(TrackingReport& rep, ControlMode mode) {
    for (const ReportRow& r : rep.rows) {
        rep.max_err_pos = std::max(rep.max_err_pos, r.err_pos);
        rep.max_err_vel = std::max(rep.max_err_vel, r.err_vel);
        rep.max_ctrl_residual = std::max(rep.max_ctrl_residual, r.ctrl_residual);
    }
    if (mode == ControlMode::kPd && !rep.rows.empty())
        rep.fitted_decay =
            fit_decay_rate(rep, rep.rows.front().t, rep.rows.back().t);
}

// Integrate the full horizon in exact or pd mode.  A zero horizon returns an
// empty report.  Failures abort the run; the partial report carries the step
// index and reason.  `law_io` (optional) allows reusing synthesis caches and
// inspecting them afterwards.
inline TrackingReport run_tracking(const SimScenario& sc, ControlMode mode,
                                   FeedbackLaw* law_io = nullptr,
                                   const StepObserver& obs = {}) {
    TrackingReport rep;
    const double T = sc.target.horizon();
    if (T <= 0.0) return rep;
    if (mode == ControlMode::kPd) {
        require_spd(sc.KP, "K_P");
        require_spd(sc.KD, "K_D");
    }
    const double dt0 = sc.dt > 0.0 ? sc.dt : T / 2000.0;
    const int nsteps = std::max(1, static_cast<int>(std::lround(T / dt0)));
    const double dt = T / nsteps;

    FeedbackLaw local_law(sc.control);
    FeedbackLaw& law = law_io ? *law_io : local_law;

    SimState s;
    s.t = sc.target.t_begin();
    s.q = sc.q0;
    s.qdot = sc.qdot0;
    s.cloud = enforce_boundary(sc.cloud0, sc.domain,
                               place_bodies(sc.shapes, sc.q0));

    const auto errs = [&](double t, const VecX& q, const VecX& qd,
                          ReportRow& row) {
        VecX qr, qdr;
        sc.target.eval(t, &qr, &qdr);
        row.err_pos = (qr - q).norm();
        row.err_vel = (qdr - qd).norm();
    };

    for (int step = 0; step < nsteps; ++step) {
        ReportRow row;
        StepRecord rec;
        try {
            SimState next =
                closed_loop_step(sc, s, law, mode, dt, &row, &rec);
            errs(s.t, s.q, s.qdot, row);
            rep.rows.push_back(row);
            if (obs) {
                VecX qr, qdr, qddr;
                sc.target.eval(s.t, &qr, &qdr, &qddr);
                rec.qdd_cmd = qddr;
                if (mode == ControlMode::kPd)
                    rec.qdd_cmd += sc.KP * (qr - s.q) + sc.KD * (qdr - s.qdot);
                obs(rec);
            }
            s = next;
        } catch (const std::exception& e) {
            rep.aborted = true;
            rep.abort_step = step;
            rep.abort_reason = e.what();
            break;
        }
    }
    if (!rep.aborted) {
        // Final row at t = T: evaluate diagnostics without stepping.
        ReportRow row;
        try {
            detail::eval_stage(sc, s.t, s.q, s.qdot, s.cloud, &law, mode, &row);
            errs(s.t, s.q, s.qdot, row);
            rep.rows.push_back(row);
        } catch (const std::exception& e) {
            rep.aborted = true;
            rep.abort_step = nsteps;
            rep.abort_reason = e.what();
        }
    }
    finish_report(rep, mode);
    return rep;
}

// ---------------------------------------------------------------------------
// Report CSV (byte-stable: %.17g shortest-round-trip formatting)
// ---------------------------------------------------------------------------

inline void write_report_csv(const TrackingReport& rep, int n_bodies,
                             std::ostream& os,
                             const std::vector<std::string>& header_comments = {}) {
    for (const std::string& c : header_comments) os << "# " << c << "\n";
    os << "t,err_pos,err_vel,ctrl_residual,ctrl_norm";
    for (int k = 1; k <= n_bodies; ++k) os << ",gamma_" << k;
    os << ",energy,lipschitz_diag,particles\n";
    for (const ReportRow& r : rep.rows) {
        os << fmt_g17(r.t) << ',' << fmt_g17(r.err_pos) << ','
           << fmt_g17(r.err_vel) << ',' << fmt_g17(r.ctrl_residual) << ','
           << fmt_g17(r.ctrl_norm);
        for (int k = 0; k < n_bodies; ++k)
            os << ',' << fmt_g17(k < r.gamma_meas.size() ? r.gamma_meas[k] : 0.0);
        os << ',' << fmt_g17(r.energy) << ',' << fmt_g17(r.lipschitz_diag) << ','
           << r.particles << '\n';
    }
    if (rep.aborted)
        os << "# aborted at step " << rep.abort_step << ": " << rep.abort_reason
           << "\n";
}

inline std::string report_csv_string(const TrackingReport& rep, int n_bodies,
                                     const std::vector<std::string>& hdr = {}) {
    std::ostringstream ss;
    write_report_csv(rep, n_bodies, ss, hdr);
    return ss.str();
}

}  // namespace pfc
