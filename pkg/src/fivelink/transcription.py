"""Direct-collocation transcription of one periodic walking step.

Decision vector: knot states x_k = (q_k, dq_k) for k = 0..N followed by
interval torques u_k for k = 0..N-1, held constant across each interval
(zero-order hold).  Dynamics enter as trapezoidal defect equalities with
u_k used at BOTH interval endpoints; the gait closes on itself through the
footstrike map (post-impact state of knot N equals knot 0).  Path
constraints keep swing-foot clearance, a positive normal ground reaction
and bounded torques; knee bounds forbid hyperextension.

The objective is the regularized discrete cost of transport

    COT = sum_k sum_n 0.5 [ra(u_n dq_n(k)) + ra(u_n dq_n(k+1))] h / (M g d)

with ra(P) = sqrt(P^2 + eps^2), summed over the four actuated joints (the
unactuated coordinate carries no torque, hence no power).  Every constraint
and the objective are smooth and differentiated exactly in one forward
sweep per knot block, so the constraint Jacobian is banded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import model as md
from . import nlpsolve

NX = 2 * md.N_Q  # state block per knot


@dataclass(frozen=True)
class GaitProblem:
    """Stride geometry, discretization and bounds for one optimized step."""

    stride_length: float = 0.6
    step_duration: float = 0.6
    h: float = 0.01
    clearance: float = 0.02
    clearance_exempt_knots: int = 5
    torque_bound: float = 150.0
    epsilon_sq: float = 0.01
    grf_margin: float = 1.0
    knee_bounds: tuple[float, float] = (-1.5, 0.1)
    hip_angle_halfwidth: float = 1.2
    torso_angle_bound: float = 1.0
    rate_bound: float = 30.0
    descend_margin: float = 0.01

    def __post_init__(self):
        n = self.step_duration / self.h
        if abs(n - round(n)) > 1e-9:
            raise ValueError("step_duration must be an integer multiple of h")

    @property
    def n_intervals(self) -> int:
        return int(round(self.step_duration / self.h))

    @property
    def n_knots(self) -> int:
        return self.n_intervals + 1

    def to_json_dict(self) -> dict:
        return {
            "stride_length": self.stride_length,
            "step_duration": self.step_duration,
            "h": self.h,
            "clearance": self.clearance,
            "clearance_exempt_knots": self.clearance_exempt_knots,
            "torque_bound": self.torque_bound,
            "epsilon_sq": self.epsilon_sq,
            "grf_margin": self.grf_margin,
            "knee_bounds": list(self.knee_bounds),
            "hip_angle_halfwidth": self.hip_angle_halfwidth,
            "torso_angle_bound": self.torso_angle_bound,
            "rate_bound": self.rate_bound,
            "descend_margin": self.descend_margin,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GaitProblem":
        d = dict(d)
        d["knee_bounds"] = tuple(d.get("knee_bounds", (-1.5, 0.1)))
        return cls(**d)


@dataclass
class GaitSolution:
    """Knot trajectories of one optimized step plus solver metadata."""

    params: md.RobotParams
    problem: GaitProblem
    t: np.ndarray  # (N+1,)
    q: np.ndarray  # (N+1, 5)
    dq: np.ndarray  # (N+1, 5)
    u: np.ndarray  # (N, 4)
    cot_opt: float
    report: nlpsolve.SolveReport | None = None
    meta: dict = field(default_factory=dict)

    def initial_state(self) -> md.State:
        return md.State(self.q[0].copy(), self.dq[0].copy())

    def to_json_dict(self) -> dict:
        d = {
            "schema": "fivelink-gait-v1",
            "params": self.params.to_json_dict(),
            "problem": self.problem.to_json_dict(),
            "t": self.t.tolist(),
            "q": self.q.tolist(),
            "dq": self.dq.tolist(),
            "u": self.u.tolist(),
            "cot_opt": float(self.cot_opt),
            "meta": self.meta,
        }
        if self.report is not None:
            d["report"] = self.report.to_json_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json_dict(cls, d: dict) -> "GaitSolution":
        rep = None
        if "report" in d:
            r = d["report"]
            rep = nlpsolve.SolveReport(
                status=r["status"],
                iterations=r["iterations"],
                feasibility=r["feasibility"],
                stationarity=r["stationarity"],
                objective=r["objective"],
                wall_time=0.0,
                message=r.get("message", ""),
            )
        return cls(
            params=md.RobotParams.from_json_dict(d["params"]),
            problem=GaitProblem.from_json_dict(d["problem"]),
            t=np.asarray(d["t"], float),
            q=np.asarray(d["q"], float),
            dq=np.asarray(d["dq"], float),
            u=np.asarray(d["u"], float),
            cot_opt=float(d["cot_opt"]),
            report=rep,
            meta=d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, s: str) -> "GaitSolution":
        return cls.from_json_dict(json.loads(s))

    def to_csv(self) -> str:
        """One row per knot: t, q1..q5, dq1..dq5, u1..u4.

        Torques are the zero-order-hold interval values; the final knot
        repeats the last interval's torque.
        """
        lines = ["t," + ",".join(f"q{i}" for i in range(1, 6))
                 + "," + ",".join(f"dq{i}" for i in range(1, 6))
                 + "," + ",".join(f"u{i}" for i in range(1, 5))]
        u_rows = np.vstack([self.u, self.u[-1]])
        for k in range(self.t.size):
            vals = [self.t[k], *self.q[k], *self.dq[k], *u_rows[k]]
            lines.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def n_variables(prob: GaitProblem) -> int:
    n = prob.n_intervals
    return NX * (n + 1) + md.N_U * n


def unpack(prob: GaitProblem, z: np.ndarray):
    """Split the decision vector into (Q, dQ, U) arrays."""
    n = prob.n_intervals
    states = np.asarray(z[: NX * (n + 1)], float).reshape(n + 1, NX)
    u = np.asarray(z[NX * (n + 1) :], float).reshape(n, md.N_U)
    return states[:, : md.N_Q], states[:, md.N_Q :], u


def pack(prob: GaitProblem, q: np.ndarray, dq: np.ndarray, u: np.ndarray) -> np.ndarray:
    states = np.hstack([q, dq]).reshape(-1)
    return np.concatenate([states, np.asarray(u, float).reshape(-1)])


def _cot_terms(dq_a4, dq_b4, u, h: float, mgd: float, eps_sq: float):
    """Per-interval regularized power terms (shared by objective and reports)."""
    p1 = u * dq_a4
    p2 = u * dq_b4
    ptil = (ad.smooth_abs(p1, eps_sq) + ad.smooth_abs(p2, eps_sq)) * 0.5
    return ad.dsum(ptil, axis=-1) * (h / mgd)


def cot_objective(params: md.RobotParams, prob: GaitProblem, dq: np.ndarray, u: np.ndarray) -> float:
    """Discrete regularized cost of transport on knot rates and ZOH torques."""
    dq = np.asarray(dq, float)
    u = np.asarray(u, float)
    mgd = params.total_mass * params.gravity * prob.stride_length
    terms = _cot_terms(dq[:-1, : md.N_U], dq[1:, : md.N_U], u, prob.h, mgd, prob.epsilon_sq)
    return float(np.sum(terms))


class _Cache:
    """Keep the most recent evaluation points (value and jacobian passes)."""

    def __init__(self, maxlen: int = 4):
        self.maxlen = maxlen
        self.store: dict[tuple, dict] = {}

    def entry(self, kind: str, z: np.ndarray) -> dict:
        key = (kind, z.tobytes())
        if key not in self.store:
            if len(self.store) >= self.maxlen:
                self.store.pop(next(iter(self.store)))
            self.store[key] = {}
        return self.store[key]


def build_nlp(
    params: md.RobotParams, prob: GaitProblem, hess_stale_tol: float = 1e-3
) -> nlpsolve.NLP:
    """Assemble the gait NLP with exact sparse derivatives."""
    n = prob.n_intervals
    nx = NX * (n + 1)
    nz = n_variables(prob)
    h = prob.h
    mgd = params.total_mass * params.gravity * prob.stride_length
    ex = prob.clearance_exempt_knots
    cl_knots = np.arange(ex, n + 1 - ex)
    m_eq = 10 * n + 12
    m_ineq = cl_knots.size + (n + 1) + 1

    def iu0(k):
        return nx + md.N_U * k

    # ---- static sparsity patterns -----------------------------------------
    ks = np.arange(n)
    # position defects: q_{k+1} - q_k - h/2 (dq_k + dq_{k+1})
    rp = (10 * ks[:, None] + np.arange(5)).ravel()
    pos_rows = np.repeat(rp, 4)
    pos_cols = np.stack(
        [
            (NX * ks[:, None] + np.arange(5)).ravel(),
            (NX * (ks + 1)[:, None] + np.arange(5)).ravel(),
            (NX * ks[:, None] + 5 + np.arange(5)).ravel(),
            (NX * (ks + 1)[:, None] + 5 + np.arange(5)).ravel(),
        ],
        axis=1,
    ).ravel()
    pos_data = np.tile([-1.0, 1.0, -h / 2, -h / 2], rp.size)

    # velocity defects: identity part
    rv = (10 * ks[:, None] + 5 + np.arange(5)).ravel()
    vid_rows = np.repeat(rv, 2)
    vid_cols = np.stack(
        [
            (NX * ks[:, None] + 5 + np.arange(5)).ravel(),
            (NX * (ks + 1)[:, None] + 5 + np.arange(5)).ravel(),
        ],
        axis=1,
    ).ravel()
    vid_data = np.tile([-1.0, 1.0], rv.size)

    # velocity defects: dynamics blocks (A at knot k, B at knot k+1, U shared)
    rv_block = rv.reshape(n, 5)
    velA_rows = np.repeat(rv_block[:, :, None], 10, axis=2).ravel()
    velA_cols = np.broadcast_to(
        (NX * ks[:, None, None] + np.arange(10)[None, None, :]), (n, 5, 10)
    ).ravel()
    velB_rows = velA_rows.copy()
    velB_cols = np.broadcast_to(
        (NX * (ks + 1)[:, None, None] + np.arange(10)[None, None, :]), (n, 5, 10)
    ).ravel()
    velU_rows = np.repeat(rv_block[:, :, None], 4, axis=2).ravel()
    velU_cols = np.broadcast_to(
        (nx + 4 * ks[:, None, None] + np.arange(4)[None, None, :]), (n, 5, 4)
    ).ravel()

    m0 = 10 * n  # first boundary row
    tip_rows = np.repeat([m0, m0 + 1], 5)
    tip_cols = np.tile(NX * n + np.arange(5), 2)
    imp_rows = np.repeat(m0 + 2 + np.arange(10), 10)
    imp_cols = np.tile(NX * n + np.arange(10), 10)
    impI_rows = m0 + 2 + np.arange(10)
    impI_cols = np.arange(10)
    impI_data = -np.ones(10)

    eq_rows = np.concatenate([pos_rows, vid_rows, velA_rows, velB_rows, velU_rows,
                              tip_rows, imp_rows, impI_rows])
    eq_cols = np.concatenate([pos_cols, vid_cols, velA_cols, velB_cols, velU_cols,
                              tip_cols, imp_cols, impI_cols])

    ncl = cl_knots.size
    cl_rows = np.repeat(np.arange(ncl), 5)
    cl_cols = (NX * cl_knots[:, None] + np.arange(5)).ravel()
    kg = np.arange(n + 1)
    ug = np.minimum(kg, n - 1)
    grf_rows = np.repeat(ncl + kg, 14)
    grf_cols = np.concatenate(
        [
            np.concatenate([NX * k + np.arange(10), iu0(u_k) + np.arange(4)])
            for k, u_k in zip(kg, ug)
        ]
    )
    desc_rows = np.full(10, ncl + n + 1)
    desc_cols = NX * n + np.arange(10)
    in_rows = np.concatenate([cl_rows, grf_rows, desc_rows])
    in_cols = np.concatenate([cl_cols, grf_cols, desc_cols])

    # objective gradient scatter columns, one 12-wide panel per interval
    obj_cols = np.concatenate(
        [
            NX * ks[:, None] + 5 + np.arange(4),
            NX * (ks + 1)[:, None] + 5 + np.arange(4),
            nx + 4 * ks[:, None] + np.arange(4),
        ],
        axis=1,
    )

    cache = _Cache()

    # ---- shared evaluation passes ------------------------------------------
    def _dyn_pair(q, dq, u_all, jac: bool):
        """f at both ends of every interval; dual-seeded when jac is True."""
        xa = np.concatenate([q[:-1], dq[:-1], u_all], axis=1)
        xb = np.concatenate([q[1:], dq[1:], u_all], axis=1)
        if jac:
            xa, xb = ad.seed_batch(xa), ad.seed_batch(xb)
        fa = md.forward_dynamics(params, xa[:, 0:5], xa[:, 5:10], xa[:, 10:14])
        fb = md.forward_dynamics(params, xb[:, 0:5], xb[:, 5:10], xb[:, 10:14])
        return fa, fb

    def _boundary(q, dq, jac: bool):
        xn = np.concatenate([q[n], dq[n]])
        tip_in = ad.lift(q[n]) if jac else q[n]
        tip = md.swing_tip_position(params, tip_in)
        imp_in = ad.lift(xn) if jac else xn
        qp, dqp, _ = md._extended_impact(params, imp_in[:5], imp_in[5:10])
        imp = ad.concat([qp, dqp], axis=-1)
        vel_in = ad.lift(xn) if jac else xn
        vy = md.swing_tip_velocity(params, vel_in[:5], vel_in[5:10])[..., 1]
        return tip, imp, vy

    def _grf(q, dq, u_all, jac: bool):
        ueff = np.vstack([u_all, u_all[-1]])
        xg = np.concatenate([q, dq, ueff], axis=1)
        if jac:
            xg = ad.seed_batch(xg)
        qdd = md.forward_dynamics(params, xg[:, 0:5], xg[:, 5:10], xg[:, 10:14])
        f = md.ground_reaction(params, xg[:, 0:5], xg[:, 5:10], qdd)
        return f[..., 1]

    def _clearance(q, jac: bool):
        qq = ad.seed_batch(q) if jac else q
        return md.swing_tip_position(params, qq)[..., 1]

    def _values(z):
        e = cache.entry("val", z)
        if "eq" not in e:
            q, dq, u_all = unpack(prob, z)
            fa, fb = _dyn_pair(q, dq, u_all, False)
            ceq = np.empty(m_eq)
            ceq[rp] = (q[1:] - q[:-1] - (h / 2) * (dq[:-1] + dq[1:])).ravel()
            ceq[rv] = (dq[1:] - dq[:-1] - (h / 2) * (fa + fb)).ravel()
            tip, imp, vy = _boundary(q, dq, False)
            ceq[m0] = tip[1]
            ceq[m0 + 1] = tip[0] - prob.stride_length
            x0 = np.concatenate([q[0], dq[0]])
            ceq[m0 + 2 : m0 + 12] = np.asarray(imp) - x0
            cin = np.empty(m_ineq)
            cin[:ncl] = _clearance(q, False)[cl_knots] - prob.clearance
            cin[ncl : ncl + n + 1] = _grf(q, dq, u_all, False) - prob.grf_margin
            cin[-1] = -vy - prob.descend_margin
            e["eq"], e["ineq"] = ceq, cin
        return e

    def _jacs(z):
        e = cache.entry("jac", z)
        if "eq" not in e:
            q, dq, u_all = unpack(prob, z)
            fa, fb = _dyn_pair(q, dq, u_all, True)
            tip, imp, vy = _boundary(q, dq, True)
            data = np.concatenate(
                [
                    pos_data,
                    vid_data,
                    (-h / 2) * fa.der[:, :, 0:10].ravel(),
                    (-h / 2) * fb.der[:, :, 0:10].ravel(),
                    (-h / 2) * (fa.der[:, :, 10:14] + fb.der[:, :, 10:14]).ravel(),
                    tip.der[1].ravel(),
                    tip.der[0].ravel(),
                    imp.der.ravel(),
                    impI_data,
                ]
            )
            e["eq"] = sp.coo_matrix((data, (eq_rows, eq_cols)), shape=(m_eq, nz)).tocsr()
            tipy = _clearance(q, True)
            fy = _grf(q, dq, u_all, True)
            idata = np.concatenate(
                [tipy.der[cl_knots].ravel(), fy.der.ravel(), -vy.der.ravel()]
            )
            e["ineq"] = sp.coo_matrix((idata, (in_rows, in_cols)), shape=(m_ineq, nz)).tocsr()
        return e

    def objective(z):
        _, dq, u_all = unpack(prob, z)
        return float(
            np.sum(_cot_terms(dq[:-1, :4], dq[1:, :4], u_all, h, mgd, prob.epsilon_sq))
        )

    def gradient(z):
        _, dq, u_all = unpack(prob, z)
        panel = ad.seed_batch(np.concatenate([dq[:-1, :4], dq[1:, :4], u_all], axis=1))
        terms = _cot_terms(panel[:, 0:4], panel[:, 4:8], panel[:, 8:12], h, mgd, prob.epsilon_sq)
        g = np.zeros(nz)
        np.add.at(g, obj_cols.ravel(), terms.der.ravel())
        return g

    # ---- exact second order ----------------------------------------------
    # Each constraint row touches at most one 14-wide knot/torque panel, so the
    # Lagrangian Hessian assembles from small per-block Hessians obtained by
    # central differences of the exact AD block Jacobians.

    def _dyn_jac(x_panel):
        xd = ad.seed_batch(x_panel)
        return md.forward_dynamics(params, xd[:, 0:5], xd[:, 5:10], xd[:, 10:14]).der

    def _grf_jac(x_panel):
        xd = ad.seed_batch(x_panel)
        qdd = md.forward_dynamics(params, xd[:, 0:5], xd[:, 5:10], xd[:, 10:14])
        return md.ground_reaction(params, xd[:, 0:5], xd[:, 5:10], qdd)[..., 1].der[:, None, :]

    def _tipy_jac(q_panel):
        return md.swing_tip_position(params, ad.seed_batch(q_panel))[..., 1].der[:, None, :]

    def _panel_hess_tensor(jac_fn, x_panel, delta=1e-5):
        """Second derivatives of every block output: (batch, m, w, w).

        Central differences of the exact AD block Jacobian, with all 2w
        shifted panels in one batch; the result is cached per iterate so
        multiplier contractions are free.
        """
        b, w = x_panel.shape
        shifts = delta * np.eye(w)
        xp = (x_panel[None, :, :] + shifts[:, None, :]).reshape(w * b, w)
        xm = (x_panel[None, :, :] - shifts[:, None, :]).reshape(w * b, w)
        jall = jac_fn(np.vstack([xp, xm]))
        m = jall.shape[1]
        diff = jall.reshape(2, w, b, m, w)
        t = np.transpose((diff[0] - diff[1]) / (2 * delta), (1, 2, 0, 3))
        return 0.5 * (t + np.swapaxes(t, 2, 3))

    def _single_hess_tensor(jac_fn, x, delta=1e-6):
        m = x.size
        rows = []
        for j in range(m):
            e = np.zeros(m)
            e[j] = delta
            rows.append((jac_fn(x + e) - jac_fn(x - e)) / (2 * delta))
        t = np.transpose(np.array(rows), (1, 0, 2))  # (m_out, w, w)
        return 0.5 * (t + np.swapaxes(t, 1, 2))

    colsA = np.concatenate(
        [NX * ks[:, None] + np.arange(10), nx + 4 * ks[:, None] + np.arange(4)], axis=1
    )
    colsB = np.concatenate(
        [NX * (ks + 1)[:, None] + np.arange(10), nx + 4 * ks[:, None] + np.arange(4)], axis=1
    )
    colsG = np.concatenate(
        [NX * kg[:, None] + np.arange(10), nx + 4 * ug[:, None] + np.arange(4)], axis=1
    )
    colsC = NX * cl_knots[:, None] + np.arange(5)
    cols_xn = NX * n + np.arange(10)
    cols_qn = NX * n + np.arange(5)

    def _blocks_to_coo(cols, hess):
        r = np.broadcast_to(cols[:, :, None], hess.shape).ravel()
        c = np.broadcast_to(cols[:, None, :], hess.shape).ravel()
        return r, c, hess.ravel()

    def tip_jac(qn):
        j = md.swing_tip_position(params, ad.lift(qn)).der
        return np.stack([j[1], j[0]])  # rows ordered [height, stride]

    def imp_jac(xn):
        qp, dqp, _ = md._extended_impact(params, ad.lift(xn)[:5], ad.lift(xn)[5:10])
        return ad.concat([qp, dqp], axis=-1).der

    def desc_jac(xn):
        vy = md.swing_tip_velocity(params, ad.lift(xn)[:5], ad.lift(xn)[5:10])[..., 1]
        return -vy.der[None, :]

    stale: dict = {}

    def _hess_tensors(z):
        # nearby iterates share tensors: second-order data only steers the
        # step, first-order optimality certificates stay exact
        if stale and np.abs(z - stale["z"]).max() <= hess_stale_tol:
            return stale["t"]
        e = cache.entry("hesst", z)
        if "dyn_a" not in e:
            q, dq, u_all = unpack(prob, z)
            xa = np.concatenate([q[:-1], dq[:-1], u_all], axis=1)
            xb = np.concatenate([q[1:], dq[1:], u_all], axis=1)
            e["dyn_a"] = _panel_hess_tensor(_dyn_jac, xa)
            e["dyn_b"] = _panel_hess_tensor(_dyn_jac, xb)
            ueff = np.vstack([u_all, u_all[-1]])
            xg = np.concatenate([q, dq, ueff], axis=1)
            e["grf"] = _panel_hess_tensor(_grf_jac, xg)
            if ncl:
                e["clear"] = _panel_hess_tensor(_tipy_jac, q[cl_knots])
            xn = np.concatenate([q[n], dq[n]])
            e["tip"] = _single_hess_tensor(tip_jac, q[n].copy())
            e["imp"] = _single_hess_tensor(imp_jac, xn)
            e["desc"] = _single_hess_tensor(desc_jac, xn)
        stale["z"] = z.copy()
        stale["t"] = e
        return e

    def eq_hess(z, v):
        z = np.asarray(z, float)
        v = np.asarray(v, float)
        t = _hess_tensors(z)
        v_vel = v[rv].reshape(n, 5)
        ha = (-h / 2) * np.einsum("bm,bmjw->bjw", v_vel, t["dyn_a"], optimize=True)
        hb = (-h / 2) * np.einsum("bm,bmjw->bjw", v_vel, t["dyn_b"], optimize=True)
        h_tip = np.einsum("m,mjw->jw", v[[m0, m0 + 1]], t["tip"])
        h_imp = np.einsum("m,mjw->jw", v[m0 + 2 : m0 + 12], t["imp"])
        parts = [
            _blocks_to_coo(colsA, ha),
            _blocks_to_coo(colsB, hb),
            _blocks_to_coo(cols_qn[None, :], h_tip[None]),
            _blocks_to_coo(cols_xn[None, :], h_imp[None]),
        ]
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        data = np.concatenate([p[2] for p in parts])
        return sp.coo_matrix((data, (rows, cols)), shape=(nz, nz)).tocsr()

    def ineq_hess(z, v):
        z = np.asarray(z, float)
        v = np.asarray(v, float)
        t = _hess_tensors(z)
        parts = []
        if ncl:
            hc = v[:ncl, None, None] * t["clear"][:, 0]
            parts.append(_blocks_to_coo(colsC, hc))
        hg = v[ncl : ncl + n + 1, None, None] * t["grf"][:, 0]
        parts.append(_blocks_to_coo(colsG, hg))
        h_desc = v[-1] * t["desc"][0]
        parts.append(_blocks_to_coo(cols_xn[None, :], h_desc[None]))
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        data = np.concatenate([p[2] for p in parts])
        return sp.coo_matrix((data, (rows, cols)), shape=(nz, nz)).tocsr()

    def obj_hess(z):
        _, dq, u_all = unpack(prob, np.asarray(z, float))
        eps_sq = prob.epsilon_sq
        c = h / (2.0 * mgd)
        rows, cols, data = [], [], []
        for term, w_off in ((0, 0), (1, 4)):
            wv = dq[:-1, :4] if term == 0 else dq[1:, :4]
            pw = u_all * wv
            s = np.sqrt(pw * pw + eps_sq)
            curv = eps_sq / s**3
            cross = curv * u_all * wv + pw / s
            iw = obj_cols[:, w_off : w_off + 4]
            iu = obj_cols[:, 8:12]
            rows += [iw, iu, iw, iu]
            cols += [iw, iu, iu, iw]
            data += [c * curv * u_all**2, c * curv * wv**2, c * cross, c * cross]
        rows = np.concatenate([r.ravel() for r in rows])
        cols = np.concatenate([cc.ravel() for cc in cols])
        data = np.concatenate([d.ravel() for d in data])
        return sp.coo_matrix((data, (rows, cols)), shape=(nz, nz)).tocsr()

    lb = np.full(nz, -np.inf)
    ub = np.full(nz, np.inf)
    for k in range(n + 1):
        qlo = NX * k
        lb[qlo + 0 : qlo + 2] = math.pi - prob.hip_angle_halfwidth
        ub[qlo + 0 : qlo + 2] = math.pi + prob.hip_angle_halfwidth
        lb[qlo + 2 : qlo + 4] = prob.knee_bounds[0]
        ub[qlo + 2 : qlo + 4] = prob.knee_bounds[1]
        lb[qlo + 4] = -prob.torso_angle_bound
        ub[qlo + 4] = prob.torso_angle_bound
        lb[qlo + 5 : qlo + 10] = -prob.rate_bound
        ub[qlo + 5 : qlo + 10] = prob.rate_bound
    lb[nx:] = -prob.torque_bound
    ub[nx:] = prob.torque_bound

    groups_eq = {
        "defect_pos": (0, 10 * n, rp),
        "defect_vel": (0, 10 * n, rv),
        "tip_height": (m0, m0 + 1, None),
        "tip_stride": (m0 + 1, m0 + 2, None),
        "periodicity": (m0 + 2, m0 + 12, None),
    }
    groups_ineq = {
        "clearance": (0, ncl, cl_knots),
        "grf_normal": (ncl, ncl + n + 1, None),
        "descending": (m_ineq - 1, m_ineq, None),
    }

    return nlpsolve.NLP(
        n=nz,
        objective=objective,
        gradient=gradient,
        eq_fun=lambda z: _values(np.asarray(z, float))["eq"].copy(),
        eq_jac=lambda z: _jacs(np.asarray(z, float))["eq"],
        ineq_fun=lambda z: _values(np.asarray(z, float))["ineq"].copy(),
        ineq_jac=lambda z: _jacs(np.asarray(z, float))["ineq"],
        obj_hess=obj_hess,
        eq_hess=eq_hess,
        ineq_hess=ineq_hess,
        lb=lb,
        ub=ub,
        meta={
            "m_eq": m_eq,
            "m_ineq": m_ineq,
            "n_intervals": n,
            "groups_eq": groups_eq,
            "groups_ineq": groups_ineq,
        },
    )


def _leg_ik(hip: np.ndarray, tip: np.ndarray, l_prox: float, l_dist: float):
    """Absolute femur angle and relative knee angle reaching tip from hip.

    The knee deflects forward of the hip-to-tip line (negative relative
    angle), the walker's natural bending direction.
    """
    v = tip - hip
    r = float(np.hypot(v[0], v[1]))
    r = min(r, (l_prox + l_dist) * (1.0 - 1e-10))
    r = max(r, abs(l_prox - l_dist) * (1.0 + 1e-10) + 1e-9)
    th_v = math.atan2(-v[0], v[1])
    alpha = math.acos((l_prox**2 + r**2 - l_dist**2) / (2 * l_prox * r))
    gamma = math.acos((l_prox**2 + l_dist**2 - r**2) / (2 * l_prox * l_dist))
    # keep the downward-pointing branch near pi to avoid 2*pi seams across knots
    return (th_v + alpha) % (2 * math.pi), gamma - math.pi


def kinematic_guess(
    params: md.RobotParams,
    prob: GaitProblem,
    jitter_seed: int | None = None,
    impact_consistent_start: bool = True,
) -> np.ndarray:
    """Kinematic straight-walk seed: interpolated poses, FD rates, zero torque.

    The hip glides at constant height from midway over the trailing foot to
    midway over the leading one; the swing tip follows a low arc from
    -stride to +stride, satisfying the stride boundary rows exactly.
    Optional jitter (deterministic in the seed) perturbs interior knots.
    """
    n = prob.n_intervals
    d = prob.stride_length
    lf, lt = params.lengths[0], params.lengths[2]
    lf_sw, lt_sw = params.lengths[1], params.lengths[3]
    leg = lf + lt
    hip_y = 0.97 * math.sqrt(max(leg**2 - (d / 2) ** 2, (0.5 * leg) ** 2))
    lift = max(3.0 * prob.clearance, 0.06)

    q = np.zeros((n + 1, 5))
    for k in range(n + 1):
        s = k / n
        hip = np.array([-d / 2 + d * s, hip_y])
        tip_sw = np.array([-d + 2 * d * s, lift * math.sin(math.pi * s) ** 2])
        th_sf, knee_st = _leg_ik(hip, np.zeros(2), lf, lt)
        th_wf, knee_sw = _leg_ik(hip, tip_sw, lf_sw, lt_sw)
        q5 = 0.0
        q[k] = [th_sf - q5, th_wf - q5, knee_st, knee_sw, q5]

    dq = np.zeros_like(q)
    dq[1:-1] = (q[2:] - q[:-2]) / (2 * prob.h)
    dq[0] = (q[1] - q[0]) / prob.h
    dq[-1] = (q[-1] - q[-2]) / prob.h
    if impact_consistent_start:
        # start velocity consistent with the footstrike of the end state,
        # which zeroes the velocity-periodicity rows of the seed
        _, dq_plus, _ = md._extended_impact(params, q[-1], dq[-1])
        dq[0] = np.asarray(dq_plus)
    u = np.zeros((n, md.N_U))

    if jitter_seed is not None:
        rng = np.random.default_rng(jitter_seed)
        q[1:-1] += rng.normal(0.0, 1e-3, size=q[1:-1].shape)
        dq[1:-1] += rng.normal(0.0, 1e-2, size=dq[1:-1].shape)
    return pack(prob, q, dq, u)


def initial_guess(
    params: md.RobotParams, prob: GaitProblem, jitter_seed: int | None = None
) -> np.ndarray:
    """Solver seed: the kinematic straight walk with optional jitter."""
    return kinematic_guess(params, prob, jitter_seed)


def optimize_gait(
    params: md.RobotParams,
    prob: GaitProblem,
    opts: nlpsolve.SolveOptions | None = None,
    jitter_seed: int | None = None,
    restart_seeds: tuple[int, ...] = (),
    warm_start: np.ndarray | GaitSolution | None = None,
    smoothing_stages: tuple[float, ...] = (1.0,),
    polish_iters: int = 600,
) -> GaitSolution:
    """Seed, continuation-solve and package one periodic gait.

    The regularized objective with the production epsilon is a narrow
    curved valley; solving first with a heavily smoothed power term
    (``smoothing_stages`` of epsilon^2, each warm-starting the next) walks
    into the right basin quickly, the final stage runs at the problem's own
    epsilon, and the interior-point polisher drives the tail.  A warm start
    (vector or previous solution) skips the smoothing stages.  Falls back
    to jittered seeds when the solve stalls.
    """
    opts = opts or nlpsolve.SolveOptions(method="trust-constr")
    if warm_start is not None:
        if isinstance(warm_start, GaitSolution):
            x0 = pack(prob, warm_start.q, warm_start.dq, warm_start.u)
        else:
            x0 = np.asarray(warm_start, float)
        attempts: list[tuple[int | None, np.ndarray]] = [(None, x0)]
    else:
        attempts = [
            (seed, initial_guess(params, prob, jitter_seed=seed))
            for seed in (jitter_seed, *restart_seeds)
        ]

    nlp = build_nlp(params, prob)
    best = None
    for seed, x0 in attempts:
        x = x0
        if warm_start is None:
            stages = [e for e in smoothing_stages if e > prob.epsilon_sq]
            for i, eps_sq in enumerate(stages):
                stage_prob = replace(prob, epsilon_sq=eps_sq)
                stage_nlp = build_nlp(params, stage_prob)
                budget = 600 if i == 0 else 400
                stage_opts = replace(
                    opts,
                    max_iter=min(opts.max_iter, budget),
                    mu0=0.01 if i == 0 else 1e-4,
                )
                x, _ = nlpsolve.solve(stage_nlp, x, stage_opts)
            final_opts = replace(opts, mu0=1e-4 if stages else opts.mu0)
        else:
            final_opts = replace(opts, mu0=1e-4)
        x, report = nlpsolve.solve(nlp, x, final_opts)
        if polish_iters > 0:
            x2, rep2 = nlpsolve.solve(
                nlp, x, replace(opts, method="ip", mu0=1e-4, max_iter=polish_iters)
            )
            if rep2.feasibility <= max(report.feasibility, opts.tol_feas) and (
                nlp.objective(x2) < nlp.objective(x)
                or (rep2.status == "optimal" and report.status != "optimal")
            ):
                x, report = x2, rep2
            elif report.status != "optimal" and rep2.status == "optimal":
                x, report = x2, rep2
        sol = _package(params, prob, x, report, seed)
        if report.status == "optimal":
            return sol
        if best is None or report.feasibility < best.report.feasibility:
            best = sol
    return best


def _package(params, prob, z, report, seed) -> GaitSolution:
    q, dq, u = unpack(prob, z)
    n = prob.n_intervals
    cot = cot_objective(params, prob, dq, u)
    return GaitSolution(
        params=params,
        problem=prob,
        t=prob.h * np.arange(n + 1),
        q=q.copy(),
        dq=dq.copy(),
        u=u.copy(),
        cot_opt=cot,
        report=report,
        meta={"jitter_seed": seed},
    )
