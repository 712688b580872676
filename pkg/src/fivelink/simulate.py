"""High-accuracy closed-loop hybrid simulation of the walker.

One walking step is a continuous arc integrated with an embedded
Dormand-Prince 4(5) pair under PI step-size control, terminated by the
swing-toe touchdown event (located by regula falsi to 1e-10 s and landed
exactly with a final short step).  At touchdown the plastic impact map
fires, legs relabel, and the reference clock resets.

Tracking uses partial feedback linearization: torques assign the
accelerations of the four independent combinations S q_dd, with PD error
feedback (Kp = omega_n^2, Kd = 2 zeta omega_n) around the interpolated
optimized trajectories and the optimized torque as feedforward.  The
feedforward is zero-order held to match the transcription's input model;
position and velocity references interpolate linearly and clamp at the
nominal step end if touchdown is late.

A work integrator rides along as an extra state so the measured cost of
transport uses the true |u . qd| power at integrator accuracy, not the
regularized optimization surrogate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .transcription import GaitSolution

# selects the four independently assignable acceleration combinations:
# [q2, q1 + q3, q4, q5]
S_SEL = np.array(
    [
        [0.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ]
)


@dataclass(frozen=True)
class ControllerConfig:
    """PD-on-PFL tracking gains, parameterized by natural frequency."""

    omega_n: float = 80.0
    zeta: float = 1.0
    u_ff_mode: str = "zoh"  # or "linear"

    @property
    def kp(self) -> float:
        return self.omega_n**2

    @property
    def kd(self) -> float:
        return 2.0 * self.zeta * self.omega_n


@dataclass(frozen=True)
class Perturbation:
    """Impulse applied at the start of a given step (post-impact section)."""

    point: str = "hip"
    impulse: tuple[float, float] = (10.0, 0.0)
    at_step: int = 1
    at_time: float = 0.0  # seconds into the step


@dataclass
class StepEvent:
    index: int
    t: float
    state_pre: md.State
    state_post: md.State
    impulse: np.ndarray
    energy_loss: float
    step_length: float
    work: float  # cumulative actuator work magnitude at the event


@dataclass
class SimResult:
    t: np.ndarray
    x: np.ndarray  # (nt, 10) states at accepted integrator nodes
    u: np.ndarray  # (nt, 4) applied torques
    work: np.ndarray  # (nt,) cumulative integral of sum |u_n qd_n|
    events: list[StepEvent]
    steps_completed: int
    fell: bool
    fall_reason: str
    params: md.RobotParams
    stride_length: float
    omega_n: float
    meta: dict = field(default_factory=dict)

    def energy(self) -> np.ndarray:
        return np.array(
            [md.total_energy(self.params, md.State(r[:5], r[5:])) for r in self.x]
        )

    def to_csv(self) -> str:
        head = (
            "t," + ",".join(f"q{i}" for i in range(1, 6))
            + "," + ",".join(f"dq{i}" for i in range(1, 6))
            + "," + ",".join(f"u{i}" for i in range(1, 5)) + ",work"
        )
        lines = [head]
        for i in range(self.t.size):
            vals = [self.t[i], *self.x[i], *self.u[i], self.work[i]]
            lines.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "schema": "fivelink-sim-v1",
            "steps_completed": self.steps_completed,
            "fell": self.fell,
            "fall_reason": self.fall_reason,
            "omega_n": self.omega_n,
            "stride_length": self.stride_length,
            "events": [
                {
                    "index": e.index,
                    "t": e.t,
                    "impulse": e.impulse.tolist(),
                    "energy_loss": e.energy_loss,
                    "step_length": e.step_length,
                    "work": e.work,
                    "state_post": e.state_post.as_vector().tolist(),
                }
                for e in self.events
            ],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)


# -- Dormand-Prince 4(5) with PI step control ---------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


class IntegrationError(RuntimeError):
    pass


@dataclass
class OdeResult:
    t: np.ndarray
    y: np.ndarray
    status: str  # "t_end" | "event" | "stopped"
    stop_reason: str = ""
    nfev: int = 0
    nsteps: int = 0
    nreject: int = 0


def _hermite(t0, y0, f0, t1, y1, f1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def integrate_rk45(
    f,
    t0: float,
    y0: np.ndarray,
    t_end: float,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    h0: float | None = None,
    max_step: float = np.inf,
    event=None,
    event_armed=None,
    stop_fn=None,
    record: bool = True,
    max_steps: int = 200000,
) -> OdeResult:
    """Adaptive embedded RK45 with falling-zero event localization.

    ``event(t, y)`` is watched for a + to - crossing once ``event_armed(t, y)``
    is true; the crossing time is bracketed on the cubic Hermite interpolant
    by Illinois regula falsi to 1e-10 s and the integrator then lands on it
    with one exact step, so the terminal state carries full accuracy.
    ``stop_fn(t, y)`` may end integration with a reason string.
    """
    t = float(t0)
    y = np.asarray(y0, dtype=float).copy()
    ts, ys = [t], [y.copy()]
    k1 = f(t, y)
    nfev = 1
    nsteps = nreject = 0
    err_prev = 1.0
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
        d1 = float(np.sqrt(np.mean((k1 / scale) ** 2)))
        h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    else:
        h = float(h0)
    h = min(h, max_step, t_end - t)

    armed = False

    def do_step(t, y, k1, h):
        k = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * ki for a, ki in zip(_DP_A[i], k))
            k.append(f(t + _DP_C[i] * h, yi))
        y5 = y + h * sum(b * ki for b, ki in zip(_DP_B5, k) if b != 0.0)
        # FSAL: k[6] was evaluated at (t + h, y5)
        err = h * sum(e * ki for e, ki in zip(_DP_E, k) if e != 0.0)
        return y5, k[6], err, 6

    while t < t_end - 1e-14:
        if nsteps + nreject > max_steps:
            raise IntegrationError("step budget exhausted")
        h = min(h, t_end - t, max_step)
        y_new, k_last, err_vec, ne = do_step(t, y, k1, h)
        nfev += ne
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err > 1.0:
            nreject += 1
            h *= max(0.1, 0.9 * err ** (-0.2))
            continue
        t_new = t + h
        # PI controller (Hairer's beta = 0.08)
        fac = 0.9 * err ** (-0.14) * err_prev**0.08 if err > 1e-14 else 5.0
        h_next = h * min(5.0, max(0.2, fac))
        err_prev = max(err, 1e-10)
        nsteps += 1

        if event is not None:
            if not armed and (event_armed is None or event_armed(t_new, y_new)):
                armed = True
                g1 = event(t_new, y_new)
            elif armed:
                g0 = event(t, y)
                g1 = event(t_new, y_new)
                if g0 > 0.0 >= g1:
                    te = _locate_event(event, f, t, y, k1, t_new, y_new, k_last)
                    he = te - t
                    if he > 1e-13:
                        y_ev, _, _, ne2 = do_step(t, y, k1, he)
                        nfev += ne2
                    else:
                        y_ev = y.copy()
                    if record:
                        ts.append(te)
                        ys.append(y_ev.copy())
                    return OdeResult(
                        np.array(ts), np.array(ys), "event",
                        nfev=nfev, nsteps=nsteps, nreject=nreject,
                    )
        t, y, k1 = t_new, y_new, k_last
        if record:
            ts.append(t)
            ys.append(y.copy())
        if stop_fn is not None:
            reason = stop_fn(t, y)
            if reason:
                return OdeResult(
                    np.array(ts), np.array(ys), "stopped", stop_reason=reason,
                    nfev=nfev, nsteps=nsteps, nreject=nreject,
                )
        h = h_next
    return OdeResult(
        np.array(ts), np.array(ys), "t_end", nfev=nfev, nsteps=nsteps, nreject=nreject
    )


def _locate_event(event, f, t0, y0, f0, t1, y1, f1, tol=1e-10, max_it=80):
    """Illinois regula falsi on the Hermite interpolant of the last step."""
    a, b = t0, t1
    ga = event(t0, y0)
    gb = event(t1, y1)
    side = 0
    for _ in range(max_it):
        if b - a < tol:
            break
        c = (ga * b - gb * a) / (ga - gb) if ga != gb else 0.5 * (a + b)
        if not (a < c < b):
            c = 0.5 * (a + b)
        gc = event(c, _hermite(t0, y0, f0, t1, y1, f1, c))
        if gc > 0.0:
            a, ga = c, gc
            if side == 1:
                gb *= 0.5
            side = 1
        else:
            b, gb = c, gc
            if side == -1:
                ga *= 0.5
            side = -1
    return b


# -- partial feedback linearization -------------------------------------------


def pfl_torque(
    p: md.RobotParams, q, dq, q_des, dq_des, u_ff, kp: float, kd: float
) -> np.ndarray:
    """Tracking torque: feedforward plus decoupled PD in the S combinations.

    The commanded accelerations are S qdd = S qdd|u_ff + v_pd with
    v_pd = S (-kp e - kd e_dot), which makes the nominal trajectory invariant
    (zero error, matching feedforward produces the nominal accelerations) and
    places the closed-loop error poles of every S combination at -omega_n.
    """
    D, C, G = md.dyn_terms(p, q, dq)
    a_dec = S_SEL @ np.linalg.solve(np.asarray(D), md.B_MAP)  # S D^-1 B, 4x4
    v_pd = S_SEL @ (-kp * (q - q_des) - kd * (dq - dq_des))
    return u_ff + np.linalg.solve(a_dec, v_pd)


def pfl_command(p: md.RobotParams, q, dq, q_des, dq_des, u_ff, kp: float, kd: float):
    """Total commanded S-acceleration; S @ forward_dynamics(q, dq, U) equals this."""
    D, C, G = md.dyn_terms(p, q, dq)
    v_pd = S_SEL @ (-kp * (q - q_des) - kd * (dq - dq_des))
    acc_ff = np.linalg.solve(np.asarray(D), md.B_MAP @ u_ff - np.asarray(C) @ dq - np.asarray(G))
    return v_pd + S_SEL @ acc_ff


class _Refs:
    """Time-within-step indexing of the optimized knot trajectories."""

    def __init__(self, gait: GaitSolution, u_ff_mode: str = "zoh"):
        self.t = gait.t
        self.q = gait.q
        self.dq = gait.dq
        self.u = gait.u
        self.h = gait.problem.h
        self.T = gait.problem.step_duration
        self.n = gait.problem.n_intervals
        self.u_ff_mode = u_ff_mode

    def __call__(self, tau: float):
        if tau >= self.T:
            return self.q[-1], self.dq[-1], self.u[-1]
        k = min(int(tau / self.h), self.n - 1)
        s = (tau - self.t[k]) / self.h
        q_des = (1 - s) * self.q[k] + s * self.q[k + 1]
        dq_des = (1 - s) * self.dq[k] + s * self.dq[k + 1]
        if self.u_ff_mode == "linear":
            k2 = min(k + 1, self.n - 1)
            u_ff = (1 - s) * self.u[k] + s * self.u[k2]
        else:
            u_ff = self.u[k]
        return q_des, dq_des, u_ff


def _hip_height(p: md.RobotParams, q) -> float:
    ch = md._chain(p)
    th = np.asarray(md.R_ABS) @ q
    return float(-ch.L_link[0] * math.cos(th[0]) - ch.L_link[1] * math.cos(th[1]))


@dataclass
class _StepOutcome:
    status: str  # "impact" | "fall"
    reason: str
    state_post: md.State | None
    event: StepEvent | None
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    work: np.ndarray


class _StepSim:
    """Integrates single walking steps under the PFL tracking controller."""

    def __init__(self, p, gait, ctrl, rtol=1e-9, atol=1e-9,
                 min_hip_height=0.5, max_torso_angle=1.0, record=True):
        self.p = p
        self.gait = gait
        self.ctrl = ctrl
        self.rtol = rtol
        self.atol = atol
        self.refs = _Refs(gait, ctrl.u_ff_mode)
        self.T = gait.problem.step_duration
        self.progress_guard = 0.5 * gait.problem.stride_length
        self.min_hip = min_hip_height
        self.max_torso = max_torso_angle
        self.record = record

    def torque(self, tau: float, x: np.ndarray) -> np.ndarray:
        q_des, dq_des, u_ff = self.refs(tau)
        return pfl_torque(
            self.p, x[:5], x[5:10], q_des, dq_des, u_ff, self.ctrl.kp, self.ctrl.kd
        )

    def _rhs(self, t0_abs):
        def f(t, y):
            u = self.torque(t - t0_abs, y)
            qdd = np.asarray(md.forward_dynamics(self.p, y[:5], y[5:10], u))
            power = float(np.sum(np.abs(u * y[5:9])))
            return np.concatenate([y[5:10], qdd, [power]])

        return f

    def run_step(
        self,
        t0_abs: float,
        state: md.State,
        work0: float,
        index: int,
        push: Perturbation | None = None,
    ) -> _StepOutcome:
        y0 = np.concatenate([state.q, state.dq, [work0]])

        def tip_y(t, y):
            return float(md.swing_tip_position(self.p, y[:5])[1])

        def armed(t, y):
            return float(md.swing_tip_position(self.p, y[:5])[0]) > self.progress_guard

        def stop(t, y):
            if _hip_height(self.p, y[:5]) < self.min_hip:
                return "hip_below_min_height"
            if abs(y[4]) > self.max_torso:
                return "torso_angle_exceeded"
            return ""

        pre_t = np.zeros((0,))
        pre_y = np.zeros((0, 11))
        t_start = t0_abs
        try:
            if push is not None and push.at_time > 0.0:
                lead = integrate_rk45(
                    self._rhs(t0_abs), t0_abs, y0, t0_abs + push.at_time,
                    rtol=self.rtol, atol=self.atol, record=self.record,
                )
                y0 = lead.y[-1].copy()
                pre_t, pre_y = lead.t, lead.y
                t_start = t0_abs + push.at_time
                push_state = md.push_map(
                    self.p, md.State(y0[:5], y0[5:10]), push.point, push.impulse
                )
                y0[:10] = push_state.as_vector()
            res = integrate_rk45(
                self._rhs(t0_abs), t_start, y0, t0_abs + 2.0 * self.T,
                rtol=self.rtol, atol=self.atol,
                event=tip_y, event_armed=armed, stop_fn=stop, record=self.record,
            )
        except (np.linalg.LinAlgError, IntegrationError) as exc:
            return _StepOutcome("fall", f"numerical: {exc}", None, None,
                                np.zeros(0), np.zeros((0, 10)), np.zeros((0, 4)), np.zeros(0))

        tt = np.concatenate([pre_t, res.t]) if pre_t.size else res.t
        yy_all = np.vstack([pre_y, res.y]) if pre_t.size else res.y
        xx = yy_all[:, :10]
        ww = yy_all[:, 10]
        uu = np.array([self.torque(t - t0_abs, y) for t, y in zip(tt, xx)]) if self.record else np.zeros((0, 4))

        if res.status == "stopped":
            return _StepOutcome("fall", res.stop_reason, None, None, tt, xx, uu, ww)
        if res.status == "t_end":
            return _StepOutcome("fall", "step_timeout", None, None, tt, xx, uu, ww)

        y_ev = res.y[-1]
        state_pre = md.State(y_ev[:5], y_ev[5:10])
        tip_x = float(md.swing_tip_position(self.p, state_pre.q)[0])
        try:
            imp = md.impact_map(self.p, state_pre, validate=True)
        except md.ImpactInfeasibleError as exc:
            return _StepOutcome("fall", f"impact_infeasible: {exc}", None, None, tt, xx, uu, ww)
        ev = StepEvent(
            index=index, t=float(tt[-1]), state_pre=state_pre, state_post=imp.state_plus,
            impulse=imp.impulse, energy_loss=imp.energy_loss,
            step_length=tip_x, work=float(ww[-1]),
        )
        return _StepOutcome("impact", "", imp.state_plus, ev, tt, xx, uu, ww)


def rollout(
    p: md.RobotParams,
    gait: GaitSolution,
    ctrl: ControllerConfig,
    n_steps: int,
    x0: md.State | None = None,
    perturbation: Perturbation | None = None,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    record: bool = True,
) -> SimResult:
    """Walk up to ``n_steps`` steps closed loop from the gait's start state."""
    sim = _StepSim(p, gait, ctrl, rtol=rtol, atol=atol, record=record)
    state = x0.copy() if x0 is not None else gait.initial_state()
    t_abs = 0.0
    work = 0.0
    parts_t, parts_x, parts_u, parts_w = [], [], [], []
    events: list[StepEvent] = []
    fell = False
    reason = ""
    steps = 0
    for k in range(n_steps):
        push = None
        if perturbation is not None and k == perturbation.at_step:
            if perturbation.at_time == 0.0:
                state = md.push_map(p, state, perturbation.point, perturbation.impulse)
            else:
                push = perturbation
        out = sim.run_step(t_abs, state, work, k, push=push)
        if record and out.t.size:
            parts_t.append(out.t)
            parts_x.append(out.x)
            parts_u.append(out.u)
            parts_w.append(out.work)
        if out.status != "impact":
            fell = True
            reason = out.reason
            break
        events.append(out.event)
        state = out.state_post
        t_abs = out.event.t
        work = out.event.work
        steps += 1
    return SimResult(
        t=np.concatenate(parts_t) if parts_t else np.zeros(0),
        x=np.vstack(parts_x) if parts_x else np.zeros((0, 10)),
        u=np.vstack(parts_u) if parts_u else np.zeros((0, 4)),
        work=np.concatenate(parts_w) if parts_w else np.zeros(0),
        events=events,
        steps_completed=steps,
        fell=fell,
        fall_reason=reason,
        params=p,
        stride_length=gait.problem.stride_length,
        omega_n=ctrl.omega_n,
        meta={"rtol": rtol, "atol": atol},
    )


def return_map(
    p: md.RobotParams,
    gait: GaitSolution,
    ctrl: ControllerConfig,
    state: md.State,
    rtol: float = 1e-9,
    atol: float = 1e-9,
):
    """One step of the post-impact Poincare map; None when the walker falls."""
    sim = _StepSim(p, gait, ctrl, rtol=rtol, atol=atol, record=False)
    out = sim.run_step(0.0, state, 0.0, 0)
    if out.status != "impact":
        return None, out.reason
    return out.state_post, ""


@dataclass
class LimitCycle:
    x_star: md.State | None
    converged: bool
    residual: float
    steps_used: int
    reason: str = ""


def find_limit_cycle(
    p: md.RobotParams,
    gait: GaitSolution,
    ctrl: ControllerConfig,
    tol: float = 1e-8,
    max_steps: int = 80,
    min_steps: int = 15,
    rtol: float = 1e-9,
    atol: float = 1e-9,
) -> LimitCycle:
    """Iterate the return map from the gait start until it reaches a fixed point."""
    state = gait.initial_state()
    prev = state.as_vector()
    residual = np.inf
    for k in range(1, max_steps + 1):
        nxt, reason = return_map(p, gait, ctrl, state, rtol=rtol, atol=atol)
        if nxt is None:
            return LimitCycle(None, False, residual, k, reason)
        cur = nxt.as_vector()
        residual = float(np.abs(cur - prev).max())
        prev = cur
        state = nxt
        if residual <= tol and k >= min_steps:
            return LimitCycle(state, True, residual, k)
    return LimitCycle(state, False, residual, max_steps, "no_contraction_to_tol")


def measure_cot(result: SimResult, p: md.RobotParams, skip_steps: int = 1) -> float:
    """Measured cost of transport over the steady steps of a rollout.

    Uses the integrated absolute actuator power (true |u qd|, no
    regularization) divided by M g d per counted step; the first
    ``skip_steps`` steps are treated as transient.
    """
    if result.steps_completed <= skip_steps:
        raise ValueError("rollout did not complete any steps past the transient")
    w_end = result.events[result.steps_completed - 1].work
    w_start = result.events[skip_steps - 1].work if skip_steps > 0 else 0.0
    n = result.steps_completed - skip_steps
    denom = p.total_mass * p.gravity * result.stride_length * n
    return (w_end - w_start) / denom


def open_loop_step(
    p: md.RobotParams, gait: GaitSolution, rtol: float = 1e-10, atol: float = 1e-10
):
    """Integrate one nominal step applying the optimized ZOH torques open loop.

    Integrated knot to knot so the torque discontinuities land exactly on
    integrator restarts.  Returns (t, states, work) arrays; used to
    cross-check the transcription against the continuous dynamics.
    """
    ts = [np.array([0.0])]
    ys = [np.concatenate([gait.q[0], gait.dq[0], [0.0]])[None, :]]
    y = ys[0][0]
    for k in range(gait.problem.n_intervals):
        u = gait.u[k]

        def f(t, yy, u=u):
            qdd = np.asarray(md.forward_dynamics(p, yy[:5], yy[5:10], u))
            power = float(np.sum(np.abs(u * yy[5:9])))
            return np.concatenate([yy[5:10], qdd, [power]])

        res = integrate_rk45(f, gait.t[k], y, gait.t[k + 1], rtol=rtol, atol=atol)
        y = res.y[-1]
        ts.append(res.t[1:])
        ys.append(res.y[1:])
    t = np.concatenate(ts)
    yy = np.vstack(ys)
    return t, yy[:, :10], yy[:, 10]
