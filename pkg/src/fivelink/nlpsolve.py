"""Sparse constrained nonlinear programming with exact first derivatives.

The gait transcription produces smooth equality and inequality constraints
with a banded Jacobian; this module solves the resulting NLP to local
(KKT) optimality.  Two interchangeable backends are provided:

* ``trust-constr``: scipy's large-scale interior-point method, fed the
  exact sparse Jacobians (default; fastest and most robust here).
* ``auglag``: a self-contained augmented-Lagrangian outer loop with
  bound-constrained L-BFGS-B inner solves, useful as an independent
  cross-check and for environments where the scipy method misbehaves.

``check_kkt`` measures first-order optimality independently of either
backend and is what decides the reported status.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp


@dataclass
class NLP:
    """min f(x) s.t. c_eq(x) = 0, c_ineq(x) >= 0, lb <= x <= ub."""

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq_fun: Callable[[np.ndarray], np.ndarray] | None = None
    eq_jac: Callable[[np.ndarray], sp.spmatrix] | None = None
    ineq_fun: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_jac: Callable[[np.ndarray], sp.spmatrix] | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    # optional exact second-order callbacks: obj_hess(x) and *_hess(x, v)
    # returning sparse n-by-n matrices; quasi-Newton is used when absent
    obj_hess: Callable | None = None
    eq_hess: Callable | None = None
    ineq_hess: Callable | None = None
    meta: dict = field(default_factory=dict)

    @property
    def m_eq(self) -> int:
        return self.meta.get("m_eq", 0)

    @property
    def m_ineq(self) -> int:
        return self.meta.get("m_ineq", 0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        return lb, ub


@dataclass
class SolveOptions:
    method: str = "ip"
    tol_feas: float = 1e-6
    tol_opt: float = 1e-4
    max_iter: int = 3000
    verbose: int = 0
    # interior-point specifics
    mu0: float = 0.1
    kappa_eps: float = 10.0
    mu_linear: float = 0.2
    mu_superlinear: float = 1.5
    dx_max: float = 100.0  # damp the Newton step until its inf-norm fits
    hess_refresh_dx: float = 0.0  # reuse Lagrangian Hessian while steps stay below this
    # auglag specifics
    rho0: float = 10.0
    rho_max: float = 1e10
    max_outer: int = 50
    inner_max_iter: int = 400


@dataclass
class SolveReport:
    status: str  # optimal | max_iter | infeasible | numerical
    iterations: int
    feasibility: float
    stationarity: float
    objective: float
    wall_time: float
    message: str = ""

    def to_json_dict(self) -> dict:
        # wall time is excluded: artifacts must be bit-reproducible
        return {
            "status": self.status,
            "iterations": int(self.iterations),
            "feasibility": float(self.feasibility),
            "stationarity": float(self.stationarity),
            "objective": float(self.objective),
            "message": self.message,
        }


@dataclass
class KKTReport:
    stationarity: float
    feasibility: float
    complementarity: float
    multipliers_eq: np.ndarray | None = None
    multipliers_ineq: np.ndarray | None = None


def _feasibility(nlp: NLP, x: np.ndarray) -> float:
    worst = 0.0
    if nlp.eq_fun is not None:
        ce = np.asarray(nlp.eq_fun(x))
        if ce.size:
            worst = max(worst, float(np.abs(ce).max()))
    if nlp.ineq_fun is not None:
        ci = np.asarray(nlp.ineq_fun(x))
        if ci.size:
            worst = max(worst, float(np.maximum(0.0, -ci).max()))
    lb, ub = nlp.bounds()
    worst = max(worst, float(np.maximum(0.0, lb - x).max(initial=0.0)))
    worst = max(worst, float(np.maximum(0.0, x - ub).max(initial=0.0)))
    return worst


def check_kkt(
    nlp: NLP,
    x: np.ndarray,
    multipliers: tuple[np.ndarray | None, np.ndarray | None] | None = None,
    active_tol: float = 1e-5,
) -> KKTReport:
    """First-order optimality residuals at ``x``.

    When multipliers are not supplied they are estimated by a least-squares
    fit of the stationarity condition over the active constraints (with
    inequality and bound multipliers projected onto the correct sign), so
    the report does not depend on any solver's internals.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(nlp.gradient(x))
    feas = _feasibility(nlp, x)
    lb, ub = nlp.bounds()

    je = nlp.eq_jac(x) if nlp.eq_jac is not None else None
    ji = nlp.ineq_jac(x) if nlp.ineq_jac is not None else None
    ci = np.asarray(nlp.ineq_fun(x)) if nlp.ineq_fun is not None else np.zeros(0)

    act_i = np.flatnonzero(ci <= active_tol) if ci.size else np.zeros(0, dtype=int)
    act_lo = np.flatnonzero(x - lb <= active_tol)
    act_hi = np.flatnonzero(ub - x <= active_tol)

    blocks = []
    if je is not None and je.shape[0]:
        blocks.append(sp.csr_matrix(je).T)
    if ji is not None and act_i.size:
        blocks.append(sp.csr_matrix(ji)[act_i].T)
    if act_lo.size:
        e = sp.csr_matrix(
            (np.ones(act_lo.size), (act_lo, np.arange(act_lo.size))),
            shape=(nlp.n, act_lo.size),
        )
        blocks.append(e)
    if act_hi.size:
        e = sp.csr_matrix(
            (-np.ones(act_hi.size), (act_hi, np.arange(act_hi.size))),
            shape=(nlp.n, act_hi.size),
        )
        blocks.append(e)

    lam_e = None
    mu_full = np.zeros(ci.size)
    if multipliers is not None:
        lam_e, mu = multipliers
        r = g.copy()
        if je is not None and lam_e is not None and np.size(lam_e):
            r -= sp.csr_matrix(je).T @ np.asarray(lam_e)
        if ji is not None and mu is not None and np.size(mu):
            mu_full = np.asarray(mu, dtype=float)
            r -= sp.csr_matrix(ji).T @ mu_full
        stat = float(np.abs(r).max()) if r.size else 0.0
    elif blocks:
        A = sp.hstack(blocks).tocsc()
        sol = sp.linalg.lsqr(A, g, atol=1e-14, btol=1e-14)[0]
        k = 0
        if je is not None and je.shape[0]:
            lam_e = sol[k : k + je.shape[0]]
            k += je.shape[0]
        mu_act = np.zeros(0)
        if ji is not None and act_i.size:
            mu_act = np.maximum(0.0, sol[k : k + act_i.size])  # sign projection
            k += act_i.size
        nu_lo = np.maximum(0.0, sol[k : k + act_lo.size])
        k += act_lo.size
        nu_hi = np.maximum(0.0, sol[k : k + act_hi.size])
        r = g.copy()
        if je is not None and lam_e is not None:
            r -= sp.csr_matrix(je).T @ lam_e
        if act_i.size:
            mu_full[act_i] = mu_act
            r -= sp.csr_matrix(ji)[act_i].T @ mu_act
        if act_lo.size:
            r[act_lo] -= nu_lo
        if act_hi.size:
            r[act_hi] += nu_hi
        stat = float(np.abs(r).max()) if r.size else 0.0
    else:
        stat = float(np.abs(g).max()) if g.size else 0.0

    comp = float(np.abs(mu_full * ci).max()) if ci.size else 0.0
    return KKTReport(stat, feas, comp, lam_e, mu_full)


def solve(
    nlp: NLP, x0: np.ndarray, opts: SolveOptions | None = None
) -> tuple[np.ndarray, SolveReport]:
    """Solve to a KKT point; deterministic given (nlp, x0, opts)."""
    opts = opts or SolveOptions()
    x0 = np.asarray(x0, dtype=float)
    lb, ub = nlp.bounds()
    x0 = np.clip(x0, lb, ub)
    t0 = time.perf_counter()
    measures = None
    if opts.method == "ip":
        x, its, msg, measures = _solve_ipm(nlp, x0, opts)
    elif opts.method == "trust-constr":
        x, its, msg, measures = _solve_trust_constr(nlp, x0, opts)
    elif opts.method == "auglag":
        x, its, msg = _solve_auglag(nlp, x0, opts)
    elif opts.method == "slsqp":
        x, its, msg = _solve_slsqp(nlp, x0, opts)
    else:
        raise ValueError(f"unknown method {opts.method!r}")
    wall = time.perf_counter() - t0

    if measures is not None:
        feas, stat = measures
    else:
        kkt = check_kkt(nlp, x)
        feas, stat = kkt.feasibility, kkt.stationarity
    if feas <= opts.tol_feas and stat <= opts.tol_opt:
        status = "optimal"
    elif feas > opts.tol_feas:
        status = "infeasible" if "infeasib" in msg.lower() else "max_iter"
    else:
        status = "max_iter"
    if "numerical" in msg.lower() or "singular" in msg.lower():
        status = "numerical"
    report = SolveReport(
        status=status,
        iterations=its,
        feasibility=feas,
        stationarity=stat,
        objective=float(nlp.objective(x)),
        wall_time=wall,
        message=msg,
    )
    return x, report


def _fd_lagrangian_hess(nlp: NLP, x, y, w, delta=1e-6):
    """Dense Lagrangian Hessian by differencing exact first derivatives.

    Fallback for NLPs that do not provide second-order callbacks; meant for
    small problems only.
    """

    def lag_grad(z):
        g = np.asarray(nlp.gradient(z), dtype=float).copy()
        if y.size:
            g -= sp.csr_matrix(nlp.eq_jac(z)).T @ y
        if w.size:
            g -= sp.csr_matrix(nlp.ineq_jac(z)).T @ w
        return g

    n = x.size
    h = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = delta
        h[j] = (lag_grad(x + e) - lag_grad(x - e)) / (2 * delta)
    return sp.csr_matrix(0.5 * (h + h.T))


def _solve_ipm(nlp: NLP, x0, opts: SolveOptions):
    """Line-search primal-dual interior-point method with slacks.

    Inequalities get slack variables with a log barrier; finite variable
    bounds get their own barrier terms.  Each iteration solves one sparse
    symmetric KKT system in (dx, dy) with the slack and bound blocks
    condensed out.  Globalization is a filter line search on the pair
    (constraint violation, barrier objective) with a second-order
    correction against constraint overshoot; the barrier parameter follows
    the monotone Fiacco-McCormick schedule.
    """
    lb, ub = nlp.bounds()
    n = nlp.n
    m_e, m_i = nlp.m_eq, nlp.m_ineq
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)
    span = np.where(has_lb & has_ub, ub - lb, 1.0)
    push = np.minimum(1e-2, 1e-3 * span)
    x = np.clip(
        np.asarray(x0, float),
        np.where(has_lb, lb + push, -np.inf),
        np.where(has_ub, ub - push, np.inf),
    )

    def f_of(z):
        return float(nlp.objective(z))

    def ce_of(z):
        return np.asarray(nlp.eq_fun(z)) if m_e else np.zeros(0)

    def ci_of(z):
        return np.asarray(nlp.ineq_fun(z)) if m_i else np.zeros(0)

    mu = opts.mu0
    ce = ce_of(x)
    ci = ci_of(x)
    # slacks start on the constraint values (tiny floor keeps them interior)
    # so active inequalities do not fabricate initial violation
    s = np.maximum(ci, 1e-6) if m_i else np.zeros(0)
    w = np.clip(mu / s, 1e-8, 1e2) if m_i else np.zeros(0)
    zl = np.where(has_lb, mu / np.maximum(x - lb, 1e-10), 0.0)
    zu = np.where(has_ub, mu / np.maximum(ub - x, 1e-10), 0.0)
    # least-squares equality multipliers tame the first Newton step
    if m_e:
        g0 = np.asarray(nlp.gradient(x))
        je0 = sp.csr_matrix(nlp.eq_jac(x))
        r0 = g0.copy()
        if m_i:
            r0 -= sp.csr_matrix(nlp.ineq_jac(x)).T @ w
        r0 -= np.where(has_lb, zl, 0.0)
        r0 += np.where(has_ub, zu, 0.0)
        y = sp.linalg.lsqr(je0.T, r0, atol=1e-10, btol=1e-10, iter_lim=400)[0]
        if not np.all(np.isfinite(y)) or np.abs(y).max() > 1e6:
            y = np.zeros(m_e)
    else:
        y = np.zeros(m_e)

    hess_x = None
    hess_mat = None
    delta_reg = 0.0
    msg = "max iterations"
    it = 0
    # filter parameters (Waechter-Biegler defaults)
    g_theta = 1e-5
    g_phi = 1e-5
    s_theta = 1.1
    s_phi = 2.3
    eta_phi = 1e-4

    def theta_of(ce_v, ci_v, s_v):
        t = float(np.abs(ce_v).sum()) if m_e else 0.0
        if m_i:
            t += float(np.abs(ci_v - s_v).sum())
        return t

    theta0_init = theta_of(ce, ci, s)
    theta_max = 1e4 * max(1e-4, theta0_init)
    flt: list[tuple[float, float]] = []

    def filter_ok(th, ph):
        if th >= theta_max:
            return False
        for tj, pj in flt:
            if th >= (1.0 - g_theta) * tj and ph >= pj - g_phi * tj:
                return False
        return True

    def lagrangian_hess(z):
        if nlp.obj_hess is not None:
            h = nlp.obj_hess(z)
            if m_e:
                h = h - nlp.eq_hess(z, y)
            if m_i:
                h = h - nlp.ineq_hess(z, w)
            return sp.csr_matrix(h)
        return _fd_lagrangian_hess(nlp, z, y, w)

    def kkt_error(g, je, ji, atmu):
        r1 = g.copy()
        if m_e:
            r1 -= je.T @ y
        if m_i:
            r1 -= ji.T @ w
        r1 -= np.where(has_lb, zl, 0.0)
        r1 += np.where(has_ub, zu, 0.0)
        err = np.abs(r1).max() if r1.size else 0.0
        if m_e and ce.size:
            err = max(err, np.abs(ce).max())
        if m_i:
            err = max(err, np.abs(ci - s).max())
            err = max(err, np.abs(s * w - atmu).max())
        if has_lb.any():
            err = max(err, np.abs(((x - lb) * zl - atmu)[has_lb]).max())
        if has_ub.any():
            err = max(err, np.abs(((ub - x) * zu - atmu)[has_ub]).max())
        return err

    def barrier_value(fz, sz, xz):
        v = fz
        if m_i:
            v -= mu * np.sum(np.log(sz))
        if has_lb.any():
            v -= mu * np.sum(np.log((xz - lb)[has_lb]))
        if has_ub.any():
            v -= mu * np.sum(np.log((ub - xz)[has_ub]))
        return v

    best = {"x": x.copy(), "feas": np.inf, "err": np.inf, "score": np.inf}
    for it in range(1, opts.max_iter + 1):
        g = np.asarray(nlp.gradient(x))
        je = sp.csr_matrix(nlp.eq_jac(x)) if m_e else None
        ji = sp.csr_matrix(nlp.ineq_jac(x)) if m_i else None

        err0 = kkt_error(g, je, ji, 0.0)
        feas = max(
            np.abs(ce).max(initial=0.0),
            np.abs(ci - s).max(initial=0.0) if m_i else 0.0,
        )
        score = err0 if feas <= opts.tol_feas else 1e8 * feas
        if score < best["score"]:
            best.update(x=x.copy(), feas=feas, err=err0, score=score)
        if feas <= opts.tol_feas and err0 <= opts.tol_opt:
            msg = "converged"
            break
        mu_dropped = False
        while kkt_error(g, je, ji, mu) <= opts.kappa_eps * mu and mu > 1e-11:
            mu = max(opts.tol_opt / 100.0, min(opts.mu_linear * mu, mu**opts.mu_superlinear))
            mu_dropped = True
            if mu <= opts.tol_opt / 100.0:
                break
        if mu_dropped:
            flt.clear()

        if hess_mat is None or hess_x is None or (
            np.abs(x - hess_x).max() > opts.hess_refresh_dx
        ):
            hess_mat = lagrangian_hess(x)
            hess_x = x.copy()

        sig_l = np.where(has_lb, zl / np.maximum(x - lb, 1e-14), 0.0)
        sig_u = np.where(has_ub, zu / np.maximum(ub - x, 1e-14), 0.0)
        wb = hess_mat + sp.diags(sig_l + sig_u)
        if m_i:
            sig_s = w / s
            wb = wb + ji.T @ sp.diags(sig_s) @ ji

        # primal barrier gradient (slacks and bound duals condensed out)
        b_x = -g.copy()
        if m_e:
            b_x += je.T @ y
        if m_i:
            b_x += ji.T @ (mu / s)
        b_x += np.where(has_lb, mu / np.maximum(x - lb, 1e-14), 0.0)
        b_x -= np.where(has_ub, mu / np.maximum(ub - x, 1e-14), 0.0)
        r4 = (ci - s) if m_i else np.zeros(0)
        if m_i:
            b_x -= ji.T @ (sig_s * r4)

        theta0 = theta_of(ce, ci, s)
        phi0 = barrier_value(f_of(x), s, x)
        gamma = 1e-11
        dx = dy = ds = None
        kkt = None
        dbar = 0.0
        for attempt in range(14):
            reg = delta_reg if attempt == 0 else max(1e-8, delta_reg) * 10.0**attempt
            if m_e:
                kkt = sp.bmat(
                    [
                        [wb + sp.diags(np.full(n, reg)), je.T],
                        [je, -sp.diags(np.full(m_e, gamma))],
                    ],
                    format="csc",
                )
                rhs = np.concatenate([b_x, -ce])
            else:
                kkt = sp.csc_matrix(wb + sp.diags(np.full(n, reg)))
                rhs = b_x
            try:
                lu = sp.linalg.splu(kkt)
                sol = lu.solve(rhs)
            except (RuntimeError, ValueError):
                continue
            if not np.all(np.isfinite(sol)):
                continue
            dx = sol[:n]
            dy = -sol[n:] if m_e else np.zeros(0)
            ds = ji @ dx + r4 if m_i else np.zeros(0)
            # barrier directional derivative along (dx, ds)
            dbar = float(g @ dx)
            if m_i:
                dbar -= float((mu / s) @ ds)
            dbar -= float(np.sum((mu / np.maximum(x - lb, 1e-14))[has_lb] * dx[has_lb]))
            dbar += float(np.sum((mu / np.maximum(ub - x, 1e-14))[has_ub] * dx[has_ub]))
            if np.abs(dx).max() > opts.dx_max:
                continue
            if dbar < 0.0 or theta0 > max(10.0 * opts.tol_feas, 1e-8):
                delta_reg = reg if attempt else delta_reg
                break
        else:
            if dx is None:
                msg = "numerical: singular KKT system"
                break

        dw = (mu / s - w - sig_s * ds) if m_i else np.zeros(0)
        dzl = np.where(has_lb, mu / np.maximum(x - lb, 1e-14) - zl - sig_l * dx, 0.0)
        dzu = np.where(has_ub, mu / np.maximum(ub - x, 1e-14) - zu + sig_u * dx, 0.0)

        tau = max(0.99, 1.0 - mu)

        def max_step(v, dv, mask=None):
            if mask is not None:
                v, dv = v[mask], dv[mask]
            if v.size == 0:
                return 1.0
            bad = dv < 0
            if not bad.any():
                return 1.0
            return min(1.0, float(np.min(-tau * v[bad] / dv[bad])))

        a_pri = 1.0
        if m_i:
            a_pri = min(a_pri, max_step(s, ds))
        a_pri = min(a_pri, max_step(x - lb, dx, has_lb))
        a_pri = min(a_pri, max_step(ub - x, -dx, has_ub))
        a_dual = 1.0
        if m_i:
            a_dual = min(a_dual, max_step(w, dw))
        a_dual = min(a_dual, max_step(zl, dzl, has_lb))
        a_dual = min(a_dual, max_step(zu, dzu, has_ub))

        def try_point(x_t, s_t, alpha, f_type_alpha):
            """Filter acceptance test; returns (ok, data, is_f_step)."""
            ce_t = ce_of(x_t)
            ci_t = ci_of(x_t)
            th = theta_of(ce_t, ci_t, s_t)
            ph = barrier_value(f_of(x_t), s_t, x_t)
            if not np.isfinite(ph) or not filter_ok(th, ph):
                return False, None, False
            switching = (
                dbar < 0.0
                and f_type_alpha * (-dbar) ** s_phi > 1.0 * theta0**s_theta
            )
            if switching:
                if ph <= phi0 + eta_phi * alpha * dbar:
                    return True, (ce_t, ci_t, th, ph), True
                return False, None, False
            if th <= (1.0 - g_theta) * theta0 or ph <= phi0 - g_phi * theta0:
                return True, (ce_t, ci_t, th, ph), False
            return False, None, False

        alpha = a_pri
        accepted = False
        is_f_step = False
        data = None
        soc_tried = False
        for _ in range(40):
            x_t = x + alpha * dx
            s_t = s + alpha * ds if m_i else s
            accepted, data, is_f_step = try_point(x_t, s_t, alpha, alpha)
            if accepted:
                break
            if not soc_tried and m_e and alpha == a_pri:
                # second-order correction: retarget the equality residual
                # measured at the trial point, reusing the same KKT matrix
                soc_tried = True
                ce_t = ce_of(x_t)
                try:
                    sol_c = lu.solve(np.concatenate([b_x, -ce_t]))
                except (RuntimeError, ValueError):
                    sol_c = None
                if sol_c is not None and np.all(np.isfinite(sol_c)):
                    dx_c = sol_c[:n]
                    ds_c = ji @ dx_c + r4 if m_i else np.zeros(0)
                    a_c = min(
                        max_step(s, ds_c) if m_i else 1.0,
                        max_step(x - lb, dx_c, has_lb),
                        max_step(ub - x, -dx_c, has_ub),
                    )
                    x_c = x + a_c * dx_c
                    s_c = s + a_c * ds_c if m_i else s
                    accepted, data, is_f_step = try_point(x_c, s_c, a_c, alpha)
                    if accepted:
                        x_t, s_t = x_c, s_c
                        alpha = a_c
                        break
            alpha *= 0.5
            if alpha < 1e-11:
                break
        if opts.verbose >= 2:
            print(
                f"ip it {it:4d} mu={mu:.1e} f={f_of(x):.6f} th={theta0:.2e} "
                f"E0={err0:.2e} a={alpha:.2e} dbar={dbar:.2e} "
                f"reg={delta_reg:.1e} ok={accepted} fstep={is_f_step}",
                flush=True,
            )
        if not accepted:
            delta_reg = max(1e-8, delta_reg * 10.0)
            if delta_reg > 1e8:
                msg = "numerical: line search failed"
                break
            continue
        delta_reg = max(0.0, delta_reg / 10.0) if delta_reg > 1e-8 else 0.0

        if not is_f_step:
            flt.append(((1.0 - g_theta) * theta0, phi0 - g_phi * theta0))

        ce_t, ci_t, _, _ = data
        x = x_t
        ce, ci = ce_t, ci_t
        if m_i:
            s = s_t
            w = np.clip(w + a_dual * dw, 1e-12, 1e16)
        y = y + alpha * dy
        zl = np.where(has_lb, np.clip(zl + a_dual * dzl, 1e-14, 1e16), 0.0)
        zu = np.where(has_ub, np.clip(zu + a_dual * dzu, 1e-14, 1e16), 0.0)
        # keep bound duals compatible with the barrier (IPOPT's kappa-sigma box)
        if has_lb.any():
            prim = np.maximum(x - lb, 1e-14)
            zl = np.where(has_lb, np.clip(zl, mu / (1e10 * prim), 1e10 * mu / prim), 0.0)
        if has_ub.any():
            prim = np.maximum(ub - x, 1e-14)
            zu = np.where(has_ub, np.clip(zu, mu / (1e10 * prim), 1e10 * mu / prim), 0.0)
        if m_i:
            w = np.clip(w, mu / (1e10 * s), 1e10 * mu / s)

    if best["score"] < np.inf:
        return best["x"], it, msg, (float(best["feas"]), float(best["err"]))
    return x, it, msg, None


def _solve_trust_constr(nlp: NLP, x0, opts: SolveOptions):
    constraints = []
    if nlp.eq_fun is not None and nlp.m_eq:
        constraints.append(
            sopt.NonlinearConstraint(
                nlp.eq_fun, 0.0, 0.0,
                jac=nlp.eq_jac,
                hess=nlp.eq_hess if nlp.eq_hess is not None else sopt.SR1(),
            )
        )
    if nlp.ineq_fun is not None and nlp.m_ineq:
        constraints.append(
            sopt.NonlinearConstraint(
                nlp.ineq_fun, 0.0, np.inf,
                jac=nlp.ineq_jac,
                hess=nlp.ineq_hess if nlp.ineq_hess is not None else sopt.SR1(),
            )
        )
    lb, ub = nlp.bounds()
    res = sopt.minimize(
        nlp.objective,
        x0,
        jac=nlp.gradient,
        hess=nlp.obj_hess if nlp.obj_hess is not None else sopt.SR1(),
        method="trust-constr",
        constraints=constraints,
        bounds=sopt.Bounds(lb, ub, keep_feasible=False),
        options={
            "maxiter": opts.max_iter,
            "gtol": 1e-8,
            "xtol": 1e-12,
            "barrier_tol": 1e-8,
            "initial_barrier_parameter": opts.mu0,
            "verbose": opts.verbose,
        },
    )
    measures = (float(res.constr_violation), float(res.optimality))
    return np.asarray(res.x), int(res.niter), str(res.message), measures


def _solve_slsqp(nlp: NLP, x0, opts: SolveOptions):
    cons = []
    if nlp.eq_fun is not None and nlp.m_eq:
        cons.append(
            {
                "type": "eq",
                "fun": nlp.eq_fun,
                "jac": lambda x: np.asarray(nlp.eq_jac(x).todense()),
            }
        )
    if nlp.ineq_fun is not None and nlp.m_ineq:
        cons.append(
            {
                "type": "ineq",
                "fun": nlp.ineq_fun,
                "jac": lambda x: np.asarray(nlp.ineq_jac(x).todense()),
            }
        )
    lb, ub = nlp.bounds()
    res = sopt.minimize(
        nlp.objective,
        x0,
        jac=nlp.gradient,
        method="SLSQP",
        constraints=cons,
        bounds=list(zip(lb, ub)),
        options={"maxiter": opts.max_iter, "ftol": 1e-12},
    )
    return np.asarray(res.x), int(res.nit), str(res.message)


def _solve_auglag(nlp: NLP, x0, opts: SolveOptions):
    """LANCELOT-style augmented Lagrangian with L-BFGS-B inner solves."""
    lb, ub = nlp.bounds()
    x = np.clip(np.asarray(x0, float), lb, ub)
    m_e = nlp.m_eq
    m_i = nlp.m_ineq
    lam = np.zeros(m_e)
    mu = np.zeros(m_i)
    rho = opts.rho0
    eta = 1.0 / rho**0.1
    omega = 1.0 / rho
    total_inner = 0
    best_viol = np.inf
    stall = 0
    msg = "max outer iterations"

    def al_value_grad(z):
        f = nlp.objective(z)
        g = np.asarray(nlp.gradient(z), dtype=float).copy()
        if m_e:
            ce = np.asarray(nlp.eq_fun(z))
            je = nlp.eq_jac(z)
            f += lam @ ce + 0.5 * rho * float(ce @ ce)
            g += sp.csr_matrix(je).T @ (lam + rho * ce)
        if m_i:
            ci = np.asarray(nlp.ineq_fun(z))
            ji = nlp.ineq_jac(z)
            t = np.maximum(0.0, mu - rho * ci)
            f += float(t @ t - mu @ mu) / (2.0 * rho)
            g -= sp.csr_matrix(ji).T @ t
        return f, g

    for outer in range(opts.max_outer):
        res = sopt.minimize(
            al_value_grad,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lb, ub)),
            options={
                "maxiter": opts.inner_max_iter,
                "ftol": 1e-16,
                "gtol": max(omega, 1e-10),
                "maxcor": 30,
            },
        )
        x = np.asarray(res.x)
        total_inner += int(res.nit)
        ce = np.asarray(nlp.eq_fun(x)) if m_e else np.zeros(0)
        ci = np.asarray(nlp.ineq_fun(x)) if m_i else np.zeros(0)
        viol = _feasibility(nlp, x)
        if viol <= max(eta, opts.tol_feas):
            lam = lam + rho * ce if m_e else lam
            mu = np.maximum(0.0, mu - rho * ci) if m_i else mu
            if viol <= opts.tol_feas:
                kkt = check_kkt(nlp, x)
                if kkt.stationarity <= opts.tol_opt:
                    msg = "converged"
                    break
            eta /= rho**0.9
            omega /= rho
        else:
            rho = min(rho * 10.0, opts.rho_max)
            eta = 1.0 / rho**0.1
            omega = 1.0 / rho
        # declare infeasibility when violation stops improving by 10% per outer round
        if viol < 0.9 * best_viol:
            best_viol = viol
            stall = 0
        else:
            stall += 1
            if stall >= opts.max_outer:
                msg = "infeasible: violation stalled"
                break
    return x, total_inner, msg
