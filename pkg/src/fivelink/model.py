"""Five-link planar biped: kinematics, manipulator dynamics, impacts, pushes.

Coordinates follow the walker convention used throughout this package:
``q = [q1, q2, q3, q4, q5]`` where q1/q2 are the stance/swing thigh angles
relative to the torso, q3/q4 the stance/swing knee angles relative to the
thigh, and q5 the absolute torso angle from world vertical.  All angles are
counter-clockwise positive.  A link at absolute angle ``th`` points along
``(-sin th, cos th)``; legs descend from the hip, the torso ascends.  The
stance toe is pinned at the world origin and the ground is y = 0.

The dynamics D(q) qdd + C(q, qd) qd + G(q) = B u are assembled from a
constant coefficient matrix in absolute link angles, where the inertia
matrix has the closed form K * cos(th_l - th_m) plus rod inertias and the
Coriolis matrix from Christoffel symbols reduces to K * sin(th_l - th_m)
* thd_m.  Every routine is generic over plain floats and `autodiff.Dual`
arrays, and broadcasts over leading batch axes.

Links are uniform rods (center of mass at mid-length, inertia m L^2 / 12
about the COM); only the COM offsets are taken from the parameter set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

N_Q = 5
N_U = 4

# internal link order: stance femur, stance tibia, swing femur, swing tibia, torso
_LINK_OF_PARAM = (0, 2, 1, 3, 4)  # param index (m1..m5) -> link slot

# absolute link angles from joint coordinates: th = R @ q
R_ABS = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 1.0],  # stance femur  q5 + q1
        [1.0, 0.0, 1.0, 0.0, 1.0],  # stance tibia  q5 + q1 + q3
        [0.0, 1.0, 0.0, 0.0, 1.0],  # swing femur   q5 + q2
        [0.0, 1.0, 0.0, 1.0, 1.0],  # swing tibia   q5 + q2 + q4
        [0.0, 0.0, 0.0, 0.0, 1.0],  # torso         q5
    ]
)

# actuator map: torques act across the four relative joints, q5 is passive
B_MAP = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ]
)

# leg exchange at footstrike: q1<->q2, q3<->q4, q5 fixed
SWAP_PERM = (1, 0, 3, 2, 4)

PUSH_POINTS = ("hip", "stance_knee", "torso")


class ImpactInfeasibleError(RuntimeError):
    """The impact would require a tensile (negative normal) contact impulse."""


@dataclass(frozen=True)
class RobotParams:
    """Link masses, lengths, COM offsets (proximal to COM) and gravity.

    Index order is m1..m5 / L1..L5 / c1..c5: stance thigh, swing thigh,
    stance shin, swing shin, torso.
    """

    masses: tuple[float, float, float, float, float]
    lengths: tuple[float, float, float, float, float]
    coms: tuple[float, float, float, float, float]
    gravity: float = 9.81

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        object.__setattr__(self, "coms", tuple(float(v) for v in self.coms))
        object.__setattr__(self, "gravity", float(self.gravity))
        if len(self.masses) != 5 or len(self.lengths) != 5 or len(self.coms) != 5:
            raise ValueError("masses, lengths and coms must each have 5 entries")
        if min(self.masses) <= 0 or min(self.lengths) <= 0:
            raise ValueError("masses and lengths must be positive")

    @property
    def total_mass(self) -> float:
        return sum(self.masses)

    @classmethod
    def rods(cls, masses, lengths, gravity: float = 9.81) -> "RobotParams":
        """Uniform-rod parameter set: COM at mid-length."""
        return cls(tuple(masses), tuple(lengths), tuple(L / 2.0 for L in lengths), gravity)

    def to_json_dict(self) -> dict:
        return {
            "masses": list(self.masses),
            "lengths": list(self.lengths),
            "coms": list(self.coms),
            "gravity": self.gravity,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RobotParams":
        return cls(
            tuple(d["masses"]), tuple(d["lengths"]), tuple(d["coms"]), d["gravity"]
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "RobotParams":
        return cls.from_json_dict(json.loads(s))


_TABLE_LENGTHS = (0.4, 0.4, 0.43, 0.43, 0.77)

# five mass distributions studied in the experiments (m1=m2, m3=m4, m5), 70 kg total
_MASS_SETS = {
    "set1": (7.0, 7.0, 42.0),
    "set2": (5.0, 7.0, 46.0),
    "set3": (7.0, 5.0, 46.0),
    "set4": (5.0, 5.0, 50.0),
    "set5": (7.0, 3.0, 50.0),
}


def preset(name: str) -> RobotParams:
    """One of the benchmark walkers, ``set1`` .. ``set5``."""
    if name not in _MASS_SETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_MASS_SETS)}")
    thigh, shin, torso = _MASS_SETS[name]
    return RobotParams.rods((thigh, thigh, shin, shin, torso), _TABLE_LENGTHS)


def preset_names() -> list[str]:
    return sorted(_MASS_SETS)


@dataclass
class State:
    """Joint angles and rates."""

    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.dq = np.asarray(self.dq, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.dq])

    @classmethod
    def from_vector(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(x[:N_Q].copy(), x[N_Q:].copy())

    def copy(self) -> "State":
        return State(self.q.copy(), self.dq.copy())


@dataclass
class ImpactResult:
    state_plus: State
    impulse: np.ndarray  # contact impulse at the new stance toe, world frame, N s
    energy_loss: float


class _Chain:
    """Constant structure derived from one parameter set."""

    __slots__ = ("m_link", "L_link", "c_link", "k", "K", "w", "I_rod", "M", "g",
                 "k_hip", "k_stance_knee", "k_swing_tip", "k_torso_com")

    def __init__(self, p: RobotParams):
        self.m_link = np.array([p.masses[i] for i in (0, 2, 1, 3, 4)])
        self.L_link = np.array([p.lengths[i] for i in (0, 2, 1, 3, 4)])
        self.c_link = np.array([p.coms[i] for i in (0, 2, 1, 3, 4)])
        self.M = p.total_mass
        self.g = p.gravity
        L1, L3, L2, L4, _ = self.L_link[0], self.L_link[1], self.L_link[2], self.L_link[3], 0
        c_sf, c_st, c_wf, c_wt, c_t = self.c_link
        # COM of link i as sum_l k[i, l] * dir(th_l), toe-pinned frame
        self.k = np.array(
            [
                [c_sf - L1, -L3, 0.0, 0.0, 0.0],  # stance femur
                [0.0, c_st - L3, 0.0, 0.0, 0.0],  # stance tibia
                [-L1, -L3, c_wf, 0.0, 0.0],  # swing femur
                [-L1, -L3, L2, c_wt, 0.0],  # swing tibia
                [-L1, -L3, 0.0, 0.0, c_t],  # torso
            ]
        )
        self.K = self.k.T @ np.diag(self.m_link) @ self.k
        self.w = self.m_link @ self.k
        self.I_rod = self.m_link * self.L_link**2 / 12.0
        self.k_hip = np.array([-L1, -L3, 0.0, 0.0, 0.0])
        self.k_stance_knee = np.array([0.0, -L3, 0.0, 0.0, 0.0])
        self.k_swing_tip = np.array([-L1, -L3, L2, L4, 0.0])
        self.k_torso_com = np.array([-L1, -L3, 0.0, 0.0, c_t])


@lru_cache(maxsize=64)
def _chain(p: RobotParams) -> _Chain:
    return _Chain(p)


def _angles(p: RobotParams, q):
    return ad.const_einsum("...i,li->...l", q, R_ABS)


def _dirs(th):
    """Unit direction (-sin, cos) and its derivative (-cos, -sin) per link."""
    s, c = ad.sin(th), ad.cos(th)
    d = ad.stack([-s, c], axis=-1)
    dp = ad.stack([-c, -s], axis=-1)
    return d, dp


def _point_jacobian(coeffs: np.ndarray, dp):
    """World Jacobian d(point)/dq for a point sum_l coeffs[l] dir(th_l)."""
    return ad.const_einsum("...lc,l,lj->...cj", dp, coeffs, R_ABS)


def forward_kinematics(p: RobotParams, q) -> dict:
    """World positions of the joints, link COMs and total COM.

    Returns a dict with 2-vectors ``hip``, ``stance_knee``, ``swing_knee``,
    ``swing_tip``, ``torso_top``, ``stance_tip``, ``com`` and the (5, 2)
    block ``com_links`` in internal link order.
    """
    ch = _chain(p)
    th = _angles(p, q)
    d, _ = _dirs(th)
    L = ch.L_link
    d0, d1, d2, d3, d4 = (d[..., i, :] for i in range(5))
    hip = -L[0] * d0 - L[1] * d1
    com_links = ad.const_einsum("...lc,il->...ic", d, ch.k)
    com = ad.const_einsum("...lc,l->...c", d, ch.w / ch.M)
    zero = np.zeros(ad.value(q).shape[:-1] + (2,))
    return {
        "stance_tip": zero,
        "stance_knee": hip + L[0] * d0,
        "hip": hip,
        "swing_knee": hip + L[2] * d2,
        "swing_tip": hip + L[2] * d2 + L[3] * d3,
        "torso_top": hip + ch.L_link[4] * d4,
        "com_links": com_links,
        "com": com,
    }


def swing_tip_position(p: RobotParams, q):
    ch = _chain(p)
    th = _angles(p, q)
    d, _ = _dirs(th)
    return ad.const_einsum("...lc,l->...c", d, ch.k_swing_tip)


def swing_tip_velocity(p: RobotParams, q, dq):
    ch = _chain(p)
    th = _angles(p, q)
    thd = _angles(p, dq)
    _, dp = _dirs(th)
    return ad.const_einsum("...lc,l->...c", dp * _expand(thd), ch.k_swing_tip)


def _expand(x):
    """Append a singleton axis to multiply per-link scalars onto 2-vectors."""
    if isinstance(x, ad.Dual):
        return ad.Dual(x.val[..., None], x.der[..., None, :])
    return np.asarray(x, dtype=float)[..., None]


def dyn_terms(p: RobotParams, q, dq):
    """Inertia matrix D, Coriolis matrix C and gravity vector G at (q, dq)."""
    ch = _chain(p)
    th = _angles(p, q)
    thd = _angles(p, dq)
    s, c = ad.sin(th), ad.cos(th)
    s_l, s_m = _outer_pair(s)
    c_l, c_m = _outer_pair(c)
    cos_d = c_l * c_m + s_l * s_m
    sin_d = s_l * c_m - c_l * s_m
    d_abs = ch.K * cos_d + np.diag(ch.I_rod)
    c_abs = (ch.K * sin_d) * _row(thd)
    g_abs = (-ch.g * ch.w) * s
    D = ad.congruence(R_ABS, d_abs)
    C = ad.congruence(R_ABS, c_abs)
    G = ad.const_einsum("...l,lj->...j", g_abs, R_ABS)
    return D, C, G


def _outer_pair(x):
    if isinstance(x, ad.Dual):
        xl = ad.Dual(x.val[..., :, None], x.der[..., :, None, :])
        xm = ad.Dual(x.val[..., None, :], x.der[..., None, :, :])
    else:
        xl = x[..., :, None]
        xm = x[..., None, :]
    return xl, xm


def _row(x):
    if isinstance(x, ad.Dual):
        return ad.Dual(x.val[..., None, :], x.der[..., None, :, :])
    return x[..., None, :]


def forward_dynamics(p: RobotParams, q, dq, u):
    """Joint accelerations solving D qdd = B u - C qd - G."""
    D, C, G = dyn_terms(p, q, dq)
    rhs = ad.const_einsum("...n,jn->...j", u, B_MAP) - ad.matvec(C, dq) - G
    return ad.solve(D, rhs)


def com_position(p: RobotParams, q):
    ch = _chain(p)
    d, _ = _dirs(_angles(p, q))
    return ad.const_einsum("...lc,l->...c", d, ch.w / ch.M)


def com_velocity(p: RobotParams, q, dq):
    ch = _chain(p)
    _, dp = _dirs(_angles(p, q))
    thd = _angles(p, dq)
    return ad.const_einsum("...lc,l->...c", dp * _expand(thd), ch.w / ch.M)


def com_acceleration(p: RobotParams, q, dq, ddq):
    ch = _chain(p)
    th = _angles(p, q)
    thd = _angles(p, dq)
    thdd = _angles(p, ddq)
    d, dp = _dirs(th)
    term = dp * _expand(thdd) - d * _expand(thd * thd)
    return ad.const_einsum("...lc,l->...c", term, ch.w / ch.M)


def ground_reaction(p: RobotParams, q, dq, ddq):
    """Contact force at the stance toe from the Newton balance of the total COM."""
    ch = _chain(p)
    acc = com_acceleration(p, q, dq, ddq)
    gvec = np.zeros(ad.value(acc).shape)
    gvec[..., 1] = ch.g
    return ch.M * (acc + gvec)


def kinetic_energy(p: RobotParams, q, dq):
    D, _, _ = dyn_terms(p, q, dq)
    return 0.5 * ad.dsum(dq * ad.matvec(D, dq), axis=-1)


def potential_energy(p: RobotParams, q):
    ch = _chain(p)
    th = _angles(p, q)
    return ch.g * ad.const_einsum("...l,l->...", ad.cos(th), ch.w)


def total_energy(p: RobotParams, state: State) -> float:
    return float(
        ad.value(kinetic_energy(p, state.q, state.dq))
        + ad.value(potential_energy(p, state.q))
    )


def angular_momentum(p: RobotParams, q, dq, about=(0.0, 0.0)):
    """Total angular momentum (z component) about a world point."""
    ch = _chain(p)
    th = _angles(p, q)
    thd = _angles(p, dq)
    d, dp = _dirs(th)
    pos = ad.const_einsum("...lc,il->...ic", d, ch.k)
    vel = ad.const_einsum("...lc,il->...ic", dp * _expand(thd), ch.k)
    rx = pos[..., 0] - about[0]
    ry = pos[..., 1] - about[1]
    spin = rx * vel[..., 1] - ry * vel[..., 0]
    orbital = ad.const_einsum("...i,i->...", spin, ch.m_link)
    rot = ad.const_einsum("...l,l->...", thd, ch.I_rod)
    return orbital + rot


def relabel(q_or_state):
    """Exchange stance and swing leg coordinates (an involution)."""
    if isinstance(q_or_state, State):
        return State(q_or_state.q[list(SWAP_PERM)], q_or_state.dq[list(SWAP_PERM)])
    x = q_or_state
    idx = list(SWAP_PERM)
    if isinstance(x, ad.Dual):
        return ad.stack([x[..., i] for i in idx], axis=-1)
    return np.asarray(x, dtype=float)[..., idx]


def _extended_impact(p: RobotParams, q, dq):
    """Plastic no-slip impulse at the swing tip in floating-base coordinates.

    Returns the relabeled post-impact (q+, dq+) and the world-frame contact
    impulse.  Generic over Dual inputs so the gait transcription can
    differentiate through the footstrike.
    """
    ch = _chain(p)
    th = _angles(p, q)
    thd = _angles(p, dq)
    _, dp = _dirs(th)
    D, _, _ = dyn_terms(p, q, dq)
    # coupling of joint rates to base translation: Jm = sum_i m_i dp_i/dq
    jm = _point_jacobian(ch.w, dp)  # (2, 5)
    jc = _point_jacobian(ch.k_swing_tip, dp)  # swing-tip contact jacobian
    batch = ad.value(q).shape[:-1]
    eye2 = np.broadcast_to(np.eye(2), batch + (2, 2)).copy()
    z22 = np.zeros(batch + (2, 2))
    de = ad.concat(
        [
            ad.concat([D, ad.transpose2(jm)], axis=-1),
            ad.concat([jm, ch.M * eye2], axis=-1),
        ],
        axis=-2,
    )
    je = ad.concat([jc, eye2], axis=-1)  # (2, 7)
    mom = ad.matvec(de[..., :, :N_Q], dq)  # De @ [dq; 0]
    blk = ad.concat(
        [
            ad.concat([de, -ad.transpose2(je)], axis=-1),
            ad.concat([je, z22], axis=-1),
        ],
        axis=-2,
    )
    rhs = ad.concat([mom, np.zeros(batch + (2,))], axis=-1)
    sol = ad.solve(blk, rhs)
    dq_plus = relabel(sol[..., :N_Q])
    q_plus = relabel(q)
    impulse = sol[..., 7:9]
    return q_plus, dq_plus, impulse


def impact_map(p: RobotParams, state: State, validate: bool = True) -> ImpactResult:
    """Instantaneous inelastic footstrike: velocity reset plus leg relabeling.

    The swing tip becomes the new pinned stance toe; the old stance foot is
    free to leave the ground.  With ``validate``, a tensile normal impulse
    raises ImpactInfeasibleError rather than being clamped.
    """
    q_plus, dq_plus, impulse = _extended_impact(p, state.q, state.dq)
    impulse = np.asarray(ad.value(impulse))
    if validate and impulse[1] < -1e-9:
        raise ImpactInfeasibleError(
            f"normal impulse {impulse[1]:.6f} N s is tensile; impact infeasible"
        )
    ke_minus = float(ad.value(kinetic_energy(p, state.q, state.dq)))
    state_plus = State(np.asarray(ad.value(q_plus)), np.asarray(ad.value(dq_plus)))
    ke_plus = float(ad.value(kinetic_energy(p, state_plus.q, state_plus.dq)))
    return ImpactResult(state_plus, impulse, ke_minus - ke_plus)


def push_point_coeffs(p: RobotParams, point: str) -> np.ndarray:
    ch = _chain(p)
    table = {
        "hip": ch.k_hip,
        "stance_knee": ch.k_stance_knee,
        "torso": ch.k_torso_com,
    }
    if point not in table:
        raise KeyError(f"unknown push point {point!r}; choose from {PUSH_POINTS}")
    return table[point]


def push_map(p: RobotParams, state: State, point: str, impulse) -> State:
    """Instantaneous velocity change from an impulse applied at a body point.

    Solves D (dq+ - dq-) = E^T * impulse with E the world-position Jacobian
    of the application point (hip joint, stance knee joint, or torso COM).
    """
    impulse = np.asarray(impulse, dtype=float)
    coeffs = push_point_coeffs(p, point)
    th = _angles(p, state.q)
    _, dp = _dirs(th)
    E = _point_jacobian(coeffs, dp)  # (2, 5)
    D, _, _ = dyn_terms(p, state.q, state.dq)
    dv = ad.solve(ad.value(D), ad.value(E).T @ impulse)
    return State(state.q.copy(), state.dq + dv)
