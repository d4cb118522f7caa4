"""Optimal control problem definitions.

An OcpDef bundles time-invariant dynamics f(x, u), running cost L(x, u),
terminal cost M(x), their analytic derivatives, the Hamiltonian-minimizing
control u*(x, lambda), and the initial-state sampling box.

The batched closures (suffix _batch, operating on (B, .) arrays) are the
primary implementations; the single-sample methods wrap them and raise
GimbalLock near the Euler-angle singularity. Batched evaluation marks
singular rows NaN instead so lockstep integrators can freeze them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import euler, integrate
from .errors import GimbalLock

GIMBAL_LIMIT = euler.GIMBAL_LIMIT


@dataclass(frozen=True)
class InitBox:
    lo: np.ndarray
    hi: np.ndarray

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(count, self.lo.size))


@dataclass
class OcpDef:
    name: str
    n: int
    m: int
    horizon_T: float
    init_box: InitBox
    f_batch: Callable        # (B,n),(B,m) -> (B,n)
    L_batch: Callable        # (B,n),(B,m) -> (B,)
    M_batch: Callable        # (B,n) -> (B,)
    df_dx_batch: Callable    # (B,n),(B,m) -> (B,n,n)
    df_du_batch: Callable    # (B,n),(B,m) -> (B,n,m)
    dL_dx_batch: Callable    # (B,n),(B,m) -> (B,n)
    dL_du_batch: Callable    # (B,n),(B,m) -> (B,m)
    dM_dx_batch: Callable    # (B,n) -> (B,n)
    u_star_batch: Callable   # (B,n),(B,n) -> (B,m)
    gimbal_angle_index: int | None = None

    def _guard(self, x: np.ndarray):
        i = self.gimbal_angle_index
        if i is not None and abs(float(x[i])) >= GIMBAL_LIMIT:
            raise GimbalLock(
                f"|pitch|={abs(float(x[i])):.6f} at or beyond the "
                f"kinematics singularity")

    def f(self, x, u):
        self._guard(x)
        return self.f_batch(np.asarray(x, float)[None],
                            np.asarray(u, float)[None])[0]

    def L(self, x, u):
        return float(self.L_batch(np.asarray(x, float)[None],
                                  np.asarray(u, float)[None])[0])

    def M(self, x):
        return float(self.M_batch(np.asarray(x, float)[None])[0])

    def df_dx(self, x, u):
        self._guard(x)
        return self.df_dx_batch(np.asarray(x, float)[None],
                                np.asarray(u, float)[None])[0]

    def df_du(self, x, u):
        self._guard(x)
        return self.df_du_batch(np.asarray(x, float)[None],
                                np.asarray(u, float)[None])[0]

    def dL_dx(self, x, u):
        return self.dL_dx_batch(np.asarray(x, float)[None],
                                np.asarray(u, float)[None])[0]

    def dL_du(self, x, u):
        return self.dL_du_batch(np.asarray(x, float)[None],
                                np.asarray(u, float)[None])[0]

    def dM_dx(self, x):
        return self.dM_dx_batch(np.asarray(x, float)[None])[0]

    def u_star(self, x, lam):
        return self.u_star_batch(np.asarray(x, float)[None],
                                 np.asarray(lam, float)[None])[0]


def hamiltonian(ocp: OcpDef, x, u, lam) -> float:
    return ocp.L(x, u) + float(np.dot(np.asarray(lam, float), ocp.f(x, u)))


def hamiltonian_du(ocp: OcpDef, x, u, lam) -> np.ndarray:
    """Analytic dH/du; zero (to rounding) at u = u_star(x, lam)."""
    return ocp.dL_du(x, u) + ocp.df_du(x, u).T @ np.asarray(lam, float)


def costate_rhs(ocp: OcpDef, x, lam, u) -> np.ndarray:
    return -(ocp.df_dx(x, u).T @ np.asarray(lam, float)) - ocp.dL_dx(x, u)


def costate_rhs_batch(ocp: OcpDef, X, Lam, U) -> np.ndarray:
    dfdx = ocp.df_dx_batch(X, U)
    return -np.einsum("bij,bi->bj", dfdx, Lam) - ocp.dL_dx_batch(X, U)


@dataclass
class Trajectory:
    grid: integrate.TimeGrid
    states: np.ndarray
    controls: np.ndarray
    running_cost: float


def total_cost(ocp: OcpDef, traj: Trajectory) -> float:
    """Terminal cost plus the integrated running cost.

    The running cost must come from augmenting the integrated system (as
    simulate_open_loop does), so its quadrature error is bounded by the
    integrator tolerances rather than by the output grid spacing.
    """
    return float(ocp.M(traj.states[-1])) + float(traj.running_cost)


def simulate_open_loop(ocp: OcpDef, u_of_t, x0,
                       ispec: integrate.IntegratorSpec) -> Trajectory:
    """Roll the dynamics under a time-indexed control, cost-augmented."""

    def rhs(t, z):
        x = z[:-1]
        u = np.asarray(u_of_t(t), float).reshape(ocp.m)
        dx = ocp.f(x, u)
        return np.concatenate([dx, [ocp.L(x, u)]])

    z0 = np.concatenate([np.asarray(x0, float), [0.0]])
    res = integrate.integrate_ivp(rhs, z0, (0.0, ocp.horizon_T), ispec)
    controls = np.stack([np.asarray(u_of_t(t), float).reshape(ocp.m)
                         for t in res.grid.nodes])
    return Trajectory(
        grid=res.grid,
        states=res.states[:, :-1],
        controls=controls,
        running_cost=float(res.states[-1, -1]),
    )


# --- satellite: rigid body attitude with momentum wheels ----------------

SAT_J = np.array([2.0, 3.0, 4.0])
SAT_B = np.array([
    [1.0, 1 / 20, 1 / 10],
    [1 / 15, 1.0, 1 / 10],
    [1 / 10, 1 / 15, 1.0],
])
SAT_H = np.array([1.0, 1.0, 1.0])
SAT_W = (0.5, 5.0, 0.25, 0.5, 0.5)  # angles, rates, control, and terminal pair


def satellite_ocp(horizon_T: float = 20.0) -> OcpDef:
    w1, w2, w3, w4, w5 = SAT_W
    jinv = 1.0 / SAT_J
    binv_t = SAT_B.T.copy()

    def f_batch(X, U):
        v, w = X[:, :3], X[:, 3:]
        K = euler.kinematics(v)
        vdot = np.einsum("bij,bj->bi", K, w)
        r = euler.rotation(v) @ SAT_H
        wdot = (euler.cross(r, w) + U @ SAT_B.T) * jinv
        out = np.concatenate([vdot, wdot], axis=1)
        locked = np.abs(v[:, 1]) >= GIMBAL_LIMIT
        if np.any(locked):
            out[locked] = np.nan
        return out

    def L_batch(X, U):
        v, w = X[:, :3], X[:, 3:]
        return (w1 * np.sum(v * v, axis=1) + w2 * np.sum(w * w, axis=1)
                + w3 * np.sum(U * U, axis=1))

    def M_batch(X):
        v, w = X[:, :3], X[:, 3:]
        return w4 * np.sum(v * v, axis=1) + w5 * np.sum(w * w, axis=1)

    def df_dx_batch(X, U):
        B = X.shape[0]
        v, w = X[:, :3], X[:, 3:]
        K, dKf, dKt = euler.kinematics_partials(v)
        R, dRf, dRt, dRp = euler.rotation_partials(v)
        r = R @ SAT_H
        J = np.zeros((B, 6, 6))
        # d(K w)/d(angles): K depends on phi, theta only
        J[:, :3, 0] = np.einsum("bij,bj->bi", dKf, w)
        J[:, :3, 1] = np.einsum("bij,bj->bi", dKt, w)
        J[:, :3, 3:] = K
        # d((R h) x w)/d(angles) = (dR/dangle h) x w
        J[:, 3:, 0] = euler.cross(dRf @ SAT_H, w) * jinv
        J[:, 3:, 1] = euler.cross(dRt @ SAT_H, w) * jinv
        J[:, 3:, 2] = euler.cross(dRp @ SAT_H, w) * jinv
        # d(r x w)/dw = crossmat(r)
        J[:, 3:, 3:] = euler.crossmat(r) * jinv[None, :, None]
        return J

    def df_du_batch(X, U):
        B = X.shape[0]
        J = np.zeros((B, 6, 3))
        J[:, 3:, :] = SAT_B * jinv[:, None]
        return J

    def dL_dx_batch(X, U):
        return np.concatenate([2 * w1 * X[:, :3], 2 * w2 * X[:, 3:]], axis=1)

    def dL_du_batch(X, U):
        return 2 * w3 * U

    def dM_dx_batch(X):
        return np.concatenate([2 * w4 * X[:, :3], 2 * w5 * X[:, 3:]], axis=1)

    def u_star_batch(X, Lam):
        # dH/du = 2 w3 u + B^T J^-1 lam_w = 0
        return -(Lam[:, 3:] * jinv) @ binv_t.T / (2 * w3)

    box = InitBox(
        lo=np.array([-np.pi / 3] * 3 + [-np.pi / 4] * 3),
        hi=np.array([np.pi / 3] * 3 + [np.pi / 4] * 3),
    )
    return OcpDef(
        name="satellite", n=6, m=3, horizon_T=horizon_T, init_box=box,
        f_batch=f_batch, L_batch=L_batch, M_batch=M_batch,
        df_dx_batch=df_dx_batch, df_du_batch=df_du_batch,
        dL_dx_batch=dL_dx_batch, dL_du_batch=dL_du_batch,
        dM_dx_batch=dM_dx_batch, u_star_batch=u_star_batch,
        gimbal_angle_index=1,
    )


# --- quadrotor: 12-state rigid body with rotor thrust mix ---------------

QUAD_MASS = 2.0
QUAD_G = 9.81
QUAD_J = np.array([1.2416, 1.2416, 2.4832])
QUAD_UD = np.array([QUAD_MASS * QUAD_G, 0.0, 0.0, 0.0])  # hover
QUAD_QF = np.array([5.0] * 3 + [10.0] * 3 + [25.0] * 3 + [50.0] * 3)
_G_VEC = np.array([0.0, 0.0, QUAD_G])


def quadrotor_init_box(size: str) -> InitBox:
    if size == "full":
        lo = np.array([-40.0, -40.0, 20.0, -1.0, -1.0, -1.0,
                       -np.pi / 4, -np.pi / 4, -np.pi,
                       0.0, 0.0, 0.0])
        hi = np.array([40.0, 40.0, 40.0, 1.0, 1.0, 1.0,
                       np.pi / 4, np.pi / 4, np.pi,
                       0.0, 0.0, 0.0])
    elif size == "small":
        lo = np.array([-8.0, -8.0, 4.0, -0.2, -0.2, -0.2,
                       -np.pi / 20, -np.pi / 20, -np.pi / 5,
                       0.0, 0.0, 0.0])
        hi = np.array([8.0, 8.0, 8.0, 0.2, 0.2, 0.2,
                       np.pi / 20, np.pi / 20, np.pi / 5,
                       0.0, 0.0, 0.0])
    else:
        raise ValueError(f"unknown init box size {size!r}")
    return InitBox(lo=lo, hi=hi)


def quadrotor_ocp(horizon_T: float = 16.0, box: str = "small") -> OcpDef:
    jinv = 1.0 / QUAD_J

    def f_batch(X, U):
        p, v, eta, w = X[:, 0:3], X[:, 3:6], X[:, 6:9], X[:, 9:12]
        R = euler.rotation(eta)
        K = euler.kinematics(eta)
        pdot = np.einsum("bji,bj->bi", R, v)          # R^T v
        vdot = -euler.cross(w, v) - R @ _G_VEC
        vdot[:, 2] += U[:, 0] / QUAD_MASS
        etadot = np.einsum("bij,bj->bi", K, w)
        wdot = -euler.cross(w, QUAD_J * w) * jinv
        wdot += U[:, 1:] * jinv
        out = np.concatenate([pdot, vdot, etadot, wdot], axis=1)
        locked = np.abs(eta[:, 1]) >= GIMBAL_LIMIT
        if np.any(locked):
            out[locked] = np.nan
        return out

    def L_batch(X, U):
        d = U - QUAD_UD
        return np.sum(d * d, axis=1)

    def M_batch(X):
        return np.sum(QUAD_QF * X * X, axis=1)

    def df_dx_batch(X, U):
        B = X.shape[0]
        v, eta, w = X[:, 3:6], X[:, 6:9], X[:, 9:12]
        R, dRf, dRt, dRp = euler.rotation_partials(eta)
        K, dKf, dKt = euler.kinematics_partials(eta)
        J = np.zeros((B, 12, 12))
        # p block: d(R^T v)
        J[:, 0:3, 3:6] = np.swapaxes(R, 1, 2)
        J[:, 0:3, 6] = np.einsum("bji,bj->bi", dRf, v)
        J[:, 0:3, 7] = np.einsum("bji,bj->bi", dRt, v)
        J[:, 0:3, 8] = np.einsum("bji,bj->bi", dRp, v)
        # v block: d(-w x v - R g)
        J[:, 3:6, 3:6] = -euler.crossmat(w)
        J[:, 3:6, 6] = -(dRf @ _G_VEC)
        J[:, 3:6, 7] = -(dRt @ _G_VEC)
        J[:, 3:6, 8] = -(dRp @ _G_VEC)
        J[:, 3:6, 9:12] = euler.crossmat(v)
        # eta block: d(K w); K depends on phi, theta only
        J[:, 6:9, 6] = np.einsum("bij,bj->bi", dKf, w)
        J[:, 6:9, 7] = np.einsum("bij,bj->bi", dKt, w)
        J[:, 6:9, 9:12] = K
        # w block: d(-J^-1 (w x J w))
        blk = euler.crossmat(QUAD_J * w) - euler.crossmat(w) * QUAD_J[None, None, :]
        J[:, 9:12, 9:12] = blk * jinv[None, :, None]
        return J

    def df_du_batch(X, U):
        B = X.shape[0]
        J = np.zeros((B, 12, 4))
        J[:, 5, 0] = 1.0 / QUAD_MASS
        J[:, 9, 1] = jinv[0]
        J[:, 10, 2] = jinv[1]
        J[:, 11, 3] = jinv[2]
        return J

    def dL_dx_batch(X, U):
        return np.zeros_like(X)

    def dL_du_batch(X, U):
        return 2.0 * (U - QUAD_UD)

    def dM_dx_batch(X):
        return 2.0 * QUAD_QF * X

    def u_star_batch(X, Lam):
        # dH/du = 2 (u - u_d) + (1/mass) A^T lam_v + B^T J^-1 lam_w = 0
        out = np.tile(QUAD_UD, (X.shape[0], 1))
        out[:, 0] -= 0.5 * Lam[:, 5] / QUAD_MASS
        out[:, 1:] -= 0.5 * Lam[:, 9:12] * jinv
        return out

    return OcpDef(
        name="quadrotor", n=12, m=4, horizon_T=horizon_T,
        init_box=quadrotor_init_box(box),
        f_batch=f_batch, L_batch=L_batch, M_batch=M_batch,
        df_dx_batch=df_dx_batch, df_du_batch=df_du_batch,
        dL_dx_batch=dL_dx_batch, dL_du_batch=dL_du_batch,
        dM_dx_batch=dM_dx_batch, u_star_batch=u_star_batch,
        gimbal_angle_index=7,
    )


# --- scalar linear-quadratic family (test + oracle fixture) -------------

def scalar_lqr_ocp(a: float = 0.0, b: float = 1.0, q: float = 1.0,
                   r: float = 1.0, m_T: float = 1.0,
                   horizon_T: float = 1.0,
                   x0_range: tuple[float, float] = (-2.0, 2.0)) -> OcpDef:
    """x' = a x + b u, L = q x^2 + r u^2, M = m_T x(T)^2."""

    def f_batch(X, U):
        return a * X + b * U

    def L_batch(X, U):
        return q * X[:, 0] ** 2 + r * U[:, 0] ** 2

    def M_batch(X):
        return m_T * X[:, 0] ** 2

    def df_dx_batch(X, U):
        return np.full((X.shape[0], 1, 1), a)

    def df_du_batch(X, U):
        return np.full((X.shape[0], 1, 1), b)

    def dL_dx_batch(X, U):
        return 2.0 * q * X

    def dL_du_batch(X, U):
        return 2.0 * r * U

    def dM_dx_batch(X):
        return 2.0 * m_T * X

    def u_star_batch(X, Lam):
        return -b / (2.0 * r) * Lam

    box = InitBox(lo=np.array([x0_range[0]]), hi=np.array([x0_range[1]]))
    return OcpDef(
        name="scalar_lqr", n=1, m=1, horizon_T=horizon_T, init_box=box,
        f_batch=f_batch, L_batch=L_batch, M_batch=M_batch,
        df_dx_batch=df_dx_batch, df_du_batch=df_du_batch,
        dL_dx_batch=dL_dx_batch, dL_du_batch=dL_du_batch,
        dM_dx_batch=dM_dx_batch, u_star_batch=u_star_batch,
    )


REGISTRY = ("satellite", "quadrotor", "scalar_lqr")

# Problems a worker process can rebuild faithfully from (name, horizon)
# alone. scalar_lqr is excluded: its factory takes coefficient overrides
# that the name does not encode.
FARMABLE = ("satellite", "quadrotor")


def make_ocp(name: str, horizon_T: float | None = None,
             box: str = "small") -> OcpDef:
    """Problem registry used by the CLI and by worker processes."""
    if name == "satellite":
        return satellite_ocp(20.0 if horizon_T is None else horizon_T)
    if name == "quadrotor":
        return quadrotor_ocp(16.0 if horizon_T is None else horizon_T, box)
    if name == "scalar_lqr":
        return scalar_lqr_ocp(horizon_T=1.0 if horizon_T is None else horizon_T)
    raise ValueError(f"unknown problem {name!r}")
