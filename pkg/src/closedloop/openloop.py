"""Open-loop solutions of the minimum-principle boundary value problem.

Shooting on the initial costate: integrate the coupled (state, costate,
running cost) system forward under the minimizing control and drive
lambda(T) - dM/dx(x(T)) to zero with a damped Newton iteration.  The Newton
Jacobian comes from forward finite differences; the base point and all
perturbed systems are integrated together in lockstep (one batched
integration, worst-row error control) so the differences stay internally
consistent and cheap.

Long horizons break the one-segment formulation: the costate flow of a
stabilization problem is exponentially unstable, so a single shot over the
satellite's full horizon amplifies rounding in lambda(0) past any useful
residual.  solve_shooting therefore splits the horizon into segments of
bounded length and carries the interior segment-boundary states as extra
Newton unknowns (multiple shooting).  One segment reproduces plain single
shooting exactly.

Hard instances are reached by continuation: either growing the horizon
(time marching) or scaling the initial state up from the origin
(space marching), warm-starting each stage from the last stage's solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import integrate
from .errors import (ContinuationFailed, GimbalLock, NewtonDiverged,
                     NonFiniteState, StepLimitExceeded)
from .ocp import OcpDef

OUTPUT_NODES = 51

_PROPAGATION_FAILURES = (NonFiniteState, StepLimitExceeded, GimbalLock)


@dataclass(frozen=True)
class ShootingSpec:
    """Newton settings for the shooting solve.

    The boundary-value integrations run much tighter than closed-loop
    rollouts need to: the terminal costate is exponentially sensitive to
    lambda(0), so residual evaluation noise at loose tolerance would stall
    the iteration well above residual_tol.

    segment_time bounds the span each shot integrates before handing off to
    the next Newton unknown; horizons at or below it use one segment.
    """
    residual_tol: float = 1e-8
    max_newton_iters: int = 50
    fd_eps: float = 1e-6
    damping: float = 1.0
    max_backtracks: int = 8
    segment_time: float = 2.0
    integrator: integrate.IntegratorSpec = field(
        default_factory=lambda: integrate.IntegratorSpec(
            abs_tol=1e-10, rel_tol=1e-10))
    guess_integrator: integrate.IntegratorSpec = field(
        default_factory=lambda: integrate.IntegratorSpec(
            abs_tol=1e-6, rel_tol=1e-6))
    output_nodes: int = OUTPUT_NODES


@dataclass
class OpenLoopSolution:
    grid: integrate.TimeGrid
    states: np.ndarray     # (nodes, n)
    costates: np.ndarray   # (nodes, n)
    controls: np.ndarray   # (nodes, m)
    total_cost: float
    residual: float
    converged: bool
    newton_iters: int


@dataclass(frozen=True)
class ContinuationSchedule:
    kind: str                    # "time" (horizon fractions) or "space"
    stages: tuple[float, ...]    # increasing, last entry 1.0

    def __post_init__(self):
        if self.kind not in ("time", "space"):
            raise ValueError(f"unknown continuation kind {self.kind!r}")
        if not self.stages or self.stages[-1] != 1.0:
            raise ValueError("stages must end at 1.0")
        if any(b <= a for a, b in zip(self.stages, self.stages[1:])):
            raise ValueError("stages must be strictly increasing")


def default_schedule(problem_name: str) -> ContinuationSchedule:
    if problem_name == "satellite":
        return ContinuationSchedule("time", (1 / 8, 1 / 4, 1 / 2, 1.0))
    if problem_name == "quadrotor":
        return ContinuationSchedule("space", (0.2, 0.4, 0.6, 0.8, 1.0))
    return ContinuationSchedule("time", (1.0,))


def pmp_rhs(prob: OcpDef):
    """Joint rhs for rows (x, lambda, running cost) under u = u*(x, lambda)."""
    n = prob.n

    def rhs(t, Y):
        X = Y[:, :n]
        Lam = Y[:, n:2 * n]
        U = prob.u_star_batch(X, Lam)
        dX = prob.f_batch(X, U)
        dfdx = prob.df_dx_batch(X, U)
        dLam = -np.einsum("bij,bi->bj", dfdx, Lam) - prob.dL_dx_batch(X, U)
        dC = prob.L_batch(X, U)
        return np.concatenate([dX, dLam, dC[:, None]], axis=1)

    return rhs


def _integrate_pmp(prob: OcpDef, x0: np.ndarray, lam0_rows: np.ndarray,
                   horizon: float, ispec: integrate.IntegratorSpec):
    """Lockstep-integrate one PMP system per row of lam0_rows."""
    k = lam0_rows.shape[0]
    Y0 = np.concatenate(
        [np.tile(x0, (k, 1)), lam0_rows, np.zeros((k, 1))], axis=1)
    return integrate.integrate_ivp(pmp_rhs(prob), Y0, (0.0, horizon), ispec)


def _propagate(prob: OcpDef, starts: np.ndarray, span: float,
               ispec: integrate.IntegratorSpec):
    """Lockstep-integrate PMP rows (x, lambda) over [0, span].

    starts: (rows, 2n).  A zero running-cost component is appended so the
    endpoint also carries each row's segment cost.
    """
    Y0 = np.concatenate([starts, np.zeros((starts.shape[0], 1))], axis=1)
    return integrate.integrate_ivp(pmp_rhs(prob), Y0, (0.0, span), ispec)


def _segments_for(horizon: float, spec: ShootingSpec) -> int:
    if spec.segment_time <= 0:
        return 1
    return max(1, int(math.ceil(horizon / spec.segment_time - 1e-12)))


def _terminal_residual(prob: OcpDef, endpoint_rows: np.ndarray) -> np.ndarray:
    """rho = lambda(T) - dM/dx(x(T)) per row; rows are (x, lambda[, cost])."""
    n = prob.n
    X = endpoint_rows[:, :n]
    Lam = endpoint_rows[:, n:2 * n]
    return Lam - prob.dM_dx_batch(X)


def _cold_boundaries(prob: OcpDef, x0: np.ndarray, lam0: np.ndarray,
                     segments: int, span: float,
                     spec: ShootingSpec) -> np.ndarray:
    """Initial boundary guesses by marching the guess forward segmentwise.

    The march uses the loose guess tolerance; when it blows up (the costate
    flow is unstable, so a mediocre lambda(0) eventually diverges or hits
    the attitude guard) the remaining boundaries hold the last finite value
    and the Newton corrector repairs them.
    """
    n = prob.n
    Z = np.zeros((segments, 2 * n))
    Z[0, :n] = x0
    Z[0, n:] = lam0
    clamp = 1e3 * (1.0 + float(np.max(np.abs(x0))))
    for j in range(segments - 1):
        try:
            res = _propagate(prob, Z[j:j + 1], span, spec.guess_integrator)
            nxt = res.states[-1][0, :2 * n]
        except _PROPAGATION_FAILURES:
            nxt = None
        if nxt is None or not np.all(np.isfinite(nxt)) \
                or float(np.max(np.abs(nxt))) > clamp:
            Z[j + 1:] = Z[j]
            break
        Z[j + 1] = nxt
    return Z


def _warm_boundaries(prob: OcpDef, x0: np.ndarray, lam0: np.ndarray,
                     segments: int, span: float,
                     traj: OpenLoopSolution) -> np.ndarray:
    """Boundary guesses interpolated from a previous stage's solution.

    Boundary times past the old horizon hold the old endpoint, which for a
    stabilization problem is the best available guess for the settled tail.
    """
    n = prob.n
    Z = np.empty((segments, 2 * n))
    Z[0, :n] = x0
    Z[0, n:] = lam0
    nodes = traj.grid.nodes
    Y = np.concatenate([traj.states, traj.costates], axis=1)
    for j in range(1, segments):
        t = min(j * span, nodes[-1])
        for c in range(2 * n):
            Z[j, c] = np.interp(t, nodes, Y[:, c])
    return Z


def _multi_residual(prob: OcpDef, endpoints: np.ndarray,
                    Z: np.ndarray) -> np.ndarray:
    """Stacked matching defects plus the terminal condition."""
    n = prob.n
    parts = []
    if Z.shape[0] > 1:
        parts.append((endpoints[:-1, :2 * n] - Z[1:]).ravel())
    parts.append(_terminal_residual(prob, endpoints[-1:])[0])
    return np.concatenate(parts)


def _newton_loop(prob: OcpDef, Z: np.ndarray, span: float,
                 spec: ShootingSpec, ispec: integrate.IntegratorSpec,
                 target: float, budget: int):
    """Damped Newton on the multiple-shooting residual at one tolerance.

    Returns (Z, F, ivp, fnorm, iters, failure); failure is None unless the
    iteration died (line search exhausted, singular or non-integrable
    Jacobian).  The caller decides whether a failure is fatal, which lets a
    coarse-tolerance phase hand over to a tight one mid-solve.
    """
    n = prob.n
    K = Z.shape[0]

    def residual_of(Zc):
        try:
            res = _propagate(prob, Zc, span, ispec)
        except _PROPAGATION_FAILURES:
            return None, None
        return _multi_residual(prob, res.states[-1], Zc), res

    F, ivp = residual_of(Z)
    if F is None:
        return Z, None, None, float("inf"), 0, \
            "initial guess integration failed"
    fnorm = float(np.linalg.norm(F))
    iters = 0
    stalls = 0

    # unknown layout: lambda(0) (n), then each interior boundary (2n)
    n_unknown = n + (K - 1) * 2 * n
    col_of_seg = [0] + [n + (j - 1) * 2 * n for j in range(1, K)]
    width_of_seg = [n] + [2 * n] * (K - 1)

    while fnorm > target and iters < budget:
        # one lockstep batch: per segment a base row then one forward-bumped
        # row per unknown coordinate of that segment's start
        rows = []
        base_idx = []
        deltas = []
        for j in range(K):
            base_idx.append(len(rows))
            rows.append(Z[j])
            free = slice(n, 2 * n) if j == 0 else slice(0, 2 * n)
            d = spec.fd_eps * np.maximum(1.0, np.abs(Z[j, free]))
            deltas.append(d)
            for c, dc in zip(range(free.start, free.stop), d):
                r = Z[j].copy()
                r[c] += dc
                rows.append(r)
        try:
            batch = _propagate(prob, np.asarray(rows), span, ispec)
        except _PROPAGATION_FAILURES as exc:
            return Z, F, ivp, fnorm, iters, \
                f"Jacobian integration failed: {exc}"
        ends = batch.states[-1]

        # base residual re-read from the batch so the Newton pair (J, F)
        # shares one step sequence
        base_ends = ends[base_idx]
        F_base = _multi_residual(prob, base_ends, Z)

        jac = np.zeros((n_unknown, n_unknown))
        for j in range(K):
            b = base_idx[j]
            w = width_of_seg[j]
            diff = (ends[b + 1:b + 1 + w, :2 * n] - ends[b, :2 * n])
            dphi = diff.T / deltas[j]          # (2n, w)
            col = col_of_seg[j]
            if j < K - 1:
                jac[j * 2 * n:(j + 1) * 2 * n, col:col + w] = dphi
            else:
                rho_rows = _terminal_residual(prob, ends[b:b + 1 + w])
                drho = (rho_rows[1:] - rho_rows[0]).T / deltas[j]
                jac[-n:, col:col + w] = drho
            if j >= 1:
                rows_j = slice((j - 1) * 2 * n, j * 2 * n)
                jac[rows_j, col:col + w] -= np.eye(2 * n)
        try:
            step = np.linalg.solve(jac, -F_base)
        except np.linalg.LinAlgError as exc:
            return Z, F, ivp, fnorm, iters, \
                f"singular shooting Jacobian: {exc}"

        def try_step(s_vec, alpha):
            Zc = Z.copy()
            Zc[0, n:] += alpha * s_vec[:n]
            if K > 1:
                Zc[1:] += alpha * s_vec[n:].reshape(K - 1, 2 * n)
            F_c, ivp_c = residual_of(Zc)
            if F_c is None:
                return None
            cnorm = float(np.linalg.norm(F_c))
            if math.isfinite(cnorm) and cnorm < fnorm:
                return Zc, F_c, ivp_c, cnorm
            return None

        hit = None
        alpha = spec.damping
        for _ in range(spec.max_backtracks + 1):
            hit = try_step(step, alpha)
            if hit is not None:
                break
            alpha *= 0.5

        if hit is None:
            # far from the solution the Newton direction can point uphill
            # for the least-squares merit; fall back to Levenberg-Marquardt
            # steps built from the same Jacobian, which blend toward
            # steepest descent as mu grows
            jtj = jac.T @ jac
            jtf = jac.T @ F_base
            scale = np.maximum(np.diag(jtj), 1e-12)
            mu = 1e-3
            while mu < 1e12:
                try:
                    lm = np.linalg.solve(jtj + mu * np.diag(scale), -jtf)
                except np.linalg.LinAlgError:
                    break
                hit = try_step(lm, 1.0)
                if hit is not None:
                    break
                mu *= 100.0

        if hit is None:
            return Z, F, ivp, fnorm, iters, \
                f"backtracking failed at residual {fnorm:.3e}"
        new_fnorm = hit[3]
        stalls = stalls + 1 if new_fnorm > 0.9 * fnorm else 0
        Z, F, ivp, fnorm = hit
        iters += 1
        if stalls >= 3:
            # a crawl this slow never recovers; bail out so continuation
            # can retry from a closer stage instead
            return Z, F, ivp, fnorm, iters, \
                f"progress stalled at residual {fnorm:.3e}"

    return Z, F, ivp, fnorm, iters, None


def solve_shooting(prob: OcpDef, x0, lam0=None,
                   spec: ShootingSpec | None = None,
                   horizon: float | None = None,
                   init_traj: OpenLoopSolution | None = None
                   ) -> OpenLoopSolution:
    """Damped-Newton shooting for the PMP boundary value problem.

    Unknowns are lambda(0) plus, when the horizon spans several segments,
    the interior segment-boundary (x, lambda) pairs; the residual couples
    segment endpoints to the next segment's start and imposes the terminal
    costate condition.  init_traj, when given, seeds the interior
    boundaries (continuation warm start).

    The iteration runs in two phases: most of the contraction happens at
    the loose guess tolerance, then the tight solver tolerance polishes,
    which avoids paying for accurate integrations far from the solution.

    Raises NewtonDiverged when a full backtracking sweep cannot reduce the
    residual; returns converged=False when the iteration budget runs out
    while still making progress.
    """
    spec = spec or ShootingSpec()
    x0 = np.asarray(x0, dtype=float)
    n = prob.n
    horizon = prob.horizon_T if horizon is None else float(horizon)
    lam = (np.zeros(n) if lam0 is None
           else np.asarray(lam0, dtype=float).copy())
    K = _segments_for(horizon, spec)
    span = horizon / K

    if init_traj is None or K == 1:
        Z = _cold_boundaries(prob, x0, lam, K, span, spec)
    else:
        Z = _warm_boundaries(prob, x0, lam, K, span, init_traj)

    iters = 0
    if spec.guess_integrator.abs_tol > spec.integrator.abs_tol:
        coarse_target = max(1e-4, 1e3 * spec.residual_tol)
        Z, F_c, ivp_c, fnorm_c, it_coarse, fail_c = _newton_loop(
            prob, Z, span, spec, spec.guess_integrator, coarse_target,
            spec.max_newton_iters)
        # coarse failures are not fatal: the tight phase restarts from the
        # best point the coarse phase reached
        iters += it_coarse
        if F_c is not None and fnorm_c > 100.0 * coarse_target:
            # nowhere near the solution; polishing at tight tolerance
            # cannot rescue this point, so report the failure cheaply
            rnorm = float(np.linalg.norm(F_c[-n:]))
            return _build_solution(prob, ivp_c, Z, horizon, spec, rnorm,
                                   False, iters)

    Z, F, ivp, fnorm, it_tight, failure = _newton_loop(
        prob, Z, span, spec, spec.integrator, spec.residual_tol,
        spec.max_newton_iters)
    iters += it_tight
    if F is None:
        raise NewtonDiverged(failure)
    if fnorm > spec.residual_tol and failure is not None:
        raise NewtonDiverged(failure)

    rnorm = float(np.linalg.norm(F[-n:]))
    return _build_solution(prob, ivp, Z, horizon, spec, rnorm,
                           fnorm <= spec.residual_tol, iters)


def _build_solution(prob, ivp, Z, horizon, spec, rnorm, converged, iters):
    """Resample the converged segments onto a uniform output grid."""
    n = prob.n
    K = Z.shape[0]
    span = ivp.grid.nodes[-1]
    out_grid = integrate.TimeGrid.uniform(0.0, horizon, spec.output_nodes)
    Y = np.empty((spec.output_nodes, 2 * n))
    for i, t in enumerate(out_grid.nodes):
        j = min(int(t / span), K - 1) if span > 0 else 0
        tau = min(max(t - j * span, 0.0), span)
        Y[i] = integrate.dense_sample(ivp, np.array([tau]))[0, j, :2 * n]
    states = Y[:, :n]
    costates = Y[:, n:]
    controls = prob.u_star_batch(states, costates)
    x_T = ivp.states[-1, K - 1, :n]
    cost = float(math.fsum(ivp.states[-1, :, 2 * n])) + prob.M(x_T)
    return OpenLoopSolution(
        grid=out_grid, states=states, costates=costates, controls=controls,
        total_cost=cost, residual=rnorm, converged=converged,
        newton_iters=iters)


def initial_residual(prob: OcpDef, x0, lam0=None,
                     spec: ShootingSpec | None = None,
                     horizon: float | None = None,
                     init_traj: OpenLoopSolution | None = None) -> float:
    """Residual norm the Newton iteration would start from (no solving)."""
    spec = spec or ShootingSpec()
    x0 = np.asarray(x0, dtype=float)
    n = prob.n
    horizon = prob.horizon_T if horizon is None else float(horizon)
    lam = (np.zeros(n) if lam0 is None
           else np.asarray(lam0, dtype=float).copy())
    K = _segments_for(horizon, spec)
    span = horizon / K
    if init_traj is None or K == 1:
        Z = _cold_boundaries(prob, x0, lam, K, span, spec)
    else:
        Z = _warm_boundaries(prob, x0, lam, K, span, init_traj)
    try:
        res = _propagate(prob, Z, span, spec.integrator)
    except _PROPAGATION_FAILURES:
        return float("inf")
    return float(np.linalg.norm(_multi_residual(prob, res.states[-1], Z)))


def solve_with_continuation(prob: OcpDef, x0,
                            schedule: ContinuationSchedule | None = None,
                            spec: ShootingSpec | None = None) -> OpenLoopSolution:
    """Chain of shooting solves, each stage warm-started from the last.

    Time marching passes the previous stage's solution along as the next
    stage's interior initialization; space marching does the same with the
    scaled initial state.  A stage that refuses to converge directly is
    reached by bisecting toward it from the last converged scale (bounded
    number of insertions); the scheduled stages are still visited in order.
    """
    spec = spec or ShootingSpec()
    schedule = schedule or default_schedule(prob.name)
    x0 = np.asarray(x0, dtype=float)

    def stage_problem(scale):
        if schedule.kind == "time":
            return x0, scale * prob.horizon_T
        return scale * x0, prob.horizon_T

    sol = None
    lam0 = None
    done = 0.0
    inserts_left = 16
    for k, s in enumerate(schedule.stages):
        pending = [s]
        while pending:
            t = pending[-1]
            stage_x0, stage_T = stage_problem(t)
            try:
                cand = solve_shooting(prob, stage_x0, lam0, spec,
                                      horizon=stage_T, init_traj=sol)
                err = (None if cand.converged
                       else f"residual {cand.residual:.3e}")
            except NewtonDiverged as exc:
                cand, err = None, str(exc)
            if err is None:
                sol, lam0, done = cand, cand.costates[0], t
                pending.pop()
                continue
            inserts_left -= 1
            if inserts_left < 0 or (t - done) <= 1e-3:
                raise ContinuationFailed(k, f"stage {k} (scale {t:g}): {err}")
            pending.append(0.5 * (done + t))
    return sol


def pmp_replay_control(prob: OcpDef, sol: OpenLoopSolution):
    """Open-loop control replay u(t) = u*(x~(t), lambda~(t)).

    x and lambda are interpolated with cubic Hermite segments whose node
    derivatives come from the minimum-principle dynamics, so the replayed
    control is accurate to the output grid's interpolation order.
    """
    nodes = sol.grid.nodes
    X = sol.states
    Lam = sol.costates
    U = prob.u_star_batch(X, Lam)
    dX = prob.f_batch(X, U)
    dfdx = prob.df_dx_batch(X, U)
    dLam = -np.einsum("bij,bi->bj", dfdx, Lam) - prob.dL_dx_batch(X, U)
    YL = np.concatenate([X, Lam], axis=1)
    dYL = np.concatenate([dX, dLam], axis=1)

    def u_of_t(t):
        t = min(max(float(t), nodes[0]), nodes[-1])
        k = int(np.searchsorted(nodes, t, side="right")) - 1
        k = min(max(k, 0), nodes.size - 2)
        y = integrate.hermite_eval(nodes[k], nodes[k + 1], YL[k], dYL[k],
                                   YL[k + 1], dYL[k + 1], t)
        return prob.u_star_batch(y[None, :prob.n], y[None, prob.n:])[0]

    return u_of_t


@dataclass
class LqrSolution:
    """Scalar linear-quadratic oracle built from the Riccati equation."""
    a: float
    b: float
    q: float
    r: float
    m_T: float
    horizon: float
    _p_res: integrate.IvpResult

    def P(self, t: float) -> float:
        s = min(max(self.horizon - float(t), 0.0), self.horizon)
        return float(integrate.dense_sample(self._p_res, np.array([s]))[0, 0])

    def cost(self, x0: float) -> float:
        return self.P(0.0) * float(x0) ** 2

    def lam0(self, x0: float) -> float:
        return 2.0 * self.P(0.0) * float(x0)

    def u_of_t(self, x0: float):
        """Optimal open-loop control t -> u(t) for one initial state."""
        gain = self.b / self.r

        def xdot(t, x):
            return (self.a - self.b * gain * self.P(t)) * x

        xres = integrate.integrate_ivp(
            xdot, np.array([float(x0)]), (0.0, self.horizon),
            integrate.IntegratorSpec(abs_tol=1e-12, rel_tol=1e-12))

        def u(t):
            t = min(max(float(t), 0.0), self.horizon)
            x = integrate.dense_sample(xres, np.array([t]))[0, 0]
            return np.array([-gain * self.P(t) * x])

        return u

    def u_feedback(self, t: float, x: float) -> np.ndarray:
        """Optimal feedback u(t, x); exact for the scalar LQR."""
        return np.array([-(self.b / self.r) * self.P(t) * float(x)])


def lqr_oracle(a: float, b: float, q: float, r: float, m_T: float,
               horizon: float) -> LqrSolution:
    """Integrate the scalar Riccati equation backward at tight tolerance.

    In reversed time s = T - t: dP/ds = 2 a P - P^2 b^2 / r + q, P(0) = m_T.
    """

    def rhs(s, P):
        return 2.0 * a * P - P * P * b * b / r + q

    res = integrate.integrate_ivp(
        rhs, np.array([float(m_T)]), (0.0, horizon),
        integrate.IntegratorSpec(abs_tol=1e-12, rel_tol=1e-12))
    return LqrSolution(a=a, b=b, q=q, r=r, m_T=m_T, horizon=horizon,
                       _p_res=res)
