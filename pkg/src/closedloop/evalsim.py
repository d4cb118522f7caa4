"""Closed-loop evaluation of feedback controllers.

Rollouts integrate the true dynamics under a controller that may only see a
corrupted measurement: noise is piecewise-constant (zero-order hold) so the
disturbance path is well defined independently of the adaptive integrator's
step selection. Costs are compared pathwise against open-loop optimal
references as ratios, then summarized.

Divergence (non-finite states, pitch singularity, step exhaustion) marks the
run instead of raising: evaluation has to survive bad controllers.
"""

from __future__ import annotations

import concurrent.futures
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import net
from .errors import (ContinuationFailed, GimbalLock, MissingReference,
                     NewtonDiverged, NonFiniteState, StepLimitExceeded,
                     StorageError, TooManyFailures)
from .integrate import IntegratorSpec, TimeGrid, integrate_ivp
from .ocp import FARMABLE, OcpDef, make_ocp
from .openloop import ContinuationSchedule, ShootingSpec, solve_with_continuation
from .rngutil import child_rng, child_seed

_ROLLOUT_FAILURES = (NonFiniteState, StepLimitExceeded, GimbalLock)

# Noiseless rollouts keep the same hold segmentation as noisy ones so a
# sigma=0 NoiseSpec reproduces the noise-free run bit for bit.
DEFAULT_HOLD_DT = 0.01


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement corruption: per-component uniform in [-sigma, sigma],
    redrawn every hold_dt seconds and held constant in between."""

    sigma: float
    hold_dt: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.hold_dt <= 0:
            raise ValueError(f"hold_dt must be > 0, got {self.hold_dt}")


@dataclass
class ClosedLoopRun:
    grid: TimeGrid
    states: np.ndarray       # (nodes, n)
    controls: np.ndarray     # (nodes, m), as the controller saw its input
    total_cost: float        # inf when diverged
    diverged: bool
    noise_sigma: float
    noise_hold_dt: float
    noise_seed: int | None


@dataclass
class CostRatioStats:
    ratios: np.ndarray
    mean: float
    std: float
    max: float
    min: float
    median: float
    n_diverged: int

    @staticmethod
    def from_ratios(ratios, n_diverged: int) -> "CostRatioStats":
        r = np.sort(np.asarray(ratios, dtype=float))
        if r.size == 0:
            return CostRatioStats(r, math.nan, math.nan, math.nan,
                                  math.nan, math.nan, n_diverged)
        # median tie rule: lower of the two middles for even counts
        return CostRatioStats(
            ratios=r, mean=float(r.mean()), std=float(r.std()),
            max=float(r[-1]), min=float(r[0]),
            median=float(r[(r.size - 1) // 2]), n_diverged=n_diverged)


def _as_policy(controller):
    """Accept MlpParams or any callable(t, X(B,n)) -> U(B,m)."""
    if callable(controller):
        return controller
    return lambda t, X: net.forward_batch(controller, t, X)


def rollout_closed_loop(prob: OcpDef, controller, x0,
                        ispec: IntegratorSpec | None = None,
                        noise: NoiseSpec | None = None,
                        horizon: float | None = None) -> ClosedLoopRun:
    """Integrate x' = f(x, u(t, x + n(t))) with running-cost augmentation.

    The dynamics always see the true state; only the controller input is
    corrupted. All noise draws happen up front from the NoiseSpec seed, so
    the disturbance path does not depend on integrator behavior.
    """
    ispec = ispec or IntegratorSpec()
    policy = _as_policy(controller)
    x0 = np.asarray(x0, dtype=float)
    n = prob.n
    H = prob.horizon_T if horizon is None else float(horizon)

    hold = noise.hold_dt if noise is not None else DEFAULT_HOLD_DT
    n_seg = max(1, int(math.ceil(H / hold - 1e-12)))
    if noise is not None:
        rng = child_rng(noise.seed, "measurement-noise")
        draws = rng.uniform(-noise.sigma, noise.sigma, size=(n_seg, n))
    else:
        draws = np.zeros((n_seg, n))

    seg_spec = ispec if ispec.initial_step is not None else \
        replace(ispec, initial_step=hold)

    def rhs_for(offset):
        def rhs(t, y):
            u = policy(t, y[None, :n] + offset[None, :])
            dx = prob.f_batch(y[None, :n], u)[0]
            dc = prob.L_batch(y[None, :n], u)[0]
            return np.concatenate([dx, [dc]])
        return rhs

    y = np.concatenate([x0, [0.0]])
    nodes = [0.0]
    states = [x0.copy()]
    controls = [policy(0.0, x0[None] + draws[0][None])[0]]
    diverged = False
    for j in range(n_seg):
        t_lo = j * hold
        t_hi = min(H, (j + 1) * hold)
        if t_hi <= t_lo:
            break
        try:
            res = integrate_ivp(rhs_for(draws[j]), y, (t_lo, t_hi), seg_spec)
        except _ROLLOUT_FAILURES:
            diverged = True
            break
        y = res.states[-1]
        for k in range(1, res.grid.nodes.size):
            tk = float(res.grid.nodes[k])
            xk = res.states[k, :n]
            nodes.append(tk)
            states.append(xk.copy())
            controls.append(policy(tk, (xk + draws[j])[None])[0])

    if diverged:
        total = math.inf
    else:
        total = float(y[n]) + prob.M(y[:n])
        if not math.isfinite(total):
            diverged, total = True, math.inf
    return ClosedLoopRun(
        grid=TimeGrid(np.asarray(nodes)),
        states=np.asarray(states),
        controls=np.asarray(controls),
        total_cost=total,
        diverged=diverged,
        noise_sigma=noise.sigma if noise is not None else 0.0,
        noise_hold_dt=noise.hold_dt if noise is not None else math.inf,
        noise_seed=noise.seed if noise is not None else None)


def per_state_noise(noise: NoiseSpec | None, index: int) -> NoiseSpec | None:
    """Independent noise stream for validation state `index`."""
    if noise is None:
        return None
    derived = int(child_seed(noise.seed, "state", index).generate_state(1)[0])
    return replace(noise, seed=derived)


# Evaluation workers rebuild the problem by name (OcpDef closures do not
# cross process boundaries) and keep the network weights from the pool
# initializer; each call ships only the state and its noise stream.
_EVAL_FARM: dict = {}


def _eval_farm_init(name: str, horizon: float, params,
                    ispec: IntegratorSpec | None) -> None:
    _EVAL_FARM["prob"] = make_ocp(name, horizon)
    _EVAL_FARM["params"] = params
    _EVAL_FARM["ispec"] = ispec


def _eval_farm_run(arg):
    x0, noise = arg
    run = rollout_closed_loop(_EVAL_FARM["prob"], _EVAL_FARM["params"], x0,
                              _EVAL_FARM["ispec"], noise)
    return run.diverged, run.total_cost


def evaluate_cost_ratio(prob: OcpDef, controller, states, reference_costs,
                        ispec: IntegratorSpec | None = None,
                        noise: NoiseSpec | None = None,
                        workers: int = 1) -> CostRatioStats:
    """Pathwise closed-loop cost over optimal cost, one ratio per state.

    Diverged runs are excluded from the summary and counted. Each state
    gets its own noise stream derived from the NoiseSpec seed and the
    state's index, so results do not depend on evaluation order; with
    workers > 1 the rollouts run concurrently (network controllers on
    registry problems only) and are reduced in index order.
    """
    states = np.asarray(states, dtype=float)
    refs = np.asarray(reference_costs, dtype=float)
    if refs.shape != (states.shape[0],):
        raise MissingReference(
            f"{states.shape[0]} states but {refs.size} reference costs")
    if not np.all(np.isfinite(refs)) or np.any(refs <= 0):
        bad = int(np.argmin(refs))
        raise MissingReference(
            f"reference cost for state {bad} is {refs[bad]}; "
            f"ratios need finite positive references")
    count = states.shape[0]
    if (workers > 1 and count > 1 and prob.name in FARMABLE
            and not callable(controller)):
        jobs = [(states[i], per_state_noise(noise, i)) for i in range(count)]
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=workers, initializer=_eval_farm_init,
                initargs=(prob.name, prob.horizon_T, controller,
                          ispec)) as pool:
            outcomes = list(pool.map(_eval_farm_run, jobs))
    else:
        outcomes = []
        for i in range(count):
            run = rollout_closed_loop(prob, controller, states[i], ispec,
                                      per_state_noise(noise, i))
            outcomes.append((run.diverged, run.total_cost))
    ratios = []
    n_diverged = 0
    for i, (diverged, cost) in enumerate(outcomes):
        if diverged:
            n_diverged += 1
        else:
            ratios.append(cost / refs[i])
    return CostRatioStats.from_ratios(ratios, n_diverged)


def export_cdf(stats: CostRatioStats, path) -> None:
    """Sorted (ratio, k/N) pairs as a two-column CSV for plotting."""
    r = np.sort(np.asarray(stats.ratios, dtype=float))
    if r.size == 0:
        raise ValueError("no ratios to export")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write("ratio,cdf\n")
            for k, val in enumerate(r, start=1):
                fh.write(f"{float(val)!r},{k / r.size!r}\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write CDF table {path}: {exc}") from exc


@dataclass
class ValidationSet:
    """Reference states and their open-loop optimal costs.

    usable is False where the reference cost is zero (equilibrium starts);
    such states cannot enter a cost ratio.
    """

    states: np.ndarray   # (count, n)
    costs: np.ndarray    # (count,)
    usable: np.ndarray   # (count,) bool


def build_validation_set(prob: OcpDef, count: int, seed: int,
                         spec: ShootingSpec | None = None,
                         schedule: ContinuationSchedule | None = None,
                         max_attempts: int | None = None) -> ValidationSet:
    """Solver-converged reference costs for `count` sampled initial states.

    Failed continuation solves are replaced by fresh samples until the
    attempt budget (3x count + 10 by default) runs out.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = child_rng(seed, "validation-states")
    budget = max_attempts if max_attempts is not None else 3 * count + 10
    states, costs = [], []
    attempts = 0
    while len(states) < count:
        if attempts >= budget:
            raise TooManyFailures(
                f"{attempts} solve attempts produced only {len(states)} "
                f"of {count} references")
        x0 = prob.init_box.sample(rng, 1)[0]
        attempts += 1
        try:
            sol = solve_with_continuation(prob, x0, schedule, spec)
        except (ContinuationFailed, NewtonDiverged) + _ROLLOUT_FAILURES:
            continue
        states.append(x0)
        costs.append(sol.total_cost)
    costs = np.asarray(costs)
    return ValidationSet(states=np.asarray(states), costs=costs,
                         usable=costs > 0.0)
