"""Open-loop training datasets: sampling, generation, persistence.

A dataset is a flat table of (t, x, u) records read off converged open-loop
solutions. Uniform generation solves from box-sampled initial states and
samples every solution on one uniform time grid. Adaptive generation spends
the same initial-state budget in rounds: each round trains an interim
controller on what has been collected so far, rolls it out to the next
temporal checkpoint, and solves fresh open-loop problems from wherever the
rollouts actually ended up, so later-time records come from the states the
controller will visit rather than from the optimal flow alone.

Failures (diverged solves or rollouts) are skipped and counted; more than
20% of the budget failing aborts generation.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import (ContinuationFailed, NewtonDiverged, SchemaMismatch,
                     StorageError, TooManyFailures)
from .integrate import IntegratorSpec
from .ocp import FARMABLE, InitBox, OcpDef, make_ocp
from .openloop import (ContinuationSchedule, ShootingSpec, default_schedule,
                       solve_with_continuation)
from .rngutil import child_rng

DATASET_SCHEMA = "closedloop-dataset/1"
META_SCHEMA = "closedloop-dataset-meta/1"

FAILURE_CEILING = 0.2


@dataclass(frozen=True)
class SampleRecord:
    t: float
    x: np.ndarray
    u: np.ndarray


@dataclass
class Dataset:
    """Record table stored as parallel arrays plus provenance meta."""

    ts: np.ndarray    # (N,)
    xs: np.ndarray    # (N, n)
    us: np.ndarray    # (N, m)
    meta: dict

    def __len__(self) -> int:
        return self.ts.size

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(float(self.ts[i]), self.xs[i].copy(),
                            self.us[i].copy())

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.ts[idx].copy(), self.xs[idx].copy(),
                       self.us[idx].copy(), dict(self.meta))


@dataclass(frozen=True)
class AdaptiveGrid:
    """Temporal checkpoints 0 = tau_0 < tau_1 < ... < tau_K = T."""

    checkpoints: tuple

    def __post_init__(self):
        cps = tuple(float(c) for c in self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if len(cps) < 2:
            raise ValueError("grid needs at least the two endpoints")
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError(f"checkpoints must increase strictly: {cps}")
        if cps[0] != 0.0:
            raise ValueError(f"first checkpoint must be 0, got {cps[0]}")

    def validate_horizon(self, horizon: float):
        if not math.isclose(self.checkpoints[-1], horizon,
                            rel_tol=1e-12, abs_tol=0.0):
            raise ValueError(
                f"grid ends at {self.checkpoints[-1]}, horizon is {horizon}")


def sample_initial_states(box: InitBox, count: int, seed: int) -> np.ndarray:
    """Uniform box samples, deterministic per seed. Shape (count, n)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return box.sample(child_rng(seed, "init-states"), count)


def _solver_meta(spec: ShootingSpec,
                 schedule: ContinuationSchedule) -> dict:
    return {
        "residual_tol": spec.residual_tol,
        "max_newton_iters": spec.max_newton_iters,
        "segment_time": spec.segment_time,
        "integrator_tol": [spec.integrator.abs_tol, spec.integrator.rel_tol],
        "schedule_kind": schedule.kind,
        "schedule_stages": list(schedule.stages),
    }


# Worker processes rebuild the problem from the registry by name; OcpDef
# holds closures, which do not cross a process boundary.
_FARM: dict = {}


def _farm_init(name: str, horizon: float,
               schedule: ContinuationSchedule, spec: ShootingSpec) -> None:
    _FARM["prob"] = make_ocp(name, horizon)
    _FARM["schedule"] = schedule
    _FARM["spec"] = spec


def _farm_solve(x0):
    try:
        return solve_with_continuation(_FARM["prob"], x0,
                                       _FARM["schedule"], _FARM["spec"])
    except (ContinuationFailed, NewtonDiverged):
        return None


def _solve_many(solprob: OcpDef, x0s, schedule: ContinuationSchedule,
                solspec: ShootingSpec, workers: int):
    """One solution or None per state, always in sampling order.

    workers > 1 fans the solves out over a process pool (registry problems
    only); assembly back in index order keeps the result independent of
    scheduling.
    """
    if workers > 1 and len(x0s) > 1 and solprob.name in FARMABLE:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=workers, initializer=_farm_init,
                initargs=(solprob.name, solprob.horizon_T,
                          schedule, solspec)) as pool:
            return list(pool.map(_farm_solve, list(x0s)))
    sols = []
    for x0 in x0s:
        try:
            sols.append(solve_with_continuation(solprob, x0, schedule,
                                                solspec))
        except (ContinuationFailed, NewtonDiverged):
            sols.append(None)
    return sols


def _records_from_states(prob: OcpDef, x0s, nodes_per_traj: int,
                         spec: ShootingSpec, schedule: ContinuationSchedule,
                         t_offset: float, horizon: float, on_solution=None,
                         workers: int = 1):
    """Solve from each state over [0, horizon]; sample converged solutions.

    Returns (ts, xs, us, n_failed) with times shifted by t_offset.
    on_solution, when given, receives each converged solution in sampling
    order (before the record shuffle), for callers auditing the solves.
    """
    solprob = prob if horizon == prob.horizon_T else \
        replace(prob, horizon_T=horizon)
    solspec = replace(spec, output_nodes=nodes_per_traj)
    ts, xs, us = [], [], []
    n_failed = 0
    for sol in _solve_many(solprob, x0s, schedule, solspec, workers):
        if sol is None:
            n_failed += 1
            continue
        if on_solution is not None:
            on_solution(sol)
        ts.append(sol.grid.nodes + t_offset)
        xs.append(sol.states)
        us.append(sol.controls)
    if ts:
        return (np.concatenate(ts), np.concatenate(xs), np.concatenate(us),
                n_failed)
    n, m = prob.n, prob.m
    return np.empty(0), np.empty((0, n)), np.empty((0, m)), n_failed


def generate_uniform(prob: OcpDef, n_traj: int, nodes_per_traj: int,
                     seed: int, spec: ShootingSpec | None = None,
                     schedule: ContinuationSchedule | None = None,
                     on_solution=None, workers: int = 1) -> Dataset:
    """Open-loop dataset from box-uniform initial states.

    Each converged solve contributes nodes_per_traj records on the uniform
    time grid; failed solves are skipped and counted in meta. Records are
    shuffled deterministically by the seed; the result does not depend on
    the worker count.
    """
    if n_traj < 1 or nodes_per_traj < 2:
        raise ValueError("need n_traj >= 1 and nodes_per_traj >= 2")
    spec = spec or ShootingSpec()
    schedule = schedule or default_schedule(prob.name)
    x0s = sample_initial_states(prob.init_box, n_traj, seed)
    ts, xs, us, n_failed = _records_from_states(
        prob, x0s, nodes_per_traj, spec, schedule, 0.0, prob.horizon_T,
        on_solution=on_solution, workers=workers)
    if n_failed > FAILURE_CEILING * n_traj:
        raise TooManyFailures(
            f"{n_failed} of {n_traj} open-loop solves failed")
    perm = child_rng(seed, "record-shuffle").permutation(ts.size)
    meta = {
        "problem": prob.name, "horizon_T": prob.horizon_T,
        "sampling": "uniform", "n_trajectories": n_traj,
        "nodes_per_trajectory": nodes_per_traj, "seed": seed,
        "solver": _solver_meta(spec, schedule),
        "n_converged": n_traj - n_failed, "n_failed": n_failed,
        "n_records": int(ts.size),
    }
    return Dataset(ts[perm], xs[perm], us[perm], meta)


def generate_adaptive(prob: OcpDef, grid: AdaptiveGrid, n_traj: int,
                      nodes_per_traj: int, seed: int, trainer,
                      spec: ShootingSpec | None = None,
                      schedule: ContinuationSchedule | None = None,
                      rollout_integ: IntegratorSpec | None = None,
                      on_solution=None, workers: int = 1) -> Dataset:
    """IVP-enhanced dataset over the checkpoint grid.

    Round 0 is plain uniform generation over [0, T] and reuses the uniform
    path's random streams, so a grid with no interior checkpoints reproduces
    generate_uniform record for record. Every later round k trains an
    interim controller via `trainer(accumulated_dataset)`, rolls it out from
    fresh initial states to checkpoint tau_k, and solves open-loop problems
    on [tau_k, T] from the states those rollouts reached. The initial-state
    budget across all rounds totals n_traj.
    """
    if n_traj < 1 or nodes_per_traj < 2:
        raise ValueError("need n_traj >= 1 and nodes_per_traj >= 2")
    grid.validate_horizon(prob.horizon_T)
    spec = spec or ShootingSpec()
    schedule = schedule or default_schedule(prob.name)
    rollout_integ = rollout_integ or IntegratorSpec()
    T = prob.horizon_T
    rounds = len(grid.checkpoints) - 1
    counts = [n_traj // rounds + (1 if i < n_traj % rounds else 0)
              for i in range(rounds)]

    # round 0: uniform over the whole horizon, same streams as uniform mode
    x0s = sample_initial_states(prob.init_box, counts[0], seed)
    ts, xs, us, n_failed = _records_from_states(
        prob, x0s, nodes_per_traj, spec, schedule, 0.0, T,
        on_solution=on_solution, workers=workers)
    perm = child_rng(seed, "record-shuffle").permutation(ts.size)
    ts, xs, us = ts[perm], xs[perm], us[perm]
    blocks = [(ts, xs, us)]
    round_meta = [{"start_time": 0.0, "n_states": counts[0],
                   "n_failed": n_failed, "n_records": int(ts.size)}]

    from .evalsim import rollout_closed_loop  # here to keep import one-way

    total_failed = n_failed
    for k in range(1, rounds):
        tau = grid.checkpoints[k]
        acc = Dataset(np.concatenate([b[0] for b in blocks]),
                      np.concatenate([b[1] for b in blocks]),
                      np.concatenate([b[2] for b in blocks]),
                      {"problem": prob.name, "round": k})
        if len(acc) == 0:
            raise TooManyFailures(
                "no records accumulated before round "
                f"{k}; cannot train an interim controller")
        controller = trainer(acc)
        fresh = prob.init_box.sample(child_rng(seed, "adaptive-x0", k),
                                     counts[k])
        reached = []
        round_failed = 0
        for x0 in fresh:
            run = rollout_closed_loop(prob, controller, x0, rollout_integ,
                                      horizon=tau)
            if run.diverged or not np.all(np.isfinite(run.states[-1])):
                round_failed += 1
                continue
            reached.append(run.states[-1])
        rts, rxs, rus, solve_failed = _records_from_states(
            prob, reached, nodes_per_traj, spec, schedule, tau, T - tau,
            on_solution=on_solution, workers=workers)
        round_failed += solve_failed
        perm = child_rng(seed, "record-shuffle", k).permutation(rts.size)
        blocks.append((rts[perm], rxs[perm], rus[perm]))
        round_meta.append({"start_time": tau, "n_states": counts[k],
                           "n_failed": round_failed,
                           "n_records": int(rts.size)})
        total_failed += round_failed

    if total_failed > FAILURE_CEILING * n_traj:
        raise TooManyFailures(
            f"{total_failed} of the {n_traj} budgeted states failed "
            f"across {rounds} rounds")
    ts = np.concatenate([b[0] for b in blocks])
    xs = np.concatenate([b[1] for b in blocks])
    us = np.concatenate([b[2] for b in blocks])
    meta = {
        "problem": prob.name, "horizon_T": T, "sampling": "adaptive",
        "grid": list(grid.checkpoints), "n_trajectories": n_traj,
        "nodes_per_trajectory": nodes_per_traj, "seed": seed,
        "solver": _solver_meta(spec, schedule),
        "n_converged": n_traj - total_failed, "n_failed": total_failed,
        "n_records": int(ts.size), "rounds": round_meta,
    }
    return Dataset(ts, xs, us, meta)


def write_dataset(ds: Dataset, path) -> None:
    """CSV records plus a JSON meta sidecar at <path>.meta.json.

    Floats are written at repr precision so read_dataset restores them
    bit for bit.
    """
    path = str(path)
    sidecar = f"{path}.meta.json"
    n = ds.xs.shape[1]
    m = ds.us.shape[1]
    header = (f"# {DATASET_SCHEMA} problem={ds.meta.get('problem', '?')} "
              f"n={n} m={m} records={len(ds)} "
              f"meta={os.path.basename(sidecar)}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(header + "\n")
        for i in range(len(ds)):
            row = [ds.ts[i], *ds.xs[i], *ds.us[i]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(f"{sidecar}.tmp", "w") as fh:
        json.dump({"schema": META_SCHEMA, "meta": ds.meta}, fh, indent=1,
                  allow_nan=False)
        fh.write("\n")
    os.replace(f"{sidecar}.tmp", sidecar)
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    """Inverse of write_dataset; validates schema, dims, and record count."""
    path = str(path)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or not lines[0].startswith(f"# {DATASET_SCHEMA} "):
        raise SchemaMismatch(
            f"missing dataset header tag {DATASET_SCHEMA!r} in {path}")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    try:
        n, m, count = int(fields["n"]), int(fields["m"]), \
            int(fields["records"])
    except (KeyError, ValueError) as exc:
        raise SchemaMismatch(f"malformed dataset header: {exc}") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise StorageError(
            f"dataset body has {len(body)} records, header declares {count}")
    ts = np.empty(count)
    xs = np.empty((count, n))
    us = np.empty((count, m))
    width = 1 + n + m
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != width:
            raise SchemaMismatch(
                f"record {i} has {len(parts)} columns, expected {width} "
                f"for n={n}, m={m}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise StorageError(f"record {i} malformed: {exc}") from exc
        ts[i] = vals[0]
        xs[i] = vals[1:1 + n]
        us[i] = vals[1 + n:]
    sidecar = f"{path}.meta.json"
    try:
        with open(sidecar) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise StorageError(f"missing meta sidecar {sidecar}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"meta sidecar malformed: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != META_SCHEMA:
        raise SchemaMismatch(f"expected meta schema {META_SCHEMA!r}")
    return Dataset(ts, xs, us, doc.get("meta", {}))
