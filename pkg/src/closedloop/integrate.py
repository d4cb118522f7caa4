"""Explicit Runge-Kutta integration with step records and dense output.

Two embedded adaptive pairs (Dormand-Prince 5(4), Bogacki-Shampine 3(2)) and a
fixed-step classic RK4. Every accepted step is recorded as (t, h, x) so a
trajectory can be replayed later with bit-identical arithmetic, which is what
makes rollouts differentiable downstream: the replay is a frozen computation
graph.

The first-same-as-last property of both adaptive pairs is deliberately not
exploited; recomputing stage one keeps the replay path trivially identical to
the adaptive path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteState, OutOfSpan, StepLimitExceeded

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class Tableau:
    """Butcher tableau of an explicit scheme.

    err holds b - b_hat when an embedded lower-order estimate exists, else
    None. error_order is the order of the less accurate member of the pair;
    the step controller exponent is 1/(error_order + 1).
    """

    def __init__(self, a, b, c, err, error_order):
        self.a = [np.asarray(row, dtype=float) for row in a]
        self.b = np.asarray(b, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.err = None if err is None else np.asarray(err, dtype=float)
        self.error_order = error_order
        self.stages = len(self.b)


_DOPRI54 = Tableau(
    a=[
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ],
    b=[35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    c=[0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1],
    err=[71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525,
         -1 / 40],
    error_order=4,
)

_BS23 = Tableau(
    a=[
        [],
        [1 / 2],
        [0, 3 / 4],
        [2 / 9, 1 / 3, 4 / 9],
    ],
    b=[2 / 9, 1 / 3, 4 / 9, 0],
    c=[0, 1 / 2, 3 / 4, 1],
    err=[2 / 9 - 7 / 24, 1 / 3 - 1 / 4, 4 / 9 - 1 / 3, -1 / 8],
    error_order=2,
)

_RK4 = Tableau(
    a=[
        [],
        [1 / 2],
        [0, 1 / 2],
        [0, 0, 1],
    ],
    b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
    c=[0, 1 / 2, 1 / 2, 1],
    err=None,
    error_order=4,
)

_TABLEAUS = {"dopri54": _DOPRI54, "bs23": _BS23, "rk4": _RK4}


def tableau(scheme: str) -> Tableau:
    try:
        return _TABLEAUS[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; "
                         f"expected one of {sorted(_TABLEAUS)}") from None


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    @staticmethod
    def uniform(t0: float, t1: float, n: int) -> "TimeGrid":
        return TimeGrid(np.linspace(t0, t1, n))


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "dopri54"
    abs_tol: float = 1e-5
    rel_tol: float = 1e-5
    max_steps: int = 100_000
    initial_step: float | None = None


@dataclass(frozen=True)
class StepRecord:
    t: float
    h: float
    x: np.ndarray


@dataclass
class IvpResult:
    grid: TimeGrid
    states: np.ndarray       # (n_nodes, n)
    derivs: np.ndarray       # f at nodes, used by dense output
    step_records: list[StepRecord] = field(default_factory=list)
    n_rejected: int = 0


def rk_step(f, t, x, h, tab: Tableau):
    """One explicit RK step. Returns (x_new, err_vec_or_None, stages).

    Both the adaptive loop and replay_fixed call this, so their arithmetic
    is identical by construction.
    """
    k = [f(t, x)]
    for i in range(1, tab.stages):
        a = tab.a[i]
        xi = x + h * sum(a[j] * k[j] for j in range(i) if a[j] != 0.0)
        k.append(f(t + tab.c[i] * h, xi))
    x_new = x + h * sum(tab.b[j] * k[j] for j in range(tab.stages)
                        if tab.b[j] != 0.0)
    err = None
    if tab.err is not None:
        err = h * sum(tab.err[j] * k[j] for j in range(tab.stages)
                      if tab.err[j] != 0.0)
    return x_new, err, k


def error_norm(err, x_old, x_new, abs_tol, rel_tol) -> float:
    """Scaled RMS error. For matrix states (lockstep batches of systems,
    one per row) each row is normed separately and the worst row governs,
    so every member still meets the tolerance."""
    scale = abs_tol + rel_tol * np.maximum(np.abs(x_old), np.abs(x_new))
    r = err / scale
    if r.ndim == 2:
        return float(np.sqrt(np.mean(r * r, axis=1)).max())
    return float(np.sqrt(np.mean(r * r)))


def step_factor(norm: float, error_order: int) -> float:
    if norm == 0.0:
        return MAX_FACTOR
    fac = SAFETY * norm ** (-1.0 / (error_order + 1))
    return min(MAX_FACTOR, max(MIN_FACTOR, fac))


def integrate_ivp(f, x0, span, spec: IntegratorSpec) -> IvpResult:
    """Integrate x' = f(t, x) over span = (t0, t1), t1 > t0."""
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise ValueError(f"span must be increasing, got {span}")
    tab = tableau(spec.scheme)
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("initial state is not finite")

    width = t1 - t0
    h = spec.initial_step if spec.initial_step is not None else width / 100.0
    h = min(h, width)
    adaptive = tab.err is not None

    t = t0
    nodes = [t0]
    states = [x.copy()]
    derivs = []
    records: list[StepRecord] = []
    hs: list[float] = []
    n_rejected = 0
    attempts = 0
    h_min = 1e-15 * width

    while t < t1:
        final = False
        remaining = width - math.fsum(hs)
        if remaining <= h or t + h >= t1:
            h = remaining
            final = True
        if attempts >= spec.max_steps:
            raise StepLimitExceeded(
                f"max_steps={spec.max_steps} reached at t={t}")
        attempts += 1

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            x_new, err, k = rk_step(f, t, x, h, tab)

        finite = np.all(np.isfinite(x_new)) and (
            err is None or np.all(np.isfinite(err)))
        if not finite:
            h = h * MIN_FACTOR
            if h < h_min:
                raise NonFiniteState(f"state stopped being finite near t={t}")
            n_rejected += 1
            continue

        if adaptive:
            norm = error_norm(err, x, x_new, spec.abs_tol, spec.rel_tol)
            if not math.isfinite(norm):
                h = h * MIN_FACTOR
                if h < h_min:
                    raise NonFiniteState(
                        f"error estimate stopped being finite near t={t}")
                n_rejected += 1
                continue
            if norm > 1.0:
                h = h * step_factor(norm, tab.error_order)
                if h < h_min:
                    raise NonFiniteState(f"step size underflow near t={t}")
                n_rejected += 1
                continue
            h_next = h * step_factor(norm, tab.error_order)
        else:
            h_next = h

        records.append(StepRecord(t=t, h=h, x=x.copy()))
        hs.append(h)
        derivs.append(k[0])
        t = t1 if final else t + h
        x = x_new
        nodes.append(t)
        states.append(x.copy())
        h = min(h_next, width)

    derivs.append(f(t1, x))
    return IvpResult(
        grid=TimeGrid(np.asarray(nodes)),
        states=np.asarray(states),
        derivs=np.asarray(derivs),
        step_records=records,
        n_rejected=n_rejected,
    )


def replay_fixed(f, x0, records: list[StepRecord],
                 scheme: str = "dopri54") -> IvpResult:
    """Re-run a recorded step sequence; states are bit-identical to the
    original when f and x0 match.

    The final node time is reconstructed as t + h of the last record, which
    may differ from the original right endpoint by one rounding.
    """
    if not records:
        raise ValueError("empty step record list")
    tab = tableau(scheme)
    x = np.asarray(x0, dtype=float).copy()
    nodes = [records[0].t]
    states = [x.copy()]
    derivs = []
    for rec in records:
        x_new, _, k = rk_step(f, rec.t, x, rec.h, tab)
        derivs.append(k[0])
        x = x_new
        nodes.append(rec.t + rec.h)
        states.append(x.copy())
    derivs.append(f(nodes[-1], x))
    return IvpResult(
        grid=TimeGrid(np.asarray(nodes)),
        states=np.asarray(states),
        derivs=np.asarray(derivs),
        step_records=list(records),
        n_rejected=0,
    )


def hermite_eval(t_lo, t_hi, x_lo, f_lo, x_hi, f_hi, tq):
    """Cubic Hermite value at tq in [t_lo, t_hi]. Works on (n,) or (B, n)."""
    d = t_hi - t_lo
    s = (tq - t_lo) / d
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    return h00 * x_lo + (h10 * d) * f_lo + h01 * x_hi + (h11 * d) * f_hi


def dense_sample(result: IvpResult, times) -> np.ndarray:
    """Cubic Hermite interpolation of a result at query times.

    Queries that hit grid nodes return the stored states verbatim; anything
    outside the integrated span raises OutOfSpan.
    """
    nodes = result.grid.nodes
    t0, t1 = nodes[0], nodes[-1]
    slack = 1e-12 * max(abs(t0), abs(t1), t1 - t0)
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size,) + result.states.shape[1:])
    for row, tq in enumerate(times.ravel()):
        if tq < t0 - slack or tq > t1 + slack:
            raise OutOfSpan(f"query t={tq} outside [{t0}, {t1}]")
        tq = min(max(tq, t0), t1)
        k = int(np.searchsorted(nodes, tq, side="right")) - 1
        k = min(max(k, 0), nodes.size - 2)
        if tq == nodes[k]:
            out[row] = result.states[k]
        elif tq == nodes[k + 1]:
            out[row] = result.states[k + 1]
        else:
            out[row] = hermite_eval(
                nodes[k], nodes[k + 1],
                result.states[k], result.derivs[k],
                result.states[k + 1], result.derivs[k + 1], tq)
    return out
