"""Training regimes for the feedback controller.

Three ways to move parameters:

* supervised learning on (t, x, u) records from open-loop solutions,
* direct optimization of the rollout cost, differentiated either by exact
  reverse-mode through the frozen discrete trajectory (bp) or by the
  continuous adjoint ODE (adjoint),
* the two-stage pipeline that pre-trains supervised and fine-tunes direct.

Rollout gradients share one forward pass: a single adaptive integration of
the whole batch in lockstep, after which only the accepted (t, h) pairs and
the states at checkpoint-segment boundaries are kept. Both gradient modes
re-derive interior states segment by segment from those checkpoints - the
replay is bit-identical to the original pass, so the bp gradient does not
depend on the segment count at all, and the adjoint only through its own
backward integration error.

The bp mode differentiates the discretized objective exactly; the adjoint
mode approximates the continuous one. Their small disagreement is real
discretization error, which is why cross-checks use a 1e-3 band.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .data import Dataset
from .errors import (AllRolloutsDiverged, NonFiniteLoss, NonFiniteState,
                     SchemaMismatch, StepLimitExceeded)
from .integrate import (IntegratorSpec, StepRecord, dense_sample,
                        integrate_ivp, replay_fixed, rk_step, tableau)
from .ocp import OcpDef
from .rngutil import child_rng

_ROLLOUT_FAILURES = (NonFiniteState, StepLimitExceeded)

GRADIENT_MODES = ("bp", "adjoint")


@dataclass(frozen=True)
class SlConfig:
    epochs: int
    batch_size: int
    lr: float
    lr_decay: tuple | None = None   # (every_n_epochs, factor)
    seed: int = 0
    validation: Dataset | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch_size, lr must be nonnegative "
                             "(batch_size >= 1)")
        if self.lr_decay is not None:
            every, factor = self.lr_decay
            if int(every) < 1 or not 0.0 < float(factor) <= 1.0:
                raise ValueError(f"bad lr_decay {self.lr_decay}: need "
                                 f"every >= 1 and factor in (0, 1]")


@dataclass(frozen=True)
class DoConfig:
    iterations: int
    batch_size: int
    lr: float
    gradient_mode: str = "bp"
    checkpoint_segments: int = 1
    seed: int = 0
    integ: IntegratorSpec = field(default_factory=IntegratorSpec)

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("iterations, batch_size, lr must be "
                             "nonnegative (batch_size >= 1)")
        if self.checkpoint_segments < 1:
            raise ValueError("checkpoint_segments must be >= 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of "
                             f"{GRADIENT_MODES}, got {self.gradient_mode!r}")


@dataclass
class TrainLog:
    stage: str
    steps: list                  # dicts: step, loss, lr, stage
    epoch_losses: list           # full-training-set loss per epoch (sl)
    val_losses: list             # validation loss per epoch (sl, optional)
    wall_clock: float
    seed: int
    n_dropped: int = 0           # rollouts dropped from batch means (do)


def sl_loss_arrays(params: net.MlpParams, ts, xs, us):
    """Mean squared control error over the records, with its exact grad."""
    ts = np.asarray(ts, float)
    xs = np.asarray(xs, float)
    us = np.asarray(us, float)
    pred = net.forward_batch(params, ts, xs)
    diff = pred - us
    loss = float((diff * diff).sum() / diff.shape[0])
    grad, _ = net.backward_batch(params, ts, xs, 2.0 * diff / diff.shape[0])
    return loss, grad


def sl_loss(params: net.MlpParams, batch):
    """sl_loss_arrays over a nonempty list of SampleRecord."""
    if not batch:
        raise ValueError("empty batch")
    ts = np.array([r.t for r in batch])
    xs = np.stack([r.x for r in batch])
    us = np.stack([r.u for r in batch])
    return sl_loss_arrays(params, ts, xs, us)


def train_sl(prob: OcpDef, dataset: Dataset, init: net.MlpParams,
             cfg: SlConfig, stage_tag: str = "sl"):
    """Epochs of Adam over deterministically shuffled minibatches."""
    if dataset.xs.shape[1] != prob.n or dataset.us.shape[1] != prob.m:
        raise SchemaMismatch(
            f"dataset dims ({dataset.xs.shape[1]}, {dataset.us.shape[1]}) "
            f"do not match problem ({prob.n}, {prob.m})")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    t_start = time.monotonic()
    params = init
    state = net.init_adam(params, cfg.lr)
    steps, epoch_losses, val_losses = [], [], []
    N = len(dataset)
    step_idx = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr
        if cfg.lr_decay is not None:
            every, factor = cfg.lr_decay
            lr = cfg.lr * float(factor) ** (epoch // int(every))
        state = replace(state, lr=lr)
        perm = child_rng(cfg.seed, "sl-shuffle", epoch).permutation(N)
        for lo in range(0, N, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            loss, grad = sl_loss_arrays(params, dataset.ts[idx],
                                        dataset.xs[idx], dataset.us[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"sl loss {loss} at epoch {epoch} step {step_idx}")
            params, state = net.adam_step(state, params, grad)
            steps.append({"step": step_idx, "loss": loss, "lr": lr,
                          "stage": stage_tag})
            step_idx += 1
        epoch_losses.append(
            sl_loss_arrays(params, dataset.ts, dataset.xs, dataset.us)[0])
        if cfg.validation is not None:
            v = cfg.validation
            val_losses.append(sl_loss_arrays(params, v.ts, v.xs, v.us)[0])
    return params, TrainLog(stage=stage_tag, steps=steps,
                            epoch_losses=epoch_losses,
                            val_losses=val_losses,
                            wall_clock=time.monotonic() - t_start,
                            seed=cfg.seed)


def _rollout_rhs(prob: OcpDef, params: net.MlpParams):
    n = prob.n

    def rhs(t, Y):
        X = Y[:, :n]
        U = net.forward_batch(params, t, X)
        dX = prob.f_batch(X, U)
        dC = prob.L_batch(X, U)
        return np.concatenate([dX, dC[:, None]], axis=1)

    return rhs


@dataclass
class FrozenRollout:
    """A finished rollout reduced to its replayable skeleton.

    Only the accepted step sizes and the batch states at checkpoint-segment
    boundaries survive; everything in between is re-derived on demand by
    replaying, which reproduces the original states bit for bit.
    """

    steps: list                 # StepRecord(t, h, x=None)
    seg_starts: list            # record index opening each segment
    boundary_states: list       # (B, n+1) at each segment start
    final_state: np.ndarray     # (B, n+1)
    scheme: str
    horizon: float

    def segment_records(self, j: int):
        hi = self.seg_starts[j + 1] if j + 1 < len(self.seg_starts) \
            else len(self.steps)
        return self.steps[self.seg_starts[j]:hi]

    def n_segments(self) -> int:
        return len(self.seg_starts)


def rollout_records(prob: OcpDef, params: net.MlpParams, x0_batch,
                    integ: IntegratorSpec,
                    checkpoint_segments: int = 1) -> FrozenRollout:
    """One lockstep adaptive rollout of the batch, then freeze it.

    Segmentation happens after the fact, so the recorded trajectory is
    identical for every checkpoint_segments value.
    """
    X0 = np.atleast_2d(np.asarray(x0_batch, float))
    Y0 = np.concatenate([X0, np.zeros((X0.shape[0], 1))], axis=1)
    rhs = _rollout_rhs(prob, params)
    res = integrate_ivp(rhs, Y0, (0.0, prob.horizon_T), integ)
    recs = res.step_records
    K = max(1, min(checkpoint_segments, len(recs)))
    cuts = np.unique(np.linspace(0, len(recs), K + 1).round().astype(int))
    seg_starts = [int(c) for c in cuts[:-1]]
    return FrozenRollout(
        steps=[StepRecord(r.t, r.h, None) for r in recs],
        seg_starts=seg_starts,
        boundary_states=[recs[i].x.copy() for i in seg_starts],
        final_state=res.states[-1].copy(),
        scheme=integ.scheme,
        horizon=prob.horizon_T)


def _mean_cost(prob: OcpDef, final_state: np.ndarray) -> float:
    X_T = final_state[:, :prob.n]
    C_T = final_state[:, prob.n]
    return float(np.mean(C_T + prob.M_batch(X_T)))


def replay_cost(prob: OcpDef, params: net.MlpParams, x0_batch,
                frozen: FrozenRollout) -> float:
    """Mean cost of re-running a frozen (t, h) schedule under `params`.

    This is the exact discrete objective the bp gradient differentiates:
    finite differences of this function validate that gradient.
    """
    X0 = np.atleast_2d(np.asarray(x0_batch, float))
    Y = np.concatenate([X0, np.zeros((X0.shape[0], 1))], axis=1)
    rhs = _rollout_rhs(prob, params)
    res = replay_fixed(rhs, Y, frozen.steps, frozen.scheme)
    return _mean_cost(prob, res.states[-1])


def _stage_vjp(prob, params, t_s, Xs, Us, kbar, grad_flat):
    """Pull kbar back through one rhs evaluation F = [f, L].

    Returns the x-part of the stage cotangent; the theta contribution is
    accumulated into grad_flat in place.
    """
    n = prob.n
    kbx = kbar[:, :n]
    kbc = kbar[:, n]
    w = np.einsum("bnm,bn->bm", prob.df_du_batch(Xs, Us), kbx) \
        + prob.dL_du_batch(Xs, Us) * kbc[:, None]
    gtheta, dxnet = net.backward_batch(params, t_s, Xs, w)
    grad_flat += net.flatten(gtheta)
    gbar_x = np.einsum("bij,bi->bj", prob.df_dx_batch(Xs, Us), kbx) \
        + prob.dL_dx_batch(Xs, Us) * kbc[:, None] + dxnet
    return gbar_x


def do_loss_and_grad_bp(prob: OcpDef, params: net.MlpParams, x0_batch,
                        integ: IntegratorSpec | None = None,
                        checkpoint_segments: int = 1):
    """Batch-mean rollout cost and its exact discrete-trajectory gradient.

    Reverse sweep over the frozen step sequence: each segment is replayed
    from its checkpoint (bit-identical states), each step's stages are
    recomputed, and one batched network backward per stage accumulates the
    parameter gradient in fixed index order.
    """
    integ = integ or IntegratorSpec()
    X0 = np.atleast_2d(np.asarray(x0_batch, float))
    B = X0.shape[0]
    n = prob.n
    if prob.horizon_T == 0.0:
        return float(np.mean(prob.M_batch(X0))), net.zero_grad(params)
    frozen = rollout_records(prob, params, X0, integ, checkpoint_segments)
    cost = _mean_cost(prob, frozen.final_state)

    tab = tableau(frozen.scheme)
    S = tab.stages
    rhs = _rollout_rhs(prob, params)
    grad_flat = np.zeros(net.flatten(params).size)
    ybar = np.concatenate(
        [prob.dM_dx_batch(frozen.final_state[:, :n]) / B,
         np.full((B, 1), 1.0 / B)], axis=1)

    for j in range(frozen.n_segments() - 1, -1, -1):
        seg = frozen.segment_records(j)
        if not seg:
            continue
        rep = replay_fixed(rhs, frozen.boundary_states[j], seg,
                           frozen.scheme)
        for i in range(len(seg) - 1, -1, -1):
            t, h = seg[i].t, seg[i].h
            y_i = rep.states[i]
            _, _, k = rk_step(rhs, t, y_i, h, tab)
            # stage inputs, rebuilt with rk_step's own arithmetic so the
            # jacobian evaluation points match the forward pass bitwise
            gs = [y_i]
            for s in range(1, S):
                row = tab.a[s]
                gs.append(y_i + h * sum(row[r] * k[r] for r in range(s)
                                        if row[r] != 0.0))
            gbars = [None] * S
            for s in range(S - 1, -1, -1):
                kbar = (h * tab.b[s]) * ybar
                for r in range(s + 1, S):
                    row = tab.a[r]
                    if s < len(row) and row[s] != 0.0:
                        kbar = kbar + (h * row[s]) * gbars[r]
                Xs = gs[s][:, :n]
                Us = net.forward_batch(params, t + tab.c[s] * h, Xs)
                gbar_x = _stage_vjp(prob, params, t + tab.c[s] * h, Xs, Us,
                                    kbar, grad_flat)
                gbars[s] = np.concatenate(
                    [gbar_x, np.zeros((B, 1))], axis=1)
            total = gbars[0]
            for s in range(1, S):
                total = total + gbars[s]
            ybar = ybar + total
    grad = net.unflatten_like(net.zero_grad(params), grad_flat)
    return cost, grad


def do_loss_and_grad_adjoint(prob: OcpDef, params: net.MlpParams, x0_batch,
                             integ: IntegratorSpec | None = None,
                             checkpoint_segments: int = 1,
                             backward_integ: IntegratorSpec | None = None):
    """Batch-mean rollout cost with the continuous-adjoint gradient.

    The forward pass is the same frozen rollout as bp. The backward pass
    integrates the adjoint state and the parameter-gradient quadrature
    together, segment by segment; within a segment the forward state is
    re-derived from the checkpoint by replay and queried through cubic
    Hermite interpolation. The adjoint convention is the total derivative:
    d(f, L)/dx includes the chain through the controller's state input.
    """
    integ = integ or IntegratorSpec()
    backward_integ = backward_integ or integ
    X0 = np.atleast_2d(np.asarray(x0_batch, float))
    B = X0.shape[0]
    n = prob.n
    if prob.horizon_T == 0.0:
        return float(np.mean(prob.M_batch(X0))), net.zero_grad(params)
    frozen = rollout_records(prob, params, X0, integ, checkpoint_segments)
    cost = _mean_cost(prob, frozen.final_state)
    T = frozen.horizon
    P = net.flatten(params).size
    rhs = _rollout_rhs(prob, params)

    seg_cache = {}

    def segment_result(j):
        if j not in seg_cache:
            seg_cache.clear()  # the sweep only ever revisits one segment
            seg_cache[j] = replay_fixed(rhs, frozen.boundary_states[j],
                                        frozen.segment_records(j),
                                        frozen.scheme)
        return seg_cache[j]

    def rhs_back(j):
        rep = segment_result(j)

        def rhs_b(s, v):
            t = T - s
            t = min(max(t, rep.grid.nodes[0]), rep.grid.nodes[-1])
            Y = dense_sample(rep, np.array([t]))[0]
            X = Y[:, :n]
            alpha = v[:B * n].reshape(B, n)
            U = net.forward_batch(params, t, X)
            w = np.einsum("bnm,bn->bm", prob.df_du_batch(X, U), alpha) \
                + prob.dL_du_batch(X, U)
            gtheta, dxnet = net.backward_batch(params, t, X, w)
            dalpha = np.einsum("bij,bi->bj", prob.df_dx_batch(X, U), alpha) \
                + prob.dL_dx_batch(X, U) + dxnet
            return np.concatenate([dalpha.ravel(), net.flatten(gtheta)])

        return rhs_b

    alpha0 = prob.dM_dx_batch(frozen.final_state[:, :n])
    v = np.concatenate([alpha0.ravel(), np.zeros(P)])
    n_seg = frozen.n_segments()
    for j in range(n_seg - 1, -1, -1):
        t_lo = frozen.steps[frozen.seg_starts[j]].t
        t_hi = frozen.steps[frozen.seg_starts[j + 1]].t if j + 1 < n_seg \
            else T
        res = integrate_ivp(rhs_back(j), v, (T - t_hi, T - t_lo),
                            backward_integ)
        v = res.states[-1]
    grad_flat = v[B * n:] / B
    grad = net.unflatten_like(net.zero_grad(params), grad_flat)
    return cost, grad


def _grad_fn(mode: str):
    if mode == "bp":
        return do_loss_and_grad_bp
    if mode == "adjoint":
        return do_loss_and_grad_adjoint
    raise ValueError(f"unknown gradient mode {mode!r}")


def _batch_grad_with_drops(prob, params, x0s, cfg: DoConfig):
    """Batch gradient that survives divergent members.

    The whole batch is tried in lockstep first. If that fails, each member
    is retried alone and the survivors' results are averaged; an empty
    survivor set raises AllRolloutsDiverged.
    """
    fn = _grad_fn(cfg.gradient_mode)
    try:
        cost, grad = fn(prob, params, x0s, cfg.integ,
                        cfg.checkpoint_segments)
        return cost, grad, 0
    except _ROLLOUT_FAILURES:
        pass
    costs, grads = [], []
    for i in range(x0s.shape[0]):
        try:
            c, g = fn(prob, params, x0s[i:i + 1], cfg.integ,
                      cfg.checkpoint_segments)
        except _ROLLOUT_FAILURES:
            continue
        costs.append(c)
        grads.append(net.flatten(g))
    if not costs:
        raise AllRolloutsDiverged(
            f"all {x0s.shape[0]} rollouts in the batch diverged")
    grad = net.unflatten_like(net.zero_grad(params), np.mean(grads, axis=0))
    return float(np.mean(costs)), grad, x0s.shape[0] - len(costs)


def train_do(prob: OcpDef, init: net.MlpParams, cfg: DoConfig,
             init_box=None, stage_tag: str = "do"):
    """Adam on the rollout cost with fresh initial states every iteration."""
    box = init_box if init_box is not None else prob.init_box
    t_start = time.monotonic()
    params = init
    state = net.init_adam(params, cfg.lr)
    steps = []
    dropped = 0
    for it in range(cfg.iterations):
        x0s = box.sample(child_rng(cfg.seed, "do-batch", it),
                         cfg.batch_size)
        cost, grad, n_drop = _batch_grad_with_drops(prob, params, x0s, cfg)
        dropped += n_drop
        gflat = net.flatten(grad)
        if not np.all(np.isfinite(gflat)) or not math.isfinite(cost):
            raise NonFiniteLoss(
                f"non-finite cost or gradient at iteration {it}")
        params, state = net.adam_step(state, params, grad)
        steps.append({"step": it, "loss": cost, "lr": cfg.lr,
                      "stage": stage_tag, "dropped": n_drop})
    return params, TrainLog(stage=stage_tag, steps=steps, epoch_losses=[],
                            val_losses=[],
                            wall_clock=time.monotonic() - t_start,
                            seed=cfg.seed, n_dropped=dropped)


def pretrain_finetune(prob: OcpDef, dataset: Dataset, sl_cfg: SlConfig,
                      ft_cfg: DoConfig, on_stage_end=None):
    """Stage I supervised pre-training from a fresh init, Stage II direct
    fine-tuning warm-started from the Stage I parameters.

    on_stage_end(tag, params), when given, fires at each stage boundary so
    callers can persist the intermediate controller. Merged step indices
    continue across the boundary.
    """
    t_start = time.monotonic()
    init = net.init_params(prob.n, prob.m, sl_cfg.seed)
    sl_params, sl_log = train_sl(prob, dataset, init, sl_cfg, stage_tag="sl")
    if on_stage_end is not None:
        on_stage_end("sl", sl_params)
    ft_params, ft_log = train_do(prob, sl_params, ft_cfg,
                                 stage_tag="finetune")
    if on_stage_end is not None:
        on_stage_end("finetune", ft_params)
    offset = len(sl_log.steps)
    ft_steps = [dict(s, step=s["step"] + offset) for s in ft_log.steps]
    merged = TrainLog(
        stage="pipeline", steps=sl_log.steps + ft_steps,
        epoch_losses=sl_log.epoch_losses, val_losses=sl_log.val_losses,
        wall_clock=time.monotonic() - t_start, seed=sl_cfg.seed,
        n_dropped=ft_log.n_dropped)
    return ft_params, merged


@dataclass
class LandscapeEntry:
    scale: float
    step_size: float
    loss: float                  # inf when the probe diverged
    grad_change: float           # nan when the probe diverged
    distance: float
    ratio: float                 # grad_change / distance, nan if undefined


@dataclass
class LandscapeReport:
    base_loss: float
    base_grad_norm: float
    lr: float
    entries: list
    effective_beta: float
    loss_min: float
    loss_max: float
    n_nonfinite: int


_PROBE_FAILURES = (NonFiniteLoss, NonFiniteState, StepLimitExceeded,
                   AllRolloutsDiverged)


def landscape_probe(loss_and_grad, theta_hat: net.MlpParams, lr: float,
                    scales) -> LandscapeReport:
    """Probe the loss along the negative gradient at scaled step sizes.

    For each scale c the probe point is theta' = theta - (c * lr) * grad.
    effective_beta is the largest gradient-change-to-distance ratio over
    the finite probes. Non-finite probes are recorded as +inf envelope
    entries instead of aborting.
    """
    scales = [float(s) for s in scales]
    if not scales or any(s < 0 for s in scales):
        raise ValueError("scales must be nonempty and nonnegative")
    l0, g0 = loss_and_grad(theta_hat)
    if not math.isfinite(l0):
        raise NonFiniteLoss(f"loss at the base point is {l0}")
    g0_flat = net.flatten(g0)
    theta_flat = net.flatten(theta_hat)
    entries = []
    beta = 0.0
    losses = []
    n_bad = 0
    for c in scales:
        step = c * lr
        probe_flat = theta_flat - step * g0_flat
        probe = net.unflatten_like(theta_hat, probe_flat)
        distance = float(np.linalg.norm(probe_flat - theta_flat))
        try:
            l1, g1 = loss_and_grad(probe)
            if not math.isfinite(l1):
                raise NonFiniteLoss(f"probe loss {l1}")
            change = float(np.linalg.norm(net.flatten(g1) - g0_flat))
        except _PROBE_FAILURES:
            n_bad += 1
            entries.append(LandscapeEntry(c, step, math.inf, math.nan,
                                          distance, math.nan))
            losses.append(math.inf)
            continue
        ratio = change / distance if distance > 0 else math.nan
        if distance > 0:
            beta = max(beta, ratio)
        entries.append(LandscapeEntry(c, step, l1, change, distance, ratio))
        losses.append(l1)
    return LandscapeReport(
        base_loss=l0, base_grad_norm=float(np.linalg.norm(g0_flat)), lr=lr,
        entries=entries, effective_beta=beta,
        loss_min=float(min(losses)), loss_max=float(max(losses)),
        n_nonfinite=n_bad)
