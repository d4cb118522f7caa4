"""Feedback controller network, its gradients, and its optimizer.

A fixed three-hidden-layer perceptron maps (t, x) to the control vector.
Hidden layers are tanh, the output layer is linear. Forward, exact
reverse-mode backward (parameter and input gradients), Adam updates, and
versioned text checkpoints all live here with no autodiff framework behind
them: training differentiates through ODE rollouts, so the network backward
must compose with hand-written adjoint recursions anyway.

Batched entry points (suffix _batch) operate on (B, .) arrays and are the
primary implementations; single-sample wrappers reshape through them. Batch
parameter gradients are accumulated by matrix products over the batch axis,
which fixes the summation order and keeps runs reproducible.

Time is fed to the network raw, in seconds, with no input normalization.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import SchemaMismatch, StorageError
from .rngutil import child_rng

HIDDEN = (64, 64, 64)

CHECKPOINT_SCHEMA = "closedloop-mlp-checkpoint/1"

META_KEYS = ("problem", "horizon", "seed", "stage")


@dataclass
class MlpParams:
    """Weights and biases, input layer first.

    weights[k] has shape (fan_out, fan_in); biases[k] has shape (fan_out,).
    The input width is 1 + n (time prepended to the state).
    """

    weights: tuple
    biases: tuple

    @property
    def n(self) -> int:
        return self.weights[0].shape[1] - 1

    @property
    def m(self) -> int:
        return self.weights[-1].shape[0]

    def validate(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        prev = self.weights[0].shape[1]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape != (b.size, prev):
                raise ValueError(f"layer {k} shapes inconsistent: "
                                 f"{w.shape} with bias {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite entries")
            prev = b.size


class MlpGrad(MlpParams):
    """Gradient with the same layout as its MlpParams."""


def zero_grad(params: MlpParams) -> MlpGrad:
    return MlpGrad(tuple(np.zeros_like(w) for w in params.weights),
                   tuple(np.zeros_like(b) for b in params.biases))


def flatten(tree: MlpParams) -> np.ndarray:
    """All entries as one vector: per layer, row-major weights then bias."""
    parts = []
    for w, b in zip(tree.weights, tree.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_like(template: MlpParams, vec: np.ndarray) -> MlpParams:
    cls = type(template)
    weights, biases, at = [], [], 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vec[at:at + w.size].reshape(w.shape).copy())
        at += w.size
        biases.append(vec[at:at + b.size].copy())
        at += b.size
    if at != vec.size:
        raise ValueError(f"vector length {vec.size} != parameter count {at}")
    return cls(tuple(weights), tuple(biases))


def init_params(n: int, m: int, seed: int) -> MlpParams:
    """Scaled-uniform weights, zero biases.

    Each layer's weights are drawn uniform(-s, s) with s = 1/sqrt(fan_in).
    The draw order is fixed (input layer first) so a seed pins every entry.
    """
    if n < 1 or m < 1:
        raise ValueError("state and control dimensions must be at least 1")
    rng = child_rng(seed, "mlp-init")
    dims = (1 + n,) + HIDDEN + (m,)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


def apply_batch(params: MlpParams, Z: np.ndarray) -> np.ndarray:
    """Run pre-assembled network inputs Z (B, fan_in) through the layers."""
    h = Z
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
    return h @ params.weights[-1].T + params.biases[-1]


def _assemble(params: MlpParams, t, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    tcol = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
    return np.concatenate([tcol[:, None], x], axis=1)


def forward_batch(params: MlpParams, t, x: np.ndarray) -> np.ndarray:
    """Controls for a batch of states; t is a scalar or a (B,) array."""
    return apply_batch(params, _assemble(params, t, x))


def forward(params: MlpParams, t: float, x: np.ndarray) -> np.ndarray:
    return forward_batch(params, float(t), np.asarray(x, float)[None])[0]


def backward_batch(params: MlpParams, t, x: np.ndarray,
                   upstream: np.ndarray):
    """Reverse-mode pass for a batch.

    Returns (grad, dx): grad is d(sum_b upstream_b . output_b)/dtheta summed
    over the batch, dx its per-member derivative w.r.t. the state rows,
    shape (B, n). Intermediates are recomputed, not cached across calls.
    """
    Z = _assemble(params, t, x)
    acts = [Z]
    h = Z
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        acts.append(h)

    g = np.asarray(upstream, float)
    if g.shape != (Z.shape[0], params.m):
        raise ValueError(f"upstream shape {g.shape} != "
                         f"({Z.shape[0]}, {params.m})")
    wgrads = [None] * len(params.weights)
    bgrads = [None] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        wgrads[k] = g.T @ acts[k]
        bgrads[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * (1.0 - acts[k] ** 2)
    return MlpGrad(tuple(wgrads), tuple(bgrads)), g[:, 1:]


def backward(params: MlpParams, t: float, x: np.ndarray,
             upstream: np.ndarray):
    grad, dx = backward_batch(params, float(t), np.asarray(x, float)[None],
                              np.asarray(upstream, float)[None])
    return grad, dx[0]


@dataclass
class AdamState:
    """Adam accumulators; step_count is the number of applied updates."""

    lr: float
    step_count: int
    first: MlpGrad
    second: MlpGrad
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: MlpParams, lr: float) -> AdamState:
    return AdamState(lr=float(lr), step_count=0,
                     first=zero_grad(params), second=zero_grad(params))


def adam_step(state: AdamState, params: MlpParams, grad: MlpGrad):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    t = state.step_count + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t

    def upd(p, g, m, v):
        m2 = state.beta1 * m + (1.0 - state.beta1) * g
        v2 = state.beta2 * v + (1.0 - state.beta2) * g * g
        p2 = p - state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
        return p2, m2, v2

    ws, bs = [], []
    mws, mbs, vws, vbs = [], [], [], []
    for p, g, m, v in zip(params.weights, grad.weights,
                          state.first.weights, state.second.weights):
        p2, m2, v2 = upd(p, g, m, v)
        ws.append(p2), mws.append(m2), vws.append(v2)
    for p, g, m, v in zip(params.biases, grad.biases,
                          state.first.biases, state.second.biases):
        p2, m2, v2 = upd(p, g, m, v)
        bs.append(p2), mbs.append(m2), vbs.append(v2)
    new_params = MlpParams(tuple(ws), tuple(bs))
    new_state = replace(state, step_count=t,
                        first=MlpGrad(tuple(mws), tuple(mbs)),
                        second=MlpGrad(tuple(vws), tuple(vbs)))
    return new_params, new_state


def _grad_to_doc(g: MlpGrad):
    return {"weights": [w.ravel().tolist() for w in g.weights],
            "biases": [b.tolist() for b in g.biases]}


def _grad_from_doc(doc, template: MlpParams, cls):
    try:
        ws = [np.asarray(fw, float).reshape(w.shape)
              for fw, w in zip(doc["weights"], template.weights)]
        bs = [np.asarray(fb, float) for fb in doc["biases"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"malformed array block: {exc}") from exc
    out = cls(tuple(ws), tuple(bs))
    out.validate()
    return out


def save_checkpoint(path, params: MlpParams, adam: AdamState | None,
                    meta: dict) -> None:
    """Write a self-describing text checkpoint.

    meta must carry problem, horizon, seed, and stage so a loaded
    checkpoint can be matched to the run that produced it. Floats are
    serialized at full repr precision; the round trip is bit-exact.
    """
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise ValueError(f"meta missing required keys: {missing}")
    params.validate()
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "meta": {k: meta[k] for k in meta},
        "arch": {"n": params.n, "m": params.m,
                 "hidden": [b.size for b in params.biases[:-1]]},
        "params": _grad_to_doc(params),
        "adam": None,
    }
    if adam is not None:
        doc["adam"] = {"lr": adam.lr, "step_count": adam.step_count,
                       "beta1": adam.beta1, "beta2": adam.beta2,
                       "eps": adam.eps,
                       "first": _grad_to_doc(adam.first),
                       "second": _grad_to_doc(adam.second)}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path, n: int | None = None, m: int | None = None):
    """Read a checkpoint back. Returns (params, adam_or_None, meta).

    Pass the run's (n, m) to reject checkpoints trained for a different
    problem; dimension disagreement raises SchemaMismatch. Unreadable or
    truncated files raise StorageError and leave no partial state.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"checkpoint {path} truncated or malformed: "
                           f"{exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != CHECKPOINT_SCHEMA:
        raise SchemaMismatch(f"expected schema {CHECKPOINT_SCHEMA!r}, "
                             f"got {doc.get('schema')!r}"
                             if isinstance(doc, dict)
                             else "checkpoint is not a JSON object")
    try:
        arch = doc["arch"]
        sn, sm = int(arch["n"]), int(arch["m"])
        hidden = [int(h) for h in arch["hidden"]]
        meta = dict(doc["meta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"malformed checkpoint header: {exc}") from exc
    if (n is not None and sn != n) or (m is not None and sm != m):
        raise SchemaMismatch(f"checkpoint is for dims (n={sn}, m={sm}), "
                             f"requested (n={n}, m={m})")

    dims = [1 + sn] + hidden + [sm]
    template = MlpParams(
        tuple(np.empty((fo, fi)) for fi, fo in zip(dims[:-1], dims[1:])),
        tuple(np.empty(fo) for fo in dims[1:]))
    params = _grad_from_doc(doc.get("params", {}), template, MlpParams)
    adam = None
    if doc.get("adam") is not None:
        a = doc["adam"]
        try:
            adam = AdamState(lr=float(a["lr"]),
                             step_count=int(a["step_count"]),
                             first=_grad_from_doc(a["first"], template,
                                                  MlpGrad),
                             second=_grad_from_doc(a["second"], template,
                                                   MlpGrad),
                             beta1=float(a["beta1"]),
                             beta2=float(a["beta2"]),
                             eps=float(a["eps"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"malformed optimizer block: {exc}") from exc
    return params, adam, meta
