"""Artifact writers for experiment runs: delimited tables, summary
documents, and rendered figures.

Every writer goes through a temp file and an atomic rename, so an
interrupted command never leaves a partial artifact behind. Floats are
written at repr precision; the text round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import StorageError
from .evalsim import CostRatioStats, ValidationSet
from .train import LandscapeReport, TrainLog

VALIDATION_SCHEMA = "closedloop-validation/1"
STATS_SCHEMA = "closedloop-stats/1"
LANDSCAPE_SCHEMA = "closedloop-landscape-summary/1"
MANIFEST_SCHEMA = "closedloop-manifest/1"


def _discard(tmp) -> None:
    try:
        os.unlink(tmp)
    except OSError:
        pass


def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        _discard(tmp)
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _write_json(path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=1) + "\n")


def _savefig(fig, path) -> None:
    tmp = f"{path}.tmp.png"
    try:
        fig.savefig(tmp, dpi=110)
        os.replace(tmp, path)
    except OSError as exc:
        _discard(tmp)
        raise StorageError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def write_train_log(log: TrainLog, path) -> None:
    """Per-step table: step, loss, lr, stage."""
    lines = ["step,loss,lr,stage\n"]
    for s in log.steps:
        lines.append(f"{s['step']},{float(s['loss'])!r},"
                     f"{float(s['lr'])!r},{s['stage']}\n")
    _write_text(path, "".join(lines))


def plot_train_log(log: TrainLog, path) -> None:
    """Loss-vs-step curve, one series per stage tag."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    stages = []
    for s in log.steps:
        if s["stage"] not in stages:
            stages.append(s["stage"])
    for stage in stages:
        pts = [(s["step"], s["loss"]) for s in log.steps
               if s["stage"] == stage]
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                lw=0.9, label=stage)
    losses = [s["loss"] for s in log.steps]
    if losses and all(v > 0 for v in losses):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"training loss ({log.stage})")
    if stages:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)


def write_landscape(report: LandscapeReport, path) -> None:
    """Per-scale probe table: one row per probed step size."""
    lines = ["scale,step_size,loss,grad_change,distance,ratio\n"]
    for e in report.entries:
        lines.append(f"{float(e.scale)!r},{float(e.step_size)!r},"
                     f"{float(e.loss)!r},{float(e.grad_change)!r},"
                     f"{float(e.distance)!r},{float(e.ratio)!r}\n")
    _write_text(path, "".join(lines))


def write_landscape_summary(report: LandscapeReport, path) -> None:
    _write_json(path, {
        "schema": LANDSCAPE_SCHEMA,
        "base_loss": report.base_loss,
        "base_grad_norm": report.base_grad_norm,
        "lr": report.lr,
        "effective_beta": report.effective_beta,
        "loss_min": report.loss_min,
        "loss_max": report.loss_max,
        "n_nonfinite": report.n_nonfinite,
        "scales": [e.scale for e in report.entries],
    })


def plot_landscape(report: LandscapeReport, path) -> None:
    """Loss and gradient-change envelopes along the probe direction."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    scales = np.array([e.scale for e in report.entries])
    losses = np.array([e.loss for e in report.entries])
    gchanges = np.array([e.grad_change for e in report.entries])
    ok = np.isfinite(losses)
    ax1.plot(scales[ok], losses[ok], "o-", ms=3, lw=0.9)
    ax1.axhline(report.base_loss, color="gray", lw=0.7, ls="--",
                label="loss at the probe point")
    ax1.set_xscale("log")
    ax1.set_xlabel("scale")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    okg = np.isfinite(gchanges)
    ax2.plot(scales[okg], gchanges[okg], "o-", ms=3, lw=0.9, color="C1")
    ax2.set_xscale("log")
    ax2.set_xlabel("scale")
    ax2.set_ylabel("gradient change")
    beta = report.effective_beta
    ax2.set_title(f"effective beta {beta:.3g}" if np.isfinite(beta)
                  else "effective beta undefined", fontsize=9)
    fig.tight_layout()
    _savefig(fig, path)


def write_stats(stats: CostRatioStats, sigma: float, config_echo: dict,
                path) -> None:
    """Summary document for one noise level, with the config echoed."""
    _write_json(path, {
        "schema": STATS_SCHEMA,
        "sigma": sigma,
        "mean": stats.mean, "std": stats.std, "max": stats.max,
        "min": stats.min, "median": stats.median,
        "n_diverged": stats.n_diverged,
        "n_ratios": int(np.asarray(stats.ratios).size),
        "ratios": [float(r) for r in stats.ratios],
        "config": config_echo,
    })


def plot_cdf(curves, path) -> None:
    """Empirical cost-ratio CDFs, one curve per (label, stats) pair."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for label, stats in curves:
        r = np.sort(np.asarray(stats.ratios, dtype=float))
        if r.size == 0:
            continue
        y = np.arange(1, r.size + 1) / r.size
        ax.step(r, y, where="post", lw=1.1, label=label)
    ax.set_xlabel("cost ratio")
    ax.set_ylabel("fraction of initial states")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)


def write_validation(vset: ValidationSet, problem: str, path) -> None:
    """Reference states and costs; JSON keeps the floats round-trip exact."""
    _write_json(path, {
        "schema": VALIDATION_SCHEMA,
        "problem": problem,
        "count": int(vset.states.shape[0]),
        "states": [[float(v) for v in row] for row in vset.states],
        "costs": [float(c) for c in vset.costs],
        "usable": [bool(u) for u in vset.usable],
    })


def read_validation(path) -> ValidationSet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read validation set {path}: "
                           f"{exc}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"validation set {path} truncated or malformed: "
                           f"{exc}") from exc
    if doc.get("schema") != VALIDATION_SCHEMA:
        raise StorageError(f"expected schema {VALIDATION_SCHEMA!r} in "
                           f"{path}, got {doc.get('schema')!r}")
    return ValidationSet(states=np.asarray(doc["states"], dtype=float),
                         costs=np.asarray(doc["costs"], dtype=float),
                         usable=np.asarray(doc["usable"], dtype=bool))


def write_trajectory(sol, n: int, m: int, path) -> None:
    """Open-loop solution as one row per node: t, states, costates,
    controls."""
    cols = (["t"] + [f"x{i}" for i in range(n)]
            + [f"costate{i}" for i in range(n)]
            + [f"u{i}" for i in range(m)])
    lines = [",".join(cols) + "\n"]
    for k in range(sol.grid.nodes.size):
        row = ([sol.grid.nodes[k]] + list(sol.states[k])
               + list(sol.costates[k]) + list(sol.controls[k]))
        lines.append(",".join(f"{float(v)!r}" for v in row) + "\n")
    _write_text(path, "".join(lines))


def write_manifest(path, command: str, config_echo: dict, artifacts: dict,
                   timings: dict, extra: dict | None = None) -> None:
    """Run manifest: config echo, artifact paths, stage wall-clock.

    The only place timestamps/durations live; every other artifact is
    byte-reproducible from (config, seed).
    """
    from . import __version__
    doc = {
        "schema": MANIFEST_SCHEMA,
        "tool_version": __version__,
        "command": command,
        "config": config_echo,
        "artifacts": artifacts,
        "wall_clock_sec": {k: round(float(v), 3)
                           for k, v in timings.items()},
    }
    if extra:
        doc.update(extra)
    _write_json(path, doc)
