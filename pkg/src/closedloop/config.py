"""Experiment configuration: one JSON document, checked against a fixed
schema, with published-scale and desk-scale presets embedded per problem.

A config names a problem and a profile; every other key is optional and
overrides the preset. Unknown keys anywhere in the document are rejected
with the offending dotted path, so a typo cannot silently fall back to a
default. The resolved document is what gets echoed into run manifests.

The desk profile trades statistical power for laptop turnaround. It is not
a flat rescale: attitude-problem trajectory counts stay at 100 (the full
dataset is already small), its from-scratch stage runs 300 iterations (the
flat rule's 200 does not separate cleanly from the supervised baseline),
and fine-tuning is 100 iterations at every scale.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace

import numpy as np

from .data import AdaptiveGrid
from .errors import ConfigError
from .integrate import IntegratorSpec, tableau
from .ocp import InitBox, OcpDef, make_ocp
from .train import DoConfig, SlConfig

PROBLEMS = ("satellite", "quadrotor", "scalar_lqr")
PROFILES = ("paper", "desk")

_SECTION_KEYS = {
    "integrator": ("scheme", "abs_tol", "rel_tol", "max_steps"),
    "dataset": ("sampling", "n_trajectories", "nodes_per_trajectory", "grid"),
    "sl": ("epochs", "batch_size", "lr", "lr_decay"),
    "do": ("iterations", "batch_size", "lr", "gradient_mode",
           "checkpoint_segments"),
    "finetune": ("iterations", "batch_size", "lr"),
    "evaluation": ("validation_count", "noise_sigmas", "noise_hold_dt"),
}
_TOP_KEYS = ("problem", "profile", "horizon", "init_box", "seed", "out_dir",
             "workers") + tuple(_SECTION_KEYS)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated experiment settings.

    Sections are plain dicts so the config echo in a manifest is the
    literal content; the *_config/build_* helpers below turn them into the
    typed objects the library modules take.
    """

    problem: str
    profile: str
    horizon: float | None      # None means the problem's published default
    init_box: object           # "full" | "small" | {"lo": [...], "hi": [...]}
    seed: int
    out_dir: str
    workers: int
    integrator: dict
    dataset: dict
    sl: dict
    do: dict
    finetune: dict
    evaluation: dict


def _default_doc(problem: str, profile: str, box: str, sampling: str) -> dict:
    desk = profile == "desk"
    if problem == "satellite":
        integ = {"scheme": "dopri54", "abs_tol": 1e-5, "rel_tol": 1e-5,
                 "max_steps": 100_000}
        dataset = {"sampling": "uniform", "n_trajectories": 100,
                   "nodes_per_trajectory": 51, "grid": None}
        sl = {"epochs": 100, "batch_size": 256 if desk else 1024,
              "lr": 0.01, "lr_decay": None}
        do = {"iterations": 300 if desk else 2000,
              "batch_size": 256 if desk else 1024, "lr": 0.01,
              "gradient_mode": "bp", "checkpoint_segments": 1}
        sigmas = [0.0, 0.01, 0.025, 0.05]
    elif problem == "quadrotor":
        integ = {"scheme": "bs23", "abs_tol": 1e-5, "rel_tol": 1e-5,
                 "max_steps": 100_000}
        n_traj = 500 if box == "small" else 1000
        dataset = {"sampling": sampling,
                   "n_trajectories": n_traj // 5 if desk else n_traj,
                   "nodes_per_trajectory": 51, "grid": None}
        if box == "small":
            sl = {"epochs": 1000, "lr": 0.001, "lr_decay": None}
        elif sampling == "adaptive":
            sl = {"epochs": 2000, "lr": 0.005, "lr_decay": [500, 0.5]}
        else:
            sl = {"epochs": 2000, "lr": 0.01, "lr_decay": [500, 0.5]}
        sl["batch_size"] = 1024 if desk else 4096
        do = {"iterations": 300 if desk else 3000,
              "batch_size": 512 if desk else 2048, "lr": 0.01,
              "gradient_mode": "bp", "checkpoint_segments": 1}
        sigmas = [0.0, 0.01, 0.05, 0.1]
    else:  # scalar_lqr: a one-dimensional oracle problem, tiny everywhere
        integ = {"scheme": "dopri54", "abs_tol": 1e-5, "rel_tol": 1e-5,
                 "max_steps": 100_000}
        dataset = {"sampling": "uniform", "n_trajectories": 10,
                   "nodes_per_trajectory": 21, "grid": None}
        sl = {"epochs": 50, "batch_size": 64, "lr": 0.01, "lr_decay": None}
        do = {"iterations": 20, "batch_size": 32, "lr": 0.01,
              "gradient_mode": "bp", "checkpoint_segments": 1}
        sigmas = [0.0, 0.01]
    return {
        "problem": problem,
        "profile": profile,
        "horizon": None,
        "init_box": box,
        "seed": 0,
        "out_dir": "runs",
        "workers": 1,
        "integrator": integ,
        "dataset": dataset,
        "sl": sl,
        "do": do,
        "finetune": {"iterations": 100, "batch_size": 256 if desk else 2048,
                     "lr": 1e-4},
        "evaluation": {"validation_count": 20 if desk else 100,
                       "noise_sigmas": sigmas, "noise_hold_dt": 0.01},
    }


def _reject_unknown(doc: dict) -> None:
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}; "
                              f"allowed: {sorted(_TOP_KEYS)}")
        if key in _SECTION_KEYS:
            section = doc[key]
            if not isinstance(section, dict):
                raise ConfigError(f"config key {key!r} must be an object, "
                                  f"got {type(section).__name__}")
            for sub in section:
                if sub not in _SECTION_KEYS[key]:
                    raise ConfigError(
                        f"unknown config key '{key}.{sub}'; allowed under "
                        f"{key!r}: {sorted(_SECTION_KEYS[key])}")


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_init_box(box, problem: str):
    if box in ("full", "small"):
        _need(not (problem == "satellite" and box == "small"),
              "the attitude problem has one published initial-state box; "
              "use init_box 'full' or a custom {'lo': ..., 'hi': ...}")
        return box
    _need(isinstance(box, dict) and set(box) == {"lo", "hi"},
          f"init_box must be 'full', 'small', or an object with keys "
          f"'lo' and 'hi', got {box!r}")
    lo = np.asarray(box["lo"], dtype=float)
    hi = np.asarray(box["hi"], dtype=float)
    _need(lo.ndim == 1 and lo.shape == hi.shape,
          "custom init_box lo and hi must be equal-length flat lists")
    _need(bool(np.all(lo <= hi)), "custom init_box needs lo <= hi")
    return {"lo": lo.tolist(), "hi": hi.tolist()}


def _validate(doc: dict) -> None:
    _need(doc["problem"] in PROBLEMS,
          f"problem must be one of {PROBLEMS}, got {doc['problem']!r}")
    _need(doc["profile"] in PROFILES,
          f"profile must be one of {PROFILES}, got {doc['profile']!r}")
    if doc["horizon"] is not None:
        _need(_is_num(doc["horizon"]) and doc["horizon"] > 0,
              f"horizon must be a positive number, got {doc['horizon']!r}")
    _need(_is_int(doc["seed"]) and doc["seed"] >= 0,
          f"seed must be a nonnegative integer, got {doc['seed']!r}")
    _need(isinstance(doc["out_dir"], str) and doc["out_dir"],
          "out_dir must be a nonempty string")
    _need(_is_int(doc["workers"]) and doc["workers"] >= 1,
          f"workers must be an integer >= 1, got {doc['workers']!r}")

    integ = doc["integrator"]
    try:
        tableau(integ["scheme"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"integrator.scheme: {exc}") from exc
    for k in ("abs_tol", "rel_tol"):
        _need(_is_num(integ[k]) and integ[k] > 0,
              f"integrator.{k} must be positive, got {integ[k]!r}")
    _need(_is_int(integ["max_steps"]) and integ["max_steps"] >= 1,
          "integrator.max_steps must be an integer >= 1")

    ds = doc["dataset"]
    _need(ds["sampling"] in ("uniform", "adaptive"),
          f"dataset.sampling must be 'uniform' or 'adaptive', "
          f"got {ds['sampling']!r}")
    if ds["sampling"] == "adaptive":
        _need(doc["problem"] == "quadrotor",
              "adaptive sampling is defined only for the quadrotor "
              "problem; no checkpoint grid exists for "
              f"{doc['problem']!r}")
    _need(_is_int(ds["n_trajectories"]) and ds["n_trajectories"] >= 1,
          "dataset.n_trajectories must be an integer >= 1")
    _need(_is_int(ds["nodes_per_trajectory"])
          and ds["nodes_per_trajectory"] >= 2,
          "dataset.nodes_per_trajectory must be an integer >= 2")
    if ds["grid"] is not None:
        _need(ds["sampling"] == "adaptive",
              "dataset.grid is only meaningful with adaptive sampling")
        _need(isinstance(ds["grid"], list)
              and all(_is_num(c) for c in ds["grid"]),
              "dataset.grid must be a list of numbers")

    for name, counter in (("sl", "epochs"), ("do", "iterations"),
                          ("finetune", "iterations")):
        sec = doc[name]
        _need(_is_int(sec[counter]) and sec[counter] >= 0,
              f"{name}.{counter} must be an integer >= 0")
        _need(_is_int(sec["batch_size"]) and sec["batch_size"] >= 1,
              f"{name}.batch_size must be an integer >= 1")
        _need(_is_num(sec["lr"]) and sec["lr"] >= 0,
              f"{name}.lr must be a nonnegative number")
    decay = doc["sl"]["lr_decay"]
    if decay is not None:
        ok = (isinstance(decay, list) and len(decay) == 2
              and _is_int(decay[0]) and decay[0] >= 1
              and _is_num(decay[1]) and 0 < decay[1] <= 1)
        _need(ok, f"sl.lr_decay must be null or [every_n_epochs >= 1, "
                  f"factor in (0, 1]], got {decay!r}")
    _need(doc["do"]["gradient_mode"] in ("bp", "adjoint"),
          f"do.gradient_mode must be 'bp' or 'adjoint', "
          f"got {doc['do']['gradient_mode']!r}")
    _need(_is_int(doc["do"]["checkpoint_segments"])
          and doc["do"]["checkpoint_segments"] >= 1,
          "do.checkpoint_segments must be an integer >= 1")

    ev = doc["evaluation"]
    _need(_is_int(ev["validation_count"]) and ev["validation_count"] >= 1,
          "evaluation.validation_count must be an integer >= 1")
    _need(isinstance(ev["noise_sigmas"], list) and ev["noise_sigmas"]
          and all(_is_num(s) and s >= 0 for s in ev["noise_sigmas"]),
          "evaluation.noise_sigmas must be a nonempty list of "
          "nonnegative numbers")
    _need(_is_num(ev["noise_hold_dt"]) and ev["noise_hold_dt"] > 0,
          "evaluation.noise_hold_dt must be positive")


def config_from_doc(doc: dict) -> ExperimentConfig:
    """Merge a user document over the matching preset and validate."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object, "
                          f"got {type(doc).__name__}")
    _reject_unknown(doc)
    if "problem" not in doc:
        raise ConfigError("config needs a 'problem' key "
                          f"(one of {PROBLEMS})")
    problem = doc["problem"]
    _need(problem in PROBLEMS,
          f"problem must be one of {PROBLEMS}, got {problem!r}")
    profile = doc.get("profile", "desk")
    _need(profile in PROFILES,
          f"profile must be one of {PROFILES}, got {profile!r}")
    box = doc.get("init_box", "small" if problem == "quadrotor" else "full")
    box = _check_init_box(box, problem)
    box_kind = box if isinstance(box, str) else "small"
    sampling = doc.get("dataset", {}).get("sampling", "uniform")

    merged = _default_doc(problem, profile, box_kind, sampling)
    merged["init_box"] = box
    for key, val in doc.items():
        if key in _SECTION_KEYS:
            merged[key] = {**merged[key], **val}
        else:
            merged[key] = val
    _validate(merged)
    # surface grid problems (ordering, horizon mismatch) as config errors
    grid_doc = merged["dataset"]["grid"]
    if merged["dataset"]["sampling"] == "adaptive":
        horizon = merged["horizon"]
        if horizon is None:
            horizon = make_ocp(problem).horizon_T
        if grid_doc is None:
            _need(horizon == 16.0,
                  "adaptive sampling has a published checkpoint grid only "
                  "for horizon 16; give dataset.grid explicitly for "
                  f"horizon {horizon}")
            merged["dataset"]["grid"] = [0.0, 10.0, 14.0, 16.0]
        try:
            AdaptiveGrid(tuple(merged["dataset"]["grid"])) \
                .validate_horizon(horizon)
        except ValueError as exc:
            raise ConfigError(f"dataset.grid: {exc}") from exc
    return ExperimentConfig(
        problem=merged["problem"], profile=merged["profile"],
        horizon=merged["horizon"], init_box=merged["init_box"],
        seed=merged["seed"], out_dir=merged["out_dir"],
        workers=merged["workers"], integrator=merged["integrator"],
        dataset=merged["dataset"], sl=merged["sl"], do=merged["do"],
        finetune=merged["finetune"], evaluation=merged["evaluation"])


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_doc(doc)


def to_doc(cfg: ExperimentConfig) -> dict:
    """Canonical echo of the resolved config, safe to serialize."""
    return {
        "problem": cfg.problem, "profile": cfg.profile,
        "horizon": cfg.horizon, "init_box": copy.deepcopy(cfg.init_box),
        "seed": cfg.seed, "out_dir": cfg.out_dir, "workers": cfg.workers,
        "integrator": dict(cfg.integrator), "dataset": dict(cfg.dataset),
        "sl": dict(cfg.sl), "do": dict(cfg.do),
        "finetune": dict(cfg.finetune), "evaluation": dict(cfg.evaluation),
    }


def build_problem(cfg: ExperimentConfig) -> OcpDef:
    box_kind = cfg.init_box if isinstance(cfg.init_box, str) else "small"
    prob = make_ocp(cfg.problem, cfg.horizon, box_kind)
    if isinstance(cfg.init_box, dict):
        lo = np.asarray(cfg.init_box["lo"], dtype=float)
        if lo.size != prob.n:
            raise ConfigError(f"custom init_box has {lo.size} components; "
                              f"{cfg.problem} needs {prob.n}")
        custom = InitBox(lo, np.asarray(cfg.init_box["hi"], dtype=float))
        prob = replace(prob, init_box=custom)
    return prob


def integrator_spec(cfg: ExperimentConfig) -> IntegratorSpec:
    g = cfg.integrator
    return IntegratorSpec(scheme=g["scheme"], abs_tol=g["abs_tol"],
                          rel_tol=g["rel_tol"], max_steps=g["max_steps"])


def sl_config(cfg: ExperimentConfig, validation=None) -> SlConfig:
    s = cfg.sl
    decay = tuple(s["lr_decay"]) if s["lr_decay"] is not None else None
    return SlConfig(epochs=s["epochs"], batch_size=s["batch_size"],
                    lr=s["lr"], lr_decay=decay, seed=cfg.seed,
                    validation=validation)


def do_config(cfg: ExperimentConfig) -> DoConfig:
    d = cfg.do
    return DoConfig(iterations=d["iterations"], batch_size=d["batch_size"],
                    lr=d["lr"], gradient_mode=d["gradient_mode"],
                    checkpoint_segments=d["checkpoint_segments"],
                    seed=cfg.seed, integ=integrator_spec(cfg))


def finetune_config(cfg: ExperimentConfig) -> DoConfig:
    f = cfg.finetune
    d = cfg.do
    return DoConfig(iterations=f["iterations"], batch_size=f["batch_size"],
                    lr=f["lr"], gradient_mode=d["gradient_mode"],
                    checkpoint_segments=d["checkpoint_segments"],
                    seed=cfg.seed, integ=integrator_spec(cfg))


def adaptive_grid(cfg: ExperimentConfig) -> AdaptiveGrid | None:
    if cfg.dataset["sampling"] != "adaptive":
        return None
    return AdaptiveGrid(tuple(cfg.dataset["grid"]))
