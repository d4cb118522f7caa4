"""Command-line pipeline driver.

Subcommands cover the full workflow: gen-data, train (--stage sl|do|
finetune), eval, landscape, and bvp-solve. Every command reads one JSON
config (see config.py), honors the --seed/--workers/--out/--profile
overrides, and writes its artifacts plus a manifest under the output
directory. Reruns with the same config and seed reproduce every artifact
byte for byte; wall-clock lives only in the manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import data, evalsim, net, report, train
from .errors import (ClosedLoopError, ConfigError, MissingArtifact,
                     StorageError)
from .evalsim import NoiseSpec
from .rngutil import child_rng


def _float_list(text: str, flag: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{flag} needs comma-separated numbers, "
                          f"got {text!r}") from exc


def _load_doc(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _resolve_config(args) -> cfgmod.ExperimentConfig:
    doc = _load_doc(args.config)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        doc["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        doc["out_dir"] = args.out
    if getattr(args, "profile", None) is not None:
        doc["profile"] = args.profile
    return cfgmod.config_from_doc(doc)


def _dataset_path(cfg):
    return os.path.join(cfg.out_dir, "dataset.csv")


def _checkpoint_path(cfg, stage: str):
    return os.path.join(cfg.out_dir, f"checkpoint_{stage}.json")


def _validation_path(cfg):
    return os.path.join(cfg.out_dir, "validation.json")


def _checkpoint_meta(cfg, prob, stage: str) -> dict:
    return {"problem": prob.name, "horizon": prob.horizon_T,
            "seed": cfg.seed, "stage": stage}


def cmd_gen_data(cfg: cfgmod.ExperimentConfig) -> int:
    prob = cfgmod.build_problem(cfg)
    ds_cfg = cfg.dataset
    t0 = time.monotonic()
    if ds_cfg["sampling"] == "adaptive":
        grid = cfgmod.adaptive_grid(cfg)

        def trainer(acc):
            init = net.init_params(prob.n, prob.m, cfg.seed)
            params, _ = train.train_sl(prob, acc, init,
                                       cfgmod.sl_config(cfg))
            return params

        ds = data.generate_adaptive(
            prob, grid, ds_cfg["n_trajectories"],
            ds_cfg["nodes_per_trajectory"], cfg.seed, trainer,
            rollout_integ=cfgmod.integrator_spec(cfg),
            workers=cfg.workers)
    else:
        ds = data.generate_uniform(
            prob, ds_cfg["n_trajectories"], ds_cfg["nodes_per_trajectory"],
            cfg.seed, workers=cfg.workers)
    elapsed = time.monotonic() - t0
    path = _dataset_path(cfg)
    data.write_dataset(ds, path)
    print(f"wrote {path} ({len(ds)} records, "
          f"{ds.meta['n_converged']} converged solves)")
    report.write_manifest(
        os.path.join(cfg.out_dir, "manifest_gen_data.json"), "gen-data",
        cfgmod.to_doc(cfg),
        {"dataset": path, "dataset_meta": f"{path}.meta.json"},
        {"gen_data": elapsed})
    return 0


def _require(path, what: str, hint: str):
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} {path} not found; {hint}")


def _split_validation(ds: data.Dataset):
    """Deterministic 90/10 record split; records are already shuffled."""
    n_val = len(ds) // 10
    if n_val < 1:
        return ds, None
    return (ds.subset(np.arange(0, len(ds) - n_val)),
            ds.subset(np.arange(len(ds) - n_val, len(ds))))


def _train_sl(cfg, prob):
    _require(_dataset_path(cfg), "dataset", "run gen-data first")
    ds = data.read_dataset(_dataset_path(cfg))
    train_ds, val_ds = _split_validation(ds)
    init = net.init_params(prob.n, prob.m, cfg.seed)
    return train.train_sl(prob, train_ds, init,
                          cfgmod.sl_config(cfg, validation=val_ds))


def cmd_train(cfg: cfgmod.ExperimentConfig, stage: str,
              run_pretrain: bool) -> int:
    prob = cfgmod.build_problem(cfg)
    artifacts = {}
    timings = {}
    extra = {}

    if stage == "sl":
        t0 = time.monotonic()
        params, log = _train_sl(cfg, prob)
        timings["sl"] = time.monotonic() - t0
    elif stage == "do":
        t0 = time.monotonic()
        init = net.init_params(prob.n, prob.m, cfg.seed)
        params, log = train.train_do(prob, init, cfgmod.do_config(cfg))
        timings["do"] = time.monotonic() - t0
    else:  # finetune
        sl_path = _checkpoint_path(cfg, "sl")
        if not os.path.exists(sl_path):
            if not run_pretrain:
                raise MissingArtifact(
                    f"pre-trained checkpoint {sl_path} not found; run "
                    f"`train --stage sl` first or pass --run-pretrain")
            t0 = time.monotonic()
            sl_params, sl_log = _train_sl(cfg, prob)
            timings["sl"] = time.monotonic() - t0
            net.save_checkpoint(sl_path, sl_params, None,
                                _checkpoint_meta(cfg, prob, "sl"))
            sl_csv = os.path.join(cfg.out_dir, "train_log_sl.csv")
            report.write_train_log(sl_log, sl_csv)
            report.plot_train_log(
                sl_log, os.path.join(cfg.out_dir, "train_loss_sl.png"))
            artifacts["checkpoint_sl"] = sl_path
            artifacts["train_log_sl"] = sl_csv
            print(f"wrote {sl_path}")
        else:
            sl_params, _, _ = net.load_checkpoint(sl_path, prob.n, prob.m)
        t0 = time.monotonic()
        params, log = train.train_do(prob, sl_params,
                                     cfgmod.finetune_config(cfg),
                                     stage_tag="finetune")
        timings["finetune"] = time.monotonic() - t0

    ckpt = _checkpoint_path(cfg, stage)
    net.save_checkpoint(ckpt, params, None,
                        _checkpoint_meta(cfg, prob, stage))
    log_csv = os.path.join(cfg.out_dir, f"train_log_{stage}.csv")
    report.write_train_log(log, log_csv)
    fig = os.path.join(cfg.out_dir, f"train_loss_{stage}.png")
    report.plot_train_log(log, fig)
    artifacts.update({f"checkpoint_{stage}": ckpt,
                      f"train_log_{stage}": log_csv,
                      f"train_loss_{stage}_figure": fig})
    if log.val_losses:
        extra["final_validation_loss"] = log.val_losses[-1]
    if log.steps:
        extra["final_train_loss"] = log.steps[-1]["loss"]
    extra["n_dropped_rollouts"] = log.n_dropped
    report.write_manifest(
        os.path.join(cfg.out_dir, f"manifest_train_{stage}.json"),
        f"train --stage {stage}", cfgmod.to_doc(cfg), artifacts, timings,
        extra)
    final = extra.get("final_validation_loss",
                      extra.get("final_train_loss", float("nan")))
    print(f"wrote {ckpt} (final loss {final:.6g})")
    return 0


def _load_validation(cfg, prob):
    path = _validation_path(cfg)
    if os.path.exists(path):
        return report.read_validation(path), path, 0.0
    t0 = time.monotonic()
    vset = evalsim.build_validation_set(
        prob, cfg.evaluation["validation_count"], cfg.seed)
    elapsed = time.monotonic() - t0
    report.write_validation(vset, prob.name, path)
    print(f"wrote {path} ({vset.states.shape[0]} reference solves)")
    return vset, path, elapsed


def cmd_eval(cfg: cfgmod.ExperimentConfig, checkpoint: str,
             sigmas) -> int:
    prob = cfgmod.build_problem(cfg)
    _require(checkpoint, "checkpoint", "train a controller first")
    params, _, _ = net.load_checkpoint(checkpoint, prob.n, prob.m)
    vset, vpath, t_refs = _load_validation(cfg, prob)
    keep = vset.usable
    states, costs = vset.states[keep], vset.costs[keep]
    ispec = cfgmod.integrator_spec(cfg)
    if sigmas is None:
        sigmas = cfg.evaluation["noise_sigmas"]
    artifacts = {"validation": vpath}
    timings = {"references": t_refs}
    curves = []
    for sigma in sigmas:
        noise = None if sigma == 0 else NoiseSpec(
            sigma=sigma, hold_dt=cfg.evaluation["noise_hold_dt"],
            seed=cfg.seed)
        t0 = time.monotonic()
        stats = evalsim.evaluate_cost_ratio(prob, params, states, costs,
                                            ispec, noise,
                                            workers=cfg.workers)
        timings[f"eval_sigma_{sigma:g}"] = time.monotonic() - t0
        spath = os.path.join(cfg.out_dir, f"stats_sigma_{sigma:g}.json")
        cpath = os.path.join(cfg.out_dir, f"cdf_sigma_{sigma:g}.csv")
        report.write_stats(stats, sigma, cfgmod.to_doc(cfg), spath)
        evalsim.export_cdf(stats, cpath)
        artifacts[f"stats_sigma_{sigma:g}"] = spath
        artifacts[f"cdf_sigma_{sigma:g}"] = cpath
        curves.append((f"sigma={sigma:g}", stats))
        print(f"sigma={sigma:g}: mean {stats.mean:.4f} median "
              f"{stats.median:.4f} max {stats.max:.4f} "
              f"diverged {stats.n_diverged}")
    fig = os.path.join(cfg.out_dir, "cdf.png")
    report.plot_cdf(curves, fig)
    artifacts["cdf_figure"] = fig
    report.write_manifest(
        os.path.join(cfg.out_dir, "manifest_eval.json"), "eval",
        cfgmod.to_doc(cfg), artifacts, timings,
        {"checkpoint": checkpoint})
    return 0


def _quadratic_self_test(cfg) -> int:
    """Analytic quadratic: beta must equal 1 on any scale grid."""
    theta = net.init_params(2, 1, cfg.seed)

    def quad(params):
        flat = net.flatten(params)
        return 0.5 * float(flat @ flat), \
            net.unflatten_like(net.zero_grad(params), flat)

    rep = train.landscape_probe(quad, theta, lr=0.1,
                                scales=[0.01, 0.1, 1.0, 10.0, 100.0])
    err = abs(rep.effective_beta - 1.0)
    print(f"quadratic self-test: effective_beta {rep.effective_beta!r} "
          f"(|error| {err:.3e})")
    if err > 1e-10:
        print("self-test FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_landscape(cfg: cfgmod.ExperimentConfig, args) -> int:
    if args.quadratic_self_test:
        return _quadratic_self_test(cfg)
    prob = cfgmod.build_problem(cfg)
    if args.fresh_init:
        params = net.init_params(prob.n, prob.m, cfg.seed)
        probe_point = "fresh-init"
    else:
        if not args.checkpoint:
            raise MissingArtifact(
                "landscape needs --checkpoint PATH or --fresh-init")
        _require(args.checkpoint, "checkpoint", "train a controller first")
        params, _, _ = net.load_checkpoint(args.checkpoint, prob.n, prob.m)
        probe_point = args.checkpoint

    if args.loss == "sl":
        _require(_dataset_path(cfg), "dataset", "run gen-data first")
        ds = data.read_dataset(_dataset_path(cfg))

        def loss_and_grad(p):
            return train.sl_loss_arrays(p, ds.ts, ds.xs, ds.us)

        lr = cfg.sl["lr"]
        scales = np.logspace(-2.0, 2.0, 9)
    else:
        ispec = cfgmod.integrator_spec(cfg)
        x0s = prob.init_box.sample(child_rng(cfg.seed, "landscape-batch"),
                                   cfg.do["batch_size"])
        segs = cfg.do["checkpoint_segments"]

        def loss_and_grad(p):
            return train.do_loss_and_grad_bp(prob, p, x0s, ispec,
                                             checkpoint_segments=segs)

        lr = cfg.do["lr"]
        scales = np.logspace(-2.0, -1.0, 5)
    if args.scales:
        scales = _float_list(args.scales, "--scales")

    t0 = time.monotonic()
    rep = train.landscape_probe(loss_and_grad, params, lr, scales)
    elapsed = time.monotonic() - t0
    base = os.path.join(cfg.out_dir, f"landscape_{args.loss}")
    report.write_landscape(rep, f"{base}.csv")
    report.write_landscape_summary(rep, f"{base}_summary.json")
    report.plot_landscape(rep, f"{base}.png")
    print(f"wrote {base}.csv (effective_beta {rep.effective_beta!r}, "
          f"{rep.n_nonfinite} non-finite probes)")
    report.write_manifest(
        os.path.join(cfg.out_dir, f"manifest_landscape_{args.loss}.json"),
        f"landscape --loss {args.loss}", cfgmod.to_doc(cfg),
        {"rows": f"{base}.csv", "summary": f"{base}_summary.json",
         "figure": f"{base}.png"},
        {"landscape": elapsed}, {"probe_point": probe_point})
    return 0


def cmd_bvp_solve(cfg: cfgmod.ExperimentConfig, x0_arg) -> int:
    from .openloop import solve_with_continuation
    prob = cfgmod.build_problem(cfg)
    if x0_arg:
        x0 = np.array(_float_list(x0_arg, "--x0"))
        if x0.size != prob.n:
            raise ConfigError(f"--x0 has {x0.size} components; "
                              f"{prob.name} needs {prob.n}")
    else:
        x0 = prob.init_box.sample(child_rng(cfg.seed, "bvp-solve"), 1)[0]
    t0 = time.monotonic()
    sol = solve_with_continuation(prob, x0)
    elapsed = time.monotonic() - t0
    path = os.path.join(cfg.out_dir, "trajectory.csv")
    report.write_trajectory(sol, prob.n, prob.m, path)
    print(f"wrote {path} (cost {sol.total_cost:.6f}, residual "
          f"{sol.residual:.2e}, {sol.newton_iters} Newton iterations)")
    report.write_manifest(
        os.path.join(cfg.out_dir, "manifest_bvp_solve.json"), "bvp-solve",
        cfgmod.to_doc(cfg), {"trajectory": path}, {"solve": elapsed},
        {"total_cost": sol.total_cost, "residual": sol.residual,
         "converged": sol.converged, "newton_iters": sol.newton_iters,
         "x0": [float(v) for v in x0]})
    return 0


def _add_common(sp) -> None:
    sp.add_argument("--config", required=True, help="JSON config path")
    sp.add_argument("--seed", type=int, help="override config seed")
    sp.add_argument("--workers", type=int,
                    help="override config worker count")
    sp.add_argument("--out", help="override config output directory")
    sp.add_argument("--profile", choices=cfgmod.PROFILES,
                    help="override config profile")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="closedloop",
        description="Train and evaluate neural closed-loop controllers "
                    "against open-loop optimal references.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data",
                        help="generate an open-loop training dataset")
    _add_common(sp)

    sp = sub.add_parser("train", help="train a controller stage")
    _add_common(sp)
    sp.add_argument("--stage", required=True,
                    choices=("sl", "do", "finetune"))
    sp.add_argument("--run-pretrain", action="store_true",
                    help="for --stage finetune: run the supervised stage "
                         "first when its checkpoint is missing")

    sp = sub.add_parser("eval",
                        help="closed-loop cost-ratio evaluation")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--noise",
                    help="comma-separated sigma list overriding the "
                         "config sweep")

    sp = sub.add_parser("landscape", help="loss-landscape probe")
    _add_common(sp)
    sp.add_argument("--loss", required=True, choices=("sl", "do"))
    sp.add_argument("--checkpoint", help="probe point")
    sp.add_argument("--fresh-init", action="store_true",
                    help="probe at a fresh seeded initialization")
    sp.add_argument("--scales", help="comma-separated scale grid override")
    sp.add_argument("--quadratic-self-test", action="store_true",
                    help="check effective_beta = 1 on the analytic "
                         "quadratic and exit")

    sp = sub.add_parser("bvp-solve",
                        help="single open-loop solve to a trajectory file")
    _add_common(sp)
    sp.add_argument("--x0", help="comma-separated initial state "
                                 "(sampled from the box when omitted)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.run_pretrain)
        if args.command == "eval":
            sigmas = None
            if args.noise is not None:
                sigmas = _float_list(args.noise, "--noise")
                if any(s < 0 for s in sigmas):
                    raise ConfigError("--noise sigmas must be >= 0")
            return cmd_eval(cfg, args.checkpoint, sigmas)
        if args.command == "landscape":
            return cmd_landscape(cfg, args)
        if args.command == "bvp-solve":
            return cmd_bvp_solve(cfg, args.x0)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ClosedLoopError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
