"""End-to-end acceptance suite at desk scale.

Session-scoped fixtures run each training pipeline exactly once; the
tests then check quantitative gates, method orderings, and invariants on
the shared results. Budgets are wall-clock seconds measured around the
fixture work, so a slow machine fails loudly instead of silently.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from closedloop import config as cfgmod
from closedloop import data, net, report, train
from closedloop.evalsim import (NoiseSpec, build_validation_set,
                                evaluate_cost_ratio, rollout_closed_loop)
from closedloop.integrate import IntegratorSpec
from closedloop.ocp import hamiltonian_du, satellite_ocp, scalar_lqr_ocp
from closedloop.openloop import lqr_oracle, solve_with_continuation
from closedloop.rngutil import child_rng
from closedloop.train import (do_loss_and_grad_adjoint, do_loss_and_grad_bp,
                              landscape_probe, replay_cost, rollout_records,
                              sl_loss_arrays)

TANH1 = 0.7615941559557649


def flat(params):
    return net.flatten(params)


def eval_on(bundle, params, noise=None):
    return evaluate_cost_ratio(bundle["prob"], params, bundle["vstates"],
                               bundle["vcosts"], bundle["ispec"], noise)


def audit_minimum_principle(prob, solutions):
    """Stationarity and transversality of every stored trajectory node."""
    assert solutions, "fixture captured no open-loop solutions"
    worst_du = worst_term = 0.0
    for sol in solutions:
        term = np.max(np.abs(sol.costates[-1] - prob.dM_dx(sol.states[-1])))
        worst_term = max(worst_term, float(term))
        for k in range(sol.grid.nodes.size):
            du = hamiltonian_du(prob, sol.states[k], sol.controls[k],
                                sol.costates[k])
            worst_du = max(worst_du, float(np.max(np.abs(du))))
    assert worst_du <= 1e-8, f"max |dH/du| over nodes = {worst_du:.3e}"
    assert worst_term <= 1e-8, f"max terminal residual = {worst_term:.3e}"


def envelope_width(rep):
    """Loss span across a landscape probe and its base point; +inf when
    any probe blew up (loss_max is already +inf then)."""
    return max(rep.loss_max, rep.base_loss) - min(rep.loss_min,
                                                  rep.base_loss)


# ---------------------------------------------------------------------------
# shared pipelines


@pytest.fixture(scope="session")
def sat_bundle():
    """Attitude problem, desk preset: dataset, references, supervised run."""
    cfg = cfgmod.config_from_doc({"problem": "satellite"})
    prob = cfgmod.build_problem(cfg)
    ispec = cfgmod.integrator_spec(cfg)
    times = {}
    solutions = []

    t0 = time.monotonic()
    ds = data.generate_uniform(prob, cfg.dataset["n_trajectories"],
                               cfg.dataset["nodes_per_trajectory"], cfg.seed,
                               on_solution=solutions.append)
    times["dataset"] = time.monotonic() - t0

    t0 = time.monotonic()
    vset = build_validation_set(prob, cfg.evaluation["validation_count"],
                                cfg.seed)
    times["references"] = time.monotonic() - t0
    keep = vset.usable

    # same held-out record split the CLI trains with
    n_val = len(ds) // 10
    train_ds = ds.subset(np.arange(0, len(ds) - n_val))
    val_ds = ds.subset(np.arange(len(ds) - n_val, len(ds)))
    init = net.init_params(prob.n, prob.m, cfg.seed)
    t0 = time.monotonic()
    sl_params, sl_log = train.train_sl(
        prob, train_ds, init, cfgmod.sl_config(cfg, validation=val_ds))
    times["sl_train"] = time.monotonic() - t0

    bundle = dict(cfg=cfg, prob=prob, ispec=ispec, dataset=ds,
                  solutions=solutions, init=init, sl_params=sl_params,
                  sl_log=sl_log, vstates=vset.states[keep],
                  vcosts=vset.costs[keep], times=times)
    t0 = time.monotonic()
    bundle["sl_stats"] = eval_on(bundle, sl_params)
    times["sl_eval"] = time.monotonic() - t0
    return bundle


@pytest.fixture(scope="session")
def sat_do(sat_bundle):
    """From-scratch rollout-gradient run sharing the supervised seed."""
    b = sat_bundle
    t0 = time.monotonic()
    params, log = train.train_do(b["prob"], b["init"],
                                 cfgmod.do_config(b["cfg"]))
    t_train = time.monotonic() - t0
    return dict(params=params, log=log, stats=eval_on(b, params),
                train_time=t_train)


@pytest.fixture(scope="session")
def quad_bundle():
    """Quadrotor landing, T=8, small start box, desk preset: dataset,
    references, two-stage pipeline, and a from-scratch run."""
    cfg = cfgmod.config_from_doc({"problem": "quadrotor", "horizon": 8.0})
    prob = cfgmod.build_problem(cfg)
    ispec = cfgmod.integrator_spec(cfg)
    times = {}
    solutions = []

    t0 = time.monotonic()
    ds = data.generate_uniform(prob, cfg.dataset["n_trajectories"],
                               cfg.dataset["nodes_per_trajectory"], cfg.seed,
                               on_solution=solutions.append)
    times["dataset"] = time.monotonic() - t0

    t0 = time.monotonic()
    vset = build_validation_set(prob, cfg.evaluation["validation_count"],
                                cfg.seed)
    times["references"] = time.monotonic() - t0
    keep = vset.usable

    stage_params = {}
    t0 = time.monotonic()
    ft_params, _ = train.pretrain_finetune(
        prob, ds, cfgmod.sl_config(cfg), cfgmod.finetune_config(cfg),
        on_stage_end=lambda tag, p: stage_params.update({tag: p}))
    times["pretrain_finetune"] = time.monotonic() - t0

    t0 = time.monotonic()
    do_params, _ = train.train_do(prob, net.init_params(prob.n, prob.m,
                                                        cfg.seed),
                                  cfgmod.do_config(cfg))
    times["do_train"] = time.monotonic() - t0

    bundle = dict(cfg=cfg, prob=prob, ispec=ispec, solutions=solutions,
                  vstates=vset.states[keep], vcosts=vset.costs[keep],
                  times=times)
    t0 = time.monotonic()
    bundle["sl_stats"] = eval_on(bundle, stage_params["sl"])
    bundle["ft_stats"] = eval_on(bundle, ft_params)
    bundle["do_stats"] = eval_on(bundle, do_params)
    times["evals"] = time.monotonic() - t0
    return bundle


@pytest.fixture(scope="session")
def quad_t4_do():
    """Quadrotor from-scratch run at the shorter horizon."""
    cfg = cfgmod.config_from_doc({"problem": "quadrotor", "horizon": 4.0})
    prob = cfgmod.build_problem(cfg)
    vset = build_validation_set(prob, cfg.evaluation["validation_count"],
                                cfg.seed)
    keep = vset.usable
    params, _ = train.train_do(prob, net.init_params(prob.n, prob.m,
                                                     cfg.seed),
                               cfgmod.do_config(cfg))
    stats = evaluate_cost_ratio(prob, params, vset.states[keep],
                                vset.costs[keep],
                                cfgmod.integrator_spec(cfg))
    return dict(stats=stats)


# ---------------------------------------------------------------------------
# gradient and oracle checks (cheap, self-contained)


def test_gradient_triangulation_three_routes_agree():
    """Rollout backprop, continuous adjoint, and central differences give
    the same gradients to 1e-3 on ten random parameter draws."""
    t_start = time.monotonic()
    integ = IntegratorSpec(abs_tol=1e-7, rel_tol=1e-7)
    sat1 = replace(satellite_ocp(), horizon_T=1.0)
    scalar = scalar_lqr_ocp(q=0.0)
    rng = np.random.default_rng(314)
    draws = [(sat1, 6, 3)] * 5 + [(scalar, 1, 1)] * 5
    for k, (prob, n, m) in enumerate(draws):
        params = net.init_params(n, m, 400 + k)
        X0 = prob.init_box.sample(rng, 2)
        cb, gb = do_loss_and_grad_bp(prob, params, X0, integ)
        ca, ga = do_loss_and_grad_adjoint(prob, params, X0, integ)
        gbf, gaf = flat(gb), flat(ga)
        assert abs(ca - cb) <= 1e-6 * max(1.0, abs(cb))
        assert np.linalg.norm(gaf - gbf) <= 1e-3 * np.linalg.norm(gbf)
        frozen = rollout_records(prob, params, X0, integ)
        v = rng.standard_normal(gbf.size)
        v /= np.linalg.norm(v)
        eps = 1e-6
        theta = flat(params)
        up = net.unflatten_like(params, theta + eps * v)
        dn = net.unflatten_like(params, theta - eps * v)
        fd = (replay_cost(prob, up, X0, frozen)
              - replay_cost(prob, dn, X0, frozen)) / (2.0 * eps)
        ref = max(1e-6, abs(fd), abs(float(gbf @ v)))
        assert abs(float(gbf @ v) - fd) <= 1e-3 * ref
        assert abs(float(gaf @ v) - fd) <= 1e-3 * ref
    assert time.monotonic() - t_start < 60.0


def test_scalar_shooting_matches_riccati_oracle():
    """Solver cost equals the Riccati value on random instances and the
    closed-form tanh case, well under the time budget."""
    t_start = time.monotonic()
    sol = solve_with_continuation(
        scalar_lqr_ocp(a=0.0, b=1.0, q=1.0, r=1.0, m_T=0.0, horizon_T=1.0),
        np.array([1.0]))
    assert sol.converged
    assert abs(sol.total_cost - TANH1) <= 1e-5
    assert abs(TANH1 - 0.76159) < 5e-6

    rng = child_rng(7, "acceptance-lqr")
    for _ in range(10):
        a = rng.uniform(-1.0, 1.0)
        b = rng.uniform(0.5, 2.0)
        q = rng.uniform(0.1, 2.0)
        r = rng.uniform(0.1, 2.0)
        m_T = rng.uniform(0.0, 1.0)
        T = rng.uniform(0.5, 3.0)
        x0 = rng.uniform(-1.5, 1.5)
        prob = scalar_lqr_ocp(a=a, b=b, q=q, r=r, m_T=m_T, horizon_T=T)
        sol = solve_with_continuation(prob, np.array([x0]))
        ref = lqr_oracle(a, b, q, r, m_T, T).cost(x0)
        assert sol.converged
        assert abs(sol.total_cost - ref) <= 1e-5
    assert time.monotonic() - t_start < 10.0


def test_quadratic_probe_beta_is_exactly_one():
    """On l = 0.5 ||theta||^2 the curvature estimate is 1 for any grid."""
    def quad(params):
        f = flat(params)
        return 0.5 * float(f @ f), net.unflatten_like(params, f)

    theta = net.init_params(3, 2, 11)
    for scales in ([0.01, 0.1, 1.0, 10.0, 100.0],
                   [7e-4, 0.33, 2.0, 451.0]):
        rep = landscape_probe(quad, theta, lr=0.37, scales=scales)
        assert abs(rep.effective_beta - 1.0) <= 1e-10


# ---------------------------------------------------------------------------
# determinism and round-trips (scalar problem keeps these fast)


def test_identical_seed_reproduces_artifacts_bytewise(tmp_path):
    prob = scalar_lqr_ocp()
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        ds = data.generate_uniform(prob, 6, 9, seed=21)
        data.write_dataset(ds, d / "dataset.csv")
        init = net.init_params(1, 1, 21)
        sl_cfg = train.SlConfig(epochs=20, batch_size=16, lr=0.01, seed=21)
        sl_params, sl_log = train.train_sl(prob, ds, init, sl_cfg)
        meta = {"problem": prob.name, "horizon": prob.horizon_T,
                "seed": 21, "stage": "sl"}
        net.save_checkpoint(d / "sl.json", sl_params, None, meta)
        report.write_train_log(sl_log, d / "sl.csv")
        do_cfg = train.DoConfig(iterations=5, batch_size=8, lr=0.01, seed=21)
        do_params, do_log = train.train_do(prob, init, do_cfg)
        net.save_checkpoint(d / "do.json", do_params, None,
                            dict(meta, stage="do"))
        report.write_train_log(do_log, d / "do.csv")
        vset = build_validation_set(prob, 4, seed=21)
        stats = evaluate_cost_ratio(prob, sl_params, vset.states,
                                    vset.costs)
        report.write_stats(stats, 0.0, {"seed": 21}, d / "stats.json")
        outs.append(d)
    for name in ("dataset.csv", "dataset.csv.meta.json", "sl.json",
                 "sl.csv", "do.json", "do.csv", "stats.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_save_load_round_trips_are_exact(tmp_path):
    prob = scalar_lqr_ocp()
    ds = data.generate_uniform(prob, 3, 7, seed=5)
    data.write_dataset(ds, tmp_path / "ds.csv")
    back = data.read_dataset(tmp_path / "ds.csv")
    assert np.array_equal(ds.ts, back.ts)
    assert np.array_equal(ds.xs, back.xs)
    assert np.array_equal(ds.us, back.us)

    params = net.init_params(2, 2, 9)
    net.save_checkpoint(tmp_path / "p.json", params, None,
                        {"problem": prob.name, "horizon": prob.horizon_T,
                         "seed": 9, "stage": "sl"})
    loaded, _, _ = net.load_checkpoint(tmp_path / "p.json", 2, 2)
    assert np.array_equal(flat(params), flat(loaded))

    vset = build_validation_set(prob, 3, seed=5)
    report.write_validation(vset, prob.name, tmp_path / "v.json")
    vback = report.read_validation(tmp_path / "v.json")
    assert np.array_equal(vset.states, vback.states)
    assert np.array_equal(vset.costs, vback.costs)
    assert np.array_equal(vset.usable, vback.usable)


def test_zero_sigma_noise_is_bitwise_noiseless():
    prob = scalar_lqr_ocp()
    params = net.init_params(1, 1, 3)
    vset = build_validation_set(prob, 4, seed=3)
    clean = evaluate_cost_ratio(prob, params, vset.states, vset.costs)
    zero = evaluate_cost_ratio(prob, params, vset.states, vset.costs,
                               noise=NoiseSpec(sigma=0.0, hold_dt=0.01,
                                               seed=77))
    assert np.array_equal(clean.ratios, zero.ratios)
    assert clean.mean == zero.mean


def test_rollout_gradients_invariant_to_checkpoint_segments():
    integ = IntegratorSpec(abs_tol=1e-7, rel_tol=1e-7)
    tight = IntegratorSpec(abs_tol=1e-12, rel_tol=1e-12)
    sat1 = replace(satellite_ocp(), horizon_T=1.0)
    scalar = scalar_lqr_ocp(q=0.0)
    for prob, n, m in ((sat1, 6, 3), (scalar, 1, 1)):
        params = net.init_params(n, m, 29)
        X0 = prob.init_box.sample(np.random.default_rng(30), 4)
        cb, gb = do_loss_and_grad_bp(prob, params, X0, integ, 1)
        ca, ga = do_loss_and_grad_adjoint(prob, params, X0, integ, 1,
                                          backward_integ=tight)
        for segs in (2, 8):
            c2, g2 = do_loss_and_grad_bp(prob, params, X0, integ, segs)
            assert abs(c2 - cb) <= 1e-10 * max(1.0, abs(cb))
            assert np.max(np.abs(flat(g2) - flat(gb))) <= 1e-10
            c3, g3 = do_loss_and_grad_adjoint(prob, params, X0, integ, segs,
                                              backward_integ=tight)
            assert abs(c3 - ca) <= 1e-10 * max(1.0, abs(ca))
            assert np.max(np.abs(flat(g3) - flat(ga))) \
                <= 1e-10 * max(1.0, float(np.max(np.abs(flat(ga)))))


# ---------------------------------------------------------------------------
# attitude problem, desk scale


@pytest.mark.slow
def test_satellite_records_satisfy_minimum_principle(sat_bundle):
    audit_minimum_principle(sat_bundle["prob"], sat_bundle["solutions"])


@pytest.mark.slow
def test_satellite_supervised_pipeline_near_optimal(sat_bundle):
    stats = sat_bundle["sl_stats"]
    total = sum(sat_bundle["times"].values())
    assert stats.ratios.size == 20
    assert stats.n_diverged == 0
    assert stats.mean <= 1.02, f"mean ratio {stats.mean:.4f}"
    assert stats.median <= 1.01, f"median ratio {stats.median:.4f}"
    assert total <= 900.0, f"pipeline took {total:.0f} s"


@pytest.mark.slow
def test_satellite_supervised_validation_loss_small(sat_bundle):
    assert sat_bundle["sl_log"].val_losses[-1] < 1e-3


@pytest.mark.slow
def test_satellite_scratch_do_trails_supervised(sat_bundle, sat_do):
    do_stats, sl_stats = sat_do["stats"], sat_bundle["sl_stats"]
    assert do_stats.mean <= 1.3, f"mean ratio {do_stats.mean:.4f}"
    assert do_stats.mean > sl_stats.mean, \
        f"do {do_stats.mean:.4f} vs sl {sl_stats.mean:.4f}"


@pytest.mark.slow
def test_satellite_scratch_do_mean_cost_near_reference(sat_bundle, sat_do):
    # aggregate closed-loop cost within 15% of the aggregate optimal cost
    b = sat_bundle
    closed = [rollout_closed_loop(b["prob"], sat_do["params"], x0,
                                  b["ispec"]).total_cost
              for x0 in b["vstates"]]
    ratio_of_means = float(np.mean(closed) / np.mean(b["vcosts"]))
    assert ratio_of_means <= 1.15, f"ratio of means {ratio_of_means:.4f}"


@pytest.mark.slow
def test_satellite_supervised_tolerates_small_noise(sat_bundle):
    noise = NoiseSpec(sigma=0.01,
                      hold_dt=sat_bundle["cfg"].evaluation["noise_hold_dt"],
                      seed=sat_bundle["cfg"].seed)
    noisy = eval_on(sat_bundle, sat_bundle["sl_params"], noise)
    clean = sat_bundle["sl_stats"]
    assert noisy.n_diverged == 0
    assert noisy.ratios.size == 20
    assert noisy.mean <= 2.0 * clean.mean, \
        f"noisy {noisy.mean:.4f} vs clean {clean.mean:.4f}"


@pytest.mark.slow
def test_satellite_do_landscape_rougher_than_sl_at_init(sat_bundle):
    b = sat_bundle
    ds, cfg = b["dataset"], b["cfg"]

    def sl_loss(p):
        return sl_loss_arrays(p, ds.ts, ds.xs, ds.us)

    x0s = b["prob"].init_box.sample(child_rng(cfg.seed, "landscape-batch"),
                                    cfg.do["batch_size"])

    def do_loss(p):
        return do_loss_and_grad_bp(b["prob"], p, x0s, b["ispec"])

    sl_rep = landscape_probe(sl_loss, b["init"], cfg.sl["lr"],
                             np.logspace(-2.0, 2.0, 9))
    do_rep = landscape_probe(do_loss, b["init"], cfg.do["lr"],
                             np.logspace(-2.0, -1.0, 5))
    sl_rel = envelope_width(sl_rep) / sl_rep.base_loss
    do_rel = envelope_width(do_rep) / do_rep.base_loss
    assert do_rel > sl_rel, f"do {do_rel:.3e} vs sl {sl_rel:.3e}"


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="Adam steps overshoot on this dataset, so the per-epoch "
           "training loss is not monotone even at lr 1e-3")
def test_satellite_supervised_epoch_loss_never_increases(sat_bundle):
    cfg = replace(cfgmod.sl_config(sat_bundle["cfg"]), lr=1e-3)
    _, log = train.train_sl(sat_bundle["prob"], sat_bundle["dataset"],
                            sat_bundle["init"], cfg)
    losses = np.asarray(log.epoch_losses)
    rises = np.diff(losses)
    bad = rises > 1e-12
    assert not np.any(bad), (
        f"{int(bad.sum())} of {rises.size} epoch transitions increased "
        f"the training loss, worst by {float(rises.max()):.3e}")


# ---------------------------------------------------------------------------
# quadrotor, desk scale


@pytest.mark.slow
def test_quadrotor_records_satisfy_minimum_principle(quad_bundle):
    audit_minimum_principle(quad_bundle["prob"], quad_bundle["solutions"])


@pytest.mark.slow
def test_quadrotor_finetune_improves_on_supervised(quad_bundle):
    sl = quad_bundle["sl_stats"]
    ft = quad_bundle["ft_stats"]
    do = quad_bundle["do_stats"]
    total = sum(quad_bundle["times"].values())
    assert ft.mean < sl.mean, f"ft {ft.mean:.4f} vs sl {sl.mean:.4f}"
    assert sl.mean <= do.mean, f"sl {sl.mean:.4f} vs do {do.mean:.4f}"
    assert total <= 5400.0, f"pipeline took {total:.0f} s"


@pytest.mark.slow
def test_quadrotor_scratch_do_degrades_with_horizon(quad_bundle,
                                                    quad_t4_do):
    short = quad_t4_do["stats"].mean
    long = quad_bundle["do_stats"].mean
    assert short < long, f"T=4 mean {short:.4f} vs T=8 mean {long:.4f}"
