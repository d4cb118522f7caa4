"""Closed-loop rollouts, noise injection, cost ratios, validation sets."""

import math
from dataclasses import replace

import numpy as np
import pytest

from closedloop import net
from closedloop.errors import (MissingReference, StorageError,
                               TooManyFailures)
from closedloop.evalsim import (CostRatioStats, NoiseSpec, ValidationSet,
                                build_validation_set, evaluate_cost_ratio,
                                export_cdf, per_state_noise,
                                rollout_closed_loop)
from closedloop.integrate import IntegratorSpec
from closedloop.ocp import InitBox, satellite_ocp, scalar_lqr_ocp
from closedloop.openloop import (ShootingSpec, pmp_replay_control,
                                 solve_shooting)
from closedloop.rngutil import child_rng


def zero_policy(t, X):
    return np.zeros((X.shape[0], 1))


class TestNoiseSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec(sigma=-0.1)
        with pytest.raises(ValueError):
            NoiseSpec(sigma=0.1, hold_dt=0.0)
        NoiseSpec(sigma=0.0)

    def test_per_state_noise_derivation(self):
        base = NoiseSpec(sigma=0.05, hold_dt=0.01, seed=9)
        a = per_state_noise(base, 0)
        b = per_state_noise(base, 1)
        assert a.seed != b.seed
        assert a.sigma == b.sigma == 0.05
        assert per_state_noise(base, 0).seed == a.seed
        assert per_state_noise(None, 3) is None


class TestRollout:
    def test_uncontrolled_scalar_cost(self):
        # xdot=u, L=u^2, M=x^2, x0=1, T=1: zero control leaves x at 1
        prob = scalar_lqr_ocp(q=0.0)
        run = rollout_closed_loop(prob, zero_policy, np.array([1.0]))
        assert not run.diverged
        assert run.total_cost == 1.0
        assert np.array_equal(run.states[-1], np.array([1.0]))

    def test_sigma_zero_bit_identical_to_noiseless(self):
        prob = scalar_lqr_ocp()
        params = net.init_params(1, 1, 3)
        x0 = np.array([1.2])
        plain = rollout_closed_loop(prob, params, x0)
        noisy = rollout_closed_loop(prob, params, x0,
                                    noise=NoiseSpec(0.0, 0.01, seed=77))
        assert np.array_equal(plain.states, noisy.states)
        assert np.array_equal(plain.controls, noisy.controls)
        assert plain.total_cost == noisy.total_cost

    def test_sigma_zero_bit_identical_satellite(self):
        prob = satellite_ocp()
        params = net.init_params(6, 3, 11)
        x0 = np.full(6, 0.3)
        plain = rollout_closed_loop(prob, params, x0)
        noisy = rollout_closed_loop(prob, params, x0,
                                    noise=NoiseSpec(0.0, 0.01, seed=4))
        assert np.array_equal(plain.states, noisy.states)
        assert plain.total_cost == noisy.total_cost

    def test_noise_bounded_and_controller_only(self):
        # b=0 freezes the state, so whatever the policy sees beyond x0
        # is exactly the held noise vector
        prob = scalar_lqr_ocp(a=0.0, b=0.0, q=0.0, horizon_T=0.2)
        seen = []

        def recorder(t, X):
            seen.append(X.copy())
            return np.zeros((X.shape[0], 1))

        sigma = 0.3
        run = rollout_closed_loop(prob, recorder, np.array([1.0]),
                                  noise=NoiseSpec(sigma, 0.01, seed=21))
        assert not run.diverged
        offsets = np.concatenate([s[:, 0] - 1.0 for s in seen])
        assert np.abs(offsets).max() <= sigma
        assert np.abs(offsets).max() > 0.0
        # true state never moved
        assert np.array_equal(run.states,
                              np.ones_like(run.states))

    def test_constant_controller_ignores_noise(self):
        prob = scalar_lqr_ocp()

        def const(t, X):
            return np.full((X.shape[0], 1), 0.25)

        x0 = np.array([0.7])
        quiet = rollout_closed_loop(prob, const, x0,
                                    noise=NoiseSpec(0.0, 0.01, seed=5))
        loud = rollout_closed_loop(prob, const, x0,
                                   noise=NoiseSpec(5.0, 0.01, seed=5))
        assert np.array_equal(quiet.states, loud.states)
        assert quiet.total_cost == loud.total_cost

    def test_divergence_flagged_not_raised(self):
        prob = scalar_lqr_ocp(horizon_T=1.0)

        def explode(t, X):
            return np.full((X.shape[0], 1), 1e160)

        run = rollout_closed_loop(prob, explode, np.array([1.0]))
        assert run.diverged
        assert run.total_cost == math.inf

    def test_partial_horizon(self):
        prob = scalar_lqr_ocp(q=0.0)
        run = rollout_closed_loop(prob, zero_policy, np.array([1.0]),
                                  horizon=0.5)
        assert abs(run.grid.nodes[-1] - 0.5) < 1e-12
        assert run.total_cost == 1.0


class TestCostRatioStats:
    def test_summary_arithmetic(self):
        s = CostRatioStats.from_ratios([1.2, 1.0, 1.1], n_diverged=0)
        assert s.mean == pytest.approx(1.1)
        assert s.median == 1.1
        assert s.max == 1.2 and s.min == 1.0
        assert s.n_diverged == 0

    def test_even_count_median_is_lower_middle(self):
        s = CostRatioStats.from_ratios([2.0, 1.0], n_diverged=1)
        assert s.median == 1.0
        assert s.n_diverged == 1

    def test_empty_ratios(self):
        s = CostRatioStats.from_ratios([], n_diverged=3)
        assert math.isnan(s.mean) and s.n_diverged == 3


class TestEvaluateCostRatio:
    def test_replay_controller_ratio_near_one(self):
        prob = scalar_lqr_ocp()
        rng = child_rng(31, "replay-states")
        for _ in range(3):
            x0 = np.array([rng.uniform(-2, 2)])
            sol = solve_shooting(prob, x0)
            replay = pmp_replay_control(prob, sol)

            def policy(t, X):
                return replay(t)[None, :]

            stats = evaluate_cost_ratio(prob, policy, x0[None],
                                        [sol.total_cost])
            assert abs(stats.mean - 1.0) <= 1e-3
            assert stats.n_diverged == 0

    def test_length_mismatch(self):
        prob = scalar_lqr_ocp()
        with pytest.raises(MissingReference):
            evaluate_cost_ratio(prob, zero_policy, np.ones((2, 1)), [1.0])

    def test_nonpositive_reference(self):
        prob = scalar_lqr_ocp()
        with pytest.raises(MissingReference):
            evaluate_cost_ratio(prob, zero_policy, np.ones((1, 1)), [0.0])

    def test_diverged_counted(self):
        prob = scalar_lqr_ocp()

        def explode(t, X):
            return np.full((X.shape[0], 1), 1e160)

        stats = evaluate_cost_ratio(prob, explode, np.ones((2, 1)),
                                    [1.0, 1.0])
        assert stats.n_diverged == 2
        assert stats.ratios.size == 0

    def test_noise_streams_differ_per_state(self):
        prob = scalar_lqr_ocp()
        params = net.init_params(1, 1, 8)
        X = np.array([[1.0], [1.0]])
        sol = solve_shooting(prob, X[0])
        noise = NoiseSpec(sigma=0.5, hold_dt=0.05, seed=13)
        stats = evaluate_cost_ratio(prob, params, X,
                                    [sol.total_cost, sol.total_cost],
                                    noise=noise)
        assert stats.ratios.size == 2
        assert stats.ratios[0] != stats.ratios[1]


class TestExportCdf:
    def test_single_ratio(self, tmp_path):
        s = CostRatioStats.from_ratios([1.37], n_diverged=0)
        path = tmp_path / "cdf.csv"
        export_cdf(s, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "ratio,cdf"
        assert lines[1] == "1.37,1.0"

    def test_two_ratios(self, tmp_path):
        s = CostRatioStats.from_ratios([2.0, 1.0], n_diverged=0)
        path = tmp_path / "cdf.csv"
        export_cdf(s, path)
        rows = [line.split(",")
                for line in path.read_text().strip().splitlines()[1:]]
        assert [float(a) for a, _ in rows] == [1.0, 2.0]
        assert [float(b) for _, b in rows] == [0.5, 1.0]

    def test_columns_nondecreasing(self, tmp_path):
        rng = child_rng(2, "cdf")
        s = CostRatioStats.from_ratios(1 + rng.random(40), n_diverged=0)
        path = tmp_path / "cdf.csv"
        export_cdf(s, path)
        rows = np.loadtxt(path, delimiter=",", skiprows=1)
        assert np.all(np.diff(rows[:, 0]) >= 0)
        assert np.all(np.diff(rows[:, 1]) > 0)

    def test_empty_rejected(self, tmp_path):
        s = CostRatioStats.from_ratios([], n_diverged=1)
        with pytest.raises(ValueError):
            export_cdf(s, tmp_path / "cdf.csv")


class TestBuildValidationSet:
    def test_scalar_references(self):
        prob = scalar_lqr_ocp()
        vs = build_validation_set(prob, 5, seed=42)
        assert vs.states.shape == (5, 1)
        assert np.all(vs.costs > 0) and vs.usable.all()
        lo, hi = prob.init_box.lo, prob.init_box.hi
        assert np.all(vs.states >= lo) and np.all(vs.states <= hi)
        again = build_validation_set(prob, 5, seed=42)
        assert np.array_equal(vs.states, again.states)
        assert np.array_equal(vs.costs, again.costs)

    def test_equilibrium_reference_flagged(self):
        prob = scalar_lqr_ocp()
        prob = replace(prob, init_box=InitBox(np.zeros(1), np.zeros(1)))
        vs = build_validation_set(prob, 1, seed=1)
        assert vs.costs[0] == 0.0
        assert not vs.usable[0]

    def test_retry_budget_exhaustion(self):
        # zero Newton iterations cannot move the residual, so every
        # solve fails and the resampling budget runs out
        prob = scalar_lqr_ocp()
        hopeless = ShootingSpec(max_newton_iters=0, max_backtracks=0)
        with pytest.raises(TooManyFailures):
            build_validation_set(prob, 2, seed=3, spec=hopeless,
                                 max_attempts=4)


@pytest.mark.slow
class TestWorkerFarm:
    def test_eval_matches_serial(self):
        prob = satellite_ocp(horizon_T=1.0)
        params = net.init_params(prob.n, prob.m, 2)
        states = prob.init_box.sample(child_rng(0, "farm-test"), 2)
        refs = np.ones(2)
        spec = IntegratorSpec()
        noise = NoiseSpec(sigma=0.01, hold_dt=0.01, seed=4)
        for ns in (None, noise):
            serial = evaluate_cost_ratio(prob, params, states, refs, spec,
                                         ns, workers=1)
            farmed = evaluate_cost_ratio(prob, params, states, refs, spec,
                                         ns, workers=2)
            assert np.array_equal(serial.ratios, farmed.ratios)
            assert serial.n_diverged == farmed.n_diverged
