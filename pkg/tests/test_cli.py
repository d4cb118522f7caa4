"""End-to-end checks of the command-line driver on the scalar problem.

The full-chain fixture runs every subcommand once into a shared directory;
the tests then inspect the artifacts. Reruns must be byte-identical, and
error paths must exit nonzero with an actionable message.
"""

import json
import os
import shutil

import numpy as np
import pytest

from closedloop import cli, net, report
from closedloop.data import DATASET_SCHEMA


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_config(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-data, all three train stages, eval, landscape, bvp-solve."""
    root = tmp_path_factory.mktemp("chain")
    out = root / "run"
    cfg = write_config(root / "cfg.json",
                       {"problem": "scalar_lqr", "seed": 3,
                        "out_dir": str(out)})
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--stage", "sl") == 0
    assert run("train", "--config", cfg, "--stage", "do") == 0
    assert run("train", "--config", cfg, "--stage", "finetune") == 0
    assert run("eval", "--config", cfg, "--checkpoint",
               out / "checkpoint_finetune.json", "--noise", "0,0.01") == 0
    assert run("landscape", "--config", cfg, "--loss", "sl",
               "--checkpoint", out / "checkpoint_sl.json") == 0
    assert run("landscape", "--config", cfg, "--loss", "do",
               "--checkpoint", out / "checkpoint_sl.json") == 0
    assert run("bvp-solve", "--config", cfg) == 0
    return cfg, out


class TestArtifacts:
    def test_dataset_files(self, chain):
        _, out = chain
        first = (out / "dataset.csv").read_text().splitlines()[0]
        assert first.startswith(f"# {DATASET_SCHEMA}")
        assert "problem=scalar_lqr" in first
        meta = json.loads((out / "dataset.csv.meta.json").read_text())
        assert meta["meta"]["n_converged"] >= 1
        assert meta["meta"]["seed"] == 3

    def test_checkpoints(self, chain):
        _, out = chain
        for stage in ("sl", "do", "finetune"):
            path = out / f"checkpoint_{stage}.json"
            params, adam, meta = net.load_checkpoint(path, 1, 1)
            assert meta["stage"] == stage
            assert meta["problem"] == "scalar_lqr"
            assert meta["seed"] == 3
            assert np.all(np.isfinite(net.flatten(params)))

    def test_train_logs(self, chain):
        _, out = chain
        for stage in ("sl", "do", "finetune"):
            lines = (out / f"train_log_{stage}.csv").read_text().splitlines()
            assert lines[0] == "step,loss,lr,stage"
            assert len(lines) > 1
            assert (out / f"train_loss_{stage}.png").stat().st_size > 0

    def test_manifests(self, chain):
        _, out = chain
        names = ["manifest_gen_data.json", "manifest_train_sl.json",
                 "manifest_train_do.json", "manifest_train_finetune.json",
                 "manifest_eval.json", "manifest_landscape_sl.json",
                 "manifest_landscape_do.json", "manifest_bvp_solve.json"]
        for name in names:
            doc = json.loads((out / name).read_text())
            assert doc["schema"] == report.MANIFEST_SCHEMA
            assert doc["config"]["problem"] == "scalar_lqr"
            assert doc["wall_clock_sec"]
            for path in doc["artifacts"].values():
                assert os.path.exists(path), f"{name} lists missing {path}"

    def test_sl_manifest_reports_validation_loss(self, chain):
        _, out = chain
        doc = json.loads((out / "manifest_train_sl.json").read_text())
        assert doc["final_validation_loss"] > 0
        assert doc["final_train_loss"] > 0

    def test_eval_stats(self, chain):
        _, out = chain
        for tag in ("0", "0.01"):
            doc = json.loads((out / f"stats_sigma_{tag}.json").read_text())
            assert doc["schema"] == report.STATS_SCHEMA
            assert doc["sigma"] == float(tag)
            assert doc["n_ratios"] == len(doc["ratios"])
            assert doc["n_diverged"] == 0
            assert doc["mean"] >= 1.0 - 1e-9
            cdf = (out / f"cdf_sigma_{tag}.csv").read_text().splitlines()
            assert cdf[0] == "ratio,cdf"
            assert len(cdf) == doc["n_ratios"] + 1
        assert (out / "cdf.png").stat().st_size > 0

    def test_validation_file(self, chain):
        _, out = chain
        doc = json.loads((out / "validation.json").read_text())
        assert doc["schema"] == report.VALIDATION_SCHEMA
        vset = report.read_validation(out / "validation.json")
        assert vset.states.shape[0] == 20

    def test_landscape_outputs(self, chain):
        _, out = chain
        for loss in ("sl", "do"):
            rows = (out / f"landscape_{loss}.csv").read_text().splitlines()
            assert rows[0] == "scale,step_size,loss,grad_change,distance,ratio"
            doc = json.loads(
                (out / f"landscape_{loss}_summary.json").read_text())
            assert doc["schema"] == report.LANDSCAPE_SCHEMA
            assert np.isfinite(doc["effective_beta"])
            assert (out / f"landscape_{loss}.png").stat().st_size > 0

    def test_trajectory_rows(self, chain):
        _, out = chain
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert lines[0] == "t,x0,costate0,u0"
        assert len(lines) == 52  # header + the solver's 51 output nodes
        doc = json.loads((out / "manifest_bvp_solve.json").read_text())
        assert doc["converged"] is True
        assert doc["residual"] <= 1e-8
        assert len(doc["x0"]) == 1


class TestReruns:
    def snapshot(self, out, names):
        return {n: (out / n).read_bytes() for n in names}

    def test_gen_data_rerun_byte_identical(self, chain):
        cfg, out = chain
        names = ["dataset.csv", "dataset.csv.meta.json"]
        before = self.snapshot(out, names)
        assert run("gen-data", "--config", cfg) == 0
        assert self.snapshot(out, names) == before

    def test_train_rerun_byte_identical(self, chain):
        cfg, out = chain
        names = ["checkpoint_sl.json", "train_log_sl.csv",
                 "checkpoint_do.json", "train_log_do.csv"]
        before = self.snapshot(out, names)
        assert run("train", "--config", cfg, "--stage", "sl") == 0
        assert run("train", "--config", cfg, "--stage", "do") == 0
        assert self.snapshot(out, names) == before

    def test_eval_rerun_byte_identical(self, chain):
        cfg, out = chain
        names = ["stats_sigma_0.json", "stats_sigma_0.01.json",
                 "cdf_sigma_0.csv", "cdf_sigma_0.01.csv", "validation.json"]
        before = self.snapshot(out, names)
        assert run("eval", "--config", cfg, "--checkpoint",
                   out / "checkpoint_finetune.json",
                   "--noise", "0,0.01") == 0
        assert self.snapshot(out, names) == before

    def test_seed_override_changes_dataset(self, chain, tmp_path):
        cfg, out = chain
        assert run("gen-data", "--config", cfg, "--seed", "4",
                   "--out", tmp_path / "other") == 0
        a = (out / "dataset.csv").read_bytes()
        b = (tmp_path / "other" / "dataset.csv").read_bytes()
        assert a != b
        doc = json.loads(
            (tmp_path / "other" / "manifest_gen_data.json").read_text())
        assert doc["config"]["seed"] == 4
        assert doc["config"]["out_dir"] == str(tmp_path / "other")


class TestErrors:
    def test_train_without_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "empty")})
        assert run("train", "--config", cfg, "--stage", "sl") == 1
        err = capsys.readouterr().err
        assert "MissingArtifact" in err
        assert "gen-data" in err

    def test_finetune_without_pretrain_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "empty")})
        assert run("train", "--config", cfg, "--stage", "finetune") == 1
        assert "--run-pretrain" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr", "datasett": {}})
        assert run("gen-data", "--config", cfg) == 2
        err = capsys.readouterr().err
        assert err.startswith("config error:")
        assert "datasett" in err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("gen-data", "--config", tmp_path / "absent.json") == 2
        assert "cannot read" in capsys.readouterr().err

    def test_eval_checkpoint_wrong_dims(self, tmp_path, capsys):
        out = tmp_path / "run"
        out.mkdir()
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr", "out_dir": str(out)})
        bad = out / "quad_ckpt.json"
        net.save_checkpoint(bad, net.init_params(12, 4, 0), None,
                            {"problem": "quadrotor", "horizon": 16.0,
                             "seed": 0, "stage": "sl"})
        assert run("eval", "--config", cfg, "--checkpoint", bad) == 1
        assert "SchemaMismatch" in capsys.readouterr().err

    def test_landscape_needs_probe_point(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "run")})
        assert run("landscape", "--config", cfg, "--loss", "sl") == 1
        assert "--fresh-init" in capsys.readouterr().err

    def test_bvp_solve_x0_dims(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "run")})
        assert run("bvp-solve", "--config", cfg, "--x0", "1,2") == 2
        assert "needs 1" in capsys.readouterr().err

    def test_bad_noise_values(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "run")})
        assert run("eval", "--config", cfg, "--checkpoint", "x.json",
                   "--noise", "0,abc") == 2
        assert run("eval", "--config", cfg, "--checkpoint", "x.json",
                   "--noise", "-0.1") == 2
        assert "must be >= 0" in capsys.readouterr().err

    def test_missing_stage_flag_is_usage_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"problem": "scalar_lqr"})
        with pytest.raises(SystemExit):
            run("train", "--config", cfg)


class TestBehavior:
    def test_finetune_run_pretrain(self, chain, tmp_path):
        cfg_chain, out_chain = chain
        out = tmp_path / "run"
        out.mkdir()
        shutil.copy(out_chain / "dataset.csv", out / "dataset.csv")
        shutil.copy(out_chain / "dataset.csv.meta.json",
                    out / "dataset.csv.meta.json")
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr", "seed": 3,
                            "out_dir": str(out)})
        assert run("train", "--config", cfg, "--stage", "finetune",
                   "--run-pretrain") == 0
        # both stages land, byte-equal to the separately run chain
        for name in ("checkpoint_sl.json", "checkpoint_finetune.json",
                     "train_log_sl.csv", "train_log_finetune.csv"):
            assert (out / name).read_bytes() == \
                (out_chain / name).read_bytes()

    def test_do_zero_iterations_returns_init(self, chain, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr", "seed": 3,
                            "out_dir": str(out),
                            "do": {"iterations": 0}})
        assert run("train", "--config", cfg, "--stage", "do") == 0
        params, _, _ = net.load_checkpoint(out / "checkpoint_do.json", 1, 1)
        init = net.init_params(1, 1, 3)
        assert np.array_equal(net.flatten(params), net.flatten(init))

    def test_quadratic_self_test(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           {"problem": "scalar_lqr",
                            "out_dir": str(tmp_path / "run")})
        assert run("landscape", "--config", cfg, "--loss", "do",
                   "--quadratic-self-test") == 0
        assert "effective_beta" in capsys.readouterr().out

    def test_profile_override_echoed(self, chain, tmp_path):
        cfg, _ = chain
        assert run("gen-data", "--config", cfg, "--profile", "paper",
                   "--out", tmp_path / "p") == 0
        doc = json.loads(
            (tmp_path / "p" / "manifest_gen_data.json").read_text())
        assert doc["config"]["profile"] == "paper"

    def test_landscape_fresh_init_with_scales(self, chain):
        cfg, out = chain
        assert run("landscape", "--config", cfg, "--loss", "do",
                   "--fresh-init", "--scales", "0.5,1.0") == 0
        rows = (out / "landscape_do.csv").read_text().splitlines()
        assert len(rows) == 3
        doc = json.loads(
            (out / "manifest_landscape_do.json").read_text())
        assert doc["probe_point"] == "fresh-init"
