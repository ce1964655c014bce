import csv
import json

import numpy as np
import pytest

from dirprune import harness
from dirprune.config import ConfigError, load_config, parse_config
from dirprune.harness import (NumericFailure, build, load_checkpoint, paired_run, projection_series,
                              run_experiment, run_leg, save_checkpoint, verify_pipeline)
from tests.conftest import SMALL


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_roundtrip(small_cfg, tmp_path):
    small_cfg.save(tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == small_cfg and back.hash() == small_cfg.hash()


@pytest.mark.parametrize("text,path", [
    (SMALL.replace("gamma = 0.02", "gamma = -1"), "schedule.gamma"),
    (SMALL.replace("mu = 0.55", "mu = 1.5"), "optimizer.mu"),
    (SMALL.replace("batch = 4", "batch = 4\nbogus = 1"), "seeds.bogus"),
    (SMALL + "\n[extra]\nx = 1\n", "extra"),
    (SMALL.replace("schema_version = 1", "schema_version = 9"), "meta.schema_version"),
    (SMALL.replace("gamma = 0.02", ""), "schedule.gamma"),
    (SMALL.replace("epochs = 5", "epochs = five"), "schedule.epochs"),
])
def test_config_errors_carry_field_path(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path


def test_overrides_validate(small_cfg):
    assert small_cfg.with_overrides({"optimizer.c": 0.0})["optimizer.c"] == 0.0
    with pytest.raises(ConfigError):
        small_cfg.with_overrides({"optimizer.nope": 1})
    with pytest.raises(ConfigError):
        small_cfg.with_overrides({"schedule.batch_size": 0})


def test_input_width_checked(small_cfg):
    with pytest.raises(ConfigError):
        build(small_cfg.with_overrides({"network.layer_widths": (5, 1)}))


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.array([1.0, -0.0, np.pi]), "g": np.array([1e-300])}
    save_checkpoint(tmp_path / "a.ckpt", {"step": 3}, arrays)
    header, back = load_checkpoint(tmp_path / "a.ckpt")
    assert header["step"] == 3
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    (tmp_path / "bad").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_smoke_run_outputs(small_cfg, tmp_path):
    res = run_experiment(small_cfg.with_overrides({"schedule.epochs": 1}), tmp_path)
    rows = _read(tmp_path / "metrics_grda.csv")
    assert len(rows) >= 1 and len(res.checkpoints) >= 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["notes"] == []


def test_metrics_row_count(small_cfg, tmp_path):
    setup = build(small_cfg)
    run_experiment(small_cfg, tmp_path)
    rows = _read(tmp_path / "metrics_grda.csv")
    assert setup.total_steps == 100
    assert len(rows) == setup.total_steps // 7 + 1
    assert all(0 <= float(r["sparsity"]) <= 1 for r in rows)
    assert list(rows[0]) == harness.METRIC_FIELDS
    # test metrics once per epoch only
    assert sum(r["test_loss"] != "" for r in rows) == len([s for s in range(0, 101, 7) if s % 20 == 0])


def test_resume_is_bitwise(small_cfg, tmp_path):
    cfg = small_cfg.with_overrides({"logging.checkpoint_every": 30})
    run_experiment(cfg, tmp_path / "full")
    run_experiment(cfg, tmp_path / "part", stop_at=45)
    ckpt = tmp_path / "part" / "checkpoints" / "grda_step00000030.ckpt"
    run_experiment(cfg, tmp_path / "part", resume=ckpt)
    a = (tmp_path / "full" / "metrics_grda.csv").read_bytes()
    b = (tmp_path / "part" / "metrics_grda.csv").read_bytes()
    assert a == b
    fa = (tmp_path / "full" / "checkpoints" / "grda_step00000100.ckpt").read_bytes()
    fb = (tmp_path / "part" / "checkpoints" / "grda_step00000100.ckpt").read_bytes()
    assert fa == fb


def test_resume_rejects_other_config(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path / "a", stop_at=10)
    ckpt = tmp_path / "a" / "checkpoints" / "grda_step00000010.ckpt"
    with pytest.raises(ConfigError):
        run_experiment(small_cfg.with_overrides({"optimizer.c": 0.3}), tmp_path / "b", resume=ckpt)


def test_paired_c0_identical(small_cfg):
    pair = paired_run(small_cfg.with_overrides({"optimizer.c": 0.0}))
    assert pair.streams_match
    assert np.array_equal(pair.sgd.w, pair.grda.w)
    assert [r["train_loss"] for r in pair.sgd.rows] == [r["train_loss"] for r in pair.grda.rows]


def test_paired_replay(small_cfg, tmp_path):
    paired_run(small_cfg, tmp_path / "a")
    paired_run(small_cfg, tmp_path / "b")
    for name in ("metrics_sgd.csv", "metrics_grda.csv", "stream_log.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = json.loads((tmp_path / "a" / "stream_log.json").read_text())
    assert log["match"] and log["sgd"] == log["grda"]


def test_stream_hash_depends_on_seed(small_cfg):
    a = run_leg(small_cfg, kind="sgd")
    b = run_leg(small_cfg.with_overrides({"seeds.batch": 5}), kind="sgd")
    assert a.stream_hash != b.stream_hash


def test_paired_sparsity_pattern(builtin):
    pair = paired_run(builtin("regression_sparsity"))
    assert pair.grda.rows[-1]["sparsity"] > 0
    assert pair.sgd.rows[-1]["sparsity"] == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_keeps_checkpoint(small_cfg, tmp_path):
    cfg = small_cfg.with_overrides({"schedule.gamma": 1000.0, "logging.checkpoint_every": 1})
    with pytest.raises(NumericFailure) as info:
        run_experiment(cfg, tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_mu_note_in_manifest(small_cfg, tmp_path):
    with pytest.warns(UserWarning):
        run_experiment(small_cfg.with_overrides({"optimizer.mu": 0.4, "schedule.epochs": 1}), tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["notes"]


def test_garipov_schedule_in_harness(builtin):
    setup = build(builtin("blobs_mlp"))
    first = harness.gamma_for_step(setup, 1)
    last = harness.gamma_for_step(setup, setup.total_steps)
    assert first == 0.05 and last == pytest.approx(0.0005)


def test_verify_full_rank_prediction_is_sgd(small_cfg, tmp_path):
    cfg = small_cfg.with_overrides({"data.rank": 8, "optimizer.mu": 0.6})
    cells = verify_pipeline(cfg, tmp_path, gammas=(1e-2, 1e-3, 1e-4), t=2.0)
    res = [c.report.residual_inf for c in cells]
    for c in cells:
        assert c.zero_space.dim == 0
        np.testing.assert_array_equal(c.report.prediction, c.pair.sgd.w)
    assert res[0] > res[1] > res[2]
    reports = sorted(tmp_path.glob("report_gamma_*.json"))
    assert len(reports) == 3
    body = json.loads(reports[0].read_text())
    assert {"gamma", "t", "lambda", "residual_inf", "residual_l2", "support_match_fraction",
            "per_coordinate_path"} <= set(body)


def test_projection_series_bounded(small_cfg, tmp_path):
    rows = projection_series(small_cfg, tmp_path, every=10, top=3)
    assert rows and all(0 <= r["fraction"] <= 1 for r in rows)
    assert (tmp_path / "projection.csv").exists()


def test_connect_pipeline(small_cfg, tmp_path):
    _, curve, path, chord, grid = harness.connect_pipeline(small_cfg, tmp_path, epochs=2)
    assert path.train_loss[0] == chord.train_loss[0]
    assert path.train_loss[-1] == chord.train_loss[-1]
    assert (tmp_path / "path.csv").exists()
    if grid is not None:
        assert (tmp_path / "plane.csv").exists() and (tmp_path / "plane.json").exists()


def test_spectrum_at_methods_agree(small_cfg):
    setup = build(small_cfg)
    lm_l, pos_l = harness.spectrum_at(setup, setup.w0, top=8, keep_positive=3)
    lm_d, pos_d = harness.spectrum_at(setup, setup.w0, top=8, keep_positive=3, method="dense")
    np.testing.assert_allclose(pos_l.eigenvalues, pos_d.eigenvalues, rtol=1e-6)
