import json

import numpy as np
import pytest

from bcpmf.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from bcpmf.cli import EXIT_CONFIG, EXIT_IO, main, parse_bounds
from bcpmf.config import ExperimentConfig, load_config
from bcpmf.data import ConfigError
from bcpmf.model import HyperState, PrecisionMode, PrecisionState

from helpers import random_instance


@pytest.fixture
def rating_file(tmp_path):
    rng = np.random.default_rng(0)
    p = tmp_path / "r.tsv"
    with open(p, "w") as fh:
        for u in range(40):
            for i in rng.choice(30, 10, replace=False):
                fh.write(f"u{u}\ti{i}\t{rng.integers(1, 6)}\n")
    return p


@pytest.fixture
def config_file(tmp_path, rating_file):
    p = tmp_path / "exp.ini"
    p.write_text(f"""[experiment]
seed = 3
[data]
path = {rating_file}
format = tsv_triplets
[model]
d = 3
use_side = 1
[gibbs]
num_samples = 4
[vi]
max_updates = 3
[output]
record_timing = false
""")
    return p


def test_config_defaults_and_file(config_file, monkeypatch):
    monkeypatch.delenv("BCPMF_SEED", raising=False)
    d = ExperimentConfig()
    assert (d.model.d, d.split.train_fraction, d.split.validation_fraction) == (20, 0.7, 0.05)
    cfg = load_config(config_file, ["map.learning_rate=0.01", "prior.map_driven_w0=yes"])
    assert cfg.seed == 3 and cfg.model.d == 3 and cfg.model.use_side == 1
    assert cfg.map.learning_rate == 0.01 and cfg.prior.map_driven_w0 is True
    assert cfg.gibbs.num_samples == 4 and cfg.output.record_timing is False
    monkeypatch.setenv("BCPMF_SEED", "99")
    assert load_config(config_file).seed == 99
    assert load_config(config_file).digest() == load_config(config_file).digest()
    assert load_config(config_file, ["model.d=4"]).digest() != load_config(config_file).digest()


@pytest.mark.parametrize("override", [
    "model.d=0", "model.precision=heavy", "nosection.key=1", "model.nokey=1",
    "model.use_side=2", "map.learning_rate=-1", "prior.nu0=1", "gibbs.num_samples=0",
    "model.d=abc", "data.format=csv", "prior.mu_eta=x", "split.train_fraction=1.5",
    "vi.max_updates=0", "no_equals_sign"])
def test_config_rejects(override, monkeypatch):
    monkeypatch.delenv("BCPMF_SEED", raising=False)
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_truncated_bounds_validated():
    with pytest.raises(ConfigError):
        load_config(None, ["model.precision=truncated", "model.lo=2", "model.hi=1"])
    assert parse_bounds("0.5:2,0.25:4") == [(0.5, 2.0), (0.25, 4.0)]
    with pytest.raises(ConfigError):
        parse_bounds("2:1")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    _, feats, prec, hyper, _ = random_instance(rng, 4, 5, 2, 1, 1, "truncated")
    ck = Checkpoint(feats, prec, hyper, {"test_prediction": np.arange(3.0)}, "gibbs")
    save_checkpoint(tmp_path / "c.npz", ck)
    back = load_checkpoint(tmp_path / "c.npz")
    for name in ("U", "V", "W", "gamma", "eta"):
        assert np.array_equal(getattr(back.features, name), getattr(feats, name))
    assert back.precisions.mode == PrecisionMode.TRUNCATED
    assert (back.precisions.lo, back.precisions.hi) == (prec.lo, prec.hi)
    assert np.array_equal(back.hyper.Lambda_W, hyper.Lambda_W)
    assert back.backend == "gibbs" and np.array_equal(back.extras["test_prediction"], np.arange(3.0))
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")
    np.savez(tmp_path / "other.npz", x=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.npz")


def test_pipeline_end_to_end(tmp_path, config_file, monkeypatch, capsys):
    monkeypatch.delenv("BCPMF_SEED", raising=False)
    out = tmp_path / "run"
    base = ["--config", str(config_file), "--out", str(out)]
    assert main(["prepare"] + base) == 0
    for f in ("train.csv", "validation.csv", "test.csv", "users.csv", "items.csv"):
        assert (out / f).exists()
    assert main(["train", "--backend", "map"] + base) == 0
    assert main(["train", "--backend", "gibbs", "--init", str(out / "checkpoint_map.npz")]
                + base) == 0
    assert main(["train", "--backend", "vi", "--precision", "truncated", "--lo", "0.5",
                 "--hi", "2"] + base) == 0
    vi = load_checkpoint(out / "checkpoint_vi.npz")
    assert vi.precisions.mode == PrecisionMode.TRUNCATED
    assert np.all((vi.precisions.alpha >= 0.5) & (vi.precisions.alpha <= 2))
    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(out / "checkpoint_gibbs.npz"), "--baseline",
                 str(out / "checkpoint_map.npz"), "--splits", str(out), "--config",
                 str(config_file), "--out", str(ev)]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["backend"] == "gibbs" and summary["test_ratings"] > 0
    first = (ev / "binned_rmse.csv").read_bytes()
    assert main(["eval", "--checkpoint", str(out / "checkpoint_gibbs.npz"), "--baseline",
                 str(out / "checkpoint_map.npz"), "--splits", str(out), "--config",
                 str(config_file), "--out", str(ev)]) == 0
    assert (ev / "binned_rmse.csv").read_bytes() == first
    dg = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", str(out / "checkpoint_vi.npz"), "--splits",
                 str(out), "--config", str(config_file), "--out", str(dg),
                 "--bounds", "0.5:2"]) == 0
    assert (dg / "truncation_sweep.csv").exists()
    assert (dg / "feature_variance_vs_frequency.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"train.csv", "checkpoint_map.npz", "trace.csv", "curve.csv"} <= set(manifest["artifacts"])
    digests = {a["config_hash"] for a in manifest["artifacts"].values()}
    assert all(len(h) == 16 for h in digests)


def test_runs_are_byte_identical(tmp_path, config_file, monkeypatch):
    monkeypatch.delenv("BCPMF_SEED", raising=False)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        base = ["--config", str(config_file), "--out", str(out), "--threads", "1"]
        assert main(["prepare"] + base) == 0
        assert main(["train", "--backend", "gibbs"] + base) == 0
        outputs.append([(out / f).read_bytes() for f in ("train.csv", "test.csv", "trace.csv")])
    assert outputs[0] == outputs[1]


def test_exit_codes(tmp_path, config_file, monkeypatch, capsys):
    monkeypatch.delenv("BCPMF_SEED", raising=False)
    assert main(["train", "--backend", "map", "--set", "model.d=0"]) == EXIT_CONFIG
    assert main(["prepare", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["prepare", "--data", str(tmp_path / "missing.dat"),
                 "--out", str(tmp_path / "x")]) == EXIT_IO
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz"),
                 "--out", str(tmp_path)]) == EXIT_IO
    bad = tmp_path / "bad.dat"
    bad.write_text("1::2\n")
    assert main(["prepare", "--data", str(bad), "--out", str(tmp_path / "y")]) == EXIT_IO
    with pytest.raises(SystemExit) as exc:
        main(["train", "--backend", "sgd"])
    assert exc.value.code == 2
    out = tmp_path / "run"
    base = ["--config", str(config_file), "--out", str(out)]
    assert main(["prepare"] + base) == 0
    assert main(["train", "--backend", "map"] + base) == 0
    # an initial checkpoint whose shapes do not fit the model
    assert main(["train", "--backend", "vi", "--init", str(out / "checkpoint_map.npz"),
                 "--set", "model.d=5"] + base) == EXIT_CONFIG
