import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from kklobs.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_container,
    save_checkpoint,
    save_container,
)
from kklobs.cli import main as cli_main
from kklobs.config import ConfigError, RunConfig, apply_overrides, default_config

from test_observer import make_bundles


class TestContainer:
    def test_round_trip_values(self, tmp_path, rng):
        path = tmp_path / "c.kklc"
        tensors = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=(7,)),
                   "s": np.asarray(2.5)}
        save_container(path, "checkpoint", {"system": "duffing"}, tensors)
        meta, back = load_container(path)
        assert meta["kind"] == "checkpoint"
        assert meta["system"] == "duffing"
        for k, v in tensors.items():
            assert back[k].shape == np.asarray(v).shape
            assert back[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()

    def test_save_load_save_byte_identical(self, tmp_path, rng):
        p1 = tmp_path / "a.kklc"
        p2 = tmp_path / "b.kklc"
        tensors = {"x": rng.normal(size=(5, 2)), "y": rng.normal(size=())}
        save_container(p1, "dataset", {"dataset": "forced"}, tensors)
        meta, back = load_container(p1)
        meta.pop("format_version")
        meta.pop("kind")
        meta.pop("tensors")
        meta.pop("payload_bytes")
        save_container(p2, "dataset", meta, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.kklc"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_container(path)

    def test_truncated_payload_offset_diagnostic(self, tmp_path, rng):
        path = tmp_path / "trunc.kklc"
        save_container(path, "checkpoint", {}, {"w": rng.normal(size=(100,))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(CheckpointError, match="offset|payload"):
            load_container(path)

    def test_corrupt_manifest(self, tmp_path):
        path = tmp_path / "bad2.kklc"
        header = b'{"broken json'
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
        with pytest.raises(CheckpointError, match="manifest"):
            load_container(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_container(tmp_path / "nope.kklc")


class TestModelCheckpoints:
    @pytest.mark.parametrize("variant", ["autonomous", "obs", "dyn"])
    def test_bundle_round_trip(self, tmp_path, variant):
        bundles = make_bundles()
        path = tmp_path / f"{variant}.kklc"
        cfg = {"seed": 3, "system": "duffing"}
        save_checkpoint(path, bundles[variant], cfg, {"final_loss": 0.5})
        back, meta = load_checkpoint(path)
        assert meta["config"] == cfg
        assert back.variant == variant
        assert back.system == "duffing"
        # identical estimates on a short run
        from kklobs.dynamics import InputSignal, get_system, integrate, sample_input
        from kklobs import rng as rngmod
        from kklobs.observer import run_observer

        sig = sample_input("sinusoid", rngmod.derive(0, "sig"))
        traj = integrate(get_system("duffing"), np.array([0.4, -0.2]), sig, 3.0, 0.05)
        a = run_observer(bundles[variant], traj)
        b = run_observer(back, traj)
        assert a.xhat.tobytes() == b.xhat.tobytes()

    def test_checkpoint_file_round_trips_byte_identically(self, tmp_path):
        bundles = make_bundles()
        p1 = tmp_path / "a.kklc"
        p2 = tmp_path / "b.kklc"
        save_checkpoint(p1, bundles["dyn"], {"seed": 1}, {})
        back, meta = load_checkpoint(p1)
        save_checkpoint(p2, back, meta["config"], meta["metrics"])
        assert p1.read_bytes() == p2.read_bytes()


class TestConfig:
    def test_defaults_validate(self):
        for system in ("duffing", "vdp", "rossler", "fhn", "linear"):
            cfg = default_config(system)
            cfg.validate()

    def test_round_trip(self):
        cfg = default_config("duffing", seed=9)
        back = RunConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_overrides(self):
        d = default_config("duffing").to_dict()
        d = apply_overrides(d, ["train.lr=0.01", "eval.n_trials=7", "seed=3"])
        cfg = RunConfig.from_dict(d)
        assert cfg.train.lr == 0.01
        assert cfg.eval.n_trials == 7
        assert cfg.seed == 3
        assert cfg.train.seed == 3  # run seed propagates into training

    def test_bad_override_path(self):
        with pytest.raises(ConfigError):
            apply_overrides(default_config().to_dict(), ["nope.nothing=1"])

    def test_bad_values_rejected(self):
        d = default_config().to_dict()
        d["eval"]["regimes"] = ["triangle"]
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)

    def test_matrix_override(self):
        d = default_config("linear").to_dict()
        cfg = RunConfig.from_dict(d)
        m = cfg.build_matrices()
        assert m.A[0, 0] == -2.0
        assert m.B[0, 0] == 1.0


def run_cli(*argv) -> int:
    return cli_main(list(argv))


@pytest.fixture(scope="module")
def linear_pipeline(tmp_path_factory):
    """One tiny linear pipeline shared across CLI tests."""
    out = tmp_path_factory.mktemp("lincli")
    sets = ["--set", "train.n_traj=20", "--set", "train.epochs_enc=30",
            "--set", "train.epochs_dec=20", "--set", "eval.n_trials=3"]
    assert run_cli("gen-data", "--system", "linear", "--out", str(out), *sets) == 0
    assert run_cli("train-phase1", "--system", "linear", "--out", str(out), *sets) == 0
    assert run_cli("evaluate", "--system", "linear", "--out", str(out), *sets) == 0
    assert run_cli("bound", "--system", "linear", "--out", str(out), *sets) == 0
    assert run_cli("report", "--system", "linear", "--out", str(out), *sets) == 0
    return out


class TestCli:
    def test_artifacts_exist(self, linear_pipeline):
        out = linear_pipeline
        for name in ("data_autonomous.kkld", "data_forced.kkld", "ckpt_autonomous.kklc",
                     "metrics_phase1.jsonl", "smape_linear.csv", "smape_linear.json",
                     "bounds_linear_autonomous.json", "report.csv", "report.json"):
            assert (out / name).exists(), name

    def test_report_renders_figures(self, linear_pipeline):
        figs = list((linear_pipeline / "figures").glob("*.png"))
        assert any("smape_box" in f.name for f in figs)
        assert any("smape_means" in f.name for f in figs)
        assert any("bound_" in f.name for f in figs)

    def test_config_embedded_in_artifacts(self, linear_pipeline):
        meta, _ = load_container(linear_pipeline / "ckpt_autonomous.kklc")
        assert meta["config"]["system"] == "linear"
        assert meta["config"]["train"]["epochs_enc"] == 30
        with open(linear_pipeline / "smape_linear.json") as fh:
            rep = json.load(fh)
        assert rep["config"]["system"] == "linear"

    def test_metrics_log_is_jsonl(self, linear_pipeline):
        lines = (linear_pipeline / "metrics_phase1.jsonl").read_text().strip().splitlines()
        recs = [json.loads(line) for line in lines]
        assert {"epoch", "loss", "lr", "grad_norm", "wall_ms"} <= set(recs[0])
        assert any(r["trainer"] == "phase1-enc" for r in recs)

    def test_missing_prerequisite_exit_code(self, tmp_path):
        assert run_cli("train-obs", "--system", "linear", "--out", str(tmp_path)) == 4
        assert run_cli("evaluate", "--system", "linear", "--out", str(tmp_path)) == 4
        assert run_cli("report", "--system", "linear", "--out", str(tmp_path)) == 4

    def test_config_error_exit_code(self, tmp_path):
        assert run_cli("gen-data", "--system", "nosuch", "--out", str(tmp_path)) == 2
        assert run_cli("gen-data", "--system", "linear", "--out", str(tmp_path),
                       "--set", "bogus=1") == 2

    def test_corrupt_checkpoint_diagnostic(self, linear_pipeline, tmp_path, capsys):
        out = tmp_path / "corrupt"
        out.mkdir()
        src = (linear_pipeline / "ckpt_autonomous.kklc").read_bytes()
        (out / "ckpt_autonomous.kklc").write_bytes(src[:-100])
        (out / "data_forced.kkld").write_bytes(
            (linear_pipeline / "data_forced.kkld").read_bytes())
        code = run_cli("train-obs", "--system", "linear", "--out", str(out))
        assert code == 4

    def test_seed_flag_overrides(self, tmp_path):
        code = run_cli("gen-data", "--system", "linear", "--out", str(tmp_path),
                       "--seed", "123", "--set", "train.n_traj=2",
                       "--set", "train.n_inp=3")
        assert code == 0
        meta, _ = load_container(tmp_path / "data_autonomous.kkld")
        assert meta["config"]["seed"] == 123

    def test_console_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "kklobs.cli", "gen-data", "--help"],
                           capture_output=True, text=True)
        assert r.returncode == 0
        assert "--config" in r.stdout
