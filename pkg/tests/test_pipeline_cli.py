import json

import numpy as np
import pytest

from dsdfm import cli, container, derode, pipeline, verify

TINY_NET = {"epochs": 3, "batch_size": 64, "hidden_dims": [16, 16], "time_embed_dim": 4, "dtype": "float64"}


def _toy_cfg(**extra):
    d = {"dataset": {"kind": "toy", "name": "two-moons", "n_points": 300},
         "drift": {**TINY_NET, "label_embed_dim": 0}, "baseline": {**TINY_NET, "label_embed_dim": 0},
         "conditional": False, "seed": 5}
    d.update(extra)
    return d


def _motion_cfg():
    return {"dataset": {"kind": "motion", "n_classes": 2, "n_joints": 3, "n_frames": 16, "n_per_class": 10},
            "vq": {"latent_dim": 4, "codebook_size": 8, "window": 4, "hidden_dims": [16], "dtype": "float64"},
            "vq_epochs": 2, "drift": {**TINY_NET, "label_embed_dim": 2},
            "baseline": {**TINY_NET, "label_embed_dim": 2}, "seed": 1}


def _write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def _cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- configuration

def test_config_round_trip_and_hash():
    cfg = pipeline.ExperimentConfig.from_dict(_toy_cfg())
    again = pipeline.ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.hash == cfg.hash
    assert cfg.replace(seed=6).hash != cfg.hash


def test_default_config_carries_reference_hyperparameters():
    cfg = pipeline.ExperimentConfig()
    assert (cfg.drift.batch_size, cfg.drift.lr, cfg.drift.lr_decay, cfg.drift.decay_every) == (128, 1e-2, 0.98, 10)
    assert cfg.vq_epochs == 500 and cfg.drift.lambda_cl == 0.3
    assert (cfg.sampler.steps, cfg.sampler.dt, cfg.sampler.eta) == (100, 0.01, 0.1)
    assert (cfg.metrics.S_d, cfg.metrics.S_l) == (200, 20)


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"drift": {"lr_typo": 1}}, {"dataset": {"kind": "audio"}},
                                 {"seed": -1}, {"sampler": {"steps": 100, "dt": 0.5}}, {"metrics": [1]}])
def test_config_rejects_bad_input(bad):
    with pytest.raises(pipeline.ConfigError):
        pipeline.ExperimentConfig.from_dict({**_toy_cfg(), **bad})


def test_unreadable_config_is_usage_error(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    code, _, err = _cli(capsys, "train-drift", "--config", p, "--out", tmp_path / "o")
    assert code == cli.EXIT_USAGE and "cannot read config" in err


# ---------------------------------------------------------------- CLI surface

def test_usage_errors(capsys, tmp_path):
    assert _cli(capsys)[0] == cli.EXIT_USAGE
    assert _cli(capsys, "dance")[0] == cli.EXIT_USAGE
    assert _cli(capsys, "verify", "nothing")[0] == cli.EXIT_USAGE
    assert _cli(capsys, "sample", "--seed", "-3")[0] == cli.EXIT_USAGE
    assert _cli(capsys, "sample", "--seed", str(2 ** 64))[0] == cli.EXIT_USAGE
    assert _cli(capsys, "sample", "--count", "-1", "--out", tmp_path)[0] == cli.EXIT_USAGE
    code, _, err = _cli(capsys, "sample", "--out", tmp_path / "empty")
    assert code == cli.EXIT_USAGE and "train-drift" in err


def test_every_verb_has_help(capsys):
    for verb in ("train-vq", "train-drift", "sample", "verify", "eval", "sweep"):
        with pytest.raises(SystemExit) as exc:
            cli.main([verb, "--help"])
        assert exc.value.code == 0
    capsys.readouterr()


def test_verify_success_and_failure(capsys, tmp_path, monkeypatch):
    code, out, _ = _cli(capsys, "verify", "gradients", "--out", tmp_path)
    assert code == cli.EXIT_OK and json.loads(out)["passed"] is True
    assert json.loads((tmp_path / "verify-gradients.json").read_text())["rows"][0]["passed"] is True
    monkeypatch.setattr(verify, "check_gradients", lambda seed=0: [verify.Check("forced", 1.0, 0.0, False)])
    code, out, _ = _cli(capsys, "verify", "gradients")
    assert code == cli.EXIT_VERIFY and json.loads(out)["passed"] is False


def test_verify_run_rejects_unknown():
    with pytest.raises(ValueError):
        verify.run("nope")


def test_numeric_failure_exit_code(capsys, tmp_path, monkeypatch):
    cfg = _write(tmp_path, _toy_cfg())

    def boom(*a, **k):
        raise derode.DriftDiverged("epoch 0: loss is not finite")

    monkeypatch.setattr(derode, "train_derode", boom)
    code, _, err = _cli(capsys, "train-drift", "--config", cfg, "--out", tmp_path / "run")
    assert code == cli.EXIT_NUMERIC and "numerical failure" in err


def test_unwritable_output_directory(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = _cli(capsys, "train-drift", "--config", _write(tmp_path, _toy_cfg()), "--out", blocker / "sub")
    assert code == cli.EXIT_USAGE and "not writable" in err


# ---------------------------------------------------------------- toy pipeline end to end

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg_path = _write(root, _toy_cfg())
    out = root / "run"
    for mode in ("derode", "vpsde", "vesde"):
        assert cli.main(["train-drift", "--config", str(cfg_path), "--out", str(out), "--mode", mode]) == 0
    return cfg_path, out


def test_toy_artifacts_and_manifest(toy_run):
    _, out = toy_run
    for name in ("data.dsdf", "real.dsdf", "drift.dsdf", "vpsde.dsdf", "vesde.dsdf", "derode-log.csv"):
        assert (out / name).exists()
    man = json.loads((out / "manifest-train-derode.json").read_text())
    assert man["status"] == "ok" and man["finished"] is not None
    assert man["artifacts"]["checkpoint"]["sha256"] == container.file_hash(out / "drift.dsdf")
    assert set(man["held_out"]) == {"J_drift", "J_CL"}


def test_training_checkpoint_is_reproducible(toy_run, tmp_path, capsys):
    cfg_path, out = toy_run
    code, _, _ = _cli(capsys, "train-drift", "--config", cfg_path, "--out", tmp_path)
    assert code == 0
    assert container.file_hash(tmp_path / "drift.dsdf") == container.file_hash(out / "drift.dsdf")
    code, _, _ = _cli(capsys, "train-drift", "--config", cfg_path, "--out", tmp_path / "b", "--seed", 6)
    assert container.file_hash(tmp_path / "b" / "drift.dsdf") != container.file_hash(out / "drift.dsdf")


@pytest.mark.parametrize("mode", pipeline.MODES)
def test_sample_every_mode(toy_run, capsys, mode):
    cfg_path, out = toy_run
    code, stdout, _ = _cli(capsys, "sample", "--config", cfg_path, "--out", out, "--mode", mode,
                           "--steps", 4, "--count", 25)
    assert code == 0
    info = json.loads(stdout)
    t, meta = container.load(info["samples"])
    assert t["points"].shape == (25, 2) and np.all(np.isfinite(t["points"]))
    assert meta["mode"] == mode and meta["steps"] == (1 if mode == "derode-1" else 4)
    timing = json.loads((out / f"samples-{mode}-{meta['steps']}.json").read_text())
    assert timing["count"] == 25 and timing["seconds_per_sample"] >= 0


def test_sample_count_zero_and_default_count(toy_run, capsys):
    cfg_path, out = toy_run
    code, stdout, _ = _cli(capsys, "sample", "--config", cfg_path, "--out", out, "--count", 0)
    assert code == 0 and json.loads(stdout)["count"] == 0
    cfg = pipeline.ExperimentConfig.load(cfg_path)
    res = pipeline.generate(cfg, out, "derode-1")
    assert res["count"] == pipeline.read_real_count(out) == 60


def test_one_step_equals_single_step_ode(toy_run):
    cfg_path, out = toy_run
    cfg = pipeline.ExperimentConfig.load(cfg_path)
    a = pipeline.generate(cfg, out, "derode-1", count=40)["latents"]
    b = pipeline.generate(cfg, out, "derode-N", steps=1, count=40)["latents"]
    assert a.tobytes() == b.tobytes()
    c = pipeline.generate(cfg, out, "divsde", eta=0.0, count=40)["latents"]
    assert np.abs(c - a).max() < 1e-2


def test_eval_command(toy_run, capsys, tmp_path):
    cfg_path, out = toy_run
    _cli(capsys, "sample", "--config", cfg_path, "--out", out, "--mode", "derode-1")
    gen = out / "samples-derode-1-1.dsdf"
    code, stdout, _ = _cli(capsys, "eval", out / "real.dsdf", gen, "--config", cfg_path, "--out", tmp_path)
    assert code == 0
    rep = json.loads(stdout)
    assert rep["n_real"] == rep["n_gen"] == 60 and rep["accuracy"] is None
    assert (tmp_path / "report-samples-derode-1-1.csv").exists()
    code, _, err = _cli(capsys, "eval", out / "real.dsdf", gen, "--multimodality")
    assert code == cli.EXIT_USAGE and "labels" in err
    code, _, _ = _cli(capsys, "eval", out / "real.dsdf", tmp_path / "missing.dsdf")
    assert code == cli.EXIT_USAGE


@pytest.mark.parametrize("grid", ["steps", "eta", "lambda"])
def test_sweep_grids(toy_run, capsys, grid, tmp_path):
    cfg_path, out = toy_run
    if grid == "lambda":
        for name in ("data.dsdf", "real.dsdf"):
            (tmp_path / name).write_bytes((out / name).read_bytes())
        out = tmp_path
    code, stdout, _ = _cli(capsys, "sweep", "--config", cfg_path, "--out", out, "--grid", grid, "--count", 30)
    assert code == 0
    lines = stdout.strip().splitlines()
    expected = {"steps": 1 + 4 * 3, "eta": 3, "lambda": 2}[grid]
    assert len(lines) == 1 + expected
    assert (out / f"sweep-{grid}.csv").read_text().splitlines()[0] == lines[0].strip()


def test_stale_network_is_detected(toy_run, tmp_path):
    cfg = pipeline.ExperimentConfig.from_dict(_motion_cfg())
    for name in ("drift.dsdf",):
        (tmp_path / name).write_bytes((toy_run[1] / name).read_bytes())
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_network(cfg, tmp_path, "drift")


# ---------------------------------------------------------------- motion pipeline

def test_motion_pipeline_smoke(tmp_path, capsys):
    cfg_path = _write(tmp_path, _motion_cfg())
    out = tmp_path / "run"
    code, stdout, _ = _cli(capsys, "train-vq", "--config", cfg_path, "--out", out)
    assert code == 0 and {"checkpoint", "test_mse", "test_usage"} <= set(json.loads(stdout))
    assert _cli(capsys, "train-drift", "--config", cfg_path, "--out", out)[0] == 0
    code, stdout, _ = _cli(capsys, "sample", "--config", cfg_path, "--out", out, "--label", 1, "--count", 6)
    assert code == 0
    t, _ = container.load(json.loads(stdout)["samples"])
    assert t["frames"].shape == (6, 16, 3, 3) and np.all(t["labels"] == 1)
    code, stdout, _ = _cli(capsys, "eval", out / "real.dsdf", json.loads(stdout)["samples"], "--config", cfg_path,
                           "--multimodality")
    rep = json.loads(stdout)
    assert code == 0 and rep["accuracy"] is not None and rep["multimodality"] is not None
    assert _cli(capsys, "sample", "--config", cfg_path, "--out", out, "--label", 7)[0] == cli.EXIT_USAGE
    toy = _write(tmp_path, _toy_cfg(), "toy.json")
    assert _cli(capsys, "train-vq", "--config", toy, "--out", out)[0] == cli.EXIT_USAGE
