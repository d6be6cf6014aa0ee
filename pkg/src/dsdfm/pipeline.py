"""Experiment configuration, run manifests and the pipeline stages.

Every stage reads and writes files inside one output directory:

* ``data.dsdf``     normalised sequences, labels and split (motion datasets)
* ``real.dsdf``     held-out real samples used as the evaluation reference
* ``vq.dsdf``       autoencoder + codebook
* ``drift.dsdf``    drift network and latent standardisation
* ``vpsde.dsdf``, ``vesde.dsdf``  baseline score networks
* ``samples-<mode>-<steps>.dsdf`` generated samples (+ ``.json`` timing)
* ``manifest-<command>.json``     provenance for each command

Artifacts hold no timestamps, so rerunning a command with the same config
and seed reproduces their hashes; wall times go to logs and manifests only.
"""
import csv
import datetime
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, container, derode, divsde, metrics, nn, synth, vq
from . import rng as rngmod
from .derode import TrainConfig
from .divsde import SamplerConfig
from .vq import VqConfig

log = logging.getLogger(__name__)

MODES = ("derode-1", "derode-N", "divsde", "vpsde", "vesde")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "motion"            # "motion" or "toy"
    name: str = "eight-gaussians"   # toy name when kind == "toy"
    n_classes: int = 4
    n_joints: int = 8
    n_frames: int = 32
    n_per_class: int = 512
    noise_scale: float = 0.05
    n_points: int = 4096
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.kind not in ("motion", "toy"):
            raise ConfigError("dataset.kind must be 'motion' or 'toy'")
        if self.kind == "toy" and self.name not in synth.TOYS:
            raise ConfigError(f"unknown toy {self.name!r}; choose from {sorted(synth.TOYS)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class MetricConfig:
    k: int = 3
    S_d: int = 200
    S_l: int = 20


def _build(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on. Serialised as JSON; no field defaults to the clock."""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vq: VqConfig = field(default_factory=VqConfig)
    vq_epochs: int = 500
    drift: TrainConfig = field(default_factory=lambda: TrainConfig(label_embed_dim=16))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(label_embed_dim=16))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    conditional: bool = True
    seed: int = 0
    sample_count: int = 0           # 0: size of the held-out set

    def to_dict(self):
        d = asdict(self)
        for key in ("vq", "drift", "baseline"):
            d[key]["hidden_dims"] = list(d[key]["hidden_dims"])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        kw["dataset"] = _build(DatasetConfig, d.get("dataset"), "dataset")
        kw["vq"] = _build(vq.VqConfig, d.get("vq"), "vq")
        kw["drift"] = _build(derode.TrainConfig, d.get("drift", {"label_embed_dim": 16}), "drift")
        kw["baseline"] = _build(derode.TrainConfig, d.get("baseline", {"label_embed_dim": 16}), "baseline")
        kw["sampler"] = _build(divsde.SamplerConfig, d.get("sampler"), "sampler")
        kw["metrics"] = _build(MetricConfig, d.get("metrics"), "metrics")
        seed = kw.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- manifests

class RunManifest:
    """Provenance record written when a command starts and finalised when it ends."""

    def __init__(self, out_dir, command, config, argv=None):
        self.path = Path(out_dir) / f"manifest-{command}.json"
        self.data = {"command": command, "argv": list(argv or []), "config_hash": config.hash,
                     "config": config.to_dict(), "inputs": {}, "artifacts": {},
                     "started": _now(), "finished": None, "status": "running"}
        self._write()

    def add_input(self, path):
        self.data["inputs"][str(path)] = container.file_hash(path)
        self._write()

    def add_artifact(self, name, path):
        self.data["artifacts"][name] = {"path": str(path), "sha256": container.file_hash(path)}

    def finish(self, status="ok", **extra):
        self.data.update(extra)
        self.data["finished"] = _now()
        self.data["status"] = status
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def prepare_out(out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows({k: _plain(v) for k, v in r.items()} for r in rows)


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


# ---------------------------------------------------------------- data

@dataclass
class Data:
    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    stats: synth.NormStats = None


def make_data(cfg):
    """Generate the dataset described by ``cfg.dataset`` and split it."""
    d = cfg.dataset
    if d.kind == "motion":
        fams = synth.default_families(d.n_classes, d.n_joints, d.noise_scale, seed=cfg.seed)
        ds = synth.generate_dataset(fams, d.n_per_class, T=d.n_frames, seed=cfg.seed,
                                    train_fraction=d.train_fraction)
        x, stats = synth.normalize(ds.frames, ds.train_idx)
        return Data(x[ds.train_idx], ds.labels[ds.train_idx], x[ds.test_idx], ds.labels[ds.test_idx], stats)
    pts, labels = synth.toy_dataset(d.name, d.n_points, seed=cfg.seed)
    n_train = int(round(d.train_fraction * d.n_points))
    return Data(pts[:n_train], labels[:n_train], pts[n_train:], labels[n_train:])


def write_data(out, data):
    tensors = {"train": data.train, "train_labels": data.train_labels,
               "test": data.test, "test_labels": data.test_labels}
    if data.stats is not None:
        tensors.update(norm_mean=data.stats.mean, norm_std=data.stats.std)
    container.save(out / "data.dsdf", tensors)
    key = "frames" if data.test.ndim == 4 else "points"
    container.save(out / "real.dsdf", {key: data.test, "labels": data.test_labels}, {"source": "held-out split"})
    return out / "data.dsdf", out / "real.dsdf"


def read_data(out):
    path = Path(out) / "data.dsdf"
    if not path.exists():
        raise ConfigError(f"{path} not found; run train-vq (or train-drift for a toy dataset) first")
    t, _ = container.load(path)
    stats = synth.NormStats(t["norm_mean"], t["norm_std"]) if "norm_mean" in t else None
    return Data(t["train"], t["train_labels"], t["test"], t["test_labels"], stats)


def feature_matrix(tensors):
    """Metric features for a sample/real file: flattened frames or raw points."""
    if "frames" in tensors:
        return metrics.sequence_features(tensors["frames"])
    if "points" in tensors:
        return np.asarray(tensors["points"], dtype=np.float64)
    raise ConfigError("file holds neither 'frames' nor 'points'")


# ---------------------------------------------------------------- latents

@dataclass
class LatentMap:
    """Standardised, flattened quantised VQ latents (identity for toy points)."""
    mean: np.ndarray
    std: np.ndarray
    model: object = None

    def encode(self, x):
        if self.model is None:
            return np.asarray(x, dtype=np.float64)
        z = vq.quantize(vq.encode(self.model, x), self.model.codebook).zq
        return (z.reshape(z.shape[0], -1).astype(np.float64) - self.mean) / self.std

    def decode(self, z):
        if self.model is None:
            return np.asarray(z, dtype=np.float64)
        if z.shape[0] == 0:
            return np.zeros((0, self.model.n_frames, self.model.n_joints, 3))
        return vq.decode(self.model, z * self.std + self.mean).astype(np.float64)

    @classmethod
    def fit(cls, model, frames):
        if model is None:
            return cls(np.zeros(0), np.zeros(0), None)
        z = vq.quantize(vq.encode(model, frames), model.codebook).zq
        z = z.reshape(z.shape[0], -1).astype(np.float64)
        return cls(z.mean(axis=0), np.maximum(z.std(axis=0), 1e-6), model)


def _vq_for(cfg, out):
    if cfg.dataset.kind == "toy":
        return None, None
    path = Path(out) / "vq.dsdf"
    if not path.exists():
        raise ConfigError(f"{path} not found; run train-vq first")
    model, _ = vq.load_model(path)
    return model, path


# ---------------------------------------------------------------- stages

def train_vq_stage(cfg, out, argv=None, callback=None):
    out = prepare_out(out)
    if cfg.dataset.kind != "motion":
        raise ConfigError("toy datasets have no VQ stage; run train-drift directly")
    man = RunManifest(out, "train-vq", cfg, argv)
    data = make_data(cfg)
    data_path, real_path = write_data(out, data)
    model, history = vq.train_vq(data.train, cfg.vq, epochs=cfg.vq_epochs, seed=cfg.seed, callback=callback)
    mse = vq.reconstruction_mse(model, data.test)
    usage = float((vq.code_usage(model, data.test) > 0).mean())
    ckpt = vq.save_model(out / "vq.dsdf", model, {"seed": cfg.seed})
    write_csv(out / "vq-log.csv", history)
    for name, p in (("data", data_path), ("real", real_path), ("vq", ckpt), ("log", out / "vq-log.csv")):
        man.add_artifact(name, p)
    man.finish(test_mse=mse, test_usage=usage)
    return {"checkpoint": ckpt, "test_mse": mse, "test_usage": usage, "history": history}


def train_drift_stage(cfg, out, mode="derode", argv=None, callback=None):
    """Fit the drift network (``mode="derode"``) or a baseline score network."""
    out = prepare_out(out)
    if mode not in ("derode", "vpsde", "vesde"):
        raise ConfigError(f"train-drift mode must be derode, vpsde or vesde, not {mode!r}")
    man = RunManifest(out, f"train-{mode}", cfg, argv)
    if cfg.dataset.kind == "toy":
        data = make_data(cfg)
        for p in write_data(out, data):
            man.add_artifact(p.stem, p)
    else:
        data = read_data(out)
        man.add_input(out / "data.dsdf")
    model, vq_path = _vq_for(cfg, out)
    if vq_path is not None:
        man.add_input(vq_path)
    lmap = LatentMap.fit(model, data.train)
    z = lmap.encode(data.train)
    labels = data.train_labels if cfg.conditional else None
    n_classes = int(data.train_labels.max()) + 1
    meta = {"mode": mode, "latent_dim": int(z.shape[1]), "n_classes": n_classes,
            "vq_sha256": container.file_hash(vq_path) if vq_path else None, "seed": cfg.seed}
    if mode == "derode":
        net, history = derode.train_derode(z, cfg.drift, seed=cfg.seed, labels=labels,
                                           num_classes=n_classes, callback=callback)
        held = derode.evaluate_losses(net, lmap.encode(data.test), seed=cfg.seed, coupling=cfg.drift.coupling,
                                      labels=data.test_labels if net.conditional else None)
        meta["train_config"] = cfg.drift.to_dict()
    else:
        sde = baselines.SDES[mode]()
        net, history = baselines.train_score_model(z, sde, cfg.baseline, seed=cfg.seed, labels=labels,
                                                   num_classes=n_classes)
        held = {}
        meta["train_config"] = cfg.baseline.to_dict()
    tensors = {f"net/{k}": v for k, v in net.params.items()}
    if model is not None:
        tensors.update(latent_mean=lmap.mean, latent_std=lmap.std)
    meta["spec"] = net.spec.to_dict()
    ckpt = container.save(out / f"{'drift' if mode == 'derode' else mode}.dsdf", tensors, meta)
    log_path = out / f"{mode}-log.csv"
    write_csv(log_path, history)
    man.add_artifact("checkpoint", ckpt)
    man.add_artifact("log", log_path)
    man.finish(held_out=held)
    return {"checkpoint": ckpt, "history": history, "held_out": held, "net": net, "latent_map": lmap}


def load_network(cfg, out, name):
    """``(net, latent_map, meta)`` from ``drift.dsdf`` / ``vpsde.dsdf`` / ``vesde.dsdf``."""
    path = Path(out) / f"{name}.dsdf"
    if not path.exists():
        hint = "train-drift" if name == "drift" else f"train-drift --mode {name}"
        raise ConfigError(f"{path} not found; run {hint} first")
    t, meta = container.load(path)
    model, vq_path = _vq_for(cfg, out)
    if meta.get("vq_sha256") != (container.file_hash(vq_path) if vq_path else None):
        raise ConfigError(f"{path.name} was trained on a different VQ checkpoint; retrain it")
    params = {k[4:]: v for k, v in t.items() if k.startswith("net/")}
    net = derode.DriftNet(nn.MlpSpec.from_dict(meta["spec"]), params)
    lmap = LatentMap(t["latent_mean"], t["latent_std"], model) if model is not None else LatentMap(
        np.zeros(0), np.zeros(0), None)
    return net, lmap, meta


def sample_labels(count, n_classes, label=None):
    if label is not None:
        if not 0 <= label < n_classes:
            raise ConfigError(f"label must lie in [0, {n_classes})")
        return np.full(count, label, dtype=np.int64)
    return np.arange(count, dtype=np.int64) % n_classes


def generate(cfg, out, mode, steps=None, eta=None, count=None, label=None, nets=None):
    """Draw samples in latent space and decode them.

    Returns a dict with ``latents``, ``decoded``, ``labels`` and the sampler
    wall time (``seconds``, latent sampling only) plus ``decode_seconds``.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    nets = nets or {}
    key = {"vpsde": "vpsde", "vesde": "vesde"}.get(mode, "drift")
    net, lmap, meta = nets[key] if key in nets else load_network(cfg, out, key)
    steps = 1 if mode == "derode-1" else (cfg.sampler.steps if steps is None else steps)
    eta = cfg.sampler.eta if eta is None else eta
    if count is None:
        count = cfg.sample_count or read_real_count(out)
    dim = meta["latent_dim"]
    labels = sample_labels(count, meta["n_classes"], label) if net.conditional else None
    z1 = rngmod.stream(cfg.seed, "sample", "z1").standard_normal((count, dim))
    start = time.perf_counter()
    if count == 0:
        lat = np.zeros((0, dim))
    elif mode == "derode-1":
        lat = derode.sample_one_step(net, z1, labels)
    elif mode == "derode-N":
        lat = derode.sample_ode_multistep(net, z1, steps, labels)
    elif mode == "divsde":
        lat = divsde.sample_divsde(net, z1, divsde.SamplerConfig(steps, eta, cfg.seed), labels)
    else:
        lat = baselines.sample_reverse(net, baselines.SDES[mode](), count, dim, steps, cfg.seed, labels)
    seconds = time.perf_counter() - start
    start = time.perf_counter()
    decoded = lmap.decode(lat)
    return {"latents": lat, "decoded": decoded, "labels": labels, "seconds": seconds,
            "decode_seconds": time.perf_counter() - start, "mode": mode, "steps": steps, "eta": eta,
            "count": count}


def read_real_count(out):
    t, _ = container.load(Path(out) / "real.dsdf")
    return int(t["labels"].shape[0])


def sample_stage(cfg, out, mode, steps=None, eta=None, count=None, label=None, argv=None):
    out = prepare_out(out)
    man = RunManifest(out, "sample", cfg, argv)
    res = generate(cfg, out, mode, steps, eta, count, label)
    key = "frames" if res["decoded"].ndim == 4 else "points"
    tensors = {key: res["decoded"], "latents": res["latents"]}
    if res["labels"] is not None:
        tensors["labels"] = res["labels"]
    stem = f"samples-{mode}-{res['steps']}"
    path = container.save(out / f"{stem}.dsdf", tensors,
                          {"mode": mode, "steps": res["steps"], "eta": res["eta"], "seed": cfg.seed})
    timing = {k: res[k] for k in ("mode", "steps", "eta", "count", "seconds", "decode_seconds")}
    timing["seconds_per_sample"] = res["seconds"] / max(res["count"], 1)
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(timing, fh, indent=2)
    man.add_artifact("samples", path)
    man.finish(timing=timing)
    return {"path": path, **res}


def eval_stage(real_path, gen_path, out=None, cfg=None, classifier=None, multimodality=False, argv=None):
    """Metric report for a generated-sample file against a real-sample file."""
    cfg = cfg or ExperimentConfig()
    try:
        real_t, _ = container.load(real_path)
        gen_t, _ = container.load(gen_path)
    except (OSError, container.ContainerError) as exc:
        raise ConfigError(f"cannot read inputs: {exc}") from exc
    gen_labels = gen_t.get("labels")
    sequences = gen_t.get("frames")
    if classifier is None and sequences is not None and "frames" in real_t:
        classifier = _classifier_for(real_path)
    report = metrics.evaluate(feature_matrix(real_t), feature_matrix(gen_t), gen_labels, sequences, classifier,
                              cfg.metrics.k, cfg.metrics.S_d, cfg.metrics.S_l, cfg.seed,
                              multimodality_requested=multimodality)
    report.config.update({"real": str(real_path), "gen": str(gen_path)})
    if out is not None:
        out = prepare_out(out)
        man = RunManifest(out, "eval", cfg, argv)
        man.add_input(real_path)
        man.add_input(gen_path)
        stem = Path(gen_path).stem
        report.to_json(out / f"report-{stem}.json")
        report.to_csv(out / f"report-{stem}.csv")
        man.add_artifact("report", out / f"report-{stem}.json")
        man.finish()
    return report


def _classifier_for(real_path):
    # the classifier is fitted on the training split that sits next to the real file
    data_path = Path(real_path).with_name("data.dsdf")
    if not data_path.exists():
        return None
    t, _ = container.load(data_path)
    return metrics.SpectralClassifier().fit(t["train"], t["train_labels"])


def quality(real_feats, gen_feats):
    """Internal quality metric used by sweeps: Gaussian Frechet distance on features."""
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return metrics.fid(real_feats, gen_feats)


def sweep_stage(cfg, out, grid="steps", steps_grid=(100, 500, 1000), etas=(0.0, 0.1, 0.5),
                lambdas=(0.0, 0.3), count=None, argv=None):
    """Run one of the ablation grids and write ``sweep-<grid>.csv``.

    ``steps``: every sampler mode at every step count, with wall time and
    quality. ``eta``: the diversity sampler across ``etas``. ``lambda``:
    retrain the drift with each consistency weight and report held-out
    ``J_CL`` and quality.
    """
    out = prepare_out(out)
    man = RunManifest(out, f"sweep-{grid}", cfg, argv)
    real_t, _ = container.load(out / "real.dsdf")
    real = feature_matrix(real_t)
    rows = []
    if grid == "steps":
        nets = {k: load_network(cfg, out, k) for k in ("drift", "vpsde", "vesde")}
        for mode in MODES:
            for steps in ((1,) if mode == "derode-1" else steps_grid):
                res = generate(cfg, out, mode, steps=steps, count=count, nets=nets)
                rows.append({"mode": mode, "steps": steps, "count": res["count"], "seconds": res["seconds"],
                             "seconds_per_sample": res["seconds"] / max(res["count"], 1),
                             "decode_seconds": res["decode_seconds"],
                             "quality": quality(real, _features(res["decoded"]))})
    elif grid == "eta":
        nets = {"drift": load_network(cfg, out, "drift")}
        for eta in etas:
            res = generate(cfg, out, "divsde", eta=eta, count=count, nets=nets)
            feats = _features(res["decoded"])
            rows.append({"eta": eta, "quality": quality(real, feats),
                         "diversity": metrics.diversity(feats, cfg.metrics.S_d, np.random.default_rng(cfg.seed)),
                         "latent_std": float(res["latents"].std(axis=0).mean())})
    elif grid == "lambda":
        for lam in lambdas:
            sub = cfg.replace(drift={**cfg.drift.to_dict(), "lambda_cl": lam})
            sub_out = out / f"lambda-{lam:g}"
            prepare_out(sub_out)
            for name in ("data.dsdf", "real.dsdf", "vq.dsdf"):
                if (out / name).exists():
                    (sub_out / name).write_bytes((out / name).read_bytes())
            trained = train_drift_stage(sub, sub_out)
            res = generate(sub, sub_out, "derode-1", count=count)
            rows.append({"lambda_cl": lam, "heldout_J_CL": trained["held_out"]["J_CL"],
                         "heldout_J_drift": trained["held_out"]["J_drift"],
                         "quality": quality(real, _features(res["decoded"]))})
    else:
        raise ConfigError("grid must be steps, eta or lambda")
    path = out / f"sweep-{grid}.csv"
    write_csv(path, rows)
    man.add_artifact("table", path)
    man.finish()
    return rows


def _features(decoded):
    return metrics.sequence_features(decoded) if decoded.ndim == 4 else decoded
