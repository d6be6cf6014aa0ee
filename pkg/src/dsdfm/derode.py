"""Deterministic feature mapping between data latents (t=0) and N(0, I) (t=1).

Pairs ``(z0, z1)`` are coupled by minibatch optimal transport and joined by
the straight path ``z_t = (1 - t) z0 + t z1`` whose drift is the constant
``z1 - z0``. A network ``v(z, t[, label])`` is fitted to that drift, with an
extra penalty for disagreeing with itself at two times on the same pair.
Sampling is a single step ``z0 = z1 - v(z1, 1)`` or an Euler integration of
``dz = v dt`` from ``t = 1`` back to ``0``.
"""
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn, ot
from . import rng as rngmod

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- paths

@dataclass(frozen=True)
class GaussianPath:
    mu: object
    sigma: object
    dmu: object
    dsigma: object


def linear_path(z0, z1):
    """Degenerate Gaussian path with mean ``t z1 + (1 - t) z0`` and zero width."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    return GaussianPath(mu=lambda t: t * z1 + (1 - t) * z0,
                        sigma=lambda t: 0.0,
                        dmu=lambda t: z1 - z0,
                        dsigma=lambda t: 0.0)


def drift_from_path(path, z, t, atol=1e-9):
    """Drift ``sigma'(t) (z - mu(t)) / sigma(t) + mu'(t)`` of a Gaussian path.

    With ``sigma(t) == 0`` the first term is taken as 0 on the mean path; a
    point off the mean path has no defined drift and raises ``ValueError``.
    """
    z = np.asarray(z, dtype=np.float64)
    s = path.sigma(t)
    if s < 0:
        raise ValueError("sigma(t) must be non-negative")
    mu = path.mu(t)
    if s == 0:
        if np.max(np.abs(z - mu), initial=0.0) > atol:
            raise ValueError("zero-width path: drift undefined off the mean path")
        return np.array(path.dmu(t), dtype=np.float64)
    return path.dsigma(t) * (z - mu) / s + path.dmu(t)


@dataclass
class PathSample:
    z0: np.ndarray
    z1: np.ndarray
    t: object
    zt: np.ndarray
    target: np.ndarray


def interpolate(z0, z1, t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return (1 - t) * z0 + t * z1


def make_path_sample(z0, z1, t=None, rng=None):
    """Point on the straight path and its drift target ``z1 - z0``.

    ``t`` may be a scalar, one value per row, or drawn uniformly from ``rng``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if t is None:
        t = rng.random(z0.shape[0]) if z0.ndim == 2 else rng.random()
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    return PathSample(z0, z1, t, interpolate(z0, z1, t), z1 - z0)


# ---------------------------------------------------------------- networks

class DriftNet:
    """MLP drift field ``v(z, t[, label])``."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, dim, hidden_dims=(256, 256), activation="silu", time_embed_dim=16,
               num_classes=0, label_embed_dim=0, seed=0, dtype=np.float64, scheme="he"):
        spec = nn.MlpSpec(dim, hidden_dims, dim, activation, time_embed_dim,
                          label_embed_dim if num_classes else 0, num_classes if label_embed_dim else 0)
        return cls(spec, nn.init_params(spec, rngmod.stream(seed, "drift-init"), scheme, dtype))

    @property
    def conditional(self):
        return self.spec.label_embed_dim > 0

    def _labels(self, labels):
        return labels if self.conditional else None

    def __call__(self, z, t, labels=None):
        return nn.mlp_forward(self.spec, self.params, z, t, self._labels(labels)).astype(np.float64)

    def forward(self, z, t, labels=None):
        out, cache = nn.mlp_forward(self.spec, self.params, z, t, self._labels(labels), return_cache=True)
        return out.astype(np.float64), cache

    def backward(self, cache, grad_out):
        return nn.mlp_backward(self.spec, self.params, cache, grad_out)[0]

    def with_params(self, params):
        return DriftNet(self.spec, params)


class FieldNet:
    """Closed-form drift ``fn(z, t, labels)`` with no trainable parameters."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, z, t, labels=None):
        return np.asarray(self.fn(np.asarray(z, dtype=np.float64), t, labels), dtype=np.float64)

    def forward(self, z, t, labels=None):
        return self(z, t, labels), None

    def backward(self, cache, grad_out):
        return {}


# ---------------------------------------------------------------- losses

@dataclass
class LossReport:
    total: float
    drift: float
    consistency: float


def loss_drift(net, z0, z1, t, labels=None, with_grads=True):
    """Mean squared residual ``||v(z_t, t) - (z1 - z0)||^2`` over the batch."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n = z0.shape[0]
    v, cache = net.forward(interpolate(z0, z1, t), t, labels)
    r = v - (z1 - z0)
    loss = float(np.sum(r * r) / n)
    if not np.isfinite(loss):
        raise nn.NonFiniteError("drift loss is not finite")
    if not with_grads:
        return loss, None
    return loss, net.backward(cache, 2.0 * r / n)


def loss_consistency(net, z0, z1, t, t2, labels=None, with_grads=True):
    """Mean ``||v(z_t, t) - v(z_t', t')||^2`` for two times on the same pair."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n = z0.shape[0]
    va, ca = net.forward(interpolate(z0, z1, t), t, labels)
    vb, cb = net.forward(interpolate(z0, z1, t2), t2, labels)
    d = va - vb
    loss = float(np.sum(d * d) / n)
    if not np.isfinite(loss):
        raise nn.NonFiniteError("consistency loss is not finite")
    if not with_grads:
        return loss, None
    g = 2.0 * d / n
    return loss, nn.add_scaled(net.backward(ca, g), net.backward(cb, g), -1.0)


def loss_total(net, z0, z1, t, t2, lambda_cl=0.3, labels=None, with_grads=True):
    """``J_drift + lambda_cl * J_CL``; returns ``(LossReport, grads)``.

    Both terms share the evaluation at ``(z_t, t)``, so one call costs two
    forward passes rather than three.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n = z0.shape[0]
    va, ca = net.forward(interpolate(z0, z1, t), t, labels)
    vb, cb = net.forward(interpolate(z0, z1, t2), t2, labels)
    r = va - (z1 - z0)
    d = va - vb
    jd = float(np.sum(r * r) / n)
    jc = float(np.sum(d * d) / n)
    if not (np.isfinite(jd) and np.isfinite(jc)):
        raise nn.NonFiniteError("training loss is not finite")
    report = LossReport(jd + lambda_cl * jc, jd, jc)
    if not with_grads:
        return report, None
    ga = 2.0 * r / n
    if lambda_cl == 0:
        return report, net.backward(ca, ga)
    gd = 2.0 * lambda_cl * d / n
    return report, nn.add_scaled(net.backward(ca, ga + gd), net.backward(cb, gd), -1.0)


# ---------------------------------------------------------------- coupling

def couple(z0, z1, method="ot", labels=None):
    """Reorder the noise batch ``z1`` against the data batch ``z0``.

    ``method="ot"`` uses the exact minibatch plan (computed within each
    label group when ``labels`` is given); ``"independent"`` keeps the
    given order. Returns ``(z1_coupled, mean_cost)``.
    """
    if method == "independent":
        z1c = z1
    elif method == "ot":
        z1c = np.empty_like(z1)
        groups = [np.arange(z0.shape[0])] if labels is None else [
            np.flatnonzero(labels == c) for c in np.unique(labels)]
        for idx in groups:
            z1c[idx] = ot.ot_couple(z0[idx], z1[idx])[0]
    else:
        raise ValueError(f"unknown coupling {method!r}")
    return z1c, float(np.mean(np.sum((z0 - z1c) ** 2, axis=1)))


# ---------------------------------------------------------------- training

class DriftDiverged(nn.NonFiniteError):
    """Training hit a non-finite loss or gradient; carries the last good network."""

    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    lambda_cl: float = 0.3
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-2
    lr_decay: float = 0.98
    decay_every: int = 10
    coupling: str = "ot"
    hidden_dims: tuple = (256, 256)
    activation: str = "silu"
    time_embed_dim: int = 16
    label_embed_dim: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.lambda_cl < 0:
            raise ValueError("lambda_cl must be >= 0")
        if self.coupling not in ("ot", "independent"):
            raise ValueError("coupling must be 'ot' or 'independent'")

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def train_derode(data, config=TrainConfig(), seed=0, labels=None, num_classes=0, callback=None):
    """Fit the drift network on ``data`` (``(N, D)`` latents).

    Every minibatch of data is paired with a fresh Gaussian batch through
    :func:`couple`, then one Adam step is taken on ``J_drift + lambda_cl * J_CL``.
    Label conditioning is enabled when ``config.label_embed_dim > 0`` and
    ``labels`` are given.

    Returns
    -------
    net : DriftNet
    history : list of dict
        Per epoch: ``epoch, J_drift, J_CL, coupling_cost, wall_time``.

    Raises
    ------
    DriftDiverged
        If a loss or gradient turns non-finite.
    """
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    conditional = config.label_embed_dim > 0 and labels is not None
    if conditional:
        labels = np.asarray(labels, dtype=np.int64)
        num_classes = num_classes or int(labels.max()) + 1
    net = DriftNet.create(dim, config.hidden_dims, config.activation, config.time_embed_dim,
                          num_classes if conditional else 0, config.label_embed_dim if conditional else 0,
                          seed=seed, dtype=np.dtype(config.dtype))
    state = nn.adam_init(net.params, lr=config.lr)
    r_batch = rngmod.stream(seed, "drift", "batches")
    r_noise = rngmod.stream(seed, "drift", "noise")
    r_time = rngmod.stream(seed, "drift", "times")
    bs = min(config.batch_size, n)
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = nn.step_decay(config.lr, epoch, config.lr_decay, config.decay_every)
        order = r_batch.permutation(n)
        acc = np.zeros(3)
        n_batches = 0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            z0 = data[idx]
            lab = labels[idx] if conditional else None
            z1, cost = couple(z0, r_noise.standard_normal(z0.shape), config.coupling, lab)
            t = r_time.random(z0.shape[0])
            t2 = r_time.random(z0.shape[0])
            try:
                report, grads = loss_total(net, z0, z1, t, t2, config.lambda_cl, lab)
                params, state = nn.adam_step(state, net.params, grads, lr=lr)
            except nn.NonFiniteError as exc:
                raise DriftDiverged(f"epoch {epoch}: {exc}", net, history) from exc
            net = net.with_params(params)
            acc += [report.drift, report.consistency, cost]
            n_batches += 1
        jd, jc, cost = acc / n_batches
        row = {"epoch": epoch, "J_drift": jd, "J_CL": jc, "coupling_cost": cost,
               "wall_time": time.perf_counter() - start}
        history.append(row)
        if callback is not None:
            callback(epoch, row)
    return net, history


def evaluate_losses(net, data, seed=0, coupling="ot", labels=None, batch_size=128):
    """Held-out ``J_drift`` and ``J_CL`` with fresh noise, coupling and times."""
    data = np.asarray(data, dtype=np.float64)
    r = rngmod.stream(seed, "drift-eval")
    jd = jc = 0.0
    count = 0
    for s in range(0, data.shape[0], batch_size):
        z0 = data[s:s + batch_size]
        lab = None if labels is None else labels[s:s + batch_size]
        z1, _ = couple(z0, r.standard_normal(z0.shape), coupling, lab)
        t, t2 = r.random(z0.shape[0]), r.random(z0.shape[0])
        rep, _ = loss_total(net, z0, z1, t, t2, 1.0, lab, with_grads=False)
        jd += rep.drift * z0.shape[0]
        jc += rep.consistency * z0.shape[0]
        count += z0.shape[0]
    return {"J_drift": jd / count, "J_CL": jc / count}


# ---------------------------------------------------------------- sampling

def sample_one_step(net, z1, labels=None):
    """``z0 = z1 - v(z1, t=1)``: one network evaluation per sample."""
    z1 = np.asarray(z1, dtype=np.float64)
    out = z1 - net(z1, 1.0, labels)
    nn.check_finite(out, "one-step sample")
    return out


def sample_ode_multistep(net, z1, steps, labels=None):
    """Euler integration of ``dz = v(z, t) dt`` from ``t = 1`` down to ``0``.

    ``steps=1`` reproduces :func:`sample_one_step` bit for bit.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.asarray(z1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        z = z - dt * net(z, 1.0 - k * dt, labels)
    nn.check_finite(z, "multistep sample")
    return z


def straightness(net, z1, steps=50, labels=None):
    """Mean ``||v(z_t, t) - (z1 - z0)||^2`` along the Euler trajectory.

    ``z0`` is the trajectory's own end point, so a perfectly straight
    constant-speed flow scores 0.
    """
    z = np.asarray(z1, dtype=np.float64)
    dt = 1.0 / steps
    vs = []
    for k in range(steps):
        v = net(z, 1.0 - k * dt, labels)
        vs.append(v)
        z = z - dt * v
    chord = np.asarray(z1, dtype=np.float64) - z
    return float(np.mean([np.mean(np.sum((v - chord) ** 2, axis=1)) for v in vs]))


def save_net(path, net, meta=None):
    return nn.save_params(path, net.spec, net.params, meta)


def load_net(path):
    spec, params, meta = nn.load_params(path)
    return DriftNet(spec, params), meta
