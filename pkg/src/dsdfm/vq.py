"""Vector-quantised autoencoder for motion sequences.

A sequence ``(T, V, 3)`` is cut into non-overlapping windows of ``window``
frames. The encoder MLP reads ``[window, h]`` and emits ``[z, h']`` where
``h`` is a small tanh recurrent state carried across windows; the decoder
mirrors it. Each window's latent is snapped to its nearest codebook vector
(ties go to the lowest index) and the decoder gradient is copied straight
through to the encoder output.
"""
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import container, nn
from . import rng as rngmod

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VqConfig:
    latent_dim: int = 16
    codebook_size: int = 64
    beta: float = 0.25
    window: int = 8
    hidden_dims: tuple = (256, 256)
    activation: str = "silu"
    state_dim: int = 8
    squared_recon: bool = False
    lr: float = 1e-2
    lr_decay: float = 0.98
    decay_every: int = 10
    batch_size: int = 128
    dead_code_epochs: int = 50
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.codebook_size < 1 or self.latent_dim < 1 or self.window < 1:
            raise ValueError("codebook_size, latent_dim and window must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class VqModel:
    config: VqConfig
    n_frames: int
    n_joints: int
    enc_spec: nn.MlpSpec
    dec_spec: nn.MlpSpec
    params: dict          # "enc/<name>", "dec/<name>", "codebook"
    usage: np.ndarray = None

    @property
    def codebook(self):
        return self.params["codebook"]

    @property
    def n_windows(self):
        return self.n_frames // self.config.window

    @property
    def window_features(self):
        return self.config.window * self.n_joints * 3

    @property
    def flat_latent_dim(self):
        return self.n_windows * self.config.latent_dim

    def sub(self, prefix):
        return {k.split("/", 1)[1]: v for k, v in self.params.items() if k.startswith(prefix + "/")}


@dataclass
class VqLoss:
    total: float
    recon: float
    codebook: float
    commit: float


@dataclass
class Quantized:
    zq: np.ndarray
    indices: np.ndarray
    sq_dist: np.ndarray   # ||z - zq||^2 per point


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


def build_model(config, n_frames, n_joints, seed=0, scheme="he"):
    if n_frames % config.window:
        raise ValueError(f"sequence length {n_frames} is not a multiple of window {config.window}")
    feats = config.window * n_joints * 3
    R = config.state_dim
    enc = nn.MlpSpec(feats + R, config.hidden_dims, config.latent_dim + R, config.activation)
    dec = nn.MlpSpec(config.latent_dim + R, config.hidden_dims, feats + R, config.activation)
    dtype = np.dtype(config.dtype)
    params = {}
    for prefix, spec in (("enc", enc), ("dec", dec)):
        p = nn.init_params(spec, rngmod.stream(seed, "vq", prefix), scheme=scheme, dtype=dtype)
        params.update({f"{prefix}/{k}": v for k, v in p.items()})
    params["codebook"] = (0.1 * rngmod.stream(seed, "vq", "codebook").standard_normal(
        (config.codebook_size, config.latent_dim))).astype(dtype)
    return VqModel(config, n_frames, n_joints, enc, dec, params,
                   np.zeros(config.codebook_size, dtype=np.int64))


def _windows(model, frames):
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1:] != (model.n_frames, model.n_joints, 3):
        raise ValueError(f"expected frames of shape (N, {model.n_frames}, {model.n_joints}, 3), "
                         f"got {frames.shape}")
    n = frames.shape[0]
    return frames.reshape(n, model.n_windows, model.window_features).astype(model.codebook.dtype)


def _encode(model, x, record):
    n, W, _ = x.shape
    R, D = model.config.state_dim, model.config.latent_dim
    enc = model.sub("enc")
    h = np.zeros((n, R), dtype=x.dtype)
    z = np.empty((n, W, D), dtype=x.dtype)
    caches = []
    for w in range(W):
        out, cache = nn.mlp_forward(model.enc_spec, enc, np.concatenate([x[:, w], h], 1), return_cache=True)
        z[:, w] = out[:, :D]
        h = np.tanh(out[:, D:])
        if record:
            caches.append((cache, h))
    return z, caches


def encode(model, frames):
    """Latents of shape ``(N, n_windows, latent_dim)``; deterministic."""
    return _encode(model, _windows(model, frames), False)[0]


def _encoder_backward(model, caches, grad_z):
    enc = model.sub("enc")
    F = model.window_features
    grads = nn.zeros_like(enc)
    dh = np.zeros((grad_z.shape[0], model.config.state_dim), dtype=grad_z.dtype)
    for w in reversed(range(len(caches))):
        cache, h = caches[w]
        g_out = np.concatenate([grad_z[:, w], dh * (1 - h * h)], 1)
        g, g_in = nn.mlp_backward(model.enc_spec, enc, cache, g_out)
        grads = nn.add_scaled(grads, g)
        dh = g_in[:, F:]
    return grads


def _decode(model, zq, record):
    n, W, _ = zq.shape
    R, Fw = model.config.state_dim, model.window_features
    dec = model.sub("dec")
    s = np.zeros((n, R), dtype=model.codebook.dtype)
    out_frames = np.empty((n, W, Fw), dtype=model.codebook.dtype)
    caches = []
    for w in range(W):
        out, cache = nn.mlp_forward(model.dec_spec, dec, np.concatenate([zq[:, w], s], 1), return_cache=True)
        out_frames[:, w] = out[:, :Fw]
        s = np.tanh(out[:, Fw:])
        if record:
            caches.append((cache, s))
    return out_frames, caches


def decode(model, zq):
    """Frames ``(N, T, V, 3)`` from latents ``(N, n_windows, latent_dim)`` (or flattened)."""
    zq = np.asarray(zq)
    if zq.ndim == 2:
        zq = zq.reshape(zq.shape[0], model.n_windows, model.config.latent_dim)
    if zq.shape[1:] != (model.n_windows, model.config.latent_dim):
        raise ValueError(f"latents must have shape (N, {model.n_windows}, {model.config.latent_dim})")
    nn.check_finite(zq, "decoder input")
    out, _ = _decode(model, zq.astype(model.codebook.dtype), False)
    return out.reshape(zq.shape[0], model.n_frames, model.n_joints, 3)


def _decoder_backward(model, caches, grad_x):
    dec = model.sub("dec")
    D = model.config.latent_dim
    grads = nn.zeros_like(dec)
    n, W, _ = grad_x.shape
    grad_zq = np.empty((n, W, D), dtype=grad_x.dtype)
    ds = np.zeros((n, model.config.state_dim), dtype=grad_x.dtype)
    for w in reversed(range(W)):
        cache, s = caches[w]
        g_out = np.concatenate([grad_x[:, w], ds * (1 - s * s)], 1)
        g, g_in = nn.mlp_backward(model.dec_spec, dec, cache, g_out)
        grads = nn.add_scaled(grads, g)
        grad_zq[:, w] = g_in[:, :D]
        ds = g_in[:, D:]
    return grads, grad_zq


def quantize(z, codebook):
    """Nearest-code substitution under Euclidean distance.

    Works on any array whose last axis is the latent dimension. Distances are
    computed as explicit differences so exact ties resolve to the lowest
    code index.
    """
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (K, D) array")
    z = np.asarray(z)
    if z.shape[-1] != codebook.shape[1]:
        raise ValueError(f"latent dim {z.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    idx = np.empty(flat.shape[0], dtype=np.int64)
    best = np.empty(flat.shape[0], dtype=np.float64)
    for s in range(0, flat.shape[0], 4096):
        diff = flat[s:s + 4096, None, :] - codebook[None, :, :]
        d = np.einsum("nkd,nkd->nk", diff, diff)
        idx[s:s + 4096] = d.argmin(axis=1)
        best[s:s + 4096] = d[np.arange(d.shape[0]), idx[s:s + 4096]]
    zq = codebook[idx].reshape(z.shape)
    return Quantized(zq, idx.reshape(z.shape[:-1]), best.reshape(z.shape[:-1]))


def _as_batch(x, coords):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x.reshape(1, 1, 1) if coords else x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(1, 1, -1) if coords else x.reshape(1, -1)
    return x.reshape(x.shape[0], -1, x.shape[-1]) if coords else x.reshape(x.shape[0], -1)


def vq_loss(E, E_hat, z, zq, beta, squared_recon=False):
    """Reconstruction + codebook + commitment loss, averaged over the batch.

    The reconstruction term is the sum over frames and joints of the
    (unsquared) L2 distance between true and reconstructed joint positions;
    ``squared_recon=True`` squares each joint distance instead. The two
    latent terms are the squared distance between ``zq`` and ``z``, the
    second weighted by ``beta``. Their values coincide; only the gradient
    routing (handled in training) differs.
    """
    E, E_hat = _as_batch(E, True), _as_batch(E_hat, True)
    z, zq = _as_batch(z, False), _as_batch(zq, False)
    if E.shape != E_hat.shape or z.shape != zq.shape:
        raise ValueError("shape mismatch between targets and reconstructions")
    d = np.linalg.norm(E - E_hat, axis=-1)
    recon = float(((d * d) if squared_recon else d).sum(axis=1).mean())
    sq = float(((zq - z) ** 2).sum(axis=1).mean())
    terms = (recon, sq, beta * sq)
    if not all(np.isfinite(terms)):
        raise nn.NonFiniteError("non-finite VQ loss term")
    return VqLoss(recon + sq + beta * sq, *terms)


def loss_and_grads(model, frames):
    """Loss on a batch and gradients for every entry of ``model.params``.

    Also returns auxiliary arrays: latents, codes, and the gradients at the
    decoder input (``grad_zq``) and encoder output (``grad_z``).
    """
    cfg = model.config
    x = _windows(model, frames)
    n = x.shape[0]
    z, enc_caches = _encode(model, x, True)
    q = quantize(z, model.codebook)
    x_hat, dec_caches = _decode(model, q.zq, True)
    E = x.reshape(n, -1, 3)
    E_hat = x_hat.reshape(n, -1, 3)
    loss = vq_loss(E, E_hat, z.reshape(n, -1), q.zq.reshape(n, -1), cfg.beta, cfg.squared_recon)

    diff = E_hat - E
    if cfg.squared_recon:
        g_E = 2 * diff / n
    else:
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        g_E = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 1e-12) / n
    dec_grads, grad_zq = _decoder_backward(model, dec_caches, g_E.reshape(x_hat.shape).astype(x.dtype))
    grad_z = grad_zq + (2 * cfg.beta / n) * (z - q.zq)
    enc_grads = _encoder_backward(model, enc_caches, grad_z)
    g_code = np.zeros_like(model.codebook)
    np.add.at(g_code, q.indices.ravel(), ((2.0 / n) * (q.zq - z)).reshape(-1, cfg.latent_dim))
    grads = {f"enc/{k}": v for k, v in enc_grads.items()}
    grads.update({f"dec/{k}": v for k, v in dec_grads.items()})
    grads["codebook"] = g_code
    aux = {"z": z, "zq": q.zq, "indices": q.indices, "grad_zq": grad_zq, "grad_z": grad_z, "x_hat": x_hat}
    return loss, grads, aux


def reconstruct(model, frames, quantized=True):
    z = encode(model, frames)
    if quantized:
        z = quantize(z, model.codebook).zq
    return decode(model, z)


def reconstruction_mse(model, frames):
    frames = np.asarray(frames)
    return float(np.mean((reconstruct(model, frames) - frames) ** 2))


def code_usage(model, frames):
    idx = quantize(encode(model, frames), model.codebook).indices
    return np.bincount(idx.ravel(), minlength=model.config.codebook_size)


def train_vq(frames, config=VqConfig(), epochs=500, seed=0, callback=None):
    """Fit the autoencoder and codebook with Adam and a step-decayed learning rate.

    Parameters
    ----------
    frames : ndarray, shape (N, T, V, 3)
        Normalised training sequences.
    config : VqConfig
    epochs : int
    seed : int
    callback : callable, optional
        Called as ``callback(epoch, row)`` after every epoch.

    Returns
    -------
    model : VqModel
    history : list of dict
        One row per epoch with ``epoch, recon, codebook, commit, usage, mse, lr``.

    Raises
    ------
    TrainingDiverged
        If a loss turns non-finite; carries the last good model.
    """
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ValueError("empty dataset")
    _, T, V, _ = frames.shape
    model = build_model(config, T, V, seed)
    n = frames.shape[0]
    bs = min(config.batch_size, n)
    r_batch = rngmod.stream(seed, "vq", "batches")
    r_dead = rngmod.stream(seed, "vq", "dead-codes")

    # seed the codebook from encoder outputs
    z0 = encode(model, frames[r_batch.permutation(n)[:bs]]).reshape(-1, config.latent_dim)
    pick = r_dead.choice(z0.shape[0], config.codebook_size, replace=z0.shape[0] < config.codebook_size)
    model.params["codebook"] = (z0[pick] + 0.01 * r_dead.standard_normal((config.codebook_size, config.latent_dim))
                                ).astype(model.codebook.dtype)

    state = nn.adam_init(model.params, lr=config.lr)
    last_used = np.zeros(config.codebook_size, dtype=np.int64)
    history = []
    last_good = replace(model, params=dict(model.params))
    for epoch in range(epochs):
        lr = nn.step_decay(config.lr, epoch, config.lr_decay, config.decay_every)
        order = r_batch.permutation(n)
        sums = np.zeros(4)
        counts = np.zeros(config.codebook_size, dtype=np.int64)
        n_batches = 0
        latents = []
        for s in range(0, n, bs):
            batch = frames[order[s:s + bs]]
            loss, grads, aux = loss_and_grads(model, batch)
            if not np.isfinite(loss.total):
                raise TrainingDiverged(f"VQ loss non-finite at epoch {epoch}", last_good, history)
            new_params, state = nn.adam_step(state, model.params, grads, lr=lr)
            model = replace(model, params=new_params)
            counts += np.bincount(aux["indices"].ravel(), minlength=config.codebook_size)
            sums += [loss.recon, loss.codebook, loss.commit,
                     float(np.mean((aux["x_hat"] - _windows(model, batch)) ** 2))]
            n_batches += 1
            latents.append(aux["z"].reshape(-1, config.latent_dim))
        last_used[counts > 0] = epoch
        dead = np.flatnonzero(epoch - last_used >= config.dead_code_epochs)
        if dead.size:
            pool = np.concatenate(latents)
            cb = model.params["codebook"].copy()
            cb[dead] = pool[r_dead.choice(pool.shape[0], dead.size)]
            model.params["codebook"] = cb
            state.m["codebook"][dead] = 0
            state.v["codebook"][dead] = 0
            last_used[dead] = epoch
            log.debug("epoch %d: re-seeded %d dead codes", epoch, dead.size)
        recon, cbl, com, mse = sums / n_batches
        row = {"epoch": epoch, "recon": recon, "codebook": cbl, "commit": com,
               "usage": float((counts > 0).mean()), "mse": mse, "lr": lr}
        history.append(row)
        last_good = replace(model, params=dict(model.params))
        if callback is not None:
            callback(epoch, row)
    model.usage = code_usage(model, frames)
    return model, history


def save_model(path, model, meta=None):
    info = {"config": model.config.to_dict(), "n_frames": model.n_frames, "n_joints": model.n_joints,
            "enc_spec": model.enc_spec.to_dict(), "dec_spec": model.dec_spec.to_dict(), **(meta or {})}
    tensors = dict(model.params)
    if model.usage is not None:
        tensors["usage"] = model.usage
    return container.save(path, tensors, info)


def load_model(path):
    tensors, meta = container.load(path)
    usage = tensors.pop("usage", None)
    cfg = VqConfig(**meta["config"])
    model = VqModel(cfg, meta["n_frames"], meta["n_joints"], nn.MlpSpec.from_dict(meta["enc_spec"]),
                    nn.MlpSpec.from_dict(meta["dec_spec"]), tensors, usage)
    return model, meta
