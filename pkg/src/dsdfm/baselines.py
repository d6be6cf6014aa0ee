"""Variance-preserving and variance-exploding score SDE baselines.

Both are trained with denoising score matching through a noise-prediction
network ``eps(x_t, t)`` (score ``= -eps / sigma(t)``) and sampled with
reverse-time Euler-Maruyama. They exist for step-count and timing
comparisons against the one-step and DivSDE samplers.
"""
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import rng as rngmod
from .derode import DriftNet, TrainConfig


@dataclass(frozen=True)
class VPSDE:
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    name: str = "vpsde"

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def marginal(self, t):
        """``(alpha(t), sigma(t))`` with ``x_t = alpha x0 + sigma eps``."""
        log_alpha = -0.25 * t ** 2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
        alpha = np.exp(log_alpha)
        return alpha, np.sqrt(-np.expm1(2 * log_alpha))

    def prior(self, shape, rng):
        return rng.standard_normal(shape)

    def reverse_coeffs(self, x, t):
        """Forward drift ``f`` and squared diffusion ``g^2`` at ``(x, t)``."""
        b = self.beta(t)
        return -0.5 * b * x, b


@dataclass(frozen=True)
class VESDE:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    t_min: float = 1e-3
    name: str = "vesde"

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def marginal(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64)), self.sigma(t)

    def prior(self, shape, rng):
        return self.sigma_max * rng.standard_normal(shape)

    def reverse_coeffs(self, x, t):
        s = self.sigma(t)
        return 0.0 * x, 2.0 * s * s * np.log(self.sigma_max / self.sigma_min)


SDES = {"vpsde": VPSDE, "vesde": VESDE}


def dsm_loss(net, sde, x0, t, eps, labels=None, with_grads=True):
    """``mean ||eps_theta(alpha x0 + sigma eps, t) - eps||^2``."""
    alpha, sigma = sde.marginal(t)
    xt = alpha[:, None] * x0 + sigma[:, None] * eps
    out, cache = net.forward(xt, t, labels)
    r = out - eps
    n = x0.shape[0]
    loss = float(np.sum(r * r) / n)
    if not np.isfinite(loss):
        raise nn.NonFiniteError("score-matching loss is not finite")
    return loss, (net.backward(cache, 2.0 * r / n) if with_grads else None)


def train_score_model(data, sde, config=TrainConfig(), seed=0, labels=None, num_classes=0):
    """Fit a noise-prediction network for ``sde``; returns ``(net, history)``."""
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
    r = rngmod.stream(seed, sde.name, "train")
    bs = min(config.batch_size, n)
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = nn.step_decay(config.lr, epoch, config.lr_decay, config.decay_every)
        order = r.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            x0 = data[idx]
            t = sde.t_min + (1 - sde.t_min) * r.random(len(idx))
            loss, grads = dsm_loss(net, sde, x0, t, r.standard_normal(x0.shape),
                                   labels[idx] if conditional else None)
            params, state = nn.adam_step(state, net.params, grads, lr=lr)
            net = net.with_params(params)
            total += loss
            count += 1
        history.append({"epoch": epoch, "loss": total / count, "wall_time": time.perf_counter() - start})
    return net, history


def sample_reverse(net, sde, n, dim, steps, seed=0, labels=None):
    """Reverse-time Euler-Maruyama from ``t = 1`` to ``sde.t_min``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    r = rngmod.stream(seed, sde.name, "sample")
    x = sde.prior((n, dim), r)
    ts = np.linspace(1.0, sde.t_min, steps + 1)
    for k in range(steps):
        t, dt = ts[k], ts[k] - ts[k + 1]
        _, sigma = sde.marginal(t)
        score = -net(x, t, labels) / sigma
        f, g2 = sde.reverse_coeffs(x, t)
        x = x - (f - g2 * score) * dt + np.sqrt(g2 * dt) * r.standard_normal(x.shape)
    nn.check_finite(x, f"{sde.name} sample")
    # final denoising step: posterior mean given the last noise prediction
    alpha, sigma = sde.marginal(sde.t_min)
    return (x - sigma * net(x, sde.t_min, labels)) / alpha
