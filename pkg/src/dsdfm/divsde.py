"""Diversity SDE: closed-form marginals, moment equations and the backward sampler.

The forward process

    dz = -z / (1 - t) dt + eta * sqrt(2 t / (1 - t)) dw,    z(0) = z0

has Gaussian marginals ``N((1 - t) z0, eta^2 t^2 I)``. Its time reversal
needs the score of that Gaussian, which is known in closed form once an
anchor ``z0`` is available; the anchor comes from the one-step deterministic
map, so sampling needs no extra network.

Time is continuous, ``t_k = k * dt`` with ``dt = 1 / T``. The backward chain
starts at ``t = 1 - dt`` from the forward marginal and stops at ``t = dt``.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import derode, nn
from . import rng as rngmod

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    eta: float = 0.1
    seed: int = 0
    dt: float = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 / self.steps)
        if abs(self.dt * self.steps - 1.0) > 1e-12:
            raise ValueError("dt * steps must equal 1")


@dataclass(frozen=True)
class SdeSpec:
    """``dz = f(z, t) dt + g(t) dw``.

    ``affine``, when given, is ``t -> (A, b)`` with ``f(z, t) = z A^T + b``;
    ``A`` may be a scalar (isotropic) or a square matrix. ``t_max`` is an
    exclusive upper bound on where the coefficients are finite.
    """
    name: str
    drift: object
    diffusion: object
    affine: object = None
    t_max: float = np.inf


def divsde_spec(eta):
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return SdeSpec("divsde",
                   drift=lambda z, t: -z / (1.0 - t),
                   diffusion=lambda t: eta * np.sqrt(2.0 * t / (1.0 - t)),
                   affine=lambda t: (-1.0 / (1.0 - t), 0.0),
                   t_max=1.0)


def ou_spec(theta=1.0, sigma=np.sqrt(2.0)):
    """Ornstein-Uhlenbeck ``dz = -theta z dt + sigma dw`` (stationary variance ``sigma^2 / 2 theta``)."""
    return SdeSpec("ou", drift=lambda z, t: -theta * z, diffusion=lambda t: sigma,
                   affine=lambda t: (-theta, 0.0))


def zero_spec():
    return SdeSpec("zero", drift=lambda z, t: np.zeros_like(z), diffusion=lambda t: 0.0,
                   affine=lambda t: (0.0, 0.0))


def divsde_forward_marginal(z0, t, eta):
    """Mean ``(1 - t) z0`` and isotropic variance ``eta^2 t^2`` of the forward process."""
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    return (1.0 - t) * np.asarray(z0, dtype=np.float64), (eta * t) ** 2


# ---------------------------------------------------------------- forward simulation

@dataclass
class Trajectory:
    times: np.ndarray       # (K,)
    states: np.ndarray      # (K, N, D)

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise KeyError(f"time {t} was not recorded")
        return self.states[k]


def simulate_forward_em(spec, z0, dt, t_end, rng, record_times=None):
    """Euler-Maruyama paths ``z <- z + f dt + g sqrt(dt) eps`` from ``t = 0``.

    Parameters
    ----------
    spec : SdeSpec
    z0 : ndarray, shape (N, D)
    dt, t_end : float
    rng : numpy Generator
    record_times : sequence of float, optional
        Grid times to keep (default: ``0`` and ``t_end``).

    Returns
    -------
    Trajectory
    """
    z = np.array(z0, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("z0 must have shape (N, D)")
    n_steps = int(round(t_end / dt))
    if n_steps < 0 or abs(n_steps * dt - t_end) > 1e-9:
        raise ValueError("t_end must be a non-negative multiple of dt")
    if t_end >= spec.t_max - dt:
        raise ValueError(f"t_end={t_end} steps into the singular region of {spec.name} (t >= {spec.t_max} - dt)")
    wanted = np.array(sorted({0.0, t_end} if record_times is None else set(record_times)), dtype=np.float64)
    keep = {int(round(t / dt)): i for i, t in enumerate(wanted)}
    if any(k < 0 or k > n_steps for k in keep):
        raise ValueError("record_times must lie in [0, t_end]")
    states = np.empty((len(wanted),) + z.shape)
    if 0 in keep:
        states[keep[0]] = z
    sq = np.sqrt(dt)
    for k in range(n_steps):
        t = k * dt
        z = z + spec.drift(z, t) * dt + spec.diffusion(t) * sq * rng.standard_normal(z.shape)
        if k + 1 in keep:
            states[keep[k + 1]] = z
    nn.check_finite(z, "forward simulation")
    return Trajectory(wanted, states)


# ---------------------------------------------------------------- moment equations

@dataclass
class MomentState:
    mean: np.ndarray
    cov: np.ndarray
    t: float

    def __post_init__(self):
        c = self.cov
        scale = max(1.0, float(np.max(np.abs(c), initial=0.0)))
        if np.max(np.abs(c - c.T), initial=0.0) > 1e-9 * scale:
            raise ValueError("covariance is not symmetric")
        if c.size and np.linalg.eigvalsh(c).min() < -1e-9 * scale:
            raise ValueError("covariance is not positive semidefinite")


def _affine_matrix(A, d):
    A = np.asarray(A, dtype=np.float64)
    return A * np.eye(d) if A.ndim == 0 else A


def integrate_moment_odes(spec, mu0, cov0, dt, t_end, t0=0.0):
    """RK4 for ``mu' = A mu + b`` and ``Sigma' = A Sigma + Sigma A^T + g^2 I``.

    These are the exact mean/covariance equations when the drift is affine,
    ``f(z, t) = A(t) z + b(t)``, because then ``E[f] = A mu + b`` and
    ``E[f (z - mu)^T] = A Sigma``.

    Returns
    -------
    list of MomentState
        One entry per grid point ``t0, t0 + dt, ..., t_end``.
    """
    if spec.affine is None:
        raise ValueError("moment equations close only for an affine drift; spec has none")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    mu = np.array(mu0, dtype=np.float64).reshape(-1)
    d = mu.shape[0]
    cov = np.array(cov0, dtype=np.float64)
    cov = cov * np.eye(d) if cov.ndim == 0 else cov
    n_steps = int(round((t_end - t0) / dt))
    if abs(t0 + n_steps * dt - t_end) > 1e-9:
        raise ValueError("t_end - t0 must be a multiple of dt")
    if t_end >= spec.t_max:
        raise ValueError("t_end reaches the singular point of the coefficients")

    def rhs(t, m, s):
        A, b = spec.affine(t)
        A = _affine_matrix(A, d)
        g = spec.diffusion(t)
        return A @ m + b, A @ s + s @ A.T + g * g * np.eye(d)

    out = [MomentState(mu.copy(), cov.copy(), t0)]
    for k in range(n_steps):
        t = t0 + k * dt
        k1 = rhs(t, mu, cov)
        k2 = rhs(t + dt / 2, mu + dt / 2 * k1[0], cov + dt / 2 * k1[1])
        k3 = rhs(t + dt / 2, mu + dt / 2 * k2[0], cov + dt / 2 * k2[1])
        k4 = rhs(t + dt, mu + dt * k3[0], cov + dt * k3[1])
        mu = mu + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        cov = cov + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        cov = 0.5 * (cov + cov.T)
        out.append(MomentState(mu.copy(), cov.copy(), t0 + (k + 1) * dt))
    return out


# ---------------------------------------------------------------- backward chain

def score_fn(z, t, anchor):
    """``((1 - t) anchor - z) / t^2``, the sampler's score term.

    This is ``eta^2`` times the score of ``N((1 - t) anchor, eta^2 t^2 I)``;
    the ``eta^2`` is absorbed by ``g(t)^2`` in the backward step.
    """
    if np.any(np.asarray(t) <= 0):
        raise ValueError("score is undefined at t = 0")
    return ((1.0 - t) * np.asarray(anchor) - np.asarray(z)) / t ** 2


def gaussian_score(z, mean, var):
    """Score of the isotropic Gaussian ``N(mean, var I)``."""
    return (np.asarray(mean) - np.asarray(z)) / var


def backward_step(z_next, t, anchor, eta, dt, eps):
    """One step of the discretised reverse process, from ``t + dt`` to ``t``.

    ``z_t = z + dt/(1-t) z + 2 t dt/(1-t) * score(z, t) + eta sqrt(2t/(1-t)) sqrt(dt) eps``
    with ``z = z_{t+dt}``: the score is evaluated at the state that is
    actually available.
    """
    if not 0.0 < t <= 1.0 - dt + 1e-12:
        raise ValueError(f"t={t} outside (0, 1 - dt]")
    z = np.asarray(z_next, dtype=np.float64)
    c = 1.0 - t
    return (z + dt / c * z + 2.0 * t * dt / c * score_fn(z, t, anchor)
            + eta * np.sqrt(2.0 * t / c) * np.sqrt(dt) * eps)


@dataclass
class ChainResult:
    samples: np.ndarray
    states: dict
    trace: list


def _noise_block(seed, first, count, rows, dim):
    return np.stack([rngmod.stream(seed, "divsde", first + i).standard_normal((rows, dim))
                     for i in range(count)], axis=1)


def run_chain(anchors, config=SamplerConfig(), record=(), snap=False, index_offset=0,
              trace_path=None, max_chunk_elems=4_000_000):
    """Backward chain for each anchor; noise comes from a per-sample stream.

    Parameters
    ----------
    anchors : ndarray, shape (N, D)
    config : SamplerConfig
    record : sequence of float
        Grid times whose chain states are returned in ``states``.
    snap : bool
        Divide the final state by ``1 - dt``. Off by default.
    index_offset : int
        Sample ``i`` uses stream ``index_offset + i``; lets batches be split
        without changing any sample.
    trace_path : path, optional
        Write a per-step ``t, mean_norm`` CSV.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    n, d = anchors.shape
    T, dt, eta = config.steps, config.dt, config.eta
    if T < 2:
        raise ValueError("the backward chain needs steps >= 2")
    rec_k = {}
    for t in record:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 or not 1 <= k <= T - 1:
            raise ValueError(f"record time {t} is not a chain grid point")
        rec_k[k] = t
    states = {t: np.empty((n, d)) for t in rec_k.values()}
    out = np.empty((n, d))
    trace_sum = np.zeros(T)
    chunk = max(1, min(n, max_chunk_elems // max(1, (T - 1) * d)))
    for s in range(0, n, chunk):
        a = anchors[s:s + chunk]
        m = a.shape[0]
        eps = _noise_block(config.seed, index_offset + s, m, T - 1, d)
        t_start = (T - 1) * dt
        z = (1.0 - t_start) * a + eta * t_start * eps[0]
        if T - 1 in rec_k:
            states[rec_k[T - 1]][s:s + m] = z
        trace_sum[T - 1] += np.linalg.norm(z, axis=1).sum()
        for j, k in enumerate(range(T - 2, 0, -1), start=1):
            z = backward_step(z, k * dt, a, eta, dt, eps[j])
            if k in rec_k:
                states[rec_k[k]][s:s + m] = z
            trace_sum[k] += np.linalg.norm(z, axis=1).sum()
        bad = ~np.all(np.isfinite(z), axis=1)
        if bad.any():
            raise nn.NonFiniteError(f"divsde chain diverged for samples {(s + np.flatnonzero(bad)).tolist()[:10]}")
        out[s:s + m] = z / (1.0 - dt) if snap else z
    trace = [(k * dt, trace_sum[k] / max(n, 1)) for k in range(T - 1, 0, -1)]
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_norm"])
            w.writerows(trace)
    return ChainResult(out, states, trace)


def sample_divsde(net, z1, config=SamplerConfig(), labels=None, **kwargs):
    """Anchor each noise sample with the one-step map, then run the backward chain.

    Extra keyword arguments go to :func:`run_chain`. Returns the ``(N, D)``
    samples at ``t = dt``.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    if z1.shape[0] == 0:
        return z1.copy()
    anchors = derode.sample_one_step(net, z1, labels)
    return run_chain(anchors, config, **kwargs).samples
