"""Synthetic labelled "motion" sequences and 2D toy distributions.

A motion sequence is a ``(T, V, 3)`` array: frames x joints x xyz. Each
class is a family of smooth trajectories; every joint coordinate is a sum of
two sinusoids whose frequencies (in cycles per sequence) sit inside a
class-specific band. Per-sequence variation is a global phase shift and an
amplitude scale, both proportional to the family's ``noise_scale``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod

log = logging.getLogger(__name__)

COORDS = 3
# (frequency offset from base, relative weight) for the partials of every joint
PARTIALS = ((0.0, 1.0), (1.0, 0.3))


@dataclass(frozen=True)
class FamilySpec:
    class_id: int
    base_frequency: float
    amplitudes: np.ndarray
    phases: np.ndarray
    noise_scale: float = 0.05

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        phases = np.asarray(self.phases, dtype=np.float64)
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not np.all(np.isfinite(amps)) or amps.ndim != 1:
            raise ValueError("amplitudes must be a finite vector (one per joint)")
        if phases.shape != (amps.shape[0], COORDS):
            raise ValueError("phases must have shape (V, 3)")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)

    @property
    def n_joints(self):
        return self.amplitudes.shape[0]

    @property
    def band(self):
        return (self.base_frequency, self.base_frequency + PARTIALS[-1][0])

    def to_dict(self):
        return {"class_id": self.class_id, "base_frequency": self.base_frequency,
                "amplitudes": self.amplitudes.tolist(), "phases": self.phases.tolist(),
                "noise_scale": self.noise_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MotionSequence:
    frames: np.ndarray
    label: int

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[2] != COORDS:
            raise ValueError("frames must have shape (T, V, 3)")

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class MotionDataset:
    frames: np.ndarray          # (N, T, V, 3)
    labels: np.ndarray          # (N,)
    train_idx: np.ndarray
    test_idx: np.ndarray
    families: list = field(default_factory=list)

    def __len__(self):
        return self.frames.shape[0]

    def sequences(self):
        return [MotionSequence(f, int(l)) for f, l in zip(self.frames, self.labels)]

    @property
    def train(self):
        return self.frames[self.train_idx], self.labels[self.train_idx]

    @property
    def test(self):
        return self.frames[self.test_idx], self.labels[self.test_idx]


def default_families(n_classes=4, n_joints=8, noise_scale=0.05, seed=0, band_spacing=2.0):
    """Families with disjoint frequency bands ``[1 + 2c, 2 + 2c]`` cycles per sequence."""
    fams = []
    for c in range(n_classes):
        r = rngmod.stream(seed, "families", c)
        fams.append(FamilySpec(
            class_id=c,
            base_frequency=1.0 + band_spacing * c,
            amplitudes=r.uniform(0.5, 1.5, n_joints),
            phases=r.uniform(-np.pi, np.pi, (n_joints, COORDS)),
            noise_scale=noise_scale,
        ))
    return fams


def _render(fam, T, phase_shift, amp_scale):
    tau = np.arange(T) / T
    out = np.zeros((T, fam.n_joints, COORDS))
    for offset, weight in PARTIALS:
        freq = fam.base_frequency + offset
        ang = 2 * np.pi * freq * tau[:, None, None] + fam.phases[None] * (1 + offset) + phase_shift
        out += weight * np.sin(ang)
    return amp_scale * fam.amplitudes[None, :, None] * out


def step_bound(fam, T):
    """Upper bound on any per-coordinate frame-to-frame step for ``fam``.

    Uses ``|sin a - sin b| <= |a - b|`` with the largest amplitude scale the
    generator can draw.
    """
    rate = sum(w * 2 * np.pi * (fam.base_frequency + off) for off, w in PARTIALS)
    return 1.5 * fam.amplitudes.max() * rate / T


def generate_dataset(families, n_per_class, T=32, n_joints=None, seed=0, train_fraction=0.8):
    """Draw ``n_per_class`` sequences per family and split them per class.

    Parameters
    ----------
    families : list of FamilySpec
    n_per_class : int
    T : int
        Frames per sequence.
    n_joints : int, optional
        Checked against the families' joint count when given.
    seed : int
    train_fraction : float
        Fraction of each class assigned to the training split.

    Returns
    -------
    MotionDataset
    """
    if not families:
        raise ValueError("need at least one family")
    if n_per_class < 1 or T < 2:
        raise ValueError("n_per_class must be >= 1 and T >= 2")
    V = families[0].n_joints
    if any(f.n_joints != V for f in families) or (n_joints is not None and n_joints != V):
        raise ValueError("all families must share the joint count")
    frames, labels, train_idx, test_idx = [], [], [], []
    for fam in families:
        r = rngmod.stream(seed, "sequences", fam.class_id)
        shifts = fam.noise_scale * np.pi * r.standard_normal(n_per_class)
        scales = np.clip(1 + fam.noise_scale * r.standard_normal(n_per_class), 0.5, 1.5)
        start = len(frames)
        for s, a in zip(shifts, scales):
            frames.append(_render(fam, T, s, a))
            labels.append(fam.class_id)
        order = start + rngmod.stream(seed, "split", fam.class_id).permutation(n_per_class)
        n_train = int(round(train_fraction * n_per_class))
        train_idx.extend(order[:n_train])
        test_idx.extend(order[n_train:])
    return MotionDataset(np.stack(frames), np.asarray(labels, dtype=np.int64),
                         np.sort(np.asarray(train_idx, dtype=np.int64)),
                         np.sort(np.asarray(test_idx, dtype=np.int64)), list(families))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: tuple = ()

    def apply(self, frames):
        return (frames - self.mean) / self.std

    def invert(self, frames):
        return frames * self.std + self.mean


def normalize(frames, train_idx=None, min_std=1e-12):
    """Per-coordinate standardisation fitted on the training split.

    Returns ``(normalised_frames, NormStats)``. Coordinates with zero variance
    get ``std = 1`` (and are listed in ``NormStats.clamped``).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] == 0:
        raise ValueError("cannot normalise an empty dataset")
    ref = frames if train_idx is None else frames[train_idx]
    mean = ref.mean(axis=(0, 1))
    std = ref.std(axis=(0, 1))
    bad = std < min_std
    clamped = tuple(map(tuple, np.argwhere(bad).tolist()))
    if clamped:
        log.warning("zero-variance coordinates %s: std clamped to 1", clamped)
    std = np.where(bad, 1.0, std)
    stats = NormStats(mean, std, clamped)
    return stats.apply(frames), stats


def dominant_frequency(frames):
    """Index of the strongest non-DC FFT bin (cycles per sequence), per sequence."""
    frames = np.asarray(frames)
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    power = spec.sum(axis=(2, 3))
    power[:, 0] = 0
    return power.argmax(axis=1)


# ---------------------------------------------------------------- 2D toys

def two_moons(n, rng, noise=0.05):
    n_top = n // 2
    a = np.pi * rng.random(n_top)
    b = np.pi * rng.random(n - n_top)
    top = np.stack([np.cos(a), np.sin(a)], 1)
    bottom = np.stack([1 - np.cos(b), 0.5 - np.sin(b)], 1)
    x = np.concatenate([top, bottom]) + noise * rng.standard_normal((n, 2))
    labels = np.r_[np.zeros(n_top, int), np.ones(n - n_top, int)]
    x = (x - np.array([0.5, 0.25])) * 1.5
    return x, labels


def eight_gaussians(n, rng, radius=2.0, std=0.1):
    ang = 2 * np.pi * np.arange(8) / 8
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], 1)
    labels = rng.integers(0, 8, n)
    return centers[labels] + std * rng.standard_normal((n, 2)), labels


def two_gaussians(n, rng, std=0.02):
    """1D mixture at -1 and +1."""
    labels = rng.integers(0, 2, n)
    return (2.0 * labels - 1.0)[:, None] + std * rng.standard_normal((n, 1)), labels


TOYS = {"two-moons": two_moons, "eight-gaussians": eight_gaussians, "two-gaussians": two_gaussians}


def toy_dataset(name, n, seed=0):
    if name not in TOYS:
        raise ValueError(f"unknown toy {name!r}; choose from {sorted(TOYS)}")
    return TOYS[name](n, rngmod.stream(seed, "toy", name))
