"""Sample-quality metrics on feature vectors.

All functions take ``(N, F)`` arrays (or :class:`FeatureSet`) and are pure;
the ones that subsample take an explicit ``numpy.random.Generator``.
"""
import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-8


class MetricError(ValueError):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise MetricError("feature vectors must have shape (N, F)")
        if not np.all(np.isfinite(self.vectors)):
            raise MetricError("feature vectors must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.vectors.shape[0],):
                raise MetricError("need one label per feature vector")

    def __len__(self):
        return self.vectors.shape[0]


def _vectors(x):
    return x.vectors if isinstance(x, FeatureSet) else FeatureSet(x).vectors


def sequence_features(frames):
    """Flatten ``(N, T, V, 3)`` sequences into ``(N, T*V*3)`` feature rows."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1)


# ---------------------------------------------------------------- Frechet distance

def _psd_sqrt(S, what):
    lam, U = np.linalg.eigh(S)
    floor = -CLAMP_TOL * max(1.0, float(np.max(np.abs(lam), initial=0.0)))
    if lam.min(initial=0.0) < floor:
        raise MetricError(f"{what} has eigenvalue {lam.min():.3g} below the clamp tolerance")
    lam = np.clip(lam, 0.0, None)
    return (U * np.sqrt(lam)) @ U.T, lam


def _trace_sqrt_product(S1, S2):
    # Tr((S1 S2)^{1/2}) through the symmetric form S1^{1/2} S2 S1^{1/2}
    R, _ = _psd_sqrt(S1, "first covariance")
    _, lam = _psd_sqrt(R @ S2 @ R, "covariance product")
    return float(np.sum(np.sqrt(lam)))


def frechet_distance(mu1, cov1, mu2, cov2):
    """``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`` for two Gaussians.

    The trace of the square root is computed in both orders and averaged, so
    the result is exactly symmetric in its arguments.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise MetricError("feature dimensions differ")
    tr = 0.5 * (_trace_sqrt_product(cov1, cov2) + _trace_sqrt_product(cov2, cov1))
    diff = mu1 - mu2
    value = float(diff @ diff + (np.trace(cov1) + np.trace(cov2)) - 2.0 * tr)
    return max(value, 0.0)


def gaussian_stats(x):
    x = _vectors(x)
    if x.shape[0] < 2:
        raise MetricError("need at least 2 vectors for a covariance")
    if x.shape[0] < x.shape[1] + 1:
        warnings.warn(f"{x.shape[0]} samples for {x.shape[1]} features: covariance is rank deficient",
                      RuntimeWarning, stacklevel=3)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def fid(real, gen):
    """Gaussian Frechet distance between two feature sets."""
    return frechet_distance(*gaussian_stats(real), *gaussian_stats(gen))


# ---------------------------------------------------------------- kernel distance

def _cubic_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y):
    """Unbiased squared MMD with the cubic polynomial kernel."""
    x, y = _vectors(x), _vectors(y)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise MetricError("KID needs at least 2 vectors per set")
    kxx, kyy, kxy = _cubic_kernel(x, x), _cubic_kernel(y, y), _cubic_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class KidResult:
    value: float
    se: float
    n_blocks: int


def kid(real, gen, n_blocks=10):
    """Block estimate of the kernel distance and its standard error.

    Both sets are split into ``n_blocks`` contiguous blocks (fewer when a
    block would hold under 2 vectors); block ``b`` of ``real`` is compared
    with block ``b`` of ``gen``.
    """
    x, y = _vectors(real), _vectors(gen)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise MetricError("KID needs at least 2 vectors per set")
    b = max(1, min(n_blocks, x.shape[0] // 2, y.shape[0] // 2))
    vals = np.array([mmd2_unbiased(xb, yb)
                     for xb, yb in zip(np.array_split(x, b), np.array_split(y, b))])
    se = float(vals.std(ddof=1) / np.sqrt(b)) if b > 1 else float("nan")
    return KidResult(float(vals.mean()), se, b)


# ---------------------------------------------------------------- precision / recall

def _knn_radii(x, k, chunk=1024):
    radii = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        d = cdist(x[s:s + chunk], x)
        # column 0 of the sorted row is the point itself
        radii[s:s + chunk] = np.partition(d, k, axis=1)[:, k]
    return radii


def _coverage(ref, radii, query, chunk=1024):
    inside = np.empty(query.shape[0], dtype=bool)
    for s in range(0, query.shape[0], chunk):
        inside[s:s + chunk] = np.any(cdist(query[s:s + chunk], ref) <= radii[None, :], axis=1)
    return float(inside.mean())


def precision_recall(real, gen, k=3):
    """k-NN support estimate: precision = share of ``gen`` inside the real support, recall the reverse.

    A point is inside a set's support when it lies within the distance from
    some member of the set to that member's ``k``-th nearest neighbour.
    """
    x, y = _vectors(real), _vectors(gen)
    if k < 1:
        raise MetricError("k must be >= 1")
    if x.shape[0] <= k or y.shape[0] <= k:
        raise MetricError(f"need more than k={k} vectors in each set")
    precision = _coverage(x, _knn_radii(x, k), y)
    recall = _coverage(y, _knn_radii(y, k), x)
    return precision, recall


# ---------------------------------------------------------------- diversity

def _paired_distance(x, s, rng):
    idx = rng.permutation(x.shape[0])
    return float(np.mean(np.linalg.norm(x[idx[:s]] - x[idx[s:2 * s]], axis=1)))


def diversity(feats, S_d=200, rng=None):
    """Mean distance between two random disjoint subsets of size ``S_d``."""
    x = _vectors(feats)
    if x.shape[0] < 2:
        raise MetricError("diversity needs at least 2 vectors")
    if x.shape[0] < 2 * S_d:
        warnings.warn(f"S_d lowered from {S_d} to {x.shape[0] // 2}", RuntimeWarning, stacklevel=2)
        S_d = x.shape[0] // 2
    return _paired_distance(x, S_d, rng if rng is not None else np.random.default_rng(0))


def multimodality(feats, labels=None, S_l=20, rng=None):
    """Average over classes of the mean within-class paired distance (``S_l`` pairs per class)."""
    if isinstance(feats, FeatureSet) and labels is None:
        labels = feats.labels
    if labels is None:
        raise MetricError("multimodality needs labels")
    x = _vectors(feats)
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    per_class = []
    for c in np.unique(labels):
        xc = x[labels == c]
        if xc.shape[0] < 2:
            raise MetricError(f"class {c} has fewer than 2 samples")
        s = S_l
        if xc.shape[0] < 2 * S_l:
            s = xc.shape[0] // 2
            warnings.warn(f"S_l lowered to {s} for class {c}", RuntimeWarning, stacklevel=2)
        per_class.append(_paired_distance(xc, s, rng))
    return float(np.mean(per_class))


# ---------------------------------------------------------------- classifier accuracy

class SpectralClassifier:
    """Nearest-centroid classifier on normalised temporal power spectra.

    A sequence ``(T, V, 3)`` is mapped to its FFT power per frequency bin
    (DC removed, summed over joints and coordinates, scaled to unit sum).
    """

    def __init__(self):
        self.centroids = None

    @staticmethod
    def features(frames):
        frames = np.asarray(frames, dtype=np.float64)
        power = (np.abs(np.fft.rfft(frames, axis=1)) ** 2).sum(axis=(2, 3))[:, 1:]
        return power / np.maximum(power.sum(axis=1, keepdims=True), 1e-300)

    @property
    def trained(self):
        return self.centroids is not None

    def fit(self, frames, labels):
        f = self.features(frames)
        labels = np.asarray(labels)
        self.classes = np.unique(labels)
        self.centroids = np.stack([f[labels == c].mean(axis=0) for c in self.classes])
        return self

    def predict(self, frames):
        if not self.trained:
            raise MetricError("classifier is not trained")
        d = cdist(self.features(frames), self.centroids)
        return self.classes[np.argmin(d, axis=1)]


def accuracy(sequences, labels, classifier):
    """Fraction of ``sequences`` that ``classifier`` assigns to their conditioning label."""
    if labels is None:
        raise MetricError("accuracy is undefined without conditioning labels")
    if classifier is None or not getattr(classifier, "trained", True):
        raise MetricError("classifier is not trained")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise MetricError("no sequences to classify")
    return float(np.mean(classifier.predict(sequences) == labels))


# ---------------------------------------------------------------- report

CSV_FIELDS = ("fid", "kid", "kid_se", "precision", "recall", "diversity", "diversity_real",
              "diversity_gap", "multimodality", "accuracy", "n_real", "n_gen")


@dataclass
class MetricReport:
    fid: float
    kid: float
    kid_se: float
    precision: float
    recall: float
    diversity: float
    diversity_real: float
    diversity_gap: float
    multimodality: float = None
    accuracy: float = None
    n_real: int = 0
    n_gen: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def csv_row(self):
        return [getattr(self, k) for k in CSV_FIELDS]

    def to_csv(self, path=None, header=True):
        buf = io.StringIO()
        w = csv.writer(buf)
        if header:
            w.writerow(CSV_FIELDS)
        w.writerow(["" if v is None else v for v in self.csv_row()])
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()


def evaluate(real, gen, gen_labels=None, sequences=None, classifier=None, k=3, S_d=200, S_l=20,
             seed=0, multimodality_requested=False):
    """Full metric report for generated features against real features.

    ``sequences`` (the generated motion) and ``classifier`` enable the
    accuracy column; ``gen_labels`` enables multimodality.
    """
    real, gen = _vectors(real), _vectors(gen)
    if multimodality_requested and gen_labels is None:
        raise MetricError("multimodality requested but the generated set has no labels")
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        k_res = kid(real, gen)
        div_gen = diversity(gen, S_d, rng)
        div_real = diversity(real, S_d, rng)
        mm = multimodality(gen, gen_labels, S_l, rng) if gen_labels is not None else None
        f = fid(real, gen)
    p, r = precision_recall(real, gen, k)
    acc = None
    if classifier is not None and sequences is not None and gen_labels is not None:
        acc = accuracy(sequences, gen_labels, classifier)
    return MetricReport(f, k_res.value, k_res.se, p, r, div_gen, div_real, abs(div_gen - div_real),
                        mm, acc, real.shape[0], gen.shape[0],
                        {"k": k, "S_d": S_d, "S_l": S_l, "seed": seed})
