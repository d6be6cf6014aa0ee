import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from dsdfm import metrics, synth
from dsdfm import rng as rngmod


def _spd(r, d):
    A = r.standard_normal((d, d))
    return A @ A.T + 0.1 * np.eye(d)


def _frechet_oracle(mu1, S1, mu2, S2):
    covmean = linalg.sqrtm(S1 @ S2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(S1 + S2 - 2 * covmean))


# ---------------------------------------------------------------- Frechet

def test_frechet_one_dimensional_examples():
    assert metrics.frechet_distance(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert metrics.frechet_distance(0.0, 4.0, 0.0, 1.0) == pytest.approx(1.0)


def test_frechet_matches_matrix_sqrt_oracle(rng):
    for d in (1, 2, 5, 12):
        mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
        S1, S2 = _spd(rng, d), _spd(rng, d)
        assert metrics.frechet_distance(mu1, S1, mu2, S2) == pytest.approx(_frechet_oracle(mu1, S1, mu2, S2),
                                                                           rel=1e-8, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32), n=st.integers(20, 80), d=st.integers(1, 6))
def test_fid_identity_and_symmetry(seed, n, d):
    r = rngmod.stream(seed, "fid")
    a = r.standard_normal((n, d)) * r.uniform(0.1, 3.0, d)
    b = r.standard_normal((n, d)) + 0.5
    assert metrics.fid(a, a) < 1e-6
    assert metrics.fid(a, b) == metrics.fid(b, a)
    assert metrics.fid(a, b) >= 0.0


def test_fid_rejects_non_psd_and_bad_shapes():
    with pytest.raises(metrics.MetricError):
        metrics.frechet_distance([0, 0], np.diag([1.0, -1.0]), [0, 0], np.eye(2))
    with pytest.raises(metrics.MetricError):
        metrics.frechet_distance([0, 0], np.eye(2), [0], np.eye(1))
    with pytest.raises(metrics.MetricError):
        metrics.fid(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(metrics.MetricError):
        metrics.fid(np.full((3, 2), np.nan), np.zeros((5, 2)))


def test_rank_deficient_covariance_warns(rng):
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        metrics.fid(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)))


# ---------------------------------------------------------------- KID

def test_mmd_matches_loop_oracle(rng):
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((5, 3)) + 1

    def k(a, b):
        return (a @ b / 3 + 1) ** 3

    sxx = sum(k(x[i], x[j]) for i in range(6) for j in range(6) if i != j) / 30
    syy = sum(k(y[i], y[j]) for i in range(5) for j in range(5) if i != j) / 20
    sxy = sum(k(a, b) for a in x for b in y) / 30
    assert metrics.mmd2_unbiased(x, y) == pytest.approx(sxx + syy - 2 * sxy, rel=1e-12)


def test_kid_self_test_within_three_se():
    x = rngmod.stream(0, "kid").standard_normal((4000, 8))
    res = metrics.kid(x[:2000], x[2000:])
    assert res.n_blocks == 10
    assert abs(res.value) <= 3 * res.se


def test_kid_detects_separated_sets(rng):
    res = metrics.kid(rng.standard_normal((500, 4)), rng.standard_normal((500, 4)) + 2)
    assert res.value > 10 * res.se > 0


def test_kid_small_sets():
    res = metrics.kid(np.arange(6.0).reshape(3, 2), np.arange(6.0).reshape(3, 2) + 1)
    assert res.n_blocks == 1 and np.isnan(res.se)
    with pytest.raises(metrics.MetricError):
        metrics.kid(np.zeros((1, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------- precision / recall

def test_precision_recall_identical_sets(rng):
    x = rng.standard_normal((300, 3))
    assert metrics.precision_recall(x, x.copy()) == (1.0, 1.0)


def test_precision_recall_disjoint_sets(rng):
    x = rng.standard_normal((200, 2))
    assert metrics.precision_recall(x, x + 100.0) == (0.0, 0.0)


def test_precision_recall_missing_mode(rng):
    # real has two far clusters, gen covers one: all generated points are
    # realistic, half the real points are not covered
    a, b = rng.standard_normal((200, 2)), rng.standard_normal((200, 2)) + 50
    p, r = metrics.precision_recall(np.vstack([a, b]), rng.standard_normal((400, 2)))
    assert p > 0.95 and abs(r - 0.5) < 0.03


def test_precision_recall_validation(rng):
    with pytest.raises(metrics.MetricError):
        metrics.precision_recall(rng.standard_normal((3, 2)), rng.standard_normal((10, 2)), k=3)
    with pytest.raises(metrics.MetricError):
        metrics.precision_recall(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)), k=0)


# ---------------------------------------------------------------- diversity

def test_diversity_of_identical_vectors_is_zero():
    assert metrics.diversity(np.ones((500, 3)), 200) == 0.0


def test_diversity_expectation_matches_all_pairs_mean(rng):
    x = rng.standard_normal((10, 2))
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    expected = d.sum() / (10 * 9)
    draws = [metrics.diversity(x, 5, np.random.default_rng(s)) for s in range(4000)]
    assert np.mean(draws) == pytest.approx(expected, rel=0.02)


def test_diversity_homogeneous_and_translation_invariant(rng):
    x = rng.standard_normal((400, 5))
    base = metrics.diversity(x, 200, np.random.default_rng(1))
    assert metrics.diversity(3.0 * x, 200, np.random.default_rng(1)) == pytest.approx(3.0 * base)
    assert metrics.diversity(x + 7.0, 200, np.random.default_rng(1)) == pytest.approx(base)


def test_diversity_lowers_subset_size_with_warning(rng):
    with pytest.warns(RuntimeWarning, match="S_d lowered"):
        metrics.diversity(rng.standard_normal((30, 2)), 200)
    with pytest.raises(metrics.MetricError):
        metrics.diversity(np.zeros((1, 2)))


def test_multimodality_examples():
    x = np.array([[0.0], [1.0], [0.0], [3.0]])
    with pytest.warns(RuntimeWarning):
        assert metrics.multimodality(x, [0, 0, 1, 1], S_l=20) == pytest.approx(2.0)
    fs = metrics.FeatureSet(x, np.array([0, 0, 1, 1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert metrics.multimodality(fs, S_l=1) == pytest.approx(2.0)
    with pytest.raises(metrics.MetricError):
        metrics.multimodality(x)
    with pytest.raises(metrics.MetricError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        metrics.multimodality(x, [0, 0, 0, 1])


def test_feature_set_validation():
    with pytest.raises(metrics.MetricError):
        metrics.FeatureSet(np.zeros(3))
    with pytest.raises(metrics.MetricError):
        metrics.FeatureSet(np.zeros((3, 2)), np.zeros(2))
    assert len(metrics.FeatureSet(np.zeros((3, 2)))) == 3
    assert metrics.sequence_features(np.zeros((2, 4, 5, 3))).shape == (2, 60)


# ---------------------------------------------------------------- accuracy

@pytest.fixture(scope="module")
def motion():
    return synth.generate_dataset(synth.default_families(4), 40, T=32, seed=0)


def test_classifier_on_real_and_shuffled_labels(motion):
    frames, labels = motion.train
    clf = metrics.SpectralClassifier().fit(frames, labels)
    test_frames, test_labels = motion.test
    assert metrics.accuracy(test_frames, test_labels, clf) >= 0.99
    shuffled = [metrics.accuracy(test_frames, np.random.default_rng(s).permutation(test_labels), clf)
                for s in range(200)]
    assert np.mean(shuffled) == pytest.approx(0.25, abs=0.03)


def test_accuracy_errors(motion):
    frames, labels = motion.train
    with pytest.raises(metrics.MetricError):
        metrics.accuracy(frames, None, metrics.SpectralClassifier().fit(frames, labels))
    with pytest.raises(metrics.MetricError):
        metrics.accuracy(frames, labels, metrics.SpectralClassifier())
    with pytest.raises(metrics.MetricError):
        metrics.SpectralClassifier().predict(frames)


# ---------------------------------------------------------------- report

def test_evaluate_report_round_trip(tmp_path, rng, motion):
    real, gen = rng.standard_normal((120, 4)), rng.standard_normal((100, 4)) + 0.1
    labels = rng.integers(0, 3, 100)
    rep = metrics.evaluate(real, gen, gen_labels=labels, S_d=20, S_l=5, seed=3)
    assert rep.n_real == 120 and rep.n_gen == 100 and rep.accuracy is None
    assert rep.diversity_gap == pytest.approx(abs(rep.diversity - rep.diversity_real))
    data = json.loads(rep.to_json(tmp_path / "r.json"))
    assert json.loads((tmp_path / "r.json").read_text()) == data
    assert data["config"] == {"k": 3, "S_d": 20, "S_l": 5, "seed": 3}
    lines = rep.to_csv(tmp_path / "r.csv").splitlines()
    assert lines[0].split(",") == list(metrics.CSV_FIELDS)
    assert float(lines[1].split(",")[0]) == pytest.approx(rep.fid)
    assert metrics.evaluate(real, gen, gen_labels=labels, S_d=20, S_l=5, seed=3) == rep


def test_evaluate_requires_labels_for_multimodality(rng):
    with pytest.raises(metrics.MetricError, match="no labels"):
        metrics.evaluate(rng.standard_normal((20, 2)), rng.standard_normal((20, 2)), multimodality_requested=True)


def test_evaluate_accuracy_column(motion):
    frames, labels = motion.test
    clf = metrics.SpectralClassifier().fit(*motion.train)
    feats = metrics.sequence_features(frames)
    rep = metrics.evaluate(feats, feats, gen_labels=labels, sequences=frames, classifier=clf, S_d=10, S_l=4)
    assert rep.accuracy >= 0.99 and rep.fid < 1e-6 and (rep.precision, rep.recall) == (1.0, 1.0)
