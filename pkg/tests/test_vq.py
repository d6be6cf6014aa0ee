import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dsdfm import synth, vq
from dsdfm import rng as rngmod

finite = st.floats(-10, 10, allow_nan=False, width=64)


def _small(dtype="float64", **kw):
    base = dict(latent_dim=4, codebook_size=8, hidden_dims=(16,), window=4, state_dim=3, dtype=dtype)
    base.update(kw)
    return vq.VqConfig(**base)


@pytest.fixture(scope="module")
def two_class():
    fams = synth.default_families(2, 4, 0.05, seed=0)
    ds = synth.generate_dataset(fams, 32, T=16, seed=0)
    x, _ = synth.normalize(ds.frames)
    return x, ds.labels


def test_quantize_nearest_code():
    cb = np.array([[0.0, 0.0], [1.0, 1.0]])
    q = vq.quantize(np.array([[0.2, 0.1]]), cb)
    assert q.indices[0] == 0
    q = vq.quantize(np.array([[1.0, 1.0]]), cb)
    assert q.indices[0] == 1 and q.sq_dist[0] == 0.0
    loss = vq.vq_loss(np.zeros(3), np.zeros(3), np.array([1.0, 1.0]), q.zq[0], 0.25)
    assert loss.codebook == 0.0


def test_quantize_tie_lowest_index():
    cb = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert vq.quantize(np.array([[0.5, 0.5]]), cb).indices[0] == 0


def test_quantize_errors():
    with pytest.raises(ValueError):
        vq.quantize(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        vq.quantize(np.zeros((2, 3)), np.zeros((4, 2)))


@settings(max_examples=50, deadline=None)
@given(z=arrays(np.float64, (7, 3), elements=finite), cb=arrays(np.float64, (5, 3), elements=finite))
def test_quantize_optimal_and_idempotent(z, cb):
    q = vq.quantize(z, cb)
    brute = np.array([[np.sum((zi - k) ** 2) for k in cb] for zi in z])
    assert np.allclose(q.sq_dist, brute.min(axis=1), rtol=1e-12, atol=1e-12)
    assert np.all(q.sq_dist <= brute.min(axis=1) + 1e-12)
    again = vq.quantize(q.zq, cb)
    assert np.array_equal(again.zq, q.zq)


def test_vq_loss_examples():
    zero = vq.vq_loss(np.ones((2, 3)), np.ones((2, 3)), np.ones(4), np.ones(4), 0.25)
    assert (zero.total, zero.recon, zero.codebook, zero.commit) == (0.0, 0.0, 0.0, 0.0)
    recon_only = vq.vq_loss(np.zeros((1, 3)), np.array([[3.0, 4.0, 0.0]]), np.ones(2), np.ones(2), 0.25)
    assert recon_only.total == recon_only.recon == 5.0
    # e=0, e_hat=1, z=0, zq=2, beta=0.25: 1 + 4 + 1
    s = vq.vq_loss(0.0, 1.0, 0.0, 2.0, 0.25)
    assert (s.recon, s.codebook, s.commit, s.total) == (1.0, 4.0, 1.0, 6.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32), beta=st.floats(0.01, 2.0), sq=st.booleans())
def test_vq_loss_decomposes(seed, beta, sq):
    r = rngmod.stream(seed, "vqloss")
    loss = vq.vq_loss(r.standard_normal((3, 5, 3)), r.standard_normal((3, 5, 3)), r.standard_normal((3, 4)),
                      r.standard_normal((3, 4)), beta, sq)
    assert abs(loss.total - (loss.recon + loss.codebook + loss.commit)) <= 1e-12 * max(1.0, loss.total)


def test_config_validation():
    with pytest.raises(ValueError):
        vq.VqConfig(beta=0.0)
    with pytest.raises(ValueError):
        vq.build_model(_small(), n_frames=10, n_joints=2)


def test_zero_weights_zero_latents_and_frames(rng):
    model = vq.build_model(_small(), 8, 2, scheme="zeros")
    x = rng.standard_normal((3, 8, 2, 3))
    assert not vq.encode(model, x).any()
    assert not vq.decode(model, rng.standard_normal((3, 2, 4))).any()


def test_encode_decode_deterministic(rng):
    model = vq.build_model(_small(), 8, 2, seed=1)
    x = rng.standard_normal((1, 8, 2, 3))
    z = vq.encode(model, np.concatenate([x, x]))
    assert np.array_equal(z[0], z[1])
    assert np.array_equal(vq.decode(model, z), vq.decode(model, z))
    assert np.array_equal(vq.decode(model, z.reshape(2, -1)), vq.decode(model, z))
    with pytest.raises(ValueError):
        vq.encode(model, np.zeros((1, 8, 3, 3)))


def _fd_decoder_check(model, frames, h=1e-5):
    loss, grads, _ = vq.loss_and_grads(model, frames)
    worst = 0.0
    for name in [k for k in model.params if k.startswith("dec/")]:
        arr = model.params[name]
        for idx in list(np.ndindex(arr.shape))[:40]:
            vals = []
            for sgn in (1, -1):
                p = dict(model.params)
                p[name] = arr.copy()
                p[name][idx] += sgn * h
                vals.append(vq.loss_and_grads(vq.VqModel(model.config, model.n_frames, model.n_joints,
                                                         model.enc_spec, model.dec_spec, p), frames)[0].total)
            fd = (vals[0] - vals[1]) / (2 * h)
            a = grads[name][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


def test_decoder_gradients_match_finite_differences(rng):
    model = vq.build_model(_small(), 8, 2, seed=2)
    assert _fd_decoder_check(model, rng.standard_normal((3, 8, 2, 3))) < 1e-4


def test_straight_through_contract(rng):
    cfg = _small()
    model = vq.build_model(cfg, 8, 2, seed=3)
    frames = rng.standard_normal((5, 8, 2, 3))
    _, grads, aux = vq.loss_and_grads(model, frames)
    # encoder output gradient = decoder-input gradient at zq + commitment term
    commit = (2 * cfg.beta / frames.shape[0]) * (aux["z"] - aux["zq"])
    np.testing.assert_allclose(aux["grad_z"] - commit, aux["grad_zq"], rtol=0, atol=1e-15)
    # codebook gets only the codebook-term gradient, never the reconstruction gradient
    expect = np.zeros_like(model.codebook)
    np.add.at(expect, aux["indices"].ravel(),
              ((2.0 / frames.shape[0]) * (aux["zq"] - aux["z"])).reshape(-1, cfg.latent_dim))
    np.testing.assert_allclose(grads["codebook"], expect, atol=1e-15)


def test_single_code_collapse(two_class):
    x, _ = two_class
    model, _ = vq.train_vq(x[:16], _small(codebook_size=1, dtype="float32"), epochs=10, seed=0)
    assert np.all(vq.quantize(vq.encode(model, x[:16]), model.codebook).indices == 0)


def test_commitment_pulls_encoder_toward_single_code(two_class):
    # with a silent decoder the encoder only sees the commitment gradient
    x, _ = two_class
    model = vq.build_model(_small(codebook_size=1), 16, 4, seed=5)
    model.params.update({k: np.zeros_like(v) for k, v in model.params.items() if k.startswith("dec/")})
    before, grads, _ = vq.loss_and_grads(model, x[:8])
    stepped = {k: (v - 1e-3 * grads[k] if k.startswith("enc/") else v) for k, v in model.params.items()}
    after, _, _ = vq.loss_and_grads(vq.VqModel(model.config, 16, 4, model.enc_spec, model.dec_spec, stepped), x[:8])
    assert after.commit < before.commit


def test_memorise_single_sequence(two_class):
    x, _ = two_class
    cfg = vq.VqConfig(latent_dim=8, codebook_size=4, hidden_dims=(128, 128), window=8, dtype="float64")
    model, _ = vq.train_vq(x[:1], cfg, epochs=600, seed=0)
    assert vq.reconstruction_mse(model, x[:1]) < 1e-3


def test_trained_latents_separate_classes(two_class):
    x, labels = two_class
    cfg = vq.VqConfig(latent_dim=4, codebook_size=16, hidden_dims=(64,), window=8, batch_size=64)
    model, hist = vq.train_vq(x, cfg, epochs=150, seed=0)
    z = vq.encode(model, x).reshape(len(x), -1)
    gap = np.linalg.norm(z[labels == 0].mean(0) - z[labels == 1].mean(0))
    spread = max(z[labels == c].std(0).mean() for c in (0, 1))
    assert gap >= 2 * spread
    # loss curve non-increasing over 50-epoch windows
    total = [r["recon"] + r["codebook"] + r["commit"] for r in hist]
    windows = [np.mean(total[i:i + 50]) for i in range(0, len(total), 50)]
    assert all(b <= a for a, b in zip(windows, windows[1:]))
    assert hist[-1]["usage"] > 0


def test_training_divergence_reports_last_good(two_class, monkeypatch):
    x, _ = two_class
    real = vq.loss_and_grads
    calls = {"n": 0}

    def poisoned(model, frames):
        calls["n"] += 1
        loss, g, aux = real(model, frames)
        if calls["n"] > 3:
            loss = vq.VqLoss(float("nan"), loss.recon, loss.codebook, loss.commit)
        return loss, g, aux

    monkeypatch.setattr(vq, "loss_and_grads", poisoned)
    with pytest.raises(vq.TrainingDiverged) as exc:
        vq.train_vq(x[:8], _small(dtype="float32", batch_size=4), epochs=5, seed=0)
    assert exc.value.last_good is not None
    assert len(exc.value.history) == 1


def test_checkpoint_round_trip(tmp_path, two_class):
    x, _ = two_class
    model, _ = vq.train_vq(x[:8], _small(window=8), epochs=2, seed=0)
    vq.save_model(tmp_path / "vq.dsdf", model)
    back, _ = vq.load_model(tmp_path / "vq.dsdf")
    assert np.array_equal(vq.reconstruct(back, x[:4]), vq.reconstruct(model, x[:4]))
    assert back.config == model.config


def test_train_is_deterministic(two_class):
    x, _ = two_class
    a, _ = vq.train_vq(x[:8], _small(), epochs=3, seed=4)
    b, _ = vq.train_vq(x[:8], _small(), epochs=3, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
