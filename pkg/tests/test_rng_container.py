import numpy as np
import pytest

from dsdfm import container
from dsdfm import rng as rngmod


def test_same_seed_same_draws():
    a = rngmod.gaussian_sample(rngmod.stream(5, "noise"), (4, 3))
    b = rngmod.gaussian_sample(rngmod.stream(5, "noise"), (4, 3))
    assert np.array_equal(a, b)


def test_named_streams_are_independent():
    a = rngmod.stream(5, "noise").standard_normal(8)
    b = rngmod.stream(5, "init").standard_normal(8)
    c = rngmod.stream(6, "noise").standard_normal(8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_drawing_from_one_stream_does_not_shift_another():
    x = rngmod.stream(0, "data")
    x.standard_normal(1000)
    assert np.array_equal(rngmod.stream(0, "noise").standard_normal(5),
                          rngmod.stream(0, "noise").standard_normal(5))


def test_gaussian_moments_law_of_large_numbers():
    # 1e6 draws: sd of the mean is 1e-3, so 4e-3 is a 4-sigma band
    x = rngmod.gaussian_sample(rngmod.stream(0, "lln"), (1_000_000,))
    assert abs(x.mean()) < 4e-3
    assert abs(x.var() - 1.0) < 0.01


def test_empty_shape():
    x = rngmod.gaussian_sample(rngmod.stream(0), (0,))
    assert x.shape == (0,)


@pytest.mark.parametrize("seed", [-1, 2 ** 64])
def test_seed_range(seed):
    with pytest.raises(ValueError):
        rngmod.stream(seed)


def test_container_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
               "b": np.linspace(0, 1, 5), "labels": np.array([3, 1, 2], dtype=np.int64),
               "empty": np.zeros((0, 4))}
    path = container.save(tmp_path / "x.dsdf", tensors, {"k": 1})
    back, meta = container.load(path)
    assert meta == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])


def test_container_layout():
    blob = container.dumps({"x": np.array([1.0], dtype=np.float64)})
    assert blob[:4] == b"DSDF"
    assert blob[4] == container.VERSION
    # payload is the little-endian float at the very end
    assert blob[-8:] == np.array([1.0], dtype="<f8").tobytes()


def test_container_rejects_garbage():
    with pytest.raises(container.ContainerError):
        container.loads(b"NOPE" + b"\0" * 20)
    blob = container.dumps({"x": np.zeros(4)})
    with pytest.raises(container.ContainerError):
        container.loads(blob[:-3])
    with pytest.raises(container.ContainerError):
        container.loads(blob + b"\0")
    with pytest.raises(container.ContainerError):
        container.dumps({"s": np.array(["a"])})


def test_file_hash_deterministic(tmp_path):
    t = {"w": rngmod.stream(3).standard_normal((3, 3))}
    a = container.file_hash(container.save(tmp_path / "a.dsdf", t))
    b = container.file_hash(container.save(tmp_path / "b.dsdf", t))
    assert a == b
