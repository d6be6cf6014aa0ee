"""Multilayer perceptron with hand-written reverse mode, plus Adam.

Parameters are plain ``dict[str, ndarray]``; every function returns new
arrays and leaves its inputs untouched. The network input is the
concatenation ``[z, sinusoidal(t), label_embedding[label]]`` where the two
conditioning blocks are present only when their dimension is non-zero.
"""
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import container

ACTIVATIONS = ("relu", "silu", "tanh")


class NonFiniteError(FloatingPointError):
    """Raised when a tensor that must stay finite picks up NaN or Inf."""


def check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "silu"
    time_embed_dim: int = 0
    label_embed_dim: int = 0
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a non-negative even number")
        if self.label_embed_dim and self.num_classes < 1:
            raise ValueError("label embedding requires num_classes >= 1")

    @property
    def in_features(self):
        return self.input_dim + self.time_embed_dim + self.label_embed_dim

    @property
    def layer_sizes(self):
        return (self.in_features,) + self.hidden_dims + (self.output_dim,)

    def param_shapes(self):
        sizes = self.layer_sizes
        shapes = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"W{i}"] = (a, b)
            shapes[f"b{i}"] = (b,)
        if self.label_embed_dim:
            shapes["label_emb"] = (self.num_classes, self.label_embed_dim)
        return shapes

    @property
    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(spec, rng=None, scheme="he", dtype=np.float64):
    """Initialise parameters; ``scheme`` is ``"he"``, ``"glorot"`` or ``"zeros"``."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if scheme == "zeros" or name.startswith("b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "label_emb":
            params[name] = (0.5 * rng.standard_normal(shape)).astype(dtype)
        else:
            fan_in, fan_out = shape
            var = 2.0 / fan_in if scheme == "he" else 2.0 / (fan_in + fan_out)
            params[name] = (np.sqrt(var) * rng.standard_normal(shape)).astype(dtype)
    # small last layer keeps the initial field close to zero
    if scheme != "zeros":
        last = f"W{spec.n_layers - 1}"
        params[last] = params[last] * 0.1
    return params


def time_embedding(t, dim, n=None):
    """Sinusoidal features of ``t`` with angular frequencies spread over [1, 100]."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n if n is not None else 1, float(t))
    if dim == 0:
        return np.zeros((t.shape[0], 0))
    freqs = np.geomspace(1.0, 100.0, dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0)
    if name == "tanh":
        return np.tanh(a)
    return a * expit(a)


def _act_grad(name, a):
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - np.tanh(a) ** 2
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def _assemble_input(spec, params, z, t, labels):
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (N, {spec.input_dim}), got {z.shape}")
    check_finite(z, "mlp input")
    dtype = params["W0"].dtype
    parts = [z.astype(dtype, copy=False)]
    n = z.shape[0]
    if spec.time_embed_dim:
        if t is None:
            raise ValueError("this network is time-conditioned; pass t")
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            t_arr = np.full(n, float(t_arr))
        if np.any(t_arr < 0) or np.any(t_arr > 1):
            raise ValueError("t must lie in [0, 1]")
        parts.append(time_embedding(t_arr, spec.time_embed_dim).astype(dtype))
    if spec.label_embed_dim:
        if labels is None:
            raise ValueError("this network is label-conditioned; pass labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= spec.num_classes:
            raise ValueError("labels must be N class ids in [0, num_classes)")
        parts.append(params["label_emb"][labels])
    return np.concatenate(parts, axis=1), labels


def mlp_forward(spec, params, z, t=None, labels=None, return_cache=False):
    """Evaluate the network on a batch.

    Parameters
    ----------
    spec : MlpSpec
    params : dict of ndarray
    z : ndarray, shape (N, input_dim)
    t : float or ndarray, shape (N,), optional
        Time in [0, 1]; required when ``spec.time_embed_dim > 0``.
    labels : ndarray of int, shape (N,), optional
        Class ids; required when ``spec.label_embed_dim > 0``.
    return_cache : bool
        Also return the activations needed by :func:`mlp_backward`.

    Returns
    -------
    out : ndarray, shape (N, output_dim)
    cache : dict, only if ``return_cache``
    """
    x, labels = _assemble_input(spec, params, z, t, labels)
    hs, pre = [x], []
    h = x
    for i in range(spec.n_layers):
        a = h @ params[f"W{i}"] + params[f"b{i}"]
        pre.append(a)
        h = a if i == spec.n_layers - 1 else _act(spec.activation, a)
        hs.append(h)
    if return_cache:
        return h, {"hs": hs, "pre": pre, "labels": labels}
    return h


def mlp_backward(spec, params, cache, grad_out):
    """Reverse pass for a recorded forward.

    Returns ``(grads, grad_z)`` where ``grads`` mirrors ``params`` and
    ``grad_z`` is the gradient with respect to the ``z`` block of the input.
    """
    grads = {}
    g = np.asarray(grad_out, dtype=cache["hs"][-1].dtype)
    for i in reversed(range(spec.n_layers)):
        if i != spec.n_layers - 1:
            g = g * _act_grad(spec.activation, cache["pre"][i])
        h_in = cache["hs"][i]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if not (np.all(np.isfinite(grads[f"W{i}"])) and np.all(np.isfinite(grads[f"b{i}"]))):
            raise NonFiniteError(f"non-finite gradient at layer {i}")
        g = g @ params[f"W{i}"].T
    grad_z = g[:, :spec.input_dim]
    if spec.label_embed_dim:
        off = spec.input_dim + spec.time_embed_dim
        ge = np.zeros_like(params["label_emb"])
        np.add.at(ge, cache["labels"], g[:, off:off + spec.label_embed_dim])
        grads["label_emb"] = ge
    return grads, grad_z


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_scaled(a, b, scale=1.0):
    """``a + scale * b`` for gradient dicts, keys of ``b`` must be a subset of ``a``."""
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + scale * v
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=zeros_like(params), v=zeros_like(params))


def adam_step(state, params, grads, lr=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    lr = state.lr if lr is None else lr
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_params[k], m[k], v[k] = p, state.m[k], state.v[k]
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        check_finite(g, f"gradient {k}")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**step)
        v_hat = v[k] / (1 - b2**step)
        new_params[k] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return new_params, AdamState(state.lr, b1, b2, state.eps, step, m, v)


def step_decay(lr0, epoch, factor=0.98, every=10):
    """Learning rate after ``epoch`` epochs: ``lr0 * factor ** (epoch // every)``."""
    return lr0 * factor ** (epoch // every)


def save_params(path, spec, params, meta=None):
    return container.save(path, params, {"spec": spec.to_dict(), **(meta or {})})


def load_params(path):
    tensors, meta = container.load(path)
    return MlpSpec.from_dict(meta["spec"]), tensors, meta
