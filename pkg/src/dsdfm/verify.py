"""Self-contained numerical checks behind ``dsdfm verify``.

Each check returns a list of :class:`Check` rows (measured value, tolerance,
verdict). The reference side of every comparison is computed independently
of the code under test: closed forms, scipy's assignment solver, central
finite differences or Monte-Carlo simulation.
"""
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import divsde, metrics, nn, ot
from . import rng as rngmod

CHECKS = ("prop2", "prop3", "ot", "gradients", "eta-sweep")


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def to_dict(self):
        d = asdict(self)
        d["value"] = float(d["value"])
        d["passed"] = bool(d["passed"])
        return d


def _le(name, value, tol, detail=""):
    return Check(name, float(value), float(tol), bool(value <= tol), detail)


# ---------------------------------------------------------------- propositions

def check_prop3(n_paths=20_000, dt=1e-3, eta=0.1, times=(0.25, 0.5, 0.75), seed=0, z0=(2.0, -1.0)):
    """Forward Euler-Maruyama paths against ``N((1 - t) z0, eta^2 t^2 I)``."""
    start = time.perf_counter()
    z0 = np.asarray(z0, dtype=np.float64)
    paths = divsde.simulate_forward_em(divsde.divsde_spec(eta), np.tile(z0, (n_paths, 1)), dt, max(times),
                                       rngmod.stream(seed, "verify", "prop3"), record_times=times)
    rows = []
    for t in times:
        s = paths.at(t)
        mean, var = divsde.divsde_forward_marginal(z0, t, eta)
        z = np.abs(s.mean(axis=0) - mean) / (s.std(axis=0, ddof=1) / np.sqrt(n_paths))
        cov = np.cov(s, rowvar=False)
        rel = np.max(np.abs(cov - var * np.eye(z0.size))) / var
        rows.append(_le(f"prop3 mean z-score t={t}", z.max(), 3.0))
        rows.append(_le(f"prop3 covariance rel err t={t}", rel, 0.05))
    rows.append(_le("prop3 runtime s", time.perf_counter() - start, 60.0))
    return rows


def check_prop2(eta=0.1, dt=1e-3, seed=0, n_paths=20_000):
    """Moment equations against the closed forms, and the OU stationary variance by Monte-Carlo."""
    rows = []
    z0 = np.array([2.0, -1.0, 0.5])
    traj = divsde.integrate_moment_odes(divsde.divsde_spec(eta), z0, 0.0, dt, 0.75)
    worst_m = worst_c = 0.0
    for st in traj[1:]:
        mean, var = divsde.divsde_forward_marginal(z0, st.t, eta)
        worst_m = max(worst_m, np.max(np.abs(st.mean - mean) / np.abs(mean)))
        worst_c = max(worst_c, np.max(np.abs(st.cov - var * np.eye(3))) / var)
    rows.append(_le("prop2 divsde mean rel err", worst_m, 1e-6))
    rows.append(_le("prop2 divsde covariance rel err", worst_c, 1e-6))
    ou = divsde.ou_spec()
    traj = divsde.integrate_moment_odes(ou, [0.0], 0.0, 1e-2, 3.0)
    err = max(abs(st.cov[0, 0] - (1 - np.exp(-2 * st.t))) for st in traj)
    rows.append(_le("prop2 OU variance vs 1 - exp(-2t)", err, 1e-6))
    sim = divsde.simulate_forward_em(ou, np.zeros((n_paths, 1)), 1e-2, 10.0, rngmod.stream(seed, "verify", "ou"))
    mc = sim.states[-1].var(ddof=1)
    rows.append(_le("prop2 OU stationary variance rel err (MC)", abs(mc - 1.0), 0.05))
    rows.append(_le("prop2 OU moment-ODE stationary rel err", abs(traj[-1].cov[0, 0] - 1.0), 0.05))
    return rows


# ---------------------------------------------------------------- OT

def check_ot(n_instances=200, max_n=16, max_dim=8, seed=0):
    """Dual-route plans against scipy's exact assignment."""
    r = rngmod.stream(seed, "verify", "ot")
    worst = 0.0
    bad_perm = 0
    start = time.perf_counter()
    for _ in range(n_instances):
        n = int(r.integers(1, max_n + 1))
        d = int(r.integers(1, max_dim + 1))
        C = ot.build_cost_matrix(r.standard_normal((n, d)), r.standard_normal((n, d)))
        plan, _ = ot.optimal_plan(C)
        rows, cols = linear_sum_assignment(C)
        best = C[rows, cols].mean()   # plan weights are 1/N
        worst = max(worst, abs(plan.cost - best))
        bad_perm += int(sorted(plan.cols.tolist()) != list(range(n)))
    elapsed = time.perf_counter() - start
    return [_le("ot cost gap vs exact assignment", worst, 1e-6),
            _le("ot invalid permutations", bad_perm, 0),
            _le("ot runtime s", elapsed, 10.0)]


# ---------------------------------------------------------------- gradients

def _fd_config(r):
    hidden = tuple(int(h) for h in r.integers(1, 9, size=int(r.integers(1, 4))))
    act = ("relu", "silu", "tanh")[int(r.integers(0, 3))]
    ncls = int(r.integers(0, 4))
    return nn.MlpSpec(int(r.integers(1, 6)), hidden, int(r.integers(1, 5)), act,
                      time_embed_dim=2 * int(r.integers(0, 3)),
                      label_embed_dim=int(r.integers(1, 4)) if ncls else 0, num_classes=ncls)


def gradient_error(spec, params, z, t, labels, proj, h=1e-5):
    """Largest elementwise relative error between analytic and central-difference gradients.

    The scalar under test is ``sum(out * proj)``. Entries are compared with
    ``|a - f| / max(|a|, |f|, 1e-7)``.
    """
    def loss(p, zz):
        return float(np.sum(nn.mlp_forward(spec, p, zz, t, labels) * proj))

    out, cache = nn.mlp_forward(spec, params, z, t, labels, return_cache=True)
    grads, gz = nn.mlp_backward(spec, params, cache, proj)
    worst = 0.0
    targets = [(k, params[k], grads[k]) for k in params] + [("z", z, gz)]
    for name, arr, g in targets:
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            if name == "z":
                fd = (loss(params, plus) - loss(params, minus)) / (2 * h)
            else:
                fd = (loss({**params, name: plus}, z) - loss({**params, name: minus}, z)) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-7))
    return worst


def check_gradients(n_configs=20, seed=0, h=1e-5):
    r = rngmod.stream(seed, "verify", "gradients")
    worst = 0.0
    done = 0
    while done < n_configs:
        spec = _fd_config(r)
        params = nn.init_params(spec, r, "glorot", np.float64)
        params = {k: v + 0.1 * r.standard_normal(v.shape) for k, v in params.items()}
        n = int(r.integers(1, 5))
        z = r.standard_normal((n, spec.input_dim))
        t = r.random(n)
        labels = r.integers(0, spec.num_classes, n) if spec.label_embed_dim else None
        if spec.activation == "relu":
            # a finite difference straddling a kink is not a derivative; redraw
            _, cache = nn.mlp_forward(spec, params, z, t, labels, return_cache=True)
            if min(np.abs(a).min() for a in cache["pre"][:-1]) < 1e-3:
                continue
        proj = r.standard_normal((n, spec.output_dim))
        worst = max(worst, gradient_error(spec, params, z, t, labels, proj, h))
        done += 1
    return [_le("gradients max rel err (float64, central FD)", worst, 1e-4)]


# ---------------------------------------------------------------- sampler sweep

def check_eta_sweep(n_seeds=5000, dim=2, seed=0, etas=(0.0, 0.1, 0.5)):
    """Backward-chain properties on a fixed anchor: collapse, marginal at t=0.5, monotone spread."""
    rows = []
    anchor = rngmod.stream(seed, "verify", "anchor").standard_normal(dim)
    anchors = np.tile(anchor, (n_seeds, 1))
    many = rngmod.stream(seed, "verify", "anchors").standard_normal((200, dim))
    errs = {}
    for T in (100, 200):
        out = divsde.run_chain(many, divsde.SamplerConfig(T, 0.0, seed)).samples
        errs[T] = np.linalg.norm(out - many, axis=1)
    rows.append(_le("eta=0 max distance to anchor (T=100)", errs[100].max(), 1e-2))
    rows.append(_le("eta=0 median error ratio T=200/T=100", np.median(errs[200]) / np.median(errs[100]), 0.5))
    res = divsde.run_chain(anchors, divsde.SamplerConfig(100, 0.1, seed), record=(0.5,))
    cov = np.cov(res.states[0.5], rowvar=False)
    target = 0.1 ** 2 * 0.25
    rows.append(_le("chain covariance rel err at t=0.5", np.max(np.abs(cov - target * np.eye(dim))) / target, 0.05))
    stds, divs = [], []
    for eta in etas:
        out = divsde.run_chain(anchors, divsde.SamplerConfig(100, eta, seed)).samples
        stds.append(float(out.std(axis=0).mean()))
        divs.append(metrics.diversity(out, 200, np.random.default_rng(seed)))
    rows.append(Check("output std strictly increasing in eta", float(np.min(np.diff(stds))), 0.0,
                      bool(np.all(np.diff(stds) > 0)), f"stds={stds}"))
    rows.append(Check("diversity strictly increasing in eta", float(np.min(np.diff(divs))), 0.0,
                      bool(np.all(np.diff(divs) > 0)), f"diversity={divs}"))
    return rows


def run(which, seed=0):
    """Run one named check (or ``"all"``); returns ``(rows, passed)``."""
    table = {"prop2": check_prop2, "prop3": check_prop3, "ot": check_ot,
             "gradients": check_gradients, "eta-sweep": check_eta_sweep}
    names = CHECKS if which == "all" else (which,)
    if any(n not in table for n in names):
        raise ValueError(f"unknown check {which!r}; choose from {CHECKS + ('all',)}")
    rows = [row for n in names for row in table[n](seed=seed)]
    return rows, all(r.passed for r in rows)
