"""Finite-difference verification suites for every analytic backward pass.

Each suite samples seeded random configurations at smooth points (inputs
bounded away from the magnitude floor, orders bounded away from the
re-parametrisation kink, no near-ties among kernel-pooled values), runs the
analytic backward against a central-difference gradient of the matching
forward, and reports the worst relative error per parameter class.
"""

from __future__ import annotations

import numpy as np

from .network import InitSpec, LayerConfig, backward, build_model, forward
from .numeric import cross_entropy, fd_gradient, make_rng, derive_rng
from .pooling import (
    GaussPoolParams,
    LhucParams,
    LpPoolParams,
    PoolSpec,
    gauss_backward,
    gauss_forward,
    lhuc_apply,
    lhuc_backward,
    lp_backward,
    lp_forward,
)

FD_STEP = 1e-5
TOLERANCE = 1e-5

# Components smaller than this are compared on an absolute scale instead;
# below it the quotient would mostly measure finite-difference noise
# (truncation ~h^2 plus rounding ~eps/h) rather than the implementation.
REL_FLOOR = 1e-3

_K_CYCLE = (2, 3, 5)
_BATCH_CYCLE = (1, 4)

OPS = ("lp", "gauss", "lhuc", "model")


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


def _grid(trial: int) -> tuple[int, int]:
    return _K_CYCLE[trial % len(_K_CYCLE)], _BATCH_CYCLE[(trial // len(_K_CYCLE)) % 2]


def check_lp(trials: int = 200, seed: int = 0) -> dict[str, float]:
    worst = {"input": 0.0, "rho": 0.0}
    for trial in range(trials):
        rng = derive_rng(seed, "lp", trial)
        K, batch = _grid(trial)
        P = 1 + trial % 2
        spec = PoolSpec(K, P, normalize=trial % 3 == 0)
        signs = rng.choice([-1.0, 1.0], size=(batch, P * K))
        a = signs * rng.uniform(0.1, 2.0, size=(batch, P * K))
        rho = rng.uniform(1.05, 4.0, size=P)
        weights = rng.normal(size=(batch, P))

        out, ws = lp_forward(a, spec, LpPoolParams(rho))
        grad_a, grad_rho = lp_backward(ws, weights)

        n_a = a.size

        def f(theta):
            av = theta[:n_a].reshape(a.shape)
            rv = theta[n_a:]
            outv, _ = lp_forward(av, spec, LpPoolParams(rv))
            return float((outv * weights).sum())

        fd = fd_gradient(f, np.concatenate([a.ravel(), rho]), FD_STEP)
        worst["input"] = max(worst["input"], relative_error(grad_a.ravel(), fd[:n_a]))
        worst["rho"] = max(worst["rho"], relative_error(grad_rho, fd[n_a:]))
    return worst


def _sample_gauss_point(rng, batch, P, K):
    """Inputs whose pooled values are pairwise separated, off the tie locus."""
    eta = rng.choice([-1.0, 1.0], size=P) * rng.uniform(0.5, 1.5, size=P)
    mu = rng.normal(0.0, 1.0, size=P)
    beta = rng.choice([-1.0, 1.0], size=P, p=[0.25, 0.75]) * rng.uniform(0.2, 2.5, size=P)
    while True:
        a = rng.uniform(-2.0, 2.0, size=(batch, P * K))
        z = eta[None, :, None] * np.tanh(a.reshape(batch, P, K))
        zs = np.sort(z, axis=2)
        if K == 1 or np.diff(zs, axis=2).min() > 2e-3:
            return a, mu, beta, eta


def check_gauss(trials: int = 200, seed: int = 0) -> dict[str, float]:
    worst = {"input": 0.0, "mu": 0.0, "beta": 0.0, "eta": 0.0}
    for trial in range(trials):
        rng = derive_rng(seed, "gauss", trial)
        K, batch = _grid(trial)
        P = 1 + trial % 2
        spec = PoolSpec(K, P)
        a, mu, beta, eta = _sample_gauss_point(rng, batch, P, K)
        weights = rng.normal(size=(batch, P))

        out, ws = gauss_forward(a, spec, GaussPoolParams(mu, beta, eta))
        grad_a, grad_mu, grad_beta, grad_eta = gauss_backward(ws, weights)

        n_a = a.size
        slices = {
            "input": (0, n_a),
            "mu": (n_a, n_a + P),
            "beta": (n_a + P, n_a + 2 * P),
            "eta": (n_a + 2 * P, n_a + 3 * P),
        }

        def f(theta):
            av = theta[:n_a].reshape(a.shape)
            muv = theta[slices["mu"][0]:slices["mu"][1]]
            betav = theta[slices["beta"][0]:slices["beta"][1]]
            etav = theta[slices["eta"][0]:slices["eta"][1]]
            outv, _ = gauss_forward(av, spec, GaussPoolParams(muv, betav, etav))
            return float((outv * weights).sum())

        fd = fd_gradient(f, np.concatenate([a.ravel(), mu, beta, eta]), FD_STEP)
        analytic = {
            "input": grad_a.ravel(),
            "mu": grad_mu,
            "beta": grad_beta,
            "eta": grad_eta,
        }
        for key, (lo, hi) in slices.items():
            worst[key] = max(worst[key], relative_error(analytic[key], fd[lo:hi]))
    return worst


def check_lhuc(trials: int = 200, seed: int = 0) -> dict[str, float]:
    worst = {"pooled": 0.0, "r": 0.0}
    for trial in range(trials):
        rng = derive_rng(seed, "lhuc", trial)
        K, batch = _grid(trial)
        P = K  # reuse the grid for some variety in widths
        pooled = rng.normal(0.0, 1.5, size=(batch, P))
        r = rng.normal(0.0, 1.5, size=P)
        weights = rng.normal(size=(batch, P))

        grad_pooled, grad_r = lhuc_backward(pooled, LhucParams(r), weights)
        n_p = pooled.size

        def f(theta):
            pv = theta[:n_p].reshape(pooled.shape)
            rv = theta[n_p:]
            return float((lhuc_apply(pv, LhucParams(rv)) * weights).sum())

        fd = fd_gradient(f, np.concatenate([pooled.ravel(), r]), FD_STEP)
        worst["pooled"] = max(worst["pooled"], relative_error(grad_pooled.ravel(), fd[:n_p]))
        worst["r"] = max(worst["r"], relative_error(grad_r, fd[n_p:]))
    return worst


def _small_net_configs(kind: str, in_dim: int, n_classes: int) -> list[LayerConfig]:
    pool = "lp_pool" if kind == "lp" else "gauss_pool"
    return [
        LayerConfig(kind=pool, in_dim=in_dim, num_pools=2, pool_size=3),
        LayerConfig(kind=pool, in_dim=2, num_pools=2, pool_size=2),
        LayerConfig(kind="affine", in_dim=2, out_dim=n_classes, activation="softmax"),
    ]


def _smooth_model_inputs(model, rng, batch):
    """Resample inputs until every pooled pre-activation is off the kink."""
    for _ in range(200):
        x = rng.normal(0.0, 1.0, size=(batch, model.in_dim))
        _, trace = forward(model, x)
        ok = True
        for i in model.pool_layer_indices():
            if np.abs(trace.affine_out[i]).min() < 1e-3:
                ok = False
                break
            ws = trace.workspaces[i]
            if ws.kind == "gauss" and ws.spec.pool_size > 1:
                zs = np.sort(ws.z, axis=2)
                if np.diff(zs, axis=2).min() < 1e-3:
                    ok = False
                    break
        if ok:
            return x
    raise RuntimeError("could not sample a smooth model input")


def check_model(trials: int = 20, seed: int = 0) -> dict[str, float]:
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = derive_rng(seed, "model", trial)
        kind = "lp" if trial % 2 == 0 else "gauss"
        n_classes = 3
        model = build_model(_small_net_configs(kind, 6, n_classes), rng, InitSpec())
        if trial % 4 >= 2:
            # Exercise the LHUC path away from its identity point.
            for i in model.pool_layer_indices():
                model.layers[i].params["r"] = rng.normal(0.0, 1.0, model.layers[i].config.num_pools)
        batch = _BATCH_CYCLE[trial % 2]
        x = _smooth_model_inputs(model, rng, batch)
        y = rng.integers(0, n_classes, size=batch)

        probs, trace = forward(model, x)
        grads = backward(model, trace, y)
        theta0 = model.flat_params()

        def f(theta):
            probe = model.copy()
            probe.set_flat_params(theta)
            p, _ = forward(probe, x)
            loss, _ = cross_entropy(p, y)
            return loss

        fd = fd_gradient(f, theta0, FD_STEP)
        analytic = grads.flat(model)
        offset = 0
        for i, name, group, arr in model.param_items():
            n = arr.size
            key = f"{kind}.{group}"
            err = relative_error(analytic[offset:offset + n], fd[offset:offset + n])
            worst[key] = max(worst.get(key, 0.0), err)
            offset += n
    return worst


def run(op: str, trials: int = 200, seed: int = 0) -> tuple[bool, dict[str, float]]:
    """Run one suite; passes iff every class's worst error is below TOLERANCE."""
    if op == "lp":
        worst = check_lp(trials, seed)
    elif op == "gauss":
        worst = check_gauss(trials, seed)
    elif op == "lhuc":
        worst = check_lhuc(trials, seed)
    elif op == "model":
        worst = check_model(min(trials, 40), seed)
    else:
        raise ValueError(f"unknown gradcheck op {op!r}; choose from {OPS}")
    return all(v < TOLERANCE for v in worst.values()), worst
