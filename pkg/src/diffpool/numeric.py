"""Dense float64 numerics: affine maps, activations, loss, RNG, FD oracle.

Everything in the package runs in 64-bit floats; gradient checks at the
tolerances used in the test suite are not meaningful in single precision.
All functions here are pure and keep no global state.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DimensionError, OracleError

# The one RNG algorithm used everywhere.  PCG64 streams are reproducible
# across platforms for a fixed seed, which the experiment tooling relies on.
RNG_ALGORITHM = "PCG64"

ACTIVATIONS = ("sigmoid", "tanh", "relu", "softmax", "identity")

PROB_FLOOR = 1e-30  # clamp applied to probabilities before taking logs


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator for the given seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & (2**63 - 1)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Sub-stream generator for (seed, keys); stable across runs and platforms.

    String keys are hashed with SHA-256 so e.g. speaker ids can be used
    directly without coordinating integer namespaces.
    """
    entropy = [int(seed) & (2**63 - 1)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """A plain integer seed derived from (seed, keys)."""
    return int(derive_rng(seed, *keys).integers(2**63))


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got ndim={arr.ndim}")
    return arr


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name}: expected a 1-D array, got ndim={arr.ndim}")
    return arr


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function; saturates without overflow."""
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))  # exponent is always <= 0
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def softmax(a) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to one."""
    a = as_matrix(a, "logits")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activation_forward(a, kind: str) -> np.ndarray:
    """Apply an activation elementwise (row-wise for softmax)."""
    a = as_matrix(a, "pre-activation")
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "softmax":
        return softmax(a)
    if kind == "identity":
        return a.copy()
    raise DimensionError(f"unknown activation kind {kind!r}")


def activation_deriv_from_output(kind: str, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation wrt its pre-activation, from the output.

    Works for the elementwise kinds only; softmax gradients are fused with
    the cross-entropy loss and never needed in isolation.
    """
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        return (out > 0.0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(out)
    raise DimensionError(f"no standalone derivative for activation {kind!r}")


def affine_forward(x, W, b) -> np.ndarray:
    """out[n, j] = sum_i x[n, i] * W[i, j] + b[j]."""
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    b = as_vector(b, "b")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(
            f"affine: x has {x.shape[1]} columns but W has {W.shape[0]} rows"
        )
    if W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine: W has {W.shape[1]} columns but b has {b.shape[0]} entries"
        )
    return x @ W + b


def cross_entropy(probs, targets) -> tuple[float, np.ndarray]:
    """Mean negative log probability of the target class, plus the fused
    softmax+cross-entropy gradient wrt the logits.

    Probabilities are clamped to PROB_FLOOR before the log so a confident
    wrong prediction yields a large finite loss instead of inf.
    """
    probs = as_matrix(probs, "probs")
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"targets: expected shape ({probs.shape[0]},), got {targets.shape}"
        )
    targets = targets.astype(np.int64)
    n, n_classes = probs.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= n_classes:
        raise IndexError(
            f"target index out of range for {n_classes} classes: "
            f"[{targets.min()}, {targets.max()}]"
        )
    rows = np.arange(n)
    picked = np.maximum(probs[rows, targets], PROB_FLOOR)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad


def fd_gradient(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    This is the reference every analytic backward pass in the package is
    checked against, so it deliberately shares no code with them.
    """
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        f_up = float(f(up))
        f_down = float(f(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise OracleError(
                f"non-finite evaluation at coordinate {i}: f(+h)={f_up}, f(-h)={f_down}"
            )
        grad[i] = (f_up - f_down) / (2.0 * h)
    return grad
