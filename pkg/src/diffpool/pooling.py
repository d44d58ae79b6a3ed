"""Learnable pooling kernels: Lp-norm pools, Gaussian-kernel pools, LHUC scaling.

A layer's pre-activations are split into P contiguous, non-overlapping pools
of K units each (pool k owns input columns [k*K, (k+1)*K)).  Each pool is
summarised into one output by either

  * an Lp norm whose order p is learnable per pool, or
  * a convex combination whose weights come from a Gaussian kernel with
    learnable mean and precision, applied to amplitude-scaled tanh units.

Every forward returns a workspace holding the interior quantities the
matching backward needs; both backwards were derived by hand and are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError
from .numeric import as_matrix, as_vector, sigmoid

# Magnitude floor applied to |a| in the Lp kernel.  The order gradient
# involves log|a_i|, so elements must be bounded away from zero; using the
# same floored magnitudes in the forward keeps the implemented function and
# its analytic gradient consistent with each other.
LP_EPS = 1e-8

# When p*log(max|a|) passes this bound, accumulate in the max-rescaled domain
# to avoid overflow/underflow of |a|^p.  Below it, the plain formula is used
# unchanged, so ordinary inputs are bit-identical to the naive evaluation.
_RESCALE_LOG_BOUND = 300.0

GAUSS_ACTIVATIONS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class PoolSpec:
    """Pool geometry: P pools of K units; optional division by K inside the norm."""

    pool_size: int
    num_pools: int
    normalize: bool = False

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.num_pools < 1:
            raise ConfigError(f"num_pools must be >= 1, got {self.num_pools}")

    @property
    def width(self) -> int:
        return self.pool_size * self.num_pools


@dataclass
class LpPoolParams:
    """Raw per-pool norm order; the effective order is max(1, rho).

    rho itself is never clamped, so SGD can push it below 1 and later
    recover; only the effective order and its gradient gate see the floor.
    """

    rho: np.ndarray

    def effective_order(self) -> np.ndarray:
        return np.maximum(1.0, np.asarray(self.rho, dtype=np.float64))


@dataclass
class GaussPoolParams:
    """Per-pool kernel mean, kernel precision and pool amplitude.

    No sign constraint is imposed on any field; in particular the precision
    may be driven negative by SGD, which simply inverts the weighting.
    """

    mu: np.ndarray
    beta: np.ndarray
    eta: np.ndarray


@dataclass
class LhucParams:
    """Raw per-pool output amplitudes; the applied scale is 2*sigmoid(r).

    r = 0 gives scale 1 exactly, so an un-adapted model is untouched.
    """

    r: np.ndarray


@dataclass
class PoolWorkspace:
    """Interior quantities cached by a pooling forward for its backward.

    Only the fields of the producing kind are populated; the rest stay None.
    """

    kind: str
    spec: PoolSpec
    a: np.ndarray          # pooled input, shape [batch, P, K]
    out: np.ndarray        # pooled output, shape [batch, P]
    # Lp fields
    eps: float | None = None
    amag: np.ndarray | None = None       # floored magnitudes
    powed: np.ndarray | None = None      # (amag/scale)**p
    powed_sum: np.ndarray | None = None  # sum of powed over the pool
    pool_sum: np.ndarray | None = None   # powed_sum, divided by K if normalized
    scale: np.ndarray | None = None      # per-pool rescale factor (1 normally)
    p: np.ndarray | None = None          # effective orders
    gate: np.ndarray | None = None       # True where rho > 1
    # Gauss fields
    act: str | None = None
    t: np.ndarray | None = None          # activation outputs
    z: np.ndarray | None = None          # amplitude-scaled activations
    v: np.ndarray | None = None          # shifted kernel values, max entry 1
    u: np.ndarray | None = None          # normalized weights, rows sum to 1
    mu: np.ndarray | None = None
    beta: np.ndarray | None = None
    eta: np.ndarray | None = None
    _lp_fields: tuple = field(
        default=("amag", "powed", "powed_sum", "pool_sum", "scale", "p", "gate"),
        repr=False,
    )
    _gauss_fields: tuple = field(default=("t", "z", "v", "u", "mu", "beta", "eta"), repr=False)

    def require(self, kind: str, grad_out) -> np.ndarray:
        if self.kind != kind:
            raise ContractViolation(f"workspace is for {self.kind!r}, not {kind!r}")
        needed = self._lp_fields if kind == "lp" else self._gauss_fields
        if any(getattr(self, name) is None for name in needed):
            raise ContractViolation("workspace is incomplete or has been invalidated")
        g = as_matrix(grad_out, "grad_out")
        if g.shape != self.out.shape:
            raise ContractViolation(
                f"grad_out shape {g.shape} does not match pooled output {self.out.shape}"
            )
        return g


def _pools(a, spec: PoolSpec) -> np.ndarray:
    a = as_matrix(a, "pool input")
    if a.shape[1] != spec.width:
        raise DimensionError(
            f"pool input has {a.shape[1]} columns, spec requires "
            f"{spec.num_pools} pools * {spec.pool_size} units = {spec.width}"
        )
    return a.reshape(a.shape[0], spec.num_pools, spec.pool_size)


def _check_pool_vector(x, spec: PoolSpec, name: str) -> np.ndarray:
    v = as_vector(x, name)
    if v.shape[0] != spec.num_pools:
        raise DimensionError(f"{name}: expected {spec.num_pools} entries, got {v.shape[0]}")
    return v


def lp_forward(
    a, spec: PoolSpec, params: LpPoolParams, eps: float = LP_EPS
) -> tuple[np.ndarray, PoolWorkspace]:
    """Pool by the Lp norm of floored magnitudes, one learnable order per pool.

    out[n, k] = (sum_i max(|a_i|, eps)**p_k) ** (1/p_k), with an optional 1/K
    factor inside the sum when the spec is normalized, and p_k = max(1, rho_k).
    """
    ap = _pools(a, spec)
    rho = _check_pool_vector(params.rho, spec, "rho")
    p = np.maximum(1.0, rho)
    pcol = p[None, :]

    amag = np.maximum(np.abs(ap), eps)
    amax = amag.max(axis=2)
    rescale = np.abs(pcol * np.log(amax)) > _RESCALE_LOG_BOUND
    scale = np.where(rescale, amax, 1.0)
    powed = (amag / scale[:, :, None]) ** p[None, :, None]
    powed_sum = powed.sum(axis=2)
    pool_sum = powed_sum / spec.pool_size if spec.normalize else powed_sum
    out = scale * pool_sum ** (1.0 / pcol)

    ws = PoolWorkspace(
        kind="lp",
        spec=spec,
        a=ap.copy(),
        out=out.copy(),
        eps=eps,
        amag=amag,
        powed=powed,
        powed_sum=powed_sum,
        pool_sum=pool_sum,
        scale=scale,
        p=p,
        gate=rho > 1.0,
    )
    return out, ws


def lp_backward(ws: PoolWorkspace, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of an Lp pooling forward wrt its inputs and raw orders.

    Per pool, with f the pooled value, S the (rescaled) sum of powered
    magnitudes and a~ the floored magnitudes:

      d f / d a_i   = a_i * a~_i**(p-2) * f / sum a~**p
      d f / d rho_k = f * (sum a~**p * log a~ / (p * S)
                           - log(pool sum) / p**2)   gated to 0 when rho <= 1

    Pools whose raw input is identically zero return exact zero gradients;
    there the floored forward is flat in a and the order gradient is
    numerically meaningless.
    """
    g = ws.require("lp", grad_out)
    p = ws.p
    pcol = p[None, :]

    zero_pool = np.abs(ws.a).max(axis=2) == 0.0

    coef = np.where(zero_pool, 0.0, ws.out * g / ws.powed_sum)
    grad_a = ws.a * (ws.powed / (ws.amag * ws.amag)) * coef[:, :, None]

    term1 = (ws.powed * np.log(ws.amag)).sum(axis=2) / (pcol * ws.powed_sum)
    log_pool_sum = pcol * np.log(ws.scale) + np.log(ws.pool_sum)
    dfdrho = ws.out * (term1 - log_pool_sum / pcol**2)
    dfdrho = np.where(zero_pool, 0.0, dfdrho)
    grad_rho = (dfdrho * g).sum(axis=0) * ws.gate

    batch = ws.a.shape[0]
    return grad_a.reshape(batch, ws.spec.width), grad_rho


def gauss_forward(
    a, spec: PoolSpec, params: GaussPoolParams, act: str = "tanh"
) -> tuple[np.ndarray, PoolWorkspace]:
    """Pool by a Gaussian-kernel weighted average of scaled activations.

    z_i = eta_k * act(a_i); each z_i is weighted by
    u_i = exp(-beta_k/2 * (z_i - mu_k)**2), normalized to sum to one within
    the pool, and out[n, k] = sum_i u_i * z_i.  The kernel is evaluated with
    the max exponent subtracted, so the weights stay on the simplex for any
    finite beta and the output is never NaN for finite inputs.
    """
    if act not in GAUSS_ACTIVATIONS:
        raise ConfigError(f"pooling activation must be one of {GAUSS_ACTIVATIONS}, got {act!r}")
    ap = _pools(a, spec)
    mu = _check_pool_vector(params.mu, spec, "mu")
    beta = _check_pool_vector(params.beta, spec, "beta")
    eta = _check_pool_vector(params.eta, spec, "eta")

    t = np.tanh(ap) if act == "tanh" else sigmoid(ap)
    z = eta[None, :, None] * t
    d = z - mu[None, :, None]
    e = -0.5 * beta[None, :, None] * d * d
    emax = e.max(axis=2, keepdims=True)
    finite = np.isfinite(emax)
    if finite.all():
        v = np.exp(e - emax)
    else:
        # Degenerate pools where every exponent overflowed: put all weight,
        # equally, on the entries attaining the max exponent.
        shifted = e - np.where(finite, emax, 0.0)
        shifted = np.where(finite, shifted, np.where(e == emax, 0.0, -np.inf))
        v = np.exp(shifted)
    u = v / v.sum(axis=2, keepdims=True)
    out = (u * z).sum(axis=2)

    ws = PoolWorkspace(
        kind="gauss",
        spec=spec,
        a=ap.copy(),
        out=out.copy(),
        act=act,
        t=t,
        z=z,
        v=v,
        u=u,
        mu=mu.copy(),
        beta=beta.copy(),
        eta=eta.copy(),
    )
    return out, ws


def gauss_backward(
    ws: PoolWorkspace, grad_out
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a Gaussian pooling forward wrt inputs, mean, precision
    and amplitude.

    Collapsing the simplex Jacobian (diagonal (1-u_i)/sum v, off-diagonal
    -u_i/sum v) against the diagonal kernel Jacobian -beta*(z_i-mu)*v_i
    gives, per unit, with f the pooled value:

      d f / d z_i  = u_i - u_i * beta * (z_i - mu) * (z_i - f)
      d f / d mu   =  sum_i u_i * beta * (z_i - mu) * (z_i - f)
      d f / d beta = -1/2 sum_i u_i * (z_i - mu)**2 * (z_i - f)
      d f / d eta  =  sum_i (d f / d z_i) * act(a_i)

    The mean gradient is the negated kernel-path part of the input gradient
    (the kernel is symmetric in z and mu).  Only the normalized weights u
    appear, so the max-exponent shift in the forward cancels exactly.
    Factors are ordered so u multiplies in before the (possibly huge)
    kernel distances; extreme mu or beta then yield zeros, never NaN.
    """
    g = ws.require("gauss", grad_out)
    z, u, t = ws.z, ws.u, ws.t
    fcol = ws.out[:, :, None]
    d = z - ws.mu[None, :, None]
    resid = z - fcol

    kernel_term = (u * ws.beta[None, :, None]) * d * resid
    dfdz = u - kernel_term

    if ws.act == "tanh":
        dact = 1.0 - t * t
    else:
        dact = t * (1.0 - t)

    zero_pool = np.abs(ws.a).max(axis=2) == 0.0
    keep = np.where(zero_pool, 0.0, 1.0)[:, :, None]

    grad_a = g[:, :, None] * dfdz * ws.eta[None, :, None] * dact * keep
    per_mu = kernel_term.sum(axis=2) * np.where(zero_pool, 0.0, 1.0)
    per_beta = -0.5 * (((u * d) * d) * resid).sum(axis=2) * np.where(zero_pool, 0.0, 1.0)
    per_eta = (dfdz * t).sum(axis=2) * np.where(zero_pool, 0.0, 1.0)

    grad_mu = (per_mu * g).sum(axis=0)
    grad_beta = (per_beta * g).sum(axis=0)
    grad_eta = (per_eta * g).sum(axis=0)

    batch = ws.a.shape[0]
    return grad_a.reshape(batch, ws.spec.width), grad_mu, grad_beta, grad_eta


def lhuc_amplitude(r) -> np.ndarray:
    """Applied output scale 2*sigmoid(r), bounded to (0, 2) and 1 at r = 0."""
    return 2.0 * sigmoid(np.asarray(r, dtype=np.float64))


def lhuc_apply(pooled, params: LhucParams) -> np.ndarray:
    pooled = as_matrix(pooled, "pooled")
    r = as_vector(params.r, "r")
    if r.shape[0] != pooled.shape[1]:
        raise DimensionError(
            f"lhuc: pooled has {pooled.shape[1]} columns but r has {r.shape[0]} entries"
        )
    return pooled * lhuc_amplitude(r)[None, :]


def lhuc_backward(
    pooled, params: LhucParams, grad_out
) -> tuple[np.ndarray, np.ndarray]:
    pooled = as_matrix(pooled, "pooled")
    g = as_matrix(grad_out, "grad_out")
    if g.shape != pooled.shape:
        raise DimensionError(f"lhuc: grad_out shape {g.shape} != pooled shape {pooled.shape}")
    r = as_vector(params.r, "r")
    s = sigmoid(r)
    grad_pooled = g * (2.0 * s)[None, :]
    grad_r = (g * pooled).sum(axis=0) * (2.0 * s * (1.0 - s))
    return grad_pooled, grad_r
