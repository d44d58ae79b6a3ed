"""Layer stacks with named parameter groups, full forward/backward, and
model (de)serialization.

A model is an ordered list of layers.  Plain layers are affine maps plus an
elementwise activation; pooling layers are an affine map into P*K units
followed by an Lp or Gaussian pooling stage and an LHUC output scaling.
The LHUC scaling is present in every pooling layer but starts at the
identity (r = 0); it only moves when an adaptation run selects it.

Every parameter belongs to exactly one named group (weights, biases, rho,
mu, beta, eta, lhuc), which is the unit of selective freezing and of
test-time adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .errors import ConfigError, ContractViolation, DimensionError, ParseError
from .numeric import (
    ACTIVATIONS,
    activation_deriv_from_output,
    activation_forward,
    affine_forward,
    as_matrix,
    cross_entropy,
)
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

LAYER_KINDS = ("affine", "lp_pool", "gauss_pool")
PARAM_GROUPS = ("weights", "biases", "rho", "mu", "beta", "eta", "lhuc")

MODEL_FORMAT_VERSION = 1

# parameter name -> group name, per layer kind
_GROUP_OF = {
    "affine": {"W": "weights", "b": "biases"},
    "lp_pool": {"W": "weights", "b": "biases", "rho": "rho", "r": "lhuc"},
    "gauss_pool": {
        "W": "weights",
        "b": "biases",
        "mu": "mu",
        "beta": "beta",
        "eta": "eta",
        "r": "lhuc",
    },
}
# fixed parameter order used for flattening and serialization
_PARAM_ORDER = {
    "affine": ("W", "b"),
    "lp_pool": ("W", "b", "rho", "r"),
    "gauss_pool": ("W", "b", "mu", "beta", "eta", "r"),
}


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    in_dim: int
    out_dim: int | None = None      # affine layers
    num_pools: int | None = None    # pooling layers
    pool_size: int | None = None
    activation: str | None = None   # affine activation / pooling nonlinearity
    normalize: bool = False         # lp_pool only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1:
            raise ConfigError(f"in_dim must be >= 1, got {self.in_dim}")
        if self.kind == "affine":
            if self.out_dim is None or self.out_dim < 1:
                raise ConfigError("affine layer needs out_dim >= 1")
            if self.activation not in ACTIVATIONS:
                raise ConfigError(f"affine layer needs an activation from {ACTIVATIONS}")
        else:
            if self.num_pools is None or self.pool_size is None:
                raise ConfigError(f"{self.kind} layer needs num_pools and pool_size")
            if self.num_pools < 1 or self.pool_size < 1:
                raise ConfigError("num_pools and pool_size must be >= 1")
            if self.kind == "gauss_pool":
                if self.normalize:
                    raise ConfigError("normalize applies to lp_pool layers only")
                if self.activation not in (None, "tanh", "sigmoid"):
                    raise ConfigError("gauss_pool activation must be tanh or sigmoid")
            if self.kind == "lp_pool" and self.activation is not None:
                raise ConfigError("lp_pool layers take no activation")

    @property
    def output_dim(self) -> int:
        return self.out_dim if self.kind == "affine" else self.num_pools

    @property
    def affine_out(self) -> int:
        """Width of the affine stage feeding the layer's nonlinearity."""
        if self.kind == "affine":
            return self.out_dim
        return self.num_pools * self.pool_size

    def pool_spec(self) -> PoolSpec:
        return PoolSpec(self.pool_size, self.num_pools, self.normalize)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in_dim": self.in_dim}
        if self.kind == "affine":
            d["out_dim"] = self.out_dim
            d["activation"] = self.activation
        else:
            d["num_pools"] = self.num_pools
            d["pool_size"] = self.pool_size
            if self.kind == "lp_pool":
                d["normalize"] = self.normalize
            else:
                d["activation"] = self.activation or "tanh"
        return d


def validate_configs(configs: list[LayerConfig]) -> None:
    if not configs:
        raise ConfigError("model needs at least one layer")
    for prev, nxt in zip(configs, configs[1:]):
        if prev.output_dim != nxt.in_dim:
            raise ConfigError(
                f"layer dims do not chain: {prev.output_dim} -> {nxt.in_dim}"
            )
    last = configs[-1]
    if last.kind != "affine" or last.activation != "softmax":
        raise ConfigError("the final layer must be affine with softmax activation")
    for cfg in configs[:-1]:
        if cfg.kind == "affine" and cfg.activation == "softmax":
            raise ConfigError("softmax is allowed on the final layer only")


@dataclass(frozen=True)
class InitSpec:
    """Initial parameter values; weight matrices use fan-based uniform init."""

    rho0: float = 2.0
    mu_mean: float = 0.0
    mu_std: float = 1.0
    beta_mean: float = 1.0
    beta_std: float = 0.5
    eta0: float = 1.0


class Layer:
    def __init__(self, config: LayerConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def copy(self) -> "Layer":
        return Layer(self.config, {k: v.copy() for k, v in self.params.items()})


class Model:
    def __init__(self, layers: list[Layer], metadata: dict | None = None):
        self.layers = layers
        self.metadata = dict(metadata or {})
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def bump_version(self) -> None:
        self._version += 1

    @property
    def configs(self) -> list[LayerConfig]:
        return [layer.config for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].config.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].config.output_dim

    @property
    def kind(self) -> str:
        kinds = {layer.config.kind for layer in self.layers}
        if "lp_pool" in kinds:
            return "lp"
        if "gauss_pool" in kinds:
            return "gauss"
        return "dnn"

    def pool_layer_indices(self) -> list[int]:
        return [
            i for i, layer in enumerate(self.layers)
            if layer.config.kind in ("lp_pool", "gauss_pool")
        ]

    def copy(self) -> "Model":
        return Model([layer.copy() for layer in self.layers], dict(self.metadata))

    def param_items(self):
        """Yield (layer_index, param_name, group_name, array)."""
        for i, layer in enumerate(self.layers):
            groups = _GROUP_OF[layer.config.kind]
            for name in _PARAM_ORDER[layer.config.kind]:
                yield i, name, groups[name], layer.params[name]

    def selection(self, groups, layers=None) -> frozenset:
        """Set of (layer_index, param_name) pairs for the given group names,
        optionally restricted to the given layer indices."""
        groups = set(groups)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
        allowed = None if layers is None else set(layers)
        picked = set()
        for i, name, group, _ in self.param_items():
            if group in groups and (allowed is None or i in allowed):
                picked.add((i, name))
        return frozenset(picked)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, _, _, arr in self.param_items()])

    def set_flat_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64).ravel()
        offset = 0
        for _, _, _, arr in self.param_items():
            n = arr.size
            arr[...] = theta[offset:offset + n].reshape(arr.shape)
            offset += n
        if offset != theta.size:
            raise DimensionError(
                f"flat parameter vector has {theta.size} entries, model needs {offset}"
            )
        self.bump_version()


class Gradients:
    """Per-layer gradient arrays mirroring a model's parameter layout."""

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers

    @classmethod
    def zeros_like(cls, model: Model) -> "Gradients":
        return cls([
            {name: np.zeros_like(arr) for name, arr in layer.params.items()}
            for layer in model.layers
        ])

    def flat(self, model: Model) -> np.ndarray:
        return np.concatenate([
            self.layers[i][name].ravel() for i, name, _, _ in model.param_items()
        ])

    def all_finite(self) -> bool:
        return all(
            np.isfinite(arr).all() for layer in self.layers for arr in layer.values()
        )


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_model(
    configs: list[LayerConfig],
    rng: np.random.Generator,
    init: InitSpec | None = None,
    metadata: dict | None = None,
) -> Model:
    """Build a model with fresh parameters.

    Weights are fan-based uniform, biases zero.  Lp orders start at
    init.rho0, Gaussian means and precisions are sampled normally, pool
    amplitudes start at init.eta0 and LHUC offsets at zero (identity scale).
    The rng draw order is fixed (per layer: W, then pooling parameters), so
    a given seed always produces the same model.
    """
    init = init or InitSpec()
    validate_configs(configs)
    layers = []
    for cfg in configs:
        params: dict[str, np.ndarray] = {
            "W": _glorot_uniform(rng, cfg.in_dim, cfg.affine_out),
            "b": np.zeros(cfg.affine_out),
        }
        if cfg.kind == "lp_pool":
            params["rho"] = np.full(cfg.num_pools, float(init.rho0))
            params["r"] = np.zeros(cfg.num_pools)
        elif cfg.kind == "gauss_pool":
            params["mu"] = rng.normal(init.mu_mean, init.mu_std, cfg.num_pools)
            params["beta"] = rng.normal(init.beta_mean, init.beta_std, cfg.num_pools)
            params["eta"] = np.full(cfg.num_pools, float(init.eta0))
            params["r"] = np.zeros(cfg.num_pools)
        layers.append(Layer(cfg, params))
    return Model(layers, metadata)


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass, consumed by backward."""

    model_version: int
    inputs: list = field(default_factory=list)       # layer inputs
    affine_out: list = field(default_factory=list)   # pre-nonlinearity
    outputs: list = field(default_factory=list)      # layer outputs
    workspaces: list = field(default_factory=list)   # pooling workspaces or None
    pooled: list = field(default_factory=list)       # pooled values before LHUC
    probs: np.ndarray | None = None


def forward(model: Model, x) -> tuple[np.ndarray, ForwardTrace]:
    """Run the full stack; returns class probabilities and a backward trace."""
    x = as_matrix(x, "x")
    if x.shape[1] != model.in_dim:
        raise DimensionError(
            f"input has {x.shape[1]} columns, model expects {model.in_dim}"
        )
    if not np.isfinite(x).all():
        raise DimensionError("input contains non-finite values")
    trace = ForwardTrace(model_version=model.version)
    h = x
    for layer in model.layers:
        cfg = layer.config
        a = affine_forward(h, layer.params["W"], layer.params["b"])
        if cfg.kind == "affine":
            out = activation_forward(a, cfg.activation)
            ws, pooled = None, None
        elif cfg.kind == "lp_pool":
            pooled, ws = lp_forward(a, cfg.pool_spec(), LpPoolParams(layer.params["rho"]))
            out = lhuc_apply(pooled, LhucParams(layer.params["r"]))
        else:
            pooled, ws = gauss_forward(
                a,
                cfg.pool_spec(),
                GaussPoolParams(layer.params["mu"], layer.params["beta"], layer.params["eta"]),
                act=cfg.activation or "tanh",
            )
            out = lhuc_apply(pooled, LhucParams(layer.params["r"]))
        trace.inputs.append(h)
        trace.affine_out.append(a)
        trace.outputs.append(out)
        trace.workspaces.append(ws)
        trace.pooled.append(pooled)
        h = out
    trace.probs = h
    return h, trace


def backward(model: Model, trace: ForwardTrace, targets, frozen=()) -> Gradients:
    """Gradients of the mean cross-entropy loss for every parameter group.

    Groups named in `frozen` (strings, applying to all layers) or given as
    (layer_index, group) pairs are computed and then zeroed, so the returned
    structure always mirrors the model exactly.
    """
    if trace.model_version != model.version:
        raise ContractViolation(
            "stale trace: model parameters changed after the forward pass"
        )
    _, dlogits = cross_entropy(trace.probs, targets)
    grads = Gradients([{} for _ in model.layers])
    delta = dlogits  # gradient wrt the final affine pre-activation (fused)
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        cfg = layer.config
        x = trace.inputs[i]
        if cfg.kind == "affine":
            if i == len(model.layers) - 1:
                da = delta
            else:
                da = delta * activation_deriv_from_output(cfg.activation, trace.outputs[i])
        else:
            dpooled, dr = lhuc_backward(
                trace.pooled[i], LhucParams(layer.params["r"]), delta
            )
            if cfg.kind == "lp_pool":
                da, drho = lp_backward(trace.workspaces[i], dpooled)
                grads.layers[i]["rho"] = drho
            else:
                da, dmu, dbeta, deta = gauss_backward(trace.workspaces[i], dpooled)
                grads.layers[i]["mu"] = dmu
                grads.layers[i]["beta"] = dbeta
                grads.layers[i]["eta"] = deta
            grads.layers[i]["r"] = dr
        grads.layers[i]["W"] = x.T @ da
        grads.layers[i]["b"] = da.sum(axis=0)
        if i > 0:
            delta = da @ layer.params["W"].T
    _zero_frozen(model, grads, frozen)
    return grads


def _zero_frozen(model: Model, grads: Gradients, frozen) -> None:
    if not frozen:
        return
    group_names = {f for f in frozen if isinstance(f, str)}
    pairs = {f for f in frozen if not isinstance(f, str)}
    unknown = group_names - set(PARAM_GROUPS)
    if unknown:
        raise ConfigError(f"unknown frozen groups: {sorted(unknown)}")
    for i, name, group, _ in model.param_items():
        if group in group_names or (i, group) in pairs:
            grads.layers[i][name][...] = 0.0


def _params_to_nested(arr: np.ndarray):
    return arr.tolist()


def save_model(model: Model, path) -> None:
    params_by_group: dict[str, list] = {}
    for i, name, group, arr in model.param_items():
        params_by_group.setdefault(group, []).append(
            {"layer": i, "values": _params_to_nested(arr)}
        )
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_configs": [cfg.to_dict() for cfg in model.configs],
        "params_by_group": params_by_group,
        "metadata": model.metadata,
    }
    jsonio.dump(doc, path)


def _config_from_dict(d: dict, where: str) -> LayerConfig:
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    known = {"kind", "in_dim", "out_dim", "num_pools", "pool_size", "activation", "normalize"}
    extra = set(d) - known
    if extra:
        raise ParseError(f"{where}: unknown fields {sorted(extra)}")
    try:
        return LayerConfig(**d)
    except (ConfigError, TypeError) as exc:
        raise ParseError(f"{where}: {exc}") from exc


def load_model(path) -> Model:
    doc = jsonio.load(path)
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: model document must be an object")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ParseError(
            f"{path}: format_version: expected {MODEL_FORMAT_VERSION}, "
            f"got {doc.get('format_version')!r}"
        )
    raw_configs = doc.get("layer_configs")
    if not isinstance(raw_configs, list) or not raw_configs:
        raise ParseError(f"{path}: layer_configs: expected a non-empty list")
    configs = [
        _config_from_dict(c, f"{path}: layer_configs[{i}]") for i, c in enumerate(raw_configs)
    ]
    try:
        validate_configs(configs)
    except ConfigError as exc:
        raise ParseError(f"{path}: layer_configs: {exc}") from exc

    layers = [Layer(cfg, {}) for cfg in configs]
    groups = doc.get("params_by_group")
    if not isinstance(groups, dict):
        raise ParseError(f"{path}: params_by_group: expected an object")
    seen = set()
    for group, entries in groups.items():
        if group not in PARAM_GROUPS:
            raise ParseError(f"{path}: params_by_group.{group}: unknown group")
        if not isinstance(entries, list):
            raise ParseError(f"{path}: params_by_group.{group}: expected a list")
        for entry in entries:
            where = f"{path}: params_by_group.{group}"
            if not isinstance(entry, dict) or "layer" not in entry or "values" not in entry:
                raise ParseError(f"{where}: entries need 'layer' and 'values'")
            idx = entry["layer"]
            if not isinstance(idx, int) or not 0 <= idx < len(layers):
                raise ParseError(f"{where}: layer index {idx!r} out of range")
            cfg = configs[idx]
            name = _name_for_group(cfg, group, where)
            arr = np.asarray(entry["values"], dtype=np.float64)
            expected = _expected_shape(cfg, name)
            if arr.shape != expected:
                raise ParseError(
                    f"{where}[layer {idx}]: expected shape {expected}, got {arr.shape}"
                )
            if not np.isfinite(arr).all():
                raise ParseError(f"{where}[layer {idx}]: non-finite parameter values")
            layers[idx].params[name] = arr
            seen.add((idx, name))
    for i, cfg in enumerate(configs):
        for name in _PARAM_ORDER[cfg.kind]:
            if (i, name) not in seen:
                group = _GROUP_OF[cfg.kind][name]
                raise ParseError(
                    f"{path}: params_by_group.{group}: missing entry for layer {i}"
                )
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ParseError(f"{path}: metadata: expected an object")
    return Model(layers, metadata)


def _name_for_group(cfg: LayerConfig, group: str, where: str) -> str:
    for name, g in _GROUP_OF[cfg.kind].items():
        if g == group:
            return name
    raise ParseError(f"{where}: group does not exist on a {cfg.kind} layer")


def _expected_shape(cfg: LayerConfig, name: str) -> tuple:
    if name == "W":
        return (cfg.in_dim, cfg.affine_out)
    if name == "b":
        return (cfg.affine_out,)
    return (cfg.num_pools,)
