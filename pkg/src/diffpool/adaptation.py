"""Test-time adaptation: re-estimate a chosen subset of pooling parameters
per speaker against first-pass (or oracle) labels, then measure the effect.

The recipe is deliberately rigid: a fixed learning rate, a fixed number of
full passes, no learning-rate schedule and no max-norm constraint.  Only the
selected parameter groups move; everything else stays bit-identical to the
speaker-independent model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import SpeakerDataset
from .errors import ConfigError
from .network import Model, backward, forward
from .numeric import derive_seed, make_rng
from .training import evaluate, sgd_step

# Sample-count equivalent of one second of data, used to express adaptation
# budgets in seconds.
FRAMES_PER_SECOND = 100

ADAPT_SUBSETS = ("rho", "bias", "lhuc", "mu", "beta", "eta")

_SUBSET_TO_GROUP = {
    "rho": "rho",
    "bias": "biases",
    "lhuc": "lhuc",
    "mu": "mu",
    "beta": "beta",
    "eta": "eta",
}
_LP_ONLY = {"rho"}
_GAUSS_ONLY = {"mu", "beta", "eta"}


@dataclass(frozen=True)
class AdaptConfig:
    param_subset: tuple = ("rho",)
    label_source: str = "self"      # "self" (first-pass labels) or "oracle"
    lr: float = 0.8
    iterations: int = 3
    layers: tuple | None = None     # indices into the model's pooling layers; None = all
    batch_size: int = 256
    max_samples: int | None = None
    seconds: float | None = None
    data_fraction: float | None = None
    reps: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.param_subset:
            raise ConfigError("param_subset must not be empty")
        unknown = set(self.param_subset) - set(ADAPT_SUBSETS)
        if unknown:
            raise ConfigError(f"unknown adaptation subsets: {sorted(unknown)}")
        if self.label_source not in ("self", "oracle"):
            raise ConfigError("label_source must be 'self' or 'oracle'")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")

    def budget(self, available: int) -> int:
        """Number of adaptation samples to use out of `available`."""
        if self.max_samples is not None:
            n = self.max_samples
        elif self.seconds is not None:
            n = int(round(self.seconds * FRAMES_PER_SECOND))
        elif self.data_fraction is not None:
            n = int(round(self.data_fraction * available))
        else:
            n = available
        return max(0, min(n, available))


def adapt_selection(model: Model, cfg: AdaptConfig) -> frozenset:
    """Resolve the configured subset to concrete (layer, param) pairs."""
    pool_layers = model.pool_layer_indices()
    if not pool_layers:
        raise ConfigError("model has no pooling layers to adapt")
    kind = model.kind
    subset = set(cfg.param_subset)
    if kind == "lp" and subset & _GAUSS_ONLY:
        raise ConfigError(
            f"subsets {sorted(subset & _GAUSS_ONLY)} require a gauss model, got lp"
        )
    if kind == "gauss" and subset & _LP_ONLY:
        raise ConfigError(
            f"subsets {sorted(subset & _LP_ONLY)} require an lp model, got gauss"
        )
    if cfg.layers is None:
        chosen = pool_layers
    else:
        bad = [i for i in cfg.layers if not 0 <= i < len(pool_layers)]
        if bad:
            raise ConfigError(
                f"pool layer indices {bad} out of range; model has {len(pool_layers)}"
            )
        chosen = [pool_layers[i] for i in cfg.layers]
    groups = {_SUBSET_TO_GROUP[s] for s in subset}
    selection = model.selection(groups, layers=chosen)
    if not selection:
        raise ConfigError(f"subset {sorted(subset)} selects no parameters")
    return selection


def first_pass_labels(model: Model, features) -> np.ndarray:
    """Labels from the model's own argmax decision (the unsupervised target)."""
    probs, _ = forward(model, features)
    return probs.argmax(axis=1).astype(np.int64)


def adapt_speaker(
    model: Model,
    features,
    labels,
    cfg: AdaptConfig,
    eval_set=None,
) -> tuple[Model, list[float]]:
    """Adapt a copy of the model on one speaker's data.

    With label_source "self" the targets come from the unadapted model's own
    first pass; the `labels` argument is ignored entirely in that case.
    If eval_set = (features, labels) is given, the frame error on it is
    recorded after every full pass and returned alongside the model.
    """
    selection = adapt_selection(model, cfg)
    features = np.asarray(features, dtype=np.float64)
    adapted = model.copy()
    if features.shape[0] == 0:
        return adapted, []
    if cfg.label_source == "self":
        targets = first_pass_labels(model, features)
    else:
        if labels is None:
            raise ConfigError("oracle adaptation needs ground-truth labels")
        targets = np.asarray(labels, dtype=np.int64)
        if targets.shape[0] != features.shape[0]:
            raise ConfigError("labels and features disagree on sample count")

    rng = make_rng(cfg.seed)
    n = features.shape[0]
    errors = []
    for _ in range(cfg.iterations):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            probs, trace = forward(adapted, features[idx])
            grads = backward(adapted, trace, targets[idx])
            sgd_step(adapted, grads, cfg.lr, max_norm_limit=None, selection=selection)
        if eval_set is not None:
            errors.append(evaluate(adapted, eval_set[0], eval_set[1]).frame_error)
    return adapted, errors


@dataclass
class SpeakerRun:
    speaker: str
    budget: str
    rep: int
    n_adapt_samples: int
    error_before: float
    iteration_errors: list

    @property
    def error_after(self) -> float:
        return self.iteration_errors[-1] if self.iteration_errors else self.error_before


@dataclass
class AdaptReport:
    """All per-speaker adaptation outcomes plus aggregate and parameter stats."""

    runs: list              # SpeakerRun entries
    aggregates: dict        # budget label -> {mean_error_before, mean_error_after}
    param_stats: list       # per (layer, parameter): dispersion and histograms
    config: dict = field(default_factory=dict)

    def mean_error_before(self) -> float:
        return float(np.mean([r.error_before for r in self.runs]))

    def mean_error_after(self, budget: str | None = None) -> float:
        picked = [r for r in self.runs if budget is None or r.budget == budget]
        return float(np.mean([r.error_after for r in picked]))

    def to_csv(self, path) -> None:
        """Rows of (speaker, sweep_point, seed, iteration, error); iteration 0
        carries the unadapted error."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["speaker", "sweep_point", "seed", "iteration", "error"])
            for run in self.runs:
                writer.writerow(
                    [run.speaker, run.budget, run.rep, 0, format(run.error_before, ".17g")]
                )
                for it, err in enumerate(run.iteration_errors, start=1):
                    writer.writerow(
                        [run.speaker, run.budget, run.rep, it, format(err, ".17g")]
                    )

    def to_json(self, path) -> None:
        from . import jsonio

        doc = {
            "config": self.config,
            "aggregates": self.aggregates,
            "param_stats": self.param_stats,
            "runs": [
                {
                    "speaker": r.speaker,
                    "budget": r.budget,
                    "rep": r.rep,
                    "n_adapt_samples": r.n_adapt_samples,
                    "error_before": r.error_before,
                    "iteration_errors": list(r.iteration_errors),
                }
                for r in self.runs
            ],
        }
        jsonio.dump(doc, path)


def _pool_param_values(model: Model) -> list[tuple[int, str, np.ndarray]]:
    """(layer index, parameter label, values) for the inspectable pooling
    parameters: effective orders p for lp models, mu and beta for gauss."""
    out = []
    for i in model.pool_layer_indices():
        layer = model.layers[i]
        if layer.config.kind == "lp_pool":
            out.append((i, "p", np.maximum(1.0, layer.params["rho"])))
        else:
            out.append((i, "mu", layer.params["mu"].copy()))
            out.append((i, "beta", layer.params["beta"].copy()))
    return out


def pool_param_histograms(
    before: Model, after_values: dict, n_bins: int = 20
) -> list[dict]:
    """Dispersion and histogram summary per (layer, parameter).

    `after_values` maps (layer index, label) to a flat array of adapted
    values pooled over speakers; histograms share bins between before and
    after so they can be overlaid directly.
    """
    stats = []
    for i, label, values in _pool_param_values(before):
        adapted = np.asarray(after_values.get((i, label), np.empty(0)))
        combined = np.concatenate([values, adapted]) if adapted.size else values
        lo, hi = float(combined.min()), float(combined.max())
        if hi - lo < 1e-6:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, n_bins + 1)
        count_before, _ = np.histogram(values, bins=edges)
        count_after, _ = np.histogram(adapted, bins=edges) if adapted.size else (None, None)
        stats.append({
            "layer": i,
            "param": label,
            "std_before": float(values.std()),
            "std_after": float(adapted.std()) if adapted.size else None,
            "bin_edges": edges.tolist(),
            "count_before": count_before.tolist(),
            "count_after": count_after.tolist() if count_after is not None else None,
        })
    return stats


def run_adaptation_experiment(
    si_model: Model,
    dataset: SpeakerDataset,
    cfg: AdaptConfig,
    sweep=None,
) -> AdaptReport:
    """Adapt every test speaker at each budget in the sweep and evaluate.

    A budget is a sample count (None means the full adapt split).  Each
    (speaker, budget) point is averaged over cfg.reps independent seeded
    subsamples.  Adapted pooling-parameter values from the largest budget
    are pooled across speakers for the dispersion/histogram summary.
    """
    speakers = dataset.speakers(split="adapt")
    if not speakers:
        raise ConfigError("dataset has no speakers with an adapt split")
    budgets = list(sweep) if sweep is not None else [None]
    runs: list[SpeakerRun] = []
    after_values: dict = {}
    largest = max(
        range(len(budgets)),
        key=lambda j: float("inf") if budgets[j] is None else budgets[j],
    )
    for speaker in speakers:
        x_adapt, y_adapt = dataset.arrays(speaker=speaker, split="adapt")
        x_test, y_test = dataset.arrays(speaker=speaker, split="test")
        if x_test.shape[0] == 0:
            raise ConfigError(f"speaker {speaker!r} has an empty test split")
        before = evaluate(si_model, x_test, y_test).frame_error
        for j, budget in enumerate(budgets):
            point_cfg = cfg if budget is None else replace(cfg, max_samples=int(budget))
            n = point_cfg.budget(x_adapt.shape[0])
            label = "full" if budget is None else str(int(budget))
            for rep in range(cfg.reps):
                sub_rng = make_rng(derive_seed(cfg.seed, "subsample", speaker, label, rep))
                idx = sub_rng.choice(x_adapt.shape[0], size=n, replace=False)
                run_cfg = replace(
                    point_cfg, seed=derive_seed(cfg.seed, "adapt", speaker, label, rep)
                )
                adapted, iter_errors = adapt_speaker(
                    si_model, x_adapt[idx], y_adapt[idx], run_cfg,
                    eval_set=(x_test, y_test),
                )
                runs.append(SpeakerRun(
                    speaker=speaker,
                    budget=label,
                    rep=rep,
                    n_adapt_samples=n,
                    error_before=before,
                    iteration_errors=iter_errors,
                ))
                if j == largest:
                    for i, plabel, values in _pool_param_values(adapted):
                        after_values.setdefault((i, plabel), []).append(values)

    pooled = {key: np.concatenate(vals) for key, vals in after_values.items()}
    aggregates = {}
    for j, budget in enumerate(budgets):
        label = "full" if budget is None else str(int(budget))
        picked = [r for r in runs if r.budget == label]
        aggregates[label] = {
            "mean_error_before": float(np.mean([r.error_before for r in picked])),
            "mean_error_after": float(np.mean([r.error_after for r in picked])),
        }
    report = AdaptReport(
        runs=runs,
        aggregates=aggregates,
        param_stats=pool_param_histograms(si_model, pooled),
        config={
            "param_subset": list(cfg.param_subset),
            "label_source": cfg.label_source,
            "lr": cfg.lr,
            "iterations": cfg.iterations,
            "layers": None if cfg.layers is None else list(cfg.layers),
            "batch_size": cfg.batch_size,
            "reps": cfg.reps,
            "seed": cfg.seed,
            "sweep": ["full" if b is None else int(b) for b in budgets],
        },
    )
    return report
