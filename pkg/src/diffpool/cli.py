"""Command-line entry point wiring the library into reproducible experiments.

Every command echoes its fully-resolved configuration into the output
directory, and train/adapt/inspect write under a subdirectory named by a
hash of that configuration, so distinct runs never silently overwrite each
other.  Exit codes: 0 success, 1 numerical failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import jsonio
from .adaptation import AdaptConfig, run_adaptation_experiment
from .datagen import (
    ShiftSpec,
    gen_closed_region,
    gen_multispeaker,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, DiffpoolError, ParseError, TrainingError
from .gradcheck import OPS as GRADCHECK_OPS
from .gradcheck import TOLERANCE, run as run_gradcheck
from .network import (
    InitSpec,
    LayerConfig,
    Model,
    build_model,
    load_model,
    save_model,
)
from .numeric import make_rng
from .training import NewbobConfig, TrainConfig, split_train_valid, train

MODEL_KINDS = ("dnn", "lp", "gauss")


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _echo_config(out_dir: str, config: dict) -> None:
    jsonio.dump(config, os.path.join(out_dir, "resolved_config.json"))


def _hashed_out_dir(base: str, config: dict) -> str:
    path = os.path.join(base, jsonio.content_hash(config))
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- gen-data

def _cmd_gen_data(args) -> int:
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(
            f"output directory {args.out!r} is not empty; pass --force to overwrite"
        )
    if args.task == "closed-region":
        ds = gen_closed_region(
            n_per_class=args.n_per_class, noise=args.noise, seed=args.seed
        )
        config = {
            "task": args.task,
            "seed": args.seed,
            "n_per_class": args.n_per_class,
            "noise": args.noise,
        }
    else:
        shift = ShiftSpec(
            train_magnitude=args.train_shift,
            test_magnitude=args.test_shift,
            offset_scale=args.offset_scale,
        )
        ds = gen_multispeaker(
            n_speakers_train=args.train_speakers,
            n_speakers_test=args.test_speakers,
            n_per_speaker=args.n_per_speaker,
            dim=args.dim,
            n_classes=args.classes,
            shift=shift,
            seed=args.seed,
        )
        config = {
            "task": args.task,
            "seed": args.seed,
            "train_speakers": args.train_speakers,
            "test_speakers": args.test_speakers,
            "n_per_speaker": args.n_per_speaker,
            "dim": args.dim,
            "classes": args.classes,
            "train_shift": args.train_shift,
            "test_shift": args.test_shift,
            "offset_scale": args.offset_scale,
        }
    save_dataset(ds, args.out)
    _echo_config(args.out, config)
    m = ds.manifest
    print(f"wrote {m['n_samples']} samples to {args.out}")
    print(
        f"generator={m['generator']} seed={m['seed']} D={m['D']} "
        f"classes={m['n_classes']} speakers={len(ds.speakers())}"
    )
    return 0


# -------------------------------------------------------------------- train

_KIND_DEFAULTS = {
    "dnn": {"initial_lr": 0.008, "hidden": [32, 32], "activation": "sigmoid"},
    "lp": {"initial_lr": 0.008, "pools": [8, 8], "pool_size": 5, "normalize": False},
    "gauss": {"initial_lr": 0.08, "pools": [8, 8], "pool_size": 3},
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = jsonio.load(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return doc


def _resolve_train_config(args) -> dict:
    file_cfg = _load_config_file(args.config)
    model_cfg = dict(file_cfg.get("model", {}))
    train_cfg = dict(file_cfg.get("train", {}))
    defaults = _KIND_DEFAULTS[args.model]

    model_cfg.setdefault("kind", args.model)
    if model_cfg["kind"] != args.model:
        raise ConfigError(
            f"--model {args.model} conflicts with config kind {model_cfg['kind']!r}"
        )
    if args.model == "dnn":
        if args.hidden is not None:
            model_cfg["hidden"] = _parse_int_list(args.hidden)
        model_cfg.setdefault("hidden", defaults["hidden"])
        model_cfg.setdefault("activation", defaults["activation"])
    else:
        if args.pools is not None:
            model_cfg["pools"] = _parse_int_list(args.pools)
        if args.pool_size is not None:
            model_cfg["pool_size"] = args.pool_size
        model_cfg.setdefault("pools", defaults["pools"])
        model_cfg.setdefault("pool_size", defaults["pool_size"])
        if args.model == "lp":
            if args.normalize:
                model_cfg["normalize"] = True
            model_cfg.setdefault("normalize", defaults["normalize"])

    overrides = {
        "initial_lr": args.lr,
        "batch_size": args.batch_size,
        "max_epochs": args.max_epochs,
        "seed": args.seed,
        "valid_fraction": args.valid_fraction,
    }
    for key, value in overrides.items():
        if value is not None:
            train_cfg[key] = value
    train_cfg.setdefault("initial_lr", defaults["initial_lr"])
    train_cfg.setdefault("batch_size", 64)
    train_cfg.setdefault("max_epochs", 30)
    train_cfg.setdefault("seed", 1)
    train_cfg.setdefault("valid_fraction", 0.1)
    train_cfg.setdefault("max_norm_limit", 1.0)
    train_cfg.setdefault("momentum", 0.0)
    freeze = {"lhuc"}
    if args.freeze_rho or train_cfg.get("freeze_rho"):
        freeze.add("rho")
    train_cfg["freeze"] = sorted(freeze)
    train_cfg.pop("freeze_rho", None)
    return {"model": model_cfg, "train": train_cfg, "data": args.data}


def _layer_configs_from(model_cfg: dict, in_dim: int, n_classes: int) -> list[LayerConfig]:
    kind = model_cfg["kind"]
    configs = []
    width = in_dim
    if kind == "dnn":
        for h in model_cfg["hidden"]:
            configs.append(LayerConfig(
                kind="affine", in_dim=width, out_dim=int(h),
                activation=model_cfg.get("activation", "sigmoid"),
            ))
            width = int(h)
    else:
        layer_kind = "lp_pool" if kind == "lp" else "gauss_pool"
        for pools in model_cfg["pools"]:
            cfg = LayerConfig(
                kind=layer_kind,
                in_dim=width,
                num_pools=int(pools),
                pool_size=int(model_cfg["pool_size"]),
                normalize=bool(model_cfg.get("normalize", False)) if kind == "lp" else False,
                activation="tanh" if kind == "gauss" else None,
            )
            configs.append(cfg)
            width = int(pools)
    configs.append(LayerConfig(
        kind="affine", in_dim=width, out_dim=n_classes, activation="softmax"
    ))
    return configs


def _cmd_train(args) -> int:
    resolved = _resolve_train_config(args)
    ds = load_dataset(args.data)
    x_all, y_all = ds.arrays(split="train")
    if x_all.shape[0] == 0:
        raise ConfigError("dataset has no training split")
    tc = resolved["train"]
    train_set, valid_set = split_train_valid(
        x_all, y_all, tc["valid_fraction"], seed=tc["seed"]
    )
    configs = _layer_configs_from(resolved["model"], ds.dim, ds.n_classes)
    rng = make_rng(tc["seed"])
    model = build_model(configs, rng, InitSpec(), metadata={"seed": tc["seed"]})
    cfg = TrainConfig(
        initial_lr=tc["initial_lr"],
        batch_size=int(tc["batch_size"]),
        max_epochs=int(tc["max_epochs"]),
        newbob=NewbobConfig(),
        max_norm_limit=tc["max_norm_limit"],
        momentum=tc["momentum"],
        seed=int(tc["seed"]),
        freeze=tuple(tc["freeze"]),
    )
    best, report = train(model, train_set, valid_set, cfg)
    best.metadata["train_history"] = report.to_dict()

    out_dir = _hashed_out_dir(args.out, resolved)
    save_model(best, os.path.join(out_dir, "model.json"))
    report.to_csv(os.path.join(out_dir, "train_report.csv"))
    _echo_config(out_dir, resolved)
    print(f"trained {resolved['model']['kind']} model: "
          f"best valid error {report.best_valid_error:.4f} at epoch {report.best_epoch} "
          f"({report.stop_reason})")
    print(f"outputs in {out_dir}")
    return 0


# -------------------------------------------------------------------- adapt

def _cmd_adapt(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data)
    subset = tuple(s for s in args.subset.split(",") if s)
    layers = None if args.layers in (None, "all") else tuple(_parse_int_list(args.layers))
    sweep = None
    if args.sweep_samples is not None:
        sweep = _parse_int_list(args.sweep_samples)
    elif args.sweep_seconds is not None:
        from .adaptation import FRAMES_PER_SECOND

        sweep = [int(round(float(s) * FRAMES_PER_SECOND))
                 for s in args.sweep_seconds.split(",") if s]
    cfg = AdaptConfig(
        param_subset=subset,
        label_source=args.labels,
        lr=args.lr,
        iterations=args.iters,
        layers=layers,
        batch_size=args.batch_size,
        reps=args.reps,
        seed=args.seed,
    )
    resolved = {
        "model": args.model,
        "data": args.data,
        "subset": list(subset),
        "labels": args.labels,
        "lr": args.lr,
        "iters": args.iters,
        "layers": "all" if layers is None else list(layers),
        "batch_size": args.batch_size,
        "reps": args.reps,
        "seed": args.seed,
        "sweep": sweep,
    }
    report = run_adaptation_experiment(model, ds, cfg, sweep=sweep)

    out_dir = _hashed_out_dir(args.out, resolved)
    report.to_csv(os.path.join(out_dir, "adapt_report.csv"))
    report.to_json(os.path.join(out_dir, "adapt_report.json"))
    _echo_config(out_dir, resolved)

    # One adapted model per speaker: largest budget, first rep.
    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)
    budgets = report.config["sweep"]
    largest = "full" if "full" in [str(b) for b in budgets] else str(max(budgets))
    from .adaptation import adapt_speaker
    from dataclasses import replace as dc_replace
    from .numeric import derive_seed

    for speaker in ds.speakers(split="adapt"):
        xa, ya = ds.arrays(speaker=speaker, split="adapt")
        point_cfg = cfg if largest == "full" else dc_replace(cfg, max_samples=int(largest))
        n = point_cfg.budget(xa.shape[0])
        sub = make_rng(derive_seed(cfg.seed, "subsample", speaker, largest, 0))
        idx = sub.choice(xa.shape[0], size=n, replace=False)
        run_cfg = dc_replace(point_cfg, seed=derive_seed(cfg.seed, "adapt", speaker, largest, 0))
        adapted, _ = adapt_speaker(model, xa[idx], ya[idx], run_cfg)
        save_model(adapted, os.path.join(models_dir, f"{speaker}.json"))

    before = report.mean_error_before()
    for label, agg in report.aggregates.items():
        print(f"budget {label}: mean error {agg['mean_error_before']:.4f} -> "
              f"{agg['mean_error_after']:.4f}")
    print(f"outputs in {out_dir}")
    return 0


# ---------------------------------------------------------------- gradcheck

def _cmd_gradcheck(args) -> int:
    ok, worst = run_gradcheck(args.op, trials=args.trials, seed=args.seed)
    for key in sorted(worst):
        print(f"{args.op}.{key}: max relative error {worst[key]:.3e}")
    if not ok:
        failing = {k: v for k, v in worst.items() if v >= TOLERANCE}
        print(f"FAILED (tolerance {TOLERANCE:g}): {failing}", file=sys.stderr)
        return 1
    print(f"ok: all below {TOLERANCE:g}")
    return 0


# ------------------------------------------------------------------ inspect

def _inspectable_values(model: Model) -> dict[str, dict[int, np.ndarray]]:
    values: dict[str, dict[int, np.ndarray]] = {}
    for i in model.pool_layer_indices():
        layer = model.layers[i]
        if layer.config.kind == "lp_pool":
            values.setdefault("p", {})[i] = np.maximum(1.0, layer.params["rho"])
        else:
            values.setdefault("mu", {})[i] = layer.params["mu"]
            values.setdefault("beta", {})[i] = layer.params["beta"]
    if not values:
        raise ConfigError("model has no pooling layers to inspect")
    return values


def _cmd_inspect(args) -> int:
    model = load_model(args.model)
    after = load_model(args.model_after) if args.model_after else None
    if after is not None:
        if [c.to_dict() for c in model.configs] != [c.to_dict() for c in after.configs]:
            raise ConfigError("the two models have different architectures")
    resolved = {
        "model": args.model,
        "model_after": args.model_after,
        "bins": args.bins,
    }
    out_dir = _hashed_out_dir(args.out, resolved)
    _echo_config(out_dir, resolved)

    before_vals = _inspectable_values(model)
    after_vals = _inspectable_values(after) if after is not None else None
    for param, layers in before_vals.items():
        path = os.path.join(out_dir, f"histogram_{param}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer", "bin_low", "bin_high", "count_before", "count_after"])
            for layer_idx, vals in layers.items():
                pool = [vals]
                if after_vals is not None:
                    pool.append(after_vals[param][layer_idx])
                combined = np.concatenate(pool)
                lo, hi = float(combined.min()), float(combined.max())
                if hi - lo < 1e-6:
                    lo, hi = lo - 0.5, hi + 0.5
                edges = np.linspace(lo, hi, args.bins + 1)
                count_before, _ = np.histogram(vals, bins=edges)
                count_after = (
                    np.histogram(after_vals[param][layer_idx], bins=edges)[0]
                    if after_vals is not None else None
                )
                for b in range(args.bins):
                    writer.writerow([
                        layer_idx,
                        format(edges[b], ".17g"),
                        format(edges[b + 1], ".17g"),
                        int(count_before[b]),
                        "" if count_after is None else int(count_after[b]),
                    ])
        print(f"wrote {path}")
        if after is not None:
            for layer_idx, vals in layers.items():
                d_before = float(np.std(vals))
                d_after = float(np.std(after_vals[param][layer_idx]))
                print(f"{param} layer {layer_idx}: std {d_before:.4f} -> {d_after:.4f}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpool",
        description="Train, adapt and inspect networks with learnable pooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=["closed-region", "multispeaker"])
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--n-per-class", type=int, default=400)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--train-speakers", type=int, default=6)
    g.add_argument("--test-speakers", type=int, default=4)
    g.add_argument("--n-per-speaker", type=int, default=600)
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--train-shift", type=float, default=0.15)
    g.add_argument("--test-shift", type=float, default=0.45)
    g.add_argument("--offset-scale", type=float, default=0.5)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--model", required=True, choices=MODEL_KINDS)
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--max-epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--valid-fraction", type=float, default=None)
    t.add_argument("--pools", default=None, help="comma-separated pools per layer")
    t.add_argument("--pool-size", type=int, default=None)
    t.add_argument("--hidden", default=None, help="comma-separated widths (dnn)")
    t.add_argument("--normalize", action="store_true", help="divide lp pools by K")
    t.add_argument("--freeze-rho", action="store_true",
                   help="train with fixed pooling orders (adaptable later)")
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("adapt", help="adapt a trained model per test speaker")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--subset", required=True,
                   help="comma-separated parameter subsets, e.g. rho,lhuc")
    a.add_argument("--labels", choices=["self", "oracle"], default="self")
    a.add_argument("--lr", type=float, default=0.8)
    a.add_argument("--iters", type=int, default=3)
    a.add_argument("--layers", default="all")
    a.add_argument("--batch-size", type=int, default=256)
    a.add_argument("--reps", type=int, default=3)
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--sweep-samples", default=None)
    a.add_argument("--sweep-seconds", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_adapt)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--op", required=True, choices=GRADCHECK_OPS)
    c.add_argument("--trials", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    i = sub.add_parser("inspect", help="histogram pooling parameters of a model")
    i.add_argument("--model", required=True)
    i.add_argument("--model-after", default=None)
    i.add_argument("--bins", type=int, default=20)
    i.add_argument("--out", required=True)
    i.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError,) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except DiffpoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def app() -> None:
    raise SystemExit(main())
