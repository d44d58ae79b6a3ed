"""Deterministic synthetic dataset generators and the on-disk dataset format.

Two tasks are provided: a two-class closed-region problem (one class inside
an axis-aligned ellipse, the other in an elliptical annulus around it) and a
multi-speaker classification task where every speaker observes shared
class-conditional Gaussians through its own affine distortion.  Test
speakers get stronger distortions than training speakers, which opens the
speaker-independent accuracy gap the adaptation harness then closes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import jsonio
from .errors import ConfigError, ParseError
from .numeric import make_rng

DATASET_FORMAT_VERSION = 1
SPLITS = ("train", "adapt", "test")


@dataclass
class SpeakerDataset:
    features: np.ndarray       # [N, D] float64
    labels: np.ndarray         # [N] int64
    speaker_ids: np.ndarray    # [N] str
    splits: np.ndarray         # [N] str, each one of SPLITS
    manifest: dict

    def __post_init__(self):
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.speaker_ids) == len(self.splits) == n):
            raise ConfigError("dataset columns have inconsistent lengths")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise ConfigError(f"unknown split tags: {sorted(bad)}")
        if n and self.labels.max() >= self.manifest["n_classes"]:
            raise ConfigError("label exceeds n_classes")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_classes"])

    def mask(self, speaker: str | None = None, split: str | None = None) -> np.ndarray:
        m = np.ones(len(self.labels), dtype=bool)
        if speaker is not None:
            m &= self.speaker_ids == speaker
        if split is not None:
            m &= self.splits == split
        return m

    def arrays(self, speaker=None, split=None) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(speaker, split)
        return self.features[m], self.labels[m]

    def speakers(self, split: str | None = None) -> list[str]:
        m = self.mask(split=split)
        return sorted(np.unique(self.speaker_ids[m]).tolist())


@dataclass(frozen=True)
class ShiftSpec:
    """Per-speaker affine distortion strengths.

    Each speaker observes x -> A x + o with A = I + magnitude * E for a
    random E (rejected until the perturbation is safely contractive, so A is
    always invertible) and o a random offset.  class_jitter optionally moves
    each speaker's class means.
    """

    train_magnitude: float = 0.15
    test_magnitude: float = 0.45
    offset_scale: float = 0.5
    class_jitter: float = 0.0

    def __post_init__(self):
        for name in ("train_magnitude", "test_magnitude", "offset_scale", "class_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def gen_closed_region(
    n_per_class: int = 400,
    noise: float = 0.05,
    seed: int = 0,
    train_fraction: float = 0.75,
) -> SpeakerDataset:
    """Two classes only an enclosing boundary can separate.

    Class 0 fills the inside of an axis-aligned ellipse, class 1 an
    elliptical annulus around it, so no single line gets past roughly 3/4
    accuracy while one closed contour separates them completely (at small
    noise).  Single speaker; deterministic in the seed.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = make_rng(seed)
    center = np.array([0.25, -0.15])
    axes = np.array([1.6, 1.0])

    def ring(n, r_lo, r_hi):
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = np.sqrt(rng.uniform(r_lo**2, r_hi**2, n))
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return center + axes * pts * radius[:, None]

    inner = ring(n_per_class, 0.0, 0.82)
    outer = ring(n_per_class, 1.25, 2.05)
    features = np.vstack([inner, outer])
    features = features + noise * rng.normal(size=features.shape)
    labels = np.concatenate([
        np.zeros(n_per_class, dtype=np.int64),
        np.ones(n_per_class, dtype=np.int64),
    ])

    splits = np.empty(2 * n_per_class, dtype=object)
    n_train = int(round(train_fraction * n_per_class))
    for cls in (0, 1):
        idx = np.where(labels == cls)[0]
        perm = rng.permutation(len(idx))
        splits[idx[perm[:n_train]]] = "train"
        splits[idx[perm[n_train:]]] = "test"

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "generator": "closed_region",
        "seed": seed,
        "D": 2,
        "n_classes": 2,
        "n_samples": 2 * n_per_class,
        "params": {
            "n_per_class": n_per_class,
            "noise": noise,
            "train_fraction": train_fraction,
        },
    }
    return SpeakerDataset(
        features=features,
        labels=labels,
        speaker_ids=np.array(["spk0"] * (2 * n_per_class), dtype=object),
        splits=splits,
        manifest=manifest,
    )


def _distortion(rng, dim: int, magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    while True:
        E = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        if magnitude * np.linalg.norm(E, 2) < 0.95:
            break
    A = np.eye(dim) + magnitude * E
    return A, E


def gen_multispeaker(
    n_speakers_train: int = 6,
    n_speakers_test: int = 4,
    n_per_speaker: int = 600,
    dim: int = 10,
    n_classes: int = 4,
    shift: ShiftSpec | None = None,
    seed: int = 0,
    class_sep: float = 1.4,
    noise_std: float = 0.55,
    adapt_fraction: float = 0.5,
) -> SpeakerDataset:
    """Multi-speaker classification with per-speaker distribution shift.

    All speakers share class-conditional Gaussians; each observes them
    through its own affine distortion.  Training speakers' data is tagged
    "train"; each test speaker's data is split into disjoint "adapt" and
    "test" parts.  Labels are balanced exactly per speaker (up to one
    sample), so class marginals are uniform across speakers.
    """
    if dim < 2 or n_classes < 2:
        raise ConfigError("need dim >= 2 and n_classes >= 2")
    if n_speakers_train < 1 or n_speakers_test < 1 or n_per_speaker < 2:
        raise ConfigError("need at least one speaker of each kind and 2 samples each")
    if not 0.0 < adapt_fraction < 1.0:
        raise ConfigError("adapt_fraction must be in (0, 1)")
    shift = shift or ShiftSpec()
    rng = make_rng(seed)
    means = rng.normal(0.0, class_sep, size=(n_classes, dim))

    speakers = [(f"train{i:02d}", shift.train_magnitude, True) for i in range(n_speakers_train)]
    speakers += [(f"test{i:02d}", shift.test_magnitude, False) for i in range(n_speakers_test)]

    feats, labs, ids, splits = [], [], [], []
    for name, magnitude, is_train in speakers:
        A, _ = _distortion(rng, dim, magnitude)
        offset = magnitude * shift.offset_scale * rng.normal(size=dim)
        jitter = shift.class_jitter * rng.normal(size=(n_classes, dim))

        reps = -(-n_per_speaker // n_classes)  # ceil
        labels = np.tile(np.arange(n_classes), reps)[:n_per_speaker]
        labels = labels[rng.permutation(n_per_speaker)].astype(np.int64)
        base = means[labels] + jitter[labels] + noise_std * rng.normal(size=(n_per_speaker, dim))
        observed = base @ A.T + offset

        tags = np.empty(n_per_speaker, dtype=object)
        if is_train:
            tags[:] = "train"
        else:
            n_adapt = int(round(adapt_fraction * n_per_speaker))
            tags[:n_adapt] = "adapt"
            tags[n_adapt:] = "test"
        feats.append(observed)
        labs.append(labels)
        ids.extend([name] * n_per_speaker)
        splits.append(tags)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "generator": "multispeaker",
        "seed": seed,
        "D": dim,
        "n_classes": n_classes,
        "n_samples": n_per_speaker * (n_speakers_train + n_speakers_test),
        "params": {
            "n_speakers_train": n_speakers_train,
            "n_speakers_test": n_speakers_test,
            "n_per_speaker": n_per_speaker,
            "class_sep": class_sep,
            "noise_std": noise_std,
            "adapt_fraction": adapt_fraction,
            "shift": asdict(shift),
        },
    }
    return SpeakerDataset(
        features=np.vstack(feats),
        labels=np.concatenate(labs),
        speaker_ids=np.array(ids, dtype=object),
        splits=np.concatenate(splits),
        manifest=manifest,
    )


def best_line_accuracy(features, labels, n_lines: int = 10000, seed: int = 0) -> float:
    """Best accuracy any of n random lines achieves on 2-D labelled points.

    Brute-force reference for (non-)linear-separability claims; each line is
    a random direction with an offset drawn within the data's projection
    range, and either side may be called class 1.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[1] != 2:
        raise ConfigError("line oracle expects 2-D features")
    rng = make_rng(seed)
    theta = rng.uniform(0.0, np.pi, n_lines)
    w = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    proj = features @ w.T  # [N, n_lines]
    offsets = rng.uniform(proj.min(axis=0), proj.max(axis=0))
    pred = proj > offsets
    truth = (labels == 1)[:, None]
    acc = (pred == truth).mean(axis=0)
    return float(np.maximum(acc, 1.0 - acc).max())


def save_dataset(ds: SpeakerDataset, dirpath) -> None:
    """Write data.csv plus manifest.json; feature values keep 17 significant
    digits so the round-trip is exact."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = dict(ds.manifest)
    manifest["n_samples"] = int(len(ds.labels))
    jsonio.dump(manifest, os.path.join(dirpath, "manifest.json"))
    with open(os.path.join(dirpath, "data.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["speaker_id", "split", "label"] + [f"f{i}" for i in range(ds.dim)]
        )
        for i in range(len(ds.labels)):
            writer.writerow(
                [ds.speaker_ids[i], ds.splits[i], int(ds.labels[i])]
                + [format(v, ".17g") for v in ds.features[i]]
            )


def load_dataset(dirpath) -> SpeakerDataset:
    manifest_path = os.path.join(dirpath, "manifest.json")
    data_path = os.path.join(dirpath, "data.csv")
    if not os.path.exists(manifest_path) or not os.path.exists(data_path):
        raise ParseError(f"{dirpath}: expected manifest.json and data.csv")
    manifest = jsonio.load(manifest_path)
    for key in ("format_version", "D", "n_classes", "n_samples"):
        if key not in manifest:
            raise ParseError(f"{manifest_path}: missing field {key!r}")
    if manifest["format_version"] != DATASET_FORMAT_VERSION:
        raise ParseError(
            f"{manifest_path}: format_version: expected {DATASET_FORMAT_VERSION}, "
            f"got {manifest['format_version']!r}"
        )
    dim = int(manifest["D"])
    rows_ids, rows_splits, rows_labels, rows_feats = [], [], [], []
    with open(data_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected_header = ["speaker_id", "split", "label"] + [f"f{i}" for i in range(dim)]
        if header != expected_header:
            raise ParseError(f"{data_path}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 + dim:
                raise ParseError(f"{data_path}:{lineno}: expected {3 + dim} fields")
            rows_ids.append(row[0])
            if row[1] not in SPLITS:
                raise ParseError(f"{data_path}:{lineno}: split: unknown tag {row[1]!r}")
            rows_splits.append(row[1])
            try:
                label = int(row[2])
                feats = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ParseError(f"{data_path}:{lineno}: {exc}") from exc
            if not 0 <= label < manifest["n_classes"]:
                raise ParseError(f"{data_path}:{lineno}: label: {label} out of range")
            rows_labels.append(label)
            rows_feats.append(feats)
    if len(rows_labels) != manifest["n_samples"]:
        raise ParseError(
            f"{data_path}: n_samples: manifest says {manifest['n_samples']}, "
            f"file has {len(rows_labels)} rows"
        )
    return SpeakerDataset(
        features=np.array(rows_feats, dtype=np.float64).reshape(len(rows_labels), dim),
        labels=np.array(rows_labels, dtype=np.int64),
        speaker_ids=np.array(rows_ids, dtype=object),
        splits=np.array(rows_splits, dtype=object),
        manifest=manifest,
    )
