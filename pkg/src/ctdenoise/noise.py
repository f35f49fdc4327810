"""Label corruption (symmetric / asymmetric / instance-dependent) and instance
perturbation.

Every corruption returns the noisy labels together with a
:class:`CorruptionRecord` holding the ground-truth per-instance transition
rows, so evaluation never has to re-derive how labels were flipped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import LabeledDataset
from .errors import MissingFileError, ValidationError

RECORD_FORMAT_VERSION = 1

# Per-instance flip-probability spread for instance-dependent noise.  Kept
# small so the requested mean rate dominates.
IDN_RATE_STD = 0.1


@dataclass(frozen=True)
class NoiseSpec:
    """How to corrupt labels: kind, target rate, and the RNG seed."""

    kind: str  # "SYM" | "ASYM" | "IDN"
    rate: float
    seed: int
    class_map: Optional[dict[int, int]] = None
    idn_feature_dim: Optional[int] = None

    def validate(self, k: int) -> None:
        if self.kind not in ("SYM", "ASYM", "IDN"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if not (0.0 <= self.rate < 1.0):
            raise ValidationError(f"rate must be in [0, 1), got {self.rate}")
        if self.kind == "ASYM":
            if self.class_map is None:
                raise ValidationError("ASYM noise requires a class_map")
            missing = set(range(k)) - set(self.class_map)
            if missing:
                raise ValidationError(f"class_map missing classes {sorted(missing)}")
            if all(self.class_map[c] == c for c in range(k)):
                raise ValidationError("class_map must move at least one class")


@dataclass
class CorruptionRecord:
    """Ground truth of one corruption run.

    ``shared_T`` (SYM/ASYM) is the k-by-k matrix applied to every instance;
    ``per_instance_rows`` (IDN) holds, per instance, the transition row of its
    clean class.  ``flip_mask`` marks instances whose label actually changed.
    """

    kind: str
    rate: float
    seed: int
    num_classes: int
    flip_mask: np.ndarray
    realized_rate: float
    shared_T: Optional[np.ndarray] = None
    per_instance_rows: Optional[np.ndarray] = None
    clean_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if (self.shared_T is None) == (self.per_instance_rows is None):
            raise ValidationError("record must carry exactly one of shared_T / per_instance_rows")
        rows = self.shared_T if self.shared_T is not None else self.per_instance_rows
        if np.any(rows < 0) or np.max(np.abs(rows.sum(axis=-1) - 1.0)) > 1e-9:
            raise ValidationError("transition rows must lie on the probability simplex")
        if abs(self.realized_rate - float(self.flip_mask.mean())) > 1e-12:
            raise ValidationError("realized_rate must equal mean(flip_mask)")

    def row_for(self, index: int) -> np.ndarray:
        """Transition row of instance ``index``'s clean class."""
        if self.per_instance_rows is not None:
            return self.per_instance_rows[index]
        return self.shared_T[self.clean_labels[index]]


def corrupt_symmetric(
    labels: np.ndarray, k: int, rate: float, seed: int
) -> tuple[np.ndarray, CorruptionRecord]:
    """Flip each label with probability ``rate`` to a uniform other class."""
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if not (0.0 <= rate < 1.0):
        raise ValidationError(f"rate must be in [0, 1), got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)

    flip = rng.random(labels.size) < rate
    # Uniform draw over the other k-1 classes: offset by 1..k-1 mod k.
    offsets = rng.integers(1, k, size=labels.size)
    noisy = labels.copy()
    noisy[flip] = (labels[flip] + offsets[flip]) % k

    T = np.full((k, k), rate / (k - 1))
    np.fill_diagonal(T, 1.0 - rate)
    record = CorruptionRecord(
        kind="SYM",
        rate=rate,
        seed=seed,
        num_classes=k,
        flip_mask=flip,
        realized_rate=float(flip.mean()),
        shared_T=T,
        clean_labels=labels.copy(),
    )
    return noisy, record


def corrupt_asymmetric(
    labels: np.ndarray, class_map: dict[int, int], rate: float, seed: int
) -> tuple[np.ndarray, CorruptionRecord]:
    """Flip class ``c`` to ``class_map[c]`` with probability ``rate``."""
    labels = np.asarray(labels, dtype=np.int64)
    k = int(max(max(class_map), max(class_map.values()), labels.max() if labels.size else 0)) + 1
    missing = set(range(k)) - set(class_map)
    if missing:
        raise ValidationError(f"class_map missing classes {sorted(missing)}")
    if not (0.0 <= rate < 1.0):
        raise ValidationError(f"rate must be in [0, 1), got {rate}")

    rng = np.random.default_rng(seed)
    mapped = np.array([class_map[c] for c in range(k)], dtype=np.int64)
    draw = rng.random(labels.size) < rate
    noisy = np.where(draw, mapped[labels], labels)
    flip = noisy != labels

    T = np.zeros((k, k))
    for c in range(k):
        T[c, c] += 1.0 - rate
        T[c, mapped[c]] += rate
    record = CorruptionRecord(
        kind="ASYM",
        rate=rate,
        seed=seed,
        num_classes=k,
        flip_mask=flip,
        realized_rate=float(flip.mean()),
        shared_T=T,
        clean_labels=labels.copy(),
    )
    return noisy, record


def corrupt_instance_dependent(
    features: np.ndarray,
    labels: np.ndarray,
    k: int,
    rate: float,
    seed: int,
    rate_std: float = IDN_RATE_STD,
) -> tuple[np.ndarray, CorruptionRecord]:
    """Instance-dependent corruption.

    Each instance gets a flip probability ``q = clip(rate + rate_std * t, 0, 1)``
    where ``t`` is a standardized random projection of its flattened features,
    so marginally ``q`` is a clipped Gaussian centered on ``rate`` while
    identical feature vectors always receive identical probabilities.  The
    off-diagonal mass is spread proportionally to softmaxed per-class random
    projections of the same features, and the noisy label is sampled from the
    resulting row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    flat = np.asarray(features, dtype=np.float64).reshape(labels.size, -1)
    n, d = flat.shape
    if d == 0:
        raise ValidationError("features must have at least one dimension")
    if not (0.0 <= rate < 1.0):
        raise ValidationError(f"rate must be in [0, 1), got {rate}")
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")

    rng = np.random.default_rng(seed)
    if rate == 0.0:
        q = np.zeros(n)
    else:
        v = rng.standard_normal(d)
        s = flat @ v
        scale = s.std()
        t = (s - s.mean()) / scale if scale > 1e-12 else np.zeros(n)
        q = np.clip(rate + rate_std * t, 0.0, 1.0)

    # Per-class projection matrices give each instance its own off-diagonal
    # score vector; the true class is excluded before the softmax.
    W = rng.standard_normal((k, d, k))
    rows = np.zeros((n, k))
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        scores = flat[members] @ W[c]
        scores[:, c] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        rows[members] = q[members, None] * p
        rows[members, c] = 1.0 - q[members]

    u = rng.random(n)
    cdf = np.cumsum(rows, axis=1)
    noisy = (u[:, None] < cdf).argmax(axis=1)
    flip = noisy != labels

    record = CorruptionRecord(
        kind="IDN",
        rate=rate,
        seed=seed,
        num_classes=k,
        flip_mask=flip,
        realized_rate=float(flip.mean()),
        per_instance_rows=rows,
        clean_labels=labels.copy(),
    )
    return noisy.astype(np.int64), record


def perturb_instances(features: np.ndarray, gamma: float, seed: int) -> np.ndarray:
    """Additive uniform perturbation ``X + gamma * U[0, 1)``, fresh per element."""
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    rng = np.random.default_rng(seed)
    noise = rng.random(features.shape, dtype=np.float32)
    return (features + np.float32(gamma) * noise).astype(np.float32)


def averaged_true_transition(
    record: CorruptionRecord, labels: np.ndarray
) -> tuple[np.ndarray, list[int]]:
    """Class-averaged ground-truth transition matrix.

    Row ``i`` averages the transition rows of all instances whose clean label
    is ``i``.  Classes with no instances get a NaN row and are returned in the
    ``undefined`` list rather than silently zeroed.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = record.num_classes
    result = np.full((k, k), np.nan)
    undefined = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            undefined.append(c)
            continue
        if record.per_instance_rows is not None:
            result[c] = record.per_instance_rows[members].mean(axis=0)
        else:
            result[c] = record.shared_T[c]
    return result, undefined


def apply_noise(dataset: LabeledDataset, spec: NoiseSpec) -> tuple[LabeledDataset, CorruptionRecord]:
    """Corrupt a dataset's clean labels according to ``spec``."""
    if dataset.clean_labels is None:
        raise ValidationError("dataset has no clean labels to corrupt")
    k = dataset.num_classes
    spec.validate(k)
    if spec.kind == "SYM":
        noisy, record = corrupt_symmetric(dataset.clean_labels, k, spec.rate, spec.seed)
    elif spec.kind == "ASYM":
        class_map = {int(c): int(v) for c, v in spec.class_map.items()}
        noisy, record = corrupt_asymmetric(dataset.clean_labels, class_map, spec.rate, spec.seed)
    else:
        noisy, record = corrupt_instance_dependent(
            dataset.features, dataset.clean_labels, k, spec.rate, spec.seed
        )
    return dataset.with_noisy_labels(noisy), record


def save_corruption_record(record: CorruptionRecord, out_dir: str, name: str) -> str:
    """Write the record as a JSON sidecar plus raw blobs; returns the JSON path."""
    os.makedirs(out_dir, exist_ok=True)
    mask_rel = f"{name}.flipmask.u8"
    record.flip_mask.astype(np.uint8).tofile(os.path.join(out_dir, mask_rel))
    doc = {
        "format_version": RECORD_FORMAT_VERSION,
        "kind": record.kind,
        "rate": record.rate,
        "seed": record.seed,
        "num_classes": record.num_classes,
        "num_examples": int(record.flip_mask.size),
        "realized_rate": record.realized_rate,
        "flip_mask_path": mask_rel,
        "shared_T": None if record.shared_T is None else record.shared_T.tolist(),
        "rows_path": None,
        "clean_label_path": None,
    }
    if record.per_instance_rows is not None:
        rows_rel = f"{name}.rows.f64"
        record.per_instance_rows.astype("<f8").tofile(os.path.join(out_dir, rows_rel))
        doc["rows_path"] = rows_rel
    if record.clean_labels is not None:
        clean_rel = f"{name}.clean.i32"
        record.clean_labels.astype("<i4").tofile(os.path.join(out_dir, clean_rel))
        doc["clean_label_path"] = clean_rel
    path = os.path.join(out_dir, f"{name}.record.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_corruption_record(path: str) -> CorruptionRecord:
    if not os.path.isfile(path):
        raise MissingFileError(f"corruption record not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != RECORD_FORMAT_VERSION:
        raise ValidationError(f"unsupported record format_version {doc.get('format_version')!r}")
    base = os.path.dirname(os.path.abspath(path))
    n = int(doc["num_examples"])
    k = int(doc["num_classes"])
    flip = np.fromfile(os.path.join(base, doc["flip_mask_path"]), dtype=np.uint8, count=n) > 0
    rows = None
    if doc["rows_path"] is not None:
        rows = np.fromfile(os.path.join(base, doc["rows_path"]), dtype="<f8").reshape(n, k)
    clean = None
    if doc["clean_label_path"] is not None:
        clean = np.fromfile(os.path.join(base, doc["clean_label_path"]), dtype="<i4").astype(np.int64)
    return CorruptionRecord(
        kind=doc["kind"],
        rate=float(doc["rate"]),
        seed=int(doc["seed"]),
        num_classes=k,
        flip_mask=flip,
        realized_rate=float(doc["realized_rate"]),
        shared_T=None if doc["shared_T"] is None else np.asarray(doc["shared_T"], dtype=np.float64),
        per_instance_rows=rows,
        clean_labels=clean,
    )
