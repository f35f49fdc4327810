"""Experiment configuration: one structured YAML/JSON file per run.

Validation is fail-fast: unknown keys anywhere in the document are rejected,
referenced paths must exist, and mode-specific requirements are checked before
anything runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import yaml

from .errors import MissingFileError, ValidationError
from .losses import LossWeights, SelectionSchedule
from .models import MergeConfig
from .noise import NoiseSpec
from .semi import SemiConfig
from .training import TrainConfig

MODES = ("full", "ablate_policy", "ce_baseline", "coteaching_baseline", "semi")

# Policy-gradient weight drops an order of magnitude when instances are
# perturbed; mirrored automatically unless alpha2 is set explicitly.
ALPHA2_DEFAULT = 0.1
ALPHA2_PERTURBED_DEFAULT = 0.01


@dataclass
class SyntheticSpec:
    k: int = 10
    n_per_class: int = 200
    dim: int = 32
    separation: float = 4.0
    seed: int = 0


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True


@dataclass
class ExperimentConfig:
    """Everything one run needs: data source, corruption, training, outputs."""

    mode: str
    out_dir: str
    manifest_path: Optional[str] = None
    test_manifest_path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    split: Optional[SplitConfig] = None
    noise: Optional[NoiseSpec] = None
    perturb_gamma: float = 0.0
    train: Optional[TrainConfig] = None
    semi_clean_fraction: float = 0.5
    semi: Optional[SemiConfig] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        has_manifest = self.manifest_path is not None
        has_synthetic = self.synthetic is not None
        if has_manifest == has_synthetic:
            raise ValidationError("config needs exactly one of dataset.manifest / dataset.synthetic")
        if has_manifest:
            if not os.path.isfile(self.manifest_path):
                raise MissingFileError(f"dataset manifest not found: {self.manifest_path}")
            if self.test_manifest_path is not None and not os.path.isfile(self.test_manifest_path):
                raise MissingFileError(f"test manifest not found: {self.test_manifest_path}")
            if self.test_manifest_path is None and self.split is None:
                raise ValidationError("manifest dataset needs either test_manifest or split")
        if has_synthetic and self.split is None:
            raise ValidationError("synthetic dataset needs a split block")
        if self.perturb_gamma < 0:
            raise ValidationError(f"perturb_gamma must be >= 0, got {self.perturb_gamma}")
        if self.mode == "semi":
            if self.semi is None:
                raise ValidationError("mode semi requires a semi block")
            self.semi.validate()
            if not (0.0 < self.semi_clean_fraction < 1.0):
                raise ValidationError("semi_clean_fraction must be in (0, 1)")
        else:
            if self.train is None:
                raise ValidationError(f"mode {self.mode} requires a train block")
            self.train.validate()


def _require_keys(doc: dict, known: set[str], where: str) -> None:
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_noise(doc: dict) -> NoiseSpec:
    _require_keys(doc, {"kind", "rate", "seed", "class_map", "idn_feature_dim"}, "noise")
    class_map = doc.get("class_map")
    if class_map is not None:
        class_map = {int(c): int(v) for c, v in class_map.items()}
    return NoiseSpec(
        kind=doc["kind"],
        rate=float(doc["rate"]),
        seed=int(doc.get("seed", 0)),
        class_map=class_map,
        idn_feature_dim=doc.get("idn_feature_dim"),
    )


def _parse_train(doc: dict, noise_rate: float, perturbed: bool) -> TrainConfig:
    known = {
        "learning_rate",
        "epochs",
        "batch_size",
        "seed",
        "alpha1",
        "alpha2",
        "alpha3",
        "beta",
        "temperature",
        "noise_rate_estimate",
        "schedule_epochs",
        "warmup_epochs",
        "optimizer",
        "classifier_arch",
        "classifier_width",
        "reward_baseline",
        "transition_on_confident_only",
        "extract_samples",
    }
    _require_keys(doc, known, "train")
    alpha2_default = ALPHA2_PERTURBED_DEFAULT if perturbed else ALPHA2_DEFAULT
    weights = LossWeights(
        alpha1=float(doc.get("alpha1", 0.1)),
        alpha2=float(doc.get("alpha2", alpha2_default)),
        alpha3=float(doc.get("alpha3", 0.1)),
    )
    merge = MergeConfig(
        beta=float(doc.get("beta", 0.2)),
        temperature=float(doc.get("temperature", 1.0)),
    )
    rate_estimate = doc.get("noise_rate_estimate")
    schedule = SelectionSchedule(
        noise_rate_estimate=float(noise_rate if rate_estimate is None else rate_estimate),
        warmup_epochs=int(doc.get("schedule_epochs", 10)),
    )
    return TrainConfig(
        schedule=schedule,
        weights=weights,
        merge=merge,
        learning_rate=float(doc.get("learning_rate", 1e-3)),
        epochs=int(doc.get("epochs", 30)),
        batch_size=int(doc.get("batch_size", 128)),
        seed=int(doc.get("seed", 0)),
        optimizer=doc.get("optimizer", "adam"),
        warmup_epochs=int(doc.get("warmup_epochs", 5)),
        transition_on_confident_only=bool(doc.get("transition_on_confident_only", False)),
        reward_baseline=bool(doc.get("reward_baseline", False)),
        classifier_arch=doc.get("classifier_arch", "auto"),
        classifier_width=int(doc.get("classifier_width", 16)),
        extract_samples=int(doc.get("extract_samples", 256)),
    )


def _parse_semi(doc: dict) -> SemiConfig:
    known = {
        "alpha1",
        "alpha2",
        "alpha3",
        "learning_rate",
        "epochs",
        "batch_size",
        "seed",
        "trunk_width",
        "preset",
    }
    _require_keys(doc, known, "semi")
    return SemiConfig(
        alpha1=float(doc.get("alpha1", 1.0)),
        alpha2=float(doc.get("alpha2", 0.1)),
        alpha3=float(doc.get("alpha3", 0.1)),
        learning_rate=float(doc.get("learning_rate", 1e-3)),
        epochs=int(doc.get("epochs", 20)),
        batch_size=int(doc.get("batch_size", 128)),
        seed=int(doc.get("seed", 0)),
        trunk_width=int(doc.get("trunk_width", 16)),
        preset=doc.get("preset"),
    )


def parse_experiment_config(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a parsed document."""
    _require_keys(
        doc,
        {
            "mode",
            "out_dir",
            "dataset",
            "split",
            "noise",
            "perturb_gamma",
            "train",
            "semi",
            "semi_clean_fraction",
        },
        "config",
    )
    for key in ("mode", "out_dir", "dataset"):
        if key not in doc:
            raise ValidationError(f"config missing required key {key!r}")

    dataset = doc["dataset"]
    _require_keys(dataset, {"manifest", "test_manifest", "synthetic"}, "dataset")
    manifest_path = dataset.get("manifest")
    if manifest_path is not None:
        manifest_path = os.path.join(base_dir, manifest_path)
    test_manifest_path = dataset.get("test_manifest")
    if test_manifest_path is not None:
        test_manifest_path = os.path.join(base_dir, test_manifest_path)
    synthetic = None
    if dataset.get("synthetic") is not None:
        syn = dataset["synthetic"]
        _require_keys(syn, {"k", "n_per_class", "dim", "separation", "seed"}, "dataset.synthetic")
        synthetic = SyntheticSpec(
            k=int(syn.get("k", 10)),
            n_per_class=int(syn.get("n_per_class", 200)),
            dim=int(syn.get("dim", 32)),
            separation=float(syn.get("separation", 4.0)),
            seed=int(syn.get("seed", 0)),
        )

    split = None
    if doc.get("split") is not None:
        sp = doc["split"]
        _require_keys(sp, {"train_fraction", "seed", "stratified"}, "split")
        split = SplitConfig(
            train_fraction=float(sp.get("train_fraction", 0.8)),
            seed=int(sp.get("seed", 0)),
            stratified=bool(sp.get("stratified", True)),
        )

    noise = None if doc.get("noise") is None else _parse_noise(doc["noise"])
    gamma = float(doc.get("perturb_gamma") or 0.0)
    mode = doc["mode"]

    train = None
    semi = None
    if mode == "semi":
        semi = _parse_semi(doc.get("semi") or {})
    else:
        noise_rate = noise.rate if noise is not None else 0.0
        train = _parse_train(doc.get("train") or {}, noise_rate, perturbed=gamma > 0)
        if mode == "ablate_policy":
            train.ablate_policy = True
        if mode == "coteaching_baseline":
            train.weights = LossWeights(0.0, 0.0, 0.0)

    config = ExperimentConfig(
        mode=mode,
        out_dir=os.path.join(base_dir, doc["out_dir"]),
        manifest_path=manifest_path,
        test_manifest_path=test_manifest_path,
        synthetic=synthetic,
        split=split,
        noise=noise,
        perturb_gamma=gamma,
        train=train,
        semi_clean_fraction=float(doc.get("semi_clean_fraction", 0.5)),
        semi=semi,
    )
    config.validate()
    return config


def load_experiment_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise MissingFileError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a mapping")
    return parse_experiment_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))
