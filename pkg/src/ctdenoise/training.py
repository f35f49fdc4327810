"""End-to-end twin-network training.

Each step, per twin: the separation model produces the noise-resistant
component, the classifier scores it against the noisy labels, and the
confident set is the small-loss fraction of the batch under the current keep
ratio.  Confident instances keep their noisy label as the clean-label
estimate; the rest fall back to the classifier's argmax.  The label one-hot is
Gumbel-Softmax-merged with the detached noise-sensitive component, pushed
through the transition model toward the observed noisy label, and the policy
model is updated only by the reward-weighted log-likelihood of the sampled
merge action.  The transition model additionally sees the classifier's
distribution over the noise-resistant component and is regularized toward a
uniform response there.

The noise-sensitive component is detached on the transition path, so with a
zero policy weight the policy model's accumulated gradient is exactly zero.
Inference uses only the separation model and the classifier.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import LabeledDataset
from .errors import DivergenceError, NonFiniteError, ValidationError
from .losses import (
    LossComponents,
    LossWeights,
    SelectionSchedule,
    decorrelation_loss,
    per_instance_transition_ce,
    policy_gradient_loss,
    reward,
    small_loss_select,
    total_loss,
    transition_ce_loss,
)
from .models import (
    MergeConfig,
    PolicyModel,
    SeparationModel,
    TransitionModel,
    classify,
    infer,
    load_checkpoint,
    make_classifier,
    merge,
    onehot,
    policy_forward,
    save_checkpoint,
    separate,
    transition_forward,
)

REPORT_FORMAT_VERSION = 1

REPORT_COLUMNS = [
    "epoch",
    "keep_ratio",
    "loss_total",
    "loss_coteaching",
    "loss_transition_ce",
    "loss_policy",
    "loss_decorrelation",
    "selection_loss_0",
    "selection_loss_1",
    "train_accuracy",
    "test_accuracy_0",
    "test_accuracy_1",
]


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    Paper-scale defaults: Adam at 1e-3, loss weights 0.1, merge scale 0.2.
    ``ablate_policy`` reproduces the no-policy variant: the policy weight is
    forced to zero and the merge degenerates to the Gumbel-Softmax of the
    label one-hot alone.
    """

    schedule: SelectionSchedule
    weights: LossWeights = field(default_factory=LossWeights)
    merge: MergeConfig = field(default_factory=MergeConfig)
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    ablate_policy: bool = False
    optimizer: str = "adam"
    warmup_epochs: int = 5
    transition_on_confident_only: bool = False
    reward_baseline: bool = False
    classifier_arch: str = "auto"
    classifier_width: int = 16
    extract_samples: int = 256

    def validate(self) -> None:
        self.weights.validate()
        self.merge.validate()
        self.schedule.validate()
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ValidationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValidationError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if self.extract_samples < 1:
            raise ValidationError(f"extract_samples must be >= 1, got {self.extract_samples}")

    def effective_weights(self) -> LossWeights:
        if self.ablate_policy:
            return LossWeights(self.weights.alpha1, 0.0, self.weights.alpha3)
        return self.weights

    def keep_ratio(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            return 1.0
        return self.schedule.keep_ratio(epoch - self.warmup_epochs)

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["schedule"] = asdict(self.schedule)
        doc["weights"] = asdict(self.weights)
        doc["merge"] = asdict(self.merge)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in doc.items() if k in known}
        kwargs["schedule"] = SelectionSchedule(**doc["schedule"])
        kwargs["weights"] = LossWeights(**doc["weights"])
        kwargs["merge"] = MergeConfig(**doc["merge"])
        return cls(**kwargs)


@dataclass
class TwinComponents:
    """One twin: separation model, classifier, policy model, transition model."""

    g1: SeparationModel
    f: nn.Module
    g2: PolicyModel
    ftran: TransitionModel

    def parameters(self):
        for module in (self.g1, self.f, self.g2, self.ftran):
            yield from module.parameters()

    def as_dict(self, suffix: str) -> dict[str, nn.Module]:
        return {
            f"g1_{suffix}": self.g1,
            f"f_{suffix}": self.f,
            f"g2_{suffix}": self.g2,
            f"ftran_{suffix}": self.ftran,
        }


@dataclass
class TwinState:
    """Both twins plus their optimizers and the epoch counter."""

    twins: tuple[TwinComponents, TwinComponents]
    optimizers: tuple[torch.optim.Optimizer, torch.optim.Optimizer]
    config: TrainConfig
    num_classes: int
    feature_shape: tuple[int, ...]
    epoch: int = 0
    selected: int = 0


@dataclass
class RunRNGs:
    """Independent generator streams for the stochastic forwards."""

    gumbel: torch.Generator
    noise_x1: torch.Generator
    noise_merge: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRNGs":
        s = _spawn_seeds(seed, 3, salt="run-noise")
        return cls(
            gumbel=_torch_generator(s[0]),
            noise_x1=_torch_generator(s[1]),
            noise_merge=_torch_generator(s[2]),
        )


def _spawn_seeds(seed: int, n: int, salt: str) -> list[int]:
    ss = np.random.SeedSequence([seed, int.from_bytes(salt.encode(), "little") % (2**63)])
    return [int(s) & 0x7FFF_FFFF_FFFF_FFFF for s in ss.generate_state(n, dtype=np.uint64)]


def _torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def build_twin(feature_shape, num_classes: int, config: TrainConfig, seed: int) -> TwinComponents:
    seeds = _spawn_seeds(seed, 4, salt="twin-init")
    g1 = SeparationModel(feature_shape, init="identity")
    f = make_classifier(
        feature_shape,
        num_classes,
        arch=config.classifier_arch,
        width=config.classifier_width,
        seed=seeds[1],
    )
    g2 = PolicyModel(feature_shape, num_classes, seed=seeds[2])
    ftran = TransitionModel(num_classes, seed=seeds[3])
    return TwinComponents(g1=g1, f=f, g2=g2, ftran=ftran)


def init_twin_state(feature_shape, num_classes: int, config: TrainConfig) -> TwinState:
    config.validate()
    twin_seeds = _spawn_seeds(config.seed, 2, salt="twins")
    twins = (
        build_twin(feature_shape, num_classes, config, twin_seeds[0]),
        build_twin(feature_shape, num_classes, config, twin_seeds[1]),
    )
    opt_cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.AdamW
    optimizers = (
        opt_cls(list(twins[0].parameters()), lr=config.learning_rate),
        opt_cls(list(twins[1].parameters()), lr=config.learning_rate),
    )
    return TwinState(
        twins=twins,
        optimizers=optimizers,
        config=config,
        num_classes=num_classes,
        feature_shape=tuple(feature_shape),
    )


@dataclass
class StepStats:
    """Scalar outcome of one optimizer step."""

    loss_total: float
    loss_coteaching: float
    loss_transition_ce: float
    loss_policy: float
    loss_decorrelation: float
    keep_ratio: float
    num_selected: int
    selection_loss: tuple[float, float]


def train_step(
    state: TwinState,
    batch: tuple[torch.Tensor, torch.Tensor],
    config: Optional[TrainConfig] = None,
    rngs: Optional[RunRNGs] = None,
) -> StepStats:
    """One update of both twins on a batch of (features, noisy labels)."""
    config = config or state.config
    rngs = rngs or RunRNGs.from_seed(config.seed)
    x, noisy = batch
    k = state.num_classes
    weights = config.effective_weights()
    keep = config.keep_ratio(state.epoch)

    per_example = []
    logits_by_twin = []
    for twin in state.twins:
        x1 = separate(twin.g1, x)
        logits = classify(twin.f, x1)
        per_example.append(nn.functional.cross_entropy(logits, noisy, reduction="none"))
        logits_by_twin.append(logits)

    selected = small_loss_select(torch.minimum(per_example[0], per_example[1]).detach(), keep)
    # The optimized confident-set term is the symmetric mean, not the
    # elementwise min: backpropagating the min trains each example's currently
    # better twin only, which degenerates into twin specialization (the min
    # goes to zero while both twins stay incomplete).  losses.coteaching_loss
    # keeps the min form for reporting and analysis.
    loss_co = (per_example[0][selected].mean() + per_example[1][selected].mean()) / 2

    confident_mask = torch.zeros_like(noisy, dtype=torch.bool)
    confident_mask[selected] = True

    need_transition = weights.alpha1 > 0 or weights.alpha2 > 0
    need_policy = weights.alpha2 > 0 and not config.ablate_policy
    need_decor = weights.alpha3 > 0

    zero = torch.zeros((), dtype=per_example[0].dtype)
    loss_ce = zero.clone()
    loss_pg = zero.clone()
    loss_reg = zero.clone()

    for twin, logits in zip(state.twins, logits_by_twin):
        conf_labels = torch.where(confident_mask, noisy, logits.detach().argmax(dim=1))
        if need_transition:
            y_vec = onehot(conf_labels, k, dtype=logits.dtype)
            if config.ablate_policy:
                x2_for_merge = torch.zeros_like(y_vec)
            else:
                x2 = policy_forward(twin.g2, x)
                x2_for_merge = x2.detach()  # transition path never trains the policy
            merged = merge(y_vec, x2_for_merge, config.merge, rngs.gumbel)
            trans_logits = transition_forward(twin.ftran, merged, rngs.noise_merge)
            pred_noisy = torch.softmax(trans_logits, dim=-1)
            idx = selected if config.transition_on_confident_only else slice(None)
            loss_ce = loss_ce + transition_ce_loss(pred_noisy[idx], onehot(noisy[idx], k, dtype=logits.dtype))
            if need_policy:
                ce_i = per_instance_transition_ce(pred_noisy[idx], noisy[idx]).detach()
                rewards = reward(ce_i)
                if config.reward_baseline:
                    rewards = rewards - rewards.mean()
                actions = merged.detach().argmax(dim=1)[idx]
                log_pi = torch.log_softmax(x2, dim=-1)
                chosen = log_pi[idx].gather(1, actions.view(-1, 1)).squeeze(1)
                loss_pg = loss_pg + policy_gradient_loss(rewards, chosen)
        if need_decor:
            # The k-dim surrogate for the noise-resistant component is the raw
            # classifier logit vector.  Softmaxing it first would land in the
            # same region of input space as the merged simplex vectors, forcing
            # the transition model to choose between its uniform target here
            # and the noisy-label target there.
            decor_logits = transition_forward(twin.ftran, logits, rngs.noise_x1)
            loss_reg = loss_reg + decorrelation_loss(torch.softmax(decor_logits, dim=-1))

    components = LossComponents(
        coteaching=loss_co, transition_ce=loss_ce, policy=loss_pg, decorrelation=loss_reg
    )
    loss = total_loss(components, weights)
    if not torch.isfinite(loss):
        raise NonFiniteError("total loss is not finite")

    for opt in state.optimizers:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for opt in state.optimizers:
        opt.step()

    return StepStats(
        loss_total=float(loss.detach()),
        loss_coteaching=float(loss_co.detach()),
        loss_transition_ce=float(loss_ce.detach()),
        loss_policy=float(loss_pg.detach()),
        loss_decorrelation=float(loss_reg.detach()),
        keep_ratio=keep,
        num_selected=int(selected.numel()),
        selection_loss=(
            float(per_example[0][selected].mean().detach()),
            float(per_example[1][selected].mean().detach()),
        ),
    )


@dataclass
class RunReport:
    """Per-epoch metrics plus the run's final summary, serializable to CSV/JSON."""

    epoch_rows: list[dict]
    final_test_accuracy: float
    selected_twin: int
    estimated_transition: Optional[np.ndarray]
    config_snapshot: dict
    wall_clock_seconds: float

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for row in self.epoch_rows:
                writer.writerow(_format_cell(row[c]) for c in REPORT_COLUMNS)

    def to_json(self, path: str) -> None:
        doc = {
            "format_version": REPORT_FORMAT_VERSION,
            "final_test_accuracy": self.final_test_accuracy,
            "selected_twin": self.selected_twin,
            "estimated_transition": (
                None if self.estimated_transition is None else self.estimated_transition.tolist()
            ),
            "config": self.config_snapshot,
            "wall_clock_seconds": self.wall_clock_seconds,
            "epoch_rows": self.epoch_rows,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "RunReport":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise ValidationError(f"unsupported report format_version {doc.get('format_version')!r}")
        est = doc["estimated_transition"]
        return cls(
            epoch_rows=doc["epoch_rows"],
            final_test_accuracy=doc["final_test_accuracy"],
            selected_twin=doc["selected_twin"],
            estimated_transition=None if est is None else np.asarray(est),
            config_snapshot=doc["config"],
            wall_clock_seconds=doc["wall_clock_seconds"],
        )

    @staticmethod
    def read_csv_rows(path: str) -> list[dict]:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            return [{c: float(row[c]) for c in REPORT_COLUMNS} for row in reader]


def _format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _as_tensors(dataset: LabeledDataset, labels: str) -> tuple[torch.Tensor, torch.Tensor]:
    arr = dataset.clean_labels if labels == "clean" else dataset.noisy_labels
    if arr is None:
        raise ValidationError(f"dataset has no {labels} labels")
    return torch.from_numpy(dataset.features.copy()), torch.from_numpy(arr.copy())


def predict_labels(g1: SeparationModel, f: nn.Module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    out = []
    for start in range(0, x.shape[0], batch_size):
        out.append(infer(g1, f, x[start : start + batch_size]))
    return torch.cat(out)


def _accuracy(pred: torch.Tensor, target: torch.Tensor) -> float:
    return float((pred == target).float().mean())


def fit(
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    config: TrainConfig,
) -> tuple[TwinState, RunReport]:
    """Train both twins; report per-epoch metrics and keep the better twin.

    The train set must carry noisy labels; the test set stays clean and is
    scored each epoch with the inference path only.  Deterministic under
    (dataset, config, seed).  A non-finite loss aborts with the epoch recorded.
    """
    config.validate()
    t_start = time.time()
    x_train, y_noisy = _as_tensors(train_set, "noisy")
    x_test, y_test = _as_tensors(test_set, "clean")
    n = x_train.shape[0]

    state = init_twin_state(train_set.manifest.feature_shape, train_set.num_classes, config)
    rngs = RunRNGs.from_seed(config.seed)
    shuffle_rng = np.random.default_rng(_spawn_seeds(config.seed, 1, salt="shuffle")[0])

    rows: list[dict] = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        perm = shuffle_rng.permutation(n)
        loss_keys = (
            "loss_total",
            "loss_coteaching",
            "loss_transition_ce",
            "loss_policy",
            "loss_decorrelation",
        )
        sums = {c: 0.0 for c in loss_keys}
        seen = 0
        sel_losses = [0.0, 0.0]
        try:
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                stats = train_step(state, (x_train[idx], y_noisy[idx]), config, rngs)
                b = idx.size
                seen += b
                sums["loss_total"] += stats.loss_total * b
                sums["loss_coteaching"] += stats.loss_coteaching * b
                sums["loss_transition_ce"] += stats.loss_transition_ce * b
                sums["loss_policy"] += stats.loss_policy * b
                sums["loss_decorrelation"] += stats.loss_decorrelation * b
                sel_losses[0] += stats.selection_loss[0] * b
                sel_losses[1] += stats.selection_loss[1] * b
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", epoch) from exc

        sel_losses = [v / seen for v in sel_losses]
        better = int(np.argmin(sel_losses))
        train_pred = predict_labels(state.twins[better].g1, state.twins[better].f, x_train)
        row = {
            "epoch": epoch,
            "keep_ratio": config.keep_ratio(epoch),
            "loss_total": sums["loss_total"] / seen,
            "loss_coteaching": sums["loss_coteaching"] / seen,
            "loss_transition_ce": sums["loss_transition_ce"] / seen,
            "loss_policy": sums["loss_policy"] / seen,
            "loss_decorrelation": sums["loss_decorrelation"] / seen,
            "selection_loss_0": sel_losses[0],
            "selection_loss_1": sel_losses[1],
            "train_accuracy": _accuracy(train_pred, y_noisy),
            "test_accuracy_0": _accuracy(
                predict_labels(state.twins[0].g1, state.twins[0].f, x_test), y_test
            ),
            "test_accuracy_1": _accuracy(
                predict_labels(state.twins[1].g1, state.twins[1].f, x_test), y_test
            ),
        }
        rows.append(row)

    state.selected = int(np.argmin([rows[-1]["selection_loss_0"], rows[-1]["selection_loss_1"]]))
    final_acc = rows[-1][f"test_accuracy_{state.selected}"]
    estimated = extract_causal_transition(
        state,
        train_set.features,
        num_samples=min(config.extract_samples, n),
        seed=_spawn_seeds(config.seed, 1, salt="extract")[0],
    )
    report = RunReport(
        epoch_rows=rows,
        final_test_accuracy=final_acc,
        selected_twin=state.selected,
        estimated_transition=estimated,
        config_snapshot=config.to_json_dict(),
        wall_clock_seconds=time.time() - t_start,
    )
    return state, report


def extract_causal_transition(
    state: TwinState, reference_features: np.ndarray, num_samples: int, seed: int
) -> np.ndarray:
    """Estimated transition matrix from the trained transition model.

    Row ``y`` averages, over sampled reference instances and fresh noise, the
    softmaxed transition output for the merge of the one-hot ``y`` with the
    instance's noise-sensitive component.
    """
    if num_samples < 1:
        raise ValidationError(f"num_samples must be >= 1, got {num_samples}")
    k = state.num_classes
    twin = state.twins[state.selected]
    seeds = _spawn_seeds(seed, 3, salt="extract-draws")
    idx_rng = np.random.default_rng(seeds[0])
    gumbel = _torch_generator(seeds[1])
    gauss = _torch_generator(seeds[2])

    indices = idx_rng.integers(0, reference_features.shape[0], size=num_samples)
    x = torch.from_numpy(reference_features[indices].copy())
    rows = np.zeros((k, k))
    with torch.no_grad():
        if state.config.ablate_policy:
            x2 = torch.zeros((num_samples, k))
        else:
            x2 = policy_forward(twin.g2, x)
        for y in range(k):
            y_vec = onehot(torch.full((num_samples,), y, dtype=torch.long), k)
            merged = merge(y_vec, x2, state.config.merge, gumbel)
            logits = transition_forward(twin.ftran, merged, gauss)
            rows[y] = torch.softmax(logits, dim=-1).mean(dim=0).numpy()
    return rows


def save_twin_state(state: TwinState, path: str) -> None:
    components: dict[str, nn.Module] = {}
    for i, twin in enumerate(state.twins):
        components.update(twin.as_dict(str(i)))
    save_checkpoint(path, components)


def load_twin_state(state: TwinState, path: str) -> None:
    components: dict[str, nn.Module] = {}
    for i, twin in enumerate(state.twins):
        components.update(twin.as_dict(str(i)))
    load_checkpoint(path, components)


def fit_ce_baseline(
    train_set: LabeledDataset, test_set: LabeledDataset, config: TrainConfig
) -> tuple[nn.Module, RunReport]:
    """Plain cross-entropy on the noisy labels: one classifier on the raw
    instance, no separation, no selection.  The comparison baseline."""
    config.validate()
    t_start = time.time()
    x_train, y_noisy = _as_tensors(train_set, "noisy")
    x_test, y_test = _as_tensors(test_set, "clean")
    n = x_train.shape[0]
    seeds = _spawn_seeds(config.seed, 2, salt="ce-baseline")
    model = make_classifier(
        train_set.manifest.feature_shape,
        train_set.num_classes,
        arch=config.classifier_arch,
        width=config.classifier_width,
        seed=seeds[0],
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(seeds[1])

    rows = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits = classify(model, x_train[idx])
            loss = nn.functional.cross_entropy(logits, y_noisy[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"baseline diverged at epoch {epoch}", epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * idx.size
        with torch.no_grad():
            test_pred = torch.cat(
                [
                    classify(model, x_test[s : s + 1024]).argmax(dim=1)
                    for s in range(0, x_test.shape[0], 1024)
                ]
            )
            train_pred = torch.cat(
                [
                    classify(model, x_train[s : s + 1024]).argmax(dim=1)
                    for s in range(0, n, 1024)
                ]
            )
        acc = _accuracy(test_pred, y_test)
        rows.append(
            {
                "epoch": epoch,
                "keep_ratio": 1.0,
                "loss_total": total / n,
                "loss_coteaching": total / n,
                "loss_transition_ce": 0.0,
                "loss_policy": 0.0,
                "loss_decorrelation": 0.0,
                "selection_loss_0": total / n,
                "selection_loss_1": total / n,
                "train_accuracy": _accuracy(train_pred, y_noisy),
                "test_accuracy_0": acc,
                "test_accuracy_1": acc,
            }
        )
    report = RunReport(
        epoch_rows=rows,
        final_test_accuracy=rows[-1]["test_accuracy_0"],
        selected_twin=0,
        estimated_transition=None,
        config_snapshot=config.to_json_dict(),
        wall_clock_seconds=time.time() - t_start,
    )
    return model, report


def confusion_transition(
    model: nn.Module, features: np.ndarray, noisy_labels: np.ndarray, num_classes: int
) -> np.ndarray:
    """Row-normalized confusion of model predictions (as proxy clean labels)
    against the noisy labels; prediction-free rows fall back to uniform."""
    x = torch.from_numpy(features.copy())
    with torch.no_grad():
        preds = torch.cat(
            [
                classify(model, x[s : s + 1024]).argmax(dim=1)
                for s in range(0, x.shape[0], 1024)
            ]
        ).numpy()
    k = num_classes
    counts = np.zeros((k, k))
    np.add.at(counts, (preds, np.asarray(noisy_labels)), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    out = np.where(rows > 0, counts / np.maximum(rows, 1.0), 1.0 / k)
    return out
