"""Semi-supervised variant over a pre-given clean/noisy split.

A shared trunk feeds two activated linear maps producing the noise-resistant
and noise-sensitive representations (both k-dimensional so the pseudo head can
consume either).  The main head classifies clean samples from the
noise-resistant representation.  A transition encoder combines the trunk
features, the current label estimate, and the detached noise-sensitive
representation; its output goes through the pseudo head toward the noisy
labels.  The pseudo head also receives the clean samples' noise-resistant
representation and must recover their clean labels, which is what keeps that
representation noise-resistant.  The noise-sensitive map trains through the
policy gradient alone.  Inference touches only trunk, noise-resistant map,
and main head.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import LabeledDataset
from .errors import DivergenceError, NonFiniteError, ValidationError
from .losses import policy_gradient_loss, reward
from .models import MLP, sample_gumbel, seeded_init_
from .training import RunReport, _accuracy, _spawn_seeds, _torch_generator

# Per-dataset weight presets from the semi-supervised experiments.
SEMI_PRESETS = {
    "default": (1.0, 0.1, 0.1),
    "cifar10n": (1.0, 0.1, 0.1),
    "cifar100n": (1.0, 1.0, 0.01),
}


@dataclass
class SemiConfig:
    """Weights and optimization settings for the semi-supervised variant."""

    alpha1: float = 1.0
    alpha2: float = 0.1
    alpha3: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    trunk_width: int = 16
    representation_dim: int = 64
    preset: Optional[str] = None

    def __post_init__(self) -> None:
        if self.preset is not None:
            if self.preset not in SEMI_PRESETS:
                raise ValidationError(f"unknown semi preset {self.preset!r}")
            self.alpha1, self.alpha2, self.alpha3 = SEMI_PRESETS[self.preset]

    def validate(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValidationError("semi loss weights must be >= 0")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("learning_rate, epochs, batch_size must be positive")


class SemiHeads(nn.Module):
    """Trunk plus the five heads of the semi-supervised framework.

    The noise-resistant and noise-sensitive representations share
    ``rep_dim`` dimensions: the pseudo head consumes both the transition
    encoder's output (shaped like the noise-sensitive representation) and the
    clean samples' noise-resistant representation."""

    def __init__(
        self, feature_shape, num_classes: int, width: int = 16, rep_dim: int = 64, seed: int = 0
    ):
        super().__init__()
        k = num_classes
        self.num_classes = k
        self.rep_dim = rep_dim
        trunk_dim = 128
        if len(feature_shape) == 3:
            c, h, w = feature_shape
            self.trunk = nn.Sequential(
                nn.Conv2d(c, width, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Conv2d(width, 2 * width, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Flatten(),
                nn.Linear(2 * width * (h // 4) * (w // 4), trunk_dim),
                nn.ReLU(),
            )
        else:
            self.trunk = nn.Sequential(
                MLP(int(np.prod(feature_shape)), (128,), trunk_dim), nn.ReLU()
            )
        self.x1_map = nn.Sequential(nn.Linear(trunk_dim, rep_dim), nn.ReLU())
        self.x2_map = nn.Sequential(nn.Linear(trunk_dim, rep_dim), nn.ReLU())
        self.main_head = nn.Linear(rep_dim, k)
        self.encoder = MLP(trunk_dim + k + rep_dim, (2 * rep_dim,), rep_dim)
        self.pseudo_head = nn.Linear(rep_dim, k)
        seeded_init_(self, seed)

    def inference_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.main_head(self.x1_map(self.trunk(x)))


def infer_semi(heads: SemiHeads, x: torch.Tensor) -> torch.Tensor:
    """Predicted labels through trunk, noise-resistant map, and main head only."""
    with torch.no_grad():
        return heads.inference_logits(x).argmax(dim=1)


@dataclass
class SemiLossParts:
    clean: torch.Tensor
    noisy: torch.Tensor
    policy: torch.Tensor
    decorrelation: torch.Tensor
    total: torch.Tensor


def semi_loss(
    heads: SemiHeads,
    batch_clean: tuple[torch.Tensor, torch.Tensor],
    batch_noisy: Optional[tuple[torch.Tensor, torch.Tensor]],
    config: SemiConfig,
    gumbel_seed=0,
) -> SemiLossParts:
    """Combined loss: clean CE + a1 * noisy-path CE + a2 * policy gradient +
    a3 * clean-sample decorrelation through the pseudo head.

    ``batch_noisy`` may be None only when a1 == a2 == 0 (pure supervised case).
    """
    x_c, y_c = batch_clean
    if x_c.shape[0] == 0:
        raise ValidationError("clean batch is empty")
    k = heads.num_classes

    h_c = heads.trunk(x_c)
    x1_c = heads.x1_map(h_c)
    loss_clean = nn.functional.cross_entropy(heads.main_head(x1_c), y_c)
    loss_dec = nn.functional.cross_entropy(heads.pseudo_head(x1_c), y_c)

    zero = torch.zeros((), dtype=loss_clean.dtype)
    loss_noisy, loss_pg = zero, zero
    if batch_noisy is not None and batch_noisy[0].shape[0] > 0:
        x_n, y_n = batch_noisy
        h_n = heads.trunk(x_n)
        x2_n = heads.x2_map(h_n)
        with torch.no_grad():
            y_guess = heads.main_head(heads.x1_map(h_n)).argmax(dim=1)
        encoded = heads.encoder(
            torch.cat([h_n, nn.functional.one_hot(y_guess, k).to(h_n.dtype), x2_n.detach()], dim=1)
        )
        pseudo_logits = heads.pseudo_head(encoded)
        loss_noisy = nn.functional.cross_entropy(pseudo_logits, y_n)
        if config.alpha2 > 0:
            per_ce = nn.functional.cross_entropy(pseudo_logits, y_n, reduction="none").detach()
            rewards = reward(per_ce)
            g = sample_gumbel(x2_n.shape, gumbel_seed, dtype=x2_n.dtype)
            actions = (x2_n.detach() + g).argmax(dim=1)
            log_pi = torch.log_softmax(x2_n, dim=-1).gather(1, actions.view(-1, 1)).squeeze(1)
            loss_pg = policy_gradient_loss(rewards, log_pi)
    elif config.alpha1 > 0 or config.alpha2 > 0:
        raise ValidationError("noisy batch required when alpha1 or alpha2 is nonzero")

    total = (
        loss_clean
        + config.alpha1 * loss_noisy
        + config.alpha2 * loss_pg
        + config.alpha3 * loss_dec
    )
    if not torch.isfinite(total):
        raise NonFiniteError("semi loss is not finite")
    return SemiLossParts(loss_clean, loss_noisy, loss_pg, loss_dec, total)


def semi_fit(
    clean_set: LabeledDataset,
    noisy_set: Optional[LabeledDataset],
    test_set: LabeledDataset,
    config: SemiConfig,
) -> tuple[SemiHeads, RunReport]:
    """Train the semi-supervised heads on a pre-given clean/noisy split."""
    config.validate()
    t_start = time.time()
    x_c = torch.from_numpy(clean_set.features.copy())
    y_c = torch.from_numpy(clean_set.clean_labels.copy())
    have_noisy = noisy_set is not None and len(noisy_set) > 0
    if not have_noisy and (config.alpha1 > 0 or config.alpha2 > 0):
        raise ValidationError("empty noisy set requires alpha1 == alpha2 == 0")
    if have_noisy:
        x_n = torch.from_numpy(noisy_set.features.copy())
        y_n = torch.from_numpy(noisy_set.noisy_labels.copy())
    x_t = torch.from_numpy(test_set.features.copy())
    y_t = torch.from_numpy(test_set.clean_labels.copy())

    seeds = _spawn_seeds(config.seed, 3, salt="semi")
    heads = SemiHeads(
        clean_set.manifest.feature_shape,
        clean_set.num_classes,
        width=config.trunk_width,
        rep_dim=config.representation_dim,
        seed=seeds[0],
    )
    opt = torch.optim.Adam(heads.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(seeds[1])
    gumbel = _torch_generator(seeds[2])

    rows = []
    n_c = x_c.shape[0]
    for epoch in range(config.epochs):
        perm_c = shuffle_rng.permutation(n_c)
        perm_n = shuffle_rng.permutation(x_n.shape[0]) if have_noisy else None
        total = 0.0
        steps = 0
        try:
            for start in range(0, n_c, config.batch_size):
                idx_c = perm_c[start : start + config.batch_size]
                batch_noisy = None
                if have_noisy:
                    # Cycle noisy batches against the clean epoch.
                    n_n = perm_n.size
                    lo = (start // config.batch_size * config.batch_size) % n_n
                    idx_n = perm_n[lo : lo + config.batch_size]
                    if idx_n.size == 0:
                        idx_n = perm_n[:config.batch_size]
                    batch_noisy = (x_n[idx_n], y_n[idx_n])
                parts = semi_loss(heads, (x_c[idx_c], y_c[idx_c]), batch_noisy, config, gumbel)
                opt.zero_grad(set_to_none=True)
                parts.total.backward()
                opt.step()
                total += float(parts.total.detach())
                steps += 1
        except NonFiniteError as exc:
            raise DivergenceError(f"semi training diverged at epoch {epoch}: {exc}", epoch) from exc
        test_acc = _accuracy(infer_semi(heads, x_t), y_t)
        rows.append(
            {
                "epoch": epoch,
                "keep_ratio": 1.0,
                "loss_total": total / max(steps, 1),
                "loss_coteaching": 0.0,
                "loss_transition_ce": 0.0,
                "loss_policy": 0.0,
                "loss_decorrelation": 0.0,
                "selection_loss_0": total / max(steps, 1),
                "selection_loss_1": total / max(steps, 1),
                "train_accuracy": _accuracy(infer_semi(heads, x_c), y_c),
                "test_accuracy_0": test_acc,
                "test_accuracy_1": test_acc,
            }
        )
    report = RunReport(
        epoch_rows=rows,
        final_test_accuracy=rows[-1]["test_accuracy_0"],
        selected_twin=0,
        estimated_transition=None,
        config_snapshot=asdict(config),
        wall_clock_seconds=time.time() - t_start,
    )
    return heads, report
