"""Scalar training objectives and the confident-selection rule.

The decorrelation and transition losses are written in the standard
cross-entropy orientation (target distribution times log prediction): the
decorrelation term targets the uniform distribution, the transition term the
one-hot noisy label.  Rewards are a bounded, strictly decreasing function of
the per-instance transition cross-entropy and are treated as constants inside
the policy-gradient loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import EmptySelectionError, ValidationError

PROB_FLOOR = 1e-12

# Counts batches where a predicted probability had to be clamped to the floor
# before the log; exposed for diagnostics, reset via reset_clamp_events().
_clamp_events = 0


def clamp_events() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def _log_clamped(probs: torch.Tensor) -> torch.Tensor:
    global _clamp_events
    if bool((probs < PROB_FLOOR).any()):
        _clamp_events += 1
    return torch.log(probs.clamp_min(PROB_FLOOR))


@dataclass(frozen=True)
class LossWeights:
    """Scale factors for the transition-CE, policy-gradient, and decorrelation
    terms.  Paper-scale defaults are 0.1 each; under instance perturbation the
    policy weight drops to 0.01."""

    alpha1: float = 0.1
    alpha2: float = 0.1
    alpha3: float = 0.1

    def validate(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValidationError("loss weights must be >= 0")


@dataclass(frozen=True)
class SelectionSchedule:
    """Keep ratio r(t) = 1 - min(t / warmup_epochs, 1) * noise_rate_estimate,
    with t counted from the end of the full-batch warmup phase."""

    noise_rate_estimate: float
    warmup_epochs: int

    def validate(self) -> None:
        if not (0.0 <= self.noise_rate_estimate < 1.0):
            raise ValidationError(
                f"noise_rate_estimate must be in [0, 1), got {self.noise_rate_estimate}"
            )
        if self.warmup_epochs < 1:
            raise ValidationError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")

    def keep_ratio(self, t: int) -> float:
        self.validate()
        return 1.0 - min(t / self.warmup_epochs, 1.0) * self.noise_rate_estimate


def small_loss_select(per_example_losses: torch.Tensor, keep_ratio: float) -> torch.Tensor:
    """Indices of the ceil(keep_ratio * batch) smallest losses, ties broken by
    lower index, returned in ascending index order."""
    if per_example_losses.numel() == 0:
        raise EmptySelectionError("cannot select from an empty batch")
    if not (0.0 < keep_ratio <= 1.0):
        raise ValidationError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    n_keep = math.ceil(keep_ratio * per_example_losses.numel())
    order = torch.argsort(per_example_losses.detach(), stable=True)
    return torch.sort(order[:n_keep]).values


def coteaching_loss(
    losses_model1: torch.Tensor, losses_model2: torch.Tensor, selected: torch.Tensor
) -> torch.Tensor:
    """Mean over the confident set of the elementwise minimum of the twin losses."""
    if losses_model1.shape != losses_model2.shape:
        raise ValidationError("twin loss vectors must have the same length")
    if selected.numel() == 0:
        raise EmptySelectionError("confident set is empty")
    return torch.minimum(losses_model1[selected], losses_model2[selected]).mean()


def decorrelation_loss(predicted_dists: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of predicted distributions against the uniform target,
    averaged over the batch.  Minimum value log(k), attained exactly at
    uniform rows."""
    per_row = -_log_clamped(predicted_dists).mean(dim=-1)
    return per_row.mean()


def transition_ce_loss(
    predicted_noisy_dist: torch.Tensor, noisy_onehot: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy of the predicted noisy-label distribution against the
    one-hot noisy label, averaged over the batch."""
    if predicted_noisy_dist.shape != noisy_onehot.shape:
        raise ValidationError("prediction and target shapes differ")
    per_row = -(noisy_onehot * _log_clamped(predicted_noisy_dist)).sum(dim=-1)
    return per_row.mean()


def per_instance_transition_ce(
    predicted_noisy_dist: torch.Tensor, noisy_labels: torch.Tensor
) -> torch.Tensor:
    """Unreduced transition cross-entropy, one value per instance."""
    picked = predicted_noisy_dist.gather(1, noisy_labels.view(-1, 1)).squeeze(1)
    return -_log_clamped(picked)


def reward(per_instance_ce: torch.Tensor) -> torch.Tensor:
    """R = 1 / (1 + ce): bounded in (0, 1], strictly decreasing in the
    cross-entropy."""
    ce = torch.as_tensor(per_instance_ce)
    if bool((ce < 0).any()):
        raise ValidationError("cross-entropy must be >= 0")
    return 1.0 / (1.0 + ce)


def policy_gradient_loss(rewards: torch.Tensor, action_log_probs: torch.Tensor) -> torch.Tensor:
    """Batch-mean REINFORCE loss; rewards are constants (detached)."""
    if rewards.shape != action_log_probs.shape:
        raise ValidationError("rewards and log-probs must have the same length")
    if not torch.isfinite(action_log_probs).all():
        raise ValidationError("action log-probs must be finite")
    return -(rewards.detach() * action_log_probs).sum() / rewards.numel()


@dataclass
class LossComponents:
    """The four scalar terms entering the total objective."""

    coteaching: torch.Tensor
    transition_ce: torch.Tensor
    policy: torch.Tensor
    decorrelation: torch.Tensor


def total_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Weighted sum: coteaching + a1 * transition_ce + a2 * policy + a3 * decorrelation."""
    weights.validate()
    return (
        components.coteaching
        + weights.alpha1 * components.transition_ce
        + weights.alpha2 * components.policy
        + weights.alpha3 * components.decorrelation
    )
