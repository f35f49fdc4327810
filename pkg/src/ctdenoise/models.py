"""The four learnable components and their forward operations.

* separation model: a bias-free 1x1 channel mixer (identity-initializable),
  so the noise-resistant component has the same shape as the input
* classifier: small CNN / MLP / compact ResNet, chosen by feature shape
* policy model: strided conv stack (images) or MLP (flat) emitting k outputs
  that serve both as the noise-sensitive component and as policy logits
* transition model: feed-forward net over a k-vector concatenated with k
  Gaussian noise dims

All stochastic forwards take an explicit seed or generator and are
reproducible; every forward checks its output for NaN/Inf.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, ValidationError

CHECKPOINT_FORMAT_VERSION = 1

SeedLike = Union[int, torch.Generator]


def as_generator(seed: SeedLike) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def require_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{name} produced NaN or Inf")
    return tensor


def _uniform_init_(weight: torch.Tensor, generator: torch.Generator, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    with torch.no_grad():
        weight.copy_((torch.rand(weight.shape, generator=generator) * 2 - 1) * bound)


def seeded_init_(module: nn.Module, seed: SeedLike) -> nn.Module:
    """Re-initialize all Linear/Conv2d parameters from an explicit seed."""
    gen = as_generator(seed)
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            _uniform_init_(layer.weight, gen, layer.in_features)
            if layer.bias is not None:
                _uniform_init_(layer.bias, gen, layer.in_features)
        elif isinstance(layer, nn.Conv2d):
            fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
            _uniform_init_(layer.weight, gen, fan_in)
            if layer.bias is not None:
                _uniform_init_(layer.bias, gen, fan_in)
    return module


def _is_image_shape(feature_shape: Sequence[int]) -> bool:
    return len(feature_shape) == 3


class SeparationModel(nn.Module):
    """Bias-free linear channel mixer: a 1x1 convolution over images, a plain
    linear map over flat features.  Linear by construction (additivity holds
    exactly up to float rounding)."""

    def __init__(self, feature_shape: Sequence[int], init: str = "identity", seed: SeedLike = 0):
        super().__init__()
        self.feature_shape = tuple(feature_shape)
        if _is_image_shape(feature_shape):
            c = feature_shape[0]
            self.map = nn.Conv2d(c, c, kernel_size=1, bias=False)
            eye = torch.eye(c).reshape(c, c, 1, 1)
        else:
            d = int(np.prod(feature_shape))
            self.map = nn.Linear(d, d, bias=False)
            eye = torch.eye(d)
        if init == "identity":
            with torch.no_grad():
                self.map.weight.copy_(eye)
        elif init == "random":
            gen = as_generator(seed)
            with torch.no_grad():
                noise = torch.randn(self.map.weight.shape, generator=gen) * 0.01
                self.map.weight.copy_(eye + noise)
        else:
            raise ValidationError(f"unknown separation init {init!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.feature_shape:
            raise ValidationError(
                f"input shape {tuple(x.shape[1:])} != expected {self.feature_shape}"
            )
        if isinstance(self.map, nn.Linear):
            flat = x.reshape(x.shape[0], -1)
            return self.map(flat).reshape(x.shape)
        return self.map(x)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.reshape(x.shape[0], -1))


class SmallConvNet(nn.Module):
    """Two conv blocks plus a two-layer head; the desk-scale image classifier."""

    def __init__(self, feature_shape: Sequence[int], num_classes: int, width: int = 16):
        super().__init__()
        c, h, w = feature_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        flat = 2 * width * (h // 4) * (w // 4)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(flat, 128), nn.ReLU(), nn.Linear(128, num_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.short = (
            nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            if stride != 1 or in_ch != out_ch
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.conv1(x))
        out = self.conv2(out)
        return torch.relu(out + self.short(x))


class SmallResNet(nn.Module):
    """Compact residual classifier; blocks_per_stage=(2,2,2,2) mirrors the
    classic 18-layer layout at reduced width."""

    def __init__(
        self,
        feature_shape: Sequence[int],
        num_classes: int,
        blocks_per_stage: Sequence[int] = (2, 2),
        base_width: int = 16,
    ):
        super().__init__()
        c = feature_shape[0]
        self.stem = nn.Conv2d(c, base_width, 3, padding=1, bias=False)
        stages = []
        in_ch = base_width
        for i, n_blocks in enumerate(blocks_per_stage):
            out_ch = base_width * (2**i)
            for b in range(n_blocks):
                stages.append(BasicBlock(in_ch, out_ch, stride=2 if (b == 0 and i > 0) else 1))
                in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.stem(x))
        h = self.stages(h)
        return self.fc(self.pool(h).flatten(1))


def make_classifier(
    feature_shape: Sequence[int],
    num_classes: int,
    arch: str = "auto",
    width: int = 16,
    hidden: Sequence[int] = (128, 128),
    seed: SeedLike = 0,
) -> nn.Module:
    """Classifier over the noise-resistant component, sized by feature shape."""
    if arch == "auto":
        arch = "small_cnn" if _is_image_shape(feature_shape) else "mlp"
    if arch == "small_cnn":
        model = SmallConvNet(feature_shape, num_classes, width=width)
    elif arch == "resnet":
        model = SmallResNet(feature_shape, num_classes, base_width=width)
    elif arch == "mlp":
        model = MLP(int(np.prod(feature_shape)), hidden, num_classes)
    else:
        raise ValidationError(f"unknown classifier arch {arch!r}")
    return seeded_init_(model, seed)


class PolicyModel(nn.Module):
    """Maps an instance to k policy logits, which double as the
    noise-sensitive component.  Images go through strided 3x3 convolutions
    (channels 32-64-128-256 by default); flat features through an MLP."""

    def __init__(
        self,
        feature_shape: Sequence[int],
        num_classes: int,
        channels: Sequence[int] = (32, 64, 128, 256),
        hidden: Sequence[int] = (128, 128),
        seed: SeedLike = 0,
    ):
        super().__init__()
        self.feature_shape = tuple(feature_shape)
        if _is_image_shape(feature_shape):
            layers: list[nn.Module] = []
            in_ch = feature_shape[0]
            for ch in channels:
                layers += [nn.Conv2d(in_ch, ch, 3, stride=2, padding=1), nn.ReLU()]
                in_ch = ch
            self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
            self.head = nn.Linear(in_ch, num_classes)
        else:
            self.body = MLP(int(np.prod(feature_shape)), hidden[:-1], hidden[-1])
            self.head = nn.Sequential(nn.ReLU(), nn.Linear(hidden[-1], num_classes))
        seeded_init_(self, seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


class TransitionModel(nn.Module):
    """Feed-forward net from concat(k-vector, k Gaussian dims) to k logits."""

    def __init__(self, num_classes: int, hidden_mult: int = 4, seed: SeedLike = 0):
        super().__init__()
        k = num_classes
        h = hidden_mult * k
        self.num_classes = k
        self.net = nn.Sequential(
            nn.Linear(2 * k, h), nn.ReLU(), nn.Linear(h, h), nn.ReLU(), nn.Linear(h, k)
        )
        seeded_init_(self, seed)

    def forward(self, vec_with_noise: torch.Tensor) -> torch.Tensor:
        return self.net(vec_with_noise)


@dataclass(frozen=True)
class MergeConfig:
    """Gumbel-Softmax merge of the label one-hot with the scaled noise-sensitive
    component."""

    beta: float = 0.2
    temperature: float = 1.0

    def validate(self) -> None:
        if self.beta < 0:
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")


def separate(g1: SeparationModel, x: torch.Tensor) -> torch.Tensor:
    """Noise-resistant component, same shape as the input."""
    return require_finite("separation", g1(x))


def classify(f: nn.Module, x1: torch.Tensor) -> torch.Tensor:
    """Class logits from the noise-resistant component."""
    return require_finite("classifier", f(x1))


def policy_forward(g2: PolicyModel, x: torch.Tensor) -> torch.Tensor:
    """Noise-sensitive component / policy logits, shape [batch, k]."""
    return require_finite("policy", g2(x))


def sample_gumbel(
    shape: Iterable[int], seed: SeedLike, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    gen = as_generator(seed)
    u = torch.rand(tuple(shape), generator=gen, dtype=dtype)
    eps = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u + eps) + eps)


def merge(
    y_onehot: torch.Tensor, x2: torch.Tensor, cfg: MergeConfig, seed: SeedLike
) -> torch.Tensor:
    """Gumbel-Softmax merge: softmax((y + beta * x2 + G) / temperature).

    Output rows lie on the probability simplex; fresh Gumbel noise per call,
    reproducible under the seed.  Differentiable in ``x2`` unless the caller
    detaches it.
    """
    cfg.validate()
    if y_onehot.shape != x2.shape:
        raise ValidationError(f"shape mismatch {tuple(y_onehot.shape)} vs {tuple(x2.shape)}")
    g = sample_gumbel(y_onehot.shape, seed, dtype=y_onehot.dtype)
    logits = (y_onehot + cfg.beta * x2 + g) / cfg.temperature
    return require_finite("merge", torch.softmax(logits, dim=-1))


def transition_forward(f_tran: TransitionModel, vec: torch.Tensor, seed: SeedLike) -> torch.Tensor:
    """Transition logits for a batch of k-vectors, with fresh Gaussian noise."""
    if vec.shape[-1] != f_tran.num_classes:
        raise ValidationError(
            f"expected {f_tran.num_classes}-vectors, got shape {tuple(vec.shape)}"
        )
    gen = as_generator(seed)
    z = torch.randn(vec.shape, generator=gen, dtype=vec.dtype)
    return require_finite("transition", f_tran(torch.cat([vec, z], dim=-1)))


def infer(g1: SeparationModel, f: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Predicted labels.  Deterministic: only the separation model and the
    classifier sit on this path, and no noise is drawn."""
    with torch.no_grad():
        return torch.argmax(classify(f, separate(g1, x)), dim=1)


def onehot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).to(dtype)


def save_checkpoint(path: str, components: dict[str, nn.Module]) -> None:
    """Versioned container: component name -> parameter arrays, bit-exact."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, list[list[int]]] = {}
    for name, module in components.items():
        shapes = []
        for i, p in enumerate(module.parameters()):
            arr = p.detach().cpu().numpy()
            arrays[f"{name}::{i}"] = arr
            shapes.append(list(arr.shape))
        meta[name] = shapes
    header = json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION, "components": meta})
    arrays["__meta__"] = np.frombuffer(header.encode("utf-8"), dtype=np.uint8).copy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str, components: dict[str, nn.Module]) -> None:
    """Restore parameters in place; shapes must match exactly."""
    with np.load(path) as archive:
        header = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint format_version {header.get('format_version')!r}"
            )
        meta = header["components"]
        for name, module in components.items():
            if name not in meta:
                raise ValidationError(f"checkpoint missing component {name!r}")
            params = list(module.parameters())
            if len(params) != len(meta[name]):
                raise ValidationError(
                    f"component {name!r}: checkpoint has {len(meta[name])} tensors, "
                    f"model has {len(params)}"
                )
            for i, p in enumerate(params):
                arr = archive[f"{name}::{i}"]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValidationError(
                        f"component {name!r} tensor {i}: shape {arr.shape} != {tuple(p.shape)}"
                    )
                with torch.no_grad():
                    p.copy_(torch.from_numpy(arr.copy()))
