"""V-Net style volumetric encoder-decoder and input perturbation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 16
    depth: int = 4
    dropout_rate: float = 0.5
    norm: str = "instance"

    @classmethod
    def tiny(cls, **overrides) -> "BackboneConfig":
        return cls(**{"base_width": 4, "depth": 2, **overrides})

    @classmethod
    def from_dict(cls, raw: dict) -> "BackboneConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class ResidualStage(nn.Module):
    """``n_convs`` 3x3x3 conv + norm + PReLU layers with an identity shortcut."""

    def __init__(self, channels: int, n_convs: int, norm: str, in_channels: Optional[int] = None):
        super().__init__()
        in_channels = in_channels or channels
        layers = []
        for i in range(n_convs):
            layers += [
                nn.Conv3d(in_channels if i == 0 else channels, channels, 3, padding=1),
                _norm(norm, channels),
                nn.PReLU(channels),
            ]
        self.body = nn.Sequential(*layers)
        self.shortcut = nn.Identity() if in_channels == channels else nn.Conv3d(in_channels, channels, 1)

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


class VNet(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        w, depth, norm = config.base_width, config.depth, config.norm
        widths = [w * 2**i for i in range(depth)]

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, width in enumerate(widths):
            in_ch = config.in_channels if i == 0 else width
            self.encoders.append(ResidualStage(width, min(i + 1, 3), norm, in_channels=in_ch))
            if i < depth - 1:
                self.downs.append(nn.Sequential(nn.Conv3d(width, widths[i + 1], 2, stride=2), nn.PReLU(widths[i + 1])))

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(depth - 1)):
            self.ups.append(nn.Sequential(nn.ConvTranspose3d(widths[i + 1], widths[i], 2, stride=2), nn.PReLU(widths[i])))
            self.decoders.append(ResidualStage(widths[i], min(i + 1, 3), norm, in_channels=2 * widths[i]))
        self.head = nn.Conv3d(widths[0], config.num_classes, 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward(self, x, stochastic: bool = False, generator: Optional[torch.Generator] = None):
        """Return logits of shape (B, num_classes, D, H, W)."""
        if any(s % self.divisor for s in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by {self.divisor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.downs):
                skips.append(x)
                x = self.downs[i](x)
        x = _dropout(x, self.config.dropout_rate, stochastic, generator)
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def _dropout(x, p: float, active: bool, generator: Optional[torch.Generator]):
    if not active or p <= 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def build_model(config: BackboneConfig, seed: Optional[int] = None, dtype=torch.float32) -> VNet:
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = VNet(config)
    else:
        model = VNet(config)
    return model.to(dtype)


def forward(model: VNet, patch, stochastic: bool = False, generator: Optional[torch.Generator] = None):
    """Class-probability map for a patch.

    ``patch`` may be (D, H, W), (C, D, H, W) or (B, C, D, H, W); the output keeps
    the leading batch layout of the input with the class axis in front of the
    spatial axes.
    """
    x = torch.as_tensor(patch)
    squeeze = 0
    if x.dim() == 3:
        x, squeeze = x[None, None], 2
    elif x.dim() == 4:
        x, squeeze = x[None], 1
    if x.shape[1] != model.config.in_channels:
        raise ValueError(f"expected {model.config.in_channels} input channels, got {x.shape[1]}")
    x = x.to(next(model.parameters()).dtype)
    probs = torch.softmax(model(x, stochastic=stochastic, generator=generator), dim=1)
    return probs[0] if squeeze else probs


def parameter_vector(model: nn.Module) -> torch.Tensor:
    """Flat copy of every trainable weight, in ``model.parameters()`` order."""
    return parameters_to_vector(model.parameters()).detach().clone()


def load_parameter_vector(model: nn.Module, vec: torch.Tensor) -> None:
    with torch.no_grad():
        vector_to_parameters(vec, model.parameters())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def perturb_input(patch, rng, sigma: float = 0.1, clip: float = 0.2):
    """Add clipped Gaussian noise.

    ``rng`` is a ``numpy.random.Generator`` for array input or a
    ``torch.Generator`` for tensor input.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if isinstance(patch, torch.Tensor):
        if sigma == 0:
            return patch.clone()
        noise = torch.randn(patch.shape, generator=rng, dtype=patch.dtype, device=patch.device) * sigma
        return patch + noise.clamp(-clip, clip)
    patch = np.asarray(patch)
    if sigma == 0:
        return patch.copy()
    noise = np.clip(rng.normal(0.0, sigma, size=patch.shape), -clip, clip)
    return (patch + noise).astype(patch.dtype, copy=False)
