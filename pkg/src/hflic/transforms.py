"""Analysis/synthesis and hyper transforms.

The main transforms downsample by 16x (four stride-2 stages), the hyper pair
by a further 4x. Residual stages use an inverted-bottleneck block whose hidden
width is ``expansion_ratio`` times the stream width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ValidationError

# Spatial reduction factors of the two transform pairs.
MAIN_STRIDE = 16
HYPER_STRIDE = 4
TOTAL_STRIDE = MAIN_STRIDE * HYPER_STRIDE  # images are padded to multiples of this

_ACTIVATIONS = {
    "gelu": nn.GELU,
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
}


@dataclass
class TransformConfig:
    """Widths and block layout of the four transforms."""

    n_channels: int = 32
    m_channels: int = 48
    z_channels: int = 32
    expansion_ratio: int = 2
    blocks_per_stage: int = 1
    use_attention: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_channels < 8 or self.m_channels < 8:
            raise ConfigurationError("n_channels and m_channels must be >= 8")
        if self.expansion_ratio < 1:
            raise ConfigurationError("expansion_ratio must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigurationError("blocks_per_stage must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def hyper_channels(self) -> int:
        """Width of the hyper-synthesis output feeding the context model."""
        return 2 * self.m_channels

    def make_activation(self) -> nn.Module:
        return _ACTIVATIONS[self.activation]()


def desk_config(**overrides) -> TransformConfig:
    """CPU-trainable default widths."""
    return TransformConfig(**overrides)


def full_scale_config(**overrides) -> TransformConfig:
    """Publication-scale widths. Provided for completeness, untested at desk scale."""
    base = dict(n_channels=192, m_channels=320, z_channels=192, blocks_per_stage=3)
    base.update(overrides)
    return TransformConfig(**base)


class InvertedBottleneck(nn.Module):
    """Residual block: 1x1 expand -> 3x3 -> 1x1 project, skip-added to the input.

    Activations follow the first two convolutions only, so zero-initializing
    the projection makes the block an exact identity.
    """

    def __init__(self, channels: int, expansion_ratio: int = 2, activation: str = "gelu"):
        super().__init__()
        hidden = channels * expansion_ratio
        self.channels = channels
        self.expand = nn.Conv2d(channels, hidden, kernel_size=1)
        self.spatial = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1)
        self.project = nn.Conv2d(hidden, channels, kernel_size=1)
        self.act = _ACTIVATIONS[activation]()

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.channels:
            raise ConfigurationError(
                f"expected {self.channels} channels, got {x.shape[-3]}"
            )
        h = self.act(self.expand(x))
        h = self.act(self.spatial(h))
        return x + self.project(h)


class AttentionBlock(nn.Module):
    """Residual spatial attention gate, kept behind ``use_attention``."""

    def __init__(self, channels: int, expansion_ratio: int = 2, activation: str = "gelu"):
        super().__init__()
        self.trunk = nn.Sequential(
            InvertedBottleneck(channels, expansion_ratio, activation),
            InvertedBottleneck(channels, expansion_ratio, activation),
        )
        self.gate = nn.Sequential(
            InvertedBottleneck(channels, expansion_ratio, activation),
            nn.Conv2d(channels, channels, kernel_size=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.trunk(x) * torch.sigmoid(self.gate(x))


def _down(in_ch: int, out_ch: int) -> nn.Module:
    return nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2)


def _up(in_ch: int, out_ch: int) -> nn.Module:
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel_size=5, stride=2, padding=2, output_padding=1
    )


def _stage_blocks(cfg: TransformConfig, channels: int) -> list[nn.Module]:
    return [
        InvertedBottleneck(channels, cfg.expansion_ratio, cfg.activation)
        for _ in range(cfg.blocks_per_stage)
    ]


def _check_finite(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValidationError(f"non-finite values in {name}")


class AnalysisTransform(nn.Module):
    """Image -> latent, 16x spatial reduction."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        n, m = cfg.n_channels, cfg.m_channels
        layers: list[nn.Module] = [_down(3, n), *_stage_blocks(cfg, n)]
        layers += [_down(n, n), *_stage_blocks(cfg, n)]
        if cfg.use_attention:
            layers.append(AttentionBlock(n, cfg.expansion_ratio, cfg.activation))
        layers += [_down(n, n), *_stage_blocks(cfg, n)]
        layers.append(_down(n, m))
        if cfg.use_attention:
            layers.append(AttentionBlock(m, cfg.expansion_ratio, cfg.activation))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        _check_finite(x, "analysis input")
        if x.shape[-1] % MAIN_STRIDE or x.shape[-2] % MAIN_STRIDE:
            raise ConfigurationError(
                f"spatial size {tuple(x.shape[-2:])} not a multiple of {MAIN_STRIDE}"
            )
        return self.net(x)


class SynthesisTransform(nn.Module):
    """Latent -> image, 16x spatial expansion. Output is left unclamped."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        n, m = cfg.n_channels, cfg.m_channels
        layers: list[nn.Module] = []
        if cfg.use_attention:
            layers.append(AttentionBlock(m, cfg.expansion_ratio, cfg.activation))
        layers += [_up(m, n), *_stage_blocks(cfg, n)]
        layers += [_up(n, n), *_stage_blocks(cfg, n)]
        if cfg.use_attention:
            layers.append(AttentionBlock(n, cfg.expansion_ratio, cfg.activation))
        layers += [_up(n, n), *_stage_blocks(cfg, n)]
        layers.append(_up(n, 3))
        self.m_channels = m
        self.net = nn.Sequential(*layers)

    def forward(self, y_hat: Tensor) -> Tensor:
        if y_hat.shape[-3] != self.m_channels:
            raise ConfigurationError(
                f"expected {self.m_channels} latent channels, got {y_hat.shape[-3]}"
            )
        return self.net(y_hat)


class HyperAnalysis(nn.Module):
    """Latent -> hyper-latent, a further 4x spatial reduction."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        m, nz = cfg.m_channels, cfg.z_channels
        self.net = nn.Sequential(
            nn.Conv2d(m, nz, kernel_size=3, padding=1),
            cfg.make_activation(),
            _down(nz, nz),
            cfg.make_activation(),
            _down(nz, nz),
        )

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[-1] % HYPER_STRIDE or y.shape[-2] % HYPER_STRIDE:
            raise ConfigurationError(
                f"latent size {tuple(y.shape[-2:])} not a multiple of {HYPER_STRIDE}"
            )
        return self.net(y)


class HyperSynthesis(nn.Module):
    """Hyper-latent -> context features, spatially aligned with the latent."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        nz = cfg.z_channels
        self.net = nn.Sequential(
            _up(nz, nz),
            cfg.make_activation(),
            _up(nz, nz * 3 // 2),
            cfg.make_activation(),
            nn.Conv2d(nz * 3 // 2, cfg.hyper_channels, kernel_size=3, padding=1),
        )

    def forward(self, z_hat: Tensor) -> Tensor:
        return self.net(z_hat)


def pad_to_multiple(x: Tensor, multiple: int = TOTAL_STRIDE) -> tuple[Tensor, tuple[int, int]]:
    """Replicate-pad the bottom/right edges; returns (padded, original (H, W))."""
    h, w = int(x.shape[-2]), int(x.shape[-1])
    if h < 1 or w < 1:
        raise ValidationError("empty image")
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (h, w)
    return F.pad(x, (0, pad_w, 0, pad_h), mode="replicate"), (h, w)


def crop_to_size(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = size
    return x[..., :h, :w]
