"""Quantization, factorized hyper-prior, and the grouped checkerboard context model.

Latent channels are split into ordered uneven groups. Each group is coded in
two spatial phases: anchors (i+j even) first, then non-anchors conditioned on
the decoded anchors. Group g additionally conditions on all fully decoded
groups < g, so one image costs exactly ``2 * num_groups`` sequential parameter
passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError

SIGMA_MIN = 0.11
# Per-symbol likelihood floor; keeps rate estimates finite for far outliers.
PROB_FLOOR = 2.0 ** -16

QUANT_MODES = ("additive_noise", "ste_round", "round")

ANCHOR = "anchor"
NON_ANCHOR = "non_anchor"
PHASES = (ANCHOR, NON_ANCHOR)


def quantize(y: Tensor, mu: Tensor | None = None, mode: str = "round") -> Tensor:
    """Quantize a latent around its predicted mean.

    ``round``: mu + round(y - mu). ``ste_round``: same forward, identity
    gradient. ``additive_noise``: y + Uniform(-0.5, 0.5).
    """
    if mode not in QUANT_MODES:
        raise ConfigurationError(f"unknown quantization mode {mode!r}")
    if mode == "additive_noise":
        return y + torch.empty_like(y).uniform_(-0.5, 0.5)
    centered = y if mu is None else y - mu
    rounded = torch.round(centered)
    if mode == "ste_round":
        rounded = centered + (rounded - centered).detach()
    return rounded if mu is None else rounded + mu


@dataclass(frozen=True)
class GroupPartition:
    """Ordered channel-group sizes; the order is the coding order."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.sizes or any(s < 1 for s in self.sizes):
            raise ConfigurationError("group sizes must all be >= 1")

    @property
    def num_groups(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def offset(self, group_index: int) -> int:
        """First channel of the given group."""
        return sum(self.sizes[:group_index])

    def slice_of(self, group_index: int) -> slice:
        start = self.offset(group_index)
        return slice(start, start + self.sizes[group_index])


def partition_channels(m_channels: int, sizes) -> GroupPartition:
    part = GroupPartition(tuple(int(s) for s in sizes))
    if part.total != m_channels:
        raise ConfigurationError(
            f"group sizes {part.sizes} sum to {part.total}, expected {m_channels}"
        )
    return part


_DEFAULT_PARTITIONS = {
    (48, 5): (4, 4, 8, 12, 20),
    (320, 5): (16, 16, 32, 64, 192),
}


def default_partition(m_channels: int, num_groups: int = 5) -> GroupPartition:
    """Uneven split: early groups small, later ones progressively larger."""
    if (m_channels, num_groups) in _DEFAULT_PARTITIONS:
        return partition_channels(m_channels, _DEFAULT_PARTITIONS[(m_channels, num_groups)])
    if num_groups < 1 or num_groups > m_channels:
        raise ConfigurationError(
            f"cannot split {m_channels} channels into {num_groups} groups"
        )
    weights = [2 ** min(i, max(num_groups - 2, 0)) for i in range(num_groups)]
    total_w = sum(weights)
    sizes = [max(1, (m_channels * w) // total_w) for w in weights]
    # Dump the rounding remainder into the last (largest) group.
    sizes[-1] += m_channels - sum(sizes)
    while sizes[-1] < 1:  # pathological tiny M; borrow from the largest earlier group
        k = sizes.index(max(sizes[:-1]))
        sizes[k] -= 1
        sizes[-1] += 1
    return partition_channels(m_channels, sizes)


def checkerboard_masks(
    height: int, width: int, device=None, dtype=torch.float32
) -> tuple[Tensor, Tensor]:
    """(anchor, non_anchor) masks of shape 1x1xHxW; anchors are (i+j) even."""
    ii = torch.arange(height, device=device).view(-1, 1)
    jj = torch.arange(width, device=device).view(1, -1)
    anchor = ((ii + jj) % 2 == 0).to(dtype).view(1, 1, height, width)
    return anchor, 1.0 - anchor


class CheckerboardConv2d(nn.Conv2d):
    """5x5 conv whose kernel only sees taps of opposite checkerboard parity.

    Centered on a non-anchor position, the surviving taps ((di+dj) odd) are
    exactly the anchor neighbours, so non-anchor parameters never read
    non-anchor symbols.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        k = kernel_size
        di = torch.arange(k).view(-1, 1) - k // 2
        dj = torch.arange(k).view(1, -1) - k // 2
        mask = ((di + dj).abs() % 2 == 1).float().view(1, 1, k, k)
        self.register_buffer("tap_mask", mask)

    def forward(self, x: Tensor) -> Tensor:
        return self._conv_forward(x, self.weight * self.tap_mask, self.bias)


class GroupContext(nn.Module):
    """Parameter network for one channel group.

    The masked spatial conv reads the current group's decoded anchors; two 1x1
    convs fuse it with the hyper features and all previously decoded groups.
    """

    def __init__(self, hyper_channels: int, prev_channels: int, group_size: int):
        super().__init__()
        self.group_size = group_size
        self.spatial = CheckerboardConv2d(group_size, 2 * group_size)
        in_ch = hyper_channels + prev_channels + 2 * group_size
        hidden = max(2 * group_size, (in_ch + 2 * group_size) // 2)
        self.fuse = nn.Sequential(
            nn.Conv2d(in_ch, hidden, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(hidden, 2 * group_size, kernel_size=1),
        )

    def forward(self, hyper: Tensor, prev: Tensor, cur_anchors: Tensor) -> Tensor:
        ctx = self.spatial(cur_anchors)
        return self.fuse(torch.cat([hyper, prev, ctx], dim=1))


class ContextModel(nn.Module):
    """Per-(group, phase) Gaussian parameters honoring the coding order."""

    def __init__(self, hyper_channels: int, partition: GroupPartition):
        super().__init__()
        self.partition = partition
        self.hyper_channels = hyper_channels
        self.groups = nn.ModuleList(
            GroupContext(hyper_channels, partition.offset(g), size)
            for g, size in enumerate(partition.sizes)
        )
        # Counts sequential parameter passes; reset externally around timing runs.
        self.pass_count = 0

    def reset_pass_count(self) -> None:
        self.pass_count = 0

    def context_params(
        self,
        hyper: Tensor,
        y_prev: Tensor,
        y_current: Tensor | None,
        group_index: int,
        phase: str,
    ) -> tuple[Tensor, Tensor]:
        """(mu, sigma) for one (group, phase) slice.

        ``y_prev`` may be the full M-channel tensor; channels at or beyond the
        current group are sliced away so future-group data can never leak.
        For the anchor phase the current-group input is forced to zero; for the
        non-anchor phase its non-anchor positions are zeroed.
        """
        if phase not in PHASES:
            raise ConfigurationError(f"unknown phase {phase!r}")
        if not 0 <= group_index < self.partition.num_groups:
            raise ConfigurationError(f"group index {group_index} out of range")
        size = self.partition.sizes[group_index]
        start = self.partition.offset(group_index)
        prev = y_prev[:, :start]
        h, w = hyper.shape[-2:]
        if phase == ANCHOR:
            cur = hyper.new_zeros(hyper.shape[0], size, h, w)
        else:
            if y_current is None:
                raise ConfigurationError("non-anchor phase requires current-group anchors")
            if y_current.shape[1] != size:
                raise ConfigurationError(
                    f"current-group tensor has {y_current.shape[1]} channels, expected {size}"
                )
            anchor_mask, _ = checkerboard_masks(h, w, device=hyper.device, dtype=hyper.dtype)
            cur = y_current * anchor_mask
        self.pass_count += 1
        raw = self.groups[group_index](hyper, prev, cur)
        mu, sigma_raw = raw.chunk(2, dim=1)
        sigma = SIGMA_MIN + F.softplus(sigma_raw)
        return mu, sigma


def discretized_gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """P(round(y) = y_hat) under N(mu, sigma), floored at PROB_FLOOR.

    Evaluated symmetrically on |y_hat - mu| for tail stability.
    """
    delta = (y_hat - mu).abs()
    inv = 1.0 / (sigma * math.sqrt(2.0))
    upper = torch.special.erfc((delta - 0.5) * inv)
    lower = torch.special.erfc((delta + 0.5) * inv)
    return (0.5 * (upper - lower)).clamp_min(PROB_FLOOR)


def estimate_rate(
    y_hat: Tensor, mu: Tensor, sigma: Tensor, mask: Tensor | None = None
) -> Tensor:
    """Total bits of the slice under the discretized Gaussian model."""
    if y_hat.shape != mu.shape or mu.shape != sigma.shape:
        raise ConfigurationError("y_hat/mu/sigma shapes must match")
    bits = -torch.log2(discretized_gaussian_likelihood(y_hat, mu, sigma))
    if mask is not None:
        bits = bits * mask
    return bits.sum()


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF for the hyper-latent.

    A stack of monotone scalar maps (softplus-positive weights, bounded tanh
    gates) followed by a sigmoid, as is standard for non-parametric latent
    priors. Monotonicity holds by construction.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 8.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            self._matrices.append(
                nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init))
            )
            self._biases.append(
                nn.Parameter(torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5))
            )
            if k < len(dims) - 2:
                self._gates.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, x: Tensor) -> Tensor:
        # x: (channels, 1, n) -> logits of the cumulative at each point.
        out = x
        for k, matrix in enumerate(self._matrices):
            out = torch.matmul(F.softplus(matrix), out) + self._biases[k]
            if k < len(self._gates):
                out = out + torch.tanh(self._gates[k]) * torch.tanh(out)
        return out

    def cdf(self, x: Tensor) -> Tensor:
        """Cumulative probability; x shaped (channels, n)."""
        logits = self._logits(x.unsqueeze(1))
        return torch.sigmoid(logits).squeeze(1)

    def likelihood(self, z_hat: Tensor) -> Tensor:
        """P(round(z) = z_hat) per element; z_hat shaped (B, C, H, W)."""
        if z_hat.shape[1] != self.channels:
            raise ConfigurationError(
                f"expected {self.channels} channels, got {z_hat.shape[1]}"
            )
        b, c, h, w = z_hat.shape
        flat = z_hat.permute(1, 0, 2, 3).reshape(c, -1)
        upper = self.cdf(flat + 0.5)
        lower = self.cdf(flat - 0.5)
        like = (upper - lower).clamp_min(PROB_FLOOR)
        return like.reshape(c, b, h, w).permute(1, 0, 2, 3)

    def bits(self, z_hat: Tensor) -> Tensor:
        return -torch.log2(self.likelihood(z_hat)).sum()

    @torch.no_grad()
    def integer_pmf(self, support: int) -> Tensor:
        """PMF at integers [-support-1, support+1] per channel, tails absorbed
        into the end bins. Shape (channels, 2*support+3)."""
        pts = torch.arange(-support - 1, support + 2, dtype=torch.float32)
        grid = pts.view(1, -1).repeat(self.channels, 1)
        upper = self.cdf(grid + 0.5)
        lower = self.cdf(grid - 0.5)
        pmf = upper - lower
        pmf[:, 0] = upper[:, 0]  # everything below the lower escape bin
        pmf[:, -1] = 1.0 - lower[:, -1]  # everything above the upper escape bin
        return pmf.clamp_min(0.0)


def factorized_rate(z_hat: Tensor, prior: FactorizedPrior) -> Tensor:
    """Total bits of the hyper-latent under the learned prior."""
    return prior.bits(z_hat)
