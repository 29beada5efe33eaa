"""Training objectives: reconstruction, feature-space, adversarial, and face terms.

The perceptual terms are weighted by the perceptual region mask; the face term
applies plain MSE inside the small-face mask. Feature losses pool the pixel
mask down to each feature resolution and weight per-location distances.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError
from .masks import RegionMasks

CHARBONNIER_EPS = 1e-3
STYLE_PATCH_SIZE = 16
STYLE_LAYERS = (1, 2)  # feature strides 2 and 4


@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_lpips: float = 1.0
    w_adv: float = 0.01
    w_sty: float = 40.0
    w_face: float = 10.0
    lambda_rate: float = 1.0

    def __post_init__(self):
        for name in ("w_rec", "w_lpips", "w_adv", "w_sty", "w_face", "lambda_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


def _weighted_mean(values: Tensor, mask: Tensor | None) -> Tensor:
    """Mean of ``values``; with a mask, a mask-weighted mean over its support."""
    if mask is None:
        return values.mean()
    weights = mask.expand_as(values)
    return (values * weights).sum() / weights.sum().clamp_min(1.0)


def charbonnier(x: Tensor, x_hat: Tensor, eps: float = CHARBONNIER_EPS, mask: Tensor | None = None) -> Tensor:
    """Smooth-L1 pixel loss: mean of sqrt((x - x_hat)^2 + eps^2)."""
    if x.shape != x_hat.shape:
        raise ConfigurationError("charbonnier inputs must share a shape")
    return _weighted_mean(torch.sqrt((x - x_hat) ** 2 + eps * eps), mask)


def masked_mse(x: Tensor, x_hat: Tensor, mask: Tensor) -> Tensor:
    """Squared error averaged over masked pixels and channels (0 for empty masks)."""
    if x.shape != x_hat.shape:
        raise ConfigurationError("masked_mse inputs must share a shape")
    weights = mask.expand_as(x)
    return ((x - x_hat) ** 2 * weights).sum() / weights.sum().clamp_min(1.0)


class FeatureExtractor(nn.Module):
    """Hermetic stand-in for a pretrained backbone.

    A fixed, seeded conv pyramid tapped at strides 1/2/4/8/16. Weights are
    drawn from a private generator so construction never touches global RNG
    state, then frozen. Gradients still flow through to the inputs.
    """

    strides = (1, 2, 4, 8, 16)

    def __init__(self, channels=(16, 32, 64, 64, 64), layer_weights=None, seed: int = 0):
        super().__init__()
        if len(channels) != len(self.strides):
            raise ConfigurationError("need one channel width per pyramid level")
        gen = torch.Generator().manual_seed(seed)
        stages = []
        in_ch = 3
        for i, out_ch in enumerate(channels):
            stride = 1 if i == 0 else 2
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
            stages.append(conv)
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.layer_weights = tuple(layer_weights or (1.0,) * len(channels))
        for p in self.parameters():
            p.requires_grad_(False)

    def extract(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv in self.stages:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


class VggFeatureExtractor(nn.Module):
    """Pretrained-VGG16 adapter behind the same interface, for real runs.

    Looks for weights under $HFLIC_CACHE (vgg16.pt state dict) so nothing is
    downloaded implicitly; raises with instructions otherwise.
    """

    strides = (1, 2, 4, 8, 16)
    _TAPS = (3, 8, 15, 22, 29)  # relu1_2, relu2_2, relu3_3, relu4_3, relu5_3

    def __init__(self, weights_path: str | Path | None = None, layer_weights=None):
        super().__init__()
        try:
            from torchvision.models import vgg16
        except ImportError as exc:
            raise ConfigurationError("torchvision is required for the VGG extractor") from exc
        net = vgg16(weights=None)
        path = Path(weights_path) if weights_path else self._cached_weights()
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.features = net.features[: self._TAPS[-1] + 1]
        self.layer_weights = tuple(layer_weights or (1.0,) * len(self._TAPS))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    @staticmethod
    def _cached_weights() -> Path:
        cache = os.environ.get("HFLIC_CACHE")
        if not cache:
            raise ConfigurationError(
                "set HFLIC_CACHE to a directory containing vgg16.pt to use the VGG extractor"
            )
        path = Path(cache) / "vgg16.pt"
        if not path.exists():
            raise ConfigurationError(f"VGG weights not found at {path}")
        return path

    def extract(self, x: Tensor) -> list[Tensor]:
        h = (x - self.mean) / self.std
        feats = []
        taps = set(self._TAPS)
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in taps:
                feats.append(h)
        return feats


def _pool_mask(mask: Tensor | None, like: Tensor) -> Tensor | None:
    """Average-pool a full-resolution (B,1,H,W) mask to a feature map's grid."""
    if mask is None:
        return None
    if mask.dim() == 2:
        mask = mask.view(1, 1, *mask.shape)
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1)
    return F.adaptive_avg_pool2d(mask.to(like.dtype), like.shape[-2:])


def feature_perceptual(
    x: Tensor, x_hat: Tensor, extractor, mask: Tensor | None = None
) -> Tensor:
    """Masked distance between channel-normalized feature pyramids."""
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    feats_a = extractor.extract(x)
    feats_b = extractor.extract(x_hat)
    total = x.new_zeros(())
    for w, fa, fb in zip(extractor.layer_weights, feats_a, feats_b):
        na = fa / torch.sqrt((fa * fa).sum(dim=1, keepdim=True) + 1e-10)
        nb = fb / torch.sqrt((fb * fb).sum(dim=1, keepdim=True) + 1e-10)
        dist = ((na - nb) ** 2).sum(dim=1, keepdim=True)
        total = total + w * _weighted_mean(dist, _pool_mask(mask, dist))
    return total


def _gram_windows(feat: Tensor, patch: int) -> Tensor:
    """Per-window Gram matrices: (B, n_windows, C, C), normalized by C*patch^2."""
    b, c, h, w = feat.shape
    hh, ww = (h // patch) * patch, (w // patch) * patch
    if hh == 0 or ww == 0:
        return feat.new_zeros(b, 0, c, c)
    feat = feat[:, :, :hh, :ww]
    tiles = feat.unfold(2, patch, patch).unfold(3, patch, patch)  # B,C,nh,nw,p,p
    nh, nw = tiles.shape[2], tiles.shape[3]
    tiles = tiles.permute(0, 2, 3, 1, 4, 5).reshape(b, nh * nw, c, patch * patch)
    return torch.matmul(tiles, tiles.transpose(-1, -2)) / (c * patch * patch)


def style_loss(
    x: Tensor,
    x_hat: Tensor,
    extractor,
    patch_size: int = STYLE_PATCH_SIZE,
    mask: Tensor | None = None,
    layers=STYLE_LAYERS,
) -> Tensor:
    """Masked mean over non-overlapping windows of squared Gram differences."""
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    feats_a = extractor.extract(x)
    feats_b = extractor.extract(x_hat)
    total = x.new_zeros(())
    for layer in layers:
        fa, fb = feats_a[layer], feats_b[layer]
        ga = _gram_windows(fa, patch_size)
        gb = _gram_windows(fb, patch_size)
        if ga.shape[1] == 0:
            continue
        diff = ((ga - gb) ** 2).sum(dim=(-1, -2))  # B, n_windows
        if mask is None:
            total = total + diff.mean()
        else:
            b, c, h, w = fa.shape
            nh, nw = h // patch_size, w // patch_size
            m = _pool_mask(mask, fa)[:, 0, : nh * patch_size, : nw * patch_size]
            weights = F.avg_pool2d(m.unsqueeze(1), patch_size).reshape(b, -1)
            total = total + (diff * weights).sum() / weights.sum().clamp_min(1.0)
    return total


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: four stride-2 stages, one logit per 16x16 patch.

    The condition is the quantized latent, nearest-upsampled to image size and
    concatenated channelwise.
    """

    def __init__(self, latent_channels: int, base_channels: int = 48):
        super().__init__()
        self.latent_channels = latent_channels
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3 + latent_channels, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 1),
        )

    def forward(self, image: Tensor, latent: Tensor) -> Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if latent.dim() == 3:
            latent = latent.unsqueeze(0)
        if latent.shape[1] != self.latent_channels:
            raise ConfigurationError(
                f"condition has {latent.shape[1]} channels, expected {self.latent_channels}"
            )
        cond = F.interpolate(latent, size=image.shape[-2:], mode="nearest")
        return self.net(torch.cat([image, cond], dim=1))


def hinge_d(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Discriminator hinge objective."""
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g(fake_logits: Tensor) -> Tensor:
    """Generator hinge objective (unbounded below by design)."""
    return -fake_logits.mean()


def _as_face_mask(masks, x: Tensor) -> Tensor:
    if masks is None:
        return x.new_zeros(x.shape[0], 1, x.shape[-2], x.shape[-1])
    if isinstance(masks, RegionMasks):
        face = masks.face
    else:
        face = masks
    if face.dim() == 2:
        face = face.view(1, 1, *face.shape)
    elif face.dim() == 3:
        face = face.unsqueeze(1)
    return face.to(x.dtype)


def total_loss(
    x: Tensor,
    x_hat: Tensor,
    rate_bits: Tensor,
    masks,
    weights: LossWeights,
    extractor,
    fake_logits: Tensor | None = None,
    style_patch_size: int = STYLE_PATCH_SIZE,
) -> tuple[Tensor, dict]:
    """Region-composed objective; returns (scalar, weighted per-term breakdown)."""
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    face = _as_face_mask(masks, x)
    perc = 1.0 - face
    num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]

    zero = x.new_zeros(())
    rec = charbonnier(x, x_hat, mask=perc) if weights.w_rec > 0 else zero
    lpips = feature_perceptual(x, x_hat, extractor, mask=perc) if weights.w_lpips > 0 else zero
    sty = (
        style_loss(x, x_hat, extractor, patch_size=style_patch_size, mask=perc)
        if weights.w_sty > 0
        else zero
    )
    adv = hinge_g(fake_logits) if (weights.w_adv > 0 and fake_logits is not None) else zero
    face_term = masked_mse(x, x_hat, face) if weights.w_face > 0 else zero
    bpp = rate_bits / num_pixels

    breakdown = {
        "rec": weights.w_rec * rec,
        "lpips": weights.w_lpips * lpips,
        "adv": weights.w_adv * adv,
        "style": weights.w_sty * sty,
        "face": weights.w_face * face_term,
        "rate": weights.lambda_rate * bpp,
    }
    total = sum(breakdown.values())
    breakdown = {k: float(v.detach() if isinstance(v, Tensor) else v) for k, v in breakdown.items()}
    breakdown["bpp"] = float(bpp.detach() if isinstance(bpp, Tensor) else bpp)
    breakdown["total"] = float(total.detach())
    return total, breakdown
