"""Full codec assembly, training forward pass, and checkpoint archive."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .entropy import (
    ANCHOR,
    NON_ANCHOR,
    ContextModel,
    FactorizedPrior,
    GroupPartition,
    checkerboard_masks,
    default_partition,
    estimate_rate,
    quantize,
)
from .errors import ConfigurationError
from .transforms import (
    AnalysisTransform,
    HyperAnalysis,
    HyperSynthesis,
    SynthesisTransform,
    TransformConfig,
    TOTAL_STRIDE,
    crop_to_size,
    pad_to_multiple,
)

CHECKPOINT_VERSION = 1


class CodecModel(nn.Module):
    """Transforms plus entropy model; the unit that gets checkpointed."""

    def __init__(self, cfg: TransformConfig, partition: GroupPartition | None = None):
        super().__init__()
        self.cfg = cfg
        self.partition = partition or default_partition(cfg.m_channels)
        if self.partition.total != cfg.m_channels:
            raise ConfigurationError(
                f"partition covers {self.partition.total} channels, model has {cfg.m_channels}"
            )
        self.analysis = AnalysisTransform(cfg)
        self.synthesis = SynthesisTransform(cfg)
        self.hyper_analysis = HyperAnalysis(cfg)
        self.hyper_synthesis = HyperSynthesis(cfg)
        self.context = ContextModel(cfg.hyper_channels, self.partition)
        self.prior = FactorizedPrior(cfg.z_channels)

    @property
    def num_groups(self) -> int:
        return self.partition.num_groups

    def forward_train(self, x: Tensor) -> dict:
        """One training pass with mixed quantization.

        Rate terms use additive-noise surrogates and the noisy hyper-latent
        also feeds the hyper synthesis (otherwise an all-rounded-to-zero z at
        init starves the decoder side of gradient); the latent path uses
        straight-through rounding so the context conditioning matches what a
        real decoder sees.
        """
        y = self.analysis(x)
        z = self.hyper_analysis(y)

        z_noisy = quantize(z, mode="additive_noise")
        z_bits = self.prior.bits(z_noisy)
        hyper = self.hyper_synthesis(z_noisy)

        b, m, h, w = y.shape
        anchor_mask, non_anchor_mask = checkerboard_masks(h, w, device=y.device, dtype=y.dtype)
        y_hat = torch.zeros_like(y)
        y_noisy = quantize(y, mode="additive_noise")
        y_bits = y.new_zeros(())
        for g in range(self.num_groups):
            sl = self.partition.slice_of(g)
            y_g = y[:, sl]
            mu_a, sigma_a = self.context.context_params(hyper, y_hat, None, g, ANCHOR)
            y_g_anchor = quantize(y_g, mu_a, "ste_round") * anchor_mask
            y_bits = y_bits + estimate_rate(y_noisy[:, sl], mu_a, sigma_a, anchor_mask)

            mu_n, sigma_n = self.context.context_params(hyper, y_hat, y_g_anchor, g, NON_ANCHOR)
            y_g_non = quantize(y_g, mu_n, "ste_round") * non_anchor_mask
            y_bits = y_bits + estimate_rate(y_noisy[:, sl], mu_n, sigma_n, non_anchor_mask)

            y_hat = y_hat.clone()
            y_hat[:, sl] = y_g_anchor + y_g_non

        x_hat = self.synthesis(y_hat)
        num_pixels = b * x.shape[-2] * x.shape[-1]
        return {
            "x_hat": x_hat,
            "y_hat": y_hat,
            "y_bits": y_bits,
            "z_bits": z_bits,
            "bpp": (y_bits + z_bits) / num_pixels,
        }

    @torch.no_grad()
    def reconstruct(self, x: Tensor) -> tuple[Tensor, float]:
        """Deterministic round-trip without entropy coding: (x_hat, estimated bpp)."""
        self.eval()
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        padded, size = pad_to_multiple(x, TOTAL_STRIDE)
        y = self.analysis(padded)
        z = self.hyper_analysis(y)
        z_hat = quantize(z, mode="round")
        z_bits = float(self.prior.bits(z_hat))
        hyper = self.hyper_synthesis(z_hat)
        y_hat, y_bits = self._code_latents(y, hyper)
        x_hat = self.synthesis(y_hat).clamp(0.0, 1.0)
        x_hat = crop_to_size(x_hat, size)
        if squeeze:
            x_hat = x_hat[0]
        bpp = (y_bits + z_bits) / (size[0] * size[1])
        return x_hat, bpp

    @torch.no_grad()
    def _code_latents(self, y: Tensor, hyper: Tensor) -> tuple[Tensor, float]:
        """Sequential group/phase quantization exactly as the decoder conditions it."""
        h, w = y.shape[-2:]
        anchor_mask, non_anchor_mask = checkerboard_masks(h, w, device=y.device, dtype=y.dtype)
        y_hat = torch.zeros_like(y)
        bits = 0.0
        for g in range(self.num_groups):
            sl = self.partition.slice_of(g)
            y_g = y[:, sl]
            mu_a, sigma_a = self.context.context_params(hyper, y_hat, None, g, ANCHOR)
            y_g_anchor = quantize(y_g, mu_a, "round") * anchor_mask
            bits += float(estimate_rate(y_g_anchor, mu_a, sigma_a, anchor_mask))
            mu_n, sigma_n = self.context.context_params(hyper, y_hat, y_g_anchor, g, NON_ANCHOR)
            y_g_non = quantize(y_g, mu_n, "round") * non_anchor_mask
            bits += float(estimate_rate(y_g_non, mu_n, sigma_n, non_anchor_mask))
            y_hat[:, sl] = y_g_anchor + y_g_non
        return y_hat, bits

    def config_record(self) -> dict:
        return {
            "transform": asdict(self.cfg),
            "partition": list(self.partition.sizes),
        }

    def model_id(self) -> int:
        """64-bit digest over config and weights; must match between coder ends."""
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config_record(), sort_keys=True).encode())
        state = self.state_dict()
        for name in sorted(state):
            digest.update(name.encode())
            digest.update(state[name].detach().cpu().numpy().astype(np.float32).tobytes())
        return int.from_bytes(digest.digest()[:8], "little")


def build_model(
    cfg: TransformConfig | None = None,
    partition_sizes=None,
    num_groups: int = 5,
    seed: int | None = None,
) -> CodecModel:
    cfg = cfg or TransformConfig()
    if seed is not None:
        torch.manual_seed(seed)
    if partition_sizes is not None:
        from .entropy import partition_channels

        partition = partition_channels(cfg.m_channels, partition_sizes)
    else:
        partition = default_partition(cfg.m_channels, num_groups)
    return CodecModel(cfg, partition)


def _state_to_npz_bytes(state: dict) -> bytes:
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(
    path: str | Path,
    model: CodecModel,
    optimizer_state: dict | None = None,
    step: int = 0,
    discriminator: nn.Module | None = None,
    extra: dict | None = None,
) -> None:
    """Write a zip archive: config.json + params.npz (+ optimizer/discriminator)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(model.config_record(), indent=2, sort_keys=True))
        zf.writestr("params.npz", _state_to_npz_bytes(model.state_dict()))
        meta = {"version": CHECKPOINT_VERSION, "step": step, "extra": extra or {}}
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        if optimizer_state is not None:
            opt_buf = io.BytesIO()
            torch.save(optimizer_state, opt_buf)
            zf.writestr("optimizer.pt", opt_buf.getvalue())
        if discriminator is not None:
            zf.writestr(
                "discriminator.json",
                json.dumps({"latent_channels": discriminator.latent_channels}),
            )
            zf.writestr("discriminator.npz", _state_to_npz_bytes(discriminator.state_dict()))


def load_checkpoint(path: str | Path) -> tuple[CodecModel, dict]:
    """Rebuild the model from an archive; returns (model, meta).

    ``meta['optimizer']`` holds the saved optimizer state dict and
    ``meta['discriminator']`` a rebuilt discriminator, when present.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path, "r") as zf:
        record = json.loads(zf.read("config.json"))
        meta = json.loads(zf.read("meta.json"))
        with zf.open("params.npz") as fh:
            arrays = dict(np.load(io.BytesIO(fh.read())))
        names = zf.namelist()
        if "optimizer.pt" in names:
            meta["optimizer"] = torch.load(
                io.BytesIO(zf.read("optimizer.pt")), weights_only=False
            )
        disc_spec = json.loads(zf.read("discriminator.json")) if "discriminator.json" in names else None
        disc_arrays = (
            dict(np.load(io.BytesIO(zf.read("discriminator.npz"))))
            if "discriminator.npz" in names
            else None
        )
    cfg = TransformConfig(**record["transform"])
    model = build_model(cfg, partition_sizes=record["partition"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    if disc_spec is not None and disc_arrays is not None:
        from .losses import PatchDiscriminator

        disc = PatchDiscriminator(disc_spec["latent_channels"])
        disc.load_state_dict({k: torch.from_numpy(v) for k, v in disc_arrays.items()})
        meta["discriminator"] = disc
    return model, meta
