"""Two-phase training: MSE base models, then perceptual fine-tuning.

The base phase optimizes rate + lambda * scaled MSE with the conventional
255^2 distortion scaling (the published lambda ladder assumes 8-bit units).
The perceptual phase alternates 1:1 generator/discriminator steps on the
region-composed objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .errors import ConfigurationError, TrainingDivergenceError
from .losses import FeatureExtractor, LossWeights, PatchDiscriminator, hinge_d, total_loss
from .masks import DILATION_PX, load_all_detections, select_small_faces
from .model import CodecModel, build_model, load_checkpoint, save_checkpoint
from .transforms import TransformConfig

MSE_SCALE = 255.0 ** 2
GRAD_CLIP = 1.0
ADAM_BETAS = (0.9, 0.999)
WARMUP_LAMBDA = 0.015
BASE_LAMBDAS = (8e-4, 16e-4, 32e-4, 75e-4)


@dataclass(frozen=True)
class TrainStage:
    epochs: int
    lr: float
    lam: float | None = None  # None -> the config's target lambda

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("stage needs epochs >= 1 and lr > 0")


def paper_schedule(warmup: bool = True) -> tuple[TrainStage, ...]:
    """500 warmup epochs at 1e-4, then the 1e-4 .. 1e-6 ladder per target lambda."""
    stages = []
    if warmup:
        stages.append(TrainStage(500, 1e-4, lam=WARMUP_LAMBDA))
    stages += [
        TrainStage(100, 1e-4),
        TrainStage(30, 3e-5),
        TrainStage(30, 1e-5),
        TrainStage(30, 3e-6),
        TrainStage(30, 1e-6),
    ]
    return tuple(stages)


def desk_schedule(divisor: int = 100, warmup: bool = True) -> tuple[TrainStage, ...]:
    """The paper ladder with epoch counts divided (ceil) by ``divisor``."""
    return tuple(
        replace(s, epochs=math.ceil(s.epochs / divisor)) for s in paper_schedule(warmup)
    )


@dataclass
class TrainConfig:
    phase: str = "base"  # base | perceptual
    lam: float = WARMUP_LAMBDA
    warmup_lambda: float = WARMUP_LAMBDA
    batch_size: int = 4
    crop_size: int = 64
    schedule: tuple[TrainStage, ...] = field(default_factory=lambda: desk_schedule())
    seed: int = 0
    model: TransformConfig = field(default_factory=TransformConfig)
    num_groups: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    freeze_entropy: bool = False
    extractor_seed: int = 0

    def __post_init__(self):
        if self.phase not in ("base", "perceptual"):
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        if not self.schedule:
            raise ConfigurationError("schedule must not be empty")
        if self.crop_size % 64:
            raise ConfigurationError("crop_size must be divisible by 64")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def lr_schedule(cfg: TrainConfig, stage_index: int) -> float:
    if not 0 <= stage_index < len(cfg.schedule):
        raise ConfigurationError(
            f"stage {stage_index} outside schedule of length {len(cfg.schedule)}"
        )
    return cfg.schedule[stage_index].lr


@dataclass
class Checkpoint:
    """In-memory training snapshot; (de)serializes to the archive format."""

    model: CodecModel
    step: int = 0
    optimizer_state: dict | None = None
    discriminator: PatchDiscriminator | None = None

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            self.model,
            optimizer_state=self.optimizer_state,
            step=self.step,
            discriminator=self.discriminator,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        model, meta = load_checkpoint(path)
        return cls(
            model=model,
            step=meta.get("step", 0),
            optimizer_state=meta.get("optimizer"),
            discriminator=meta.get("discriminator"),
        )


class CropDataset:
    """Fixed pool of images with aligned face masks, sampled as random crops."""

    def __init__(self, images: list[Tensor], face_masks: list[Tensor] | None = None):
        if not images:
            raise ConfigurationError("dataset needs at least one image")
        self.images = [img.float() for img in images]
        if face_masks is None:
            face_masks = [torch.zeros(img.shape[-2:]) for img in self.images]
        if len(face_masks) != len(self.images):
            raise ConfigurationError("one face mask per image required")
        self.face_masks = face_masks

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_dir(cls, path: str | Path, detections_path: str | Path | None = None) -> "CropDataset":
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise ConfigurationError(f"no images found in {path}")
        detections = load_all_detections(detections_path) if detections_path else {}
        images, masks = [], []
        for f in files:
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            img = torch.from_numpy(arr).permute(2, 0, 1)
            h, w = img.shape[-2:]
            # Full-size masks here; pyramid alignment happens on the crops.
            face = torch.zeros(h, w)
            if f.name in detections:
                small = select_small_faces(detections[f.name], h, w)
                for box in small.boxes:
                    y0 = max(0, math.floor(box.y0 - DILATION_PX))
                    x0 = max(0, math.floor(box.x0 - DILATION_PX))
                    y1 = min(h, math.ceil(box.y1 + DILATION_PX))
                    x1 = min(w, math.ceil(box.x1 + DILATION_PX))
                    face[y0:y1, x0:x1] = 1.0
            images.append(img)
            masks.append(face)
        return cls(images, masks)

    def sample_batch(
        self, batch_size: int, crop_size: int, gen: torch.Generator
    ) -> tuple[Tensor, Tensor]:
        xs, ms = [], []
        for _ in range(batch_size):
            idx = int(torch.randint(len(self.images), (1,), generator=gen))
            img, face = self.images[idx], self.face_masks[idx]
            h, w = img.shape[-2:]
            if h < crop_size or w < crop_size:
                raise ConfigurationError(f"image smaller than crop size {crop_size}")
            top = int(torch.randint(h - crop_size + 1, (1,), generator=gen))
            left = int(torch.randint(w - crop_size + 1, (1,), generator=gen))
            xs.append(img[:, top : top + crop_size, left : left + crop_size])
            ms.append(face[top : top + crop_size, left : left + crop_size])
        return torch.stack(xs), torch.stack(ms).unsqueeze(1)

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, math.ceil(len(self.images) / batch_size))


class _JsonLogger:
    def __init__(self, path: str | Path | None):
        self._fh = open(path, "a") if path else None

    def write(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _check_terms(terms: dict) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergenceError(name, v)


def train_base(dataset: CropDataset, cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Rate + lambda * MSE optimization. Never instantiates a discriminator."""
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, num_groups=cfg.num_groups)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.schedule[0].lr, betas=ADAM_BETAS)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    log = _JsonLogger(log_path)
    step = 0
    try:
        for stage_i, stage in enumerate(cfg.schedule):
            lam = stage.lam if stage.lam is not None else cfg.lam
            for group in opt.param_groups:
                group["lr"] = stage.lr
            for _ in range(stage.epochs):
                for _ in range(dataset.steps_per_epoch(cfg.batch_size)):
                    x, _ = dataset.sample_batch(cfg.batch_size, cfg.crop_size, gen)
                    out = model.forward_train(x)
                    mse = F.mse_loss(out["x_hat"], x)
                    loss = out["bpp"] + lam * MSE_SCALE * mse
                    _check_terms({"bpp": out["bpp"], "mse": mse, "loss": loss})
                    opt.zero_grad()
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
                    opt.step()
                    step += 1
                    log.write(
                        {
                            "step": step,
                            "stage": stage_i,
                            "lr": stage.lr,
                            "lambda": lam,
                            "loss": float(loss.detach()),
                            "bpp": float(out["bpp"].detach()),
                            "mse": float(mse.detach()),
                        }
                    )
    finally:
        log.close()
    model.eval()
    return Checkpoint(model=model, step=step, optimizer_state=opt.state_dict())


def train_perceptual(
    base: Checkpoint, dataset: CropDataset, cfg: TrainConfig, log_path=None
) -> Checkpoint:
    """Alternating generator/discriminator fine-tuning with the composite loss."""
    torch.manual_seed(cfg.seed)
    model = base.model
    model.train()
    extractor = FeatureExtractor(seed=cfg.extractor_seed)
    use_disc = cfg.weights.w_adv > 0
    disc = PatchDiscriminator(cfg.model.m_channels) if use_disc else None

    if cfg.freeze_entropy:
        for module in (model.context, model.prior, model.hyper_analysis, model.hyper_synthesis):
            for p in module.parameters():
                p.requires_grad_(False)
    gen_params = [p for p in model.parameters() if p.requires_grad]
    opt_g = torch.optim.Adam(gen_params, lr=cfg.schedule[0].lr, betas=ADAM_BETAS)
    opt_d = (
        torch.optim.Adam(disc.parameters(), lr=cfg.schedule[0].lr, betas=ADAM_BETAS)
        if use_disc
        else None
    )
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    log = _JsonLogger(log_path)
    step = 0
    try:
        for stage_i, stage in enumerate(cfg.schedule):
            for group in opt_g.param_groups:
                group["lr"] = stage.lr
            if opt_d:
                for group in opt_d.param_groups:
                    group["lr"] = stage.lr
            for _ in range(stage.epochs):
                for _ in range(dataset.steps_per_epoch(cfg.batch_size)):
                    x, face = dataset.sample_batch(cfg.batch_size, cfg.crop_size, gen)
                    out = model.forward_train(x)
                    cond = out["y_hat"].detach()
                    fake_logits = disc(out["x_hat"], cond) if use_disc else None
                    loss, breakdown = total_loss(
                        x,
                        out["x_hat"],
                        out["y_bits"] + out["z_bits"],
                        face,
                        cfg.weights,
                        extractor,
                        fake_logits=fake_logits,
                    )
                    _check_terms(breakdown)
                    opt_g.zero_grad()
                    if opt_d:
                        opt_d.zero_grad()
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(gen_params, GRAD_CLIP)
                    opt_g.step()

                    d_loss = None
                    if use_disc:
                        opt_d.zero_grad()
                        real_logits = disc(x, cond)
                        fake_logits_d = disc(out["x_hat"].detach(), cond)
                        d_loss = hinge_d(real_logits, fake_logits_d)
                        _check_terms({"d_loss": d_loss})
                        d_loss.backward()
                        opt_d.step()
                    step += 1
                    record = {"step": step, "stage": stage_i, "lr": stage.lr, **breakdown}
                    if d_loss is not None:
                        record["d_loss"] = float(d_loss.detach())
                    log.write(record)
    finally:
        log.close()
    model.eval()
    return Checkpoint(
        model=model, step=base.step + step, optimizer_state=opt_g.state_dict(), discriminator=disc
    )
