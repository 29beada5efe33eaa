"""Metrics, BD-rate, decode timing, and RD report emission."""

from __future__ import annotations

import csv
import math
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .bitstream import decode_image_full, encode_image_full
from .errors import ConfigurationError, ValidationError
from .losses import FeatureExtractor, feature_perceptual
from .model import CodecModel

CSV_FIELDS = ("label", "bpp", "psnr", "ms_ssim", "lpips_proxy", "enc_ms", "dec_ms")

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1, _SSIM_K2 = 0.01, 0.03


def psnr(x: Tensor, x_hat: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical."""
    if x.shape != x_hat.shape:
        raise ConfigurationError("psnr inputs must share a shape")
    mse = float(((x - x_hat) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(dtype) -> Tensor:
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype) - (_SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * _SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_pass(x: Tensor, y: Tensor, window: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    kernel = window.expand(c, 1, -1, -1)
    mu_x = F.conv2d(x, kernel, groups=c)
    mu_y = F.conv2d(y, kernel, groups=c)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x = F.conv2d(x * x, kernel, groups=c) - mu_xx
    sigma_y = F.conv2d(y * y, kernel, groups=c) - mu_yy
    sigma_xy = F.conv2d(x * y, kernel, groups=c) - mu_xy
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    cs = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    ssim = ((2 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs
    return ssim.mean(), cs.mean()


def ms_ssim(x: Tensor, x_hat: Tensor) -> float:
    """Standard 5-scale multi-scale SSIM for [0, 1] images."""
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    if x.shape != x_hat.shape:
        raise ConfigurationError("ms_ssim inputs must share a shape")
    min_side = min(x.shape[-2], x.shape[-1])
    scales = len(MS_SSIM_WEIGHTS)
    if min_side < _SSIM_WINDOW * 2 ** (scales - 1):
        raise ValidationError(
            f"image side {min_side} too small for {scales}-scale MS-SSIM "
            f"(needs >= {_SSIM_WINDOW * 2 ** (scales - 1)})"
        )
    x = x.double()
    x_hat = x_hat.double()
    window = _gaussian_window(x.dtype)
    values = []
    for scale in range(scales):
        ssim, cs = _ssim_pass(x, x_hat, window)
        values.append(ssim if scale == scales - 1 else cs)
        if scale < scales - 1:
            x = F.avg_pool2d(x, 2)
            x_hat = F.avg_pool2d(x_hat, 2)
    score = 1.0
    for v, w in zip(values, MS_SSIM_WEIGHTS):
        score *= float(v.clamp_min(0.0)) ** w
    return score


def lpips_proxy(x: Tensor, x_hat: Tensor, extractor=None) -> float:
    """Feature-space distance under the hermetic extractor; a proxy metric only."""
    extractor = extractor or FeatureExtractor()
    with torch.no_grad():
        return float(feature_perceptual(x, x_hat, extractor))


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float = float("nan")
    lpips_proxy: float = float("nan")
    enc_ms: float = float("nan")
    dec_ms: float = float("nan")

    def __post_init__(self):
        if not self.bpp > 0:
            raise ConfigurationError("bpp must be positive")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) < 4:
            raise ConfigurationError("an RD curve needs at least 4 points")
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ConfigurationError("RD points must be sorted by strictly increasing bpp")
        qualities = [p.psnr for p in self.points]
        if any(q2 < q1 for q1, q2 in zip(qualities, qualities[1:])):
            warnings.warn(f"curve {self.label!r}: quality not non-decreasing in bpp")

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def qualities(self, quality_field: str = "psnr") -> np.ndarray:
        return np.array([getattr(p, quality_field) for p in self.points], dtype=np.float64)


def bd_rate(anchor: RDCurve, test: RDCurve, quality_field: str = "psnr") -> float:
    """Bjontegaard delta-rate (%) of ``test`` vs ``anchor``: negative saves bits.

    Cubic fit of log-rate against quality, integrated over the shared quality
    interval.
    """
    qa, qt = anchor.qualities(quality_field), test.qualities(quality_field)
    ra, rt = np.log(anchor.rates()), np.log(test.rates())
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise ConfigurationError(
            f"no overlapping quality range: [{qa.min()}, {qa.max()}] vs [{qt.min()}, {qt.max()}]"
        )
    poly_a = np.polyfit(qa, ra, 3)
    poly_t = np.polyfit(qt, rt, 3)
    int_a = np.polyval(np.polyint(poly_a), hi) - np.polyval(np.polyint(poly_a), lo)
    int_t = np.polyval(np.polyint(poly_t), hi) - np.polyval(np.polyint(poly_t), lo)
    avg_log_diff = (int_t - int_a) / (hi - lo)
    return float((math.exp(avg_log_diff) - 1.0) * 100.0)


def evaluate_images(
    model: CodecModel, images: dict[str, Tensor], extractor=None
) -> list[dict]:
    """Real encode/decode per image; bpp comes from actual bitstream bytes."""
    extractor = extractor or FeatureExtractor()
    rows = []
    for name, x in images.items():
        t0 = time.perf_counter()
        enc = encode_image_full(x, model)
        t1 = time.perf_counter()
        data = enc.bitstream.to_bytes()
        t2 = time.perf_counter()
        dec = decode_image_full(data, model)
        t3 = time.perf_counter()
        h, w = x.shape[-2:]
        try:
            msq = ms_ssim(x, dec.x_hat)
        except ValidationError:
            msq = float("nan")
        rows.append(
            {
                "label": name,
                "bpp": len(data) * 8.0 / (h * w),
                "psnr": psnr(x, dec.x_hat),
                "ms_ssim": msq,
                "lpips_proxy": lpips_proxy(x, dec.x_hat, extractor),
                "enc_ms": (t1 - t0) * 1e3,
                "dec_ms": (t3 - t2) * 1e3,
            }
        )
    return rows


def timing_bench(
    models: dict[int, CodecModel], image: Tensor, repetitions: int = 10
) -> list[dict]:
    """Median encode/decode wall clock per group-count config.

    Each decode asserts the sequential-pass counter equals 2 * groups.
    """
    if repetitions < 1:
        raise ConfigurationError("need at least one repetition")
    rows = []
    for groups, model in sorted(models.items()):
        enc = encode_image_full(image, model)  # warm-up + payload reuse
        data = enc.bitstream.to_bytes()
        enc_times, dec_times = [], []
        pass_count = None
        for _ in range(repetitions):
            t0 = time.perf_counter()
            encode_image_full(image, model)
            t1 = time.perf_counter()
            model.context.reset_pass_count()
            t2 = time.perf_counter()
            decode_image_full(data, model)
            t3 = time.perf_counter()
            pass_count = model.context.pass_count
            enc_times.append((t1 - t0) * 1e3)
            dec_times.append((t3 - t2) * 1e3)
        if pass_count != 2 * groups:
            raise ValidationError(
                f"{groups}-group decode used {pass_count} passes, expected {2 * groups}"
            )
        rows.append(
            {
                "groups": groups,
                "enc_ms": statistics.median(enc_times),
                "dec_ms": statistics.median(dec_times),
                "dec_ms_spread": (max(dec_times) - min(dec_times)),
                "sequential_passes": pass_count,
            }
        )
    return rows


def write_rd_csv(path: str | Path, label: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "label": row.get("label", label)})


def read_rd_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row: dict = {"label": raw["label"]}
            for key in CSV_FIELDS[1:]:
                row[key] = float(raw[key])
            rows.append(row)
        return rows


def curve_from_rows(label: str, rows: list[dict]) -> RDCurve:
    points = [
        RDPoint(
            bpp=row["bpp"],
            psnr=row["psnr"],
            ms_ssim=row.get("ms_ssim", float("nan")),
            lpips_proxy=row.get("lpips_proxy", float("nan")),
            enc_ms=row.get("enc_ms", float("nan")),
            dec_ms=row.get("dec_ms", float("nan")),
        )
        for row in sorted(rows, key=lambda r: r["bpp"])
    ]
    return RDCurve(label, points)


def emit_rd_report(curves: list[RDCurve], out_dir: str | Path) -> list[Path]:
    """CSV per curve, one rate-quality plot (PNG + SVG), and a markdown summary.

    The report schema reserves columns for metrics this harness does not
    compute (transformer IQA, distribution metrics); they stay NaN.
    """
    if not curves:
        raise ConfigurationError("no curves to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for curve in curves:
        path = out_dir / f"{curve.label}.csv"
        rows = [
            {
                "label": curve.label,
                "bpp": p.bpp,
                "psnr": p.psnr,
                "ms_ssim": p.ms_ssim,
                "lpips_proxy": p.lpips_proxy,
                "enc_ms": p.enc_ms,
                "dec_ms": p.dec_ms,
            }
            for p in curve.points
        ]
        write_rd_csv(path, curve.label, rows)
        written.append(path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        ax.plot(curve.rates(), curve.qualities(), marker="o", label=curve.label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    for suffix in ("png", "svg"):
        path = out_dir / f"rd_curves.{suffix}"
        fig.savefig(path)
        written.append(path)
    plt.close(fig)

    summary = out_dir / "summary.md"
    with open(summary, "w") as fh:
        fh.write("# Rate-distortion summary\n\n")
        fh.write("| curve | points | bpp range | psnr range |\n")
        fh.write("|---|---|---|---|\n")
        for curve in curves:
            r, q = curve.rates(), curve.qualities()
            fh.write(
                f"| {curve.label} | {len(curve.points)} | "
                f"{r.min():.4f}-{r.max():.4f} | {q.min():.2f}-{q.max():.2f} |\n"
            )
    written.append(summary)
    return written
