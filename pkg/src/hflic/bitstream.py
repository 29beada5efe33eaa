"""Reference range coder and the .hflc container.

The coder is a carry-less byte-oriented range coder with a 64-bit state and
16-bit frequency precision. Every constant and tie-breaking rule below is part
of the cross-implementation contract (see docs/bitstream-format.md); alternate
backends must reproduce these bytes exactly.

Coder contract:
  * state: ``low`` (64-bit), ``range`` (64-bit, starts at 2^64 - 1)
  * per symbol with cumulative bounds (c, d): r = range >> 16;
    low = (low + c*r) mod 2^64; range = r*(d - c)
  * renormalize while top bytes of low and low+range agree (emit the byte)
    or range < 2^48 (truncate range to the next 2^48 boundary, then emit)
  * flush emits the 2-byte big-endian prefix of the 2^48-aligned point inside
    the final interval; an empty symbol sequence emits nothing
  * the decoder mirrors the state machine with an 8-byte lookahead window and
    may zero-fill at most 6 bytes past the payload end

CDF tables quantize the model's cumulative distribution: interior edge j maps
to floor(65536 * CDF(edge_j) + 0.5); end points are pinned to 0 and 65536;
zero-width bins are then raised to one count each, the excess repeatedly taken
from the largest bin (lowest index on ties).
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .entropy import (
    ANCHOR,
    NON_ANCHOR,
    checkerboard_masks,
    estimate_rate,
    quantize,
)
from .errors import BitstreamError, DecodeError, HeaderMismatchError, ValidationError
from .model import CodecModel
from .transforms import TOTAL_STRIDE, crop_to_size, pad_to_multiple

FREQ_BITS = 16
TOTAL_FREQ = 1 << FREQ_BITS
STATE_BITS = 64
MASK = (1 << STATE_BITS) - 1
TOP = 1 << (STATE_BITS - 8)
BOTTOM = 1 << (STATE_BITS - FREQ_BITS)
DECODER_WINDOW = STATE_BITS // 8  # preloaded bytes
MAX_ZERO_FILL = 6  # window minus the minimal 2-byte flush

MAGIC = b"HFLC"
CONTAINER_VERSION = 1
MIN_SUPPORT = 16
MAX_SUPPORT = 1 << 12


class RangeEncoder:
    """Single-use encoder; feed symbols via encode_bin, then call finish()."""

    def __init__(self):
        self._low = 0
        self._range = MASK
        self._out = bytearray()
        self._finished = False
        self._count = 0

    def encode_bin(self, bin_index: int, cum) -> None:
        """Encode one symbol given its table's cumulative array (len bins+1)."""
        c = cum[bin_index]
        d = cum[bin_index + 1]
        if d <= c:
            raise ValidationError("zero-width CDF bin")
        r = self._range >> FREQ_BITS
        self._low = (self._low + c * r) & MASK
        self._range = r * (d - c)
        self._normalize()
        self._count += 1

    def _normalize(self) -> None:
        low, rng, out = self._low, self._range, self._out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass  # top byte settled, emit it
            elif rng < BOTTOM:
                # Underflow: give up the part of the interval past the next
                # 2^48 boundary so a byte can be released.
                rng = ((1 << STATE_BITS) - low) & (BOTTOM - 1)
            else:
                break
            out.append((low >> (STATE_BITS - 8)) & 0xFF)
            low = (low << 8) & MASK
            rng = rng << 8
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        if self._finished:
            raise ValidationError("encoder already finished")
        self._finished = True
        if self._count == 0:
            return b""
        low = self._low
        # Two bytes always suffice: normalize leaves range >= 2^48 while
        # low + range <= 2^64, so the 2^48-aligned point above low lies
        # inside [low, low + range) and below 2^64.
        t = ((low + (BOTTOM - 1)) >> (STATE_BITS - FREQ_BITS)) << (STATE_BITS - FREQ_BITS)
        self._out.append((t >> (STATE_BITS - 8)) & 0xFF)
        self._out.append((t >> (STATE_BITS - 16)) & 0xFF)
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder over a byte payload."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._zero_filled = 0
        self._low = 0
        self._range = MASK
        self._code = 0
        self._primed = False

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        self._zero_filled += 1
        if self._zero_filled > MAX_ZERO_FILL:
            raise DecodeError("truncated range-coded stream")
        return 0

    def _prime(self) -> None:
        for _ in range(DECODER_WINDOW):
            self._code = ((self._code << 8) | self._next_byte()) & MASK
        self._primed = True

    def decode_bin(self, cum) -> int:
        """Decode one symbol's bin index given its cumulative array."""
        if not self._primed:
            self._prime()
        r = self._range >> FREQ_BITS
        target = ((self._code - self._low) & MASK) // r
        if target >= TOTAL_FREQ:
            target = TOTAL_FREQ - 1
        s = bisect_right(cum, target) - 1
        c = cum[s]
        d = cum[s + 1]
        self._low = (self._low + c * r) & MASK
        self._range = r * (d - c)
        self._normalize()
        return s

    def _normalize(self) -> None:
        low, rng = self._low, self._range
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOTTOM:
                rng = ((1 << STATE_BITS) - low) & (BOTTOM - 1)
            else:
                break
            self._code = ((self._code << 8) | self._next_byte()) & MASK
            low = (low << 8) & MASK
            rng = rng << 8
        self._low, self._range = low, rng


@dataclass(frozen=True)
class CdfTable:
    """Quantized cumulative frequencies covering integer symbols.

    ``cum`` has length num_bins+1 with cum[0] == 0 and cum[-1] == 65536.
    ``offset`` is the integer value of bin 0.
    """

    cum: tuple[int, ...]
    offset: int = 0

    def __post_init__(self):
        if len(self.cum) < 2 or self.cum[0] != 0 or self.cum[-1] != TOTAL_FREQ:
            raise ValidationError("CDF must run from 0 to 65536")
        for lo, hi in zip(self.cum, self.cum[1:]):
            if hi <= lo:
                raise ValidationError("every CDF bin needs frequency >= 1")

    @property
    def num_bins(self) -> int:
        return len(self.cum) - 1

    def bin_of(self, value: int) -> int:
        return min(max(value - self.offset, 0), self.num_bins - 1)

    def value_of(self, bin_index: int) -> int:
        return bin_index + self.offset

    def freq(self, value: int) -> int:
        b = self.bin_of(value)
        return self.cum[b + 1] - self.cum[b]


def _quantize_cumulative(cdf_edges: np.ndarray) -> np.ndarray:
    """Documented edge quantization + zero-bin redistribution.

    ``cdf_edges``: (rows, bins-1) float64 cumulative values at interior edges.
    Returns int64 (rows, bins+1) cumulative frequency arrays.
    """
    rows, interior = cdf_edges.shape
    cum = np.zeros((rows, interior + 2), dtype=np.int64)
    cum[:, -1] = TOTAL_FREQ
    cum[:, 1:-1] = np.clip(np.floor(TOTAL_FREQ * cdf_edges + 0.5), 0, TOTAL_FREQ)
    cum[:, 1:-1] = np.maximum.accumulate(cum[:, 1:-1], axis=1)
    freqs = np.diff(cum, axis=1)
    needs_fix = np.nonzero((freqs == 0).any(axis=1))[0]
    for i in needs_fix:
        f = freqs[i]
        deficit = int((f == 0).sum())
        f[f == 0] = 1
        while deficit > 0:
            k = int(np.argmax(f))
            take = min(deficit, int(f[k]) - 1)
            f[k] -= take
            deficit -= take
    cum[:, 1:] = np.cumsum(freqs, axis=1)
    return cum


def gaussian_cum_matrix(mu: np.ndarray, sigma: np.ndarray, support: int) -> np.ndarray:
    """Per-symbol quantized CDFs for N(mu, sigma) over [-support-1, support+1]."""
    n = mu.shape[0]
    num_bins = 2 * support + 3
    offset = -support - 1
    edges = offset + np.arange(1, num_bins, dtype=np.float64) - 0.5
    x = (edges[None, :] - mu[:, None].astype(np.float64)) / sigma[:, None].astype(np.float64)
    cdf = torch.special.ndtr(torch.from_numpy(x)).numpy()
    return _quantize_cumulative(cdf)


def build_cdf(mu: float, sigma: float, support: int) -> CdfTable:
    """Single-symbol Gaussian table; see gaussian_cum_matrix for the batch path."""
    cum = gaussian_cum_matrix(np.array([mu]), np.array([sigma]), support)[0]
    return CdfTable(tuple(int(v) for v in cum), offset=-support - 1)


def factorized_cum_matrix(prior, support: int) -> np.ndarray:
    """Per-channel quantized CDFs from a learned factorized prior."""
    num_bins = 2 * support + 3
    offset = -support - 1
    edges = offset + torch.arange(1, num_bins, dtype=torch.float32) - 0.5
    with torch.no_grad():
        grid = edges.view(1, -1).repeat(prior.channels, 1)
        cdf = prior.cdf(grid).double().numpy()
    return _quantize_cumulative(cdf)


def range_encode(symbols, cdfs) -> bytes:
    """Encode integer symbol values with their per-symbol tables."""
    if len(symbols) != len(cdfs):
        raise ValidationError("one CDF table per symbol required")
    enc = RangeEncoder()
    for value, table in zip(symbols, cdfs):
        enc.encode_bin(table.bin_of(int(value)), table.cum)
    return enc.finish()


def range_decode(data: bytes, cdfs) -> list[int]:
    """Inverse of range_encode; raises DecodeError on truncation."""
    dec = RangeDecoder(data)
    return [table.value_of(dec.decode_bin(table.cum)) for table in cdfs]


def _encode_rows(symbols: np.ndarray, cum_rows: np.ndarray, offsets: np.ndarray) -> bytes:
    """Hot path: symbols[i] coded with cum_rows[i]; offsets give bin-0 values."""
    enc = RangeEncoder()
    bins = np.clip(symbols - offsets, 0, cum_rows.shape[1] - 2)
    cum_lists = cum_rows.tolist()
    for b, cum in zip(bins.tolist(), cum_lists):
        enc.encode_bin(b, cum)
    return enc.finish()


def _decode_rows(data: bytes, cum_rows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.empty(cum_rows.shape[0], dtype=np.int64)
    cum_lists = cum_rows.tolist()
    for i, cum in enumerate(cum_lists):
        out[i] = dec.decode_bin(cum)
    return out + offsets


# --------------------------------------------------------------------------
# Container


_FIXED_HEADER = struct.Struct("<4sBQIIIIBH")  # magic..group_count, z_support


@dataclass
class BitstreamHeader:
    model_id: int
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    z_support: int
    y_supports: tuple[int, ...]
    payload_lengths: tuple[int, ...]
    version: int = CONTAINER_VERSION

    @property
    def group_count(self) -> int:
        return len(self.y_supports)

    def pack(self) -> bytes:
        out = bytearray(
            _FIXED_HEADER.pack(
                MAGIC,
                self.version,
                self.model_id,
                self.orig_h,
                self.orig_w,
                self.padded_h,
                self.padded_w,
                self.group_count,
                self.z_support,
            )
        )
        out += struct.pack(f"<{self.group_count}H", *self.y_supports)
        out += struct.pack("<H", len(self.payload_lengths))
        out += struct.pack(f"<{len(self.payload_lengths)}I", *self.payload_lengths)
        return bytes(out)

    @classmethod
    def unpack(cls, data: bytes) -> tuple["BitstreamHeader", int]:
        if len(data) < _FIXED_HEADER.size:
            raise BitstreamError("header truncated")
        magic, version, model_id, oh, ow, ph, pw, groups, z_sup = _FIXED_HEADER.unpack_from(data)
        if magic != MAGIC:
            raise HeaderMismatchError(f"bad magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise HeaderMismatchError(f"unsupported container version {version}")
        pos = _FIXED_HEADER.size
        need = groups * 2 + 2
        if len(data) < pos + need:
            raise BitstreamError("header truncated")
        y_sup = struct.unpack_from(f"<{groups}H", data, pos)
        pos += groups * 2
        (n_payloads,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if n_payloads != 1 + 2 * groups:
            raise BitstreamError("payload count inconsistent with group count")
        if len(data) < pos + 4 * n_payloads:
            raise BitstreamError("header truncated")
        lengths = struct.unpack_from(f"<{n_payloads}I", data, pos)
        pos += 4 * n_payloads
        header = cls(model_id, oh, ow, ph, pw, z_sup, tuple(y_sup), tuple(lengths), version)
        return header, pos


@dataclass
class Bitstream:
    """Header plus ordered payloads: z-stream first, then (group, phase) pairs."""

    header: BitstreamHeader
    payloads: list[bytes] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        if tuple(len(p) for p in self.payloads) != self.header.payload_lengths:
            raise BitstreamError("payload lengths out of sync with header")
        return self.header.pack() + b"".join(self.payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        header, pos = BitstreamHeader.unpack(data)
        payloads = []
        for length in header.payload_lengths:
            chunk = data[pos : pos + length]
            if len(chunk) != length:
                raise BitstreamError("payload truncated")
            payloads.append(chunk)
            pos += length
        if pos != len(data):
            raise BitstreamError(f"{len(data) - pos} trailing bytes after payloads")
        return cls(header, payloads)

    @property
    def payload_bytes(self) -> int:
        return sum(len(p) for p in self.payloads)

    @property
    def total_bytes(self) -> int:
        return len(self.header.pack()) + self.payload_bytes


# --------------------------------------------------------------------------
# Image pipeline


@dataclass
class EncodeResult:
    bitstream: Bitstream
    x_hat: Tensor  # encoder-side simulation of the decoder output
    y_hat: Tensor
    y_symbols: list[np.ndarray]  # per (group, phase) in coding order
    z_symbols: np.ndarray
    est_y_bits: float
    est_z_bits: float

    @property
    def est_bits(self) -> float:
        return self.est_y_bits + self.est_z_bits


@dataclass
class DecodeResult:
    x_hat: Tensor
    y_hat: Tensor
    y_symbols: list[np.ndarray]
    z_symbols: np.ndarray
    groups_decoded: int


def _support_for(symbols: np.ndarray) -> int:
    peak = int(np.abs(symbols).max()) if symbols.size else 0
    if peak > MAX_SUPPORT:
        raise ValidationError(
            f"latent symbols out of range (|s|={peak} > {MAX_SUPPORT}); model diverged?"
        )
    return max(MIN_SUPPORT, peak)


def _phase_index(mask: Tensor) -> np.ndarray:
    """Flat indices of a checkerboard phase in row-major (H, W) order."""
    return np.nonzero(mask[0, 0].numpy().reshape(-1) > 0.5)[0]


def encode_image(x: Tensor, model: CodecModel) -> Bitstream:
    return encode_image_full(x, model).bitstream


@torch.no_grad()
def encode_image_full(x: Tensor, model: CodecModel) -> EncodeResult:
    """Encode one 3xHxW image in [0, 1]; returns the stream plus diagnostics."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1 or x.shape[1] != 3:
        raise ValidationError("expected a single 3xHxW image")
    if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ValidationError("image values must be finite and inside [0, 1]")
    model.eval()
    padded, (orig_h, orig_w) = pad_to_multiple(x, TOTAL_STRIDE)

    y = model.analysis(padded)
    z = model.hyper_analysis(y)
    z_hat = quantize(z, mode="round")
    est_z_bits = float(model.prior.bits(z_hat))

    z_symbols = z_hat[0].numpy().astype(np.int64).reshape(-1)  # channel-major raster
    z_support = _support_for(z_symbols)
    z_cum = factorized_cum_matrix(model.prior, z_support)
    zc, zh, zw = z_hat.shape[1:]
    z_rows = np.repeat(np.arange(zc), zh * zw)
    z_payload = _encode_rows(
        z_symbols, z_cum[z_rows], np.full(z_symbols.shape, -z_support - 1, dtype=np.int64)
    )

    hyper = model.hyper_synthesis(z_hat)
    h, w = y.shape[-2:]
    anchor_mask, non_anchor_mask = checkerboard_masks(h, w, dtype=y.dtype)
    phase_idx = {ANCHOR: _phase_index(anchor_mask), NON_ANCHOR: _phase_index(non_anchor_mask)}
    phase_mask = {ANCHOR: anchor_mask, NON_ANCHOR: non_anchor_mask}

    y_hat = torch.zeros_like(y)
    payloads = [z_payload]
    y_supports: list[int] = []
    y_symbol_slices: list[np.ndarray] = []
    est_y_bits = 0.0
    for g in range(model.num_groups):
        sl = model.partition.slice_of(g)
        y_g = y[:, sl]
        size = model.partition.sizes[g]
        per_phase: list[tuple[np.ndarray, np.ndarray]] = []
        y_g_hat = torch.zeros_like(y_g)
        for phase in (ANCHOR, NON_ANCHOR):
            cur = None if phase == ANCHOR else y_g_hat
            mu, sigma = model.context.context_params(hyper, y_hat, cur, g, phase)
            mask = phase_mask[phase]
            symbols_t = torch.round(y_g - mu) * mask
            y_g_hat = y_g_hat + (symbols_t + mu) * mask
            est_y_bits += float(estimate_rate((symbols_t + mu) * mask, mu, sigma, mask))
            idx = phase_idx[phase]
            sym_flat = symbols_t[0].numpy().astype(np.int64).reshape(size, -1)[:, idx].reshape(-1)
            sig_flat = sigma[0].numpy().astype(np.float64).reshape(size, -1)[:, idx].reshape(-1)
            per_phase.append((sym_flat, sig_flat))
            y_symbol_slices.append(sym_flat)
        support = max(_support_for(per_phase[0][0]), _support_for(per_phase[1][0]))
        y_supports.append(support)
        for sym_flat, sig_flat in per_phase:
            cum = gaussian_cum_matrix(np.zeros_like(sig_flat), sig_flat, support)
            payloads.append(
                _encode_rows(sym_flat, cum, np.full(sym_flat.shape, -support - 1, dtype=np.int64))
            )
        y_hat[:, sl] = y_g_hat

    header = BitstreamHeader(
        model_id=model.model_id(),
        orig_h=orig_h,
        orig_w=orig_w,
        padded_h=padded.shape[-2],
        padded_w=padded.shape[-1],
        z_support=z_support,
        y_supports=tuple(y_supports),
        payload_lengths=tuple(len(p) for p in payloads),
    )
    x_hat = crop_to_size(model.synthesis(y_hat).clamp(0.0, 1.0), (orig_h, orig_w))[0]
    return EncodeResult(
        bitstream=Bitstream(header, payloads),
        x_hat=x_hat,
        y_hat=y_hat,
        y_symbols=y_symbol_slices,
        z_symbols=z_symbols,
        est_y_bits=est_y_bits,
        est_z_bits=est_z_bits,
    )


def decode_image(data: bytes | Bitstream, model: CodecModel) -> Tensor:
    return decode_image_full(data, model).x_hat


@torch.no_grad()
def decode_image_full(data: bytes | Bitstream, model: CodecModel) -> DecodeResult:
    """Decode an .hflc stream; symbol-exact inverse of encode_image_full."""
    stream = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    header = stream.header
    model.eval()
    if header.model_id != model.model_id():
        raise HeaderMismatchError(
            "model_id mismatch: stream was produced by different weights"
        )
    if header.group_count != model.num_groups:
        raise BitstreamError("group count mismatch")

    zc = model.cfg.z_channels
    zh, zw = header.padded_h // (TOTAL_STRIDE), header.padded_w // TOTAL_STRIDE
    z_cum = factorized_cum_matrix(model.prior, header.z_support)
    z_rows = np.repeat(np.arange(zc), zh * zw)
    try:
        z_symbols = _decode_rows(
            stream.payloads[0],
            z_cum[z_rows],
            np.full(zc * zh * zw, -header.z_support - 1, dtype=np.int64),
        )
    except DecodeError as exc:
        raise BitstreamError(f"hyper-latent payload: {exc}", groups_decoded=0) from exc
    z_hat = torch.from_numpy(z_symbols.reshape(1, zc, zh, zw).astype(np.float32))

    hyper = model.hyper_synthesis(z_hat)
    h, w = header.padded_h // 16, header.padded_w // 16
    anchor_mask, non_anchor_mask = checkerboard_masks(h, w)
    phase_idx = {ANCHOR: _phase_index(anchor_mask), NON_ANCHOR: _phase_index(non_anchor_mask)}
    phase_mask = {ANCHOR: anchor_mask, NON_ANCHOR: non_anchor_mask}

    y_hat = torch.zeros(1, model.cfg.m_channels, h, w)
    y_symbol_slices: list[np.ndarray] = []
    payload_i = 1
    for g in range(model.num_groups):
        sl = model.partition.slice_of(g)
        size = model.partition.sizes[g]
        support = header.y_supports[g]
        y_g_hat = torch.zeros(1, size, h, w)
        for phase in (ANCHOR, NON_ANCHOR):
            cur = None if phase == ANCHOR else y_g_hat
            mu, sigma = model.context.context_params(hyper, y_hat, cur, g, phase)
            idx = phase_idx[phase]
            sig_flat = sigma[0].numpy().astype(np.float64).reshape(size, -1)[:, idx].reshape(-1)
            cum = gaussian_cum_matrix(np.zeros_like(sig_flat), sig_flat, support)
            try:
                sym_flat = _decode_rows(
                    stream.payloads[payload_i],
                    cum,
                    np.full(sig_flat.shape, -support - 1, dtype=np.int64),
                )
            except DecodeError as exc:
                err = BitstreamError(f"group {g} {phase} payload: {exc}", groups_decoded=g)
                err.partial_symbols = y_symbol_slices
                raise err from exc
            payload_i += 1
            y_symbol_slices.append(sym_flat)
            symbols_t = torch.zeros(size, h * w)
            symbols_t[:, idx] = torch.from_numpy(
                sym_flat.reshape(size, -1).astype(np.float32)
            )
            symbols_t = symbols_t.view(1, size, h, w)
            y_g_hat = y_g_hat + (symbols_t + mu) * phase_mask[phase]
        y_hat[:, sl] = y_g_hat

    x_hat = crop_to_size(
        model.synthesis(y_hat).clamp(0.0, 1.0), (header.orig_h, header.orig_w)
    )[0]
    return DecodeResult(
        x_hat=x_hat,
        y_hat=y_hat,
        y_symbols=y_symbol_slices,
        z_symbols=z_symbols,
        groups_decoded=model.num_groups,
    )
