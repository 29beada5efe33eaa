"""Conformance fixtures shared with alternate coder backends.

Two artifacts tie a backend to the reference coder:

* a packed binary file of conformance vectors ("HFCV" format): CDF tables,
  symbols (as bin indices), and the exact bytes the reference coder produced;
* a fuzz manifest: both sides regenerate identical pseudo-random cases from a
  shared splitmix64 stream and compare encoded length, CRC32, and a global
  SHA-256 over the concatenated encodings.

All derivation rules here are integer-exact so any language can reproduce them.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

from .bitstream import TOTAL_FREQ, RangeDecoder, RangeEncoder
from .errors import ValidationError

VECTOR_MAGIC = b"HFCV"
VECTOR_VERSION = 1

_U64 = (1 << 64) - 1


class SplitMix64:
    """Deterministic 64-bit generator; the cross-language fuzz source."""

    def __init__(self, seed: int):
        self.state = seed & _U64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _U64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform-ish value in [0, n) via modulo (bias accepted by contract)."""
        return self.next_u64() % n


@dataclass
class Vector:
    """One coder test case: tables, per-symbol table picks, expected bytes."""

    tables: list[list[int]]  # cumulative arrays, each 0..65536
    table_index: list[int]
    symbols: list[int]  # bin indices
    expected: bytes


def encode_vector_symbols(tables, table_index, symbols) -> bytes:
    enc = RangeEncoder()
    for t, s in zip(table_index, symbols):
        enc.encode_bin(s, tables[t])
    return enc.finish()


def decode_vector_symbols(data: bytes, tables, table_index) -> list[int]:
    dec = RangeDecoder(data)
    return [dec.decode_bin(tables[t]) for t in table_index]


def random_cum_table(rng: SplitMix64, num_bins: int) -> list[int]:
    """Distinct sorted cut points in (0, 65536) -> strictly increasing cumulative."""
    if num_bins < 1 or num_bins > TOTAL_FREQ:
        raise ValidationError("num_bins out of range")
    cuts: set[int] = set()
    while len(cuts) < num_bins - 1:
        cuts.add(1 + rng.below(TOTAL_FREQ - 1))
    return [0, *sorted(cuts), TOTAL_FREQ]


def sample_symbol(rng: SplitMix64, cum: list[int]) -> int:
    """Draw a bin index proportional to the table itself."""
    r = rng.below(TOTAL_FREQ)
    return bisect_right(cum, r) - 1


def random_case(rng: SplitMix64, max_tables: int = 4, max_bins: int = 64, max_symbols: int = 64):
    """One fuzz case; the exact draw order is part of the contract."""
    n_tables = 1 + rng.below(max_tables)
    tables = [random_cum_table(rng, 1 + rng.below(max_bins)) for _ in range(n_tables)]
    n_symbols = rng.below(max_symbols + 1)
    table_index = [rng.below(n_tables) for _ in range(n_symbols)]
    symbols = [sample_symbol(rng, tables[t]) for t in table_index]
    return tables, table_index, symbols


def write_vectors(path: str | Path, vectors: list[Vector]) -> None:
    out = bytearray()
    out += VECTOR_MAGIC
    out += struct.pack("<BI", VECTOR_VERSION, len(vectors))
    for vec in vectors:
        out += struct.pack("<H", len(vec.tables))
        for cum in vec.tables:
            out += struct.pack("<H", len(cum) - 1)
            out += struct.pack(f"<{len(cum)}I", *cum)
        out += struct.pack("<I", len(vec.symbols))
        out += struct.pack(f"<{len(vec.symbols)}H", *vec.table_index)
        out += struct.pack(f"<{len(vec.symbols)}H", *vec.symbols)
        out += struct.pack("<I", len(vec.expected))
        out += vec.expected
    Path(path).write_bytes(bytes(out))


def read_vectors(path: str | Path) -> list[Vector]:
    data = Path(path).read_bytes()
    if data[:4] != VECTOR_MAGIC:
        raise ValidationError("bad conformance-vector magic")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VECTOR_VERSION:
        raise ValidationError(f"unsupported vector format version {version}")
    pos = 9
    vectors = []
    for _ in range(count):
        (n_tables,) = struct.unpack_from("<H", data, pos)
        pos += 2
        tables = []
        for _ in range(n_tables):
            (n_bins,) = struct.unpack_from("<H", data, pos)
            pos += 2
            cum = list(struct.unpack_from(f"<{n_bins + 1}I", data, pos))
            pos += 4 * (n_bins + 1)
            tables.append(cum)
        (n_symbols,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table_index = list(struct.unpack_from(f"<{n_symbols}H", data, pos))
        pos += 2 * n_symbols
        symbols = list(struct.unpack_from(f"<{n_symbols}H", data, pos))
        pos += 2 * n_symbols
        (n_bytes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        expected = data[pos : pos + n_bytes]
        pos += n_bytes
        vectors.append(Vector(tables, table_index, symbols, expected))
    if pos != len(data):
        raise ValidationError("trailing bytes in conformance-vector file")
    return vectors


def _edge_case_vectors() -> list[tuple[list[list[int]], list[int], list[int]]]:
    cases = []
    # Empty input must produce an empty payload.
    cases.append(([[0, TOTAL_FREQ]], [], []))
    # Single symbol, single-bin table (zero information).
    cases.append(([[0, TOTAL_FREQ]], [0], [0]))
    # Dominant symbol repeated: near-zero entropy stream.
    dom = [0, 1, TOTAL_FREQ]
    cases.append(([dom], [0] * 1000, [1] * 1000))
    # Rarest symbol repeated: worst-case expansion.
    cases.append(([dom], [0] * 64, [0] * 64))
    # Alternating extremes across two tables.
    half = [0, TOTAL_FREQ // 2, TOTAL_FREQ]
    cases.append(([dom, half], [0, 1] * 500, [0, 1] * 500))
    # Uniform 256-bin table walked end to end.
    uniform = [i * (TOTAL_FREQ // 256) for i in range(257)]
    cases.append(([uniform], [0] * 256, list(range(256))))
    return cases


def build_conformance_vectors(count: int = 1000, seed: int = 0x48464C43) -> list[Vector]:
    """Edge cases first, then deterministic fuzz cases up to ``count``."""
    rng = SplitMix64(seed)
    vectors = []
    for tables, table_index, symbols in _edge_case_vectors():
        expected = encode_vector_symbols(tables, table_index, symbols)
        vectors.append(Vector(tables, table_index, symbols, expected))
    while len(vectors) < count:
        tables, table_index, symbols = random_case(rng)
        expected = encode_vector_symbols(tables, table_index, symbols)
        vectors.append(Vector(tables, table_index, symbols, expected))
    return vectors[:count]


def build_fuzz_manifest(count: int = 10_000, seed: int = 0x46555A5A) -> dict:
    """Per-case length + CRC32 plus a global SHA-256 over all encodings."""
    rng = SplitMix64(seed)
    sha = hashlib.sha256()
    cases = []
    for _ in range(count):
        tables, table_index, symbols = random_case(rng)
        data = encode_vector_symbols(tables, table_index, symbols)
        sha.update(data)
        cases.append({"length": len(data), "crc32": zlib.crc32(data) & 0xFFFFFFFF})
    return {
        "seed": seed,
        "count": count,
        "max_tables": 4,
        "max_bins": 64,
        "max_symbols": 64,
        "total_sha256": sha.hexdigest(),
        "cases": cases,
    }


def write_fuzz_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest))


def read_fuzz_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
