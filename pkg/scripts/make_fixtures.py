#!/usr/bin/env python3
"""Regenerate the coder conformance fixtures and the fuzz manifest.

Usage: python scripts/make_fixtures.py [out_dir]

Also records the reference coder's throughput on 10^6 symbols so backend
benchmarks have a baseline to compare against.
"""

import json
import sys
import time
from pathlib import Path

from hflic.bitstream import RangeDecoder, RangeEncoder
from hflic.fixtures import (
    SplitMix64,
    build_conformance_vectors,
    build_fuzz_manifest,
    random_cum_table,
    sample_symbol,
    write_fuzz_manifest,
    write_vectors,
)


def measure_reference_throughput(n_symbols: int = 1_000_000) -> dict:
    rng = SplitMix64(0xBEEF)
    cum = random_cum_table(rng, 64)
    symbols = [sample_symbol(rng, cum) for _ in range(n_symbols)]
    t0 = time.perf_counter()
    enc = RangeEncoder()
    for s in symbols:
        enc.encode_bin(s, cum)
    data = enc.finish()
    t1 = time.perf_counter()
    dec = RangeDecoder(data)
    out = [dec.decode_bin(cum) for _ in range(n_symbols)]
    t2 = time.perf_counter()
    assert out == symbols
    return {
        "bench_symbols": n_symbols,
        "bench_table_seed": 0xBEEF,
        "encode_symbols_per_sec": n_symbols / (t1 - t0),
        "decode_symbols_per_sec": n_symbols / (t2 - t1),
        "payload_bytes": len(data),
    }


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("rans_backend/fixtures")
    out_dir.mkdir(parents=True, exist_ok=True)

    vectors = build_conformance_vectors()
    write_vectors(out_dir / "conformance.bin", vectors)
    print(f"wrote {len(vectors)} vectors to {out_dir / 'conformance.bin'}")

    manifest = build_fuzz_manifest()
    write_fuzz_manifest(out_dir / "fuzz_manifest.json", manifest)
    print(f"wrote fuzz manifest ({manifest['count']} cases, sha256 {manifest['total_sha256'][:16]}...)")

    stats = measure_reference_throughput()
    (out_dir / "reference_stats.json").write_text(json.dumps(stats, indent=2))
    print(
        f"reference coder: {stats['encode_symbols_per_sec']:.0f} enc sym/s, "
        f"{stats['decode_symbols_per_sec']:.0f} dec sym/s"
    )


if __name__ == "__main__":
    main()
