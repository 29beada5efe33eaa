/**
 * Conformance fixture parsing and the shared deterministic fuzz generator.
 * Draw order and integer rules mirror docs/bitstream-format.md section 4.
 */

export interface Vector {
  tables: Uint32Array[];
  tableIndex: Uint16Array;
  symbols: Uint16Array;
  expected: Uint8Array;
}

const MASK64 = (1n << 64n) - 1n;

/** splitmix64; the PRNG itself is cold code, so BigInt is fine here. */
export class SplitMix64 {
  private state: bigint;

  constructor(seed: bigint | number) {
    this.state = BigInt(seed) & MASK64;
  }

  nextU64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    return z ^ (z >> 31n);
  }

  below(n: number): number {
    return Number(this.nextU64() % BigInt(n));
  }
}

export function randomCumTable(rng: SplitMix64, numBins: number): Uint32Array {
  const cuts = new Set<number>();
  while (cuts.size < numBins - 1) {
    cuts.add(1 + rng.below(65535));
  }
  const sorted = [...cuts].sort((a, b) => a - b);
  return Uint32Array.from([0, ...sorted, 65536]);
}

export function sampleSymbol(rng: SplitMix64, cum: Uint32Array): number {
  const r = rng.below(65536);
  let lo = 0;
  let hi = cum.length - 1;
  while (hi - lo > 1) {
    const mid = (lo + hi) >> 1;
    if (cum[mid] <= r) lo = mid;
    else hi = mid;
  }
  return lo;
}

export interface FuzzCase {
  tables: Uint32Array[];
  tableIndex: Uint16Array;
  symbols: Uint16Array;
}

export function randomCase(
  rng: SplitMix64,
  maxTables = 4,
  maxBins = 64,
  maxSymbols = 64
): FuzzCase {
  const nTables = 1 + rng.below(maxTables);
  const tables: Uint32Array[] = [];
  for (let i = 0; i < nTables; i++) {
    tables.push(randomCumTable(rng, 1 + rng.below(maxBins)));
  }
  const nSymbols = rng.below(maxSymbols + 1);
  const tableIndex = new Uint16Array(nSymbols);
  for (let i = 0; i < nSymbols; i++) {
    tableIndex[i] = rng.below(nTables);
  }
  const symbols = new Uint16Array(nSymbols);
  for (let i = 0; i < nSymbols; i++) {
    symbols[i] = sampleSymbol(rng, tables[tableIndex[i]]);
  }
  return { tables, tableIndex, symbols };
}

export function readVectors(data: Uint8Array): Vector[] {
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  if (
    data[0] !== 0x48 || data[1] !== 0x46 || data[2] !== 0x43 || data[3] !== 0x56 // "HFCV"
  ) {
    throw new Error("bad conformance-vector magic");
  }
  if (view.getUint8(4) !== 1) {
    throw new Error("unsupported vector format version");
  }
  const count = view.getUint32(5, true);
  let pos = 9;
  const vectors: Vector[] = [];
  for (let v = 0; v < count; v++) {
    const nTables = view.getUint16(pos, true);
    pos += 2;
    const tables: Uint32Array[] = [];
    for (let t = 0; t < nTables; t++) {
      const nBins = view.getUint16(pos, true);
      pos += 2;
      const cum = new Uint32Array(nBins + 1);
      for (let i = 0; i <= nBins; i++) {
        cum[i] = view.getUint32(pos, true);
        pos += 4;
      }
      tables.push(cum);
    }
    const nSymbols = view.getUint32(pos, true);
    pos += 4;
    const tableIndex = new Uint16Array(nSymbols);
    for (let i = 0; i < nSymbols; i++) {
      tableIndex[i] = view.getUint16(pos, true);
      pos += 2;
    }
    const symbols = new Uint16Array(nSymbols);
    for (let i = 0; i < nSymbols; i++) {
      symbols[i] = view.getUint16(pos, true);
      pos += 2;
    }
    const nBytes = view.getUint32(pos, true);
    pos += 4;
    const expected = data.slice(pos, pos + nBytes);
    pos += nBytes;
    vectors.push({ tables, tableIndex, symbols, expected });
  }
  if (pos !== data.byteLength) {
    throw new Error("trailing bytes in conformance-vector file");
  }
  return vectors;
}
