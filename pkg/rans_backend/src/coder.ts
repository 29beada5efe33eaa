/**
 * Carry-less byte-oriented range coder, byte-identical to the reference
 * implementation (see ../../docs/bitstream-format.md for the contract).
 *
 * The 64-bit coder state is held as pairs of unsigned 32-bit limbs and all
 * arithmetic stays inside double-exact integer ranges, so the hot paths never
 * touch BigInt.
 */

export const TOTAL_FREQ = 1 << 16;
export const MAX_ZERO_FILL = 6;

const TWO32 = 4294967296;

export class TruncatedStreamError extends Error {
  constructor() {
    super("truncated range-coded stream");
  }
}

class ByteSink {
  private buf = new Uint8Array(1024);
  private len = 0;

  push(b: number): void {
    if (this.len === this.buf.length) {
      const next = new Uint8Array(this.buf.length * 2);
      next.set(this.buf);
      this.buf = next;
    }
    this.buf[this.len++] = b;
  }

  bytes(): Uint8Array {
    return this.buf.slice(0, this.len);
  }
}

export class RangeEncoder {
  private lowHi = 0;
  private lowLo = 0;
  private rangeHi = 0xffffffff;
  private rangeLo = 0xffffffff;
  private out = new ByteSink();
  private count = 0;
  private finished = false;

  /** Encode one symbol from its cumulative bounds [c, d). */
  encodeBin(c: number, d: number): void {
    const rHi = this.rangeHi >>> 16;
    const rLo = ((this.rangeHi << 16) | (this.rangeLo >>> 16)) >>> 0;

    // low += c * r  (c <= 65535, r < 2^49: every product stays double-exact)
    const pLoFull = c * rLo;
    const pCarry = Math.floor(pLoFull / TWO32);
    const sumLo = this.lowLo + (pLoFull - pCarry * TWO32);
    this.lowLo = sumLo >>> 0;
    this.lowHi = (this.lowHi + c * rHi + pCarry + (sumLo >= TWO32 ? 1 : 0)) >>> 0;

    // range = (d - c) * r  (< 2^64, so the high limb fits 32 bits)
    const f = d - c;
    const qLoFull = f * rLo;
    const qCarry = Math.floor(qLoFull / TWO32);
    this.rangeLo = qLoFull >>> 0;
    this.rangeHi = f * rHi + qCarry;

    this.normalize();
    this.count++;
  }

  private normalize(): void {
    for (;;) {
      const sumLo = this.lowLo + this.rangeLo;
      const sumHi = this.lowHi + this.rangeHi + (sumLo >= TWO32 ? 1 : 0);
      const topLow = this.lowHi >>> 24;
      const topSum = sumHi >= TWO32 ? 256 : sumHi >>> 24;
      if (topLow === topSum) {
        // top byte settled
      } else if (this.rangeHi < 0x10000) {
        // Underflow: truncate range to the next 2^48 boundary.
        const nLo = (~this.lowLo + 1) >>> 0;
        const nHi = (~this.lowHi + (this.lowLo === 0 ? 1 : 0)) >>> 0;
        this.rangeHi = nHi & 0xffff;
        this.rangeLo = nLo;
      } else {
        break;
      }
      this.out.push(this.lowHi >>> 24);
      this.lowHi = ((this.lowHi << 8) | (this.lowLo >>> 24)) >>> 0;
      this.lowLo = (this.lowLo << 8) >>> 0;
      this.rangeHi = ((this.rangeHi << 8) | (this.rangeLo >>> 24)) >>> 0;
      this.rangeLo = (this.rangeLo << 8) >>> 0;
    }
  }

  /**
   * 2-byte flush; empty input yields an empty payload. Two bytes always
   * suffice: normalize leaves range >= 2^48 while low + range <= 2^64, so
   * the 2^48-aligned point above low lies inside the interval, below 2^64.
   */
  finish(): Uint8Array {
    if (this.finished) {
      throw new Error("encoder already finished");
    }
    this.finished = true;
    if (this.count === 0) {
      return new Uint8Array(0);
    }
    const fracLow48 = this.lowLo !== 0 || (this.lowHi & 0xffff) !== 0;
    const t16 = (this.lowHi >>> 16) + (fracLow48 ? 1 : 0); // t = t16 * 2^48
    this.out.push((t16 >>> 8) & 0xff);
    this.out.push(t16 & 0xff);
    return this.out.bytes();
  }
}

export class RangeDecoder {
  private lowHi = 0;
  private lowLo = 0;
  private rangeHi = 0xffffffff;
  private rangeLo = 0xffffffff;
  private codeHi = 0;
  private codeLo = 0;
  private pos = 0;
  private zeroFilled = 0;
  private primed = false;

  constructor(private data: Uint8Array) {}

  private nextByte(): number {
    if (this.pos < this.data.length) {
      return this.data[this.pos++];
    }
    if (++this.zeroFilled > MAX_ZERO_FILL) {
      throw new TruncatedStreamError();
    }
    return 0;
  }

  private prime(): void {
    for (let i = 0; i < 8; i++) {
      this.codeHi = ((this.codeHi << 8) | (this.codeLo >>> 24)) >>> 0;
      this.codeLo = ((this.codeLo << 8) | this.nextByte()) >>> 0;
    }
    this.primed = true;
  }

  /** Decode one symbol's bin index from its cumulative array. */
  decodeBin(cum: Uint32Array): number {
    if (!this.primed) {
      this.prime();
    }
    const rHi = this.rangeHi >>> 16;
    const rLo = ((this.rangeHi << 16) | (this.rangeLo >>> 16)) >>> 0;

    const borrow = this.codeLo < this.lowLo ? 1 : 0;
    const dLo = (this.codeLo - this.lowLo) >>> 0;
    const dHi = (this.codeHi - this.lowHi - borrow) >>> 0;

    // Float estimate of diff / r, made exact by limb-compare correction.
    let q = Math.floor((dHi * TWO32 + dLo) / (rHi * TWO32 + rLo));
    if (q > TOTAL_FREQ) q = TOTAL_FREQ;
    if (q < 0) q = 0;
    while (q > 0) {
      const pLoFull = q * rLo;
      const pCarry = Math.floor(pLoFull / TWO32);
      const pHi = q * rHi + pCarry; // may exceed 2^32; kept as a double
      const pLo = pLoFull - pCarry * TWO32;
      if (pHi > dHi || (pHi === dHi && pLo > dLo)) q--;
      else break;
    }
    for (;;) {
      const qq = q + 1;
      const pLoFull = qq * rLo;
      const pCarry = Math.floor(pLoFull / TWO32);
      const pHi = qq * rHi + pCarry;
      const pLo = pLoFull - pCarry * TWO32;
      if (pHi < dHi || (pHi === dHi && pLo <= dLo)) q++;
      else break;
    }
    const target = q > TOTAL_FREQ - 1 ? TOTAL_FREQ - 1 : q;

    // Greatest s with cum[s] <= target.
    let lo = 0;
    let hi = cum.length - 1;
    while (hi - lo > 1) {
      const mid = (lo + hi) >> 1;
      if (cum[mid] <= target) lo = mid;
      else hi = mid;
    }
    const s = lo;

    const c = cum[s];
    const f = cum[s + 1] - c;
    const pLoFull = c * rLo;
    const pCarry = Math.floor(pLoFull / TWO32);
    const sumLo = this.lowLo + (pLoFull - pCarry * TWO32);
    this.lowLo = sumLo >>> 0;
    this.lowHi = (this.lowHi + c * rHi + pCarry + (sumLo >= TWO32 ? 1 : 0)) >>> 0;
    const qLoFull = f * rLo;
    const qCarry = Math.floor(qLoFull / TWO32);
    this.rangeLo = qLoFull >>> 0;
    this.rangeHi = f * rHi + qCarry;

    this.normalize();
    return s;
  }

  private normalize(): void {
    for (;;) {
      const sumLo = this.lowLo + this.rangeLo;
      const sumHi = this.lowHi + this.rangeHi + (sumLo >= TWO32 ? 1 : 0);
      const topLow = this.lowHi >>> 24;
      const topSum = sumHi >= TWO32 ? 256 : sumHi >>> 24;
      if (topLow === topSum) {
        // consume one byte below
      } else if (this.rangeHi < 0x10000) {
        const nLo = (~this.lowLo + 1) >>> 0;
        const nHi = (~this.lowHi + (this.lowLo === 0 ? 1 : 0)) >>> 0;
        this.rangeHi = nHi & 0xffff;
        this.rangeLo = nLo;
      } else {
        break;
      }
      this.codeHi = ((this.codeHi << 8) | (this.codeLo >>> 24)) >>> 0;
      this.codeLo = ((this.codeLo << 8) | this.nextByte()) >>> 0;
      this.lowHi = ((this.lowHi << 8) | (this.lowLo >>> 24)) >>> 0;
      this.lowLo = (this.lowLo << 8) >>> 0;
      this.rangeHi = ((this.rangeHi << 8) | (this.rangeLo >>> 24)) >>> 0;
      this.rangeLo = (this.rangeLo << 8) >>> 0;
    }
  }
}
