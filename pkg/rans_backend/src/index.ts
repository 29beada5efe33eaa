/**
 * Public coder API: explicit buffers in, status codes out. No exception ever
 * crosses this boundary; failures surface as StatusCode values.
 */

import { RangeDecoder, RangeEncoder, TOTAL_FREQ, TruncatedStreamError } from "./coder.js";

export { RangeDecoder, RangeEncoder, TOTAL_FREQ } from "./coder.js";

export enum StatusCode {
  Ok = 0,
  TruncatedStream = 1,
  InvalidTable = 2,
  InvalidArgument = 3,
}

export interface EncodeResult {
  status: StatusCode;
  bytes: Uint8Array;
}

export interface DecodeResult {
  status: StatusCode;
  symbols: Uint16Array;
}

/** A valid table runs 0..65536 with strictly increasing entries. */
export function validateTable(cum: Uint32Array): boolean {
  if (cum.length < 2 || cum[0] !== 0 || cum[cum.length - 1] !== TOTAL_FREQ) {
    return false;
  }
  for (let i = 1; i < cum.length; i++) {
    if (cum[i] <= cum[i - 1]) return false;
  }
  return true;
}

function checkArgs(
  n: number,
  tableIndex: ArrayLike<number>,
  tables: Uint32Array[],
  symbols?: ArrayLike<number>
): StatusCode {
  if (tableIndex.length !== n) return StatusCode.InvalidArgument;
  for (const table of tables) {
    if (!validateTable(table)) return StatusCode.InvalidTable;
  }
  for (let i = 0; i < n; i++) {
    const t = tableIndex[i];
    if (t < 0 || t >= tables.length) return StatusCode.InvalidArgument;
    if (symbols !== undefined) {
      const s = symbols[i];
      if (s < 0 || s >= tables[t].length - 1) return StatusCode.InvalidArgument;
    }
  }
  return StatusCode.Ok;
}

/** Encode symbol bin indices; symbols[i] is coded with tables[tableIndex[i]]. */
export function fastEncode(
  symbols: ArrayLike<number>,
  tableIndex: ArrayLike<number>,
  tables: Uint32Array[]
): EncodeResult {
  const status = checkArgs(symbols.length, tableIndex, tables, symbols);
  if (status !== StatusCode.Ok) {
    return { status, bytes: new Uint8Array(0) };
  }
  const enc = new RangeEncoder();
  for (let i = 0; i < symbols.length; i++) {
    const cum = tables[tableIndex[i]];
    const s = symbols[i];
    enc.encodeBin(cum[s], cum[s + 1]);
  }
  return { status: StatusCode.Ok, bytes: enc.finish() };
}

/** Decode tableIndex.length symbols from the payload. */
export function fastDecode(
  data: Uint8Array,
  tableIndex: ArrayLike<number>,
  tables: Uint32Array[]
): DecodeResult {
  const status = checkArgs(tableIndex.length, tableIndex, tables);
  if (status !== StatusCode.Ok) {
    return { status, symbols: new Uint16Array(0) };
  }
  const out = new Uint16Array(tableIndex.length);
  const dec = new RangeDecoder(data);
  try {
    for (let i = 0; i < tableIndex.length; i++) {
      out[i] = dec.decodeBin(tables[tableIndex[i]]);
    }
  } catch (err) {
    if (err instanceof TruncatedStreamError) {
      return { status: StatusCode.TruncatedStream, symbols: new Uint16Array(0) };
    }
    return { status: StatusCode.InvalidArgument, symbols: new Uint16Array(0) };
  }
  return { status: StatusCode.Ok, symbols: out };
}
