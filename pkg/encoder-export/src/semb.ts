/** SEMB binary embedding tables, little-endian throughout.
 *
 *    magic   "SCOTEMB1"
 *    header  u32 version, u64 row count, u32 dim, u8 dtype (0 = f32), 3 pad
 *    payload count x dim float32, row major
 *    ids     count x (u16 byte length + UTF-8)
 *    tag     u16 byte length + UTF-8 source tag
 *
 * Rows must be unit norm.  The reader keeps rows bit-exact when the norm
 * error is at most 1e-6, re-normalizes up to 1e-3, and rejects anything
 * worse, so a writer that normalizes in doubles before the f32 cast always
 * round-trips without repair.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { SembFormatError } from "./errors.js";

export const SEMB_MAGIC = "SCOTEMB1";
export const SEMB_VERSION = 1;

const HEADER_BYTES = 28;
const KEEP_TOL = 1e-6;
const REPAIR_TOL = 1e-3;

export interface SembTable {
  /** Row-major float32 payload, exactly as stored. */
  matrix: Float32Array;
  ids: string[];
  dim: number;
  sourceTag: string;
}

function rowNorm(matrix: Float32Array, row: number, dim: number): number {
  let s = 0;
  for (let j = 0; j < dim; j++) {
    const v = matrix[row * dim + j]!;
    s += v * v;
  }
  return Math.sqrt(s);
}

function encodeLenPrefixed(text: string, what: string): Buffer {
  const bytes = Buffer.from(text, "utf8");
  if (bytes.length > 0xffff) {
    throw new SembFormatError(`${what} too long for u16 length`);
  }
  const out = Buffer.alloc(2 + bytes.length);
  out.writeUInt16LE(bytes.length, 0);
  bytes.copy(out, 2);
  return out;
}

/** Serialize unit-norm rows; rejects rows further than 1e-3 from unit. */
export function writeSemb(
  path: string,
  matrix: Float32Array,
  ids: string[],
  dim: number,
  sourceTag: string,
): void {
  if (dim < 1) throw new SembFormatError(`dim must be positive, got ${dim}`);
  if (ids.length < 1) throw new SembFormatError("table must have at least one row");
  if (matrix.length !== ids.length * dim) {
    throw new SembFormatError(
      `payload has ${matrix.length} values, expected ${ids.length}x${dim}`,
    );
  }
  for (let i = 0; i < ids.length; i++) {
    const err = Math.abs(rowNorm(matrix, i, dim) - 1);
    if (err > REPAIR_TOL) {
      throw new SembFormatError(
        `row '${ids[i]}' norm is off by ${err.toExponential(2)}, beyond 1e-3`,
      );
    }
  }

  const header = Buffer.alloc(HEADER_BYTES);
  header.write(SEMB_MAGIC, 0, "ascii");
  header.writeUInt32LE(SEMB_VERSION, 8);
  header.writeBigUInt64LE(BigInt(ids.length), 12);
  header.writeUInt32LE(dim, 20);
  header.writeUInt8(0, 24); // dtype f32; bytes 25..27 stay zero

  const payload = Buffer.alloc(matrix.length * 4);
  for (let i = 0; i < matrix.length; i++) {
    payload.writeFloatLE(matrix[i]!, i * 4);
  }

  const parts: Buffer[] = [header, payload];
  for (const id of ids) parts.push(encodeLenPrefixed(id, `id '${id.slice(0, 32)}'`));
  parts.push(encodeLenPrefixed(sourceTag, "source tag"));
  writeFileSync(path, Buffer.concat(parts));
}

/** Read and validate a SEMB file, applying the keep/repair/reject policy. */
export function readSemb(path: string): SembTable {
  const blob = readFileSync(path);
  if (blob.length < HEADER_BYTES) {
    throw new SembFormatError(`${path}: truncated header (${blob.length} bytes)`);
  }
  if (blob.toString("ascii", 0, 8) !== SEMB_MAGIC) {
    throw new SembFormatError(`${path}: bad magic`);
  }
  const version = blob.readUInt32LE(8);
  if (version !== SEMB_VERSION) {
    throw new SembFormatError(`${path}: unsupported version ${version}`);
  }
  const countBig = blob.readBigUInt64LE(12);
  if (countBig < 1n || countBig > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new SembFormatError(`${path}: implausible row count ${countBig}`);
  }
  const count = Number(countBig);
  const dim = blob.readUInt32LE(20);
  if (dim < 1) throw new SembFormatError(`${path}: dim must be positive`);
  if (blob.readUInt8(24) !== 0) {
    throw new SembFormatError(`${path}: unknown dtype code ${blob.readUInt8(24)}`);
  }

  const payloadBytes = count * dim * 4;
  if (blob.length < HEADER_BYTES + payloadBytes) {
    throw new SembFormatError(`${path}: truncated payload`);
  }
  const matrix = new Float32Array(count * dim);
  for (let i = 0; i < matrix.length; i++) {
    matrix[i] = blob.readFloatLE(HEADER_BYTES + i * 4);
  }

  let off = HEADER_BYTES + payloadBytes;
  const readString = (what: string): string => {
    if (off + 2 > blob.length) throw new SembFormatError(`${path}: truncated ${what}`);
    const n = blob.readUInt16LE(off);
    off += 2;
    if (off + n > blob.length) throw new SembFormatError(`${path}: truncated ${what}`);
    const s = blob.toString("utf8", off, off + n);
    off += n;
    return s;
  };
  const ids: string[] = [];
  for (let i = 0; i < count; i++) ids.push(readString(`id ${i}`));
  const sourceTag = readString("source tag");
  if (off !== blob.length) {
    throw new SembFormatError(`${path}: ${blob.length - off} trailing bytes`);
  }

  for (let i = 0; i < count; i++) {
    const err = Math.abs(rowNorm(matrix, i, dim) - 1);
    if (err <= KEEP_TOL) continue;
    if (err > REPAIR_TOL) {
      throw new SembFormatError(
        `${path}: row '${ids[i]}' norm is off by ${err.toExponential(2)}`,
      );
    }
    const norm = rowNorm(matrix, i, dim);
    for (let j = 0; j < dim; j++) {
      matrix[i * dim + j] = Math.fround(matrix[i * dim + j]! / norm);
    }
  }

  return { matrix, ids, dim, sourceTag };
}

/** One row of a table as a fresh Float32Array. */
export function tableRow(table: SembTable, index: number): Float32Array {
  return table.matrix.slice(index * table.dim, (index + 1) * table.dim);
}
