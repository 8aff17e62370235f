import { EncoderLoadError, ExportError } from "./errors.js";

export type Modality = "image" | "text";

/** Maps byte contents to unit-norm embedding rows, one per input. */
export interface Encoder {
  readonly name: string;
  readonly dim: number;
  encodeBatch(items: Uint8Array[], modality: Modality): Float32Array[];
}

const registry = new Map<string, () => Encoder>();

/** Make a custom encoder resolvable by name (real model adapters go here). */
export function registerEncoder(name: string, factory: () => Encoder): void {
  registry.set(name, factory);
}

function fnv1a(bytes: Uint8Array, start: number, end: number): number {
  let h = 0x811c9dc5;
  for (let i = start; i < end; i++) {
    h ^= bytes[i]!;
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

function fmix32(h: number): number {
  h ^= h >>> 16;
  h = Math.imul(h, 0x85ebca6b);
  h ^= h >>> 13;
  h = Math.imul(h, 0xc2b2ae35);
  h ^= h >>> 16;
  return h >>> 0;
}

function hashOne(bytes: Uint8Array, dim: number): Float32Array {
  const acc = new Float64Array(dim);
  const width = Math.min(3, bytes.length);
  let first = -1;
  for (let i = 0; i + width <= bytes.length; i++) {
    const h = fmix32(fnv1a(bytes, i, i + width));
    if (first < 0) first = h;
    const bucket = h % dim;
    acc[bucket] = acc[bucket]! + (h >>> 31 ? -1 : 1);
  }
  let sq = 0;
  for (let j = 0; j < dim; j++) sq += acc[j]! * acc[j]!;
  let norm = Math.sqrt(sq);
  if (norm < 1e-12) {
    // shingles cancelled exactly; fall back to a one-hot row
    acc.fill(0);
    acc[(first < 0 ? 0 : first) % dim] = 1;
    norm = 1;
  }
  const out = new Float32Array(dim);
  for (let j = 0; j < dim; j++) out[j] = acc[j]! / norm;
  return out;
}

/** Deterministic stand-in encoder: signed feature hashing of 3-byte
 * shingles into `dim` buckets, unit-normalized in doubles.  Both modalities
 * share the one space, so identical bytes embed identically regardless of
 * whether they arrived as a caption or as file contents.
 */
export function hashLexicon(dim: number): Encoder {
  if (!Number.isInteger(dim) || dim < 1 || dim > 4096) {
    throw new EncoderLoadError(`hash-lexicon dim must be in 1..4096, got ${dim}`);
  }
  return {
    name: dim === 64 ? "hash-lexicon" : `hash-lexicon-${dim}`,
    dim,
    encodeBatch(items, _modality) {
      const rows: Float32Array[] = [];
      for (const item of items) {
        if (item.length === 0) {
          throw new ExportError("cannot encode empty bytes");
        }
        rows.push(hashOne(item, dim));
      }
      return rows;
    },
  };
}

/** Resolve an encoder by name.
 *
 * `hash-lexicon` (dim 64) and `hash-lexicon-<dim>` are built in.  Names of
 * published model families raise until an adapter with their weights is
 * registered; nothing is downloaded on anyone's behalf.
 */
export function resolveEncoder(name: string): Encoder {
  const factory = registry.get(name);
  if (factory) return factory();
  if (name === "hash-lexicon") return hashLexicon(64);
  const sized = /^hash-lexicon-(\d+)$/.exec(name);
  if (sized) return hashLexicon(Number(sized[1]));
  if (/^(clip|blip|siglip)/i.test(name)) {
    throw new EncoderLoadError(
      `encoder '${name}' needs pretrained weights that are not bundled; ` +
        "load them in your runtime and call registerEncoder()",
    );
  }
  throw new EncoderLoadError(`unknown encoder '${name}'`);
}
