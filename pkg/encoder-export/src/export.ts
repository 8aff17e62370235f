import { readFileSync } from "node:fs";
import { dirname, isAbsolute, resolve } from "node:path";

import { resolveEncoder, type Modality } from "./encoders.js";
import { DimMismatchError, ExportError, UnreadableInputError } from "./errors.js";
import { readManifest } from "./manifest.js";
import { writeSemb } from "./semb.js";

/** A batch encoding run: manifest in, one SEMB table out. */
export interface ExportJob {
  encoderName: string;
  manifestPath: string;
  outPath: string;
  modality: Modality;
  /** Items per encoder call; default 64. */
  batchSize?: number;
  /** Recorded for the operator's benefit only; the stand-in ignores it. */
  deviceHint?: string;
}

export interface ExportSummary {
  count: number;
  dim: number;
  outPath: string;
  sourceTag: string;
}

function loadBytes(job: ExportJob, id: string, source: string): Uint8Array {
  if (job.modality === "text") {
    return Buffer.from(source, "utf8");
  }
  // image paths are relative to the manifest so manifests can travel
  const path = isAbsolute(source)
    ? source
    : resolve(dirname(job.manifestPath), source);
  let bytes: Buffer;
  try {
    bytes = readFileSync(path);
  } catch (err) {
    throw new UnreadableInputError(id, (err as Error).message);
  }
  if (bytes.length === 0) {
    throw new UnreadableInputError(id, `${path} is empty`);
  }
  return bytes;
}

/** Encode every manifest entry and write the rows as one SEMB table.
 *
 * Row order matches manifest order and the table's source tag is the
 * encoder name.  Rows are unit-norm by encoder contract; the writer
 * still rejects anything further than 1e-3 from unit.
 */
export function exportEmbeddings(job: ExportJob): ExportSummary {
  const batchSize = job.batchSize ?? 64;
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new ExportError(`batch size must be a positive integer, got ${batchSize}`);
  }
  if (job.modality !== "image" && job.modality !== "text") {
    throw new ExportError(`modality must be image or text, got '${job.modality}'`);
  }

  const encoder = resolveEncoder(job.encoderName);
  const entries = readManifest(job.manifestPath);
  const items = entries.map((e) => loadBytes(job, e.id, e.source));

  const matrix = new Float32Array(entries.length * encoder.dim);
  for (let start = 0; start < items.length; start += batchSize) {
    const slice = items.slice(start, start + batchSize);
    const rows = encoder.encodeBatch(slice, job.modality);
    if (rows.length !== slice.length) {
      throw new ExportError(
        `encoder '${encoder.name}' returned ${rows.length} rows for ${slice.length} items`,
      );
    }
    for (let k = 0; k < rows.length; k++) {
      const row = rows[k]!;
      if (row.length !== encoder.dim) {
        throw new DimMismatchError(
          `encoder '${encoder.name}' returned dim ${row.length}, expected ${encoder.dim}`,
        );
      }
      matrix.set(row, (start + k) * encoder.dim);
    }
  }

  writeSemb(
    job.outPath,
    matrix,
    entries.map((e) => e.id),
    encoder.dim,
    encoder.name,
  );
  return {
    count: entries.length,
    dim: encoder.dim,
    outPath: job.outPath,
    sourceTag: encoder.name,
  };
}
