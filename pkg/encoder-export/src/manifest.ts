import { readFileSync } from "node:fs";

import { ManifestError } from "./errors.js";

/** One line of a manifest: a unique id plus an image path or caption text. */
export interface ManifestEntry {
  id: string;
  source: string;
}

function requireString(value: unknown, field: string, where: string): string {
  if (typeof value !== "string" || value.length === 0) {
    throw new ManifestError(`${where}: '${field}' must be a non-empty string`);
  }
  return value;
}

/** Parse a JSONL manifest of {"id": ..., "source": ...} records.
 *
 * `source` is a file path for image exports and the literal caption for
 * text exports.  Blank lines are skipped; ids must be unique.
 */
export function readManifest(path: string): ManifestEntry[] {
  let text: string;
  try {
    text = readFileSync(path, "utf8");
  } catch (err) {
    throw new ManifestError(`cannot read ${path}: ${(err as Error).message}`);
  }

  const entries: ManifestEntry[] = [];
  const seen = new Set<string>();
  const lines = text.split("\n");
  for (let lineno = 1; lineno <= lines.length; lineno++) {
    const line = lines[lineno - 1]!.trim();
    if (line === "") continue;
    const where = `${path}:${lineno}`;
    let record: unknown;
    try {
      record = JSON.parse(line);
    } catch (err) {
      throw new ManifestError(`${where}: ${(err as Error).message}`);
    }
    if (typeof record !== "object" || record === null || Array.isArray(record)) {
      throw new ManifestError(`${where}: expected a JSON object`);
    }
    const rec = record as Record<string, unknown>;
    const id = requireString(rec.id, "id", where);
    const source = requireString(rec.source, "source", where);
    if (seen.has(id)) {
      throw new ManifestError(`${where}: duplicate id '${id}'`);
    }
    seen.add(id);
    entries.push({ id, source });
  }
  if (entries.length === 0) {
    throw new ManifestError(`${path}: manifest is empty`);
  }
  return entries;
}
