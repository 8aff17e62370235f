/** Cross-boundary checks against the Python training package: exported
 * files must be accepted by its reader bit-for-bit, and the alignment
 * probe drives its CLI for real.  Skipped when scotkit is not installed.
 *
 * Loss tolerances were sized by tests/sizing_oracle.py (600 random
 * instances): aligned self-pair loss stayed below 0.066 at kappa 0.07,
 * a shuffled pairing never dropped under 6.0, and unrelated tables sat
 * within 0.18 of log(10) at kappa 1.0.
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, describe, expect, it } from "vitest";

import { DimMismatchError } from "../src/errors.js";
import { exportEmbeddings } from "../src/export.js";
import { alignmentProbe } from "../src/probe.js";
import { readSemb, writeSemb } from "../src/semb.js";

function available(cmd: string, args: string[]): boolean {
  const proc = spawnSync(cmd, args, { encoding: "utf8" });
  return proc.status === 0;
}

const ready =
  available("scotkit", ["--help"]) &&
  available("python3", ["-c", "import scotkit"]);

const dir = mkdtempSync(join(tmpdir(), "interop-"));
afterAll(() => rmSync(dir, { recursive: true, force: true }));

const CAPTIONS = [
  "a red dress with long sleeves",
  "a plain blue shirt",
  "a striped canvas bag",
  "a black leather jacket",
  "a floral summer skirt",
  "a shiny silver scarf",
  "a fitted green sweater",
  "an orange knit hat",
  "a white cotton coat",
  "a brown suede sofa",
];

const OTHER_CAPTIONS = [
  "a velvet evening gown",
  "a gray wool cardigan",
  "a yellow rain poncho",
  "a checked flannel shirt",
  "a quilted down vest",
  "a pleated tennis skirt",
  "a denim trucker jacket",
  "a ribbed turtleneck top",
  "a hooded terry robe",
  "a tweed walking cape",
];

function writeManifest(name: string, entries: Array<[string, string]>): string {
  const path = join(dir, name);
  writeFileSync(
    path,
    entries.map(([id, source]) => JSON.stringify({ id, source })).join("\n") + "\n",
  );
  return path;
}

/** Caption manifest plus "image" files whose bytes are the same captions,
 * so the stand-in encoder lands both modalities on identical rows.
 */
function exportMatchedPair(prefix: string, encoder = "hash-lexicon") {
  const ids = CAPTIONS.map((_, i) => `item-${i}`);
  const textManifest = writeManifest(
    `${prefix}-text.jsonl`,
    ids.map((id, i) => [id, CAPTIONS[i]!]),
  );
  for (let i = 0; i < ids.length; i++) {
    writeFileSync(join(dir, `${prefix}-${i}.bin`), CAPTIONS[i]!);
  }
  const imageManifest = writeManifest(
    `${prefix}-image.jsonl`,
    ids.map((id, i) => [id, `${prefix}-${i}.bin`]),
  );
  const textOut = join(dir, `${prefix}-text.semb`);
  const imageOut = join(dir, `${prefix}-image.semb`);
  exportEmbeddings({
    encoderName: encoder,
    manifestPath: textManifest,
    outPath: textOut,
    modality: "text",
  });
  exportEmbeddings({
    encoderName: encoder,
    manifestPath: imageManifest,
    outPath: imageOut,
    modality: "image",
  });
  return { ids, textOut, imageOut };
}

describe.skipIf(!ready)("exported tables feed the training package", () => {
  it("a 10-item export passes the Python reader with ids and tag intact", () => {
    const { ids, textOut } = exportMatchedPair("accept");
    const probe = spawnSync(
      "python3",
      [
        "-c",
        [
          "import json, sys",
          "import numpy as np",
          "from scotkit.store import read_table",
          "t = read_table(sys.argv[1])",
          "err = float(np.max(np.abs(np.linalg.norm(t.matrix.astype('float64'), axis=1) - 1)))",
          "print(json.dumps({'ids': list(t.ids), 'dim': t.dim, 'tag': t.source_tag, 'norm_err': err}))",
        ].join("\n"),
        textOut,
      ],
      { encoding: "utf8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    const got = JSON.parse(probe.stdout);
    expect(got.ids).toEqual(ids);
    expect(got.dim).toBe(64);
    expect(got.tag).toBe("hash-lexicon");
    expect(got.norm_err).toBeLessThan(1e-3);
  });

  it("survives a Python read-write cycle byte-for-byte", () => {
    const { textOut } = exportMatchedPair("cycle");
    const back = join(dir, "cycle-back.semb");
    const proc = spawnSync(
      "python3",
      [
        "-c",
        "import sys\nfrom scotkit.store import read_table, write_table\nwrite_table(read_table(sys.argv[1]), sys.argv[2])",
        textOut,
        back,
      ],
      { encoding: "utf8" },
    );
    expect(proc.status, proc.stderr).toBe(0);
    expect(readFileSync(back).equals(readFileSync(textOut))).toBe(true);
    const reread = readSemb(back);
    expect(reread.ids).toEqual(readSemb(textOut).ids);
  });

  it("probes matched pairs as strictly better aligned than shuffled ones", () => {
    const { ids, textOut, imageOut } = exportMatchedPair("pairing");
    const matched = alignmentProbe(imageOut, textOut, 0.07);
    expect(matched.pairs).toBe(10);
    expect(matched.meanCosine).toBeGreaterThan(0.999999);
    expect(matched.clipI2t).toBeGreaterThanOrEqual(0);
    expect(matched.clipI2t).toBeLessThan(0.2);

    // same rows, ids rotated by one: every query's true partner moves
    // off the diagonal
    const table = readSemb(textOut);
    const rotated = ids.map((_, i) => ids[(i + 1) % ids.length]!);
    const shuffledOut = join(dir, "pairing-shuffled.semb");
    writeSemb(shuffledOut, table.matrix, rotated, table.dim, table.sourceTag);
    const shuffled = alignmentProbe(imageOut, shuffledOut, 0.07);
    expect(shuffled.pairs).toBe(10);
    expect(matched.clipI2t).toBeLessThan(shuffled.clipI2t);
    expect(shuffled.clipI2t - matched.clipI2t).toBeGreaterThan(1.0);
  });

  it("scores unrelated tables near the uniform-softmax value", () => {
    const { textOut } = exportMatchedPair("uniform");
    const ids = OTHER_CAPTIONS.map((_, i) => `item-${i}`);
    const otherManifest = writeManifest(
      "uniform-other.jsonl",
      ids.map((id, i) => [id, OTHER_CAPTIONS[i]!]),
    );
    const otherOut = join(dir, "uniform-other.semb");
    exportEmbeddings({
      encoderName: "hash-lexicon",
      manifestPath: otherManifest,
      outPath: otherOut,
      modality: "text",
    });
    const probe = alignmentProbe(textOut, otherOut, 1.0);
    expect(Math.abs(probe.clipI2t - Math.log(10))).toBeLessThan(0.35);
  });

  it("surfaces dimension disagreements as DimMismatch", () => {
    const { imageOut } = exportMatchedPair("dims");
    const narrowManifest = writeManifest("dims-narrow.jsonl", [
      ["item-0", CAPTIONS[0]!],
      ["item-1", CAPTIONS[1]!],
    ]);
    const narrowOut = join(dir, "dims-narrow.semb");
    exportEmbeddings({
      encoderName: "hash-lexicon-32",
      manifestPath: narrowManifest,
      outPath: narrowOut,
      modality: "text",
    });
    expect(() => alignmentProbe(imageOut, narrowOut)).toThrow(DimMismatchError);
  });
});
