import { spawnSync } from "node:child_process";

import { DimMismatchError, ProbeError } from "./errors.js";

export interface ProbeResult {
  pairs: number;
  meanCosine: number;
  /** Paired softmax loss at the probe temperature; lower is better aligned. */
  clipI2t: number;
}

export interface ProbeOptions {
  /** Training-side executable; default `scotkit`, or $SCOTKIT_BIN. */
  bin?: string;
}

const LINE = /^pairs=(\d+) mean_cosine=(-?\d+\.\d+) clip_i2t=(-?\d+\.\d+)\s*$/m;

/** Alignment health check for a matched image/text table pair.
 *
 * Shells out to the training-side CLI (`scotkit align --kappa ...`) so the
 * exported files themselves are what gets validated, then parses its
 * report.  Near-zero loss at small kappa means the pairing is tight;
 * unrelated tables sit near log(pairs).
 */
export function alignmentProbe(
  imageSemb: string,
  textSemb: string,
  kappa = 0.07,
  options: ProbeOptions = {},
): ProbeResult {
  const bin = options.bin ?? process.env.SCOTKIT_BIN ?? "scotkit";
  const proc = spawnSync(
    bin,
    [
      "align",
      "--left",
      imageSemb,
      "--right",
      textSemb,
      "--kappa",
      String(kappa),
    ],
    { encoding: "utf8" },
  );
  if (proc.error) {
    throw new ProbeError(`cannot run '${bin}': ${proc.error.message}`);
  }
  if (proc.status !== 0) {
    const stderr = (proc.stderr ?? "").trim();
    if (/dim mismatch/.test(stderr)) {
      throw new DimMismatchError(stderr);
    }
    throw new ProbeError(
      `'${bin} align' exited ${proc.status}: ${stderr || "(no stderr)"}`,
    );
  }
  const m = LINE.exec(proc.stdout ?? "");
  if (!m) {
    throw new ProbeError(`unexpected align output: ${(proc.stdout ?? "").trim()}`);
  }
  return {
    pairs: Number(m[1]),
    meanCosine: Number(m[2]),
    clipI2t: Number(m[3]),
  };
}
