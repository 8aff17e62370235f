/** Command line entry point.
 *
 *   encoder-export export --encoder <name> --manifest <file> \
 *       --out <file.semb> --modality image|text [--batch-size N] [--device HINT]
 *
 * Exit codes: 0 success, 2 usage error, 1 anything else.  Failures print
 * one `error: <message>` line on stderr.
 */

import { exportEmbeddings } from "./export.js";
import { ExportError } from "./errors.js";

const USAGE =
  "usage: encoder-export export --encoder <name> --manifest <file> " +
  "--out <file.semb> --modality image|text [--batch-size N] [--device HINT]";

class UsageError extends Error {}

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i]!;
    if (!flag.startsWith("--")) throw new UsageError(`unexpected argument '${flag}'`);
    const value = argv[i + 1];
    if (value === undefined) throw new UsageError(`${flag} needs a value`);
    if (flags.has(flag)) throw new UsageError(`${flag} given twice`);
    flags.set(flag, value);
  }
  return flags;
}

function requireFlag(flags: Map<string, string>, flag: string): string {
  const value = flags.get(flag);
  if (value === undefined) throw new UsageError(`${flag} is required`);
  return value;
}

export function main(argv: string[]): number {
  try {
    if (argv[0] !== "export") {
      throw new UsageError(argv.length ? `unknown command '${argv[0]}'` : USAGE);
    }
    const flags = parseFlags(argv.slice(1));
    const known = new Set([
      "--encoder",
      "--manifest",
      "--out",
      "--modality",
      "--batch-size",
      "--device",
    ]);
    for (const flag of flags.keys()) {
      if (!known.has(flag)) throw new UsageError(`unknown flag '${flag}'`);
    }
    const modality = requireFlag(flags, "--modality");
    if (modality !== "image" && modality !== "text") {
      throw new UsageError(`--modality must be image or text, got '${modality}'`);
    }
    const batchFlag = flags.get("--batch-size");
    const batchSize = batchFlag === undefined ? undefined : Number(batchFlag);
    if (batchSize !== undefined && !Number.isInteger(batchSize)) {
      throw new UsageError(`--batch-size must be an integer, got '${batchFlag}'`);
    }

    const summary = exportEmbeddings({
      encoderName: requireFlag(flags, "--encoder"),
      manifestPath: requireFlag(flags, "--manifest"),
      outPath: requireFlag(flags, "--out"),
      modality,
      batchSize,
      deviceHint: flags.get("--device"),
    });
    console.log(
      `rows=${summary.count} dim=${summary.dim} out=${summary.outPath} ` +
        `tag=${summary.sourceTag}`,
    );
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`error: ${err.message}`);
      console.error(USAGE);
      return 2;
    }
    if (err instanceof ExportError) {
      console.error(`error: ${err.message}`);
      return 1;
    }
    throw err;
  }
}

if (process.argv[1] && /cli\.(js|ts)$/.test(process.argv[1])) {
  process.exit(main(process.argv.slice(2)));
}
