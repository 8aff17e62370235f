export {
  DimMismatchError,
  EncoderLoadError,
  ExportError,
  ManifestError,
  ProbeError,
  SembFormatError,
  UnreadableInputError,
} from "./errors.js";
export {
  hashLexicon,
  registerEncoder,
  resolveEncoder,
  type Encoder,
  type Modality,
} from "./encoders.js";
export { readManifest, type ManifestEntry } from "./manifest.js";
export {
  readSemb,
  tableRow,
  writeSemb,
  SEMB_MAGIC,
  SEMB_VERSION,
  type SembTable,
} from "./semb.js";
export { exportEmbeddings, type ExportJob, type ExportSummary } from "./export.js";
export { alignmentProbe, type ProbeOptions, type ProbeResult } from "./probe.js";
