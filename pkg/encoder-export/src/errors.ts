/** Base class for every failure this package raises on purpose. */
export class ExportError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** The named encoder exists but cannot be instantiated (weights, adapters). */
export class EncoderLoadError extends ExportError {}

/** A manifest entry's content could not be obtained; carries the id. */
export class UnreadableInputError extends ExportError {
  readonly id: string;

  constructor(id: string, detail: string) {
    super(`input '${id}': ${detail}`);
    this.id = id;
  }
}

/** Embedding dimensions disagree (encoder output, or probe table pair). */
export class DimMismatchError extends ExportError {}

/** Manifest file is malformed: bad JSON, missing fields, duplicate ids. */
export class ManifestError extends ExportError {}

/** SEMB bytes violate the format or its unit-norm policy. */
export class SembFormatError extends ExportError {}

/** The alignment probe's subprocess failed for a non-dimension reason. */
export class ProbeError extends ExportError {}
