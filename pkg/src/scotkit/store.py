"""Embedding tables, the SEMB binary file format, and newline-delimited records.

SEMB layout (all little-endian):

    magic   8 bytes  b"SCOTEMB1"
    version u32      1
    count   u64      number of rows
    dim     u32      row width
    dtype   u8       0 = float32 (only defined value)
    pad     3 bytes  zero
    payload count*dim float32, row-major
    ids     count x (u16 byte length + UTF-8)
    tag     u16 byte length + UTF-8 source tag

Rows are validated on ingestion: norms below 1e-12 are rejected as zero
vectors, deviations from unit norm up to 1e-3 are repaired by re-normalizing,
larger deviations are rejected.  Rows already unit within 1e-6 are kept
bit-for-bit so write/read round-trips are exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CorruptPayloadError,
    DimMismatchError,
    EmptyJoinError,
    InvariantViolationError,
    IoError,
    NotNormalizedError,
    ParseError,
    VersionMismatchError,
    ZeroVectorError,
)
from .tensor import ZERO_NORM_FLOOR, row_norms

SEMB_MAGIC = b"SCOTEMB1"
SEMB_VERSION = 1
_HEADER = struct.Struct("<8sIQIB3s")

NORM_KEEP_TOL = 1e-6    # already unit: keep bits untouched
NORM_REPAIR_TOL = 1e-3  # repairable by re-normalization


def _conform_rows(matrix: np.ndarray, context: str) -> np.ndarray:
    """Validate and, where needed, re-normalize rows to unit norm."""
    if matrix.ndim != 2:
        raise DimMismatchError(f"{context}: expected 2-D matrix, got {matrix.ndim}-D")
    if not np.all(np.isfinite(matrix)):
        raise InvariantViolationError(f"{context}: non-finite embedding values")
    norms = row_norms(matrix)
    if np.any(norms < ZERO_NORM_FLOOR):
        row = int(np.argmax(norms < ZERO_NORM_FLOOR))
        raise ZeroVectorError(f"{context}: row {row} has zero norm")
    dev = np.abs(norms - 1.0)
    if np.any(dev > NORM_REPAIR_TOL):
        row = int(np.argmax(dev))
        raise NotNormalizedError(
            f"{context}: row {row} norm {norms[row]:.6f} deviates beyond {NORM_REPAIR_TOL}"
        )
    fix = dev > NORM_KEEP_TOL
    if np.any(fix):
        matrix = matrix.copy()
        scaled = matrix[fix].astype(np.float64) / norms[fix, None]
        matrix[fix] = scaled.astype(matrix.dtype)
    return matrix


@dataclass
class EmbeddingTable:
    """Immutable-by-convention id-aligned embedding matrix.

    `matrix` is float32 with one unit-norm row per id; `source_tag` records
    which encoder produced the rows.
    """

    ids: list[str]
    matrix: np.ndarray
    source_tag: str
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.ids) != self.matrix.shape[0]:
            raise InvariantViolationError(
                f"{len(self.ids)} ids vs {self.matrix.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            seen: set[str] = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise InvariantViolationError(f"duplicate id {dup!r}")
        self.matrix = _conform_rows(
            np.ascontiguousarray(self.matrix, dtype=np.float32), "embedding table"
        )
        self._index = {i: k for k, i in enumerate(self.ids)}

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __contains__(self, id_: str) -> bool:
        return id_ in self._index

    def row(self, id_: str) -> np.ndarray:
        try:
            return self.matrix[self._index[id_]]
        except KeyError:
            raise KeyError(f"id {id_!r} not in table") from None

    def position(self, id_: str) -> int:
        return self._index[id_]


def write_table(table: EmbeddingTable, path) -> None:
    """Serialize a table to SEMB."""
    for id_ in table.ids:
        if len(id_.encode("utf-8")) > 0xFFFF:
            raise InvariantViolationError(f"id too long for u16 length: {id_[:32]!r}...")
    tag = table.source_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise InvariantViolationError("source tag too long for u16 length")
    parts = [
        _HEADER.pack(SEMB_MAGIC, SEMB_VERSION, table.count, table.dim, 0, b"\0\0\0"),
        np.ascontiguousarray(table.matrix, dtype="<f4").tobytes(),
    ]
    for id_ in table.ids:
        enc = id_.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
    parts.append(struct.pack("<H", len(tag)) + tag)
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_table(path) -> EmbeddingTable:
    """Read and validate a SEMB file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise BadMagicError(f"{path}: file shorter than header")
    magic, version, count, dim, dtype_code, _pad = _HEADER.unpack_from(blob, 0)
    if magic != SEMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != SEMB_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, reader supports {SEMB_VERSION}")
    if dtype_code != 0:
        raise CorruptPayloadError(f"{path}: unknown dtype code {dtype_code}")
    off = _HEADER.size
    need = count * dim * 4
    if len(blob) < off + need:
        raise CorruptPayloadError(f"{path}: payload truncated")
    matrix = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    matrix = matrix.reshape(count, dim).copy()
    off += need
    ids = []
    for k in range(count):
        if len(blob) < off + 2:
            raise CorruptPayloadError(f"{path}: id block truncated at entry {k}")
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + n:
            raise CorruptPayloadError(f"{path}: id {k} truncated")
        try:
            ids.append(blob[off : off + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptPayloadError(f"{path}: id {k} is not valid UTF-8") from exc
        off += n
    if len(blob) < off + 2:
        raise CorruptPayloadError(f"{path}: source tag missing")
    (n,) = struct.unpack_from("<H", blob, off)
    off += 2
    if len(blob) < off + n:
        raise CorruptPayloadError(f"{path}: source tag truncated")
    try:
        tag = blob[off : off + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptPayloadError(f"{path}: source tag is not valid UTF-8") from exc
    off += n
    if off != len(blob):
        raise CorruptPayloadError(f"{path}: {len(blob) - off} trailing bytes")
    return EmbeddingTable(ids=ids, matrix=matrix, source_tag=tag)


# --- text records -------------------------------------------------------------


@dataclass(frozen=True)
class TextTriplet:
    """A caption, an edit instruction, and the edited caption."""

    id: str
    caption: str
    modification: str
    modified_caption: str

    def __post_init__(self) -> None:
        for name in ("caption", "modification", "modified_caption"):
            val = getattr(self, name)
            if not val:
                raise InvariantViolationError(f"triplet {self.id!r}: empty {name}")
            if len(val) > 512:
                raise InvariantViolationError(f"triplet {self.id!r}: {name} exceeds 512 chars")
        if self.modified_caption == self.caption:
            raise InvariantViolationError(
                f"triplet {self.id!r}: modified caption equals the original"
            )


_TRIPLET_KEYS = {"id", "caption", "modification", "modified_caption"}


def save_triplets(triplets, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for t in triplets:
                fh.write(json.dumps({
                    "id": t.id,
                    "caption": t.caption,
                    "modification": t.modification,
                    "modified_caption": t.modified_caption,
                }, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_triplets(path) -> list[TextTriplet]:
    """Parse a newline-delimited triplet file; errors carry 1-based line numbers."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    seen: set[str] = set()
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{ln}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or not _TRIPLET_KEYS.issubset(rec):
            missing = _TRIPLET_KEYS - set(rec) if isinstance(rec, dict) else _TRIPLET_KEYS
            raise ParseError(f"{path}:{ln}: missing fields {sorted(missing)}")
        if not all(isinstance(rec[k], str) for k in _TRIPLET_KEYS):
            raise ParseError(f"{path}:{ln}: non-string field")
        if rec["id"] in seen:
            raise InvariantViolationError(f"{path}:{ln}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        try:
            out.append(TextTriplet(
                id=rec["id"],
                caption=rec["caption"],
                modification=rec["modification"],
                modified_caption=rec["modified_caption"],
            ))
        except InvariantViolationError as exc:
            raise InvariantViolationError(f"{path}:{ln}: {exc}") from exc
    return out


@dataclass(frozen=True)
class EvalQuery:
    """One retrieval evaluation case.

    `subset_ids`, when present, is the candidate pool for subset ranking and
    must contain the target plus at least one other candidate.
    """

    id: str
    reference_id: str
    modification_text: str
    target_id: str
    subset_ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.subset_ids is not None:
            if len(self.subset_ids) < 2:
                raise InvariantViolationError(f"query {self.id!r}: subset needs >= 2 members")
            if len(set(self.subset_ids)) != len(self.subset_ids):
                raise InvariantViolationError(f"query {self.id!r}: duplicate subset ids")
            if self.target_id not in self.subset_ids:
                raise InvariantViolationError(f"query {self.id!r}: subset omits the target")


def save_queries(queries, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for q in queries:
                rec = {
                    "id": q.id,
                    "reference_id": q.reference_id,
                    "modification_text": q.modification_text,
                    "target_id": q.target_id,
                }
                if q.subset_ids is not None:
                    rec["subset_ids"] = list(q.subset_ids)
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_queries(path) -> list[EvalQuery]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    seen: set[str] = set()
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{ln}: invalid JSON ({exc.msg})") from exc
        needed = {"id", "reference_id", "modification_text", "target_id"}
        if not isinstance(rec, dict) or not needed.issubset(rec):
            raise ParseError(f"{path}:{ln}: missing fields")
        if rec["id"] in seen:
            raise InvariantViolationError(f"{path}:{ln}: duplicate query id {rec['id']!r}")
        seen.add(rec["id"])
        subset = rec.get("subset_ids")
        try:
            out.append(EvalQuery(
                id=rec["id"],
                reference_id=rec["reference_id"],
                modification_text=rec["modification_text"],
                target_id=rec["target_id"],
                subset_ids=tuple(subset) if subset is not None else None,
            ))
        except InvariantViolationError as exc:
            raise InvariantViolationError(f"{path}:{ln}: {exc}") from exc
    return out


# --- training-set assembly ------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    """Embeddings for one training case: reference image, edit text, target text, caption."""

    id: str
    image: np.ndarray           # V, reference image embedding
    modification: np.ndarray    # T_m, edit instruction embedding
    target_text: np.ndarray     # T_u, edited caption embedding
    original_text: np.ndarray   # T, unedited caption embedding


@dataclass(frozen=True)
class AssembledSet:
    examples: list[TrainingExample]
    missing: dict[str, list[str]]  # id -> table roles the id is absent from


def assemble_training_set(
    images: EmbeddingTable,
    mods: EmbeddingTable,
    targets: EmbeddingTable,
    originals: EmbeddingTable,
) -> AssembledSet:
    """Join the four tables by id.

    Produces one TrainingExample per id present in all four tables, in the id
    order of `images`.  Ids missing from any table are reported, not silently
    dropped.  Raises EmptyJoinError when no id survives the join and
    DimMismatchError when table dims disagree.
    """
    tables = {"images": images, "mods": mods, "targets": targets, "originals": originals}
    dims = {name: t.dim for name, t in tables.items()}
    if len(set(dims.values())) != 1:
        raise DimMismatchError(f"table dims disagree: {dims}")
    all_ids: list[str] = []
    seen: set[str] = set()
    for t in tables.values():
        for id_ in t.ids:
            if id_ not in seen:
                seen.add(id_)
                all_ids.append(id_)
    missing: dict[str, list[str]] = {}
    for id_ in all_ids:
        absent = [name for name, t in tables.items() if id_ not in t]
        if absent:
            missing[id_] = absent
    examples = [
        TrainingExample(
            id=id_,
            image=images.row(id_),
            modification=mods.row(id_),
            target_text=targets.row(id_),
            original_text=originals.row(id_),
        )
        for id_ in images.ids
        if id_ not in missing
    ]
    if not examples:
        raise EmptyJoinError("no id is present in all four tables")
    return AssembledSet(examples=examples, missing=missing)
