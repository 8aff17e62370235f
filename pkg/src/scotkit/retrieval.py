"""Exact gallery retrieval and the Recall@K evaluation protocol.

Galleries are small enough to score exhaustively, so search is a full
cosine sweep with a fixed tie rule (descending score, then ascending id).
Exactness matters more than speed here: the test suite compares every
ranking against a brute-force oracle, and subset rankings must be bitwise
restrictions of the global ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .combiner import CombinerParams, forward
from .errors import (
    BadKError,
    ConfigError,
    DataError,
    DimMismatchError,
    MissingGroundTruthError,
    NotNormalizedError,
    SubsetMissingTargetError,
    UnknownSubsetIdError,
)
from .store import EmbeddingTable, EvalQuery
from .tensor import l2_normalize, row_norms

BASELINE_MODES = ("image_only", "text_only", "image_plus_text")
EVAL_MODES = ("scot",) + BASELINE_MODES

# gallery rows must already be unit vectors; same bound the store repairs to
GALLERY_NORM_TOL = 1e-3


class GalleryIndex:
    """Immutable id-addressable gallery of unit-norm image embeddings."""

    def __init__(self, table: EmbeddingTable):
        dev = np.abs(row_norms(table.matrix) - 1.0)
        if dev.size and float(dev.max()) > GALLERY_NORM_TOL:
            worst = table.ids[int(dev.argmax())]
            raise NotNormalizedError(
                f"gallery row {worst!r} deviates from unit norm by {float(dev.max()):.3g}"
            )
        self.table = table
        # precomputed ascending-id ranks make the tie rule a cheap sort key
        order = sorted(range(table.count), key=lambda i: table.ids[i])
        self._id_rank = np.empty(table.count, dtype=np.int64)
        for rank, row in enumerate(order):
            self._id_rank[row] = rank

    @property
    def count(self) -> int:
        return self.table.count

    @property
    def dim(self) -> int:
        return self.table.dim

    def __contains__(self, gallery_id: str) -> bool:
        return gallery_id in self.table

    def scores(self, q: np.ndarray) -> np.ndarray:
        """Cosine of q against every row, computed in float64."""
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimMismatchError(f"query dim {q.shape} vs gallery dim {self.dim}")
        return self.table.matrix.astype(np.float64) @ q

    def order(self, scores: np.ndarray) -> np.ndarray:
        """Row indices sorted by (descending score, ascending id)."""
        return np.lexsort((self._id_rank, -scores))


@dataclass(frozen=True)
class RankedResult:
    """Gallery ids ordered best-first for one query."""

    query_id: str
    ids: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.scores):
            raise DimMismatchError("ids and scores lengths differ")

    def rank_of(self, gallery_id: str) -> int | None:
        """1-based rank, or None when the id is not in the listing."""
        try:
            return self.ids.index(gallery_id) + 1
        except ValueError:
            return None

    def to_json(self) -> str:
        return json.dumps(
            {"query_id": self.query_id, "ids": list(self.ids), "scores": list(self.scores)}
        )


def compose_query(params: CombinerParams, v_ref: np.ndarray, t_m: np.ndarray) -> np.ndarray:
    """Run the composition network in eval mode on one (image, text) pair."""
    composed, _, _ = forward(params, v_ref, t_m, mode="eval")
    return composed


def baseline_query(mode: str, v: np.ndarray, t_m: np.ndarray) -> np.ndarray:
    """Checkpoint-free query vectors: the image, the text, or their sum."""
    if mode == "image_only":
        return np.asarray(v).copy()
    if mode == "text_only":
        return np.asarray(t_m).copy()
    if mode == "image_plus_text":
        return l2_normalize(np.asarray(v) + np.asarray(t_m))
    raise ConfigError(f"unknown baseline mode {mode!r}; choose from {BASELINE_MODES}")


def search(index: GalleryIndex, q: np.ndarray, k: int) -> RankedResult:
    """Top-k rows by cosine. Exact full sweep; ties go to the smaller id."""
    if not 1 <= k <= index.count:
        raise BadKError(f"k={k} outside [1, {index.count}]")
    scores = index.scores(q)
    top = index.order(scores)[:k]
    return RankedResult(
        query_id="",
        ids=tuple(index.table.ids[i] for i in top),
        scores=tuple(float(scores[i]) for i in top),
    )


def recall_at_k(results, ground_truth: dict[str, str], k: int) -> float:
    """Fraction of queries whose target appears within the first k ids.

    A target absent from a (possibly truncated) listing counts as a miss;
    a query id absent from `ground_truth` is an error.
    """
    results = list(results)
    if k < 1:
        raise BadKError(f"k={k} must be >= 1")
    if not results:
        raise MissingGroundTruthError("no results to score")
    hits = 0
    for res in results:
        if res.query_id not in ground_truth:
            raise MissingGroundTruthError(f"no ground truth for query {res.query_id!r}")
        rank = res.rank_of(ground_truth[res.query_id])
        hits += 1 if rank is not None and rank <= k else 0
    return hits / len(results)


def _subset_ranking(
    index: GalleryIndex, scores: np.ndarray, subset_ids, query_id: str
) -> tuple[tuple[str, ...], tuple[float, ...]]:
    """Restriction of the global ranking to the subset, same scores and tie rule."""
    rows = []
    for sid in subset_ids:
        if sid not in index:
            raise UnknownSubsetIdError(f"query {query_id!r}: subset id {sid!r} not in gallery")
        rows.append(index.table.position(sid))
    rows = np.asarray(rows, dtype=np.int64)
    sub_order = np.lexsort((index._id_rank[rows], -scores[rows]))
    picked = rows[sub_order]
    return (
        tuple(index.table.ids[i] for i in picked),
        tuple(float(scores[i]) for i in picked),
    )


def _query_vector(
    index: GalleryIndex,
    params: CombinerParams | None,
    query: EvalQuery,
    mods_table: EmbeddingTable,
    mode: str,
) -> tuple[np.ndarray, float | None]:
    if query.reference_id not in index:
        raise DataError(f"query {query.id!r}: reference {query.reference_id!r} not in gallery")
    if query.id not in mods_table:
        raise DataError(f"query {query.id!r}: no modification embedding in mods table")
    v_ref = index.table.row(query.reference_id)
    t_m = mods_table.row(query.id)
    if mode == "scot":
        composed, s, _ = forward(params, v_ref, t_m, mode="eval")
        return composed, float(s)
    return baseline_query(mode, v_ref, t_m), None


def recall_subset_at_k(
    index: GalleryIndex,
    params: CombinerParams | None,
    queries,
    mods_table: EmbeddingTable,
    k: int,
    mode: str = "scot",
) -> float:
    """Recall@k where each query ranks only its own labelled candidate pool."""
    queries = list(queries)
    if k < 1:
        raise BadKError(f"k={k} must be >= 1")
    if not queries:
        raise MissingGroundTruthError("no queries to score")
    hits = 0
    for query in queries:
        if query.subset_ids is None:
            raise SubsetMissingTargetError(f"query {query.id!r} has no candidate subset")
        q, _ = _query_vector(index, params, query, mods_table, mode)
        ids, _ = _subset_ranking(index, index.scores(q), query.subset_ids, query.id)
        if query.target_id in ids[:k]:
            hits += 1
    return hits / len(queries)


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one mode, plus the raw rankings they were computed from."""

    mode: str
    n_queries: int
    recall: dict[int, float]
    recall_subset: dict[int, float]
    mean_s: float | None
    s_values: tuple[float, ...]
    results: tuple[RankedResult, ...]

    def to_text(self) -> str:
        """Flat metric=K=value lines; scalars as plain key=value."""
        lines = [f"mode={self.mode}", f"queries={self.n_queries}"]
        for k in sorted(self.recall):
            lines.append(f"recall={k}={self.recall[k]:.4f}")
        for k in sorted(self.recall_subset):
            lines.append(f"recall_subset={k}={self.recall_subset[k]:.4f}")
        if self.mean_s is not None:
            lines.append(f"mean_s={self.mean_s:.4f}")
        return "\n".join(lines) + "\n"

    def metric_records(self) -> list[dict]:
        recs = [
            {"metric": "recall", "k": k, "value": self.recall[k]} for k in sorted(self.recall)
        ]
        recs += [
            {"metric": "recall_subset", "k": k, "value": self.recall_subset[k]}
            for k in sorted(self.recall_subset)
        ]
        if self.mean_s is not None:
            recs.append({"metric": "mean_s", "value": self.mean_s})
        return recs


def dump_results(results, path) -> None:
    """One JSON record per query, full ranking, for offline audits."""
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(res.to_json() + "\n")


def save_metric_records(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.metric_records():
            fh.write(json.dumps(rec) + "\n")


def evaluate(
    index: GalleryIndex,
    params: CombinerParams | None,
    queries,
    mods_table: EmbeddingTable,
    ks,
    mode: str = "scot",
    exclude_reference: bool = False,
) -> EvalReport:
    """Score every query, rank the gallery, and report R@K per requested K.

    Subset recall is reported over the queries that carry candidate pools.
    In scot mode the report also carries each query's mixing scalar s.
    """
    queries = list(queries)
    ks = sorted(set(int(k) for k in ks))
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {EVAL_MODES}")
    if mode == "scot" and params is None:
        raise ConfigError("scot mode needs trained combiner parameters")
    if not queries:
        raise MissingGroundTruthError("no queries to score")
    if not ks:
        raise BadKError("no K values requested")
    for k in ks:
        if not 1 <= k <= index.count:
            raise BadKError(f"k={k} outside [1, {index.count}]")

    results: list[RankedResult] = []
    subset_hits: dict[int, int] = {k: 0 for k in ks}
    n_subset = 0
    s_values: list[float] = []
    for query in queries:
        q, s = _query_vector(index, params, query, mods_table, mode)
        if s is not None:
            s_values.append(s)
        scores = index.scores(q)
        order = index.order(scores)
        if exclude_reference:
            ref_row = index.table.position(query.reference_id)
            order = order[order != ref_row]
        results.append(
            RankedResult(
                query_id=query.id,
                ids=tuple(index.table.ids[i] for i in order),
                scores=tuple(float(scores[i]) for i in order),
            )
        )
        if query.subset_ids is not None:
            n_subset += 1
            sub_ids, _ = _subset_ranking(index, scores, query.subset_ids, query.id)
            for k in ks:
                if query.target_id in sub_ids[:k]:
                    subset_hits[k] += 1

    truth = {q.id: q.target_id for q in queries}
    recall = {k: recall_at_k(results, truth, k) for k in ks}
    recall_subset = (
        {k: subset_hits[k] / n_subset for k in ks} if n_subset else {}
    )
    return EvalReport(
        mode=mode,
        n_queries=len(queries),
        recall=recall,
        recall_subset=recall_subset,
        mean_s=float(np.mean(s_values)) if s_values else None,
        s_values=tuple(s_values),
        results=tuple(results),
    )


def report_from_dump(path, ground_truth: dict[str, str], ks) -> dict[int, float]:
    """Recompute R@K from a dumped ranking file; consistency check for audits."""
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            results.append(
                RankedResult(
                    query_id=rec["query_id"],
                    ids=tuple(rec["ids"]),
                    scores=tuple(rec["scores"]),
                )
            )
    return {k: recall_at_k(results, ground_truth, k) for k in ks}
