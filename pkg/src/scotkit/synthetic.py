"""Deterministic synthetic world of orthonormal concepts with controlled noise.

Text and image embeddings of the same concept are noisy samples around a
shared direction, so the text side is a usable proxy for the image side by
construction. Every acceptance-scale experiment in the test suite runs on
worlds from this module: rankings have known optima, corruption rates are
exact, and every draw comes from a named substream of one seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import BadDimsError, BadRangeError, BadSizesError
from .store import (
    EmbeddingTable,
    EvalQuery,
    TextTriplet,
    TrainingExample,
    save_queries,
    save_triplets,
    write_table,
)
from .tensor import Pcg32, derive_stream, l2_normalize

# substream labels; one generator per purpose so draws never interleave
_S_BASIS = 0xB0A5
_S_TRAIN_PICKS = 0x7A01
_S_TRAIN_NOISE = 0x7A02
_S_GALLERY = 0x7A03
_S_EVAL_PICKS = 0x7A04
_S_EVAL_NOISE = 0x7A05
_S_IMG_TARGETS = 0x7A06

SUBSET_SIZE = 6

# eval queries are resampled until the best concept-b candidate beats the
# runner-up by this cosine margin, so targets are never near-ties
TARGET_GAP = 0.015
_GAP_ATTEMPTS = 1000


@dataclass(frozen=True)
class ConceptWorld:
    """C orthonormal concept directions in R^d plus per-modality noise scales."""

    c: int
    d: int
    basis: np.ndarray  # (c, d) float32, rows orthonormal
    sigma_img: float
    sigma_txt: float
    seed: int

    def __post_init__(self) -> None:
        gram = self.basis.astype(np.float64) @ self.basis.astype(np.float64).T
        if not np.allclose(gram, np.eye(self.c), atol=1e-6):
            raise BadDimsError("basis rows are not orthonormal within 1e-6")

    def direction(self, concept: int) -> np.ndarray:
        return self.basis[concept]


def gen_world(c: int, d: int, sigma_img: float, sigma_txt: float, seed: int) -> ConceptWorld:
    """Orthonormalize a seeded Gaussian matrix and keep the first c rows."""
    if not 1 <= c <= d:
        raise BadDimsError(f"need 1 <= C <= d, got C={c}, d={d}")
    for name, val in (("sigma_img", sigma_img), ("sigma_txt", sigma_txt)):
        if not 0.0 <= val < 0.5:
            raise BadRangeError(f"{name}={val} outside [0, 0.5)")
    rng = Pcg32(seed, seq=derive_stream(_S_BASIS))
    square = rng.normal(d * d).reshape(d, d)
    q, r = np.linalg.qr(square)
    q = q * np.sign(np.diag(r))  # canonical sign, independent of LAPACK choices
    basis = np.ascontiguousarray(q.T[:c]).astype(np.float32)
    return ConceptWorld(
        c=c, d=d, basis=basis, sigma_img=sigma_img, sigma_txt=sigma_txt, seed=seed
    )


@dataclass(frozen=True)
class SyntheticDataset:
    """Everything one experiment needs, in memory and id-addressable."""

    world: ConceptWorld
    examples: list[TrainingExample]
    queries: list[EvalQuery]
    gallery: EmbeddingTable
    eval_mods: EmbeddingTable       # modification embeddings keyed by query id
    image_targets: EmbeddingTable   # per-example target images for the ablation
    triplets: list[TextTriplet]
    corrupted_ids: frozenset[str]   # example ids whose image target is wrong-concept
    gallery_concepts: dict[str, int]
    example_concepts: dict[str, tuple[int, int]]  # example id -> (a, b)


def _noisy(direction: np.ndarray, sigma: float, rng: Pcg32) -> np.ndarray:
    """normalize(direction + sigma * per-coordinate Gaussian), as float32."""
    sample = direction.astype(np.float64) + sigma * rng.normal(direction.shape[0])
    return l2_normalize(sample).astype(np.float32)


def _pick_pair(rng: Pcg32, c: int) -> tuple[int, int]:
    a = int(rng.uniform(0, c))
    b = (a + 1 + int(rng.uniform(0, c - 1))) % c  # uniform over the other c-1
    return a, b


def gen_dataset(
    world: ConceptWorld,
    n_train: int,
    n_eval: int,
    gallery_size: int,
    seed: int,
    corrupt_rate: float = 0.0,
    target_gap: float = TARGET_GAP,
) -> SyntheticDataset:
    """Sample a full concept-swap task from the world.

    Each training example swaps concept a for concept b: the image sits at
    e_a, the modification text at e_b - e_a, and the edited caption at e_b.
    The eval target is the concept-b gallery item closest to the ideal
    linear fusion of the actual reference and modification vectors, so a
    composer that recovers that fusion solves the task outright. Queries
    whose two best candidates are separated by less than `target_gap` are
    resampled (bounded attempts, best gap kept), keeping targets
    unambiguous without touching the noise model.
    """
    if world.c < 2:
        raise BadSizesError("need at least 2 concepts to swap between")
    if n_train < 1 or n_eval < 1:
        raise BadSizesError(f"sizes must be positive, got {n_train} train / {n_eval} eval")
    if gallery_size < max(world.c, SUBSET_SIZE):
        raise BadSizesError(
            f"gallery {gallery_size} smaller than max(C, {SUBSET_SIZE}) = "
            f"{max(world.c, SUBSET_SIZE)}"
        )
    if not 0.0 <= corrupt_rate <= 1.0:
        raise BadRangeError(f"corrupt_rate={corrupt_rate} outside [0, 1]")
    if target_gap < 0.0:
        raise BadRangeError(f"target_gap={target_gap} must be >= 0")

    def stream(label: int) -> Pcg32:
        return Pcg32(seed, seq=derive_stream(label))

    # training examples
    picks, noise = stream(_S_TRAIN_PICKS), stream(_S_TRAIN_NOISE)
    examples: list[TrainingExample] = []
    triplets: list[TextTriplet] = []
    example_concepts: dict[str, tuple[int, int]] = {}
    for k in range(n_train):
        a, b = _pick_pair(picks, world.c)
        e_a, e_b = world.direction(a), world.direction(b)
        delta = e_b.astype(np.float64) - e_a.astype(np.float64)
        ex_id = f"tr{k:05d}"
        examples.append(
            TrainingExample(
                id=ex_id,
                image=_noisy(e_a, world.sigma_img, noise),
                modification=_noisy(delta, world.sigma_txt, noise),
                target_text=_noisy(e_b, world.sigma_txt, noise),
                original_text=_noisy(e_a, world.sigma_txt, noise),
            )
        )
        triplets.append(
            TextTriplet(
                id=ex_id,
                caption=f"an instance of concept {a}",
                modification=f"turn concept {a} into concept {b}",
                modified_caption=f"an instance of concept {b}",
            )
        )
        example_concepts[ex_id] = (a, b)

    # gallery: round-robin concepts so every concept has candidates
    g_noise = stream(_S_GALLERY)
    gallery_rows = np.empty((gallery_size, world.d), dtype=np.float32)
    gallery_ids = []
    gallery_concepts: dict[str, int] = {}
    for i in range(gallery_size):
        concept = i % world.c
        gid = f"gal{i:04d}"
        gallery_rows[i] = _noisy(world.direction(concept), world.sigma_img, g_noise)
        gallery_ids.append(gid)
        gallery_concepts[gid] = concept
    gallery = EmbeddingTable(
        ids=gallery_ids, matrix=gallery_rows, source_tag="synthetic/gallery"
    )
    by_concept: dict[int, list[int]] = {}
    for i, gid in enumerate(gallery_ids):
        by_concept.setdefault(gallery_concepts[gid], []).append(i)

    # eval queries
    e_picks, e_noise = stream(_S_EVAL_PICKS), stream(_S_EVAL_NOISE)
    queries: list[EvalQuery] = []
    mod_rows = np.empty((n_eval, world.d), dtype=np.float32)
    gallery64 = gallery_rows.astype(np.float64)
    for j in range(n_eval):
        best_attempt = None  # (negative gap, a, b, ref_row, t_m, target id)
        for _ in range(_GAP_ATTEMPTS):
            a, b = _pick_pair(e_picks, world.c)
            ref_row = by_concept[a][int(e_picks.uniform(0, len(by_concept[a])))]
            t_m = _noisy(
                world.direction(b).astype(np.float64)
                - world.direction(a).astype(np.float64),
                world.sigma_txt,
                e_noise,
            )
            # ideal linear fusion of the actual query inputs; sqrt(2) undoes
            # the unit-normalization of the concept delta
            q_star = l2_normalize(
                gallery64[ref_row] + math.sqrt(2.0) * t_m.astype(np.float64)
            )
            cand = by_concept[b]
            # score the full gallery and restrict, so ties resolve exactly
            # as retrieval resolves them later
            scores = (gallery64 @ q_star)[cand]
            best = min(zip(-scores, (gallery_ids[i] for i in cand)))[1]
            top2 = np.sort(scores)[-2:]
            gap = float(top2[1] - top2[0]) if len(cand) > 1 else math.inf
            if best_attempt is None or gap > -best_attempt[0]:
                best_attempt = (-gap, a, b, ref_row, t_m, best)
            if gap >= target_gap:
                break
        _, a, b, ref_row, t_m, best = best_attempt
        # subset: the target plus distractors sampled without replacement
        pool = [g for g in gallery_ids if g != best]
        chosen = []
        for _ in range(SUBSET_SIZE - 1):
            chosen.append(pool.pop(int(e_picks.uniform(0, len(pool)))))
        qid = f"q{j:04d}"
        queries.append(
            EvalQuery(
                id=qid,
                reference_id=gallery_ids[ref_row],
                modification_text=f"turn concept {a} into concept {b}",
                target_id=best,
                subset_ids=tuple([best] + chosen),
            )
        )
        mod_rows[j] = t_m
    eval_mods = EmbeddingTable(
        ids=[q.id for q in queries], matrix=mod_rows, source_tag="synthetic/eval-mods"
    )

    # per-example image targets, optionally corrupted: a corrupted target
    # shows the reference concept unchanged, the typical retrieval failure
    # where the modification was never applied
    t_rng = stream(_S_IMG_TARGETS)
    target_rows = np.empty((n_train, world.d), dtype=np.float32)
    corrupted = []
    for k, ex in enumerate(examples):
        a, b = example_concepts[ex.id]
        concept = b
        if corrupt_rate > 0.0 and t_rng.uniform(0.0, 1.0) < corrupt_rate:
            concept = a
            corrupted.append(ex.id)
        target_rows[k] = _noisy(world.direction(concept), world.sigma_img, t_rng)
    image_targets = EmbeddingTable(
        ids=[ex.id for ex in examples],
        matrix=target_rows,
        source_tag="synthetic/image-targets",
    )

    return SyntheticDataset(
        world=world,
        examples=examples,
        queries=queries,
        gallery=gallery,
        eval_mods=eval_mods,
        image_targets=image_targets,
        triplets=triplets,
        corrupted_ids=frozenset(corrupted),
        gallery_concepts=gallery_concepts,
        example_concepts=example_concepts,
    )


def write_dataset(dataset: SyntheticDataset, out_dir) -> dict[str, str]:
    """Emit the dataset through the public file formats.

    Returns a name -> path map. Training embeddings land in four aligned
    tables so the standard assemble step reconstructs the examples.
    """
    os.makedirs(out_dir, exist_ok=True)
    ex = dataset.examples
    ids = [e.id for e in ex]

    def table(rows, tag):
        return EmbeddingTable(ids=ids, matrix=np.stack(rows), source_tag=tag)

    paths = {}

    def emit(name, tbl):
        path = os.path.join(out_dir, f"{name}.semb")
        write_table(tbl, path)
        paths[name] = path

    emit("train_images", table([e.image for e in ex], "synthetic/train-images"))
    emit("train_mods", table([e.modification for e in ex], "synthetic/train-mods"))
    emit("train_targets", table([e.target_text for e in ex], "synthetic/train-targets"))
    emit("train_originals", table([e.original_text for e in ex], "synthetic/train-originals"))
    emit("gallery", dataset.gallery)
    emit("eval_mods", dataset.eval_mods)
    emit("image_targets", dataset.image_targets)

    queries_path = os.path.join(out_dir, "queries.jsonl")
    save_queries(dataset.queries, queries_path)
    paths["queries"] = queries_path
    triplets_path = os.path.join(out_dir, "triplets.jsonl")
    save_triplets(dataset.triplets, triplets_path)
    paths["triplets"] = triplets_path
    return paths
