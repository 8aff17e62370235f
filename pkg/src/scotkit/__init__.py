"""Composed image retrieval over frozen-encoder embeddings.

A small combiner network fuses a reference-image embedding with an edit-text
embedding; training uses a margin-gated contrastive loss with hand-derived
gradients; evaluation is exact nearest-neighbor recall.

Submodule imports are deferred so the command line can pin BLAS thread
environment variables before numpy loads.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # errors
    "ScotError": "errors",
    "ConfigError": "errors",
    "DataError": "errors",
    "NumericError": "errors",
    "IoError": "errors",
    # deterministic numerics
    "Pcg32": "tensor",
    "derive_stream": "tensor",
    "l2_normalize": "tensor",
    "cosine_matrix": "tensor",
    "logsumexp": "tensor",
    # embedding store
    "EmbeddingTable": "store",
    "read_table": "store",
    "write_table": "store",
    "TextTriplet": "store",
    "save_triplets": "store",
    "load_triplets": "store",
    "EvalQuery": "store",
    "save_queries": "store",
    "load_queries": "store",
    "TrainingExample": "store",
    "assemble_training_set": "store",
    # loss
    "LossConfig": "loss",
    "LossBreakdown": "loss",
    "total_loss": "loss",
    "margin_gate": "loss",
    "clip_i2t_loss": "loss",
    # combiner network
    "CombinerParams": "combiner",
    "init_params": "combiner",
    "forward": "combiner",
    "forward_batch": "combiner",
    "backward_batch": "combiner",
    "save_checkpoint": "combiner",
    "load_checkpoint": "combiner",
    # training
    "TrainConfig": "training",
    "AdamWConfig": "training",
    "train": "training",
    "make_batches": "training",
    # retrieval
    "GalleryIndex": "retrieval",
    "RankedResult": "retrieval",
    "search": "retrieval",
    "compose_query": "retrieval",
    "baseline_query": "retrieval",
    "recall_at_k": "retrieval",
    "recall_subset_at_k": "retrieval",
    "evaluate": "retrieval",
    "EvalReport": "retrieval",
    "EVAL_MODES": "retrieval",
    # synthetic world
    "ConceptWorld": "synthetic",
    "SyntheticDataset": "synthetic",
    "gen_world": "synthetic",
    "gen_dataset": "synthetic",
    "write_dataset": "synthetic",
    # triplet generation
    "GrammarRule": "triplets",
    "DEFAULT_RULES": "triplets",
    "gen_template_triplet": "triplets",
    "validate_triplet": "triplets",
    "LlmEndpointConfig": "triplets",
    "llm_generate": "triplets",
    "llm_generate_bulk": "triplets",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    try:
        module_name = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    value = getattr(importlib.import_module(f".{module_name}", __name__), name)
    globals()[name] = value  # cache so the import runs once
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
