"""Operator entry point wiring the library into reproducible batch runs.

Heavy modules are imported inside the command handlers, after the thread
environment is pinned: BLAS pools size themselves on first numpy import, so
`--threads` only bites when it runs first.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
Failures print a single machine-parsable line: `error: <category>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    IoError,
    NumericError,
    ParseError,
    ScotError,
)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_TRIPLET_STREAM = 0x7121  # substream label for per-caption grammar draws


def _set_threads(n: int) -> None:
    if n < 1:
        raise ConfigError(f"threads={n} must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _classify(exc: ScotError) -> tuple[int, str]:
    if isinstance(exc, ConfigError):
        return 2, "config"
    if isinstance(exc, NumericError):
        return 4, "numeric"
    return 3, "data"  # DataError, IoError, transport: bad inputs, not bad config


# ---------------------------------------------------------------------------
# flat key=value run configuration


def parse_config_file(path) -> dict[str, str]:
    """Read `key=value` lines; blank lines and `#` comments are skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, kind, raw: str):
    if kind is bool:
        if raw in ("true", "1", "yes"):
            return True
        if raw in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected true/false, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def resolve_config(schema: dict, args: argparse.Namespace) -> dict:
    """Merge flag > config file > schema default, typed per the schema."""
    resolved = {key: default for key, (_, default) in schema.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            resolved[key] = _coerce(key, schema[key][0], raw)
    for key in schema:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(command: str, cfg: dict, path) -> None:
    """Persist the effective configuration so a run can be replayed exactly."""
    lines = [f"command={command}"]
    lines += [
        f"{key}={_format_value(val)}"
        for key, val in sorted(cfg.items())
        if val is not None
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ingest


def _read_text_table(path) -> tuple[list[str], list[list[float]]]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    ids: list[str] = []
    rows: list[list[float]] = []
    dim: int | None = None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 2:
            raise ParseError(f"{path}:{lineno}: need an id and at least one value")
        try:
            vec = [float(tok) for tok in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ParseError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
        ids.append(parts[0])
        rows.append(vec)
    if not ids:
        raise EmptyInputError(f"{path}: no data rows")
    return ids, rows


def cmd_ingest(args) -> int:
    import numpy as np

    from .store import EmbeddingTable, write_table

    ids, rows = _read_text_table(args.input)
    matrix = np.asarray(rows, dtype=np.float64)
    if args.normalize:
        norms = np.linalg.norm(matrix, axis=1)
        zero = np.flatnonzero(norms < 1e-12)
        if zero.size:
            raise DataError(f"row {ids[int(zero[0])]!r} has zero norm")
        matrix = matrix / norms[:, None]
    table = EmbeddingTable(ids=ids, matrix=matrix.astype(np.float32), source_tag=args.tag)
    write_table(table, args.out)
    write_snapshot(
        "ingest",
        {
            "input": args.input,
            "out": args.out,
            "tag": args.tag,
            "normalize": args.normalize,
        },
        args.out + ".cfg",
    )
    print(f"rows={table.count} dim={table.dim} out={args.out}")
    return 0


# ---------------------------------------------------------------------------
# triplets


def _read_captions(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            captions = [line.strip() for line in fh]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    captions = [c for c in captions if c]
    if not captions:
        raise EmptyInputError(f"{path}: no captions")
    return captions


def _reject(lineno: int, reason: str) -> None:
    sys.stderr.write(f"reject line={lineno} reason={json.dumps(reason)}\n")


def cmd_triplets(args) -> int:
    from dataclasses import replace

    from .store import save_triplets
    from .tensor import Pcg32, derive_stream
    from .triplets import (
        DEFAULT_RULES,
        LlmEndpointConfig,
        gen_template_triplet,
        llm_generate,
    )

    captions = _read_captions(args.captions)
    accepted = []
    rejected = 0

    if args.mode == "template":
        for i, caption in enumerate(captions):
            rng = Pcg32(args.seed, seq=derive_stream(_TRIPLET_STREAM, i))
            try:
                t = gen_template_triplet(caption, DEFAULT_RULES, rng)
            except ScotError as exc:
                rejected += 1
                _reject(i + 1, str(exc))
                continue
            accepted.append(replace(t, id=f"t{i:06d}"))
    else:
        _require(vars(args), "base_url", "model_name")
        cfg = LlmEndpointConfig(
            base_url=args.base_url,
            model_name=args.model_name,
            prompt_template=args.prompt_template,
            timeout=args.timeout,
            max_retries=args.max_retries,
            temperature=args.temperature,
        )
        from concurrent.futures import ThreadPoolExecutor

        def one(item):
            i, caption = item
            try:
                return i, llm_generate(caption, cfg), None
            except ScotError as exc:  # per-record failure; the run continues
                return i, None, str(exc)

        with ThreadPoolExecutor(max_workers=args.max_in_flight) as pool:
            outcomes = list(pool.map(one, enumerate(captions)))
        for i, triplet, reason in outcomes:
            if triplet is None:
                rejected += 1
                _reject(i + 1, reason)
            else:
                accepted.append(replace(triplet, id=f"t{i:06d}"))

    if not accepted:
        raise DataError(f"no triplet accepted ({rejected} rejected)")
    save_triplets(accepted, args.out)
    write_snapshot(
        "triplets",
        {"captions": args.captions, "mode": args.mode, "out": args.out, "seed": args.seed},
        args.out + ".cfg",
    )
    print(f"accepted={len(accepted)} rejected={rejected}")
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_SCHEMA = {
    "train_images": (str, None),
    "train_mods": (str, None),
    "train_targets": (str, None),
    "train_originals": (str, None),
    "image_targets": (str, None),
    "out_dir": (str, None),
    "resume": (str, None),
    "epochs": (int, 30),
    "batch_size": (int, 1024),
    "learning_rate": (float, 1e-4),
    "weight_decay": (float, 0.01),
    "seed": (int, 0),
    "init_seed": (int, 0),
    "target_source": (str, "text"),
    "margin": (float, 0.2),
    "alpha_pos": (float, 10.0),
    "alpha_neg": (float, 0.1),
    "dropout_rate": (float, 0.5),
}

_CKPT_NAME = re.compile(r"epoch_(\d+)\.ckpt$")


def cmd_train(args) -> int:
    cfg = resolve_config(_TRAIN_SCHEMA, args)
    _require(cfg, "train_images", "train_mods", "train_targets", "train_originals", "out_dir")
    if cfg["target_source"] == "image" and not cfg["image_targets"]:
        raise ConfigError("target_source=image requires an image_targets table")

    from .combiner import init_params, load_checkpoint
    from .loss import LossConfig
    from .store import assemble_training_set, read_table
    from .training import AdamWConfig, TrainConfig, train

    images = read_table(cfg["train_images"])
    mods = read_table(cfg["train_mods"])
    targets = read_table(cfg["train_targets"])
    originals = read_table(cfg["train_originals"])
    assembled = assemble_training_set(images, mods, targets, originals)
    if assembled.missing:
        sys.stderr.write(f"warning: {len(assembled.missing)} ids dropped by the join\n")
    image_targets = read_table(cfg["image_targets"]) if cfg["image_targets"] else None

    if cfg["resume"]:
        match = _CKPT_NAME.search(os.path.basename(cfg["resume"]))
        if not match:
            raise ConfigError(f"cannot infer epoch from checkpoint name {cfg['resume']!r}")
        start_epoch = int(match.group(1))
        params = load_checkpoint(cfg["resume"], expect_d=images.dim)
    else:
        start_epoch = 0
        params = init_params(
            images.dim, dropout_rate=cfg["dropout_rate"], seed=cfg["init_seed"]
        )

    train_config = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        target_source=cfg["target_source"],
        loss=LossConfig(
            margin=cfg["margin"],
            alpha_pos=cfg["alpha_pos"],
            alpha_neg=cfg["alpha_neg"],
        ),
        adamw=AdamWConfig(weight_decay=cfg["weight_decay"]),
    )
    os.makedirs(cfg["out_dir"], exist_ok=True)
    write_snapshot("train", cfg, os.path.join(cfg["out_dir"], "resolved.cfg"))
    result = train(
        assembled.examples,
        train_config,
        params,
        image_targets=image_targets,
        checkpoint_dir=cfg["out_dir"],
        metrics_path=os.path.join(cfg["out_dir"], "metrics.jsonl"),
        start_epoch=start_epoch,
    )
    print(
        f"examples={len(assembled.examples)} "
        f"epochs={cfg['epochs']} "
        f"checkpoints={len(result.checkpoint_paths)} "
        f"out_dir={cfg['out_dir']}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


_EVAL_SCHEMA = {
    "checkpoint": (str, None),
    "gallery": (str, None),
    "queries": (str, None),
    "mods": (str, None),
    "ks": (str, "1,5,10,50"),
    "modes": (str, "scot,text_only,image_only,image_plus_text"),
    "out": (str, None),
    "dump_dir": (str, None),
    "exclude_reference": (bool, False),
}


def _parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"ks={raw!r}: {exc}") from exc
    if not ks:
        raise ConfigError("ks is empty")
    return ks


def cmd_eval(args) -> int:
    cfg = resolve_config(_EVAL_SCHEMA, args)
    _require(cfg, "gallery", "queries", "mods")
    ks = _parse_ks(cfg["ks"])
    modes = [tok.strip() for tok in cfg["modes"].split(",") if tok.strip()]
    if not modes:
        raise ConfigError("modes is empty")

    from .combiner import load_checkpoint
    from .retrieval import EVAL_MODES, GalleryIndex, dump_results, evaluate, save_metric_records
    from .store import load_queries, read_table

    unknown = [m for m in modes if m not in EVAL_MODES]
    if unknown:
        raise ConfigError(f"unknown modes {unknown}; choose from {EVAL_MODES}")
    if "scot" in modes and not cfg["checkpoint"]:
        raise ConfigError("mode scot needs a checkpoint")

    gallery = read_table(cfg["gallery"])
    queries = load_queries(cfg["queries"])
    mods = read_table(cfg["mods"])
    index = GalleryIndex(gallery)
    params = None
    if cfg["checkpoint"]:
        params = load_checkpoint(cfg["checkpoint"], expect_d=gallery.dim)

    reports = [
        evaluate(
            index,
            params if mode == "scot" else None,
            queries,
            mods,
            ks,
            mode=mode,
            exclude_reference=cfg["exclude_reference"],
        )
        for mode in modes
    ]
    text = "\n".join(r.to_text() for r in reports)
    sys.stdout.write(text)
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
        write_snapshot("eval", cfg, cfg["out"] + ".cfg")
    if cfg["dump_dir"]:
        os.makedirs(cfg["dump_dir"], exist_ok=True)
        for report in reports:
            dump_results(
                report.results, os.path.join(cfg["dump_dir"], f"results_{report.mode}.jsonl")
            )
            save_metric_records(
                report, os.path.join(cfg["dump_dir"], f"metrics_{report.mode}.jsonl")
            )
    return 0


# ---------------------------------------------------------------------------
# search


def cmd_search(args) -> int:
    from .combiner import forward, load_checkpoint
    from .retrieval import GalleryIndex, search
    from .store import read_table

    gallery = read_table(args.gallery)
    index = GalleryIndex(gallery)
    params = load_checkpoint(args.checkpoint, expect_d=gallery.dim)
    if args.reference_id not in gallery:
        raise DataError(f"reference id {args.reference_id!r} not in gallery")
    mods = read_table(args.mod_embedding)
    if args.mod_id is not None:
        if args.mod_id not in mods:
            raise DataError(f"modification id {args.mod_id!r} not in {args.mod_embedding}")
        t_m = mods.row(args.mod_id)
    elif mods.count == 1:
        t_m = mods.matrix[0]
    else:
        raise ConfigError(f"{args.mod_embedding} holds {mods.count} rows; pass --mod-id")

    composed, s, _ = forward(params, gallery.row(args.reference_id), t_m, mode="eval")
    result = search(index, composed, args.k)
    print(f"s={s:.4f}")
    for rank, (id_, score) in enumerate(zip(result.ids, result.scores), start=1):
        print(f"{rank} {id_} {score:.6f}")
    return 0


# ---------------------------------------------------------------------------
# align


def cmd_align(args) -> int:
    import numpy as np

    from .store import read_table

    left = read_table(args.left)
    right = read_table(args.right)
    if left.dim != right.dim:
        raise DataError(f"dim mismatch: {left.dim} vs {right.dim}")
    shared = [id_ for id_ in left.ids if id_ in right]
    if not shared:
        raise DataError("no shared ids between the two tables")
    a = np.stack([left.row(i) for i in shared]).astype(np.float64)
    b = np.stack([right.row(i) for i in shared]).astype(np.float64)
    cosines = np.sum(a * b, axis=1) / (
        np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    )
    mean = float(np.mean(cosines))
    line = f"pairs={len(shared)} mean_cosine={mean:.6f}"
    if args.kappa is not None:
        from .loss import clip_i2t_loss

        line += f" clip_i2t={clip_i2t_loss(a, b, args.kappa):.6f}"
    print(line)
    if args.min_cosine is not None and mean < args.min_cosine:
        raise DataError(f"mean cosine {mean:.6f} below threshold {args.min_cosine}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_schema_flags(sub: argparse.ArgumentParser, schema: dict) -> None:
    # flags default to None so resolve_config can tell "given" from "default"
    for key, (kind, default) in schema.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            sub.add_argument(flag, action="store_const", const=True, default=None,
                             help=f"default {default}")
        else:
            sub.add_argument(flag, type=kind, default=None,
                             help=f"default {default}" if default is not None else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scotkit",
        description="Compose, train, and evaluate text-conditioned image retrieval "
        "over frozen-encoder embeddings.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads", type=int, default=1,
        help="BLAS thread cap; 1 (default) is bit-reproducible",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="text table -> SEMB file")
    p.add_argument("--input", required=True, help="lines of: id v1 v2 ... vd")
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default="ingest", help="source tag stored in the file")
    p.add_argument("--no-normalize", dest="normalize", action="store_false",
                   help="require rows to already be unit-norm")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("triplets", parents=[common], help="captions -> edit triplets")
    p.add_argument("--captions", required=True, help="one caption per line")
    p.add_argument("--mode", choices=("template", "llm"), default="template")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--prompt-template", dest="prompt_template",
                   default="Rewrite with one visual edit: {caption}")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-in-flight", type=int, default=4)
    p.set_defaults(func=cmd_triplets)

    p = sub.add_parser("train", parents=[common], help="train the composition network")
    p.add_argument("--config", help="key=value file; flags override it")
    _add_schema_flags(p, _TRAIN_SCHEMA)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="recall@K over a gallery")
    p.add_argument("--config", help="key=value file; flags override it")
    _add_schema_flags(p, _EVAL_SCHEMA)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", parents=[common], help="rank the gallery for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--reference-id", dest="reference_id", required=True)
    p.add_argument("--mod-embedding", dest="mod_embedding", required=True,
                   help="SEMB file holding the modification embedding")
    p.add_argument("--mod-id", dest="mod_id", help="row id when the file has several")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("align", parents=[common],
                       help="compare two embedding tables on shared ids")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--min-cosine", dest="min_cosine", type=float,
                   help="fail when the mean cosine falls below this")
    p.add_argument("--kappa", type=float,
                   help="also report the paired softmax loss at this temperature")
    p.set_defaults(func=cmd_align)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ScotError as exc:
        code, category = _classify(exc)
        sys.stderr.write(f"error: {category}: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
