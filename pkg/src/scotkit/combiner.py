"""Composition network fusing a reference-image embedding with an edit-text embedding.

Forward graph for inputs V (image) and T_m (modification text), both d-dim:

    t_p     = drop(relu(W1 T_m + b1))            projection, p-dim
    v_p     = drop(relu(W2 V + b2))              projection, p-dim
    c       = concat(t_p, v_p)                   2p-dim
    g       = drop(relu(W3 c + b3))              hidden, h-dim
    o       = W4 g + b4                          d-dim residual
    s       = sigmoid(W5 c + b5)                 dynamic mixing scalar
    out     = o + s * T_m + (1 - s) * V
    V_c     = out / ||out||

Dropout is inverted (masks scaled by 1/keep) and active only in train mode;
eval mode is deterministic.  The backward pass is written out by hand; the
normalization layer contributes the Jacobian (I - V_c V_c^T) / ||out||.

Width defaults follow the published fusion architecture this reimplements:
p = 4d, h = 8d, dropout 0.5.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    BadDimsError,
    BadMagicError,
    BadRangeError,
    CorruptPayloadError,
    DegenerateOutputError,
    DimMismatchError,
    IoError,
    ShapeMismatchError,
    StaleCacheError,
    VersionMismatchError,
)
from .tensor import Pcg32, derive_stream

CKPT_MAGIC = b"SCOTCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIf")

OUT_NORM_FLOOR = 1e-9

TENSOR_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5")


@dataclass
class CombinerParams:
    """Weight tensors plus the dimensions they were built for."""

    d: int
    p: int
    h: int
    dropout_rate: float
    w1: np.ndarray  # (p, d)
    b1: np.ndarray  # (p,)
    w2: np.ndarray  # (p, d)
    b2: np.ndarray  # (p,)
    w3: np.ndarray  # (h, 2p)
    b3: np.ndarray  # (h,)
    w4: np.ndarray  # (d, h)
    b4: np.ndarray  # (d,)
    w5: np.ndarray  # (1, 2p)
    b5: np.ndarray  # (1,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_FIELDS}


EXPECTED_SHAPES = {
    "w1": lambda d, p, h: (p, d),
    "b1": lambda d, p, h: (p,),
    "w2": lambda d, p, h: (p, d),
    "b2": lambda d, p, h: (p,),
    "w3": lambda d, p, h: (h, 2 * p),
    "b3": lambda d, p, h: (h,),
    "w4": lambda d, p, h: (d, h),
    "b4": lambda d, p, h: (d,),
    "w5": lambda d, p, h: (1, 2 * p),
    "b5": lambda d, p, h: (1,),
}


def _check_dims(d: int, p: int, h: int, dropout_rate: float) -> None:
    if d < 1 or p < 1 or h < 1:
        raise BadDimsError(f"dims must be positive, got d={d} p={p} h={h}")
    if not 0.0 <= dropout_rate < 1.0:
        raise BadRangeError(f"dropout rate must be in [0, 1), got {dropout_rate}")


def init_params(
    d: int,
    p: int | None = None,
    h: int | None = None,
    dropout_rate: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> CombinerParams:
    """Seeded uniform init: weights in +-sqrt(1/fan_in), biases zero."""
    p = 4 * d if p is None else p
    h = 8 * d if h is None else h
    _check_dims(d, p, h, dropout_rate)
    rng = Pcg32(seed, seq=derive_init_stream(d, p, h))
    out: dict[str, np.ndarray] = {}
    fan_in = {"w1": d, "w2": d, "w3": 2 * p, "w4": h, "w5": 2 * p}
    for name in TENSOR_FIELDS:
        shape = EXPECTED_SHAPES[name](d, p, h)
        if name.startswith("b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = float(np.sqrt(1.0 / fan_in[name]))
            n = int(np.prod(shape))
            draws = rng.uniform(-bound, bound, n=n)
            out[name] = draws.reshape(shape).astype(dtype)
    return CombinerParams(d=d, p=p, h=h, dropout_rate=dropout_rate, **out)


def derive_init_stream(d: int, p: int, h: int) -> int:
    # distinct widths draw from distinct streams so resizing reshuffles cleanly
    return derive_stream(0x1017, d, p, h)


def zero_grads(params: CombinerParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors().items()}


@dataclass
class ForwardCache:
    """Intermediates from one forward call, consumed by backward."""

    params: CombinerParams
    mode: str
    v: np.ndarray
    t_m: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    m1: np.ndarray | None
    m2: np.ndarray | None
    m3: np.ndarray | None
    c: np.ndarray
    z3: np.ndarray
    g: np.ndarray
    s: np.ndarray          # (n, 1)
    out_raw: np.ndarray
    norms: np.ndarray      # (n, 1)
    composed: np.ndarray


def _dropout_mask(rng: Pcg32, size: int, rate: float, dtype) -> np.ndarray:
    keep = 1.0 - rate
    u = rng.uniform(0.0, 1.0, n=size)
    return ((u >= rate) / keep).astype(dtype)


def forward_batch(
    params: CombinerParams,
    v: np.ndarray,
    t_m: np.ndarray,
    mode: Literal["train", "eval"] = "eval",
    rngs: list[Pcg32] | None = None,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Compose a batch. Returns (composed rows, mixing scalars, cache).

    In train mode with a nonzero dropout rate, `rngs` supplies one generator
    per batch item; masks are drawn per item (t-branch, then v-branch, then
    hidden) so the result is independent of how items are grouped into
    batches.
    """
    if mode not in ("train", "eval"):
        raise BadRangeError(f"mode must be 'train' or 'eval', got {mode!r}")
    v = np.atleast_2d(np.asarray(v))
    t_m = np.atleast_2d(np.asarray(t_m))
    if v.shape != t_m.shape:
        raise DimMismatchError(f"image batch {v.shape} vs text batch {t_m.shape}")
    if v.shape[1] != params.d:
        raise DimMismatchError(f"input dim {v.shape[1]}, network expects {params.d}")
    n = v.shape[0]
    dtype = params.w1.dtype
    use_dropout = mode == "train" and params.dropout_rate > 0.0
    if use_dropout:
        if rngs is None or len(rngs) != n:
            raise BadRangeError("train-mode dropout needs one rng per batch item")
        m1 = np.empty((n, params.p), dtype=dtype)
        m2 = np.empty((n, params.p), dtype=dtype)
        m3 = np.empty((n, params.h), dtype=dtype)
        for i, rng in enumerate(rngs):
            m1[i] = _dropout_mask(rng, params.p, params.dropout_rate, dtype)
            m2[i] = _dropout_mask(rng, params.p, params.dropout_rate, dtype)
            m3[i] = _dropout_mask(rng, params.h, params.dropout_rate, dtype)
    else:
        m1 = m2 = m3 = None

    z1 = t_m @ params.w1.T + params.b1
    a1 = np.maximum(z1, 0)
    t_p = a1 * m1 if m1 is not None else a1
    z2 = v @ params.w2.T + params.b2
    a2 = np.maximum(z2, 0)
    v_p = a2 * m2 if m2 is not None else a2
    c = np.concatenate([t_p, v_p], axis=1)
    z3 = c @ params.w3.T + params.b3
    a3 = np.maximum(z3, 0)
    g = a3 * m3 if m3 is not None else a3
    o = g @ params.w4.T + params.b4
    zs = c @ params.w5.T + params.b5
    s = 1.0 / (1.0 + np.exp(-zs))
    out_raw = o + s * t_m + (1.0 - s) * v
    norms = np.linalg.norm(out_raw, axis=1, keepdims=True)
    if np.any(norms < OUT_NORM_FLOOR):
        row = int(np.argmax(norms[:, 0] < OUT_NORM_FLOOR))
        raise DegenerateOutputError(
            f"pre-normalization output of row {row} has norm {float(norms[row, 0]):.3e}"
        )
    composed = out_raw / norms
    cache = ForwardCache(
        params=params, mode=mode, v=v, t_m=t_m, z1=z1, z2=z2,
        m1=m1, m2=m2, m3=m3, c=c, z3=z3, g=g, s=s,
        out_raw=out_raw, norms=norms, composed=composed,
    )
    return composed, s[:, 0], cache


def forward(
    params: CombinerParams,
    v: np.ndarray,
    t_m: np.ndarray,
    mode: Literal["train", "eval"] = "eval",
    rng: Pcg32 | None = None,
) -> tuple[np.ndarray, float, ForwardCache]:
    """Single-example convenience wrapper around forward_batch."""
    composed, s, cache = forward_batch(
        params,
        np.asarray(v)[None, :],
        np.asarray(t_m)[None, :],
        mode=mode,
        rngs=[rng] if rng is not None else None,
    )
    return composed[0], float(s[0]), cache


def backward_batch(
    params: CombinerParams,
    cache: ForwardCache,
    d_composed: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of a scalar loss given d loss / d composed.

    Returns (parameter grads summed over the batch, d/dV, d/dT_m).  The cache
    must come from forward on these same params.
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced by a different parameter set")
    d_composed = np.asarray(d_composed, dtype=cache.composed.dtype)
    if d_composed.shape != cache.composed.shape:
        raise DimMismatchError(
            f"upstream grad {d_composed.shape} vs composed {cache.composed.shape}"
        )
    y, norms = cache.composed, cache.norms
    s, v, t_m = cache.s, cache.v, cache.t_m

    # normalization: d_out = (d_y - y (y . d_y)) / ||out||
    d_out = (d_composed - y * np.sum(y * d_composed, axis=1, keepdims=True)) / norms
    d_o = d_out
    d_s = np.sum(d_out * (t_m - v), axis=1, keepdims=True)
    d_v = (1.0 - s) * d_out
    d_tm = s * d_out

    d_zs = d_s * s * (1.0 - s)
    g_w5 = d_zs.T @ cache.c
    g_b5 = d_zs.sum(axis=0)
    d_c = d_zs @ params.w5

    g_w4 = d_o.T @ cache.g
    g_b4 = d_o.sum(axis=0)
    d_g = d_o @ params.w4
    d_a3 = d_g * cache.m3 if cache.m3 is not None else d_g
    d_z3 = d_a3 * (cache.z3 > 0)
    g_w3 = d_z3.T @ cache.c
    g_b3 = d_z3.sum(axis=0)
    d_c = d_c + d_z3 @ params.w3

    d_tp = d_c[:, : params.p]
    d_vp = d_c[:, params.p :]
    d_a1 = d_tp * cache.m1 if cache.m1 is not None else d_tp
    d_z1 = d_a1 * (cache.z1 > 0)
    g_w1 = d_z1.T @ t_m
    g_b1 = d_z1.sum(axis=0)
    d_tm = d_tm + d_z1 @ params.w1

    d_a2 = d_vp * cache.m2 if cache.m2 is not None else d_vp
    d_z2 = d_a2 * (cache.z2 > 0)
    g_w2 = d_z2.T @ v
    g_b2 = d_z2.sum(axis=0)
    d_v = d_v + d_z2 @ params.w2

    grads = {
        "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
        "w3": g_w3, "b3": g_b3, "w4": g_w4, "b4": g_b4,
        "w5": g_w5, "b5": g_b5,
    }
    return grads, d_v, d_tm


def save_checkpoint(params: CombinerParams, path) -> None:
    """Write float32 tensors with a fixed header and field order."""
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, params.d, params.p, params.h, params.dropout_rate
    )
    parts = [header]
    for name in TENSOR_FIELDS:
        parts.append(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path, expect_d: int | None = None) -> CombinerParams:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _CKPT_HEADER.size:
        raise BadMagicError(f"{path}: file shorter than header")
    magic, version, d, p, h, rate = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, reader supports {CKPT_VERSION}")
    if expect_d is not None and d != expect_d:
        raise ShapeMismatchError(f"{path}: checkpoint d={d}, pipeline expects d={expect_d}")
    try:
        _check_dims(d, p, h, rate)
    except (BadDimsError, BadRangeError) as exc:
        raise CorruptPayloadError(f"{path}: invalid header values ({exc})") from exc
    off = _CKPT_HEADER.size
    tensors: dict[str, np.ndarray] = {}
    for name in TENSOR_FIELDS:
        shape = EXPECTED_SHAPES[name](d, p, h)
        n = int(np.prod(shape))
        if len(blob) < off + 4 * n:
            raise CorruptPayloadError(f"{path}: tensor {name} truncated")
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        )
        off += 4 * n
    if off != len(blob):
        raise CorruptPayloadError(f"{path}: {len(blob) - off} trailing bytes")
    return CombinerParams(d=d, p=p, h=h, dropout_rate=float(rate), **tensors)
