"""Dense tensor kernels and the seeded PRNG used everywhere randomness matters.

All stochastic behavior in the toolkit (weight init, dropout masks, batch
shuffles, synthetic data) flows through Pcg32 so that a run is a pure function
of its seeds.  Reductions use numpy's fixed evaluation order; nothing here
depends on thread count.

Float32 is the working precision for storage and training; verification code
passes float64 arrays through the same kernels.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    BadRangeError,
    DimMismatchError,
    EmptyInputError,
    ZeroVectorError,
)

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1

ZERO_NORM_FLOOR = 1e-12


class Pcg32:
    """PCG-XSH-RR 64/32 generator.

    Bit-compatible with the reference implementation: identical (seed, seq)
    pairs yield identical u32 streams on every platform.  `seq` selects an
    independent stream for the same seed.
    """

    __slots__ = ("_state", "_inc")

    def __init__(self, seed: int, seq: int = 0) -> None:
        self._inc = ((seq << 1) | 1) & _MASK64
        self._state = self._inc  # one step from state 0
        self._state = (self._state + seed) & _MASK64
        self._state = (self._state * _MULT + self._inc) & _MASK64

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u32s(self, n: int) -> np.ndarray:
        """Draw `n` outputs at once; bit-identical to n next_u32() calls."""
        if n < 0:
            raise BadRangeError(f"draw count must be non-negative, got {n}")
        if n == 0:
            return np.empty(0, dtype=np.uint32)
        # Affine recurrence unrolled: state_i = A^i s0 + (sum_{j<i} A^j) c,
        # all mod 2^64 via uint64 wraparound.
        with np.errstate(over="ignore"):
            a = np.uint64(_MULT)
            pow_a = np.empty(n, dtype=np.uint64)
            pow_a[0] = np.uint64(1)
            if n > 1:
                pow_a[1:] = np.multiply.accumulate(
                    np.full(n - 1, a, dtype=np.uint64)
                )
            geo = np.zeros(n, dtype=np.uint64)
            if n > 1:
                geo[1:] = np.cumsum(pow_a[:-1] * np.uint64(self._inc))
            states = pow_a * np.uint64(self._state) + geo
            x = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)).astype(
                np.uint32
            )
            rot = (states >> np.uint64(59)).astype(np.uint32)
            out = (x >> rot) | (x << ((np.uint32(32) - rot) & np.uint32(31)))
            last = states[-1]
            self._state = int(last * a + np.uint64(self._inc)) & _MASK64
        return out

    def uniform(self, lo: float = 0.0, hi: float = 1.0, n: int | None = None):
        """Uniform draw(s) in [lo, hi)."""
        if not (hi > lo):
            raise BadRangeError(f"need hi > lo, got [{lo}, {hi})")
        if n is None:
            u = self.next_u32() * 2.0**-32
            return lo + (hi - lo) * u
        u = self.u32s(n).astype(np.float64) * 2.0**-32
        return lo + (hi - lo) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        if n < 0:
            raise BadRangeError(f"draw count must be non-negative, got {n}")
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero.
        raw = self.u32s(2 * pairs).astype(np.float64)
        u1 = (raw[:pairs] + 1.0) * 2.0**-32
        u2 = raw[pairs:] * 2.0**-32
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]


def derive_stream(*parts: int) -> int:
    """Mix integers into a 63-bit stream selector for Pcg32 substreams.

    splitmix64-style finalizer over the running hash keeps distinct tuples on
    distinct streams for every practical purpose.
    """
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (p & _MASK64)) & _MASK64
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 31
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 27
    return h & ((1 << 63) - 1)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||_2, preserving dtype.

    Raises ZeroVectorError when the norm is below 1e-12.
    """
    arr = np.asarray(v)
    norm = float(np.linalg.norm(arr.astype(np.float64, copy=False)))
    if norm < ZERO_NORM_FLOOR:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3e}")
    return np.asarray(arr / norm, dtype=arr.dtype)


def row_norms(m: np.ndarray) -> np.ndarray:
    """Per-row Euclidean norms, computed in float64."""
    arr = np.asarray(m, dtype=np.float64)
    return np.linalg.norm(arr, axis=-1)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of `a` (NxD) and `b` (MxD).

    Norms are taken as-is (no unit-norm assumption).  Internals run in
    float64 regardless of input dtype; the result is cast back to the
    inputs' promoted dtype, so the cosine of a float32 row with itself is
    exactly 1.0.  Raises DimMismatchError on incompatible trailing
    dimensions and ZeroVectorError if any row has norm below 1e-12.
    """
    a = np.atleast_2d(np.asarray(a))
    b = np.atleast_2d(np.asarray(b))
    if a.shape[-1] != b.shape[-1]:
        raise DimMismatchError(f"row dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    out_dtype = np.promote_types(a.dtype, b.dtype)
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = np.linalg.norm(a64, axis=1, keepdims=True)
    nb = np.linalg.norm(b64, axis=1, keepdims=True)
    if np.any(na < ZERO_NORM_FLOOR) or np.any(nb < ZERO_NORM_FLOOR):
        raise ZeroVectorError("zero-norm row in cosine_matrix input")
    return ((a64 / na) @ (b64 / nb).T).astype(out_dtype)


def logsumexp(xs: np.ndarray) -> float:
    """log(sum(exp(xs))) with max-shift stabilization over a flat array."""
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyInputError("logsumexp of empty input")
    m = float(np.max(arr))
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(arr - m))))
