"""Independent reimplementation of the hash-lexicon encoder, used to size
the probe tolerances asserted in interop.test.ts.

Not run by vitest.  Rerun by hand when the encoder or the frozen constants
change:

    python3 tests/sizing_oracle.py
"""

import math
import secrets

import numpy as np

from scotkit.loss import clip_i2t_loss


def fmix32(h: int) -> int:
    h &= 0xFFFFFFFF
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & 0xFFFFFFFF
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & 0xFFFFFFFF
    h ^= h >> 16
    return h


def fnv1a(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def hash_lexicon(data: bytes, dim: int) -> np.ndarray:
    acc = np.zeros(dim, dtype=np.float64)
    width = min(3, len(data))
    first = None
    for i in range(len(data) - width + 1):
        h = fmix32(fnv1a(data[i : i + width]))
        if first is None:
            first = h
        acc[h % dim] += -1.0 if h & 0x80000000 else 1.0
    norm = math.sqrt(float(np.dot(acc, acc)))
    if norm < 1e-12:
        acc[:] = 0.0
        acc[(first or 0) % dim] = 1.0
        norm = 1.0
    return (acc / norm).astype(np.float32)


def random_caption(rng) -> bytes:
    words = ["red", "blue", "dress", "shirt", "plain", "floral", "long",
             "bag", "hat", "coat", "striped", "shiny", "loose", "velvet"]
    n = 4 + rng.randrange(5)
    return " ".join(words[rng.randrange(len(words))] for _ in range(n)).encode()


def main() -> None:
    rng = secrets.SystemRandom()
    dim, n = 64, 10

    aligned_worst = 0.0
    unrelated_worst = 0.0
    shuffled_best = math.inf
    for _ in range(300):
        caps = set()
        while len(caps) < 2 * n:
            caps.add(random_caption(rng))
        caps = sorted(caps)
        a = np.stack([hash_lexicon(c, dim) for c in caps[:n]]).astype(np.float64)
        b = np.stack([hash_lexicon(c, dim) for c in caps[n:]]).astype(np.float64)

        aligned_worst = max(aligned_worst, clip_i2t_loss(a, a, 0.07))
        unrelated_worst = max(
            unrelated_worst, abs(clip_i2t_loss(a, b, 1.0) - math.log(n))
        )
        perm = np.arange(n)
        while True:
            rng.shuffle(perm)
            if not np.any(perm == np.arange(n)):
                break
        shuffled_best = min(shuffled_best, clip_i2t_loss(a, a[perm], 0.07))

    print(f"aligned self-pair loss, kappa=0.07, worst over 300: {aligned_worst:.6f}")
    print(f"|unrelated loss - log {n}|, kappa=1.0, worst over 300: {unrelated_worst:.6f}")
    print(f"shuffled self-pair loss, kappa=0.07, best over 300: {shuffled_best:.6f}")


if __name__ == "__main__":
    main()
