"""
Embedding tables and the SEMB binary format
===========================================

Build an id-aligned table of unit vectors, write it to disk, read it back
bit-exactly, and watch the row-norm policy accept, repair, or reject input.
"""

import tempfile
import os

import numpy as np

from scotkit import EmbeddingTable, read_table, write_table
from scotkit.errors import NotNormalizedError

out_dir = tempfile.mkdtemp(prefix="scotkit-demo-")

# A table is ids plus a float32 matrix with one unit-norm row per id.
rng = np.random.default_rng(7)
rows = rng.normal(size=(5, 8))
rows /= np.linalg.norm(rows, axis=1, keepdims=True)
table = EmbeddingTable(
    ids=["img-a", "img-b", "img-c", "img-d", "img-e"],
    matrix=rows.astype(np.float32),
    source_tag="demo/random-unit",
)
print(f"table: {table.count} rows, dim {table.dim}, tag {table.source_tag!r}")

# Round trip through the binary format. The payload is float32 row-major,
# so read-after-write reproduces the exact bits.
path = os.path.join(out_dir, "demo.semb")
write_table(table, path)
back = read_table(path)
print("ids match:", back.ids == table.ids)
print("bits match:", back.matrix.tobytes() == table.matrix.tobytes())
print("file size:", os.path.getsize(path), "bytes")

# Row norms are policed on construction. Norm error up to 1e-6 keeps the
# bits, up to 1e-3 is silently re-normalized, anything worse is rejected.
slightly_off = rows.astype(np.float32) * np.float32(1.0005)
repaired = EmbeddingTable(ids=table.ids, matrix=slightly_off, source_tag="demo/repaired")
print("repaired worst norm err:",
      float(np.abs(np.linalg.norm(repaired.matrix.astype(np.float64), axis=1) - 1).max()))

try:
    EmbeddingTable(ids=["bad"], matrix=np.array([[3.0, 4.0]], dtype=np.float32),
                   source_tag="demo/rejected")
except NotNormalizedError as exc:
    print("rejected:", exc)

# Lookups are by id; order is insertion order.
print("row img-c, first 4 dims:", np.round(back.row("img-c")[:4], 4))
