"""Writer for the pipeline's VNF1 tensor interchange files.

Layout: magic bytes ``VNF1``, an ASCII header line
``dtype=f32;order=le;shape=D0,D1,...\\n`` and a little-endian float32
payload in row-major order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"VNF1"


def write_vnf(values: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to export non-finite logits")
    shape = ",".join(str(int(d)) for d in arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"dtype=f32;order=le;shape={shape}\n".encode("ascii"))
        fh.write(arr.tobytes())
