"""Self-describing binary tensor files (magic ``VNF1``).

Layout: 4 magic bytes, an ASCII header line
``dtype=f32;order=le;shape=D0,D1,...\\n`` and a packed little-endian
float32 payload in row-major order. Rank is arbitrary in the container;
the typed loaders below pin it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .rasters import FloatGrid, LogitVolume, ProbabilityVolume, RasterError

MAGIC = b"VNF1"
_MAX_HEADER = 256


class TensorFormatError(RasterError):
    """Raised for malformed tensor files."""


def write_tensor(values: np.ndarray, path: str | Path) -> None:
    """Write an array as little-endian float32. Non-f32 input is cast."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    shape = ",".join(str(int(d)) for d in arr.shape)
    header = f"dtype=f32;order=le;shape={shape}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(arr.tobytes())


def save_tensor(volume: LogitVolume | ProbabilityVolume | FloatGrid | np.ndarray, path: str | Path) -> None:
    arr = volume if isinstance(volume, np.ndarray) else volume.values
    write_tensor(arr, path)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a VNF1 file back into a float32 array of the stored shape."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tensor not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}")
        header = bytearray()
        while True:
            c = fh.read(1)
            if not c:
                raise TensorFormatError(f"{path}: truncated header")
            if c == b"\n":
                break
            header += c
            if len(header) > _MAX_HEADER:
                raise TensorFormatError(f"{path}: header too long")
        fields = {}
        for item in header.decode("ascii", errors="replace").split(";"):
            if "=" not in item:
                raise TensorFormatError(f"{path}: malformed header field {item!r}")
            key, val = item.split("=", 1)
            fields[key] = val
        if fields.get("dtype") != "f32":
            raise TensorFormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
        if fields.get("order") != "le":
            raise TensorFormatError(f"{path}: unsupported byte order {fields.get('order')!r}")
        try:
            shape = tuple(int(d) for d in fields["shape"].split(","))
        except (KeyError, ValueError):
            raise TensorFormatError(f"{path}: malformed shape in header") from None
        if any(d < 0 for d in shape):
            raise TensorFormatError(f"{path}: negative dimension in shape {shape}")
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise TensorFormatError(f"{path}: payload truncated ({len(payload)} of {count * 4} bytes)")
        extra = fh.read(1)
        if extra:
            raise TensorFormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return arr.copy()


def _checked_finite(arr: np.ndarray, path: str | Path) -> np.ndarray:
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise TensorFormatError(f"{path}: non-finite value at flat index {bad}")
    return arr


def load_tensor(path: str | Path) -> LogitVolume:
    """Load a rank-3 (H, W, K) tensor, validating finiteness."""
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise TensorFormatError(f"{path}: expected rank 3, got rank {arr.ndim}")
    return LogitVolume(_checked_finite(arr, path))


def load_grid(path: str | Path) -> FloatGrid:
    """Load a rank-2 (H, W) tensor; (H, W, 1) is accepted and squeezed."""
    arr = read_tensor(path)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise TensorFormatError(f"{path}: expected rank 2, got rank {arr.ndim}")
    return FloatGrid(_checked_finite(arr, path))
