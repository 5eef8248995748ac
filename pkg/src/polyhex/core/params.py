"""Named parameter storage and its on-disk format.

The binary file holds the parameters concatenated as little-endian
float32; the sidecar manifest has one ``name shape offset`` line per
parameter (shape as comma-separated extents, offset in bytes).
"""

from __future__ import annotations

from collections.abc import Iterator, MutableMapping
from pathlib import Path

import numpy as np

from .tensor import Tensor


class ParameterStore(MutableMapping):
    """Ordered ``name -> Tensor`` map; iteration follows insertion order."""

    def __init__(self, dtype=np.float64):
        self._items: dict[str, Tensor] = {}
        self.dtype = np.dtype(dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.data = np.ascontiguousarray(t.data, dtype=self.dtype)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        t.requires_grad = True
        self._items[name] = t

    def __delitem__(self, name: str) -> None:
        del self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def normal(self, name: str, shape, rng: np.random.Generator, std: float = 0.02) -> Tensor:
        self[name] = rng.normal(0.0, std, size=shape)
        return self[name]

    def zeros(self, name: str, shape) -> Tensor:
        self[name] = np.zeros(shape)
        return self[name]

    def ones(self, name: str, shape) -> Tensor:
        self[name] = np.ones(shape)
        return self[name]

    def size(self) -> int:
        return int(sum(t.data.size for t in self._items.values()))

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for name, t in self._items.items():
            out[name] = t.data.astype(dtype)
            out[name].requires_grad = t.requires_grad
        return out

    def copy(self) -> "ParameterStore":
        out = self.astype(self.dtype)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}


def save_params(store: ParameterStore, path: str | Path) -> None:
    path = Path(path)
    lines = []
    offset = 0
    with open(path, "wb") as fh:
        for name, t in store.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            fh.write(raw)
            shape = ",".join(str(n) for n in t.shape) or "scalar"
            lines.append(f"{name} {shape} {offset}")
            offset += len(raw)
    manifest_path(path).write_text("\n".join(lines) + "\n")


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def load_params(path: str | Path, dtype=np.float64) -> ParameterStore:
    path = Path(path)
    raw = path.read_bytes()
    store = ParameterStore(dtype)
    for lineno, line in enumerate(manifest_path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape_s, off_s = line.split()
            shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split(","))
            offset = int(off_s)
        except ValueError as exc:
            raise ValueError(f"{manifest_path(path)}:{lineno}: malformed manifest line") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"parameter {name!r} runs past the end of {path}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        store[name] = arr.astype(dtype)
    return store
