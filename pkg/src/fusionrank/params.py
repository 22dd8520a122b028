"""Named parameter collections: seeded initialization and serialization.

Initialization draws from a Philox counter-based generator keyed by the
set's seed, so two sets built with the same seed and the same registration
sequence are bitwise identical. The on-disk container is a u64 header
length, a JSON header mapping each name to shape/dtype/offset, then the
little-endian raw f64 buffers.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

_DTYPE_TAG = "f64"


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """The project-wide RNG: 64-bit Philox keyed by (seed, stream)."""
    return np.random.Generator(
        np.random.Philox(key=[seed & (2**64 - 1), stream & (2**64 - 1)])
    )


class ParameterSet:
    """Ordered map from parameter path to trainable Tensor.

    Registration order is whatever the model constructor does (and must be
    deterministic); iteration is always lexicographic by name.
    """

    def __init__(self, rng_seed: int):
        self.rng_seed = int(rng_seed)
        self._rng = seeded_rng(self.rng_seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "fanin", fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "fanin":
            if fan_in is None:
                fan_in = shape[0] if len(shape) >= 2 else shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init: {init}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Bitwise snapshot of all parameter values."""
        return {n: t.data.copy() for n, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = set(self._params) ^ set(arrays)
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for name, arr in arrays.items():
            t = self._params[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            # Tensors are immutable by contract; swap the buffer wholesale.
            t.data = np.ascontiguousarray(arr, dtype=np.float64)

    # -- container file -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_arrays(path, {n: t.data for n, t in self.items()}, extra={"rng_seed": self.rng_seed})

    def load(self, path: str | Path) -> None:
        arrays, _ = load_arrays(path)
        self.load_arrays(arrays)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named f64 buffers: u64 header length + JSON header + payload."""
    entries = {}
    offset = 0
    payload = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": _DTYPE_TAG, "offset": offset}
        payload.append(raw)
        offset += len(raw)
    header = {"params": entries}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for name, entry in header["params"].items():
        if entry["dtype"] != _DTYPE_TAG:
            raise ValueError(f"unsupported dtype tag {entry['dtype']!r} for {name}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[name] = np.array(arr, dtype=np.float64)  # own, writable copy
    meta = {k: v for k, v in header.items() if k != "params"}
    return arrays, meta
