"""Named parameter store with gradient slots and a binary checkpoint format.

Every learnable tensor lives here under a unique dotted name. Iteration is
always in sorted-name order so optimizer sweeps, serialization, and global
norms are deterministic regardless of creation order.

Checkpoint layout (little-endian throughout):

    magic   5 bytes  b"VPAR1"
    count   u32      number of tensors
    per tensor, in sorted-name order:
        name_len u16, name utf-8 bytes
        rank     u8
        dims     u32 * rank
        payload  f64 * prod(dims), C order
    crc     u32      CRC32 of everything after the magic

Writes go to a temp file in the same directory followed by os.replace, so a
crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .autodiff import Var
from .errors import DataFormatError, ShapeError
from .rng import SplitMix64, derive

_MAGIC = b"VPAR1"


class ParamStore:
    """Named float64 parameters plus one gradient accumulator per parameter."""

    def __init__(self):
        self._params: dict[str, Var] = {}
        self._grads: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self._params)

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        """(name, Var) pairs in sorted-name order."""
        for name in self.names():
            yield name, self._params[name]

    def add(self, name: str, value) -> Var:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name: {name!r}")
        var = Var(np.array(value, dtype=np.float64))
        self._params[name] = var
        self._grads[name] = np.zeros(var.shape, dtype=np.float64)
        return var

    def create_uniform(self, name: str, shape: tuple, seed: int, bound: float) -> Var:
        """Parameter drawn uniform(-bound, bound) from the stream for (seed, name).

        Seeding by name (not creation order) means adding or removing other
        parameters never changes this one's initial value.
        """
        rng = SplitMix64(derive(seed, "param:" + name))
        n = int(np.prod(shape)) if shape else 1
        vals = rng.uniform_array(n, -bound, bound).reshape(shape)
        return self.add(name, vals)

    def get(self, name: str) -> Var:
        try:
            return self._params[name]
        except KeyError:
            raise ShapeError(f"unknown parameter: {name!r}") from None

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, backward_result, scale: float = 1.0):
        """Add gradients from one backward pass into the accumulators."""
        for name, var in self._params.items():
            g = backward_result.get(var)
            if g is not None:
                self._grads[name] += scale * g

    def global_grad_norm(self) -> float:
        total = 0.0
        for name in self.names():
            g = self._grads[name]
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def scale_grads(self, factor: float):
        for g in self._grads.values():
            g *= factor

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: var.value.copy() for name, var in self.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, var in self._params.items():
            if name not in state:
                raise DataFormatError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != var.shape:
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} "
                    f"!= expected {var.shape}"
                )
            var.value = arr.copy()

    def save(self, path: str):
        """Write all parameters to path atomically (temp file + rename)."""
        chunks = [struct.pack("<I", len(self._params))]
        for name, var in self.items():
            encoded = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            # and would change the stored rank. tobytes() is C-order anyway.
            arr = np.asarray(var.value, dtype="<f8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
        body = b"".join(chunks)
        blob = _MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)


def load_params(path: str) -> dict[str, np.ndarray]:
    """Read a VPAR1 checkpoint into a name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8:
        raise DataFormatError(f"{path}: truncated at {len(blob)} bytes")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(
            f"{path}: bad magic at offset 0: {blob[:len(_MAGIC)]!r}"
        )
    body, (stored_crc,) = blob[len(_MAGIC):-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise DataFormatError(
            f"{path}: CRC mismatch at offset {len(blob) - 4}: "
            f"stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    out: dict[str, np.ndarray] = {}
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise DataFormatError(
                f"{path}: truncated reading {what} at offset {len(_MAGIC) + pos}"
            )
        piece = body[pos : pos + n]
        pos += n
        return piece

    (count,) = struct.unpack("<I", need(4, "tensor count"))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n_items = 1
        for d in dims:
            n_items *= d
        payload = need(8 * n_items, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if pos != len(body):
        raise DataFormatError(
            f"{path}: {len(body) - pos} trailing bytes at offset {len(_MAGIC) + pos}"
        )
    return out
