"""Flat parameter storage and the binary checkpoint format."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DVNE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Params:
    """A flat float64 parameter vector partitioned into named, shaped regions.

    ``values`` and ``grad`` always have equal length.  Fields address their
    weights through :meth:`view`, which works on the raw vector and on a taped
    variable alike.
    """

    def __init__(self, layout, values=None):
        self.layout = [(str(name), tuple(int(n) for n in shape)) for name, shape in layout]
        self.slices = {}
        offset = 0
        for name, shape in self.layout:
            if name in self.slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self.slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset
        if values is None:
            values = np.zeros(offset)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offset,):
            raise ValueError(f"expected {offset} values, got {values.shape}")
        self.values = values.copy()
        self.grad = np.zeros(offset)

    def __contains__(self, name):
        return name in self.slices

    def names(self, prefix=""):
        return [name for name, _ in self.layout if name.startswith(prefix)]

    def view(self, theta, name):
        slc, shape = self.slices[name]
        return theta[slc].reshape(shape)

    def __getitem__(self, name):
        return self.view(self.values, name)

    def __setitem__(self, name, value):
        slc, shape = self.slices[name]
        self.values[slc] = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).reshape(-1)

    def mask(self, prefixes) -> np.ndarray:
        """Boolean mask over the flat vector selecting regions by name prefix."""
        out = np.zeros(self.size, dtype=bool)
        for name, _ in self.layout:
            if any(name.startswith(p) for p in prefixes):
                out[self.slices[name][0]] = True
        return out

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self):
        return Params(self.layout, self.values)


def save_checkpoint(params: Params, path) -> None:
    """Write ``params`` atomically: a versioned header, shape table, then LE float64 data."""
    path = Path(path)
    header = bytearray(MAGIC)
    header += struct.pack("<II", FORMAT_VERSION, len(params.layout))
    for name, shape in params.layout:
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", len(shape))
        header += struct.pack(f"<{len(shape)}Q", *shape)
    payload = bytes(header) + params.values.astype("<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    layout = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        layout.append((name, shape))
    values = np.frombuffer(data, dtype="<f8", offset=pos)
    params = Params(layout)
    if values.size != params.size:
        raise CheckpointError(f"{path}: expected {params.size} values, found {values.size}")
    params.values[:] = values
    return params
