"""Binary model container.

Layout (all integers little-endian)::

    magic      4 bytes  b"QRTD"
    version    u16
    count      u32      number of tensors
    count times:
        name_len   u16, then name_len bytes of UTF-8
        dtype      u8   (1 = float64)
        rank       u8
        extents    rank x u64
        data       prod(extents) x f64, C order
    sidecar_len u64, then sidecar_len bytes of UTF-8 JSON

The JSON sidecar carries per-layer quantization and polishing parameters
plus whatever run metadata the writer adds.  Floats in the sidecar are
written with ``repr`` precision, so they survive the round trip exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"QRTD"
VERSION = 1
DTYPE_F64 = 1
_F64 = np.dtype("<f8")


@dataclass
class ModelFile:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    sidecar: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<HI", VERSION, len(self.tensors)))
        for name, t in self.tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"tensor name too long: {name[:40]}...")
            arr = np.asarray(t, dtype=_F64)
            if arr.ndim > 0xFF:
                raise FormatError(f"{name}: rank {arr.ndim} too large")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
            out.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.write(arr.tobytes(order="C"))
        side = json.dumps(self.sidecar, sort_keys=True, allow_nan=True).encode("utf-8")
        out.write(struct.pack("<Q", len(side)))
        out.write(side)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelFile":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise FormatError("not a QRTD model file (bad magic)")
        version, count = r.unpack("<HI")
        if version != VERSION:
            raise FormatError(f"unsupported model file version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = r.unpack("<H")
            try:
                name = r.take(n).decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"tensor name is not UTF-8: {e}") from None
            dtype, rank = r.unpack("<BB")
            if dtype != DTYPE_F64:
                raise FormatError(f"{name}: unknown dtype tag {dtype}")
            shape = r.unpack(f"<{rank}Q")
            size = int(np.prod(shape, dtype=object)) if rank else 1
            buf = r.take(size * _F64.itemsize)
            if name in tensors:
                raise FormatError(f"duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=_F64).reshape(shape).astype(np.float64)
        (n,) = r.unpack("<Q")
        try:
            sidecar = json.loads(r.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt sidecar: {e}") from None
        if r.pos != len(data):
            raise FormatError(f"{len(data) - r.pos} trailing bytes after sidecar")
        return cls(tensors, sidecar)

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelFile":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file: wanted {n} bytes at offset {self.pos}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the target directory and rename into place,
    so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            os.fchmod(fh.fileno(), 0o666 & ~_umask())
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask
