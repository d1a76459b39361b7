"""Trajectory datasets and their binary container.

File layout (all integers little-endian)::

    b"SSOP"                      magic
    u32 version                  currently 1
    u64 n, n bytes               UTF-8 metadata, one ``key=value`` per line
    4 x array record             inputs, outputs, grid, coefficients

    array record:
    u8  present                  0 means the array is absent (coefficients only)
    u32 ndim
    u64 extent x ndim
    float64 x prod(extents)      row-major payload
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SSOP"
VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated or incompatible dataset files."""


@dataclass
class TrajectoryDataset:
    inputs: np.ndarray                 # [N, L, in_dim]
    outputs: np.ndarray                # [N, L, out_dim]
    grid: np.ndarray                   # [L]
    coeffs: np.ndarray | None = None   # [N, k]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.outputs = np.ascontiguousarray(self.outputs, dtype=np.float64)
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if self.coeffs is not None:
            self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        self.meta = {str(k): str(v) for k, v in self.meta.items()}
        self.validate()

    def validate(self) -> None:
        if self.inputs.ndim != 3 or self.outputs.ndim != 3:
            raise ValueError("TrajectoryDataset: inputs and outputs must be [N, L, dim]")
        n, L, _ = self.inputs.shape
        if self.outputs.shape[:2] != (n, L):
            raise ValueError(f"TrajectoryDataset: inputs {self.inputs.shape} and outputs "
                             f"{self.outputs.shape} disagree on N or L")
        if self.grid.shape != (L,):
            raise ValueError(f"TrajectoryDataset: grid length {self.grid.shape} != L={L}")
        if self.coeffs is not None and (self.coeffs.ndim != 2 or self.coeffs.shape[0] != n):
            raise ValueError("TrajectoryDataset: coeffs must be [N, k]")
        if L > 1:
            d = np.diff(self.grid)
            if not np.allclose(d, d[0], rtol=1e-9, atol=1e-12) or d[0] <= 0:
                raise ValueError("TrajectoryDataset: grid must be uniform and increasing")
        for name in ("inputs", "outputs", "grid", "coeffs"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"TrajectoryDataset: non-finite values in {name}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def length(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, split: str | None = None) -> TrajectoryDataset:
        idx = np.asarray(idx)
        meta = dict(self.meta)
        if split is not None:
            meta["split"] = split
        coeffs = None if self.coeffs is None else self.coeffs[idx]
        return TrajectoryDataset(self.inputs[idx], self.outputs[idx], self.grid, coeffs, meta)

    def truncate(self, L: int) -> TrajectoryDataset:
        """Keep the first ``L`` time steps."""
        return TrajectoryDataset(self.inputs[:, :L], self.outputs[:, :L], self.grid[:L],
                                 self.coeffs, dict(self.meta))

    def equals(self, other: TrajectoryDataset) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()
        return (same(self.inputs, other.inputs) and same(self.outputs, other.outputs)
                and same(self.grid, other.grid) and same(self.coeffs, other.coeffs)
                and self.meta == other.meta)


# ---------------------------------------------------------------------------
# serialisation


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for k in sorted(meta):
        v = str(meta[k])
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata key/value not representable: {k!r}={v!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetFormatError("metadata block is not valid UTF-8") from exc
    meta = {}
    for line in text.split("\n") if text else []:
        if "=" not in line:
            raise DatasetFormatError(f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def _encode_array(arr: np.ndarray | None) -> bytes:
    if arr is None:
        return struct.pack("<B", 0)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<BI", 1, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def encode_dataset(ds: TrajectoryDataset) -> bytes:
    meta = _encode_meta(ds.meta)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta]
    for arr in (ds.inputs, ds.outputs, ds.grid, ds.coeffs):
        parts.append(_encode_array(arr))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_dataset(buf: bytes) -> TrajectoryDataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported format version {version} (reader knows {VERSION})")
    (mlen,) = r.unpack("<Q", "metadata length")
    meta = _decode_meta(r.take(mlen, "metadata"))
    arrays = []
    for name in ("inputs", "outputs", "grid", "coeffs"):
        (present,) = r.unpack("<B", f"{name} flag")
        if not present:
            if name != "coeffs":
                raise DatasetFormatError(f"required array {name} is marked absent")
            arrays.append(None)
            continue
        (ndim,) = r.unpack("<I", f"{name} rank")
        if ndim > 8:
            raise DatasetFormatError(f"{name}: implausible rank {ndim}")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * count, f"{name} payload of shape {tuple(shape)}")
        arrays.append(np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - r.pos} trailing bytes after the last array")
    try:
        return TrajectoryDataset(*arrays, meta=meta)
    except ValueError as exc:
        raise DatasetFormatError(f"inconsistent dataset: {exc}") from exc


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(ds: TrajectoryDataset, path: str) -> None:
    atomic_write_bytes(path, encode_dataset(ds))


def read_dataset(path: str) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
