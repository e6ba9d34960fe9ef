"""Binary named-tensor checkpoints.

Layout (little-endian): magic ``IQEC``, u32 format version, u32 parameter
count, then per parameter: u16 name length, UTF-8 name, u8 rank, u32 per
dimension, float32 data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"IQEC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class UnexpectedParameterError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise BadMagicError("not an IQEC checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4, "magic")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"data of {name}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    return out


def save(path, tensors: dict) -> None:
    arrays = {n: (t.data if isinstance(t, Tensor) else t) for n, t in tensors.items()}
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def load_into(module, tensors: dict[str, np.ndarray]) -> None:
    """Copy named arrays into ``module``'s parameters, checking the schema."""
    params = dict(module.named_parameters())
    missing = [n for n in params if n not in tensors]
    if missing:
        raise MissingParameterError(f"missing parameter(s) in checkpoint: {', '.join(missing[:5])}")
    extra = [n for n in tensors if n not in params]
    if extra:
        raise UnexpectedParameterError(f"checkpoint has unknown parameter(s): {', '.join(extra[:5])}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()


def config_path(path) -> Path:
    """Sidecar run-config file written next to each checkpoint."""
    return Path(str(path) + ".cfg")


def save_model(model, path) -> None:
    save(path, model.state_dict())
    model.cfg.save(config_path(path))


def load_model(path, cfg=None):
    from .config import RunConfig
    from .model import IQEClip

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    tensors = load(path)
    if cfg is None:
        side = config_path(path)
        cfg = RunConfig.load(side) if side.is_file() else RunConfig()
    model = IQEClip(cfg)
    load_into(model, tensors)
    return model
